//! Checkpoint container: a text manifest of `key=value` lines followed by
//! serialized tensors in declaration order.
//!
//! ```text
//! PIXCORR-CKPT 1
//! kind=segnet
//! ...
//! tensors=8
//! --
//! <PCT1 tensor><PCT1 tensor>...
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const HEADER: &str = "PIXCORR-CKPT 1";
const SEPARATOR: &str = "--";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: BTreeMap<String, String>,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(manifest: BTreeMap<String, String>, tensors: Vec<Tensor>) -> Self {
        Self { manifest, tensors }
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.manifest
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("checkpoint manifest lacks `{key}`")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("checkpoint key `{key}` has invalid value `{raw}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(HEADER.as_bytes());
        out.push(b'\n');
        for (k, v) in &self.manifest {
            out.extend_from_slice(format!("{k}={v}\n").as_bytes());
        }
        out.extend_from_slice(format!("tensors={}\n{SEPARATOR}\n", self.tensors.len()).as_bytes());
        for t in &self.tensors {
            t.write_to(&mut out).expect("writing to a Vec cannot fail");
        }
        out
    }

    pub fn from_reader<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        let read_line = |r: &mut BufReader<R>, line: &mut String| -> Result<()> {
            line.clear();
            let n = r
                .read_line(line)
                .map_err(|e| Error::Format(format!("unreadable checkpoint manifest: {e}")))?;
            if n == 0 {
                return Err(Error::Format("checkpoint manifest truncated".into()));
            }
            Ok(())
        };
        read_line(&mut r, &mut line)?;
        if line.trim_end() != HEADER {
            return Err(Error::Format(format!(
                "bad checkpoint header `{}`",
                line.trim_end()
            )));
        }
        let mut manifest = BTreeMap::new();
        let mut count = None;
        loop {
            read_line(&mut r, &mut line)?;
            let l = line.trim_end();
            if l == SEPARATOR {
                break;
            }
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("malformed manifest line `{l}`")))?;
            if k == "tensors" {
                count = Some(
                    v.parse::<usize>()
                        .map_err(|_| Error::Format(format!("bad tensor count `{v}`")))?,
                );
            } else {
                manifest.insert(k.to_string(), v.to_string());
            }
        }
        let count =
            count.ok_or_else(|| Error::Format("checkpoint manifest lacks tensor count".into()))?;
        let tensors = (0..count)
            .map(|_| Tensor::read_from(&mut r))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(f)
    }
}
