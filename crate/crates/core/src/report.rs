//! Report files: CSV tables and 8-bit heatmaps with exact min/max sidecars.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{
    attention_visualization, one_hot_rows, pixel_similarity_map, resize_labels_nearest,
};
use crate::pnm::Pnm;
use crate::scenegen::{DomainSpec, SceneSample};
use crate::segnet::SegNet;
use crate::tensor::Tensor;

/// A 2-D map written as a P5 image scaled linearly from its own extrema.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub values: Tensor,
    pub min: f64,
    pub max: f64,
}

impl Heatmap {
    pub fn new(values: Tensor) -> Result<Self> {
        values.dims2()?;
        if values.is_empty() {
            return Err(Error::Dimension("empty heatmap".into()));
        }
        let min = values.data().iter().copied().fold(f64::INFINITY, f64::min);
        let max = values
            .data()
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(Self { values, min, max })
    }

    /// Constant maps render black.
    pub fn to_pnm(&self) -> Pnm {
        let [h, w] = self.values.dims2().expect("checked in new");
        let span = self.max - self.min;
        let pixels = self
            .values
            .data()
            .iter()
            .map(|&v| {
                if span > 0.0 {
                    ((v - self.min) / span * 255.0).round() as u8
                } else {
                    0
                }
            })
            .collect();
        Pnm::gray(w, h, pixels)
    }

    pub fn sidecar(&self) -> String {
        format!("min = {:?}\nmax = {:?}\n", self.min, self.max)
    }

    /// Parses a sidecar back to `(min, max)`.
    pub fn parse_sidecar(text: &str) -> Result<(f64, f64)> {
        let mut min = None;
        let mut max = None;
        for line in text.lines() {
            let Some((k, v)) = line.split_once('=') else {
                continue;
            };
            let slot = match k.trim() {
                "min" => &mut min,
                "max" => &mut max,
                _ => continue,
            };
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad sidecar value `{}`", v.trim())))?;
            *slot = Some(v);
        }
        min.zip(max)
            .ok_or_else(|| Error::Format("sidecar lacks min or max".into()))
    }

    /// Writes `<stem>.pgm` and `<stem>.txt`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        self.to_pnm().save(&stem.with_extension("pgm"))?;
        write(&stem.with_extension("txt"), self.sidecar().as_bytes())
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Class map rendered with the source palette.
pub fn label_image(labels: &[usize], h: usize, w: usize) -> Pnm {
    let palette = DomainSpec::source(0).palette;
    let mut px = Vec::with_capacity(3 * h * w);
    for &l in labels {
        let rgb = palette.get(l).copied().unwrap_or([0.0; 3]);
        px.extend(rgb.iter().map(|c| (c * 255.0).round() as u8));
    }
    Pnm::rgb(w, h, px)
}

/// What [`emit_report`] writes.
pub struct ReportInput<'a> {
    /// Summary table (`table.csv`).
    pub table_csv: &'a str,
    /// Named metrics logs written as `metrics/<name>.csv`.
    pub metrics: &'a [(String, String)],
    /// Network used for the visualizations.
    pub net: &'a SegNet,
    /// Labelled images to visualize.
    pub samples: &'a [SceneSample],
}

/// Writes the table, the logs and, per sample, the prediction and ground
/// truth, the ground-truth similarity map and one attention heatmap per
/// predicted class. Returns the written paths in order.
pub fn emit_report(dir: &Path, input: &ReportInput<'_>) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut put = |path: PathBuf, bytes: &[u8]| -> Result<()> {
        write(&path, bytes)?;
        written.push(path);
        Ok(())
    };
    put(dir.join("table.csv"), input.table_csv.as_bytes())?;
    for (name, csv) in input.metrics {
        put(
            dir.join("metrics").join(format!("{name}.csv")),
            csv.as_bytes(),
        )?;
    }
    let classes = input.net.config().classes;
    for s in input.samples {
        let stem = dir.join("images").join(format!("{:07}", s.id));
        let (h, w) = (s.height, s.width);
        let pred = input.net.predict(&s.image)?;
        put(
            suffixed(&stem, "pred.ppm"),
            &label_image(&pred.argmax(), h, w).to_bytes(),
        )?;
        put(
            suffixed(&stem, "gt.ppm"),
            &label_image(&s.labels_usize(), h, w).to_bytes(),
        )?;

        let [_, zh, zw] = pred.logits.dims3()?;
        let small = resize_labels_nearest(&s.label, h, w, zh, zw);
        let sim = Heatmap::new(pixel_similarity_map(&one_hot_rows(&small, classes))?)?;
        put(suffixed(&stem, "gtsim.pgm"), &sim.to_pnm().to_bytes())?;
        put(suffixed(&stem, "gtsim.txt"), sim.sidecar().as_bytes())?;

        for c in 0..classes {
            let Ok(att) = attention_visualization(&pred.logits, c, h, w) else {
                continue;
            };
            let hm = Heatmap::new(att.heatmap)?;
            let name = format!("att{c}");
            put(
                suffixed(&stem, &format!("{name}.pgm")),
                &hm.to_pnm().to_bytes(),
            )?;
            let side = format!(
                "{}anchor = {},{}\n",
                hm.sidecar(),
                att.anchor.0,
                att.anchor.1
            );
            put(suffixed(&stem, &format!("{name}.txt")), side.as_bytes())?;
        }
    }
    Ok(written)
}

fn suffixed(stem: &Path, suffix: &str) -> PathBuf {
    let name = stem.file_name().and_then(|n| n.to_str()).unwrap_or("img");
    stem.with_file_name(format!("{name}_{suffix}"))
}

/// Cosine similarity of a single pixel's logits to every pixel, at logit
/// resolution; a plain recomputation used to cross-check heatmaps.
pub fn similarity_row(z: &Tensor, anchor: usize) -> Result<Vec<f64>> {
    let flat = z.channels_last_2d()?;
    let mut g = Graph::new();
    let a = g.constant(flat);
    let m = crate::sam::cosine_map(&mut g, a)?;
    Ok(g.value(m).row(anchor).to_vec())
}
