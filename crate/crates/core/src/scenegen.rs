//! Procedural street-like scenes with dense labels.
//!
//! Both domains share one geometry model: a sky band at the top, a road band
//! at the bottom, buildings with a jagged skyline in between, vehicles on the
//! road and thin poles standing on it. Only appearance (palette, noise,
//! texture) differs between domains.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::pnm::Pnm;
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 5] = ["sky", "road", "building", "vehicle", "pole"];
pub const NUM_CLASSES: usize = 5;
pub const SKY: u8 = 0;
pub const ROAD: u8 = 1;
pub const BUILDING: u8 = 2;
pub const VEHICLE: u8 = 3;
pub const POLE: u8 = 4;

/// Sky occupies at most this fraction of rows from the top.
pub const SKY_BAND_MAX: f64 = 0.4;
/// Road occupies at most this fraction of rows from the bottom.
pub const ROAD_BAND_MAX: f64 = 0.45;

/// First sample id of evaluation splits; train splits start at 0.
pub const EVAL_ID_OFFSET: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            _ => Err(Error::Format(format!("unknown domain `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub domain: Domain,
    /// Mean RGB per class.
    pub palette: [[f64; 3]; NUM_CLASSES],
    pub noise_std: f64,
    /// Texture frequency in cycles per pixel.
    pub texture_freq: f64,
    pub texture_amp: f64,
    /// Per-image global brightness jitter (uniform half-width).
    pub brightness_jitter: f64,
    pub vehicles: (usize, usize),
    pub poles: (usize, usize),
    pub seed: u64,
}

impl DomainSpec {
    pub fn source(seed: u64) -> Self {
        Self {
            domain: Domain::Source,
            palette: [
                [0.55, 0.75, 0.95],
                [0.30, 0.30, 0.33],
                [0.65, 0.45, 0.35],
                [0.85, 0.15, 0.15],
                [0.90, 0.85, 0.20],
            ],
            noise_std: 0.04,
            texture_freq: 0.15,
            texture_amp: 0.05,
            brightness_jitter: 0.05,
            vehicles: (0, 3),
            poles: (0, 2),
            seed,
        }
    }

    pub fn target(seed: u64) -> Self {
        Self {
            domain: Domain::Target,
            palette: [
                [0.595, 0.625, 0.655],
                [0.47, 0.40, 0.345],
                [0.645, 0.475, 0.355],
                [0.745, 0.325, 0.255],
                [0.77, 0.675, 0.28],
            ],
            noise_std: 0.08,
            texture_freq: 0.3,
            texture_amp: 0.08,
            brightness_jitter: 0.1,
            vehicles: (0, 3),
            poles: (0, 2),
            // keep the two domains on distinct streams under one seed
            seed: seed ^ 0x7a11_9e37_79b9_7f4a,
        }
    }

    pub fn for_domain(domain: Domain, seed: u64) -> Self {
        match domain {
            Domain::Source => Self::source(seed),
            Domain::Target => Self::target(seed),
        }
    }

    fn manifest(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("domain".into(), self.domain.to_string());
        for (c, rgb) in self.palette.iter().enumerate() {
            m.insert(
                format!("palette.{}", CLASS_NAMES[c]),
                format!("{},{},{}", rgb[0], rgb[1], rgb[2]),
            );
        }
        m.insert("noise_std".into(), self.noise_std.to_string());
        m.insert("texture_freq".into(), self.texture_freq.to_string());
        m.insert("texture_amp".into(), self.texture_amp.to_string());
        m.insert(
            "brightness_jitter".into(),
            self.brightness_jitter.to_string(),
        );
        m.insert(
            "vehicles".into(),
            format!("{},{}", self.vehicles.0, self.vehicles.1),
        );
        m.insert("poles".into(), format!("{},{}", self.poles.0, self.poles.1));
        m.insert("seed".into(), self.seed.to_string());
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub id: u64,
    pub domain: Domain,
    /// `3×H×W`, values are multiples of 1/255 in [0, 1].
    pub image: Tensor,
    /// Row-major class indices.
    pub label: Vec<u8>,
    pub height: usize,
    pub width: usize,
}

impl SceneSample {
    pub fn labels_usize(&self) -> Vec<usize> {
        self.label.iter().map(|&l| l as usize).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DomainSpec,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<SceneSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn images(&self) -> Vec<Tensor> {
        self.samples.iter().map(|s| s.image.clone()).collect()
    }
}

/// Generates `n` samples with ids `first_id..first_id + n`. Each sample's
/// randomness depends only on `(spec.seed, id)`.
pub fn generate(
    spec: &DomainSpec,
    n: usize,
    height: usize,
    width: usize,
    classes: usize,
    first_id: u64,
) -> Result<Dataset> {
    if classes != NUM_CLASSES {
        return Err(Error::Config(format!(
            "scene generator models exactly {NUM_CLASSES} classes, got {classes}"
        )));
    }
    if height < 8 || width < 8 {
        return Err(Error::Config(format!(
            "scene size {height}x{width} too small (min 8x8)"
        )));
    }
    if spec.vehicles.0 > spec.vehicles.1 || spec.poles.0 > spec.poles.1 {
        return Err(Error::Config("inverted object count range".into()));
    }
    let samples = (0..n as u64)
        .map(|i| generate_one(spec, first_id + i, height, width))
        .collect();
    Ok(Dataset {
        spec: spec.clone(),
        height,
        width,
        samples,
    })
}

fn generate_one(spec: &DomainSpec, id: u64, h: usize, w: usize) -> SceneSample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(id);
    let label = layout(&mut rng, spec, h, w);
    let image = paint(&mut rng, spec, &label, h, w);
    SceneSample {
        id,
        domain: spec.domain,
        image,
        label,
        height: h,
        width: w,
    }
}

fn layout(rng: &mut ChaCha8Rng, spec: &DomainSpec, h: usize, w: usize) -> Vec<u8> {
    let hf = h as f64;
    let sky_rows = ((hf * rng.random_range(0.2..SKY_BAND_MAX)).round() as usize).max(1);
    let road_rows = ((hf * rng.random_range(0.25..ROAD_BAND_MAX)).round() as usize).max(1);
    let road_top = h - road_rows;
    let mut label = vec![BUILDING; h * w];

    // jagged skyline: building blocks may rise into the sky band
    let mut x = 0;
    while x < w {
        let bw = rng.random_range(3..=8).min(w - x);
        let rise = rng.random_range(0..=sky_rows / 2);
        let top = sky_rows - rise;
        for y in 0..top {
            for xx in x..x + bw {
                label[y * w + xx] = SKY;
            }
        }
        x += bw;
    }
    for y in road_top..h {
        label[y * w..(y + 1) * w].fill(ROAD);
    }

    let n_vehicles = rng.random_range(spec.vehicles.0..=spec.vehicles.1);
    for _ in 0..n_vehicles {
        let vw = rng.random_range(w / 8..=w / 4).max(2);
        let vh = rng.random_range(2..=(road_rows / 2).max(2)).min(road_rows);
        let x0 = rng.random_range(0..=w - vw);
        let y1 = rng.random_range(road_top + vh..=h);
        for y in y1 - vh..y1 {
            label[y * w + x0..y * w + x0 + vw].fill(VEHICLE);
        }
    }

    let n_poles = rng.random_range(spec.poles.0..=spec.poles.1);
    for _ in 0..n_poles {
        let pw = rng.random_range(1..=2);
        let x0 = rng.random_range(0..=w - pw);
        let base = (road_top + rng.random_range(0..=2)).min(h - 1);
        let height = rng.random_range(h / 4..=h / 2);
        let top = base.saturating_sub(height).max(sky_rows.saturating_sub(1));
        for y in top..=base {
            for xx in x0..x0 + pw {
                label[y * w + xx] = POLE;
            }
        }
    }
    label
}

fn paint(rng: &mut ChaCha8Rng, spec: &DomainSpec, label: &[u8], h: usize, w: usize) -> Tensor {
    let noise = Normal::new(0.0, spec.noise_std).expect("noise std is finite and non-negative");
    let brightness = rng.random_range(-spec.brightness_jitter..=spec.brightness_jitter);
    let waves: Vec<(f64, f64)> = (0..NUM_CLASSES)
        .map(|_| (rng.random_range(0.0..PI), rng.random_range(0.0..2.0 * PI)))
        .collect();
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let c = label[y * w + x] as usize;
            let (theta, phase) = waves[c];
            let u = x as f64 * theta.cos() + y as f64 * theta.sin();
            let tex = spec.texture_amp * (2.0 * PI * spec.texture_freq * u + phase).sin();
            for ch in 0..3 {
                let v = spec.palette[c][ch] + brightness + tex + noise.sample(rng);
                data[(ch * h + y) * w + x] = quantize(v);
            }
        }
    }
    Tensor::new(&[3, h, w], data).expect("buffer sized to shape")
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Writes `images/NNNN.ppm`, `labels/NNNN.pgm` and `manifest.txt`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let (img_dir, lbl_dir) = (dir.join("images"), dir.join("labels"));
    for d in [&img_dir, &lbl_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut manifest = ds.spec.manifest();
    manifest.insert("count".into(), ds.len().to_string());
    manifest.insert("height".into(), ds.height.to_string());
    manifest.insert("width".into(), ds.width.to_string());
    manifest.insert("classes".into(), NUM_CLASSES.to_string());
    manifest.insert(
        "first_id".into(),
        ds.samples.first().map_or(0, |s| s.id).to_string(),
    );
    let text: String = manifest.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    let mpath = dir.join("manifest.txt");
    std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;

    for (i, s) in ds.samples.iter().enumerate() {
        let (h, w) = (s.height, s.width);
        let mut rgb = Vec::with_capacity(3 * h * w);
        for p in 0..h * w {
            for ch in 0..3 {
                rgb.push((s.image.data()[ch * h * w + p] * 255.0).round() as u8);
            }
        }
        Pnm::rgb(w, h, rgb).save(&img_dir.join(format!("{i:04}.ppm")))?;
        Pnm::gray(w, h, s.label.clone()).save(&lbl_dir.join(format!("{i:04}.pgm")))?;
    }
    Ok(())
}

fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Format(format!("malformed manifest line `{l}`")))
        })
        .collect()
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m = parse_manifest(&text)?;
    let get = |k: &str| {
        m.get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("{}: missing `{k}`", mpath.display())))
    };
    let num = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|_| Error::Format(format!("{}: bad `{k}`", mpath.display())))
    };
    let pair = |k: &str| -> Result<(usize, usize)> {
        let v = get(k)?;
        v.split_once(',')
            .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
            .ok_or_else(|| Error::Format(format!("{}: bad `{k}`", mpath.display())))
    };
    let domain: Domain = get("domain")?.parse()?;
    let mut palette = [[0.0; 3]; NUM_CLASSES];
    for (c, name) in CLASS_NAMES.iter().enumerate() {
        let raw = get(&format!("palette.{name}"))?;
        let vals: Vec<f64> = raw.split(',').filter_map(|v| v.parse().ok()).collect();
        palette[c] = vals
            .try_into()
            .map_err(|_| Error::Format(format!("{}: bad palette for {name}", mpath.display())))?;
    }
    let spec = DomainSpec {
        domain,
        palette,
        noise_std: num("noise_std")?,
        texture_freq: num("texture_freq")?,
        texture_amp: num("texture_amp")?,
        brightness_jitter: num("brightness_jitter")?,
        vehicles: pair("vehicles")?,
        poles: pair("poles")?,
        seed: get("seed")?
            .parse()
            .map_err(|_| Error::Format(format!("{}: bad `seed`", mpath.display())))?,
    };
    let count = num("count")? as usize;
    let (height, width) = (num("height")? as usize, num("width")? as usize);
    let first_id = num("first_id")? as u64;

    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let img = Pnm::load(&dir.join("images").join(format!("{i:04}.ppm")))?;
        let lbl = Pnm::load(&dir.join("labels").join(format!("{i:04}.pgm")))?;
        if img.channels != 3
            || lbl.channels != 1
            || (img.width, img.height) != (width, height)
            || (lbl.width, lbl.height) != (width, height)
        {
            return Err(Error::Format(format!(
                "sample {i} has unexpected dimensions or channels"
            )));
        }
        if lbl.pixels.iter().any(|&v| v as usize >= NUM_CLASSES) {
            return Err(Error::Format(format!("sample {i} has out-of-range labels")));
        }
        let n = width * height;
        let image = Tensor::from_fn(&[3, height, width], |k| {
            let (ch, p) = (k / n, k % n);
            img.pixels[p * 3 + ch] as f64 / 255.0
        });
        samples.push(SceneSample {
            id: first_id + i as u64,
            domain,
            image,
            label: lbl.pixels,
            height,
            width,
        });
    }
    Ok(Dataset {
        spec,
        height,
        width,
        samples,
    })
}

/// True when sky pixels stay in the top band and road pixels in the bottom band.
pub fn satisfies_band_constraints(label: &[u8], h: usize, w: usize) -> bool {
    let sky_limit = (h as f64 * SKY_BAND_MAX).round() as usize;
    let road_limit = h - (h as f64 * ROAD_BAND_MAX).round() as usize;
    (0..h).all(|y| {
        let row = &label[y * w..(y + 1) * w];
        (y < sky_limit || !row.contains(&SKY)) && (y >= road_limit || !row.contains(&ROAD))
    })
}
