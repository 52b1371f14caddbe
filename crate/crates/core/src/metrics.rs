//! Evaluation: confusion-matrix IoU, entropy of correct vs incorrect pixels,
//! and pixel-wise similarity maps.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::sam::cosine_map;
use crate::segnet::{argmax_channels, SegNet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct IoUReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    /// `confusion[gt][pred]` pixel counts.
    pub confusion: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, pred: &[usize], gt: &[usize]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Dimension(format!(
                "iou: prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        for (&p, &t) in pred.iter().zip(gt) {
            if p >= self.classes || t >= self.classes {
                return Err(Error::Dimension(format!(
                    "class index out of range ({p}, {t})"
                )));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn report(&self) -> IoUReport {
        let c = self.classes;
        let at = |t: usize, p: usize| self.counts[t * c + p];
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = at(k, k);
                let fn_: u64 = (0..c).map(|p| at(k, p)).sum::<u64>() - tp;
                let fp: u64 = (0..c).map(|t| at(t, k)).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        IoUReport {
            per_class,
            miou,
            confusion: (0..c).map(|t| (0..c).map(|p| at(t, p)).collect()).collect(),
        }
    }
}

pub fn iou(pred: &[usize], gt: &[usize], classes: usize) -> Result<IoUReport> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(pred, gt)?;
    Ok(cm.report())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyStats {
    /// Mean entropy of correctly classified pixels, `None` if there are none.
    pub correct: Option<f64>,
    pub incorrect: Option<f64>,
}

/// Shannon entropy (natural log) of each pixel of `C×H×W` probabilities.
pub fn pixel_entropy(probs: &Tensor) -> Vec<f64> {
    let c = probs.shape()[0];
    let n = probs.len() / c;
    let d = probs.data();
    (0..n)
        .map(|i| {
            -(0..c)
                .map(|k| d[k * n + i])
                .filter(|&p| p > 0.0)
                .map(|p| p * p.ln())
                .sum::<f64>()
        })
        .collect()
}

/// Splits pixels by `argmax == gt` and averages entropy within each group.
pub fn entropy_analysis(probs: &Tensor, gt: &[usize]) -> Result<EntropyStats> {
    let pred = argmax_channels(probs);
    if pred.len() != gt.len() {
        return Err(Error::Dimension(format!(
            "entropy: {} pixels vs {} labels",
            pred.len(),
            gt.len()
        )));
    }
    let ent = pixel_entropy(probs);
    let (mut sc, mut nc, mut si, mut ni) = (0.0, 0usize, 0.0, 0usize);
    for ((p, t), e) in pred.iter().zip(gt).zip(ent) {
        if p == t {
            sc += e;
            nc += 1;
        } else {
            si += e;
            ni += 1;
        }
    }
    Ok(EntropyStats {
        correct: (nc > 0).then(|| sc / nc as f64),
        incorrect: (ni > 0).then(|| si / ni as f64),
    })
}

/// Average of per-image group entropies, skipping images where a group is empty.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EntropySummary {
    pub correct: f64,
    pub incorrect: f64,
}

pub fn summarize_entropy(stats: &[EntropyStats]) -> EntropySummary {
    let mean = |xs: Vec<f64>| {
        if xs.is_empty() {
            f64::NAN
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    EntropySummary {
        correct: mean(stats.iter().filter_map(|s| s.correct).collect()),
        incorrect: mean(stats.iter().filter_map(|s| s.incorrect).collect()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub iou: IoUReport,
    pub entropy: EntropySummary,
}

/// mIoU and entropy statistics of `net` over labelled images.
pub fn evaluate<'a>(
    net: &SegNet,
    samples: impl IntoIterator<Item = (&'a Tensor, &'a [u8])>,
) -> Result<EvalResult> {
    let classes = net.config().classes;
    let mut cm = ConfusionMatrix::new(classes);
    let mut ent = Vec::new();
    for (image, label) in samples {
        let gt: Vec<usize> = label.iter().map(|&l| l as usize).collect();
        let pred = net.predict(image)?;
        cm.add(&pred.argmax(), &gt)?;
        ent.push(entropy_analysis(&pred.probs, &gt)?);
    }
    Ok(EvalResult {
        iou: cm.report(),
        entropy: summarize_entropy(&ent),
    })
}

/// `ReLU(cos(vᵢ, vⱼ))` over the rows of `v` (`hw×C`), without row
/// normalization. Zero rows have zero similarity to everything.
pub fn pixel_similarity_map(v: &Tensor) -> Result<Tensor> {
    let [n, _] = v.dims2()?;
    let norms: Vec<f64> = (0..n)
        .map(|i| v.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    Ok(Tensor::from_fn(&[n, n], |k| {
        let (i, j) = (k / n, k % n);
        if norms[i] == 0.0 || norms[j] == 0.0 {
            return 0.0;
        }
        let dot: f64 = v.row(i).iter().zip(v.row(j)).map(|(a, b)| a * b).sum();
        (dot / (norms[i] * norms[j])).max(0.0)
    }))
}

/// Nearest-neighbour resize of a label grid.
pub fn resize_labels_nearest(
    label: &[u8],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<u8> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let y = ((oy as f64 + 0.5) * h as f64 / out_h as f64).floor() as usize;
        for ox in 0..out_w {
            let x = ((ox as f64 + 0.5) * w as f64 / out_w as f64).floor() as usize;
            out.push(label[y.min(h - 1) * w + x.min(w - 1)]);
        }
    }
    out
}

/// Flattened one-hot rows (`n×C`) of a label grid.
pub fn one_hot_rows(labels: &[u8], classes: usize) -> Tensor {
    Tensor::from_fn(&[labels.len(), classes], |i| {
        if labels[i / classes] as usize == i % classes {
            1.0
        } else {
            0.0
        }
    })
}

/// Similarity heatmap of the most confident pixel of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHeatmap {
    /// `H×W` cosine similarities, upsampled from logit resolution.
    pub heatmap: Tensor,
    /// Anchor pixel (row, col) at logit resolution.
    pub anchor: (usize, usize),
    /// Similarities at logit resolution (`h·w`).
    pub row: Vec<f64>,
}

/// For `C×h×w` logits, anchors at the pixel with the highest softmax
/// confidence among those predicted as `class` and returns its cosine
/// similarity to every pixel.
pub fn attention_visualization(
    z: &Tensor,
    class: usize,
    out_h: usize,
    out_w: usize,
) -> Result<AttentionHeatmap> {
    let [c, h, w] = z.dims3()?;
    if class >= c {
        return Err(Error::Dimension(format!(
            "class {class} out of range for {c} classes"
        )));
    }
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let p = g.softmax(zv, 0)?;
    let probs = g.value(p).clone();
    let pred = argmax_channels(&probs);
    let n = h * w;
    let anchor = (0..n)
        .filter(|&i| pred[i] == class)
        .max_by(|&a, &b| probs.data()[class * n + a].total_cmp(&probs.data()[class * n + b]))
        .ok_or(Error::ClassNotPredicted(class))?;
    let flat = z.channels_last_2d()?;
    let mut g = Graph::new();
    let a = g.constant(flat);
    let m = cosine_map(&mut g, a)?;
    let row = g.value(m).row(anchor).to_vec();
    let plane = g.constant(Tensor::new(&[1, h, w], row.clone())?);
    let up = g.bilinear_upsample(plane, out_h, out_w)?;
    let heatmap = g.value(up).reshape(&[out_h, out_w])?;
    Ok(AttentionHeatmap {
        heatmap,
        anchor: (anchor / w, anchor % w),
        row,
    })
}
