//! Class-wise confidence thresholds and pseudo-label maps for the target domain.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pnm::Pnm;
use crate::segnet::{Prediction, SegNet};
use crate::tensor::Tensor;

/// Stored label value for pixels without a pseudo label.
pub const IGNORE: u8 = 255;
/// Upper bound on every class threshold.
pub const THRESHOLD_CAP: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassThresholds(Vec<f64>);

impl ClassThresholds {
    /// Thresholds must lie in `(0, 0.9]` or be `+inf` for never-predicted classes.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        for (c, &t) in values.iter().enumerate() {
            if !(t == f64::INFINITY || (t > 0.0 && t <= THRESHOLD_CAP)) {
                return Err(Error::Config(format!(
                    "threshold {t} for class {c} outside (0, 0.9]"
                )));
            }
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    /// One value per line, `inf` for unattainable classes.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.0 {
            let _ = writeln!(s, "{t:?}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let values = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad threshold `{l}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(values).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Median of the list (lower middle for even lengths) capped at 0.9;
/// `+inf` for an empty list.
pub fn capped_median(confidences: &mut [f64]) -> f64 {
    if confidences.is_empty() {
        return f64::INFINITY;
    }
    confidences.sort_by(f64::total_cmp);
    confidences[(confidences.len() - 1) / 2].min(THRESHOLD_CAP)
}

/// Thresholds from predictions over the whole target training set.
pub fn thresholds_from_predictions(
    preds: &[Prediction],
    classes: usize,
) -> Result<ClassThresholds> {
    if preds.is_empty() {
        return Err(Error::Config(
            "threshold computation needs a non-empty target set".into(),
        ));
    }
    let mut lists = vec![Vec::new(); classes];
    for p in preds {
        for (c, conf) in p.argmax().into_iter().zip(p.confidence()) {
            lists[c].push(conf);
        }
    }
    ClassThresholds::new(lists.iter_mut().map(|l| capped_median(l)).collect())
}

pub fn compute_thresholds(net: &SegNet, images: &[Tensor]) -> Result<ClassThresholds> {
    if images.is_empty() {
        return Err(Error::Config(
            "threshold computation needs a non-empty target set".into(),
        ));
    }
    let preds = images
        .iter()
        .map(|x| net.predict(x))
        .collect::<Result<Vec<_>>>()?;
    thresholds_from_predictions(&preds, net.config().classes)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabelMap {
    pub height: usize,
    pub width: usize,
    /// Row-major class indices, [`IGNORE`] for unlabelled pixels.
    pub labels: Vec<u8>,
}

impl PseudoLabelMap {
    pub fn as_options(&self) -> Vec<Option<usize>> {
        self.labels
            .iter()
            .map(|&l| (l != IGNORE).then_some(l as usize))
            .collect()
    }

    pub fn to_pnm(&self) -> Pnm {
        Pnm::gray(self.width, self.height, self.labels.clone())
    }

    pub fn from_pnm(p: Pnm, classes: usize) -> Result<Self> {
        if p.channels != 1 {
            return Err(Error::Format(
                "pseudo-label map must be a P5 graymap".into(),
            ));
        }
        if let Some(&bad) = p
            .pixels
            .iter()
            .find(|&&v| v != IGNORE && v as usize >= classes)
        {
            return Err(Error::Format(format!(
                "pseudo label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            height: p.height,
            width: p.width,
            labels: p.pixels,
        })
    }
}

/// Labels each pixel with its argmax class when the max probability strictly
/// exceeds that class's threshold, else [`IGNORE`].
pub fn labels_from_prediction(
    pred: &Prediction,
    thresholds: &ClassThresholds,
) -> Result<PseudoLabelMap> {
    let [c, h, w] = pred.probs.dims3()?;
    if c != thresholds.classes() {
        return Err(Error::Dimension(format!(
            "{c}-class prediction vs {} thresholds",
            thresholds.classes()
        )));
    }
    let labels = pred
        .argmax()
        .into_iter()
        .zip(pred.confidence())
        .map(|(cls, conf)| {
            if conf > thresholds.values()[cls] {
                cls as u8
            } else {
                IGNORE
            }
        })
        .collect();
    Ok(PseudoLabelMap {
        height: h,
        width: w,
        labels,
    })
}

pub fn generate_pseudo_labels(
    net: &SegNet,
    image: &Tensor,
    thresholds: &ClassThresholds,
) -> Result<PseudoLabelMap> {
    labels_from_prediction(&net.predict(image)?, thresholds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoStats {
    pub coverage: f64,
    pub per_class: Vec<usize>,
}

pub fn pseudo_label_stats(maps: &[PseudoLabelMap], classes: usize) -> PseudoStats {
    let mut per_class = vec![0usize; classes];
    let mut total = 0usize;
    for m in maps {
        total += m.labels.len();
        for &l in &m.labels {
            if l != IGNORE {
                per_class[l as usize] += 1;
            }
        }
    }
    let labelled: usize = per_class.iter().sum();
    PseudoStats {
        coverage: if total == 0 {
            0.0
        } else {
            labelled as f64 / total as f64
        },
        per_class,
    }
}

/// Pseudo labels for a target set plus the thresholds that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoStore {
    pub thresholds: ClassThresholds,
    pub maps: Vec<PseudoLabelMap>,
}

impl PseudoStore {
    /// Recomputes thresholds from `net` and labels every image.
    pub fn build(net: &SegNet, images: &[Tensor]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Config(
                "pseudo labelling needs a non-empty target set".into(),
            ));
        }
        let preds = images
            .iter()
            .map(|x| net.predict(x))
            .collect::<Result<Vec<_>>>()?;
        let thresholds = thresholds_from_predictions(&preds, net.config().classes)?;
        let maps = preds
            .iter()
            .map(|p| labels_from_prediction(p, &thresholds))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { thresholds, maps })
    }

    pub fn stats(&self) -> PseudoStats {
        pseudo_label_stats(&self.maps, self.thresholds.classes())
    }

    /// Writes `NNNN.pgm` per map and `thresholds.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, m) in self.maps.iter().enumerate() {
            m.to_pnm().save(&dir.join(format!("{i:04}.pgm")))?;
        }
        let tpath = dir.join("thresholds.txt");
        std::fs::write(&tpath, self.thresholds.to_text()).map_err(|e| Error::io(&tpath, e))
    }

    pub fn load(dir: &Path, count: usize) -> Result<Self> {
        let tpath = dir.join("thresholds.txt");
        let text = std::fs::read_to_string(&tpath).map_err(|e| Error::io(&tpath, e))?;
        let thresholds = ClassThresholds::from_text(&text)?;
        let maps = (0..count)
            .map(|i| {
                PseudoLabelMap::from_pnm(
                    Pnm::load(&dir.join(format!("{i:04}.pgm")))?,
                    thresholds.classes(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { thresholds, maps })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred_from_pixels(pixels: &[&[f64]]) -> Prediction {
        let c = pixels[0].len();
        let n = pixels.len();
        let probs = Tensor::from_fn(&[c, 1, n], |i| pixels[i % n][i / n]);
        Prediction {
            probs,
            logits: Tensor::zeros(&[c, 1, n]),
        }
    }

    #[test]
    fn median_examples() {
        assert_eq!(capped_median(&mut [0.95, 0.96, 0.97]), 0.9);
        assert_eq!(capped_median(&mut [0.6, 0.2, 0.4]), 0.4);
        assert_eq!(capped_median(&mut [0.1, 0.4, 0.3, 0.2]), 0.2);
        assert_eq!(capped_median(&mut []), f64::INFINITY);
    }

    #[test]
    fn gate_on_argmax_class() {
        let t = ClassThresholds::new(vec![0.5, 0.5]).unwrap();
        let m = labels_from_prediction(&pred_from_pixels(&[&[0.1, 0.9]]), &t).unwrap();
        assert_eq!(m.labels, vec![1]);
        let t = ClassThresholds::new(vec![0.7, 0.2]).unwrap();
        let m = labels_from_prediction(&pred_from_pixels(&[&[0.6, 0.4]]), &t).unwrap();
        assert_eq!(m.labels, vec![IGNORE]);
    }

    #[test]
    fn confidence_equal_to_threshold_is_ignored() {
        let t = ClassThresholds::new(vec![0.75, 0.9]).unwrap();
        let m = labels_from_prediction(&pred_from_pixels(&[&[0.75, 0.25]]), &t).unwrap();
        assert_eq!(m.labels, vec![IGNORE]);
    }

    #[test]
    fn ties_break_to_lowest_class() {
        let t = ClassThresholds::new(vec![0.4, 0.1]).unwrap();
        let m = labels_from_prediction(&pred_from_pixels(&[&[0.5, 0.5]]), &t).unwrap();
        assert_eq!(m.labels, vec![0]);
    }

    #[test]
    fn unpredicted_class_is_unattainable() {
        let preds = [pred_from_pixels(&[&[0.8, 0.2], &[0.7, 0.3]])];
        let t = thresholds_from_predictions(&preds, 2).unwrap();
        assert_eq!(t.values()[1], f64::INFINITY);
        assert_eq!(t.values()[0], 0.7);
        assert!(thresholds_from_predictions(&[], 2).is_err());
    }

    #[test]
    fn stats_extremes() {
        let all_ignore = PseudoLabelMap {
            height: 2,
            width: 2,
            labels: vec![IGNORE; 4],
        };
        assert_eq!(pseudo_label_stats(&[all_ignore], 3).coverage, 0.0);
        let full = PseudoLabelMap {
            height: 1,
            width: 3,
            labels: vec![0, 2, 2],
        };
        let s = pseudo_label_stats(&[full], 3);
        assert_eq!(s.coverage, 1.0);
        assert_eq!(s.per_class, vec![1, 0, 2]);
    }

    #[test]
    fn threshold_text_round_trip() {
        let t = ClassThresholds::new(vec![0.9, 0.123456789, f64::INFINITY]).unwrap();
        assert_eq!(ClassThresholds::from_text(&t.to_text()).unwrap(), t);
        assert!(ClassThresholds::new(vec![0.95]).is_err());
    }
}
