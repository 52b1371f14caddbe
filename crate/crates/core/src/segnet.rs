//! Small fully convolutional segmentation network `p = softmax(upsample(z))`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub in_channels: usize,
    /// Output channels of each 3×3 feature block.
    pub widths: Vec<usize>,
    /// Total spatial downsample factor; the first `log2(d)` blocks use stride 2.
    pub downsample: usize,
    pub classes: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![16, 32, 32],
            downsample: 4,
            classes: 5,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.downsample.is_power_of_two() {
            return Err(Error::Config(format!(
                "downsample {} is not a power of two",
                self.downsample
            )));
        }
        let strided = self.downsample.trailing_zeros() as usize;
        if strided > self.widths.len() {
            return Err(Error::Config(format!(
                "downsample {} needs {strided} strided blocks but only {} are configured",
                self.downsample,
                self.widths.len()
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("class count {} < 2", self.classes)));
        }
        if self.in_channels == 0 || self.widths.contains(&0) {
            return Err(Error::Config("zero channel width".into()));
        }
        Ok(())
    }

    fn strides(&self) -> impl Iterator<Item = usize> + '_ {
        let strided = self.downsample.trailing_zeros() as usize;
        (0..self.widths.len()).map(move |i| if i < strided { 2 } else { 1 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    fn fan_in(&self) -> usize {
        self.weight.shape()[1..].iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegNet {
    cfg: NetConfig,
    /// Feature extractor blocks (conv + relu) followed by the 1×1 head.
    layers: Vec<ConvLayer>,
}

/// Graph handles for one forward pass's parameters, in declaration order.
#[derive(Debug, Clone)]
pub struct BoundParams(pub Vec<Var>);

/// Class probabilities at full resolution and logits at reduced resolution,
/// both channel-first.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub probs: Tensor,
    pub logits: Tensor,
}

impl Prediction {
    /// Per-pixel argmax of the probabilities, lowest index on ties.
    pub fn argmax(&self) -> Vec<usize> {
        argmax_channels(&self.probs)
    }

    /// Per-pixel maximum probability.
    pub fn confidence(&self) -> Vec<f64> {
        let [c, h, w] = self.probs.dims3().expect("probs are rank 3");
        let n = h * w;
        let d = self.probs.data();
        (0..n)
            .map(|i| {
                (0..c)
                    .map(|k| d[k * n + i])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    }
}

/// Argmax over the leading channel axis of a `C×H×W` tensor.
pub fn argmax_channels(t: &Tensor) -> Vec<usize> {
    let c = t.shape()[0];
    let n = t.len() / c;
    let d = t.data();
    (0..n)
        .map(|i| {
            let mut best = 0;
            for k in 1..c {
                if d[k * n + i] > d[best * n + i] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

impl SegNet {
    /// Fan-in scaled uniform initialization: He bounds `sqrt(6/fan_in)` for
    /// relu blocks, `sqrt(3/fan_in)` for the linear head; zero biases.
    pub fn init(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(cfg.widths.len() + 1);
        let mut c_in = cfg.in_channels;
        for (&width, stride) in cfg.widths.iter().zip(cfg.strides()) {
            layers.push(uniform_layer(&mut rng, width, c_in, 3, stride, 1, 6.0));
            c_in = width;
        }
        layers.push(uniform_layer(&mut rng, cfg.classes, c_in, 1, 1, 0, 3.0));
        Ok(Self {
            cfg: cfg.clone(),
            layers,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    /// Parameters in declaration order: weight then bias per layer.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Registers parameters as graph leaves.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        BoundParams(
            self.params()
                .into_iter()
                .map(|p| g.leaf(p.clone(), trainable))
                .collect(),
        )
    }

    fn check_input(&self, shape: &[usize]) -> Result<(usize, usize)> {
        let d = self.cfg.downsample;
        match *shape {
            [c, h, w]
                if c == self.cfg.in_channels && h % d == 0 && w % d == 0 && h > 0 && w > 0 =>
            {
                Ok((h, w))
            }
            _ => Err(Error::Dimension(format!(
                "input {shape:?} incompatible with {} channels and downsample {d}",
                self.cfg.in_channels
            ))),
        }
    }

    /// Logits `z` of shape `C×(H/d)×(W/d)`.
    pub fn forward_logits(&self, g: &mut Graph, params: &BoundParams, image: Var) -> Result<Var> {
        self.check_input(g.value(image).shape())?;
        let mut x = image;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (w, b) = (params.0[2 * i], params.0[2 * i + 1]);
            x = g.conv2d(x, w, Some(b), layer.stride, layer.padding)?;
            if i < last {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    /// `softmax(upsample(z))` over the channel axis.
    pub fn probs_from_logits(&self, g: &mut Graph, z: Var, h: usize, w: usize) -> Result<Var> {
        let up = g.bilinear_upsample(z, h, w)?;
        g.softmax(up, 0)
    }

    /// Inference without gradients.
    pub fn predict(&self, image: &Tensor) -> Result<Prediction> {
        let (h, w) = self.check_input(image.shape())?;
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let x = g.constant(image.clone());
        let z = self.forward_logits(&mut g, &params, x)?;
        let p = self.probs_from_logits(&mut g, z, h, w)?;
        Ok(Prediction {
            probs: g.value(p).clone(),
            logits: g.value(z).clone(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut m = BTreeMap::new();
        m.insert("kind".into(), "segnet".into());
        m.insert("in_channels".into(), self.cfg.in_channels.to_string());
        m.insert(
            "widths".into(),
            self.cfg
                .widths
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        m.insert("downsample".into(), self.cfg.downsample.to_string());
        m.insert("classes".into(), self.cfg.classes.to_string());
        Checkpoint::new(m, self.params().into_iter().cloned().collect())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.get("kind")? != "segnet" {
            return Err(Error::Format(format!(
                "expected segnet checkpoint, found `{}`",
                ck.get("kind")?
            )));
        }
        let widths = ck
            .get("widths")?
            .split(',')
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Format(format!("bad width `{s}`")))
            })
            .collect::<Result<Vec<usize>>>()?;
        let cfg = NetConfig {
            in_channels: ck.parse("in_channels")?,
            widths,
            downsample: ck.parse("downsample")?,
            classes: ck.parse("classes")?,
        };
        let mut net = Self::init(&cfg, 0).map_err(|e| Error::Format(e.to_string()))?;
        if ck.tensors.len() != net.params().len() {
            return Err(Error::Format(format!(
                "segnet checkpoint has {} tensors, config needs {}",
                ck.tensors.len(),
                net.params().len()
            )));
        }
        for (p, t) in net.params_mut().into_iter().zip(&ck.tensors) {
            if p.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor shape {:?} != expected {:?}",
                    t.shape(),
                    p.shape()
                )));
            }
            *p = t.clone();
        }
        Ok(net)
    }
}

fn uniform_layer(
    rng: &mut ChaCha8Rng,
    c_out: usize,
    c_in: usize,
    k: usize,
    stride: usize,
    padding: usize,
    gain: f64,
) -> ConvLayer {
    let fan_in = c_in * k * k;
    let bound = (gain / fan_in as f64).sqrt();
    let weight = Tensor::from_fn(&[c_out, c_in, k, k], |_| rng.random_range(-bound..bound));
    ConvLayer {
        weight,
        bias: Tensor::zeros(&[c_out]),
        stride,
        padding,
    }
}

/// Target standard deviation of the first block's weights under [`SegNet::init`].
pub fn he_uniform_std(net: &SegNet, layer: usize) -> f64 {
    (2.0 / net.layers[layer].fan_in() as f64).sqrt()
}
