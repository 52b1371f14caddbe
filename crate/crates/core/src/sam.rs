//! Self-attention over segmentation logits.
//!
//! Logits `z` (`hw×C`, pixels row-major over (h, w)) are optionally mapped by
//! a 1×1 convolution to `A`. The cosine similarity of the rows of `A` is
//! rectified and L1-normalized per row into `M′`, and the module emits
//! `z′ = M′·z` and `z″ = z + z′`.

use std::collections::BTreeMap;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Guard for the cosine and L1 denominators.
pub const SAM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SamModule {
    weight: Tensor,
    bias: Tensor,
    use_conv: bool,
    use_skip: bool,
    frozen: bool,
}

/// Graph handles for one application of the module.
#[derive(Debug, Clone, Copy)]
pub struct SamOutput {
    /// Attended logits `M′·z`.
    pub attended: Var,
    /// Skip-connected logits `z + z′`.
    pub skip: Var,
    pub attention: Var,
}

impl SamOutput {
    /// The output that stands in for `z″` downstream: `z″` with the skip
    /// connection, `z′` without it.
    pub fn primary(&self, use_skip: bool) -> Var {
        if use_skip {
            self.skip
        } else {
            self.attended
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundSam {
    weight: Var,
    bias: Var,
}

impl BoundSam {
    /// Uses existing graph variables as the conv weight (`C×C×1×1`) and bias.
    pub fn from_vars(weight: Var, bias: Var) -> Self {
        Self { weight, bias }
    }
}

impl SamModule {
    /// The 1×1 convolution starts at the identity map with zero bias.
    pub fn new(classes: usize, use_conv: bool, use_skip: bool) -> Self {
        Self {
            weight: Tensor::from_fn(&[classes, classes, 1, 1], |i| {
                if i % (classes + 1) == 0 {
                    1.0
                } else {
                    0.0
                }
            }),
            bias: Tensor::zeros(&[classes]),
            use_conv,
            use_skip,
            frozen: false,
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn use_conv(&self) -> bool {
        self.use_conv
    }

    pub fn use_skip(&self) -> bool {
        self.use_skip
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    /// Trainable parameters; empty when frozen or when the conv is disabled.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Tensor> {
        if self.frozen || !self.use_conv {
            Vec::new()
        } else {
            vec![&mut self.weight, &mut self.bias]
        }
    }

    /// Binds the parameters as leaves; they require grad only when unfrozen.
    pub fn bind(&self, g: &mut Graph) -> BoundSam {
        self.bind_with(g, !self.frozen)
    }

    /// Binds with an explicit `requires_grad`, for gradient-flow audits.
    pub fn bind_with(&self, g: &mut Graph, requires_grad: bool) -> BoundSam {
        BoundSam {
            weight: g.leaf(self.weight.clone(), requires_grad),
            bias: g.leaf(self.bias.clone(), requires_grad),
        }
    }

    pub fn bound_vars(b: &BoundSam) -> [Var; 2] {
        [b.weight, b.bias]
    }

    /// `A = Conv1x1(z)` on a flattened `hw×C` input.
    fn transform(&self, g: &mut Graph, bound: &BoundSam, z: Var) -> Result<Var> {
        let [hw, c] = g.value(z).dims2()?;
        if c != self.classes() {
            return Err(Error::Dimension(format!(
                "SAM expects {} channels, got {c}",
                self.classes()
            )));
        }
        let t = g.transpose(z)?;
        let t = g.reshape(t, &[c, hw, 1])?;
        let a = g.conv2d(t, bound.weight, Some(bound.bias), 1, 0)?;
        let a = g.reshape(a, &[c, hw])?;
        g.transpose(a)
    }

    /// Applies the module to flattened logits `z` (`hw×C`).
    pub fn attend(&self, g: &mut Graph, bound: &BoundSam, z: Var) -> Result<SamOutput> {
        let a = if self.use_conv {
            self.transform(g, bound, z)?
        } else {
            g.value(z).dims2()?;
            z
        };
        let m = cosine_map(g, a)?;
        let attention = normalize_map(g, m)?;
        let attended = g.matmul(attention, z)?;
        let skip = g.add(z, attended)?;
        Ok(SamOutput {
            attended,
            skip,
            attention,
        })
    }

    /// Non-differentiable evaluation returning `(z′, z″, M′)`.
    pub fn attend_tensor(&self, z: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let mut g = Graph::new();
        let bound = self.bind_with(&mut g, false);
        let zv = g.constant(z.clone());
        let out = self.attend(&mut g, &bound, zv)?;
        Ok((
            g.value(out.attended).clone(),
            g.value(out.skip).clone(),
            g.value(out.attention).clone(),
        ))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut m = BTreeMap::new();
        m.insert("kind".into(), "sam".into());
        m.insert("classes".into(), self.classes().to_string());
        m.insert("use_conv".into(), self.use_conv.to_string());
        m.insert("use_skip".into(), self.use_skip.to_string());
        Checkpoint::new(m, vec![self.weight.clone(), self.bias.clone()])
    }

    /// Restores a module; it comes back frozen.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.get("kind")? != "sam" {
            return Err(Error::Format(format!(
                "expected sam checkpoint, found `{}`",
                ck.get("kind")?
            )));
        }
        let classes: usize = ck.parse("classes")?;
        let [weight, bias] = <[Tensor; 2]>::try_from(ck.tensors.clone())
            .map_err(|_| Error::Format("sam checkpoint must hold 2 tensors".into()))?;
        if weight.shape() != [classes, classes, 1, 1] || bias.shape() != [classes] {
            return Err(Error::Format(
                "sam checkpoint tensor shapes disagree with class count".into(),
            ));
        }
        Ok(Self {
            weight,
            bias,
            use_conv: ck.parse("use_conv")?,
            use_skip: ck.parse("use_skip")?,
            frozen: true,
        })
    }
}

/// `M[i,j] = ⟨aᵢ,aⱼ⟩ / (‖aᵢ‖‖aⱼ‖ + ε)` over the rows of `a`.
pub fn cosine_map(g: &mut Graph, a: Var) -> Result<Var> {
    let at = g.transpose(a)?;
    let gram = g.matmul(a, at)?;
    let norms = g.row_l2_norm(a)?;
    let denom = g.outer(norms, norms)?;
    let denom = g.add_scalar(denom, SAM_EPS);
    g.div(gram, denom)
}

/// Rectifies a similarity map and L1-normalizes each row. Rows with no
/// positive entry map to zero rows.
pub fn normalize_map(g: &mut Graph, m: Var) -> Result<Var> {
    let r = g.relu(m);
    g.row_l1_normalize(r, SAM_EPS)
}
