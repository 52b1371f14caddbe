//! Training protocol.
//!
//! Phase A trains a throwaway segmentation network jointly with the
//! self-attention module on labelled source scenes and keeps only the module.
//! Phase B trains a fresh network on source labels and target pseudo labels,
//! optionally pulling its logits toward the frozen module's output. The
//! generation loop repeats Phase B with pseudo labels from the previous
//! generation's best network.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{self, AttGuide, LossConfig, LossValues, SourceBatch, TargetBatch};
use crate::metrics::{self, EvalResult};
use crate::optim::{poly_lr, Sgd};
use crate::pseudo::PseudoStore;
use crate::sam::SamModule;
use crate::scenegen::{self, Dataset, DomainSpec, EVAL_ID_OFFSET};
use crate::segnet::{NetConfig, SegNet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub net: NetConfig,
    /// Phase A iterations.
    pub sam_iterations: usize,
    /// Phase B iterations.
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub eval_interval: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub use_conv: bool,
    pub use_skip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            sam_iterations: 3000,
            iterations: 6000,
            batch_size: 1,
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            poly_power: 0.9,
            eval_interval: 500,
            seed: 0,
            loss: LossConfig::default(),
            use_conv: true,
            use_skip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.loss.validate()?;
        if self.iterations == 0 || self.sam_iterations == 0 {
            return Err(Error::Config("iterations must be > 0".into()));
        }
        if self.batch_size != 1 {
            return Err(Error::Config(format!(
                "batch size {} unsupported (only 1)",
                self.batch_size
            )));
        }
        if self.poly_power.is_nan() || self.poly_power <= 0.0 {
            return Err(Error::Config(format!(
                "poly power must be > 0, got {}",
                self.poly_power
            )));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("eval interval must be > 0".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!(
                "invalid base learning rate {}",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "momentum must be in [0, 1) and weight decay >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        poly_lr(self.base_lr, step, total, self.poly_power)
    }
}

/// What a Phase B run optimizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    /// Source labels only.
    NoPseudo,
    /// Source labels plus target pseudo labels.
    PseudoOnly,
    /// Pseudo labels plus the self-attention loss.
    Ours(LossConfig),
}

impl Variant {
    pub fn name(&self) -> String {
        match self {
            Variant::NoPseudo => "no-pseudo".into(),
            Variant::PseudoOnly => "pseudo-only".into(),
            Variant::Ours(cfg) => format!(
                "ours[{},{},{},lambda={}]",
                cfg.form, cfg.domains, cfg.metric, cfg.lambda
            ),
        }
    }

    fn uses_pseudo(&self) -> bool {
        !matches!(self, Variant::NoPseudo)
    }
}

/// Source training set, target training set and labelled target evaluation set.
#[derive(Debug, Clone)]
pub struct DomainPair {
    pub source: Dataset,
    pub target: Dataset,
    pub target_eval: Dataset,
}

impl DomainPair {
    pub fn generate(
        seed: u64,
        n_train: usize,
        n_eval: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let c = scenegen::NUM_CLASSES;
        Ok(Self {
            source: scenegen::generate(&DomainSpec::source(seed), n_train, height, width, c, 0)?,
            target: scenegen::generate(&DomainSpec::target(seed), n_train, height, width, c, 0)?,
            target_eval: scenegen::generate(
                &DomainSpec::target(seed),
                n_eval,
                height,
                width,
                c,
                EVAL_ID_OFFSET,
            )?,
        })
    }

    /// 32×32 scenes, 200 train and 50 eval per domain.
    pub fn default_sized(seed: u64) -> Result<Self> {
        Self::generate(seed, 200, 50, 32, 32)
    }
}

/// Per-epoch shuffled visiting order, a pure function of `(seed, step)`.
#[derive(Debug, Clone)]
struct SampleSchedule {
    n: usize,
    seed: u64,
    epoch: Option<usize>,
    perm: Vec<usize>,
}

impl SampleSchedule {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            epoch: None,
            perm: Vec::new(),
        }
    }

    fn index(&mut self, step: usize) -> usize {
        let epoch = step / self.n;
        if self.epoch != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch as u64);
            self.perm = (0..self.n).collect();
            self.perm.shuffle(&mut rng);
            self.epoch = Some(epoch);
        }
        self.perm[step % self.n]
    }
}

const SOURCE_STREAM: u64 = 0x5eed_0001;
const TARGET_STREAM: u64 = 0x5eed_0002;
const THROWAWAY_NET: u64 = 0x5eed_0003;

fn check_finite(step: usize, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("loss became {v} at step {step}")))
    }
}

fn grads_or_zero(g: &Graph, vars: &[crate::graph::Var]) -> Vec<Tensor> {
    vars.iter()
        .map(|&v| {
            g.grad(v)
                .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
        })
        .collect()
}

/// Phase A: joint training of a throwaway network and the attention module
/// on source data. Resumable through [`SamTrainer::to_checkpoint`].
pub struct SamTrainer<'a> {
    source: &'a Dataset,
    cfg: &'a TrainConfig,
    net: SegNet,
    sam: SamModule,
    opt: Sgd,
    step: usize,
    order: SampleSchedule,
    losses: Vec<f64>,
}

impl<'a> SamTrainer<'a> {
    pub fn new(source: &'a Dataset, cfg: &'a TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if source.is_empty() {
            return Err(Error::Config(
                "SAM training needs a non-empty source set".into(),
            ));
        }
        Ok(Self {
            source,
            cfg,
            net: SegNet::init(&cfg.net, cfg.seed ^ THROWAWAY_NET)?,
            sam: SamModule::new(cfg.net.classes, cfg.use_conv, cfg.use_skip),
            opt: Sgd::new(cfg.momentum, cfg.weight_decay),
            step: 0,
            order: SampleSchedule::new(source.len(), cfg.seed ^ SOURCE_STREAM),
            losses: Vec::new(),
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Segmentation loss of each step taken by this trainer instance.
    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn net(&self) -> &SegNet {
        &self.net
    }

    pub fn sam(&self) -> &SamModule {
        &self.sam
    }

    /// Source cross-entropy computed on `softmax(upsample(z″))`, or on `z′`
    /// without the skip connection.
    pub fn loss_graph(
        net: &SegNet,
        sam: &SamModule,
        g: &mut Graph,
        image: &Tensor,
        labels: &[usize],
    ) -> Result<(crate::graph::Var, Vec<crate::graph::Var>)> {
        let params = net.bind(g, true);
        let bound = sam.bind(g);
        let x = g.constant(image.clone());
        let z = net.forward_logits(g, &params, x)?;
        let [c, h, w] = g.value(z).dims3()?;
        let flat = losses::flatten_logits(g, z)?;
        let out = sam.attend(g, &bound, flat)?;
        let used = out.primary(sam.use_skip());
        let back = g.transpose(used)?;
        let back = g.reshape(back, &[c, h, w])?;
        let (ih, iw) = (image.shape()[1], image.shape()[2]);
        let p = net.probs_from_logits(g, back, ih, iw)?;
        let loss = losses::ce_source(g, p, labels)?;
        let mut vars = params.0;
        if sam.use_conv() {
            vars.extend(SamModule::bound_vars(&bound));
        }
        Ok((loss, vars))
    }

    pub fn step_once(&mut self) -> Result<f64> {
        let sample = &self.source.samples[self.order.index(self.step)];
        let mut g = Graph::new();
        let (loss, vars) = Self::loss_graph(
            &self.net,
            &self.sam,
            &mut g,
            &sample.image,
            &sample.labels_usize(),
        )?;
        let value = g.value(loss).item();
        check_finite(self.step, value)?;
        g.backward(loss)?;
        let grads = grads_or_zero(&g, &vars);
        let lr = self.cfg.lr_at(self.step, self.cfg.sam_iterations);
        let mut params = self.net.params_mut();
        params.extend(self.sam.trainable_params_mut());
        self.opt.step(params, &grads, lr)?;
        self.step += 1;
        self.losses.push(value);
        Ok(value)
    }

    pub fn run_until(&mut self, step: usize) -> Result<()> {
        while self.step < step.min(self.cfg.sam_iterations) {
            self.step_once()?;
        }
        Ok(())
    }

    /// The trained module, frozen. Without the 1×1 conv there is nothing to
    /// train and the untouched module is returned.
    pub fn finish(mut self) -> Result<SamModule> {
        if self.sam.use_conv() {
            self.run_until(self.cfg.sam_iterations)?;
        }
        self.sam.freeze();
        Ok(self.sam)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut m = BTreeMap::new();
        m.insert("kind".into(), "sam-trainer".into());
        m.insert("step".into(), self.step.to_string());
        m.insert("nets".into(), self.net.params().len().to_string());
        let mut tensors: Vec<Tensor> = self.net.params().into_iter().cloned().collect();
        tensors.push(self.sam.weight().clone());
        tensors.push(self.sam.bias().clone());
        tensors.extend(self.opt.velocity().iter().cloned());
        Checkpoint::new(m, tensors)
    }

    pub fn resume(source: &'a Dataset, cfg: &'a TrainConfig, ck: &Checkpoint) -> Result<Self> {
        if ck.get("kind")? != "sam-trainer" {
            return Err(Error::Format("not a sam-trainer checkpoint".into()));
        }
        let mut me = Self::new(source, cfg)?;
        let n_net: usize = ck.parse("nets")?;
        let n_sam = 2;
        if ck.tensors.len() < n_net + n_sam {
            return Err(Error::Format("sam-trainer checkpoint too short".into()));
        }
        for (p, t) in me.net.params_mut().into_iter().zip(&ck.tensors[..n_net]) {
            if p.shape() != t.shape() {
                return Err(Error::Format(
                    "sam-trainer checkpoint shape mismatch".into(),
                ));
            }
            *p = t.clone();
        }
        let mut sam_ck = me.sam.to_checkpoint();
        sam_ck.tensors = ck.tensors[n_net..n_net + n_sam].to_vec();
        me.sam = SamModule::from_checkpoint(&sam_ck)?;
        me.sam.unfreeze();
        me.opt = Sgd::new(cfg.momentum, cfg.weight_decay)
            .with_velocity(ck.tensors[n_net + n_sam..].to_vec());
        me.step = ck.parse("step")?;
        Ok(me)
    }
}

/// Phase A in one call.
pub fn train_sam(source: &Dataset, cfg: &TrainConfig) -> Result<SamModule> {
    SamTrainer::new(source, cfg)?.finish()
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub split: String,
    pub miou: f64,
    pub loss_seg_s: f64,
    pub loss_seg_t: f64,
    pub loss_att: f64,
    pub entropy_correct: f64,
    pub entropy_incorrect: f64,
}

pub const METRICS_HEADER: &str =
    "step,split,miou,loss_seg_s,loss_seg_t,loss_att,entropy_correct,entropy_incorrect";

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.step,
            self.split,
            self.miou,
            self.loss_seg_s,
            self.loss_seg_t,
            self.loss_att,
            self.entropy_correct,
            self.entropy_incorrect
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv());
    }
    s
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    /// Network with the highest evaluation mIoU (earliest on ties).
    pub best: SegNet,
    pub best_step: usize,
    pub best_miou: f64,
    pub final_net: SegNet,
    pub rows: Vec<MetricsRow>,
    pub evals: Vec<(usize, EvalResult)>,
    /// Total loss of every step.
    pub step_losses: Vec<f64>,
}

pub fn evaluate_on(net: &SegNet, ds: &Dataset) -> Result<EvalResult> {
    metrics::evaluate(
        net,
        ds.samples.iter().map(|s| (&s.image, s.label.as_slice())),
    )
}

/// Phase B: trains a fresh network for `cfg.iterations` steps, one source and
/// (when pseudo labels are used) one target sample per step.
pub fn adapt(
    pair: &DomainPair,
    variant: &Variant,
    sam: Option<&SamModule>,
    pseudo: Option<&PseudoStore>,
    cfg: &TrainConfig,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if pair.source.is_empty() || pair.target.is_empty() {
        return Err(Error::Config(
            "adaptation needs non-empty source and target sets".into(),
        ));
    }
    let pseudo = if variant.uses_pseudo() {
        let p = pseudo.ok_or_else(|| {
            Error::Config("missing pseudo labels for the target set (run `pseudo` first)".into())
        })?;
        if p.maps.len() != pair.target.len() {
            return Err(Error::Config(format!(
                "pseudo store has {} maps for {} target images",
                p.maps.len(),
                pair.target.len()
            )));
        }
        Some(p)
    } else {
        None
    };
    let (sam, loss_cfg) = match variant {
        Variant::Ours(lc) => {
            lc.validate()?;
            let s = sam.ok_or_else(|| {
                Error::Config("missing trained SAM (run `train-sam` first)".into())
            })?;
            if !s.is_frozen() {
                return Err(Error::Config("SAM must be frozen during adaptation".into()));
            }
            (Some(s), Some(*lc))
        }
        _ => (None, None),
    };

    let mut net = SegNet::init(&cfg.net, cfg.seed)?;
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut src_order = SampleSchedule::new(pair.source.len(), cfg.seed ^ SOURCE_STREAM);
    let mut tgt_order = SampleSchedule::new(pair.target.len(), cfg.seed ^ TARGET_STREAM);

    let mut best: Option<(f64, usize, SegNet)> = None;
    let mut rows = Vec::new();
    let mut evals = Vec::new();
    let mut step_losses = Vec::with_capacity(cfg.iterations);
    let mut acc = LossValues::default();
    let mut acc_n = 0usize;

    for step in 0..cfg.iterations {
        let s = &pair.source.samples[src_order.index(step)];
        let labels = s.labels_usize();
        let source = SourceBatch {
            image: &s.image,
            labels: &labels,
        };
        let target = pseudo.map(|p| {
            let i = tgt_order.index(step);
            TargetBatch {
                image: &pair.target.samples[i].image,
                pseudo: &p.maps[i],
            }
        });

        let mut g = Graph::new();
        let params = net.bind(&mut g, true);
        let bound = sam.map(|s| s.bind(&mut g));
        let guide = match (sam, &bound, &loss_cfg) {
            (Some(sam), Some(bound), Some(cfg)) => Some(AttGuide { sam, bound, cfg }),
            _ => None,
        };
        let terms = losses::total_loss(
            &mut g,
            &net,
            &params,
            &source,
            target.as_ref(),
            guide.as_ref(),
        )?;
        let vals = terms.values(&g);
        check_finite(step, vals.total)?;
        g.backward(terms.total)?;
        let grads = grads_or_zero(&g, &params.0);
        drop(g);
        opt.step(net.params_mut(), &grads, cfg.lr_at(step, cfg.iterations))?;

        step_losses.push(vals.total);
        acc.seg_source += vals.seg_source;
        acc.seg_target += vals.seg_target;
        acc.att += vals.att;
        acc_n += 1;

        let done = step + 1;
        if done % cfg.eval_interval == 0 || done == cfg.iterations {
            let ev = evaluate_on(&net, &pair.target_eval)?;
            let n = acc_n as f64;
            rows.push(MetricsRow {
                step: done,
                split: "target-eval".into(),
                miou: ev.iou.miou,
                loss_seg_s: acc.seg_source / n,
                loss_seg_t: acc.seg_target / n,
                loss_att: acc.att / n,
                entropy_correct: ev.entropy.correct,
                entropy_incorrect: ev.entropy.incorrect,
            });
            if best.as_ref().is_none_or(|(m, _, _)| ev.iou.miou > *m) {
                best = Some((ev.iou.miou, done, net.clone()));
            }
            evals.push((done, ev));
            acc = LossValues::default();
            acc_n = 0;
        }
    }

    let (best_miou, best_step, best) = best.expect("at least one evaluation runs");
    Ok(AdaptOutcome {
        best,
        best_step,
        best_miou,
        final_net: net,
        rows,
        evals,
        step_losses,
    })
}

/// Gradients observed on one Phase B step with the module's parameters
/// bound as differentiable leaves.
#[derive(Debug, Clone)]
pub struct GradientAudit {
    /// Max |grad| per segmentation-network parameter tensor.
    pub segnet_grad_max: Vec<f64>,
    /// Max |grad| over all module parameters (0 if none reached them).
    pub sam_grad_max: f64,
}

pub fn audit_gradient_flow(
    net: &SegNet,
    sam: &SamModule,
    source: &SourceBatch<'_>,
    target: &TargetBatch<'_>,
    cfg: &LossConfig,
) -> Result<GradientAudit> {
    let mut g = Graph::new();
    let params = net.bind(&mut g, true);
    let bound = sam.bind_with(&mut g, true);
    let guide = AttGuide {
        sam,
        bound: &bound,
        cfg,
    };
    let terms = losses::total_loss(&mut g, net, &params, source, Some(target), Some(&guide))?;
    g.backward(terms.total)?;
    let max_abs =
        |t: Option<Tensor>| t.map_or(0.0, |t| t.data().iter().fold(0.0f64, |m, x| m.max(x.abs())));
    Ok(GradientAudit {
        segnet_grad_max: params.0.iter().map(|&v| max_abs(g.grad(v))).collect(),
        sam_grad_max: SamModule::bound_vars(&bound)
            .iter()
            .map(|&v| max_abs(g.grad(v)))
            .fold(0.0, f64::max),
    })
}

/// One generation's result for one variant.
#[derive(Debug, Clone)]
pub struct GenerationRow {
    pub generation: usize,
    pub variant: String,
    pub miou: f64,
    pub best_step: usize,
    /// Coverage of the pseudo labels this generation trained on.
    pub pseudo_coverage: f64,
    pub entropy_correct: f64,
    pub entropy_incorrect: f64,
}

pub const GENERATION_HEADER: &str =
    "generation,variant,miou,best_step,pseudo_coverage,entropy_correct,entropy_incorrect";

impl GenerationRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{:.6},{},{:.6},{:.6},{:.6}",
            self.generation,
            self.variant,
            self.miou,
            self.best_step,
            self.pseudo_coverage,
            self.entropy_correct,
            self.entropy_incorrect
        )
    }
}

#[derive(Debug, Clone)]
pub struct GenerationReport {
    pub no_pseudo: AdaptOutcome,
    pub sam: Option<SamModule>,
    pub rows: Vec<GenerationRow>,
    /// Phase B outcomes keyed like `rows`.
    pub runs: Vec<AdaptOutcome>,
    /// Pseudo stores used by each row.
    pub stores: Vec<PseudoStore>,
}

impl GenerationReport {
    pub fn csv(&self) -> String {
        let mut s = String::from(GENERATION_HEADER);
        s.push('\n');
        let np = &self.no_pseudo;
        let last = &np.evals.last().expect("evaluated").1;
        let _ = writeln!(
            s,
            "0,no-pseudo,{:.6},{},0.000000,{:.6},{:.6}",
            np.best_miou, np.best_step, last.entropy.correct, last.entropy.incorrect
        );
        for r in &self.rows {
            let _ = writeln!(s, "{}", r.csv());
        }
        s
    }

    pub fn miou(&self, generation: usize, variant: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.generation == generation && r.variant == variant)
            .map(|r| r.miou)
    }
}

/// Source-only bootstrap, one SAM, then `gens` generations per variant, each
/// variant relabelling the target set with its own previous best network.
pub fn run_generation_loop(
    pair: &DomainPair,
    gens: usize,
    variants: &[Variant],
    cfg: &TrainConfig,
) -> Result<GenerationReport> {
    run_generation_loop_with(pair, gens, variants, cfg, None, |_| {})
}

/// [`run_generation_loop`] with an optional precomputed source-only network
/// or SAM, and a progress callback.
pub fn run_generation_loop_with(
    pair: &DomainPair,
    gens: usize,
    variants: &[Variant],
    cfg: &TrainConfig,
    sam: Option<SamModule>,
    mut progress: impl FnMut(&str),
) -> Result<GenerationReport> {
    if gens == 0 {
        return Err(Error::Config("at least one generation is required".into()));
    }
    progress("no-pseudo");
    let no_pseudo = adapt(pair, &Variant::NoPseudo, None, None, cfg)?;
    let needs_sam = variants.iter().any(|v| matches!(v, Variant::Ours(_)));
    let sam = match (sam, needs_sam) {
        (Some(s), _) => Some(s),
        (None, true) => {
            progress("train-sam");
            Some(train_sam(&pair.source, cfg)?)
        }
        (None, false) => None,
    };
    let images = pair.target.images();
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    let mut stores = Vec::new();
    let mut labelers: Vec<SegNet> = vec![no_pseudo.best.clone(); variants.len()];
    for generation in 1..=gens {
        for (vi, variant) in variants.iter().enumerate() {
            progress(&format!("gen{generation} {}", variant.name()));
            let store = PseudoStore::build(&labelers[vi], &images)?;
            let out = adapt(pair, variant, sam.as_ref(), Some(&store), cfg)?;
            let last = &out.evals.last().expect("evaluated").1;
            rows.push(GenerationRow {
                generation,
                variant: variant.name(),
                miou: out.best_miou,
                best_step: out.best_step,
                pseudo_coverage: store.stats().coverage,
                entropy_correct: last.entropy.correct,
                entropy_incorrect: last.entropy.incorrect,
            });
            labelers[vi] = out.best.clone();
            runs.push(out);
            stores.push(store);
        }
    }
    Ok(GenerationReport {
        no_pseudo,
        sam,
        rows,
        runs,
        stores,
    })
}
