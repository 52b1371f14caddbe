//! Oracle checks shared by the integration tests and the acceptance binary.
//!
//! Every oracle here is computed independently of the library code path it
//! checks: brute-force loops, finite differences or closed forms.

// brute-force oracles index explicitly on purpose
#![allow(dead_code, clippy::needless_range_loop)]

use pixcorr::gradcheck::{self, GradCheck};
use pixcorr::graph::{Graph, Var};
use pixcorr::losses::{self, AttDomains, AttForm, AttMetric, LossConfig, SourceBatch, TargetBatch};
use pixcorr::metrics::{one_hot_rows, pixel_similarity_map, resize_labels_nearest};
use pixcorr::pnm::Pnm;
use pixcorr::pseudo::PseudoStore;
use pixcorr::pseudo::{self, PseudoLabelMap, IGNORE, THRESHOLD_CAP};
use pixcorr::report::{self, Heatmap, ReportInput};
use pixcorr::sam::{self, BoundSam, SamModule, SAM_EPS};
use pixcorr::scenegen::SceneSample;
use pixcorr::segnet::{BoundParams, NetConfig, Prediction, SegNet};
use pixcorr::trainer::{self, DomainPair, SamTrainer, TrainConfig, Variant};
use pixcorr::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-4;
pub const COMPOSED_TOL: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Entries in `±[0.2, 1.5]`, keeping kinks of relu/abs out of the stencil.
pub fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = r.random_range(0.2..1.5);
        if r.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `Σ w ⊙ v` with fixed pseudo-random weights, so every output element
/// carries a distinct upstream gradient.
fn probe(g: &mut Graph, v: Var) -> Result<Var> {
    let shape = g.value(v).shape().to_vec();
    let mut r = rng(0xfeed ^ shape.iter().product::<usize>() as u64);
    let w = g.constant(uniform(&mut r, &shape, -1.0, 1.0));
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

type CaseFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub name: &'static str,
    pub tol: f64,
    pub inputs: Vec<Tensor>,
    pub f: CaseFn,
    /// Finite-difference oracle when it differs from `f` (detached terms).
    pub numeric: Option<CaseFn>,
}

fn case(
    name: &'static str,
    tol: f64,
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
) -> GradCase {
    GradCase {
        name,
        tol,
        inputs,
        f: Box::new(f),
        numeric: None,
    }
}

fn with_oracle(
    mut c: GradCase,
    numeric: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
) -> GradCase {
    c.numeric = Some(Box::new(numeric));
    c
}

/// `hw×C` module output (`z″` or `z′`) for `C×h×w` logits, as a constant.
fn frozen_reference(module: &SamModule, z: &Tensor, cfg: &LossConfig) -> Tensor {
    let (zp, zpp, _) = module
        .attend_tensor(&z.channels_last_2d().unwrap())
        .unwrap();
    match cfg.form {
        AttForm::ZVsSkip => zpp,
        AttForm::ZVsAttended => zp,
    }
}

fn tiny_net_cfg() -> NetConfig {
    NetConfig {
        in_channels: 3,
        widths: vec![3, 4],
        downsample: 2,
        classes: 3,
    }
}

/// One case per differentiable graph operation plus composed losses.
pub fn gradient_cases() -> Vec<GradCase> {
    let mut r = rng(1);
    let mut cases = vec![
        case(
            "add",
            OP_TOL,
            vec![
                uniform(&mut r, &[3, 4], -1., 1.),
                uniform(&mut r, &[3, 4], -1., 1.),
            ],
            |g, v| {
                let o = g.add(v[0], v[1])?;
                probe(g, o)
            },
        ),
        case(
            "sub",
            OP_TOL,
            vec![
                uniform(&mut r, &[3, 4], -1., 1.),
                uniform(&mut r, &[3, 4], -1., 1.),
            ],
            |g, v| {
                let o = g.sub(v[0], v[1])?;
                probe(g, o)
            },
        ),
        case(
            "mul",
            OP_TOL,
            vec![
                uniform(&mut r, &[3, 4], -1., 1.),
                uniform(&mut r, &[3, 4], -1., 1.),
            ],
            |g, v| {
                let o = g.mul(v[0], v[1])?;
                probe(g, o)
            },
        ),
        case(
            "div",
            OP_TOL,
            vec![
                uniform(&mut r, &[3, 4], -1., 1.),
                uniform(&mut r, &[3, 4], 0.5, 2.),
            ],
            |g, v| {
                let o = g.div(v[0], v[1])?;
                probe(g, o)
            },
        ),
        case(
            "add_scalar",
            OP_TOL,
            vec![uniform(&mut r, &[5], -1., 1.)],
            |g, v| {
                let o = g.add_scalar(v[0], 0.7);
                let o = g.mul(o, o)?;
                probe(g, o)
            },
        ),
        case(
            "mul_scalar",
            OP_TOL,
            vec![uniform(&mut r, &[5], -1., 1.)],
            |g, v| {
                let o = g.mul_scalar(v[0], -1.3);
                probe(g, o)
            },
        ),
        case(
            "relu",
            OP_TOL,
            vec![away_from_zero(&mut r, &[4, 4])],
            |g, v| {
                let o = g.relu(v[0]);
                probe(g, o)
            },
        ),
        case(
            "abs",
            OP_TOL,
            vec![away_from_zero(&mut r, &[4, 4])],
            |g, v| {
                let o = g.abs(v[0]);
                probe(g, o)
            },
        ),
        case(
            "log",
            OP_TOL,
            vec![uniform(&mut r, &[6], 0.1, 2.0)],
            |g, v| {
                let o = g.log(v[0], 1e-12);
                probe(g, o)
            },
        ),
        case(
            "sum",
            OP_TOL,
            vec![uniform(&mut r, &[2, 3], -1., 1.)],
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
        ),
        case(
            "mean",
            OP_TOL,
            vec![uniform(&mut r, &[2, 3], -1., 1.)],
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.mean(sq))
            },
        ),
        case(
            "abs_mean",
            OP_TOL,
            vec![away_from_zero(&mut r, &[3, 3])],
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                let o = g.sub(v[0], sq)?;
                Ok(g.abs_mean(o))
            },
        ),
        case(
            "reshape",
            OP_TOL,
            vec![uniform(&mut r, &[2, 6], -1., 1.)],
            |g, v| {
                let o = g.reshape(v[0], &[3, 4])?;
                probe(g, o)
            },
        ),
        case(
            "transpose",
            OP_TOL,
            vec![uniform(&mut r, &[2, 5], -1., 1.)],
            |g, v| {
                let o = g.transpose(v[0])?;
                probe(g, o)
            },
        ),
        case(
            "matmul",
            OP_TOL,
            vec![
                uniform(&mut r, &[3, 4], -1., 1.),
                uniform(&mut r, &[4, 2], -1., 1.),
            ],
            |g, v| {
                let o = g.matmul(v[0], v[1])?;
                probe(g, o)
            },
        ),
        case(
            "outer",
            OP_TOL,
            vec![
                uniform(&mut r, &[3], -1., 1.),
                uniform(&mut r, &[4], -1., 1.),
            ],
            |g, v| {
                let o = g.outer(v[0], v[1])?;
                probe(g, o)
            },
        ),
        case(
            "row_sum",
            OP_TOL,
            vec![uniform(&mut r, &[3, 4], -1., 1.)],
            |g, v| {
                let o = g.row_sum(v[0])?;
                probe(g, o)
            },
        ),
        case(
            "row_l2_norm",
            OP_TOL,
            vec![uniform(&mut r, &[3, 4], -1., 1.)],
            |g, v| {
                let o = g.row_l2_norm(v[0])?;
                probe(g, o)
            },
        ),
        case(
            "row_l1_normalize",
            OP_TOL,
            vec![away_from_zero(&mut r, &[3, 4])],
            |g, v| {
                let o = g.row_l1_normalize(v[0], 1e-12)?;
                probe(g, o)
            },
        ),
        case(
            "softmax_rows",
            OP_TOL,
            vec![uniform(&mut r, &[3, 4], -2., 2.)],
            |g, v| {
                let o = g.softmax(v[0], 1)?;
                probe(g, o)
            },
        ),
        case(
            "softmax_channels",
            OP_TOL,
            vec![uniform(&mut r, &[3, 2, 2], -2., 2.)],
            |g, v| {
                let o = g.softmax(v[0], 0)?;
                probe(g, o)
            },
        ),
        case(
            "conv2d_s1_p1_bias",
            OP_TOL,
            vec![
                uniform(&mut r, &[2, 5, 5], -1., 1.),
                uniform(&mut r, &[3, 2, 3, 3], -1., 1.),
                uniform(&mut r, &[3], -1., 1.),
            ],
            |g, v| {
                let o = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                probe(g, o)
            },
        ),
        case(
            "conv2d_s2_p1",
            OP_TOL,
            vec![
                uniform(&mut r, &[2, 6, 6], -1., 1.),
                uniform(&mut r, &[2, 2, 3, 3], -1., 1.),
            ],
            |g, v| {
                let o = g.conv2d(v[0], v[1], None, 2, 1)?;
                probe(g, o)
            },
        ),
        case(
            "conv2d_1x1",
            OP_TOL,
            vec![
                uniform(&mut r, &[3, 4, 1], -1., 1.),
                uniform(&mut r, &[3, 3, 1, 1], -1., 1.),
                uniform(&mut r, &[3], -1., 1.),
            ],
            |g, v| {
                let o = g.conv2d(v[0], v[1], Some(v[2]), 1, 0)?;
                probe(g, o)
            },
        ),
        case(
            "bilinear_upsample",
            OP_TOL,
            vec![uniform(&mut r, &[2, 3, 3], -1., 1.)],
            |g, v| {
                let o = g.bilinear_upsample(v[0], 7, 5)?;
                probe(g, o)
            },
        ),
        case(
            "pick_mean",
            OP_TOL,
            vec![uniform(&mut r, &[3, 2, 3], -1., 1.)],
            |g, v| {
                let labels = [Some(0), None, Some(2), Some(1), None, Some(0)];
                let sq = g.mul(v[0], v[0])?;
                g.pick_mean(sq, &labels)
            },
        ),
        // composed
        case(
            "cosine_map",
            COMPOSED_TOL,
            vec![uniform(&mut r, &[5, 3], -1., 1.)],
            |g, v| {
                let m = sam::cosine_map(g, v[0])?;
                probe(g, m)
            },
        ),
        case(
            "normalize_map",
            COMPOSED_TOL,
            vec![uniform(&mut r, &[5, 3], -1., 1.)],
            |g, v| {
                let m = sam::cosine_map(g, v[0])?;
                let m = sam::normalize_map(g, m)?;
                probe(g, m)
            },
        ),
        case(
            "sam_attend_z_and_conv",
            COMPOSED_TOL,
            vec![
                uniform(&mut r, &[6, 3], -1., 1.),
                uniform(&mut r, &[3, 3, 1, 1], -1., 1.),
                uniform(&mut r, &[3], -0.3, 0.3),
            ],
            |g, v| {
                let module = SamModule::new(3, true, true);
                let out = module.attend(g, &BoundSam::from_vars(v[1], v[2]), v[0])?;
                let a = probe(g, out.attended)?;
                let s = probe(g, out.skip)?;
                g.add(a, s)
            },
        ),
        case(
            "ce_source",
            COMPOSED_TOL,
            vec![uniform(&mut r, &[3, 2, 3], -2., 2.)],
            |g, v| {
                let p = g.softmax(v[0], 0)?;
                losses::ce_source(g, p, &[0, 2, 1, 1, 0, 2])
            },
        ),
        case(
            "ce_target",
            COMPOSED_TOL,
            vec![uniform(&mut r, &[3, 2, 3], -2., 2.)],
            |g, v| {
                let p = g.softmax(v[0], 0)?;
                let map = PseudoLabelMap {
                    height: 2,
                    width: 3,
                    labels: vec![0, IGNORE, 1, 2, IGNORE, 1],
                };
                losses::ce_target(g, p, &map)
            },
        ),
    ];

    for (name, metric) in [
        ("att_l1", AttMetric::L1),
        ("att_kl", AttMetric::Kl),
        ("att_cosine", AttMetric::Cosine),
    ] {
        let reference = uniform(&mut r, &[6, 3], -1., 1.);
        cases.push(case(
            name,
            COMPOSED_TOL,
            vec![uniform(&mut r, &[6, 3], -1., 1.)],
            move |g, v| {
                let re = g.constant(reference.clone());
                losses::att_loss(g, v[0], re, metric)
            },
        ));
    }

    for (name, cfg) in [
        ("sam_att_skip_form", LossConfig::skip_profile()),
        ("sam_att_attended_form", LossConfig::target_profile()),
    ] {
        let mut frozen = SamModule::new(3, true, true);
        frozen.freeze();
        let z = uniform(&mut r, &[3, 2, 3], -1., 1.);
        let reference = frozen_reference(&frozen, &z, &cfg);
        let c = case(name, COMPOSED_TOL, vec![z], move |g, v| {
            let bound = frozen.bind(g);
            losses::sam_att_loss(g, &frozen, &bound, v[0], &cfg)
        });
        cases.push(with_oracle(c, move |g, v| {
            let flat = losses::flatten_logits(g, v[0])?;
            let re = g.constant(reference.clone());
            losses::att_loss(g, flat, re, cfg.metric)
        }));
    }

    // end-to-end total loss w.r.t. every segmentation-network parameter
    for (name, cfg) in [
        ("total_loss_skip_profile", LossConfig::skip_profile()),
        ("total_loss_target_profile", LossConfig::target_profile()),
    ] {
        let net = SegNet::init(&tiny_net_cfg(), 5).expect("valid config");
        let inputs: Vec<Tensor> = net.params().into_iter().cloned().collect();
        let src = uniform(&mut r, &[3, 6, 6], 0., 1.);
        let tgt = uniform(&mut r, &[3, 6, 6], 0., 1.);
        let labels: Vec<usize> = (0..36).map(|i| (i * 7 + i / 5) % 3).collect();
        let pseudo = PseudoLabelMap {
            height: 6,
            width: 6,
            labels: (0..36)
                .map(|i| if i % 4 == 0 { IGNORE } else { (i % 3) as u8 })
                .collect(),
        };
        let mut frozen = SamModule::new(3, true, true);
        frozen.freeze();
        let cfg = LossConfig { lambda: 0.5, ..cfg };
        let ref_s = frozen_reference(&frozen, &net.predict(&src).unwrap().logits, &cfg);
        let ref_t = frozen_reference(&frozen, &net.predict(&tgt).unwrap().logits, &cfg);

        let (net2, src2, tgt2, labels2, pseudo2) = (
            net.clone(),
            src.clone(),
            tgt.clone(),
            labels.clone(),
            pseudo.clone(),
        );
        let c = case(name, COMPOSED_TOL, inputs, move |g, v| {
            let params = BoundParams(v.to_vec());
            let bound = frozen.bind(g);
            let guide = losses::AttGuide {
                sam: &frozen,
                bound: &bound,
                cfg: &cfg,
            };
            let source = SourceBatch {
                image: &src,
                labels: &labels,
            };
            let target = TargetBatch {
                image: &tgt,
                pseudo: &pseudo,
            };
            Ok(losses::total_loss(g, &net, &params, &source, Some(&target), Some(&guide))?.total)
        });
        // the same objective assembled from its parts with fixed references
        cases.push(with_oracle(c, move |g, v| {
            let params = BoundParams(v.to_vec());
            let xs = g.constant(src2.clone());
            let zs = net2.forward_logits(g, &params, xs)?;
            let ps = net2.probs_from_logits(g, zs, 6, 6)?;
            let mut total = losses::ce_source(g, ps, &labels2)?;
            let xt = g.constant(tgt2.clone());
            let zt = net2.forward_logits(g, &params, xt)?;
            let pt = net2.probs_from_logits(g, zt, 6, 6)?;
            let ct = losses::ce_target(g, pt, &pseudo2)?;
            total = g.add(total, ct)?;
            let mut terms = vec![(zt, &ref_t)];
            if cfg.domains == AttDomains::Both {
                terms.push((zs, &ref_s));
            }
            for (z, re) in terms {
                let flat = losses::flatten_logits(g, z)?;
                let re = g.constant(re.clone());
                let a = losses::att_loss(g, flat, re, cfg.metric)?;
                let a = g.mul_scalar(a, cfg.lambda);
                total = g.add(total, a)?;
            }
            Ok(total)
        }));
    }
    cases
}

pub fn run_case(c: &GradCase) -> Result<GradCheck> {
    match &c.numeric {
        Some(n) => gradcheck::check_against(&c.inputs, FD_STEP, &c.f, n),
        None => gradcheck::check(&c.inputs, FD_STEP, &c.f),
    }
}

/// Finite differences of the attention-module training loss with respect to
/// the module's conv weight and bias, perturbing through a checkpoint.
pub fn sam_training_gradcheck() -> Result<GradCheck> {
    let cfg = tiny_net_cfg();
    let net = SegNet::init(&cfg, 11)?;
    let mut r = rng(12);
    let image = uniform(&mut r, &[3, 6, 6], 0., 1.);
    let labels: Vec<usize> = (0..36).map(|i| (i / 12) % 3).collect();
    let mut module = SamModule::new(3, true, true);
    let mut ck = module.to_checkpoint();
    ck.tensors[0] = uniform(&mut r, &[3, 3, 1, 1], -1., 1.);
    ck.tensors[1] = uniform(&mut r, &[3], -0.2, 0.2);
    module = SamModule::from_checkpoint(&ck)?;
    module.unfreeze();

    let loss_at = |w: &Tensor, b: &Tensor| -> Result<f64> {
        let mut ck = module.to_checkpoint();
        ck.tensors = vec![w.clone(), b.clone()];
        let mut m = SamModule::from_checkpoint(&ck)?;
        m.unfreeze();
        let mut g = Graph::new();
        let (loss, _) = SamTrainer::loss_graph(&net, &m, &mut g, &image, &labels)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let (loss, vars) = SamTrainer::loss_graph(&net, &module, &mut g, &image, &labels)?;
    g.backward(loss)?;
    let n = vars.len();
    let analytic = [
        g.grad(vars[n - 2]).expect("weight grad"),
        g.grad(vars[n - 1]).expect("bias grad"),
    ];

    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let base = [module.weight().clone(), module.bias().clone()];
    for which in 0..2 {
        for i in 0..base[which].len() {
            let mut up = base.clone();
            let mut down = base.clone();
            up[which].data_mut()[i] += FD_STEP;
            down[which].data_mut()[i] -= FD_STEP;
            let numeric =
                (loss_at(&up[0], &up[1])? - loss_at(&down[0], &down[1])?) / (2.0 * FD_STEP);
            let a = analytic[which].data()[i];
            let abs = (a - numeric).abs();
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report
                .max_rel_err
                .max(abs / a.abs().max(numeric.abs()).max(gradcheck::REL_ERR_FLOOR));
            report.checked += 1;
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------- SAM oracles

/// `M[i,j] = ⟨aᵢ,aⱼ⟩/(‖aᵢ‖‖aⱼ‖ + ε)` by double loop.
pub fn brute_cosine(a: &Tensor) -> Vec<Vec<f64>> {
    let [n, c] = a.dims2().unwrap();
    let norm = |i: usize| (0..c).map(|k| a.at2(i, k).powi(2)).sum::<f64>().sqrt();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let dot: f64 = (0..c).map(|k| a.at2(i, k) * a.at2(j, k)).sum();
                    dot / (norm(i) * norm(j) + SAM_EPS)
                })
                .collect()
        })
        .collect()
}

/// ReLU then per-row L1 normalization by explicit sums.
pub fn brute_normalize(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    m.iter()
        .map(|row| {
            let relu: Vec<f64> = row.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
            let mut s = 0.0;
            for &x in &relu {
                s += x;
            }
            relu.iter().map(|&x| x / (s + SAM_EPS)).collect()
        })
        .collect()
}

/// `z′ᵢ = Σⱼ M′[i,j]·zⱼ` summed term by term.
pub fn brute_attend(z: &Tensor, m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let [n, c] = z.dims2().unwrap();
    (0..n)
        .map(|i| {
            (0..c)
                .map(|k| {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += m[i][j] * z.at2(j, k);
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn max_diff_rows(t: &Tensor, rows: &[Vec<f64>]) -> f64 {
    rows.iter()
        .enumerate()
        .flat_map(|(i, r)| {
            r.iter()
                .enumerate()
                .map(move |(j, &v)| (t.at2(i, j) - v).abs())
        })
        .fold(0.0, f64::max)
}

// ------------------------------------------------------------ pseudo oracles

/// A seeded corpus of predictions with sharp and flat pixels, so that both
/// the 0.9 cap and the median are exercised.
pub fn prediction_corpus(
    seed: u64,
    images: usize,
    classes: usize,
    h: usize,
    w: usize,
) -> Vec<Prediction> {
    let mut r = rng(seed);
    (0..images)
        .map(|_| {
            let logits = Tensor::from_fn(&[classes, h, w], |_| r.random_range(-1.0..1.0));
            let scale: Vec<f64> = (0..h * w)
                .map(|_| if r.random_bool(0.4) { 8.0 } else { 1.0 })
                .collect();
            let n = h * w;
            let mut probs = vec![0.0; classes * n];
            for i in 0..n {
                let zs: Vec<f64> = (0..classes)
                    .map(|k| logits.data()[k * n + i] * scale[i])
                    .collect();
                let m = zs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = zs.iter().map(|z| (z - m).exp()).collect();
                let s: f64 = e.iter().sum();
                for k in 0..classes {
                    probs[k * n + i] = e[k] / s;
                }
            }
            Prediction {
                probs: Tensor::new(&[classes, h, w], probs).unwrap(),
                logits,
            }
        })
        .collect()
}

/// Thresholds by explicit per-class lists, sort and lower-middle pick.
pub fn brute_thresholds(preds: &[Prediction], classes: usize) -> Vec<f64> {
    let mut lists: Vec<Vec<f64>> = vec![Vec::new(); classes];
    for p in preds {
        let [c, h, w] = p.probs.dims3().unwrap();
        for y in 0..h {
            for x in 0..w {
                let mut best = 0;
                for k in 1..c {
                    if p.probs.at3(k, y, x) > p.probs.at3(best, y, x) {
                        best = k;
                    }
                }
                lists[best].push(p.probs.at3(best, y, x));
            }
        }
    }
    lists
        .into_iter()
        .map(|mut l| {
            if l.is_empty() {
                return f64::INFINITY;
            }
            l.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let med = l[(l.len() - 1) / 2];
            if med > THRESHOLD_CAP {
                THRESHOLD_CAP
            } else {
                med
            }
        })
        .collect()
}

pub fn brute_labels(p: &Prediction, tau: &[f64]) -> Vec<u8> {
    let [c, h, w] = p.probs.dims3().unwrap();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let mut best = 0;
            for k in 1..c {
                if p.probs.at3(k, y, x) > p.probs.at3(best, y, x) {
                    best = k;
                }
            }
            out.push(if p.probs.at3(best, y, x) > tau[best] {
                best as u8
            } else {
                IGNORE
            });
        }
    }
    out
}

/// Library thresholds and maps against the brute-force oracle on one corpus.
pub fn pseudo_oracle(seed: u64) -> std::result::Result<String, String> {
    let classes = 4;
    let preds = prediction_corpus(seed, 10, classes, 8, 8);
    let lib = pseudo::thresholds_from_predictions(&preds, classes).map_err(|e| e.to_string())?;
    let oracle = brute_thresholds(&preds, classes);
    if lib.values() != oracle.as_slice() {
        return Err(format!(
            "thresholds {:?} vs oracle {oracle:?}",
            lib.values()
        ));
    }
    if lib
        .values()
        .iter()
        .any(|&t| t.is_finite() && t > THRESHOLD_CAP)
    {
        return Err(format!("threshold above cap: {:?}", lib.values()));
    }
    let mut labelled = 0;
    for p in &preds {
        let map = pseudo::labels_from_prediction(p, &lib).map_err(|e| e.to_string())?;
        let want = brute_labels(p, &oracle);
        if map.labels != want {
            return Err("label map differs from oracle".into());
        }
        labelled += want.iter().filter(|&&l| l != IGNORE).count();
    }
    Ok(format!("tau={:?} labelled={labelled}", lib.values()))
}

// ------------------------------------------------------- SAM algebra checks

fn sam_map(z: &Tensor) -> Tensor {
    SamModule::new(z.dims2().unwrap()[1], false, true)
        .attend_tensor(z)
        .unwrap()
        .2
}

fn cos_of(a: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(a.clone());
    let m = sam::cosine_map(&mut g, v).unwrap();
    g.value(m).clone()
}

/// Every row of `M′` sums to one on random logits.
pub fn check_row_stochastic(seed: u64) -> std::result::Result<String, String> {
    let mut worst: f64 = 0.0;
    let mut r = rng(seed);
    for _ in 0..20 {
        let z = uniform(&mut r, &[30, 5], -3., 3.);
        let m = sam_map(&z);
        for i in 0..30 {
            worst = worst.max((m.row(i).iter().sum::<f64>() - 1.0).abs());
        }
    }
    if worst <= 1e-9 {
        Ok(format!("max |row sum - 1| = {worst:.2e}"))
    } else {
        Err(format!("row sum off by {worst:.2e}"))
    }
}

/// `M = Mᵀ` and `M(s·a) = M(a)` for a spread of scales.
pub fn check_cosine_symmetry_and_scale(seed: u64) -> std::result::Result<String, String> {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[16, 5], -2., 2.);
    let m = cos_of(&a);
    let mut asym: f64 = 0.0;
    for i in 0..16 {
        for j in 0..16 {
            asym = asym.max((m.at2(i, j) - m.at2(j, i)).abs());
        }
    }
    let mut scale: f64 = 0.0;
    // the epsilon guard contributes ε/(s²‖a‖²), so tiny scales are excluded
    for s in [0.1, 0.37, 4.0, 250.0] {
        scale = scale.max(cos_of(&a.map(|v| v * s)).max_abs_diff(&m));
    }
    if asym <= 1e-12 && scale <= 1e-9 {
        Ok(format!("asymmetry {asym:.2e}, scale drift {scale:.2e}"))
    } else {
        Err(format!(
            "asymmetry {asym:.2e} (tol 1e-12), scale drift {scale:.2e} (tol 1e-9)"
        ))
    }
}

/// `z′` against explicit loops on random 6×3 logits, with and without the
/// 1×1 convolution.
pub fn check_brute_attend(seed: u64) -> std::result::Result<String, String> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let z = uniform(&mut r, &[6, 3], -2., 2.);
        let plain = SamModule::new(3, false, true);
        let (zp, zpp, m) = plain.attend_tensor(&z).map_err(|e| e.to_string())?;
        let mm = brute_normalize(&brute_cosine(&z));
        let want = brute_attend(&z, &mm);
        worst = worst
            .max(max_diff_rows(&m, &mm))
            .max(max_diff_rows(&zp, &want));
        let skip: Vec<Vec<f64>> = want
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .map(|(k, v)| v + z.at2(i, k))
                    .collect()
            })
            .collect();
        worst = worst.max(max_diff_rows(&zpp, &skip));

        let mut ck = SamModule::new(3, true, true).to_checkpoint();
        ck.tensors[0] = uniform(&mut r, &[3, 3, 1, 1], -1., 1.);
        ck.tensors[1] = uniform(&mut r, &[3], -0.5, 0.5);
        let conv = SamModule::from_checkpoint(&ck).map_err(|e| e.to_string())?;
        let a = Tensor::from_fn(&[6, 3], |i| {
            let (p, o) = (i / 3, i % 3);
            let mut acc = ck.tensors[1].data()[o];
            for k in 0..3 {
                acc += ck.tensors[0].data()[o * 3 + k] * z.at2(p, k);
            }
            acc
        });
        let (zp, _, _) = conv.attend_tensor(&z).map_err(|e| e.to_string())?;
        worst = worst.max(max_diff_rows(
            &zp,
            &brute_attend(&z, &brute_normalize(&brute_cosine(&a))),
        ));
    }
    if worst <= 1e-12 {
        Ok(format!("max deviation {worst:.2e}"))
    } else {
        Err(format!("deviation {worst:.2e} exceeds 1e-12"))
    }
}

/// Orthogonal rows give `M′ = I` and `z′ = z`; identical rows give the
/// uniform map and again `z′ = z`.
pub fn check_degenerate_maps() -> std::result::Result<String, String> {
    let eye = Tensor::from_fn(&[4, 4], |i| {
        if i % 5 == 0 {
            1.0 + (i / 5) as f64
        } else {
            0.0
        }
    });
    let (zp, _, m) = SamModule::new(4, false, true)
        .attend_tensor(&eye)
        .map_err(|e| e.to_string())?;
    let id = Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
    let e1 = m.max_abs_diff(&id).max(zp.max_abs_diff(&eye));

    let same = Tensor::from_rows(&vec![vec![0.4, -1.1, 2.3, 0.0]; 5]).unwrap();
    let (zp, _, m) = SamModule::new(4, false, true)
        .attend_tensor(&same)
        .map_err(|e| e.to_string())?;
    let e2 = m
        .max_abs_diff(&Tensor::full(&[5, 5], 0.2))
        .max(zp.max_abs_diff(&same));
    if e1 <= 1e-9 && e2 <= 1e-9 {
        Ok(format!("identity {e1:.2e}, uniform {e2:.2e}"))
    } else {
        Err(format!("identity {e1:.2e}, uniform {e2:.2e} (tol 1e-9)"))
    }
}

/// Indicator matrix `[lᵢ = lⱼ]` of a label list.
pub fn class_indicator(labels: &[u8]) -> Vec<Vec<f64>> {
    labels
        .iter()
        .map(|a| {
            labels
                .iter()
                .map(|b| if a == b { 1.0 } else { 0.0 })
                .collect()
        })
        .collect()
}

// ------------------------------------------------------ detach and freeze

/// A small but complete configuration for fast end-to-end checks.
pub fn tiny_train_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        net: NetConfig {
            widths: vec![6, 8],
            ..NetConfig::default()
        },
        sam_iterations: 40,
        iterations: 40,
        eval_interval: 10,
        base_lr: 0.02,
        seed,
        ..TrainConfig::default()
    }
}

/// Runs the gradient-flow audit on both loss profiles, adapts with a trained
/// module and checks its serialized bytes, then compares a λ = 0 run with
/// the pseudo-label-only baseline step by step.
pub fn freeze_audit(seed: u64) -> std::result::Result<String, String> {
    let s = |e: pixcorr::Error| e.to_string();
    let cfg = tiny_train_cfg(seed);
    let pair = DomainPair::generate(seed, 6, 2, 16, 16).map_err(s)?;
    let sam = trainer::train_sam(&pair.source, &cfg).map_err(s)?;
    if sam
        .weight()
        .max_abs_diff(SamModule::new(5, true, true).weight())
        == 0.0
    {
        return Err("module did not move during training".into());
    }
    let before = sam.to_checkpoint().to_bytes();
    let net = SegNet::init(&cfg.net, seed).map_err(s)?;
    let store = PseudoStore::build(&net, &pair.target.images()).map_err(s)?;

    let src = &pair.source.samples[0];
    let labels = src.labels_usize();
    let source = SourceBatch {
        image: &src.image,
        labels: &labels,
    };
    let target = TargetBatch {
        image: &pair.target.samples[0].image,
        pseudo: &store.maps[0],
    };
    let mut sam_max: f64 = 0.0;
    let mut net_min = f64::INFINITY;
    for profile in [LossConfig::skip_profile(), LossConfig::target_profile()] {
        let a = trainer::audit_gradient_flow(&net, &sam, &source, &target, &profile).map_err(s)?;
        sam_max = sam_max.max(a.sam_grad_max);
        net_min = net_min.min(a.segnet_grad_max.iter().cloned().fold(0.0, f64::max));
    }
    if sam_max != 0.0 || net_min == 0.0 {
        return Err(format!(
            "module grad max {sam_max:e}, network grad max {net_min:e}"
        ));
    }

    trainer::adapt(
        &pair,
        &Variant::Ours(LossConfig::skip_profile()),
        Some(&sam),
        Some(&store),
        &cfg,
    )
    .map_err(s)?;
    if sam.to_checkpoint().to_bytes() != before {
        return Err("module checkpoint bytes changed during adaptation".into());
    }

    let zero = LossConfig {
        lambda: 0.0,
        ..LossConfig::skip_profile()
    };
    let ours =
        trainer::adapt(&pair, &Variant::Ours(zero), Some(&sam), Some(&store), &cfg).map_err(s)?;
    let base = trainer::adapt(&pair, &Variant::PseudoOnly, None, Some(&store), &cfg).map_err(s)?;
    let diff = ours
        .step_losses
        .iter()
        .zip(&base.step_losses)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if ours.step_losses.len() != base.step_losses.len() || diff > 1e-12 {
        return Err(format!(
            "lambda=0 run deviates from pseudo-only by {diff:e}"
        ));
    }
    Ok(format!(
        "module grads 0, checkpoint unchanged ({} bytes), lambda=0 max step-loss diff {diff:e}",
        before.len()
    ))
}

// ------------------------------------------------- ground-truth similarity

/// The one-hot similarity map equals the class indicator both in memory and
/// in the emitted `_gtsim` image and sidecar.
pub fn gtsim_check(net: &SegNet, samples: &[SceneSample]) -> std::result::Result<String, String> {
    let s = |e: pixcorr::Error| e.to_string();
    let classes = net.config().classes;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let input = ReportInput {
        table_csv: "x\n",
        metrics: &[],
        net,
        samples,
    };
    report::emit_report(dir.path(), &input).map_err(s)?;
    let mut pixels = 0;
    for sample in samples {
        let [_, zh, zw] = net
            .predict(&sample.image)
            .map_err(s)?
            .logits
            .dims3()
            .unwrap();
        let small = resize_labels_nearest(&sample.label, sample.height, sample.width, zh, zw);
        let want = class_indicator(&small);
        let sim = pixel_similarity_map(&one_hot_rows(&small, classes)).map_err(s)?;
        if max_diff_rows(&sim, &want) != 0.0 {
            return Err(format!(
                "sample {}: similarity map differs from indicator",
                sample.id
            ));
        }
        let stem = dir.path().join("images").join(format!("{:07}", sample.id));
        let img =
            Pnm::load(&stem.with_file_name(format!("{:07}_gtsim.pgm", sample.id))).map_err(s)?;
        let side =
            std::fs::read_to_string(stem.with_file_name(format!("{:07}_gtsim.txt", sample.id)))
                .map_err(|e| e.to_string())?;
        let (lo, hi) = Heatmap::parse_sidecar(&side).map_err(s)?;
        let n = small.len();
        if (img.width, img.height) != (n, n) {
            return Err(format!(
                "sample {}: emitted map is {}x{}, expected {n}x{n}",
                sample.id, img.width, img.height
            ));
        }
        for i in 0..n {
            for j in 0..n {
                let v = lo + (hi - lo) * img.pixels[i * n + j] as f64 / 255.0;
                if v != want[i][j] {
                    return Err(format!(
                        "sample {}: emitted ({i},{j}) = {v}, expected {}",
                        sample.id, want[i][j]
                    ));
                }
            }
        }
        pixels += n * n;
    }
    Ok(format!("{} maps, {pixels} entries exact", samples.len()))
}
