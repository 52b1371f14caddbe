use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use pixcorr::checkpoint::Checkpoint;
use pixcorr::config::ExperimentConfig;
use pixcorr::losses::LossConfig;
use pixcorr::pseudo::PseudoStore;
use pixcorr::report::{emit_report, ReportInput};
use pixcorr::sam::SamModule;
use pixcorr::scenegen::{self, Dataset};
use pixcorr::segnet::SegNet;
use pixcorr::trainer::{self, AdaptOutcome, DomainPair, SamTrainer, Variant, GENERATION_HEADER};
use pixcorr::{Error, Result};
use sha2::{Digest, Sha256};

use crate::{Command, Common};

fn progress(stage: &str, msg: impl AsRef<str>) {
    eprintln!("[pixcorr] {stage}: {}", msg.as_ref());
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Resolved configuration plus its run directory, named by a hash of the
/// configuration (without seed and generation count) and the seed.
struct Run {
    cfg: ExperimentConfig,
    dir: PathBuf,
}

impl Run {
    fn open(c: &Common) -> Result<Self> {
        let mut cfg = match &c.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        for kv in &c.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        let t = &mut cfg.train;
        if let Some(s) = c.seed {
            t.seed = s;
        }
        if let Some(l) = c.lambda {
            t.loss.lambda = l;
        }
        if let Some(f) = c.att_form {
            t.loss.form = f;
        }
        if let Some(d) = c.att_domains {
            t.loss.domains = d;
        }
        if let Some(m) = c.att_metric {
            t.loss.metric = m;
        }
        if c.no_conv {
            t.use_conv = false;
        }
        if c.no_skip {
            t.use_skip = false;
        }
        if let Some(g) = c.gens {
            cfg.gens = g;
        }
        cfg.validate()?;

        let resolved = cfg.to_text();
        let unseeded: String = resolved
            .lines()
            .filter(|l| !l.starts_with("seed ") && !l.starts_with("gens "))
            .map(|l| format!("{l}\n"))
            .collect();
        let digest = Sha256::digest(unseeded.as_bytes());
        let hash: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
        let dir = c.out.join(format!("{hash}-seed{}", cfg.train.seed));
        write_file(&dir.join("config.resolved"), &resolved)?;
        progress("run", dir.display().to_string());
        Ok(Self { cfg, dir })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Loads the scene sets from the run directory, generating them first if
    /// absent.
    fn pair(&self) -> Result<DomainPair> {
        let names = ["source", "target", "target_eval"];
        let data = self.path("data");
        if names
            .iter()
            .all(|n| data.join(n).join("manifest.txt").exists())
        {
            let load = |n: &str| scenegen::load_dataset(&data.join(n));
            return Ok(DomainPair {
                source: load("source")?,
                target: load("target")?,
                target_eval: load("target_eval")?,
            });
        }
        let pair = self.cfg.domain_pair()?;
        for (n, ds) in names
            .iter()
            .zip([&pair.source, &pair.target, &pair.target_eval])
        {
            scenegen::save_dataset(ds, &data.join(n))?;
        }
        progress(
            "gen-data",
            format!(
                "{} source, {} target, {} eval scenes",
                pair.source.len(),
                pair.target.len(),
                pair.target_eval.len()
            ),
        );
        Ok(pair)
    }

    /// The frozen attention module, trained (resumably) if not yet saved.
    fn sam(&self, source: &Dataset) -> Result<SamModule> {
        let done = self.path("sam.ckpt");
        if done.exists() {
            return SamModule::from_checkpoint(&Checkpoint::load(&done)?);
        }
        let state = self.path("sam_state.ckpt");
        let cfg = &self.cfg.train;
        let mut tr = if state.exists() {
            let tr = SamTrainer::resume(source, cfg, &Checkpoint::load(&state)?)?;
            progress("train-sam", format!("resuming at step {}", tr.step_count()));
            tr
        } else {
            SamTrainer::new(source, cfg)?
        };
        if cfg.use_conv {
            while tr.step_count() < cfg.sam_iterations {
                let next = (tr.step_count() / cfg.eval_interval + 1) * cfg.eval_interval;
                tr.run_until(next)?;
                tr.to_checkpoint().save(&state)?;
                let recent = tr.losses().iter().rev().take(50).collect::<Vec<_>>();
                let mean = recent.iter().copied().sum::<f64>() / recent.len().max(1) as f64;
                progress(
                    "train-sam",
                    format!("step {} loss {mean:.4}", tr.step_count()),
                );
            }
        }
        let sam = tr.finish()?;
        sam.to_checkpoint().save(&done)?;
        if state.exists() {
            fs::remove_file(&state).map_err(|e| Error::io(&state, e))?;
        }
        Ok(sam)
    }

    fn variant(&self, name: &str) -> Result<Variant> {
        let lambda = self.cfg.train.loss.lambda;
        let with_lambda = |mut l: LossConfig| {
            l.lambda = lambda;
            l
        };
        Ok(match name {
            "no-pseudo" => Variant::NoPseudo,
            "pseudo-only" => Variant::PseudoOnly,
            "ours" => Variant::Ours(self.cfg.train.loss),
            "ours-skip" => Variant::Ours(with_lambda(LossConfig::skip_profile())),
            "ours-target" => Variant::Ours(with_lambda(LossConfig::target_profile())),
            other => {
                return Err(Error::Config(format!(
                    "unknown variant `{other}` (expected no-pseudo, pseudo-only, ours, ours-skip, ours-target)"
                )))
            }
        })
    }

    /// Runs (or reloads) one adaptation into `dir`, returning its best
    /// network and its summary row.
    #[allow(clippy::too_many_arguments)]
    fn adapt_into(
        &self,
        dir: &Path,
        label: &str,
        generation: usize,
        pair: &DomainPair,
        variant: &Variant,
        sam: Option<&SamModule>,
        store: Option<&PseudoStore>,
    ) -> Result<(SegNet, String)> {
        let (best, row) = (dir.join("best.ckpt"), dir.join("result.txt"));
        if best.exists() && row.exists() {
            progress("adapt", format!("{label}: reusing {}", dir.display()));
            return Ok((
                SegNet::from_checkpoint(&Checkpoint::load(&best)?)?,
                read_text(&row)?.trim_end().to_string(),
            ));
        }
        progress(
            "adapt",
            format!("{label}: {} iterations", self.cfg.train.iterations),
        );
        let out = trainer::adapt(pair, variant, sam, store, &self.cfg.train)?;
        for r in &out.rows {
            progress(
                "adapt",
                format!("{label}: step {} miou {:.4}", r.step, r.miou),
            );
        }
        write_file(&dir.join("metrics.csv"), trainer::metrics_csv(&out.rows))?;
        let coverage = store.map_or(0.0, |s| s.stats().coverage);
        let line = summary_row(generation, label, &out, coverage);
        out.best.to_checkpoint().save(&best)?;
        write_file(&row, format!("{line}\n"))?;
        Ok((out.best, line))
    }

    fn source_only(&self, pair: &DomainPair) -> Result<(SegNet, String)> {
        self.adapt_into(
            &self.path("no-pseudo"),
            "no-pseudo",
            0,
            pair,
            &Variant::NoPseudo,
            None,
            None,
        )
    }

    fn store_for(&self, dir: &Path, net: &SegNet, pair: &DomainPair) -> Result<PseudoStore> {
        if dir.join("thresholds.txt").exists() {
            return PseudoStore::load(dir, pair.target.len());
        }
        let store = PseudoStore::build(net, &pair.target.images())?;
        store.save(dir)?;
        let stats = store.stats();
        progress(
            "pseudo",
            format!("coverage {:.4} -> {}", stats.coverage, dir.display()),
        );
        Ok(store)
    }
}

fn summary_row(generation: usize, label: &str, out: &AdaptOutcome, coverage: f64) -> String {
    let last = &out.evals.last().expect("adapt evaluates at least once").1;
    format!(
        "{generation},{label},{:.6},{},{coverage:.6},{:.6},{:.6}",
        out.best_miou, out.best_step, last.entropy.correct, last.entropy.incorrect
    )
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(c) => {
            let run = Run::open(&c)?;
            run.pair()?;
            Ok(())
        }
        Command::TrainSam(c) => {
            let run = Run::open(&c)?;
            let pair = run.pair()?;
            run.sam(&pair.source)?;
            progress(
                "train-sam",
                format!("saved {}", run.path("sam.ckpt").display()),
            );
            Ok(())
        }
        Command::Pseudo { common, from } => {
            let run = Run::open(&common)?;
            let pair = run.pair()?;
            let net = match from {
                Some(p) => SegNet::from_checkpoint(&Checkpoint::load(&p)?)?,
                None => run.source_only(&pair)?.0,
            };
            run.store_for(&run.path("pseudo"), &net, &pair)?;
            Ok(())
        }
        Command::Adapt { common, variant } => {
            let run = Run::open(&common)?;
            let v = run.variant(&variant)?;
            let pair = run.pair()?;
            let store = if matches!(v, Variant::NoPseudo) {
                None
            } else {
                let dir = run.path("pseudo");
                if !dir.join("thresholds.txt").exists() {
                    return Err(Error::Config(format!(
                        "missing pseudo-label store {} (run `pixcorr pseudo` first)",
                        dir.display()
                    )));
                }
                Some(PseudoStore::load(&dir, pair.target.len())?)
            };
            let sam = match v {
                Variant::Ours(_) => {
                    let p = run.path("sam.ckpt");
                    if !p.exists() {
                        return Err(Error::Config(format!(
                            "missing SAM checkpoint {} (run `pixcorr train-sam` first)",
                            p.display()
                        )));
                    }
                    Some(SamModule::from_checkpoint(&Checkpoint::load(&p)?)?)
                }
                _ => None,
            };
            let dir = run.path(&format!("adapt/{variant}"));
            let (_, row) =
                run.adapt_into(&dir, &variant, 1, &pair, &v, sam.as_ref(), store.as_ref())?;
            println!("{GENERATION_HEADER}\n{row}");
            Ok(())
        }
        Command::Iterate { common, variants } => {
            let run = Run::open(&common)?;
            let parsed = variants
                .iter()
                .map(|n| run.variant(n).map(|v| (n.clone(), v)))
                .collect::<Result<Vec<_>>>()?;
            let pair = run.pair()?;
            let (np, np_row) = run.source_only(&pair)?;
            let sam = if parsed.iter().any(|(_, v)| matches!(v, Variant::Ours(_))) {
                Some(run.sam(&pair.source)?)
            } else {
                None
            };
            let mut table = format!("{GENERATION_HEADER}\n{np_row}\n");
            let mut labelers = vec![np; parsed.len()];
            for g in 1..=run.cfg.gens {
                for (i, (name, v)) in parsed.iter().enumerate() {
                    let dir = run.path(&format!("iterate/gen{g}/{name}"));
                    let store = run.store_for(&dir.join("pseudo"), &labelers[i], &pair)?;
                    let (best, row) =
                        run.adapt_into(&dir, name, g, &pair, v, sam.as_ref(), Some(&store))?;
                    let _ = writeln!(table, "{row}");
                    labelers[i] = best;
                }
            }
            write_file(&run.path("iterate/table.csv"), &table)?;
            print!("{table}");
            Ok(())
        }
        Command::Eval { common, ckpt } => {
            let run = Run::open(&common)?;
            let pair = run.pair()?;
            let p = ckpt.unwrap_or_else(|| run.path("adapt/ours/best.ckpt"));
            if !p.exists() {
                return Err(Error::Config(format!("missing checkpoint {}", p.display())));
            }
            let net = SegNet::from_checkpoint(&Checkpoint::load(&p)?)?;
            let ev = trainer::evaluate_on(&net, &pair.target_eval)?;
            let mut s = format!("miou,{:.6}\n", ev.iou.miou);
            for (c, iou) in ev.iou.per_class.iter().enumerate() {
                let v = iou.map_or("absent".to_string(), |v| format!("{v:.6}"));
                let _ = writeln!(s, "{},{v}", scenegen::CLASS_NAMES.get(c).unwrap_or(&"?"));
            }
            let _ = writeln!(
                s,
                "entropy_correct,{:.6}\nentropy_incorrect,{:.6}",
                ev.entropy.correct, ev.entropy.incorrect
            );
            print!("{s}");
            Ok(())
        }
        Command::Report { common, images } => {
            let run = Run::open(&common)?;
            let pair = run.pair()?;
            let mut metrics = Vec::new();
            collect_metrics(&run.dir, &run.dir, &mut metrics)?;
            metrics.sort();
            let table_path = run.path("iterate/table.csv");
            let table = if table_path.exists() {
                read_text(&table_path)?
            } else {
                let mut t = format!("{GENERATION_HEADER}\n");
                for dir in [run.path("no-pseudo")]
                    .into_iter()
                    .chain(list_dirs(&run.path("adapt"))?)
                {
                    let r = dir.join("result.txt");
                    if r.exists() {
                        t.push_str(&read_text(&r)?);
                    }
                }
                t
            };
            let net_path = [
                run.path(&format!("iterate/gen{}/ours/best.ckpt", run.cfg.gens)),
                run.path("adapt/ours/best.ckpt"),
                run.path("no-pseudo/best.ckpt"),
            ]
            .into_iter()
            .find(|p| p.exists())
            .ok_or_else(|| {
                Error::Config("nothing to report: no trained network in the run directory".into())
            })?;
            let net = SegNet::from_checkpoint(&Checkpoint::load(&net_path)?)?;
            let samples = &pair.target_eval.samples[..images.min(pair.target_eval.len())];
            let written = emit_report(
                &run.path("report"),
                &ReportInput {
                    table_csv: &table,
                    metrics: &metrics,
                    net: &net,
                    samples,
                },
            )?;
            progress(
                "report",
                format!("{} files from {}", written.len(), net_path.display()),
            );
            Ok(())
        }
    }
}

fn list_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

/// Every `metrics.csv` under `dir` except the report itself, named by its
/// relative directory with `/` replaced by `-`.
fn collect_metrics(root: &Path, dir: &Path, out: &mut Vec<(String, String)>) -> Result<()> {
    for sub in list_dirs(dir)? {
        if sub
            .file_name()
            .is_some_and(|n| n == "report" || n == "data")
        {
            continue;
        }
        let m = sub.join("metrics.csv");
        if m.exists() {
            let rel = sub
                .strip_prefix(root)
                .unwrap_or(&sub)
                .to_string_lossy()
                .replace(['/', '\\'], "-");
            out.push((rel, read_text(&m)?));
        }
        collect_metrics(root, &sub, out)?;
    }
    Ok(())
}
