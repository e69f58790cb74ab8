use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{debug, info};
use mmnet_core::ablation::run_study;
use mmnet_core::metrics::evaluate;
use mmnet_core::{checkpoint, dataset, synth, train, DType, EvalReport, Event, MmNet, Sample, Scalar, Split, TrainConfig, Vocab};

use crate::args::{AblateArgs, Command, ConfigArgs, EvalArgs, GenDataArgs, ReplayArgs, TrainArgs};
use crate::export;
use crate::manifest::{write_atomic, Invocation, Recorder, RunManifest};
use crate::ConfigError;

pub const CHECKPOINT: &str = "checkpoint.mmnk";
pub const METRICS: &str = "metrics.jsonl";
pub const STEPS: &str = "steps.jsonl";

pub fn dispatch(command: Command) -> Result<()> {
    let invocation = match command {
        Command::GenData(a) => Invocation::GenData(a),
        Command::Train(a) => Invocation::Train(a),
        Command::Eval(a) => Invocation::Eval(a),
        Command::Ablate(a) => Invocation::Ablate(a),
        Command::ExportMasks(a) => Invocation::ExportMasks(a),
        Command::Replay(a) => return replay(&a),
    };
    run(invocation, None)
}

fn replay(args: &ReplayArgs) -> Result<()> {
    let m = RunManifest::load(&args.manifest)?;
    let config = m.config.ok_or_else(|| ConfigError("manifest has no resolved config to replay".into()))?;
    let mut inv = m.invocation;
    if let Some(out) = &args.out {
        match &mut inv {
            Invocation::GenData(a) => a.out = out.clone(),
            Invocation::Train(a) => a.out = out.clone(),
            Invocation::Eval(a) => a.out = Some(out.clone()),
            Invocation::Ablate(a) => a.out = out.clone(),
            Invocation::ExportMasks(a) => a.out = out.clone(),
        }
    }
    info!("replaying {} from {}", inv.name(), args.manifest.display());
    run(inv, Some(config))
}

/// Runs one command and records its manifest whether or not it succeeded.
fn run(inv: Invocation, config: Option<TrainConfig>) -> Result<()> {
    let dir = manifest_dir(&inv);
    let mut rec = Recorder::new(inv.clone());
    let outcome = match &inv {
        Invocation::GenData(a) => gen_data(a, config, &mut rec),
        Invocation::Train(a) => train_cmd(a, config, &mut rec),
        Invocation::Eval(a) => eval_cmd(a, &mut rec),
        Invocation::Ablate(a) => ablate(a, config, &mut rec),
        Invocation::ExportMasks(a) => export::export_masks(a, &mut rec),
    };
    let written = rec.finish(&dir, &outcome);
    match (&outcome, written) {
        (Ok(()), Err(e)) => return Err(e.context("writing the run manifest")),
        (_, Ok(path)) => debug!("manifest written to {}", path.display()),
        (Err(_), Err(e)) => log::warn!("could not write the run manifest: {e:#}"),
    }
    outcome
}

fn manifest_dir(inv: &Invocation) -> PathBuf {
    match inv {
        Invocation::GenData(a) => a.out.clone(),
        Invocation::Train(a) => a.out.clone(),
        Invocation::Eval(a) => a.out.clone().unwrap_or_else(|| parent(&a.checkpoint)),
        Invocation::Ablate(a) => a.out.clone(),
        Invocation::ExportMasks(a) => a.out.clone(),
    }
}

fn parent(p: &Path) -> PathBuf {
    p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf()
}

fn resolve(args: &ConfigArgs, replayed: Option<TrainConfig>, rec: &mut Recorder) -> Result<TrainConfig> {
    let cfg = match replayed {
        Some(c) => {
            c.validate().map_err(|e| ConfigError(e.to_string()))?;
            c
        }
        None => args.resolve()?,
    };
    rec.config = Some(cfg.clone());
    Ok(cfg)
}

/// Reads a split from `data` or renders it from the config.
pub fn load_split(cfg: &TrainConfig, data: Option<&Path>, split: Split) -> Result<Vec<Sample>> {
    let m = &cfg.model;
    match data {
        Some(dir) => {
            let samples = dataset::load_split(dir, split)?;
            if let Some(s) = samples.iter().find(|s| s.size != m.image_size || s.tokens.len() != m.max_len) {
                return Err(ConfigError(format!(
                    "{}: sample {} is {} px with {} tokens; the model expects {} px and {} tokens",
                    dir.display(),
                    s.id,
                    s.size,
                    s.tokens.len(),
                    m.image_size,
                    m.max_len
                ))
                .into());
            }
            Ok(samples)
        }
        None => {
            let n = match split {
                Split::Train => cfg.train_size,
                Split::Val => cfg.val_size,
            };
            if n == 0 {
                return Ok(Vec::new());
            }
            Ok(synth::generate(&cfg.data, m.image_size, m.max_len, split, n)?)
        }
    }
}

fn gen_data(a: &GenDataArgs, replayed: Option<TrainConfig>, rec: &mut Recorder) -> Result<()> {
    let cfg = resolve(&a.config, replayed, rec)?;
    dataset::write_vocab(&a.out, &Vocab::builtin())?;
    rec.artifact("vocab", &a.out.join("vocab.txt"));
    for split in [Split::Train, Split::Val] {
        let samples = load_split(&cfg, None, split)?;
        if samples.is_empty() {
            continue;
        }
        dataset::export_split(&a.out, split, &samples)?;
        rec.artifact(split.name(), &a.out.join(split.name()));
        info!("wrote {} {} samples to {}", samples.len(), split.name(), a.out.join(split.name()).display());
    }
    Ok(())
}

fn jsonl(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn train_cmd(a: &TrainArgs, replayed: Option<TrainConfig>, rec: &mut Recorder) -> Result<()> {
    let cfg = resolve(&a.config, replayed, rec)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let tr = load_split(&cfg, a.data.as_deref(), Split::Train)?;
    let va = load_split(&cfg, a.data.as_deref(), Split::Val)?;
    info!("training on {} samples, validating on {}", tr.len(), va.len());
    let report = match cfg.dtype {
        DType::F32 => train_with::<f32>(&cfg, &tr, &va, &a.out)?,
        DType::F64 => train_with::<f64>(&cfg, &tr, &va, &a.out)?,
    };
    for key in ["checkpoint", "metrics", "steps"] {
        let file = match key {
            "checkpoint" => CHECKPOINT,
            "metrics" => METRICS,
            _ => STEPS,
        };
        rec.artifact(key, &a.out.join(file));
    }
    if let Some(r) = report {
        let path = a.out.join("eval-val.json");
        write_atomic(&path, serde_json::to_string_pretty(&r)?.as_bytes())?;
        rec.artifact("report", &path);
        println!("{}", summary("val", &r));
    }
    Ok(())
}

fn train_with<T: Scalar>(cfg: &TrainConfig, tr: &[Sample], va: &[Sample], out: &Path) -> Result<Option<EvalReport>> {
    let mut metrics = jsonl(&out.join(METRICS))?;
    let mut steps = jsonl(&out.join(STEPS))?;
    let outcome = train::<T>(cfg, tr, va, &mut |e| {
        match e {
            Event::Step(s) => {
                serde_json::to_writer(&mut steps, s)?;
                steps.write_all(b"\n")?;
                debug!("step {} loss {:.5} lr {:.3e}", s.step, s.loss, s.lr);
            }
            Event::Epoch(l) => {
                serde_json::to_writer(&mut metrics, l)?;
                metrics.write_all(b"\n")?;
                metrics.flush()?;
                steps.flush()?;
                match l.iou {
                    Some(iou) => info!("epoch {}/{}: loss {:.5}, val IoU {:.4}", l.epoch, cfg.epochs, l.loss, iou),
                    None => info!("epoch {}/{}: loss {:.5}", l.epoch, cfg.epochs, l.loss),
                }
            }
        }
        Ok(())
    })?;
    metrics.flush()?;
    steps.flush()?;
    checkpoint::save(&out.join(CHECKPOINT), cfg, &outcome.model.params)?;
    Ok(outcome.last_eval)
}

pub fn summary(split: &str, r: &EvalReport) -> String {
    let p = r.prec.values();
    format!(
        "{split}: {} samples, IoU {:.2}, Pr@50 {:.2}, Pr@60 {:.2}, Pr@70 {:.2}, Pr@80 {:.2}, Pr@90 {:.2}",
        r.samples.len(),
        100.0 * r.iou,
        100.0 * p[0],
        100.0 * p[1],
        100.0 * p[2],
        100.0 * p[3],
        100.0 * p[4]
    )
}

/// Loads a checkpoint at the precision it was trained in and hands the
/// model to `f`.
pub fn with_checkpoint<R>(
    path: &Path,
    f32_fn: impl FnOnce(TrainConfig, MmNet<f32>) -> Result<R>,
    f64_fn: impl FnOnce(TrainConfig, MmNet<f64>) -> Result<R>,
) -> Result<R> {
    let (cfg, model) = checkpoint::load::<f32>(path).with_context(|| format!("loading {}", path.display()))?;
    match cfg.dtype {
        DType::F32 => f32_fn(cfg, model),
        DType::F64 => {
            let (cfg, model) = checkpoint::load::<f64>(path)?;
            f64_fn(cfg, model)
        }
    }
}

fn eval_cmd(a: &EvalArgs, rec: &mut Recorder) -> Result<()> {
    fn go<T: Scalar>(a: &EvalArgs, mut cfg: TrainConfig, model: MmNet<T>) -> Result<(TrainConfig, EvalReport)> {
        if let Some(agg) = a.iou_agg {
            cfg.iou_agg = agg;
        }
        let samples = load_split(&cfg, a.data.as_deref(), a.split)?;
        if samples.is_empty() {
            bail!(mmnet_core::Error::Input(format!("split {} is empty", a.split.name())));
        }
        let report = evaluate(&model, &samples, cfg.iou_agg)?;
        Ok((cfg, report))
    }
    let (cfg, report) = with_checkpoint(&a.checkpoint, |c, m| go(a, c, m), |c, m| go(a, c, m))?;
    rec.config = Some(cfg);
    rec.artifact("checkpoint", &a.checkpoint);
    let dir = a.out.clone().unwrap_or_else(|| parent(&a.checkpoint));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(format!("eval-{}.json", a.split.name()));
    write_atomic(&path, serde_json::to_string_pretty(&report)?.as_bytes())?;
    rec.artifact("report", &path);
    println!("{}", summary(a.split.name(), &report));
    Ok(())
}

fn ablate(a: &AblateArgs, replayed: Option<TrainConfig>, rec: &mut Recorder) -> Result<()> {
    let cfg = resolve(&a.config, replayed, rec)?;
    if a.seeds.is_empty() {
        return Err(ConfigError("--seeds needs at least one value".into()).into());
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let tr = load_split(&cfg, a.data.as_deref(), Split::Train)?;
    let va = load_split(&cfg, a.data.as_deref(), Split::Val)?;
    let cells = a.study.cells(&cfg).len();
    info!("{}: {cells} cells x {} seeds, {} at a time", a.study.title(), a.seeds.len(), a.jobs.max(1));
    let table = run_study(&cfg, a.study, &a.seeds, a.jobs, &tr, &va)?;
    let stem = serde_json::to_value(a.study)?.as_str().unwrap_or("study").to_string();
    let text_path = a.out.join(format!("{stem}.txt"));
    let json_path = a.out.join(format!("{stem}.json"));
    let text = table.render();
    write_atomic(&text_path, text.as_bytes())?;
    write_atomic(&json_path, table.to_json()?.as_bytes())?;
    rec.artifact("table", &text_path);
    rec.artifact("table_json", &json_path);
    print!("{text}");
    let failed = table.rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        bail!("{failed} of {} cells failed; see {}", table.rows.len(), text_path.display());
    }
    Ok(())
}
