//! Qualitative export: one directory per sample holding the input, the
//! ground truth, every per-query mask, the score vector and the aggregated
//! prediction, plus a JSON sidecar.

use std::fs;

use anyhow::{Context, Result};
use mmnet_core::dataset::{write_gray, write_mask, write_rgb};
use mmnet_core::metrics::{upsample_nearest, Overlap};
use mmnet_core::{MmNet, Scalar, Split, TrainConfig};
use serde::Serialize;

use crate::args::ExportArgs;
use crate::commands::{load_split, with_checkpoint};
use crate::manifest::{write_atomic, Recorder};

const BAR_WIDTH: usize = 16;
const BAR_HEIGHT: usize = 64;

#[derive(Serialize)]
struct Sidecar<'a> {
    id: &'a str,
    text: &'a str,
    split: Split,
    use_mmp: bool,
    use_mqe: bool,
    /// Side of the predicted masks before upsampling to the image size.
    mask_side: usize,
    scores: &'a [f64],
    iou: f64,
    image: &'static str,
    ground_truth: &'static str,
    query_masks: Vec<String>,
    scores_chart: &'static str,
    probability: &'static str,
    prediction: &'static str,
}

pub fn export_masks(a: &ExportArgs, rec: &mut Recorder) -> Result<()> {
    let cfg = with_checkpoint(&a.checkpoint, |c, m| run(a, c, m), |c, m| run(a, c, m))?;
    rec.config = Some(cfg);
    rec.artifact("checkpoint", &a.checkpoint);
    rec.artifact("out", &a.out);
    Ok(())
}

/// Rebuilds the model with the projector switched off and copies weights
/// across by name; the switch changes wiring, not the parameter set.
fn without_mmp<T: Scalar>(cfg: &TrainConfig, model: MmNet<T>) -> Result<MmNet<T>> {
    let mcfg = mmnet_core::ModelConfig { use_mmp: false, ..cfg.model.clone() };
    let mut out = MmNet::<T>::new(&mcfg, cfg.seed)?;
    for (name, t) in model.params.iter() {
        out.params.set(name, t.clone())?;
    }
    Ok(out)
}

fn probs_to_gray(v: &[f64], probs: bool) -> Vec<u8> {
    v.iter()
        .map(|&x| {
            let p = if probs { x } else { 1.0 / (1.0 + (-x).exp()) };
            (p.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect()
}

fn score_chart(scores: &[f64]) -> Vec<u8> {
    let w = scores.len() * BAR_WIDTH;
    let mut px = vec![0u8; w * BAR_HEIGHT];
    for (n, &s) in scores.iter().enumerate() {
        let h = (s.clamp(0.0, 1.0) * BAR_HEIGHT as f64).round() as usize;
        for y in BAR_HEIGHT - h..BAR_HEIGHT {
            for x in n * BAR_WIDTH..(n + 1) * BAR_WIDTH - 2 {
                px[y * w + x] = 255;
            }
        }
    }
    px
}

fn run<T: Scalar>(a: &ExportArgs, mut cfg: TrainConfig, model: MmNet<T>) -> Result<TrainConfig> {
    let model = if a.no_mmp { without_mmp(&cfg, model)? } else { model };
    cfg.model = model.cfg.clone();
    let samples = load_split(&cfg, a.data.as_deref(), a.split)?;
    for s in samples.iter().take(a.count) {
        let dir = a.out.join(&s.id);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let pred = model.predict(&s.image(), &s.tokens)?;
        let f = s.size / pred.side;
        let up = |v: &[u8]| upsample_nearest(v, pred.side, f);
        write_rgb(&dir.join("image.png"), s.size, &s.rgb)?;
        write_mask(&dir.join("gt.png"), s.size, &s.gt)?;
        let mut query_masks = Vec::new();
        for (n, m) in pred.masks.iter().enumerate() {
            let name = format!("query_{n:02}.png");
            write_gray(&dir.join(&name), s.size, s.size, &up(&probs_to_gray(m, pred.probs)))?;
            query_masks.push(name);
        }
        write_gray(&dir.join("scores.png"), pred.scores.len() * BAR_WIDTH, BAR_HEIGHT, &score_chart(&pred.scores))?;
        write_gray(&dir.join("probability.png"), s.size, s.size, &up(&probs_to_gray(&pred.y, pred.probs)))?;
        let binary = up(&pred.binary());
        write_mask(&dir.join("prediction.png"), s.size, &binary)?;
        let sidecar = Sidecar {
            id: &s.id,
            text: &s.text,
            split: a.split,
            use_mmp: model.cfg.use_mmp,
            use_mqe: model.cfg.use_mqe,
            mask_side: pred.side,
            scores: &pred.scores,
            iou: Overlap::new(&binary, &s.gt)?.iou(),
            image: "image.png",
            ground_truth: "gt.png",
            query_masks,
            scores_chart: "scores.png",
            probability: "probability.png",
            prediction: "prediction.png",
        };
        write_atomic(&dir.join("sample.json"), serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
    }
    log::info!("exported {} samples to {}", samples.len().min(a.count), a.out.display());
    Ok(cfg)
}
