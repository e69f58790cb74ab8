//! Adam with polynomial learning-rate decay over per-sample gradient tapes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport, Precision};
use crate::model::MmNet;
use crate::numerics::{Graph, Scalar};
use crate::params::ParamStore;
use crate::synth::Sample;

/// `lr · (1 − t/T)^p`, clamped to zero past the end.
pub fn poly_lr(base: f64, step: usize, total: usize, power: f64) -> f64 {
    if total == 0 || step >= total {
        return 0.0;
    }
    base * (1.0 - step as f64 / total as f64).powf(power)
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, p)| vec![T::zero(); p.numel()]).collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros(), v: zeros(), t: 0 }
    }

    /// One bias-corrected update; `grads[i]` belongs to parameter `i`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Vec<T>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Loss and per-parameter gradients of one sample. Unused parameters get
/// zero gradients.
pub fn sample_gradients<T: Scalar>(model: &MmNet<T>, s: &Sample) -> Result<(f64, Vec<Vec<T>>)> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let mut cx = model.ctx(&mut g, &vars);
    let out = model.forward(&mut cx, &s.image(), &s.tokens)?;
    let loss = model.loss(&mut g, &out, &s.gt_lowres())?;
    let value = g.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
    if !value.is_finite() {
        let culprit = g.first_non_finite().unwrap_or_else(|| "the loss".into());
        return Err(Error::NonFinite(format!("sample {}: loss is {value}; first non-finite tensor: {culprit}", s.id)));
    }
    let mut grads = g.backward(loss)?;
    let per_param = vars
        .iter()
        .zip(model.params.iter())
        .map(|(&v, (_, p))| grads.take(v).unwrap_or_else(|| vec![T::zero(); p.numel()]))
        .collect();
    Ok((value, per_param))
}

/// Mean loss and mean gradients over a batch. Samples run in parallel and
/// are summed in batch order, so the result does not depend on scheduling.
pub fn batch_gradients<T: Scalar>(model: &MmNet<T>, batch: &[&Sample]) -> Result<(f64, Vec<Vec<T>>)> {
    let parts = batch.par_iter().map(|s| sample_gradients(model, s)).collect::<Result<Vec<_>>>()?;
    let n = parts.len() as f64;
    let mut iter = parts.into_iter();
    let (mut loss, mut sum) = iter.next().ok_or_else(|| Error::Input("empty batch".into()))?;
    for (l, g) in iter {
        loss += l;
        for (acc, gi) in sum.iter_mut().zip(g) {
            for (a, b) in acc.iter_mut().zip(gi) {
                *a += b;
            }
        }
    }
    let inv = T::lit(1.0 / n);
    for acc in &mut sum {
        for a in acc.iter_mut() {
            *a *= inv;
        }
    }
    Ok((loss / n, sum))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// One line of the metrics log. Validation fields are absent for epochs
/// that were not evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub iou: Option<f64>,
    #[serde(flatten, default)]
    pub prec: Option<Precision>,
    /// Learning rate used by the last step of the epoch.
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub enum Event<'a> {
    Step(&'a StepLog),
    Epoch(&'a EpochLog),
}

pub struct TrainOutcome<T> {
    pub model: MmNet<T>,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    /// Report of the last evaluated epoch.
    pub last_eval: Option<EvalReport>,
}

/// Trains from scratch. `val` may be empty, in which case no evaluation
/// runs. `on_event` sees every step and epoch as it completes.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
    on_event: &mut dyn FnMut(Event) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    let mut model = MmNet::<T>::new(&cfg.model, cfg.seed)?;
    let mut adam = Adam::new(&model.params);
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f0b_a7c4_0000);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let (mut steps, mut epochs, mut last_eval) = (Vec::new(), Vec::new(), None);
    let mut t = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut lr) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = batch_gradients(&model, &batch)?;
            lr = poly_lr(cfg.lr, t, total, cfg.poly_power);
            adam.step(&mut model.params, &grads, lr);
            if let Some(name) = first_non_finite_param(&model.params) {
                return Err(Error::NonFinite(format!("parameter {name} became non-finite at step {t}")));
            }
            let log = StepLog { step: t, epoch, loss, lr };
            on_event(Event::Step(&log))?;
            steps.push(log);
            loss_sum += loss;
            t += 1;
        }
        let evaluate_now = !val.is_empty() && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
        let report = if evaluate_now { Some(evaluate(&model, val, cfg.iou_agg)?) } else { None };
        let log = EpochLog {
            epoch,
            loss: loss_sum / per_epoch as f64,
            iou: report.as_ref().map(|r| r.iou),
            prec: report.as_ref().map(|r| r.prec),
            lr,
        };
        on_event(Event::Epoch(&log))?;
        epochs.push(log);
        if report.is_some() {
            last_eval = report;
        }
    }
    Ok(TrainOutcome { model, steps, epochs, last_eval })
}

fn first_non_finite_param<T: Scalar>(params: &ParamStore<T>) -> Option<String> {
    params.iter().find(|(_, p)| !p.is_finite()).map(|(n, _)| n.to_string())
}
