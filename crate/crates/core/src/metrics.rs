//! IoU and Precision@X over binary masks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::IouAgg;
use crate::error::{Error, Result};
use crate::model::MmNet;
use crate::numerics::Scalar;
use crate::synth::Sample;

pub const THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// Pixel counts for one prediction/ground-truth pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overlap {
    pub intersection: u64,
    pub union: u64,
}

impl Overlap {
    pub fn new(pred: &[u8], gt: &[u8]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::shape("iou", &[pred.len()], &[gt.len()]));
        }
        let (mut intersection, mut union) = (0, 0);
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (p != 0, g != 0);
            intersection += (p && g) as u64;
            union += (p || g) as u64;
        }
        Ok(Overlap { intersection, union })
    }

    /// An empty union (both masks empty) counts as a perfect match.
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

/// Fraction of samples with IoU strictly above each threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Precision {
    pub pr50: f64,
    pub pr60: f64,
    pub pr70: f64,
    pub pr80: f64,
    pub pr90: f64,
}

impl Precision {
    pub fn from_ious(ious: &[f64]) -> Self {
        let at = |x: f64| ious.iter().filter(|&&v| v > x).count() as f64 / ious.len() as f64;
        let [pr50, pr60, pr70, pr80, pr90] = THRESHOLDS.map(at);
        Precision { pr50, pr60, pr70, pr80, pr90 }
    }

    pub fn values(&self) -> [f64; 5] {
        [self.pr50, self.pr60, self.pr70, self.pr80, self.pr90]
    }

    pub fn is_monotone(&self) -> bool {
        self.values().windows(2).all(|w| w[0] >= w[1])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub iou: f64,
    #[serde(flatten)]
    pub overlap: Overlap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou: f64,
    pub agg: IouAgg,
    #[serde(flatten)]
    pub prec: Precision,
    pub samples: Vec<SampleRecord>,
}

impl EvalReport {
    pub fn from_records(samples: Vec<SampleRecord>, agg: IouAgg) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Input("cannot evaluate an empty split".into()));
        }
        let ious: Vec<f64> = samples.iter().map(|s| s.iou).collect();
        let iou = match agg {
            IouAgg::Mean => ious.iter().sum::<f64>() / ious.len() as f64,
            IouAgg::Overall => {
                let total = samples.iter().fold(Overlap { intersection: 0, union: 0 }, |a, s| Overlap {
                    intersection: a.intersection + s.overlap.intersection,
                    union: a.union + s.overlap.union,
                });
                total.iou()
            }
        };
        Ok(EvalReport { iou, agg, prec: Precision::from_ious(&ious), samples })
    }
}

/// Nearest-neighbour upsampling of a square `side × side` mask by `factor`.
pub fn upsample_nearest(mask: &[u8], side: usize, factor: usize) -> Vec<u8> {
    let out_side = side * factor;
    let mut out = Vec::with_capacity(out_side * out_side);
    for y in 0..out_side {
        for x in 0..out_side {
            out.push(mask[(y / factor) * side + x / factor]);
        }
    }
    out
}

/// Thresholds the prediction, upsamples it to the image size and scores it
/// against the full-resolution ground truth.
pub fn score_sample<T: Scalar>(model: &MmNet<T>, s: &Sample) -> Result<SampleRecord> {
    let pred = model.predict(&s.image(), &s.tokens)?;
    if s.size % pred.side != 0 {
        return Err(Error::shape("evaluate", &[pred.side, pred.side], &[s.size, s.size]));
    }
    let full = upsample_nearest(&pred.binary(), pred.side, s.size / pred.side);
    let overlap = Overlap::new(&full, &s.gt)?;
    Ok(SampleRecord { id: s.id.clone(), iou: overlap.iou(), overlap })
}

/// Read-only over the model; samples are scored in parallel and reported in
/// input order.
pub fn evaluate<T: Scalar>(model: &MmNet<T>, samples: &[Sample], agg: IouAgg) -> Result<EvalReport> {
    let records = samples.par_iter().map(|s| score_sample(model, s)).collect::<Result<Vec<_>>>()?;
    EvalReport::from_records(records, agg)
}
