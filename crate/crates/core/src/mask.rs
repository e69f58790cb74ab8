//! Per-query dynamic-convolution masks, query scoring and score-weighted
//! aggregation.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Attention, Builder, Conv, Ctx, Linear};
use crate::numerics::{Scalar, Tensor, Var};

/// Output of [`MaskDecoder::forward`]. Mask values are logits unless
/// `probs` is set, in which case `masks` and `y` hold probabilities.
#[derive(Clone, Debug)]
pub struct MaskBundle {
    /// `[M × S·S]` with `M = N_q`, or `M = 1` when masks come from a single
    /// merged query.
    pub masks: Var,
    /// Query scores `[1 × N_q]`.
    pub scores: Var,
    /// Pre-softmax score logits `[1 × N_q]`; absent when scores are uniform.
    pub score_logits: Option<Var>,
    /// Aggregated prediction `[1 × S·S]`.
    pub y: Var,
    /// Shared mask features `[S, S, C_p]`.
    pub features: Var,
    pub side: usize,
    pub probs: bool,
}

#[derive(Clone, Debug)]
pub struct MaskDecoder {
    conv: Conv,
    kernel_proj: Linear,
    score_attn: Attention,
    score_proj: Linear,
    cp: usize,
    use_mmp: bool,
    use_mqe: bool,
    relu_params: bool,
    probs: bool,
}

impl MaskDecoder {
    pub fn new<T: Scalar>(b: &mut Builder<T>, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.hidden;
        let cp = cfg.mask_channels();
        if cp == 0 {
            return Err(Error::Config("mask channel width C/2 must be positive".into()));
        }
        Ok(MaskDecoder {
            conv: b.conv("mask.conv", 3, c, cp),
            kernel_proj: b.linear("mask.kernel", c, 9 * cp + 1),
            score_attn: b.attention("mask.score_attn", c, cfg.mqe_heads, false)?,
            score_proj: b.linear("mask.score", c, 1),
            cp,
            use_mmp: cfg.use_mmp,
            use_mqe: cfg.use_mqe,
            relu_params: cfg.relu_kernel_params,
            probs: cfg.aggregate_probs,
        })
    }

    pub fn mask_channels(&self) -> usize {
        self.cp
    }

    /// `Up2x(Conv3x3(Up2x(F_s)))` on the square grid implied by `N`.
    pub fn mask_features<T: Scalar>(&self, cx: &mut Ctx<T>, fs: Var) -> Result<Var> {
        let (n, c) = match cx.g.shape(fs) {
            &[n, c] => (n, c),
            s => return Err(Error::invalid("project_masks", format!("expected [N × C], got {s:?}"))),
        };
        let side = (n as f64).sqrt().round() as usize;
        if side * side != n {
            return Err(Error::invalid("project_masks", format!("{n} pixels do not form a square grid")));
        }
        let x = cx.g.reshape(fs, &[side, side, c])?;
        let x = cx.g.upsample2x(x)?;
        let x = self.conv.forward(cx, x, 1, 1)?;
        cx.g.upsample2x(x)
    }

    /// Per-query kernel parameters `[M × (9·C_p + 1)]`.
    pub fn kernel_params<T: Scalar>(&self, cx: &mut Ctx<T>, queries: Var) -> Result<Var> {
        let p = self.kernel_proj.forward(cx, queries)?;
        if self.relu_params {
            cx.g.relu(p)
        } else {
            Ok(p)
        }
    }

    /// `softmax(W_s · MHSA(F_q))` as `[1 × N_q]`, plus the logits.
    pub fn estimate_scores<T: Scalar>(&self, cx: &mut Ctx<T>, queries: Var) -> Result<(Var, Var)> {
        let a = self.score_attn.forward(cx, queries, queries, queries, None)?;
        let s = self.score_proj.forward(cx, a.out)?;
        let logits = cx.g.transpose(s)?;
        Ok((cx.g.softmax(logits, None)?, logits))
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, fs: Var, queries: Var) -> Result<MaskBundle> {
        let features = self.mask_features(cx, fs)?;
        let side = cx.g.shape(features)[0];
        let nq = cx.g.shape(queries)[0];
        let (scores, score_logits) = if self.use_mqe {
            let (s, l) = self.estimate_scores(cx, queries)?;
            (s, Some(l))
        } else {
            let u = T::one() / T::lit(nq as f64);
            (cx.g.constant(Tensor::full(&[1, nq], u)), None)
        };
        let mask_queries = if self.use_mmp {
            queries
        } else if self.use_mqe {
            cx.g.matmul(scores, queries)?
        } else {
            cx.g.mean_rows(queries)?
        };
        let params = self.kernel_params(cx, mask_queries)?;
        let mut masks = dynamic_conv(cx, features, params)?;
        if self.probs {
            masks = cx.g.sigmoid(masks)?;
        }
        let y = if !self.use_mmp {
            masks
        } else if self.use_mqe {
            aggregate(cx, masks, scores)?
        } else {
            cx.g.mean_rows(masks)?
        };
        Ok(MaskBundle { masks, scores, score_logits, y, features, side, probs: self.probs })
    }
}

/// Runs one 3×3, padding-1 convolution per row of `params` over the shared
/// features `[S, S, C_p]`. Row `n` holds the kernel in `(ky, kx, c)` order
/// followed by the bias. Returns `[M × S·S]`.
pub fn dynamic_conv<T: Scalar>(cx: &mut Ctx<T>, features: Var, params: Var) -> Result<Var> {
    let (h, w, cp) = match cx.g.shape(features) {
        &[h, w, c] => (h, w, c),
        s => return Err(Error::invalid("dynamic_conv", format!("expected [H, W, C_p], got {s:?}"))),
    };
    let (m, width) = match cx.g.shape(params) {
        &[m, k] => (m, k),
        s => return Err(Error::invalid("dynamic_conv", format!("expected [M × 9·C_p+1], got {s:?}"))),
    };
    if width != 9 * cp + 1 {
        return Err(Error::shape("dynamic_conv", &[m, width], &[m, 9 * cp + 1]));
    }
    let weights = cx.g.slice_cols(params, 0, 9 * cp)?;
    let bias = cx.g.slice_cols(params, 9 * cp, width)?;
    let kernel = cx.g.transpose(weights)?;
    let kernel = cx.g.reshape(kernel, &[3, 3, cp, m])?;
    let out = cx.g.conv2d(features, kernel, bias, 1, 1)?;
    let out = cx.g.reshape(out, &[h * w, m])?;
    cx.g.transpose(out)
}

/// `y = Σ_n S_n · mask_n` for scores `[1 × M]` and masks `[M × P]`.
pub fn aggregate<T: Scalar>(cx: &mut Ctx<T>, masks: Var, scores: Var) -> Result<Var> {
    let m = cx.g.shape(masks)[0];
    if cx.g.shape(scores) != [1, m] {
        return Err(Error::shape("aggregate", cx.g.shape(masks), cx.g.shape(scores)));
    }
    cx.g.matmul(scores, masks)
}
