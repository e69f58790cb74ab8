//! Generation of N_q language queries, each a visually guided weighting of
//! the words in the expression.

use crate::config::ModelConfig;
use crate::encoders::VisualFeatures;
use crate::error::{Error, Result};
use crate::fusion::Neck;
use crate::nn::{Builder, Ctx, Linear};
use crate::numerics::{Scalar, Var};

/// Output of [`QueryGenerator::generate`].
#[derive(Clone, Debug)]
pub struct QuerySet {
    /// Generated queries `[N_q × C]`.
    pub queries: Var,
    /// Word attention `[N_q × L]`; each row sums to one over valid words.
    pub attention: Var,
    /// Text features fused with the global visual feature `[L × C]`.
    pub fused_text: Var,
    /// Per-query dense visual vectors `[N_q × H3·W3]`.
    pub dense: Var,
}

#[derive(Clone, Debug)]
pub struct QueryGenerator {
    neck: Neck,
    reduce: [Linear; 3],
    text: Linear,
    visual_gate: Option<Linear>,
    dense_proj: Linear,
    word_proj: Linear,
    value_proj: Linear,
    num_queries: usize,
    scale: bool,
}

impl QueryGenerator {
    pub fn new<T: Scalar>(b: &mut Builder<T>, cfg: &ModelConfig) -> Result<Self> {
        if cfg.num_queries < 1 {
            return Err(Error::Config("num_queries must be at least 1".into()));
        }
        let c = cfg.hidden;
        let half = c / 2;
        let n = cfg.grid() * cfg.grid();
        Ok(QueryGenerator {
            neck: Neck::new(b, "query.dense", cfg, false),
            reduce: [
                b.linear("query.reduce1", c, half),
                b.linear("query.reduce2", half, half),
                b.linear("query.reduce3", half, cfg.num_queries),
            ],
            text: b.linear("query.text", c, c),
            visual_gate: cfg.use_fvg.then(|| b.linear("query.vg", cfg.channels[3], c)),
            dense_proj: b.linear("query.vd", n, c),
            word_proj: b.linear("query.word", c, c),
            value_proj: b.linear("query.value", c, c),
            num_queries: cfg.num_queries,
            scale: cfg.scale_query_attn,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.num_queries
    }

    /// Ungated merge of the stage features reduced to one map per query,
    /// flattened and transposed to `[N_q × H3·W3]`. Never reads text.
    pub fn dense_visual<T: Scalar>(&self, cx: &mut Ctx<T>, v: &VisualFeatures) -> Result<Var> {
        let merged = self.neck.forward(cx, v, None)?;
        let h = self.reduce[0].forward_relu(cx, merged.flat)?;
        let h = self.reduce[1].forward_relu(cx, h)?;
        let maps = self.reduce[2].forward(cx, h)?;
        cx.g.transpose(maps)
    }

    /// `relu(F_t·W_t) ⊙ relu(F_vg·W_vg)` with the visual gate broadcast over
    /// words; without the gate only the text branch is returned.
    pub fn fuse_text_global<T: Scalar>(&self, cx: &mut Ctx<T>, words: Var, visual_global: Var) -> Result<Var> {
        let t = self.text.forward_relu(cx, words)?;
        match &self.visual_gate {
            Some(gate) => {
                let g = gate.forward_relu(cx, visual_global)?;
                cx.g.mul_bcast(t, g)
            }
            None => Ok(t),
        }
    }

    pub fn generate<T: Scalar>(
        &self,
        cx: &mut Ctx<T>,
        dense: Var,
        fused_text: Var,
        token_mask: &[bool],
    ) -> Result<QuerySet> {
        if !token_mask.iter().any(|&m| m) {
            return Err(Error::Input("expression has no valid word position".into()));
        }
        let visual = self.dense_proj.forward_relu(cx, dense)?;
        let words = self.word_proj.forward_relu(cx, fused_text)?;
        let mut logits = cx.g.matmul_nt(visual, words)?;
        if self.scale {
            let c = cx.g.shape(words)[1];
            logits = cx.g.scale(logits, T::lit(1.0 / (c as f64).sqrt()))?;
        }
        let rows = cx.g.shape(logits)[0];
        if token_mask.len() != cx.g.shape(logits)[1] {
            return Err(Error::shape("generate_queries", cx.g.shape(logits), &[token_mask.len()]));
        }
        let mask: Vec<bool> = (0..rows).flat_map(|_| token_mask.iter().copied()).collect();
        let attention = cx.g.softmax(logits, Some(&mask))?;
        let values = self.value_proj.forward_relu(cx, fused_text)?;
        let queries = cx.g.matmul(attention, values)?;
        Ok(QuerySet { queries, attention, fused_text, dense })
    }
}
