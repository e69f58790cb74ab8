//! Transformer decoder carrying query semantics into the fused visual
//! features: self-attention over pixels, cross-attention to the queries,
//! then a feed-forward block, each pre-normed with a residual.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Attention, Builder, Ctx, LayerNorm, Mlp};
use crate::numerics::{Scalar, Tensor, Var};

const TEMPERATURE: f64 = 10_000.0;

/// 1D sinusoidal encoding `[n × c]`: even channels sine, odd channels cosine.
pub fn sine_1d<T: Scalar>(n: usize, c: usize) -> Tensor<T> {
    Tensor::from_fn(&[n, c], |i| {
        let (pos, ch) = (i / c, i % c);
        let freq = TEMPERATURE.powf((2 * (ch / 2)) as f64 / c as f64);
        let arg = pos as f64 / freq;
        T::lit(if ch % 2 == 0 { arg.sin() } else { arg.cos() })
    })
}

/// 2D sinusoidal encoding `[h·w × c]` for a row-major grid. The first half
/// of the channels encodes the row, the second half the column, both on
/// coordinates normalised to (0, 2π].
pub fn sine_2d<T: Scalar>(h: usize, w: usize, c: usize) -> Tensor<T> {
    let half = c / 2;
    let scale = 2.0 * std::f64::consts::PI;
    Tensor::from_fn(&[h * w, c], |i| {
        let (pix, ch) = (i / c, i % c);
        let (y, x) = (pix / w, pix % w);
        let (pos, ch) = if ch < half {
            ((y + 1) as f64 / h as f64 * scale, ch)
        } else {
            ((x + 1) as f64 / w as f64 * scale, ch - half)
        };
        let freq = TEMPERATURE.powf((2 * (ch / 2)) as f64 / half as f64);
        let arg = pos / freq;
        T::lit(if ch % 2 == 0 { arg.sin() } else { arg.cos() })
    })
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: Attention,
    ln_cross: LayerNorm,
    cross_attn: Attention,
    ln_mlp: LayerNorm,
    mlp: Mlp,
}

/// Output of [`VlDecoder::decode`].
#[derive(Clone, Debug)]
pub struct DecoderOut {
    /// Evolved multimodal features `[N × C]`.
    pub features: Var,
    /// Per-layer, per-head pixel self-attention maps `[N × N]`.
    pub self_attention: Vec<Vec<Var>>,
    /// Per-layer, per-head cross-attention maps `[N × N_q]`.
    pub cross_attention: Vec<Vec<Var>>,
}

#[derive(Clone, Debug)]
pub struct VlDecoder {
    layers: Vec<DecoderLayer>,
    grid: usize,
    hidden: usize,
}

impl VlDecoder {
    pub fn new<T: Scalar>(b: &mut Builder<T>, cfg: &ModelConfig) -> Result<Self> {
        if cfg.decoder_layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        let c = cfg.hidden;
        let layers = (0..cfg.decoder_layers)
            .map(|i| {
                let name = format!("decoder.layer{i}");
                Ok(DecoderLayer {
                    ln_self: b.layer_norm(&format!("{name}.ln_self"), c),
                    self_attn: b.attention(&format!("{name}.self_attn"), c, cfg.decoder_heads, true)?,
                    ln_cross: b.layer_norm(&format!("{name}.ln_cross"), c),
                    cross_attn: b.attention(&format!("{name}.cross_attn"), c, cfg.decoder_heads, true)?,
                    ln_mlp: b.layer_norm(&format!("{name}.ln_mlp"), c),
                    mlp: b.mlp(&format!("{name}.mlp"), c, cfg.decoder_ff, true),
                })
            })
            .collect::<Result<_>>()?;
        Ok(VlDecoder { layers, grid: cfg.grid(), hidden: c })
    }

    /// Decodes with 2D sine encodings on the pixels and 1D sine encodings on
    /// the queries.
    pub fn decode<T: Scalar>(&self, cx: &mut Ctx<T>, visual: Var, queries: Var) -> Result<DecoderOut> {
        let nq = cx.g.shape(queries)[0];
        let pixel_pos = cx.g.constant(sine_2d(self.grid, self.grid, self.hidden));
        let query_pos = cx.g.constant(sine_1d(nq, self.hidden));
        self.decode_with_pos(cx, visual, queries, pixel_pos, query_pos)
    }

    /// Positional encodings enter only the attention queries and keys, so
    /// the residual stream itself carries no position signal.
    pub fn decode_with_pos<T: Scalar>(
        &self,
        cx: &mut Ctx<T>,
        visual: Var,
        queries: Var,
        pixel_pos: Var,
        query_pos: Var,
    ) -> Result<DecoderOut> {
        if cx.g.shape(visual) != cx.g.shape(pixel_pos) {
            return Err(Error::shape("decode", cx.g.shape(visual), cx.g.shape(pixel_pos)));
        }
        if cx.g.shape(queries) != cx.g.shape(query_pos) {
            return Err(Error::shape("decode", cx.g.shape(queries), cx.g.shape(query_pos)));
        }
        let keys = cx.g.add(queries, query_pos)?;
        let mut x = visual;
        let mut self_attention = Vec::with_capacity(self.layers.len());
        let mut cross_attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let h = layer.ln_self.forward(cx, x)?;
            let hp = cx.g.add(h, pixel_pos)?;
            let sa = layer.self_attn.forward(cx, hp, hp, h, None)?;
            x = cx.g.add(x, sa.out)?;

            let h = layer.ln_cross.forward(cx, x)?;
            let hp = cx.g.add(h, pixel_pos)?;
            let ca = layer.cross_attn.forward(cx, hp, keys, queries, None)?;
            x = cx.g.add(x, ca.out)?;

            let h = layer.ln_mlp.forward(cx, x)?;
            let m = layer.mlp.forward(cx, h)?;
            x = cx.g.add(x, m)?;
            self_attention.push(sa.weights);
            cross_attention.push(ca.weights);
        }
        Ok(DecoderOut { features: x, self_attention, cross_attention })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sine_encodings_are_bounded_and_distinct() {
        let p = sine_1d::<f64>(4, 8);
        assert!(p.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(p.data()[0], 0.0);
        assert_eq!(p.data()[1], 1.0);
        assert_ne!(&p.data()[0..8], &p.data()[8..16]);

        let q = sine_2d::<f64>(3, 3, 8);
        let rows: Vec<&[f64]> = q.data().chunks(8).collect();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                assert_ne!(rows[i], rows[j], "pixels {i} and {j} share an encoding");
            }
        }
    }
}
