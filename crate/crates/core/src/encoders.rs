//! Text transformer and convolutional image backbone with attention pooling.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Attention, Builder, Conv, Ctx, LayerNorm, Linear, Mlp};
use crate::numerics::{Scalar, Var};
use crate::params::{Init, ParamId};
use crate::vocab::eos_position;

/// Output of [`TextEncoder::forward`].
#[derive(Clone, Debug)]
pub struct TextFeatures {
    /// Per-token features `[L × C]`.
    pub tokens: Var,
    /// Projected EOS feature `[1 × C']`.
    pub global: Var,
    /// `true` for SOS, words and EOS; `false` for padding.
    pub token_mask: Vec<bool>,
    pub eos: usize,
}

#[derive(Clone, Debug)]
struct TextLayer {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

/// Bidirectional pre-norm transformer over padded token sequences.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    embed: ParamId,
    pos: ParamId,
    layers: Vec<TextLayer>,
    ln_final: LayerNorm,
    proj: Linear,
    max_len: usize,
    causal: bool,
}

impl TextEncoder {
    pub fn new<T: Scalar>(b: &mut Builder<T>, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.hidden;
        let embed = b.param(
            "text.embed",
            &[cfg.vocab_size, c],
            Init::Xavier { fan_in: cfg.vocab_size, fan_out: c },
        );
        let pos = b.param("text.pos", &[cfg.max_len, c], Init::Xavier { fan_in: cfg.max_len, fan_out: c });
        let mut layers = Vec::with_capacity(cfg.text_layers);
        for i in 0..cfg.text_layers {
            let name = format!("text.layer{i}");
            layers.push(TextLayer {
                ln1: b.layer_norm(&format!("{name}.ln1"), c),
                attn: b.attention(&format!("{name}.attn"), c, cfg.text_heads, false)?,
                ln2: b.layer_norm(&format!("{name}.ln2"), c),
                mlp: b.mlp(&format!("{name}.mlp"), c, cfg.text_ff, false),
            });
        }
        Ok(TextEncoder {
            embed,
            pos,
            layers,
            ln_final: b.layer_norm("text.ln_final", c),
            proj: b.linear("text.proj", c, cfg.text_dim),
            max_len: cfg.max_len,
            causal: cfg.causal_text,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, tokens: &[u32]) -> Result<TextFeatures> {
        let eos = eos_position(tokens, self.max_len)?;
        let len = tokens.len();
        let token_mask: Vec<bool> = (0..len).map(|i| i <= eos).collect();
        let mut attn_mask = vec![false; len * len];
        for i in 0..len {
            for j in 0..len {
                attn_mask[i * len + j] = token_mask[j] && (!self.causal || j <= i);
            }
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let emb = cx.g.gather_rows(cx.p(self.embed), &ids)?;
        let mut x = cx.g.add(emb, cx.p(self.pos))?;
        for layer in &self.layers {
            let h = layer.ln1.forward(cx, x)?;
            let a = layer.attn.forward(cx, h, h, h, Some(&attn_mask))?;
            x = cx.g.add(x, a.out)?;
            let h = layer.ln2.forward(cx, x)?;
            let m = layer.mlp.forward(cx, h)?;
            x = cx.g.add(x, m)?;
        }
        let features = self.ln_final.forward(cx, x)?;
        let eos_row = cx.g.slice_rows(features, eos, eos + 1)?;
        let global = self.proj.forward(cx, eos_row)?;
        Ok(TextFeatures { tokens: features, global, token_mask, eos })
    }
}

/// Output of [`ImageEncoder::forward`].
#[derive(Clone, Debug)]
pub struct VisualFeatures {
    /// Stride-8 features `[H/8, W/8, C2]`.
    pub v2: Var,
    /// Stride-16 features `[H/16, W/16, C3]`.
    pub v3: Var,
    /// Stride-32 features `[H/32, W/32, C4]` projected from the pooled tokens.
    pub v4: Var,
    /// Global visual feature `[1 × C4]`.
    pub global: Var,
    /// Mean of the stage-4 map, the first token fed to attention pooling.
    pub mean_token: Var,
    /// First attention-pool output token before projection.
    pub pooled: Var,
    pub pool_weights: Vec<Var>,
}

#[derive(Clone, Copy, Debug)]
struct Stage {
    conv: Conv,
    down: Conv,
}

/// Strided convolutional backbone. A stride-2 stem is followed by four
/// stride-2 stages so stages 2, 3 and 4 sit at strides 8, 16 and 32.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    stem: Conv,
    stages: [Stage; 4],
    pub(crate) pool: Attention,
    proj2: Linear,
    proj3: Linear,
    pub(crate) proj4: Linear,
    pub(crate) proj_global: Linear,
}

impl ImageEncoder {
    pub fn new<T: Scalar>(b: &mut Builder<T>, cfg: &ModelConfig) -> Result<Self> {
        let ch = cfg.channels;
        let stem = b.conv("image.stem", 3, 3, ch[0]);
        let mut cin = ch[0];
        let stages = std::array::from_fn(|i| {
            let s = Stage {
                conv: b.conv(&format!("image.stage{}.conv", i + 1), 3, cin, ch[i]),
                down: b.conv(&format!("image.stage{}.down", i + 1), 3, ch[i], ch[i]),
            };
            cin = ch[i];
            s
        });
        Ok(ImageEncoder {
            stem,
            stages,
            pool: b.attention("image.pool", ch[3], cfg.pool_heads, false)?,
            proj2: b.linear("image.proj2", ch[1], ch[1]),
            proj3: b.linear("image.proj3", ch[2], ch[2]),
            proj4: b.linear("image.proj4", ch[3], ch[3]),
            proj_global: b.linear("image.proj_global", ch[3], ch[3]),
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, image: Var) -> Result<VisualFeatures> {
        let shape = cx.g.shape(image).to_vec();
        if shape.len() != 3 || shape[2] != 3 || shape[0] % 32 != 0 || shape[1] % 32 != 0 {
            return Err(Error::invalid(
                "encode_image",
                format!("expected an H×W×3 image with H and W divisible by 32, got {shape:?}"),
            ));
        }
        let x = self.stem.forward(cx, image, 2, 1)?;
        let mut x = cx.g.relu(x)?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            let h = stage.conv.forward(cx, x, 1, 1)?;
            let h = cx.g.relu(h)?;
            let h = stage.down.forward(cx, h, 2, 1)?;
            x = cx.g.relu(h)?;
            outs.push(x);
        }
        let [h4, w4, c4] = <[usize; 3]>::try_from(cx.g.shape(outs[3])).expect("rank 3");
        let flat = cx.g.reshape(outs[3], &[h4 * w4, c4])?;
        let mean_token = cx.g.mean_rows(flat)?;
        let seq = cx.g.concat_rows(&[mean_token, flat])?;
        let pooled_all = self.pool.forward(cx, seq, seq, seq, None)?;
        let pooled = cx.g.slice_rows(pooled_all.out, 0, 1)?;
        let spatial = cx.g.slice_rows(pooled_all.out, 1, 1 + h4 * w4)?;
        let global = self.proj_global.forward(cx, pooled)?;
        let v4 = self.proj4.forward(cx, spatial)?;
        let v4 = cx.g.reshape(v4, &[h4, w4, c4])?;
        let v2 = self.proj2.forward(cx, outs[1])?;
        let v3 = self.proj3.forward(cx, outs[2])?;
        Ok(VisualFeatures {
            v2,
            v3,
            v4,
            global,
            mean_token,
            pooled,
            pool_weights: pooled_all.weights,
        })
    }
}
