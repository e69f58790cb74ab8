//! Model, data and training configuration.
//!
//! Every struct deserialises with `deny_unknown_fields`, so a misspelt key in
//! a config file is an error rather than a silently ignored setting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DType;
use crate::vocab::Vocab;

/// Spatial upsampling used by the neck and the mask projector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Upsample {
    #[default]
    Nearest,
}

/// How per-sample IoUs are reduced to one number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum IouAgg {
    /// Mean of per-sample IoU.
    #[default]
    Mean,
    /// Total intersection over total union.
    Overall,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Square input resolution; must be divisible by 32.
    pub image_size: usize,
    /// Backbone widths of stages 1-4.
    pub channels: [usize; 4],
    /// Shared multimodal width C.
    pub hidden: usize,
    /// Width C' of the projected global text feature.
    pub text_dim: usize,
    pub vocab_size: usize,
    /// Token sequence length including SOS, EOS and padding.
    pub max_len: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub text_ff: usize,
    pub pool_heads: usize,
    pub num_queries: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub decoder_ff: usize,
    pub mqe_heads: usize,
    pub ln_eps: f64,
    pub upsample: Upsample,
    /// Gate word features with the global visual feature.
    pub use_fvg: bool,
    /// One mask per query; when off the scored queries are merged into a
    /// single query that produces the only mask.
    pub use_mmp: bool,
    /// Score-weighted aggregation; when off masks are averaged uniformly.
    pub use_mqe: bool,
    pub causal_text: bool,
    /// Divide query-word attention logits by sqrt(C).
    pub scale_query_attn: bool,
    /// Apply ReLU to the dynamic kernel parameters.
    pub relu_kernel_params: bool,
    /// Aggregate sigmoid probabilities instead of logits.
    pub aggregate_probs: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 96,
            channels: [16, 32, 64, 64],
            hidden: 64,
            text_dim: 64,
            vocab_size: Vocab::builtin().len(),
            max_len: 8,
            text_layers: 2,
            text_heads: 4,
            text_ff: 256,
            pool_heads: 4,
            num_queries: 8,
            decoder_layers: 2,
            decoder_heads: 4,
            decoder_ff: 256,
            mqe_heads: 4,
            ln_eps: 1e-5,
            upsample: Upsample::Nearest,
            use_fvg: true,
            use_mmp: true,
            use_mqe: true,
            causal_text: false,
            scale_query_attn: false,
            relu_kernel_params: false,
            aggregate_probs: false,
        }
    }
}

impl ModelConfig {
    /// Full-size widths: 480×480 input, 8 heads, width 512, feed-forward 2048.
    pub fn paper_dims() -> Self {
        ModelConfig {
            image_size: 480,
            channels: [64, 128, 256, 512],
            hidden: 512,
            text_dim: 512,
            max_len: 17,
            text_layers: 2,
            text_heads: 8,
            text_ff: 2048,
            pool_heads: 8,
            decoder_heads: 8,
            decoder_ff: 2048,
            mqe_heads: 8,
            ..Self::default()
        }
    }

    /// Side of the stride-16 grid (H3 = W3).
    pub fn grid(&self) -> usize {
        self.image_size / 16
    }

    /// Side of the predicted mask (4·H3).
    pub fn mask_size(&self) -> usize {
        4 * self.grid()
    }

    /// Mask-feature width C_p = C/2.
    pub fn mask_channels(&self) -> usize {
        self.hidden / 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return bad(format!("image_size {} must be a positive multiple of 32", self.image_size));
        }
        if self.hidden == 0 || self.hidden % 4 != 0 {
            return bad(format!("hidden width {} must be a positive multiple of 4", self.hidden));
        }
        if self.channels.iter().any(|&c| c == 0) || self.text_dim == 0 {
            return bad("channel widths must be positive".into());
        }
        if self.num_queries < 1 {
            return bad("num_queries must be at least 1".into());
        }
        if self.max_len < 3 {
            return bad(format!("max_len {} cannot hold SOS, a word and EOS", self.max_len));
        }
        if self.vocab_size < Vocab::SPECIALS {
            return bad(format!("vocab_size {} is smaller than the special tokens", self.vocab_size));
        }
        if self.text_layers == 0 || self.decoder_layers == 0 {
            return bad("text_layers and decoder_layers must be at least 1".into());
        }
        if self.text_ff == 0 || self.decoder_ff == 0 {
            return bad("feed-forward widths must be positive".into());
        }
        for (what, heads, width) in [
            ("text_heads", self.text_heads, self.hidden),
            ("decoder_heads", self.decoder_heads, self.hidden),
            ("mqe_heads", self.mqe_heads, self.hidden),
            ("pool_heads", self.pool_heads, self.channels[3]),
        ] {
            if heads == 0 || width % heads != 0 {
                return bad(format!("{what} = {heads} does not divide width {width}"));
            }
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive".into());
        }
        Ok(())
    }
}

/// Synthetic scene generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub min_distractors: usize,
    pub max_distractors: usize,
    /// Shapes are rasterised on blocks of this many pixels; 1 is per-pixel.
    pub raster_cell: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { seed: 0, min_distractors: 1, max_distractors: 3, raster_cell: 4 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_distractors > self.max_distractors {
            return Err(Error::Config(format!(
                "min_distractors {} exceeds max_distractors {}",
                self.min_distractors, self.max_distractors
            )));
        }
        if self.raster_cell == 0 {
            return Err(Error::Config("raster_cell must be at least 1".into()));
        }
        if self.max_distractors > crate::synth::GRID_CELLS - 1 {
            return Err(Error::Config(format!(
                "a {}-cell grid cannot host {} distractors next to the target",
                crate::synth::GRID_CELLS,
                self.max_distractors
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Power of the polynomial learning-rate decay.
    pub poly_power: f64,
    /// Seeds parameter initialisation and batch order.
    pub seed: u64,
    pub train_size: usize,
    pub val_size: usize,
    /// Evaluate on the validation split every this many epochs (the last
    /// epoch is always evaluated).
    pub eval_every: usize,
    pub iou_agg: IouAgg,
    pub dtype: DType,
    pub data: SynthConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 8,
            lr: 1e-3,
            poly_power: 0.9,
            seed: 0,
            train_size: 2000,
            val_size: 200,
            eval_every: 1,
            iou_agg: IouAgg::Mean,
            dtype: DType::F32,
            data: SynthConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn paper_dims() -> Self {
        TrainConfig { epochs: 100, lr: 1e-5, model: ModelConfig::paper_dims(), ..Self::default() }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.train_size == 0 {
            return Err(Error::Config("epochs, batch_size and train_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.poly_power >= 0.0) {
            return Err(Error::Config("poly_power must be non-negative".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        Ok(())
    }

    /// Optimiser steps over the whole run.
    pub fn total_steps(&self) -> usize {
        self.epochs * self.train_size.div_ceil(self.batch_size)
    }
}
