//! The assembled network: encoders, fusion neck, query generator, decoder
//! and mask decoder over one parameter store.

use crate::config::ModelConfig;
use crate::decoder::{DecoderOut, VlDecoder};
use crate::encoders::{ImageEncoder, TextEncoder, TextFeatures, VisualFeatures};
use crate::error::{Error, Result};
use crate::fusion::{FusionNeck, NeckOut};
use crate::mask::{MaskBundle, MaskDecoder};
use crate::nn::{Builder, Ctx};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::params::ParamStore;
use crate::query::{QueryGenerator, QuerySet};

/// Clamp used when the prediction is a probability map.
pub const PROB_EPS: f64 = 1e-7;

/// Every intermediate of one forward pass, as tape handles.
#[derive(Clone, Debug)]
pub struct Forward {
    pub text: TextFeatures,
    pub visual: VisualFeatures,
    pub fused: NeckOut,
    pub queries: QuerySet,
    pub decoder: DecoderOut,
    pub masks: MaskBundle,
}

/// Values pulled off the tape after inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Side of the square prediction.
    pub side: usize,
    /// Aggregated prediction, row-major.
    pub y: Vec<f64>,
    /// One row per produced mask.
    pub masks: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
    /// `true` when `y` holds probabilities rather than logits.
    pub probs: bool,
}

impl Prediction {
    /// Foreground decision: `sigmoid(y) ≥ 0.5`.
    pub fn binary(&self) -> Vec<u8> {
        let cut = if self.probs { 0.5 } else { 0.0 };
        self.y.iter().map(|&v| (v >= cut) as u8).collect()
    }
}

#[derive(Clone, Debug)]
pub struct MmNet<T> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    text: TextEncoder,
    image: ImageEncoder,
    neck: FusionNeck,
    query: QueryGenerator,
    decoder: VlDecoder,
    mask: MaskDecoder,
}

impl<T: Scalar> MmNet<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder::new(seed);
        let text = TextEncoder::new(&mut b, cfg)?;
        let image = ImageEncoder::new(&mut b, cfg)?;
        let neck = FusionNeck::new(&mut b, cfg);
        let query = QueryGenerator::new(&mut b, cfg)?;
        let decoder = VlDecoder::new(&mut b, cfg)?;
        let mask = MaskDecoder::new(&mut b, cfg)?;
        Ok(MmNet { cfg: cfg.clone(), params: b.store, text, image, neck, query, decoder, mask })
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    pub fn image_encoder(&self) -> &ImageEncoder {
        &self.image
    }

    pub fn fusion(&self) -> &FusionNeck {
        &self.neck
    }

    pub fn query_generator(&self) -> &QueryGenerator {
        &self.query
    }

    pub fn decoder(&self) -> &VlDecoder {
        &self.decoder
    }

    pub fn mask_decoder(&self) -> &MaskDecoder {
        &self.mask
    }

    /// Binds every parameter as a gradient-tracking leaf; the returned
    /// handles are indexed by `ParamId`.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.bind(g)
    }

    pub fn ctx<'a>(&self, g: &'a mut Graph<T>, vars: &'a [Var]) -> Ctx<'a, T> {
        Ctx::new(g, vars, self.cfg.ln_eps)
    }

    pub fn forward(&self, cx: &mut Ctx<T>, image: &Tensor<T>, tokens: &[u32]) -> Result<Forward> {
        let s = self.cfg.image_size;
        if image.shape() != [s, s, 3] {
            return Err(Error::shape("forward", image.shape(), &[s, s, 3]));
        }
        let img = cx.g.constant(image.clone());
        let text = self.text.forward(cx, tokens)?;
        let visual = self.image.forward(cx, img)?;
        let fused = self.neck.fuse(cx, &visual, text.global)?;
        let dense = self.query.dense_visual(cx, &visual)?;
        let fused_text = self.query.fuse_text_global(cx, text.tokens, visual.global)?;
        let queries = self.query.generate(cx, dense, fused_text, &text.token_mask)?;
        let decoder = self.decoder.decode(cx, fused.flat, queries.queries)?;
        let masks = self.mask.forward(cx, decoder.features, queries.queries)?;
        Ok(Forward { text, visual, fused, queries, decoder, masks })
    }

    /// Mean binary cross-entropy of the aggregated prediction against a
    /// low-resolution 0/1 target.
    pub fn loss(&self, g: &mut Graph<T>, out: &Forward, target: &[T]) -> Result<Var> {
        let y = out.masks.y;
        if out.masks.probs {
            g.bce_with_probs(y, target, PROB_EPS)
        } else {
            g.bce_with_logits(y, target)
        }
    }

    pub fn predict(&self, image: &Tensor<T>, tokens: &[u32]) -> Result<Prediction> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let mut cx = self.ctx(&mut g, &vars);
        let out = self.forward(&mut cx, image, tokens)?;
        let b = &out.masks;
        let values = |v: Var| g.value(v).to_f64();
        let masks_flat = values(b.masks);
        let per = b.side * b.side;
        Ok(Prediction {
            side: b.side,
            y: values(b.y),
            masks: masks_flat.chunks(per).map(<[f64]>::to_vec).collect(),
            scores: values(b.scores),
            probs: b.probs,
        })
    }
}
