//! Multi-stage visual feature merge at stride 16, optionally gated by the
//! global text feature.

use crate::config::ModelConfig;
use crate::encoders::VisualFeatures;
use crate::error::{Error, Result};
use crate::nn::{Builder, Ctx, Linear};
use crate::numerics::{Scalar, Tensor, Var};

/// Coordinate map `[h, w, 2]`: channel 0 runs from −1 at the left pixel
/// centre to +1 at the right, channel 1 likewise from top to bottom.
pub fn coord_features<T: Scalar>(h: usize, w: usize) -> Tensor<T> {
    let lin = |i: usize, n: usize| if n == 1 { 0.0 } else { -1.0 + 2.0 * i as f64 / (n - 1) as f64 };
    let mut data = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        for x in 0..w {
            data.push(T::lit(lin(x, w)));
            data.push(T::lit(lin(y, h)));
        }
    }
    Tensor::new(&[h, w, 2], data).expect("coordinate map shape")
}

/// Intermediate and final maps of a [`Neck`] pass.
#[derive(Clone, Debug)]
pub struct NeckOut {
    /// Stride-32 branch upsampled to stride 16, `[H3, W3, C]`.
    pub m4: Var,
    pub m3: Var,
    pub m2: Var,
    pub merged: Var,
    pub coord: Var,
    /// Flattened output `[H3·W3 × C]`.
    pub flat: Var,
}

/// Shared merge pipeline. With a text gate this is the fusion neck; without
/// it the same structure yields dense visual features for query generation.
#[derive(Clone, Debug)]
pub struct Neck {
    v4: Linear,
    text_gate: Option<Linear>,
    m4: Linear,
    v3: Linear,
    m3: Linear,
    v2: Linear,
    merge: Linear,
    out: Linear,
}

impl Neck {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, cfg: &ModelConfig, gated: bool) -> Self {
        let c = cfg.hidden;
        let half = c / 2;
        let ch = cfg.channels;
        Neck {
            v4: b.linear(&format!("{name}.v4"), ch[3], c),
            text_gate: gated.then(|| b.linear(&format!("{name}.tg"), cfg.text_dim, c)),
            m4: b.linear(&format!("{name}.m4"), c, half),
            v3: b.linear(&format!("{name}.v3"), ch[2], half),
            m3: b.linear(&format!("{name}.m3"), c, half),
            v2: b.linear(&format!("{name}.v2"), ch[1], half),
            merge: b.linear(&format!("{name}.merge"), 3 * c, c),
            out: b.linear(&format!("{name}.out"), c + 2, c),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        cx: &mut Ctx<T>,
        v: &VisualFeatures,
        text_global: Option<Var>,
    ) -> Result<NeckOut> {
        let s2 = cx.g.shape(v.v2).to_vec();
        let s3 = cx.g.shape(v.v3).to_vec();
        let s4 = cx.g.shape(v.v4).to_vec();
        if s3[0] != 2 * s4[0] || s3[1] != 2 * s4[1] || s2[0] != 2 * s3[0] || s2[1] != 2 * s3[1] {
            return Err(Error::invalid(
                "neck",
                format!("features are not at strides 8/16/32: {s2:?}, {s3:?}, {s4:?}"),
            ));
        }
        let mut top = self.v4.forward_relu(cx, v.v4)?;
        if let Some(gate) = &self.text_gate {
            let t = text_global.ok_or_else(|| Error::Input("gated neck needs a text feature".into()))?;
            let t = gate.forward_relu(cx, t)?;
            top = cx.g.mul_bcast(top, t)?;
        }
        let m4 = cx.g.upsample2x(top)?;
        let a = self.m4.forward_relu(cx, m4)?;
        let b = self.v3.forward_relu(cx, v.v3)?;
        let m3 = cx.g.concat_last(&[a, b])?;
        let a = self.m3.forward_relu(cx, m3)?;
        let pooled = cx.g.avgpool2x2(v.v2)?;
        let b = self.v2.forward_relu(cx, pooled)?;
        let m2 = cx.g.concat_last(&[a, b])?;
        let cat = cx.g.concat_last(&[m2, m3, m4])?;
        let merged = self.merge.forward(cx, cat)?;
        let coord = cx.g.constant(coord_features(s3[0], s3[1]));
        let with_coord = cx.g.concat_last(&[merged, coord])?;
        let out = self.out.forward(cx, with_coord)?;
        let c = *cx.g.shape(out).last().unwrap();
        let flat = cx.g.reshape(out, &[s3[0] * s3[1], c])?;
        Ok(NeckOut { m4, m3, m2, merged, coord, flat })
    }
}

/// Text-gated neck producing the multimodal features F_vt.
#[derive(Clone, Debug)]
pub struct FusionNeck {
    pub(crate) neck: Neck,
}

impl FusionNeck {
    pub fn new<T: Scalar>(b: &mut Builder<T>, cfg: &ModelConfig) -> Self {
        FusionNeck { neck: Neck::new(b, "fusion", cfg, true) }
    }

    pub fn fuse<T: Scalar>(&self, cx: &mut Ctx<T>, v: &VisualFeatures, text_global: Var) -> Result<NeckOut> {
        self.neck.forward(cx, v, Some(text_global))
    }
}
