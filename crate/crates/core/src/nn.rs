//! Layer building blocks shared by the encoders, neck and decoders.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Var};
use crate::params::{Init, ParamId, ParamStore};

/// Allocates and initialises parameters while a model is assembled.
pub struct Builder<T> {
    pub store: ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<T> {
    pub fn new(seed: u64) -> Self {
        Builder { store: ParamStore::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let value = init.sample(shape, &mut self.rng);
        self.store.add(name, value)
    }

    pub fn linear(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        let init = Init::Xavier { fan_in: din, fan_out: dout };
        Linear {
            w: self.param(&format!("{name}.w"), &[din, dout], init),
            b: self.param(&format!("{name}.b"), &[dout], Init::Zeros),
            din,
            dout,
        }
    }

    /// Linear layer whose weight and bias start at zero.
    pub fn linear_zero(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        Linear {
            w: self.param(&format!("{name}.w"), &[din, dout], Init::Zeros),
            b: self.param(&format!("{name}.b"), &[dout], Init::Zeros),
            din,
            dout,
        }
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: self.param(&format!("{name}.gamma"), &[dim], Init::Ones),
            beta: self.param(&format!("{name}.beta"), &[dim], Init::Zeros),
        }
    }

    pub fn conv(&mut self, name: &str, size: usize, cin: usize, cout: usize) -> Conv {
        let init = Init::Xavier { fan_in: size * size * cin, fan_out: size * size * cout };
        Conv {
            k: self.param(&format!("{name}.k"), &[size, size, cin, cout], init),
            b: self.param(&format!("{name}.b"), &[cout], Init::Zeros),
        }
    }

    pub fn attention(&mut self, name: &str, dim: usize, heads: usize, zero_out: bool) -> Result<Attention> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {dim} in {name}")));
        }
        let o = if zero_out {
            self.linear_zero(&format!("{name}.o"), dim, dim)
        } else {
            self.linear(&format!("{name}.o"), dim, dim)
        };
        Ok(Attention {
            q: self.linear(&format!("{name}.q"), dim, dim),
            k: self.linear(&format!("{name}.k"), dim, dim),
            v: self.linear(&format!("{name}.v"), dim, dim),
            o,
            heads,
        })
    }

    pub fn mlp(&mut self, name: &str, dim: usize, hidden: usize, zero_out: bool) -> Mlp {
        let fc2 = if zero_out {
            self.linear_zero(&format!("{name}.fc2"), hidden, dim)
        } else {
            self.linear(&format!("{name}.fc2"), hidden, dim)
        };
        Mlp { fc1: self.linear(&format!("{name}.fc1"), dim, hidden), fc2 }
    }
}

/// Forward-pass context: the tape plus the parameter leaves bound on it.
pub struct Ctx<'a, T> {
    pub g: &'a mut Graph<T>,
    params: &'a [Var],
    pub ln_eps: f64,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(g: &'a mut Graph<T>, params: &'a [Var], ln_eps: f64) -> Self {
        Ctx { g, params, ln_eps }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.params[id.index()]
    }
}

/// `x·W + b` applied over the trailing axis of any-rank input.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let shape = cx.g.shape(x).to_vec();
        let flat = if shape.len() == 2 {
            x
        } else {
            let rows = cx.g.value(x).rows();
            cx.g.reshape(x, &[rows, *shape.last().unwrap()])?
        };
        let y = cx.g.matmul(flat, cx.p(self.w))?;
        let y = cx.g.add_bias(y, cx.p(self.b))?;
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape;
            *out.last_mut().unwrap() = self.dout;
            cx.g.reshape(y, &out)
        }
    }

    /// `relu(x·W + b)`.
    pub fn forward_relu<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let y = self.forward(cx, x)?;
        cx.g.relu(y)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let eps = cx.ln_eps;
        cx.g.layer_norm(x, cx.p(self.gamma), cx.p(self.beta), eps)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub k: ParamId,
    pub b: ParamId,
}

impl Conv {
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var, stride: usize, pad: usize) -> Result<Var> {
        cx.g.conv2d(x, cx.p(self.k), cx.p(self.b), stride, pad)
    }
}

/// Output of a multi-head attention call.
#[derive(Clone, Debug)]
pub struct AttentionOut {
    pub out: Var,
    /// One `[queries × keys]` probability map per head.
    pub weights: Vec<Var>,
}

/// Multi-head scaled dot-product attention with separate projections for
/// queries, keys, values and output.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    /// `mask` has one entry per (query, key) pair; `false` excludes the key.
    pub fn forward<T: Scalar>(
        &self,
        cx: &mut Ctx<T>,
        queries: Var,
        keys: Var,
        values: Var,
        mask: Option<&[bool]>,
    ) -> Result<AttentionOut> {
        let q = self.q.forward(cx, queries)?;
        let k = self.k.forward(cx, keys)?;
        let v = self.v.forward(cx, values)?;
        let dim = self.q.dout;
        let dh = dim / self.heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (cx.g.slice_cols(q, lo, hi)?, cx.g.slice_cols(k, lo, hi)?, cx.g.slice_cols(v, lo, hi)?)
            };
            let logits = cx.g.matmul_nt(qh, kh)?;
            let logits = cx.g.scale(logits, scale)?;
            let a = cx.g.softmax(logits, mask)?;
            heads.push(cx.g.matmul(a, vh)?);
            weights.push(a);
        }
        let merged = if self.heads == 1 { heads[0] } else { cx.g.concat_last(&heads)? };
        let out = self.o.forward(cx, merged)?;
        Ok(AttentionOut { out, weights })
    }
}

/// Two-layer feed-forward block with a ReLU in between.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward_relu(cx, x)?;
        self.fc2.forward(cx, h)
    }
}
