//! Brute-force oracles and fixtures shared by the integration tests. Every
//! oracle works on plain `f64` slices and shares no code with the engine.
#![allow(dead_code)]

use mmnet_core::nn::Ctx;
use mmnet_core::{Graph, ModelConfig, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

pub fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).unwrap()
}

/// Sliding-window cross-correlation: `x` is `[h, w, cin]`, `k` is
/// `[kh, kw, cin, cout]`, zero padding on every side.
#[allow(clippy::too_many_arguments)]
pub fn conv_oracle(
    x: &[f64],
    (h, w, cin): (usize, usize, usize),
    k: &[f64],
    (kh, kw, cout): (usize, usize, usize),
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (usize, usize, Vec<f64>) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; ho * wo * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            for co in 0..cout {
                let mut acc = bias[co];
                for dy in 0..kh {
                    for dx in 0..kw {
                        let iy = (oy * stride + dy) as isize - pad as isize;
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            let xv = x[(iy as usize * w + ix as usize) * cin + ci];
                            acc += xv * k[((dy * kw + dx) * cin + ci) * cout + co];
                        }
                    }
                }
                out[(oy * wo + ox) * cout + co] = acc;
            }
        }
    }
    (ho, wo, out)
}

/// One dynamic 3×3 mask from a parameter row `[9·cp kernel values in
/// (ky, kx, c) order, bias]`, evaluated pixel by pixel.
pub fn dynamic_mask_oracle(f: &[f64], side: usize, cp: usize, row: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let mut acc = row[9 * cp];
            for ky in 0..3 {
                for kx in 0..3 {
                    let (iy, ix) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                    if iy < 0 || ix < 0 || iy >= side as isize || ix >= side as isize {
                        continue;
                    }
                    for c in 0..cp {
                        acc += f[(iy as usize * side + ix as usize) * cp + c] * row[(ky * 3 + kx) * cp + c];
                    }
                }
            }
            out[y * side + x] = acc;
        }
    }
    out
}

/// Softmax of one row by the textbook formula (with max shift).
pub fn softmax_oracle(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Mean of `−[z·ln σ(x) + (1−z)·ln(1−σ(x))]`, evaluated directly.
pub fn bce_oracle(x: &[f64], z: &[f64]) -> f64 {
    let total: f64 = x
        .iter()
        .zip(z)
        .map(|(&x, &z)| {
            let p = 1.0 / (1.0 + (-x).exp());
            -(z * p.ln() + (1.0 - z) * (1.0 - p).ln())
        })
        .sum();
    total / x.len() as f64
}

/// Pixel-counting IoU with the empty-union convention.
pub fn iou_oracle(pred: &[u8], gt: &[u8]) -> f64 {
    let mut i = 0usize;
    let mut u = 0usize;
    for k in 0..pred.len() {
        if pred[k] == 1 && gt[k] == 1 {
            i += 1;
        }
        if pred[k] == 1 || gt[k] == 1 {
            u += 1;
        }
    }
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

/// A compact configuration that keeps every stage but runs in milliseconds.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        channels: [4, 8, 8, 8],
        hidden: 8,
        text_dim: 8,
        text_layers: 1,
        text_heads: 2,
        text_ff: 16,
        pool_heads: 2,
        num_queries: 3,
        decoder_layers: 1,
        decoder_heads: 2,
        decoder_ff: 16,
        mqe_heads: 2,
        ..ModelConfig::default()
    }
}

/// Runs `f` on a fresh tape with no parameters bound.
pub fn with_ctx<R>(f: impl FnOnce(&mut Ctx<f64>) -> R) -> R {
    let mut g = Graph::new();
    let params: Vec<Var> = Vec::new();
    let mut cx = Ctx::new(&mut g, &params, 1e-5);
    f(&mut cx)
}
