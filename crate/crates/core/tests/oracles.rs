mod common;

use common::*;
use mmnet_core::mask::dynamic_conv;
use mmnet_core::numerics::ConvGeom;
use mmnet_core::synth::{self, downsample_gt, Color, Object, SceneSpec, Shape, Size, Template};
use mmnet_core::{Error, Graph};
use rand::Rng;

#[test]
fn conv2d_matches_sliding_window() {
    let mut r = rng(11);
    let mut checked = 0;
    while checked < 120 {
        let (h, w) = (r.gen_range(1..9), r.gen_range(1..9));
        let (cin, cout) = (r.gen_range(1..4), r.gen_range(1..4));
        let k = [1, 3, 5][r.gen_range(0..3)];
        let (stride, pad) = (r.gen_range(1..3), r.gen_range(0..=k / 2));
        if ConvGeom::new(&[h, w, cin], &[k, k, cin, cout], stride, pad).is_err() {
            continue;
        }
        let x = uniform(&mut r, h * w * cin, 1.0);
        let kv = uniform(&mut r, k * k * cin * cout, 1.0);
        let b = uniform(&mut r, cout, 1.0);
        let (ho, wo, want) = conv_oracle(&x, (h, w, cin), &kv, (k, k, cout), &b, stride, pad);
        let mut g = Graph::new();
        let xv = g.constant(tensor(&[h, w, cin], x));
        let kk = g.constant(tensor(&[k, k, cin, cout], kv));
        let bb = g.constant(tensor(&[cout], b));
        let y = g.conv2d(xv, kk, bb, stride, pad).unwrap();
        assert_eq!(g.shape(y), &[ho, wo, cout]);
        for (a, e) in g.value(y).data().iter().zip(&want) {
            assert!((a - e).abs() < 1e-6, "{h}x{w}x{cin} k{k} s{stride} p{pad}: {a} vs {e}");
        }
        checked += 1;
    }
}

#[test]
fn fractional_geometry_is_rejected() {
    let err = ConvGeom::new(&[4, 4, 1], &[3, 3, 1, 1], 2, 0).unwrap_err();
    assert!(matches!(err, Error::Config(_) | Error::InvalidShape { .. }));
}

#[test]
fn dynamic_conv_matches_per_pixel_oracle() {
    let mut r = rng(12);
    for _ in 0..120 {
        let side = r.gen_range(1..9);
        let cp = r.gen_range(1..5);
        let m = r.gen_range(1..5);
        let f = uniform(&mut r, side * side * cp, 1.0);
        let p = uniform(&mut r, m * (9 * cp + 1), 1.0);
        let got = with_ctx(|cx| {
            let fv = cx.g.constant(tensor(&[side, side, cp], f.clone()));
            let pv = cx.g.constant(tensor(&[m, 9 * cp + 1], p.clone()));
            let out = dynamic_conv(cx, fv, pv).unwrap();
            assert_eq!(cx.g.shape(out), &[m, side * side]);
            cx.g.value(out).data().to_vec()
        });
        for q in 0..m {
            let want = dynamic_mask_oracle(&f, side, cp, &p[q * (9 * cp + 1)..(q + 1) * (9 * cp + 1)]);
            for (a, e) in got[q * side * side..(q + 1) * side * side].iter().zip(&want) {
                assert!((a - e).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn softmax_matches_formula() {
    let mut r = rng(13);
    for _ in 0..150 {
        let (rows, cols) = (r.gen_range(1..5), r.gen_range(1..12));
        let x = uniform(&mut r, rows * cols, 30.0);
        let mut g = Graph::new();
        let xv = g.constant(tensor(&[rows, cols], x.clone()));
        let y = g.softmax(xv, None).unwrap();
        let got = g.value(y).data();
        for (row, out) in x.chunks(cols).zip(got.chunks(cols)) {
            for (a, e) in out.iter().zip(softmax_oracle(row)) {
                assert!((a - e).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn bce_matches_direct_formula() {
    let mut r = rng(14);
    for _ in 0..150 {
        let n = r.gen_range(1..40);
        let x = uniform(&mut r, n, 15.0);
        let z: Vec<f64> = (0..n).map(|_| r.gen_range(0..2) as f64).collect();
        let mut g = Graph::new();
        let xv = g.constant(tensor(&[n], x.clone()));
        let l = g.bce_with_logits(xv, &z).unwrap();
        assert!((g.value(l).data()[0] - bce_oracle(&x, &z)).abs() < 1e-6);
    }
}

#[test]
fn bce_limits() {
    let mut g = Graph::new();
    let x = g.constant(tensor(&[4], vec![50.0, -50.0, 50.0, -50.0]));
    let l = g.bce_with_logits(x, &[1.0, 0.0, 1.0, 0.0]).unwrap();
    assert!(g.value(l).data()[0] < 1e-20);
    let x = g.constant(tensor(&[3], vec![0.0; 3]));
    let l = g.bce_with_logits(x, &[1.0, 0.0, 1.0]).unwrap();
    assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn downsample_matches_block_mean() {
    let mut r = rng(15);
    for _ in 0..100 {
        let (h, w) = (4 * r.gen_range(1..7), 4 * r.gen_range(1..7));
        let (cy, cx, rad) = (r.gen_range(0.0..h as f64), r.gen_range(0.0..w as f64), r.gen_range(1.0..12.0));
        let mask: Vec<u8> = (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                (((y - cy).powi(2) + (x - cx).powi(2)).sqrt() < rad) as u8
            })
            .collect();
        let got = downsample_gt(&mask, h, w).unwrap();
        for by in 0..h / 4 {
            for bx in 0..w / 4 {
                let mean: f64 = (0..16).map(|k| mask[(by * 4 + k / 4) * w + bx * 4 + k % 4] as f64).sum::<f64>() / 16.0;
                assert_eq!(got[by * (w / 4) + bx], (mean >= 0.5) as u8);
            }
        }
    }
}

#[test]
fn downsample_edge_cases() {
    assert_eq!(downsample_gt(&[1; 64], 8, 8).unwrap(), vec![1; 4]);
    let checker: Vec<u8> = (0..64).map(|i| ((i / 8 + i % 8) % 2) as u8).collect();
    assert_eq!(downsample_gt(&checker, 8, 8).unwrap(), vec![1; 4]);
    assert!(downsample_gt(&[0; 30], 5, 6).is_err());
}

#[test]
fn blue_triangle_mask_covers_only_the_target() {
    let obj = |shape, color, cell: usize, cx, cy| Object { shape, color, size: Size::Large, cell, cx, cy, r: 12.0 };
    let spec = SceneSpec {
        seed: 0,
        objects: vec![
            obj(Shape::Triangle, Color::Blue, 0, 16.0, 16.0),
            obj(Shape::Triangle, Color::Red, 4, 48.0, 48.0),
            obj(Shape::Circle, Color::Blue, 8, 80.0, 80.0),
        ],
        target: 0,
        template: Template::ColorShape,
    };
    assert_eq!(spec.text(), "blue triangle");
    assert_eq!(spec.resolve(), vec![0]);
    for cell in [1, 4] {
        let (rgb, gt) = synth::render(&spec, 96, cell);
        for y in 0..96 {
            for x in 0..96 {
                // Independent coverage: block centre inside the upward triangle.
                let c = |v: usize| (v / cell * cell) as f64 + cell as f64 / 2.0;
                let (dx, dy) = (c(x) - 16.0, c(y) - 16.0);
                let inside = dy.abs() <= 12.0 && dx.abs() <= (dy + 12.0) / 2.0;
                assert_eq!(gt[y * 96 + x] == 1, inside, "pixel ({x}, {y}) raster {cell}");
                if inside {
                    assert_eq!(&rgb[(y * 96 + x) * 3..(y * 96 + x) * 3 + 3], &Color::Blue.rgb());
                }
            }
        }
    }
}
