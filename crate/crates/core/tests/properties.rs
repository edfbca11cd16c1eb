//! Randomized checks against direct, slow reference computations.

use inrprop::feature_field::FeatureSource;
use inrprop::flow_field::{DisplacementField, Pair};
use inrprop::geometry::Canvas;
use inrprop::maskops::{edt, kde_field, BinaryMask};
use inrprop::matching::{match_points, match_points_unguided, MatchConfig};
use inrprop::numerics::{SirenConfig, SirenNet};
use inrprop::synth::TableSource;
use proptest::prelude::*;

fn brute_edt(mask: &BinaryMask) -> Vec<f64> {
    let (w, h) = (mask.width(), mask.height());
    let background: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| !mask.get(x, y))
        .collect();
    (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| {
            if background.is_empty() {
                return (x + 1).min(w - x).min(y + 1).min(h - y) as f64;
            }
            background
                .iter()
                .map(|&(bx, by)| ((x as f64 - bx as f64).powi(2) + (y as f64 - by as f64).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn mask_strategy(max: usize) -> impl Strategy<Value = BinaryMask> {
    (1..=max, 1..=max, 0.05f64..0.95).prop_flat_map(|(w, h, density)| {
        proptest::collection::vec(proptest::bool::weighted(density), w * h)
            .prop_map(move |bits| BinaryMask::new(w, h, bits).unwrap())
    })
}

/// Displacement field that moves every point by the same `shift`.
fn constant_displacement(pair: &Pair<'_, TableSource>, shift: [f64; 2]) -> DisplacementField<f64> {
    let mut net = SirenNet::zeros(SirenConfig::sine(2, 4, 1, 2)).unwrap();
    let (hx, hy) = canvas(pair.tgt).half_extent();
    net.bias_mut(1).copy_from_slice(&[shift[0] / hx, shift[1] / hy]);
    DisplacementField {
        net,
        meta: pair.meta::<f64>(),
        trace: Vec::new(),
    }
}

fn canvas(table: &TableSource) -> Canvas {
    FeatureSource::<f64>::canvas(table)
}

fn table_strategy() -> impl Strategy<Value = TableSource> {
    (2usize..12, 2usize..12, 1usize..5).prop_flat_map(|(w, h, d)| {
        proptest::collection::vec(-1.0f64..1.0, 2 * w * h * d)
            .prop_map(move |data| TableSource::new(Canvas::new(w, h), 2, d, data).unwrap())
    })
}

fn brute_match(table: &TableSource, feature: &[f64], center: [f64; 2], sigma: f64) -> [f64; 2] {
    let c = canvas(table);
    let mut best = (f64::NEG_INFINITY, [0.0, 0.0]);
    for y in 0..c.height {
        for x in 0..c.width {
            let f = table.pixel(1, x, y);
            let dot: f64 = f.iter().zip(feature).map(|(a, b)| a * b).sum();
            let na = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = feature.iter().map(|v| v * v).sum::<f64>().sqrt();
            let cos = if na == 0.0 || nb == 0.0 { 0.0 } else { (dot / (na * nb)).clamp(-1.0, 1.0) };
            let d2 = (x as f64 - center[0]).powi(2) + (y as f64 - center[1]).powi(2);
            let s = cos * (-d2 / (2.0 * sigma * sigma)).exp();
            if s > best.0 {
                best = (s, [x as f64, y as f64]);
            }
        }
    }
    best.1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn edt_equals_brute_force(mask in mask_strategy(20)) {
        let fast = edt(&mask);
        let slow = brute_edt(&mask);
        for (a, b) in fast.iter().zip(&slow) {
            prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn kde_commutes_with_translation(
        pts in proptest::collection::vec((20.0f64..30.0, 20.0f64..30.0), 1..8),
        dx in -8i32..8,
        dy in -8i32..8,
    ) {
        let c = Canvas::square(64);
        let a: Vec<[f64; 2]> = pts.iter().map(|p| [p.0, p.1]).collect();
        let b: Vec<[f64; 2]> = a.iter().map(|p| [p[0] + dx as f64, p[1] + dy as f64]).collect();
        let fa = kde_field(&a, c, 2.0).unwrap();
        let fb = kde_field(&b, c, 2.0).unwrap();
        for y in 0..64i32 {
            for x in 0..64i32 {
                let (sx, sy) = (x + dx, y + dy);
                if (0..64).contains(&sx) && (0..64).contains(&sy) {
                    let (u, v) = (fa.get(x as usize, y as usize), fb.get(sx as usize, sy as usize));
                    prop_assert!((u - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn guided_match_equals_brute_force(
        table in table_strategy(),
        src in (0.0f64..1.0, 0.0f64..1.0),
        shift in (-3.0f64..3.0, -3.0f64..3.0),
        sigma in 0.5f64..20.0,
    ) {
        let c = canvas(&table);
        let p = [(src.0 * (c.width - 1) as f64).round(), (src.1 * (c.height - 1) as f64).round()];
        let pair = Pair::new(&table, 0, &table, 1);
        let disp = constant_displacement(&pair, [shift.0, shift.1]);
        let cfg = MatchConfig { sigma: Some(sigma), ..Default::default() };
        let got = match_points(&[p], &pair, &disp, &cfg).unwrap().remove(0);
        let feature = table.pixel(0, p[0] as usize, p[1] as usize).to_vec();
        let center = got.flow_center;
        prop_assert!((center[0] - p[0] - shift.0).abs() < 1e-9 && (center[1] - p[1] - shift.1).abs() < 1e-9);
        prop_assert_eq!(got.predicted, brute_match(&table, &feature, center, sigma));
    }

    #[test]
    fn infinite_sigma_is_unguided_and_scale_free(
        table in table_strategy(),
        shift in (-3.0f64..3.0, -3.0f64..3.0),
        scale in 0.01f64..100.0,
    ) {
        let pair = Pair::new(&table, 0, &table, 1);
        let disp = constant_displacement(&pair, [shift.0, shift.1]);
        let pts = [[0.0, 0.0], [1.0, 1.0]];
        let wide = MatchConfig { sigma: Some(f64::INFINITY), ..Default::default() };
        let guided = match_points(&pts, &pair, &disp, &wide).unwrap();
        let unguided = match_points_unguided::<f64, _>(&pts, &pair, &MatchConfig::default()).unwrap();
        for (g, u) in guided.iter().zip(&unguided) {
            prop_assert_eq!(g.predicted, u.predicted);
        }
        let c = canvas(&table);
        let scaled = TableSource::from_fn(c, 2, FeatureSource::<f64>::feature_dim(&table), |t, x, y, v| {
            for (o, s) in v.iter_mut().zip(table.pixel(t, x, y)) {
                *o = if t == 1 { s * scale } else { *s };
            }
        });
        let pair2 = Pair::new(&scaled, 0, &scaled, 1);
        let disp2 = constant_displacement(&pair2, [shift.0, shift.1]);
        let cfg = MatchConfig { sigma: Some(3.0), ..Default::default() };
        let a = match_points(&pts, &pair, &disp, &cfg).unwrap();
        let b = match_points(&pts, &pair2, &disp2, &cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x.predicted, y.predicted);
        }
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 { diff } else { diff / scale }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sine_gradients_match_central_differences(
        in_dim in 1usize..4,
        hidden in 2usize..10,
        layers in 1usize..4,
        out_dim in 1usize..4,
        seed in any::<u64>(),
        coords in proptest::collection::vec(-1.0f64..1.0, 3 * 3),
        upstream in proptest::collection::vec(-1.0f64..1.0, 3 * 3),
    ) {
        let net = SirenNet::<f64>::init(SirenConfig::sine(in_dim, hidden, layers, out_dim), seed).unwrap();
        let n = 3;
        let x = &coords[..n * in_dim];
        let u = &upstream[..n * out_dim];
        let loss = |net: &SirenNet<f64>, x: &[f64]| -> f64 {
            net.forward(x).unwrap().iter().zip(u).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        let analytic = net.grad_params(x, u).unwrap();
        let numeric: Vec<f64> = (0..net.param_count()).map(|i| {
            let mut hi = net.clone();
            hi.params_mut()[i] += h;
            let mut lo = net.clone();
            lo.params_mut()[i] -= h;
            (loss(&hi, x) - loss(&lo, x)) / (2.0 * h)
        }).collect();
        prop_assert!(rel_err(&analytic, &numeric) < 1e-4);

        let analytic = net.input_vjp(x, u).unwrap();
        let numeric: Vec<f64> = (0..x.len()).map(|i| {
            let mut hi = x.to_vec();
            hi[i] += h;
            let mut lo = x.to_vec();
            lo[i] -= h;
            (loss(&net, &hi) - loss(&net, &lo)) / (2.0 * h)
        }).collect();
        prop_assert!(rel_err(&analytic, &numeric) < 1e-4);
    }
}
