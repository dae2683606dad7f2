use afnet::analysis::{count_flops, fit_polynomial, polyval, selection_stats};
use afnet::model::ModelConfig;
use afnet::stage::SpatialConfig;
use afnet::training::StageTraceRecord;
use approx::assert_relative_eq;
use proptest::prelude::*;

fn naive_poly(c: &[f64], x: f64) -> f64 {
    c.iter().enumerate().map(|(k, ck)| ck * x.powi(k as i32)).sum()
}

proptest! {
    #[test]
    fn least_squares_recovers_an_exact_cubic(c in prop::collection::vec(-3.0f64..3.0, 4)) {
        let xs: Vec<f64> = (0..7).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| naive_poly(&c, x)).collect();
        let fit = fit_polynomial(&xs, &ys, 3).unwrap();
        for (a, b) in fit.iter().zip(&c) {
            prop_assert!((a - b).abs() < 1e-8, "{fit:?} vs {c:?}");
        }
    }

    #[test]
    fn horner_matches_the_power_sum(c in prop::collection::vec(-3.0f64..3.0, 0..6), x in -2.0f64..2.0) {
        prop_assert!((polyval(&c, x) - naive_poly(&c, x)).abs() < 1e-9);
    }

    #[test]
    fn cost_is_affine_in_the_frame_ratio(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let cfg = ModelConfig::compact();
        let (ca, cb) = (count_flops(&cfg, a, 1.0).unwrap(), count_flops(&cfg, b, 1.0).unwrap());
        prop_assert_eq!(ca.fixed, cb.fixed);
        let expect = ca.fixed as f64 + a * ca.focal_main as f64;
        prop_assert!((ca.total - expect).abs() < 1e-6);
        prop_assert!((a <= b) == (ca.total <= cb.total) || a == b);
    }
}

#[test]
fn fit_with_few_points_interpolates() {
    // four points determine the cubic; three give the minimum-norm interpolant
    let xs = [0.0, 1.0, 2.0];
    let ys = [1.0, 0.0, 3.0];
    let c = fit_polynomial(&xs, &ys, 3).unwrap();
    for (&x, &y) in xs.iter().zip(&ys) {
        assert_relative_eq!(polyval(&c, x), y, epsilon = 1e-10);
    }
    assert!(fit_polynomial(&[], &[], 3).is_err());
    assert!(fit_polynomial(&[1.0], &[1.0, 2.0], 1).is_err());
}

fn record(sample: usize, selected: &[&[bool]], salient: &[usize]) -> StageTraceRecord {
    StageTraceRecord { sample, selected: selected.iter().map(|b| b.to_vec()).collect(), salient: salient.to_vec() }
}

#[test]
fn selection_statistics_by_hand() {
    let (t, f) = (true, false);
    let records = [
        record(0, &[&[t, t, f, f], &[t, f, f, f]], &[0]),
        record(1, &[&[f, t, t, t], &[f, f, f, f]], &[3]),
    ];
    let s = selection_stats(&records).unwrap();
    assert_eq!(s.rt_mean, vec![(0.5 + 0.75) / 2.0, 0.125]);
    assert_relative_eq!(s.rt_std[0], 0.125, epsilon = 1e-12);
    assert_eq!(s.frame_frequency[0], vec![0.5, 1.0, 0.5, 0.5]);
    // picks: 2 + 1 + 3 + 0 = 6, hits: frame 0 twice for sample 0, frame 3 once for sample 1
    assert_relative_eq!(s.precision.unwrap(), 3.0 / 6.0);
    // planted: one salient frame per video per block
    assert_relative_eq!(s.recall.unwrap(), 3.0 / 4.0);
    assert!(s.trend_slope() < 0.0);
    assert!(selection_stats(&[]).is_err());
}

#[test]
fn nothing_selected_means_no_focal_cost() {
    let cfg = ModelConfig::compact();
    let zero = count_flops(&cfg, 0.0, 1.0).unwrap();
    let full = count_flops(&cfg, 1.0, 1.0).unwrap();
    assert_eq!(zero.total, zero.fixed as f64);
    assert_eq!(full.total, (full.fixed + full.focal_main) as f64);
    assert!(full.total < full.baseline as f64);
    assert_eq!(zero.fixed - zero.stem - zero.classifier - zero.plain - zero.fusion.iter().sum::<u64>(),
        zero.blocks.iter().map(|b| b.ample + b.focal_shortcut + b.navigation + b.region_navigation).sum::<u64>());
}

#[test]
fn region_ratio_scales_only_with_region_gates() {
    let plain = ModelConfig::compact();
    let gated = ModelConfig { spatial: Some(SpatialConfig::default()), ..ModelConfig::compact() };
    assert_eq!(count_flops(&plain, 0.5, 0.25).unwrap().total, count_flops(&plain, 0.5, 1.0).unwrap().total);
    let (q, h) = (count_flops(&gated, 0.5, 0.25).unwrap(), count_flops(&gated, 0.5, 1.0).unwrap());
    assert_relative_eq!(h.total - q.total, 0.5 * 0.75 * h.focal_main as f64, max_relative = 1e-12);
    assert_relative_eq!(q.realized(&vec![0.5; q.blocks.len()]).unwrap(), q.total, max_relative = 1e-12);
    assert!(q.realized(&[0.5]).is_err());
}
