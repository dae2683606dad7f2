use afnet::config::ExperimentConfig;
use afnet::layers::Module;
use afnet::model::Model;
use afnet::tensor::{self, cross_entropy, Tensor};
use afnet::training::{
    fixed_policy_mask, policy_frames, selected_count, total_loss, Dataset, Policy, Sgd, SyntheticVideoSpec, Trainer,
};
use afnet::RngState;
use approx::assert_relative_eq;
use proptest::prelude::*;

fn spec() -> SyntheticVideoSpec {
    ExperimentConfig::desk().dataset.synthetic
}

#[test]
fn momentum_sgd_matches_two_hand_steps() {
    let p = Tensor::<f64>::param(vec![1.0, -2.0], &[2]).unwrap();
    let g = [0.5, 3.0];
    let w = Tensor::from_vec(g.to_vec(), &[2]).unwrap();
    let mut opt = Sgd::new(0.9, 0.1);
    let (lr, mu, wd) = (0.5, 0.9, 0.1);

    let (mut x, mut v) = ([1.0f64, -2.0], [0.0f64; 2]);
    for _ in 0..2 {
        p.zero_grad();
        tensor::mul(&p, &w).unwrap().sum().backward().unwrap();
        opt.step(&[("p".into(), p.clone())], lr).unwrap();
        for i in 0..2 {
            v[i] = mu * v[i] + g[i] + wd * x[i];
            x[i] -= lr * v[i];
        }
    }
    let got = p.to_vec();
    for i in 0..2 {
        assert_relative_eq!(got[i], x[i], max_relative = 1e-12);
    }
    // second step by hand: v1 = 0.5 + 0.1 = 0.6, x1 = 0.7; v2 = 0.54 + 0.5 + 0.07 = 1.11
    assert_relative_eq!(got[0], 0.7 - 0.5 * 1.11, max_relative = 1e-12);
}

#[test]
fn step_without_gradient_is_an_error() {
    let p = Tensor::<f64>::param(vec![1.0], &[1]).unwrap();
    assert!(Sgd::new(0.0, 0.0).step(&[("p".into(), p)], 0.1).is_err());
}

#[test]
fn uniform_logits_give_log_k_cross_entropy() {
    for k in [2usize, 4, 10] {
        let logits = Tensor::<f64>::zeros(&[3, k]);
        let ce = cross_entropy(&logits, &[0, 1, k - 1]).unwrap().item();
        assert_relative_eq!(ce, (k as f64).ln(), max_relative = 1e-12);
    }
}

#[test]
fn uniform_policy_spaces_frames_evenly() {
    let rng = &mut RngState::new(0);
    assert_eq!(policy_frames(Policy::Uniform, 8, 0.5, rng).unwrap(), vec![0, 2, 4, 6]);
    assert_eq!(policy_frames(Policy::Uniform, 8, 0.25, rng).unwrap(), vec![0, 4]);
    assert_eq!(policy_frames(Policy::Uniform, 8, 1.0, rng).unwrap(), (0..8).collect::<Vec<_>>());
    assert!(policy_frames(Policy::Navigation, 8, 0.5, rng).is_err());
    assert!(policy_frames(Policy::Uniform, 8, 0.0, rng).is_err());
}

#[test]
fn random_policy_selects_each_frame_at_the_ratio() {
    let (videos, frames) = (20_000, 8);
    let m = fixed_policy_mask::<f64>(Policy::Random, frames, 0.25, videos, &mut RngState::new(4)).unwrap();
    for t in 0..frames {
        let f = (0..videos).map(|v| m.hard[v * frames + t]).sum::<f64>() / videos as f64;
        assert!((f - 0.25).abs() < 0.01, "frame {t}: {f}");
    }
    for v in 0..videos {
        assert_eq!(m.hard[v * frames..(v + 1) * frames].iter().sum::<f64>(), 2.0);
    }
}

#[test]
fn normal_policy_favours_the_middle() {
    let (videos, frames) = (5_000, 8);
    let m = fixed_policy_mask::<f64>(Policy::Normal, frames, 0.25, videos, &mut RngState::new(5)).unwrap();
    let freq: Vec<f64> = (0..frames).map(|t| (0..videos).map(|v| m.hard[v * frames + t]).sum::<f64>()).collect();
    assert!(freq[3] > 4.0 * freq[0] && freq[4] > 4.0 * freq[7], "{freq:?}");
}

/// Mass of round(N(c, 1)) on each frame by Simpson's rule, renormalised to the frame range.
fn discretised_gaussian(frames: usize) -> Vec<f64> {
    let c = (frames as f64 - 1.0) / 2.0;
    let pdf = |x: f64| (-0.5 * (x - c) * (x - c)).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let n = 200;
    let mass: Vec<f64> = (0..frames)
        .map(|t| {
            let (a, h) = (t as f64 - 0.5, 1.0 / n as f64);
            (0..=n).map(|i| pdf(a + i as f64 * h) * if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 }).sum::<f64>() * h / 3.0
        })
        .collect();
    let total: f64 = mass.iter().sum();
    mass.into_iter().map(|m| m / total).collect()
}

#[test]
fn single_normal_draw_follows_the_discretised_gaussian() {
    let (videos, frames) = (40_000, 8);
    let m = fixed_policy_mask::<f64>(Policy::Normal, frames, 1.0 / 8.0, videos, &mut RngState::new(6)).unwrap();
    for (t, p) in discretised_gaussian(frames).into_iter().enumerate() {
        let f = (0..videos).map(|v| m.hard[v * frames + t]).sum::<f64>() / videos as f64;
        assert!((f - p).abs() < 0.01, "frame {t}: {f} vs {p}");
    }
}

#[test]
fn normal_policy_fills_long_clips() {
    let picked = policy_frames(Policy::Normal, 200, 0.99, &mut RngState::new(1)).unwrap();
    assert_eq!(picked.len(), 198);
}

proptest! {
    #[test]
    fn fixed_policies_pick_distinct_in_range_frames(
        frames in 1usize..24,
        ratio in 0.01f64..=1.0,
        seed in any::<u64>(),
        p in prop::sample::select(vec![Policy::Random, Policy::Uniform, Policy::Normal]),
    ) {
        let picked = policy_frames(p, frames, ratio, &mut RngState::new(seed)).unwrap();
        prop_assert_eq!(picked.len(), selected_count(frames, ratio));
        prop_assert!(picked.iter().all(|&t| t < frames));
        let mut sorted = picked.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), picked.len());
    }
}

#[test]
fn clean_generator_plants_templates_exactly() {
    let s = SyntheticVideoSpec { noise: 0.0, distractor: 0.0, marker: 0.0, ..spec() };
    let templates = s.templates().unwrap();
    let n = s.frame_len();
    for seed in 0..20 {
        let v = s.sample(&templates, &mut RngState::new(seed));
        assert_eq!(v.salient.len(), s.salient);
        for t in 0..s.frames {
            let frame = &v.pixels[t * n..(t + 1) * n];
            if v.salient.contains(&t) {
                assert_eq!(frame, &templates[v.label][..]);
            } else {
                assert!(frame.iter().all(|&x| x == 0.0));
            }
        }
    }
}

#[test]
fn templates_are_distinct_and_on_the_cell_grid() {
    let s = spec();
    let t = s.templates().unwrap();
    assert_eq!(t.len(), s.classes);
    assert!(t.iter().enumerate().all(|(i, a)| t[..i].iter().all(|b| a != b)));
    let (r, cell) = (s.resolution, s.resolution / s.template_cells);
    for p in &t {
        for y in 0..r {
            for x in 0..r {
                assert_eq!(p[y * r + x], p[(y / cell * cell) * r + x / cell * cell]);
            }
        }
    }
}

/// Correlating the planted frames with each template recovers the label.
#[test]
fn nearest_template_oracle_classifies_noisy_samples() {
    let s = SyntheticVideoSpec { noise: 1.0, distractor: 0.0, ..spec() };
    let templates = s.templates().unwrap();
    let n = s.frame_len();
    let data = Dataset::generate(&s, 200, 9).unwrap();
    let mut correct = 0;
    for v in &data.samples {
        let score = |c: usize| -> f64 {
            v.salient.iter().map(|&t| v.pixels[t * n..(t + 1) * n].iter().zip(&templates[c]).map(|(a, b)| a * b).sum::<f64>()).sum()
        };
        let guess = (0..s.classes).max_by(|&a, &b| score(a).total_cmp(&score(b))).unwrap();
        correct += usize::from(guess == v.label);
    }
    assert!(correct >= 195, "{correct}/200");
}

#[test]
fn without_salient_frames_every_frame_is_label_free() {
    let s = SyntheticVideoSpec { salient: 0, noise: 1.0, distractor: 0.0, ..spec() };
    let a = s.sample(&s.templates().unwrap(), &mut RngState::new(3));
    let mean = a.pixels.iter().sum::<f64>() / a.pixels.len() as f64;
    let var = a.pixels.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / a.pixels.len() as f64;
    assert!(a.salient.is_empty() && mean.abs() < 0.05 && (var - 1.0).abs() < 0.05, "{mean} {var}");
}

#[test]
fn datasets_are_prefix_stable_and_seeded() {
    let s = spec();
    let small = Dataset::generate(&s, 5, 1).unwrap();
    let large = Dataset::generate(&s, 9, 1).unwrap();
    assert_eq!(small.samples[..], large.samples[..5]);
    assert_ne!(Dataset::generate(&s, 5, 2).unwrap().samples, small.samples);
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(SyntheticVideoSpec { salient: 9, ..spec() }.templates().is_err());
    assert!(SyntheticVideoSpec { template_cells: 5, ..spec() }.templates().is_err());
    assert!(SyntheticVideoSpec { noise: -1.0, ..spec() }.templates().is_err());
}

fn tiny_trainer(lr: f64) -> (Trainer<f32>, Dataset) {
    let mut cfg = ExperimentConfig::desk();
    cfg.dataset.train_size = 16;
    cfg.dataset.eval_size = 8;
    cfg.training.batch_size = 8;
    cfg.training.lr = lr;
    let (train, _) = cfg.datasets().unwrap();
    let model = Model::<f32>::build(cfg.model.clone(), &mut cfg.model_rng()).unwrap();
    (Trainer::new(model, cfg.train_config(), cfg.navigation.schedule(), train.len()).unwrap(), train)
}

#[test]
fn zero_learning_rate_leaves_weights_alone() {
    let (mut t, train) = tiny_trainer(0.0);
    let before: Vec<Vec<f32>> = t.model.parameters().iter().map(|(_, p)| p.to_vec()).collect();
    let m = t.train_epoch(&train).unwrap();
    let after: Vec<Vec<f32>> = t.model.parameters().iter().map(|(_, p)| p.to_vec()).collect();
    assert_eq!(before, after);
    assert_eq!(t.epoch, 1);
    assert!(m.ce.is_finite());
}

#[test]
fn penalty_is_squared_gap_of_soft_ratio() {
    let (t, train) = tiny_trainer(0.1);
    let batch = train.batch::<f32>(&[0, 1, 2, 3]).unwrap();
    let ctl = afnet::stage::Control::train(1.0);
    let (pred, traces) = t.model.forward(&batch.frames, &ctl, &mut RngState::new(0)).unwrap();
    let (loss, b) = total_loss(&pred, &batch.labels, &traces, 0.25, 1.0, 2.0).unwrap();
    let masks: Vec<_> = traces.iter().flat_map(|t| &t.masks).collect();
    assert_eq!(b.ratio_penalties.len(), masks.len());
    for (m, p) in masks.iter().zip(&b.ratio_penalties) {
        let r = m.soft.to_vec().iter().map(|&x| x as f64).sum::<f64>() / m.len() as f64;
        assert_relative_eq!(*p, (r - 0.25).powi(2), max_relative = 1e-4);
    }
    assert_relative_eq!(b.total, b.cross_entropy + 2.0 * b.penalty(), max_relative = 1e-5);
    assert_relative_eq!(loss.item() as f64, b.total, max_relative = 1e-6);
}
