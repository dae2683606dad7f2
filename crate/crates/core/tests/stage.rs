use afnet::stage::{AFStage, AFStageConfig, Control, ExecMode, FramePolicy};
use afnet::tensor::{NormMode, Tensor};
use afnet::RngState;
use proptest::prelude::*;

const FRAMES: usize = 4;

fn stage(in_c: usize, out_c: usize, blocks: usize, stride: usize, seed: u64) -> AFStage<f64> {
    AFStage::new(AFStageConfig::new(in_c, out_c, blocks, stride), FRAMES, &mut RngState::new(seed)).unwrap()
}

fn input(channels: usize, extent: usize, seed: u64) -> Tensor<f64> {
    let mut rng = RngState::new(seed);
    let n = 2 * FRAMES * channels * extent * extent;
    Tensor::from_vec((0..n).map(|_| rng.normal()).collect(), &[2 * FRAMES, channels, extent, extent]).unwrap()
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn unselected_frames_pass_through_focal_blocks() {
    let s = stage(8, 8, 3, 1, 1);
    let x = input(8, 8, 2);
    let zeros = vec![vec![0.0; 2 * FRAMES]];
    let ctl = Control { frames: FramePolicy::Fixed(&zeros), theta_override: Some(0.0), ..Control::eval() };
    let (out, trace) = s.forward(&x, &ctl, &mut RngState::new(0)).unwrap();
    assert!(trace.masks.iter().all(|m| m.selected().is_empty()));
    assert_eq!(out.to_vec(), x.to_vec());
}

#[test]
fn fusion_weight_overrides_pick_one_branch() {
    let s = stage(4, 8, 2, 2, 3);
    let x = input(4, 8, 4);
    let ones = vec![vec![1.0; 2 * FRAMES]];
    let base = Control { frames: FramePolicy::Fixed(&ones), ..Control::eval() };
    let rng = &mut RngState::new(0);

    let masks: Vec<_> = (0..2).map(|_| afnet::navigation::TemporalMask::constant(ones[0].clone()).unwrap()).collect();
    let focal = s.focal_forward(&x, &masks, &[None, None], &base).unwrap();
    let ample = s.ample_forward(&x, NormMode::Eval).unwrap().pop().unwrap();

    let (only_focal, _) = s.forward(&x, &Control { theta_override: Some(0.0), ..base }, rng).unwrap();
    assert!(max_abs(&only_focal.to_vec(), &focal.to_vec()) < 1e-12);

    let (only_ample, _) = s.forward(&x, &Control { theta_override: Some(1.0), ..base }, rng).unwrap();
    let (fused, theta) = s.fuse(&ample, &focal, &Control { theta_override: Some(1.0), ..base }).unwrap();
    assert!(theta.iter().all(|&t| t == 1.0));
    assert_eq!(only_ample.to_vec(), fused.to_vec());
    assert!(max_abs(&only_ample.to_vec(), &focal.to_vec()) > 1e-3);
}

#[test]
fn bad_inputs_are_refused() {
    let s = stage(4, 8, 2, 2, 5);
    assert!(s.forward(&input(3, 8, 0), &Control::eval(), &mut RngState::new(0)).is_err());
    assert!(s.forward(&input(4, 6, 0), &Control::eval(), &mut RngState::new(0)).is_err());
    let short = vec![vec![1.0; FRAMES]];
    let ctl = Control { frames: FramePolicy::Fixed(&short), ..Control::eval() };
    assert!(s.forward(&input(4, 8, 0), &ctl, &mut RngState::new(0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn gather_equals_masked_multiply(seed in any::<u64>(), bits in prop::collection::vec(any::<bool>(), 2 * 2 * FRAMES)) {
        let s = stage(4, 8, 2, 2, seed);
        let x = input(4, 8, seed ^ 1);
        let masks: Vec<Vec<f64>> = bits.chunks(2 * FRAMES).map(|c| c.iter().map(|&b| f64::from(u8::from(b))).collect()).collect();
        let run = |exec| {
            let ctl = Control { exec, frames: FramePolicy::Fixed(&masks), ..Control::eval() };
            s.forward(&x, &ctl, &mut RngState::new(0)).unwrap().0.to_vec()
        };
        prop_assert!(max_abs(&run(ExecMode::Gather), &run(ExecMode::MaskMultiply)) < 1e-10);
    }
}
