//! Empirical depth behaviour of ReLU fits on smooth targets.

use mono_core::nn::{fit_function, Activation, HeadMode, MlpSpec};
use mono_core::optim::TrainBudget;
use mono_core::sobolev::sample_sobolev_ball;
use mono_core::{BasisFamily, BasisSet, GridFunction, GridSpec, SobolevBallSpec};

/// A centered `s = 3` draw scaled to unit sup norm, so errors are comparable across seeds.
fn smooth_target(seed: u64) -> GridFunction {
    let g = GridSpec::scalar(1, 65).unwrap();
    let basis = BasisSet::build(g, BasisFamily::Fourier, 16).unwrap();
    let ball = SobolevBallSpec::new(3.0, 1.0, 0.25).unwrap();
    let raw = sample_sobolev_ball(&ball, &basis, 1, seed).unwrap();
    let mean = raw.values().iter().sum::<f64>() / raw.values().len() as f64;
    let c = raw.map(|v| v - mean).unwrap();
    c.scale(1.0 / c.sup_norm())
}

#[test]
fn sup_error_falls_as_depth_doubles() {
    for seed in 0..3 {
        let u = smooth_target(seed);
        let errs: Vec<f64> = [1usize, 2, 4, 8]
            .iter()
            .map(|&depth| {
                let mut widths = vec![1];
                widths.extend(std::iter::repeat_n(8, depth));
                widths.push(1);
                let spec = MlpSpec::new(widths, Activation::ReLU).unwrap().with_head(HeadMode::LinearHead);
                let budget = TrainBudget::new(3000, 1e-2, seed).with_decay(1e-4).with_restarts(3);
                fit_function(&u, &spec, &budget).unwrap().sup_error
            })
            .collect();
        println!("seed {seed}: sup errors by depth 1,2,4,8 = {errs:?}");
        assert!(errs.windows(2).all(|w| w[1] < w[0]), "seed {seed}: {errs:?}");
    }
}
