//! Random operator configurations and the central-difference gradient check.
#![allow(dead_code)]

use std::sync::Arc;

use mono_core::nn::HeadMode;
use mono_core::operator::{stack, NeuralOperator, NoSpec};
use mono_core::{BasisFamily, BasisSet, GridFunction, GridSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_function(spec: GridSpec, rng: &mut impl Rng) -> GridFunction {
    GridFunction::new(spec, (0..spec.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn basis(dim: usize, m: usize, size: usize, family: BasisFamily) -> Arc<BasisSet> {
    Arc::new(BasisSet::build(GridSpec::scalar(dim, m).unwrap(), family, size).unwrap())
}

/// A small random operator, varied over every structural option.
pub fn random_operator(k: u64) -> NeuralOperator {
    let mut rng = ChaCha8Rng::seed_from_u64(k);
    let dim = 1 + (k % 2) as usize;
    let m = if dim == 1 { 17 } else { 5 };
    let family = if k % 3 == 0 {
        BasisFamily::PiecewisePoly {
            max_degree: 1,
            levels: 1,
        }
    } else {
        BasisFamily::Fourier
    };
    let b = basis(dim, m, 4, family);
    let d_in = rng.random_range(1..=2);
    let d_out = rng.random_range(1..=2);
    let hidden_width = rng.random_range(2..=4);
    let spec = NoSpec {
        rank: rng.random_range(1..=3),
        hidden_width,
        depth: rng.random_range(0..=2),
        bias_depth: rng.random_range(1..=2),
        bias_width: rng.random_range(1..=hidden_width),
        d_in,
        d_out,
        in_dim: dim,
        out_dim: dim,
        head_mode: if k % 4 == 1 { HeadMode::LinearHead } else { HeadMode::PaperExact },
    };
    let mut op = NeuralOperator::init(spec, b.clone(), b, k).unwrap();
    // move biases off zero so every parameter block carries gradient
    let p: Vec<f64> = op.params().iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
    op.set_params(&p).unwrap();
    op
}

/// Relative error between the backward pass and central differences (step 1e-6)
/// for configuration `k` on a batch of three random pairs.
pub fn relative_gradient_error(k: u64) -> f64 {
    let mut op = random_operator(k);
    let mut rng = ChaCha8Rng::seed_from_u64(100 + k);
    let batch = 3;
    let xs: Vec<_> = (0..batch).map(|_| random_function(op.input_spec(), &mut rng)).collect();
    let ys: Vec<_> = (0..batch).map(|_| random_function(op.output_spec(), &mut rng)).collect();
    let x = stack(&xs.iter().collect::<Vec<_>>()).unwrap();
    let y = stack(&ys.iter().collect::<Vec<_>>()).unwrap();
    let (_, grad) = op.loss_and_gradient(x.view(), y.view()).unwrap();
    let base = op.params();
    let h = 1e-6;
    let mut fd = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + h;
        op.set_params(&p).unwrap();
        let up = op.loss_and_gradient(x.view(), y.view()).unwrap().0;
        p[i] = base[i] - h;
        op.set_params(&p).unwrap();
        let down = op.loss_and_gradient(x.view(), y.view()).unwrap().0;
        fd[i] = (up - down) / (2.0 * h);
    }
    let diff = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / scale
}
