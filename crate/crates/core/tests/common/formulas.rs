//! Closed-form counts against values evaluated outside this crate
//! (hand arithmetic and a 60-digit decimal script).
#![allow(dead_code)]

use std::sync::Arc;

use mono_core::budget::{rank, rank_branches, width, BudgetInputs, Modulus};
use mono_core::nn::{param_count, Activation, Mlp, MlpSpec};
use mono_core::operator::{param_count_no, NeuralOperator, NoSpec};
use mono_core::tree::tree_counting;
use mono_core::{BasisFamily, BasisSet, GridSpec};

pub fn mlp_parameter_count() {
    let cases: &[(&[usize], usize)] = &[
        (&[1, 1], 4),
        (&[2, 3, 1], 20),
        (&[1, 1, 1, 1], 10),
        (&[4, 6], 38),
        (&[3, 5, 5, 2], 78),
        (&[1, 16, 16, 1], 355),
        (&[2, 8, 8, 8, 3], 223),
        (&[7, 1, 7], 37),
        (&[10, 20, 30], 890),
        (&[5, 5, 5, 5, 5, 5], 180),
        (&[1, 2], 6),
        (&[6, 3, 9, 1], 91),
    ];
    for (widths, expected) in cases {
        assert_eq!(param_count(widths), *expected, "{widths:?}");
        let spec = MlpSpec::new(widths.to_vec(), Activation::Tanh).unwrap();
        assert_eq!(spec.param_count(), *expected);
    }
    // all widths 1 with J layers gives 3J + 1
    for j in 1..10 {
        assert_eq!(param_count(&vec![1; j + 1]), 3 * j + 1);
    }
}

pub fn mlp_stored_count_is_storage_length() {
    for widths in [vec![1, 1], vec![2, 3, 1], vec![4, 7, 2, 5]] {
        let spec = MlpSpec::new(widths.clone(), Activation::ReLU).unwrap();
        let net = Mlp::seeded(spec.clone(), 0);
        let expected: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum::<usize>() + widths.last().unwrap();
        assert_eq!(net.params().len(), expected);
        assert_eq!(spec.stored_count(), expected);
    }
}

fn no_spec(depth: usize, w: usize, rank: usize, bias_depth: usize) -> NoSpec {
    NoSpec {
        rank,
        hidden_width: w,
        depth,
        bias_depth,
        bias_width: w,
        d_in: 1,
        d_out: 1,
        in_dim: 1,
        out_dim: 1,
        head_mode: Default::default(),
    }
}

pub fn operator_parameter_bound() {
    // (L, w, N, Δ) → L w(w+1) + 2N²w² + 2Δ w(w+1)
    let cases = [
        ((2, 3, 2, 1), 120),
        ((0, 1, 1, 1), 6),
        ((1, 4, 3, 2), 388),
        ((2, 16, 8, 1), 33856),
        ((3, 8, 4, 2), 2552),
        ((0, 2, 5, 1), 212),
        ((4, 5, 1, 3), 350),
        ((1, 10, 10, 1), 20330),
        ((2, 6, 2, 2), 540),
        ((5, 3, 3, 3), 294),
        ((2, 2, 8, 1), 536),
        ((3, 12, 6, 2), 11460),
    ];
    for ((l, w, n, d), expected) in cases {
        assert_eq!(param_count_no(&no_spec(l, w, n, d)).bound, expected, "{:?}", (l, w, n, d));
    }
    // doubling N changes only the middle term, by a factor of four
    let a = param_count_no(&no_spec(2, 5, 3, 1)).bound;
    let b = param_count_no(&no_spec(2, 5, 6, 1)).bound;
    assert_eq!(b - a, 3 * 2 * 9 * 25);
}

pub fn operator_stored_count_is_shard_length() {
    let g = GridSpec::scalar(1, 33).unwrap();
    let basis = Arc::new(BasisSet::build(g, BasisFamily::Fourier, 10).unwrap());
    for (l, w, n, d) in [(0, 1, 1, 1), (2, 3, 2, 1), (1, 4, 3, 2), (3, 8, 10, 2)] {
        let spec = no_spec(l, w, n, d);
        let op = NeuralOperator::init(spec, basis.clone(), basis.clone(), 1).unwrap();
        assert_eq!(op.params().len(), spec.stored_count());
        assert_eq!(param_count_no(&spec).stored, op.params().len());
    }
}

pub fn tree_counting_formulas() {
    // (δ, v, d₁, s₁) → (centers, height, leaves, node bound, depth, width)
    #[allow(clippy::type_complexity)]
    let cases: &[((f64, usize, usize, f64), (u128, u32, f64, Option<f64>, Option<f64>, f64))] = &[
        ((0.2, 2, 1, 3.0), (7, 3, 8.0, Some(15.75), Some(110.0), 27.0)),
        ((1.0, 2, 2, 3.0), (1, 1, 2.0, None, Some(112.0), 162.0)),
        ((0.05, 2, 1, 4.0), (31, 5, 32.0, Some(73.0), Some(434.0), 108.0)),
        ((0.01, 3, 1, 3.0), (1023, 7, 2187.0, Some(437.2), Some(110.0), 27.0)),
        ((0.1, 4, 2, 5.0), (1023, 5, 1024.0, Some(341.0), Some(976.0), 4374.0)),
        ((0.5, 2, 1, 2.5), (3, 2, 4.0, Some(7.5), Some(29.0), 6.75)),
        ((0.02, 5, 1, 6.0), (255, 4, 625.0, Some(312.0), Some(1730.0), 432.0)),
        ((0.3, 3, 3, 7.0), (127, 5, 243.0, Some(182.0), Some(1734.0), 186624.0)),
        ((0.001, 2, 1, 3.0), (4294967295, 32, 4294967296.0, Some(6119021232840.326), Some(110.0), 27.0)),
        ((0.04, 10, 2, 4.0), (33554431, 8, 1e8, Some(33333.0), Some(436.0), 1296.0)),
        ((0.15, 2, 2, 6.0), (127, 7, 128.0, Some(409.5), Some(1732.0), 10368.0)),
    ];
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs().max(1.0);
    for &((delta, v, d1, s1), (centers, height, leaves, bound, depth, w)) in cases {
        let c = tree_counting(delta, v, d1, s1).unwrap();
        let tag = (delta, v, d1, s1);
        assert_eq!(c.required_centers, centers, "{tag:?}");
        assert_eq!(c.height, height, "{tag:?}");
        assert_eq!(c.leaves, leaves, "{tag:?}");
        match (c.node_bound, bound) {
            (Some(a), Some(b)) => assert!(close(a, b), "{tag:?}: {a} vs {b}"),
            (a, b) => assert_eq!(a, b, "{tag:?}"),
        }
        match (c.node_depth, depth) {
            (Some(a), Some(b)) => assert!(close(a, b), "{tag:?}: {a} vs {b}"),
            (a, b) => assert_eq!(a, b, "{tag:?}"),
        }
        assert!(close(c.node_width, w), "{tag:?}");
    }
}

fn inputs(eps: f64, modulus: Modulus, d1: usize, d2: usize, s1: f64, s2: f64, d_in: usize, diam: f64) -> BudgetInputs {
    BudgetInputs {
        d1,
        d2,
        s1,
        s2,
        d_in,
        diam,
        ..BudgetInputs::new(eps, modulus)
    }
}

pub fn rank_and_width() {
    let lip = |c| Modulus::Lipschitz { constant: c };
    let hol = |c, a| Modulus::Holder {
        constant: c,
        exponent: a,
    };
    let log = |c0, c1| Modulus::Logarithmic { c0, c1 };
    let cases = [
        (inputs(0.1, lip(1.0), 1, 1, 2.0, 2.0, 1, 1.0), 16, 34),
        (inputs(0.01, lip(1.0), 1, 1, 2.0, 2.0, 1, 1.0), 48, 98),
        (inputs(0.001, lip(1.0), 1, 1, 2.0, 2.0, 1, 1.0), 151, 304),
        (inputs(0.1, lip(2.0), 1, 1, 3.0, 3.0, 1, 1.0), 8, 18),
        (inputs(0.05, hol(1.0, 0.5), 1, 1, 2.0, 2.0, 1, 1.0), 16, 34),
        (inputs(0.02, hol(2.0, 0.25), 2, 1, 3.0, 2.0, 2, 0.5), 44, 134),
        (inputs(0.1, log(1.0, 1.0), 1, 1, 2.0, 2.0, 1, 1.0), 16, 34),
        (inputs(0.001, log(1.0, 1.0), 1, 2, 2.0, 4.0, 1, 2.0), 213, 428),
        (inputs(0.3, lip(1.0), 2, 2, 5.0, 5.0, 2, 1.5), 8, 26),
        (inputs(0.01, hol(0.5, 0.75), 1, 1, 4.0, 3.0, 1, 0.25), 5, 12),
        (inputs(0.07, log(2.0, 3.0), 3, 1, 4.0, 2.0, 3, 1.0), 46, 186),
    ];
    for (i, n, w) in cases {
        let got = rank(&i).unwrap();
        assert_eq!(got, n, "{i:?}");
        assert_eq!(width(got, i.d_in, i.d_out), w, "{i:?}");
    }
    // ε = 2^{7/2} makes the first branch exactly 1
    let i = inputs(2f64.powf(3.5), lip(1.0), 1, 1, 3.0, 3.0, 1, 1.0);
    assert!((rank_branches(&i).unwrap().0 - 1.0).abs() < 1e-15);
    assert_eq!(width(4, 1, 1), 10);
}
