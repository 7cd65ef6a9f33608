//! Fully connected networks `x ↦ σ(A x + b)` iterated, followed by a shift.
//!
//! Parameters live in one flat vector laid out as
//! `A⁽⁰⁾ (row-major), b⁽⁰⁾, A⁽¹⁾, b⁽¹⁾, …, c`, which is also the layout of
//! gradients and of the serialized form.

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape, Error, Result};
use crate::grid::GridFunction;
use crate::io::{get_f64s, get_u32, put_f64s, put_u32};
use crate::optim::{Adam, TrainBudget};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    ReLU,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::ReLU => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative from the pre-activation `z` and the activation `a = σ(z)`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::ReLU => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }

    fn code(self) -> usize {
        match self {
            Activation::ReLU => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_code(c: usize) -> Option<Self> {
        match c {
            0 => Some(Activation::ReLU),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Whether the last layer is activated before the shift `c` is added.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum HeadMode {
    /// `x⁽ᴶ⁾ = σ(A x⁽ᴶ⁻¹⁾ + b)`, output `x⁽ᴶ⁾ + c`.
    #[default]
    PaperExact,
    /// The last affine map is left unactivated.
    LinearHead,
}

impl HeadMode {
    pub fn code(self) -> usize {
        match self {
            HeadMode::PaperExact => 0,
            HeadMode::LinearHead => 1,
        }
    }

    pub fn from_code(c: usize) -> Option<Self> {
        match c {
            0 => Some(HeadMode::PaperExact),
            1 => Some(HeadMode::LinearHead),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadMode::PaperExact => "paper-exact",
            HeadMode::LinearHead => "linear-head",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MlpSpec {
    widths: Vec<usize>,
    activation: Activation,
    head: HeadMode,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(invalid("an MLP needs at least one layer"));
        }
        if widths.contains(&0) {
            return Err(invalid("layer widths must be positive"));
        }
        Ok(Self {
            widths,
            activation,
            head: HeadMode::PaperExact,
        })
    }

    pub fn with_head(mut self, head: HeadMode) -> Self {
        self.head = head;
        self
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn head(&self) -> HeadMode {
        self.head
    }

    /// Number of affine layers `J`.
    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// `P([d]) = Σ_j d_j (d_{j+1} + 2) + d_J`.
    pub fn param_count(&self) -> usize {
        param_count(&self.widths)
    }

    /// Scalars actually held: biases have the output width of their layer.
    pub fn stored_count(&self) -> usize {
        self.widths
            .windows(2)
            .map(|w| w[1] * w[0] + w[1])
            .sum::<usize>()
            + self.output_dim()
    }

    fn offsets(&self) -> Vec<(usize, usize)> {
        let mut off = 0;
        self.widths
            .windows(2)
            .map(|w| {
                let a = off;
                let b = a + w[0] * w[1];
                off = b + w[1];
                (a, b)
            })
            .collect()
    }
}

/// `Σ_{j<J} d_j (d_{j+1} + 2) + d_J` for a width sequence `[d_0, …, d_J]`.
pub fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * (w[1] + 2)).sum::<usize>() + widths.last().copied().unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    offsets: Vec<(usize, usize)>,
    params: Vec<f64>,
}

/// Intermediate values of a batched forward pass, needed for backpropagation.
#[derive(Debug, Clone)]
pub struct MlpTape {
    inputs: Array2<f64>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases and shift.
    pub fn init(spec: MlpSpec, rng: &mut impl Rng) -> Self {
        let offsets = spec.offsets();
        let mut params = vec![0.0; spec.stored_count()];
        for (j, &(a, b)) in offsets.iter().enumerate() {
            let (din, dout) = (spec.widths[j], spec.widths[j + 1]);
            let bound = (6.0 / (din + dout) as f64).sqrt();
            for p in &mut params[a..b] {
                *p = rng.random_range(-bound..=bound);
            }
        }
        Self {
            spec,
            offsets,
            params,
        }
    }

    pub fn seeded(spec: MlpSpec, seed: u64) -> Self {
        Self::init(spec, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn zeros(spec: MlpSpec) -> Self {
        let offsets = spec.offsets();
        let params = vec![0.0; spec.stored_count()];
        Self {
            spec,
            offsets,
            params,
        }
    }

    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Result<Self> {
        if params.len() != spec.stored_count() {
            return Err(shape(format!(
                "expected {} parameters, got {}",
                spec.stored_count(),
                params.len()
            )));
        }
        let offsets = spec.offsets();
        Ok(Self {
            spec,
            offsets,
            params,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn weight(&self, j: usize) -> ArrayView2<'_, f64> {
        let (a, b) = self.offsets[j];
        ArrayView2::from_shape((self.spec.widths[j + 1], self.spec.widths[j]), &self.params[a..b]).unwrap()
    }

    pub fn weight_mut(&mut self, j: usize) -> ArrayViewMut2<'_, f64> {
        let (a, b) = self.offsets[j];
        let shape = (self.spec.widths[j + 1], self.spec.widths[j]);
        ArrayViewMut2::from_shape(shape, &mut self.params[a..b]).unwrap()
    }

    pub fn bias(&self, j: usize) -> ArrayView1<'_, f64> {
        let (_, b) = self.offsets[j];
        ArrayView1::from(&self.params[b..b + self.spec.widths[j + 1]])
    }

    pub fn bias_mut(&mut self, j: usize) -> ArrayViewMut1<'_, f64> {
        let (_, b) = self.offsets[j];
        let n = self.spec.widths[j + 1];
        ArrayViewMut1::from(&mut self.params[b..b + n])
    }

    pub fn shift(&self) -> ArrayView1<'_, f64> {
        let n = self.spec.output_dim();
        ArrayView1::from(&self.params[self.params.len() - n..])
    }

    pub fn shift_mut(&mut self) -> ArrayViewMut1<'_, f64> {
        let n = self.spec.output_dim();
        let len = self.params.len();
        ArrayViewMut1::from(&mut self.params[len - n..])
    }

    fn activated(&self, j: usize) -> bool {
        j + 1 < self.spec.depth() || self.spec.head == HeadMode::PaperExact
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.spec.input_dim() {
            return Err(shape(format!(
                "MLP expects input of length {}, got {}",
                self.spec.input_dim(),
                x.len()
            )));
        }
        let xs = ArrayView2::from_shape((1, x.len()), x).unwrap();
        Ok(self.forward_batch(xs).into_raw_vec_and_offset().0)
    }

    /// Rows of `x` are independent inputs.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        self.forward_tape(x).1
    }

    pub fn forward_tape(&self, x: ArrayView2<'_, f64>) -> (MlpTape, Array2<f64>) {
        assert_eq!(x.ncols(), self.spec.input_dim(), "MLP input width");
        let act = self.spec.activation;
        let mut pre = Vec::with_capacity(self.spec.depth());
        let mut post: Vec<Array2<f64>> = Vec::with_capacity(self.spec.depth());
        for j in 0..self.spec.depth() {
            let input = if j == 0 { x } else { post[j - 1].view() };
            let mut z = input.dot(&self.weight(j).t());
            z += &self.bias(j);
            let a = if self.activated(j) {
                z.mapv(|v| act.apply(v))
            } else {
                z.clone()
            };
            pre.push(z);
            post.push(a);
        }
        let mut out = post.last().unwrap().clone();
        out += &self.shift();
        let tape = MlpTape {
            inputs: x.to_owned(),
            pre,
            post,
        };
        (tape, out)
    }

    /// Accumulates `∂loss/∂θ` into `grad` and returns `∂loss/∂x`, given
    /// `upstream = ∂loss/∂output` row by row.
    pub fn backward(&self, tape: &MlpTape, upstream: ArrayView2<'_, f64>, grad: &mut [f64]) -> Array2<f64> {
        assert_eq!(grad.len(), self.params.len(), "gradient buffer length");
        let act = self.spec.activation;
        let n = self.spec.output_dim();
        let glen = grad.len();
        for (g, col) in grad[glen - n..].iter_mut().zip(upstream.axis_iter(Axis(1))) {
            *g += col.sum();
        }
        let mut delta = upstream.to_owned();
        for j in (0..self.spec.depth()).rev() {
            if self.activated(j) {
                Zip::from(&mut delta)
                    .and(&tape.pre[j])
                    .and(&tape.post[j])
                    .for_each(|d, &z, &a| *d *= act.derivative(z, a));
            }
            let input = if j == 0 { tape.inputs.view() } else { tape.post[j - 1].view() };
            let (a, b) = self.offsets[j];
            let dout = self.spec.widths[j + 1];
            let dw = delta.t().dot(&input);
            for (g, v) in grad[a..b].iter_mut().zip(dw.iter()) {
                *g += v;
            }
            for (g, col) in grad[b..b + dout].iter_mut().zip(delta.axis_iter(Axis(1))) {
                *g += col.sum();
            }
            delta = delta.dot(&self.weight(j));
        }
        delta
    }

    /// Parameter gradient and input gradient of `⟨upstream, forward(x)⟩`.
    pub fn gradient(&self, x: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.len() != self.spec.input_dim() || upstream.len() != self.spec.output_dim() {
            return Err(shape("gradient arguments do not match the MLP widths"));
        }
        let xs = ArrayView2::from_shape((1, x.len()), x).unwrap();
        let us = ArrayView2::from_shape((1, upstream.len()), upstream).unwrap();
        let (tape, _) = self.forward_tape(xs);
        let mut grad = vec![0.0; self.params.len()];
        let dx = self.backward(&tape, us, &mut grad);
        Ok((grad, dx.into_raw_vec_and_offset().0))
    }

    pub(crate) fn write_spec(&self, w: &mut impl Write) -> std::io::Result<()> {
        put_u32(w, self.spec.widths.len())?;
        for &d in &self.spec.widths {
            put_u32(w, d)?;
        }
        put_u32(w, self.spec.activation.code())?;
        put_u32(w, self.spec.head.code())
    }

    pub(crate) fn read_spec(r: &mut impl Read) -> Result<MlpSpec> {
        let n = get_u32(r)?;
        if n > 1 << 16 {
            return Err(invalid("implausible layer count in serialized MLP"));
        }
        let widths = (0..n).map(|_| get_u32(r)).collect::<std::io::Result<Vec<_>>>()?;
        let act = Activation::from_code(get_u32(r)?).ok_or_else(|| invalid("unknown activation code"))?;
        let head = HeadMode::from_code(get_u32(r)?).ok_or_else(|| invalid("unknown head code"))?;
        Ok(MlpSpec::new(widths, act)?.with_head(head))
    }

    /// Widths, activation and head, then parameters.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        self.write_spec(w)?;
        put_f64s(w, &self.params)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let spec = Self::read_spec(r)?;
        let params = get_f64s(r, spec.stored_count())?;
        Self::from_params(spec, params)
    }
}

/// Outcome of regressing an MLP onto grid values.
#[derive(Debug, Clone)]
pub struct FunctionFit {
    pub net: Mlp,
    /// Max over nodes and channels of `|net(x) − target(x)|`.
    pub sup_error: f64,
    pub final_loss: f64,
}

/// Regresses `target` on its grid nodes with mean squared error.
///
/// Each restart draws a fresh initialization from the seed stream; the one
/// with the smallest sup error is returned.
pub fn fit_function(target: &GridFunction, spec: &MlpSpec, budget: &TrainBudget) -> Result<FunctionFit> {
    budget.validate()?;
    let gs = target.spec();
    if spec.input_dim() != gs.dim {
        return Err(shape("MLP input width must equal the grid dimension"));
    }
    if spec.output_dim() != gs.channels {
        return Err(shape("MLP output width must equal the target channel count"));
    }
    let x = Array2::from_shape_vec((gs.nodes(), gs.dim), gs.coordinate_table()).unwrap();
    let y = ArrayView2::from_shape((gs.nodes(), gs.channels), target.values()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(budget.seed);
    let mut best: Option<FunctionFit> = None;
    for _ in 0..budget.restarts {
        let mut net = Mlp::init(spec.clone(), &mut rng);
        if spec.activation == Activation::ReLU {
            place_kinks(&mut net, x.view(), &mut rng);
        }
        let fit = regress(net, x.view(), y, budget)?;
        if best.as_ref().is_none_or(|b| fit.sup_error < b.sup_error) {
            best = Some(fit);
        }
    }
    Ok(best.unwrap())
}

/// Moves each hidden ReLU unit's kink onto a randomly chosen node, layer by
/// layer. With zero biases every first-layer kink sits at the origin and the
/// net starts out linear on the grid.
fn place_kinks(net: &mut Mlp, x: ArrayView2<'_, f64>, rng: &mut impl Rng) {
    for j in 0..net.spec.depth() - 1 {
        let (tape, _) = net.forward_tape(x);
        let z = &tape.pre[j];
        let shifts: Vec<f64> = (0..z.ncols()).map(|i| z[[rng.random_range(0..z.nrows()), i]]).collect();
        for (b, s) in net.bias_mut(j).iter_mut().zip(shifts) {
            *b -= s;
        }
    }
}

fn regress(mut net: Mlp, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, budget: &TrainBudget) -> Result<FunctionFit> {
    let rows = x.nrows() as f64;
    let mut opt = Adam::new(net.params.len());
    let mut grad = vec![0.0; net.params.len()];
    let mut best = (f64::INFINITY, net.params.clone());
    for epoch in 0..budget.epochs {
        let (tape, out) = net.forward_tape(x);
        let resid = &out - &y;
        let loss = resid.iter().map(|r| r * r).sum::<f64>() / rows;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                checkpoint: best.1,
            });
        }
        if loss < best.0 {
            best = (loss, net.params.clone());
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        let upstream = resid.mapv(|r| 2.0 * r / rows);
        net.backward(&tape, upstream.view(), &mut grad);
        opt.step(&mut net.params, &grad, budget.rate_at(epoch));
    }
    let out = net.forward_batch(x);
    let loss = (&out - &y).iter().map(|r| r * r).sum::<f64>() / rows;
    if !(loss <= best.0) {
        net.params = best.1;
    }
    let out = net.forward_batch(x);
    let sup_error = (&out - &y).iter().fold(0.0f64, |m, r| m.max(r.abs()));
    let final_loss = (&out - &y).iter().map(|r| r * r).sum::<f64>() / rows;
    if !sup_error.is_finite() {
        return Err(Error::Numeric("fitted MLP output".into()));
    }
    Ok(FunctionFit {
        net,
        sup_error,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use proptest::prelude::*;

    fn spec(w: &[usize], a: Activation) -> MlpSpec {
        MlpSpec::new(w.to_vec(), a).unwrap()
    }

    #[test]
    fn forward_examples() {
        let mut net = Mlp::zeros(spec(&[2, 1], Activation::Tanh));
        net.shift_mut()[0] = 3.0;
        assert_eq!(net.forward(&[0.4, -1.0]).unwrap(), vec![3.0]);

        let mut relu = Mlp::zeros(spec(&[2, 2], Activation::ReLU));
        relu.weight_mut(0).assign(&ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]));
        assert_eq!(relu.forward(&[1.0, -1.0]).unwrap(), vec![1.0, 0.0]);

        let mut t = Mlp::zeros(spec(&[1, 1], Activation::Tanh));
        t.weight_mut(0)[[0, 0]] = 2.0;
        assert!((t.forward(&[0.5]).unwrap()[0] - 1f64.tanh()).abs() < 1e-9);
        assert!(t.forward(&[0.5, 0.1]).is_err());
    }

    #[test]
    fn linear_head_skips_last_activation() {
        let s = spec(&[1, 1], Activation::ReLU).with_head(HeadMode::LinearHead);
        let mut net = Mlp::zeros(s);
        net.weight_mut(0)[[0, 0]] = 1.0;
        assert_eq!(net.forward(&[-2.0]).unwrap(), vec![-2.0]);
    }

    #[test]
    fn param_count_examples() {
        assert_eq!(param_count(&[1, 1]), 4);
        assert_eq!(param_count(&[2, 3, 1]), 20);
        for j in 1..6 {
            assert_eq!(param_count(&vec![1; j + 1]), 3 * j + 1);
        }
    }

    #[test]
    fn gradient_examples() {
        let net = Mlp::seeded(spec(&[3, 4, 2], Activation::Tanh), 1);
        let (g, dx) = net.gradient(&[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(g.iter().chain(dx.iter()).all(|&v| v == 0.0));

        // with zero weights the pre-activation is 0, where tanh' = 1
        let mut lin = Mlp::zeros(spec(&[3, 2], Activation::Tanh));
        lin.bias_mut(0).fill(0.0);
        let x = [0.5, -1.0, 2.0];
        let up = [0.3, -0.7];
        let (g, _) = lin.gradient(&x, &up).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert!((g[r * 3 + c] - up[r] * x[c]).abs() < 1e-9);
            }
        }
    }

    fn fd_check(net: &Mlp, x: &[f64], up: &[f64]) -> f64 {
        let (g, dx) = net.gradient(x, up).unwrap();
        let f = |n: &Mlp, x: &[f64]| -> f64 { n.forward(x).unwrap().iter().zip(up).map(|(a, b)| a * b).sum() };
        let h = 1e-5;
        let mut worst = 0.0f64;
        let mut rel = |num: f64, ana: f64| {
            let e = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
            worst = worst.max(e);
        };
        for i in 0..g.len() {
            let mut p = net.clone();
            p.params[i] += h;
            let mut m = net.clone();
            m.params[i] -= h;
            rel((f(&p, x) - f(&m, x)) / (2.0 * h), g[i]);
        }
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            xp[i] += h;
            let mut xm = x.to_vec();
            xm[i] -= h;
            rel((f(net, &xp) - f(net, &xm)) / (2.0 * h), dx[i]);
        }
        worst
    }

    #[test]
    fn tanh_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in 0..100 {
            let depth = 1 + k % 3;
            let widths: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..5)).collect();
            let head = if k % 2 == 0 { HeadMode::PaperExact } else { HeadMode::LinearHead };
            let mut net = Mlp::init(spec(&widths, Activation::Tanh).with_head(head), &mut rng);
            net.params.iter_mut().for_each(|p| *p += rng.random_range(-0.3..0.3));
            let x: Vec<f64> = (0..widths[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
            let up: Vec<f64> = (0..*widths.last().unwrap()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let e = fd_check(&net, &x, &up);
            assert!(e < 1e-5, "net {k}: relative error {e}");
        }
    }

    #[test]
    fn relu_gradients_away_from_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut checked = 0;
        while checked < 50 {
            let widths = vec![3, 4, 3, 2];
            let mut net = Mlp::init(spec(&widths, Activation::ReLU), &mut rng);
            net.params.iter_mut().for_each(|p| *p += rng.random_range(-0.3..0.3));
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let xs = ArrayView2::from_shape((1, 3), &x[..]).unwrap();
            let (tape, _) = net.forward_tape(xs);
            if tape.pre.iter().flatten().any(|z| z.abs() < 1e-3) {
                continue;
            }
            let up = [0.4, -0.9];
            assert!(fd_check(&net, &x, &up) < 1e-4);
            checked += 1;
        }
    }

    fn spectral_norm(a: ArrayView2<'_, f64>) -> f64 {
        let mut v = ndarray::Array1::from_elem(a.ncols(), 1.0);
        for _ in 0..200 {
            let w = a.t().dot(&a.dot(&v));
            let n = w.dot(&w).sqrt();
            if n == 0.0 {
                return 0.0;
            }
            v = w / n;
        }
        a.dot(&v).dot(&a.dot(&v)).sqrt()
    }

    #[test]
    fn contractive_weights_give_one_lipschitz_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for k in 0..40 {
            let act = if k % 2 == 0 { Activation::Tanh } else { Activation::ReLU };
            let widths = vec![3, 5, 4, 2];
            let mut net = Mlp::init(spec(&widths, act), &mut rng);
            for j in 0..3 {
                let s = spectral_norm(net.weight(j));
                let scale = rng.random_range(0.2..1.0) / s;
                net.weight_mut(j).mapv_inplace(|v| v * scale);
                net.bias_mut(j).mapv_inplace(|_| rng.random_range(-1.0..1.0));
            }
            for _ in 0..20 {
                let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
                let y: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
                let fx = net.forward(&x).unwrap();
                let fy = net.forward(&y).unwrap();
                let d_out: f64 = fx.iter().zip(&fy).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let d_in: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!(d_out <= d_in * (1.0 + 1e-9));
            }
        }
    }

    proptest! {
        #[test]
        fn stored_count_matches_storage(widths in proptest::collection::vec(1usize..7, 2..6), seed in 0u64..1000) {
            let s = spec(&widths, Activation::Tanh);
            let net = Mlp::seeded(s.clone(), seed);
            let expected: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum::<usize>() + widths.last().unwrap();
            prop_assert_eq!(net.params().len(), s.stored_count());
            prop_assert_eq!(s.stored_count(), expected);
        }

        #[test]
        fn serialization_round_trip(widths in proptest::collection::vec(1usize..5, 2..5), seed in 0u64..100) {
            let net = Mlp::seeded(spec(&widths, Activation::ReLU).with_head(HeadMode::LinearHead), seed);
            let mut buf = Vec::new();
            net.write_to(&mut buf).unwrap();
            let back = Mlp::read_from(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back, net);
        }
    }

    #[test]
    fn glorot_bounds_and_zero_biases() {
        let net = Mlp::seeded(spec(&[4, 6], Activation::Tanh), 3);
        let bound = (6.0f64 / 10.0).sqrt();
        assert!(net.weight(0).iter().all(|w| w.abs() <= bound));
        assert!(net.bias(0).iter().all(|&b| b == 0.0));
        assert!(net.shift().iter().all(|&c| c == 0.0));
    }

    #[test]
    fn fit_constant() {
        let g = GridSpec::scalar(1, 65).unwrap();
        let target = GridFunction::constant(g, 0.7);
        let budget = TrainBudget::new(3000, 1e-2, 0).with_decay(1e-5);
        let fit = fit_function(&target, &spec(&[1, 3, 1], Activation::ReLU), &budget).unwrap();
        assert!(fit.sup_error < 1e-3, "sup error {}", fit.sup_error);
    }

    #[test]
    fn fit_shifted_relu_exactly() {
        let g = GridSpec::scalar(1, 65).unwrap();
        let target = GridFunction::from_scalar_fn(g, |x| (x[0] - 0.5).max(0.0)).unwrap();
        let budget = TrainBudget::new(4000, 1e-2, 1).with_decay(1e-5).with_restarts(4);
        let fit = fit_function(&target, &spec(&[1, 1], Activation::ReLU), &budget).unwrap();
        assert!(fit.sup_error < 1e-4, "sup error {}", fit.sup_error);
    }

    #[test]
    fn fit_is_deterministic() {
        let g = GridSpec::scalar(1, 17).unwrap();
        let target = GridFunction::from_scalar_fn(g, |x| x[0] * x[0]).unwrap();
        let budget = TrainBudget::new(50, 1e-2, 4);
        let s = spec(&[1, 4, 1], Activation::Tanh);
        let a = fit_function(&target, &s, &budget).unwrap();
        let b = fit_function(&target, &s, &budget).unwrap();
        assert_eq!(a.net, b.net);
    }
}
