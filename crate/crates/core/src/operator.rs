//! Finite-rank neural operators.
//!
//! ```text
//! u₁(x)      = Σ_{m,n} C⁰_{m,n} (u, φ_m) ψ_n(x) + b⁰(x)
//! u_{ℓ+1}(x) = tanh(W⁽ℓ⁾ u_ℓ(x) + b⁽ℓ⁾)                 ℓ = 1..L
//! G(u)(x)    = Σ_{m,n} C¹_{m,n} (u_{L+1}, ψ_m) ψ_n(x) + b^{L+1}(x)
//! ```
//!
//! `φ` is an orthonormal basis on the input grid and `ψ` one on the output
//! grid. The bias fields `b⁰`, `b^{L+1}` are tanh MLPs of the spatial
//! coordinate. Every forward pass runs on a batch: rows of the input matrix
//! are flattened grid functions.
//!
//! # Shard layout
//!
//! ```text
//! b"MONOEXP1"
//! u32 × 10: rank, hidden_width, depth, bias_depth, bias_width,
//!           d_in, d_out, in_dim, out_dim, head_mode
//! u64: scalar count
//! f64 × count:
//!   C⁰   as [m][c][n][i]   (m input mode, c input channel, n output mode, i hidden channel)
//!   (W⁽ℓ⁾ row-major, b⁽ℓ⁾) for ℓ = 1..L
//!   C¹   as [m][i][n][o]   (m, n modes of ψ, i hidden channel, o output channel)
//!   b⁰ MLP parameters, then b^{L+1} MLP parameters (see `nn`)
//! ```
//! All fields little-endian.

use std::io::{Read, Write};
use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::basis::BasisSet;
use crate::error::{invalid, shape, Error, Result};
use crate::grid::{l2_norm, GridFunction, GridSpec};
use crate::io::{expect_magic, get_f64s, get_u32, get_u64, put_f64s, put_u32};
use crate::nn::{Activation, HeadMode, Mlp, MlpSpec, MlpTape};
use crate::optim::{Adam, TrainBudget};

pub const SHARD_MAGIC: &[u8; 8] = b"MONOEXP1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NoSpec {
    pub rank: usize,
    pub hidden_width: usize,
    pub depth: usize,
    pub bias_depth: usize,
    pub bias_width: usize,
    pub d_in: usize,
    pub d_out: usize,
    /// Spatial dimension of the input grid.
    pub in_dim: usize,
    /// Spatial dimension of the output grid.
    pub out_dim: usize,
    pub head_mode: HeadMode,
}

/// Parameter counts of one operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    /// `L w(w+1) + 2N²w² + 2Δ w(w+1)`.
    pub bound: usize,
    /// Scalars actually stored.
    pub stored: usize,
}

impl NoSpec {
    /// Scalar-to-scalar operator on `dim`-dimensional grids with LinearHead
    /// off and bias nets as wide as the hidden layers.
    pub fn scalar(dim: usize, rank: usize, hidden_width: usize, depth: usize) -> Self {
        Self {
            rank,
            hidden_width,
            depth,
            bias_depth: 1,
            bias_width: hidden_width,
            d_in: 1,
            d_out: 1,
            in_dim: dim,
            out_dim: dim,
            head_mode: HeadMode::PaperExact,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.hidden_width;
        if self.rank == 0 || w == 0 || self.bias_depth == 0 || self.bias_width == 0 {
            return Err(invalid("rank, widths and bias depth must be positive"));
        }
        if self.d_in == 0 || self.d_out == 0 || self.in_dim == 0 || self.out_dim == 0 {
            return Err(invalid("channel counts and spatial dimensions must be positive"));
        }
        if self.d_in.max(self.d_out).max(self.in_dim).max(self.out_dim) > w {
            return Err(invalid(format!(
                "hidden width {w} must dominate channel counts and spatial dimensions"
            )));
        }
        if self.bias_width > w {
            return Err(invalid("bias network width cannot exceed the hidden width"));
        }
        Ok(())
    }

    fn bias_spec(&self, out: usize) -> MlpSpec {
        let mut widths = vec![self.out_dim];
        widths.extend(std::iter::repeat_n(self.bias_width, self.bias_depth - 1));
        widths.push(out);
        MlpSpec::new(widths, Activation::Tanh).unwrap().with_head(self.head_mode)
    }

    pub fn bias_in_spec(&self) -> MlpSpec {
        self.bias_spec(self.hidden_width)
    }

    pub fn bias_out_spec(&self) -> MlpSpec {
        self.bias_spec(self.d_out)
    }

    pub fn param_bound(&self) -> usize {
        let (l, w, n, d) = (self.depth, self.hidden_width, self.rank, self.bias_depth);
        l * w * (w + 1) + 2 * n * n * w * w + 2 * d * w * (w + 1)
    }

    pub fn stored_count(&self) -> usize {
        let (n, w) = (self.rank, self.hidden_width);
        n * self.d_in * n * w
            + self.depth * (w * w + w)
            + n * w * n * self.d_out
            + self.bias_in_spec().stored_count()
            + self.bias_out_spec().stored_count()
    }

    pub fn param_count(&self) -> ParamCount {
        ParamCount {
            bound: self.param_bound(),
            stored: self.stored_count(),
        }
    }

    pub(crate) fn header(&self) -> [usize; 10] {
        [
            self.rank,
            self.hidden_width,
            self.depth,
            self.bias_depth,
            self.bias_width,
            self.d_in,
            self.d_out,
            self.in_dim,
            self.out_dim,
            self.head_mode.code(),
        ]
    }

    pub(crate) fn from_header(h: [usize; 10]) -> Result<Self> {
        let spec = Self {
            rank: h[0],
            hidden_width: h[1],
            depth: h[2],
            bias_depth: h[3],
            bias_width: h[4],
            d_in: h[5],
            d_out: h[6],
            in_dim: h[7],
            out_dim: h[8],
            head_mode: HeadMode::from_code(h[9]).ok_or_else(|| invalid("unknown head mode"))?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Exact bound and stored count for `spec`.
pub fn param_count_no(spec: &NoSpec) -> ParamCount {
    spec.param_count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralOperator {
    spec: NoSpec,
    in_basis: Arc<BasisSet>,
    out_basis: Arc<BasisSet>,
    c0: Array2<f64>,
    hidden: Vec<(Array2<f64>, Array1<f64>)>,
    c1: Array2<f64>,
    bias_in: Mlp,
    bias_out: Mlp,
}

struct Tape {
    coeffs: Array2<f64>,
    layers: Vec<Array2<f64>>,
    gamma: Array2<f64>,
    bias_in: MlpTape,
    bias_out: MlpTape,
}

/// Reads `a` of shape `(p, q·r)` as `[p][q][r]` and returns `[q][p][r]`
/// as shape `(q, p·r)`. Matrix products may come back column-major, so the
/// operand is first copied to row-major order if needed.
fn swap01(a: ArrayView2<'_, f64>, p: usize, q: usize, r: usize) -> Array2<f64> {
    let a = a.as_standard_layout();
    let v = a.view().into_shape_with_order((p, q, r)).expect("row-major operand");
    let t = v.permuted_axes([1, 0, 2]);
    Array2::from_shape_vec((q, p * r), t.iter().copied().collect()).unwrap()
}

fn row_major(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Copies `a` into `dst` in logical row-major order, whatever its memory layout.
fn copy_rows(dst: &mut [f64], a: &Array2<f64>) {
    for (d, &v) in dst.iter_mut().zip(a.iter()) {
        *d = v;
    }
}

fn check_finite(a: &Array2<f64>, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(what.to_string()))
    }
}

impl NeuralOperator {
    /// Coefficient blocks uniform in `±1/N`, hidden weights Glorot-uniform,
    /// biases zero.
    pub fn init(spec: NoSpec, in_basis: Arc<BasisSet>, out_basis: Arc<BasisSet>, seed: u64) -> Result<Self> {
        spec.validate()?;
        check_bases(&spec, &in_basis, &out_basis)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, w) = (spec.rank, spec.hidden_width);
        let scale = 1.0 / n as f64;
        let uniform = |rows: usize, cols: usize, b: f64, rng: &mut ChaCha8Rng| {
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-b..=b))
        };
        let c0 = uniform(n * spec.d_in, n * w, scale, &mut rng);
        let glorot = (3.0 / w as f64).sqrt();
        let hidden = (0..spec.depth)
            .map(|_| (uniform(w, w, glorot, &mut rng), Array1::zeros(w)))
            .collect();
        let c1 = uniform(n * w, n * spec.d_out, scale, &mut rng);
        let bias_in = Mlp::init(spec.bias_in_spec(), &mut rng);
        let bias_out = Mlp::init(spec.bias_out_spec(), &mut rng);
        Ok(Self {
            spec,
            in_basis,
            out_basis,
            c0,
            hidden,
            c1,
            bias_in,
            bias_out,
        })
    }

    /// All coefficients, weights and biases zero.
    pub fn zeros(spec: NoSpec, in_basis: Arc<BasisSet>, out_basis: Arc<BasisSet>) -> Result<Self> {
        let mut op = Self::init(spec, in_basis, out_basis, 0)?;
        let zeros = vec![0.0; spec.stored_count()];
        op.set_params(&zeros)?;
        Ok(op)
    }

    pub fn spec(&self) -> &NoSpec {
        &self.spec
    }

    pub fn in_basis(&self) -> &Arc<BasisSet> {
        &self.in_basis
    }

    pub fn out_basis(&self) -> &Arc<BasisSet> {
        &self.out_basis
    }

    pub fn input_spec(&self) -> GridSpec {
        self.in_basis.spec().with_channels(self.spec.d_in).unwrap()
    }

    pub fn output_spec(&self) -> GridSpec {
        self.out_basis.spec().with_channels(self.spec.d_out).unwrap()
    }

    pub fn stored_count(&self) -> usize {
        self.spec.stored_count()
    }

    /// `C⁰` as an `(N·d_in) × (N·w)` matrix indexed `[(m,c)][(n,i)]`.
    pub fn c0(&self) -> &Array2<f64> {
        &self.c0
    }

    pub fn c0_mut(&mut self) -> &mut Array2<f64> {
        &mut self.c0
    }

    /// `C¹` as an `(N·w) × (N·d_out)` matrix indexed `[(m,i)][(n,o)]`.
    pub fn c1(&self) -> &Array2<f64> {
        &self.c1
    }

    pub fn c1_mut(&mut self) -> &mut Array2<f64> {
        &mut self.c1
    }

    pub fn hidden_mut(&mut self, layer: usize) -> (&mut Array2<f64>, &mut Array1<f64>) {
        let (w, b) = &mut self.hidden[layer];
        (w, b)
    }

    pub fn bias_in_mut(&mut self) -> &mut Mlp {
        &mut self.bias_in
    }

    pub fn bias_out_mut(&mut self) -> &mut Mlp {
        &mut self.bias_out
    }

    /// Flat parameters in shard order.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.stored_count());
        out.extend(self.c0.iter());
        for (w, b) in &self.hidden {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out.extend(self.c1.iter());
        out.extend_from_slice(self.bias_in.params());
        out.extend_from_slice(self.bias_out.params());
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.stored_count() {
            return Err(shape(format!(
                "expected {} parameters, got {}",
                self.stored_count(),
                p.len()
            )));
        }
        let mut rest = p;
        let mut take = |n: usize| {
            let (a, b) = rest.split_at(n);
            rest = b;
            a
        };
        let c0_len = self.c0.len();
        self.c0.as_slice_mut().unwrap().copy_from_slice(take(c0_len));
        for (w, b) in &mut self.hidden {
            let wl = w.len();
            w.as_slice_mut().unwrap().copy_from_slice(take(wl));
            let bl = b.len();
            b.as_slice_mut().unwrap().copy_from_slice(take(bl));
        }
        let c1_len = self.c1.len();
        self.c1.as_slice_mut().unwrap().copy_from_slice(take(c1_len));
        let bi = self.bias_in.params().len();
        self.bias_in.params_mut().copy_from_slice(take(bi));
        let bo = self.bias_out.params().len();
        self.bias_out.params_mut().copy_from_slice(take(bo));
        Ok(())
    }

    fn phi_w(&self) -> ArrayView2<'_, f64> {
        basis_view(&self.in_basis, true).slice_move(s![..self.spec.rank, ..])
    }

    fn psi(&self) -> ArrayView2<'_, f64> {
        basis_view(&self.out_basis, false).slice_move(s![..self.spec.rank, ..])
    }

    fn psi_w(&self) -> ArrayView2<'_, f64> {
        basis_view(&self.out_basis, true).slice_move(s![..self.spec.rank, ..])
    }

    fn coords(&self) -> Array2<f64> {
        let g = self.out_basis.spec();
        Array2::from_shape_vec((g.nodes(), g.dim), g.coordinate_table()).unwrap()
    }

    /// Coefficients `(u, φ_m)` per sample, as `(B, N·d_in)`.
    fn encode_batch(&self, inputs: ArrayView2<'_, f64>) -> Array2<f64> {
        let (b, n1, d) = (inputs.nrows(), self.in_basis.nodes(), self.spec.d_in);
        let u = swap01(inputs, b, n1, d);
        let a = self.phi_w().dot(&u);
        swap01(a.view(), self.spec.rank, b, d)
    }

    /// `Σ_n β_n ψ_n(x)` for `β` of shape `(B, N·c)`, as `(n2·B, c)` rows ordered `[x][b]`.
    fn decode_nodes_major(&self, beta: &Array2<f64>, c: usize) -> Array2<f64> {
        let b = beta.nrows();
        let bt = swap01(beta.view(), b, self.spec.rank, c);
        let v = row_major(self.psi().t().dot(&bt));
        let n2 = self.out_basis.nodes();
        v.into_shape_with_order((n2 * b, c)).unwrap()
    }

    /// `(h, ψ_m)` for node-major rows `h` of shape `(n2·B, c)`, as `(B, N·c)`.
    fn encode_nodes_major(&self, h: &Array2<f64>, b: usize, c: usize) -> Array2<f64> {
        let n2 = self.out_basis.nodes();
        let h = h.as_standard_layout();
        let hv = h.view().into_shape_with_order((n2, b * c)).unwrap();
        let g = self.psi_w().dot(&hv);
        swap01(g.view(), self.spec.rank, b, c)
    }

    fn check_batch(&self, inputs: ArrayView2<'_, f64>) -> Result<()> {
        let expect = self.in_basis.nodes() * self.spec.d_in;
        if inputs.ncols() != expect {
            return Err(shape(format!(
                "operator expects inputs of length {expect}, got {}",
                inputs.ncols()
            )));
        }
        Ok(())
    }

    fn forward_impl(&self, inputs: ArrayView2<'_, f64>) -> Result<(Tape, Array2<f64>)> {
        self.check_batch(inputs)?;
        let b = inputs.nrows();
        let (w, n2, d_out) = (self.spec.hidden_width, self.out_basis.nodes(), self.spec.d_out);
        let coords = self.coords();

        let coeffs = self.encode_batch(inputs);
        let beta = coeffs.dot(&self.c0);
        let mut h = self.decode_nodes_major(&beta, w);
        let (bias_in_tape, field) = self.bias_in.forward_tape(coords.view());
        add_field(&mut h, &field, b);
        check_finite(&h, "first layer")?;

        let mut layers = vec![h];
        for (l, (wm, bv)) in self.hidden.iter().enumerate() {
            let mut z = layers.last().unwrap().dot(&wm.t());
            z += bv;
            z.mapv_inplace(f64::tanh);
            check_finite(&z, &format!("hidden layer {}", l + 1))?;
            layers.push(z);
        }

        let gamma = self.encode_nodes_major(layers.last().unwrap(), b, w);
        let delta = gamma.dot(&self.c1);
        let mut out = self.decode_nodes_major(&delta, d_out);
        let (bias_out_tape, field) = self.bias_out.forward_tape(coords.view());
        add_field(&mut out, &field, b);
        let out = swap01(out.view().into_shape_with_order((n2, b * d_out)).unwrap(), n2, b, d_out);
        check_finite(&out, "output layer")?;
        Ok((
            Tape {
                coeffs,
                layers,
                gamma,
                bias_in: bias_in_tape,
                bias_out: bias_out_tape,
            },
            out,
        ))
    }

    fn backward(&self, tape: &Tape, upstream: ArrayView2<'_, f64>) -> Vec<f64> {
        let b = upstream.nrows();
        let (n, w, n2) = (self.spec.rank, self.spec.hidden_width, self.out_basis.nodes());
        let d_out = self.spec.d_out;
        let mut grad = vec![0.0; self.stored_count()];
        let (g_c0, rest) = grad.split_at_mut(self.c0.len());
        let hidden_len: usize = self.hidden.iter().map(|(w, b)| w.len() + b.len()).sum();
        let (g_hidden, rest) = rest.split_at_mut(hidden_len);
        let (g_c1, rest) = rest.split_at_mut(self.c1.len());
        let (g_bin, g_bout) = rest.split_at_mut(self.bias_in.params().len());

        let d_o = swap01(upstream, b, n2, d_out);
        let field = d_o.view().into_shape_with_order((n2, b, d_out)).unwrap().sum_axis(Axis(1));
        self.bias_out.backward(&tape.bias_out, field.view(), g_bout);

        let d_delta = swap01(self.psi().dot(&d_o).view(), n, b, d_out);
        let dc1 = tape.gamma.t().dot(&d_delta);
        copy_rows(g_c1, &dc1);
        let d_gamma = d_delta.dot(&self.c1.t());
        let d_g = swap01(d_gamma.view(), b, n, w);
        let mut dh = row_major(self.psi_w().t().dot(&d_g))
            .into_shape_with_order((n2 * b, w))
            .unwrap();

        let mut offsets = Vec::with_capacity(self.hidden.len());
        let mut off = 0;
        for (wm, bv) in &self.hidden {
            offsets.push(off);
            off += wm.len() + bv.len();
        }
        for l in (0..self.hidden.len()).rev() {
            let out = &tape.layers[l + 1];
            Zip::from(&mut dh).and(out).for_each(|d, &a| *d *= 1.0 - a * a);
            let dw = dh.t().dot(&tape.layers[l]);
            let db = dh.sum_axis(Axis(0));
            let o = offsets[l];
            let wl = w * w;
            copy_rows(&mut g_hidden[o..o + wl], &dw);
            for (g, &v) in g_hidden[o + wl..o + wl + w].iter_mut().zip(&db) {
                *g = v;
            }
            dh = row_major(dh.dot(&self.hidden[l].0));
        }

        let field = dh.view().into_shape_with_order((n2, b, w)).unwrap().sum_axis(Axis(1));
        self.bias_in.backward(&tape.bias_in, field.view(), g_bin);
        let dv = dh.into_shape_with_order((n2, b * w)).unwrap();
        let d_beta = swap01(self.psi().dot(&dv).view(), n, b, w);
        let dc0 = tape.coeffs.t().dot(&d_beta);
        copy_rows(g_c0, &dc0);
        grad
    }

    /// Batched forward on rows of flattened inputs.
    pub fn forward_batch(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward_impl(inputs)?.1)
    }

    pub fn forward_no(&self, u: &GridFunction) -> Result<GridFunction> {
        self.check_input(u)?;
        let x = ArrayView2::from_shape((1, u.values().len()), u.values()).unwrap();
        let out = self.forward_batch(x)?;
        GridFunction::new(self.output_spec(), out.into_raw_vec_and_offset().0)
    }

    fn check_input(&self, u: &GridFunction) -> Result<()> {
        if *u.spec() != self.input_spec() {
            return Err(shape("input does not match the operator's input grid"));
        }
        Ok(())
    }

    /// The first nonlocal layer alone, without its bias field.
    pub fn apply_k0(&self, u: &GridFunction) -> Result<GridFunction> {
        self.check_input(u)?;
        let x = ArrayView2::from_shape((1, u.values().len()), u.values()).unwrap();
        let beta = self.encode_batch(x).dot(&self.c0);
        let h = self.decode_nodes_major(&beta, self.spec.hidden_width);
        let spec = self.out_basis.spec().with_channels(self.spec.hidden_width)?;
        GridFunction::new(spec, h.into_raw_vec_and_offset().0)
    }

    /// The last nonlocal layer alone, without its bias field.
    pub fn apply_kl1(&self, v: &GridFunction) -> Result<GridFunction> {
        let expect = self.out_basis.spec().with_channels(self.spec.hidden_width)?;
        if *v.spec() != expect {
            return Err(shape("argument does not match the hidden-layer grid"));
        }
        let h = Array2::from_shape_vec((self.out_basis.nodes(), self.spec.hidden_width), v.values().to_vec()).unwrap();
        let gamma = self.encode_nodes_major(&h, 1, self.spec.hidden_width);
        let out = self.decode_nodes_major(&gamma.dot(&self.c1), self.spec.d_out);
        GridFunction::new(self.output_spec(), out.into_raw_vec_and_offset().0)
    }

    /// Mean squared `L²` loss over the batch and its gradient in shard order.
    pub fn loss_and_gradient(&self, inputs: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>) -> Result<(f64, Vec<f64>)> {
        let (tape, out) = self.forward_impl(inputs)?;
        if targets.dim() != out.dim() {
            return Err(shape("targets do not match the operator output"));
        }
        let weights = self.output_weights();
        let b = inputs.nrows() as f64;
        let mut resid = &out - &targets;
        let loss = weighted_sq(&resid, &weights) / b;
        Zip::from(resid.rows_mut()).for_each(|mut r| {
            Zip::from(&mut r).and(&weights).for_each(|v, &q| *v *= 2.0 * q / b);
        });
        let grad = self.backward(&tape, resid.view());
        Ok((loss, grad))
    }

    fn output_weights(&self) -> Array1<f64> {
        let q = self.out_basis.spec().quadrature_weights();
        let d = self.spec.d_out;
        Array1::from_iter(q.iter().flat_map(|&w| std::iter::repeat_n(w, d)))
    }

    pub fn write_shard(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(SHARD_MAGIC)?;
        for v in self.spec.header() {
            put_u32(w, v)?;
        }
        w.write_all(&(self.stored_count() as u64).to_le_bytes())?;
        put_f64s(w, &self.params())
    }

    pub fn read_shard(
        r: &mut impl Read,
        path: &std::path::Path,
        in_basis: Arc<BasisSet>,
        out_basis: Arc<BasisSet>,
    ) -> Result<Self> {
        expect_magic(r, SHARD_MAGIC, path)?;
        let mut h = [0usize; 10];
        for v in &mut h {
            *v = get_u32(r)?;
        }
        let spec = NoSpec::from_header(h)?;
        let count = get_u64(r)?;
        if count != spec.stored_count() as u64 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("scalar count {count} disagrees with header ({})", spec.stored_count()),
            });
        }
        let params = get_f64s(r, spec.stored_count())?;
        let mut op = Self::zeros(spec, in_basis, out_basis)?;
        op.set_params(&params)?;
        Ok(op)
    }
}

fn basis_view(b: &BasisSet, weighted: bool) -> ArrayView2<'_, f64> {
    let t = if weighted { b.weighted_table() } else { b.table() };
    ArrayView2::from_shape((b.len(), b.nodes()), t).unwrap()
}

fn check_bases(spec: &NoSpec, inb: &BasisSet, outb: &BasisSet) -> Result<()> {
    if inb.len() < spec.rank || outb.len() < spec.rank {
        return Err(shape("bases must have at least `rank` elements"));
    }
    if inb.spec().dim != spec.in_dim || outb.spec().dim != spec.out_dim {
        return Err(shape("basis grid dimensions disagree with the operator spec"));
    }
    Ok(())
}

/// Adds `field[x]` to every row `[x][b]` of node-major `h`.
fn add_field(h: &mut Array2<f64>, field: &Array2<f64>, batch: usize) {
    let c = h.ncols();
    let mut v = h.view_mut().into_shape_with_order((field.nrows(), batch, c)).unwrap();
    v += &field.view().insert_axis(Axis(1));
}

fn weighted_sq(resid: &Array2<f64>, weights: &Array1<f64>) -> f64 {
    resid
        .rows()
        .into_iter()
        .map(|r| r.iter().zip(weights).map(|(v, q)| q * v * v).sum::<f64>())
        .sum()
}

/// Stacks flattened grid functions as rows.
pub fn stack(functions: &[&GridFunction]) -> Result<Array2<f64>> {
    let len = functions.first().map(|f| f.values().len()).unwrap_or(0);
    if functions.iter().any(|f| f.values().len() != len) {
        return Err(shape("functions in a batch must share one layout"));
    }
    let mut out = Array2::zeros((functions.len(), len));
    for (mut row, f) in out.rows_mut().into_iter().zip(functions) {
        row.as_slice_mut().unwrap().copy_from_slice(f.values());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub loss_trace: Vec<f64>,
    pub final_loss: f64,
}

/// Adam on the mean squared `L²` error, full batch unless the budget sets a
/// batch size (then samples are reshuffled every epoch from `budget.seed`).
///
/// With `budget.scale_init`, `C⁰` is first divided by the RMS input norm and
/// `C¹` multiplied by the RMS target norm. Without it, experts fed only
/// small inputs start in the linear regime of tanh and stall there.
///
/// Full batch keeps the parameters with the lowest observed loss; mini-batch
/// runs keep the last iterate, since epoch losses mix parameter states. A non-finite loss
/// stops training with [`Error::Diverged`] carrying that checkpoint.
pub fn train_expert(
    op: &mut NeuralOperator,
    data: &[(GridFunction, GridFunction)],
    budget: &TrainBudget,
) -> Result<TrainReport> {
    budget.validate()?;
    if data.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let (ins, outs) = (op.input_spec(), op.output_spec());
    if data.iter().any(|(u, v)| *u.spec() != ins || *v.spec() != outs) {
        return Err(shape("training pairs do not match the operator grids"));
    }
    let x = stack(&data.iter().map(|p| &p.0).collect::<Vec<_>>())?;
    let y = stack(&data.iter().map(|p| &p.1).collect::<Vec<_>>())?;
    if budget.scale_init {
        let count_f = data.len() as f64;
        let rms = |fs: &mut dyn Iterator<Item = &GridFunction>| {
            (fs.map(|f| l2_norm(f).powi(2)).sum::<f64>() / count_f).sqrt()
        };
        let (ru, ry) = (rms(&mut data.iter().map(|p| &p.0)), rms(&mut data.iter().map(|p| &p.1)));
        if ru > 0.0 && ry > 0.0 {
            op.c0.mapv_inplace(|v| v / ru);
            op.c1.mapv_inplace(|v| v * ry);
        }
    }
    let mut params = op.params();
    let mut adam = Adam::new(params.len());
    let mut best = (f64::INFINITY, params.clone());
    let mut trace = Vec::with_capacity(budget.epochs);
    let count = data.len();
    let batch = budget.batch_size.unwrap_or(count).min(count);
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(budget.seed);
    for epoch in 0..budget.epochs {
        if batch < count {
            order.shuffle(&mut rng);
        }
        let lr = budget.rate_at(epoch);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let step = if batch == count {
                op.loss_and_gradient(x.view(), y.view())
            } else {
                let xb = x.select(Axis(0), chunk);
                let yb = y.select(Axis(0), chunk);
                op.loss_and_gradient(xb.view(), yb.view())
            };
            let (loss, grad) = match step {
                Ok((l, g)) if l.is_finite() && g.iter().all(|v| v.is_finite()) => (l, g),
                Ok(_) | Err(Error::Numeric(_)) => {
                    op.set_params(&best.1)?;
                    return Err(Error::Diverged {
                        epoch,
                        checkpoint: best.1,
                    });
                }
                Err(e) => return Err(e),
            };
            epoch_loss += loss * chunk.len() as f64 / count as f64;
            if batch == count && loss < best.0 {
                best = (loss, params.clone());
            }
            adam.step(&mut params, &grad, lr);
            op.set_params(&params)?;
        }
        trace.push(epoch_loss);
        if batch < count && epoch_loss < best.0 {
            best = (epoch_loss, params.clone());
        }
    }
    let (last, _) = op.loss_and_gradient(x.view(), y.view()).unwrap_or((f64::INFINITY, Vec::new()));
    let final_loss = if last.is_finite() && (batch < count || last <= best.0) {
        last
    } else {
        op.set_params(&best.1)?;
        best.0
    };
    Ok(TrainReport {
        loss_trace: trace,
        final_loss,
    })
}

/// `(Σ ‖G(u) − v‖²_{L²} / Σ ‖v‖²_{L²})^{1/2}` over `data`.
pub fn relative_l2_error(op: &NeuralOperator, data: &[(GridFunction, GridFunction)]) -> Result<f64> {
    if data.is_empty() {
        return Err(invalid("evaluation set is empty"));
    }
    let x = stack(&data.iter().map(|p| &p.0).collect::<Vec<_>>())?;
    let y = stack(&data.iter().map(|p| &p.1).collect::<Vec<_>>())?;
    let out = op.forward_batch(x.view())?;
    let w = op.output_weights();
    let num = weighted_sq(&(&out - &y), &w);
    let den = weighted_sq(&y, &w);
    Ok(if den > 0.0 { (num / den).sqrt() } else { num.sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisFamily;
    use crate::grid::{inner_product, l2_norm};

    fn bases(m: usize, n: usize) -> (Arc<BasisSet>, Arc<BasisSet>) {
        let g = GridSpec::scalar(1, m).unwrap();
        let b = Arc::new(BasisSet::build(g, BasisFamily::Fourier, n).unwrap());
        (b.clone(), b)
    }

    fn random_input(spec: GridSpec, seed: u64) -> GridFunction {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GridFunction::new(spec, (0..spec.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn param_count_examples() {
        let mut s = NoSpec::scalar(1, 2, 3, 2);
        assert_eq!(s.param_bound(), 120);
        s = NoSpec::scalar(1, 1, 1, 0);
        assert_eq!(s.param_bound(), 6);
        let a = NoSpec::scalar(1, 3, 4, 2);
        let b = NoSpec { rank: 6, ..a };
        assert_eq!(b.param_bound() - a.param_bound(), 2 * 36 * 16 - 2 * 9 * 16);
    }

    #[test]
    fn stored_count_matches_parameters() {
        let (i, o) = bases(33, 6);
        for (n, w, l, d) in [(1, 1, 0, 1), (3, 4, 2, 2), (6, 5, 1, 3)] {
            let mut s = NoSpec::scalar(1, n, w, l);
            s.bias_depth = d;
            let op = NeuralOperator::init(s, i.clone(), o.clone(), 1).unwrap();
            assert_eq!(op.params().len(), s.stored_count());
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = NoSpec::scalar(1, 2, 3, 1);
        s.d_in = 4;
        assert!(s.validate().is_err());
        let mut s = NoSpec::scalar(1, 2, 3, 1);
        s.bias_width = 4;
        assert!(s.validate().is_err());
    }

    #[test]
    fn constant_pass_through() {
        let (i, o) = bases(33, 1);
        let s = NoSpec::scalar(1, 1, 1, 0);
        let mut op = NeuralOperator::zeros(s, i, o).unwrap();
        op.c0_mut()[[0, 0]] = 1.0;
        let u = GridFunction::constant(op.input_spec(), 0.37);
        let v = op.apply_k0(&u).unwrap();
        assert!(v.values().iter().all(|x| (x - 0.37).abs() < 1e-14));
        let z = op.apply_k0(&GridFunction::zeros(op.input_spec())).unwrap();
        assert!(z.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rank_one_round_trip_gives_mean() {
        let (i, o) = bases(65, 1);
        let s = NoSpec::scalar(1, 1, 1, 0);
        let mut op = NeuralOperator::zeros(s, i, o).unwrap();
        op.c0_mut()[[0, 0]] = 1.0;
        op.c1_mut()[[0, 0]] = 1.0;
        let u = GridFunction::from_scalar_fn(op.input_spec(), |x| x[0] * x[0] + 0.2).unwrap();
        let mean = inner_product(&u, &GridFunction::constant(op.input_spec(), 1.0)).unwrap();
        let v = op.apply_kl1(&op.apply_k0(&u).unwrap()).unwrap();
        assert!(v.values().iter().all(|x| (x - mean).abs() < 1e-12));
    }

    #[test]
    fn kernel_of_last_layer() {
        let (i, o) = bases(65, 8);
        let s = NoSpec::scalar(1, 3, 3, 0);
        let op = NeuralOperator::init(s, i, o.clone(), 4).unwrap();
        let hidden_spec = o.spec().with_channels(3).unwrap();
        let e = o.element(5);
        let v = GridFunction::from_fn(hidden_spec, |x| {
            let k = (x[0] * 64.0).round() as usize;
            vec![e.values()[k], -2.0 * e.values()[k], 0.5 * e.values()[k]]
        })
        .unwrap();
        assert!(op.apply_kl1(&v).unwrap().sup_norm() < 1e-8);
    }

    fn spectral_norm(a: &Array2<f64>) -> f64 {
        let mut v = Array1::from_elem(a.ncols(), 1.0);
        for _ in 0..500 {
            let w = a.t().dot(&a.dot(&v));
            v = &w / w.dot(&w).sqrt();
        }
        a.dot(&v).dot(&a.dot(&v)).sqrt()
    }

    #[test]
    fn nonlocal_layers_are_bounded_by_coefficient_norms() {
        let (i, o) = bases(65, 8);
        let s = NoSpec::scalar(1, 4, 3, 0);
        let op = NeuralOperator::init(s, i, o, 11).unwrap();
        let (n0, n1) = (spectral_norm(op.c0()), spectral_norm(op.c1()));
        for k in 0..200 {
            let u = random_input(op.input_spec(), k);
            let v = op.apply_k0(&u).unwrap();
            assert!(l2_norm(&v) <= n0 * l2_norm(&u) + 1e-8);
            let hs = op.out_basis().spec().with_channels(3).unwrap();
            let h = random_input(hs, 1000 + k);
            assert!(l2_norm(&op.apply_kl1(&h).unwrap()) <= n1 * l2_norm(&h) + 1e-8);
        }
    }

    #[test]
    fn zero_layers_leave_only_the_output_bias() {
        let (i, o) = bases(33, 4);
        let s = NoSpec::scalar(1, 2, 2, 0);
        let mut op = NeuralOperator::zeros(s, i, o).unwrap();
        op.bias_out_mut().shift_mut()[0] = 0.8;
        let out = op.forward_no(&random_input(op.input_spec(), 3)).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.8));
    }

    #[test]
    fn linearized_identity_configuration() {
        let (i, o) = bases(65, 1);
        let s = NoSpec::scalar(1, 1, 1, 1);
        let mut op = NeuralOperator::zeros(s, i, o).unwrap();
        op.c0_mut()[[0, 0]] = 1e-3;
        op.hidden_mut(0).0[[0, 0]] = 1.0;
        op.c1_mut()[[0, 0]] = 1.0;
        let u = GridFunction::from_scalar_fn(op.input_spec(), |x| (3.0 * x[0]).sin() + 0.5).unwrap();
        let mean = inner_product(&u, &GridFunction::constant(op.input_spec(), 1.0)).unwrap();
        let expect = (1e-3 * mean).tanh();
        let out = op.forward_no(&u).unwrap();
        assert!(out.values().iter().all(|v| (v - expect).abs() < 1e-12));
        assert!(out.values().iter().all(|v| (v - 1e-3 * mean).abs() < 1e-6));
    }

    #[test]
    fn batch_forward_matches_single() {
        let (i, o) = bases(33, 6);
        let mut s = NoSpec::scalar(1, 4, 5, 2);
        s.bias_depth = 2;
        let op = NeuralOperator::init(s, i, o, 2).unwrap();
        let us: Vec<_> = (0..5).map(|k| random_input(op.input_spec(), k)).collect();
        let x = stack(&us.iter().collect::<Vec<_>>()).unwrap();
        let out = op.forward_batch(x.view()).unwrap();
        for (k, u) in us.iter().enumerate() {
            let single = op.forward_no(u).unwrap();
            for (a, b) in single.values().iter().zip(out.row(k)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shard_round_trip() {
        let (i, o) = bases(17, 4);
        let mut s = NoSpec::scalar(1, 3, 4, 2);
        s.bias_depth = 2;
        s.bias_width = 3;
        s.head_mode = HeadMode::LinearHead;
        let op = NeuralOperator::init(s, i.clone(), o.clone(), 9).unwrap();
        let mut buf = Vec::new();
        op.write_shard(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 40 + 8 + 8 * s.stored_count());
        let back = NeuralOperator::read_shard(&mut buf.as_slice(), std::path::Path::new("m"), i, o).unwrap();
        assert_eq!(
            back.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            op.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        buf[60] ^= 0xff;
        let i2 = op.in_basis().clone();
        let o2 = op.out_basis().clone();
        assert!(NeuralOperator::read_shard(&mut &buf[..20], std::path::Path::new("m"), i2, o2).is_err());
    }

    #[test]
    fn zero_target_is_learned() {
        let (i, o) = bases(33, 4);
        let s = NoSpec::scalar(1, 2, 3, 1);
        let mut op = NeuralOperator::init(s, i, o, 1).unwrap();
        let p: Vec<f64> = op.params().iter().map(|v| v * 1e-2).collect();
        op.set_params(&p).unwrap();
        let data: Vec<_> = (0..8)
            .map(|k| (random_input(op.input_spec(), k), GridFunction::zeros(op.output_spec())))
            .collect();
        let r = train_expert(&mut op, &data, &TrainBudget::new(300, 1e-3, 0)).unwrap();
        assert!(r.final_loss < 1e-6, "loss {}", r.final_loss);
    }
}
