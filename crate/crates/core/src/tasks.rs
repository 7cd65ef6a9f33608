//! Benchmark operators and the Robin-coefficient problem on the unit square.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::basis::{BasisFamily, BasisSet};
use crate::error::{invalid, shape, Error, Result};
use crate::grid::{l2_distance, l2_norm, GridFunction, GridSpec};
use crate::sobolev::{sample_with_rng, SobolevBallSpec};

/// Pointwise nonlinearities for composition operators `u ↦ g∘u`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Nonlinearity {
    Tanh,
    Sin,
    Square,
    Cube,
}

impl Nonlinearity {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => v.tanh(),
            Nonlinearity::Sin => v.sin(),
            Nonlinearity::Square => v * v,
            Nonlinearity::Cube => v * v * v,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Nonlinearity::Tanh => "tanh",
            Nonlinearity::Sin => "sin",
            Nonlinearity::Square => "square",
            Nonlinearity::Cube => "cube",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Nonlinearity::Tanh),
            "sin" => Some(Nonlinearity::Sin),
            "square" => Some(Nonlinearity::Square),
            "cube" => Some(Nonlinearity::Cube),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TaskKind {
    /// `u ↦ u²`.
    Square,
    /// `u ↦ ∫₀^x u` along the first axis.
    Antiderivative,
    Nemytskii(Nonlinearity),
    /// Boundary trace `g` on the top edge ↦ Robin coefficient `q` on the bottom edge.
    RobinInverse,
}

impl TaskKind {
    pub fn name(&self) -> String {
        match self {
            TaskKind::Square => "square".into(),
            TaskKind::Antiderivative => "antiderivative".into(),
            TaskKind::Nemytskii(g) => format!("nemytskii-{}", g.name()),
            TaskKind::RobinInverse => "robin".into(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "square" => Some(TaskKind::Square),
            "antiderivative" => Some(TaskKind::Antiderivative),
            "robin" => Some(TaskKind::RobinInverse),
            _ => s
                .strip_prefix("nemytskii-")
                .and_then(Nonlinearity::parse)
                .map(TaskKind::Nemytskii),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Input grid; ignored for the Robin task, whose traces live on `robin.n` points.
    pub grid: GridSpec,
    pub count: usize,
    pub ball: SobolevBallSpec,
    pub sampling_family: BasisFamily,
    /// Number of basis elements the sampler draws coefficients for.
    pub sampling_size: usize,
    pub seed: u64,
    pub robin: RobinConfig,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, grid: GridSpec, count: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            kind,
            grid,
            count,
            ball: SobolevBallSpec::new(2.0, 1.0, 0.25)?,
            sampling_family: BasisFamily::Fourier,
            sampling_size: 64.min(grid.points_per_axis / 2),
            seed,
            robin: RobinConfig::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(invalid("sample count must be at least 1"));
        }
        if self.kind == TaskKind::Antiderivative && self.grid.dim != 1 {
            return Err(invalid("the antiderivative task is defined on one-dimensional grids"));
        }
        if self.kind != TaskKind::RobinInverse && self.grid.channels != 1 {
            return Err(invalid("synthetic tasks act on scalar functions"));
        }
        self.robin.validate()
    }
}

/// Applies the synthetic task map to one input.
pub fn apply_task(kind: TaskKind, u: &GridFunction) -> Result<GridFunction> {
    match kind {
        TaskKind::Square => u.map(|v| v * v),
        TaskKind::Nemytskii(g) => u.map(|v| g.apply(v)),
        TaskKind::Antiderivative => antiderivative(u),
        TaskKind::RobinInverse => Err(invalid("the Robin task has no closed-form map")),
    }
}

/// Cumulative trapezoid rule along the single axis.
pub fn antiderivative(u: &GridFunction) -> Result<GridFunction> {
    let spec = *u.spec();
    if spec.dim != 1 {
        return Err(shape("antiderivative needs a one-dimensional grid"));
    }
    let (m, c) = (spec.points_per_axis, spec.channels);
    let h = spec.spacing();
    let v = u.values();
    let mut out = vec![0.0; v.len()];
    for k in 1..m {
        for ch in 0..c {
            out[k * c + ch] = out[(k - 1) * c + ch] + 0.5 * h * (v[(k - 1) * c + ch] + v[k * c + ch]);
        }
    }
    GridFunction::new(spec, out)
}

pub type Pair = (GridFunction, GridFunction);

/// Input/output pairs for `spec`, deterministic in `spec.seed`.
pub fn make_dataset(spec: &TaskSpec) -> Result<Vec<Pair>> {
    spec.validate()?;
    if spec.kind == TaskKind::RobinInverse {
        return Ok(make_inverse_dataset(&spec.robin, spec.count, spec.seed)?.pairs);
    }
    let basis = BasisSet::build(spec.grid, spec.sampling_family, spec.sampling_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.count)
        .map(|_| {
            let u = sample_with_rng(&spec.ball, &basis, 1, &mut rng)?;
            let v = apply_task(spec.kind, &u)?;
            Ok((u, v))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobinConfig {
    /// Points per side of the square grid.
    pub n: usize,
    /// Reference coefficient `q₀` (constant on the bottom edge).
    pub q0: f64,
    pub q_min: f64,
    /// Upper bound on `‖q − q₀‖_{L²(Γ)}` for sampled coefficients, relative to `q₀`.
    pub perturbation: f64,
    /// Number of Fourier modes parameterizing `q − q₀`.
    pub coefficients: usize,
    /// Normal flux on the top edge, one value per node; `None` means `f ≡ 1`.
    pub top_flux: Option<Vec<f64>>,
}

impl Default for RobinConfig {
    fn default() -> Self {
        Self {
            n: 65,
            q0: 1.0,
            q_min: 0.1,
            perturbation: 0.2,
            coefficients: 8,
            top_flux: None,
        }
    }
}

impl RobinConfig {
    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 3 {
            return Err(invalid("the Robin grid needs at least 3 points per side"));
        }
        if !(self.q_min > 0.0 && self.q0 >= self.q_min) {
            return Err(invalid("need q0 ≥ q_min > 0"));
        }
        if !(self.perturbation >= 0.0) {
            return Err(invalid("perturbation scale must be non-negative"));
        }
        if self.coefficients == 0 || self.coefficients > self.n / 2 {
            return Err(invalid("coefficient count must lie in 1..=n/2"));
        }
        if let Some(f) = &self.top_flux {
            if f.len() != self.n {
                return Err(shape("top flux needs one value per edge node"));
            }
        }
        Ok(())
    }

    /// One-dimensional grid carrying traces and coefficients.
    pub fn edge_spec(&self) -> GridSpec {
        GridSpec::scalar(1, self.n).expect("validated edge grid")
    }

    pub fn domain_spec(&self) -> GridSpec {
        GridSpec::scalar(2, self.n).expect("validated domain grid")
    }

    fn flux(&self, i: usize) -> f64 {
        self.top_flux.as_ref().map_or(1.0, |f| f[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobinSolution {
    /// Solution on the square; axis 0 is `y`, axis 1 is `x`.
    pub u: GridFunction,
    /// Trace on the top edge `y = 1`.
    pub g: GridFunction,
    pub iterations: usize,
    pub residual: f64,
    /// Whether interior values stay within the boundary extrema.
    pub max_principle: bool,
}

const CG_TOL: f64 = 1e-10;

/// Solves `Δu = 0` with `−∂_y u + q u = 0` on `y = 0`, `∂_y u = f` on
/// `y = 1` and zero flux on `x = 0, 1`.
///
/// Five-point differences with ghost nodes on every edge. Boundary rows are
/// halved (quartered at corners), which makes the system symmetric positive
/// definite, and conjugate gradients run to relative residual `1e-10`.
pub fn solve_robin(cfg: &RobinConfig, q: &GridFunction) -> Result<RobinSolution> {
    cfg.validate()?;
    let n = cfg.n;
    if *q.spec() != cfg.edge_spec() {
        return Err(shape("q must live on the bottom-edge grid"));
    }
    if q.values().iter().any(|&v| v < cfg.q_min) {
        return Err(invalid(format!("q falls below q_min = {}", cfg.q_min)));
    }
    let h = 1.0 / (n - 1) as f64;
    let qv = q.values();
    let row_scale = |i: usize, j: usize| -> f64 {
        let ex = i == 0 || i == n - 1;
        let ey = j == 0 || j == n - 1;
        match (ex, ey) {
            (true, true) => 0.25,
            (true, false) | (false, true) => 0.5,
            _ => 1.0,
        }
    };
    let apply = |u: &[f64], out: &mut [f64]| {
        for j in 0..n {
            for i in 0..n {
                let k = j * n + i;
                let mut acc = 4.0 * u[k];
                // ghost reflection doubles the inward neighbour on each boundary side
                let west = if i == 0 { u[k + 1] } else { u[k - 1] };
                let east = if i == n - 1 { u[k - 1] } else { u[k + 1] };
                let south = if j == 0 { u[k + n] } else { u[k - n] };
                let north = if j == n - 1 { u[k - n] } else { u[k + n] };
                acc -= west + east + south + north;
                if j == 0 {
                    acc += 2.0 * h * qv[i] * u[k];
                }
                out[k] = row_scale(i, j) * acc;
            }
        }
    };
    let mut rhs = vec![0.0; n * n];
    for i in 0..n {
        let k = (n - 1) * n + i;
        rhs[k] = row_scale(i, n - 1) * 2.0 * h * cfg.flux(i);
    }
    let (x, iterations, residual) = conjugate_gradient(apply, &rhs, 20 * n * n)?;
    let u = GridFunction::new(cfg.domain_spec(), x)?;
    let g = GridFunction::new(cfg.edge_spec(), u.values()[(n - 1) * n..].to_vec())?;
    let max_principle = check_max_principle(u.values(), n);
    Ok(RobinSolution {
        u,
        g,
        iterations,
        residual,
        max_principle,
    })
}

fn check_max_principle(u: &[f64], n: usize) -> bool {
    let (mut bmin, mut bmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut imin, mut imax) = (f64::INFINITY, f64::NEG_INFINITY);
    for j in 0..n {
        for i in 0..n {
            let v = u[j * n + i];
            if i == 0 || j == 0 || i == n - 1 || j == n - 1 {
                bmin = bmin.min(v);
                bmax = bmax.max(v);
            } else {
                imin = imin.min(v);
                imax = imax.max(v);
            }
        }
    }
    let tol = 1e-8 * bmax.abs().max(bmin.abs()).max(1.0);
    n < 3 || (imax <= bmax + tol && imin >= bmin - tol)
}

fn conjugate_gradient(apply: impl Fn(&[f64], &mut [f64]), b: &[f64], max_iter: usize) -> Result<(Vec<f64>, usize, f64)> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let len = b.len();
    let bnorm = dot(b, b).sqrt();
    let mut x = vec![0.0; len];
    if bnorm == 0.0 {
        return Ok((x, 0, 0.0));
    }
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; len];
    let mut rr = dot(&r, &r);
    for it in 1..=max_iter {
        apply(&p, &mut ap);
        let alpha = rr / dot(&p, &ap);
        for i in 0..len {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        let rel = rr_new.sqrt() / bnorm;
        if !rel.is_finite() {
            return Err(Error::Solver {
                iterations: it,
                residual: rel,
            });
        }
        if rel < CG_TOL {
            return Ok((x, it, rel));
        }
        let beta = rr_new / rr;
        for i in 0..len {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    Err(Error::Solver {
        iterations: max_iter,
        residual: rr.sqrt() / bnorm,
    })
}

/// Draws `q = q₀ + Σ_k a_k ψ_k` over the first `cfg.coefficients` Fourier
/// modes with `‖q − q₀‖ = perturbation·q₀·U(0,1)`, rejecting draws below `q_min`.
pub fn sample_q(cfg: &RobinConfig, rng: &mut impl Rng) -> Result<GridFunction> {
    let basis = BasisSet::build(cfg.edge_spec(), BasisFamily::Fourier, cfg.coefficients)?;
    sample_q_with(cfg, &basis, rng)
}

fn sample_q_with(cfg: &RobinConfig, basis: &BasisSet, rng: &mut impl Rng) -> Result<GridFunction> {
    for _ in 0..1000 {
        let mut a: Vec<f64> = (0..basis.len()).map(|_| rng.sample(StandardNormal)).collect();
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let radius = cfg.perturbation * cfg.q0 * rng.random::<f64>();
        a.iter_mut().for_each(|v| *v *= if norm > 0.0 { radius / norm } else { 0.0 });
        let q = basis.decode(&a)?.map(|v| v + cfg.q0)?;
        if q.values().iter().all(|&v| v >= cfg.q_min) {
            return Ok(q);
        }
    }
    Err(invalid("could not draw a coefficient above q_min; reduce the perturbation scale"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `bins + 1` increasing edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins over `[min, max]` of `values`.
    pub fn of(values: &[f64], bins: usize) -> Self {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if values.is_empty() || bins == 0 {
            return Self {
                edges: vec![],
                counts: vec![],
            };
        }
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let edges = (0..=bins).map(|k| lo + k as f64 * width).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let k = (((v - lo) / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
        Self { edges, counts }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InverseDataset {
    /// `(g on the top edge, q on the bottom edge)`.
    pub pairs: Vec<Pair>,
    /// Pairwise `L²` distances between traces.
    pub trace_distances: Histogram,
    /// Pairwise distances between the corresponding coefficients.
    pub coefficient_distances: Histogram,
}

/// Samples coefficients, solves the forward problem, and pairs each trace
/// with its coefficient.
pub fn make_inverse_dataset(cfg: &RobinConfig, count: usize, seed: u64) -> Result<InverseDataset> {
    cfg.validate()?;
    let basis = BasisSet::build(cfg.edge_spec(), BasisFamily::Fourier, cfg.coefficients)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let q = sample_q_with(cfg, &basis, &mut rng)?;
        let sol = solve_robin(cfg, &q)?;
        pairs.push((sol.g, q));
    }
    let mut td = Vec::new();
    let mut qd = Vec::new();
    for a in 0..pairs.len() {
        for b in a + 1..pairs.len() {
            td.push(l2_distance(&pairs[a].0, &pairs[b].0)?);
            qd.push(l2_distance(&pairs[a].1, &pairs[b].1)?);
        }
    }
    Ok(InverseDataset {
        pairs,
        trace_distances: Histogram::of(&td, 10),
        coefficient_distances: Histogram::of(&qd, 10),
    })
}

/// Exact solution for constant `q` and top flux `1 + a·cos(πx)`.
pub fn separable_solution(q: f64, a: f64, x: f64, y: f64) -> f64 {
    let amp = a / (PI * PI.sinh() + q * PI.cosh());
    let b = q * amp / PI;
    1.0 / q + y + (PI * x).cos() * (amp * (PI * y).cosh() + b * (PI * y).sinh())
}

/// Max-norm error of the FD solution against [`separable_solution`].
pub fn separable_error(n: usize, q: f64, a: f64) -> Result<f64> {
    let cfg = RobinConfig {
        n,
        top_flux: Some(
            (0..n)
                .map(|i| 1.0 + a * (PI * i as f64 / (n - 1) as f64).cos())
                .collect(),
        ),
        q0: q,
        q_min: q.min(0.1),
        ..RobinConfig::default()
    };
    let qf = GridFunction::constant(cfg.edge_spec(), q);
    let sol = solve_robin(&cfg, &qf)?;
    let spec = cfg.domain_spec();
    let mut worst = 0.0f64;
    for k in 0..spec.nodes() {
        let c = spec.coords(k);
        let exact = separable_solution(q, a, c[1], c[0]);
        worst = worst.max((sol.u.values()[k] - exact).abs());
    }
    Ok(worst)
}

/// `‖u‖` helper used in reports.
pub fn norm(u: &GridFunction) -> f64 {
    l2_norm(u)
}
