//! Orthonormal bases of `L²([0,1]^d)` tabulated on a grid, with the
//! truncated encoder `u ↦ ((u, φ_n))_{n ≤ N}` and decoder `a ↦ Σ a_n φ_n`.
//!
//! Two families are available. Fourier bases use real tensor-product
//! trigonometric functions and are exactly orthonormal under the periodic
//! trapezoidal rule. Piecewise-polynomial bases use tensor Legendre
//! polynomials on dyadic cells, re-orthonormalized under the discrete
//! quadrature so the Gram matrix is the identity to rounding.
//!
//! Both families put the constant function first.

use std::f64::consts::PI;

use crate::error::{shape, Error, Result};
use crate::grid::{GridFunction, GridSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BasisFamily {
    Fourier,
    PiecewisePoly { max_degree: usize, levels: usize },
}

impl BasisFamily {
    pub fn name(&self) -> &'static str {
        match self {
            BasisFamily::Fourier => "fourier",
            BasisFamily::PiecewisePoly { .. } => "pwpoly",
        }
    }
}

/// `N` orthonormal scalar functions sampled on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet {
    spec: GridSpec,
    family: BasisFamily,
    size: usize,
    /// `size × nodes`, row per basis function.
    table: Vec<f64>,
    /// `table` with each column scaled by its quadrature weight.
    weighted: Vec<f64>,
    /// Laplacian eigenvalue surrogate per basis function.
    kappa: Vec<f64>,
}

impl BasisSet {
    pub fn build(spec: GridSpec, family: BasisFamily, size: usize) -> Result<Self> {
        let spec = spec.with_channels(1)?;
        if size == 0 {
            return Err(Error::Invalid("basis size must be positive".into()));
        }
        let (table, kappa) = match family {
            BasisFamily::Fourier => fourier(&spec, size)?,
            BasisFamily::PiecewisePoly { max_degree, levels } => {
                piecewise(&spec, max_degree, levels, size)?
            }
        };
        Ok(Self::from_parts(spec, family, size, table, kappa))
    }

    fn from_parts(
        spec: GridSpec,
        family: BasisFamily,
        size: usize,
        table: Vec<f64>,
        kappa: Vec<f64>,
    ) -> Self {
        let weights = spec.quadrature_weights();
        let nodes = spec.nodes();
        let weighted = table
            .iter()
            .enumerate()
            .map(|(i, v)| v * weights[i % nodes])
            .collect();
        Self {
            spec,
            family,
            size,
            table,
            weighted,
            kappa,
        }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn family(&self) -> BasisFamily {
        self.family
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn nodes(&self) -> usize {
        self.spec.nodes()
    }

    /// Row-major `N × nodes` table of sampled basis values.
    pub fn table(&self) -> &[f64] {
        &self.table
    }

    /// The table with quadrature weights folded in; `weighted · u` encodes.
    pub fn weighted_table(&self) -> &[f64] {
        &self.weighted
    }

    pub fn row(&self, n: usize) -> &[f64] {
        let nodes = self.nodes();
        &self.table[n * nodes..(n + 1) * nodes]
    }

    pub fn kappa(&self) -> &[f64] {
        &self.kappa
    }

    /// Surrogate Sobolev weight `λ_n(s) = (1 + κ_n)^s`; `λ_1 = 1`.
    pub fn weight(&self, n: usize, s: f64) -> f64 {
        (1.0 + self.kappa[n]).powf(s)
    }

    /// The `n`-th basis function as a grid function.
    pub fn element(&self, n: usize) -> GridFunction {
        GridFunction::from_raw(self.spec, self.row(n).to_vec())
    }

    /// Largest deviation of the discrete Gram matrix from the identity.
    pub fn gram_deviation(&self) -> f64 {
        let nodes = self.nodes();
        let mut worst: f64 = 0.0;
        for i in 0..self.size {
            let wi = &self.weighted[i * nodes..(i + 1) * nodes];
            for j in i..self.size {
                let g: f64 = wi.iter().zip(self.row(j)).map(|(a, b)| a * b).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g - target).abs());
            }
        }
        worst
    }

    fn check(&self, u: &GridFunction) -> Result<()> {
        if !u.spec().same_nodes(&self.spec) {
            return Err(shape(format!(
                "function grid {:?} does not match basis grid {:?}",
                u.spec(),
                self.spec
            )));
        }
        Ok(())
    }

    /// Coefficients `(u_c, φ_n)`, channel-major: `N` entries per channel.
    pub fn encode(&self, u: &GridFunction) -> Result<Vec<f64>> {
        self.check(u)?;
        let c = u.spec().channels;
        let nodes = self.nodes();
        let vals = u.values();
        let mut out = vec![0.0; self.size * c];
        for ch in 0..c {
            for n in 0..self.size {
                let w = &self.weighted[n * nodes..(n + 1) * nodes];
                let mut s = 0.0;
                for (x, wx) in w.iter().enumerate() {
                    s += wx * vals[x * c + ch];
                }
                out[ch * self.size + n] = s;
            }
        }
        Ok(out)
    }

    /// `Σ_n a_n φ_n`, one channel per block of `N` coefficients.
    pub fn decode(&self, coeffs: &[f64]) -> Result<GridFunction> {
        if coeffs.is_empty() || coeffs.len() % self.size != 0 {
            return Err(shape(format!(
                "coefficient vector of length {} is not a multiple of the basis size {}",
                coeffs.len(),
                self.size
            )));
        }
        let c = coeffs.len() / self.size;
        let spec = self.spec.with_channels(c)?;
        let nodes = self.nodes();
        let mut values = vec![0.0; nodes * c];
        for ch in 0..c {
            for n in 0..self.size {
                let a = coeffs[ch * self.size + n];
                if a == 0.0 {
                    continue;
                }
                for (x, phi) in self.row(n).iter().enumerate() {
                    values[x * c + ch] += a * phi;
                }
            }
        }
        GridFunction::new(spec, values)
    }

    /// Orthogonal projection onto the span of the basis.
    pub fn project(&self, u: &GridFunction) -> Result<GridFunction> {
        self.decode(&self.encode(u)?)
    }
}

fn fourier(spec: &GridSpec, size: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = spec.points_per_axis;
    let kmax = m / 4;
    // 1-D factors: (frequency, kind) with kind 0 = constant, 1 = sin, 2 = cos.
    let mut factors = vec![(0usize, 0u8)];
    for k in 1..=kmax {
        factors.push((k, 1));
        factors.push((k, 2));
    }
    let d = spec.dim;
    let total = factors.len().pow(d as u32);
    let mut candidates: Vec<Vec<(usize, u8)>> = (0..total)
        .map(|mut idx| {
            let mut tuple = vec![(0, 0); d];
            for slot in tuple.iter_mut().rev() {
                *slot = factors[idx % factors.len()];
                idx /= factors.len();
            }
            tuple
        })
        .filter(|t| t.iter().map(|(k, _)| k * k).sum::<usize>() <= kmax * kmax)
        .collect();
    candidates.sort_by_key(|t| (t.iter().map(|(k, _)| k * k).sum::<usize>(), t.clone()));
    let mut capacity = candidates.len();
    if d == 1 {
        capacity = capacity.min(m / 2);
    }
    if size > capacity {
        return Err(Error::Capacity(format!(
            "Fourier basis on {m} points per axis resolves at most {capacity} modes, {size} requested"
        )));
    }
    let nodes = spec.nodes();
    let mut table = Vec::with_capacity(size * nodes);
    let mut kappa = Vec::with_capacity(size);
    for tuple in &candidates[..size] {
        for n in 0..nodes {
            let x = spec.coords(n);
            let v: f64 = tuple
                .iter()
                .zip(&x)
                .map(|(&(k, kind), &xi)| {
                    let arg = 2.0 * PI * k as f64 * xi;
                    match kind {
                        0 => 1.0,
                        1 => 2f64.sqrt() * arg.sin(),
                        _ => 2f64.sqrt() * arg.cos(),
                    }
                })
                .product();
            table.push(v);
        }
        let k2: usize = tuple.iter().map(|(k, _)| k * k).sum();
        kappa.push(4.0 * PI * PI * k2 as f64);
    }
    Ok((table, kappa))
}

/// Legendre polynomial `P_n(t)` by the three-term recurrence.
pub(crate) fn legendre(n: usize, t: f64) -> f64 {
    let (mut p0, mut p1) = (1.0, t);
    if n == 0 {
        return p0;
    }
    for k in 1..n {
        let kf = k as f64;
        let p2 = ((2.0 * kf + 1.0) * t * p1 - kf * p0) / (kf + 1.0);
        p0 = p1;
        p1 = p2;
    }
    p1
}

/// Normalized Legendre polynomial on `[a, b]`, halved on interior cell edges
/// so a node shared by two cells carries the mean of both one-sided limits.
fn cell_legendre(degree: usize, a: f64, b: f64, x: f64) -> f64 {
    let eps = 1e-12;
    if x < a - eps || x > b + eps {
        return 0.0;
    }
    let t = (2.0 * (x - a) / (b - a) - 1.0).clamp(-1.0, 1.0);
    let v = legendre(degree, t) * ((2 * degree + 1) as f64 / (b - a)).sqrt();
    let on_left = (x - a).abs() <= eps && a > eps;
    let on_right = (x - b).abs() <= eps && b < 1.0 - eps;
    if on_left || on_right {
        0.5 * v
    } else {
        v
    }
}

fn piecewise(
    spec: &GridSpec,
    max_degree: usize,
    levels: usize,
    size: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = spec.dim;
    let nodes = spec.nodes();
    let weights = spec.quadrature_weights();
    let coords = spec.coordinate_table();

    let mut degrees: Vec<Vec<usize>> = (0..(max_degree + 1).pow(d as u32))
        .map(|mut idx| {
            let mut a = vec![0; d];
            for slot in a.iter_mut().rev() {
                *slot = idx % (max_degree + 1);
                idx /= max_degree + 1;
            }
            a
        })
        .collect();
    degrees.sort_by_key(|a| (a.iter().sum::<usize>(), a.clone()));

    let mut table: Vec<f64> = Vec::with_capacity(size * nodes);
    let mut kappa = Vec::with_capacity(size);
    let dot = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).zip(&weights).map(|((x, y), w)| x * y * w).sum()
    };

    'outer: for level in 0..=levels {
        let cells_per_axis = 1usize << level;
        let width = 1.0 / cells_per_axis as f64;
        for cell in 0..cells_per_axis.pow(d as u32) {
            let mut cell_idx = vec![0; d];
            let mut rest = cell;
            for slot in cell_idx.iter_mut().rev() {
                *slot = rest % cells_per_axis;
                rest /= cells_per_axis;
            }
            for alpha in &degrees {
                let mut v: Vec<f64> = (0..nodes)
                    .map(|n| {
                        (0..d)
                            .map(|k| {
                                let a = cell_idx[k] as f64 * width;
                                cell_legendre(alpha[k], a, a + width, coords[n * d + k])
                            })
                            .product()
                    })
                    .collect();
                if table.is_empty() {
                    // The constant function is kept exactly.
                    table.extend(v);
                    kappa.push(0.0);
                    continue;
                }
                let norm0 = dot(&v, &v).sqrt();
                if norm0 == 0.0 {
                    continue;
                }
                for _pass in 0..2 {
                    for j in 0..table.len() / nodes {
                        let row = &table[j * nodes..(j + 1) * nodes];
                        let p = dot(&v, row);
                        for (vi, r) in v.iter_mut().zip(row) {
                            *vi -= p * r;
                        }
                    }
                }
                let norm = dot(&v, &v).sqrt();
                if norm < 1e-8 * norm0 {
                    continue;
                }
                table.extend(v.iter().map(|x| x / norm));
                let deg = alpha.iter().sum::<usize>() as f64;
                kappa.push(4f64.powi(level as i32) * (deg + 1.0).powi(2));
                if kappa.len() == size {
                    break 'outer;
                }
            }
        }
    }
    if kappa.len() < size {
        return Err(Error::Capacity(format!(
            "piecewise polynomials of degree {max_degree} on {levels} dyadic levels give {} \
             independent functions on this grid, {size} requested",
            kappa.len()
        )));
    }
    Ok((table, kappa))
}
