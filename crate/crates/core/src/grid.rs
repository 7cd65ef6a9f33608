//! Functions sampled on uniform tensor grids over the unit cube.
//!
//! A [`GridFunction`] stores `m^d · c` values, row-major over the spatial axes
//! (axis 0 slowest) with the channel index fastest. Integrals use the tensor
//! trapezoidal rule, so every inner product below is a weighted Euclidean
//! product with fixed positive weights.

use crate::error::{invalid, shape, Result};

/// Layout of a uniform grid on `[0,1]^dim` carrying `channels` values per node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridSpec {
    pub dim: usize,
    pub points_per_axis: usize,
    pub channels: usize,
}

impl GridSpec {
    pub fn new(dim: usize, points_per_axis: usize, channels: usize) -> Result<Self> {
        if dim == 0 || channels == 0 {
            return Err(invalid("grid dimension and channel count must be positive"));
        }
        if points_per_axis < 2 {
            return Err(invalid("a grid needs at least two points per axis"));
        }
        let nodes = u32::try_from(dim)
            .ok()
            .and_then(|d| points_per_axis.checked_pow(d))
            .and_then(|n| n.checked_mul(channels));
        if nodes.is_none() {
            return Err(invalid("grid size overflows the address space"));
        }
        Ok(Self {
            dim,
            points_per_axis,
            channels,
        })
    }

    /// Scalar grid on `[0,1]^dim`.
    pub fn scalar(dim: usize, points_per_axis: usize) -> Result<Self> {
        Self::new(dim, points_per_axis, 1)
    }

    pub fn with_channels(self, channels: usize) -> Result<Self> {
        Self::new(self.dim, self.points_per_axis, channels)
    }

    /// Number of spatial nodes, `m^d`.
    pub fn nodes(&self) -> usize {
        self.points_per_axis.pow(self.dim as u32)
    }

    /// Number of stored values, `m^d · c`.
    pub fn len(&self) -> usize {
        self.nodes() * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self) -> f64 {
        1.0 / (self.points_per_axis - 1) as f64
    }

    /// Same spatial grid, ignoring channel counts.
    pub fn same_nodes(&self, other: &GridSpec) -> bool {
        self.dim == other.dim && self.points_per_axis == other.points_per_axis
    }

    /// Per-axis multi-index of a node.
    pub fn multi_index(&self, mut node: usize) -> Vec<usize> {
        let m = self.points_per_axis;
        let mut idx = vec![0; self.dim];
        for k in (0..self.dim).rev() {
            idx[k] = node % m;
            node /= m;
        }
        idx
    }

    pub fn coords(&self, node: usize) -> Vec<f64> {
        let h = self.spacing();
        self.multi_index(node)
            .into_iter()
            .map(|i| i as f64 * h)
            .collect()
    }

    /// All node coordinates, node-major: `dim` entries per node.
    pub fn coordinate_table(&self) -> Vec<f64> {
        (0..self.nodes()).flat_map(|n| self.coords(n)).collect()
    }

    /// Tensor trapezoidal weights, one per node; they sum to one.
    pub fn quadrature_weights(&self) -> Vec<f64> {
        let m = self.points_per_axis;
        let h = self.spacing();
        let axis: Vec<f64> = (0..m)
            .map(|i| if i == 0 || i == m - 1 { 0.5 * h } else { h })
            .collect();
        (0..self.nodes())
            .map(|n| self.multi_index(n).iter().map(|&i| axis[i]).product())
            .collect()
    }
}

/// Boolean selection of grid nodes, used for restriction to a subdomain.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    dim: usize,
    points_per_axis: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn full(spec: &GridSpec) -> Self {
        Self {
            dim: spec.dim,
            points_per_axis: spec.points_per_axis,
            bits: vec![true; spec.nodes()],
        }
    }

    pub fn from_fn(spec: &GridSpec, f: impl Fn(&[f64]) -> bool) -> Self {
        let bits = (0..spec.nodes()).map(|n| f(&spec.coords(n))).collect();
        Self {
            dim: spec.dim,
            points_per_axis: spec.points_per_axis,
            bits,
        }
    }

    pub fn from_bits(spec: &GridSpec, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != spec.nodes() {
            return Err(shape(format!(
                "mask has {} entries, grid has {} nodes",
                bits.len(),
                spec.nodes()
            )));
        }
        Ok(Self {
            dim: spec.dim,
            points_per_axis: spec.points_per_axis,
            bits,
        })
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn contains(&self, node: usize) -> bool {
        self.bits[node]
    }

    fn check(&self, spec: &GridSpec) -> Result<()> {
        if self.dim != spec.dim || self.points_per_axis != spec.points_per_axis {
            return Err(shape("mask and function live on different grids"));
        }
        Ok(())
    }
}

/// A vector-valued function sampled on a [`GridSpec`].
///
/// A function produced by [`restrict`] carries the mask of its domain; values
/// outside the mask are stored as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    spec: GridSpec,
    values: Vec<f64>,
    mask: Option<Mask>,
}

impl GridFunction {
    pub fn new(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.len() {
            return Err(shape(format!(
                "expected {} values for {:?}, got {}",
                spec.len(),
                spec,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(crate::Error::Numeric("grid function values".into()));
        }
        Ok(Self {
            spec,
            values,
            mask: None,
        })
    }

    pub fn zeros(spec: GridSpec) -> Self {
        Self {
            spec,
            values: vec![0.0; spec.len()],
            mask: None,
        }
    }

    pub fn constant(spec: GridSpec, value: f64) -> Self {
        Self {
            spec,
            values: vec![value; spec.len()],
            mask: None,
        }
    }

    /// Samples `f(x)` at every node; `f` returns one value per channel.
    pub fn from_fn(spec: GridSpec, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Self> {
        let mut values = Vec::with_capacity(spec.len());
        for n in 0..spec.nodes() {
            let v = f(&spec.coords(n));
            if v.len() != spec.channels {
                return Err(shape("sampling closure returned the wrong channel count"));
            }
            values.extend(v);
        }
        Self::new(spec, values)
    }

    /// Samples a scalar closure on a single-channel grid.
    pub fn from_scalar_fn(spec: GridSpec, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let spec = spec.with_channels(1)?;
        Self::from_fn(spec, |x| vec![f(x)])
    }

    pub(crate) fn from_raw(spec: GridSpec, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), spec.len());
        Self {
            spec,
            values,
            mask: None,
        }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn mask(&self) -> Option<&Mask> {
        self.mask.as_ref()
    }

    pub fn value(&self, node: usize, channel: usize) -> f64 {
        self.values[node * self.spec.channels + channel]
    }

    /// Values of one channel, node-ordered.
    pub fn channel(&self, channel: usize) -> impl Iterator<Item = f64> + '_ {
        self.values
            .iter()
            .skip(channel)
            .step_by(self.spec.channels)
            .copied()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `self + alpha · other`.
    pub fn axpy(&self, alpha: f64, other: &GridFunction) -> Result<GridFunction> {
        same_spec(self, other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + alpha * b)
            .collect();
        Ok(Self::from_raw(self.spec, values))
    }

    pub fn scale(&self, alpha: f64) -> GridFunction {
        Self::from_raw(self.spec, self.values.iter().map(|v| alpha * v).collect())
    }

    pub fn negate(&self) -> GridFunction {
        self.scale(-1.0)
    }

    /// Pointwise map of every stored value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<GridFunction> {
        GridFunction::new(self.spec, self.values.iter().map(|&v| f(v)).collect())
    }
}

fn same_spec(u: &GridFunction, v: &GridFunction) -> Result<()> {
    if u.spec != v.spec {
        return Err(shape(format!(
            "grid functions differ in layout: {:?} vs {:?}",
            u.spec, v.spec
        )));
    }
    Ok(())
}

/// Trapezoidal approximation of `∫_D Σ_c u_c v_c`.
pub fn inner_product(u: &GridFunction, v: &GridFunction) -> Result<f64> {
    same_spec(u, v)?;
    Ok(weighted_dot(&u.spec.quadrature_weights(), u.spec.channels, &u.values, &v.values))
}

pub(crate) fn weighted_dot(weights: &[f64], channels: usize, a: &[f64], b: &[f64]) -> f64 {
    let mut total = 0.0;
    for (n, w) in weights.iter().enumerate() {
        let base = n * channels;
        let mut s = 0.0;
        for c in 0..channels {
            s += a[base + c] * b[base + c];
        }
        total += w * s;
    }
    total
}

pub fn l2_norm(u: &GridFunction) -> f64 {
    weighted_dot(&u.spec.quadrature_weights(), u.spec.channels, &u.values, &u.values)
        .max(0.0)
        .sqrt()
}

/// `‖u − v‖_{L²}`.
pub fn l2_distance(u: &GridFunction, v: &GridFunction) -> Result<f64> {
    same_spec(u, v)?;
    Ok(squared_distance(&u.spec.quadrature_weights(), u.spec.channels, &u.values, &v.values).sqrt())
}

pub(crate) fn squared_distance(weights: &[f64], channels: usize, a: &[f64], b: &[f64]) -> f64 {
    let mut total = 0.0;
    for (n, w) in weights.iter().enumerate() {
        let base = n * channels;
        let mut s = 0.0;
        for c in 0..channels {
            let d = a[base + c] - b[base + c];
            s += d * d;
        }
        total += w * s;
    }
    total
}

/// Restriction to the masked subdomain: values off the mask become zero and
/// the mask is attached to the result.
pub fn restrict(u: &GridFunction, mask: &Mask) -> Result<GridFunction> {
    mask.check(&u.spec)?;
    let c = u.spec.channels;
    let values = u
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| if mask.contains(i / c) { v } else { 0.0 })
        .collect();
    Ok(GridFunction {
        spec: u.spec,
        values,
        mask: Some(mask.clone()),
    })
}

/// Extension by zero from the masked subdomain to the whole cube.
///
/// If `u` already carries a mask it must be `mask`; otherwise `u` is read as
/// defined on `mask` only and its values elsewhere are discarded.
pub fn extend_by_zero(u: &GridFunction, mask: &Mask) -> Result<GridFunction> {
    mask.check(&u.spec)?;
    if let Some(own) = &u.mask {
        if own != mask {
            return Err(shape("function is restricted to a different subdomain"));
        }
    }
    let c = u.spec.channels;
    let values = u
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| if mask.contains(i / c) { v } else { 0.0 })
        .collect();
    Ok(GridFunction::from_raw(u.spec, values))
}

/// Bias operator `g ↦ g − b̂`.
pub fn recenter(u: &GridFunction, b_hat: &GridFunction) -> Result<GridFunction> {
    let mut out = u.axpy(-1.0, b_hat)?;
    out.mask = u.mask.clone();
    Ok(out)
}
