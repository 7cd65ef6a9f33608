//! Routing trees over function samples.
//!
//! Level `ℓ = 0..=h` holds `v^ℓ` centers found by k-means over the sample
//! cloud and snapped to distinct samples. Each center hangs under its
//! nearest center one level up. Inputs descend greedily, moving to the
//! nearest child at each level; ties go to the smaller index everywhere.
//!
//! # File layout
//!
//! ```text
//! b"MONOTREE"
//! u32 valency, u32 height, f64 target_radius
//! u32 dim, u32 points_per_axis, u32 channels
//! u32 level count, then per level: u32 node count, then per node:
//!   u32 sample index, u32 parent (u32::MAX for the root),
//!   u32 child count, u32 × children,
//!   f64 × grid length (center values),
//!   u32 has_mlp, [MLP (see `nn`), f64 sup error]
//! ```

use std::io::{Read, Write};

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape, Error, Result};
use crate::grid::{l2_distance, GridFunction, GridSpec};
use crate::io::{expect_magic, get_f64, get_f64s, get_u32, put_f64s, put_u32};
use crate::nn::{fit_function, Activation, HeadMode, Mlp, MlpSpec};
use crate::optim::TrainBudget;

pub const TREE_MAGIC: &[u8; 8] = b"MONOTREE";
const KMEANS_RESTARTS: usize = 20;
const LLOYD_ITERATIONS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeSpec {
    pub valency: usize,
    /// Number of edges from the root to the deepest level; 0 is the single-node tree.
    pub height: usize,
    pub target_radius: f64,
}

impl TreeSpec {
    pub fn new(valency: usize, height: usize, target_radius: f64) -> Result<Self> {
        if valency < 2 {
            return Err(invalid("valency must be at least 2"));
        }
        if !(target_radius > 0.0) {
            return Err(invalid("target radius must be positive"));
        }
        valency
            .checked_pow(height as u32)
            .ok_or_else(|| Error::Capacity("tree level sizes overflow".into()))?;
        Ok(Self {
            valency,
            height,
            target_radius,
        })
    }

    /// The single-node tree.
    pub fn trivial() -> Self {
        Self {
            valency: 2,
            height: 0,
            target_radius: 1.0,
        }
    }

    pub fn level_size(&self, level: usize) -> usize {
        self.valency.pow(level as u32)
    }

    pub fn max_leaves(&self) -> usize {
        self.level_size(self.height)
    }
}

/// An MLP stand-in for a node center, fitted on the grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedCenter {
    pub net: Mlp,
    pub sup_error: f64,
    /// The net evaluated on the grid.
    pub values: GridFunction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub center: GridFunction,
    /// Index of the sample the center was snapped to.
    pub sample: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub compressed: Option<CompressedCenter>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTree {
    spec: TreeSpec,
    grid: GridSpec,
    levels: Vec<Vec<TreeNode>>,
    leaves: Vec<(usize, usize)>,
}

/// Result of one greedy descent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Route {
    /// Index into [`RoutingTree::leaves`].
    pub leaf: usize,
    /// Node index visited at each level, root first.
    pub path: Vec<usize>,
    /// Distance evaluations performed.
    pub distance_queries: usize,
}

impl RoutingTree {
    /// A root-only tree centered at `center`.
    pub fn trivial(center: GridFunction) -> Self {
        let grid = *center.spec();
        let node = TreeNode {
            center,
            sample: 0,
            parent: None,
            children: vec![],
            compressed: None,
        };
        Self::from_levels(TreeSpec::trivial(), grid, vec![vec![node]])
    }

    fn from_levels(spec: TreeSpec, grid: GridSpec, levels: Vec<Vec<TreeNode>>) -> Self {
        let leaves = levels
            .iter()
            .enumerate()
            .flat_map(|(l, nodes)| {
                nodes
                    .iter()
                    .enumerate()
                    .filter(|(_, n)| n.children.is_empty())
                    .map(move |(i, _)| (l, i))
            })
            .collect();
        Self {
            spec,
            grid,
            levels,
            leaves,
        }
    }

    pub fn spec(&self) -> &TreeSpec {
        &self.spec
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn levels(&self) -> &[Vec<TreeNode>] {
        &self.levels
    }

    pub fn node(&self, level: usize, index: usize) -> &TreeNode {
        &self.levels[level][index]
    }

    /// Childless nodes as `(level, index)`, ordered by level then index.
    pub fn leaves(&self) -> &[(usize, usize)] {
        &self.leaves
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    pub fn leaf_center(&self, leaf: usize) -> &GridFunction {
        let (l, i) = self.leaves[leaf];
        &self.levels[l][i].center
    }

    /// Number of levels a descent visits at most; 1 for the single-node tree.
    pub fn routing_complexity(&self) -> usize {
        self.levels.len()
    }

    /// Scalars held by all node centers (grid values, or MLP parameters when compressed).
    pub fn payload(&self) -> usize {
        self.levels
            .iter()
            .flatten()
            .map(|n| match &n.compressed {
                Some(c) => c.net.params().len(),
                None => n.center.values().len(),
            })
            .sum()
    }

    pub fn is_compressed(&self) -> bool {
        self.levels.iter().flatten().all(|n| n.compressed.is_some())
    }

    fn reference<'a>(&self, node: &'a TreeNode, compressed: bool) -> Result<&'a GridFunction> {
        if !compressed {
            return Ok(&node.center);
        }
        node.compressed
            .as_ref()
            .map(|c| &c.values)
            .ok_or_else(|| invalid("tree has not been compressed"))
    }

    /// Greedy descent comparing against raw centers.
    pub fn route(&self, u: &GridFunction) -> Result<Route> {
        self.route_with(u, false)
    }

    /// Greedy descent; `compressed` compares against the MLP-evaluated centers.
    pub fn route_with(&self, u: &GridFunction, compressed: bool) -> Result<Route> {
        if !u.spec().same_nodes(&self.grid) || u.spec().channels != self.grid.channels {
            return Err(shape("input does not match the tree grid"));
        }
        let mut level = 0;
        let mut index = 0;
        let mut path = vec![0];
        let mut queries = 0;
        loop {
            let node = &self.levels[level][index];
            if node.children.is_empty() {
                break;
            }
            let mut best = (f64::INFINITY, usize::MAX);
            for &c in &node.children {
                let d = l2_distance(u, self.reference(&self.levels[level + 1][c], compressed)?)?;
                queries += 1;
                if d < best.0 || (d == best.0 && c < best.1) {
                    best = (d, c);
                }
            }
            level += 1;
            index = best.1;
            path.push(index);
        }
        let leaf = self
            .leaves
            .binary_search(&(level, index))
            .expect("descent ends at a childless node");
        Ok(Route {
            leaf,
            path,
            distance_queries: queries,
        })
    }

    /// Nearest leaf by exhaustive search, with its distance.
    pub fn nearest_leaf(&self, u: &GridFunction) -> Result<(usize, f64)> {
        let mut best = (usize::MAX, f64::INFINITY);
        for k in 0..self.leaves.len() {
            let d = l2_distance(u, self.leaf_center(k))?;
            if d < best.1 {
                best = (k, d);
            }
        }
        Ok(best)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(TREE_MAGIC)?;
        put_u32(w, self.spec.valency)?;
        put_u32(w, self.spec.height)?;
        put_f64s(w, &[self.spec.target_radius])?;
        put_u32(w, self.grid.dim)?;
        put_u32(w, self.grid.points_per_axis)?;
        put_u32(w, self.grid.channels)?;
        put_u32(w, self.levels.len())?;
        for level in &self.levels {
            put_u32(w, level.len())?;
            for n in level {
                put_u32(w, n.sample)?;
                put_u32(w, n.parent.map_or(u32::MAX as usize, |p| p))?;
                put_u32(w, n.children.len())?;
                for &c in &n.children {
                    put_u32(w, c)?;
                }
                put_f64s(w, n.center.values())?;
                match &n.compressed {
                    None => put_u32(w, 0)?,
                    Some(c) => {
                        put_u32(w, 1)?;
                        c.net.write_to(w)?;
                        put_f64s(w, &[c.sup_error])?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read, path: &std::path::Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        expect_magic(r, TREE_MAGIC, path)?;
        let valency = get_u32(r)?;
        let height = get_u32(r)?;
        let radius = get_f64(r)?;
        let spec = TreeSpec::new(valency, height, radius).map_err(|e| bad(&e.to_string()))?;
        let grid = GridSpec::new(get_u32(r)?, get_u32(r)?, get_u32(r)?).map_err(|e| bad(&e.to_string()))?;
        let nlevels = get_u32(r)?;
        if nlevels == 0 || nlevels > height + 1 {
            return Err(bad("level count disagrees with the height"));
        }
        let mut levels = Vec::with_capacity(nlevels);
        for l in 0..nlevels {
            let count = get_u32(r)?;
            if count > spec.level_size(l) {
                return Err(bad("level holds more nodes than the valency allows"));
            }
            let mut nodes = Vec::with_capacity(count);
            for _ in 0..count {
                let sample = get_u32(r)?;
                let parent = match get_u32(r)? {
                    p if p == u32::MAX as usize => None,
                    p => Some(p),
                };
                let nc = get_u32(r)?;
                let children = (0..nc).map(|_| get_u32(r)).collect::<std::io::Result<Vec<_>>>()?;
                let center = GridFunction::new(grid, get_f64s(r, grid.len())?)?;
                let compressed = match get_u32(r)? {
                    0 => None,
                    1 => {
                        let net = Mlp::read_from(r)?;
                        let sup_error = get_f64(r)?;
                        let values = evaluate_on_grid(&net, &grid)?;
                        Some(CompressedCenter {
                            net,
                            sup_error,
                            values,
                        })
                    }
                    _ => return Err(bad("invalid compression flag")),
                };
                nodes.push(TreeNode {
                    center,
                    sample,
                    parent,
                    children,
                    compressed,
                });
            }
            levels.push(nodes);
        }
        for l in 0..levels.len() {
            for n in &levels[l] {
                let bad_child = n.children.iter().any(|&c| l + 1 >= levels.len() || c >= levels[l + 1].len());
                let bad_parent = match n.parent {
                    None => l != 0,
                    Some(p) => l == 0 || p >= levels[l - 1].len(),
                };
                if bad_child || bad_parent {
                    return Err(bad("inconsistent parent/child tables"));
                }
            }
        }
        Ok(Self::from_levels(spec, grid, levels))
    }
}

/// Samples as rows scaled by the square-root quadrature weights, so plain
/// Euclidean geometry on rows is the `L²` geometry of the functions.
struct Cloud {
    rows: Array2<f64>,
    norms: Array1<f64>,
}

impl Cloud {
    fn new(samples: &[GridFunction]) -> Self {
        let spec = samples[0].spec();
        let c = spec.channels;
        let sw: Vec<f64> = spec
            .quadrature_weights()
            .iter()
            .flat_map(|w| std::iter::repeat_n(w.sqrt(), c))
            .collect();
        let mut rows = Array2::zeros((samples.len(), spec.len()));
        for (mut row, s) in rows.rows_mut().into_iter().zip(samples) {
            for ((r, v), w) in row.iter_mut().zip(s.values()).zip(&sw) {
                *r = v * w;
            }
        }
        let norms = rows.map_axis(Axis(1), |r| r.dot(&r));
        Self { rows, norms }
    }

    fn len(&self) -> usize {
        self.rows.nrows()
    }

    /// Squared distances from every sample (rows) to every center (columns).
    fn distances(&self, centers: &Array2<f64>) -> Array2<f64> {
        let cn = centers.map_axis(Axis(1), |r| r.dot(&r));
        let mut d = self.rows.dot(&centers.t());
        d.mapv_inplace(|v| -2.0 * v);
        d += &self.norms.view().insert_axis(Axis(1));
        d += &cn.view().insert_axis(Axis(0));
        d.mapv_inplace(|v| v.max(0.0));
        d
    }

    fn seed_plus_plus(&self, k: usize, rng: &mut impl Rng) -> Array2<f64> {
        let n = self.len();
        let mut chosen = vec![rng.random_range(0..n)];
        let mut d2 = self.distances(&self.rows.select(Axis(0), &chosen)).column(0).to_owned();
        while chosen.len() < k {
            let total: f64 = d2.sum();
            let next = if total > 0.0 {
                let mut t = rng.random::<f64>() * total;
                let mut pick = n - 1;
                for (i, &v) in d2.iter().enumerate() {
                    if t < v {
                        pick = i;
                        break;
                    }
                    t -= v;
                }
                pick
            } else {
                rng.random_range(0..n)
            };
            chosen.push(next);
            let dn = self.distances(&self.rows.select(Axis(0), &[next]));
            for (a, b) in d2.iter_mut().zip(dn.column(0)) {
                *a = a.min(*b);
            }
        }
        self.rows.select(Axis(0), &chosen)
    }

    /// Lloyd iterations from `centers`; returns final centers and energy.
    fn lloyd(&self, mut centers: Array2<f64>) -> (Array2<f64>, f64) {
        let (n, k) = (self.len(), centers.nrows());
        let mut assign = vec![usize::MAX; n];
        let mut energy = f64::INFINITY;
        for _ in 0..LLOYD_ITERATIONS {
            let d = self.distances(&centers);
            let mut changed = false;
            energy = 0.0;
            let mut own = vec![0.0; n];
            for (i, row) in d.rows().into_iter().enumerate() {
                let (j, v) = argmin(row.iter().copied());
                if assign[i] != j {
                    assign[i] = j;
                    changed = true;
                }
                own[i] = v;
                energy += v;
            }
            if !changed {
                break;
            }
            let mut sums = Array2::<f64>::zeros(centers.dim());
            let mut counts = vec![0usize; k];
            for (i, &j) in assign.iter().enumerate() {
                sums.row_mut(j).scaled_add(1.0, &self.rows.row(i));
                counts[j] += 1;
            }
            let mut taken = vec![false; n];
            for j in 0..k {
                if counts[j] > 0 {
                    centers.row_mut(j).assign(&(&sums.row(j) / counts[j] as f64));
                } else {
                    // re-seed an empty cluster at the worst-served sample
                    let far = (0..n)
                        .filter(|&i| !taken[i])
                        .fold((usize::MAX, -1.0), |b, i| if own[i] > b.1 { (i, own[i]) } else { b })
                        .0;
                    taken[far] = true;
                    own[far] = 0.0;
                    centers.row_mut(j).assign(&self.rows.row(far));
                }
            }
        }
        (centers, energy)
    }

    fn kmeans(&self, k: usize, rng: &mut impl Rng) -> Array2<f64> {
        let mut best: Option<(Array2<f64>, f64)> = None;
        for _ in 0..KMEANS_RESTARTS {
            let init = self.seed_plus_plus(k, rng);
            let (c, e) = self.lloyd(init);
            if best.as_ref().is_none_or(|b| e < b.1) {
                best = Some((c, e));
            }
        }
        best.unwrap().0
    }
}

/// First index of the smallest value.
fn argmin(values: impl Iterator<Item = f64>) -> (usize, f64) {
    values
        .enumerate()
        .fold((usize::MAX, f64::INFINITY), |b, (i, v)| if v < b.1 { (i, v) } else { b })
}

/// Builds the tree level by level from `samples`.
pub fn build_tree(samples: &[GridFunction], spec: TreeSpec, seed: u64) -> Result<RoutingTree> {
    let first = samples.first().ok_or_else(|| invalid("cannot build a tree without samples"))?;
    let grid = *first.spec();
    if samples.iter().any(|s| s.spec() != &grid) {
        return Err(shape("samples must share one grid"));
    }
    if samples.len() < spec.max_leaves() {
        return Err(Error::Capacity(format!(
            "{} samples cannot supply {} distinct leaf centers",
            samples.len(),
            spec.max_leaves()
        )));
    }
    let cloud = Cloud::new(samples);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut levels: Vec<Vec<TreeNode>> = Vec::with_capacity(spec.height + 1);
    for level in 0..=spec.height {
        let k = spec.level_size(level);
        let centers = cloud.kmeans(k, &mut rng);
        let snapped = snap(samples, &cloud, &centers)?;
        let mut nodes: Vec<TreeNode> = snapped
            .into_iter()
            .map(|s| TreeNode {
                center: samples[s].clone(),
                sample: s,
                parent: None,
                children: vec![],
                compressed: None,
            })
            .collect();
        if let Some(prev) = levels.last_mut() {
            for (j, node) in nodes.iter_mut().enumerate() {
                let p = nearest(&node.center, prev.iter().map(|n| &n.center))?;
                node.parent = Some(p);
                prev[p].children.push(j);
            }
        }
        levels.push(nodes);
    }
    Ok(RoutingTree::from_levels(spec, grid, levels))
}

/// Each center in turn takes the nearest sample not already taken.
fn snap(samples: &[GridFunction], cloud: &Cloud, centers: &Array2<f64>) -> Result<Vec<usize>> {
    let spec = samples[0].spec();
    let sw: Vec<f64> = spec
        .quadrature_weights()
        .iter()
        .flat_map(|w| std::iter::repeat_n(w.sqrt(), spec.channels))
        .collect();
    let mut used = vec![false; cloud.len()];
    let mut out = Vec::with_capacity(centers.nrows());
    for c in centers.rows() {
        let vals: Vec<f64> = c.iter().zip(&sw).map(|(v, w)| if *w > 0.0 { v / w } else { 0.0 }).collect();
        let center = GridFunction::new(*spec, vals)?;
        let s = nearest(&center, samples.iter().enumerate().filter(|(i, _)| !used[*i]).map(|(_, s)| s))?;
        let idx = (0..cloud.len()).filter(|&i| !used[i]).nth(s).unwrap();
        used[idx] = true;
        out.push(idx);
    }
    Ok(out)
}

/// Position (within the iterator) of the nearest function; first wins ties.
fn nearest<'a>(u: &GridFunction, candidates: impl Iterator<Item = &'a GridFunction>) -> Result<usize> {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, c) in candidates.enumerate() {
        let d = l2_distance(u, c)?;
        if d < best.1 {
            best = (i, d);
        }
    }
    if best.0 == usize::MAX {
        return Err(invalid("no candidates to compare against"));
    }
    Ok(best.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoveringAudit {
    /// `max_t min_leaf ‖t − leaf‖`.
    pub radius: f64,
    pub target_radius: f64,
    /// `radius / target_radius`.
    pub implied_constant: f64,
}

pub fn audit_covering(tree: &RoutingTree, test_set: &[GridFunction]) -> Result<CoveringAudit> {
    let mut radius = 0.0f64;
    for t in test_set {
        radius = radius.max(tree.nearest_leaf(t)?.1);
    }
    Ok(CoveringAudit {
        radius,
        target_radius: tree.spec.target_radius,
        implied_constant: radius / tree.spec.target_radius,
    })
}

/// Largest excess of the greedily routed leaf distance over the nearest leaf distance.
pub fn greedy_gap(tree: &RoutingTree, inputs: &[GridFunction]) -> Result<f64> {
    let mut gap = 0.0f64;
    for u in inputs {
        let r = tree.route(u)?;
        let greedy = l2_distance(u, tree.leaf_center(r.leaf))?;
        gap = gap.max(greedy - tree.nearest_leaf(u)?.1);
    }
    Ok(gap)
}

/// One parent level of the hierarchical k-means audit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelSlack {
    pub level: usize,
    /// `Σ_k Σ_j ‖parent_k − child_j‖` over all parent/child pairs of the two levels.
    pub lhs: f64,
    /// Minimum of the same sum over parent sets drawn from the cloud, children fixed.
    pub minimum: f64,
    /// `2 r v^{2ℓ+1}` with `r` the audited covering radius.
    pub slack: f64,
    pub holds: bool,
}

/// Checks the hierarchical k-means inequality at every level.
///
/// With the child level fixed the sum decouples over parents, so the
/// minimum over `v^ℓ` parents from the cloud is `v^ℓ · min_f Σ_j ‖f − c_j‖`,
/// found by scanning the cloud. `covering_radius` should come from
/// [`audit_covering`] on held-out inputs; on the build cloud it is zero
/// whenever every sample is a leaf.
pub fn audit_kmeans_recursion(tree: &RoutingTree, cloud: &[GridFunction], covering_radius: f64) -> Result<Vec<LevelSlack>> {
    if !(covering_radius >= 0.0) {
        return Err(invalid("covering radius must be non-negative"));
    }
    let radius = covering_radius;
    let v = tree.spec.valency as f64;
    let mut out = Vec::new();
    for level in 0..tree.levels.len().saturating_sub(1) {
        let parents = &tree.levels[level];
        let children = &tree.levels[level + 1];
        let mut lhs = 0.0;
        for p in parents {
            for c in children {
                lhs += l2_distance(&p.center, &c.center)?;
            }
        }
        let mut best = f64::INFINITY;
        for f in cloud {
            let mut s = 0.0;
            for c in children {
                s += l2_distance(f, &c.center)?;
            }
            best = best.min(s);
        }
        let minimum = parents.len() as f64 * best;
        let slack = 2.0 * radius * v.powi(2 * level as i32 + 1);
        out.push(LevelSlack {
            level,
            lhs,
            minimum,
            slack,
            holds: lhs <= slack + minimum + 1e-12 * (1.0 + lhs),
        });
    }
    Ok(out)
}

/// Node-count and network-size formulas for a tree of radius `δ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeCounts {
    /// `2^{⌈δ^{-d/2}⌉} − 1`.
    pub required_centers: u128,
    /// `⌈log_v(required_centers)⌉`, clamped to at least 1.
    pub height: u32,
    /// `v^height`.
    pub leaves: f64,
    /// `(v^{⌈c log_v X⌉ + 1} − 1) / (⌈c log_v X⌉ − 1)` with `c = 1/ln v`;
    /// `None` when the denominator is not positive.
    pub node_bound: Option<f64>,
    /// `2d + C₂ (L + 2) log₂(4L)` with `L = ⌈δ^{d/(2S)}⌉`, `C₂ = 18 S²`;
    /// `None` when `S = s − ⌈d/2⌉ − 1 ≤ 0`.
    pub node_depth: Option<f64>,
    /// `d · 3^{d+2} · S^{d+1}`.
    pub node_width: f64,
}

/// Evaluates the counting formulas; `δ^{-d/2}` must stay below 127 so the
/// center count is exact.
pub fn tree_counting(delta: f64, v: usize, d1: usize, s1: f64) -> Result<TreeCounts> {
    if !(delta > 0.0) || v < 2 || d1 == 0 {
        return Err(invalid("need δ > 0, v ≥ 2 and d ≥ 1"));
    }
    if !(s1 > d1 as f64) {
        return Err(invalid("smoothness must exceed the dimension"));
    }
    let k = delta.powf(-(d1 as f64) / 2.0).ceil();
    if k > 126.0 {
        return Err(Error::Capacity(format!("2^{k} centers exceed exact integer range")));
    }
    let required_centers = (1u128 << k as u32) - 1;
    let mut height = 0u32;
    let mut p: u128 = 1;
    while p < required_centers {
        p = p.saturating_mul(v as u128);
        height += 1;
    }
    let height = height.max(1);
    let leaves = (v as f64).powi(height as i32);

    let log_v_x = (required_centers as f64).ln() / (v as f64).ln();
    let hc = (log_v_x / (v as f64).ln()).ceil();
    let node_bound = (hc - 1.0 > 0.0).then(|| ((v as f64).powf(hc + 1.0) - 1.0) / (hc - 1.0));

    let s = s1 - (d1 as f64 / 2.0).ceil() - 1.0;
    let node_depth = (s > 0.0).then(|| {
        let l = delta.powf(d1 as f64 / (2.0 * s)).ceil();
        2.0 * d1 as f64 + 18.0 * s * s * (l + 2.0) * (4.0 * l).log2()
    });
    let node_width = d1 as f64 * 3f64.powi(d1 as i32 + 2) * s.powi(d1 as i32 + 1);
    Ok(TreeCounts {
        required_centers,
        height,
        leaves,
        node_bound,
        node_depth,
        node_width,
    })
}

/// Per-node MLP shape for compression. The output layer is left
/// unactivated: an activated scalar output unit tends to die on part of the
/// grid during fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompressionRule {
    pub width: usize,
    /// Hidden layers.
    pub depth: usize,
}

impl CompressionRule {
    pub fn spec(&self, grid: &GridSpec) -> Result<MlpSpec> {
        let mut widths = vec![grid.dim];
        widths.extend(std::iter::repeat_n(self.width, self.depth));
        widths.push(grid.channels);
        Ok(MlpSpec::new(widths, Activation::ReLU)?.with_head(HeadMode::LinearHead))
    }
}

fn evaluate_on_grid(net: &Mlp, grid: &GridSpec) -> Result<GridFunction> {
    let x = Array2::from_shape_vec((grid.nodes(), grid.dim), grid.coordinate_table()).unwrap();
    GridFunction::new(*grid, net.forward_batch(x.view()).iter().copied().collect())
}

/// Fits a ReLU MLP to every node center.
pub fn compress_nodes(tree: &RoutingTree, rule: CompressionRule, budget: &TrainBudget) -> Result<RoutingTree> {
    let spec = rule.spec(&tree.grid)?;
    let mut out = tree.clone();
    for level in &mut out.levels {
        for node in level.iter_mut() {
            let fit = fit_function(&node.center, &spec, budget)?;
            let values = evaluate_on_grid(&fit.net, &tree.grid)?;
            node.compressed = Some(CompressedCenter {
                net: fit.net,
                sup_error: fit.sup_error,
                values,
            });
        }
    }
    Ok(out)
}

/// Nodes whose compression error exceeds `tolerance`, as `(level, index, error)`.
pub fn compression_violations(tree: &RoutingTree, tolerance: f64) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for (l, level) in tree.levels.iter().enumerate() {
        for (i, n) in level.iter().enumerate() {
            if let Some(c) = &n.compressed {
                if !(c.sup_error <= tolerance) {
                    out.push((l, i, c.sup_error));
                }
            }
        }
    }
    out
}
