//! Mixtures of neural operators: a routing tree plus one expert per leaf.
//!
//! A model lives in a directory:
//!
//! ```text
//! tree.bin              routing tree (see `tree`)
//! experts/leaf_<k>.bin  expert shard for leaf k (see `operator`)
//! manifest.txt          key=value, one per line, sorted by key
//! ```
//!
//! Experts stay on disk. [`MoNoModel::realize`] loads exactly the shard of
//! the routed leaf and drops it after the forward pass; the loader counts
//! resident scalars so the peak is measured rather than inferred.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::ops::Deref;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::basis::{BasisFamily, BasisSet};
use crate::error::{invalid, shape, Error, Result};
use crate::grid::{l2_distance, l2_norm, GridFunction, GridSpec};
use crate::operator::{stack, train_expert, NeuralOperator, NoSpec};
use crate::optim::TrainBudget;
use crate::tree::{Route, RoutingTree};

const SPEC_KEYS: [&str; 10] = [
    "rank",
    "hidden_width",
    "depth",
    "bias_depth",
    "bias_width",
    "d_in",
    "d_out",
    "in_dim",
    "out_dim",
    "head_mode",
];

/// Plain-text `key=value` metadata.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest(BTreeMap<String, String>);

impl Manifest {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.0.insert(key.into(), value.to_string());
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                reason: format!("expected key=value, got {line:?}"),
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self(map))
    }

    pub fn render(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    fn require<T: std::str::FromStr>(&self, key: &str, path: &Path) -> Result<T> {
        self.get(key).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            reason: format!("missing or malformed key {key}"),
        })
    }
}

fn put_basis(m: &mut Manifest, prefix: &str, b: &BasisSet) {
    m.set(format!("{prefix}.family"), b.family().name());
    if let BasisFamily::PiecewisePoly { max_degree, levels } = b.family() {
        m.set(format!("{prefix}.max_degree"), max_degree);
        m.set(format!("{prefix}.levels"), levels);
    }
    m.set(format!("{prefix}.size"), b.len());
    m.set(format!("{prefix}.dim"), b.spec().dim);
    m.set(format!("{prefix}.points"), b.spec().points_per_axis);
}

fn get_basis(m: &Manifest, prefix: &str, path: &Path) -> Result<BasisSet> {
    let family = match m.get(&format!("{prefix}.family")) {
        Some("fourier") => BasisFamily::Fourier,
        Some("pwpoly") => BasisFamily::PiecewisePoly {
            max_degree: m.require(&format!("{prefix}.max_degree"), path)?,
            levels: m.require(&format!("{prefix}.levels"), path)?,
        },
        _ => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("unknown {prefix}.family"),
            })
        }
    };
    let grid = GridSpec::scalar(m.require(&format!("{prefix}.dim"), path)?, m.require(&format!("{prefix}.points"), path)?)?;
    BasisSet::build(grid, family, m.require(&format!("{prefix}.size"), path)?)
}

/// Resident-scalar counters for one model's shard loader.
#[derive(Debug, Default)]
pub struct LoaderStats {
    resident: AtomicUsize,
    peak: AtomicUsize,
    loads: AtomicUsize,
}

impl LoaderStats {
    pub fn resident(&self) -> usize {
        self.resident.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn loads(&self) -> usize {
        self.loads.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.peak.store(self.resident(), Ordering::SeqCst);
        self.loads.store(0, Ordering::SeqCst);
    }

    fn acquire(&self, n: usize) {
        let now = self.resident.fetch_add(n, Ordering::SeqCst) + n;
        self.peak.fetch_max(now, Ordering::SeqCst);
        self.loads.fetch_add(1, Ordering::SeqCst);
    }

    fn release(&self, n: usize) {
        self.resident.fetch_sub(n, Ordering::SeqCst);
    }
}

/// An expert held in memory; its scalars count as resident until dropped.
pub struct LoadedExpert<'a> {
    op: NeuralOperator,
    stats: &'a LoaderStats,
}

impl Deref for LoadedExpert<'_> {
    type Target = NeuralOperator;
    fn deref(&self) -> &NeuralOperator {
        &self.op
    }
}

impl LoadedExpert<'_> {
    /// Detaches the operator; it no longer counts as resident.
    pub fn into_inner(self) -> NeuralOperator {
        let op = self.op.clone();
        drop(self);
        op
    }
}

impl Drop for LoadedExpert<'_> {
    fn drop(&mut self) {
        self.stats.release(self.op.stored_count());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComplexityReport {
    pub leaves: usize,
    /// Largest per-expert scalar count.
    pub active: usize,
    /// Sum of scalar counts over all experts.
    pub total: usize,
    /// Levels visited by one descent.
    pub routing: usize,
    /// Largest expert scalar count resident at once since the last reset.
    pub peak_loaded: usize,
    /// Per-expert closed-form bound on the parameter count.
    pub param_bound: usize,
    /// Scalars held by the tree's node centers.
    pub tree_payload: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeafLoss {
    pub leaf: usize,
    pub samples: usize,
    /// `None` for leaves that received no data and keep their initialization.
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub leaves: Vec<LeafLoss>,
}

impl TrainSummary {
    pub fn empty_leaves(&self) -> Vec<usize> {
        self.leaves.iter().filter(|l| l.samples == 0).map(|l| l.leaf).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    /// Aggregated relative `L²` error over the counted samples.
    pub relative_error: f64,
    pub counted: usize,
    /// Samples routed to leaves that were never trained.
    pub excluded: usize,
}

#[derive(Debug)]
pub struct MoNoModel {
    dir: PathBuf,
    tree: RoutingTree,
    spec: NoSpec,
    in_basis: Arc<BasisSet>,
    out_basis: Arc<BasisSet>,
    manifest: Manifest,
    stats: LoaderStats,
}

pub fn shard_path(dir: &Path, leaf: usize) -> PathBuf {
    dir.join("experts").join(format!("leaf_{leaf}.bin"))
}

fn write_atomic(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write(&mut w)?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Creates a model directory with one freshly initialized expert per leaf.
///
/// Leaf `k` is initialized from `seed + k`.
pub fn assemble(
    tree: RoutingTree,
    template: NoSpec,
    in_basis: Arc<BasisSet>,
    out_basis: Arc<BasisSet>,
    dir: &Path,
    seed: u64,
) -> Result<MoNoModel> {
    template.validate()?;
    let in_grid = in_basis.spec().with_channels(template.d_in)?;
    if *tree.grid() != in_grid {
        return Err(shape("tree grid differs from the expert input grid"));
    }
    fs::create_dir_all(dir.join("experts"))?;
    write_atomic(&dir.join("tree.bin"), |w| {
        tree.write_to(w).map_err(|e| std::io::Error::other(e.to_string()))
    })?;
    for leaf in 0..tree.leaf_count() {
        let op = NeuralOperator::init(template, in_basis.clone(), out_basis.clone(), seed.wrapping_add(leaf as u64))?;
        write_atomic(&shard_path(dir, leaf), |w| op.write_shard(w))?;
    }
    let mut manifest = Manifest::default();
    manifest.set("format", "mono1");
    manifest.set("leaves", tree.leaf_count());
    manifest.set("tree.valency", tree.spec().valency);
    manifest.set("tree.height", tree.spec().height);
    manifest.set("tree.delta", tree.spec().target_radius);
    manifest.set("init_seed", seed);
    manifest.set("trained", 0);
    manifest.set("routing", "raw");
    for (k, v) in SPEC_KEYS.iter().zip(template.header()) {
        manifest.set(format!("expert.{k}"), v);
    }
    put_basis(&mut manifest, "in", &in_basis);
    put_basis(&mut manifest, "out", &out_basis);
    let model = MoNoModel {
        dir: dir.to_path_buf(),
        tree,
        spec: template,
        in_basis,
        out_basis,
        manifest,
        stats: LoaderStats::default(),
    };
    model.save_manifest()?;
    Ok(model)
}

impl MoNoModel {
    pub fn open(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.txt");
        let manifest = Manifest::parse(&fs::read_to_string(&mpath)?, &mpath)?;
        let mut h = [0usize; 10];
        for (v, k) in h.iter_mut().zip(SPEC_KEYS) {
            *v = manifest.require(&format!("expert.{k}"), &mpath)?;
        }
        let spec = NoSpec::from_header(h)?;
        let in_basis = Arc::new(get_basis(&manifest, "in", &mpath)?);
        let out_basis = Arc::new(get_basis(&manifest, "out", &mpath)?);
        let tpath = dir.join("tree.bin");
        let tree = RoutingTree::read_from(&mut BufReader::new(File::open(&tpath)?), &tpath)?;
        let leaves: usize = manifest.require("leaves", &mpath)?;
        if leaves != tree.leaf_count() {
            return Err(Error::Format {
                path: mpath,
                reason: "leaf count disagrees with tree.bin".into(),
            });
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            tree,
            spec,
            in_basis,
            out_basis,
            manifest,
            stats: LoaderStats::default(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn tree(&self) -> &RoutingTree {
        &self.tree
    }

    pub fn expert_spec(&self) -> &NoSpec {
        &self.spec
    }

    pub fn in_basis(&self) -> &Arc<BasisSet> {
        &self.in_basis
    }

    pub fn out_basis(&self) -> &Arc<BasisSet> {
        &self.out_basis
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn manifest_mut(&mut self) -> &mut Manifest {
        &mut self.manifest
    }

    pub fn stats(&self) -> &LoaderStats {
        &self.stats
    }

    pub fn save_manifest(&self) -> Result<()> {
        let text = self.manifest.render();
        write_atomic(&self.dir.join("manifest.txt"), |w| w.write_all(text.as_bytes()))
    }

    /// Routes against the compressed node centers instead of the raw ones.
    pub fn set_compressed_routing(&mut self, on: bool) -> Result<()> {
        if on && !self.tree.is_compressed() {
            return Err(invalid("tree has no compressed centers"));
        }
        self.manifest.set("routing", if on { "compressed" } else { "raw" });
        Ok(())
    }

    fn compressed_routing(&self) -> bool {
        self.manifest.get("routing") == Some("compressed")
    }

    /// Leaves listed as untrained by the last training run.
    pub fn empty_leaves(&self) -> Vec<usize> {
        self.manifest
            .get("empty_leaves")
            .map(|s| s.split(',').filter_map(|v| v.parse().ok()).collect())
            .unwrap_or_default()
    }

    pub fn load_expert(&self, leaf: usize) -> Result<LoadedExpert<'_>> {
        if leaf >= self.tree.leaf_count() {
            return Err(Error::Integrity {
                leaf,
                reason: "no such leaf".into(),
            });
        }
        let path = shard_path(&self.dir, leaf);
        let integrity = |reason: String| Error::Integrity { leaf, reason };
        let file = File::open(&path).map_err(|e| integrity(format!("cannot open {}: {e}", path.display())))?;
        let op = NeuralOperator::read_shard(
            &mut BufReader::new(file),
            &path,
            self.in_basis.clone(),
            self.out_basis.clone(),
        )
        .map_err(|e| integrity(e.to_string()))?;
        if *op.spec() != self.spec {
            return Err(integrity("shard spec differs from the model's expert spec".into()));
        }
        self.stats.acquire(op.stored_count());
        Ok(LoadedExpert { op, stats: &self.stats })
    }

    pub fn store_expert(&self, leaf: usize, op: &NeuralOperator) -> Result<()> {
        if *op.spec() != self.spec || leaf >= self.tree.leaf_count() {
            return Err(invalid("expert does not fit this model"));
        }
        write_atomic(&shard_path(&self.dir, leaf), |w| op.write_shard(w))
    }

    pub fn route(&self, u: &GridFunction) -> Result<Route> {
        self.tree.route_with(u, self.compressed_routing())
    }

    /// Routes `u`, loads that leaf's expert alone, and applies it.
    pub fn realize(&self, u: &GridFunction) -> Result<GridFunction> {
        Ok(self.realize_routed(u)?.1)
    }

    pub fn realize_routed(&self, u: &GridFunction) -> Result<(Route, GridFunction)> {
        let route = self.route(u)?;
        let expert = self.load_expert(route.leaf)?;
        let out = expert.forward_no(u)?;
        Ok((route, out))
    }

    /// Groups `data` by routed leaf.
    pub fn partition<'a>(&self, data: &'a [(GridFunction, GridFunction)]) -> Result<Vec<Vec<&'a (GridFunction, GridFunction)>>> {
        let mut parts = vec![Vec::new(); self.tree.leaf_count()];
        for pair in data {
            parts[self.route(&pair.0)?.leaf].push(pair);
        }
        Ok(parts)
    }

    /// Trains every leaf on the pairs routed to it. Leaf `k` uses
    /// `budget.seed + k` and as many optimizer steps as `budget` would spend
    /// on the whole of `data`; leaves without data keep their initialization.
    pub fn train(&mut self, data: &[(GridFunction, GridFunction)], budget: &TrainBudget) -> Result<TrainSummary> {
        budget.validate()?;
        if data.is_empty() {
            return Err(Error::RoutingDegenerate);
        }
        let parts = self.partition(data)?;
        let mut rows = Vec::with_capacity(parts.len());
        for (leaf, part) in parts.iter().enumerate() {
            if part.is_empty() {
                rows.push(LeafLoss {
                    leaf,
                    samples: 0,
                    final_loss: None,
                });
                continue;
            }
            let mut op = self.load_expert(leaf)?.into_inner();
            let local: Vec<_> = part.iter().map(|&p| p.clone()).collect();
            let leaf_budget = TrainBudget {
                seed: budget.seed.wrapping_add(leaf as u64),
                epochs: matched_epochs(budget, data.len(), part.len()),
                ..*budget
            };
            let report = train_expert(&mut op, &local, &leaf_budget)?;
            self.store_expert(leaf, &op)?;
            rows.push(LeafLoss {
                leaf,
                samples: part.len(),
                final_loss: Some(report.final_loss),
            });
        }
        let summary = TrainSummary { leaves: rows };
        let empty = summary.empty_leaves();
        self.manifest.set("trained", 1);
        self.manifest.set("train.seed", budget.seed);
        self.manifest.set("train.epochs", budget.epochs);
        self.manifest.set("train.samples", data.len());
        self.manifest.set(
            "empty_leaves",
            empty.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(","),
        );
        self.save_manifest()?;
        Ok(summary)
    }

    /// Relative `L²` error with one shard load per leaf; samples routed to
    /// untrained leaves are excluded.
    pub fn evaluate(&self, data: &[(GridFunction, GridFunction)]) -> Result<Evaluation> {
        let empty = self.empty_leaves();
        let parts = self.partition(data)?;
        let (mut num, mut den, mut counted, mut excluded) = (0.0, 0.0, 0, 0);
        for (leaf, part) in parts.iter().enumerate() {
            if part.is_empty() {
                continue;
            }
            if empty.contains(&leaf) {
                excluded += part.len();
                continue;
            }
            let expert = self.load_expert(leaf)?;
            let x = stack(&part.iter().map(|p| &p.0).collect::<Vec<_>>())?;
            let out = expert.forward_batch(x.view())?;
            for (row, (_, y)) in out.rows().into_iter().zip(part.iter().copied()) {
                let pred = GridFunction::new(*y.spec(), row.to_vec())?;
                num += l2_distance(&pred, y)?.powi(2);
                den += l2_norm(y).powi(2);
            }
            counted += part.len();
        }
        if counted == 0 {
            return Err(Error::RoutingDegenerate);
        }
        Ok(Evaluation {
            relative_error: if den > 0.0 { (num / den).sqrt() } else { num.sqrt() },
            counted,
            excluded,
        })
    }

    pub fn complexity_report(&self) -> ComplexityReport {
        let per = self.spec.stored_count();
        let leaves = self.tree.leaf_count();
        ComplexityReport {
            leaves,
            active: per,
            total: per * leaves,
            routing: self.tree.routing_complexity(),
            peak_loaded: self.stats.peak(),
            param_bound: self.spec.param_bound(),
            tree_payload: self.tree.payload(),
        }
    }
}

/// Epochs giving a partition of `part` samples the optimizer steps that
/// `budget` spends on `total` samples.
pub fn matched_epochs(budget: &TrainBudget, total: usize, part: usize) -> usize {
    let batches = |n: usize| match budget.batch_size {
        Some(b) => n.div_ceil(b),
        None => 1,
    };
    let steps = budget.epochs * batches(total);
    steps.div_ceil(batches(part).max(1))
}

/// Trains `model` in place; see [`MoNoModel::train`].
pub fn train_mono(model: &mut MoNoModel, data: &[(GridFunction, GridFunction)], budget: &TrainBudget) -> Result<TrainSummary> {
    model.train(data, budget)
}
