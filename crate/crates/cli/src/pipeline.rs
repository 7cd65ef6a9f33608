//! Pipeline stages behind each subcommand.
//!
//! Layout under the output root:
//!
//! ```text
//! data/{train.bin, test.bin, manifest.txt}
//! tree/{tree.bin, manifest.txt, audit.csv}
//! model/                       see mono_core::mono
//! train_losses.csv  eval.csv  report.csv  basis.csv  budget.csv
//! compare/seed_<s>/{data, leaves_<L>/{tree, model}}  compare.csv
//! ```
//!
//! A stage reuses the data or tree it finds on disk only when the stored
//! manifest carries the same settings; otherwise it rebuilds them.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use mono_core::budget::budget_tables;
use mono_core::grid::{l2_distance, l2_norm};
use mono_core::io::{read_functions, write_functions};
use mono_core::mono::{assemble, ComplexityReport, Evaluation, MoNoModel, TrainSummary};
use mono_core::tasks::{make_dataset, make_inverse_dataset, Histogram, Pair, TaskKind};
use mono_core::tree::{
    audit_covering, audit_kmeans_recursion, build_tree, compress_nodes, compression_violations, greedy_gap, RoutingTree,
    TreeSpec,
};
use mono_core::{BasisSet, GridFunction};

use crate::{CliError, RunConfig};

const DATA_KEYS: &[&str] = &[
    "task",
    "dim",
    "points",
    "count",
    "train_count",
    "data_seed",
    "sampling.",
    "sobolev.",
    "robin.",
];
const TREE_KEYS: &[&str] = &["tree.", "compress."];

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io_err(path))
}

fn read_text(path: &Path) -> Option<String> {
    fs::read_to_string(path).ok()
}

/// True when every line of `fingerprint` appears in the manifest at `path`.
fn manifest_matches(path: &Path, fingerprint: &str) -> bool {
    read_text(path).is_some_and(|m| {
        let lines: Vec<&str> = m.lines().collect();
        fingerprint.lines().all(|l| lines.contains(&l))
    })
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Pair>,
    pub test: Vec<Pair>,
}

impl Dataset {
    pub fn train_inputs(&self) -> Vec<GridFunction> {
        self.train.iter().map(|p| p.0.clone()).collect()
    }

    pub fn test_inputs(&self) -> Vec<GridFunction> {
        self.test.iter().map(|p| p.0.clone()).collect()
    }
}

fn save_pairs(path: &Path, pairs: &[Pair]) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let (u, v): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
    write_functions(&mut w, &u)?;
    write_functions(&mut w, &v)?;
    w.flush().map_err(io_err(path))
}

fn load_pairs(path: &Path) -> Result<Vec<Pair>, CliError> {
    let mut r = BufReader::new(File::open(path).map_err(io_err(path))?);
    let u = read_functions(&mut r, path)?;
    let v = read_functions(&mut r, path)?;
    if u.len() != v.len() {
        return Err(mono_core::Error::Format {
            path: path.to_path_buf(),
            reason: "input and output counts differ".into(),
        }
        .into());
    }
    Ok(u.into_iter().zip(v).collect())
}

fn histogram_line(h: &Histogram) -> String {
    let edges: Vec<String> = h.edges.iter().map(f64::to_string).collect();
    let counts: Vec<String> = h.counts.iter().map(usize::to_string).collect();
    format!("{};{}", edges.join(","), counts.join(","))
}

/// Loads the dataset in `dir` if it was generated from the same settings,
/// otherwise generates and stores it.
pub fn ensure_data(cfg: &RunConfig, dir: &Path) -> Result<Dataset, CliError> {
    let fingerprint = cfg.fingerprint(DATA_KEYS);
    let manifest = dir.join("manifest.txt");
    let spec = cfg.task_spec()?;
    if manifest_matches(&manifest, &fingerprint) {
        return Ok(Dataset {
            train: load_pairs(&dir.join("train.bin"))?,
            test: load_pairs(&dir.join("test.bin"))?,
        });
    }
    create_dir(dir)?;
    let mut text = fingerprint;
    let mut pairs = if spec.kind == TaskKind::RobinInverse {
        let d = make_inverse_dataset(&spec.robin, spec.count, spec.seed)?;
        writeln!(text, "geometry=unit square; q on the bottom edge, g traced on the top edge").unwrap();
        writeln!(text, "hist.trace_distance={}", histogram_line(&d.trace_distances)).unwrap();
        writeln!(text, "hist.coefficient_distance={}", histogram_line(&d.coefficient_distances)).unwrap();
        d.pairs
    } else {
        make_dataset(&spec)?
    };
    let test = pairs.split_off(cfg.get("train_count")?);
    writeln!(text, "train.samples={}\ntest.samples={}", pairs.len(), test.len()).unwrap();
    save_pairs(&dir.join("train.bin"), &pairs)?;
    save_pairs(&dir.join("test.bin"), &test)?;
    write_text(&manifest, &text)?;
    Ok(Dataset { train: pairs, test })
}

pub fn gen(cfg: &RunConfig, root: &Path) -> Result<String, CliError> {
    let d = ensure_data(cfg, &root.join("data"))?;
    Ok(format!("train={} test={}\n", d.train.len(), d.test.len()))
}

fn projection_error(basis: &BasisSet, fs: impl Iterator<Item = GridFunction>) -> Result<f64, CliError> {
    let (mut num, mut den) = (0.0, 0.0);
    for f in fs {
        num += l2_distance(&basis.project(&f)?, &f)?.powi(2);
        den += l2_norm(&f).powi(2);
    }
    Ok(if den > 0.0 { (num / den).sqrt() } else { num.sqrt() })
}

/// Relative projection error of inputs and outputs on both splits.
pub fn basis(cfg: &RunConfig, root: &Path) -> Result<String, CliError> {
    let d = ensure_data(cfg, &root.join("data"))?;
    let b = cfg.basis()?;
    let mut csv = String::from("split,function,relative_projection_error\n");
    for (name, split) in [("train", &d.train), ("test", &d.test)] {
        let input = projection_error(&b, split.iter().map(|p| p.0.clone()))?;
        let output = projection_error(&b, split.iter().map(|p| p.1.clone()))?;
        writeln!(csv, "{name},input,{input}\n{name},output,{output}").unwrap();
    }
    writeln!(csv, "all,gram_deviation,{}", b.gram_deviation()).unwrap();
    write_text(&root.join("basis.csv"), &csv)?;
    Ok(csv)
}

fn save_tree(tree: &RoutingTree, path: &Path) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    tree.write_to(&mut w)?;
    w.flush().map_err(io_err(path))
}

fn load_tree(path: &Path) -> Result<RoutingTree, CliError> {
    if !path.exists() {
        return Err(CliError::Runtime(format!("{} not found; run `bench tree` first", path.display())));
    }
    let mut r = BufReader::new(File::open(path).map_err(io_err(path))?);
    Ok(RoutingTree::read_from(&mut r, path)?)
}

/// Audit rows as `metric,level,value`; `level` is empty for whole-tree metrics.
pub fn audit_csv(tree: &RoutingTree, data: &Dataset) -> Result<String, CliError> {
    let train = data.train_inputs();
    let test = data.test_inputs();
    let cover = audit_covering(tree, &test)?;
    let mut csv = String::from("metric,level,value\n");
    let top = tree.levels().len() - 1;
    writeln!(csv, "leaves,,{}", tree.leaf_count()).unwrap();
    writeln!(csv, "routing_complexity,,{}", tree.routing_complexity()).unwrap();
    writeln!(csv, "payload,,{}", tree.payload()).unwrap();
    writeln!(csv, "covering_radius,{top},{}", cover.radius).unwrap();
    writeln!(csv, "target_radius,{top},{}", cover.target_radius).unwrap();
    writeln!(csv, "implied_constant,{top},{}", cover.implied_constant).unwrap();
    writeln!(csv, "greedy_gap,,{}", greedy_gap(tree, &test)?).unwrap();
    for s in audit_kmeans_recursion(tree, &train, cover.radius)? {
        let l = s.level;
        writeln!(csv, "kmeans_lhs,{l},{}", s.lhs).unwrap();
        writeln!(csv, "kmeans_minimum,{l},{}", s.minimum).unwrap();
        writeln!(csv, "kmeans_slack,{l},{}", s.slack).unwrap();
        writeln!(csv, "kmeans_holds,{l},{}", u8::from(s.holds)).unwrap();
    }
    if tree.is_compressed() {
        let worst = tree
            .levels()
            .iter()
            .flatten()
            .filter_map(|n| n.compressed.as_ref().map(|c| c.sup_error))
            .fold(0.0, f64::max);
        writeln!(csv, "compression_sup_error,,{worst}").unwrap();
    }
    Ok(csv)
}

/// Builds, optionally compresses, and stores a tree in `dir`.
fn build_tree_in(cfg: &RunConfig, spec: TreeSpec, data: &Dataset, dir: &Path) -> Result<RoutingTree, CliError> {
    let mut tree = build_tree(&data.train_inputs(), spec, cfg.get("tree.seed")?)?;
    if let Some((rule, budget, tol)) = cfg.compression()? {
        tree = compress_nodes(&tree, rule, &budget)?;
        let bad = compression_violations(&tree, tol);
        if let Some((l, i, e)) = bad.first() {
            return Err(CliError::Runtime(format!(
                "{} node(s) exceed the compression tolerance {tol}; first is level {l} node {i} with error {e}",
                bad.len()
            )));
        }
    }
    create_dir(dir)?;
    save_tree(&tree, &dir.join("tree.bin"))?;
    let mut manifest = cfg.fingerprint(DATA_KEYS);
    manifest.push_str(&cfg.fingerprint(TREE_KEYS));
    writeln!(manifest, "shape.valency={}\nshape.height={}", spec.valency, spec.height).unwrap();
    write_text(&dir.join("manifest.txt"), &manifest)?;
    write_text(&dir.join("audit.csv"), &audit_csv(&tree, data)?)?;
    Ok(tree)
}

fn ensure_tree(cfg: &RunConfig, spec: TreeSpec, data: &Dataset, dir: &Path) -> Result<RoutingTree, CliError> {
    let mut fp = cfg.fingerprint(DATA_KEYS);
    fp.push_str(&cfg.fingerprint(TREE_KEYS));
    writeln!(fp, "shape.valency={}\nshape.height={}", spec.valency, spec.height).unwrap();
    if manifest_matches(&dir.join("manifest.txt"), &fp) {
        return load_tree(&dir.join("tree.bin"));
    }
    build_tree_in(cfg, spec, data, dir)
}

pub fn tree(cfg: &RunConfig, root: &Path) -> Result<String, CliError> {
    let data = ensure_data(cfg, &root.join("data"))?;
    let dir = root.join("tree");
    build_tree_in(cfg, cfg.tree_spec(None)?, &data, &dir)?;
    read_text(&dir.join("audit.csv")).ok_or_else(|| CliError::Runtime("audit.csv".into()))
}

/// Re-audits the stored tree against the current dataset.
pub fn tree_audit(cfg: &RunConfig, root: &Path) -> Result<String, CliError> {
    let data = ensure_data(cfg, &root.join("data"))?;
    let dir = root.join("tree");
    let csv = audit_csv(&load_tree(&dir.join("tree.bin"))?, &data)?;
    write_text(&dir.join("audit.csv"), &csv)?;
    Ok(csv)
}

/// Assembles a fresh model in `dir` and trains it.
fn train_in(cfg: &RunConfig, tree: RoutingTree, data: &Dataset, dir: &Path) -> Result<(MoNoModel, TrainSummary), CliError> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(io_err(dir))?;
    }
    let basis = Arc::new(cfg.basis()?);
    let mut model = assemble(tree, cfg.expert_spec()?, basis.clone(), basis, dir, cfg.get("init_seed")?)?;
    match cfg.raw("routing") {
        "raw" => {}
        "compressed" => model.set_compressed_routing(true)?,
        other => return Err(CliError::Config(format!("unknown routing mode {other}"))),
    }
    let summary = model.train(&data.train, &cfg.train_budget()?)?;
    Ok((model, summary))
}

fn losses_csv(summary: &TrainSummary) -> String {
    let mut csv = String::from("leaf,samples,final_loss\n");
    for l in &summary.leaves {
        let loss = l.final_loss.map_or(String::new(), |v| v.to_string());
        writeln!(csv, "{},{},{loss}", l.leaf, l.samples).unwrap();
    }
    csv
}

pub fn train(cfg: &RunConfig, root: &Path) -> Result<String, CliError> {
    cfg.train_budget()?;
    cfg.expert_spec()?;
    let data = ensure_data(cfg, &root.join("data"))?;
    let tree = ensure_tree(cfg, cfg.tree_spec(None)?, &data, &root.join("tree"))?;
    let (_, summary) = train_in(cfg, tree, &data, &root.join("model"))?;
    let csv = losses_csv(&summary);
    write_text(&root.join("train_losses.csv"), &csv)?;
    Ok(csv)
}

fn open_model(dir: &Path) -> Result<MoNoModel, CliError> {
    if !dir.join("manifest.txt").exists() {
        return Err(CliError::Runtime(format!("no model in {}; run `bench train` first", dir.display())));
    }
    Ok(MoNoModel::open(dir)?)
}

fn eval_row(split: &str, e: &Evaluation) -> String {
    format!("{split},{},{},{}\n", e.relative_error, e.counted, e.excluded)
}

pub fn eval(cfg: &RunConfig, root: &Path) -> Result<String, CliError> {
    let data = ensure_data(cfg, &root.join("data"))?;
    let model = open_model(&root.join("model"))?;
    let mut csv = String::from("split,relative_error,counted,excluded\n");
    csv.push_str(&eval_row("train", &model.evaluate(&data.train)?));
    csv.push_str(&eval_row("test", &model.evaluate(&data.test)?));
    write_text(&root.join("eval.csv"), &csv)?;
    Ok(csv)
}

/// Realizes every input one at a time so `peak_loaded` reflects on-demand loading.
fn measure(model: &MoNoModel, inputs: &[Pair]) -> Result<ComplexityReport, CliError> {
    model.stats().reset();
    for (u, _) in inputs {
        model.realize(u)?;
    }
    Ok(model.complexity_report())
}

pub fn report(cfg: &RunConfig, root: &Path) -> Result<String, CliError> {
    let data = ensure_data(cfg, &root.join("data"))?;
    let model = open_model(&root.join("model"))?;
    let r = measure(&model, &data.test)?;
    let csv = format!(
        "leaves,active_params,total_params,routing_queries,peak_loaded,param_bound,tree_payload\n{},{},{},{},{},{},{}\n",
        r.leaves, r.active, r.total, r.routing, r.peak_loaded, r.param_bound, r.tree_payload
    );
    write_text(&root.join("report.csv"), &csv)?;
    Ok(csv)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub seed: u64,
    pub leaves: usize,
    pub active_params: usize,
    pub total_params: usize,
    pub routing_queries: usize,
    pub peak_loaded: usize,
    pub train_err: f64,
    pub test_err: f64,
}

pub const COMPARE_HEADER: &str = "seed,leaves,active_params,total_params,routing_queries,peak_loaded,train_err,test_err";

impl CompareRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.seed,
            self.leaves,
            self.active_params,
            self.total_params,
            self.routing_queries,
            self.peak_loaded,
            self.train_err,
            self.test_err
        )
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// One comparison run: seed `s` drives data, tree, initialization and training.
pub fn compare_run(cfg: &RunConfig, seed_dir: &Path, seed: u64, leaves: usize) -> Result<CompareRow, CliError> {
    let mut c = cfg.clone();
    for k in ["data_seed", "tree.seed", "init_seed", "train.seed"] {
        c.set(k, &seed.to_string())?;
    }
    let data = ensure_data(&c, &seed_dir.join("data"))?;
    let run = seed_dir.join(format!("leaves_{leaves}"));
    let tree = ensure_tree(&c, c.tree_spec(Some(leaves))?, &data, &run.join("tree"))?;
    let (model, _) = train_in(&c, tree, &data, &run.join("model"))?;
    let train = model.evaluate(&data.train)?;
    let test = model.evaluate(&data.test)?;
    let r = measure(&model, &data.test)?;
    Ok(CompareRow {
        seed,
        leaves,
        active_params: r.active,
        total_params: r.total,
        routing_queries: r.routing,
        peak_loaded: r.peak_loaded,
        train_err: train.relative_error,
        test_err: test.relative_error,
    })
}

pub fn compare(cfg: &RunConfig, root: &Path) -> Result<String, CliError> {
    let leaves: Vec<usize> = cfg.list("compare.leaves")?;
    let seeds: u64 = cfg.get("compare.seeds")?;
    if leaves.is_empty() || leaves.contains(&0) || seeds == 0 {
        return Err(CliError::Config("compare needs positive leaf counts and at least one seed".into()));
    }
    cfg.train_budget()?;
    cfg.expert_spec()?;
    let base = root.join("compare");
    let mut rows = Vec::new();
    for s in 0..seeds {
        let seed_dir: PathBuf = base.join(format!("seed_{s}"));
        for &l in &leaves {
            rows.push(compare_run(cfg, &seed_dir, s, l)?);
        }
    }
    let mut csv = format!("{COMPARE_HEADER}\n");
    for r in &rows {
        writeln!(csv, "{}", r.csv()).unwrap();
    }
    write_text(&root.join("compare.csv"), &csv)?;
    let mut out = csv;
    for &l in &leaves {
        let mut errs: Vec<f64> = rows.iter().filter(|r| r.leaves == l).map(|r| r.test_err).collect();
        writeln!(out, "# leaves={l} median test_err={}", median(&mut errs)).unwrap();
    }
    Ok(out)
}

/// Table 1 and Table 2 entries over the configured precisions, one row per ε.
pub fn budget(cfg: &RunConfig, root: &Path) -> Result<String, CliError> {
    let eps: Vec<f64> = cfg.list("budget.eps")?;
    let mut csv = String::new();
    for (k, &e) in eps.iter().enumerate() {
        let t = budget_tables(&cfg.budget_inputs(e)?)?;
        if k == 0 {
            let mut h = String::from("t,eps,rank,width,depth_log10");
            for r in &t.distributed {
                write!(h, ",mono_{}_log10", r.quantity).unwrap();
            }
            for r in &t.classical {
                write!(h, ",classical_{}_log10", r.quantity).unwrap();
            }
            writeln!(csv, "{h},active_log10").unwrap();
        }
        write!(csv, "{},{e},{},{},{}", -e.log10(), t.table1.rank, t.table1.width, t.table1.depth.log10).unwrap();
        for r in t.distributed.iter().chain(&t.classical) {
            write!(csv, ",{}", r.log10).unwrap();
        }
        writeln!(csv, ",{}", t.active.log10).unwrap();
    }
    write_text(&root.join("budget.csv"), &csv)?;
    Ok(csv)
}
