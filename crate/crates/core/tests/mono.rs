use std::fs;
use std::io::BufReader;
use std::path::Path;
use std::sync::Arc;

use mono_core::mono::{assemble, shard_path, MoNoModel};
use mono_core::operator::{train_expert, NeuralOperator, NoSpec};
use mono_core::optim::TrainBudget;
use mono_core::tasks::{make_dataset, TaskKind, TaskSpec};
use mono_core::tree::{build_tree, RoutingTree, TreeSpec};
use mono_core::{BasisFamily, BasisSet, GridFunction, GridSpec};

const M: usize = 33;

fn grid() -> GridSpec {
    GridSpec::scalar(1, M).unwrap()
}

fn basis() -> Arc<BasisSet> {
    Arc::new(BasisSet::build(grid(), BasisFamily::Fourier, 6).unwrap())
}

fn spec() -> NoSpec {
    NoSpec::scalar(1, 4, 6, 1)
}

fn data(count: usize, seed: u64) -> Vec<(GridFunction, GridFunction)> {
    make_dataset(&TaskSpec::new(TaskKind::Square, grid(), count, seed).unwrap()).unwrap()
}

fn inputs(d: &[(GridFunction, GridFunction)]) -> Vec<GridFunction> {
    d.iter().map(|p| p.0.clone()).collect()
}

fn model_in(dir: &Path, tree: RoutingTree, seed: u64) -> MoNoModel {
    let b = basis();
    assemble(tree, spec(), b.clone(), b, dir, seed).unwrap()
}

fn read_u32(b: &[u8], at: usize) -> usize {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap()) as usize
}

/// Scalar count from a shard's header: 8 magic bytes, ten u32 fields, then a u64 count.
fn shard_scalars(path: &Path) -> usize {
    let bytes = fs::read(path).unwrap();
    assert_eq!(&bytes[..8], b"MONOEXP1");
    let count = u64::from_le_bytes(bytes[48..56].try_into().unwrap()) as usize;
    assert_eq!(bytes.len(), 56 + 8 * count, "{}", path.display());
    count
}

/// Every file under `dir`, relative path and contents, sorted by path.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

#[test]
fn realization_matches_the_routed_shard() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(40, 1);
    let tree = build_tree(&inputs(&d), TreeSpec::new(2, 2, 0.1).unwrap(), 3).unwrap();
    let model = model_in(dir.path(), tree, 9);
    let b = basis();
    for (u, _) in data(20, 2) {
        let route = model.route(&u).unwrap();
        let path = shard_path(dir.path(), route.leaf);
        let direct = NeuralOperator::read_shard(&mut BufReader::new(fs::File::open(&path).unwrap()), &path, b.clone(), b.clone())
            .unwrap();
        let expected = direct.forward_no(&u).unwrap();
        let got = model.realize(&u).unwrap();
        assert_eq!(got.values(), expected.values());
        assert_eq!(model.stats().resident(), 0);
    }
    assert_eq!(model.stats().peak(), spec().stored_count());
    assert_eq!(model.stats().loads(), 20);
}

#[test]
fn complexity_ledger_matches_files_on_disk() {
    for (v, h) in [(2, 1), (2, 3), (3, 2)] {
        let dir = tempfile::tempdir().unwrap();
        let d = data(60, 3);
        let tree = build_tree(&inputs(&d), TreeSpec::new(v, h, 0.1).unwrap(), 0).unwrap();
        let model = model_in(dir.path(), tree, 0);
        let shards: Vec<_> = fs::read_dir(dir.path().join("experts")).unwrap().map(|e| e.unwrap().path()).collect();
        let counts: Vec<usize> = shards.iter().map(|p| shard_scalars(p)).collect();
        let tree_bytes = fs::read(dir.path().join("tree.bin")).unwrap();
        assert_eq!(&tree_bytes[..8], b"MONOTREE");
        let height = read_u32(&tree_bytes, 12);
        assert_eq!(height, h);

        for (u, _) in &d[..10] {
            model.realize(u).unwrap();
        }
        let r = model.complexity_report();
        assert_eq!(r.leaves, shards.len());
        assert_eq!(r.active, *counts.iter().max().unwrap());
        assert_eq!(r.total, counts.iter().sum::<usize>());
        assert_eq!(r.routing, height + 1);
        assert_eq!(r.peak_loaded, r.active);
        assert!(r.total >= r.active * r.leaves);
    }
}

#[test]
fn eight_leaves_give_eight_reproducible_shards() {
    let d = data(40, 4);
    let tree = build_tree(&inputs(&d), TreeSpec::new(2, 3, 0.1).unwrap(), 5).unwrap();
    assert_eq!(tree.leaf_count(), 8);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    model_in(a.path(), tree.clone(), 21);
    model_in(b.path(), tree, 21);
    let files = snapshot(a.path());
    assert_eq!(files.iter().filter(|(p, _)| p.starts_with("experts")).count(), 8);
    assert_eq!(files, snapshot(b.path()));
}

#[test]
fn equidistant_inputs_go_to_the_smaller_leaf() {
    let dir = tempfile::tempdir().unwrap();
    let samples = vec![GridFunction::constant(grid(), 0.0), GridFunction::constant(grid(), 1.0)];
    let tree = build_tree(&samples, TreeSpec::new(2, 1, 0.1).unwrap(), 0).unwrap();
    let zero_leaf = (0..2).find(|&k| tree.leaf_center(k).values()[0] == 0.0).unwrap();
    let model = model_in(dir.path(), tree, 0);
    assert_eq!(model.route(&GridFunction::constant(grid(), 0.2)).unwrap().leaf, zero_leaf);
    assert_eq!(model.route(&GridFunction::constant(grid(), 0.8)).unwrap().leaf, 1 - zero_leaf);
    assert_eq!(model.route(&GridFunction::constant(grid(), 0.5)).unwrap().leaf, 0);
}

#[test]
fn one_populated_leaf_trains_like_a_single_expert() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(24, 6);
    // a far outlier takes one leaf, so every data point routes to the other
    let mut cloud = inputs(&d);
    cloud.push(GridFunction::constant(grid(), 100.0));
    let tree = build_tree(&cloud, TreeSpec::new(2, 1, 0.1).unwrap(), 0).unwrap();
    let mut model = model_in(dir.path(), tree, 30);
    let parts = model.partition(&d).unwrap();
    let busy = (0..2).find(|&k| parts[k].len() == d.len()).expect("all data on one leaf");
    let budget = TrainBudget::new(40, 1e-2, 70).with_batch_size(8);
    let summary = model.train(&d, &budget).unwrap();
    assert_eq!(summary.empty_leaves(), vec![1 - busy]);

    let b = basis();
    let mut single = NeuralOperator::init(spec(), b.clone(), b, 30 + busy as u64).unwrap();
    let report = train_expert(&mut single, &d, &TrainBudget { seed: 70 + busy as u64, ..budget }).unwrap();
    let trained = model.load_expert(busy).unwrap();
    assert_eq!(trained.params(), single.params());
    assert_eq!(summary.leaves[busy].final_loss, Some(report.final_loss));
}

#[test]
fn training_is_reproducible() {
    let d = data(48, 7);
    let tree = build_tree(&inputs(&d), TreeSpec::new(2, 2, 0.1).unwrap(), 1).unwrap();
    let budget = TrainBudget::new(20, 1e-2, 3).with_batch_size(8);
    let run = |dir: &Path| {
        let mut model = model_in(dir, tree.clone(), 2);
        let summary = model.train(&d, &budget).unwrap();
        (summary, model.evaluate(&d).unwrap())
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (sa, ea) = run(a.path());
    let (sb, eb) = run(b.path());
    assert_eq!(sa, sb);
    assert_eq!(ea, eb);
    assert_eq!(snapshot(a.path()), snapshot(b.path()));
}

#[test]
fn trivial_tree_has_one_active_expert() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(10, 8);
    let model = model_in(dir.path(), RoutingTree::trivial(d[0].0.clone()), 0);
    for (u, _) in &d {
        assert_eq!(model.route(u).unwrap().leaf, 0);
        model.realize(u).unwrap();
    }
    let r = model.complexity_report();
    assert_eq!((r.leaves, r.routing), (1, 1));
    assert_eq!(r.active, r.total);
    assert_eq!(r.total, shard_scalars(&shard_path(dir.path(), 0)));
}

#[test]
fn reopened_models_realize_identically() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(30, 9);
    let tree = build_tree(&inputs(&d), TreeSpec::new(3, 1, 0.1).unwrap(), 0).unwrap();
    let mut model = model_in(dir.path(), tree, 4);
    model.train(&d, &TrainBudget::new(5, 1e-2, 0)).unwrap();
    let again = MoNoModel::open(dir.path()).unwrap();
    assert_eq!(again.empty_leaves(), model.empty_leaves());
    for (u, _) in &d {
        assert_eq!(again.realize(u).unwrap(), model.realize(u).unwrap());
    }
}
