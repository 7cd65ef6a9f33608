//! Sample clouds and brute-force oracles for routing-tree audits.
#![allow(dead_code)]

use std::time::Instant;

use mono_core::grid::l2_distance;
use mono_core::sobolev::sample_many;
use mono_core::tree::{audit_covering, audit_kmeans_recursion, build_tree, RoutingTree, TreeSpec};
use mono_core::{BasisFamily, BasisSet, GridFunction, GridSpec, SobolevBallSpec};

pub fn cloud(count: usize, m: usize, seed: u64) -> Vec<GridFunction> {
    let g = GridSpec::scalar(1, m).unwrap();
    let basis = BasisSet::build(g, BasisFamily::Fourier, 16.min(m / 2)).unwrap();
    let ball = SobolevBallSpec::new(2.0, 1.0, 0.25).unwrap();
    sample_many(&ball, &basis, 1, count, seed).unwrap()
}

/// Index of the nearest center, smallest index on ties.
pub fn nearest(u: &GridFunction, centers: &[&GridFunction]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = l2_distance(u, c).unwrap();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Minimum of `Σ_k Σ_j ‖f_k − c_j‖` over every tuple `(f_1, …, f_p)` drawn from the cloud.
pub fn exhaustive_minimum(cloud: &[GridFunction], children: &[&GridFunction], parents: usize) -> f64 {
    let n = cloud.len();
    let cost: Vec<f64> = cloud
        .iter()
        .map(|f| children.iter().map(|c| l2_distance(f, c).unwrap()).sum())
        .collect();
    let mut best = f64::INFINITY;
    let mut idx = vec![0usize; parents];
    loop {
        best = best.min(idx.iter().map(|&i| cost[i]).sum());
        let mut k = 0;
        loop {
            if k == parents {
                return best;
            }
            idx[k] += 1;
            if idx[k] < n {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Largest distance from a held-out input to its nearest leaf, by brute force.
pub fn held_out_radius(tree: &RoutingTree, held_out: &[GridFunction]) -> f64 {
    let leaves: Vec<_> = tree.leaves().iter().map(|&(l, i)| &tree.node(l, i).center).collect();
    held_out
        .iter()
        .map(|u| leaves.iter().map(|c| l2_distance(u, c).unwrap()).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
}

/// Small clouds (4 to 8 samples) with v = 2, h = 2, so every parent tuple can be enumerated,
/// each with the covering radius of 64 held-out draws.
pub fn enumerable_instances() -> impl Iterator<Item = (u64, Vec<GridFunction>, RoutingTree, f64)> {
    (0..40u64).map(|seed| {
        let count = 4 + (seed % 5) as usize;
        let samples = cloud(count, 33, 100 + seed);
        let tree = build_tree(&samples, TreeSpec::new(2, 2, 0.1).unwrap(), seed).unwrap();
        let radius = held_out_radius(&tree, &cloud(64, 33, 1000 + seed));
        (seed, samples, tree, radius)
    })
}

pub fn parents_are_nearest_previous_level_centers() {
    let samples = cloud(64, 65, 1);
    for (v, h) in [(2, 3), (3, 2), (4, 2)] {
        let tree = build_tree(&samples, TreeSpec::new(v, h, 0.1).unwrap(), 7).unwrap();
        let levels = tree.levels();
        for l in 1..levels.len() {
            let prev: Vec<_> = levels[l - 1].iter().map(|n| &n.center).collect();
            for (i, node) in levels[l].iter().enumerate() {
                let p = nearest(&node.center, &prev);
                assert_eq!(node.parent, Some(p), "v={v} h={h} level {l} node {i}");
                assert!(levels[l - 1][p].children.contains(&i));
            }
            let listed: usize = levels[l - 1].iter().map(|n| n.children.len()).sum();
            assert_eq!(listed, levels[l].len());
        }
        // every center is one of the samples
        for node in levels.iter().flatten() {
            assert_eq!(&node.center, &samples[node.sample]);
        }
    }
}

pub fn covering_radius_shrinks_with_height() {
    let samples = cloud(64, 65, 2);
    let test = cloud(64, 65, 3);
    let radii: Vec<f64> = (1..=3)
        .map(|h| {
            let tree = build_tree(&samples, TreeSpec::new(2, h, 0.1).unwrap(), 0).unwrap();
            audit_covering(&tree, &test).unwrap().radius
        })
        .collect();
    println!("covering radius for h = 1, 2, 3: {radii:?}");
    assert!(radii.windows(2).all(|w| w[1] <= w[0]), "{radii:?}");
}

pub fn kmeans_audit_matches_exhaustive_enumeration() {
    let start = Instant::now();
    let mut checked = 0;
    for (seed, samples, tree, radius) in enumerable_instances() {
        let report = audit_kmeans_recursion(&tree, &samples, radius).unwrap();
        assert_eq!(report.len(), 2);
        for row in &report {
            let parents: Vec<_> = tree.levels()[row.level].iter().map(|n| &n.center).collect();
            let children: Vec<_> = tree.levels()[row.level + 1].iter().map(|n| &n.center).collect();
            let lhs: f64 = parents
                .iter()
                .flat_map(|p| children.iter().map(move |c| l2_distance(p, c).unwrap()))
                .sum();
            let min = exhaustive_minimum(&samples, &children, parents.len());
            let slack = 2.0 * radius * 2f64.powi(2 * row.level as i32 + 1);
            assert!((row.lhs - lhs).abs() <= 1e-12 * lhs.max(1.0), "seed {seed}");
            assert!((row.minimum - min).abs() <= 1e-12 * min.max(1.0), "seed {seed}: {} vs {min}", row.minimum);
            assert!((row.slack - slack).abs() <= 1e-12 * slack.max(1.0), "seed {seed}");
            assert!(min <= lhs + 1e-12, "the tree's own parents are candidates");
            assert_eq!(row.holds, lhs <= slack + min + 1e-12 * (1.0 + lhs), "seed {seed}");
            checked += 1;
        }
    }
    println!("{checked} level rows checked in {:?}", start.elapsed());
}

pub fn kmeans_recursion_holds_on_enumerable_instances() {
    let mut tightest = f64::INFINITY;
    for (seed, samples, tree, radius) in enumerable_instances() {
        for row in audit_kmeans_recursion(&tree, &samples, radius).unwrap() {
            assert!(row.holds, "seed {seed} level {}: {} > {} + {}", row.level, row.lhs, row.slack, row.minimum);
            tightest = tightest.min(row.slack + row.minimum - row.lhs);
        }
    }
    println!("smallest margin {tightest}");
}
