//! Client partitioning: the published per-client image counts and the
//! structural invariants of the dealing rule.

use std::collections::HashSet;
use std::time::Instant;

use fedprompt::dataset::{gen_synthetic, partition, PartitionSpec, Preset};
use proptest::prelude::*;

mod common;
use common::{published, CLIENT_COUNTS};

/// Whether the split total divides evenly over `n` clients.
fn exact(total: usize, n: usize) -> bool {
    total.is_multiple_of(n)
}

#[test]
fn published_counts_reproduced() {
    let start = Instant::now();
    let mut inexact_cells = Vec::new();
    for preset in [Preset::FedOptimal, Preset::FedUcmerced, Preset::FedNwpu] {
        let (k, per_class, _) = preset.shape();
        for (n, &(table_train, table_test)) in CLIENT_COUNTS.iter().zip(published(preset).iter()) {
            let spec = preset.spec(*n, 0);
            let train_total = k * spec.train_per_class();
            let test_total = k * per_class - train_total;
            let result = partition(&spec).unwrap();
            for (split, total, table, counts) in [
                (
                    "train",
                    train_total,
                    table_train,
                    result.counts().iter().map(|c| c.0).collect::<Vec<_>>(),
                ),
                (
                    "test",
                    test_total,
                    table_test,
                    result.counts().iter().map(|c| c.1).collect(),
                ),
            ] {
                let (lo, hi) = (total / n, total.div_ceil(*n));
                for &c in &counts {
                    assert!(c == lo || c == hi, "{} N={n} {split}: {c}", preset.name());
                    if exact(total, *n) {
                        assert_eq!(c, table, "{} N={n} {split}", preset.name());
                    } else {
                        assert!(
                            c.abs_diff(table) <= 1,
                            "{} N={n} {split}: {c} vs {table}",
                            preset.name()
                        );
                    }
                }
                if !exact(total, *n) {
                    inexact_cells.push(format!("{} N={n} {split}", preset.name()));
                }
            }
        }
    }
    assert_eq!(
        inexact_cells,
        [
            "fed-optimal N=20 train",
            "fed-optimal N=20 test",
            "fed-optimal N=40 train",
            "fed-optimal N=40 test",
            "fed-ucmerced N=20 train",
            "fed-ucmerced N=20 test",
            "fed-ucmerced N=40 train",
            "fed-ucmerced N=40 test",
            "fed-nwpu N=40 train",
        ]
    );
    assert!(start.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn nwpu_forty_clients_has_both_remainder_sizes() {
    let result = partition(&Preset::FedNwpu.spec(40, 0)).unwrap();
    let sizes: HashSet<usize> = result.counts().iter().map(|c| c.0).collect();
    assert_eq!(sizes, HashSet::from([157, 158]));
}

#[test]
fn partition_is_deterministic_and_seed_dependent() {
    let a = partition(&Preset::FedOptimal.spec(20, 3)).unwrap();
    assert_eq!(a, partition(&Preset::FedOptimal.spec(20, 3)).unwrap());
    assert_ne!(a, partition(&Preset::FedOptimal.spec(20, 4)).unwrap());
}

#[test]
fn synthetic_task_is_prototype_separable() {
    let data = gen_synthetic(8, 40, 32, 0.05, 0).unwrap();
    let mut correct = 0;
    for (i, x) in data.samples.rows().into_iter().enumerate() {
        let nearest = (0..8)
            .map(|c| {
                let diff = &x - &data.prototypes.row(c);
                (c, diff.dot(&diff))
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0;
        correct += usize::from(nearest == data.labels[i]);
    }
    assert!(correct as f64 / data.len() as f64 >= 0.99);
    for i in 0..8 {
        for j in i + 1..8 {
            assert_ne!(data.prototypes.row(i), data.prototypes.row(j));
        }
    }
    assert!(data.labels.iter().all(|&l| l < 8));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn partition_invariants(
        k in 2usize..12,
        per_class in 2usize..40,
        frac in 0.1f64..0.9,
        n in 1usize..12,
        seed in any::<u64>(),
    ) {
        let spec = PartitionSpec { n_classes: k, images_per_class: per_class, train_fraction: frac, n_clients: n, seed };
        prop_assume!(spec.validate().is_ok());
        let r = partition(&spec).unwrap();
        let n_train = spec.train_per_class();
        // disjoint across clients and splits
        let mut seen = HashSet::new();
        for c in &r.clients {
            for &i in c.train.iter().chain(&c.test) {
                prop_assert!(i < k * per_class);
                prop_assert!(seen.insert(i), "index {} twice", i);
            }
        }
        // conservation
        let counts = r.counts();
        prop_assert_eq!(counts.iter().map(|c| c.0).sum::<usize>(), k * n_train);
        prop_assert_eq!(counts.iter().map(|c| c.1).sum::<usize>(), k * (per_class - n_train));
        // balance
        for split in [0usize, 1] {
            let vals: Vec<usize> = counts.iter().map(|c| if split == 0 { c.0 } else { c.1 }).collect();
            let spread = vals.iter().max().unwrap() - vals.iter().min().unwrap();
            prop_assert!(spread <= 1, "totals spread {}", spread);
        }
        for class in 0..k {
            for split in [0usize, 1] {
                let vals: Vec<usize> = r.class_counts.iter()
                    .map(|per| if split == 0 { per[class].0 } else { per[class].1 })
                    .collect();
                prop_assert!(vals.iter().max().unwrap() - vals.iter().min().unwrap() <= 1);
            }
        }
        // train indices of each class really belong to it
        for (c, per_class_counts) in r.clients.iter().zip(&r.class_counts) {
            for (class, counts) in per_class_counts.iter().enumerate() {
                let owned = c.train.iter().filter(|&&i| i / per_class == class).count();
                prop_assert_eq!(owned, counts.0);
            }
        }
    }
}

#[test]
fn degenerate_specs_rejected() {
    let base = Preset::Synthetic.spec(4, 0);
    for frac in [0.0, 1.0] {
        let spec = PartitionSpec {
            train_fraction: frac,
            ..base.clone()
        };
        assert!(matches!(
            partition(&spec),
            Err(fedprompt::Error::Range { .. })
        ));
    }
    assert!(partition(&PartitionSpec {
        n_classes: 1,
        ..base.clone()
    })
    .is_err());
    assert!(partition(&PartitionSpec {
        n_clients: 0,
        ..base
    })
    .is_err());
}
