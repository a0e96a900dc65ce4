use std::collections::BTreeSet;
use std::fs;

use cellrefine::datagen::{apply_perturbation, apportion, generate, GeneratorConfig, PerturbationConfig};
use cellrefine::dataset::{DatasetBundle, Split};
use cellrefine::longtail::{fit_tail_exponent, CcdfMode};

fn column_mean(rows: &[&[f64]], gene: usize) -> f64 {
    rows.iter().map(|r| r[gene]).sum::<f64>() / rows.len() as f64
}

#[test]
fn same_seed_writes_identical_files() {
    let cfg = GeneratorConfig {
        num_cells: 150,
        ood_cells: 10,
        perturbation: Some(PerturbationConfig::default()),
        seed: 7,
        ..GeneratorConfig::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let files = generate(&cfg).unwrap().write_dir(a.path()).unwrap();
    generate(&cfg).unwrap().write_dir(b.path()).unwrap();
    assert_eq!(files.len(), 5);
    for f in &files {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let other = generate(&GeneratorConfig { seed: 8, ..cfg }).unwrap();
    assert_ne!(
        other.dataset.matrix,
        DatasetBundle::read_dir(a.path()).unwrap().dataset.matrix
    );
}

#[test]
fn files_round_trip() {
    let cfg = GeneratorConfig {
        num_cells: 80,
        ..GeneratorConfig::default()
    };
    let bundle = generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = bundle.write_dir(dir.path()).unwrap();
    assert_eq!(files.len(), 4);
    assert_eq!(DatasetBundle::read_dir(dir.path()).unwrap(), bundle);
}

#[test]
fn type_frequencies_follow_the_tail_exponent() {
    // Full-population CCDF of rank^(-1/alpha) counts recovers alpha.
    for alpha in [0.3, 0.4, 0.8] {
        let counts: Vec<f64> = apportion(40, 10_000_000, alpha, false)
            .iter()
            .map(|&c| c as f64)
            .collect();
        let fit = fit_tail_exponent(&counts, 1.0, CcdfMode::Full).unwrap();
        assert!((fit.alpha - alpha).abs() < 0.05, "alpha {alpha}: fitted {}", fit.alpha);
    }
    let bundle = generate(&GeneratorConfig::default()).unwrap();
    let counts = bundle.dataset.type_counts();
    assert_eq!(counts.len(), 12);
    assert_eq!(counts.values().sum::<usize>(), 3000);
}

#[test]
fn markers_are_over_expressed_in_their_type() {
    let cfg = GeneratorConfig {
        uniform: true,
        num_cells: 1200,
        batch_shift: 0.0,
        depth_range: (1.0, 1.0),
        ..GeneratorConfig::default()
    };
    let bundle = generate(&cfg).unwrap();
    let data = &bundle.dataset;
    let onto = &bundle.ontology;
    let gene_index = |g: &str| data.genes.iter().position(|x| x == g).unwrap();
    for t in cfg.labeled_types() {
        let own: Vec<&[f64]> = (0..data.num_cells())
            .filter(|&i| data.meta[i].cell_type == t)
            .map(|i| data.expression(i))
            .collect();
        for marker in bundle.catalog.markers(t).unwrap() {
            let g = gene_index(&marker.gene);
            // Background: cells whose lineage does not include the marker's owner.
            let background: Vec<&[f64]> = (0..data.num_cells())
                .filter(|&i| {
                    let c = &data.meta[i].cell_type;
                    c != t && !onto.ancestors(c).contains(&t)
                })
                .map(|i| data.expression(i))
                .collect();
            let gap = column_mean(&own, g) - column_mean(&background, g);
            assert!(
                gap > 0.5 * cfg.marker_factor * cfg.base_scale,
                "{t}/{}: gap {gap}",
                marker.gene
            );
        }
    }
}

#[test]
fn batch_shift_moves_batch_means() {
    let base = GeneratorConfig {
        uniform: true,
        num_cells: 4000,
        depth_range: (1.0, 1.0),
        ..GeneratorConfig::default()
    };
    let gap = |shift: f64| {
        let bundle = generate(&GeneratorConfig {
            batch_shift: shift,
            ..base.clone()
        })
        .unwrap();
        let d = &bundle.dataset;
        let total = |b: usize| {
            let rows: Vec<usize> = (0..d.num_cells()).filter(|&i| d.meta[i].batch == b).collect();
            rows.iter().map(|&i| d.expression(i).iter().sum::<f64>()).sum::<f64>() / rows.len() as f64
        };
        (total(0) - total(1)).abs() / total(0)
    };
    assert!(gap(0.0) < 0.02, "no shift: {}", gap(0.0));
    assert!(gap(0.5) > gap(0.0));
}

#[test]
fn splits_are_stratified_and_ood_is_separate() {
    let cfg = GeneratorConfig {
        num_cells: 300,
        ood_cells: 30,
        ..GeneratorConfig::default()
    };
    let data = generate(&cfg).unwrap().dataset;
    let train_types: BTreeSet<&str> = data
        .indices(Split::Train)
        .iter()
        .map(|&i| data.meta[i].cell_type.as_str())
        .collect();
    assert_eq!(train_types.len(), 12, "every type keeps a training cell");
    let ood = data.indices(Split::Ood);
    assert_eq!(ood.len(), 30);
    assert!(ood.iter().all(|&i| data.meta[i].batch == cfg.num_batches));
}

#[test]
fn perturbation_is_recoverable_without_noise() {
    let cfg = GeneratorConfig {
        num_cells: 50,
        ..GeneratorConfig::default()
    };
    let data = generate(&cfg).unwrap().dataset;
    let signature: Vec<f64> = (0..data.num_genes())
        .map(|g| if g % 3 == 0 { 0.5 } else { 0.0 })
        .collect();
    let paired = apply_perturbation(&data, &signature, 0.0, 1).unwrap();
    let post = paired.perturbed.as_ref().unwrap();
    for i in 0..data.num_cells() {
        for (g, s) in signature.iter().enumerate() {
            assert!((post.get(i, g) - data.matrix.get(i, g) - s).abs() < 1e-12);
        }
    }
}
