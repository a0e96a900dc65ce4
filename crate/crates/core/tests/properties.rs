use std::collections::BTreeSet;

use cellrefine::eval::{classification_metrics, pearson, recall_at_k, top_k};
use cellrefine::longtail::{fit_tail_exponent, CcdfMode};
use cellrefine::ontology::{parent_lineage_pairs, CellOntology, TypePair};
use proptest::prelude::*;

/// Random tree: node `i > 0` hangs under a node with a smaller index.
fn tree() -> impl Strategy<Value = CellOntology> {
    (1usize..=50)
        .prop_flat_map(|n| {
            let parents: Vec<_> = (1..n).map(|i| 0..i).collect();
            (Just(n), parents)
        })
        .prop_map(|(n, parents)| {
            let nodes: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
            let edges: Vec<(String, String)> = parents
                .iter()
                .enumerate()
                .map(|(c, &p)| (nodes[p].clone(), nodes[c + 1].clone()))
                .collect();
            CellOntology::new(nodes, &edges).unwrap()
        })
}

proptest! {
    #[test]
    fn lineage_pairs_are_unordered_siblings(o in tree()) {
        let pairs = parent_lineage_pairs(&o);
        for p in &pairs {
            let (a, b) = (p.first(), p.second());
            prop_assert_ne!(a, b);
            prop_assert_eq!(o.parent(a), o.parent(b));
            prop_assert_eq!(o.level(a), o.level(b));
            prop_assert_eq!(&TypePair::new(b, a), p);
        }
        // Every sibling pair is present.
        let nodes = o.nodes();
        let mut expected = BTreeSet::new();
        for a in nodes {
            for b in nodes {
                if a < b && o.parent(a).is_some() && o.parent(a) == o.parent(b) {
                    expected.insert(TypePair::new(a, b));
                }
            }
        }
        prop_assert_eq!(pairs, expected);
    }

    #[test]
    fn metrics_are_permutation_equivariant(
        pairs in prop::collection::vec((0usize..5, 0usize..5), 1..40),
        seed in any::<u64>(),
    ) {
        let (t, p): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let mut order: Vec<usize> = (0..t.len()).collect();
        let mut s = seed;
        for i in (1..order.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (s >> 33) as usize % (i + 1));
        }
        let t2: Vec<usize> = order.iter().map(|&i| t[i]).collect();
        let p2: Vec<usize> = order.iter().map(|&i| p[i]).collect();
        let a = classification_metrics(&t, &p).unwrap();
        let b = classification_metrics(&t2, &p2).unwrap();
        prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
        prop_assert!((a.weighted_f1 - b.weighted_f1).abs() < 1e-12);
        prop_assert_eq!(a.accuracy, b.accuracy);
        prop_assert!((0.0..=1.0).contains(&a.macro_f1));
        prop_assert!((0.0..=1.0).contains(&a.weighted_f1));
    }

    #[test]
    fn equal_supports_make_weighted_equal_macro(
        classes in 1usize..5,
        per in 1usize..6,
        preds in prop::collection::vec(0usize..5, 25),
    ) {
        let t: Vec<usize> = (0..classes * per).map(|i| i / per).collect();
        let p: Vec<usize> = t.iter().zip(&preds).map(|(_, &q)| q % classes).collect();
        let m = classification_metrics(&t, &p).unwrap();
        prop_assert!((m.macro_f1 - m.weighted_f1).abs() < 1e-12);
    }

    #[test]
    fn recall_is_monotone_in_k(
        rows in prop::collection::vec(prop::collection::vec(-3i32..3, 6), 1..20),
        labels in prop::collection::vec(0usize..6, 20),
    ) {
        let scores: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
        let t = &labels[..scores.len()];
        let mut last = 0.0;
        for k in 1..=6 {
            let r = recall_at_k(t, &scores, k).unwrap();
            prop_assert!(r >= last);
            last = r;
        }
        prop_assert_eq!(last, 1.0);
        prop_assert_eq!(top_k(&scores[0], 6).len(), 6);
    }

    #[test]
    fn pearson_is_scale_and_shift_invariant(
        xs in prop::collection::vec(-10.0f64..10.0, 3..30),
        a in 0.1f64..5.0,
        b in -5.0f64..5.0,
    ) {
        let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x + (i as f64).sin()).collect();
        let Ok(r) = pearson(&xs, &ys) else { return Ok(()); };
        let scaled: Vec<f64> = ys.iter().map(|y| a * y + b).collect();
        prop_assert!((pearson(&xs, &scaled).unwrap() - r).abs() < 1e-9);
        prop_assert!((-1.0..=1.0).contains(&r));
    }

    #[test]
    fn tail_fit_is_scale_invariant(
        counts in prop::collection::vec(1.0f64..1e5, 4..30),
        k in 1.0f64..100.0,
    ) {
        for mode in [CcdfMode::TailOnly, CcdfMode::Full] {
            let Ok(a) = fit_tail_exponent(&counts, 1.0, mode) else { continue };
            let scaled: Vec<f64> = counts.iter().map(|c| c * k).collect();
            let b = fit_tail_exponent(&scaled, 1.0, mode).unwrap();
            prop_assert!((a.alpha - b.alpha).abs() < 1e-9 * a.alpha.abs().max(1.0));
        }
    }
}
