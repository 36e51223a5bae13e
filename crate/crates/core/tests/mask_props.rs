mod common;

use common::{closing_oracle, kmeans_oracle};
use leakguard::backbone::{AttentionRecord, LayerId};
use leakguard::masks::{
    aggregate_subject_map, extract_description_mask, extract_subject_mask, kmeans_1d,
    morphological_close, DescriptionMask, SubjectMap,
};
use leakguard::{Grid, Matrix};
use proptest::prelude::*;

/// Values drawn from a small lattice so ties and repeats are common.
fn lattice_values() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec((0u32..12).prop_map(|i| i as f64 / 11.0), 2..40)
}

fn grid_bits() -> impl Strategy<Value = (Grid, Vec<bool>)> {
    (1usize..9, 1usize..9).prop_flat_map(|(h, w)| {
        proptest::collection::vec(any::<bool>(), h * w).prop_map(move |b| (Grid::new(h, w), b))
    })
}

fn subject_map() -> impl Strategy<Value = SubjectMap<f64>> {
    (2usize..9, 2usize..9).prop_flat_map(|(h, w)| {
        proptest::collection::vec(0.0f64..1.0, h * w)
            .prop_map(move |v| SubjectMap::new(Grid::new(h, w), v, 0).unwrap())
    })
}

fn record(grid: Grid, tokens: usize, step: usize, raw: &[f64]) -> AttentionRecord<f64> {
    let mut probs = Matrix::from_vec(grid.len(), tokens, raw.to_vec()).unwrap();
    for r in 0..grid.len() {
        let s: f64 = probs.row(r).iter().sum();
        for x in probs.row_mut(r) {
            *x /= s;
        }
    }
    AttentionRecord {
        layer_id: LayerId::from("mid.0"),
        step,
        grid,
        probs,
    }
}

fn check_kmeans(values: &[f64], k: usize) -> Result<(), TestCaseError> {
    let got = kmeans_1d(values, k);
    let (labels, sse, unique) = kmeans_oracle(values, k);
    prop_assert!((got.sse - sse).abs() < 1e-9, "sse {} vs oracle {}", got.sse, sse);
    if unique {
        prop_assert_eq!(got.labels, labels);
    }
    Ok(())
}

proptest! {
    #[test]
    fn two_means_matches_exhaustive_oracle(v in lattice_values()) {
        check_kmeans(&v, 2)?;
    }

    #[test]
    fn three_means_matches_exhaustive_oracle(v in lattice_values()) {
        check_kmeans(&v, 3)?;
    }

    #[test]
    fn closing_matches_oracle((grid, bits) in grid_bits()) {
        prop_assert_eq!(morphological_close(&bits, grid), closing_oracle(&bits, grid));
    }

    #[test]
    fn closing_is_extensive_and_idempotent((grid, bits) in grid_bits()) {
        let once = morphological_close(&bits, grid);
        prop_assert!(bits.iter().zip(&once).all(|(&a, &b)| !a || b));
        prop_assert_eq!(morphological_close(&once, grid), once);
    }

    #[test]
    fn subject_mask_contains_top_cluster(map in subject_map()) {
        let mask = extract_subject_mask(&map);
        let km = kmeans_1d(&map.values, 2);
        if km.cluster_count() == 2 {
            let top = km.top_cluster();
            prop_assert!(top.iter().zip(&mask.bits).all(|(&a, &b)| !a || b));
        } else {
            prop_assert!(mask.is_empty());
        }
    }

    #[test]
    fn description_mask_respects_cap(map in subject_map()) {
        let mask = extract_description_mask(&map);
        prop_assert!(mask.count() <= DescriptionMask::cap(map.grid));
        prop_assert!(mask.count() <= map.grid.len().div_ceil(10));
    }

    #[test]
    fn aggregate_is_linear_in_records(
        a in proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, 12), 1..4),
        b in proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, 12), 1..4),
        token in 0usize..3,
    ) {
        let grid = Grid::new(2, 2);
        let ra: Vec<_> = a.iter().enumerate().map(|(i, v)| record(grid, 3, i, v)).collect();
        let rb: Vec<_> = b.iter().enumerate().map(|(i, v)| record(grid, 3, i, v)).collect();
        let all: Vec<&AttentionRecord<f64>> = ra.iter().chain(&rb).collect();
        let refs_a: Vec<_> = ra.iter().collect();
        let refs_b: Vec<_> = rb.iter().collect();
        let ma = aggregate_subject_map(&refs_a, token).unwrap();
        let mb = aggregate_subject_map(&refs_b, token).unwrap();
        let m = aggregate_subject_map(&all, token).unwrap();
        let (na, nb) = (ra.len() as f64, rb.len() as f64);
        for p in 0..grid.len() {
            let expect = (na * ma.values[p] + nb * mb.values[p]) / (na + nb);
            prop_assert!((m.values[p] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn description_mask_cap_examples() {
    assert_eq!(DescriptionMask::cap(Grid::new(8, 8)), 7);
    assert_eq!(DescriptionMask::cap(Grid::new(10, 10)), 10);
    assert_eq!(DescriptionMask::cap(Grid::new(1, 1)), 1);
}
