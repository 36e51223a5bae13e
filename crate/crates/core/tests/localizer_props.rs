mod common;

use std::collections::BTreeMap;

use common::leak_rule;
use leakguard::backbone::{FeatureMap, FeatureStack, LayerId};
use leakguard::localizer::{
    detect_leakage, leak_predicate, pool_subject_representation, refine_subject_attention,
    similarity_map, LocalizationMode, SimilarityMap, Thresholds,
};
use leakguard::masks::{extract_description_mask, SubjectMap};
use leakguard::{Grid, Matrix};
use proptest::prelude::*;

const GRID: Grid = Grid::new(3, 4);

fn sim_map() -> impl Strategy<Value = SimilarityMap<f64>> {
    proptest::collection::vec(-1.0f64..1.0, GRID.len())
        .prop_map(|values| SimilarityMap { grid: GRID, values })
}

fn stack(d: usize) -> impl Strategy<Value = FeatureStack<f64>> {
    proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, GRID.len() * d), 1..3)
        .prop_map(move |layers| {
            let layers = layers
                .into_iter()
                .enumerate()
                .map(|(i, v)| {
                    (
                        LayerId(format!("mid.{i}")),
                        FeatureMap {
                            grid: GRID,
                            values: Matrix::from_vec(GRID.len(), d, v).unwrap(),
                        },
                    )
                })
                .collect::<BTreeMap<_, _>>();
            FeatureStack { step: 0, layers }
        })
}

fn detect(r: &SimilarityMap<f64>, t: &SimilarityMap<f64>, th: Thresholds) -> Vec<bool> {
    detect_leakage(r, t, th, LocalizationMode::PostHoc, 0).unwrap().leak_map
}

proptest! {
    #[test]
    fn predicate_matches_literal_rule(r in -1.0f64..1.0, t in -1.0f64..1.0, tl in 0.0f64..0.5, tr in 0.0f64..1.0) {
        prop_assert_eq!(leak_predicate(r, t, Thresholds::new(tl, tr).unwrap()), leak_rule(r, t, tl, tr));
    }

    #[test]
    fn identical_maps_never_leak(m in sim_map()) {
        let report = detect_leakage(&m, &m, Thresholds::default(), LocalizationMode::PostHoc, 0).unwrap();
        prop_assert!(!report.overall);
    }

    #[test]
    fn raising_thresholds_only_removes_leaks(
        r in sim_map(), t in sim_map(),
        tl in 0.0f64..0.5, tr in 0.0f64..1.0,
        dl in 0.0f64..0.5, dr in 0.0f64..0.5,
    ) {
        let loose = detect(&r, &t, Thresholds::new(tl, tr).unwrap());
        let strict = detect(&r, &t, Thresholds::new(tl + dl, tr + dr).unwrap());
        prop_assert!(strict.iter().zip(&loose).all(|(&s, &l)| !s || l));
    }

    #[test]
    fn refined_weights_sum_to_one(v in proptest::collection::vec(0.0f64..1.0, GRID.len())) {
        let map = SubjectMap::new(GRID, v, 0).unwrap();
        let mask = extract_description_mask(&map);
        if let Ok(w) = refine_subject_attention(&map, &mask) {
            let s: f64 = w.weights.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(w.weights.iter().zip(&mask.bits).all(|(&x, &b)| b || x == 0.0));
        }
    }

    #[test]
    fn pooling_is_linear_in_features(
        f in stack(3), g in stack(3),
        v in proptest::collection::vec(0.0f64..1.0, GRID.len()),
        a in -2.0f64..2.0, b in -2.0f64..2.0,
    ) {
        prop_assume!(f.layers.len() == g.layers.len());
        let map = SubjectMap::new(GRID, v, 0).unwrap();
        let mask = extract_description_mask(&map);
        let Ok(w) = refine_subject_attention(&map, &mask) else { return Ok(()) };
        let mut mix = f.clone();
        for (id, fm) in mix.layers.iter_mut() {
            let gm = &g.layers[id];
            fm.values = Matrix::from_fn(fm.values.rows(), fm.values.cols(), |r, c| {
                a * f.layers[id].values.get(r, c) + b * gm.values.get(r, c)
            });
        }
        let pf = pool_subject_representation(&f, &w).unwrap();
        let pg = pool_subject_representation(&g, &w).unwrap();
        let pm = pool_subject_representation(&mix, &w).unwrap();
        for (id, vm) in &pm.layers {
            for (i, x) in vm.iter().enumerate() {
                let expect = a * pf.layers[id][i] + b * pg.layers[id][i];
                prop_assert!((x - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn similarity_lies_in_unit_interval(f in stack(3), v in proptest::collection::vec(0.0f64..1.0, GRID.len())) {
        let map = SubjectMap::new(GRID, v, 0).unwrap();
        let mask = extract_description_mask(&map);
        let Ok(w) = refine_subject_attention(&map, &mask) else { return Ok(()) };
        let rep = pool_subject_representation(&f, &w).unwrap();
        let s = similarity_map(&f, &rep).unwrap();
        prop_assert!(s.values.iter().all(|x| (-1.0 - 1e-9..=1.0 + 1e-9).contains(x)));
    }
}

#[test]
fn truth_table() {
    let th = Thresholds::default();
    let cases = [
        (0.9, 0.1, true),
        (0.5, 0.45, false),
        (0.35, 0.2, false),
        (0.45, 0.35, true),
        (0.2, 0.9, false),
    ];
    for (r, t, want) in cases {
        assert_eq!(leak_predicate(r, t, th), want, "c_ref={r} c_tgt={t}");
    }
}
