mod common;

use common::*;
use leakguard::backbone::{run_generation, run_reference_generation, AttentionControl, GenerationOptions};
use leakguard::masks::morphology::morphological_close;
use leakguard::pipeline::RunConfig;
use leakguard::{Backbone, MockBackbone, MockSpec, Pipeline, Real};
use proptest::prelude::*;

#[test]
fn full_run_captures_every_bottleneck_layer_at_every_step() {
    let b = backbone(MockSpec::demo());
    let p = prompt(&b, &["A dog"]);
    let out = run_generation::<Real, _>(&b, &p, None, &GenerationOptions::seeded(3)).unwrap();
    let cfg = <MockBackbone as Backbone<Real>>::config(&b);
    for t in 1..=cfg.total_steps {
        assert_eq!(out.captures.cross_at(t).len(), cfg.bottleneck_layer_ids.len(), "step {t}");
        assert!(out.captures.features_at(t).is_ok());
    }
}

#[test]
fn capture_is_non_intrusive() {
    let b = backbone(MockSpec::demo());
    let p = prompt(&b, &["A cat"]);
    let on = run_generation::<Real, _>(&b, &p, None, &GenerationOptions::seeded(5)).unwrap();
    let off = GenerationOptions {
        capture: false,
        ..GenerationOptions::seeded(5)
    };
    let off = run_generation::<Real, _>(&b, &p, None, &off).unwrap();
    assert_eq!(on.image, off.image);
    assert!(off.captures.cross.is_empty());
}

#[test]
fn attention_record_rows_sum_to_one() {
    let b = backbone(MockSpec::demo());
    let p = prompt(&b, &["A dog", "A cat"]);
    let out = run_generation::<Real, _>(&b, &p, None, &GenerationOptions::seeded(0)).unwrap();
    for rec in out.captures.cross_all() {
        for r in 0..rec.probs.rows() {
            let s: f64 = rec.probs.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-5, "{} step {} row {r}: {s}", rec.layer_id, rec.step);
        }
    }
}

proptest! {
    #[test]
    fn mock_leak_strength_is_monotone(tau in 0.0f64..1.0, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let m = backbone(dog_spec(tau));
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(m.leak_strength("dog", lo) <= m.leak_strength("dog", hi));
    }
}

#[test]
fn subject_mask_is_planted_region_after_closing() {
    let spec = MockSpec::demo();
    let b = backbone(spec.clone());
    let pipe = Pipeline::new(&b, RunConfig::default());
    for word in ["dog", "cat", "tree", "hippo"] {
        let bundle = pipe
            .run_reference::<Real>(&prompt(&b, &[&format!("A {word}")]))
            .unwrap();
        let want = morphological_close(&region_bits(&spec, word), spec.grid);
        assert_eq!(bundle.masks[0].bits, want, "{word}");
    }
}

#[test]
fn planted_leak_is_found_at_alpha_one_and_gone_at_zero() {
    let spec = dog_spec(0.6);
    let b = backbone(spec.clone());
    let pipe = Pipeline::new(&b, RunConfig::default());
    let bundle = pipe.run_reference::<Real>(&prompt(&b, &["A dog"])).unwrap();
    let target = prompt(&b, &["A cat"]);
    let step = pipe.localization_step::<Real>().unwrap();

    let leaky = pipe.run_target(&target, &bundle, 1.0, Some(step)).unwrap().report.unwrap();
    assert!(leaky.overall);
    assert!(subset(&leaky.leak_map, &dilated_region(&spec, "dog")));

    let clean = pipe.run_target(&target, &bundle, 0.0, Some(step)).unwrap().report.unwrap();
    assert!(!clean.overall);
}

#[test]
fn zero_scale_lowers_masked_reference_attention() {
    let b = backbone(MockSpec::demo());
    let ref_prompt = prompt(&b, &["A dog"]);
    let (_, cache) = run_reference_generation::<Real, _>(&b, &ref_prompt, &GenerationOptions::seeded(0)).unwrap();
    let grid = b.spec().grid;
    let target = prompt(&b, &["A cat"]);
    let mass = |alpha: Real| {
        let control = AttentionControl::with_scales(
            &cache,
            grid,
            vec![alpha; grid.len()],
            vec![true; grid.len()],
            Default::default(),
        )
        .unwrap();
        run_generation(&b, &target, Some(&control), &GenerationOptions::seeded(1))
            .unwrap()
            .captures
            .scaled_masked_mass()
    };
    let (zero, one) = (mass(0.0), mass(1.0));
    assert!(zero < one, "{zero} vs {one}");
}
