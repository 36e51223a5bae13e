mod common;

use std::sync::atomic::{AtomicUsize, Ordering};

use common::fixture::*;
use leakguard::evaluation::{
    evaluate_method, load_outputs, render_table, Clients, EntryImage, EntryManifest, FnChat,
    ManifestEntry, Metric, CSV_MANIFEST, ENTRY_MANIFEST,
};
use leakguard::io::RgbImage;
use leakguard::Error;

#[test]
fn hand_computed_scores_on_eight_instances() {
    let dir = tempfile::tempdir().unwrap();
    let entries = write_fixture(dir.path());
    let e = embedder();
    let chat = FnChat(canned);
    let clients = Clients {
        image: Some(&e),
        text: Some(&e),
        chat: Some(&chat),
        retries: 0,
    };
    let r = evaluate_method("fixture", &entries, &all_metrics(), &clients).unwrap();
    assert_eq!((r.instances, r.processed), (8, 8));

    let cl = r.cl.clone().unwrap();
    assert!((cl.mean - 3.0 / 8.0).abs() < 1e-12);
    assert!((cl.std - 15f64.sqrt() / 8.0).abs() < 1e-12);
    let ta = r.text_alignment.clone().unwrap();
    assert!((ta.mean - 5.0 / 8.0).abs() < 1e-12);
    let sc = r.set_consistency.clone().unwrap();
    assert!((sc.mean - 3.0 / (8.0 * 2f64.sqrt())).abs() < 1e-12);

    let q1 = r.q1.clone().unwrap();
    assert_eq!((q1.successes, q1.failures, q1.indeterminate), (5, 3, 0));
    assert_eq!(q1.rate, Some(5.0 / 8.0));
    assert_eq!(r.q2.clone().unwrap().rate, Some(5.0 / 8.0));
    let q3 = r.q3.clone().unwrap();
    assert_eq!((q3.successes, q3.failures, q3.indeterminate), (4, 3, 1));
    assert_eq!(q3.rate, Some(4.0 / 7.0));

    let table = render_table(&[r]);
    assert!(table.contains("fixture"));
    assert!(table.contains("note:"));
}

#[test]
fn missing_images_are_skipped_and_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut entries = write_fixture(dir.path());
    entries.push(ManifestEntry {
        entry_id: "gone".into(),
        reference_path: dir.path().join("reference.png"),
        target_path: dir.path().join("missing.png"),
        ref_subject: "A dog".into(),
        tgt_subject: "A cat".into(),
    });
    let e = embedder();
    let clients = Clients {
        image: Some(&e),
        text: Some(&e),
        chat: None,
        retries: 0,
    };
    let r = evaluate_method("fixture", &entries, &[Metric::Cl], &clients).unwrap();
    assert_eq!((r.instances, r.processed), (9, 8));
    assert_eq!(r.skipped.len(), 1);
    assert_eq!(r.skipped[0].entry_id, "gone");
    assert!((r.cl.unwrap().mean - 3.0 / 8.0).abs() < 1e-12);
}

#[test]
fn metric_without_client_is_rejected() {
    let clients = Clients {
        image: None,
        text: None,
        chat: None,
        retries: 0,
    };
    let err = evaluate_method("m", &[], &[Metric::Q1], &clients).unwrap_err();
    assert!(matches!(err, Error::Evaluation(_)));
    assert!(evaluate_method("m", &[], &[], &clients).is_err());
}

#[test]
fn transient_failures_are_retried() {
    let dir = tempfile::tempdir().unwrap();
    let entries = write_fixture(dir.path());
    let calls = AtomicUsize::new(0);
    let flaky = FnChat(|img: &RgbImage, text: &str| {
        if calls.fetch_add(1, Ordering::SeqCst).is_multiple_of(2) {
            Err(Error::Transport("connection reset".into()))
        } else {
            canned(img, text)
        }
    });
    let run = |retries| {
        let clients = Clients {
            image: None,
            text: None,
            chat: Some(&flaky),
            retries,
        };
        evaluate_method("m", &entries[..1], &[Metric::Q1], &clients)
            .unwrap()
            .q1
            .unwrap()
    };
    calls.store(0, Ordering::SeqCst);
    let with_retry = run(1);
    assert_eq!((with_retry.failures, with_retry.indeterminate), (1, 0));
    calls.store(0, Ordering::SeqCst);
    let without = run(0);
    assert_eq!((without.indeterminate, without.rate), (1, None));
}

#[test]
fn csv_manifest_and_entry_directories_load() {
    let dir = tempfile::tempdir().unwrap();
    let csv = "entry_id,reference_path,target_path,ref_subject,tgt_subject\n\
               a,ref.png,t0.png,A dog,A cat\n\
               a,ref.png,t1.png,A dog,A tree\n";
    std::fs::write(dir.path().join(CSV_MANIFEST), csv).unwrap();
    let rows = load_outputs(dir.path()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1].target_path, dir.path().join("t1.png"));
    assert_eq!(rows[1].tgt_subject, "A tree");

    let bad = tempfile::tempdir().unwrap();
    std::fs::write(
        bad.path().join(CSV_MANIFEST),
        "entry_id,reference_path,target_path,ref_subject,tgt_subject\nonly,two\n",
    )
    .unwrap();
    assert!(matches!(load_outputs(bad.path()), Err(Error::Parse { line: 2, .. })));

    let out = tempfile::tempdir().unwrap();
    for id in ["entry_002", "entry_001"] {
        let d = out.path().join(id);
        std::fs::create_dir(&d).unwrap();
        let m = EntryManifest {
            entry_id: id.into(),
            style: "stickers style".into(),
            reference: EntryImage {
                path: "reference.png".into(),
                subject: "A dog".into(),
            },
            targets: vec![EntryImage {
                path: "target_00.png".into(),
                subject: "A cat".into(),
            }],
        };
        std::fs::write(d.join(ENTRY_MANIFEST), serde_json::to_string(&m).unwrap()).unwrap();
    }
    let rows = load_outputs(out.path()).unwrap();
    let ids: Vec<_> = rows.iter().map(|r| r.entry_id.as_str()).collect();
    assert_eq!(ids, ["entry_001", "entry_002"]);
}
