use std::path::Path;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Result};
use leakguard::evaluation::{
    calibrate_cl_bounds, evaluate_method, load_outputs, load_prompt_set, parse_prompt_set,
    read_csv_manifest, render_table, CalibrationPair, Clients, ConceptEmbedder, HttpEmbedder,
    HttpVisionChat, ImageEmbedder, Metric, MockLvlm, TextEmbedder, VisionChat, PUBLISHED_PROMPT_SET,
};
use leakguard::Real;

use super::{print_paths, write_json};
use crate::config::Settings;

const HTTP_TIMEOUT: Duration = Duration::from_secs(120);

enum Embedders {
    Mock(ConceptEmbedder),
    Http(HttpEmbedder),
}

impl Embedders {
    fn image(&self) -> &dyn ImageEmbedder {
        match self {
            Self::Mock(e) => e,
            Self::Http(e) => e,
        }
    }

    fn text(&self) -> &dyn TextEmbedder {
        match self {
            Self::Mock(e) => e,
            Self::Http(e) => e,
        }
    }
}

fn embedders(s: &Settings, mock: bool) -> Result<Embedders> {
    Ok(if mock {
        Embedders::Mock(ConceptEmbedder::new(&s.mock_spec()?))
    } else {
        Embedders::Http(HttpEmbedder::from_env(HTTP_TIMEOUT)?)
    })
}

pub fn run(
    s: &Settings,
    outputs: Option<&Path>,
    manifest: Option<&Path>,
    metrics: &[Metric],
    mock: bool,
    method: &str,
) -> Result<ExitCode> {
    let entries = match (manifest, outputs) {
        (Some(m), _) => read_csv_manifest(m)?,
        (None, Some(dir)) => load_outputs(dir)?,
        (None, None) => bail!("one of --outputs or --manifest is required"),
    };
    let needs_embedder = metrics
        .iter()
        .any(|m| matches!(m, Metric::Cl | Metric::TextAlignment | Metric::SetConsistency));
    let needs_chat = metrics.iter().any(|m| matches!(m, Metric::Q1 | Metric::Q2 | Metric::Q3));
    let emb = needs_embedder.then(|| embedders(s, mock)).transpose()?;
    let chat: Option<Box<dyn VisionChat>> = match (needs_chat, mock) {
        (false, _) => None,
        (true, true) => Some(Box::new(MockLvlm::new(&s.mock_spec()?))),
        (true, false) => Some(Box::new(HttpVisionChat::from_env(HTTP_TIMEOUT)?)),
    };
    let clients = Clients {
        image: emb.as_ref().map(Embedders::image),
        text: emb.as_ref().map(Embedders::text),
        chat: chat.as_deref(),
        retries: s.retries(),
    };
    let report = evaluate_method(method, &entries, metrics, &clients)?;
    for skip in &report.skipped {
        eprintln!("skipped {}: {}", skip.entry_id, skip.reason);
    }
    let out = s.out_dir();
    let mut paths = vec![s.echo()?];
    paths.push(write_json(&out.join("report.json"), &report)?);
    let table = render_table(std::slice::from_ref(&report));
    let table_path = out.join("report.txt");
    std::fs::write(&table_path, &table)?;
    paths.push(table_path);
    print!("{table}");
    print_paths(&paths);
    Ok(ExitCode::SUCCESS)
}

pub fn calibrate(s: &Settings, prompt_set: Option<&Path>, limit: Option<usize>, mock: bool) -> Result<ExitCode> {
    let mut entries = match prompt_set {
        Some(p) => load_prompt_set(p)?,
        None => parse_prompt_set(PUBLISHED_PROMPT_SET)?,
    };
    if let Some(n) = limit {
        entries.truncate(n);
    }
    let pairs = CalibrationPair::from_prompt_set(&entries);
    let backbone = s.backbone()?;
    let emb = embedders(s, mock)?;
    let bounds = calibrate_cl_bounds::<Real, _>(&backbone, &pairs, emb.image(), emb.text(), s.seed())?;
    let out = s.out_dir();
    let mut paths = vec![s.echo()?];
    paths.push(write_json(&out.join("calibration.json"), &bounds)?);
    println!(
        "no-leakage bound {:.4} (n={}, skipped {}), full-leakage bound {:.4} (n={}, skipped {})",
        bounds.no_leakage.mean,
        bounds.no_leakage.count,
        bounds.no_leakage.skipped,
        bounds.full_leakage.mean,
        bounds.full_leakage.count,
        bounds.full_leakage.skipped
    );
    print_paths(&paths);
    Ok(ExitCode::SUCCESS)
}
