use std::path::Path;
use std::process::ExitCode;

use anyhow::{ensure, Result};
use leakguard::io::{leak_overlay, load_rgb, save_rgb, write_arrays, NamedArray};
use leakguard::localizer::{localize_posthoc, PosthocOptions};
use leakguard::Real;

use super::{print_paths, write_json};
use crate::config::Settings;

/// Exit status when leakage is found under `--exit-on-leak`.
pub const LEAK_EXIT: u8 = 2;

pub fn run(s: &Settings, reference: &Path, target: &Path, exit_on_leak: bool) -> Result<ExitCode> {
    ensure!(!s.ref_subject.is_empty(), "missing required option --ref-subject");
    ensure!(!s.tgt_subject.is_empty(), "missing required option --tgt-subject");
    let ref_img = load_rgb(reference)?;
    let tgt_img = load_rgb(target)?;
    let backbone = s.backbone()?;
    let options = PosthocOptions {
        style: s.style.clone().unwrap_or_default(),
        seed: s.seed(),
        thresholds: s.thresholds()?,
    };
    let refs: Vec<&str> = s.ref_subject.iter().map(String::as_str).collect();
    let tgts: Vec<&str> = s.tgt_subject.iter().map(String::as_str).collect();
    let report = localize_posthoc::<Real, _>(&backbone, &ref_img, &tgt_img, &refs, &tgts, &options)?;

    let out = s.out_dir();
    let mut paths = vec![s.echo()?];
    paths.push(write_json(&out.join("report.json"), &report)?);
    let overlay = out.join("leak_overlay.png");
    save_rgb(&overlay, &leak_overlay(&tgt_img, report.grid, &report.leak_map)?)?;
    paths.push(overlay);
    let shape = [report.grid.height, report.grid.width];
    let arrays = out.join("report.lgarr");
    write_arrays(
        &arrays,
        &[
            NamedArray::f32("c_ref", &shape, report.c_ref.values.iter().map(|&v| v as f32)),
            NamedArray::f32("c_tgt", &shape, report.c_tgt.values.iter().map(|&v| v as f32)),
            NamedArray::bool("leak_map", &shape, report.leak_map.iter().copied()),
        ],
    )?;
    paths.push(arrays);
    for d in &report.diagnostics {
        eprintln!("warning: {d:?}");
    }
    eprintln!("leak: {} ({} patches)", report.overall, report.leak_count());
    print_paths(&paths);
    Ok(if exit_on_leak && report.overall {
        ExitCode::from(LEAK_EXIT)
    } else {
        ExitCode::SUCCESS
    })
}
