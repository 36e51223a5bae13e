use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{ensure, Context, Result};
use leakguard::evaluation::{EntryImage, EntryManifest, ENTRY_MANIFEST};
use leakguard::io::{leak_overlay, load_rgb, save_grayscale_png, save_rgb, write_arrays, NamedArray};
use leakguard::pipeline::{AlignmentResult, SetResult};
use leakguard::search::AlignmentTrace;
use leakguard::{MockBackbone, Pipeline, PromptSpec, Real};
use serde::Serialize;

use super::{print_paths, write_json};
use crate::config::Settings;

/// Pixel size of one patch in exported map images.
const MAP_CELL: u32 = 16;

#[derive(Serialize)]
struct TargetTrace<'a> {
    subject: &'a str,
    alphas: &'a [f64],
    generation_passes: usize,
    final_leak: bool,
    traces: &'a [AlignmentTrace],
}

/// Smallest unused `entry_NNN` directory below `out`.
pub fn next_entry_dir(out: &Path) -> Result<PathBuf> {
    let mut next = 0;
    if out.is_dir() {
        for e in std::fs::read_dir(out)? {
            let name = e?.file_name();
            if let Some(n) = name
                .to_str()
                .and_then(|n| n.strip_prefix("entry_"))
                .and_then(|n| n.parse::<usize>().ok())
            {
                next = next.max(n + 1);
            }
        }
    }
    let dir = out.join(format!("entry_{next:03}"));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn prompts(s: &Settings, pipeline: &Pipeline<'_, MockBackbone>) -> Result<(PromptSpec, Vec<PromptSpec>)> {
    let style = s.style()?;
    ensure!(!s.ref_subject.is_empty(), "missing required option --ref-subject");
    ensure!(!s.tgt_subject.is_empty(), "at least one --tgt-subject is required");
    let refs: Vec<&str> = s.ref_subject.iter().map(String::as_str).collect();
    let reference = pipeline.prompt::<Real>(&refs, &style)?;
    let targets = s
        .tgt_subject
        .iter()
        .map(|t| pipeline.prompt::<Real>(&[t.as_str()], &style))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((reference, targets))
}

fn normalized(values: &[f64]) -> Vec<f64> {
    let max = values.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        values.iter().map(|v| v / max).collect()
    } else {
        values.to_vec()
    }
}

fn write_target(dir: &Path, j: usize, t: &AlignmentResult<Real>, paths: &mut Vec<PathBuf>) -> Result<String> {
    let stem = format!("target_{j:02}");
    let image = dir.join(format!("{stem}.png"));
    save_rgb(&image, &t.image)?;
    paths.push(image);
    let r = &t.final_report;
    paths.push(write_json(&dir.join(format!("{stem}_report.json")), r)?);
    let subject = t.prompt.primary().text.as_str();
    paths.push(write_json(
        &dir.join(format!("{stem}_trace.json")),
        &TargetTrace {
            subject,
            alphas: &t.alphas,
            generation_passes: t.generation_passes(),
            final_leak: r.overall,
            traces: &t.traces,
        },
    )?);
    let overlay = dir.join(format!("{stem}_leak.png"));
    save_rgb(&overlay, &leak_overlay(&t.image, r.grid, &r.leak_map)?)?;
    paths.push(overlay);
    let shape = [r.grid.height, r.grid.width];
    let arrays = dir.join(format!("{stem}.lgarr"));
    write_arrays(
        &arrays,
        &[
            NamedArray::f32("c_ref", &shape, r.c_ref.values.iter().map(|&v| v as f32)),
            NamedArray::f32("c_tgt", &shape, r.c_tgt.values.iter().map(|&v| v as f32)),
            NamedArray::bool("leak_map", &shape, r.leak_map.iter().copied()),
            NamedArray::f32("scales", &shape, t.scales.iter().map(|&v| v as f32)),
        ],
    )?;
    paths.push(arrays);
    Ok(subject.to_string())
}

fn write_entry(dir: &Path, set: &SetResult<Real, leakguard::backbone::MockLatent>, style: &str) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    let bundle = &set.reference;
    let reference = dir.join("reference.png");
    save_rgb(&reference, &bundle.image)?;
    paths.push(reference);
    let mut arrays = Vec::new();
    for (i, (map, mask)) in bundle.maps.iter().zip(&bundle.masks).enumerate() {
        let shape = [map.grid.height, map.grid.width];
        let map_png = dir.join(format!("reference_map_{i}.png"));
        save_grayscale_png(&map_png, map.grid, &normalized(&map.values), 0.0, 1.0, MAP_CELL)?;
        let mask_values: Vec<f64> = mask.bits.iter().map(|&b| b as u8 as f64).collect();
        let mask_png = dir.join(format!("reference_mask_{i}.png"));
        save_grayscale_png(&mask_png, mask.grid, &mask_values, 0.0, 1.0, MAP_CELL)?;
        paths.extend([map_png, mask_png]);
        arrays.push(NamedArray::f32(&format!("map_{i}"), &shape, map.values.iter().map(|&v| v as f32)));
        arrays.push(NamedArray::bool(&format!("mask_{i}"), &shape, mask.bits.iter().copied()));
    }
    let ref_arrays = dir.join("reference.lgarr");
    write_arrays(&ref_arrays, &arrays)?;
    paths.push(ref_arrays);

    let mut targets = Vec::new();
    for (j, t) in set.targets.iter().enumerate() {
        let subject = write_target(dir, j, t, &mut paths)?;
        targets.push(EntryImage {
            path: format!("target_{j:02}.png").into(),
            subject,
        });
    }
    let entry_id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("entry")
        .to_string();
    let manifest = EntryManifest {
        entry_id,
        style: style.to_string(),
        reference: EntryImage {
            path: "reference.png".into(),
            subject: bundle
                .prompt
                .subjects
                .iter()
                .map(|s| s.text.as_str())
                .collect::<Vec<_>>()
                .join(" and "),
        },
        targets,
    };
    paths.push(write_json(&dir.join(ENTRY_MANIFEST), &manifest)?);
    Ok(paths)
}

pub fn run(s: &Settings, ref_image: Option<&Path>) -> Result<ExitCode> {
    let backbone = s.backbone()?;
    let pipeline = Pipeline::new(&backbone, s.run_config()?);
    let (reference, targets) = prompts(s, &pipeline)?;
    let set = match ref_image {
        Some(p) => pipeline.align_from_real::<Real>(&load_rgb(p)?, &reference, &targets)?,
        None => pipeline.align_set::<Real>(&reference, &targets)?,
    };
    let mut paths = vec![s.echo()?];
    let dir = next_entry_dir(&s.out_dir())?;
    paths.extend(write_entry(&dir, &set, &s.style()?)?);
    for t in &set.targets {
        eprintln!(
            "{}: alpha* = {:?}, passes = {}, leak = {}",
            t.prompt.primary().text,
            t.alphas,
            t.generation_passes(),
            t.final_report.overall
        );
    }
    print_paths(&paths);
    Ok(ExitCode::SUCCESS)
}

/// Reference plus the first target at a fixed scale; prints the two image
/// paths, reference first.
pub fn render_pair(s: &Settings, alpha: f64) -> Result<ExitCode> {
    let s = Settings {
        fixed_alpha: Some(alpha),
        ..s.clone()
    };
    let backbone = s.backbone()?;
    let pipeline = Pipeline::new(&backbone, s.run_config()?);
    let (reference, targets) = prompts(&s, &pipeline)?;
    let set = pipeline.align_set::<Real>(&reference, &targets[..1])?;
    s.echo()?;
    let out = s.out_dir();
    let (r, t) = (out.join("reference.png"), out.join("target.png"));
    save_rgb(&r, &set.reference.image)?;
    save_rgb(&t, &set.targets[0].image)?;
    print_paths(&[r, t]);
    Ok(ExitCode::SUCCESS)
}
