use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use anyhow::{anyhow, bail, ensure, Context, Result};
use leakguard::io::RgbImage;
use leakguard::io::load_rgb;
use leakguard::localizer::{localize_posthoc, PosthocOptions};
use leakguard::search::{tune_parameter, Direction, Verdict};
use leakguard::Real;

use super::{print_paths, write_json};
use crate::config::Settings;

pub fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected `a,b`, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    Ok((parse(a)?, parse(b)?))
}

/// Runs the generator once per attempt until it prints two readable image
/// paths, one per line: reference, then target.
fn generate_pair(template: &str, theta: f64, dir: &Path, retries: usize) -> Result<(RgbImage, RgbImage)> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let cmd = template
        .replace("{theta}", &theta.to_string())
        .replace("{out}", &dir.display().to_string());
    let mut last = String::new();
    for attempt in 0..=retries {
        let output = Command::new("sh")
            .arg("-c")
            .arg(&cmd)
            .output()
            .with_context(|| format!("spawning `{cmd}`"))?;
        if !output.status.success() {
            last = format!(
                "{}: {}",
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            );
            log::warn!("generator attempt {} failed: {last}", attempt + 1);
            continue;
        }
        let stdout = String::from_utf8_lossy(&output.stdout);
        let paths: Vec<PathBuf> = stdout
            .lines()
            .map(|l| PathBuf::from(l.trim()))
            .filter(|p| p.is_file())
            .collect();
        if paths.len() < 2 {
            last = format!("expected two image paths on stdout, got `{}`", stdout.trim());
            log::warn!("generator attempt {} failed: {last}", attempt + 1);
            continue;
        }
        return Ok((load_rgb(&paths[0])?, load_rgb(&paths[1])?));
    }
    bail!("generator failed after {} attempts: {last}", retries + 1)
}

pub fn run(s: &Settings, template: &str, range: (f64, f64), direction: Direction) -> Result<ExitCode> {
    ensure!(template.contains("{theta}"), "generator template has no {{theta}} placeholder");
    ensure!(!s.ref_subject.is_empty(), "missing required option --ref-subject");
    ensure!(!s.tgt_subject.is_empty(), "missing required option --tgt-subject");
    let backbone = s.backbone()?;
    let options = PosthocOptions {
        style: s.style.clone().unwrap_or_default(),
        seed: s.seed(),
        thresholds: s.thresholds()?,
    };
    let refs: Vec<&str> = s.ref_subject.iter().map(String::as_str).collect();
    let tgts: Vec<&str> = s.tgt_subject.iter().map(String::as_str).collect();
    let out = s.out_dir();
    let config_path = s.echo()?;
    let mut probe = 0;
    let mut failure = None;
    let result = tune_parameter(range, direction, &s.search()?, |theta| {
        let dir = out.join("tune").join(format!("probe_{probe:02}"));
        probe += 1;
        let (r, t) = generate_pair(template, theta, &dir, s.retries()).map_err(|e| {
            let msg = format!("{e:#}");
            failure = Some(msg.clone());
            leakguard::Error::Generator(msg)
        })?;
        let report = localize_posthoc::<Real, _>(&backbone, &r, &t, &refs, &tgts, &options)?;
        Ok(Verdict {
            leak: report.overall,
            leak_patches: Some(report.leak_count()),
        })
    });
    let (theta, trace) = result.map_err(|e| match failure {
        Some(msg) => anyhow!("aborting tune: {msg}"),
        None => e.into(),
    })?;
    let trace_path = write_json(&out.join("tune_trace.json"), &trace)?;
    println!("theta* = {theta}");
    print_paths(&[config_path, trace_path]);
    Ok(ExitCode::SUCCESS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_parsing() {
        assert_eq!(parse_range("0.5, 1").unwrap(), (0.5, 1.0));
        assert!(parse_range("0.5").is_err());
    }
}
