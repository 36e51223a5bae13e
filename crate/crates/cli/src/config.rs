//! Flat settings shared by every command. A value given as a flag wins over
//! the config file, which wins over the built-in default.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use leakguard::localizer::Thresholds;
use leakguard::pipeline::Seeds;
use leakguard::search::DEFAULT_PRECISION;
use leakguard::shared_attention::ScalingScope;
use leakguard::{MockBackbone, MockSpec, RunConfig, SearchConfig};
use serde::{Deserialize, Serialize};

pub const DEFAULT_OUT: &str = "out";
pub const DEFAULT_RETRIES: usize = 2;
pub const CONFIG_ECHO: &str = "config.toml";

fn parse_scope(s: &str) -> Result<ScalingScope, String> {
    match s {
        "all-shared" => Ok(ScalingScope::AllShared),
        "bottleneck-only" => Ok(ScalingScope::BottleneckOnly),
        other => Err(format!("unknown scope `{other}` (all-shared | bottleneck-only)")),
    }
}

#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct Settings {
    /// Output directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// JSON description of the mock backbone; the built-in demo otherwise.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mock_spec: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Search precision p.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    /// Leak margin threshold.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_leak: Option<f64>,
    /// Relevance floor.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_rel: Option<f64>,
    /// Which shared layers are scaled: all-shared or bottleneck-only.
    #[arg(long, value_parser = parse_scope)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scope: Option<ScalingScope>,
    /// Style descriptor, e.g. "stickers style".
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub style: Option<String>,
    /// Reference subject; repeat for several.
    #[arg(long = "ref-subject")]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub ref_subject: Vec<String>,
    /// Target subject; each one is aligned separately.
    #[arg(long = "tgt-subject")]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub tgt_subject: Vec<String>,
    /// Skip the search and use this scale.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_alpha: Option<f64>,
    /// Extra attempts after a failed external call.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retries: Option<usize>,
}

impl Settings {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Fields set here win; the rest come from `file`.
    pub fn over(self, file: Settings) -> Self {
        fn pick<T>(a: Vec<T>, b: Vec<T>) -> Vec<T> {
            if a.is_empty() {
                b
            } else {
                a
            }
        }
        Self {
            out: self.out.or(file.out),
            mock_spec: self.mock_spec.or(file.mock_spec),
            seed: self.seed.or(file.seed),
            precision: self.precision.or(file.precision),
            t_leak: self.t_leak.or(file.t_leak),
            t_rel: self.t_rel.or(file.t_rel),
            scope: self.scope.or(file.scope),
            style: self.style.or(file.style),
            ref_subject: pick(self.ref_subject, file.ref_subject),
            tgt_subject: pick(self.tgt_subject, file.tgt_subject),
            fixed_alpha: self.fixed_alpha.or(file.fixed_alpha),
            retries: self.retries.or(file.retries),
        }
    }

    /// Fills every defaulted field.
    pub fn resolved(self) -> Self {
        let th = Thresholds::default();
        Self {
            out: Some(self.out.unwrap_or_else(|| DEFAULT_OUT.into())),
            seed: Some(self.seed.unwrap_or(0)),
            precision: Some(self.precision.unwrap_or(DEFAULT_PRECISION)),
            t_leak: Some(self.t_leak.unwrap_or(th.t_leak)),
            t_rel: Some(self.t_rel.unwrap_or(th.t_rel)),
            scope: Some(self.scope.unwrap_or_default()),
            retries: Some(self.retries.unwrap_or(DEFAULT_RETRIES)),
            ..self
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| DEFAULT_OUT.into())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn retries(&self) -> usize {
        self.retries.unwrap_or(DEFAULT_RETRIES)
    }

    pub fn thresholds(&self) -> Result<Thresholds> {
        let d = Thresholds::default();
        Ok(Thresholds::new(
            self.t_leak.unwrap_or(d.t_leak),
            self.t_rel.unwrap_or(d.t_rel),
        )?)
    }

    pub fn search(&self) -> Result<SearchConfig> {
        let c = SearchConfig::with_precision(self.precision.unwrap_or(DEFAULT_PRECISION));
        c.validate()?;
        Ok(c)
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        let seed = self.seed();
        Ok(RunConfig {
            search: self.search()?,
            thresholds: self.thresholds()?,
            seeds: Seeds {
                reference: seed,
                target: seed.wrapping_add(1),
            },
            scope: self.scope.unwrap_or_default(),
            fixed_alpha: self.fixed_alpha,
            localization_step: None,
        })
    }

    pub fn mock_spec(&self) -> Result<MockSpec> {
        match &self.mock_spec {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading mock spec {}", p.display()))?;
                Ok(MockSpec::from_json(&text)?)
            }
            None => Ok(MockSpec::demo()),
        }
    }

    pub fn backbone(&self) -> Result<MockBackbone> {
        Ok(MockBackbone::new(self.mock_spec()?)?)
    }

    pub fn style(&self) -> Result<String> {
        self.style
            .clone()
            .context("missing required option --style")
    }

    /// Creates the output directory and writes the resolved settings there.
    pub fn echo(&self) -> Result<PathBuf> {
        let out = self.out_dir();
        std::fs::create_dir_all(&out)
            .with_context(|| format!("creating {}", out.display()))?;
        let path = out.join(CONFIG_ECHO);
        std::fs::write(&path, toml::to_string(&self.clone().resolved())?)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_file_beats_default() {
        let flags = Settings {
            t_leak: Some(0.2),
            ..Default::default()
        };
        let file = Settings {
            t_leak: Some(0.3),
            t_rel: Some(0.5),
            ..Default::default()
        };
        let s = flags.over(file).resolved();
        assert_eq!(s.t_leak, Some(0.2));
        assert_eq!(s.t_rel, Some(0.5));
        assert_eq!(s.precision, Some(DEFAULT_PRECISION));
    }

    #[test]
    fn echo_round_trips() {
        let s = Settings {
            style: Some("stickers style".into()),
            ref_subject: vec!["A dog".into()],
            scope: Some(ScalingScope::BottleneckOnly),
            ..Default::default()
        }
        .resolved();
        let text = toml::to_string(&s).unwrap();
        assert!(text.contains("t-leak = 0.1"));
        let back: Settings = toml::from_str(&text).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(toml::from_str::<Settings>("bogus = 1").is_err());
    }
}
