//! Bisection for the largest leak-free scale, and its reuse for tuning an
//! arbitrary scalar parameter of an external generator.

use serde::{Deserialize, Serialize};

use crate::backbone::Provenance;
use crate::error::{Error, Result};

pub const DEFAULT_PRECISION: f64 = 0.03125;

/// Smallest `n` with `2^-n ≤ p`, plus one for the probe at α = 1.
pub fn required_evals(precision: f64) -> usize {
    let mut n = 0;
    let mut width = 1.0f64;
    while width > precision {
        width /= 2.0;
        n += 1;
    }
    n + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub precision: f64,
    pub max_evals: usize,
    /// Probe α = 0 when every other probe leaked instead of assuming it is
    /// clean. Costs one evaluation beyond the usual bound.
    pub verify_floor: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self::with_precision(DEFAULT_PRECISION)
    }
}

impl SearchConfig {
    pub fn with_precision(precision: f64) -> Self {
        Self {
            precision,
            max_evals: required_evals(precision.clamp(f64::MIN_POSITIVE, 1.0)),
            verify_floor: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.precision > 0.0 && self.precision <= 1.0) {
            return Err(Error::Config(format!(
                "precision must lie in (0, 1], got {}",
                self.precision
            )));
        }
        let need = required_evals(self.precision);
        if self.max_evals < need {
            return Err(Error::Config(format!(
                "max_evals {} is below the {need} evaluations precision {} needs",
                self.max_evals, self.precision
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    Half,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub alpha: f64,
    pub leak: bool,
    pub mode: ProbeMode,
    /// Leaking patches behind the verdict, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leak_patches: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Converged,
    NoLeakAtOne,
    LeakAtZero,
    NonMonotoneDetected,
    EvalCap,
    /// Search disabled; the scale was given.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentTrace {
    pub probes: Vec<Probe>,
    pub alpha_star: f64,
    pub termination: Termination,
    pub precision: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Provenance>,
}

impl AlignmentTrace {
    pub fn fixed(alpha: f64) -> Self {
        Self {
            probes: Vec::new(),
            alpha_star: alpha,
            termination: Termination::Fixed,
            precision: 0.0,
            warnings: Vec::new(),
            subject: None,
            reference: None,
        }
    }

    /// Predicate evaluations, i.e. half generations.
    pub fn half_generations(&self) -> usize {
        self.probes.iter().filter(|p| p.mode == ProbeMode::Half).count()
    }

    pub fn full_generations(&self) -> usize {
        self.probes.iter().filter(|p| p.mode == ProbeMode::Full).count()
    }

    /// A clean verdict above a leaky one anywhere in the probe list.
    pub fn is_non_monotone(&self) -> bool {
        let half = || self.probes.iter().filter(|p| p.mode == ProbeMode::Half);
        let lowest_leak = half()
            .filter(|p| p.leak)
            .map(|p| p.alpha)
            .fold(f64::INFINITY, f64::min);
        half().any(|p| !p.leak && p.alpha > lowest_leak)
    }

    pub fn final_verdict(&self) -> Option<bool> {
        self.probes
            .iter()
            .rev()
            .find(|p| p.mode == ProbeMode::Full)
            .map(|p| p.leak)
    }
}

/// Verdict of one predicate evaluation, with optional detail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Verdict {
    pub leak: bool,
    pub leak_patches: Option<usize>,
}

impl From<bool> for Verdict {
    fn from(leak: bool) -> Self {
        Self {
            leak,
            leak_patches: None,
        }
    }
}

/// Bisection over a fallible predicate. Errors from the predicate abort
/// the search.
pub fn try_binary_search_scale<V: Into<Verdict>>(
    mut leak: impl FnMut(f64) -> Result<V>,
    config: &SearchConfig,
) -> Result<(f64, AlignmentTrace)> {
    config.validate()?;
    let mut trace = AlignmentTrace {
        probes: Vec::new(),
        alpha_star: 1.0,
        termination: Termination::Converged,
        precision: config.precision,
        warnings: Vec::new(),
        subject: None,
        reference: None,
    };
    let mut probe = |alpha: f64, trace: &mut AlignmentTrace| -> Result<bool> {
        let v: Verdict = leak(alpha)?.into();
        trace.probes.push(Probe {
            alpha,
            leak: v.leak,
            mode: ProbeMode::Half,
            leak_patches: v.leak_patches,
        });
        Ok(v.leak)
    };

    if !probe(1.0, &mut trace)? {
        trace.termination = Termination::NoLeakAtOne;
        return Ok((1.0, trace));
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut lo_verified = false;
    let mut capped = false;
    while hi - lo > config.precision {
        if trace.probes.len() >= config.max_evals {
            capped = true;
            break;
        }
        let mid = 0.5 * (lo + hi);
        if probe(mid, &mut trace)? {
            hi = mid;
        } else {
            lo = mid;
            lo_verified = true;
        }
    }

    trace.termination = if capped {
        Termination::EvalCap
    } else {
        Termination::Converged
    };
    if !lo_verified {
        if config.verify_floor {
            if probe(0.0, &mut trace)? {
                trace.termination = Termination::LeakAtZero;
                trace
                    .warnings
                    .push("leakage persists at alpha = 0; returning 0".into());
            }
        } else {
            trace.termination = Termination::LeakAtZero;
            trace.warnings.push(
                "every probed scale leaked; returning alpha = 0 without verifying it".into(),
            );
        }
    }
    if trace.is_non_monotone() {
        trace.termination = Termination::NonMonotoneDetected;
        trace
            .warnings
            .push("non-monotone leak verdicts; returning the best verified-clean scale".into());
    }
    trace.alpha_star = lo;
    Ok((lo, trace))
}

/// Bisection for the largest α in `[0, 1]` whose verdict is clean.
pub fn binary_search_scale(
    mut leak: impl FnMut(f64) -> bool,
    config: &SearchConfig,
) -> (f64, AlignmentTrace) {
    try_binary_search_scale(|a| Ok(leak(a)), config).expect("infallible predicate")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Leakage grows with θ.
    Increasing,
    /// Leakage grows as θ decreases.
    Decreasing,
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "increasing" | "inc" => Ok(Self::Increasing),
            "decreasing" | "dec" => Ok(Self::Decreasing),
            other => Err(Error::Config(format!("unknown direction `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneTrace {
    pub range: (f64, f64),
    pub direction: Direction,
    /// `(θ, leak)` in probe order.
    pub probes: Vec<(f64, bool)>,
    pub theta_star: f64,
    pub search: AlignmentTrace,
}

/// Maps the unit search variable onto the parameter range so that larger
/// values always mean more leakage.
pub fn theta_of(u: f64, range: (f64, f64), direction: Direction) -> f64 {
    let (a, b) = range;
    match direction {
        Direction::Increasing => a + u * (b - a),
        Direction::Decreasing => b - u * (b - a),
    }
}

/// Bisection over a parameter range with a fallible leak predicate on θ.
pub fn tune_parameter<V: Into<Verdict>>(
    range: (f64, f64),
    direction: Direction,
    config: &SearchConfig,
    mut leak_at: impl FnMut(f64) -> Result<V>,
) -> Result<(f64, TuneTrace)> {
    let (a, b) = range;
    if !a.is_finite() || !b.is_finite() || a > b {
        return Err(Error::Config(format!("invalid parameter range [{a}, {b}]")));
    }
    config.validate()?;
    let mut probes = Vec::new();
    if a == b {
        let v: Verdict = leak_at(a)?.into();
        probes.push((a, v.leak));
        let mut search = AlignmentTrace::fixed(1.0);
        search.termination = if v.leak {
            Termination::LeakAtZero
        } else {
            Termination::NoLeakAtOne
        };
        search.probes.push(Probe {
            alpha: 1.0,
            leak: v.leak,
            mode: ProbeMode::Half,
            leak_patches: v.leak_patches,
        });
        search.precision = config.precision;
        return Ok((
            a,
            TuneTrace {
                range,
                direction,
                probes,
                theta_star: a,
                search,
            },
        ));
    }
    let (u_star, search) = try_binary_search_scale(
        |u| {
            let theta = theta_of(u, range, direction);
            let v: Verdict = leak_at(theta)?.into();
            probes.push((theta, v.leak));
            Ok(v)
        },
        config,
    )?;
    let theta_star = theta_of(u_star, range, direction);
    Ok((
        theta_star,
        TuneTrace {
            range,
            direction,
            probes,
            theta_star,
            search,
        },
    ))
}
