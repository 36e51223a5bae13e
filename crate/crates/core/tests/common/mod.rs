#![allow(dead_code)]

use leakguard::backbone::{rect, LeakCurve};
use leakguard::masks::morphology::dilate;
use leakguard::pipeline::RunConfig;
use leakguard::{Grid, MockBackbone, MockSpec, Pipeline, PromptSpec, Real};

pub mod fixture;

pub const STYLE: &str = "stickers style";

/// The demo scene with every planted leak removed.
pub fn clean_spec() -> MockSpec {
    MockSpec {
        leaks: Vec::new(),
        ..MockSpec::demo()
    }
}

/// The demo scene where the dog leaks above `tau`.
pub fn dog_spec(tau: f64) -> MockSpec {
    clean_spec().with_leak("dog", None, LeakCurve::threshold(tau))
}

pub fn backbone(spec: MockSpec) -> MockBackbone {
    MockBackbone::new(spec).expect("valid mock spec")
}

pub fn prompt(b: &MockBackbone, subjects: &[&str]) -> PromptSpec {
    Pipeline::new(b, RunConfig::default())
        .prompt::<Real>(subjects, STYLE)
        .expect("resolvable prompt")
}

pub fn region_bits(spec: &MockSpec, word: &str) -> Vec<bool> {
    let mut bits = vec![false; spec.grid.len()];
    for &p in spec.region_of(word).expect("known concept") {
        bits[p] = true;
    }
    bits
}

pub fn dilated_region(spec: &MockSpec, word: &str) -> Vec<bool> {
    dilate(&region_bits(spec, word), spec.grid)
}

pub fn subset(a: &[bool], b: &[bool]) -> bool {
    a.iter().zip(b).all(|(&x, &y)| !x || y)
}

pub fn block(grid: Grid, row: usize, col: usize, h: usize, w: usize) -> Vec<usize> {
    rect(grid, row, col, h, w)
}

/// Best contiguous partition of the sorted distinct values into `k` groups
/// by brute force over every split. Returns per-value labels, the SSE and
/// whether the optimum is unique.
pub fn kmeans_oracle(values: &[f64], k: usize) -> (Vec<usize>, f64, bool) {
    let mut distinct: Vec<f64> = values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let d = distinct.len();
    if d <= k {
        let labels = values
            .iter()
            .map(|v| distinct.iter().position(|x| x == v).unwrap())
            .collect();
        return (labels, 0.0, true);
    }
    let sse_of = |cuts: &[usize]| -> (Vec<usize>, f64) {
        // cuts: indices into `distinct` where a new group starts
        let group = |v: f64| {
            let i = distinct.iter().position(|&x| x == v).unwrap();
            cuts.iter().filter(|&&c| i >= c).count()
        };
        let labels: Vec<usize> = values.iter().map(|&v| group(v)).collect();
        let mut sse = 0.0;
        for g in 0..k {
            let members: Vec<f64> = values
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == g)
                .map(|(&v, _)| v)
                .collect();
            let mean = members.iter().sum::<f64>() / members.len() as f64;
            sse += members.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
        }
        (labels, sse)
    };
    let mut candidates = Vec::new();
    match k {
        2 => {
            for a in 1..d {
                candidates.push(sse_of(&[a]));
            }
        }
        3 => {
            for a in 1..d {
                for b in a + 1..d {
                    candidates.push(sse_of(&[a, b]));
                }
            }
        }
        _ => panic!("oracle supports k = 2 or 3"),
    }
    candidates.sort_by(|x, y| x.1.total_cmp(&y.1));
    let unique = candidates.len() < 2 || candidates[1].1 - candidates[0].1 > 1e-9;
    let (labels, sse) = candidates.swap_remove(0);
    (labels, sse, unique)
}

/// Dilate-then-erode with a 3×3 element, written cell by cell.
pub fn closing_oracle(bits: &[bool], grid: Grid) -> Vec<bool> {
    let (h, w) = (grid.height as isize, grid.width as isize);
    let at = |v: &[bool], r: isize, c: isize| v[(r * w + c) as usize];
    let inside = |r: isize, c: isize| r >= 0 && r < h && c >= 0 && c < w;
    let mut dil = vec![false; bits.len()];
    let mut out = vec![false; bits.len()];
    for r in 0..h {
        for c in 0..w {
            let mut any = false;
            for dr in -1..=1 {
                for dc in -1..=1 {
                    if inside(r + dr, c + dc) && at(bits, r + dr, c + dc) {
                        any = true;
                    }
                }
            }
            dil[(r * w + c) as usize] = any;
        }
    }
    for r in 0..h {
        for c in 0..w {
            let mut all = true;
            for dr in -1..=1 {
                for dc in -1..=1 {
                    if inside(r + dr, c + dc) && !at(&dil, r + dr, c + dc) {
                        all = false;
                    }
                }
            }
            out[(r * w + c) as usize] = all;
        }
    }
    out
}

/// The leak rule written out literally.
pub fn leak_rule(c_ref: f64, c_tgt: f64, t_leak: f64, t_rel: f64) -> bool {
    let margin = c_ref >= c_tgt + t_leak;
    let relevant = c_ref >= t_rel || c_tgt >= t_rel;
    margin && relevant
}

/// Largest point of the `step` grid on [0, 1] at or below `tau`.
pub fn best_clean_grid_point(tau: f64, step: f64) -> f64 {
    let n = (1.0 / step).round() as usize;
    (0..=n)
        .map(|i| i as f64 * step)
        .filter(|&a| a <= tau)
        .fold(0.0, f64::max)
}
