//! Subject maps from cross-attention, and the binary masks derived from them.
//!
//! Two masks are cut from the same map:
//!
//! * [`SubjectMask`]: a coarse mask of everything the subject token attends
//!   to (top cluster of a 2-means split, then a 3×3 closing). Reference keys
//!   inside it are the ones that get scaled.
//! * [`DescriptionMask`]: a small, high-confidence set (top cluster of a
//!   3-means split, capped at 10% of the grid) used to pool a compact subject
//!   representation.

pub mod kmeans;
pub mod morphology;

use serde::{Deserialize, Serialize};

use crate::backbone::AttentionRecord;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Grid;

pub use kmeans::{kmeans_1d, KMeans1d};
pub use morphology::{dilate, erode, morphological_close};

/// Fraction of the grid a description mask may occupy.
pub const DESCRIPTION_MASK_FRACTION_DENOM: usize = 10;

/// Machine-readable reason a mask came out empty.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MaskDiagnostic {
    /// The subject map has a single distinct value; nothing to separate.
    NoSubjectLocalized,
}

/// Aggregated cross-attention of one subject token over a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectMap<T> {
    pub grid: Grid,
    pub values: Vec<T>,
    pub token_index: usize,
    /// Inclusive `(first, last)` generation steps that were averaged.
    pub steps: (usize, usize),
    pub records: usize,
}

impl<T: Scalar> SubjectMap<T> {
    pub fn new(grid: Grid, values: Vec<T>, token_index: usize) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape(format!(
                "{} map values for a {}x{} grid",
                values.len(),
                grid.height,
                grid.width
            )));
        }
        Ok(Self {
            grid,
            values,
            token_index,
            steps: (0, 0),
            records: 0,
        })
    }

    pub fn is_constant(&self) -> bool {
        self.values.windows(2).all(|w| w[0] == w[1])
    }
}

/// Coarse subject mask over the reference patches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectMask {
    pub grid: Grid,
    pub bits: Vec<bool>,
    /// Smallest map value admitted to the top cluster.
    pub threshold: Option<f64>,
    pub closed: bool,
    pub diagnostic: Option<MaskDiagnostic>,
}

impl SubjectMask {
    pub fn empty(grid: Grid, diagnostic: Option<MaskDiagnostic>) -> Self {
        Self {
            grid,
            bits: vec![false; grid.len()],
            threshold: None,
            closed: false,
            diagnostic,
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

/// Fine mask of the most subject-laden patches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptionMask {
    pub grid: Grid,
    pub bits: Vec<bool>,
    pub capped: bool,
    pub diagnostic: Option<MaskDiagnostic>,
}

impl DescriptionMask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn cap(grid: Grid) -> usize {
        grid.len().div_ceil(DESCRIPTION_MASK_FRACTION_DENOM)
    }
}

/// Mean of the subject-token column over every record, reshaped to the grid.
pub fn aggregate_subject_map<T: Scalar>(
    records: &[&AttentionRecord<T>],
    token_index: usize,
) -> Result<SubjectMap<T>> {
    let first = records.first().ok_or(Error::EmptyRecords)?;
    let grid = first.grid;
    let mut sum = vec![T::zero(); grid.len()];
    let mut steps = (usize::MAX, 0);
    for rec in records {
        if rec.grid != grid || rec.probs.rows() != grid.len() {
            return Err(Error::Shape(format!(
                "record for layer {} step {} is on a different grid",
                rec.layer_id, rec.step
            )));
        }
        if token_index >= rec.probs.cols() {
            return Err(Error::TokenIndex {
                index: token_index,
                len: rec.probs.cols(),
            });
        }
        for (p, acc) in sum.iter_mut().enumerate() {
            *acc = *acc + rec.probs.get(p, token_index);
        }
        steps = (steps.0.min(rec.step), steps.1.max(rec.step));
    }
    let n = T::from_count(records.len());
    let values = sum
        .into_iter()
        .map(|v| (v / n).max(T::zero()).min(T::one()))
        .collect();
    Ok(SubjectMap {
        grid,
        values,
        token_index,
        steps,
        records: records.len(),
    })
}

/// 2-means top cluster followed by a 3×3 closing.
pub fn extract_subject_mask<T: Scalar>(map: &SubjectMap<T>) -> SubjectMask {
    let km = kmeans_1d(&map.values, 2);
    if km.cluster_count() < 2 {
        return SubjectMask::empty(map.grid, Some(MaskDiagnostic::NoSubjectLocalized));
    }
    let top = km.top_cluster();
    let threshold = map
        .values
        .iter()
        .zip(&top)
        .filter(|(_, &b)| b)
        .map(|(v, _)| v.to_f64_lossy())
        .fold(f64::INFINITY, f64::min);
    SubjectMask {
        grid: map.grid,
        bits: morphological_close(&top, map.grid),
        threshold: Some(threshold),
        closed: true,
        diagnostic: None,
    }
}

/// 3-means top cluster, truncated to the `ceil(10%)` highest-valued patches
/// when it is larger. Ties in the truncation keep the earlier row-major patch.
pub fn extract_description_mask<T: Scalar>(map: &SubjectMap<T>) -> DescriptionMask {
    let km = kmeans_1d(&map.values, 3);
    if km.cluster_count() < 2 {
        return DescriptionMask {
            grid: map.grid,
            bits: vec![false; map.grid.len()],
            capped: false,
            diagnostic: Some(MaskDiagnostic::NoSubjectLocalized),
        };
    }
    let mut bits = km.top_cluster();
    let cap = DescriptionMask::cap(map.grid);
    let count = bits.iter().filter(|&&b| b).count();
    let capped = count > cap;
    if capped {
        let mut members: Vec<usize> = (0..bits.len()).filter(|&i| bits[i]).collect();
        // stable sort keeps row-major order among equal values
        members.sort_by(|&a, &b| map.values[b].partial_cmp(&map.values[a]).unwrap());
        bits = vec![false; bits.len()];
        for &i in members.iter().take(cap) {
            bits[i] = true;
        }
    }
    DescriptionMask {
        grid: map.grid,
        bits,
        capped,
        diagnostic: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::LayerId;
    use crate::tensor::Matrix;

    fn record(step: usize, grid: Grid, col: &[f64], tokens: usize, token: usize) -> AttentionRecord<f64> {
        let probs = Matrix::from_fn(grid.len(), tokens, |r, c| {
            if c == token {
                col[r]
            } else {
                (1.0 - col[r]) / (tokens - 1) as f64
            }
        });
        AttentionRecord {
            layer_id: LayerId::from("mid"),
            step,
            grid,
            probs,
        }
    }

    #[test]
    fn uniform_rows_give_quarter_map() {
        let g = Grid::new(2, 2);
        let rec = AttentionRecord {
            layer_id: LayerId::from("mid"),
            step: 1,
            grid: g,
            probs: Matrix::from_fn(4, 4, |_, _| 0.25f64),
        };
        let map = aggregate_subject_map(&[&rec], 2).unwrap();
        assert_eq!(map.values, vec![0.25; 4]);
    }

    #[test]
    fn two_record_mean() {
        let g = Grid::new(2, 2);
        let a = record(1, g, &[0.2, 0.4, 0.6, 0.8], 3, 1);
        let b = record(2, g, &[0.4, 0.6, 0.8, 1.0], 3, 1);
        let map = aggregate_subject_map(&[&a, &b], 1).unwrap();
        for (got, want) in map.values.iter().zip([0.3, 0.5, 0.7, 0.9]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(map.steps, (1, 2));
    }

    #[test]
    fn map_shape_follows_grid() {
        let g = Grid::new(32, 32);
        let rec = record(1, g, &vec![0.5; 1024], 2, 0);
        let map = aggregate_subject_map(&[&rec], 0).unwrap();
        assert_eq!(map.grid, Grid::new(32, 32));
        assert_eq!(map.values.len(), 1024);
    }

    #[test]
    fn token_out_of_range_and_empty() {
        let g = Grid::new(1, 2);
        let rec = record(1, g, &[0.5, 0.5], 2, 0);
        assert!(matches!(
            aggregate_subject_map(&[&rec], 5),
            Err(Error::TokenIndex { .. })
        ));
        assert!(matches!(
            aggregate_subject_map::<f64>(&[], 0),
            Err(Error::EmptyRecords)
        ));
    }

    fn block_map(h: usize, w: usize, block: &[(usize, usize)], hi: f64, lo: f64) -> SubjectMap<f64> {
        let g = Grid::new(h, w);
        let mut v = vec![lo; g.len()];
        for &(r, c) in block {
            v[g.index(r, c)] = hi;
        }
        SubjectMap::new(g, v, 1).unwrap()
    }

    #[test]
    fn subject_mask_on_block() {
        let block = [(2, 2), (2, 3), (3, 2), (3, 3)];
        let map = block_map(6, 6, &block, 0.9, 0.05);
        let mask = extract_subject_mask(&map);
        assert_eq!(mask.count(), 4);
        for &(r, c) in &block {
            assert!(mask.bits[map.grid.index(r, c)]);
        }
        assert!(mask.diagnostic.is_none());
        assert_eq!(mask.threshold, Some(0.9));
    }

    #[test]
    fn subject_mask_constant_map() {
        let map = SubjectMap::new(Grid::new(3, 3), vec![0.2f64; 9], 0).unwrap();
        let mask = extract_subject_mask(&map);
        assert!(mask.is_empty());
        assert_eq!(mask.diagnostic, Some(MaskDiagnostic::NoSubjectLocalized));
    }

    #[test]
    fn subject_mask_fills_hole() {
        let mut block = Vec::new();
        for r in 2..6 {
            for c in 2..6 {
                if (r, c) != (3, 3) {
                    block.push((r, c));
                }
            }
        }
        let map = block_map(8, 8, &block, 0.9, 0.05);
        let mask = extract_subject_mask(&map);
        assert!(mask.bits[map.grid.index(3, 3)]);
        assert_eq!(mask.count(), 16);
    }

    #[test]
    fn description_mask_single_peak() {
        let mut v = vec![0.01f64; 16];
        v[5] = 0.9;
        v[6] = 0.3;
        v[9] = 0.32;
        let map = SubjectMap::new(Grid::new(4, 4), v, 0).unwrap();
        let m = extract_description_mask(&map);
        assert_eq!(m.count(), 1);
        assert!(m.bits[5]);
        assert!(!m.capped);
    }

    #[test]
    fn description_mask_caps_to_ten_percent() {
        // 70 background, 15 mid, 15 high patches: the top cluster of 15
        // exceeds ceil(0.1 * 100) = 10, so the 10 largest survive.
        let g = Grid::new(10, 10);
        let mut v = vec![0.0f64; 100];
        let high: Vec<usize> = (0..15).map(|i| i * 6 + 3).collect();
        let mid: Vec<usize> = (0..15).map(|i| i * 6 + 1).collect();
        for (rank, &i) in high.iter().enumerate() {
            v[i] = 0.90 + 0.001 * ((rank * 7) % 15) as f64;
        }
        for &i in &mid {
            v[i] = 0.4;
        }
        assert_eq!(kmeans_1d(&v, 3).top_cluster().iter().filter(|&&b| b).count(), 15);
        let map = SubjectMap::new(g, v.clone(), 0).unwrap();
        let m = extract_description_mask(&map);
        assert!(m.capped);
        assert_eq!(m.count(), 10);

        // sort-and-truncate oracle
        let mut order: Vec<usize> = high.clone();
        order.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap());
        let expected: Vec<usize> = {
            let mut e = order[..10].to_vec();
            e.sort();
            e
        };
        let got: Vec<usize> = (0..100).filter(|&i| m.bits[i]).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn description_mask_constant() {
        let map = SubjectMap::new(Grid::new(3, 3), vec![0.4f64; 9], 0).unwrap();
        let m = extract_description_mask(&map);
        assert_eq!(m.count(), 0);
        assert_eq!(m.diagnostic, Some(MaskDiagnostic::NoSubjectLocalized));
    }
}
