//! Shared self-attention between a reference and a target image, with masked
//! scaling of the reference keys.
//!
//! The target queries and keys are re-standardized against the reference
//! statistics (AdaIN), the key and value sets are concatenated
//! `[reference ; target]`, and attention runs with the usual `1/sqrt(d_k)`
//! temperature. Reference keys that fall inside the subject mask are
//! multiplied by a scale `alpha`; `alpha = 1` reproduces plain sharing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{softmax_in_place, Scalar};
use crate::tensor::Matrix;

/// Standard deviations below this are clamped before division.
pub const ADAIN_EPS: f64 = 1e-5;

/// Query, key and value projections of one image at one attention layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTensors<T> {
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
}

impl<T: Scalar> AttentionTensors<T> {
    pub fn new(q: Matrix<T>, k: Matrix<T>, v: Matrix<T>) -> Result<Self> {
        let t = Self { q, k, v };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k.rows() != self.v.rows() {
            return Err(Error::Shape(format!(
                "{} keys but {} values",
                self.k.rows(),
                self.v.rows()
            )));
        }
        if self.q.rows() > 0 && self.k.rows() > 0 && self.q.cols() != self.k.cols() {
            return Err(Error::Shape(format!(
                "query width {} differs from key width {}",
                self.q.cols(),
                self.k.cols()
            )));
        }
        if !(self.q.all_finite() && self.k.all_finite() && self.v.all_finite()) {
            return Err(Error::Shape("non-finite attention tensor entry".into()));
        }
        Ok(())
    }

    pub fn key_dim(&self) -> usize {
        if self.q.rows() > 0 {
            self.q.cols()
        } else {
            self.k.cols()
        }
    }

    pub fn patches(&self) -> usize {
        self.k.rows()
    }
}

/// Scale applied to the masked reference keys, constrained to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScaleParam<T>(T);

impl<T: Scalar> ScaleParam<T> {
    pub fn new(alpha: T) -> Result<Self> {
        if !(alpha >= T::zero() && alpha <= T::one()) {
            return Err(Error::Config(format!("scale {alpha} outside [0, 1]")));
        }
        Ok(Self(alpha))
    }

    pub fn one() -> Self {
        Self(T::one())
    }

    pub fn get(self) -> T {
        self.0
    }
}

/// Which shared layers have their reference keys scaled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalingScope {
    /// Every layer that shares attention with the reference.
    #[default]
    AllShared,
    /// Only the bottleneck layers.
    BottleneckOnly,
}

fn channel_stats<T: Scalar>(m: &Matrix<T>) -> (Vec<T>, Vec<T>) {
    let n = T::from_count(m.rows());
    let mut mean = vec![T::zero(); m.cols()];
    for r in 0..m.rows() {
        for (acc, &v) in mean.iter_mut().zip(m.row(r)) {
            *acc = *acc + v;
        }
    }
    for v in &mut mean {
        *v = *v / n;
    }
    let mut var = vec![T::zero(); m.cols()];
    for r in 0..m.rows() {
        for ((acc, &v), &mu) in var.iter_mut().zip(m.row(r)).zip(&mean) {
            let d = v - mu;
            *acc = *acc + d * d;
        }
    }
    let eps = T::lit(ADAIN_EPS);
    let std = var.into_iter().map(|s| (s / n).sqrt().max(eps)).collect();
    (mean, std)
}

/// Adaptive instance normalization of the rows of `x` onto the per-channel
/// statistics of `y`. Statistics are population moments over the patch axis.
pub fn adain<T: Scalar>(x: &Matrix<T>, y: &Matrix<T>) -> Result<Matrix<T>> {
    if x.cols() != y.cols() {
        return Err(Error::Shape(format!(
            "adain channel mismatch: {} vs {}",
            x.cols(),
            y.cols()
        )));
    }
    if x.rows() == 0 || y.rows() == 0 {
        return Err(Error::Shape("adain needs at least one row on each side".into()));
    }
    let (mx, sx) = channel_stats(x);
    let (my, sy) = channel_stats(y);
    Ok(Matrix::from_fn(x.rows(), x.cols(), |r, c| {
        sy[c] * ((x.get(r, c) - mx[c]) / sx[c]) + my[c]
    }))
}

/// `(1 - R) ⊙ K + alpha R ⊙ K`, row-wise over reference patches.
pub fn scale_reference_keys<T: Scalar>(
    keys: &Matrix<T>,
    mask: &[bool],
    alpha: ScaleParam<T>,
) -> Result<Matrix<T>> {
    if mask.len() != keys.rows() {
        return Err(Error::Shape(format!(
            "mask has {} entries for {} reference patches",
            mask.len(),
            keys.rows()
        )));
    }
    let a = alpha.get();
    Ok(Matrix::from_fn(keys.rows(), keys.cols(), |r, c| {
        let rbit = if mask[r] { T::one() } else { T::zero() };
        let k = keys.get(r, c);
        (T::one() - rbit) * k + a * rbit * k
    }))
}

/// Per-patch scaling of reference keys, used when several subject masks with
/// different scales are combined.
pub fn apply_key_scales<T: Scalar>(keys: &Matrix<T>, scales: &[T]) -> Result<Matrix<T>> {
    if scales.len() != keys.rows() {
        return Err(Error::Shape(format!(
            "{} scales for {} reference patches",
            scales.len(),
            keys.rows()
        )));
    }
    Ok(Matrix::from_fn(keys.rows(), keys.cols(), |r, c| {
        scales[r] * keys.get(r, c)
    }))
}

/// Result of one shared attention evaluation.
#[derive(Clone, Debug)]
pub struct SharedAttentionOutput<T> {
    /// `[n × d_v]` attended values.
    pub output: Matrix<T>,
    /// `[n × (m_ref + m_tgt)]` attention probabilities; reference columns first.
    pub probs: Matrix<T>,
    /// Number of reference columns at the front of `probs`.
    pub reference_columns: usize,
}

impl<T: Scalar> SharedAttentionOutput<T> {
    /// Total probability mass that all queries put on the selected reference
    /// columns.
    pub fn reference_mass(&self, selected: impl Fn(usize) -> bool) -> T {
        let mut total = T::zero();
        for r in 0..self.probs.rows() {
            for (j, &p) in self.probs.row(r)[..self.reference_columns].iter().enumerate() {
                if selected(j) {
                    total = total + p;
                }
            }
        }
        total
    }
}

/// Plain softmax attention.
pub fn attention<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    if k.rows() != v.rows() {
        return Err(Error::Shape(format!(
            "{} keys but {} values",
            k.rows(),
            v.rows()
        )));
    }
    if q.cols() != k.cols() {
        return Err(Error::Shape(format!(
            "query width {} differs from key width {}",
            q.cols(),
            k.cols()
        )));
    }
    let temp = T::one() / T::from_count(q.cols().max(1)).sqrt();
    let mut probs = Matrix::zeros(q.rows(), k.rows());
    for i in 0..q.rows() {
        let qi = q.row(i);
        let row = probs.row_mut(i);
        for (j, s) in row.iter_mut().enumerate() {
            let dot = qi
                .iter()
                .zip(k.row(j))
                .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            *s = dot * temp;
        }
        softmax_in_place(row);
    }
    let out = probs.matmul(v)?;
    Ok((out, probs))
}

fn check_pair<T: Scalar>(target: &AttentionTensors<T>, reference: &AttentionTensors<T>) -> Result<()> {
    target.validate()?;
    reference.validate()?;
    if reference.patches() > 0 {
        if reference.key_dim() != target.key_dim() {
            return Err(Error::Shape(format!(
                "reference key width {} differs from target {}",
                reference.key_dim(),
                target.key_dim()
            )));
        }
        if reference.v.cols() != target.v.cols() {
            return Err(Error::Shape(format!(
                "reference value width {} differs from target {}",
                reference.v.cols(),
                target.v.cols()
            )));
        }
    }
    Ok(())
}

fn shared_core<T: Scalar>(
    target: &AttentionTensors<T>,
    reference: &AttentionTensors<T>,
    reference_keys: &Matrix<T>,
) -> Result<SharedAttentionOutput<T>> {
    if reference.patches() == 0 {
        let (output, probs) = attention(&target.q, &target.k, &target.v)?;
        return Ok(SharedAttentionOutput {
            output,
            probs,
            reference_columns: 0,
        });
    }
    let q_hat = adain(&target.q, &reference.q)?;
    let k_hat_tgt = adain(&target.k, &reference.k)?;
    let k_rt = reference_keys.vstack(&k_hat_tgt)?;
    let v_rt = reference.v.vstack(&target.v)?;
    let (output, probs) = attention(&q_hat, &k_rt, &v_rt)?;
    Ok(SharedAttentionOutput {
        output,
        probs,
        reference_columns: reference.patches(),
    })
}

/// Unscaled shared attention: `Attention(AdaIN(Q_t, Q_r), [K_r ; AdaIN(K_t, K_r)], [V_r ; V_t])`.
pub fn shared_attention_baseline<T: Scalar>(
    target: &AttentionTensors<T>,
    reference: &AttentionTensors<T>,
) -> Result<SharedAttentionOutput<T>> {
    check_pair(target, reference)?;
    shared_core(target, reference, &reference.k)
}

/// Shared attention with the masked reference keys scaled by `alpha`.
pub fn shared_attention_forward<T: Scalar>(
    target: &AttentionTensors<T>,
    reference: &AttentionTensors<T>,
    mask: &[bool],
    alpha: ScaleParam<T>,
) -> Result<SharedAttentionOutput<T>> {
    check_pair(target, reference)?;
    let k_ref = scale_reference_keys(&reference.k, mask, alpha)?;
    shared_core(target, reference, &k_ref)
}

/// Shared attention with an explicit per-reference-patch key scale.
pub fn shared_attention_with_scales<T: Scalar>(
    target: &AttentionTensors<T>,
    reference: &AttentionTensors<T>,
    scales: &[T],
) -> Result<SharedAttentionOutput<T>> {
    check_pair(target, reference)?;
    let k_ref = apply_key_scales(&reference.k, scales)?;
    shared_core(target, reference, &k_ref)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// Direct transcription of the AdaIN definition, one channel at a time.
    fn adain_oracle(x: &[f64], y: &[f64]) -> Vec<f64> {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let std = |v: &[f64], mu: f64| {
            (v.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / v.len() as f64)
                .sqrt()
                .max(ADAIN_EPS)
        };
        let (mx, my) = (mean(x), mean(y));
        let (sx, sy) = (std(x, mx), std(y, my));
        x.iter().map(|a| sy * (a - mx) / sx + my).collect()
    }

    #[test]
    fn adain_identity() {
        let x = m(&[&[1.0, -2.0], &[0.5, 3.0], &[4.0, 0.0]]);
        let out = adain(&x, &x).unwrap();
        assert!(out.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn adain_standard_to_shifted() {
        // per-channel mean 0, population std 1
        let x = m(&[&[-1.0], &[1.0]]);
        // mean 5, std 2
        let y = m(&[&[3.0], &[7.0]]);
        let out = adain(&x, &y).unwrap();
        assert!((out.get(0, 0) - 3.0).abs() < 1e-12);
        assert!((out.get(1, 0) - 7.0).abs() < 1e-12);
    }

    #[test]
    fn adain_two_point_example_matches_oracle() {
        let x = m(&[&[1.0], &[3.0]]);
        let y = m(&[&[0.0], &[10.0]]);
        let expected = adain_oracle(&[1.0, 3.0], &[0.0, 10.0]);
        // frozen from the oracle: mu_x=2, sigma_x=1, mu_y=5, sigma_y=5
        assert_eq!(expected, vec![0.0, 10.0]);
        let out = adain(&x, &y).unwrap();
        assert!((out.get(0, 0) - expected[0]).abs() < 1e-12);
        assert!((out.get(1, 0) - expected[1]).abs() < 1e-12);
    }

    #[test]
    fn adain_channel_mismatch() {
        assert!(adain(&m(&[&[1.0]]), &m(&[&[1.0, 2.0]])).is_err());
    }

    #[test]
    fn scale_alpha_one_is_identity() {
        let k = m(&[&[2.0, -3.5], &[4.0, 0.25]]);
        let out = scale_reference_keys(&k, &[true, false], ScaleParam::one()).unwrap();
        assert_eq!(out, k);
    }

    #[test]
    fn scale_alpha_zero_full_mask_is_zero() {
        let k = m(&[&[2.0, -3.5], &[4.0, 0.25]]);
        let out = scale_reference_keys(&k, &[true, true], ScaleParam::new(0.0).unwrap()).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scale_half_on_first_row() {
        let k = m(&[&[2.0, 2.0], &[4.0, 4.0]]);
        let out = scale_reference_keys(&k, &[true, false], ScaleParam::new(0.5).unwrap()).unwrap();
        assert_eq!(out, m(&[&[1.0, 1.0], &[4.0, 4.0]]));
    }

    #[test]
    fn scale_length_mismatch() {
        let k = m(&[&[2.0], &[4.0]]);
        assert!(scale_reference_keys(&k, &[true], ScaleParam::one()).is_err());
    }

    #[test]
    fn scale_param_range() {
        assert!(ScaleParam::new(1.5f64).is_err());
        assert!(ScaleParam::new(-0.1f64).is_err());
        assert!(ScaleParam::new(f64::NAN).is_err());
    }

    #[test]
    fn empty_reference_is_plain_self_attention() {
        let t = AttentionTensors::new(
            m(&[&[1.0, 0.0], &[0.0, 1.0]]),
            m(&[&[0.5, 0.5], &[1.0, -1.0]]),
            m(&[&[1.0], &[2.0]]),
        )
        .unwrap();
        let r = AttentionTensors::new(
            Matrix::zeros(0, 2),
            Matrix::zeros(0, 2),
            Matrix::zeros(0, 1),
        )
        .unwrap();
        let shared = shared_attention_forward(&t, &r, &[], ScaleParam::one()).unwrap();
        let (plain, _) = attention(&t.q, &t.k, &t.v).unwrap();
        assert_eq!(shared.output, plain);
        assert_eq!(shared.reference_columns, 0);
    }

    #[test]
    fn single_patch_pair_matches_scalar_oracle() {
        // One target and one reference patch: AdaIN over a single row collapses
        // to the reference value, so q_hat = q_ref and k_hat_tgt = k_ref.
        let (q_t, k_t, v_t) = (0.7, -0.3, 2.0);
        let (q_r, k_r, v_r) = (1.5, 0.8, -1.0);
        let alpha = 0.25;
        let t = AttentionTensors::new(m(&[&[q_t]]), m(&[&[k_t]]), m(&[&[v_t]])).unwrap();
        let r = AttentionTensors::new(m(&[&[q_r]]), m(&[&[k_r]]), m(&[&[v_r]])).unwrap();
        let out = shared_attention_forward(&t, &r, &[true], ScaleParam::new(alpha).unwrap()).unwrap();

        let s_ref = q_r * (alpha * k_r);
        let s_tgt = q_r * k_r;
        let w_ref = s_ref.exp() / (s_ref.exp() + s_tgt.exp());
        let expected = w_ref * v_r + (1.0 - w_ref) * v_t;
        assert!((out.output.get(0, 0) - expected).abs() < 1e-9);
    }

    #[test]
    fn probability_rows_sum_to_one() {
        let t = AttentionTensors::new(
            m(&[&[1.0, 0.2], &[0.3, -1.0], &[2.0, 2.0]]),
            m(&[&[0.1, 0.2], &[0.3, 0.4], &[-0.5, 0.6]]),
            m(&[&[1.0], &[2.0], &[3.0]]),
        )
        .unwrap();
        let r = t.clone();
        let out = shared_attention_forward(&t, &r, &[true, false, true], ScaleParam::new(0.3).unwrap())
            .unwrap();
        for i in 0..out.probs.rows() {
            let s: f64 = out.probs.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert_eq!(out.output.rows(), 3);
        assert_eq!(out.output.cols(), 1);
    }

    #[test]
    fn value_width_mismatch_is_error() {
        let t = AttentionTensors::new(m(&[&[1.0]]), m(&[&[1.0]]), m(&[&[1.0]])).unwrap();
        let r = AttentionTensors::new(m(&[&[1.0]]), m(&[&[1.0]]), m(&[&[1.0, 2.0]])).unwrap();
        assert!(shared_attention_forward(&t, &r, &[false], ScaleParam::one()).is_err());
    }
}
