//! Plain-number forms of the training objectives.

use std::sync::atomic::{AtomicUsize, Ordering};

use super::ModelError;
use crate::vecmath;

/// Probabilities below this are clamped before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

static CLAMPED: AtomicUsize = AtomicUsize::new(0);

/// Number of probabilities clamped to [`PROB_FLOOR`] so far in this process.
pub fn clamp_warnings() -> usize {
    CLAMPED.load(Ordering::Relaxed)
}

fn neg_log(p: f64) -> Result<f64, ModelError> {
    if !(0.0..=1.0 + 1e-12).contains(&p) {
        return Err(ModelError::InvalidArgument(format!("probability {p} outside [0, 1]")));
    }
    if p < PROB_FLOOR {
        CLAMPED.fetch_add(1, Ordering::Relaxed);
        log::warn!("probability {p:e} clamped to {PROB_FLOOR:e}");
        return Ok(-PROB_FLOOR.ln());
    }
    Ok(-p.min(1.0).ln())
}

fn sum_neg_log(probs: &[f64]) -> Result<f64, ModelError> {
    probs.iter().map(|&p| neg_log(p)).sum()
}

/// `(α/M) Σ −ln P(ŷ_m) + (β/Q) Σ −ln P(y_q)` from the gold-token probabilities.
pub fn multitask_loss(src: &[f64], tgt: &[f64], alpha: f64, beta: f64) -> Result<f64, ModelError> {
    if src.is_empty() || tgt.is_empty() {
        return Err(ModelError::InvalidArgument("both sequences need at least one step".into()));
    }
    Ok(alpha / src.len() as f64 * sum_neg_log(src)? + beta / tgt.len() as f64 * sum_neg_log(tgt)?)
}

/// Single-task loss, normalized per target token.
pub fn se_loss(tgt: &[f64]) -> Result<f64, ModelError> {
    if tgt.is_empty() {
        return Err(ModelError::InvalidArgument("empty target".into()));
    }
    Ok(sum_neg_log(tgt)? / tgt.len() as f64)
}

/// `Σ_m (1 − cos(projected_m, refs_m))`.
pub fn cd_loss(projected: &[Vec<f64>], refs: &[Vec<f64>]) -> Result<f64, ModelError> {
    if projected.len() != refs.len() {
        return Err(ModelError::InvalidArgument(format!(
            "{} projections for {} references",
            projected.len(),
            refs.len()
        )));
    }
    let mut s = 0.0;
    for (p, r) in projected.iter().zip(refs) {
        if p.len() != r.len() {
            return Err(ModelError::InvalidArgument("row widths differ".into()));
        }
        s += 1.0 - vecmath::cosine(p, r);
    }
    Ok(s)
}

/// Softmax of `cos(query, row)/τ` over `rows`.
pub fn cs_prob(query: &[f64], rows: &[&[f64]], tau: f64) -> Result<Vec<f64>, ModelError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(ModelError::InvalidArgument(format!("temperature must be > 0, got {tau}")));
    }
    if rows.is_empty() {
        return Err(ModelError::InvalidArgument("no candidates".into()));
    }
    // The ε in the norm would act as a scale-dependent temperature on tiny
    // states, so bring the query to unit max-magnitude first.
    let peak = query.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let q = if peak > 0.0 && peak.is_finite() {
        vecmath::normalized(&query.iter().map(|x| x / peak).collect::<Vec<_>>())
    } else {
        vecmath::normalized(query)
    };
    let scores: Vec<f64> = rows
        .iter()
        .map(|r| {
            if r.len() != q.len() {
                return Err(ModelError::InvalidArgument("row width differs from query".into()));
            }
            Ok(vecmath::dot(&q, &vecmath::normalized(r)) / tau)
        })
        .collect::<Result<_, _>>()?;
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / z).collect())
}

/// `Σ_m −ln P_CS(ŷ_m)` given per-step distributions and gold indices.
pub fn cs_loss(dists: &[Vec<f64>], targets: &[usize]) -> Result<f64, ModelError> {
    if dists.len() != targets.len() {
        return Err(ModelError::InvalidArgument(format!(
            "{} distributions for {} targets",
            dists.len(),
            targets.len()
        )));
    }
    let mut s = 0.0;
    for (d, &t) in dists.iter().zip(targets) {
        let p = *d
            .get(t)
            .ok_or_else(|| ModelError::InvalidArgument(format!("target {t} outside distribution")))?;
        s += neg_log(p)?;
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn multitask_examples() {
        assert_abs_diff_eq!(multitask_loss(&[0.5], &[0.5], 1.0, 1.0).unwrap(), 2.0 * 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(multitask_loss(&[0.5], &[0.5], 1.0, 1.0).unwrap(), 1.3863, epsilon = 1e-4);
        let tgt = [0.3, 0.9];
        assert_abs_diff_eq!(
            multitask_loss(&[0.01], &tgt, 0.0, 1.0).unwrap(),
            -(0.3f64.ln() + 0.9f64.ln()) / 2.0,
            epsilon = 1e-12
        );
        assert_eq!(multitask_loss(&[1.0, 1.0], &[1.0], 1.0, 1.0).unwrap(), 0.0);
        assert!(multitask_loss(&[], &[1.0], 1.0, 1.0).is_err());
    }

    #[test]
    fn zero_probability_is_clamped_and_counted() {
        let before = clamp_warnings();
        let v = multitask_loss(&[0.0], &[1.0], 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(v, -(1e-12f64).ln(), epsilon = 1e-9);
        assert!(clamp_warnings() > before);
        assert!(se_loss(&[1.5]).is_err());
    }

    #[test]
    fn cd_examples() {
        let refs = vec![vec![1.0, 0.0], vec![0.0, 2.0]];
        assert_abs_diff_eq!(cd_loss(&refs, &refs).unwrap(), 0.0, epsilon = 1e-10);
        let orth = vec![vec![0.0, 3.0], vec![1.0, 0.0]];
        assert_abs_diff_eq!(cd_loss(&orth, &refs).unwrap(), 2.0, epsilon = 1e-12);
        let neg: Vec<Vec<f64>> = refs.iter().map(|r| r.iter().map(|x| -x).collect()).collect();
        // ε in each norm: 1 + 1/(1+ε) + 1 + 4/(4+ε) ≈ 4 − 1.25ε.
        assert_abs_diff_eq!(cd_loss(&neg, &refs).unwrap(), 4.0 - 1.25e-12, epsilon = 1e-14);
    }

    #[test]
    fn cs_prob_examples() {
        let rows: [&[f64]; 3] = [&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0]];
        let u = cs_prob(&[1.0, 1.0], &rows[..2], 0.1).unwrap();
        assert_abs_diff_eq!(u[0], 0.5, epsilon = 1e-12);
        let p = cs_prob(&[2.0, 0.0], &rows[..2], 1.0).unwrap();
        assert_abs_diff_eq!(p[0], 0.7311, epsilon = 1e-4);
        assert_abs_diff_eq!(p[1], 0.2689, epsilon = 1e-4);
        let sharp = cs_prob(&[1.0, 0.2], &rows, 1e-3).unwrap();
        assert!(sharp[0] > 1.0 - 1e-12);
        assert!(cs_prob(&[1.0, 0.0], &rows, 0.0).is_err());
    }

    #[test]
    fn cs_prob_ignores_state_scale_even_when_tiny() {
        let rows: [&[f64]; 3] = [&[1.0, 0.0, 0.5], &[0.0, 1.0, 0.0], &[-1.0, 0.3, 2.0]];
        let q = [3.0, -1.0, 2.0];
        let p = cs_prob(&q, &rows, 0.01).unwrap();
        for c in [1e-6, 1e-3, 7.5, 1e4] {
            let qs: Vec<f64> = q.iter().map(|x| x * c).collect();
            let ps = cs_prob(&qs, &rows, 0.01).unwrap();
            for (a, b) in p.iter().zip(&ps) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
        let zero = cs_prob(&[0.0, 0.0, 0.0], &rows, 1.0).unwrap();
        assert_abs_diff_eq!(zero[0], 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn cs_loss_examples() {
        assert_eq!(cs_loss(&[vec![0.0, 1.0]], &[1]).unwrap(), 0.0);
        let v = 7.0;
        assert_abs_diff_eq!(cs_loss(&[vec![1.0 / v; 7]], &[3]).unwrap(), v.ln(), epsilon = 1e-12);
        let d = vec![vec![0.7311, 0.2689], vec![0.5, 0.5]];
        assert_abs_diff_eq!(cs_loss(&d, &[0, 1]).unwrap(), 1.0064, epsilon = 1e-4);
    }

    #[test]
    fn se_examples() {
        let p = [0.5, 0.25];
        assert_abs_diff_eq!(se_loss(&p).unwrap(), 1.0397, epsilon = 1e-4);
        assert_eq!(se_loss(&p).unwrap(), multitask_loss(&[0.3], &p, 0.0, 1.0).unwrap());
        assert_eq!(se_loss(&[1.0, 1.0]).unwrap(), 0.0);
    }
}
