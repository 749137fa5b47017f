use nalgebra::{DMatrix, SymmetricEigen};

use super::AnalysisError;
use crate::vecmath;

/// Fraction of the spectral mass the leading eigenvalues must exceed.
const MASS: f64 = 0.9;

/// Ascending eigenvalues of `L = D − S`, `S_ij = max(0, cos(e_i, e_j))`.
pub fn laplacian_spectrum(vectors: &[Vec<f64>]) -> Vec<f64> {
    let n = vectors.len();
    let unit: Vec<Vec<f64>> = vectors.iter().map(|v| vecmath::normalized(v)).collect();
    let mut s = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let c = vecmath::dot(&unit[i], &unit[j]).max(0.0);
            s[(i, j)] = c;
            s[(j, i)] = c;
        }
    }
    let mut l = -s;
    for i in 0..n {
        let degree: f64 = -l.row(i).sum();
        l[(i, i)] = degree;
    }
    debug_assert!(l == l.transpose());
    let mut ev: Vec<f64> = SymmetricEigen::new(l).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Smallest `k` whose leading eigenvalues hold more than 90% of the total;
/// `n` for an all-zero spectrum.
pub fn leading_count(spectrum: &[f64]) -> usize {
    let total: f64 = spectrum.iter().sum();
    if total <= 0.0 {
        return spectrum.len();
    }
    let mut acc = 0.0;
    for (i, l) in spectrum.iter().enumerate() {
        acc += l;
        if acc / total > MASS {
            return i + 1;
        }
    }
    spectrum.len()
}

/// Squared distance between the leading Laplacian eigenvalues of two spaces
/// over the same word list. Zero for isospectral spaces.
pub fn eigenvector_similarity(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, AnalysisError> {
    if a.len() != b.len() {
        return Err(AnalysisError::Invalid(format!("{} words against {}", a.len(), b.len())));
    }
    if a.len() < 3 {
        return Err(AnalysisError::Invalid("eigenvector similarity needs at least 3 words".into()));
    }
    let (la, lb) = (laplacian_spectrum(a), laplacian_spectrum(b));
    let k = leading_count(&la).min(leading_count(&lb));
    Ok(la.iter().zip(&lb).take(k).map(|(x, y)| (x - y) * (x - y)).sum())
}
