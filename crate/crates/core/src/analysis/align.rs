use nalgebra::DMatrix;
use serde::Serialize;

use super::AnalysisError;
use crate::vecmath;

fn matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, AnalysisError> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(AnalysisError::Invalid("rows differ in width".into()));
    }
    Ok(DMatrix::from_row_iterator(rows.len(), d, rows.iter().flatten().copied()))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Orthogonal map `W` minimizing `Σ ‖W x_i − y_i‖²` for column vectors
/// `x_i`, `y_i` given as rows of `x` and `y`.
#[derive(Clone, Debug)]
pub struct Procrustes {
    pub w: DMatrix<f64>,
    /// The cross-covariance had a (near) zero singular value, so `W` is not unique.
    pub rank_deficient: bool,
}

impl Procrustes {
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        (&self.w * nalgebra::DVector::from_column_slice(v)).iter().copied().collect()
    }

    pub fn apply_all(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter().map(|v| self.apply(v)).collect()
    }
}

pub fn procrustes_fit(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<Procrustes, AnalysisError> {
    if x.is_empty() || x.len() != y.len() {
        return Err(AnalysisError::Invalid(format!("{} source rows for {} target rows", x.len(), y.len())));
    }
    let (xm, ym) = (matrix(x)?, matrix(y)?);
    if xm.ncols() != ym.ncols() {
        return Err(AnalysisError::Invalid(format!("dimensions {} and {} differ", xm.ncols(), ym.ncols())));
    }
    let svd = (ym.transpose() * xm).svd(true, true);
    let sv = &svd.singular_values;
    let rank_deficient = sv.min() <= 1e-10 * sv.max().max(f64::MIN_POSITIVE);
    let w = svd.u.expect("requested") * svd.v_t.expect("requested");
    Ok(Procrustes { w, rank_deficient })
}

/// Minimum-norm least-squares linear map taking rows of `x` to rows of `y`,
/// used to bring wider states down to the embedding width.
pub fn least_squares_map(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<DMatrix<f64>, AnalysisError> {
    if x.is_empty() || x.len() != y.len() {
        return Err(AnalysisError::Invalid("least squares needs paired, non-empty rows".into()));
    }
    let (xm, ym) = (matrix(x)?, matrix(y)?);
    xm.svd(true, true).solve(&ym, 1e-12).map_err(|e| AnalysisError::Invalid(e.to_string()))
}

/// Rows of `x` times `map`.
pub fn apply_map(x: &[Vec<f64>], map: &DMatrix<f64>) -> Result<Vec<Vec<f64>>, AnalysisError> {
    let xm = matrix(x)?;
    if xm.ncols() != map.nrows() {
        return Err(AnalysisError::Invalid("map does not fit the rows".into()));
    }
    Ok(rows_of(&(xm * map)))
}

fn top_k_mean(mut v: Vec<f64>, k: usize) -> f64 {
    v.sort_by(|a, b| b.total_cmp(a));
    v.iter().take(k).sum::<f64>() / k as f64
}

/// Cross-domain similarity local scaling between mapped queries and candidates.
#[derive(Clone, Debug)]
pub struct Csls {
    cos: DMatrix<f64>,
    r_query: Vec<f64>,
    r_candidate: Vec<f64>,
}

impl Csls {
    pub fn new(queries: &[Vec<f64>], candidates: &[Vec<f64>], k_nn: usize) -> Result<Self, AnalysisError> {
        // a lone candidate ranks first whatever its local scale
        let lone = candidates.len() == 1 && k_nn == 1;
        if k_nn == 0 || (k_nn >= candidates.len() && !lone) {
            return Err(AnalysisError::Invalid(format!(
                "k_nn {k_nn} must be positive and below the {} candidates",
                candidates.len()
            )));
        }
        if queries.is_empty() || candidates.is_empty() {
            return Err(AnalysisError::Invalid("no queries or candidates".into()));
        }
        let unit = |s: &[Vec<f64>]| matrix(&s.iter().map(|v| vecmath::normalized(v)).collect::<Vec<_>>());
        let (q, c) = (unit(queries)?, unit(candidates)?);
        if q.ncols() != c.ncols() {
            return Err(AnalysisError::Invalid("queries and candidates differ in width".into()));
        }
        let cos = q * c.transpose();
        let kq = k_nn.min(cos.ncols());
        let kc = k_nn.min(cos.nrows());
        let r_query = cos.row_iter().map(|r| top_k_mean(r.iter().copied().collect(), kq)).collect();
        let r_candidate = cos.column_iter().map(|c| top_k_mean(c.iter().copied().collect(), kc)).collect();
        Ok(Csls { cos, r_query, r_candidate })
    }

    pub fn score(&self, query: usize, candidate: usize) -> f64 {
        2.0 * self.cos[(query, candidate)] - self.r_candidate[candidate] - self.r_query[query]
    }

    /// Candidate indices by descending score; ties go to the lower index.
    pub fn rank(&self, query: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.cos.ncols()).collect();
        let s: Vec<f64> = idx.iter().map(|&c| self.score(query, c)).collect();
        idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        idx
    }
}

/// Ranking of `candidates` for the query at `query` among `queries`.
pub fn csls_rank(
    queries: &[Vec<f64>],
    query: usize,
    candidates: &[Vec<f64>],
    k_nn: usize,
) -> Result<Vec<usize>, AnalysisError> {
    if query >= queries.len() {
        return Err(AnalysisError::Invalid(format!("query {query} out of range")));
    }
    Ok(Csls::new(queries, candidates, k_nn)?.rank(query))
}

/// One held-out word's retrieval outcome.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Retrieval {
    pub query: usize,
    pub gold: usize,
    /// 1-based position of `gold` in the CSLS ranking.
    pub rank: usize,
    pub top: usize,
}

#[derive(Clone, Debug)]
pub struct AlignmentResult {
    pub map: Procrustes,
    /// (query, candidate) index pairs used to fit the map.
    pub train_dict: Vec<(usize, usize)>,
    pub eval_dict: Vec<(usize, usize)>,
    pub retrievals: Vec<Retrieval>,
}

/// Fits Procrustes on `train_dict`, maps every query and ranks the
/// candidates for each `eval_dict` entry with CSLS.
pub fn align(
    queries: &[Vec<f64>],
    candidates: &[Vec<f64>],
    train_dict: &[(usize, usize)],
    eval_dict: &[(usize, usize)],
    k_nn: usize,
) -> Result<AlignmentResult, AnalysisError> {
    let oob = |&(q, c): &(usize, usize)| q >= queries.len() || c >= candidates.len();
    if train_dict.iter().chain(eval_dict).any(oob) {
        return Err(AnalysisError::Invalid("dictionary index out of range".into()));
    }
    if train_dict.iter().any(|p| eval_dict.iter().any(|e| e.0 == p.0)) {
        return Err(AnalysisError::Invalid("train and eval dictionaries share a query".into()));
    }
    let x: Vec<Vec<f64>> = train_dict.iter().map(|&(q, _)| queries[q].clone()).collect();
    let y: Vec<Vec<f64>> = train_dict.iter().map(|&(_, c)| candidates[c].clone()).collect();
    let map = procrustes_fit(&x, &y)?;
    if map.rank_deficient {
        log::warn!("procrustes cross-covariance is rank deficient");
    }
    let mapped = map.apply_all(queries);
    let csls = Csls::new(&mapped, candidates, k_nn)?;
    let retrievals = eval_dict
        .iter()
        .map(|&(q, gold)| {
            let order = csls.rank(q);
            let rank = order.iter().position(|&c| c == gold).expect("gold is a candidate") + 1;
            Retrieval { query: q, gold, rank, top: order[0] }
        })
        .collect();
    Ok(AlignmentResult { map, train_dict: train_dict.to_vec(), eval_dict: eval_dict.to_vec(), retrievals })
}

pub fn precision_at_k(alignment: &AlignmentResult, k: usize) -> Result<f64, AnalysisError> {
    if k < 1 {
        return Err(AnalysisError::Invalid("k must be at least 1".into()));
    }
    let r = &alignment.retrievals;
    if r.is_empty() {
        return Err(AnalysisError::Invalid("empty evaluation dictionary".into()));
    }
    Ok(r.iter().filter(|x| x.rank <= k).count() as f64 / r.len() as f64)
}

/// Sample skewness of the k-occurrence counts `N_k` under cosine k-NN.
pub fn hubness_skewness(vectors: &[Vec<f64>], k: usize) -> Result<f64, AnalysisError> {
    let n = vectors.len();
    if k == 0 || n <= k {
        return Err(AnalysisError::Invalid(format!("hubness needs more than k={k} points, got {n}")));
    }
    let unit = matrix(&vectors.iter().map(|v| vecmath::normalized(v)).collect::<Vec<_>>())?;
    let cos = &unit * unit.transpose();
    let mut counts = vec![0.0f64; n];
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| cos[(i, b)].total_cmp(&cos[(i, a)]).then(a.cmp(&b)));
        for &j in &others[..k] {
            counts[j] += 1.0;
        }
    }
    let mean = counts.iter().sum::<f64>() / n as f64;
    let m2 = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n as f64;
    let m3 = counts.iter().map(|c| (c - mean).powi(3)).sum::<f64>() / n as f64;
    if m2 <= 1e-24 {
        return Ok(0.0);
    }
    Ok(m3 / m2.powf(1.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::tests::{gaussian, random_orthogonal, rotate};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm()
    }

    #[test]
    fn identity_pairs_give_identity() {
        let x = gaussian(20, 5, 1);
        let p = procrustes_fit(&x, &x).unwrap();
        assert!(frob(&p.w, &DMatrix::identity(5, 5)) < 1e-10);
        assert!(!p.rank_deficient);
    }

    #[test]
    fn recovers_a_rotation() {
        let x = gaussian(30, 6, 2);
        let r = random_orthogonal(6, 9);
        let p = procrustes_fit(&x, &rotate(&x, &r)).unwrap();
        assert!(frob(&p.w, &r) < 1e-6);
    }

    #[test]
    fn reflection_is_recovered() {
        let x = gaussian(15, 3, 3);
        let y: Vec<Vec<f64>> = x.iter().map(|v| vec![v[0], -v[1], v[2]]).collect();
        let p = procrustes_fit(&x, &y).unwrap();
        let want = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, -1.0, 1.0]));
        assert!(frob(&p.w, &want) < 1e-10);
        assert_abs_diff_eq!(p.w.determinant(), -1.0, epsilon = 1e-10);
    }

    #[test]
    fn rank_deficient_input_still_orthogonal() {
        let x = vec![vec![1.0, 0.0, 0.0], vec![2.0, 0.0, 0.0]];
        let p = procrustes_fit(&x, &x).unwrap();
        assert!(p.rank_deficient);
        assert!(frob(&(p.w.transpose() * &p.w), &DMatrix::identity(3, 3)) < 1e-10);
    }

    #[test]
    fn least_squares_recovers_a_linear_map() {
        let x = gaussian(40, 6, 4);
        let m = DMatrix::from_row_iterator(6, 3, gaussian(6, 3, 5).into_iter().flatten());
        let y = apply_map(&x, &m).unwrap();
        let fit = least_squares_map(&x, &y).unwrap();
        assert!(frob(&fit, &m) < 1e-9);
    }

    #[test]
    fn single_candidate_ranks_first() {
        let q = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let c = vec![vec![-1.0, 0.3]];
        assert_eq!(csls_rank(&q, 0, &c, 1).unwrap(), vec![0]);
    }

    #[test]
    fn hub_is_demoted_below_closer_raw_cosine() {
        let at = |a: f64| vec![a.cos(), a.sin()];
        let queries = vec![at(0.3), at(0.0), at(-1.0)];
        let candidates = vec![at(0.0), at(0.7)];
        // brute force with k_nn = 1
        let cos = |a: &[f64], b: &[f64]| vecmath::cosine(a, b);
        let r_c: Vec<f64> = candidates
            .iter()
            .map(|c| queries.iter().map(|q| cos(q, c)).fold(f64::MIN, f64::max))
            .collect();
        let r_q0 = candidates.iter().map(|c| cos(&queries[0], c)).fold(f64::MIN, f64::max);
        let s: Vec<f64> = (0..2).map(|j| 2.0 * cos(&queries[0], &candidates[j]) - r_c[j] - r_q0).collect();
        assert!(cos(&queries[0], &candidates[0]) > cos(&queries[0], &candidates[1]));
        assert!(s[1] > s[0]);
        let csls = Csls::new(&queries, &candidates, 1).unwrap();
        assert_abs_diff_eq!(csls.score(0, 0), s[0], epsilon = 1e-12);
        assert_abs_diff_eq!(csls.score(0, 1), s[1], epsilon = 1e-12);
        assert_eq!(csls.rank(0), vec![1, 0]);
    }

    #[test]
    fn equal_local_scales_reduce_to_cosine_order() {
        // candidates on a regular polygon, queries at every vertex: equal r terms
        let n = 8;
        let pts: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let a = i as f64 * std::f64::consts::TAU / n as f64;
                vec![a.cos(), a.sin()]
            })
            .collect();
        let csls = Csls::new(&pts, &pts, 3).unwrap();
        for i in 0..n {
            let mut by_cos: Vec<usize> = (0..n).collect();
            by_cos.sort_by(|&a, &b| vecmath::cosine(&pts[i], &pts[b]).total_cmp(&vecmath::cosine(&pts[i], &pts[a])).then(a.cmp(&b)));
            let ranked = csls.rank(i);
            // exact ties among symmetric neighbours may resolve either way under rounding
            for (a, b) in ranked.iter().zip(&by_cos) {
                assert_abs_diff_eq!(
                    vecmath::cosine(&pts[i], &pts[*a]),
                    vecmath::cosine(&pts[i], &pts[*b]),
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn csls_rejects_bad_neighbourhoods() {
        let q = gaussian(5, 3, 1);
        assert!(Csls::new(&q, &q, 0).is_err());
        assert!(Csls::new(&q, &q, 5).is_err());
        assert!(csls_rank(&q, 9, &q, 2).is_err());
    }

    #[test]
    fn perfect_mapping_retrieves_everything() {
        let y = gaussian(60, 8, 11);
        let r = random_orthogonal(8, 12);
        let x = rotate(&y, &r.transpose());
        let train: Vec<(usize, usize)> = (0..10).map(|i| (i, i)).collect();
        let eval: Vec<(usize, usize)> = (10..60).map(|i| (i, i)).collect();
        let a = align(&x, &y, &train, &eval, 10).unwrap();
        assert_eq!(precision_at_k(&a, 1).unwrap(), 1.0);
        assert!(precision_at_k(&a, 0).is_err());
        assert!(align(&x, &y, &train, &train, 10).is_err());
    }

    #[test]
    fn hubness_examples() {
        // regular polygon: every vertex is a 2-NN of exactly its two neighbours
        let polygon: Vec<Vec<f64>> = (0..9)
            .map(|i| {
                let a = i as f64 * std::f64::consts::TAU / 9.0;
                vec![a.cos(), a.sin()]
            })
            .collect();
        assert_eq!(hubness_skewness(&polygon, 2).unwrap(), 0.0);
        let g = gaussian(11, 4, 3);
        assert_eq!(hubness_skewness(&g, 10).unwrap(), 0.0);
        assert!(hubness_skewness(&gaussian(500, 300, 4), 10).unwrap() > 0.0);
        assert!(hubness_skewness(&g, 11).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn procrustes_is_orthogonal(seed in 0u64..10_000, n in 1usize..12, d in 1usize..6) {
            let x = gaussian(n, d, seed);
            let y = gaussian(n, d, seed + 1);
            let p = procrustes_fit(&x, &y).unwrap();
            let e = (p.w.transpose() * &p.w - DMatrix::identity(d, d)).abs().max();
            prop_assert!(e < 1e-8);
        }

        #[test]
        fn precision_is_monotone_in_k(seed in 0u64..10_000) {
            let x = gaussian(30, 4, seed);
            let y = gaussian(30, 4, seed + 7);
            let train: Vec<(usize, usize)> = (0..6).map(|i| (i, i)).collect();
            let eval: Vec<(usize, usize)> = (6..30).map(|i| (i, i)).collect();
            let a = align(&x, &y, &train, &eval, 5).unwrap();
            prop_assert!(precision_at_k(&a, 5).unwrap() >= precision_at_k(&a, 1).unwrap());
        }
    }
}
