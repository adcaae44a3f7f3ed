//! Contrastive pretraining objectives.
//!
//! * symmetric InfoNCE: each positive competes against every candidate in
//!   the batch, itself included;
//! * InfoLOOB: the positive is left out of its own denominator;
//! * CLOOB: InfoLOOB evaluated on embeddings retrieved from modern Hopfield
//!   memories built from the current batch.
//!
//! All gradients are hand-derived and checked against finite differences in
//! the tests below.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::numeric::{
    log_sum_exp, norm, normalize_backward, softmax, softmax_backward, Matrix, EPSILON_NORM,
};

const UNIT_TOLERANCE: f64 = 1e-9;

/// Row-aligned image and text embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    x: Matrix,
    y: Matrix,
}

impl ContrastiveBatch {
    pub fn new(x: Matrix, y: Matrix) -> Result<Self> {
        if x.shape() != y.shape() {
            return Err(shape_err(format!(
                "image batch {:?} and text batch {:?} differ",
                x.shape(),
                y.shape()
            )));
        }
        if x.rows() < 2 {
            return Err(Error::BatchTooSmall(x.rows()));
        }
        for (which, m) in [("image", &x), ("text", &y)] {
            if let Some((i, n)) = m
                .row_norms()
                .into_iter()
                .enumerate()
                .find(|(_, n)| (n - 1.0).abs() > UNIT_TOLERANCE)
            {
                return Err(Error::Domain(format!(
                    "{which} row {i} has norm {n}, expected unit norm"
                )));
            }
        }
        Ok(Self { x, y })
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn y(&self) -> &Matrix {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    #[default]
    InfoNce,
    Cloob,
}

impl ObjectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::InfoNce => "infonce",
            ObjectiveKind::Cloob => "cloob",
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectiveKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "infonce" | "clip" => Ok(ObjectiveKind::InfoNce),
            "cloob" => Ok(ObjectiveKind::Cloob),
            other => Err(format!(
                "unknown objective `{other}` (expected infonce or cloob)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    pub temperature: f64,
    /// Inverse temperature of the Hopfield retrieval; only used by CLOOB.
    pub hopfield_beta: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            kind: ObjectiveKind::InfoNce,
            temperature: 0.125,
            hopfield_beta: 8.0,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        check_beta(self.hopfield_beta)
    }
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "temperature must be positive, got {tau}"
        )))
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta >= 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "hopfield beta must be non-negative, got {beta}"
        )))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValueAndGrads {
    pub loss: f64,
    pub grad_x: Matrix,
    pub grad_y: Matrix,
}

/// Mean over rows of `−log softmax(row)_i` at the diagonal entry, with its
/// gradient on the logits.
fn nce_rows(logits: &Matrix) -> Result<(f64, Matrix)> {
    let n = logits.rows();
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, logits.cols());
    for i in 0..n {
        let row = logits.row(i);
        loss += log_sum_exp(row)? - row[i];
        let p = softmax(row, 1.0)?;
        let g = grad.row_mut(i);
        for (j, pj) in p.iter().enumerate() {
            g[j] = inv_n * (pj - if i == j { 1.0 } else { 0.0 });
        }
    }
    Ok((loss * inv_n, grad))
}

/// Leave-one-out counterpart of [`nce_rows`]: the diagonal entry is removed
/// from its own denominator.
fn loob_rows(logits: &Matrix) -> Result<(f64, Matrix)> {
    let n = logits.rows();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, logits.cols());
    let mut negatives = Vec::with_capacity(logits.cols() - 1);
    for i in 0..n {
        let row = logits.row(i);
        negatives.clear();
        negatives.extend(
            row.iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, v)| *v),
        );
        loss += log_sum_exp(&negatives)? - row[i];
        let p = softmax(&negatives, 1.0)?;
        let g = grad.row_mut(i);
        let mut k = 0;
        for (j, gj) in g.iter_mut().enumerate() {
            if j == i {
                *gj = -inv_n;
            } else {
                *gj = inv_n * p[k];
                k += 1;
            }
        }
    }
    Ok((loss * inv_n, grad))
}

type RowLoss = fn(&Matrix) -> Result<(f64, Matrix)>;

/// One direction: anchors `a_i` score candidates `b_j`.
fn directional(a: &Matrix, b: &Matrix, tau: f64, rows: RowLoss) -> Result<(f64, Matrix, Matrix)> {
    let logits = a.matmul_t(b)?.scaled(1.0 / tau);
    let (loss, d_logits) = rows(&logits)?;
    let d_a = d_logits.matmul(b)?.scaled(1.0 / tau);
    let d_b = d_logits.t_matmul(a)?.scaled(1.0 / tau);
    Ok((loss, d_a, d_b))
}

fn symmetric(batch: &ContrastiveBatch, tau: f64, rows: RowLoss) -> Result<LossValueAndGrads> {
    check_temperature(tau)?;
    let (l_xy, dx1, dy1) = directional(&batch.x, &batch.y, tau, rows)?;
    let (l_yx, dy2, dx2) = directional(&batch.y, &batch.x, tau, rows)?;
    let mut grad_x = dx1;
    grad_x.axpy(1.0, &dx2)?;
    grad_x.scale(0.5);
    let mut grad_y = dy1;
    grad_y.axpy(1.0, &dy2)?;
    grad_y.scale(0.5);
    Ok(LossValueAndGrads {
        loss: 0.5 * (l_xy + l_yx),
        grad_x,
        grad_y,
    })
}

/// Symmetric InfoNCE over the similarity matrix `S_ij = x_i·y_j / τ`.
pub fn info_nce(batch: &ContrastiveBatch, tau: f64) -> Result<LossValueAndGrads> {
    symmetric(batch, tau, nce_rows)
}

/// Symmetric InfoLOOB; unbounded below.
pub fn info_loob(batch: &ContrastiveBatch, tau: f64) -> Result<LossValueAndGrads> {
    symmetric(batch, tau, loob_rows)
}

/// Softmax weights and pre-normalization norms kept for the backward pass.
#[derive(Debug, Clone)]
pub struct RetrievalCache {
    pub weights: Matrix,
    pub raw_norms: Vec<f64>,
    pub output: Matrix,
}

fn retrieve_with_cache(memory: &Matrix, queries: &Matrix, beta: f64) -> Result<RetrievalCache> {
    check_beta(beta)?;
    if memory.rows() == 0 {
        return Err(Error::Domain("hopfield memory is empty".into()));
    }
    if memory.cols() != queries.cols() {
        return Err(shape_err(format!(
            "memory has {} columns, queries {}",
            memory.cols(),
            queries.cols()
        )));
    }
    let scores = queries.matmul_t(memory)?;
    let mut weights = Matrix::zeros(queries.rows(), memory.rows());
    for i in 0..queries.rows() {
        let p = softmax(scores.row(i), beta)?;
        weights.row_mut(i).copy_from_slice(&p);
    }
    let mut output = weights.matmul(memory)?;
    let mut raw_norms = Vec::with_capacity(output.rows());
    for i in 0..output.rows() {
        let n = norm(output.row(i));
        if !(n > EPSILON_NORM) {
            return Err(Error::DegenerateVector { norm: n });
        }
        raw_norms.push(n);
        output.row_mut(i).iter_mut().for_each(|x| *x /= n);
    }
    Ok(RetrievalCache {
        weights,
        raw_norms,
        output,
    })
}

/// Modern Hopfield readout: each query retrieves the softmax(β·memory·q)-weighted
/// average of the memory rows, renormalized.
pub fn hopfield_retrieve(memory: &Matrix, queries: &Matrix, beta: f64) -> Result<Matrix> {
    Ok(retrieve_with_cache(memory, queries, beta)?.output)
}

/// Gradients of `Σ upstream ⊙ hopfield_retrieve(memory, queries, beta)` with
/// respect to the memory and the queries.
pub fn hopfield_retrieve_backward(
    memory: &Matrix,
    queries: &Matrix,
    beta: f64,
    upstream: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let cache = retrieve_with_cache(memory, queries, beta)?;
    if upstream.shape() != cache.output.shape() {
        return Err(shape_err(format!(
            "upstream {:?} does not match retrieval output {:?}",
            upstream.shape(),
            cache.output.shape()
        )));
    }
    retrieve_backward(memory, queries, beta, &cache, upstream)
}

/// Gradients of `Σ upstream ⊙ retrieve(memory, queries)` with respect to the
/// memory and the queries.
fn retrieve_backward(
    memory: &Matrix,
    queries: &Matrix,
    beta: f64,
    cache: &RetrievalCache,
    upstream: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let mut d_memory = Matrix::zeros(memory.rows(), memory.cols());
    let mut d_queries = Matrix::zeros(queries.rows(), queries.cols());
    for q in 0..queries.rows() {
        let d_raw = normalize_backward(cache.output.row(q), cache.raw_norms[q], upstream.row(q));
        let p = cache.weights.row(q);
        let d_p: Vec<f64> = memory
            .iter_rows()
            .map(|m| crate::numeric::dot(m, &d_raw))
            .collect();
        let d_scores = softmax_backward(p, &d_p);
        let query = queries.row(q);
        for (i, (pi, dsi)) in p.iter().zip(&d_scores).enumerate() {
            let coeff = beta * dsi;
            let d_mem_row = d_memory.row_mut(i);
            for ((dm, dr), qv) in d_mem_row.iter_mut().zip(&d_raw).zip(query) {
                *dm += pi * dr + coeff * qv;
            }
            if coeff != 0.0 {
                let d_q = d_queries.row_mut(q);
                for (dq, mv) in d_q.iter_mut().zip(memory.row(i)) {
                    *dq += coeff * mv;
                }
            }
        }
    }
    Ok((d_memory, d_queries))
}

/// InfoLOOB on Hopfield-retrieved embeddings.
///
/// The image memory `U = X` is queried by both `x_i` and `y_i`, the text memory
/// `V = Y` likewise. The first term scores anchors `U(x_i)` against
/// candidates `U(y_j)`, the second anchors `V(y_i)` against `V(x_j)`.
pub fn cloob_loss(batch: &ContrastiveBatch, tau: f64, beta: f64) -> Result<LossValueAndGrads> {
    check_temperature(tau)?;
    check_beta(beta)?;
    let (x, y) = (&batch.x, &batch.y);
    let ux = retrieve_with_cache(x, x, beta)?;
    let uy = retrieve_with_cache(x, y, beta)?;
    let vx = retrieve_with_cache(y, x, beta)?;
    let vy = retrieve_with_cache(y, y, beta)?;

    let (l_u, d_ux, d_uy) = directional(&ux.output, &uy.output, tau, loob_rows)?;
    let (l_v, d_vy, d_vx) = directional(&vy.output, &vx.output, tau, loob_rows)?;

    let mut grad_x = Matrix::zeros(x.rows(), x.cols());
    let mut grad_y = Matrix::zeros(y.rows(), y.cols());
    // U(x): memory x, queries x
    let (dm, dq) = retrieve_backward(x, x, beta, &ux, &d_ux)?;
    grad_x.axpy(1.0, &dm)?;
    grad_x.axpy(1.0, &dq)?;
    // U(y): memory x, queries y
    let (dm, dq) = retrieve_backward(x, y, beta, &uy, &d_uy)?;
    grad_x.axpy(1.0, &dm)?;
    grad_y.axpy(1.0, &dq)?;
    // V(x): memory y, queries x
    let (dm, dq) = retrieve_backward(y, x, beta, &vx, &d_vx)?;
    grad_y.axpy(1.0, &dm)?;
    grad_x.axpy(1.0, &dq)?;
    // V(y): memory y, queries y
    let (dm, dq) = retrieve_backward(y, y, beta, &vy, &d_vy)?;
    grad_y.axpy(1.0, &dm)?;
    grad_y.axpy(1.0, &dq)?;

    grad_x.scale(0.5);
    grad_y.scale(0.5);
    Ok(LossValueAndGrads {
        loss: 0.5 * (l_u + l_v),
        grad_x,
        grad_y,
    })
}

/// Dispatches on the configured objective.
pub fn contrastive_loss(
    batch: &ContrastiveBatch,
    cfg: &ObjectiveConfig,
) -> Result<LossValueAndGrads> {
    cfg.validate()?;
    match cfg.kind {
        ObjectiveKind::InfoNce => info_nce(batch, cfg.temperature),
        ObjectiveKind::Cloob => cloob_loss(batch, cfg.temperature, cfg.hopfield_beta),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaturationProbe {
    pub nce_grad: f64,
    pub loob_grad: f64,
}

/// Derivative of both objectives with respect to a shared positive similarity
/// `s`, at the batch whose positives all equal `s` and negatives all equal 0.
pub fn saturation_probe(n: usize, s: f64, tau: f64) -> Result<SaturationProbe> {
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    check_temperature(tau)?;
    let mut logits = Matrix::zeros(n, n);
    for i in 0..n {
        logits.set(i, i, s / tau);
    }
    // Symmetric in both directions, so one direction already equals the mean.
    let diag_sum = |g: &Matrix| (0..n).map(|i| g.get(i, i)).sum::<f64>() / tau;
    let (_, d_nce) = nce_rows(&logits)?;
    let (_, d_loob) = loob_rows(&logits)?;
    Ok(SaturationProbe {
        nce_grad: diag_sum(&d_nce),
        loob_grad: diag_sum(&d_loob),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{check_gradient, SeededRng, DEFAULT_FD_STEP};

    fn random_unit_rows(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
        Matrix::new(rows, cols, rng.normal_vec(rows * cols))
            .unwrap()
            .normalize_rows()
            .unwrap()
    }

    /// Two unit vectors per pair with cos(x_i, y_i) = pos and every other
    /// similarity equal to neg, built in an orthonormal basis.
    fn two_pair_batch(pos: f64, neg: f64) -> ContrastiveBatch {
        // x_i = e_i; y_i = pos e_i + neg e_{1-i} + rest e_2, rest fills the norm.
        let rest = (1.0 - pos * pos - neg * neg).max(0.0).sqrt();
        let x = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let y = Matrix::from_rows(&[vec![pos, neg, rest], vec![neg, pos, rest]]).unwrap();
        ContrastiveBatch::new(x, y).unwrap()
    }

    #[test]
    fn uniform_similarity_values() {
        let mut rng = SeededRng::new(0);
        for n in [2usize, 3, 7] {
            let v = random_unit_rows(1, 5, &mut rng);
            let rows: Vec<Vec<f64>> = (0..n).map(|_| v.row(0).to_vec()).collect();
            let m = Matrix::from_rows(&rows).unwrap();
            let batch = ContrastiveBatch::new(m.clone(), m).unwrap();
            let nce = info_nce(&batch, 0.3).unwrap().loss;
            let loob = info_loob(&batch, 0.3).unwrap().loss;
            assert!((nce - (n as f64).ln()).abs() < 1e-12);
            assert!((loob - ((n - 1) as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn two_pair_closed_forms() {
        let b = two_pair_batch(1.0, 0.0);
        let nce = info_nce(&b, 1.0).unwrap().loss;
        assert!((nce - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((nce - 0.3132617).abs() < 1e-7);
        assert!((info_loob(&b, 1.0).unwrap().loss + 1.0).abs() < 1e-12);
        let mirrored = two_pair_batch(0.0, 1.0);
        assert!((info_loob(&mirrored, 1.0).unwrap().loss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_pair_rejected() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert_eq!(
            ContrastiveBatch::new(m.clone(), m).unwrap_err(),
            Error::BatchTooSmall(1)
        );
    }

    #[test]
    fn non_unit_rows_rejected() {
        let m = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            ContrastiveBatch::new(m.clone(), m),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn hopfield_zero_beta_is_memory_mean() {
        let mut rng = SeededRng::new(1);
        let memory = random_unit_rows(5, 4, &mut rng);
        let queries = random_unit_rows(3, 4, &mut rng);
        let out = hopfield_retrieve(&memory, &queries, 0.0).unwrap();
        let mean = crate::numeric::l2_normalize(&memory.column_mean().unwrap()).unwrap();
        for r in out.iter_rows() {
            for (a, b) in r.iter().zip(&mean) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hopfield_single_row_memory() {
        let memory = Matrix::from_rows(&[vec![2.0, 0.0, 1.0]]).unwrap();
        let mut rng = SeededRng::new(2);
        let queries = random_unit_rows(4, 3, &mut rng);
        let expect = crate::numeric::l2_normalize(memory.row(0)).unwrap();
        for beta in [0.0, 1.0, 30.0] {
            let out = hopfield_retrieve(&memory, &queries, beta).unwrap();
            for r in out.iter_rows() {
                for (a, b) in r.iter().zip(&expect) {
                    assert!((a - b).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn hopfield_sharp_beta_retrieves_stored_pattern() {
        let memory = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
        ])
        .unwrap();
        for k in 0..3 {
            let q = memory.select_rows(&[k]);
            let out = hopfield_retrieve(&memory, &q, 50.0).unwrap();
            assert!(crate::numeric::dot(out.row(0), memory.row(k)) >= 1.0 - 1e-6);
        }
    }

    #[test]
    fn hopfield_degenerate_and_shape_errors() {
        let memory = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let q = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            hopfield_retrieve(&memory, &q, 1.0),
            Err(Error::DegenerateVector { .. })
        ));
        let q3 = Matrix::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap();
        assert!(matches!(
            hopfield_retrieve(&memory, &q3, 1.0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn cloob_zero_beta_is_uniform() {
        let mut rng = SeededRng::new(3);
        for n in [2usize, 4, 6] {
            let x = random_unit_rows(n, 5, &mut rng);
            let y = random_unit_rows(n, 5, &mut rng);
            let b = ContrastiveBatch::new(x, y).unwrap();
            let loss = cloob_loss(&b, 0.2, 0.0).unwrap().loss;
            assert!(
                (loss - ((n - 1) as f64).ln()).abs() < 1e-12,
                "n={n} loss={loss}"
            );
        }
    }

    #[test]
    fn cloob_sharp_beta_matches_infoloob_on_orthonormal_pairs() {
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..6).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let b = ContrastiveBatch::new(x.clone(), x).unwrap();
        let cloob = cloob_loss(&b, 0.125, 50.0).unwrap().loss;
        let loob = info_loob(&b, 0.125).unwrap().loss;
        assert!((cloob - loob).abs() < 1e-4, "{cloob} vs {loob}");
    }

    #[test]
    fn saturation_probe_values() {
        let p = saturation_probe(8, 10.0, 1.0).unwrap();
        let tail = 7.0 / (10f64.exp() + 7.0);
        assert!((p.nce_grad + tail).abs() < 1e-15);
        assert!(p.nce_grad.abs() <= 1e-3);
        assert!((p.loob_grad + 1.0).abs() < 1e-12);
        let p0 = saturation_probe(8, 0.0, 1.0).unwrap();
        assert!((p0.nce_grad + 0.875).abs() < 1e-12);
        for (n, s) in [(2, -3.0), (5, 0.4), (16, 25.0)] {
            assert!((saturation_probe(n, s, 1.0).unwrap().loob_grad + 1.0).abs() < 1e-12);
        }
    }

    /// Finite differences of the probe's scalar function agree with its
    /// analytic derivative.
    #[test]
    fn saturation_probe_matches_finite_difference() {
        let n = 8usize;
        let tau = 0.7;
        let nce = |s: f64| -> f64 {
            let a = s / tau;
            -a + (a.exp() + (n - 1) as f64).ln()
        };
        let loob = |s: f64| -> f64 { -s / tau + ((n - 1) as f64).ln() };
        for s in [-1.0, 0.0, 0.8, 3.0] {
            let h = 1e-5;
            let p = saturation_probe(n, s, tau).unwrap();
            assert!((p.nce_grad - (nce(s + h) - nce(s - h)) / (2.0 * h)).abs() < 1e-8);
            assert!((p.loob_grad - (loob(s + h) - loob(s - h)) / (2.0 * h)).abs() < 1e-8);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = SeededRng::new(4);
        let x = random_unit_rows(6, 4, &mut rng);
        let y = random_unit_rows(6, 4, &mut rng);
        let perm = [3, 0, 5, 1, 4, 2];
        let b = ContrastiveBatch::new(x.clone(), y.clone()).unwrap();
        let pb = ContrastiveBatch::new(x.select_rows(&perm), y.select_rows(&perm)).unwrap();
        let pairs: [(f64, f64); 3] = [
            (
                info_nce(&b, 0.2).unwrap().loss,
                info_nce(&pb, 0.2).unwrap().loss,
            ),
            (
                info_loob(&b, 0.2).unwrap().loss,
                info_loob(&pb, 0.2).unwrap().loss,
            ),
            (
                cloob_loss(&b, 0.2, 4.0).unwrap().loss,
                cloob_loss(&pb, 0.2, 4.0).unwrap().loss,
            ),
        ];
        for (a, c) in pairs {
            assert!((a - c).abs() < 1e-10);
        }
    }

    #[test]
    fn infonce_is_non_negative() {
        let mut rng = SeededRng::new(5);
        for _ in 0..50 {
            let x = random_unit_rows(5, 3, &mut rng);
            let y = random_unit_rows(5, 3, &mut rng);
            let b = ContrastiveBatch::new(x, y).unwrap();
            assert!(info_nce(&b, 0.1).unwrap().loss >= 0.0);
        }
    }

    #[test]
    fn hopfield_sharpens_with_beta() {
        let mut rng = SeededRng::new(6);
        let memory = random_unit_rows(6, 8, &mut rng);
        let noisy: Vec<f64> = memory
            .row(2)
            .iter()
            .map(|v| v + 0.1 * rng.next_normal())
            .collect();
        let q = Matrix::from_rows(&[crate::numeric::l2_normalize(&noisy).unwrap()]).unwrap();
        let mut last = f64::NEG_INFINITY;
        for beta in [1.0, 5.0, 10.0, 50.0] {
            let out = hopfield_retrieve(&memory, &q, beta).unwrap();
            let c = crate::numeric::dot(out.row(0), memory.row(2));
            assert!(c >= last);
            last = c;
        }
    }

    fn check_through_normalization(
        loss: impl Fn(&ContrastiveBatch) -> LossValueAndGrads,
        seed: u64,
    ) -> f64 {
        let mut rng = SeededRng::new(seed);
        let (n, d) = (5, 4);
        let raw_x = Matrix::new(n, d, rng.normal_vec(n * d)).unwrap();
        let raw_y = Matrix::new(n, d, rng.normal_vec(n * d)).unwrap();
        let mut start = raw_x.data().to_vec();
        start.extend_from_slice(raw_y.data());
        let split = |v: &[f64]| {
            let x = Matrix::new(n, d, v[..n * d].to_vec()).unwrap();
            let y = Matrix::new(n, d, v[n * d..].to_vec()).unwrap();
            (x, y)
        };
        let value = |v: &[f64]| {
            let (x, y) = split(v);
            let b = ContrastiveBatch::new(x.normalize_rows().unwrap(), y.normalize_rows().unwrap())
                .unwrap();
            loss(&b).loss
        };
        let grad = |v: &[f64]| {
            let (x, y) = split(v);
            let (ux, uy) = (x.normalize_rows().unwrap(), y.normalize_rows().unwrap());
            let r = loss(&ContrastiveBatch::new(ux.clone(), uy.clone()).unwrap());
            let mut out = Vec::new();
            for (raw, unit, g) in [(&x, &ux, &r.grad_x), (&y, &uy, &r.grad_y)] {
                for i in 0..n {
                    out.extend(normalize_backward(unit.row(i), norm(raw.row(i)), g.row(i)));
                }
            }
            out
        };
        check_gradient(value, grad, &start, DEFAULT_FD_STEP)
            .unwrap()
            .max_rel_error
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            let e = check_through_normalization(|b| info_nce(b, 0.25).unwrap(), seed);
            assert!(e < 1e-5, "infonce seed {seed}: {e}");
            let e = check_through_normalization(|b| info_loob(b, 0.25).unwrap(), seed);
            assert!(e < 1e-5, "infoloob seed {seed}: {e}");
            let e = check_through_normalization(|b| cloob_loss(b, 0.25, 3.0).unwrap(), seed);
            assert!(e < 1e-5, "cloob seed {seed}: {e}");
        }
    }
}
