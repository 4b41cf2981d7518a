//! Weighted l2-penalized logistic regression solved by truncated Newton
//! (preconditioned conjugate gradient on the Hessian, Armijo backtracking).

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    /// Fraction of training maps carrying the term.
    pub rho_term: f64,
    pub weighted: bool,
}

impl LogisticModel {
    pub fn decision(&self, x: &[f64]) -> f64 {
        dot(&self.weights, x) + self.intercept
    }

    pub fn probability(&self, x: &[f64]) -> f64 {
        sigmoid(self.decision(x))
    }
}

#[derive(Debug, Clone, Default)]
pub struct SolverOptions<'a> {
    /// Gradient infinity-norm target; defaults to `1e-6 * max(1, n)`.
    pub grad_tol: Option<f64>,
    /// Starting `(weights, intercept)`; defaults to zero weights and the
    /// weighted-prevalence logit.
    pub start: Option<(Vec<f64>, f64)>,
    /// Row-major `d x d` orthogonal matrix `V` when `x` holds rotated
    /// features `V' x`; the stopping test is then applied to the gradient in
    /// the original coordinates.
    pub basis: Option<&'a [f64]>,
}

const MAX_NEWTON: usize = 200;
const MAX_CG: usize = 500;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Dot product with independent partial sums so the loop vectorizes.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let split = n - n % 8;
    for (ca, cb) in a[..split].chunks_exact(8).zip(b[..split].chunks_exact(8)) {
        for k in 0..8 {
            acc[k] += ca[k] * cb[k];
        }
    }
    let tail: f64 = a[split..].iter().zip(&b[split..]).map(|(x, y)| x * y).sum();
    acc.iter().sum::<f64>() + tail
}

fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// `out_i = x_i . v + c`
fn matvec(x: &[f64], d: usize, v: &[f64], c: f64, out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(x.chunks_exact(d)) {
        *o = dot(row, v) + c;
    }
}

fn check_inputs(x: &[f64], d: usize, y: &[bool], w: &[f64]) -> Result<()> {
    let n = y.len();
    if x.len() != n * d {
        return Err(Error::LengthMismatch {
            entity: "logistic design".into(),
            expected: n * d,
            actual: x.len(),
        });
    }
    if w.len() != n {
        return Err(Error::LengthMismatch {
            entity: "sample weights".into(),
            expected: n,
            actual: w.len(),
        });
    }
    if !y.iter().any(|&v| v) || y.iter().all(|&v| v) {
        return Err(Error::SingleClass {
            context: "logistic regression".into(),
        });
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("feature value at sample {}", i / d.max(1))));
    }
    if w.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::InvalidArgument("sample weights must be finite and non-negative".into()));
    }
    Ok(())
}

/// Penalized objective `sum w log(1 + exp(-y~ z)) + lambda/2 |beta|^2`.
pub fn objective(x: &[f64], d: usize, y: &[bool], w: &[f64], lambda: f64, beta: &[f64], b: f64) -> f64 {
    let mut z = vec![0.0; y.len()];
    matvec(x, d, beta, b, &mut z);
    loss_at(&z, y, w) + 0.5 * lambda * dot(beta, beta)
}

fn loss_at(z: &[f64], y: &[bool], w: &[f64]) -> f64 {
    z.iter()
        .zip(y)
        .zip(w)
        .map(|((&zi, &yi), &wi)| wi * softplus(if yi { -zi } else { zi }))
        .sum()
}

/// Gradient of [`objective`]: `d` weight components followed by the intercept.
pub fn gradient(x: &[f64], d: usize, y: &[bool], w: &[f64], lambda: f64, beta: &[f64], b: f64) -> Vec<f64> {
    let mut z = vec![0.0; y.len()];
    matvec(x, d, beta, b, &mut z);
    let mut g = vec![0.0; d + 1];
    let mut curv = vec![0.0; y.len()];
    let mut diag = vec![0.0; d + 1];
    newton_terms(x, d, y, w, lambda, beta, &z, &mut g, &mut curv, &mut diag);
    g
}

/// One pass over the rows: gradient, per-sample curvature and the Hessian
/// diagonal (Jacobi preconditioner).
#[allow(clippy::too_many_arguments)]
fn newton_terms(
    x: &[f64],
    d: usize,
    y: &[bool],
    w: &[f64],
    lambda: f64,
    beta: &[f64],
    z: &[f64],
    g: &mut [f64],
    curv: &mut [f64],
    diag: &mut [f64],
) {
    g.iter_mut().for_each(|v| *v = 0.0);
    diag.iter_mut().for_each(|v| *v = 0.0);
    let (gw, gb) = g.split_at_mut(d);
    let (dw, db) = diag.split_at_mut(d);
    for (i, row) in x.chunks_exact(d).enumerate() {
        let s = sigmoid(z[i]);
        let r = w[i] * (s - f64::from(u8::from(y[i])));
        let c = w[i] * s * (1.0 - s);
        curv[i] = c;
        gb[0] += r;
        db[0] += c;
        for ((gj, dj), &xij) in gw.iter_mut().zip(dw.iter_mut()).zip(row) {
            *gj += r * xij;
            *dj += c * xij * xij;
        }
    }
    for (gj, bj) in gw.iter_mut().zip(beta) {
        *gj += lambda * bj;
    }
    for dj in dw.iter_mut() {
        *dj += lambda;
    }
}

/// `out = (X' C X + lambda) v` over `[weights, intercept]`, one pass over the rows.
fn hess_vec(x: &[f64], d: usize, curv: &[f64], lambda: f64, v: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    let (ow, ob) = out.split_at_mut(d);
    for (row, &c) in x.chunks_exact(d).zip(curv) {
        let u = c * (dot(row, &v[..d]) + v[d]);
        if u != 0.0 {
            axpy(ow, u, row);
            ob[0] += u;
        }
    }
    axpy(ow, lambda, &v[..d]);
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Infinity norm of `[V g_w, g_b]`.
fn rotated_inf_norm(basis: &[f64], g: &[f64]) -> f64 {
    let d = g.len() - 1;
    basis
        .chunks_exact(d)
        .map(|row| dot(row, &g[..d]).abs())
        .fold(g[d].abs(), f64::max)
}

/// Fit with default tolerance and starting point.
pub fn fit_logistic(x: &[f64], d: usize, y: &[bool], weights: &[f64], lambda: f64) -> Result<LogisticModel> {
    fit_logistic_with(x, d, y, weights, lambda, &SolverOptions::default())
}

pub fn fit_logistic_with(
    x: &[f64],
    d: usize,
    y: &[bool],
    w: &[f64],
    lambda: f64,
    opts: &SolverOptions,
) -> Result<LogisticModel> {
    check_inputs(x, d, y, w)?;
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    if let Some(v) = opts.basis {
        if v.len() != d * d {
            return Err(Error::InvalidArgument("rotation basis has the wrong size".into()));
        }
    }
    let n = y.len();
    let tol = opts.grad_tol.unwrap_or(1e-6 * (n as f64).max(1.0));
    let n_pos = y.iter().filter(|&&v| v).count();
    let rho_term = n_pos as f64 / n as f64;
    let weighted = w.iter().any(|&v| v != w[0]);

    let (mut beta, mut b) = match &opts.start {
        Some((b0, c0)) if b0.len() == d => (b0.clone(), *c0),
        Some(_) => {
            return Err(Error::InvalidArgument("starting point has the wrong dimension".into()));
        }
        None => {
            let wp: f64 = y.iter().zip(w).filter(|(&yi, _)| yi).map(|(_, &wi)| wi).sum();
            let wt: f64 = w.iter().sum();
            let prev = (wp / wt).clamp(1e-12, 1.0 - 1e-12);
            (vec![0.0; d], (prev / (1.0 - prev)).ln())
        }
    };

    let mut z = vec![0.0; n];
    matvec(x, d, &beta, b, &mut z);
    let mut f = loss_at(&z, y, w) + 0.5 * lambda * dot(&beta, &beta);
    let mut g = vec![0.0; d + 1];
    let mut curv = vec![0.0; n];
    let mut diag = vec![0.0; d + 1];
    let mut dz = vec![0.0; n];
    let mut zt = vec![0.0; n];
    let mut hv = vec![0.0; d + 1];

    for _ in 0..MAX_NEWTON {
        newton_terms(x, d, y, w, lambda, &beta, &z, &mut g, &mut curv, &mut diag);
        let gnorm = match opts.basis {
            Some(v) => rotated_inf_norm(v, &g),
            None => inf_norm(&g),
        };
        if gnorm <= tol {
            return Ok(LogisticModel {
                weights: beta,
                intercept: b,
                lambda,
                rho_term,
                weighted,
            });
        }
        for v in diag.iter_mut() {
            *v = v.max(1e-12);
        }

        // preconditioned CG on H s = -g
        let g2 = dot(&g, &g).sqrt();
        let forcing = (0.5f64).min(g2.sqrt()) * g2;
        let mut s = vec![0.0; d + 1];
        let mut r: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut zr: Vec<f64> = r.iter().zip(&diag).map(|(a, m)| a / m).collect();
        let mut dir = zr.clone();
        let mut rz = dot(&r, &zr);
        for _ in 0..MAX_CG {
            hess_vec(x, d, &curv, lambda, &dir, &mut hv);
            let dhd = dot(&dir, &hv);
            if dhd <= 0.0 {
                break;
            }
            let alpha = rz / dhd;
            for j in 0..=d {
                s[j] += alpha * dir[j];
                r[j] -= alpha * hv[j];
            }
            if dot(&r, &r).sqrt() <= forcing {
                break;
            }
            for j in 0..=d {
                zr[j] = r[j] / diag[j];
            }
            let rz_new = dot(&r, &zr);
            let beta_cg = rz_new / rz;
            rz = rz_new;
            for j in 0..=d {
                dir[j] = zr[j] + beta_cg * dir[j];
            }
        }
        if !(dot(&g, &s) < 0.0) {
            // fall back to steepest descent
            for j in 0..=d {
                s[j] = -g[j] / diag[j];
            }
        }
        let slope = dot(&g, &s);

        matvec(x, d, &s[..d], s[d], &mut dz);
        let bs = dot(&beta, &s[..d]);
        let ss = dot(&s[..d], &s[..d]);
        let bb = dot(&beta, &beta);
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            for ((t, a), b) in zt.iter_mut().zip(&z).zip(&dz) {
                *t = a + step * b;
            }
            let ft = loss_at(&zt, y, w) + 0.5 * lambda * (bb + 2.0 * step * bs + step * step * ss);
            if ft <= f + 1e-4 * step * slope {
                std::mem::swap(&mut z, &mut zt);
                f = ft;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(Error::Numerical(format!(
                "logistic line search failed (gradient norm {gnorm:.3e}, tolerance {tol:.3e})"
            )));
        }
        axpy(&mut beta, step, &s[..d]);
        b += step * s[d];
        if beta.iter().any(|v| !v.is_finite()) || !b.is_finite() {
            return Err(Error::Numerical("logistic parameters diverged".into()));
        }
    }
    Err(Error::Numerical(format!("logistic solver did not reach tolerance {tol:.3e}")))
}

/// Orthogonal change of feature basis `x -> V' x`, with `V` the eigenvectors
/// of the weighted Gram matrix `X' W X`. The penalty is rotation invariant,
/// so fitting the rotated rows solves the same problem with a much better
/// conditioned Hessian; map weights back with [`Rotation::to_original`].
#[derive(Debug, Clone)]
pub struct Rotation {
    d: usize,
    rows: Vec<f64>,
    basis: Vec<f64>,
}

impl Rotation {
    pub fn new(x: &[f64], d: usize, w: &[f64]) -> Result<Self> {
        let n = w.len();
        if x.len() != n * d || d == 0 {
            return Err(Error::LengthMismatch {
                entity: "rotation input".into(),
                expected: n * d,
                actual: x.len(),
            });
        }
        let xm = DMatrix::from_row_slice(n, d, x);
        let mut xw = xm.clone();
        for (i, &wi) in w.iter().enumerate() {
            xw.row_mut(i).scale_mut(wi.sqrt());
        }
        let gram = xw.transpose() * &xw;
        let eig = SymmetricEigen::new(gram);
        let v = eig.eigenvectors;
        let rotated = &xm * &v;
        Ok(Self {
            d,
            rows: rotated.transpose().as_slice().to_vec(),
            basis: v.transpose().as_slice().to_vec(),
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// All rotated rows, row-major.
    pub fn rows(&self) -> &[f64] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.d..(i + 1) * self.d]
    }

    /// Row-major `V`.
    pub fn basis(&self) -> &[f64] {
        &self.basis
    }

    pub fn subset(&self, rows: &[usize]) -> Vec<f64> {
        rows.iter().flat_map(|&i| self.row(i).iter().copied()).collect()
    }

    /// `V gamma`: weights in the original feature coordinates.
    pub fn to_original(&self, gamma: &[f64]) -> Vec<f64> {
        self.basis.chunks_exact(self.d).map(|row| dot(row, gamma)).collect()
    }
}

/// Per-sample weights `n / (2 * class_count)`: both classes get equal total mass.
pub fn balance_weights(y: &[bool]) -> Result<Vec<f64>> {
    let n = y.len();
    let n_pos = y.iter().filter(|&&v| v).count();
    if n_pos == 0 || n_pos == n {
        return Err(Error::SingleClass {
            context: "balance weights".into(),
        });
    }
    let wp = n as f64 / (2.0 * n_pos as f64);
    let wn = n as f64 / (2.0 * (n - n_pos) as f64);
    Ok(y.iter().map(|&v| if v { wp } else { wn }).collect())
}

/// How the logistic probability is corrected for the term prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasMode {
    /// `rho * P`
    Literal,
    /// Prior-shift posterior `rho P / (rho P + (1 - rho)(1 - P))`.
    #[default]
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasedPrediction {
    pub p: f64,
    pub p_biased: f64,
    pub present: bool,
}

/// Biased score for probability `p`. The presence decision is `P >= 0.5` in
/// both modes (in literal mode this reads `P_b >= rho / 2`).
pub fn bias_probability(p: f64, rho: f64, mode: BiasMode) -> BiasedPrediction {
    let p_biased = match mode {
        BiasMode::Literal => rho * p,
        BiasMode::Normalized => {
            let num = rho * p;
            let den = num + (1.0 - rho) * (1.0 - p);
            if den > 0.0 {
                num / den
            } else {
                rho
            }
        }
    };
    let present = match mode {
        BiasMode::Literal => p_biased >= rho / 2.0,
        BiasMode::Normalized => p >= 0.5,
    };
    BiasedPrediction { p, p_biased, present }
}

pub fn predict_biased(model: &LogisticModel, x: &[f64], mode: BiasMode) -> BiasedPrediction {
    bias_probability(model.probability(x), model.rho_term, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(n: usize, d: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut y: Vec<bool> = (0..n).map(|i| x[i * d] + rng.gen_range(-1.5..1.5) > 0.3).collect();
        y[0] = true;
        y[1] = false;
        (x, y)
    }

    #[test]
    fn balance_weight_examples() {
        let y: Vec<bool> = (0..100).map(|i| i < 10).collect();
        let w = balance_weights(&y).unwrap();
        assert!((w[0] - 5.0).abs() < 1e-15);
        assert!((w[50] - 100.0 / 180.0).abs() < 1e-15);
        assert!((w.iter().sum::<f64>() - 100.0).abs() < 1e-9);
        let pos: f64 = w.iter().zip(&y).filter(|(_, &l)| l).map(|(w, _)| w).sum();
        assert!((pos - 50.0).abs() < 1e-9);
        assert_eq!(balance_weights(&[true, false, true, false]).unwrap(), vec![1.0; 4]);
        assert!(balance_weights(&[true, true]).is_err());
    }

    #[test]
    fn heavy_penalty_gives_prevalence_logit() {
        let (x, y) = random_problem(60, 3, 1);
        let w: Vec<f64> = (0..60).map(|i| 0.5 + (i % 3) as f64).collect();
        let m = fit_logistic(&x, 3, &y, &w, 1e6).unwrap();
        assert!(dot(&m.weights, &m.weights).sqrt() < 1e-3);
        let wp: f64 = y.iter().zip(&w).filter(|(&l, _)| l).map(|(_, w)| w).sum();
        let prev = wp / w.iter().sum::<f64>();
        assert!((m.intercept - (prev / (1.0 - prev)).ln()).abs() < 1e-3);
    }

    #[test]
    fn separable_data_reaches_tolerance() {
        let x = [-3.0, -2.0, -1.0, 1.0, 2.0, 3.0];
        let y = [false, false, false, true, true, true];
        let w = [1.0; 6];
        let m = fit_logistic(&x, 1, &y, &w, 1.0).unwrap();
        let g = gradient(&x, 1, &y, &w, 1.0, &m.weights, m.intercept);
        assert!(inf_norm(&g) <= 1e-6 * 6.0);
        assert!(m.weights[0] > 0.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(fit_logistic(&[1.0, 2.0], 1, &[true, true], &[1.0; 2], 1.0), Err(Error::SingleClass { .. })));
        assert!(matches!(
            fit_logistic(&[1.0, f64::NAN], 1, &[true, false], &[1.0; 2], 1.0),
            Err(Error::NonFinite(_))
        ));
        assert!(fit_logistic(&[1.0, 2.0], 1, &[true, false], &[1.0; 2], 0.0).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (x, y) = random_problem(30, 4, 2);
        let w = balance_weights(&y).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let beta: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b = rng.gen_range(-1.0..1.0);
            let g = gradient(&x, 4, &y, &w, 0.7, &beta, b);
            for j in 0..=4 {
                let h = 1e-5;
                let eval = |delta: f64| {
                    let mut bt = beta.clone();
                    let mut bi = b;
                    if j < 4 {
                        bt[j] += delta;
                    } else {
                        bi += delta;
                    }
                    objective(&x, 4, &y, &w, 0.7, &bt, bi)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!((fd - g[j]).abs() <= 1e-5 * g[j].abs().max(1.0), "{fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn different_starts_agree() {
        let (x, y) = random_problem(50, 3, 4);
        let w = vec![1.0; 50];
        let tight = |start| SolverOptions {
            grad_tol: Some(1e-11),
            start,
            ..Default::default()
        };
        let a = fit_logistic_with(&x, 3, &y, &w, 0.1, &tight(None)).unwrap();
        let b = fit_logistic_with(&x, 3, &y, &w, 0.1, &tight(Some((vec![5.0, -4.0, 3.0], -2.0)))).unwrap();
        for (u, v) in a.weights.iter().zip(&b.weights) {
            assert!((u - v).abs() < 1e-6);
        }
        assert!((a.intercept - b.intercept).abs() < 1e-6);
    }

    #[test]
    fn bias_examples() {
        for &p in &[0.1, 0.5, 0.93] {
            assert_eq!(bias_probability(p, 1.0, BiasMode::Literal).p_biased, p);
            assert!((bias_probability(p, 0.5, BiasMode::Normalized).p_biased - p).abs() < 1e-15);
        }
        for &rho in &[0.05, 0.3, 0.8] {
            assert!((bias_probability(0.5, rho, BiasMode::Normalized).p_biased - rho).abs() < 1e-15);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let p = rng.gen_range(0.0..1.0);
            let rho = rng.gen_range(0.001..1.0);
            assert_eq!(
                bias_probability(p, rho, BiasMode::Literal).present,
                bias_probability(p, rho, BiasMode::Normalized).present
            );
        }
    }
}
