//! Mass-univariate forward inference: one least-squares fit of the term
//! design per voxel, term contrasts and Bonferroni family-wise correction.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::corpus::{DesignMatrix, Taxonomy};
use crate::error::{Error, Result};
use crate::stats;

/// Columns whose absolute correlation exceeds this are reported as collinear.
pub const COLLINEAR_R: f64 = 0.999;

const VOXEL_BLOCK: usize = 256;

#[derive(Debug, Clone)]
pub struct GlmFit {
    /// `k x p`, row-major; rows follow the design columns.
    pub beta: Vec<f64>,
    pub residual_variance: Vec<f64>,
    pub dof: usize,
    pub rank: usize,
    pub design: DesignMatrix,
    /// `(Y'Y)^-1`, `k x k` row-major.
    pub xtx_inv: Vec<f64>,
    p: usize,
}

impl GlmFit {
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn k(&self) -> usize {
        self.design.n_cols()
    }

    pub fn beta_row(&self, col: usize) -> &[f64] {
        &self.beta[col * self.p..(col + 1) * self.p]
    }
}

/// Groups of design columns that are (near-)linearly dependent. Empty when
/// the design is well posed.
pub fn collinear_groups(design: &DesignMatrix) -> Vec<Vec<String>> {
    let n = design.n_rows();
    let names = design.column_names();
    let n_terms = design.columns().len();
    let mut groups = Vec::new();

    let mut centered: Vec<Option<Vec<f64>>> = Vec::with_capacity(n_terms);
    for j in 0..n_terms {
        let col: Vec<f64> = (0..n).map(|i| design.get(i, j)).collect();
        // without an intercept the uncentred cosine is the relevant measure
        let mean = if design.intercept_included() {
            col.iter().sum::<f64>() / n.max(1) as f64
        } else {
            0.0
        };
        let c: Vec<f64> = col.iter().map(|v| v - mean).collect();
        let ss: f64 = c.iter().map(|v| v * v).sum();
        if ss <= 0.0 {
            if design.intercept_included() {
                groups.push(vec![names[j].clone(), "intercept".into()]);
            } else if mean == 0.0 {
                groups.push(vec![names[j].clone()]);
            }
            centered.push(None);
        } else {
            let norm = ss.sqrt();
            centered.push(Some(c.into_iter().map(|v| v / norm).collect()));
        }
    }
    for a in 0..n_terms {
        for b in a + 1..n_terms {
            if let (Some(ca), Some(cb)) = (&centered[a], &centered[b]) {
                let r: f64 = ca.iter().zip(cb).map(|(x, y)| x * y).sum();
                if r.abs() > COLLINEAR_R {
                    groups.push(vec![names[a].clone(), names[b].clone()]);
                }
            }
        }
    }

    if groups.is_empty() {
        let k = design.n_cols();
        if n < k {
            groups.push(names.clone());
            return groups;
        }
        let y = DMatrix::from_row_slice(n, k, design.values());
        let svd = y.svd(false, true);
        let v_t = svd.v_t.expect("requested");
        let s_max = svd.singular_values.max();
        for (idx, &s) in svd.singular_values.iter().enumerate() {
            if s <= 1e-10 * s_max.max(1.0) {
                let row = v_t.row(idx);
                let scale = row.amax();
                let g: Vec<String> = (0..k)
                    .filter(|&j| row[j].abs() > 1e-6 * scale)
                    .map(|j| names[j].clone())
                    .collect();
                groups.push(g);
            }
        }
    }
    groups
}

/// Least-squares fit of `maps` (`n x p`, row-major) on the design.
pub fn fit_glm(maps: &[f64], p: usize, design: &DesignMatrix) -> Result<GlmFit> {
    let n = design.n_rows();
    let k = design.n_cols();
    if maps.len() != n * p {
        return Err(Error::LengthMismatch {
            entity: "map matrix".into(),
            expected: n * p,
            actual: maps.len(),
        });
    }
    if n <= k {
        return Err(Error::InvalidArgument(format!(
            "need more maps ({n}) than design columns ({k})"
        )));
    }
    let groups = collinear_groups(design);
    if !groups.is_empty() {
        return Err(Error::Collinear { groups });
    }

    let y = DMatrix::from_row_slice(n, k, design.values());
    let qr = y.qr();
    let r = qr.r();
    let q = qr.q();
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("triangular factor is singular".into()))?;
    let xtx_inv = &r_inv * r_inv.transpose();
    // row-major copies for the voxel loops
    let q_rows: Vec<f64> = (0..n).flat_map(|i| (0..k).map(move |j| (i, j))).map(|(i, j)| q[(i, j)]).collect();
    let r_inv_rows: Vec<f64> = (0..k).flat_map(|i| (0..k).map(move |j| (i, j))).map(|(i, j)| r_inv[(i, j)]).collect();
    let dof = n - k;

    let blocks: Vec<(Vec<f64>, Vec<f64>)> = (0..p)
        .into_par_iter()
        .step_by(VOXEL_BLOCK)
        .map(|start| {
            let end = (start + VOXEL_BLOCK).min(p);
            let w = end - start;
            // Q'X for this block of voxels
            let mut qtx = vec![0.0; k * w];
            for i in 0..n {
                let x = &maps[i * p + start..i * p + end];
                for j in 0..k {
                    let qij = q_rows[i * k + j];
                    if qij != 0.0 {
                        let out = &mut qtx[j * w..(j + 1) * w];
                        for (o, &xv) in out.iter_mut().zip(x) {
                            *o += qij * xv;
                        }
                    }
                }
            }
            let mut beta = vec![0.0; k * w];
            for a in 0..k {
                for b in a..k {
                    let rab = r_inv_rows[a * k + b];
                    if rab != 0.0 {
                        for v in 0..w {
                            beta[a * w + v] += rab * qtx[b * w + v];
                        }
                    }
                }
            }
            let mut rss = vec![0.0; w];
            let mut energy = vec![0.0; w];
            let mut fitted = vec![0.0; w];
            for i in 0..n {
                fitted.iter_mut().for_each(|f| *f = 0.0);
                let yrow = design.row(i);
                for (j, &yij) in yrow.iter().enumerate() {
                    if yij != 0.0 {
                        for v in 0..w {
                            fitted[v] += yij * beta[j * w + v];
                        }
                    }
                }
                let x = &maps[i * p + start..i * p + end];
                for v in 0..w {
                    let e = x[v] - fitted[v];
                    rss[v] += e * e;
                    energy[v] += x[v] * x[v];
                }
            }
            // residuals at rounding level count as an exact fit
            let var = rss
                .into_iter()
                .zip(energy)
                .map(|(s, e)| if s <= 1e-24 * e { 0.0 } else { s / dof as f64 })
                .collect();
            (beta, var)
        })
        .collect();

    let mut beta = vec![0.0; k * p];
    let mut residual_variance = Vec::with_capacity(p);
    for (b, (block_beta, var)) in blocks.into_iter().enumerate() {
        let start = b * VOXEL_BLOCK;
        let w = var.len();
        for j in 0..k {
            beta[j * p + start..j * p + start + w].copy_from_slice(&block_beta[j * w..(j + 1) * w]);
        }
        residual_variance.extend(var);
    }
    Ok(GlmFit {
        beta,
        residual_variance,
        dof,
        rank: k,
        design: design.clone(),
        xtx_inv: xtx_inv.transpose().as_slice().to_vec(),
        p,
    })
}

/// How a term's effect is opposed to the rest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContrastMode {
    /// The term's own coefficient; other terms are partialled out by the joint fit.
    #[default]
    Indicator,
    /// Term coefficient minus the mean coefficient of the other design terms
    /// in the same category.
    CategoryMean,
}

#[derive(Debug, Clone)]
pub struct ContrastResult {
    pub term: String,
    pub effect: Vec<f64>,
    pub t_values: Vec<f64>,
    pub p_values: Vec<f64>,
    pub alpha: f64,
    pub fwer_threshold: f64,
    pub significant: Vec<bool>,
}

impl ContrastResult {
    pub fn n_significant(&self) -> usize {
        self.significant.iter().filter(|&&s| s).count()
    }
}

/// Contrast weights over the design columns for `term`.
pub fn contrast_vector(design: &DesignMatrix, term: &str, mode: ContrastMode, taxonomy: Option<&Taxonomy>) -> Result<Vec<f64>> {
    let col = match design.column_of(term) {
        Some(c) => c,
        None if design.excluded().iter().any(|e| e == term) => {
            return Err(Error::ExcludedTerm(term.to_owned()));
        }
        None => {
            return Err(Error::InvalidArgument(format!("term `{term}` is not a design column")));
        }
    };
    let mut c = vec![0.0; design.n_cols()];
    c[col] = 1.0;
    if mode == ContrastMode::CategoryMean {
        let tax = taxonomy.ok_or_else(|| Error::InvalidArgument("category contrast needs the taxonomy".into()))?;
        let cat = tax.category_index(design.term_ids()[col]);
        let others: Vec<usize> = (0..design.columns().len())
            .filter(|&j| j != col && tax.category_index(design.term_ids()[j]) == cat)
            .collect();
        for &j in &others {
            c[j] = -1.0 / others.len() as f64;
        }
    }
    Ok(c)
}

/// Two-sided t-test of one term's contrast at every voxel, Bonferroni-corrected
/// at family-wise level `alpha`.
pub fn term_contrast(fit: &GlmFit, term: &str, mode: ContrastMode, taxonomy: Option<&Taxonomy>, alpha: f64) -> Result<ContrastResult> {
    let c = contrast_vector(&fit.design, term, mode, taxonomy)?;
    let k = fit.k();
    let p = fit.p;
    let cv = DVector::from_vec(c.clone());
    let g = DMatrix::from_row_slice(k, k, &fit.xtx_inv);
    let scale = (cv.transpose() * &g * &cv)[(0, 0)];
    let threshold = fwer_threshold(p, alpha, fit.dof)?;
    let level = alpha / p as f64;
    let dof = fit.dof as f64;

    let mut effect = vec![0.0; p];
    for (j, &cj) in c.iter().enumerate() {
        if cj != 0.0 {
            for (e, b) in effect.iter_mut().zip(fit.beta_row(j)) {
                *e += cj * b;
            }
        }
    }
    let (t_values, p_values): (Vec<f64>, Vec<f64>) = effect
        .par_iter()
        .zip(&fit.residual_variance)
        .map(|(&e, &var)| {
            let se = (var * scale).sqrt();
            if se > 0.0 {
                let t = e / se;
                (t, stats::t_two_sided_p(t, dof))
            } else if e != 0.0 {
                (e.signum() * f64::INFINITY, 0.0)
            } else {
                (0.0, 1.0)
            }
        })
        .unzip();
    let significant = p_values.iter().map(|&pv| pv <= level).collect();
    Ok(ContrastResult {
        term: term.to_owned(),
        effect,
        t_values,
        p_values,
        alpha,
        fwer_threshold: threshold,
        significant,
    })
}

/// Two-sided t threshold controlling the family-wise error over `p` voxels
/// at level `alpha` (Bonferroni).
pub fn fwer_threshold(p: usize, alpha: f64, dof: usize) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must be in (0, 1), got {alpha}")));
    }
    if p == 0 || dof == 0 {
        return Err(Error::InvalidArgument("need p >= 1 and dof >= 1".into()));
    }
    Ok(stats::t_two_sided_quantile(alpha / p as f64, dof as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn design(rows: &[&[f64]], intercept: bool) -> DesignMatrix {
        let k = rows[0].len();
        let names = (0..k).map(|j| format!("t{j}")).collect();
        DesignMatrix::from_rows(names, &rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), intercept).unwrap()
    }

    #[test]
    fn intercept_only_gives_voxel_means() {
        let d = DesignMatrix::from_rows(vec![], &vec![vec![]; 4], true).unwrap();
        let maps = [1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 6.0, 0.0];
        let fit = fit_glm(&maps, 2, &d).unwrap();
        assert!((fit.beta[0] - 3.0).abs() < 1e-12);
        assert!((fit.beta[1] - 15.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_groups_give_group_means() {
        // hand normal equations: Y'Y = diag(2, 2), Y'x = group sums
        let d = design(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]], false);
        let maps = [1.0, 3.0, 10.0, 14.0];
        let fit = fit_glm(&maps, 1, &d).unwrap();
        assert!((fit.beta[0] - 2.0).abs() < 1e-12);
        assert!((fit.beta[1] - 12.0).abs() < 1e-12);
        assert_eq!(fit.dof, 2);
        // RSS = 2 + 8 = 10
        assert!((fit.residual_variance[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn two_group_contrast_is_pooled_t() {
        // term present in the first three samples, intercept included
        let d = design(&[&[1.0], &[1.0], &[1.0], &[0.0], &[0.0], &[0.0]], true);
        let x = [5.0, 7.0, 6.5, 2.0, 3.5, 1.0];
        let fit = fit_glm(&x, 1, &d).unwrap();
        let res = term_contrast(&fit, "t0", ContrastMode::Indicator, None, 0.05).unwrap();
        let (g1, g2) = (&x[..3], &x[3..]);
        let m = |g: &[f64]| g.iter().sum::<f64>() / g.len() as f64;
        let ss = |g: &[f64]| g.iter().map(|v| (v - m(g)).powi(2)).sum::<f64>();
        let sp2 = (ss(g1) + ss(g2)) / 4.0;
        let t = (m(g1) - m(g2)) / (sp2 * (1.0 / 3.0 + 1.0 / 3.0)).sqrt();
        assert!((res.t_values[0] - t).abs() < 1e-10, "{} vs {t}", res.t_values[0]);
    }

    #[test]
    fn zero_residual_guard() {
        let d = design(&[&[1.0], &[1.0], &[0.0], &[0.0]], true);
        let x = [3.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let fit = fit_glm(&x, 2, &d).unwrap();
        let res = term_contrast(&fit, "t0", ContrastMode::Indicator, None, 0.05).unwrap();
        assert_eq!(res.t_values[0], f64::INFINITY);
        assert_eq!(res.t_values[1], 0.0);
        assert_eq!(res.significant, vec![true, false]);
    }

    #[test]
    fn collinear_designs_are_named() {
        // t0 + t1 = 1 with intercept
        let d = design(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]], true);
        match fit_glm(&[0.0; 5], 1, &d).unwrap_err() {
            Error::Collinear { groups } => assert_eq!(groups, vec![vec!["t0".to_string(), "t1".to_string()]]),
            e => panic!("{e}"),
        }
        // three-way dependency invisible to pairwise correlation
        let d = design(
            &[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]],
            true,
        );
        match fit_glm(&[0.0; 6], 1, &d).unwrap_err() {
            Error::Collinear { groups } => assert_eq!(groups[0].len(), 4),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn threshold_examples() {
        let t1 = fwer_threshold(1, 0.05, 20).unwrap();
        assert!((stats::t_two_sided_p(t1, 20.0) - 0.05).abs() < 1e-12);
        let t100 = fwer_threshold(100, 0.05, 20).unwrap();
        assert!((stats::t_two_sided_p(t100, 20.0) - 5e-4).abs() < 1e-15);
        let mut last = 0.0;
        for p in [1, 2, 10, 100, 1000, 100_000] {
            let t = fwer_threshold(p, 0.05, 30).unwrap();
            assert!(t > last);
            last = t;
        }
        assert!(fwer_threshold(10, 0.0, 5).is_err());
        assert!(fwer_threshold(10, 1.0, 5).is_err());
    }

    #[test]
    fn excluded_term_contrast_is_an_error() {
        let corpus = crate::corpus::tests::two_study_corpus();
        let d = crate::corpus::build_design_matrix(&corpus, &["visual".into()], true).unwrap();
        let err = contrast_vector(&d, "visual", ContrastMode::Indicator, None).unwrap_err();
        assert!(matches!(err, Error::ExcludedTerm(ref t) if t == "visual"));
    }
}
