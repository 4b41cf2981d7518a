//! Corpus diagnostics: pairwise map distances grouped by what two maps share,
//! and the correlation structure of the term design.

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, DesignMatrix};
use crate::error::{Error, Result};

/// `n x n` Gram matrix `X X'` of a row-major `n x p` matrix.
pub fn gram_matrix(data: &[f64], n: usize, p: usize) -> Result<Vec<f64>> {
    if data.len() != n * p {
        return Err(Error::LengthMismatch {
            entity: "gram input".into(),
            expected: n * p,
            actual: data.len(),
        });
    }
    let mut out = vec![0.0; n * n];
    if n == 0 || p == 0 {
        return Ok(out);
    }
    // SAFETY: all pointers cover the stated shapes and strides; `out` is
    // distinct from `data`.
    unsafe {
        matrixmultiply::dgemm(
            n,
            p,
            n,
            1.0,
            data.as_ptr(),
            p as isize,
            1,
            data.as_ptr(),
            1,
            p as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    // exact symmetry regardless of kernel blocking
    for i in 0..n {
        for j in i + 1..n {
            let v = out[i * n + j];
            out[j * n + i] = v;
        }
    }
    Ok(out)
}

/// Squared Euclidean distances from a Gram matrix.
pub fn squared_distances(gram: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                out[i * n + j] = (gram[i * n + i] + gram[j * n + j] - 2.0 * gram[i * n + j]).max(0.0);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceHistogram {
    pub group: String,
    pub n_pairs: usize,
    pub median: f64,
    /// `counts.len() + 1` bin edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Median (mean of the two middle values for even counts); NaN when empty.
pub fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    let (_, &mut hi, _) = values.select_nth_unstable_by(n / 2, f64::total_cmp);
    if n % 2 == 1 {
        hi
    } else {
        let lo = values[..n / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

fn histogram(group: &str, mut values: Vec<f64>, lo: f64, hi: f64, n_bins: usize) -> DistanceHistogram {
    let width = if hi > lo { (hi - lo) / n_bins as f64 } else { 1.0 };
    let edges = (0..=n_bins).map(|b| lo + b as f64 * width).collect();
    let mut counts = vec![0; n_bins];
    for &v in &values {
        let b = (((v - lo) / width).floor() as usize).min(n_bins - 1);
        counts[b] += 1;
    }
    DistanceHistogram {
        group: group.to_owned(),
        n_pairs: values.len(),
        median: median(&mut values),
        edges,
        counts,
    }
}

/// Which maps a pair shares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairGroup {
    /// Same study, different term sets.
    SameStudy,
    /// Identical term sets, different studies.
    SameTerms,
    /// Same study and condition.
    SameCondition,
}

impl PairGroup {
    pub const ALL: [PairGroup; 3] = [PairGroup::SameStudy, PairGroup::SameTerms, PairGroup::SameCondition];

    pub fn as_str(self) -> &'static str {
        match self {
            PairGroup::SameStudy => "same-study",
            PairGroup::SameTerms => "same-labels",
            PairGroup::SameCondition => "same-contrast",
        }
    }

    pub fn of(corpus: &Corpus, i: usize, j: usize) -> Option<PairGroup> {
        let (a, b) = (&corpus.records()[i], &corpus.records()[j]);
        if a.study == b.study {
            if a.condition == b.condition {
                Some(PairGroup::SameCondition)
            } else if corpus.map_terms(i) != corpus.map_terms(j) {
                Some(PairGroup::SameStudy)
            } else {
                None
            }
        } else if corpus.map_terms(i) == corpus.map_terms(j) {
            Some(PairGroup::SameTerms)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Same-study, same-labels and same-contrast histograms on shared bins.
    pub histograms: Vec<DistanceHistogram>,
    pub design_columns: Vec<String>,
    /// Row-major Pearson correlation of the design columns.
    pub design_correlation: Vec<f64>,
}

impl Diagnostics {
    pub fn histogram(&self, group: PairGroup) -> &DistanceHistogram {
        self.histograms.iter().find(|h| h.group == group.as_str()).expect("all groups present")
    }
}

/// Distances of every grouped pair, in the order of [`PairGroup::ALL`].
pub fn grouped_distances(corpus: &Corpus) -> Result<[Vec<f64>; 3]> {
    let n = corpus.n_maps();
    let gram = gram_matrix(corpus.data(), n, corpus.p())?;
    let mut groups: [Vec<f64>; 3] = Default::default();
    for i in 0..n {
        for j in i + 1..n {
            if let Some(g) = PairGroup::of(corpus, i, j) {
                let d2 = (gram[i * n + i] + gram[j * n + j] - 2.0 * gram[i * n + j]).max(0.0);
                groups[g as usize].push(d2.sqrt());
            }
        }
    }
    Ok(groups)
}

/// Pearson correlation between design columns; a constant column has unit
/// self-correlation and zero correlation with everything else.
pub fn design_correlation(design: &DesignMatrix) -> Vec<f64> {
    let (n, k) = (design.n_rows(), design.n_cols());
    let mut centred = vec![0.0; n * k];
    let mut norms = vec![0.0; k];
    for c in 0..k {
        let mean = design.column_sum(c) / n.max(1) as f64;
        for r in 0..n {
            let v = design.get(r, c) - mean;
            centred[c * n + r] = v;
            norms[c] += v * v;
        }
    }
    let mut out = vec![0.0; k * k];
    for a in 0..k {
        for b in 0..k {
            out[a * k + b] = if a == b {
                1.0
            } else if norms[a] == 0.0 || norms[b] == 0.0 {
                0.0
            } else {
                let s: f64 = (0..n).map(|r| centred[a * n + r] * centred[b * n + r]).sum();
                (s / (norms[a] * norms[b]).sqrt()).clamp(-1.0, 1.0)
            };
        }
    }
    out
}

pub fn distance_diagnostics(corpus: &Corpus, design: &DesignMatrix, n_bins: usize) -> Result<Diagnostics> {
    if n_bins == 0 {
        return Err(Error::InvalidArgument("histograms need at least one bin".into()));
    }
    let groups = grouped_distances(corpus)?;
    let hi = groups.iter().flatten().copied().fold(0.0, f64::max);
    let histograms = PairGroup::ALL
        .iter()
        .zip(groups)
        .map(|(g, v)| histogram(g.as_str(), v, 0.0, hi, n_bins))
        .collect();
    Ok(Diagnostics {
        histograms,
        design_columns: design.column_names(),
        design_correlation: design_correlation(design),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_design_matrix;
    use crate::corpus::tests::two_study_corpus;

    #[test]
    fn gram_matches_naive() {
        let data: Vec<f64> = (0..15).map(|v| (v as f64 * 0.7).sin()).collect();
        let g = gram_matrix(&data, 3, 5).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let e: f64 = (0..5).map(|k| data[i * 5 + k] * data[j * 5 + k]).sum();
                assert!((g[i * 3 + j] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
        assert!(median(&mut []).is_nan());
    }

    #[test]
    fn correlation_is_symmetric_with_unit_diagonal() {
        let c = two_study_corpus();
        let design = build_design_matrix(&c, &[], true).unwrap();
        let k = design.n_cols();
        let r = design_correlation(&design);
        for a in 0..k {
            assert_eq!(r[a * k + a], 1.0);
            for b in 0..k {
                assert_eq!(r[a * k + b], r[b * k + a]);
            }
        }
    }

    #[test]
    fn identical_maps_have_zero_distance() {
        let data = vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0];
        let g = gram_matrix(&data, 2, 3).unwrap();
        assert_eq!(squared_distances(&g, 2), vec![0.0; 4]);
    }

    #[test]
    fn histogram_counts_every_pair() {
        let c = two_study_corpus();
        let design = build_design_matrix(&c, &[], true).unwrap();
        let d = distance_diagnostics(&c, &design, 4).unwrap();
        let groups = grouped_distances(&c).unwrap();
        for (h, g) in d.histograms.iter().zip(&groups) {
            assert_eq!(h.counts.iter().sum::<usize>(), g.len());
            assert_eq!(h.n_pairs, g.len());
        }
    }
}
