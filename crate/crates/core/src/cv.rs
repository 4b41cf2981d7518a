//! Cross-validation plans, the inner regularization search and the
//! precision/recall bookkeeping used to score reverse inference.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classify::{balance_weights, fit_logistic_with, LogisticModel, Rotation, SolverOptions};
use crate::corpus::Corpus;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CvScheme {
    LeaveOneStudyOut,
    LeaveOneLaboratoryOut,
}

impl CvScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            CvScheme::LeaveOneStudyOut => "leave-one-study-out",
            CvScheme::LeaveOneLaboratoryOut => "leave-one-laboratory-out",
        }
    }
}

impl fmt::Display for CvScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CvScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "leave-one-study-out" | "loso" => Ok(CvScheme::LeaveOneStudyOut),
            "leave-one-laboratory-out" | "lolo" => Ok(CvScheme::LeaveOneLaboratoryOut),
            other => Err(Error::InvalidArgument(format!("unknown cross-validation scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fold {
    /// Held-out study or laboratory id.
    pub held_out: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldPlan {
    pub scheme: CvScheme,
    pub folds: Vec<Fold>,
}

fn unit_of(corpus: &Corpus, map: usize, scheme: CvScheme) -> &str {
    match scheme {
        CvScheme::LeaveOneStudyOut => &corpus.studies()[corpus.records()[map].study].id,
        CvScheme::LeaveOneLaboratoryOut => corpus.laboratory_of(map),
    }
}

/// One fold per study (or laboratory), in order of first appearance.
pub fn make_folds(corpus: &Corpus, scheme: CvScheme) -> Result<FoldPlan> {
    let mut order: Vec<String> = Vec::new();
    let mut members: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for i in 0..corpus.n_maps() {
        let unit = unit_of(corpus, i, scheme);
        if !members.contains_key(unit) {
            order.push(unit.to_owned());
        }
        members.entry(unit.to_owned()).or_default().push(i);
    }
    if order.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "{scheme} needs at least two units with maps, found {}",
            order.len()
        )));
    }
    let folds = order
        .into_iter()
        .map(|unit| {
            let test = members.remove(&unit).unwrap();
            let train = (0..corpus.n_maps()).filter(|i| test.binary_search(i).is_err()).collect();
            Fold {
                held_out: unit,
                train,
                test,
            }
        })
        .collect();
    Ok(FoldPlan { scheme, folds })
}

/// No held-out unit may contribute a training map.
pub fn check_fold_discipline(corpus: &Corpus, scheme: CvScheme, fold: &Fold) -> Result<()> {
    for &i in &fold.train {
        if unit_of(corpus, i, scheme) == fold.held_out || fold.test.binary_search(&i).is_ok() {
            return Err(Error::InvalidArgument(format!(
                "map {} of held-out unit `{}` leaked into training",
                corpus.map_id(i),
                fold.held_out
            )));
        }
    }
    Ok(())
}

pub const N_INNER_SPLITS: usize = 10;
pub const INNER_TEST_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct InnerSplitPlan {
    pub n_splits: usize,
    pub test_fraction: f64,
    /// Positions into the label vector: (train, validation), both ascending.
    pub splits: Vec<(Vec<usize>, Vec<usize>)>,
}

/// Stratified shuffle splits: each class sends `round(fraction * count)`
/// samples (at least one, at most `count - 1`) to validation.
pub fn inner_splits<R: Rng>(
    y: &[bool],
    n_splits: usize,
    test_fraction: f64,
    rng: &mut R,
    context: &str,
) -> Result<InnerSplitPlan> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("test fraction must be in (0, 1), got {test_fraction}")));
    }
    let classes: [Vec<usize>; 2] = [
        (0..y.len()).filter(|&i| !y[i]).collect(),
        (0..y.len()).filter(|&i| y[i]).collect(),
    ];
    for c in &classes {
        if c.len() < 2 {
            return Err(Error::ClassTooSmall {
                context: context.to_owned(),
                count: c.len(),
            });
        }
    }
    let mut splits = Vec::with_capacity(n_splits);
    for _ in 0..n_splits {
        let mut train = Vec::with_capacity(y.len());
        let mut val = Vec::new();
        for c in &classes {
            let n_val = ((test_fraction * c.len() as f64).round() as usize).clamp(1, c.len() - 1);
            let mut idx = c.clone();
            idx.shuffle(rng);
            val.extend_from_slice(&idx[..n_val]);
            train.extend_from_slice(&idx[n_val..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        splits.push((train, val));
    }
    Ok(InnerSplitPlan {
        n_splits,
        test_fraction,
        splits,
    })
}

/// `n_points` log-spaced values from `lo` to `hi`.
pub fn log_grid(lo: f64, hi: f64, n_points: usize) -> Vec<f64> {
    if n_points == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n_points)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n_points - 1) as f64))
        .collect()
}

pub fn default_lambda_grid() -> Vec<f64> {
    log_grid(1e-2, 1e3, 6)
}

/// Mean of the per-class recalls; a class absent from `truth` is ignored.
pub fn balanced_accuracy(pred: &[bool], truth: &[bool]) -> f64 {
    let mut hit = [0usize; 2];
    let mut total = [0usize; 2];
    for (&p, &t) in pred.iter().zip(truth) {
        let c = usize::from(t);
        total[c] += 1;
        if p == t {
            hit[c] += 1;
        }
    }
    let rates: Vec<f64> = (0..2)
        .filter(|&c| total[c] > 0)
        .map(|c| hit[c] as f64 / total[c] as f64)
        .collect();
    if rates.is_empty() {
        0.0
    } else {
        rates.iter().sum::<f64>() / rates.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    pub lambda: f64,
    /// Deduplicated ascending grid with the mean validation score of each value.
    pub scores: Vec<(f64, f64)>,
    /// Number of logistic fits performed.
    pub n_fits: usize,
}

fn sample_weights(y: &[bool], weighted: bool) -> Result<Vec<f64>> {
    if weighted {
        balance_weights(y)
    } else {
        Ok(vec![1.0; y.len()])
    }
}

/// Grid search over `grid` on the inner splits of `(x, y)`, scoring mean
/// balanced accuracy of `P >= 0.5`; ties go to the smaller lambda. Each
/// split walks the grid from the largest value down, warm-starting fits.
pub fn tune_lambda(
    x: &[f64],
    d: usize,
    y: &[bool],
    weighted: bool,
    grid: &[f64],
    plan: &InnerSplitPlan,
) -> Result<TuneResult> {
    let rot = Rotation::new(x, d, &sample_weights(y, weighted)?)?;
    tune_lambda_rotated(&rot, y, weighted, grid, plan)
}

/// [`tune_lambda`] on features already rotated by [`Rotation::new`].
pub fn tune_lambda_rotated(
    rot: &Rotation,
    y: &[bool],
    weighted: bool,
    grid: &[f64],
    plan: &InnerSplitPlan,
) -> Result<TuneResult> {
    let mut grid: Vec<f64> = grid.to_vec();
    if grid.is_empty() {
        return Err(Error::InvalidArgument("lambda grid is empty".into()));
    }
    if grid.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
        return Err(Error::InvalidArgument("lambda values must be positive".into()));
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    if grid.len() == 1 {
        return Ok(TuneResult {
            lambda: grid[0],
            scores: vec![(grid[0], f64::NAN)],
            n_fits: 0,
        });
    }
    let d = rot.d();
    let mut sums = vec![0.0; grid.len()];
    let mut counts = vec![0usize; grid.len()];
    let mut n_fits = 0;
    // the largest-lambda solution of one split starts the next split
    let mut carry: Option<(Vec<f64>, f64)> = None;
    for (train, val) in &plan.splits {
        let xt = rot.subset(train);
        let yt: Vec<bool> = train.iter().map(|&i| y[i]).collect();
        let yv: Vec<bool> = val.iter().map(|&i| y[i]).collect();
        let w = sample_weights(&yt, weighted)?;
        let mut start = carry.take();
        for (g, &lambda) in grid.iter().enumerate().rev() {
            n_fits += 1;
            let opts = SolverOptions {
                start: start.clone(),
                basis: Some(rot.basis()),
                ..Default::default()
            };
            match fit_logistic_with(&xt, d, &yt, &w, lambda, &opts) {
                Ok(model) => {
                    let pred: Vec<bool> = val.iter().map(|&i| model.probability(rot.row(i)) >= 0.5).collect();
                    sums[g] += balanced_accuracy(&pred, &yv);
                    counts[g] += 1;
                    if g + 1 == grid.len() {
                        carry = Some((model.weights.clone(), model.intercept));
                    }
                    start = Some((model.weights, model.intercept));
                }
                Err(e) => log::warn!("inner fit at lambda {lambda} failed: {e}"),
            }
        }
    }
    let scores: Vec<(f64, f64)> = grid
        .iter()
        .zip(sums.iter().zip(&counts))
        .map(|(&l, (&s, &c))| (l, if c > 0 { s / c as f64 } else { f64::NAN }))
        .collect();
    let mut best: Option<(f64, f64)> = None;
    for &(l, s) in &scores {
        if s.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, bs)| s > bs) {
            best = Some((l, s));
        }
    }
    let (lambda, _) = best.ok_or_else(|| Error::Numerical("every inner logistic fit failed".into()))?;
    Ok(TuneResult { lambda, scores, n_fits })
}

/// Refit at the selected lambda on all of `(x, y)`.
pub fn final_fit(x: &[f64], d: usize, y: &[bool], weighted: bool, lambda: f64) -> Result<LogisticModel> {
    let rot = Rotation::new(x, d, &sample_weights(y, weighted)?)?;
    final_fit_rotated(&rot, y, weighted, lambda)
}

/// [`final_fit`] on rotated features; the returned weights are in the
/// original coordinates.
pub fn final_fit_rotated(rot: &Rotation, y: &[bool], weighted: bool, lambda: f64) -> Result<LogisticModel> {
    let w = sample_weights(y, weighted)?;
    let opts = SolverOptions {
        basis: Some(rot.basis()),
        ..Default::default()
    };
    let mut model = fit_logistic_with(rot.rows(), rot.d(), y, &w, lambda, &opts)?;
    model.weights = rot.to_original(&model.weights);
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionRecall {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// 0 when nothing was predicted positive (see `precision_defined`).
    pub precision: f64,
    pub recall: f64,
    pub precision_defined: bool,
    pub recall_defined: bool,
}

pub fn precision_recall(pred: &[bool], truth: &[bool]) -> PrecisionRecall {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if a + b > 0 { a as f64 / (a + b) as f64 } else { 0.0 };
    PrecisionRecall {
        tp,
        fp,
        fn_,
        precision: ratio(tp, fp),
        recall: ratio(tp, fn_),
        precision_defined: tp + fp > 0,
        recall_defined: tp + fn_ > 0,
    }
}

/// Shuffle `labels` among entries sharing the same group, so each group keeps
/// its label count.
pub fn permute_within_groups<R: Rng>(labels: &[bool], groups: &[usize], rng: &mut R) -> Vec<bool> {
    let mut by_group: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &g) in groups.iter().enumerate() {
        by_group.entry(g).or_default().push(i);
    }
    let mut out = labels.to_vec();
    for idx in by_group.values() {
        let mut vals: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
        vals.shuffle(rng);
        for (&i, v) in idx.iter().zip(vals) {
            out[i] = v;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChanceLevel {
    pub mean: f64,
    pub sd: f64,
    pub n_permutations: usize,
}

impl ChanceLevel {
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n.max(1) as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            mean,
            sd: var.sqrt(),
            n_permutations: n,
        }
    }
}
