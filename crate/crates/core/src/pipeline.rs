//! End-to-end forward and reverse inference runs over a corpus.
//!
//! The reverse run is nested cross-validation: per outer fold, Ward parcels
//! and ANOVA selections are fit on training maps only; the logistic
//! regularization is tuned on stratified inner splits; the refit model
//! predicts the held-out study (or laboratory). Chance levels come from
//! refits on training labels permuted within study.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{
    bias_probability, fit_naive_bayes, gather, nearest, ovr_tasks, predict_nb, BiasMode, LogisticModel, NegativeClass,
    Rotation, TermClassifier, TermModel, KNN_K_GRID,
};
use crate::corpus::{build_design_matrix, validate_term_span, Corpus};
use crate::cv::{
    balanced_accuracy, check_fold_discipline, default_lambda_grid, final_fit_rotated, inner_splits, make_folds,
    permute_within_groups, precision_recall, tune_lambda_rotated, ChanceLevel, CvScheme, Fold, FoldPlan,
    INNER_TEST_FRACTION, N_INNER_SPLITS,
};
use crate::diagnostics::gram_matrix;
use crate::error::{Error, Result};
use crate::glm::{fit_glm, term_contrast, ContrastMode, ContrastResult, GlmFit};
use crate::parcel::{anova_select, backproject, reduce, ward_parcellate, Parcellation};
use crate::seed;
use crate::volume::{build_adjacency, selection_count, top_fraction_mask, MaskedVector, Smoother};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    LogisticWeighted,
    Logistic,
    NaiveBayes,
    Knn,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::LogisticWeighted, Method::Logistic, Method::NaiveBayes, Method::Knn];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::LogisticWeighted => "logistic-weighted",
            Method::Logistic => "logistic",
            Method::NaiveBayes => "naive-bayes",
            Method::Knn => "knn",
        }
    }

    fn is_logistic(self) -> bool {
        matches!(self, Method::LogisticWeighted | Method::Logistic)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method `{s}` (expected logistic, logistic-weighted, naive-bayes or knn)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReverseConfig {
    pub methods: Vec<Method>,
    pub cv: CvScheme,
    pub lambda_grid: Vec<f64>,
    /// Parcels per voxel.
    pub parcel_ratio: f64,
    pub select_frac: f64,
    pub n_inner_splits: usize,
    pub inner_test_fraction: f64,
    /// Zero disables permutation chance; analytic levels are always reported.
    pub n_permutations: usize,
    pub bias_mode: BiasMode,
    pub negative: NegativeClass,
    pub knn_grid: Vec<usize>,
    pub seed: u64,
}

impl Default for ReverseConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::LogisticWeighted],
            cv: CvScheme::LeaveOneStudyOut,
            lambda_grid: default_lambda_grid(),
            parcel_ratio: 0.31,
            select_frac: 0.3,
            n_inner_splits: N_INNER_SPLITS,
            inner_test_fraction: INNER_TEST_FRACTION,
            n_permutations: 100,
            bias_mode: BiasMode::Normalized,
            negative: NegativeClass::AllMaps,
            knn_grid: KNN_K_GRID.to_vec(),
            seed: 0,
        }
    }
}

impl ReverseConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.methods.is_empty() {
            return bad("no method selected".into());
        }
        for (name, v) in [("parcel ratio", self.parcel_ratio), ("select fraction", self.select_frac)] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(format!("{name} must be in (0, 1], got {v}"));
            }
        }
        if self.lambda_grid.is_empty() || self.lambda_grid.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return bad("lambda grid must hold positive values".into());
        }
        if self.n_inner_splits == 0 {
            return bad("at least one inner split is needed".into());
        }
        if !(self.inner_test_fraction > 0.0 && self.inner_test_fraction < 1.0) {
            return bad(format!("inner test fraction must be in (0, 1), got {}", self.inner_test_fraction));
        }
        if self.knn_grid.is_empty() || self.knn_grid.iter().any(|&k| !(5..=20).contains(&k)) {
            return bad("k values must lie in 5..=20".into());
        }
        Ok(())
    }

    fn distinct_lambdas(&self) -> usize {
        let mut g = self.lambda_grid.clone();
        g.sort_by(f64::total_cmp);
        g.dedup();
        g.len()
    }
}

/// `round(ratio * p)`, at least one parcel.
pub fn n_parcels(p: usize, ratio: f64) -> usize {
    ((ratio * p as f64).round() as usize).clamp(1, p.max(1))
}

/// Work done for one (method, term, fold).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub method: Method,
    pub term: String,
    pub fold: String,
    pub n_train: usize,
    pub n_train_pos: usize,
    pub n_test: usize,
    pub n_selected: usize,
    pub lambda: Option<f64>,
    pub k: Option<usize>,
    pub inner_fits: usize,
    pub final_fits: usize,
    pub chance_fits: usize,
}

/// One held-out prediction; `p` is absent when the term could not be
/// trained in that fold (the map then counts as predicted absent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub method: Method,
    pub fold: usize,
    pub map: usize,
    pub term: usize,
    pub p: Option<f64>,
    pub p_biased: Option<f64>,
    pub predicted: bool,
    pub truth: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermMetrics {
    pub method: Method,
    pub cv_scheme: CvScheme,
    pub term: String,
    pub category: String,
    /// Median over folds of positive training maps.
    pub support_train: usize,
    /// Positive held-out maps pooled over folds.
    pub support_test: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub precision_defined: bool,
    pub recall: f64,
    pub precision_chance: f64,
    pub recall_chance: f64,
    pub precision_chance_sd: f64,
    pub recall_chance_sd: f64,
    pub n_permutations: usize,
    /// Test prevalence.
    pub precision_chance_analytic: f64,
    /// Fraction of test maps predicted present.
    pub recall_chance_analytic: f64,
    /// Median of the per-fold selected lambdas.
    pub lambda_selected: Option<f64>,
    pub n_fits: usize,
}

impl TermMetrics {
    pub fn f1(&self) -> f64 {
        f1(self.tp, self.fp, self.fn_)
    }
}

pub fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let den = 2 * tp + fp + fn_;
    if den == 0 {
        0.0
    } else {
        2.0 * tp as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub held_out: String,
    pub n_train: usize,
    pub n_test: usize,
    pub n_parcels: Option<usize>,
    pub stopped_early: bool,
    pub knn_k: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ReverseRun {
    pub config: ReverseConfig,
    pub plan: FoldPlan,
    pub folds: Vec<FoldSummary>,
    /// Terms evaluated, in taxonomy order.
    pub terms: Vec<usize>,
    pub tasks: Vec<TaskRecord>,
    pub predictions: Vec<PredictionRecord>,
    pub metrics: Vec<TermMetrics>,
}

impl ReverseRun {
    pub fn metrics_for(&self, method: Method) -> impl Iterator<Item = &TermMetrics> {
        self.metrics.iter().filter(move |m| m.method == method)
    }

    /// Inner plus final fits of one term and method over all folds.
    pub fn model_fits(&self, method: Method, term: &str) -> usize {
        self.tasks
            .iter()
            .filter(|t| t.method == method && t.term == term)
            .map(|t| t.inner_fits + t.final_fits)
            .sum()
    }
}

/// Counts of one permutation's pooled confusion table.
type Confusion = [usize; 3];

fn confusion(pred: &[bool], truth: &[bool]) -> Confusion {
    let mut c = [0; 3];
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => c[0] += 1,
            (true, false) => c[1] += 1,
            (false, true) => c[2] += 1,
            _ => {}
        }
    }
    c
}

fn rates(c: Confusion) -> (f64, f64) {
    let [tp, fp, fn_] = c;
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    (precision, recall)
}

struct MethodFold {
    method: Method,
    task: TaskRecord,
    /// `(p, p_biased, present)` per test map.
    predictions: Vec<(f64, f64, bool)>,
    chance: Vec<Confusion>,
}

struct TermFold {
    outputs: Vec<MethodFold>,
}

struct FoldOutput {
    summary: FoldSummary,
    terms: Vec<TermFold>,
}

/// Permuted full-corpus labels per permutation, shuffled within study.
fn permuted_labels(corpus: &Corpus, term: usize, n: usize, master: u64) -> Vec<Vec<bool>> {
    let labels = corpus.labels(term);
    let groups: Vec<usize> = corpus.records().iter().map(|r| r.study).collect();
    let name = corpus.taxonomy().term_name(term);
    (0..n)
        .map(|b| permute_within_groups(&labels, &groups, &mut seed::rng(master, &[&"permutation", &name, &b])))
        .collect()
}

fn sample_weights(y: &[bool], weighted: bool) -> Result<Vec<f64>> {
    if weighted {
        crate::classify::balance_weights(y)
    } else {
        Ok(vec![1.0; y.len()])
    }
}

fn logistic_scores(model: &LogisticModel, xt: &[f64], d: usize, mode: BiasMode) -> Vec<(f64, f64, bool)> {
    xt.chunks_exact(d)
        .map(|row| {
            let b = bias_probability(model.probability(row), model.rho_term, mode);
            (b.p, b.p_biased, b.present)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn parcel_term_fold(
    corpus: &Corpus,
    config: &ReverseConfig,
    fold: &Fold,
    features: &[f64],
    q: usize,
    task_rows: &[usize],
    labels: &[bool],
    term: usize,
    perms: &[Vec<bool>],
) -> Result<Vec<MethodFold>> {
    let tax = corpus.taxonomy();
    let name = tax.term_name(term);
    let selection = anova_select(features, q, task_rows, labels, config.select_frac)?;
    let d = selection.selected.len();
    let x = gather(features, q, task_rows, &selection.selected);
    let xt = gather(features, q, &fold.test, &selection.selected);
    let truth_test: Vec<bool> = fold.test.iter().map(|&i| corpus.has_term(i, term)).collect();
    let n_train_pos = labels.iter().filter(|&&v| v).count();
    let record = |method: Method| TaskRecord {
        method,
        term: name.to_owned(),
        fold: fold.held_out.clone(),
        n_train: task_rows.len(),
        n_train_pos,
        n_test: fold.test.len(),
        n_selected: d,
        lambda: None,
        k: None,
        inner_fits: 0,
        final_fits: 0,
        chance_fits: 0,
    };
    let perm_train = |b: &Vec<bool>| -> Vec<bool> { task_rows.iter().map(|&i| b[i]).collect() };
    let single_class = |y: &[bool]| y.iter().all(|&v| v) || !y.iter().any(|&v| v);

    let mut outputs = Vec::new();
    for &method in &config.methods {
        match method {
            Method::LogisticWeighted | Method::Logistic => {
                let weighted = method == Method::LogisticWeighted;
                let rot = Rotation::new(&x, d, &sample_weights(labels, weighted)?)?;
                let plan = if config.distinct_lambdas() > 1 {
                    let mut rng = seed::rng(config.seed, &[&"inner", &name, &fold.held_out.as_str()]);
                    Some(inner_splits(
                        labels,
                        config.n_inner_splits,
                        config.inner_test_fraction,
                        &mut rng,
                        name,
                    )?)
                } else {
                    None
                };
                let tune = match &plan {
                    Some(plan) => tune_lambda_rotated(&rot, labels, weighted, &config.lambda_grid, plan)?,
                    None => crate::cv::TuneResult {
                        lambda: config.lambda_grid[0],
                        scores: vec![(config.lambda_grid[0], f64::NAN)],
                        n_fits: 0,
                    },
                };
                let model = final_fit_rotated(&rot, labels, weighted, tune.lambda)?;
                let predictions = logistic_scores(&model, &xt, d, config.bias_mode);
                let mut chance = Vec::with_capacity(perms.len());
                let mut chance_fits = 0;
                for b in perms {
                    let yb = perm_train(b);
                    if single_class(&yb) {
                        chance.push(confusion(&vec![false; truth_test.len()], &truth_test));
                        continue;
                    }
                    chance_fits += 1;
                    let mb = final_fit_rotated(&rot, &yb, weighted, tune.lambda)?;
                    let pred: Vec<bool> = logistic_scores(&mb, &xt, d, config.bias_mode).iter().map(|s| s.2).collect();
                    chance.push(confusion(&pred, &truth_test));
                }
                let mut task = record(method);
                task.lambda = Some(tune.lambda);
                task.inner_fits = tune.n_fits;
                task.final_fits = 1;
                task.chance_fits = chance_fits;
                outputs.push(MethodFold {
                    method,
                    task,
                    predictions,
                    chance,
                });
            }
            Method::NaiveBayes => {
                let model = fit_naive_bayes(&x, d, labels)?;
                let score = |m: &crate::classify::NaiveBayesModel| -> Vec<(f64, f64, bool)> {
                    xt.chunks_exact(d)
                        .map(|row| {
                            let p = predict_nb(m, row);
                            (p, p, p >= 0.5)
                        })
                        .collect()
                };
                let predictions = score(&model);
                let mut chance = Vec::with_capacity(perms.len());
                let mut chance_fits = 0;
                for b in perms {
                    let yb = perm_train(b);
                    if single_class(&yb) {
                        chance.push(confusion(&vec![false; truth_test.len()], &truth_test));
                        continue;
                    }
                    chance_fits += 1;
                    let pred: Vec<bool> = score(&fit_naive_bayes(&x, d, &yb)?).iter().map(|s| s.2).collect();
                    chance.push(confusion(&pred, &truth_test));
                }
                let mut task = record(method);
                task.final_fits = 1;
                task.chance_fits = chance_fits;
                outputs.push(MethodFold {
                    method,
                    task,
                    predictions,
                    chance,
                });
            }
            Method::Knn => {}
        }
    }
    Ok(outputs)
}

/// Training maps sorted by distance to `i` (ties by index), first `k_max`.
fn neighbours(gram: &[f64], n: usize, i: usize, train: &[usize], k_max: usize) -> Vec<usize> {
    let dist: Vec<f64> = train
        .iter()
        .map(|&j| (gram[i * n + i] + gram[j * n + j] - 2.0 * gram[i * n + j]).max(0.0))
        .collect();
    nearest(&dist, k_max.min(train.len())).into_iter().map(|t| train[t]).collect()
}

/// Pick k on shuffled inner splits of the training maps by mean per-term
/// balanced accuracy; ties go to the smaller k.
fn select_k(corpus: &Corpus, gram: &[f64], fold: &Fold, terms: &[usize], config: &ReverseConfig) -> Result<usize> {
    let mut grid = config.knn_grid.clone();
    grid.sort_unstable();
    grid.dedup();
    if grid.len() == 1 {
        return Ok(grid[0]);
    }
    let n = corpus.n_maps();
    let k_max = *grid.last().unwrap();
    let mut rng = seed::rng(config.seed, &[&"knn", &fold.held_out.as_str()]);
    let n_val = selection_count(fold.train.len(), config.inner_test_fraction).clamp(1, fold.train.len() - 1);
    let mut scores = vec![0.0; grid.len()];
    for _ in 0..config.n_inner_splits {
        let mut order = fold.train.clone();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let (val, train) = order.split_at(n_val);
        let mut train = train.to_vec();
        train.sort_unstable();
        let neigh: Vec<Vec<usize>> = val.iter().map(|&i| neighbours(gram, n, i, &train, k_max)).collect();
        for (g, &k) in grid.iter().enumerate() {
            let mut acc = 0.0;
            let mut used = 0;
            for &t in terms {
                let truth: Vec<bool> = val.iter().map(|&i| corpus.has_term(i, t)).collect();
                if truth.iter().all(|&v| v) || !truth.iter().any(|&v| v) {
                    continue;
                }
                let pred: Vec<bool> = neigh
                    .iter()
                    .map(|nn| 2 * nn.iter().take(k).filter(|&&j| corpus.has_term(j, t)).count() > k)
                    .collect();
                acc += balanced_accuracy(&pred, &truth);
                used += 1;
            }
            if used > 0 {
                scores[g] += acc / used as f64;
            }
        }
    }
    let mut best = 0;
    for g in 1..grid.len() {
        if scores[g] > scores[best] {
            best = g;
        }
    }
    Ok(grid[best])
}

fn knn_fold(
    corpus: &Corpus,
    config: &ReverseConfig,
    gram: &[f64],
    fold: &Fold,
    terms: &[usize],
    perms: &[Vec<Vec<bool>>],
) -> Result<(usize, Vec<TermFold>)> {
    let n = corpus.n_maps();
    let k = select_k(corpus, gram, fold, terms, config)?;
    let neigh: Vec<Vec<usize>> = fold.test.iter().map(|&i| neighbours(gram, n, i, &fold.train, k)).collect();
    let tax = corpus.taxonomy();
    let out = terms
        .iter()
        .zip(perms)
        .map(|(&t, perm)| {
            let truth_test: Vec<bool> = fold.test.iter().map(|&i| corpus.has_term(i, t)).collect();
            let vote = |has: &dyn Fn(usize) -> bool| -> Vec<(f64, f64, bool)> {
                neigh
                    .iter()
                    .map(|nn| {
                        let c = nn.iter().filter(|&&j| has(j)).count();
                        let p = c as f64 / nn.len().max(1) as f64;
                        (p, p, 2 * c > nn.len())
                    })
                    .collect()
            };
            let predictions = vote(&|j| corpus.has_term(j, t));
            let chance = perm
                .iter()
                .map(|b| {
                    let pred: Vec<bool> = vote(&|j| b[j]).iter().map(|s| s.2).collect();
                    confusion(&pred, &truth_test)
                })
                .collect();
            let n_train_pos = fold.train.iter().filter(|&&i| corpus.has_term(i, t)).count();
            TermFold {
                outputs: vec![MethodFold {
                    method: Method::Knn,
                    task: TaskRecord {
                        method: Method::Knn,
                        term: tax.term_name(t).to_owned(),
                        fold: fold.held_out.clone(),
                        n_train: fold.train.len(),
                        n_train_pos,
                        n_test: fold.test.len(),
                        n_selected: corpus.p(),
                        lambda: None,
                        k: Some(k),
                        inner_fits: 0,
                        final_fits: 1,
                        chance_fits: 0,
                    },
                    predictions,
                    chance,
                }],
            }
        })
        .collect();
    Ok((k, out))
}

fn run_fold(
    corpus: &Corpus,
    config: &ReverseConfig,
    fold: &Fold,
    terms: &[usize],
    perms: &[Vec<Vec<bool>>],
    gram: Option<&[f64]>,
) -> Result<FoldOutput> {
    check_fold_discipline(corpus, config.cv, fold)?;
    let tax = corpus.taxonomy();
    let mut summary = FoldSummary {
        held_out: fold.held_out.clone(),
        n_train: fold.train.len(),
        n_test: fold.test.len(),
        n_parcels: None,
        stopped_early: false,
        knn_k: None,
    };
    let mut by_term: Vec<TermFold> = terms.iter().map(|_| TermFold { outputs: Vec::new() }).collect();

    if config.methods.iter().any(|m| *m != Method::Knn) {
        let p = corpus.p();
        let adjacency = build_adjacency(corpus.mask());
        let ward = ward_parcellate(
            corpus.data(),
            p,
            Some(&fold.train),
            &adjacency,
            n_parcels(p, config.parcel_ratio),
            corpus.mask().id(),
        )?;
        let parc = ward.parcellation;
        summary.n_parcels = Some(parc.n_parcels());
        summary.stopped_early = ward.stopped_early;
        let all: Vec<usize> = (0..corpus.n_maps()).collect();
        let features = reduce(corpus.data(), p, &all, &parc)?;
        let q = parc.n_parcels();

        let mut jobs = Vec::new();
        for (cat, _) in tax.categories() {
            for task in ovr_tasks(corpus, &fold.train, cat, config.negative)? {
                if let Some(pos) = terms.iter().position(|&t| t == task.term) {
                    jobs.push((pos, task));
                }
            }
        }
        let results: Vec<(usize, Result<Vec<MethodFold>>)> = jobs
            .par_iter()
            .map(|(pos, task)| {
                (
                    *pos,
                    parcel_term_fold(
                        corpus,
                        config,
                        fold,
                        &features,
                        q,
                        &task.rows,
                        &task.labels,
                        task.term,
                        &perms[*pos],
                    ),
                )
            })
            .collect();
        for (pos, r) in results {
            match r {
                Ok(outs) => by_term[pos].outputs.extend(outs),
                Err(Error::ClassTooSmall { context, count }) => {
                    log::warn!("fold {}: term `{context}` has a class of {count} map(s); skipped", fold.held_out)
                }
                Err(e) => return Err(e),
            }
        }
    }

    if config.methods.contains(&Method::Knn) {
        let gram = gram.ok_or_else(|| Error::InvalidArgument("KNN needs the map Gram matrix".into()))?;
        let (k, outs) = knn_fold(corpus, config, gram, fold, terms, perms)?;
        summary.knn_k = Some(k);
        for (slot, out) in by_term.iter_mut().zip(outs) {
            slot.outputs.extend(out.outputs);
        }
    }
    // keep the configured method order within each term
    for t in &mut by_term {
        t.outputs.sort_by_key(|o| config.methods.iter().position(|m| *m == o.method));
    }
    Ok(FoldOutput { summary, terms: by_term })
}

fn median_of<T: Copy + PartialOrd>(mut v: Vec<T>) -> Option<T> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.partial_cmp(b).expect("comparable"));
    Some(v[(v.len() - 1) / 2])
}

/// Nested cross-validated reverse inference for every usable term.
pub fn run_reverse(corpus: &Corpus, config: &ReverseConfig) -> Result<ReverseRun> {
    config.validate()?;
    let tax = corpus.taxonomy();
    let plan = make_folds(corpus, config.cv)?;
    let terms: Vec<usize> = validate_term_span(corpus)
        .into_iter()
        .filter_map(|s| {
            if !s.usable {
                log::warn!("term `{}` appears in {} study; skipped", s.term, s.n_studies);
            }
            s.usable.then(|| tax.term_id(&s.term).expect("taxonomy term"))
        })
        .collect();
    let perms: Vec<Vec<Vec<bool>>> = terms
        .par_iter()
        .map(|&t| permuted_labels(corpus, t, config.n_permutations, config.seed))
        .collect();
    let gram = if config.methods.contains(&Method::Knn) {
        Some(gram_matrix(corpus.data(), corpus.n_maps(), corpus.p())?)
    } else {
        None
    };

    let outputs: Vec<FoldOutput> = plan
        .folds
        .par_iter()
        .map(|fold| run_fold(corpus, config, fold, &terms, &perms, gram.as_deref()))
        .collect::<Result<_>>()?;

    let mut tasks = Vec::new();
    let mut predictions = Vec::new();
    let mut metrics = Vec::new();
    for &method in &config.methods {
        for (ti, &term) in terms.iter().enumerate() {
            let mut pooled = [0usize; 3];
            let mut chance = vec![[0usize; 3]; config.n_permutations];
            let mut n_test = 0;
            let mut n_pred = 0;
            let mut train_pos = Vec::new();
            let mut lambdas = Vec::new();
            let mut n_fits = 0;
            for (f, (fold, out)) in plan.folds.iter().zip(&outputs).enumerate() {
                let truth: Vec<bool> = fold.test.iter().map(|&i| corpus.has_term(i, term)).collect();
                n_test += truth.len();
                let mf = out.terms[ti].outputs.iter().find(|o| o.method == method);
                match mf {
                    Some(mf) => {
                        let pred: Vec<bool> = mf.predictions.iter().map(|s| s.2).collect();
                        let c = confusion(&pred, &truth);
                        n_pred += pred.iter().filter(|&&v| v).count();
                        for k in 0..3 {
                            pooled[k] += c[k];
                        }
                        for (acc, c) in chance.iter_mut().zip(&mf.chance) {
                            for k in 0..3 {
                                acc[k] += c[k];
                            }
                        }
                        for ((&i, s), &t) in fold.test.iter().zip(&mf.predictions).zip(&truth) {
                            predictions.push(PredictionRecord {
                                method,
                                fold: f,
                                map: i,
                                term,
                                p: Some(s.0),
                                p_biased: Some(s.1),
                                predicted: s.2,
                                truth: t,
                            });
                        }
                        train_pos.push(mf.task.n_train_pos);
                        if let Some(l) = mf.task.lambda {
                            lambdas.push(l);
                        }
                        n_fits += mf.task.inner_fits + mf.task.final_fits;
                        tasks.push(mf.task.clone());
                    }
                    None => {
                        let c = confusion(&vec![false; truth.len()], &truth);
                        for k in 0..3 {
                            pooled[k] += c[k];
                        }
                        for acc in chance.iter_mut() {
                            for k in 0..3 {
                                acc[k] += c[k];
                            }
                        }
                        for (&i, &t) in fold.test.iter().zip(&truth) {
                            predictions.push(PredictionRecord {
                                method,
                                fold: f,
                                map: i,
                                term,
                                p: None,
                                p_biased: None,
                                predicted: false,
                                truth: t,
                            });
                        }
                    }
                }
            }
            let pr = precision_recall_from(pooled);
            let analytic_precision = (pooled[0] + pooled[2]) as f64 / n_test.max(1) as f64;
            let analytic_recall = n_pred as f64 / n_test.max(1) as f64;
            let (pc, rc) = if config.n_permutations > 0 {
                let (ps, rs): (Vec<f64>, Vec<f64>) = chance.iter().map(|&c| rates(c)).unzip();
                (ChanceLevel::from_samples(&ps), ChanceLevel::from_samples(&rs))
            } else {
                let none = |m| ChanceLevel {
                    mean: m,
                    sd: f64::NAN,
                    n_permutations: 0,
                };
                (none(analytic_precision), none(analytic_recall))
            };
            metrics.push(TermMetrics {
                method,
                cv_scheme: config.cv,
                term: tax.term_name(term).to_owned(),
                category: tax.category_of(term).to_owned(),
                support_train: median_of(train_pos).unwrap_or(0),
                support_test: pooled[0] + pooled[2],
                tp: pooled[0],
                fp: pooled[1],
                fn_: pooled[2],
                precision: pr.precision,
                precision_defined: pr.precision_defined,
                recall: pr.recall,
                precision_chance: pc.mean,
                recall_chance: rc.mean,
                precision_chance_sd: pc.sd,
                recall_chance_sd: rc.sd,
                n_permutations: config.n_permutations,
                precision_chance_analytic: analytic_precision,
                recall_chance_analytic: analytic_recall,
                lambda_selected: median_of(lambdas),
                n_fits,
            });
        }
    }
    Ok(ReverseRun {
        config: config.clone(),
        plan,
        folds: outputs.into_iter().map(|o| o.summary).collect(),
        terms,
        tasks,
        predictions,
        metrics,
    })
}

fn precision_recall_from(c: Confusion) -> crate::cv::PrecisionRecall {
    let [tp, fp, fn_] = c;
    let mut pred = vec![true; tp + fp];
    let mut truth = vec![true; tp];
    truth.extend(std::iter::repeat_n(false, fp));
    pred.extend(std::iter::repeat_n(false, fn_));
    truth.extend(std::iter::repeat_n(true, fn_));
    precision_recall(&pred, &truth)
}

/// Pooled precision/recall per (method, term) recomputed from predictions.
pub fn metrics_from_predictions(predictions: &[PredictionRecord]) -> Vec<(Method, usize, crate::cv::PrecisionRecall)> {
    let mut keys: Vec<(Method, usize)> = predictions.iter().map(|p| (p.method, p.term)).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.into_iter()
        .map(|(m, t)| {
            let (pred, truth): (Vec<bool>, Vec<bool>) = predictions
                .iter()
                .filter(|p| p.method == m && p.term == t)
                .map(|p| (p.predicted, p.truth))
                .unzip();
            (m, t, precision_recall(&pred, &truth))
        })
        .collect()
}

/// Reverse inference atlas: one model per term trained on every map,
/// back-projected to voxels, smoothed and thresholded to its top fraction.
#[derive(Debug, Clone)]
pub struct ReverseAtlasTerm {
    pub term: usize,
    pub lambda: f64,
    pub model: TermModel,
    pub weights: MaskedVector,
    pub smoothed: MaskedVector,
    pub top: Vec<bool>,
}

pub fn reverse_atlas(
    corpus: &Corpus,
    run: &ReverseRun,
    method: Method,
    sigma: f64,
    fraction: f64,
) -> Result<Vec<ReverseAtlasTerm>> {
    if !method.is_logistic() {
        return Err(Error::InvalidArgument(format!("no coefficient maps for {method}")));
    }
    let config = &run.config;
    let tax = corpus.taxonomy();
    let p = corpus.p();
    let all: Vec<usize> = (0..corpus.n_maps()).collect();
    let adjacency = build_adjacency(corpus.mask());
    let parc: Parcellation =
        ward_parcellate(corpus.data(), p, None, &adjacency, n_parcels(p, config.parcel_ratio), corpus.mask().id())?
            .parcellation;
    let q = parc.n_parcels();
    let features = reduce(corpus.data(), p, &all, &parc)?;
    let smoother = if sigma > 0.0 { Some(Smoother::new(corpus.mask(), sigma)?) } else { None };
    let mut jobs = Vec::new();
    for (cat, _) in tax.categories() {
        jobs.extend(ovr_tasks(corpus, &all, cat, config.negative)?.into_iter().filter(|t| run.terms.contains(&t.term)));
    }
    jobs.par_iter()
        .map(|task| {
            let name = tax.term_name(task.term);
            let lambda = run
                .metrics
                .iter()
                .find(|m| m.method == method && m.term == name)
                .and_then(|m| m.lambda_selected)
                .unwrap_or(config.lambda_grid[0]);
            let selection = anova_select(&features, q, &task.rows, &task.labels, config.select_frac)?;
            let d = selection.selected.len();
            let x = gather(&features, q, &task.rows, &selection.selected);
            let weighted = method == Method::LogisticWeighted;
            let rot = Rotation::new(&x, d, &sample_weights(&task.labels, weighted)?)?;
            let model = final_fit_rotated(&rot, &task.labels, weighted, lambda)?;
            let weights = backproject(&model.weights, &selection, &parc)?;
            let model = TermModel {
                term: name.to_owned(),
                category: tax.category_of(task.term).to_owned(),
                selected: selection.selected.clone(),
                classifier: TermClassifier::Logistic(model),
            };
            let smoothed = match &smoother {
                Some(s) => MaskedVector::new(corpus.mask(), s.apply(weights.data()))?,
                None => weights.clone(),
            };
            let top = top_fraction_mask(smoothed.data(), fraction)?;
            Ok(ReverseAtlasTerm {
                term: task.term,
                lambda,
                model,
                weights,
                smoothed,
                top,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForwardConfig {
    pub excluded: Vec<String>,
    pub alpha: f64,
    pub contrast: ContrastMode,
    pub outline_fraction: f64,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        Self {
            excluded: Vec::new(),
            alpha: 0.05,
            contrast: ContrastMode::Indicator,
            outline_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardTerm {
    pub contrast: ContrastResult,
    /// Top `outline_fraction` of t-values.
    pub outline: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct ForwardRun {
    pub fit: GlmFit,
    pub terms: Vec<ForwardTerm>,
}

/// GLM with an intercept over all non-excluded terms, one contrast per term.
pub fn run_forward(corpus: &Corpus, config: &ForwardConfig) -> Result<ForwardRun> {
    let design = build_design_matrix(corpus, &config.excluded, true)?;
    let fit = fit_glm(corpus.data(), corpus.p(), &design)?;
    let tax = corpus.taxonomy();
    let names: Vec<String> = design
        .term_ids()
        .iter()
        .map(|&t| tax.term_name(t).to_owned())
        .collect();
    let terms = names
        .par_iter()
        .map(|name| {
            let contrast = term_contrast(&fit, name, config.contrast, Some(tax), config.alpha)?;
            let outline = top_fraction_mask(&contrast.t_values, config.outline_fraction)?;
            Ok(ForwardTerm { contrast, outline })
        })
        .collect::<Result<_>>()?;
    Ok(ForwardRun { fit, terms })
}
