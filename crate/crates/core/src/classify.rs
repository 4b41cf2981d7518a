//! Per-term reverse-inference classifiers: weighted logistic regression with a
//! prior-shift score, Gaussian naive Bayes and a K-nearest-neighbour vote.

mod logistic;

pub use logistic::{
    balance_weights, bias_probability, fit_logistic, fit_logistic_with, gradient, objective, predict_biased,
    sigmoid, BiasMode, BiasedPrediction, LogisticModel, Rotation, SolverOptions,
};

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, MIN_STUDY_SPAN};
use crate::error::{Error, Result};
use crate::parcel::anova_select;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaiveBayesModel {
    /// Indexed `[class][feature]`, class 1 = term present.
    pub means: [Vec<f64>; 2],
    pub variances: [Vec<f64>; 2],
    pub priors: [f64; 2],
    pub variance_floor: f64,
}

/// Gaussian class-conditionals with maximum-likelihood variances floored at
/// `1e-9` times the mean feature variance.
pub fn fit_naive_bayes(x: &[f64], d: usize, y: &[bool]) -> Result<NaiveBayesModel> {
    let n = y.len();
    if x.len() != n * d {
        return Err(Error::LengthMismatch {
            entity: "naive Bayes design".into(),
            expected: n * d,
            actual: x.len(),
        });
    }
    let counts = [n - y.iter().filter(|&&v| v).count(), y.iter().filter(|&&v| v).count()];
    if counts[0] == 0 || counts[1] == 0 {
        return Err(Error::SingleClass {
            context: "naive Bayes".into(),
        });
    }
    let mut means = [vec![0.0; d], vec![0.0; d]];
    let mut total = vec![0.0; d];
    for (row, &l) in x.chunks_exact(d).zip(y) {
        for ((m, t), &v) in means[usize::from(l)].iter_mut().zip(total.iter_mut()).zip(row) {
            *m += v;
            *t += v;
        }
    }
    for c in 0..2 {
        means[c].iter_mut().for_each(|m| *m /= counts[c] as f64);
    }
    total.iter_mut().for_each(|t| *t /= n as f64);
    let mut variances = [vec![0.0; d], vec![0.0; d]];
    let mut pooled = vec![0.0; d];
    for (row, &l) in x.chunks_exact(d).zip(y) {
        let c = usize::from(l);
        for j in 0..d {
            variances[c][j] += (row[j] - means[c][j]).powi(2);
            pooled[j] += (row[j] - total[j]).powi(2);
        }
    }
    let mean_var = pooled.iter().sum::<f64>() / (n * d.max(1)) as f64;
    let variance_floor = if mean_var > 0.0 { 1e-9 * mean_var } else { 1e-9 };
    for c in 0..2 {
        variances[c]
            .iter_mut()
            .for_each(|v| *v = (*v / counts[c] as f64).max(variance_floor));
    }
    Ok(NaiveBayesModel {
        means,
        variances,
        priors: [counts[0] as f64 / n as f64, counts[1] as f64 / n as f64],
        variance_floor,
    })
}

/// Posterior probability of the term given features `x`.
pub fn predict_nb(model: &NaiveBayesModel, x: &[f64]) -> f64 {
    let mut log_ratio = model.priors[1].ln() - model.priors[0].ln();
    for (j, &v) in x.iter().enumerate() {
        for (c, sign) in [(1usize, 1.0), (0, -1.0)] {
            let var = model.variances[c][j];
            let r = v - model.means[c][j];
            log_ratio += sign * (-0.5 * (r * r / var + var.ln()));
        }
    }
    sigmoid(log_ratio)
}

pub const KNN_K_GRID: [usize; 4] = [5, 10, 15, 20];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnnConfig {
    pub k: usize,
}

impl KnnConfig {
    pub fn new(k: usize) -> Result<Self> {
        if !(5..=20).contains(&k) {
            return Err(Error::InvalidArgument(format!("k must be in 5..=20, got {k}")));
        }
        Ok(Self { k })
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices of the `k` smallest distances, ties to the lower index.
pub fn nearest(distances: &[f64], k: usize) -> Vec<usize> {
    let cmp = |a: &usize, b: &usize| distances[*a].total_cmp(&distances[*b]).then(a.cmp(b));
    let mut order: Vec<usize> = (0..distances.len()).collect();
    let k = k.min(order.len());
    if k == 0 {
        return Vec::new();
    }
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_by(cmp);
    order
}

/// Strict-majority vote of the neighbours for one term.
pub fn majority(neighbours: &[usize], has_term: impl Fn(usize) -> bool) -> bool {
    let votes = neighbours.iter().filter(|&&i| has_term(i)).count();
    2 * votes > neighbours.len()
}

/// Term set predicted for `x`: every term carried by strictly more than half
/// of its `k` nearest training maps (Euclidean distance on raw voxels).
pub fn knn_predict(train: &[f64], p: usize, train_terms: &[Vec<usize>], x: &[f64], k: usize) -> Result<Vec<usize>> {
    let n = train_terms.len();
    if n == 0 {
        return Err(Error::InvalidArgument("KNN needs a non-empty training set".into()));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k = {k} with {n} training maps")));
    }
    if train.len() != n * p || x.len() != p {
        return Err(Error::LengthMismatch {
            entity: "KNN maps".into(),
            expected: n * p,
            actual: train.len(),
        });
    }
    let dist: Vec<f64> = train.chunks_exact(p).map(|row| squared_distance(row, x)).collect();
    let nn = nearest(&dist, k);
    let mut candidates: Vec<usize> = nn.iter().flat_map(|&i| train_terms[i].iter().copied()).collect();
    candidates.sort_unstable();
    candidates.dedup();
    Ok(candidates
        .into_iter()
        .filter(|t| majority(&nn, |i| train_terms[i].contains(t)))
        .collect())
}

/// Which training maps oppose a term's positives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeClass {
    #[default]
    AllMaps,
    /// Only maps annotated with another term of the same category.
    SameCategory,
}

/// Binary problem for one term: `rows` are corpus map indices.
#[derive(Debug, Clone, PartialEq)]
pub struct OvrTask {
    pub term: usize,
    pub rows: Vec<usize>,
    pub labels: Vec<bool>,
}

/// One-vs-rest tasks for every eligible term of a category over `train_rows`.
/// A term needs positives in at least two training studies.
pub fn ovr_tasks(corpus: &Corpus, train_rows: &[usize], category: &str, negative: NegativeClass) -> Result<Vec<OvrTask>> {
    let tax = corpus.taxonomy();
    let cat = tax
        .category_id(category)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown category `{category}`")))?;
    let span = corpus.term_span_over(train_rows);
    let mut tasks = Vec::new();
    for term in tax.terms_in_category(cat) {
        let name = tax.term_name(term);
        if span[term] == 0 {
            log::warn!("term `{name}` has no positive training map; skipped");
            continue;
        }
        if span[term] < MIN_STUDY_SPAN {
            log::warn!("term `{name}` appears in {} training study; skipped", span[term]);
            continue;
        }
        let rows: Vec<usize> = match negative {
            NegativeClass::AllMaps => train_rows.to_vec(),
            NegativeClass::SameCategory => train_rows
                .iter()
                .copied()
                .filter(|&i| corpus.map_terms(i).iter().any(|&t| tax.category_index(t) == cat))
                .collect(),
        };
        let labels: Vec<bool> = rows.iter().map(|&i| corpus.has_term(i, term)).collect();
        if labels.iter().all(|&l| l) {
            log::warn!("term `{name}` has no negative training map; skipped");
            continue;
        }
        tasks.push(OvrTask { term, rows, labels });
    }
    Ok(tasks)
}

/// Copy the selected rows and columns of a row-major matrix.
pub fn gather(features: &[f64], q: usize, rows: &[usize], cols: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &r in rows {
        let row = &features[r * q..(r + 1) * q];
        out.extend(cols.iter().map(|&c| row[c]));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum TermClassifier {
    Logistic(LogisticModel),
    NaiveBayes(NaiveBayesModel),
}

/// A fitted per-term model over a feature subset.
#[derive(Debug, Clone, PartialEq)]
pub struct TermModel {
    pub term: String,
    pub category: String,
    pub selected: Vec<usize>,
    pub classifier: TermClassifier,
}

impl TermModel {
    /// Score one full feature row (all parcels).
    pub fn predict(&self, features: &[f64], mode: BiasMode) -> BiasedPrediction {
        let x: Vec<f64> = self.selected.iter().map(|&j| features[j]).collect();
        match &self.classifier {
            TermClassifier::Logistic(m) => predict_biased(m, &x, mode),
            TermClassifier::NaiveBayes(m) => {
                let p = predict_nb(m, &x);
                BiasedPrediction {
                    p,
                    p_biased: p,
                    present: p >= 0.5,
                }
            }
        }
    }

    /// `TMOD1\n`, then length-prefixed term and category, lambda, rho,
    /// weighted flag, selected indices, weights and intercept (little-endian).
    /// Only logistic models have a binary form.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let TermClassifier::Logistic(m) = &self.classifier else {
            return Err(Error::InvalidArgument("only logistic models are serialized".into()));
        };
        let mut out = b"TMOD1\n".to_vec();
        for s in [&self.term, &self.category] {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        out.extend_from_slice(&m.lambda.to_le_bytes());
        out.extend_from_slice(&m.rho_term.to_le_bytes());
        out.push(u8::from(m.weighted));
        out.extend_from_slice(&(self.selected.len() as u32).to_le_bytes());
        for &j in &self.selected {
            out.extend_from_slice(&(j as u32).to_le_bytes());
        }
        for w in &m.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out.extend_from_slice(&m.intercept.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::format("term model", "truncated or malformed record");
        let mut pos = 6;
        if bytes.len() < 6 || &bytes[..6] != b"TMOD1\n" {
            return Err(Error::format("term model", "bad header"));
        }
        let mut take = |len: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + len).ok_or_else(bad)?;
            pos += len;
            Ok(s)
        };
        let mut strings = Vec::new();
        for _ in 0..2 {
            let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            strings.push(String::from_utf8(take(len)?.to_vec()).map_err(|_| bad())?);
        }
        let lambda = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let rho_term = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let weighted = take(1)?[0] != 0;
        let k = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut selected = Vec::with_capacity(k);
        for _ in 0..k {
            selected.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        let mut weights = Vec::with_capacity(k);
        for _ in 0..k {
            weights.push(f64::from_le_bytes(take(8)?.try_into().unwrap()));
        }
        let intercept = f64::from_le_bytes(take(8)?.try_into().unwrap());
        if pos != bytes.len() {
            return Err(bad());
        }
        let category = strings.pop().unwrap();
        let term = strings.pop().unwrap();
        Ok(Self {
            term,
            category,
            selected,
            classifier: TermClassifier::Logistic(LogisticModel {
                weights,
                intercept,
                lambda,
                rho_term,
                weighted,
            }),
        })
    }
}

/// Classifier family and settings used by [`train_category_ovr`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClassifierKind {
    Logistic { weighted: bool, lambda: f64 },
    NaiveBayes,
}

/// ANOVA-select features on the task's rows, then fit one binary model.
pub fn fit_term_model(
    corpus: &Corpus,
    features: &[f64],
    q: usize,
    task: &OvrTask,
    select_frac: f64,
    kind: ClassifierKind,
) -> Result<TermModel> {
    let selection = anova_select(features, q, &task.rows, &task.labels, select_frac)?;
    let x = gather(features, q, &task.rows, &selection.selected);
    let d = selection.selected.len();
    let classifier = match kind {
        ClassifierKind::Logistic { weighted, lambda } => {
            let w = if weighted {
                balance_weights(&task.labels)?
            } else {
                vec![1.0; task.labels.len()]
            };
            TermClassifier::Logistic(fit_logistic(&x, d, &task.labels, &w, lambda)?)
        }
        ClassifierKind::NaiveBayes => TermClassifier::NaiveBayes(fit_naive_bayes(&x, d, &task.labels)?),
    };
    let tax = corpus.taxonomy();
    Ok(TermModel {
        term: tax.term_name(task.term).to_owned(),
        category: tax.category_of(task.term).to_owned(),
        selected: selection.selected,
        classifier,
    })
}

/// One model per eligible term of `category`, trained on `train_rows` of the
/// `n_maps x q` feature matrix.
pub fn train_category_ovr(
    corpus: &Corpus,
    features: &[f64],
    q: usize,
    train_rows: &[usize],
    category: &str,
    negative: NegativeClass,
    select_frac: f64,
    kind: ClassifierKind,
) -> Result<Vec<TermModel>> {
    ovr_tasks(corpus, train_rows, category, negative)?
        .iter()
        .map(|task| fit_term_model(corpus, features, q, task, select_frac, kind))
        .collect()
}
