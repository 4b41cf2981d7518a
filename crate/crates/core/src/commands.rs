//! Command implementations behind the `termatlas` binary.
//!
//! Every command that writes files also writes a `config.json` snapshot next
//! to its outputs; rerunning with the snapshot's settings reproduces the
//! outputs byte for byte. Thread count is deliberately not part of it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::corpus::manifest::{load_corpus, sanitize};
use crate::corpus::{build_design_matrix, term_frequencies, validate_term_span, Corpus, TermSpan};
use crate::cv::{precision_recall, CvScheme};
use crate::diagnostics::{distance_diagnostics, Diagnostics};
use crate::error::{Error, Result};
use crate::pipeline::{
    f1, reverse_atlas, run_forward, run_reverse, ForwardConfig, FoldSummary, Method, ReverseConfig, ReverseRun,
    TaskRecord, TermMetrics,
};
use crate::synth::{synthesize, write_synthetic, SynthConfig};
use crate::volume::bmap::Bmap;
use crate::volume::BrainMask;

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FOLDS_FILE: &str = "folds.csv";
pub const TASKS_FILE: &str = "tasks.csv";
pub const PREDICTIONS_DIR: &str = "predictions";
pub const REPORT_DIR: &str = "report";

const MASK_FILE: &str = "mask.bmap";
const HISTOGRAM_BINS: usize = 40;

/// Settings needed to replay a command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Snapshot {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub corpus: Option<PathBuf>,
    pub synth: Option<SynthConfig>,
    pub forward: Option<ForwardConfig>,
    pub reverse: Option<ReverseConfig>,
    pub sigma_map: Option<f64>,
    pub outline_fraction: Option<f64>,
}

impl Snapshot {
    fn new(command: &str) -> Self {
        Self {
            command: command.to_owned(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            seed: None,
            corpus: None,
            synth: None,
            forward: None,
            reverse: None,
            sigma_map: None,
            outline_fraction: None,
        }
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(CONFIG_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(CONFIG_FILE), self)
    }
}

/// Accept either a manifest file or the directory holding `manifest.json`.
pub fn resolve_manifest(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    }
}

fn absolute(path: &Path) -> PathBuf {
    fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.is_file() {
        return Err(Error::InvalidArgument(format!("incomplete run directory: missing {}", path.display())));
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// File-name-safe form of a term or fold name.
pub fn stem(name: &str) -> String {
    sanitize(name)
}

// ---------------------------------------------------------------- images

/// Binary (P5) greyscale image.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::LengthMismatch {
            entity: format!("image {}", path.display()),
            expected: width * height,
            actual: pixels.len(),
        });
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Axial slices laid out left to right, top to bottom, lowest slice first.
/// Cells outside the mask are black; `shade` maps in-mask voxel values.
pub fn mosaic(mask: &BrainMask, values: &[f64], shade: impl Fn(f64) -> u8) -> (usize, usize, Vec<u8>) {
    let [nx, ny, nz] = mask.grid().dims();
    let cols = (nz as f64).sqrt().ceil().max(1.0) as usize;
    let rows = nz.div_ceil(cols);
    let (width, height) = (cols * nx, rows * ny);
    let mut px = vec![0u8; width * height];
    for (v, &value) in values.iter().enumerate() {
        let [x, y, z] = mask.coords_of(v);
        let (tc, tr) = (z % cols, z / cols);
        // Flip y so that larger y is drawn higher up.
        let row = tr * ny + (ny - 1 - y);
        px[row * width + tc * nx + x] = shade(value);
    }
    (width, height, px)
}

fn binary_shade(v: f64) -> u8 {
    if v > 0.5 {
        255
    } else {
        64
    }
}

fn signed_shade(max_abs: f64) -> impl Fn(f64) -> u8 {
    move |v| {
        let s = if max_abs > 0.0 { v / max_abs } else { 0.0 };
        (128.0 + 127.0 * s.clamp(-1.0, 1.0)).round() as u8
    }
}

fn max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn indicator(flags: &[bool]) -> Vec<f64> {
    flags.iter().map(|&b| f64::from(u8::from(b))).collect()
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub out: PathBuf,
    pub seed: u64,
    pub config: SynthConfig,
}

#[derive(Debug, Clone)]
pub struct SynthSummary {
    pub manifest: PathBuf,
    pub n_studies: usize,
    pub n_laboratories: usize,
    pub n_maps: usize,
    pub n_voxels: usize,
    pub term_counts: Vec<(String, usize)>,
}

pub fn cmd_synth(opts: &SynthOptions) -> Result<SynthSummary> {
    let synthetic = synthesize(&opts.config, opts.seed)?;
    create_dir(&opts.out)?;
    let manifest = write_synthetic(&synthetic, &opts.out)?;
    let mut snap = Snapshot::new("synth");
    snap.seed = Some(opts.seed);
    snap.synth = Some(opts.config.clone());
    snap.write(&opts.out)?;
    let corpus = &synthetic.corpus;
    let mut labs: Vec<&str> = corpus.studies().iter().map(|s| s.laboratory.as_str()).collect();
    labs.sort_unstable();
    labs.dedup();
    Ok(SynthSummary {
        manifest,
        n_studies: corpus.studies().len(),
        n_laboratories: labs.len(),
        n_maps: corpus.n_maps(),
        n_voxels: corpus.p(),
        term_counts: synthetic.ledger.term_counts.clone().into_iter().collect(),
    })
}

// ---------------------------------------------------------------- validate

#[derive(Debug, Clone)]
pub struct ValidationSummary {
    pub n_studies: usize,
    pub n_maps: usize,
    pub n_voxels: usize,
    pub spans: Vec<TermSpan>,
    pub frequencies: Vec<(String, usize)>,
}

/// Load a corpus (which checks its structure) and report term coverage.
pub fn cmd_validate(corpus: &Path) -> Result<ValidationSummary> {
    let corpus = load_corpus(&resolve_manifest(corpus))?;
    corpus.check_one_term_per_category()?;
    Ok(ValidationSummary {
        n_studies: corpus.studies().len(),
        n_maps: corpus.n_maps(),
        n_voxels: corpus.p(),
        spans: validate_term_span(&corpus),
        frequencies: term_frequencies(&corpus),
    })
}

// ---------------------------------------------------------------- forward

#[derive(Debug, Clone)]
pub struct ForwardOptions {
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub config: ForwardConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardRow {
    pub term: String,
    pub category: String,
    pub alpha: f64,
    pub threshold: f64,
    pub n_significant: usize,
    pub n_outline: usize,
    pub max_t: f64,
    pub dof: usize,
}

pub fn cmd_forward(opts: &ForwardOptions) -> Result<Vec<ForwardRow>> {
    let manifest = resolve_manifest(&opts.corpus);
    let corpus = load_corpus(&manifest)?;
    let run = run_forward(&corpus, &opts.config)?;
    let dir = opts.out.join("forward");
    let images = dir.join("images");
    create_dir(&images)?;
    let mask = corpus.mask();
    Bmap::from_mask(mask).write(&opts.out.join(MASK_FILE))?;
    let mask_ref = format!("../{MASK_FILE}");
    let tax = corpus.taxonomy();
    let mut rows = Vec::with_capacity(run.terms.len());
    for term in &run.terms {
        let c = &term.contrast;
        let s = stem(&c.term);
        Bmap::from_masked(mask, &mask_ref, &c.t_values).write(&dir.join(format!("{s}_t.bmap")))?;
        Bmap::from_masked(mask, &mask_ref, &c.p_values).write(&dir.join(format!("{s}_p.bmap")))?;
        let sig = indicator(&c.significant);
        Bmap::from_masked(mask, &mask_ref, &sig).write(&dir.join(format!("{s}_significant.bmap")))?;
        let outline = indicator(&term.outline);
        Bmap::from_masked(mask, &mask_ref, &outline).write(&dir.join(format!("{s}_outline.bmap")))?;
        let (w, h, px) = mosaic(mask, &outline, binary_shade);
        write_pgm(&images.join(format!("{s}_outline.pgm")), w, h, &px)?;
        let (w, h, px) = mosaic(mask, &c.t_values, signed_shade(max_abs(&c.t_values)));
        write_pgm(&images.join(format!("{s}_t.pgm")), w, h, &px)?;
        let id = tax.term_id(&c.term).expect("contrast terms come from the taxonomy");
        rows.push(ForwardRow {
            term: c.term.clone(),
            category: tax.category_of(id).to_owned(),
            alpha: c.alpha,
            threshold: c.fwer_threshold,
            n_significant: c.n_significant(),
            n_outline: term.outline.iter().filter(|&&b| b).count(),
            max_t: c.t_values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            dof: run.fit.dof,
        });
    }
    write_csv(&dir.join("summary.csv"), &rows)?;
    let mut snap = Snapshot::new("forward");
    snap.corpus = Some(absolute(&manifest));
    snap.forward = Some(opts.config.clone());
    snap.write(&opts.out)?;
    Ok(rows)
}

// ---------------------------------------------------------------- reverse

#[derive(Debug, Clone)]
pub struct ReverseOptions {
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub config: ReverseConfig,
    /// Smoothing of the reverse-atlas coefficient maps, in voxels.
    pub sigma_map: f64,
    pub outline_fraction: f64,
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: Method,
    pub cv_scheme: CvScheme,
    pub term: String,
    pub category: String,
    pub support_train: usize,
    pub support_test: usize,
    pub precision: f64,
    pub recall: f64,
    pub precision_chance: f64,
    pub recall_chance: f64,
    pub lambda_selected: Option<f64>,
    pub precision_chance_sd: f64,
    pub recall_chance_sd: f64,
    pub n_permutations: usize,
    pub precision_chance_analytic: f64,
    pub recall_chance_analytic: f64,
    pub precision_defined: bool,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub f1: f64,
    pub n_fits: usize,
}

impl From<&TermMetrics> for MetricsRow {
    fn from(m: &TermMetrics) -> Self {
        Self {
            method: m.method,
            cv_scheme: m.cv_scheme,
            term: m.term.clone(),
            category: m.category.clone(),
            support_train: m.support_train,
            support_test: m.support_test,
            precision: m.precision,
            recall: m.recall,
            precision_chance: m.precision_chance,
            recall_chance: m.recall_chance,
            lambda_selected: m.lambda_selected,
            precision_chance_sd: m.precision_chance_sd,
            recall_chance_sd: m.recall_chance_sd,
            n_permutations: m.n_permutations,
            precision_chance_analytic: m.precision_chance_analytic,
            recall_chance_analytic: m.recall_chance_analytic,
            precision_defined: m.precision_defined,
            tp: m.tp,
            fp: m.fp,
            fn_: m.fn_,
            f1: m.f1(),
            n_fits: m.n_fits,
        }
    }
}

/// One line of a `predictions/{method}/fold_{id}.csv` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub map_id: String,
    pub term: String,
    #[serde(rename = "P")]
    pub p: Option<f64>,
    #[serde(rename = "P_biased")]
    pub p_biased: Option<f64>,
    pub predicted: bool,
    pub truth: bool,
}

/// Prediction file of one method and fold, relative to the run directory.
pub fn prediction_path(method: Method, held_out: &str) -> PathBuf {
    Path::new(PREDICTIONS_DIR)
        .join(method.as_str())
        .join(format!("fold_{}.csv", stem(held_out)))
}

pub fn cmd_reverse(opts: &ReverseOptions) -> Result<ReverseRun> {
    if !(opts.outline_fraction > 0.0 && opts.outline_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "outline fraction must lie in (0, 1], got {}",
            opts.outline_fraction
        )));
    }
    if !(opts.sigma_map >= 0.0) {
        return Err(Error::InvalidArgument(format!("map smoothing must be non-negative, got {}", opts.sigma_map)));
    }
    let manifest = resolve_manifest(&opts.corpus);
    let corpus = load_corpus(&manifest)?;
    let run = run_reverse(&corpus, &opts.config)?;
    create_dir(&opts.out)?;
    write_run(&corpus, &run, &opts.out)?;
    write_atlases(&corpus, &run, opts)?;
    let mut snap = Snapshot::new("reverse");
    snap.seed = Some(opts.config.seed);
    snap.corpus = Some(absolute(&manifest));
    snap.reverse = Some(opts.config.clone());
    snap.sigma_map = Some(opts.sigma_map);
    snap.outline_fraction = Some(opts.outline_fraction);
    snap.write(&opts.out)?;
    Ok(run)
}

fn write_run(corpus: &Corpus, run: &ReverseRun, out: &Path) -> Result<()> {
    write_csv(&out.join(METRICS_FILE), run.metrics.iter().map(MetricsRow::from))?;
    write_csv::<&TaskRecord>(&out.join(TASKS_FILE), &run.tasks)?;
    write_csv::<&FoldSummary>(&out.join(FOLDS_FILE), &run.folds)?;
    let tax = corpus.taxonomy();
    for &method in &run.config.methods {
        create_dir(&out.join(PREDICTIONS_DIR).join(method.as_str()))?;
        for (f, fold) in run.folds.iter().enumerate() {
            let rows = run
                .predictions
                .iter()
                .filter(|p| p.method == method && p.fold == f)
                .map(|p| PredictionRow {
                    map_id: corpus.map_id(p.map),
                    term: tax.term_name(p.term).to_owned(),
                    p: p.p,
                    p_biased: p.p_biased,
                    predicted: p.predicted,
                    truth: p.truth,
                });
            write_csv(&out.join(prediction_path(method, &fold.held_out)), rows)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct AtlasRow<'a> {
    term: &'a str,
    lambda: f64,
    n_selected: usize,
    n_top: usize,
    max_abs_weight: f64,
}

fn write_atlases(corpus: &Corpus, run: &ReverseRun, opts: &ReverseOptions) -> Result<()> {
    let mask = corpus.mask();
    let mask_ref = format!("../../{MASK_FILE}");
    let logistic: Vec<Method> = run
        .config
        .methods
        .iter()
        .copied()
        .filter(|m| matches!(m, Method::Logistic | Method::LogisticWeighted))
        .collect();
    if logistic.is_empty() {
        return Ok(());
    }
    Bmap::from_mask(mask).write(&opts.out.join(MASK_FILE))?;
    let tax = corpus.taxonomy();
    for method in logistic {
        let atlas = reverse_atlas(corpus, run, method, opts.sigma_map, opts.outline_fraction)?;
        let dir = opts.out.join("reverse").join(method.as_str());
        let images = dir.join("images");
        let models = opts.out.join("models").join(method.as_str());
        create_dir(&images)?;
        create_dir(&models)?;
        let mut rows = Vec::with_capacity(atlas.len());
        for t in &atlas {
            let name = tax.term_name(t.term);
            let s = stem(name);
            Bmap::from_masked(mask, &mask_ref, t.weights.data()).write(&dir.join(format!("{s}_weights.bmap")))?;
            Bmap::from_masked(mask, &mask_ref, t.smoothed.data()).write(&dir.join(format!("{s}_smoothed.bmap")))?;
            let top = indicator(&t.top);
            Bmap::from_masked(mask, &mask_ref, &top).write(&dir.join(format!("{s}_top.bmap")))?;
            let (w, h, px) = mosaic(mask, &top, binary_shade);
            write_pgm(&images.join(format!("{s}_top.pgm")), w, h, &px)?;
            let m = max_abs(t.smoothed.data());
            let (w, h, px) = mosaic(mask, t.smoothed.data(), signed_shade(m));
            write_pgm(&images.join(format!("{s}_smoothed.pgm")), w, h, &px)?;
            let bytes = t.model.to_bytes()?;
            let path = models.join(format!("{s}.tmod"));
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            rows.push(AtlasRow {
                term: name,
                lambda: t.lambda,
                n_selected: t.model.selected.len(),
                n_top: t.top.iter().filter(|&&b| b).count(),
                max_abs_weight: max_abs(t.weights.data()),
            });
        }
        write_csv(&dir.join("summary.csv"), rows)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- report

#[derive(Debug, Clone)]
pub struct ReportSummary {
    pub dir: PathBuf,
    pub n_metrics: usize,
    pub n_predictions: usize,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Serialize)]
struct BarRow<'a> {
    method: Method,
    term: &'a str,
    category: &'a str,
    support: usize,
    precision: f64,
    precision_chance: f64,
    precision_chance_sd: f64,
    recall: f64,
    recall_chance: f64,
    recall_chance_sd: f64,
}

#[derive(Debug, Clone, Serialize)]
struct FrequencyRow<'a> {
    rank: usize,
    term: &'a str,
    category: &'a str,
    n_maps: usize,
    n_studies: usize,
}

#[derive(Debug, Clone, Serialize)]
struct HistogramRow<'a> {
    group: &'a str,
    bin_lo: f64,
    bin_hi: f64,
    count: usize,
}

/// Rebuild the static report of a finished reverse run. Pooled counts are
/// recomputed from the persisted predictions and must match `metrics.csv`.
pub fn cmd_report(run_dir: &Path) -> Result<ReportSummary> {
    let snap_path = run_dir.join(CONFIG_FILE);
    if !snap_path.is_file() {
        return Err(Error::InvalidArgument(format!("incomplete run directory: missing {}", snap_path.display())));
    }
    let snap = Snapshot::read(run_dir)?;
    let config = match (snap.command.as_str(), &snap.reverse) {
        ("reverse", Some(c)) => c.clone(),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "{} is not a reverse run directory",
                run_dir.display()
            )))
        }
    };
    let corpus_path = snap
        .corpus
        .clone()
        .ok_or_else(|| Error::InvalidArgument("run snapshot names no corpus".into()))?;
    let metrics: Vec<MetricsRow> = read_csv(&run_dir.join(METRICS_FILE))?;
    let folds: Vec<FoldSummary> = read_csv(&run_dir.join(FOLDS_FILE))?;
    let n_predictions = check_metrics(run_dir, &config.methods, &folds, &metrics)?;

    let corpus = load_corpus(&corpus_path)?;
    let out = run_dir.join(REPORT_DIR);
    create_dir(&out)?;

    let mut bars: Vec<&MetricsRow> = metrics.iter().collect();
    bars.sort_by(|a, b| b.support_test.cmp(&a.support_test));
    write_csv(
        &out.join("pr_bars.csv"),
        bars.iter().map(|m| BarRow {
            method: m.method,
            term: &m.term,
            category: &m.category,
            support: m.support_test,
            precision: m.precision,
            precision_chance: m.precision_chance,
            precision_chance_sd: m.precision_chance_sd,
            recall: m.recall,
            recall_chance: m.recall_chance,
            recall_chance_sd: m.recall_chance_sd,
        }),
    )?;

    let spans = validate_term_span(&corpus);
    let mut freq: Vec<(usize, usize)> = term_frequencies(&corpus)
        .into_iter()
        .enumerate()
        .map(|(t, (_, n))| (t, n))
        .collect();
    freq.sort_by(|a, b| b.1.cmp(&a.1));
    let tax = corpus.taxonomy();
    write_csv(
        &out.join("term_frequency.csv"),
        freq.iter().enumerate().map(|(rank, &(t, n))| FrequencyRow {
            rank: rank + 1,
            term: tax.term_name(t),
            category: tax.category_of(t),
            n_maps: n,
            n_studies: spans[t].n_studies,
        }),
    )?;

    let design = build_design_matrix(&corpus, &[], false)?;
    let diagnostics = distance_diagnostics(&corpus, &design, HISTOGRAM_BINS)?;
    let mut hist_rows = Vec::new();
    for h in &diagnostics.histograms {
        for (b, &count) in h.counts.iter().enumerate() {
            hist_rows.push(HistogramRow {
                group: &h.group,
                bin_lo: h.edges[b],
                bin_hi: h.edges[b + 1],
                count,
            });
        }
    }
    write_csv(&out.join("distance_histograms.csv"), hist_rows)?;
    write_correlation(&out, &diagnostics)?;
    write_text(&out.join("report.md"), &report_markdown(&config, &folds, &metrics, &freq, &corpus, &diagnostics))?;

    let mut report_snap = Snapshot::new("report");
    report_snap.corpus = Some(corpus_path);
    report_snap.seed = snap.seed;
    report_snap.write(&out)?;
    Ok(ReportSummary {
        dir: out,
        n_metrics: metrics.len(),
        n_predictions,
        diagnostics,
    })
}

/// Recompute pooled confusion counts per (method, term) from the prediction
/// files and compare them with the persisted metrics.
fn check_metrics(run_dir: &Path, methods: &[Method], folds: &[FoldSummary], metrics: &[MetricsRow]) -> Result<usize> {
    let mut pooled: BTreeMap<(Method, String), (Vec<bool>, Vec<bool>)> = BTreeMap::new();
    let mut n = 0;
    for &method in methods {
        for fold in folds {
            let rows: Vec<PredictionRow> = read_csv(&run_dir.join(prediction_path(method, &fold.held_out)))?;
            n += rows.len();
            for r in rows {
                let e = pooled.entry((method, r.term)).or_default();
                e.0.push(r.predicted);
                e.1.push(r.truth);
            }
        }
    }
    if pooled.len() != metrics.len() {
        return Err(Error::format(
            "run directory",
            format!("{} metric rows but predictions cover {} (method, term) pairs", metrics.len(), pooled.len()),
        ));
    }
    for m in metrics {
        let (pred, truth) = pooled.get(&(m.method, m.term.clone())).ok_or_else(|| {
            Error::format("run directory", format!("no predictions for {} / {}", m.method, m.term))
        })?;
        let pr = precision_recall(pred, truth);
        let same = pr.tp == m.tp
            && pr.fp == m.fp
            && pr.fn_ == m.fn_
            && pr.precision == m.precision
            && pr.recall == m.recall
            && f1(pr.tp, pr.fp, pr.fn_) == m.f1;
        if !same {
            return Err(Error::format(
                "metrics.csv",
                format!("{} / {} does not match its predictions", m.method, m.term),
            ));
        }
    }
    Ok(n)
}

fn write_correlation(out: &Path, diagnostics: &Diagnostics) -> Result<()> {
    let cols = &diagnostics.design_columns;
    let k = cols.len();
    let path = out.join("design_correlation.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(std::iter::once("term").chain(cols.iter().map(String::as_str)))?;
    for (a, name) in cols.iter().enumerate() {
        let row = &diagnostics.design_correlation[a * k..(a + 1) * k];
        w.write_record(std::iter::once(name.clone()).chain(row.iter().map(|r| r.to_string())))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    const CELL: usize = 8;
    let side = k * CELL;
    let mut px = vec![0u8; side * side];
    for a in 0..k {
        for b in 0..k {
            let r = diagnostics.design_correlation[a * k + b];
            let v = if r.is_finite() { ((r + 1.0) * 127.5).round() as u8 } else { 0 };
            for y in 0..CELL {
                let start = (a * CELL + y) * side + b * CELL;
                px[start..start + CELL].fill(v);
            }
        }
    }
    write_pgm(&out.join("design_correlation.pgm"), side, side, &px)
}

fn report_markdown(
    config: &ReverseConfig,
    folds: &[FoldSummary],
    metrics: &[MetricsRow],
    freq: &[(usize, usize)],
    corpus: &Corpus,
    diagnostics: &Diagnostics,
) -> String {
    let mut s = String::new();
    let tax = corpus.taxonomy();
    let _ = writeln!(s, "# Reverse inference report\n");
    let _ = writeln!(
        s,
        "Corpus: {} studies, {} maps, {} voxels. Cross-validation: {} ({} folds). Permutations: {}.\n",
        corpus.studies().len(),
        corpus.n_maps(),
        corpus.p(),
        config.cv,
        folds.len(),
        config.n_permutations
    );
    let _ = writeln!(s, "## Methods\n");
    let _ = writeln!(s, "| method | terms | mean precision | mean recall | pooled F1 |");
    let _ = writeln!(s, "|---|---|---|---|---|");
    for &method in &config.methods {
        let rows: Vec<&MetricsRow> = metrics.iter().filter(|m| m.method == method).collect();
        if rows.is_empty() {
            continue;
        }
        let n = rows.len() as f64;
        let (tp, fp, fn_) = rows.iter().fold((0, 0, 0), |(a, b, c), m| (a + m.tp, b + m.fp, c + m.fn_));
        let _ = writeln!(
            s,
            "| {} | {} | {:.3} | {:.3} | {:.3} |",
            method,
            rows.len(),
            rows.iter().map(|m| m.precision).sum::<f64>() / n,
            rows.iter().map(|m| m.recall).sum::<f64>() / n,
            f1(tp, fp, fn_)
        );
    }
    for &method in &config.methods {
        let _ = writeln!(s, "\n## {method}\n");
        let _ = writeln!(s, "| term | support | precision | chance | recall | chance |");
        let _ = writeln!(s, "|---|---|---|---|---|---|");
        let mut rows: Vec<&MetricsRow> = metrics.iter().filter(|m| m.method == method).collect();
        rows.sort_by(|a, b| b.support_test.cmp(&a.support_test));
        for m in rows {
            let chance = |mean: f64, sd: f64| {
                if m.n_permutations == 0 {
                    format!("{mean:.3} (analytic)")
                } else {
                    format!("{mean:.3} ± {sd:.3}")
                }
            };
            let _ = writeln!(
                s,
                "| {} | {} | {:.3} | {} | {:.3} | {} |",
                m.term,
                m.support_test,
                m.precision,
                chance(m.precision_chance, m.precision_chance_sd),
                m.recall,
                chance(m.recall_chance, m.recall_chance_sd)
            );
        }
    }
    let _ = writeln!(s, "\n## Term frequencies\n");
    let _ = writeln!(s, "| term | category | maps |");
    let _ = writeln!(s, "|---|---|---|");
    for &(t, n) in freq {
        let _ = writeln!(s, "| {} | {} | {} |", tax.term_name(t), tax.category_of(t), n);
    }
    let _ = writeln!(s, "\n## Pairwise map distances\n");
    let _ = writeln!(s, "| group | pairs | median distance |");
    let _ = writeln!(s, "|---|---|---|");
    for h in &diagnostics.histograms {
        let _ = writeln!(s, "| {} | {} | {:.3} |", h.group, h.n_pairs, h.median);
    }
    let _ = writeln!(
        s,
        "\nFiles: `pr_bars.csv`, `term_frequency.csv`, `distance_histograms.csv`, `design_correlation.csv`, `design_correlation.pgm`."
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VolumeGrid;

    #[test]
    fn mosaic_places_slices_and_flips_y() {
        let grid = VolumeGrid::new([2, 3, 5], [1.0; 3]).unwrap();
        let mask = BrainMask::full(grid);
        let values: Vec<f64> = (0..mask.p()).map(|v| v as f64).collect();
        let (w, h, px) = mosaic(&mask, &values, |v| v as u8);
        // 5 slices -> 3 columns, 2 rows of 2x3 tiles.
        assert_eq!((w, h), (6, 6));
        for v in 0..mask.p() {
            let [x, y, z] = mask.coords_of(v);
            let row = (z / 3) * 3 + (2 - y);
            assert_eq!(px[row * w + (z % 3) * 2 + x], v as u8);
        }
        // The sixth tile is unused.
        assert!(px[3 * w + 4..3 * w + 6].iter().all(|&p| p == 0));
    }

    #[test]
    fn pgm_header_and_length() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        write_pgm(&path, 3, 2, &[0, 1, 2, 3, 4, 5]).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 6);
        assert!(write_pgm(&path, 3, 3, &[0; 6]).is_err());
    }

    #[test]
    fn stems_are_file_safe() {
        assert_eq!(stem("non-vocal sounds"), "non-vocal_sounds");
        assert_eq!(stem("a/b"), "a_b");
    }

    #[test]
    fn report_rejects_incomplete_directory() {
        let dir = tempfile::tempdir().unwrap();
        let err = cmd_report(dir.path()).unwrap_err();
        assert!(err.to_string().contains("incomplete"));
        assert_eq!(err.exit_code(), 2);
    }
}
