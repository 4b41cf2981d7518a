//! Ontology taxonomy, studies, annotated activation maps and the term
//! occurrence design matrix.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::volume::BrainMask;

pub mod manifest;

pub use manifest::{load_corpus, save_corpus};

/// Ordered categories, each with an ordered list of globally unique terms.
#[derive(Debug, Clone, PartialEq)]
pub struct Taxonomy {
    categories: Vec<(String, Vec<String>)>,
    terms: Vec<String>,
    category_of: Vec<usize>,
    index: HashMap<String, usize>,
}

impl Taxonomy {
    pub fn new(categories: Vec<(String, Vec<String>)>) -> Result<Self> {
        let mut terms = Vec::new();
        let mut category_of = Vec::new();
        let mut index = HashMap::new();
        for (c, (name, list)) in categories.iter().enumerate() {
            if list.is_empty() {
                return Err(Error::InvalidArgument(format!("category `{name}` has no terms")));
            }
            for t in list {
                if index.insert(t.clone(), terms.len()).is_some() {
                    return Err(Error::InvalidArgument(format!("term `{t}` appears twice in taxonomy")));
                }
                terms.push(t.clone());
                category_of.push(c);
            }
        }
        Ok(Self {
            categories,
            terms,
            category_of,
            index,
        })
    }

    /// The four CogPO categories and 19 terms used for the default corpus.
    pub fn cogpo() -> Self {
        let spec: [(&str, &[&str]); 4] = [
            ("stimulus modality", &["visual", "auditory"]),
            (
                "explicit stimulus",
                &["words", "shapes", "digits", "abstract patterns", "non-vocal sounds", "scramble", "face"],
            ),
            (
                "instructions",
                &["attend", "read", "move", "track", "count", "discriminate", "inhibit"],
            ),
            ("overt response", &["saccades", "none", "button press"]),
        ];
        Self::new(
            spec.iter()
                .map(|(c, ts)| (c.to_string(), ts.iter().map(|t| t.to_string()).collect()))
                .collect(),
        )
        .expect("static taxonomy is valid")
    }

    pub fn categories(&self) -> &[(String, Vec<String>)] {
        &self.categories
    }

    pub fn category_names(&self) -> impl Iterator<Item = &str> {
        self.categories.iter().map(|(c, _)| c.as_str())
    }

    /// All terms in taxonomy order.
    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn term_id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn term_name(&self, id: usize) -> &str {
        &self.terms[id]
    }

    pub fn category_index(&self, term_id: usize) -> usize {
        self.category_of[term_id]
    }

    pub fn category_of(&self, term_id: usize) -> &str {
        &self.categories[self.category_of[term_id]].0
    }

    pub fn category_id(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|(c, _)| c == name)
    }

    pub fn terms_in_category(&self, category: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.terms.len()).filter(move |&t| self.category_of[t] == category)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub id: String,
    pub terms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    pub id: String,
    pub laboratory: String,
    pub subject_ids: Vec<String>,
    pub conditions: Vec<Condition>,
}

/// One activation map's provenance; indices point into the corpus' studies.
#[derive(Debug, Clone, PartialEq)]
pub struct MapRecord {
    pub study: usize,
    pub subject: usize,
    pub condition: usize,
    pub file: Option<String>,
}

/// Input for one map when assembling a corpus.
#[derive(Debug, Clone)]
pub struct MapEntry {
    pub study: String,
    pub subject: String,
    pub condition: String,
    pub file: Option<String>,
    pub values: Vec<f64>,
}

/// Validated collection of studies and their activation maps. Map values are
/// stored row-major, one row of length `mask.p()` per map.
#[derive(Debug, Clone)]
pub struct Corpus {
    taxonomy: Taxonomy,
    mask: BrainMask,
    studies: Vec<Study>,
    condition_terms: Vec<Vec<Vec<usize>>>,
    records: Vec<MapRecord>,
    data: Vec<f64>,
}

impl Corpus {
    pub fn new(
        taxonomy: Taxonomy,
        mask: BrainMask,
        studies: Vec<Study>,
        maps: impl IntoIterator<Item = MapEntry>,
    ) -> Result<Self> {
        let mut study_index = HashMap::new();
        let mut condition_terms = Vec::with_capacity(studies.len());
        for (s, study) in studies.iter().enumerate() {
            if study_index.insert(study.id.as_str(), s).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate study id `{}`", study.id)));
            }
            let mut seen = BTreeSet::new();
            let mut per_condition = Vec::with_capacity(study.conditions.len());
            for cond in &study.conditions {
                if !seen.insert(cond.id.as_str()) {
                    return Err(Error::InvalidArgument(format!(
                        "study `{}` has duplicate condition `{}`",
                        study.id, cond.id
                    )));
                }
                if cond.terms.is_empty() {
                    return Err(Error::InvalidArgument(format!(
                        "condition `{}/{}` has no terms",
                        study.id, cond.id
                    )));
                }
                let mut ids = Vec::with_capacity(cond.terms.len());
                for t in &cond.terms {
                    let id = taxonomy.term_id(t).ok_or_else(|| Error::UnknownTerm {
                        condition: format!("{}/{}", study.id, cond.id),
                        term: t.clone(),
                    })?;
                    ids.push(id);
                }
                ids.sort_unstable();
                ids.dedup();
                per_condition.push(ids);
            }
            condition_terms.push(per_condition);
        }

        let p = mask.p();
        let mut records = Vec::new();
        let mut data = Vec::new();
        for entry in maps {
            let entity = || format!("map {}/{}/{}", entry.study, entry.subject, entry.condition);
            let &s = study_index.get(entry.study.as_str()).ok_or_else(|| Error::DanglingReference {
                entity: entity(),
                reference: format!("study `{}`", entry.study),
            })?;
            let study = &studies[s];
            let subject = study
                .subject_ids
                .iter()
                .position(|x| *x == entry.subject)
                .ok_or_else(|| Error::DanglingReference {
                    entity: entity(),
                    reference: format!("subject `{}`", entry.subject),
                })?;
            let condition = study
                .conditions
                .iter()
                .position(|c| c.id == entry.condition)
                .ok_or_else(|| Error::DanglingReference {
                    entity: entity(),
                    reference: format!("condition `{}`", entry.condition),
                })?;
            if entry.values.len() != p {
                return Err(Error::LengthMismatch {
                    entity: entity(),
                    expected: p,
                    actual: entry.values.len(),
                });
            }
            if entry.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(entity()));
            }
            data.extend_from_slice(&entry.values);
            records.push(MapRecord {
                study: s,
                subject,
                condition,
                file: entry.file,
            });
        }
        Ok(Self {
            taxonomy,
            mask,
            studies,
            condition_terms,
            records,
            data,
        })
    }

    pub fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    pub fn mask(&self) -> &BrainMask {
        &self.mask
    }

    pub fn studies(&self) -> &[Study] {
        &self.studies
    }

    pub fn records(&self) -> &[MapRecord] {
        &self.records
    }

    pub fn n_maps(&self) -> usize {
        self.records.len()
    }

    pub fn p(&self) -> usize {
        self.mask.p()
    }

    pub fn map(&self, i: usize) -> &[f64] {
        let p = self.p();
        &self.data[i * p..(i + 1) * p]
    }

    /// Row-major `n x p` map matrix.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Sorted term ids annotating map `i`.
    pub fn map_terms(&self, i: usize) -> &[usize] {
        let r = &self.records[i];
        &self.condition_terms[r.study][r.condition]
    }

    pub fn condition_term_ids(&self, study: usize, condition: usize) -> &[usize] {
        &self.condition_terms[study][condition]
    }

    pub fn map_id(&self, i: usize) -> String {
        let r = &self.records[i];
        let s = &self.studies[r.study];
        format!("{}/{}/{}", s.id, s.subject_ids[r.subject], s.conditions[r.condition].id)
    }

    pub fn laboratory_of(&self, i: usize) -> &str {
        &self.studies[self.records[i].study].laboratory
    }

    /// Whether map `i` carries the term.
    pub fn has_term(&self, i: usize, term: usize) -> bool {
        self.map_terms(i).binary_search(&term).is_ok()
    }

    pub fn labels(&self, term: usize) -> Vec<bool> {
        (0..self.n_maps()).map(|i| self.has_term(i, term)).collect()
    }

    /// Strict mode: at most one term per category on every condition.
    pub fn check_one_term_per_category(&self) -> Result<()> {
        for (s, study) in self.studies.iter().enumerate() {
            for (c, cond) in study.conditions.iter().enumerate() {
                let mut seen = BTreeSet::new();
                for &t in &self.condition_terms[s][c] {
                    if !seen.insert(self.taxonomy.category_index(t)) {
                        return Err(Error::InvalidArgument(format!(
                            "condition `{}/{}` has several terms in category `{}`",
                            study.id,
                            cond.id,
                            self.taxonomy.category_of(t)
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Number of distinct studies whose maps (restricted to `maps`) carry each term.
    pub fn term_span_over(&self, maps: &[usize]) -> Vec<usize> {
        let mut seen = vec![BTreeSet::new(); self.taxonomy.n_terms()];
        for &i in maps {
            for &t in self.map_terms(i) {
                seen[t].insert(self.records[i].study);
            }
        }
        seen.into_iter().map(|s| s.len()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TermSpan {
    pub term: String,
    pub category: String,
    pub n_studies: usize,
    pub usable: bool,
}

/// Minimum number of studies a term must appear in to be used for
/// classification.
pub const MIN_STUDY_SPAN: usize = 2;

/// Study span of every term annotating at least one condition, in taxonomy order.
pub fn validate_term_span(corpus: &Corpus) -> Vec<TermSpan> {
    let tax = corpus.taxonomy();
    let mut studies_with = vec![BTreeSet::new(); tax.n_terms()];
    for (s, per_condition) in corpus.condition_terms.iter().enumerate() {
        for ids in per_condition {
            for &t in ids {
                studies_with[t].insert(s);
            }
        }
    }
    studies_with
        .into_iter()
        .enumerate()
        .filter(|(_, s)| !s.is_empty())
        .map(|(t, s)| TermSpan {
            term: tax.term_name(t).to_owned(),
            category: tax.category_of(t).to_owned(),
            n_studies: s.len(),
            usable: s.len() >= MIN_STUDY_SPAN,
        })
        .collect()
}

/// Number of maps whose condition carries each term, in taxonomy order.
pub fn term_frequencies(corpus: &Corpus) -> Vec<(String, usize)> {
    let tax = corpus.taxonomy();
    let mut counts = vec![0usize; tax.n_terms()];
    for i in 0..corpus.n_maps() {
        for &t in corpus.map_terms(i) {
            counts[t] += 1;
        }
    }
    tax.terms().iter().cloned().zip(counts).collect()
}

/// Binary term-occurrence matrix, optionally followed by an all-ones column.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    columns: Vec<String>,
    term_ids: Vec<usize>,
    excluded: Vec<String>,
    intercept: bool,
    n_rows: usize,
    values: Vec<f64>,
}

impl DesignMatrix {
    /// Assemble from explicit rows. `rows[i][j]` must be 0 or 1 for term columns.
    pub fn from_rows(columns: Vec<String>, rows: &[Vec<f64>], intercept: bool) -> Result<Self> {
        let k = columns.len();
        let width = k + usize::from(intercept);
        if width == 0 {
            return Err(Error::InvalidArgument("design has no columns".into()));
        }
        let mut values = Vec::with_capacity(rows.len() * width);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(Error::LengthMismatch {
                    entity: format!("design row {i}"),
                    expected: k,
                    actual: row.len(),
                });
            }
            if row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidArgument(format!("design row {i} is not binary")));
            }
            values.extend_from_slice(row);
            if intercept {
                values.push(1.0);
            }
        }
        Ok(Self {
            term_ids: (0..k).collect(),
            columns,
            excluded: Vec::new(),
            intercept,
            n_rows: rows.len(),
            values,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    /// Total column count including the intercept.
    pub fn n_cols(&self) -> usize {
        self.columns.len() + usize::from(self.intercept)
    }

    /// Names of the term columns (the intercept is not listed).
    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names = self.columns.clone();
        if self.intercept {
            names.push("intercept".into());
        }
        names
    }

    pub fn term_ids(&self) -> &[usize] {
        &self.term_ids
    }

    pub fn excluded(&self) -> &[String] {
        &self.excluded
    }

    pub fn intercept_included(&self) -> bool {
        self.intercept
    }

    pub fn column_of(&self, term: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == term)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n_cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let w = self.n_cols();
        &self.values[row * w..(row + 1) * w]
    }

    /// Row-major values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn column_sum(&self, col: usize) -> f64 {
        (0..self.n_rows).map(|i| self.get(i, col)).sum()
    }

    /// Subset of rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let w = self.n_cols();
        let mut values = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        Self {
            n_rows: rows.len(),
            values,
            ..self.clone()
        }
    }
}

/// One row per map, columns in taxonomy order minus `excluded`, intercept last.
pub fn build_design_matrix(corpus: &Corpus, excluded: &[String], intercept: bool) -> Result<DesignMatrix> {
    let tax = corpus.taxonomy();
    let mut skip = vec![false; tax.n_terms()];
    for name in excluded {
        let id = tax
            .term_id(name)
            .ok_or_else(|| Error::InvalidArgument(format!("cannot exclude unknown term `{name}`")))?;
        skip[id] = true;
    }
    let term_ids: Vec<usize> = (0..tax.n_terms()).filter(|&t| !skip[t]).collect();
    if term_ids.is_empty() {
        return Err(Error::InvalidArgument("every term is excluded from the design".into()));
    }
    let width = term_ids.len() + usize::from(intercept);
    let n = corpus.n_maps();
    let mut values = Vec::with_capacity(n * width);
    for i in 0..n {
        for &t in &term_ids {
            values.push(if corpus.has_term(i, t) { 1.0 } else { 0.0 });
        }
        if intercept {
            values.push(1.0);
        }
    }
    Ok(DesignMatrix {
        columns: term_ids.iter().map(|&t| tax.term_name(t).to_owned()).collect(),
        term_ids,
        excluded: excluded.to_vec(),
        intercept,
        n_rows: n,
        values,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::volume::VolumeGrid;

    pub(crate) fn tiny_mask() -> BrainMask {
        BrainMask::full(VolumeGrid::new([2, 2, 1], [3.0; 3]).unwrap())
    }

    pub(crate) fn study(id: &str, lab: &str, conds: &[(&str, &[&str])]) -> Study {
        Study {
            id: id.into(),
            laboratory: lab.into(),
            subject_ids: vec!["s1".into(), "s2".into()],
            conditions: conds
                .iter()
                .map(|(c, ts)| Condition {
                    id: c.to_string(),
                    terms: ts.iter().map(|t| t.to_string()).collect(),
                })
                .collect(),
        }
    }

    pub(crate) fn entry(study: &str, subject: &str, cond: &str, v: f64) -> MapEntry {
        MapEntry {
            study: study.into(),
            subject: subject.into(),
            condition: cond.into(),
            file: None,
            values: vec![v; 4],
        }
    }

    #[test]
    fn default_taxonomy_shape() {
        let t = Taxonomy::cogpo();
        assert_eq!(t.n_terms(), 19);
        let sizes: Vec<usize> = t.categories().iter().map(|(_, ts)| ts.len()).collect();
        assert_eq!(sizes, vec![2, 7, 7, 3]);
        assert_eq!(t.category_of(t.term_id("saccades").unwrap()), "overt response");
    }

    #[test]
    fn rejects_unknown_terms_and_bad_references() {
        let bad = study("A", "L", &[("c1", &["visual", "smell"])]);
        let err = Corpus::new(Taxonomy::cogpo(), tiny_mask(), vec![bad], vec![]).unwrap_err();
        match err {
            Error::UnknownTerm { condition, term } => {
                assert_eq!(condition, "A/c1");
                assert_eq!(term, "smell");
            }
            other => panic!("unexpected {other}"),
        }

        let ok = study("A", "L", &[("c1", &["visual", "attend"])]);
        let err = Corpus::new(Taxonomy::cogpo(), tiny_mask(), vec![ok.clone()], vec![entry("A", "s9", "c1", 0.0)])
            .unwrap_err();
        assert!(matches!(err, Error::DanglingReference { .. }));
        assert!(err.to_string().contains("s9"));

        let mut short = entry("A", "s1", "c1", 0.0);
        short.values.pop();
        let err = Corpus::new(Taxonomy::cogpo(), tiny_mask(), vec![ok], vec![short]).unwrap_err();
        assert!(matches!(err, Error::LengthMismatch { expected: 4, actual: 3, .. }));
    }

    pub(crate) fn two_study_corpus() -> Corpus {
        let a = study("A", "L1", &[("c1", &["auditory", "words", "read", "none"]), ("c2", &["visual", "face"])]);
        let b = study("B", "L2", &[("c1", &["visual", "words"]), ("c2", &["visual", "digits", "count"])]);
        let maps = vec![
            entry("A", "s1", "c1", 1.0),
            entry("A", "s2", "c1", 2.0),
            entry("A", "s1", "c2", 3.0),
            entry("B", "s1", "c1", 4.0),
            entry("B", "s2", "c2", 5.0),
        ];
        Corpus::new(Taxonomy::cogpo(), tiny_mask(), vec![a, b], maps).unwrap()
    }

    #[test]
    fn term_span_flags_single_study_terms() {
        let c = two_study_corpus();
        let report = validate_term_span(&c);
        let get = |t: &str| report.iter().find(|r| r.term == t).unwrap().clone();
        assert_eq!(get("words").n_studies, 2);
        assert!(get("words").usable);
        assert_eq!(get("face").n_studies, 1);
        assert!(!get("face").usable);
        assert!(report.iter().all(|r| r.term != "saccades"));

        let empty = Corpus::new(Taxonomy::cogpo(), tiny_mask(), vec![], vec![]).unwrap();
        assert!(validate_term_span(&empty).is_empty());
    }

    #[test]
    fn design_matrix_columns_and_rows() {
        let c = two_study_corpus();
        let d = build_design_matrix(&c, &[], false).unwrap();
        assert_eq!(d.n_cols(), 19);
        let d = build_design_matrix(&c, &["visual".into(), "digits".into()], true).unwrap();
        assert_eq!(d.columns().len(), 17);
        assert_eq!(d.n_cols(), 18);
        assert!(d.column_of("visual").is_none());

        let d = build_design_matrix(&c, &[], false).unwrap();
        let ones: Vec<&str> = (0..d.n_cols())
            .filter(|&j| d.get(0, j) == 1.0)
            .map(|j| d.columns()[j].as_str())
            .collect();
        assert_eq!(ones, vec!["auditory", "words", "read", "none"]);

        let all: Vec<String> = Taxonomy::cogpo().terms().to_vec();
        assert!(build_design_matrix(&c, &all, true).is_err());
        assert!(build_design_matrix(&c, &["smell".into()], true).is_err());
    }

    #[test]
    fn frequencies_match_design_sums() {
        let c = two_study_corpus();
        let freq = term_frequencies(&c);
        let d = build_design_matrix(&c, &[], true).unwrap();
        for (j, name) in d.columns().iter().enumerate() {
            let f = freq.iter().find(|(t, _)| t == name).unwrap().1;
            assert_eq!(d.column_sum(j), f as f64);
        }
        assert_eq!(freq.iter().find(|(t, _)| t == "visual").unwrap().1, 3);
    }

    #[test]
    fn strict_mode_detects_two_terms_in_a_category() {
        let c = two_study_corpus();
        assert!(c.check_one_term_per_category().is_ok());
        let s = study("A", "L", &[("c1", &["visual", "auditory"])]);
        let c = Corpus::new(Taxonomy::cogpo(), tiny_mask(), vec![s], vec![]).unwrap();
        assert!(c.check_one_term_per_category().is_err());
    }
}
