//! Synthetic multi-study corpora with known term effect maps.
//!
//! Each map is the sum of its terms' effect maps, an additive per-study (and
//! optionally per-laboratory) offset map and spatially smoothed Gaussian
//! noise. Term frequencies follow a long-tailed plan that is met exactly by
//! assigning terms to conditions with a subset-sum search.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::manifest::save_corpus;
use crate::corpus::{Condition, Corpus, MapEntry, Study, Taxonomy};
use crate::error::{Error, Result};
use crate::seed;
use crate::volume::bmap::Bmap;
use crate::volume::{BrainMask, MaskedVector, Smoother, VolumeGrid};

/// Subjects and conditions of the 19 default studies: 486 subjects, 131
/// conditions and 3826 maps when every subject performs every condition.
pub const DEFAULT_SUBJECTS: [usize; 19] = [39, 19, 30, 24, 14, 44, 36, 24, 20, 33, 41, 23, 9, 34, 33, 20, 18, 12, 13];
pub const DEFAULT_CONDITIONS: [usize; 19] = [13, 4, 8, 9, 3, 14, 6, 5, 5, 3, 9, 10, 3, 8, 11, 3, 11, 3, 3];

/// Long-tailed per-term map counts for the default corpus.
pub const DEFAULT_TERM_COUNTS: [(&str, usize); 19] = [
    ("visual", 3100),
    ("auditory", 726),
    ("words", 950),
    ("shapes", 600),
    ("digits", 350),
    ("abstract patterns", 280),
    ("non-vocal sounds", 220),
    ("scramble", 90),
    ("face", 70),
    ("attend", 1200),
    ("read", 520),
    ("move", 420),
    ("track", 260),
    ("count", 350),
    ("discriminate", 180),
    ("inhibit", 60),
    ("button press", 1900),
    ("none", 800),
    ("saccades", 85),
];

const DEFAULT_TOTAL_MAPS: usize = 3826;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub dims: [usize; 3],
    pub voxel_size_mm: [f64; 3],
    /// Ellipsoidal mask semi-axes in voxels.
    pub semi_axes: [f64; 3],
    pub subjects_per_study: Vec<usize>,
    pub conditions_per_study: Vec<usize>,
    pub n_laboratories: usize,
    /// Exact per-term map counts; when absent, counts proportional to the
    /// default plan are rounded to the nearest achievable value.
    pub term_counts: Option<IndexMap<String, usize>>,
    /// Categories in which every condition carries exactly one term.
    pub complete_categories: Vec<String>,
    /// `(follower, leader)`: the follower annotates exactly the leader's conditions.
    pub coupled_terms: Vec<(String, String)>,
    pub min_study_span: usize,
    pub blobs_per_term: [usize; 2],
    /// Gaussian blob width in voxels; blobs are cut at twice this radius.
    pub blob_sigma: f64,
    pub effect_amplitude: f64,
    pub allow_overlap: bool,
    pub noise_sigma: f64,
    pub noise_smoothing: f64,
    pub study_effect_amplitude: f64,
    pub study_effect_smoothing: f64,
    pub lab_effect_amplitude: f64,
    /// Spread of per-(study, term) effect scale factors around 1.
    pub interaction_amplitude: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dims: [24, 24, 18],
            voxel_size_mm: [3.0; 3],
            semi_axes: [12.5, 12.5, 9.5],
            subjects_per_study: DEFAULT_SUBJECTS.to_vec(),
            conditions_per_study: DEFAULT_CONDITIONS.to_vec(),
            n_laboratories: 2,
            term_counts: Some(DEFAULT_TERM_COUNTS.iter().map(|&(t, c)| (t.to_owned(), c)).collect()),
            complete_categories: vec!["stimulus modality".into()],
            coupled_terms: vec![("count".into(), "digits".into())],
            min_study_span: 3,
            blobs_per_term: [1, 3],
            blob_sigma: 2.0,
            effect_amplitude: 1.0,
            allow_overlap: true,
            noise_sigma: 1.0,
            noise_smoothing: 1.0,
            study_effect_amplitude: 2.0,
            study_effect_smoothing: 3.0,
            lab_effect_amplitude: 0.0,
            interaction_amplitude: 0.0,
        }
    }
}

impl SynthConfig {
    /// Default settings with `n` studies. Other than the default 19, studies
    /// get 10 subjects and 10 conditions each and proportional term counts.
    pub fn with_studies(n: usize) -> Self {
        let mut c = Self::default();
        if n != DEFAULT_SUBJECTS.len() {
            c.subjects_per_study = vec![10; n];
            c.conditions_per_study = vec![10; n];
            c.term_counts = None;
        }
        c
    }

    pub fn n_studies(&self) -> usize {
        self.subjects_per_study.len()
    }

    pub fn n_maps(&self) -> usize {
        self.subjects_per_study
            .iter()
            .zip(&self.conditions_per_study)
            .map(|(s, c)| s * c)
            .sum()
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.subjects_per_study.len() != self.conditions_per_study.len() {
            return bad("subjects and conditions plans differ in length".into());
        }
        if self.n_studies() < 2 {
            return bad("at least two studies are needed".into());
        }
        if self.subjects_per_study.iter().chain(&self.conditions_per_study).any(|&v| v == 0) {
            return bad("every study needs subjects and conditions".into());
        }
        if self.n_laboratories == 0 || self.n_laboratories > self.n_studies() {
            return bad(format!("n_laboratories must be in 1..={}", self.n_studies()));
        }
        if self.min_study_span < 2 {
            return bad("min_study_span must be at least 2".into());
        }
        let [lo, hi] = self.blobs_per_term;
        if lo == 0 || lo > hi {
            return bad("blobs_per_term must be a non-empty range starting at 1 or more".into());
        }
        for (name, v) in [
            ("blob_sigma", self.blob_sigma),
            ("noise_smoothing", self.noise_smoothing),
            ("study_effect_smoothing", self.study_effect_smoothing),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("effect_amplitude", self.effect_amplitude),
            ("noise_sigma", self.noise_sigma),
            ("study_effect_amplitude", self.study_effect_amplitude),
            ("lab_effect_amplitude", self.lab_effect_amplitude),
            ("interaction_amplitude", self.interaction_amplitude),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative"));
            }
        }
        Ok(())
    }

    pub fn mask(&self) -> Result<BrainMask> {
        BrainMask::ellipsoid(VolumeGrid::new(self.dims, self.voxel_size_mm)?, self.semi_axes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobRecord {
    pub term: String,
    pub center_voxel: usize,
    pub center: [usize; 3],
    pub sigma: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub taxonomy: Taxonomy,
    pub mask: BrainMask,
    /// True effect map of every taxonomy term, in taxonomy order.
    pub effect_maps: Vec<MaskedVector>,
    pub blobs: Vec<BlobRecord>,
    pub study_effects: Vec<MaskedVector>,
    pub lab_effects: Vec<MaskedVector>,
    pub noise_sigma: f64,
    pub study_effect_amplitude: f64,
    /// Target map count per term (explicit plans only).
    pub frequency_plan: Option<IndexMap<String, usize>>,
}

impl GroundTruth {
    /// Voxels where the term's effect is non-zero.
    pub fn support(&self, term: usize) -> Vec<bool> {
        self.effect_maps[term].data().iter().map(|&v| v != 0.0).collect()
    }
}

fn dist2(a: [usize; 3], b: [usize; 3]) -> f64 {
    (0..3).map(|k| (a[k] as f64 - b[k] as f64).powi(2)).sum()
}

/// Unit-variance smooth Gaussian field.
fn smooth_field(smoother: &Smoother, sd: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let white: Vec<f64> = (0..sd.len()).map(|_| rng.sample(StandardNormal)).collect();
    smoother.apply(&white).into_iter().zip(sd).map(|(v, s)| v / s).collect()
}

/// Sample term effect maps and study/laboratory offset maps.
pub fn make_ground_truth(taxonomy: &Taxonomy, mask: &BrainMask, config: &SynthConfig, seed: u64) -> Result<GroundTruth> {
    config.validate()?;
    let p = mask.p();
    let coords: Vec<[usize; 3]> = (0..p).map(|v| mask.coords_of(v)).collect();
    let radius2 = (2.0 * config.blob_sigma).powi(2);
    let mut rng = seed::rng(seed, &[&"blobs"]);

    let mut used_centres = BTreeSet::new();
    let mut occupied_by: Vec<Option<usize>> = vec![None; p];
    let mut blobs = Vec::new();
    let mut effect_maps = Vec::with_capacity(taxonomy.n_terms());
    for (t, term) in taxonomy.terms().iter().enumerate() {
        let n_blobs = rng.gen_range(config.blobs_per_term[0]..=config.blobs_per_term[1]);
        let mut values = vec![0.0; p];
        for _ in 0..n_blobs {
            let mut placed = None;
            for _ in 0..1000 {
                let c = rng.gen_range(0..p);
                if used_centres.contains(&c) {
                    continue;
                }
                let support: Vec<usize> = (0..p).filter(|&v| dist2(coords[v], coords[c]) <= radius2).collect();
                if !config.allow_overlap && support.iter().any(|&v| occupied_by[v].is_some_and(|o| o != t)) {
                    continue;
                }
                placed = Some((c, support));
                break;
            }
            let (c, support) = placed.ok_or_else(|| {
                Error::InvalidArgument(format!("mask too small to place {n_blobs} blob(s) for term `{term}`"))
            })?;
            used_centres.insert(c);
            for &v in &support {
                occupied_by[v] = Some(t);
                if config.effect_amplitude > 0.0 {
                    let d2 = dist2(coords[v], coords[c]);
                    values[v] += config.effect_amplitude * (-d2 / (2.0 * config.blob_sigma.powi(2))).exp();
                }
            }
            blobs.push(BlobRecord {
                term: term.clone(),
                center_voxel: c,
                center: coords[c],
                sigma: config.blob_sigma,
                amplitude: config.effect_amplitude,
            });
        }
        effect_maps.push(MaskedVector::new(mask, values)?);
    }

    let smoother = Smoother::new(mask, config.study_effect_smoothing)?;
    let sd = smoother.white_noise_sd();
    let offsets = |kind: &str, n: usize, amplitude: f64| -> Result<Vec<MaskedVector>> {
        (0..n)
            .map(|i| {
                let mut r = seed::rng(seed, &[&kind, &i]);
                let field = smooth_field(&smoother, &sd, &mut r);
                MaskedVector::new(mask, field.into_iter().map(|v| amplitude * v).collect())
            })
            .collect()
    };
    let study_effects = offsets("study", config.n_studies(), config.study_effect_amplitude)?;
    let lab_effects = offsets("laboratory", config.n_laboratories, config.lab_effect_amplitude)?;

    Ok(GroundTruth {
        taxonomy: taxonomy.clone(),
        mask: mask.clone(),
        effect_maps,
        blobs,
        study_effects,
        lab_effects,
        noise_sigma: config.noise_sigma,
        study_effect_amplitude: config.study_effect_amplitude,
        frequency_plan: config.term_counts.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRecord {
    pub study: String,
    pub condition: String,
    pub n_subjects: usize,
    pub terms: Vec<String>,
}

/// Everything sampled while generating a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthLedger {
    pub seed: u64,
    pub config: SynthConfig,
    pub n_voxels: usize,
    pub n_maps: usize,
    /// Requested per-term counts (after rounding for proportional plans).
    pub frequency_plan: IndexMap<String, usize>,
    /// Achieved per-term counts.
    pub term_counts: IndexMap<String, usize>,
    pub blobs: Vec<BlobRecord>,
    pub conditions: Vec<ConditionRecord>,
    /// `[study][term]` effect scale factors, present when interactions are on.
    pub interaction_scales: Option<Vec<Vec<f64>>>,
    pub effect_files: IndexMap<String, String>,
    pub study_effect_files: IndexMap<String, String>,
}

/// A condition slot: (study, condition index, weight = subject count).
#[derive(Debug, Clone, Copy)]
struct Slot {
    study: usize,
    weight: usize,
}

/// Exact subset sum over `items` (indices into `slots`), trying them in the
/// given order. Returns the chosen items.
fn subset_sum(slots: &[Slot], items: &[usize], target: usize) -> Option<Vec<usize>> {
    const UNSET: u32 = u32::MAX;
    const ROOT: u32 = u32::MAX - 1;
    let mut from = vec![UNSET; target + 1];
    from[0] = ROOT;
    for (k, &item) in items.iter().enumerate() {
        let w = slots[item].weight;
        if w > target {
            continue;
        }
        for v in (w..=target).rev() {
            if from[v] == UNSET && from[v - w] != UNSET {
                from[v] = k as u32;
            }
        }
        if from[target] != UNSET {
            break;
        }
    }
    if from[target] == UNSET {
        return None;
    }
    let mut out = Vec::new();
    let mut v = target;
    while v > 0 {
        let k = from[v] as usize;
        out.push(items[k]);
        v -= slots[items[k]].weight;
    }
    Some(out)
}

/// Pick conditions from `available` whose weights sum to `target`, covering
/// at least `min_span` studies.
fn pick_conditions(
    slots: &[Slot],
    available: &[usize],
    target: usize,
    min_span: usize,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<usize>> {
    let mut studies: Vec<usize> = available.iter().map(|&i| slots[i].study).collect();
    studies.sort_unstable();
    studies.dedup();
    if studies.len() < min_span {
        return None;
    }
    for _ in 0..200 {
        studies.shuffle(rng);
        let mut seeds = Vec::with_capacity(min_span);
        for &s in &studies[..min_span] {
            let options: Vec<usize> = available.iter().copied().filter(|&i| slots[i].study == s).collect();
            seeds.push(*options.choose(rng).unwrap());
        }
        let used: usize = seeds.iter().map(|&i| slots[i].weight).sum();
        if used > target {
            continue;
        }
        let mut rest: Vec<usize> = available.iter().copied().filter(|i| !seeds.contains(i)).collect();
        rest.shuffle(rng);
        if let Some(mut more) = subset_sum(slots, &rest, target - used) {
            more.extend(seeds);
            more.sort_unstable();
            return Some(more);
        }
    }
    None
}

fn span_of(slots: &[Slot], chosen: &[usize]) -> usize {
    chosen.iter().map(|&i| slots[i].study).collect::<BTreeSet<_>>().len()
}

/// Assign taxonomy terms to condition slots. Returns per-slot term ids and the
/// requested counts.
fn assign_terms(
    taxonomy: &Taxonomy,
    config: &SynthConfig,
    slots: &[Slot],
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Vec<usize>>, IndexMap<String, usize>)> {
    let total: usize = slots.iter().map(|s| s.weight).sum();
    let min_span = config.min_study_span.min(config.n_studies());
    let explicit = config.term_counts.is_some();
    let mut targets: IndexMap<String, usize> = IndexMap::new();
    for term in taxonomy.terms() {
        let t = match &config.term_counts {
            Some(plan) => *plan.get(term).ok_or_else(|| Error::Unsatisfiable {
                term: term.clone(),
                reason: "missing from the frequency plan".into(),
            })?,
            None => {
                let base = DEFAULT_TERM_COUNTS.iter().find(|(t, _)| t == term).map_or(100, |&(_, c)| c);
                ((base as f64 * total as f64 / DEFAULT_TOTAL_MAPS as f64).round() as usize).max(1)
            }
        };
        targets.insert(term.clone(), t);
    }
    let follower_of = |term: &str| config.coupled_terms.iter().find(|(f, _)| f == term).map(|(_, l)| l.clone());

    let mut slot_terms: Vec<Vec<usize>> = vec![Vec::new(); slots.len()];
    let mut assigned: IndexMap<String, Vec<usize>> = IndexMap::new();
    for (cat, (cat_name, _)) in taxonomy.categories().iter().enumerate() {
        let complete = config.complete_categories.contains(cat_name);
        let ids: Vec<usize> = taxonomy.terms_in_category(cat).collect();
        let mut free: Vec<bool> = vec![true; slots.len()];

        // followers take their leader's conditions
        for &t in &ids {
            let name = taxonomy.term_name(t);
            if let Some(leader) = follower_of(name) {
                let chosen = assigned.get(&leader).cloned().ok_or_else(|| Error::Unsatisfiable {
                    term: name.to_owned(),
                    reason: format!("leader `{leader}` must come from an earlier category"),
                })?;
                let count: usize = chosen.iter().map(|&i| slots[i].weight).sum();
                if explicit && count != targets[name] {
                    return Err(Error::Unsatisfiable {
                        term: name.to_owned(),
                        reason: format!("follows `{leader}` ({count} maps) but the plan asks for {}", targets[name]),
                    });
                }
                targets[name] = count;
                for &i in &chosen {
                    free[i] = false;
                }
                assigned.insert(name.to_owned(), chosen);
            }
        }

        let mut order: Vec<usize> = ids
            .iter()
            .copied()
            .filter(|&t| follower_of(taxonomy.term_name(t)).is_none())
            .collect();
        order.sort_by_key(|&t| (targets[taxonomy.term_name(t)], t));
        let remainder_term = if complete { order.pop() } else { None };

        for &t in &order {
            let name = taxonomy.term_name(t);
            let available: Vec<usize> = (0..slots.len()).filter(|&i| free[i]).collect();
            let want = targets[name];
            let chosen = if explicit {
                pick_conditions(slots, &available, want, min_span, rng)
            } else {
                // nearest achievable count
                (0..=want.max(total))
                    .flat_map(|k| [want.checked_add(k), want.checked_sub(k)])
                    .flatten()
                    .filter(|&v| v > 0 && v <= total)
                    .take(200)
                    .find_map(|v| pick_conditions(slots, &available, v, min_span, rng))
            };
            let chosen = chosen.ok_or_else(|| Error::Unsatisfiable {
                term: name.to_owned(),
                reason: format!("no conditions from {min_span} or more studies add up to {want} maps"),
            })?;
            targets[name] = chosen.iter().map(|&i| slots[i].weight).sum();
            for &i in &chosen {
                free[i] = false;
            }
            assigned.insert(name.to_owned(), chosen);
        }

        if let Some(t) = remainder_term {
            let name = taxonomy.term_name(t);
            let rest: Vec<usize> = (0..slots.len()).filter(|&i| free[i]).collect();
            let count: usize = rest.iter().map(|&i| slots[i].weight).sum();
            if explicit && count != targets[name] {
                return Err(Error::Unsatisfiable {
                    term: name.to_owned(),
                    reason: format!(
                        "category `{cat_name}` is complete, leaving {count} maps but the plan asks for {}",
                        targets[name]
                    ),
                });
            }
            if span_of(slots, &rest) < min_span {
                return Err(Error::Unsatisfiable {
                    term: name.to_owned(),
                    reason: format!("remaining conditions cover fewer than {min_span} studies"),
                });
            }
            targets[name] = count;
            assigned.insert(name.to_owned(), rest);
        }
    }
    for (name, chosen) in &assigned {
        let t = taxonomy.term_id(name).expect("taxonomy term");
        for &i in chosen {
            slot_terms[i].push(t);
        }
    }
    for ts in &mut slot_terms {
        ts.sort_unstable();
    }
    Ok((slot_terms, targets))
}

fn study_id(s: usize) -> String {
    format!("S{:02}", s + 1)
}

fn lab_id(s: usize, n_labs: usize) -> String {
    format!("L{}", s % n_labs + 1)
}

/// Assemble studies and maps from the ground truth.
pub fn generate_corpus(truth: &GroundTruth, config: &SynthConfig, seed: u64) -> Result<(Corpus, SynthLedger)> {
    config.validate()?;
    let tax = &truth.taxonomy;
    let mask = &truth.mask;
    let p = mask.p();
    let n_studies = config.n_studies();
    if truth.study_effects.len() != n_studies || truth.lab_effects.len() != config.n_laboratories {
        return Err(Error::InvalidArgument("ground truth was drawn for a different study plan".into()));
    }

    let mut slots = Vec::new();
    let mut slot_index = Vec::with_capacity(n_studies);
    for s in 0..n_studies {
        let mut row = Vec::new();
        for _ in 0..config.conditions_per_study[s] {
            row.push(slots.len());
            slots.push(Slot {
                study: s,
                weight: config.subjects_per_study[s],
            });
        }
        slot_index.push(row);
    }
    let mut rng = seed::rng(seed, &[&"terms"]);
    let (slot_terms, plan) = assign_terms(tax, config, &slots, &mut rng)?;

    let scales: Option<Vec<Vec<f64>>> = (config.interaction_amplitude > 0.0).then(|| {
        let mut r = seed::rng(seed, &[&"interaction"]);
        (0..n_studies)
            .map(|_| {
                (0..tax.n_terms())
                    .map(|_| 1.0 + config.interaction_amplitude * r.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    });

    let studies: Vec<Study> = (0..n_studies)
        .map(|s| Study {
            id: study_id(s),
            laboratory: lab_id(s, config.n_laboratories),
            subject_ids: (0..config.subjects_per_study[s]).map(|j| format!("sub{:02}", j + 1)).collect(),
            conditions: slot_index[s]
                .iter()
                .enumerate()
                .map(|(c, &slot)| Condition {
                    id: format!("c{:02}", c + 1),
                    terms: slot_terms[slot].iter().map(|&t| tax.term_name(t).to_owned()).collect(),
                })
                .collect(),
        })
        .collect();

    let mut jobs = Vec::with_capacity(config.n_maps());
    for s in 0..n_studies {
        for j in 0..config.subjects_per_study[s] {
            for c in 0..config.conditions_per_study[s] {
                jobs.push((s, j, c));
            }
        }
    }
    let smoother = Smoother::new(mask, config.noise_smoothing)?;
    let sd = smoother.white_noise_sd();
    let entries: Vec<MapEntry> = jobs
        .par_iter()
        .map(|&(s, j, c)| {
            let mut values = truth.study_effects[s].data().to_vec();
            for (v, l) in values.iter_mut().zip(truth.lab_effects[s % config.n_laboratories].data()) {
                *v += l;
            }
            for &t in &slot_terms[slot_index[s][c]] {
                let scale = scales.as_ref().map_or(1.0, |sc| sc[s][t]);
                for (v, e) in values.iter_mut().zip(truth.effect_maps[t].data()) {
                    *v += scale * e;
                }
            }
            if config.noise_sigma > 0.0 {
                let mut r = seed::rng(seed, &[&"noise", &s, &j, &c]);
                let noise = smooth_field(&smoother, &sd, &mut r);
                for (v, e) in values.iter_mut().zip(noise) {
                    *v += config.noise_sigma * e;
                }
            }
            // stored as f32 on disk; keep memory and disk identical
            for v in values.iter_mut() {
                *v = f64::from(*v as f32);
            }
            MapEntry {
                study: study_id(s),
                subject: format!("sub{:02}", j + 1),
                condition: format!("c{:02}", c + 1),
                file: None,
                values,
            }
        })
        .collect();

    let corpus = Corpus::new(tax.clone(), mask.clone(), studies, entries)?;
    let term_counts: IndexMap<String, usize> = crate::corpus::term_frequencies(&corpus).into_iter().collect();
    let conditions = (0..n_studies)
        .flat_map(|s| {
            slot_index[s].iter().enumerate().map(move |(c, &slot)| (s, c, slot))
        })
        .map(|(s, c, slot)| ConditionRecord {
            study: study_id(s),
            condition: format!("c{:02}", c + 1),
            n_subjects: config.subjects_per_study[s],
            terms: slot_terms[slot].iter().map(|&t| tax.term_name(t).to_owned()).collect(),
        })
        .collect();
    let ledger = SynthLedger {
        seed,
        config: config.clone(),
        n_voxels: p,
        n_maps: corpus.n_maps(),
        frequency_plan: plan,
        term_counts,
        blobs: truth.blobs.clone(),
        conditions,
        interaction_scales: scales,
        effect_files: tax
            .terms()
            .iter()
            .map(|t| (t.clone(), format!("truth/effect_{}.bmap", file_stem(t))))
            .collect(),
        study_effect_files: (0..n_studies)
            .map(|s| (study_id(s), format!("truth/study_{}.bmap", study_id(s))))
            .collect(),
    };
    Ok((corpus, ledger))
}

fn file_stem(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub corpus: Corpus,
    pub truth: GroundTruth,
    pub ledger: SynthLedger,
}

/// Ground truth plus corpus for the default taxonomy.
pub fn synthesize(config: &SynthConfig, seed: u64) -> Result<Synthetic> {
    let mask = config.mask()?;
    let truth = make_ground_truth(&Taxonomy::cogpo(), &mask, config, seed)?;
    let (corpus, ledger) = generate_corpus(&truth, config, seed)?;
    Ok(Synthetic { corpus, truth, ledger })
}

/// Write the corpus, `ledger.json` and the ground-truth volumes under `dir`.
/// Returns the manifest path.
pub fn write_synthetic(synthetic: &Synthetic, dir: &Path) -> Result<PathBuf> {
    let manifest = save_corpus(&synthetic.corpus, dir)?;
    let truth_dir = dir.join("truth");
    fs::create_dir_all(&truth_dir).map_err(|e| Error::io(&truth_dir, e))?;
    let mask = &synthetic.truth.mask;
    for (t, file) in synthetic.ledger.effect_files.values().enumerate() {
        Bmap::from_masked(mask, "mask.bmap", synthetic.truth.effect_maps[t].data()).write(&dir.join(file))?;
    }
    for (s, file) in synthetic.ledger.study_effect_files.values().enumerate() {
        Bmap::from_masked(mask, "mask.bmap", synthetic.truth.study_effects[s].data()).write(&dir.join(file))?;
    }
    let path = dir.join("ledger.json");
    let text = serde_json::to_string_pretty(&synthetic.ledger)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{term_frequencies, validate_term_span};

    fn small_config() -> SynthConfig {
        let mut c = SynthConfig::with_studies(4);
        c.dims = [10, 10, 8];
        c.semi_axes = [5.0, 5.0, 4.0];
        c.subjects_per_study = vec![3; 4];
        c.blob_sigma = 1.0;
        c
    }

    #[test]
    fn subset_sum_finds_exact_totals() {
        let slots: Vec<Slot> = [5, 7, 11, 13].iter().map(|&w| Slot { study: 0, weight: w }).collect();
        let items = [0, 1, 2, 3];
        let got = subset_sum(&slots, &items, 24).unwrap();
        assert_eq!(got.iter().map(|&i| slots[i].weight).sum::<usize>(), 24);
        assert!(subset_sum(&slots, &items, 6).is_none());
        assert_eq!(subset_sum(&slots, &items, 0).unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn default_plan_totals() {
        let c = SynthConfig::default();
        assert_eq!(c.n_studies(), 19);
        assert_eq!(c.n_maps(), 3826);
        assert_eq!(c.subjects_per_study.iter().sum::<usize>(), 486);
        assert_eq!(c.conditions_per_study.iter().sum::<usize>(), 131);
        assert_eq!(c.mask().unwrap().p(), 6200);
    }

    #[test]
    fn ground_truth_is_reproducible_and_zero_at_zero_amplitude() {
        let mut c = small_config();
        let mask = c.mask().unwrap();
        let a = make_ground_truth(&Taxonomy::cogpo(), &mask, &c, 3).unwrap();
        let b = make_ground_truth(&Taxonomy::cogpo(), &mask, &c, 3).unwrap();
        assert_eq!(a.effect_maps, b.effect_maps);
        assert_eq!(a.blobs, b.blobs);
        c.effect_amplitude = 0.0;
        let z = make_ground_truth(&Taxonomy::cogpo(), &mask, &c, 3).unwrap();
        assert!(z.effect_maps.iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn disjoint_supports_when_overlap_forbidden() {
        let mut c = small_config();
        c.dims = [20, 20, 16];
        c.semi_axes = [10.0, 10.0, 8.0];
        c.allow_overlap = false;
        c.blobs_per_term = [1, 1];
        let mask = c.mask().unwrap();
        let tax = Taxonomy::new(vec![("c".into(), vec!["a".into(), "b".into()])]).unwrap();
        let g = make_ground_truth(&tax, &mask, &c, 1).unwrap();
        let (sa, sb) = (g.support(0), g.support(1));
        assert!(sa.iter().any(|&v| v));
        assert!(!sa.iter().zip(&sb).any(|(&x, &y)| x && y));
    }

    #[test]
    fn noiseless_maps_are_sums_of_effects() {
        let mut c = small_config();
        c.noise_sigma = 0.0;
        c.study_effect_amplitude = 0.0;
        let s = synthesize(&c, 5).unwrap();
        for i in 0..s.corpus.n_maps() {
            let mut expect = vec![0.0; s.corpus.p()];
            for &t in s.corpus.map_terms(i) {
                for (e, v) in expect.iter_mut().zip(s.truth.effect_maps[t].data()) {
                    *e += v;
                }
            }
            for (a, b) in s.corpus.map(i).iter().zip(&expect) {
                assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn frequencies_match_ledger_and_span_rule() {
        let s = synthesize(&small_config(), 9).unwrap();
        let freq: IndexMap<String, usize> = term_frequencies(&s.corpus).into_iter().collect();
        assert_eq!(freq, s.ledger.term_counts);
        assert_eq!(freq, s.ledger.frequency_plan);
        assert!(validate_term_span(&s.corpus).iter().all(|t| t.usable));
    }

    fn default_slots(c: &SynthConfig) -> Vec<Slot> {
        (0..c.n_studies())
            .flat_map(|s| (0..c.conditions_per_study[s]).map(move |_| s))
            .map(|s| Slot {
                study: s,
                weight: c.subjects_per_study[s],
            })
            .collect()
    }

    #[test]
    fn default_plan_is_met_exactly() {
        let c = SynthConfig::default();
        let slots = default_slots(&c);
        let tax = Taxonomy::cogpo();
        let (slot_terms, plan) = assign_terms(&tax, &c, &slots, &mut seed::rng(0, &[&"t"])).unwrap();
        for &(term, want) in &DEFAULT_TERM_COUNTS {
            let t = tax.term_id(term).unwrap();
            let got: usize = slots.iter().zip(&slot_terms).filter(|(_, ts)| ts.contains(&t)).map(|(s, _)| s.weight).sum();
            assert_eq!(got, want, "{term}");
            assert_eq!(plan[term], want);
        }
    }

    #[test]
    fn unsatisfiable_plan_names_term() {
        let mut c = SynthConfig::default();
        c.term_counts.as_mut().unwrap()["face"] = 1;
        let slots = default_slots(&c);
        match assign_terms(&Taxonomy::cogpo(), &c, &slots, &mut seed::rng(0, &[&"t"])).unwrap_err() {
            Error::Unsatisfiable { term, .. } => assert_eq!(term, "face"),
            e => panic!("{e}"),
        }
    }
}
