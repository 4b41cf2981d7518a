//! JSON corpus manifest plus BMAP1 mask and map files. Paths inside a
//! manifest are relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{Condition, Corpus, MapEntry, Study, Taxonomy};
use crate::error::{Error, Result};
use crate::volume::bmap::{Bmap, Payload};
use crate::volume::BrainMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub taxonomy: IndexMap<String, Vec<String>>,
    pub grid: GridSpec,
    pub mask_file: String,
    pub studies: Vec<StudySpec>,
    pub maps: Vec<MapSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub voxel_size_mm: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySpec {
    pub id: String,
    pub laboratory: String,
    pub subjects: Vec<String>,
    pub conditions: Vec<ConditionSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub id: String,
    pub terms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSpec {
    pub file: String,
    pub study: String,
    pub subject: String,
    pub condition: String,
}

pub const MASK_FILE: &str = "mask.bmap";

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn base_dir(manifest_path: &Path) -> PathBuf {
    manifest_path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Read and validate a corpus from its manifest.
pub fn load_corpus(manifest_path: &Path) -> Result<Corpus> {
    let manifest = Manifest::read(manifest_path)?;
    let dir = base_dir(manifest_path);
    let taxonomy = Taxonomy::new(manifest.taxonomy.clone().into_iter().collect())?;

    let mask_path = dir.join(&manifest.mask_file);
    let mask_bmap = Bmap::read(&mask_path)?;
    if mask_bmap.dims.map(|d| d as usize) != manifest.grid.dims {
        return Err(Error::format(
            "mask file",
            format!("{} dims {:?} differ from manifest grid {:?}", manifest.mask_file, mask_bmap.dims, manifest.grid.dims),
        ));
    }
    let mask = mask_bmap.into_mask(manifest.grid.voxel_size_mm)?;
    let mask_name = Path::new(&manifest.mask_file)
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();

    let studies = manifest
        .studies
        .iter()
        .map(|s| Study {
            id: s.id.clone(),
            laboratory: s.laboratory.clone(),
            subject_ids: s.subjects.clone(),
            conditions: s
                .conditions
                .iter()
                .map(|c| Condition {
                    id: c.id.clone(),
                    terms: c.terms.clone(),
                })
                .collect(),
        })
        .collect();

    let mut entries = Vec::with_capacity(manifest.maps.len());
    for m in &manifest.maps {
        let entity = format!("map {}/{}/{} ({})", m.study, m.subject, m.condition, m.file);
        let bmap = Bmap::read(&dir.join(&m.file))?;
        if bmap.dims.map(|d| d as usize) != manifest.grid.dims {
            return Err(Error::format("map file", format!("{entity}: grid dims differ from manifest")));
        }
        let values: Vec<f64> = match bmap.payload {
            Payload::Masked { mask_name: ref name, ref values } => {
                if *name != mask_name {
                    return Err(Error::DanglingReference {
                        entity,
                        reference: format!("mask `{name}`"),
                    });
                }
                values.iter().map(|&v| f64::from(v)).collect()
            }
            Payload::Volume(ref values) => {
                let full: Vec<f64> = values.iter().map(|&v| f64::from(v)).collect();
                mask.mask_volume(&full)
            }
            Payload::Mask(_) => {
                return Err(Error::format("map file", format!("{entity}: payload is a mask")));
            }
        };
        entries.push(MapEntry {
            study: m.study.clone(),
            subject: m.subject.clone(),
            condition: m.condition.clone(),
            file: Some(m.file.clone()),
            values,
        });
    }
    Corpus::new(taxonomy, mask, studies, entries)
}

/// Manifest describing `corpus`; maps without a recorded file name get one
/// derived from their ids.
pub fn manifest_of(corpus: &Corpus) -> Manifest {
    let grid = corpus.mask().grid();
    Manifest {
        taxonomy: corpus.taxonomy().categories().iter().cloned().collect(),
        grid: GridSpec {
            dims: grid.dims(),
            voxel_size_mm: grid.voxel_size(),
        },
        mask_file: MASK_FILE.into(),
        studies: corpus
            .studies()
            .iter()
            .map(|s| StudySpec {
                id: s.id.clone(),
                laboratory: s.laboratory.clone(),
                subjects: s.subject_ids.clone(),
                conditions: s
                    .conditions
                    .iter()
                    .map(|c| ConditionSpec {
                        id: c.id.clone(),
                        terms: c.terms.clone(),
                    })
                    .collect(),
            })
            .collect(),
        maps: corpus
            .records()
            .iter()
            .map(|r| {
                let s = &corpus.studies()[r.study];
                let subject = &s.subject_ids[r.subject];
                let condition = &s.conditions[r.condition].id;
                MapSpec {
                    file: r
                        .file
                        .clone()
                        .unwrap_or_else(|| format!("maps/{}_{}_{}.bmap", sanitize(&s.id), sanitize(subject), sanitize(condition))),
                    study: s.id.clone(),
                    subject: subject.clone(),
                    condition: condition.clone(),
                }
            })
            .collect(),
    }
}

pub(crate) fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

/// Write manifest, mask and map volumes under `dir`; returns the manifest path.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf> {
    let manifest = manifest_of(corpus);
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Bmap::from_mask(corpus.mask()).write(&dir.join(&manifest.mask_file))?;
    for (i, m) in manifest.maps.iter().enumerate() {
        let path = dir.join(&m.file);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        Bmap::from_masked(corpus.mask(), &manifest.mask_file, corpus.map(i)).write(&path)?;
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Load only the mask named by a manifest.
pub fn load_mask(manifest_path: &Path) -> Result<BrainMask> {
    let manifest = Manifest::read(manifest_path)?;
    Bmap::read(&base_dir(manifest_path).join(&manifest.mask_file))?.into_mask(manifest.grid.voxel_size_mm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::two_study_corpus;

    #[test]
    fn save_load_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = two_study_corpus();
        let path = save_corpus(&corpus, dir.path()).unwrap();
        let back = load_corpus(&path).unwrap();
        assert_eq!(back.n_maps(), corpus.n_maps());
        assert_eq!(back.data(), corpus.data());
        assert_eq!(back.studies(), corpus.studies());

        // saving again reproduces identical bytes
        let dir2 = tempfile::tempdir().unwrap();
        let path2 = save_corpus(&back, dir2.path()).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
        for m in &Manifest::read(&path).unwrap().maps {
            assert_eq!(fs::read(dir.path().join(&m.file)).unwrap(), fs::read(dir2.path().join(&m.file)).unwrap());
        }
    }

    #[test]
    fn minimal_manifest_loads() {
        let dir = tempfile::tempdir().unwrap();
        let mask = crate::corpus::tests::tiny_mask();
        Bmap::from_mask(&mask).write(&dir.path().join("mask.bmap")).unwrap();
        Bmap::from_masked(&mask, "mask.bmap", &[1.0, 2.0, 3.0, 4.0])
            .write(&dir.path().join("m.bmap"))
            .unwrap();
        let text = r#"{
          "taxonomy": {"stimulus modality": ["visual", "auditory"], "instructions": ["attend"]},
          "grid": {"dims": [2, 2, 1], "voxel_size_mm": [3.0, 3.0, 3.0]},
          "mask_file": "mask.bmap",
          "studies": [{"id": "S", "laboratory": "L", "subjects": ["sub1"],
                       "conditions": [{"id": "c", "terms": ["visual", "attend"]}]}],
          "maps": [{"file": "m.bmap", "study": "S", "subject": "sub1", "condition": "c"}]
        }"#;
        let path = dir.path().join("manifest.json");
        fs::write(&path, text).unwrap();
        let corpus = load_corpus(&path).unwrap();
        assert_eq!(corpus.n_maps(), 1);
        assert_eq!(corpus.map(0), &[1.0, 2.0, 3.0, 4.0]);

        fs::write(&path, text.replace("\"attend\"]}]", "\"smell\"]}]")).unwrap();
        let err = load_corpus(&path).unwrap_err();
        assert!(matches!(err, Error::UnknownTerm { ref condition, .. } if condition == "S/c"), "{err}");
    }
}
