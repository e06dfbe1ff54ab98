//! Dataset manifests: JSON lists of case records pointing at volume files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    normalize::zscore_normalize, read_nifti, read_raw, Modality, MultiModalCase, NormRegion,
    SegmentationMask, Volume, VolumeError,
};

/// Maps stored label values to class indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelEncoding(pub BTreeMap<i32, u8>);

impl Default for LabelEncoding {
    /// The common brain-tumor convention: 0 background, 1 necrosis,
    /// 2 edema, 4 enhancing tumor (mapped to class 3).
    fn default() -> Self {
        Self(BTreeMap::from([(0, 0), (1, 1), (2, 2), (4, 3)]))
    }
}

impl LabelEncoding {
    pub fn encode(&self, stored: f32) -> Result<u8, VolumeError> {
        let r = stored.round();
        if (stored - r).abs() > 1e-3 {
            return Err(VolumeError::UnknownLabelValue(stored));
        }
        self.0
            .get(&(r as i32))
            .copied()
            .ok_or(VolumeError::UnknownLabelValue(stored))
    }

    pub fn decode(&self, class: u8) -> Option<i32> {
        self.0.iter().find(|(_, &c)| c == class).map(|(&k, _)| k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub case_id: String,
    pub t1: Option<PathBuf>,
    pub t1gd: Option<PathBuf>,
    pub t2: Option<PathBuf>,
    pub flair: Option<PathBuf>,
    #[serde(default)]
    pub label: Option<PathBuf>,
}

impl CaseEntry {
    fn path(&self, m: Modality) -> Option<&PathBuf> {
        match m {
            Modality::T1 => self.t1.as_ref(),
            Modality::T1Gd => self.t1gd.as_ref(),
            Modality::T2 => self.t2.as_ref(),
            Modality::Flair => self.flair.as_ref(),
        }
    }
}

#[derive(Deserialize)]
struct ManifestFile {
    cases: Vec<CaseEntry>,
    #[serde(default)]
    label_encoding: LabelEncoding,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetManifest {
    pub cases: Vec<CaseEntry>,
    pub label_encoding: LabelEncoding,
    /// Relative paths resolve against this directory.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self, VolumeError> {
        let text = fs::read_to_string(path).map_err(|e| VolumeError::io(path, e))?;
        let mut m = Self::parse(&text)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn parse(text: &str) -> Result<Self, VolumeError> {
        let invalid = |e: serde_json::Error| VolumeError::InvalidManifest(e.to_string());
        // a bare list of cases or an object with `cases`; untagged enums
        // cannot parse the integer keys of the label encoding
        let value: serde_json::Value = serde_json::from_str(text).map_err(invalid)?;
        let (cases, label_encoding) = if value.is_array() {
            (
                serde_json::from_value(value).map_err(invalid)?,
                LabelEncoding::default(),
            )
        } else {
            let f: ManifestFile = serde_json::from_value(value).map_err(invalid)?;
            (f.cases, f.label_encoding)
        };
        let mut seen = std::collections::HashSet::new();
        for c in &cases {
            if !seen.insert(c.case_id.as_str()) {
                return Err(VolumeError::InvalidManifest(format!(
                    "duplicate case id {:?}",
                    c.case_id
                )));
            }
        }
        Ok(Self {
            cases,
            label_encoding,
            base_dir: PathBuf::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), VolumeError> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| VolumeError::InvalidManifest(e.to_string()))?;
        fs::write(path, json).map_err(|e| VolumeError::io(path, e))
    }

    pub fn case_ids(&self) -> impl Iterator<Item = &str> {
        self.cases.iter().map(|c| c.case_id.as_str())
    }

    pub fn entry(&self, case_id: &str) -> Result<&CaseEntry, VolumeError> {
        self.cases
            .iter()
            .find(|c| c.case_id == case_id)
            .ok_or_else(|| VolumeError::UnknownCase(case_id.to_string()))
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

/// Read a `.nii` file or a raw payload with sidecar, by extension.
pub fn read_volume(path: &Path) -> Result<Volume, VolumeError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("nii") => read_nifti(path),
        _ => read_raw(path),
    }
}

/// Load one case, z-score normalizing every modality independently.
pub fn load_case(
    manifest: &DatasetManifest,
    case_id: &str,
    region: NormRegion,
) -> Result<MultiModalCase, VolumeError> {
    let entry = manifest.entry(case_id)?;
    let mut vols = Vec::with_capacity(4);
    for m in Modality::ALL {
        let rel = entry.path(m).ok_or_else(|| VolumeError::MissingModality {
            case: case_id.to_string(),
            modality: m.key().to_string(),
        })?;
        let path = manifest.resolve(rel);
        if !path.exists() {
            return Err(VolumeError::MissingModality {
                case: case_id.to_string(),
                modality: format!("{} ({})", m.key(), path.display()),
            });
        }
        let raw = read_volume(&path)?;
        let norm = zscore_normalize(&raw, region);
        if norm.constant_region {
            log::warn!("{case_id}: {} has a constant normalization region", m.key());
        }
        vols.push(norm.volume.with_name(m.key()));
    }
    let label = match &entry.label {
        None => None,
        Some(rel) => {
            let vol = read_volume(&manifest.resolve(rel))?;
            let labels = vol
                .data()
                .iter()
                .map(|&v| manifest.label_encoding.encode(v))
                .collect::<Result<Vec<_>, _>>()?;
            let mut mask = SegmentationMask::new(vol.dims(), labels)?;
            mask.spacing = vol.spacing();
            Some(mask)
        }
    };
    let vols: [Volume; 4] = vols.try_into().expect("four modalities");
    MultiModalCase::new(case_id, vols, label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::write_raw;

    #[test]
    fn encoding_maps_four_to_three() {
        let e = LabelEncoding::default();
        assert_eq!(e.encode(4.0).unwrap(), 3);
        assert_eq!(e.decode(3), Some(4));
        assert!(matches!(
            e.encode(3.0),
            Err(VolumeError::UnknownLabelValue(_))
        ));
        assert!(e.encode(1.5).is_err());
    }

    #[test]
    fn saved_manifest_parses_back() {
        let m = DatasetManifest {
            cases: vec![CaseEntry {
                case_id: "a".into(),
                t1: Some("a/t1.raw".into()),
                t1gd: None,
                t2: None,
                flair: None,
                label: None,
            }],
            label_encoding: LabelEncoding(BTreeMap::from([(0, 0), (7, 3)])),
            base_dir: PathBuf::new(),
        };
        let text = serde_json::to_string(&m).unwrap();
        assert_eq!(DatasetManifest::parse(&text).unwrap(), m);
    }

    #[test]
    fn accepts_bare_list_and_rejects_duplicates() {
        let m =
            DatasetManifest::parse(r#"[{"case_id":"a","t1":"x","t1gd":"x","t2":"x","flair":"x"}]"#)
                .unwrap();
        assert_eq!(m.label_encoding, LabelEncoding::default());
        let dup = r#"[{"case_id":"a","t1":null,"t1gd":null,"t2":null,"flair":null},
                      {"case_id":"a","t1":null,"t1gd":null,"t2":null,"flair":null}]"#;
        assert!(DatasetManifest::parse(dup).is_err());
    }

    #[test]
    fn load_case_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let dims = [3, 2, 1];
        for (i, m) in Modality::ALL.iter().enumerate() {
            let v = Volume::new(
                dims,
                [1.0; 3],
                (0..6).map(|j| (j * (i + 1)) as f32).collect(),
            )
            .unwrap();
            write_raw(&dir.path().join(format!("{}.raw", m.key())), &v).unwrap();
        }
        let label = Volume::new(dims, [1.0; 3], vec![0.0, 1.0, 2.0, 4.0, 4.0, 0.0]).unwrap();
        write_raw(&dir.path().join("seg.raw"), &label).unwrap();
        let text = r#"{"cases":[{"case_id":"c1","t1":"t1.raw","t1gd":"t1gd.raw","t2":"t2.raw",
                       "flair":"flair.raw","label":"seg.raw"},
                      {"case_id":"c2","t1":"t1.raw","t1gd":null,"t2":"t2.raw","flair":"flair.raw"}]}"#;
        fs::write(dir.path().join("m.json"), text).unwrap();
        let m = DatasetManifest::load(&dir.path().join("m.json")).unwrap();
        let case = load_case(&m, "c1", NormRegion::NonzeroOnly).unwrap();
        assert_eq!(case.label.as_ref().unwrap().labels(), &[0, 1, 2, 3, 3, 0]);
        assert_eq!(case.modality(Modality::T1).get(0, 0, 0), 0.0);
        assert!(matches!(
            load_case(&m, "c2", NormRegion::All),
            Err(VolumeError::MissingModality { .. })
        ));
        assert!(matches!(
            load_case(&m, "zz", NormRegion::All),
            Err(VolumeError::UnknownCase(_))
        ));
    }
}
