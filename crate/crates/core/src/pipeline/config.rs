use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::AugmentConfig;
use crate::losses::LossKind;
use crate::models::{PatchSpec, UNetConfig};
use crate::optim::{AdamHyper, LookaheadHyper, OptimizerKind};

use super::phantom::PhantomSpec;
use super::PipelineError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Paper,
    Toy,
}

impl FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(Scale::Paper),
            "toy" => Ok(Scale::Toy),
            other => Err(format!(
                "unknown scale preset {other:?} (expected paper or toy)"
            )),
        }
    }
}

/// Model, loss and optimizer of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub model: UNetConfig,
    pub loss: LossKind,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamHyper,
    pub lookahead: LookaheadHyper,
    /// Training samples drawn from each case per epoch.
    pub samples_per_case: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoiConfig {
    /// Binary probabilities strictly above this count as tumor.
    pub threshold: f32,
    /// Voxels added on every side of the detected box.
    pub tolerance: usize,
    /// Crops are padded up to at least these dims.
    pub min_dims: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub scale: Scale,
    pub seed: u64,
    pub binary: StageConfig,
    pub multiclass: StageConfig,
    pub augment: AugmentConfig,
    /// Sliding-window tiling for multiclass inference.
    pub patch: PatchSpec,
    pub roi: RoiConfig,
    /// When false the multiclass network runs on the whole volume and the
    /// binary stage is skipped.
    pub use_roi: bool,
    pub tta: bool,
    pub val_fraction: f64,
    pub phantom: PhantomSpec,
}

/// Named rows of the loss/optimizer comparison.
pub const TABLE_ONE: [(&str, LossKind, OptimizerKind); 7] = [
    ("DL+A", LossKind::Dice, OptimizerKind::Adam),
    ("CE+A", LossKind::CrossEntropy, OptimizerKind::Adam),
    ("DL+CE+A", LossKind::DiceCe, OptimizerKind::Adam),
    ("LC+A", LossKind::LogCoshDice, OptimizerKind::Adam),
    ("LC+R", LossKind::LogCoshDice, OptimizerKind::Ranger),
    ("LC+RA", LossKind::LogCoshDice, OptimizerKind::RAdam),
    (
        "LC+A+LH",
        LossKind::LogCoshDice,
        OptimizerKind::AdamLookahead,
    ),
];

impl PipelineConfig {
    pub fn paper() -> Self {
        let adam = AdamHyper::default();
        let stage = |model: UNetConfig, batch_size| StageConfig {
            model,
            loss: LossKind::LogCoshDice,
            optimizer: OptimizerKind::AdamLookahead,
            epochs: 300,
            batch_size,
            adam,
            lookahead: LookaheadHyper::default(),
            samples_per_case: 1,
        };
        let patch = [48, 48, 128];
        Self {
            scale: Scale::Paper,
            seed: 0,
            binary: stage(UNetConfig::binary_paper(), 2),
            multiclass: stage(UNetConfig::multiclass_paper(), 6),
            augment: AugmentConfig::default(),
            patch: PatchSpec::half_overlap(patch),
            roi: RoiConfig {
                threshold: 0.5,
                tolerance: 12,
                min_dims: patch,
            },
            use_roi: true,
            tta: true,
            val_fraction: 0.2,
            phantom: PhantomSpec::paper(),
        }
    }

    /// Narrow networks and small grids with the same topology.
    pub fn toy() -> Self {
        let mut c = Self::paper();
        c.scale = Scale::Toy;
        c.binary.model = UNetConfig::binary_toy();
        c.multiclass.model = UNetConfig::multiclass_toy();
        for s in [&mut c.binary, &mut c.multiclass] {
            s.epochs = 20;
            s.batch_size = 2;
            s.adam.lr = 2e-3;
        }
        c.multiclass.epochs = 30;
        let patch = c.multiclass.model.input_dims;
        c.patch = PatchSpec::half_overlap(patch);
        c.roi.tolerance = 3;
        c.roi.min_dims = patch;
        c.augment = AugmentConfig {
            enabled: true,
            sigma_range: [4.0, 6.0],
            magnitude: 2.0,
            max_angle_deg: 10.0,
            max_brightness: 0.1,
        };
        c.tta = false;
        c.phantom = PhantomSpec::toy();
        c
    }

    pub fn preset(scale: Scale) -> Self {
        match scale {
            Scale::Paper => Self::paper(),
            Scale::Toy => Self::toy(),
        }
    }

    /// Read a JSON file. Missing keys fall back to the preset named by its
    /// `scale` field (toy when absent).
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let user: Value = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let scale = match user.get("scale") {
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| PipelineError::Config(e.to_string()))?,
            None => Scale::Toy,
        };
        let mut base = serde_json::to_value(Self::preset(scale)).expect("config serializes");
        merge(&mut base, user, "")?;
        Self::from_value(base)
    }

    fn from_value(v: Value) -> Result<Self, PipelineError> {
        let cfg: Self =
            serde_json::from_value(v).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one `key.path=value` override. The value is parsed as JSON
    /// and taken as a plain string when that fails.
    pub fn set(&self, assignment: &str) -> Result<Self, PipelineError> {
        let (key, raw) = assignment.split_once('=').ok_or_else(|| {
            PipelineError::Config(format!("override {assignment:?} is not key=value"))
        })?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut root = serde_json::to_value(self).expect("config serializes");
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| PipelineError::Config(format!("unknown config key {key:?}")))?;
        }
        *slot = value;
        Self::from_value(root)
    }

    pub fn with_overrides<'a>(
        &self,
        sets: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self, PipelineError> {
        sets.into_iter().try_fold(self.clone(), |c, s| c.set(s))
    }

    /// Set the multiclass loss and optimizer from a row name such as
    /// `"LC+A+LH"`.
    pub fn with_row(&self, row: &str) -> Result<Self, PipelineError> {
        let (_, loss, opt) = TABLE_ONE
            .iter()
            .find(|(name, _, _)| name.eq_ignore_ascii_case(row))
            .ok_or_else(|| PipelineError::Config(format!("unknown comparison row {row:?}")))?;
        let mut c = self.clone();
        c.multiclass.loss = *loss;
        c.multiclass.optimizer = *opt;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.binary.model.validate()?;
        self.multiclass.model.validate()?;
        if self.binary.model.classes != 1 {
            return bad("binary stage must have one output channel".into());
        }
        if self.multiclass.model.classes != crate::volume::NUM_CLASSES {
            return bad(format!(
                "multiclass stage must have {} classes",
                crate::volume::NUM_CLASSES
            ));
        }
        for (name, s) in [("binary", &self.binary), ("multiclass", &self.multiclass)] {
            if s.batch_size == 0 || s.samples_per_case == 0 {
                return bad(format!(
                    "{name}: batch_size and samples_per_case must be positive"
                ));
            }
        }
        self.multiclass.model.check_dims(self.patch.patch)?;
        if (0..3).any(|a| self.patch.overlap[a] >= self.patch.patch[a]) {
            return bad("patch overlap must be smaller than the patch".into());
        }
        if (0..3).any(|a| self.roi.min_dims[a] < self.patch.patch[a]) {
            return bad("roi.min_dims must be at least the patch dims".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.roi.threshold) {
            return bad("roi.threshold must lie in [0, 1)".into());
        }
        self.phantom.validate()
    }
}

fn merge(base: &mut Value, user: Value, path: &str) -> Result<(), PipelineError> {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                let here = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None => {
                        return Err(PipelineError::Config(format!(
                            "unknown config key {here:?}"
                        )))
                    }
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        PipelineConfig::paper().validate().unwrap();
        PipelineConfig::toy().validate().unwrap();
        assert_eq!(PipelineConfig::paper().multiclass.batch_size, 6);
        assert_eq!(PipelineConfig::paper().binary.adam.lr, 3e-4);
    }

    #[test]
    fn overrides() {
        let c = PipelineConfig::toy()
            .with_overrides(["multiclass.loss=CE", "seed=9", "roi.tolerance=5"])
            .unwrap();
        assert_eq!(c.multiclass.loss, LossKind::CrossEntropy);
        assert_eq!((c.seed, c.roi.tolerance), (9, 5));
        assert!(PipelineConfig::toy().set("multiclass.loss=XX").is_err());
        assert!(PipelineConfig::toy().set("nope=1").is_err());
        assert!(PipelineConfig::toy().set("seed").is_err());
    }

    #[test]
    fn every_row_maps_to_one_config() {
        let base = PipelineConfig::toy();
        let mut seen = std::collections::HashSet::new();
        for (name, loss, opt) in TABLE_ONE {
            let c = base.with_row(name).unwrap();
            assert_eq!((c.multiclass.loss, c.multiclass.optimizer), (loss, opt));
            assert!(seen.insert((loss, opt)));
            let joined = format!("{}+{}", loss.code(), opt.code());
            assert_eq!(joined, name);
        }
    }

    #[test]
    fn partial_file_merges_over_preset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"seed": 4, "multiclass": {"epochs": 3}}"#).unwrap();
        let c = PipelineConfig::load(&p).unwrap();
        assert_eq!((c.seed, c.multiclass.epochs, c.scale), (4, 3, Scale::Toy));
        std::fs::write(&p, r#"{"multiclass": {"epoch": 3}}"#).unwrap();
        assert!(matches!(
            PipelineConfig::load(&p),
            Err(PipelineError::Config(_))
        ));
    }
}
