use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::losses::{GeomVariant, LossConfig, NceVariant};
use crate::models::ModelConfig;
use crate::synthdata::{DatasetSpec, SceneDistribution, SplitCounts, WeatherDistribution};
use crate::{Error, Result};

/// Flat `key = value` settings. Lines starting with `#` and blank lines are
/// ignored; a key may appear once per file, later overrides replace it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = split_pair(line).ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    n + 1
                ))
            })?;
            if kv.entries.insert(k.clone(), v).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
            }
        }
        Ok(kv)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Apply a `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = split_pair(assignment)
            .ok_or_else(|| Error::Config(format!("expected key=value, got {assignment:?}")))?;
        self.entries.insert(k, v);
        Ok(())
    }

    pub fn insert(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Parse `key` if present.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        self.entries
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::Config(format!("{key} = {v:?}: {e}")))
            })
            .transpose()
    }

    fn update<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: fmt::Display,
    {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Reject keys outside `known`.
    pub fn check_known(&self, known: &BTreeSet<&str>) -> Result<()> {
        match self.entries.keys().find(|k| !known.contains(k.as_str())) {
            Some(k) => Err(Error::Config(format!("unknown key {k}"))),
            None => Ok(()),
        }
    }

    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

fn split_pair(s: &str) -> Option<(String, String)> {
    let (k, v) = s.split_once('=')?;
    let (k, v) = (k.trim(), v.trim());
    (!k.is_empty()).then(|| (k.to_string(), v.to_string()))
}

/// The seven loss configurations of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    M1,
    M2,
    M3,
    M4,
    M5,
    M6,
    M7,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::M1,
        Variant::M2,
        Variant::M3,
        Variant::M4,
        Variant::M5,
        Variant::M6,
        Variant::M7,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::M1 => "M1",
            Variant::M2 => "M2",
            Variant::M3 => "M3",
            Variant::M4 => "M4",
            Variant::M5 => "M5",
            Variant::M6 => "M6",
            Variant::M7 => "M7",
        }
    }

    pub fn losses(self) -> (GeomVariant, NceVariant) {
        use GeomVariant as G;
        use NceVariant as N;
        match self {
            Variant::M1 => (G::None, N::PatchNce),
            Variant::M2 => (G::Ptl, N::PatchNce),
            Variant::M3 => (G::Tps, N::PatchNce),
            Variant::M4 => (G::None, N::MoNceHard),
            Variant::M5 => (G::None, N::SenceMpa),
            Variant::M6 => (G::Tps, N::SenceMiou),
            Variant::M7 => (G::Tps, N::SenceMpa),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}; expected M1..M7")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    /// Phase-1 rate before the boundary, phase-2 rate from it on.
    Step,
    /// Phase-1 rate before the boundary, then linear interpolation that
    /// reaches the phase-2 rate at the final epoch.
    Linear,
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "step" => Ok(LrSchedule::Step),
            "linear" => Ok(LrSchedule::Linear),
            _ => Err(Error::Config(format!(
                "unknown lr_schedule {s:?}; expected step or linear"
            ))),
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LrSchedule::Step => "step",
            LrSchedule::Linear => "linear",
        })
    }
}

struct TapList(Vec<usize>);

impl FromStr for TapList {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|t| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(TapList)
    }
}

/// Every setting of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub model: ModelConfig,
    /// Selected ablation row; when set it fixes `loss.nce_variant` and
    /// `loss.geom_variant`.
    pub variant: Option<Variant>,
    pub manifest: PathBuf,
    pub output_dir: PathBuf,
    pub epochs: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    /// Epoch fraction at which phase 2 starts.
    pub phase_boundary: f64,
    pub lr_schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub crop_size: usize,
    /// Patches per encoder tap, capped by the tap's location count.
    pub num_patches: usize,
    /// Test triples used for the point-to-segment statistic in reports.
    pub eval_triples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let variant = Variant::M7;
        let (geom_variant, nce_variant) = variant.losses();
        Self {
            loss: LossConfig {
                geom_variant,
                nce_variant,
                ..LossConfig::default()
            },
            model: ModelConfig::default(),
            variant: Some(variant),
            manifest: PathBuf::from("data"),
            output_dir: PathBuf::from("runs/default"),
            epochs: 50,
            lr_phase1: 2e-4,
            lr_phase2: 2e-5,
            phase_boundary: 0.5,
            lr_schedule: LrSchedule::Step,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 1,
            crop_size: 64,
            num_patches: 256,
            eval_triples: 64,
            seed: 0,
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "manifest",
    "output_dir",
    "variant",
    "epochs",
    "lr_phase1",
    "lr_phase2",
    "phase_boundary",
    "lr_schedule",
    "beta1",
    "beta2",
    "adam_eps",
    "batch_size",
    "crop_size",
    "num_patches",
    "eval_triples",
    "seed",
    "tau",
    "beta",
    "q",
    "lambda1",
    "lambda2",
    "lambda3",
    "nce",
    "geom",
    "negatives",
    "base_channels",
    "res_blocks",
    "embed_dim",
    "taps",
    "init_std",
];

pub const DATA_KEYS: &[&str] = &[
    "data_dir",
    "train_a",
    "test_a",
    "train_b",
    "test_b",
    "image_size",
    "seed",
];

/// Union of every key any command accepts.
pub fn known_keys() -> BTreeSet<&'static str> {
    TRAIN_KEYS.iter().chain(DATA_KEYS).copied().collect()
}

impl TrainConfig {
    /// Defaults updated with `kv`; rejects unknown keys.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.check_known(&known_keys())?;
        let mut c = Self::default();
        if let Some(v) = kv.get_str("manifest") {
            c.manifest = v.into();
        }
        if let Some(v) = kv.get_str("output_dir") {
            c.output_dir = v.into();
        }
        kv.update("epochs", &mut c.epochs)?;
        kv.update("lr_phase1", &mut c.lr_phase1)?;
        kv.update("lr_phase2", &mut c.lr_phase2)?;
        kv.update("phase_boundary", &mut c.phase_boundary)?;
        kv.update("lr_schedule", &mut c.lr_schedule)?;
        kv.update("beta1", &mut c.beta1)?;
        kv.update("beta2", &mut c.beta2)?;
        kv.update("adam_eps", &mut c.adam_eps)?;
        kv.update("batch_size", &mut c.batch_size)?;
        kv.update("crop_size", &mut c.crop_size)?;
        kv.update("num_patches", &mut c.num_patches)?;
        kv.update("eval_triples", &mut c.eval_triples)?;
        kv.update("seed", &mut c.seed)?;
        kv.update("tau", &mut c.loss.tau)?;
        kv.update("beta", &mut c.loss.beta)?;
        kv.update("q", &mut c.loss.q)?;
        kv.update("lambda1", &mut c.loss.lambda1)?;
        kv.update("lambda2", &mut c.loss.lambda2)?;
        kv.update("lambda3", &mut c.loss.lambda3)?;
        kv.update("negatives", &mut c.loss.negatives)?;
        kv.update("base_channels", &mut c.model.base_channels)?;
        kv.update("res_blocks", &mut c.model.res_blocks)?;
        kv.update("embed_dim", &mut c.model.embed_dim)?;
        kv.update("init_std", &mut c.model.init_std)?;
        if let Some(TapList(t)) = kv.get("taps")? {
            c.model.taps = t;
        }

        let explicit = kv.contains("nce") || kv.contains("geom");
        c.variant = match kv.get_str("variant") {
            Some("none") => None,
            Some(v) => Some(v.parse()?),
            None if explicit => None,
            None => c.variant,
        };
        if explicit && c.variant.is_some() {
            return Err(Error::Config(
                "set either `variant` or `nce`/`geom`, not both".into(),
            ));
        }
        kv.update("nce", &mut c.loss.nce_variant)?;
        kv.update("geom", &mut c.loss.geom_variant)?;
        if let Some(v) = c.variant {
            c.apply_variant(v);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn apply_variant(&mut self, v: Variant) {
        let (geom, nce) = v.losses();
        self.variant = Some(v);
        self.loss.geom_variant = geom;
        self.loss.nce_variant = nce;
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.model.validate()?;
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("lr_phase1", self.lr_phase1)?;
        positive("lr_phase2", self.lr_phase2)?;
        positive("adam_eps", self.adam_eps)?;
        if !(self.phase_boundary > 0.0 && self.phase_boundary < 1.0) {
            return Err(Error::Config(format!(
                "phase_boundary must lie in (0, 1), got {}",
                self.phase_boundary
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.batch_size != 1 {
            return Err(Error::Config(format!(
                "only batch_size = 1 is supported, got {}",
                self.batch_size
            )));
        }
        if self.crop_size == 0 || self.crop_size % 16 != 0 {
            return Err(Error::Config(format!(
                "crop_size must be a positive multiple of 16, got {}",
                self.crop_size
            )));
        }
        if self.num_patches < 2 {
            return Err(Error::Config("num_patches must be at least 2".into()));
        }
        if let Some(v) = self.variant {
            if v.losses() != (self.loss.geom_variant, self.loss.nce_variant) {
                return Err(Error::Config(format!(
                    "loss selection disagrees with variant {v}"
                )));
            }
        }
        Ok(())
    }

    /// Canonical `key = value` form; parsing it reproduces this config.
    pub fn render(&self) -> String {
        let mut kv = KeyValues::default();
        kv.insert("manifest", self.manifest.display());
        kv.insert("output_dir", self.output_dir.display());
        match self.variant {
            Some(v) => kv.insert("variant", v),
            None => {
                kv.insert("variant", "none");
                kv.insert("nce", self.loss.nce_variant.name());
                kv.insert("geom", self.loss.geom_variant.name());
            }
        }
        kv.insert("epochs", self.epochs);
        kv.insert("lr_phase1", self.lr_phase1);
        kv.insert("lr_phase2", self.lr_phase2);
        kv.insert("phase_boundary", self.phase_boundary);
        kv.insert("lr_schedule", self.lr_schedule);
        kv.insert("beta1", self.beta1);
        kv.insert("beta2", self.beta2);
        kv.insert("adam_eps", self.adam_eps);
        kv.insert("batch_size", self.batch_size);
        kv.insert("crop_size", self.crop_size);
        kv.insert("num_patches", self.num_patches);
        kv.insert("eval_triples", self.eval_triples);
        kv.insert("seed", self.seed);
        kv.insert("tau", self.loss.tau);
        kv.insert("beta", self.loss.beta);
        kv.insert("q", self.loss.q);
        kv.insert("lambda1", self.loss.lambda1);
        kv.insert("lambda2", self.loss.lambda2);
        kv.insert("lambda3", self.loss.lambda3);
        kv.insert("negatives", self.loss.negatives.name());
        kv.insert("base_channels", self.model.base_channels);
        kv.insert("res_blocks", self.model.res_blocks);
        kv.insert("embed_dim", self.model.embed_dim);
        let taps: Vec<String> = self.model.taps.iter().map(usize::to_string).collect();
        kv.insert("taps", taps.join(","));
        kv.insert("init_std", self.model.init_std);
        kv.render()
    }
}

/// Settings for synthetic dataset generation.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub data_dir: PathBuf,
    pub counts: SplitCounts,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            counts: SplitCounts {
                train_a: 200,
                test_a: 50,
                train_b: 200,
                test_b: 50,
            },
            image_size: 64,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.check_known(&known_keys())?;
        let mut c = Self::default();
        if let Some(v) = kv.get_str("data_dir") {
            c.data_dir = v.into();
        }
        kv.update("train_a", &mut c.counts.train_a)?;
        kv.update("test_a", &mut c.counts.test_a)?;
        kv.update("train_b", &mut c.counts.train_b)?;
        kv.update("test_b", &mut c.counts.test_b)?;
        kv.update("image_size", &mut c.image_size)?;
        kv.update("seed", &mut c.seed)?;
        if c.image_size == 0 || c.image_size % 16 != 0 {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of 16, got {}",
                c.image_size
            )));
        }
        Ok(c)
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            counts: self.counts,
            height: self.image_size,
            width: self.image_size,
            scenes: SceneDistribution::default(),
            weather: WeatherDistribution::default(),
        }
    }
}
