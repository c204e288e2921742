//! TOML run configuration. Unknown keys are rejected everywhere.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use drawdet::datapipe::style::StyleTransform;
use drawdet::datapipe::{AugmentationPolicy, CorpusSpec, StyleBank, StyleMode, SubsetSize};
use drawdet::detector::DetectorConfig;
use drawdet::pipeline::{Optimizer, TrainConfig};
use drawdet::selfsup::SelfSupConfig;
use drawdet::{Error, Result};
use serde::{Deserialize, Serialize};

/// Environment variable that roots relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "DRAWDET_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageKind {
    Stage1,
    Stage2,
    Stage3,
    Eval,
    GenSynthetic,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::Stage1 => "stage1",
            StageKind::Stage2 => "stage2",
            StageKind::Stage3 => "stage3",
            StageKind::Eval => "eval",
            StageKind::GenSynthetic => "gen-synthetic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Natural images in stage 1, labeled drawings in stage 3.
    Train,
    Unlabeled,
    Dev,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Coco {
        annotations: PathBuf,
        images: PathBuf,
        #[serde(default)]
        exclude_animals: bool,
    },
    /// One split of the procedural corpus described by `RunConfig::corpus`.
    Synthetic { split: String, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "FlatDataset")]
pub struct DatasetConfig {
    pub role: Role,
    #[serde(flatten)]
    pub source: DatasetSource,
}

// Reading goes through this mirror because `flatten` swallows unknown keys.
#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum FlatDataset {
    Coco {
        role: Role,
        annotations: PathBuf,
        images: PathBuf,
        #[serde(default)]
        exclude_animals: bool,
    },
    Synthetic { role: Role, split: String, seed: u64 },
}

impl From<FlatDataset> for DatasetConfig {
    fn from(f: FlatDataset) -> Self {
        match f {
            FlatDataset::Coco { role, annotations, images, exclude_animals } => {
                DatasetConfig { role, source: DatasetSource::Coco { annotations, images, exclude_animals } }
            }
            FlatDataset::Synthetic { role, split, seed } => {
                DatasetConfig { role, source: DatasetSource::Synthetic { split, seed } }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrecomputedStyle {
    pub name: String,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StyleBankSpec {
    pub mode: StyleMode,
    /// Slot names; empty with `mode = "all"` means every procedural slot.
    pub styles: Vec<String>,
    pub precomputed: Vec<PrecomputedStyle>,
    /// Only for `mode = "top_k"`.
    pub k: Option<usize>,
}

impl Default for StyleBankSpec {
    fn default() -> Self {
        StyleBankSpec { mode: StyleMode::None, styles: vec![], precomputed: vec![], k: None }
    }
}

impl StyleBankSpec {
    pub fn build(&self) -> Result<StyleBank> {
        let extra = self
            .precomputed
            .iter()
            .map(|p| StyleTransform::Precomputed { name: p.name.clone(), dir: p.dir.clone() });
        match self.mode {
            StyleMode::None => Ok(StyleBank::none()),
            StyleMode::All if self.styles.is_empty() => {
                let mut bank = StyleBank::all_procedural();
                bank.transforms.extend(extra);
                Ok(bank)
            }
            StyleMode::TopK => {
                let k = self.k.ok_or_else(|| Error::Config("style_bank.k is required for top_k".into()))?;
                let named: Vec<&str> = self.styles.iter().map(String::as_str).collect();
                StyleBank::top_k(&named, k)
            }
            mode => {
                let mut transforms =
                    self.styles.iter().map(|n| StyleTransform::by_name(n)).collect::<Result<Vec<_>>>()?;
                transforms.extend(extra);
                StyleBank::new(transforms, mode)
            }
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn is_default<T: Default + PartialEq>(v: &T) -> bool {
    *v == T::default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<StageKind>,
    #[serde(default = "DetectorConfig::desk")]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub selfsup: SelfSupConfig,
    /// Replaces both the supervised and the student augmentation policy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmentation: Option<AugmentationPolicy>,
    #[serde(default)]
    pub style_bank: StyleBankSpec,
    #[serde(default)]
    pub datasets: Vec<DatasetConfig>,
    /// Starting checkpoint; a fresh initialization when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "is_default")]
    pub subset_n: SubsetSize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<Optimizer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Synthetic corpus layout, for `gen-synthetic` and synthetic datasets.
    #[serde(default)]
    pub corpus: CorpusSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config uses defaults")
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn stage(&self) -> Result<StageKind> {
        self.stage.ok_or_else(|| Error::Config("`stage` is not set".into()))
    }

    pub fn datasets(&self, role: Role) -> impl Iterator<Item = &DatasetConfig> {
        self.datasets.iter().filter(move |d| d.role == role)
    }

    pub fn train_config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            optimizer: self.optimizer.unwrap_or(d.optimizer),
            lr: self.lr.unwrap_or(d.lr),
            beta: self.beta.unwrap_or(d.beta),
            augmentation: self.augmentation.clone().unwrap_or(d.augmentation),
            style_bank: StyleBank::none(),
            ..d
        }
    }

    pub fn selfsup_config(&self) -> SelfSupConfig {
        let mut cfg = self.selfsup.clone();
        if let Some(aug) = &self.augmentation {
            cfg.augmentation = aug.clone();
        }
        if let Some(lr) = self.lr {
            cfg.lr = lr;
        }
        cfg
    }

    /// Checks the fields the stage needs before any work starts.
    pub fn validate(&self) -> Result<()> {
        let stage = self.stage()?;
        self.detector.validate()?;
        self.corpus.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("`seeds` must list at least one seed".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let need = |role: Role| {
            if self.datasets(role).next().is_none() {
                Err(Error::Config(format!("{} needs a dataset with role `{role:?}`", stage.name()).to_lowercase()))
            } else {
                Ok(())
            }
        };
        match stage {
            StageKind::Stage1 => {
                need(Role::Train)?;
                self.train_config().validate()?;
                self.style_bank.build()?;
            }
            StageKind::Stage2 => {
                need(Role::Unlabeled)?;
                self.selfsup_config().validate()?;
            }
            StageKind::Stage3 => {
                need(Role::Train)?;
                need(Role::Test)?;
                self.train_config().validate()?;
            }
            StageKind::Eval => {
                need(Role::Test)?;
                if self.init.is_none() {
                    return Err(Error::Config("eval needs `init`".into()));
                }
            }
            StageKind::GenSynthetic => {}
        }
        Ok(())
    }

    /// `output_dir` (default `runs/<stage>`), rooted at `$DRAWDET_OUTPUT_ROOT`
    /// when relative and the variable is set.
    pub fn resolved_output_dir(&self) -> PathBuf {
        let dir = self
            .output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(self.stage.map_or("run", StageKind::name)));
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
            _ => dir,
        }
    }
}

/// A base configuration swept over the cartesian product of `axes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentGrid {
    pub base: RunConfig,
    /// Dotted config path to the values it takes.
    pub axes: BTreeMap<String, Vec<toml::Value>>,
    #[serde(default = "default_max_points")]
    pub max_points: usize,
}

fn default_max_points() -> usize {
    64
}

impl ExperimentGrid {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn size(&self) -> usize {
        self.axes.values().map(Vec::len).product()
    }

    /// Axis assignments in row-major order (last axis fastest).
    pub fn points(&self) -> Result<Vec<Vec<(String, toml::Value)>>> {
        let n = self.size();
        if n > self.max_points {
            return Err(Error::Config(format!("grid has {n} points, above the limit of {}", self.max_points)));
        }
        if n == 0 {
            return Err(Error::Config("grid has an axis without values".into()));
        }
        let axes: Vec<(&String, &Vec<toml::Value>)> = self.axes.iter().collect();
        Ok((0..n)
            .map(|mut i| {
                let mut point = vec![];
                for (key, values) in axes.iter().rev() {
                    point.push(((*key).clone(), values[i % values.len()].clone()));
                    i /= values.len();
                }
                point.reverse();
                point
            })
            .collect())
    }

    /// The base config with one point's values substituted.
    pub fn config_at(&self, point: &[(String, toml::Value)]) -> Result<RunConfig> {
        let mut doc = toml::Value::try_from(&self.base).map_err(|e| Error::Config(e.to_string()))?;
        for (path, value) in point {
            set_path(&mut doc, path, value.clone())?;
        }
        doc.try_into().map_err(|e: toml::de::Error| Error::Config(format!("grid point {point:?}: {e}")))
    }
}

fn set_path(doc: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let mut parts = path.split('.').peekable();
    let mut cur = doc;
    while let Some(key) = parts.next() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("grid axis `{path}`: `{key}` is not inside a table")))?;
        if parts.peek().is_none() {
            table.insert(key.to_string(), value);
            return Ok(());
        }
        cur = table.entry(key.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Err(Error::Config("empty grid axis path".into()))
}
