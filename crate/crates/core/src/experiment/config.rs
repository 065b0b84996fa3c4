use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackConfig, Distance, LabelMode, Variant};
use crate::error::{Error, Result};
use crate::fedsim::FedConfig;
use crate::masks::MaskInitScheme;
use crate::nn::{build_lenet_lite, build_mlp, ModelSpec};

/// A TOML value that may be a scalar or a list of scalars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Mlp,
    LenetLite,
}

impl Architecture {
    /// TV weight used when `[attack] tv_weight` is unset. The LeNet-lite weight
    /// is 1e-2 per neighbour difference; the TV term sums differences, so it is
    /// divided by the `h (w - 1)` differences along one axis.
    pub fn default_tv_weight(self, image: [usize; 3]) -> f64 {
        match self {
            Architecture::Mlp => 1e-5,
            Architecture::LenetLite => 1e-2 / (image[1] * image[2].saturating_sub(1)).max(1) as f64,
        }
    }
}

/// `[model]`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `mlp` or `lenet_lite`.
    pub architecture: Architecture,
    /// MLP hidden width. Default 64.
    pub hidden_width: usize,
    /// MLP hidden layers. Default 2.
    pub depth: usize,
    /// Dropout rate, or a list of rates to sweep. Default 0.25.
    pub p: OneOrMany<f64>,
    /// Load weights from this checkpoint instead of a seeded initialization.
    pub checkpoint: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Mlp,
            hidden_width: 64,
            depth: 2,
            p: OneOrMany::One(0.25),
            checkpoint: None,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, input_shape: [usize; 3], num_classes: usize, p: f64) -> Result<ModelSpec> {
        match self.architecture {
            Architecture::Mlp => build_mlp(
                input_shape.iter().product(),
                self.hidden_width,
                self.depth,
                num_classes,
                p,
            )?
            .with_input_shape(input_shape),
            Architecture::LenetLite => build_lenet_lite(input_shape, num_classes, p),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Mnist,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Test,
}

/// `[data]`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// `mnist` or `synthetic`. Default `mnist`.
    pub source: DataSource,
    /// MNIST directory; falls back to `GRADLEAK_DATA`, then `data/mnist`.
    pub path: Option<PathBuf>,
    /// Split the victims are drawn from. Default `test`.
    pub split: SplitName,
    /// Number of victim batches. Default 8.
    pub victims: usize,
    /// Images per victim batch. Default 1.
    pub batch_size: usize,
    /// Forbid repeated classes within a batch. Default true.
    pub distinct_labels: bool,
    /// Training images used by `fed-train` (the first N). Default 5000.
    pub train_subset: usize,
    /// Synthetic dataset size, side length and class count.
    pub synthetic_size: usize,
    pub synthetic_side: usize,
    pub synthetic_classes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Mnist,
            path: None,
            split: SplitName::Test,
            victims: 8,
            batch_size: 1,
            distinct_labels: true,
            train_subset: 5000,
            synthetic_size: 1000,
            synthetic_side: 28,
            synthetic_classes: 10,
        }
    }
}

/// `[attack]`: every [`AttackConfig`] field except the seed, with `variant`
/// allowed to list several variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackBlock {
    pub variant: OneOrMany<Variant>,
    /// Unset: see [`Architecture::default_tv_weight`].
    pub tv_weight: Option<f64>,
    pub mask_weight: f64,
    pub mask_init: MaskInitScheme,
    pub lr: f64,
    pub lr_decay: f64,
    pub plateau_window: usize,
    pub loss_floor: f64,
    pub stall_window: usize,
    pub max_iterations: usize,
    pub label_mode: LabelMode,
    pub distance: Distance,
}

impl Default for AttackBlock {
    fn default() -> Self {
        let d = AttackConfig::default();
        Self {
            variant: OneOrMany::One(d.variant),
            tv_weight: None,
            mask_weight: d.mask_weight,
            mask_init: d.mask_init,
            lr: d.lr,
            lr_decay: d.lr_decay,
            plateau_window: d.plateau_window,
            loss_floor: d.loss_floor,
            stall_window: d.stall_window,
            max_iterations: d.max_iterations,
            label_mode: d.label_mode,
            distance: d.distance,
        }
    }
}

impl AttackBlock {
    pub fn config(&self, variant: Variant, architecture: Architecture, image: [usize; 3], seed: u64) -> AttackConfig {
        AttackConfig {
            variant,
            tv_weight: self.tv_weight.unwrap_or_else(|| architecture.default_tv_weight(image)),
            mask_weight: self.mask_weight,
            mask_init: self.mask_init,
            lr: self.lr,
            lr_decay: self.lr_decay,
            plateau_window: self.plateau_window,
            loss_floor: self.loss_floor,
            stall_window: self.stall_window,
            max_iterations: self.max_iterations,
            label_mode: self.label_mode,
            distance: self.distance,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Experiment name; first component of every artifact path. Default `experiment`.
    pub name: String,
    /// Global seed. Default 0.
    pub seed: u64,
    /// Root of all artifacts. Default `runs`.
    pub output_dir: PathBuf,
    /// Worker threads. Default 1.
    pub jobs: usize,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub attack: AttackBlock,
    pub fed: FedConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seed: 0,
            output_dir: PathBuf::from("runs"),
            jobs: 1,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            attack: AttackBlock::default(),
            fed: FedConfig::default(),
        }
    }
}

/// Command-line values that replace config entries when present.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub name: Option<String>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub p: Vec<f64>,
    pub architecture: Option<Architecture>,
    pub checkpoint: Option<PathBuf>,
    pub data_path: Option<PathBuf>,
    pub victims: Option<usize>,
    pub batch_size: Option<usize>,
    pub variant: Vec<Variant>,
    pub max_iterations: Option<usize>,
    pub mask_weight: Option<f64>,
    pub tv_weight: Option<f64>,
    pub mask_init: Option<MaskInitScheme>,
    pub label_mode: Option<LabelMode>,
    pub rounds: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path`, or returns the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml(&text).map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("{}: {m}", p.display())),
                    other => other,
                })
            }
        }
    }

    pub fn apply(mut self, o: &Overrides) -> Result<Self> {
        macro_rules! set {
            ($src:expr => $dst:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        set!(o.name => self.name);
        set!(o.seed => self.seed);
        set!(o.output_dir => self.output_dir);
        set!(o.jobs => self.jobs);
        set!(o.architecture => self.model.architecture);
        set!(o.victims => self.data.victims);
        set!(o.batch_size => self.data.batch_size);
        set!(o.max_iterations => self.attack.max_iterations);
        set!(o.mask_weight => self.attack.mask_weight);
        if o.tv_weight.is_some() {
            self.attack.tv_weight = o.tv_weight;
        }
        set!(o.mask_init => self.attack.mask_init);
        set!(o.label_mode => self.attack.label_mode);
        set!(o.rounds => self.fed.rounds);
        if o.checkpoint.is_some() {
            self.model.checkpoint = o.checkpoint.clone();
        }
        if o.data_path.is_some() {
            self.data.path = o.data_path.clone();
        }
        if !o.p.is_empty() {
            self.model.p = OneOrMany::Many(o.p.clone());
        }
        if !o.variant.is_empty() {
            self.attack.variant = OneOrMany::Many(o.variant.clone());
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!("name '{}' must be a nonempty single path component", self.name));
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1".into());
        }
        let rates = self.model.p.to_vec();
        if rates.is_empty() {
            return bad("model.p lists no dropout rate".into());
        }
        if let Some(p) = rates.iter().find(|p| !(0.0..1.0).contains(*p)) {
            return bad(format!("dropout rate p={p} outside [0, 1)"));
        }
        if self.attack.variant.to_vec().is_empty() {
            return bad("attack.variant lists no variant".into());
        }
        if self.data.victims == 0 || self.data.batch_size == 0 {
            return bad("data.victims and data.batch_size must be positive".into());
        }
        self.attack.config(Variant::Dia, self.model.architecture, [1, 28, 28], 0).validate()?;
        self.fed.validate()
    }

    pub fn rates(&self) -> Vec<f64> {
        self.model.p.to_vec()
    }

    pub fn variants(&self) -> Vec<Variant> {
        self.attack.variant.to_vec()
    }

    /// Dataset directory after the config, `GRADLEAK_DATA`, `data/mnist` fallbacks.
    pub fn data_dir(&self) -> PathBuf {
        self.data.path.clone().unwrap_or_else(crate::data::data_dir)
    }

    /// `<output_dir>/<name>/seed<seed>`
    pub fn seed_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name).join(format!("seed{}", self.seed))
    }

    /// `<seed_dir>/<variant>_p<p>_b<B>`: unique per (name, seed, variant, p, B).
    pub fn attack_dir(&self, variant: Variant, p: f64) -> PathBuf {
        self.seed_dir()
            .join(format!("{}_p{p}_b{}", variant.name(), self.data.batch_size))
    }

    /// `<seed_dir>/fed_p<p>`
    pub fn fed_dir(&self, p: f64) -> PathBuf {
        self.seed_dir().join(format!("fed_p{p}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn parses_scalars_and_lists() {
        let c = ExperimentConfig::from_toml(
            r#"
            name = "sweep"
            seed = 7
            [model]
            p = [0.0, 0.5]
            [attack]
            variant = ["ig_eval", "dia"]
            max_iterations = 100
            mask_init = "normal_fixed"
            "#,
        )
        .unwrap();
        assert_eq!(c.rates(), vec![0.0, 0.5]);
        assert_eq!(c.variants(), vec![Variant::IgEval, Variant::Dia]);
        assert_eq!(c.attack.mask_init, MaskInitScheme::NormalFixed);
        let one = ExperimentConfig::from_toml("[model]\np = 0.75\n[attack]\nvariant = \"wiig\"").unwrap();
        assert_eq!(one.rates(), vec![0.75]);
        assert_eq!(one.variants(), vec![Variant::Wiig]);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(matches!(ExperimentConfig::from_toml("colour = 1"), Err(Error::Config(_))));
        assert!(matches!(
            ExperimentConfig::from_toml("[attack]\nlearning_rate = 0.1"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn invalid_rate_is_a_config_error() {
        assert!(matches!(ExperimentConfig::from_toml("[model]\np = 1.2"), Err(Error::Config(_))));
        let o = Overrides {
            p: vec![1.2],
            ..Overrides::default()
        };
        assert!(matches!(ExperimentConfig::default().apply(&o), Err(Error::Config(_))));
    }

    #[test]
    fn flags_win() {
        let c = ExperimentConfig::from_toml("seed = 3\n[model]\np = 0.5\n[attack]\nvariant = \"ig_eval\"").unwrap();
        let o = Overrides {
            p: vec![0.25],
            variant: vec![Variant::Dia],
            seed: Some(9),
            ..Overrides::default()
        };
        let c = c.apply(&o).unwrap();
        assert_eq!(c.rates(), vec![0.25]);
        assert_eq!(c.variants(), vec![Variant::Dia]);
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn tv_weight_follows_the_architecture_unless_set() {
        let mlp = ExperimentConfig::default();
        let lenet = ExperimentConfig::from_toml("[model]\narchitecture = \"lenet_lite\"").unwrap();
        let at = |c: &ExperimentConfig| c.attack.config(Variant::Dia, c.model.architecture, [1, 28, 28], 0).tv_weight;
        assert_eq!(at(&mlp), 1e-5);
        assert_eq!(at(&lenet), 1e-2 / 756.0);
        let o = Overrides {
            tv_weight: Some(0.0),
            ..Overrides::default()
        };
        assert_eq!(at(&lenet.apply(&o).unwrap()), 0.0);
    }

    #[test]
    fn artifact_dirs_are_distinct() {
        let c = ExperimentConfig::default();
        let mut dirs = std::collections::HashSet::new();
        for v in Variant::ALL {
            for p in [0.0, 0.25, 0.5] {
                assert!(dirs.insert(c.attack_dir(v, p)));
            }
        }
        assert_eq!(
            c.attack_dir(Variant::Dia, 0.25),
            PathBuf::from("runs/experiment/seed0/dia_p0.25_b1")
        );
    }
}
