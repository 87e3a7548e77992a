//! Run configuration: presets, the JSON file schema, flag overrides and
//! validation with field-level diagnostics.
//!
//! A config file is a JSON object; every key is optional and overrides the
//! preset named by `"preset"` (or the empty base when absent):
//!
//! ```json
//! {
//!   "preset": "exp1-desk",
//!   "layers": [{"filters": 8, "kernel": 7, "stride": 3}, {"filters": 1, "kernel": "full"}],
//!   "sigma_sq": 1.0,
//!   "train": {"num_chains": 8, "langevin_steps": 10, "iterations": 200, "epsilon": 0.3,
//!             "learning_rate": 0.01, "init_std": 0.01, "mode": "mle",
//!             "growth": "equal_stages", "lr_scale": "per_position"},
//!   "preprocess": {"size": [64, 64], "color": "gray", "mean": "channel", "standardize": true},
//!   "data_dir": "data", "out_dir": "out", "seed": 0
//! }
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use genconv::{ArchSpec, Growth, GrowthStage, LayerShape, Shape, TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Exp1Desk,
    Exp2Desk,
    Exp3Desk,
    Exp1Paper,
    Exp2Paper,
    Exp3Paper,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Exp1Desk,
        Preset::Exp2Desk,
        Preset::Exp3Desk,
        Preset::Exp1Paper,
        Preset::Exp2Paper,
        Preset::Exp3Paper,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Exp1Desk => "exp1-desk",
            Preset::Exp2Desk => "exp2-desk",
            Preset::Exp3Desk => "exp3-desk",
            Preset::Exp1Paper => "exp1-paper",
            Preset::Exp2Paper => "exp2-paper",
            Preset::Exp3Paper => "exp3-paper",
        }
    }

    pub fn config(self) -> RunConfig {
        let conv = |filters, kernel, stride| LayerEntry {
            filters,
            kernel: Kernel::Size(kernel),
            stride,
        };
        let full = LayerEntry {
            filters: 1,
            kernel: Kernel::Full,
            stride: 1,
        };
        let desk_texture = vec![conv(8, 7, 3), conv(6, 3, 1), conv(4, 3, 1)];
        let paper_texture = vec![conv(100, 15, 3), conv(64, 5, 1), conv(30, 3, 1)];
        let desk_train = TrainSection {
            num_chains: 8,
            langevin_steps: 10,
            iterations: 200,
            epsilon: genconv::sampler::DEFAULT_EPSILON,
            learning_rate: 0.01,
            init_std: 0.01,
            mode: TrainMode::Mle,
            growth: GrowthSpec::EqualStages,
            lr_scale: LrScale::PerPosition,
        };
        let paper_train = TrainSection {
            num_chains: 16,
            langevin_steps: 10,
            iterations: 700,
            growth: GrowthSpec::PerLayer(700),
            lr_scale: LrScale::Uniform,
            ..desk_train.clone()
        };
        let desk_prep = |size, mean| Preprocess {
            size: Some([size, size]),
            color: ColorMode::Gray,
            mean,
            standardize: true,
        };
        let paper_prep = |mean| Preprocess {
            size: Some([224, 224]),
            color: ColorMode::Rgb,
            mean,
            standardize: false,
        };
        let cd = |train: &TrainSection, iterations| TrainSection {
            mode: TrainMode::Cd,
            langevin_steps: 1,
            iterations,
            growth: GrowthSpec::AllAtOnce,
            ..train.clone()
        };
        let (layers, train, preprocess) = match self {
            Preset::Exp1Desk => (desk_texture, desk_train, desk_prep(64, MeanMode::Channel)),
            Preset::Exp2Desk => {
                let layers = vec![conv(8, 7, 2), conv(6, 5, 1), conv(4, 3, 1), full];
                let train = TrainSection {
                    growth: GrowthSpec::AllAtOnce,
                    ..desk_train
                };
                (layers, train, desk_prep(32, MeanMode::Pixel))
            }
            Preset::Exp3Desk => (desk_texture, cd(&desk_train, 300), desk_prep(32, MeanMode::Pixel)),
            Preset::Exp1Paper => (paper_texture, paper_train, paper_prep(MeanMode::Channel)),
            Preset::Exp2Paper => {
                let layers = vec![conv(100, 7, 2), conv(64, 5, 1), conv(20, 3, 1), full];
                let train = TrainSection {
                    iterations: 3 * 700,
                    growth: GrowthSpec::AllAtOnce,
                    ..paper_train
                };
                (layers, train, paper_prep(MeanMode::Pixel))
            }
            Preset::Exp3Paper => (paper_texture, cd(&paper_train, 1200), paper_prep(MeanMode::Pixel)),
        };
        RunConfig {
            preset: Some(self),
            layers,
            sigma_sq: 1.0,
            train,
            preprocess,
            ..RunConfig::default()
        }
    }
}

impl FromStr for Preset {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
            CliError::config("preset", format!("unknown preset `{s}`, expected one of {}", names.join(", ")))
        })
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Kernel extent: square size, or `"full"` to cover the whole input map
/// (a fully connected layer).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    Size(usize),
    Full,
}

impl Serialize for Kernel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Kernel::Size(k) => s.serialize_u64(*k as u64),
            Kernel::Full => s.serialize_str("full"),
        }
    }
}

impl<'de> Deserialize<'de> for Kernel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Size(usize),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Size(k) => Ok(Kernel::Size(k)),
            Raw::Word(w) if w == "full" => Ok(Kernel::Full),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "kernel must be a positive integer or \"full\", got \"{w}\""
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub filters: usize,
    pub kernel: Kernel,
    #[serde(default = "one")]
    pub stride: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthSpec {
    AllAtOnce,
    /// One stage per layer sharing `train.iterations`.
    EqualStages,
    /// One stage per layer, each of this many iterations.
    PerLayer(usize),
    Sequential(Vec<GrowthStage>),
}

/// Per-layer learning-rate multipliers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrScale {
    Uniform,
    /// `1/|D_l|`: layer `l`'s rate divided by its number of map positions.
    PerPosition,
    Explicit(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorMode {
    Gray,
    Rgb,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanMode {
    None,
    /// Per-pixel mean image across the training set.
    Pixel,
    /// One mean per colour channel across all images and pixels.
    Channel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    /// Target `[height, width]`; `None` keeps the files' size.
    pub size: Option<[usize; 2]>,
    pub color: ColorMode,
    pub mean: MeanMode,
    /// Divide mean-subtracted intensities by their pooled standard deviation.
    pub standardize: bool,
}

impl Default for Preprocess {
    fn default() -> Self {
        Preprocess {
            size: None,
            color: ColorMode::Gray,
            mean: MeanMode::Pixel,
            standardize: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub num_chains: usize,
    pub langevin_steps: usize,
    pub iterations: usize,
    pub epsilon: f64,
    pub learning_rate: f64,
    pub init_std: f64,
    pub mode: TrainMode,
    pub growth: GrowthSpec,
    pub lr_scale: LrScale,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            num_chains: d.num_chains,
            langevin_steps: d.langevin_steps,
            iterations: d.iterations,
            epsilon: d.epsilon,
            learning_rate: d.learning_rate,
            init_std: d.init_std,
            mode: d.mode,
            growth: GrowthSpec::AllAtOnce,
            lr_scale: LrScale::Uniform,
        }
    }
}

/// Fully resolved configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Option<Preset>,
    pub layers: Vec<LayerEntry>,
    pub sigma_sq: f64,
    pub train: TrainSection,
    pub preprocess: Preprocess,
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: None,
            layers: Vec::new(),
            sigma_sq: 1.0,
            train: TrainSection::default(),
            preprocess: Preprocess::default(),
            data_dir: None,
            out_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

// File schema: everything optional, unknown keys rejected.

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    preset: Option<Preset>,
    layers: Option<Vec<LayerEntry>>,
    sigma_sq: Option<f64>,
    train: Option<FileTrain>,
    preprocess: Option<FilePreprocess>,
    data_dir: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileTrain {
    num_chains: Option<usize>,
    langevin_steps: Option<usize>,
    iterations: Option<usize>,
    epsilon: Option<f64>,
    learning_rate: Option<f64>,
    init_std: Option<f64>,
    mode: Option<TrainMode>,
    growth: Option<GrowthSpec>,
    lr_scale: Option<LrScale>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FilePreprocess {
    // `Some(None)` is an explicit `null`: keep the files' size.
    #[serde(default, deserialize_with = "explicit_null")]
    size: Option<Option<[usize; 2]>>,
    color: Option<ColorMode>,
    mean: Option<MeanMode>,
    standardize: Option<bool>,
}

fn explicit_null<'de, D, T>(d: D) -> std::result::Result<Option<Option<T>>, D::Error>
where
    D: serde::Deserializer<'de>,
    T: Deserialize<'de>,
{
    Option::<T>::deserialize(d).map(Some)
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub chains: Option<usize>,
}

macro_rules! set {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src {
            $dst = v;
        }
    };
}

impl RunConfig {
    /// Parses JSON text (`origin` names the source in diagnostics) and
    /// applies overrides; the result is fully validated.
    pub fn from_json(text: &str, origin: &Path, overrides: &Overrides) -> Result<RunConfig> {
        let file: FileConfig = serde_json::from_str(text).map_err(|source| CliError::ConfigSyntax {
            path: origin.to_path_buf(),
            source,
        })?;
        Self::resolve(file, overrides)
    }

    pub fn load(path: &Path, overrides: &Overrides) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text, path, overrides)
    }

    /// Configuration from flags alone.
    pub fn from_overrides(overrides: &Overrides) -> Result<RunConfig> {
        Self::resolve(FileConfig::default(), overrides)
    }

    fn resolve(file: FileConfig, o: &Overrides) -> Result<RunConfig> {
        let mut c = match o.preset.or(file.preset) {
            Some(p) => p.config(),
            None => RunConfig::default(),
        };
        set!(c.layers, file.layers);
        set!(c.sigma_sq, file.sigma_sq);
        set!(c.data_dir, file.data_dir.map(Some));
        set!(c.out_dir, file.out_dir);
        set!(c.seed, file.seed);
        if let Some(t) = file.train {
            set!(c.train.num_chains, t.num_chains);
            set!(c.train.langevin_steps, t.langevin_steps);
            set!(c.train.iterations, t.iterations);
            set!(c.train.epsilon, t.epsilon);
            set!(c.train.learning_rate, t.learning_rate);
            set!(c.train.init_std, t.init_std);
            set!(c.train.mode, t.mode);
            set!(c.train.growth, t.growth);
            set!(c.train.lr_scale, t.lr_scale);
        }
        if let Some(p) = file.preprocess {
            set!(c.preprocess.size, p.size);
            set!(c.preprocess.color, p.color);
            set!(c.preprocess.mean, p.mean);
            set!(c.preprocess.standardize, p.standardize);
        }
        set!(c.seed, o.seed);
        set!(c.out_dir, o.out_dir.clone());
        set!(c.data_dir, o.data_dir.clone().map(Some));
        set!(c.train.num_chains, o.chains);
        c.validate()?;
        Ok(c)
    }

    /// Checks everything that does not depend on the input images.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(CliError::config("layers", "at least one layer is required"));
        }
        for (l, e) in self.layers.iter().enumerate() {
            if e.filters == 0 {
                return Err(CliError::config(format!("layers[{l}].filters"), "must be at least 1"));
            }
            if e.kernel == Kernel::Size(0) {
                return Err(CliError::config(format!("layers[{l}].kernel"), "must be at least 1"));
            }
            if e.stride == 0 {
                return Err(CliError::config(format!("layers[{l}].stride"), "must be at least 1"));
            }
        }
        if !(self.sigma_sq > 0.0) || !self.sigma_sq.is_finite() {
            return Err(CliError::config("sigma_sq", "must be positive"));
        }
        if let Some([h, w]) = self.preprocess.size {
            if h == 0 || w == 0 {
                return Err(CliError::config("preprocess.size", "extents must be positive"));
            }
        }
        if self.train.iterations == 0 && matches!(self.train.growth, GrowthSpec::AllAtOnce | GrowthSpec::EqualStages)
        {
            return Err(CliError::config("train.iterations", "must be at least 1"));
        }
        if let GrowthSpec::EqualStages = self.train.growth {
            if self.train.iterations < self.layers.len() {
                return Err(CliError::config(
                    "train.iterations",
                    format!("equal_stages needs at least one iteration per layer ({})", self.layers.len()),
                ));
            }
        }
        if let GrowthSpec::PerLayer(0) = self.train.growth {
            return Err(CliError::config("train.growth", "per_layer iterations must be at least 1"));
        }
        // Everything else in the training block is checked by the core.
        self.train_config(&vec![1; self.layers.len() + 1])
            .validate(self.layers.len())
            .map_err(train_field)?;
        if let Some([h, w]) = self.preprocess.size {
            self.arch(Shape::new(self.channels(), h, w))?;
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        match self.preprocess.color {
            ColorMode::Gray => 1,
            ColorMode::Rgb => 3,
        }
    }

    /// Concrete architecture for an input shape; `"full"` kernels take the
    /// whole incoming map.
    pub fn arch(&self, input: Shape) -> Result<ArchSpec> {
        let mut cur = input;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, e) in self.layers.iter().enumerate() {
            let (kh, kw) = match e.kernel {
                Kernel::Size(k) => (k, k),
                Kernel::Full => (cur.height, cur.width),
            };
            let shape = LayerShape {
                filters: e.filters,
                kernel_height: kh,
                kernel_width: kw,
                stride: e.stride,
            };
            cur = shape.output_shape(cur).ok_or_else(|| {
                CliError::config(
                    format!("layers[{l}].kernel"),
                    format!("{kh}x{kw} kernel does not fit the {}x{} input map", cur.height, cur.width),
                )
            })?;
            layers.push(shape);
        }
        Ok(ArchSpec { input, layers })
    }

    /// Core training configuration; `map_positions[l]` is the number of
    /// spatial positions of layer `l`'s output (entry 0 is the input).
    pub fn train_config(&self, map_positions: &[usize]) -> TrainConfig {
        let t = &self.train;
        let depth = self.layers.len();
        let growth = match &t.growth {
            GrowthSpec::AllAtOnce => Growth::AllAtOnce,
            GrowthSpec::EqualStages => Growth::equal_stages(depth, t.iterations),
            GrowthSpec::PerLayer(n) => Growth::Sequential(
                (1..=depth)
                    .map(|layers| GrowthStage {
                        layers,
                        iterations: *n,
                    })
                    .collect(),
            ),
            GrowthSpec::Sequential(s) => Growth::Sequential(s.clone()),
        };
        let layer_lr_scale = match &t.lr_scale {
            LrScale::Uniform => None,
            LrScale::PerPosition => Some(map_positions[1..].iter().map(|&n| 1.0 / n as f64).collect()),
            LrScale::Explicit(v) => Some(v.clone()),
        };
        TrainConfig {
            num_chains: t.num_chains,
            langevin_steps: t.langevin_steps,
            iterations: t.iterations,
            epsilon: t.epsilon,
            learning_rate: t.learning_rate,
            layer_lr_scale,
            init_std: t.init_std,
            mode: t.mode,
            growth,
            seed: self.seed,
        }
    }

    /// Total learning iterations across growth stages.
    pub fn total_iterations(&self) -> usize {
        match &self.train.growth {
            GrowthSpec::AllAtOnce | GrowthSpec::EqualStages => self.train.iterations,
            GrowthSpec::PerLayer(n) => n * self.layers.len(),
            GrowthSpec::Sequential(s) => s.iter().map(|st| st.iterations).sum(),
        }
    }
}

fn train_field(e: genconv::Error) -> CliError {
    match e {
        genconv::Error::Parameter { name, reason } => CliError::config(format!("train.{}", rename(name)), reason),
        other => CliError::Core(other),
    }
}

/// Core parameter names that differ in the file schema.
fn rename(name: &str) -> &str {
    match name {
        "layer_lr_scale" => "lr_scale",
        other => other,
    }
}
