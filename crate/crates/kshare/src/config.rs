//! Run configuration: a partial TOML file plus command-line overrides,
//! resolved against per-family defaults into a complete [`RunConfig`].

use std::fs;
use std::path::{Path, PathBuf};

use kshare_core::layers::Activation;
use kshare_core::models::Family;
use kshare_core::optim::{OptimConfig, OptimizerKind, Schedule, ScheduleKind};
use kshare_core::{DType, ModelConfig, SharingPreset};
use serde::{Deserialize, Serialize};

use crate::data::{AugmentPolicy, DataConfig, Source};
use crate::error::{Error, Result};

/// Everything needed to reproduce a run. Serialized into every checkpoint
/// and into `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub name: String,
    pub model: ModelConfig,
    pub optimizer: OptimConfig,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub data: DataConfig,
    pub augment: AugmentPolicy,
    pub precision: DType,
    #[serde(skip)]
    pub out_dir: PathBuf,
}

impl RunConfig {
    /// Defaults for a model: ConvMixer trains 200 epochs with AdamW at 0.01
    /// and a cosine schedule; SE-ResNet trains 256 epochs with SGD at 0.1
    /// and step decay. Both use batches of 128 on CIFAR-10.
    pub fn for_model(model: ModelConfig) -> Self {
        let (epochs, optimizer, schedule) = match model.family {
            Family::ConvMixer => (200, OptimConfig::adamw(0.01), Schedule::cosine(0.01, 200)),
            Family::SeResnet => (256, OptimConfig::sgd(0.9, 5e-4), Schedule::multistep(0.1, 256)),
        };
        let source = if model.num_classes == 100 { Source::Cifar100 } else { Source::Cifar10 };
        Self {
            name: default_name(&model),
            model,
            optimizer,
            schedule,
            epochs,
            batch_size: 128,
            seed: 0,
            data: DataConfig {
                source,
                path: None,
                train_size: None,
                test_size: None,
            },
            augment: AugmentPolicy::default(),
            precision: DType::F32,
            out_dir: PathBuf::from("runs"),
        }
    }

    /// A small synthetic run, handy for tests and smoke checks.
    pub fn synthetic(model: ModelConfig, epochs: usize, train_size: usize, test_size: usize) -> Self {
        let mut cfg = Self::for_model(model);
        cfg.data = DataConfig {
            source: Source::Synthetic,
            path: None,
            train_size: Some(train_size),
            test_size: Some(test_size),
        };
        cfg.augment = AugmentPolicy::none();
        cfg.batch_size = 32;
        cfg.set_epochs(epochs);
        cfg
    }

    /// Changes the epoch count and rescales the schedule to match.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.epochs = epochs;
        self.schedule.total_epochs = epochs;
        if self.schedule.kind == ScheduleKind::Multistep {
            self.schedule.milestones = default_milestones(epochs);
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.schedule.base_lr = lr;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        if self.epochs > 0 {
            self.schedule.validate()?;
        }
        if self.schedule.total_epochs != self.epochs {
            return Err(Error::Config(format!(
                "schedule covers {} epochs but the run has {}",
                self.schedule.total_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.augment.validate(self.model.input[0])?;
        if self.data.source != Source::Synthetic && self.model.input != [3, 32, 32] {
            return Err(Error::Config(format!("CIFAR inputs are 3x32x32, model expects {:?}", self.model.input)));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: RunFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        file.resolve()
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(epochs) = o.epochs {
            self.set_epochs(epochs);
        }
        if let Some(bs) = o.batch_size {
            self.batch_size = bs;
        }
        if let Some(lr) = o.lr {
            self.set_lr(lr);
        }
        if let Some(out) = &o.out {
            self.out_dir = out.clone();
        }
        if let Some(p) = o.precision {
            self.precision = p;
        }
        if let Some(path) = &o.data {
            if self.data.source != Source::Synthetic {
                self.data.path = Some(path.clone());
            }
        }
    }
}

fn default_name(model: &ModelConfig) -> String {
    match model.family {
        Family::ConvMixer => format!("convmixer-{}-{}-{}", model.channels[0], model.depth, model.sharing_label()),
        Family::SeResnet => format!("se_resnet-d{}-{}", model.depth, model.sharing_label()),
    }
}

fn default_milestones(epochs: usize) -> Vec<usize> {
    Schedule::multistep(1.0, epochs).milestones
}

/// Command-line settings that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub out: Option<PathBuf>,
    pub precision: Option<DType>,
    pub data: Option<PathBuf>,
}

/// Sharing as written in a config file: a preset name (`"two_kernel"`,
/// `"all_stages"`, `"stage2+stage3"`, `"none"`) or a list of SE-ResNet
/// stages (`["stage3"]`).
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum SharingSpec {
    Named(String),
    Stages(Vec<String>),
}

impl SharingSpec {
    pub fn apply(&self, family: Family, model: &mut ModelConfig) -> Result<()> {
        let stages = |names: &[String]| -> Result<Vec<usize>> {
            names
                .iter()
                .map(|n| {
                    n.strip_prefix("stage")
                        .and_then(|s| s.parse().ok())
                        .filter(|s| (1..=3).contains(s))
                        .ok_or_else(|| Error::Config(format!("unknown stage {n:?}, expected stage1..stage3")))
                })
                .collect()
        };
        match (self, family) {
            (SharingSpec::Named(name), Family::ConvMixer) => {
                model.sharing_preset = parse_preset(name)?;
            }
            (SharingSpec::Named(name), Family::SeResnet) => {
                model.shared_stages = match name.as_str() {
                    "none" => vec![],
                    "all_stages" | "all" => vec![1, 2, 3],
                    other => stages(&other.split('+').map(String::from).collect::<Vec<_>>())?,
                };
            }
            (SharingSpec::Stages(names), Family::SeResnet) => model.shared_stages = stages(names)?,
            (SharingSpec::Stages(_), Family::ConvMixer) => {
                return Err(Error::Config("convmixer sharing is a preset name, not a stage list".into()));
            }
        }
        Ok(())
    }
}

/// Sets the sharing of `model` from a name as accepted in config files.
pub fn apply_sharing(model: &mut ModelConfig, name: &str) -> Result<()> {
    SharingSpec::Named(name.to_string()).apply(model.family, model)
}

pub fn parse_preset(name: &str) -> Result<SharingPreset> {
    Ok(match name {
        "none" | "baseline" => SharingPreset::None,
        "two_kernel" => SharingPreset::TwoKernel,
        "four_kernel" => SharingPreset::FourKernel,
        "eight_kernel" => SharingPreset::EightKernel,
        other => {
            return Err(Error::Config(format!(
                "unknown sharing preset {other:?} (none, two_kernel, four_kernel, eight_kernel)"
            )))
        }
    })
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Channels {
    One(usize),
    Many(Vec<usize>),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub family: Option<Family>,
    pub channels: Option<Channels>,
    pub depth: Option<usize>,
    pub patch_size: Option<usize>,
    pub dw_kernel: Option<usize>,
    pub num_classes: Option<usize>,
    pub sharing: Option<SharingSpec>,
    pub input: Option<[usize; 3]>,
    pub se_ratio: Option<usize>,
    pub activation: Option<Activation>,
    pub conv_bias: Option<bool>,
    pub bn_eps: Option<f64>,
    pub bn_momentum: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub kind: Option<String>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub momentum: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub kind: Option<ScheduleKind>,
    pub milestones: Option<Vec<usize>>,
    pub gamma: Option<f64>,
    pub min_lr: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: Option<Source>,
    pub path: Option<PathBuf>,
    pub train_size: Option<usize>,
    pub test_size: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSection {
    pub crop: Option<bool>,
    pub padding: Option<usize>,
    pub flip: Option<bool>,
    pub flip_prob: Option<f64>,
    pub normalize: Option<bool>,
    pub mean: Option<Vec<f32>>,
    pub std: Option<Vec<f32>>,
}

/// The on-disk form of a run config; every field is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    pub name: Option<String>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub precision: Option<DType>,
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub augment: AugmentSection,
}

impl RunFile {
    pub fn resolve(self) -> Result<RunConfig> {
        let m = self.model;
        let family = m.family.unwrap_or(Family::ConvMixer);
        let depth = m.depth.unwrap_or(match family {
            Family::ConvMixer => 8,
            Family::SeResnet => 2,
        });
        let mut model = match family {
            Family::ConvMixer => ModelConfig::convmixer(256, depth),
            Family::SeResnet => ModelConfig::se_resnet(depth),
        };
        match m.channels {
            Some(Channels::One(c)) => model.channels = vec![c],
            Some(Channels::Many(cs)) => model.channels = cs,
            None => {}
        }
        macro_rules! set {
            ($src:ident . $($f:ident),*) => {$(
                if let Some(v) = $src.$f {
                    model.$f = v;
                }
            )*};
        }
        set!(m.patch_size, dw_kernel, num_classes, input, se_ratio, activation, conv_bias, bn_eps, bn_momentum);
        if let Some(spec) = &m.sharing {
            spec.apply(family, &mut model)?;
        }

        let mut cfg = RunConfig::for_model(model);
        if let Some(name) = self.name {
            cfg.name = name;
        }
        if let Some(kind) = self.optimizer.kind.as_deref() {
            cfg.optimizer = match kind {
                "sgd" => OptimConfig::sgd(0.9, 5e-4),
                "adamw" => OptimConfig::adamw(0.01),
                other => return Err(Error::Config(format!("unknown optimizer {other:?} (sgd, adamw)"))),
            };
        }
        let o = self.optimizer;
        if let Some(wd) = o.weight_decay {
            cfg.optimizer.weight_decay = wd;
        }
        match &mut cfg.optimizer.kind {
            OptimizerKind::Sgd { momentum } => {
                if o.beta1.is_some() || o.beta2.is_some() || o.eps.is_some() {
                    return Err(Error::Config("beta1/beta2/eps apply to adamw only".into()));
                }
                if let Some(v) = o.momentum {
                    *momentum = v;
                }
            }
            OptimizerKind::AdamW { beta1, beta2, eps } => {
                if o.momentum.is_some() {
                    return Err(Error::Config("momentum applies to sgd only".into()));
                }
                *beta1 = o.beta1.unwrap_or(*beta1);
                *beta2 = o.beta2.unwrap_or(*beta2);
                *eps = o.eps.unwrap_or(*eps);
            }
        }
        if let Some(kind) = self.schedule.kind {
            cfg.schedule.kind = kind;
        }
        cfg.set_epochs(self.epochs.unwrap_or(cfg.epochs));
        if let Some(lr) = o.lr {
            cfg.set_lr(lr);
        }
        let s = self.schedule;
        if let Some(ms) = s.milestones {
            cfg.schedule.milestones = ms;
        }
        if let Some(g) = s.gamma {
            cfg.schedule.gamma = g;
        }
        if let Some(v) = s.min_lr {
            cfg.schedule.min_lr = v;
        }

        let d = self.data;
        if let Some(source) = d.source {
            cfg.data.source = source;
        }
        cfg.data.path = d.path;
        cfg.data.train_size = d.train_size;
        cfg.data.test_size = d.test_size;

        let a = self.augment;
        let p = &mut cfg.augment;
        p.crop = a.crop.unwrap_or(p.crop);
        p.padding = a.padding.unwrap_or(p.padding);
        p.flip = a.flip.unwrap_or(p.flip);
        p.flip_prob = a.flip_prob.unwrap_or(p.flip_prob);
        p.normalize = a.normalize.unwrap_or(p.normalize);
        if let Some(v) = a.mean {
            p.mean = v;
        }
        if let Some(v) = a.std {
            p.std = v;
        }

        cfg.batch_size = self.batch_size.unwrap_or(cfg.batch_size);
        cfg.seed = self.seed.unwrap_or(cfg.seed);
        cfg.precision = self.precision.unwrap_or(cfg.precision);
        if let Some(dir) = self.out_dir {
            cfg.out_dir = dir;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
