//! Flat key-value experiment configs: documented schema, fail-closed
//! parsing (unknown keys are errors), canonical serialization.

use std::collections::BTreeMap;
use std::path::Path;

use synlab_core::classifier::TrainConfig;
use synlab_core::curriculum::Strategy;
use synlab_core::data::DatasetSpec;
use synlab_core::diffusion::{NoiseTrainConfig, Sampler};
use synlab_core::error::{Error, Result};
use synlab_core::eval::{AblationArm, BatteryConfig, Task, ThresholdChoice};
use synlab_core::io::{kv_parse, kv_to_string};
use synlab_core::spectrum::{threshold_preset, GuidanceGrid};

/// How the guidance grid was specified.
#[derive(Debug, Clone, PartialEq)]
pub enum GridChoice {
    Preset(Task),
    Explicit(Vec<f64>),
}

impl GridChoice {
    pub fn resolve(&self) -> Result<GuidanceGrid> {
        match self {
            GridChoice::Preset(task) => Ok(task.default_grid()),
            GridChoice::Explicit(levels) => GuidanceGrid::new(levels.clone()),
        }
    }

    fn render(&self) -> String {
        match self {
            GridChoice::Preset(t) => format!("preset:{}", t.name()),
            GridChoice::Explicit(levels) => levels
                .iter()
                .map(|l| format!("{l}"))
                .collect::<Vec<_>>()
                .join(","),
        }
    }
}

/// Filtering-threshold selection.
#[derive(Debug, Clone, PartialEq)]
pub enum FilterChoice {
    Auto,
    Preset(String),
    Value(f64),
}

impl FilterChoice {
    pub fn resolve(&self) -> Result<ThresholdChoice> {
        match self {
            FilterChoice::Auto => Ok(ThresholdChoice::Auto),
            FilterChoice::Preset(name) => threshold_preset(name)
                .map(ThresholdChoice::Fixed)
                .ok_or_else(|| Error::invalid(format!("unknown threshold preset '{name}'"))),
            FilterChoice::Value(v) => Ok(ThresholdChoice::Fixed(*v)),
        }
    }

    fn render(&self) -> String {
        match self {
            FilterChoice::Auto => "auto".into(),
            FilterChoice::Preset(p) => format!("preset:{p}"),
            FilterChoice::Value(v) => format!("{v}"),
        }
    }
}

/// Fully resolved experiment configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub seed: u64,
    pub out_dir: String,
    pub workers: usize,

    pub num_classes: usize,
    pub head_count: usize,
    pub imbalance_ratio: f64,
    pub corrupt_fraction: f64,
    pub test_per_class: usize,

    pub schedule_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,

    pub diffusion_epochs: usize,
    pub diffusion_batch: usize,
    pub diffusion_lr: f64,
    pub cond_dropout: f64,
    pub diffusion_hidden: usize,

    pub epochs: usize,
    pub curriculum_epochs: usize,
    pub batch_size: usize,
    pub learn_rate: f64,
    pub pretrain_epochs: usize,

    pub guidance_grid: GridChoice,
    pub m_seeds: usize,
    pub text_weight: f64,
    pub sampler: Sampler,
    pub ddim_steps: usize,
    pub h_hard: f64,
    pub h_filter: FilterChoice,

    pub strategy: Strategy,
    pub scale: Option<f64>,
    pub tail_fraction: f64,
    pub probe_fraction: f64,
    pub validation_per_lambda: usize,
    pub rollback_probe: bool,

    pub ablation_arms: String,
    pub ablation_seeds: usize,
}

impl ExperimentConfig {
    /// Task-specific defaults; only `task` and `seed` are mandatory inputs.
    pub fn defaults(task: Task, seed: u64) -> Self {
        let longtail = task == Task::Longtail;
        ExperimentConfig {
            task,
            seed,
            out_dir: String::new(),
            workers: 0,
            num_classes: 10,
            head_count: if longtail { 500 } else { 60 },
            imbalance_ratio: if longtail { 100.0 } else { 1.0 },
            corrupt_fraction: if longtail { 0.0 } else { 0.4 },
            test_per_class: 50,
            schedule_steps: 200,
            beta_min: 1e-4,
            beta_max: 0.02,
            diffusion_epochs: 24,
            diffusion_batch: 32,
            diffusion_lr: 1e-3,
            cond_dropout: 0.1,
            diffusion_hidden: 256,
            epochs: 40,
            curriculum_epochs: 24,
            batch_size: 16,
            learn_rate: 2e-2,
            pretrain_epochs: 5,
            guidance_grid: GridChoice::Preset(task),
            m_seeds: 4,
            text_weight: 3.0,
            sampler: Sampler::Ddim,
            ddim_steps: 20,
            h_hard: 0.5,
            h_filter: FilterChoice::Auto,
            strategy: task.default_strategy(),
            scale: if longtail { Some(3.0) } else { None },
            tail_fraction: 0.136,
            probe_fraction: 0.1,
            validation_per_lambda: 16,
            rollback_probe: false,
            ablation_arms: "default".into(),
            ablation_seeds: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.curriculum_epochs > self.epochs {
            return Err(Error::invalid(
                "curriculum_epochs cannot exceed epochs",
            ));
        }
        if !(0.0..=1.0).contains(&self.h_hard) {
            return Err(Error::invalid("h_hard must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.tail_fraction) || self.tail_fraction == 0.0 {
            return Err(Error::invalid("tail_fraction must lie in (0, 1)"));
        }
        self.guidance_grid.resolve()?;
        self.h_filter.resolve()?;
        if let Strategy::Fixed(l) = self.strategy {
            if self.guidance_grid.resolve()?.index_of(l).is_none() {
                return Err(Error::invalid(format!(
                    "strategy fixed:{l} is not on the guidance grid"
                )));
            }
        }
        self.battery_arms()?;
        Ok(())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        let mut spec = match self.task {
            Task::Longtail => DatasetSpec::longtail(
                self.num_classes,
                self.head_count,
                self.imbalance_ratio,
                self.seed,
            ),
            Task::LowQuality => DatasetSpec::lowquality(
                self.num_classes,
                self.head_count,
                self.corrupt_fraction,
                self.seed,
            ),
        };
        spec.test_per_class = self.test_per_class;
        spec.corrupt_fraction = self.corrupt_fraction;
        spec
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            curriculum_epochs: self.curriculum_epochs,
            batch_size: self.batch_size,
            learn_rate: self.learn_rate,
            seed: self.seed,
        }
    }

    pub fn noise_train_config(&self) -> NoiseTrainConfig {
        NoiseTrainConfig {
            epochs: self.diffusion_epochs,
            batch_size: self.diffusion_batch,
            learn_rate: self.diffusion_lr,
            cond_dropout_p: self.cond_dropout,
            seed: self.seed,
            hidden: self.diffusion_hidden,
        }
    }

    /// Arm list for the `ablate` subcommand.
    pub fn battery_arms(&self) -> Result<Vec<AblationArm>> {
        if self.ablation_arms == "default" {
            let mut arms = vec![
                AblationArm::RealOnly,
                AblationArm::TextOnly,
                AblationArm::AllLevels,
                AblationArm::DiverseToSpecific,
                AblationArm::SpecificToDiverse,
                AblationArm::RandomOrder,
                AblationArm::Adaptive,
            ];
            if self.task == Task::Longtail {
                for s in [1.0, 2.0, 3.0, 4.0, 6.0] {
                    arms.push(AblationArm::SyntheticScale(s));
                }
            }
            return Ok(arms);
        }
        let mut arms = Vec::new();
        for item in self.ablation_arms.split(',') {
            let item = item.trim();
            let arm = match item {
                "real_only" => AblationArm::RealOnly,
                "text_only" => AblationArm::TextOnly,
                "all_levels" => AblationArm::AllLevels,
                "diverse_to_specific" => AblationArm::DiverseToSpecific,
                "specific_to_diverse" => AblationArm::SpecificToDiverse,
                "random" => AblationArm::RandomOrder,
                "adaptive" => AblationArm::Adaptive,
                other => {
                    if let Some(v) = other.strip_prefix("fixed:") {
                        AblationArm::FixedGuidance(parse_f64("ablation_arms", v)?)
                    } else if let Some(v) = other.strip_prefix("threshold:") {
                        AblationArm::FilterThreshold(parse_f64("ablation_arms", v)?)
                    } else if let Some(v) = other.strip_prefix("scale:") {
                        AblationArm::SyntheticScale(parse_f64("ablation_arms", v)?)
                    } else {
                        return Err(Error::invalid(format!("unknown ablation arm '{other}'")));
                    }
                }
            };
            arms.push(arm);
        }
        Ok(arms)
    }

    pub fn battery_config(&self) -> Result<BatteryConfig> {
        let mut battery = BatteryConfig::for_task(self.task, self.dataset_spec(), Vec::new());
        battery.schedule_steps = self.schedule_steps;
        battery.beta_min = self.beta_min;
        battery.beta_max = self.beta_max;
        battery.noise_train = self.noise_train_config();
        battery.pretrain_epochs = self.pretrain_epochs;
        battery.train = self.train_config();
        battery.grid = self.guidance_grid.resolve()?;
        battery.seeds_per_image = self.m_seeds;
        battery.text_weight = self.text_weight;
        battery.h_hard = self.h_hard;
        battery.h_filter = self.h_filter.resolve()?;
        battery.default_scale = self.scale;
        battery.tail_fraction = self.tail_fraction;
        battery.probe_fraction = self.probe_fraction;
        battery.validation_per_lambda = self.validation_per_lambda;
        battery.arms = self.battery_arms()?;
        battery.seeds = (0..self.ablation_seeds)
            .map(|i| synlab_core::rng::derive_seed(self.seed, "battery", &[i as u64]))
            .collect();
        Ok(battery)
    }

    /// Canonical serialization: every key, fixed order.
    pub fn to_kv(&self) -> String {
        let pairs = vec![
            ("task", self.task.name().to_string()),
            ("seed", self.seed.to_string()),
            ("out_dir", self.out_dir.clone()),
            ("workers", self.workers.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("head_count", self.head_count.to_string()),
            ("imbalance_ratio", format!("{}", self.imbalance_ratio)),
            ("corrupt_fraction", format!("{}", self.corrupt_fraction)),
            ("test_per_class", self.test_per_class.to_string()),
            ("schedule_steps", self.schedule_steps.to_string()),
            ("beta_min", format!("{}", self.beta_min)),
            ("beta_max", format!("{}", self.beta_max)),
            ("diffusion_epochs", self.diffusion_epochs.to_string()),
            ("diffusion_batch", self.diffusion_batch.to_string()),
            ("diffusion_lr", format!("{}", self.diffusion_lr)),
            ("cond_dropout", format!("{}", self.cond_dropout)),
            ("diffusion_hidden", self.diffusion_hidden.to_string()),
            ("epochs", self.epochs.to_string()),
            ("curriculum_epochs", self.curriculum_epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learn_rate", format!("{}", self.learn_rate)),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("guidance_grid", self.guidance_grid.render()),
            ("m_seeds", self.m_seeds.to_string()),
            ("text_weight", format!("{}", self.text_weight)),
            ("sampler", self.sampler.name().to_string()),
            ("ddim_steps", self.ddim_steps.to_string()),
            ("h_hard", format!("{}", self.h_hard)),
            ("h_filter", self.h_filter.render()),
            ("strategy", self.strategy.name()),
            (
                "scale",
                self.scale.map_or("none".into(), |s| format!("{s}")),
            ),
            ("tail_fraction", format!("{}", self.tail_fraction)),
            ("probe_fraction", format!("{}", self.probe_fraction)),
            (
                "validation_per_lambda",
                self.validation_per_lambda.to_string(),
            ),
            ("rollback_probe", self.rollback_probe.to_string()),
            ("ablation_arms", self.ablation_arms.clone()),
            ("ablation_seeds", self.ablation_seeds.to_string()),
        ];
        kv_to_string(
            &pairs
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect::<Vec<_>>(),
        )
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse::<f64>()
        .map_err(|_| Error::invalid(format!("key '{key}': expected a number, got '{v}'")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse::<usize>()
        .map_err(|_| Error::invalid(format!("key '{key}': expected a non-negative integer, got '{v}'")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse::<u64>()
        .map_err(|_| Error::invalid(format!("key '{key}': expected an integer, got '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::invalid(format!(
            "key '{key}': expected true or false, got '{v}'"
        ))),
    }
}

fn parse_grid(v: &str) -> Result<GridChoice> {
    if let Some(name) = v.strip_prefix("preset:") {
        return Ok(GridChoice::Preset(Task::parse(name)?));
    }
    let levels: Result<Vec<f64>> = v.split(',').map(|s| parse_f64("guidance_grid", s.trim())).collect();
    Ok(GridChoice::Explicit(levels?))
}

fn parse_filter(v: &str) -> Result<FilterChoice> {
    if v == "auto" {
        return Ok(FilterChoice::Auto);
    }
    if let Some(name) = v.strip_prefix("preset:") {
        if threshold_preset(name).is_none() {
            return Err(Error::invalid(format!("unknown threshold preset '{name}'")));
        }
        return Ok(FilterChoice::Preset(name.to_string()));
    }
    Ok(FilterChoice::Value(parse_f64("h_filter", v)?))
}

/// Parse a config from text. Unknown keys are rejected by name; `task` and
/// `seed` are required; everything else defaults.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let pairs = kv_parse(text)?;
    let mut map: BTreeMap<String, String> = BTreeMap::new();
    for (k, v) in pairs {
        if map.insert(k.clone(), v).is_some() {
            return Err(Error::invalid(format!("duplicate key '{k}'")));
        }
    }
    let task = Task::parse(
        map.remove("task")
            .ok_or_else(|| Error::invalid("missing required key 'task'"))?
            .as_str(),
    )?;
    let seed = parse_u64(
        "seed",
        map.remove("seed")
            .ok_or_else(|| Error::invalid("missing required key 'seed' (wall-clock seeding is not supported)"))?
            .as_str(),
    )?;
    let mut cfg = ExperimentConfig::defaults(task, seed);
    let keys: Vec<String> = map.keys().cloned().collect();
    for key in keys {
        let v = map.remove(&key).unwrap();
        match key.as_str() {
            "out_dir" => cfg.out_dir = v,
            "workers" => cfg.workers = parse_usize(&key, &v)?,
            "num_classes" => cfg.num_classes = parse_usize(&key, &v)?,
            "head_count" => cfg.head_count = parse_usize(&key, &v)?,
            "imbalance_ratio" => cfg.imbalance_ratio = parse_f64(&key, &v)?,
            "corrupt_fraction" => cfg.corrupt_fraction = parse_f64(&key, &v)?,
            "test_per_class" => cfg.test_per_class = parse_usize(&key, &v)?,
            "schedule_steps" => cfg.schedule_steps = parse_usize(&key, &v)?,
            "beta_min" => cfg.beta_min = parse_f64(&key, &v)?,
            "beta_max" => cfg.beta_max = parse_f64(&key, &v)?,
            "diffusion_epochs" => cfg.diffusion_epochs = parse_usize(&key, &v)?,
            "diffusion_batch" => cfg.diffusion_batch = parse_usize(&key, &v)?,
            "diffusion_lr" => cfg.diffusion_lr = parse_f64(&key, &v)?,
            "cond_dropout" => cfg.cond_dropout = parse_f64(&key, &v)?,
            "diffusion_hidden" => cfg.diffusion_hidden = parse_usize(&key, &v)?,
            "epochs" => cfg.epochs = parse_usize(&key, &v)?,
            "curriculum_epochs" => cfg.curriculum_epochs = parse_usize(&key, &v)?,
            "batch_size" => cfg.batch_size = parse_usize(&key, &v)?,
            "learn_rate" => cfg.learn_rate = parse_f64(&key, &v)?,
            "pretrain_epochs" => cfg.pretrain_epochs = parse_usize(&key, &v)?,
            "guidance_grid" => cfg.guidance_grid = parse_grid(&v)?,
            "m_seeds" => cfg.m_seeds = parse_usize(&key, &v)?,
            "text_weight" => cfg.text_weight = parse_f64(&key, &v)?,
            "sampler" => cfg.sampler = Sampler::parse(&v)?,
            "ddim_steps" => cfg.ddim_steps = parse_usize(&key, &v)?,
            "h_hard" => cfg.h_hard = parse_f64(&key, &v)?,
            "h_filter" => cfg.h_filter = parse_filter(&v)?,
            "strategy" => cfg.strategy = Strategy::parse(&v)?,
            "scale" => {
                cfg.scale = if v == "none" {
                    None
                } else {
                    Some(parse_f64(&key, &v)?)
                }
            }
            "tail_fraction" => cfg.tail_fraction = parse_f64(&key, &v)?,
            "probe_fraction" => cfg.probe_fraction = parse_f64(&key, &v)?,
            "validation_per_lambda" => cfg.validation_per_lambda = parse_usize(&key, &v)?,
            "rollback_probe" => cfg.rollback_probe = parse_bool(&key, &v)?,
            "ablation_arms" => cfg.ablation_arms = v,
            "ablation_seeds" => cfg.ablation_seeds = parse_usize(&key, &v)?,
            unknown => {
                return Err(Error::invalid(format!(
                    "unknown config key '{unknown}'"
                )))
            }
        }
    }
    if cfg.out_dir.is_empty() {
        cfg.out_dir = format!("runs/{}-{}", cfg.task.name(), cfg.seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parse a config file. Fail-closed: unknown keys are named in the error.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::invalid(format!("cannot read config {}: {e}", path.display()))
    })?;
    parse_config_str(&text)
}
