//! TOML experiment configuration.
//!
//! Keys are checked strictly: an unknown key, a missing required key or an
//! out-of-range value is reported before anything runs. `--set key=value`
//! overrides are applied to the parsed document before it is interpreted,
//! so they go through the same checks.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use fedlalr::baselines::ServerAdamParams;
use fedlalr::harness::{Algorithm, ExperimentConfig, MetricCadence};
use fedlalr::objectives::{ObjectiveSpec, QuadraticSpec, SampleSource, SampleSpec};
use fedlalr::{
    AggregationMode, Execution, HyperParams, IntervalSchedule, Recording, RunConfig, VhatAggregation,
};

use crate::error::CliError;

pub const OUTPUT_DIR_ENV: &str = "FEDLALR_OUTPUT_DIR";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub metric_cadence: CadenceKey,
    #[serde(default)]
    pub enforce_theory_lr: bool,
    #[serde(default)]
    pub execution: ExecutionKey,
    #[serde(default)]
    pub algorithm: AlgorithmKey,
    /// In `sweep`, set each run's rate to `min(√(N/KT), 3ε/(20L))`.
    #[serde(default)]
    pub speedup_lr: bool,
    pub run: RunSection,
    pub schedule: ScheduleSection,
    pub objective: ObjectiveSection,
    #[serde(default)]
    pub fedadam: Option<FedAdamSection>,
    #[serde(default)]
    pub check: CheckSection,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, Copy, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum CadenceKey {
    #[default]
    PerRound,
    PerIteration,
}

#[derive(Debug, Clone, Copy, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionKey {
    #[default]
    Serial,
    Parallel,
}

#[derive(Debug, Clone, Copy, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmKey {
    #[default]
    Fedlalr,
    Fedavg,
    Fedadam,
}

#[derive(Debug, Clone, Copy, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum VhatKey {
    #[default]
    Average,
    Max,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub n_clients: usize,
    /// Clients sampled per round; defaults to all of them.
    #[serde(default)]
    pub participants: Option<usize>,
    pub rounds: usize,
    pub alpha: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub g_inf_clip: Option<f64>,
    #[serde(default = "one")]
    pub lr_decay: f64,
    #[serde(default)]
    pub vhat_aggregation: VhatKey,
    #[serde(default)]
    pub restart_momentum: bool,
    /// Seed for generating the objective; defaults to the run seed.
    #[serde(default)]
    pub problem_seed: Option<u64>,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.99
}
fn default_epsilon() -> f64 {
    0.01
}
fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSection {
    Fixed { k: usize },
    LogAdaptive { k_init: usize, k_alpha: f64 },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default)]
    pub data_file: Option<PathBuf>,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default = "default_features")]
    pub n_features: usize,
    #[serde(default = "default_classes")]
    pub n_classes: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_dirichlet")]
    pub dirichlet_alpha: f64,
    /// Minibatch size; absent means full local batches.
    #[serde(default)]
    pub batch: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            data_file: None,
            n_samples: default_samples(),
            n_features: default_features(),
            n_classes: default_classes(),
            separation: default_separation(),
            dirichlet_alpha: default_dirichlet(),
            batch: None,
        }
    }
}

fn default_samples() -> usize {
    1000
}
fn default_features() -> usize {
    5
}
fn default_classes() -> usize {
    4
}
fn default_separation() -> f64 {
    2.0
}
fn default_dirichlet() -> f64 {
    0.3
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveSection {
    Quadratic {
        dim: usize,
        #[serde(default)]
        sigma: f64,
        #[serde(default)]
        curvature_min: Option<f64>,
        #[serde(default)]
        curvature_max: Option<f64>,
        #[serde(default)]
        shared_curvature: bool,
        #[serde(default)]
        optimum_scale: Option<f64>,
        #[serde(default)]
        optimum_spread: Option<f64>,
        #[serde(default)]
        dense: bool,
    },
    Logistic {
        #[serde(default = "default_l2")]
        l2: f64,
        #[serde(default)]
        data: DataSection,
    },
    Mlp {
        #[serde(default = "default_hidden")]
        hidden: usize,
        #[serde(default)]
        data: DataSection,
    },
}

fn default_l2() -> f64 {
    1e-3
}
fn default_hidden() -> usize {
    8
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedAdamSection {
    #[serde(default = "one")]
    pub server_lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_server_eps")]
    pub epsilon: f64,
}

fn default_server_eps() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckSection {
    #[serde(default = "default_z_tol")]
    pub z_tolerance: f64,
    /// Test hook: corrupt one recorded `v̂` before auditing.
    #[serde(default)]
    pub inject_vhat_fault: bool,
}

impl Default for CheckSection {
    fn default() -> Self {
        Self {
            z_tolerance: default_z_tol(),
            inject_vhat_fault: false,
        }
    }
}

fn default_z_tol() -> f64 {
    1e-8
}

/// Parses `key=value`, reading the value as TOML and falling back to a
/// bare string.
pub fn parse_override(raw: &str) -> Result<(String, toml::Value), CliError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{raw}` is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(CliError::Usage(format!("override `{raw}` has an empty key")));
    }
    Ok((key.to_string(), parse_value(value.trim())))
}

pub fn parse_value(text: &str) -> toml::Value {
    let doc = format!("v = {text}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(text.into())),
        Err(_) => toml::Value::String(text.into()),
    }
}

/// Short names accepted by `--set` and `--vary`.
pub fn resolve_alias(key: &str) -> &str {
    match key {
        "N" => "run.n_clients",
        "T" => "run.rounds",
        "K" => "schedule.k",
        "alpha" => "run.alpha",
        "sigma" => "objective.sigma",
        "seed" => "seeds",
        other => other,
    }
}

pub fn set_path(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let key = resolve_alias(key);
    let value = if key == "seeds" && !value.is_array() {
        toml::Value::Array(vec![value])
    } else {
        value
    };
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split always yields one part");
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("cannot set `{key}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Reads a config file and applies overrides, in order.
pub fn load_document(path: &Path, overrides: &[(String, toml::Value)]) -> Result<toml::Table, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut doc: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::Config(format!("{}: {e}", path.display())))?;
    for (k, v) in overrides {
        set_path(&mut doc, k, v.clone())?;
    }
    Ok(doc)
}

pub fn parse_document(doc: toml::Table, origin: &Path) -> Result<ConfigFile, CliError> {
    let cfg: ConfigFile = doc
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(format!("{}: {}", origin.display(), e.message())))?;
    cfg.validate()?;
    Ok(cfg)
}

impl ConfigFile {
    fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("`seeds` must list at least one seed".into()));
        }
        if self.algorithm != AlgorithmKey::Fedadam && self.fedadam.is_some() {
            return Err(CliError::Config(
                "[fedadam] is only used with algorithm = \"fedadam\"".into(),
            ));
        }
        if !(self.check.z_tolerance > 0.0) {
            return Err(CliError::Config("check.z_tolerance must be positive".into()));
        }
        let exp = self.experiment(self.seeds[0])?;
        exp.run.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if let ObjectiveSpec::Quadratic(q) = &exp.objective {
            q.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        if let Algorithm::FedAdam(p) = exp.algorithm {
            p.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Output directory, with the environment override applied.
    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn schedule(&self) -> IntervalSchedule {
        match self.schedule {
            ScheduleSection::Fixed { k } => IntervalSchedule::Fixed(k),
            ScheduleSection::LogAdaptive { k_init, k_alpha } => {
                IntervalSchedule::LogAdaptive { k_init, k_alpha }
            }
        }
    }

    pub fn objective(&self) -> Result<ObjectiveSpec, CliError> {
        let sample = |d: &DataSection| -> Result<SampleSpec, CliError> {
            let source = match &d.data_file {
                Some(path) => SampleSource::File(path.clone()),
                None => SampleSource::Synthetic {
                    n_samples: d.n_samples,
                    n_features: d.n_features,
                    n_classes: d.n_classes,
                    separation: d.separation,
                },
            };
            if !(d.dirichlet_alpha > 0.0) {
                return Err(CliError::Config(
                    "objective.dirichlet_alpha must be positive".into(),
                ));
            }
            if d.batch == Some(0) {
                return Err(CliError::Config("objective.batch must be at least 1".into()));
            }
            Ok(SampleSpec {
                source,
                dirichlet_alpha: d.dirichlet_alpha,
                batch: d.batch,
            })
        };
        Ok(match &self.objective {
            ObjectiveSection::Quadratic {
                dim,
                sigma,
                curvature_min,
                curvature_max,
                shared_curvature,
                optimum_scale,
                optimum_spread,
                dense,
            } => {
                let d = QuadraticSpec::default();
                ObjectiveSpec::Quadratic(QuadraticSpec {
                    dim: *dim,
                    sigma: *sigma,
                    curvature_min: curvature_min.unwrap_or(d.curvature_min),
                    curvature_max: curvature_max.unwrap_or(d.curvature_max),
                    shared_curvature: *shared_curvature,
                    optimum_scale: optimum_scale.unwrap_or(d.optimum_scale),
                    optimum_spread: optimum_spread.unwrap_or(d.optimum_spread),
                    dense: *dense,
                })
            }
            ObjectiveSection::Logistic { l2, data } => ObjectiveSpec::Logistic {
                data: sample(data)?,
                l2: *l2,
            },
            ObjectiveSection::Mlp { hidden, data } => {
                if !(1..=fedlalr::objectives::mlp::MAX_HIDDEN).contains(hidden) {
                    return Err(CliError::Config(format!(
                        "objective.hidden must be in 1..={}",
                        fedlalr::objectives::mlp::MAX_HIDDEN
                    )));
                }
                ObjectiveSpec::Mlp {
                    data: sample(data)?,
                    hidden: *hidden,
                }
            }
        })
    }

    /// The experiment for one seed.
    pub fn experiment(&self, seed: u64) -> Result<ExperimentConfig, CliError> {
        let r = &self.run;
        let hp = HyperParams {
            alpha: r.alpha,
            beta1: r.beta1,
            beta2: r.beta2,
            epsilon: r.epsilon,
            g_inf_clip: r.g_inf_clip,
        };
        let mut run = RunConfig::new(r.n_clients, r.rounds, hp, self.schedule());
        run.participants = r.participants.unwrap_or(r.n_clients);
        run.mode = AggregationMode {
            vhat: match r.vhat_aggregation {
                VhatKey::Average => VhatAggregation::Average,
                VhatKey::Max => VhatAggregation::Max,
            },
            restart_momentum: r.restart_momentum,
        };
        run.seed = seed;
        run.lr_decay = r.lr_decay;
        run.execution = match self.execution {
            ExecutionKey::Serial => Execution::Serial,
            ExecutionKey::Parallel => Execution::Parallel,
        };
        run.recording = Recording::Summary;
        let algorithm = match self.algorithm {
            AlgorithmKey::Fedlalr => Algorithm::FedLalr,
            AlgorithmKey::Fedavg => Algorithm::FedAvg,
            AlgorithmKey::Fedadam => Algorithm::FedAdam(match &self.fedadam {
                Some(f) => ServerAdamParams {
                    server_lr: f.server_lr,
                    beta1: f.beta1,
                    beta2: f.beta2,
                    epsilon: f.epsilon,
                },
                None => ServerAdamParams::default(),
            }),
        };
        Ok(ExperimentConfig {
            objective: self.objective()?,
            run,
            algorithm,
            cadence: match self.metric_cadence {
                CadenceKey::PerRound => MetricCadence::PerRound,
                CadenceKey::PerIteration => MetricCadence::PerIteration,
            },
            problem_seed: r.problem_seed,
        })
    }
}
