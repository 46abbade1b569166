//! Config-driven experiments: dataset setup, training for every algorithm,
//! evaluation, sweeps and on-disk artifacts.
//!
//! Config files are line-oriented `key = value` text with dotted keys
//! (`optimizer.lr = 0.001`) and `#` comments. Unknown keys are errors.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{self, SurfaceProfile};
use crate::baselines::{self, cross_evaluation, cross_evaluation_csv};
use crate::data::{self, ClientView, FederationDataset, GenConfig, SplitView, Task, PIXEL_FEATURES};
use crate::error::{Error, Result};
use crate::fedsm::{
    self, routed_metrics, save_supermodel, selection_frequencies, train_fedsm, train_fedsm_extra, FedsmConfig,
    SuperModel, Variant,
};
use crate::flcore::{
    example_metrics, reports_csv, train_federated, FedAlgo, MetricSummary, RoundReport, Split3, TrainSettings,
};
use crate::losses::LossKind;
use crate::math::ParamVector;
use crate::models::{Activation, ModelSpec};
use crate::optim::{OptimizerConfig, OptimizerKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    Centralized,
    Local,
    FedAvg,
    FedProx,
    Scaffold,
    Fedsm,
    FedsmExtra,
    Apfl,
    FineTune,
}

impl Algo {
    pub const ALL: [Algo; 9] = [
        Algo::Centralized,
        Algo::Local,
        Algo::FedAvg,
        Algo::FedProx,
        Algo::Scaffold,
        Algo::Fedsm,
        Algo::FedsmExtra,
        Algo::Apfl,
        Algo::FineTune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algo::Centralized => "centralized",
            Algo::Local => "local",
            Algo::FedAvg => "fedavg",
            Algo::FedProx => "fedprox",
            Algo::Scaffold => "scaffold",
            Algo::Fedsm => "fedsm",
            Algo::FedsmExtra => "fedsm_extra",
            Algo::Apfl => "apfl",
            Algo::FineTune => "fine_tune",
        }
    }

    pub fn parse(s: &str) -> Option<Algo> {
        let s = match s {
            "ft" => "fine_tune",
            "local_only" => "local",
            other => other,
        };
        Algo::ALL.into_iter().find(|a| a.name() == s)
    }

    pub fn is_super_model(self) -> bool {
        matches!(self, Algo::Fedsm | Algo::FedsmExtra)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossChoice {
    /// Soft Dice for segmentation, cross-entropy for classification, squared
    /// error for quadratic clients.
    Auto,
    SoftDice,
    CrossEntropy,
    Mse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub algo: Algo,
    pub rounds: usize,
    pub extra_rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub repeats: usize,
    pub threads: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub mu_prox: f64,
    pub optimizer: OptimizerConfig,
    pub selector_optimizer: OptimizerConfig,
    pub selector_hidden: Vec<usize>,
    pub selector_batch_size: usize,
    pub train_selector: bool,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub loss: LossChoice,
    pub ft_epochs: usize,
    pub apfl_alpha: f64,
    /// Generator settings; the seed is replaced by each run's seed.
    pub data: GenConfig,
    /// A saved FEDS file used instead of generating data.
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    pub eval_each_round: bool,
    pub wall_clock: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            algo: Algo::Fedsm,
            rounds: crate::flcore::DEFAULT_ROUNDS,
            extra_rounds: fedsm::DEFAULT_EXTRA_ROUNDS,
            local_epochs: crate::flcore::DEFAULT_LOCAL_EPOCHS,
            batch_size: crate::flcore::DEFAULT_BATCH_SIZE,
            repeats: 3,
            threads: 1,
            lambda: fedsm::DEFAULT_LAMBDA,
            gamma: fedsm::DEFAULT_GAMMA,
            mu_prox: crate::flcore::DEFAULT_MU_PROX,
            optimizer: OptimizerConfig::adam(0.03),
            selector_optimizer: FedsmConfig::default_selector_optimizer(),
            selector_hidden: vec![32],
            selector_batch_size: 0,
            train_selector: true,
            hidden: vec![16],
            activation: Activation::Tanh,
            loss: LossChoice::Auto,
            ft_epochs: 5,
            apfl_alpha: 0.5,
            data: GenConfig::default(),
            dataset: None,
            out: PathBuf::from("runs"),
            eval_each_round: true,
            wall_clock: false,
        }
    }
}

/// Every accepted key, in snapshot order.
pub const CONFIG_KEYS: &[&str] = &[
    "seed",
    "algo",
    "rounds",
    "extra_rounds",
    "local_epochs",
    "batch_size",
    "repeats",
    "threads",
    "lambda",
    "gamma",
    "out",
    "eval_each_round",
    "wall_clock",
    "optimizer.kind",
    "optimizer.lr",
    "optimizer.momentum",
    "optimizer.beta1",
    "optimizer.beta2",
    "optimizer.eps",
    "optimizer.mu_prox",
    "optimizer.selector_kind",
    "optimizer.selector_lr",
    "optimizer.selector_momentum",
    "model.hidden",
    "model.activation",
    "model.loss",
    "selector.hidden",
    "selector.batch_size",
    "selector.train",
    "personalization.ft_epochs",
    "personalization.apfl_alpha",
    "data.path",
    "data.task",
    "data.similarity",
    "data.sizes",
    "data.side",
    "data.classes",
    "data.feature_dim",
    "data.quad_dim",
    "data.quad_noise",
    "data.quad_spread",
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{v}` as a number")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{v}`"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

fn parse_kind(key: &str, v: &str) -> Result<OptimizerKind> {
    match v {
        "adam" => Ok(OptimizerKind::Adam),
        "sgd" | "sgd_momentum" => Ok(OptimizerKind::SgdMomentum),
        _ => Err(Error::config(key, format!("unknown optimizer `{v}` (adam, sgd)"))),
    }
}

fn kind_name(k: OptimizerKind) -> &'static str {
    match k {
        OptimizerKind::Adam => "adam",
        OptimizerKind::SgdMomentum => "sgd",
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "algo" => {
                self.algo = Algo::parse(v).ok_or_else(|| {
                    let names: Vec<&str> = Algo::ALL.iter().map(|a| a.name()).collect();
                    Error::config(key, format!("unknown algorithm `{v}` (one of {})", names.join(", ")))
                })?
            }
            "rounds" => self.rounds = parse_num(key, v)?,
            "extra_rounds" => self.extra_rounds = parse_num(key, v)?,
            "local_epochs" => self.local_epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "repeats" => self.repeats = parse_num(key, v)?,
            "threads" => self.threads = parse_num(key, v)?,
            "lambda" => self.lambda = parse_num(key, v)?,
            "gamma" => self.gamma = parse_num(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "eval_each_round" => self.eval_each_round = parse_bool(key, v)?,
            "wall_clock" => self.wall_clock = parse_bool(key, v)?,
            "optimizer.kind" => self.optimizer.kind = parse_kind(key, v)?,
            "optimizer.lr" => self.optimizer.lr = parse_num(key, v)?,
            "optimizer.momentum" => self.optimizer.momentum = parse_num(key, v)?,
            "optimizer.beta1" => self.optimizer.betas.0 = parse_num(key, v)?,
            "optimizer.beta2" => self.optimizer.betas.1 = parse_num(key, v)?,
            "optimizer.eps" => {
                self.optimizer.eps = parse_num(key, v)?;
                self.selector_optimizer.eps = self.optimizer.eps;
            }
            "optimizer.mu_prox" => self.mu_prox = parse_num(key, v)?,
            "optimizer.selector_kind" => self.selector_optimizer.kind = parse_kind(key, v)?,
            "optimizer.selector_lr" => self.selector_optimizer.lr = parse_num(key, v)?,
            "optimizer.selector_momentum" => self.selector_optimizer.momentum = parse_num(key, v)?,
            "model.hidden" => self.hidden = parse_list(key, v)?,
            "model.activation" => {
                self.activation = match v {
                    "tanh" => Activation::Tanh,
                    "relu" => Activation::Relu,
                    _ => return Err(Error::config(key, format!("unknown activation `{v}` (tanh, relu)"))),
                }
            }
            "model.loss" => {
                self.loss = match v {
                    "auto" => LossChoice::Auto,
                    "soft_dice" | "dice" => LossChoice::SoftDice,
                    "cross_entropy" => LossChoice::CrossEntropy,
                    "mse" => LossChoice::Mse,
                    _ => return Err(Error::config(key, format!("unknown loss `{v}`"))),
                }
            }
            "selector.hidden" => self.selector_hidden = parse_list(key, v)?,
            "selector.batch_size" => self.selector_batch_size = parse_num(key, v)?,
            "selector.train" => self.train_selector = parse_bool(key, v)?,
            "personalization.ft_epochs" => self.ft_epochs = parse_num(key, v)?,
            "personalization.apfl_alpha" => self.apfl_alpha = parse_num(key, v)?,
            "data.path" => self.dataset = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "data.task" => {
                self.data.task = match v {
                    "segmentation" => Task::Segmentation,
                    "classification" => Task::Classification,
                    "quadratic" => Task::Quadratic,
                    _ => return Err(Error::config(key, format!("unknown task `{v}`"))),
                }
            }
            "data.similarity" => {
                self.data.similarity = match v {
                    "low" => data::LOW_SIMILARITY,
                    "high" => data::HIGH_SIMILARITY,
                    _ => parse_num(key, v)?,
                }
            }
            "data.sizes" => self.data.sizes = parse_list(key, v)?,
            "data.side" => self.data.side = parse_num(key, v)?,
            "data.classes" => self.data.classes = parse_num(key, v)?,
            "data.feature_dim" => self.data.feature_dim = parse_num(key, v)?,
            "data.quad_dim" => self.data.quad_dim = parse_num(key, v)?,
            "data.quad_noise" => self.data.quad_noise = parse_num(key, v)?,
            "data.quad_spread" => self.data.quad_spread = parse_num(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "algo" => self.algo.name().to_string(),
            "rounds" => self.rounds.to_string(),
            "extra_rounds" => self.extra_rounds.to_string(),
            "local_epochs" => self.local_epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "repeats" => self.repeats.to_string(),
            "threads" => self.threads.to_string(),
            "lambda" => self.lambda.to_string(),
            "gamma" => self.gamma.to_string(),
            "out" => self.out.display().to_string(),
            "eval_each_round" => self.eval_each_round.to_string(),
            "wall_clock" => self.wall_clock.to_string(),
            "optimizer.kind" => kind_name(self.optimizer.kind).to_string(),
            "optimizer.lr" => self.optimizer.lr.to_string(),
            "optimizer.momentum" => self.optimizer.momentum.to_string(),
            "optimizer.beta1" => self.optimizer.betas.0.to_string(),
            "optimizer.beta2" => self.optimizer.betas.1.to_string(),
            "optimizer.eps" => self.optimizer.eps.to_string(),
            "optimizer.mu_prox" => self.mu_prox.to_string(),
            "optimizer.selector_kind" => kind_name(self.selector_optimizer.kind).to_string(),
            "optimizer.selector_lr" => self.selector_optimizer.lr.to_string(),
            "optimizer.selector_momentum" => self.selector_optimizer.momentum.to_string(),
            "model.hidden" => join(&self.hidden),
            "model.activation" => match self.activation {
                Activation::Tanh => "tanh".into(),
                Activation::Relu => "relu".into(),
            },
            "model.loss" => match self.loss {
                LossChoice::Auto => "auto".into(),
                LossChoice::SoftDice => "soft_dice".into(),
                LossChoice::CrossEntropy => "cross_entropy".into(),
                LossChoice::Mse => "mse".into(),
            },
            "selector.hidden" => join(&self.selector_hidden),
            "selector.batch_size" => self.selector_batch_size.to_string(),
            "selector.train" => self.train_selector.to_string(),
            "personalization.ft_epochs" => self.ft_epochs.to_string(),
            "personalization.apfl_alpha" => self.apfl_alpha.to_string(),
            "data.path" => self.dataset.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "data.task" => match self.data.task {
                Task::Segmentation => "segmentation".into(),
                Task::Classification => "classification".into(),
                Task::Quadratic => "quadratic".into(),
            },
            "data.similarity" => self.data.similarity.to_string(),
            "data.sizes" => join(&self.data.sizes),
            "data.side" => self.data.side.to_string(),
            "data.classes" => self.data.classes.to_string(),
            "data.feature_dim" => self.data.feature_dim.to_string(),
            "data.quad_dim" => self.data.quad_dim.to_string(),
            "data.quad_noise" => self.data.quad_noise.to_string(),
            "data.quad_spread" => self.data.quad_spread.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", i + 1), format!("expected `key = value`, got `{line}`")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Canonical `key = value` text; parsing it gives back `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in CONFIG_KEYS {
            s.push_str(&format!("{k} = {}\n", self.get(k).unwrap()));
        }
        s
    }

    /// Number of clients the experiment will see.
    pub fn client_count(&self) -> Result<usize> {
        match &self.dataset {
            Some(p) => Ok(data::load_dataset(p)?.k()),
            None => Ok(self.data.sizes.len()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rounds", self.rounds),
            ("local_epochs", self.local_epochs),
            ("repeats", self.repeats),
            ("batch_size", self.batch_size),
            ("threads", self.threads),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::config(k, "must be >= 1"));
            }
        }
        self.optimizer.validate().map_err(|e| Error::config("optimizer", e.to_string()))?;
        self.selector_optimizer
            .validate()
            .map_err(|e| Error::config("optimizer.selector_lr", e.to_string()))?;
        if self.mu_prox < 0.0 {
            return Err(Error::config("optimizer.mu_prox", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config("gamma", format!("must be in [0, 1], got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.apfl_alpha) {
            return Err(Error::config("personalization.apfl_alpha", "must be in [0, 1]"));
        }
        if let Some(p) = &self.dataset {
            if !p.is_file() {
                return Err(Error::config("data.path", format!("{} does not exist", p.display())));
            }
        } else {
            if self.data.sizes.is_empty() {
                return Err(Error::config("data.sizes", "need at least one client"));
            }
            if let Some(n) = self.data.sizes.iter().find(|n| **n < 4) {
                return Err(Error::config("data.sizes", format!("every client needs >= 4 examples, got {n}")));
            }
            if !(0.0..=1.0).contains(&self.data.similarity) {
                return Err(Error::config("data.similarity", "must be in [0, 1]"));
            }
        }
        let k = self.client_count().map_err(|e| Error::config("data.path", e.to_string()))?;
        if self.algo.is_super_model() {
            if k < 2 {
                return Err(Error::config("data.sizes", "the super model needs >= 2 clients"));
            }
            let lo = 1.0 / k as f64;
            if !(self.lambda >= lo - 1e-12 && self.lambda <= 1.0) {
                return Err(Error::config("lambda", format!("must be in [1/K, 1] = [{lo}, 1], got {}", self.lambda)));
            }
        }
        Ok(())
    }

    pub fn loss_kind(&self, task: Task) -> LossKind {
        match (self.loss, task) {
            (LossChoice::SoftDice, _) | (LossChoice::Auto, Task::Segmentation) => LossKind::soft_dice(),
            (LossChoice::CrossEntropy, _) | (LossChoice::Auto, Task::Classification) => LossKind::CrossEntropy,
            (LossChoice::Mse, _) | (LossChoice::Auto, Task::Quadratic) => LossKind::Mse,
        }
    }

    pub fn model_spec(&self, ds: &FederationDataset) -> ModelSpec {
        let cfg = &ds.config;
        let with_hidden = |first: usize, last: usize| {
            let mut w = vec![first];
            w.extend(&self.hidden);
            w.push(last);
            w
        };
        match cfg.task {
            Task::Segmentation => {
                ModelSpec::pixel_segmenter(&with_hidden(PIXEL_FEATURES, 1), self.activation, cfg.side * cfg.side)
            }
            Task::Classification => ModelSpec::mlp_classifier(&with_hidden(cfg.feature_dim, cfg.classes), self.activation),
            Task::Quadratic => ModelSpec::quadratic(cfg.quad_dim),
        }
    }

    pub fn settings(&self, ds: &FederationDataset, seed: u64) -> TrainSettings {
        let mut s = TrainSettings::new(self.model_spec(ds), self.loss_kind(ds.task()), self.optimizer);
        s.batch_size = self.batch_size;
        s.local_epochs = self.local_epochs;
        s.rounds = self.rounds;
        s.seed = seed;
        s.threads = self.threads;
        s.mu_prox = self.mu_prox;
        s.eval_each_round = self.eval_each_round;
        s.wall_clock = self.wall_clock;
        s
    }

    pub fn fedsm_config(&self) -> FedsmConfig {
        let mut c = FedsmConfig::new(self.selector_optimizer);
        c.lambda = self.lambda;
        c.gamma = self.gamma;
        c.selector_hidden = self.selector_hidden.clone();
        c.selector_batch_size = self.selector_batch_size;
        c.train_selector = self.train_selector;
        c.extra_rounds = self.extra_rounds;
        c
    }

    /// The federation for the run with `seed`: the saved file if one is
    /// configured, otherwise freshly generated with that seed.
    pub fn dataset(&self, seed: u64) -> Result<FederationDataset> {
        match &self.dataset {
            Some(p) => data::load_dataset(p),
            None => data::generate(&GenConfig {
                seed,
                ..self.data.clone()
            }),
        }
    }
}

// ---------------------------------------------------------------------------
// Training and evaluation

/// What a run produced.
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug)]
pub enum Trained {
    Shared(ParamVector),
    PerClient(Vec<ParamVector>),
    Super(SuperModel),
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub seed: u64,
    pub settings: TrainSettings,
    pub reports: Vec<RoundReport>,
    pub trained: Trained,
    pub views: Vec<ClientView>,
    /// Model-by-client test metrics for per-client algorithms.
    pub cross_eval: Option<Vec<Vec<f64>>>,
}

/// Trains one repeat of `cfg.algo` with `seed`.
pub fn train_run(cfg: &ExperimentConfig, seed: u64) -> Result<RunOutput> {
    let ds = cfg.dataset(seed)?;
    let views = data::view(&ds)?;
    let settings = cfg.settings(&ds, seed);
    let (reports, trained) = match cfg.algo {
        Algo::Centralized => {
            let (w, reports) = baselines::train_centralized(&settings, &views)?;
            (reports, Trained::Shared(w))
        }
        Algo::Local => {
            let run = baselines::train_local_only(&settings, &views)?;
            (run.reports, Trained::PerClient(run.models))
        }
        Algo::FedAvg | Algo::FedProx | Algo::Scaffold => {
            let algo = match cfg.algo {
                Algo::FedAvg => FedAlgo::FedAvg,
                Algo::FedProx => FedAlgo::FedProx,
                _ => FedAlgo::Scaffold,
            };
            let run = train_federated(&settings, &views, algo, None)?;
            (run.reports, Trained::Shared(run.server.global))
        }
        Algo::Fedsm | Algo::FedsmExtra => {
            let fc = cfg.fedsm_config();
            let run = if cfg.algo == Algo::Fedsm {
                train_fedsm(&settings, &fc, &views)?
            } else {
                train_fedsm_extra(&settings, &fc, &views)?
            };
            (run.reports, Trained::Super(run.model))
        }
        Algo::Apfl => {
            let run = baselines::train_apfl(&settings, &views, cfg.apfl_alpha)?;
            (run.federated.reports, Trained::PerClient(run.personalized))
        }
        Algo::FineTune => {
            let run = baselines::train_fine_tune_all(&settings, &views, cfg.ft_epochs)?;
            (run.federated.reports, Trained::PerClient(run.personalized))
        }
    };
    let cross_eval = match &trained {
        Trained::PerClient(ms) => Some(cross_evaluation(&settings, ms, &views, Split3::Test)?),
        _ => None,
    };
    Ok(RunOutput {
        seed,
        settings,
        reports,
        trained,
        views,
        cross_eval,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub summary: MetricSummary,
    /// Super models only: selection frequency of the global model and each
    /// personalized model, pooled over all clients.
    pub frequencies: Option<Vec<f64>>,
}

pub fn evaluate(trained: &Trained, spec: &ModelSpec, views: &[ClientView], split: Split3) -> Result<Evaluation> {
    let mut chosen_all = Vec::new();
    let per: Vec<Vec<f64>> = views
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let part: &SplitView = split.of(v);
            match trained {
                Trained::Shared(w) => example_metrics(spec, w, &part.batch),
                Trained::PerClient(ms) => example_metrics(spec, &ms[i], &part.batch),
                Trained::Super(sm) => {
                    let (m, chosen) = routed_metrics(sm, part)?;
                    chosen_all.extend(chosen);
                    Ok(m)
                }
            }
        })
        .collect::<Result<_>>()?;
    let frequencies = match trained {
        Trained::Super(sm) => Some(selection_frequencies(&chosen_all, sm.k())),
        _ => None,
    };
    Ok(Evaluation {
        summary: MetricSummary::from_examples(&per),
        frequencies,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub client_avg: f64,
    pub global: f64,
    pub per_client: Vec<f64>,
    pub best_val_client_avg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frequencies: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMetrics {
    pub algo: Algo,
    pub split: String,
    pub mean_client_avg: f64,
    pub mean_global: f64,
    pub runs: Vec<RunMetrics>,
}

impl ExperimentMetrics {
    pub fn from_runs(algo: Algo, runs: Vec<RunMetrics>) -> Self {
        let n = runs.len().max(1) as f64;
        ExperimentMetrics {
            algo,
            split: "test".into(),
            mean_client_avg: runs.iter().map(|r| r.client_avg).sum::<f64>() / n,
            mean_global: runs.iter().map(|r| r.global).sum::<f64>() / n,
            runs,
        }
    }
}

pub fn run_metrics(run: &RunOutput) -> Result<RunMetrics> {
    let ev = evaluate(&run.trained, &run.settings.spec, &run.views, Split3::Test)?;
    let best = run
        .reports
        .last()
        .map(|r| r.best_client_avg)
        .filter(|b| b.is_finite());
    Ok(RunMetrics {
        seed: run.seed,
        client_avg: ev.summary.client_avg,
        global: ev.summary.global,
        per_client: ev.summary.per_client,
        best_val_client_avg: best,
        frequencies: ev.frequencies,
    })
}

// ---------------------------------------------------------------------------
// Artifacts

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(e) => format!("{}.tmp", e.to_string_lossy()),
        None => "tmp".into(),
    });
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Exclusive lock on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::invalid(format!(
                "{} is locked by another experiment (remove {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Fresh `<parent>/<prefix><timestamp>-<seed>` directory name.
fn fresh_dir(parent: &Path, prefix: &str, seed: u64) -> PathBuf {
    let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S");
    let base = parent.join(format!("{prefix}{stamp}-{seed}"));
    let mut candidate = base.clone();
    let mut i = 1;
    while candidate.exists() || candidate.with_extension("partial").exists() {
        candidate = PathBuf::from(format!("{}_{i}", base.display()));
        i += 1;
    }
    candidate
}

/// Runs `body` in `<dir>.partial`, renaming it to `dir` afterwards. A failed
/// body leaves its partial output in `dir` along with a `FAILED` marker.
fn staged<T>(dir: &Path, body: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    let partial = dir.with_extension("partial");
    fs::create_dir_all(&partial)?;
    let res = body(&partial);
    fs::rename(&partial, dir)?;
    if let Err(e) = &res {
        fs::write(dir.join("FAILED"), format!("{e}\n"))?;
    }
    res
}

fn write_run(dir: &Path, run: &RunOutput, metrics: &RunMetrics) -> Result<()> {
    fs::create_dir_all(dir)?;
    let k = run.views.len();
    write_atomic(&dir.join("rounds.csv"), reports_csv(&run.reports, k).as_bytes())?;
    write_atomic(&dir.join("metrics.json"), serde_json::to_string_pretty(metrics)?.as_bytes())?;
    match &run.trained {
        Trained::Super(sm) => save_supermodel(sm, &dir.join("bundle"))?,
        Trained::Shared(w) => write_atomic(&dir.join("global.bin"), &w.to_bytes())?,
        Trained::PerClient(ms) => {
            for (i, w) in ms.iter().enumerate() {
                write_atomic(&dir.join(format!("model_{}.bin", i + 1)), &w.to_bytes())?;
            }
        }
    }
    if let Some(m) = &run.cross_eval {
        write_atomic(&dir.join("cross_eval.csv"), cross_evaluation_csv(m).as_bytes())?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub metrics: ExperimentMetrics,
    pub runs: Vec<RunOutput>,
}

/// Runs `cfg.repeats` repeats with seeds `seed, seed+1, …` and writes
/// everything under `<out>/<algo>/<timestamp>-<seed>/`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let parent = cfg.out.join(cfg.algo.name());
    let _lock = DirLock::acquire(&parent)?;
    let dir = fresh_dir(&parent, "", cfg.seed);
    let (metrics, runs) = staged(&dir, |stage| {
        write_atomic(&stage.join("config.txt"), cfg.to_text().as_bytes())?;
        let mut per = Vec::with_capacity(cfg.repeats);
        let mut runs = Vec::with_capacity(cfg.repeats);
        for i in 0..cfg.repeats {
            let seed = cfg.seed + i as u64;
            log::info!("{} run {}/{} (seed {seed})", cfg.algo.name(), i + 1, cfg.repeats);
            let run = train_run(cfg, seed)?;
            let m = run_metrics(&run)?;
            write_run(&stage.join(format!("run_{}_seed_{seed}", i + 1)), &run, &m)?;
            per.push(m);
            runs.push(run);
        }
        let metrics = ExperimentMetrics::from_runs(cfg.algo, per);
        write_atomic(&stage.join("metrics.json"), serde_json::to_string_pretty(&metrics)?.as_bytes())?;
        Ok((metrics, runs))
    })?;
    Ok(ExperimentOutcome { dir, metrics, runs })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Lambda,
    Gamma,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::Gamma => "gamma",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub client_avg: f64,
    pub global: f64,
    pub per_run_client_avg: Vec<f64>,
}

pub fn sweep_csv(param: SweepParam, rows: &[SweepRow]) -> String {
    let mut s = format!("{},client_avg,global\n", param.name());
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.value, r.client_avg, r.global));
    }
    s
}

/// One run set per value. A γ sweep trains once per repeat and re-routes
/// the same super model at every threshold.
pub fn sweep(cfg: &ExperimentConfig, param: SweepParam, values: &[f64]) -> Result<(PathBuf, Vec<SweepRow>)> {
    if values.is_empty() {
        return Err(Error::config(param.name(), "sweep needs at least one value"));
    }
    if !cfg.algo.is_super_model() {
        return Err(Error::config("algo", format!("a {} sweep needs fedsm or fedsm_extra", param.name())));
    }
    for v in values {
        let mut c = cfg.clone();
        match param {
            SweepParam::Lambda => c.lambda = *v,
            SweepParam::Gamma => c.gamma = *v,
        }
        c.validate()?;
    }
    let parent = cfg.out.join(cfg.algo.name());
    let _lock = DirLock::acquire(&parent)?;
    let dir = fresh_dir(&parent, &format!("sweep-{}-", param.name()), cfg.seed);
    let rows = staged(&dir, |stage| {
        write_atomic(&stage.join("config.txt"), cfg.to_text().as_bytes())?;
        let mut per_value: Vec<Vec<RunMetrics>> = vec![Vec::new(); values.len()];
        match param {
            SweepParam::Lambda => {
                for (j, v) in values.iter().enumerate() {
                    let mut c = cfg.clone();
                    c.lambda = *v;
                    for i in 0..cfg.repeats {
                        let seed = cfg.seed + i as u64;
                        let run = train_run(&c, seed)?;
                        let m = run_metrics(&run)?;
                        write_run(&stage.join(format!("lambda_{v}/run_{}_seed_{seed}", i + 1)), &run, &m)?;
                        per_value[j].push(m);
                    }
                }
            }
            SweepParam::Gamma => {
                for i in 0..cfg.repeats {
                    let seed = cfg.seed + i as u64;
                    let mut run = train_run(cfg, seed)?;
                    for (j, v) in values.iter().enumerate() {
                        if let Trained::Super(sm) = &mut run.trained {
                            sm.gamma = *v;
                        }
                        let m = run_metrics(&run)?;
                        write_run(&stage.join(format!("gamma_{v}/run_{}_seed_{seed}", i + 1)), &run, &m)?;
                        per_value[j].push(m);
                    }
                }
            }
        }
        let rows: Vec<SweepRow> = values
            .iter()
            .zip(per_value)
            .map(|(v, runs)| {
                let m = ExperimentMetrics::from_runs(cfg.algo, runs);
                SweepRow {
                    value: *v,
                    client_avg: m.mean_client_avg,
                    global: m.mean_global,
                    per_run_client_avg: m.runs.iter().map(|r| r.client_avg).collect(),
                }
            })
            .collect();
        write_atomic(&stage.join("summary.csv"), sweep_csv(param, &rows).as_bytes())?;
        Ok(rows)
    })?;
    Ok((dir, rows))
}

// ---------------------------------------------------------------------------
// Inference and analysis drivers

/// Routes a dataset split through a saved super model.
pub fn infer_bundle(bundle: &Path, ds: &FederationDataset, gamma: Option<f64>, split: Split3) -> Result<Evaluation> {
    let mut sm = fedsm::load_supermodel(bundle)?;
    if let Some(g) = gamma {
        if sm.variant != Variant::Fedsm {
            log::warn!("gamma is ignored by the extra variant");
        }
        sm.gamma = g;
        sm.validate()?;
    }
    if sm.k() != ds.k() {
        return Err(Error::invalid(format!(
            "bundle has {} personalized models but the dataset has {} clients",
            sm.k(),
            ds.k()
        )));
    }
    let views = data::view(ds)?;
    let spec = sm.spec.clone();
    evaluate(&Trained::Super(sm), &spec, &views, split)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremSummary {
    pub lambdas: Vec<f64>,
    pub tail_avg: Vec<f64>,
    pub monotone: bool,
    pub below_floor_at_one: Option<bool>,
}

/// Records personalized-model traces for every λ and computes the
/// gradient-norm diagnostics. Writes `theorem_trace.csv` and
/// `theorem_summary.json` to `dir`.
pub fn analyze_theorem(cfg: &ExperimentConfig, lambdas: &[f64], floor: f64, dir: &Path) -> Result<TheoremSummary> {
    if lambdas.is_empty() {
        return Err(Error::config("lambda", "need at least one value"));
    }
    let ds = cfg.dataset(cfg.seed)?;
    let views = data::view(&ds)?;
    let settings = cfg.settings(&ds, cfg.seed);
    let mut csv = String::from("lambda,sample,round,grad_sq,running_avg,dispersion\n");
    let mut traces = Vec::new();
    for l in lambdas {
        let mut fc = cfg.fedsm_config();
        fc.lambda = *l;
        fc.record_trace = true;
        fc.train_selector = false;
        let run = train_fedsm(&settings, &fc, &views)?;
        let obj = analysis::ObjectiveF::new(&settings.spec, settings.loss, &views, *l)?;
        let t = analysis::theorem_diagnostics(run.trace.as_ref().unwrap(), &obj, floor, analysis::DEFAULT_TAIL_FRACTION)?;
        for line in analysis::theorem_trace_csv(&t).lines().skip(1) {
            csv.push_str(&format!("{l},{line}\n"));
        }
        traces.push(t);
    }
    let summary = TheoremSummary {
        lambdas: lambdas.to_vec(),
        tail_avg: traces.iter().map(|t| t.tail_avg).collect(),
        monotone: analysis::tail_monotone_in_lambda(&traces),
        below_floor_at_one: traces.iter().find(|t| t.lambda == 1.0).map(|t| t.below_floor),
    };
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join("theorem_trace.csv"), csv.as_bytes())?;
    write_atomic(&dir.join("theorem_summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(summary)
}

/// Trains `cfg.algo` once and probes the loss around the result: the shared
/// model on pooled training data, or each client's model on its own data.
/// Writes `surface.csv` (or `surface_client_<k>.csv`) to `dir`.
pub fn analyze_surface(cfg: &ExperimentConfig, n_dirs: usize, radius: f64, steps: usize, dir: &Path) -> Result<Vec<SurfaceProfile>> {
    let run = train_run(cfg, cfg.seed)?;
    let s = &run.settings;
    fs::create_dir_all(dir)?;
    let probe = |w: &ParamVector, batch| analysis::loss_surface_1d(&s.spec, s.loss, w, batch, n_dirs, radius, steps, cfg.seed);
    let mut out = Vec::new();
    match &run.trained {
        Trained::Shared(w) => {
            let parts: Vec<&SplitView> = run.views.iter().map(|v| &v.train).collect();
            let pooled = SplitView::concat(&parts)?;
            let p = probe(w, &pooled.batch)?;
            write_atomic(&dir.join("surface.csv"), analysis::surface_csv(&p).as_bytes())?;
            out.push(p);
        }
        Trained::PerClient(ms) => {
            for (i, (w, v)) in ms.iter().zip(&run.views).enumerate() {
                let p = probe(w, &v.train.batch)?;
                write_atomic(&dir.join(format!("surface_client_{}.csv", i + 1)), analysis::surface_csv(&p).as_bytes())?;
                out.push(p);
            }
        }
        Trained::Super(sm) => {
            for (i, (w, v)) in sm.personalized.iter().zip(&run.views).enumerate() {
                let p = probe(w, &v.train.batch)?;
                write_atomic(&dir.join(format!("surface_client_{}.csv", i + 1)), analysis::surface_csv(&p).as_bytes())?;
                out.push(p);
            }
        }
    }
    Ok(out)
}

/// Closed forms for the quadratic federation's centers at `cfg.lambda`.
/// Writes `oracle.json` to `dir`.
pub fn analyze_oracle(cfg: &ExperimentConfig, dir: &Path) -> Result<analysis::QuadraticOracle> {
    if cfg.data.task != Task::Quadratic || cfg.dataset.is_some() {
        return Err(Error::config("data.task", "the oracle needs a generated quadratic federation"));
    }
    let centers = data::quadratic_centers(&GenConfig {
        seed: cfg.seed,
        ..cfg.data.clone()
    });
    let o = analysis::quadratic_oracle(&centers, cfg.lambda)?;
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join("oracle.json"), serde_json::to_string_pretty(&o)?.as_bytes())?;
    Ok(o)
}

/// Writes `features.csv` with every training example's selector input.
pub fn analyze_features(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let ds = cfg.dataset(cfg.seed)?;
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join("features.csv"), analysis::features_csv(&data::view(&ds)?).as_bytes())
}

/// Held-out client harness; writes `unseen_<k>.csv` to `dir`.
pub fn run_unseen(cfg: &ExperimentConfig, held_out: usize, gammas: &[f64], dir: &Path) -> Result<analysis::UnseenReport> {
    let ds = cfg.dataset(cfg.seed)?;
    let settings = cfg.settings(&ds, cfg.seed);
    let (report, _) = analysis::unseen_client_harness(&settings, &cfg.fedsm_config(), &ds, held_out, gammas)?;
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join(format!("unseen_{held_out}.csv")), analysis::unseen_csv(&report).as_bytes())?;
    Ok(report)
}
