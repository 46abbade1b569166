//! The super model: a FedAvg global model, per-client personalized models
//! aggregated with SoftPull, and a selector that routes each input to one of
//! them.
//!
//! Two variants are trained here. The base variant trains all three parts
//! jointly; the selector learns to predict an example's source client, and a
//! confidence threshold γ sends uncertain inputs to the global model. The
//! "extra" variant first trains the global and personalized models, then
//! spends additional rounds training a `K+1`-way selector whose label is the
//! candidate with the lowest loss on each training example.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientView, SplitView};
use crate::error::{Error, Result};
use crate::flcore::{
    aggregate_by_size, client_weights, elapsed_ms, example_metrics, tag_client, train_on_schedule, BestTracker,
    ClientState, CommLedger, LocalMode, LocalStats, MetricSummary, RoundReport, TrainSettings,
};
use crate::losses::{argmax, LossKind};
use crate::math::{weighted_mean, Matrix, ParamVector, RngStream};
use crate::models::{self, init_weights, Batch, ModelSpec};
use crate::optim::OptimizerConfig;

pub const DEFAULT_LAMBDA: f64 = 0.7;
pub const DEFAULT_GAMMA: f64 = 0.5;
pub const DEFAULT_EXTRA_ROUNDS: usize = 50;
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Fedsm,
    FedsmExtra,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuperModel {
    pub spec: ModelSpec,
    pub selector_spec: ModelSpec,
    pub global: ParamVector,
    pub personalized: Vec<ParamVector>,
    pub selector: ParamVector,
    pub gamma: f64,
    pub lambda: f64,
    pub variant: Variant,
}

fn check_lambda(k: usize, lambda: f64) -> Result<()> {
    if k < 2 {
        return Err(Error::invalid(format!("SoftPull needs at least two clients, got {k}")));
    }
    let lo = 1.0 / k as f64;
    if !(lambda >= lo - 1e-12 && lambda <= 1.0) {
        return Err(Error::invalid(format!("lambda must be in [1/K, 1] = [{lo}, 1], got {lambda}")));
    }
    Ok(())
}

impl SuperModel {
    pub fn k(&self) -> usize {
        self.personalized.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.selector_spec.validate()?;
        let dim = self.spec.param_count();
        for w in std::iter::once(&self.global).chain(&self.personalized) {
            if w.dim() != dim {
                return Err(Error::DimensionMismatch { left: dim, right: w.dim() });
            }
        }
        if self.selector.dim() != self.selector_spec.param_count() {
            return Err(Error::DimensionMismatch {
                left: self.selector_spec.param_count(),
                right: self.selector.dim(),
            });
        }
        let classes = match self.variant {
            Variant::Fedsm => self.k(),
            Variant::FedsmExtra => self.k() + 1,
        };
        if self.selector_spec.output_dim != classes {
            return Err(Error::invalid(format!(
                "selector has {} outputs, the variant needs {classes}",
                self.selector_spec.output_dim
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("gamma must be in [0, 1], got {}", self.gamma)));
        }
        check_lambda(self.k(), self.lambda)
    }

    /// Weights of routing candidate `idx` (0 = global, k = personalized k).
    pub fn candidate(&self, idx: usize) -> &ParamVector {
        if idx == 0 {
            &self.global
        } else {
            &self.personalized[idx - 1]
        }
    }
}

/// `w_k ← λ·w_k + (1−λ)·mean_{k'≠k} w_{k'}`, all outputs from the inputs.
pub fn softpull(ws: &[ParamVector], lambda: f64) -> Result<Vec<ParamVector>> {
    let k = ws.len();
    check_lambda(k, lambda)?;
    let dim = ws[0].dim();
    if let Some(w) = ws.iter().find(|w| w.dim() != dim) {
        return Err(Error::DimensionMismatch { left: dim, right: w.dim() });
    }
    let kf = k as f64;
    if (lambda * kf - 1.0).abs() <= 1e-15 {
        // Hard averaging: every output is the uniform mean.
        let mean = weighted_mean(ws, &vec![1.0; k])?;
        return Ok(vec![mean; k]);
    }
    let other = (1.0 - lambda) / (kf - 1.0);
    Ok((0..k)
        .map(|i| {
            let mut out = vec![0.0; dim];
            for (j, w) in ws.iter().enumerate() {
                if j != i {
                    for (o, v) in out.iter_mut().zip(w.iter()) {
                        *o += v;
                    }
                }
            }
            for (o, v) in out.iter_mut().zip(ws[i].iter()) {
                *o = lambda * v + other * *o;
            }
            ParamVector::from_vec(out)
        })
        .collect())
}

/// `(Kλ − 1)/(K − 1)`: SoftPull as a blend of each model with the mean of all.
pub fn lambda_prime(k: usize, lambda: f64) -> f64 {
    (k as f64 * lambda - 1.0) / (k as f64 - 1.0)
}

/// Zero-based selector class of a 1-based client id.
pub fn selector_label_fedsm(client_id: usize, k: usize) -> Result<usize> {
    if client_id == 0 || client_id > k {
        return Err(Error::invalid(format!("client {client_id} out of range 1..={k}")));
    }
    Ok(client_id - 1)
}

/// Index of the smallest candidate loss, first one on ties.
pub fn label_from_losses(losses: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in losses.iter().enumerate() {
        if *v < losses[best] {
            best = i;
        }
    }
    best
}

/// Selector labels over `{global, personalized 1..K}` for every example of
/// `batch`: the candidate whose output has the lowest loss against the
/// ground truth.
pub fn selector_labels_extra(
    spec: &ModelSpec,
    loss: LossKind,
    global: &ParamVector,
    personalized: &[ParamVector],
    batch: &Batch,
) -> Result<Vec<usize>> {
    let per: Vec<Vec<f64>> = std::iter::once(global)
        .chain(personalized)
        .map(|w| models::example_losses(spec, w, batch, loss))
        .collect::<Result<_>>()?;
    Ok((0..batch.len())
        .map(|i| label_from_losses(&per.iter().map(|c| c[i]).collect::<Vec<_>>()))
        .collect())
}

fn one_hot_rows(labels: &[usize], classes: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), classes);
    for (i, l) in labels.iter().enumerate() {
        m.row_mut(i)[*l] = 1.0;
    }
    m
}

/// Routing rule of the base variant for one selector output.
pub fn route_fedsm(probs: &[f64], gamma: f64) -> usize {
    let k = argmax(probs);
    if probs[k] > gamma {
        k + 1
    } else {
        0
    }
}

/// Routing rule of the extra variant: plain argmax over `K+1` classes.
pub fn route_extra(probs: &[f64]) -> usize {
    argmax(probs)
}

/// Chosen candidate per selector input row.
pub fn route(sm: &SuperModel, selector_inputs: &Matrix) -> Result<Vec<usize>> {
    let probs = models::forward(&sm.selector_spec, &sm.selector, selector_inputs)?;
    Ok((0..probs.rows())
        .map(|i| match sm.variant {
            Variant::Fedsm => route_fedsm(probs.row(i), sm.gamma),
            Variant::FedsmExtra => route_extra(probs.row(i)),
        })
        .collect())
}

fn single_row(v: &[f64]) -> Result<Matrix> {
    Matrix::from_vec(1, v.len(), v.to_vec())
}

/// Prediction for one example and the chosen candidate (0 = global).
pub fn infer_fedsm(sm: &SuperModel, model_input: &[f64], selector_input: &[f64]) -> Result<(Vec<f64>, usize)> {
    if sm.variant != Variant::Fedsm {
        return Err(Error::invalid("threshold routing needs a base-variant super model"));
    }
    infer_routed(sm, model_input, selector_input)
}

pub fn infer_fedsm_extra(sm: &SuperModel, model_input: &[f64], selector_input: &[f64]) -> Result<(Vec<f64>, usize)> {
    if sm.variant != Variant::FedsmExtra {
        return Err(Error::invalid("K+1-way routing needs an extra-variant super model"));
    }
    infer_routed(sm, model_input, selector_input)
}

fn infer_routed(sm: &SuperModel, model_input: &[f64], selector_input: &[f64]) -> Result<(Vec<f64>, usize)> {
    let chosen = route(sm, &single_row(selector_input)?)?[0];
    let out = models::forward(&sm.spec, sm.candidate(chosen), &single_row(model_input)?)?;
    Ok((out.row(0).to_vec(), chosen))
}

/// Convex combination of candidate outputs weighted by the selector
/// probabilities. Base-variant selectors weight the personalized models
/// only; extra-variant selectors weight the global model too.
pub fn infer_ensemble(sm: &SuperModel, model_input: &[f64], selector_input: &[f64]) -> Result<Vec<f64>> {
    let probs = models::forward(&sm.selector_spec, &sm.selector, &single_row(selector_input)?)?;
    let x = single_row(model_input)?;
    let offset = match sm.variant {
        Variant::Fedsm => 1,
        Variant::FedsmExtra => 0,
    };
    let outs: Vec<Vec<f64>> = probs
        .row(0)
        .iter()
        .enumerate()
        .map(|(i, _)| Ok(models::forward(&sm.spec, sm.candidate(i + offset), &x)?.row(0).to_vec()))
        .collect::<Result<_>>()?;
    Ok(combine(&outs, probs.row(0)))
}

/// `Σ_i weights[i]·outputs[i]`.
pub fn combine(outputs: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let mut acc = vec![0.0; outputs.first().map_or(0, Vec::len)];
    for (o, w) in outputs.iter().zip(weights) {
        for (a, v) in acc.iter_mut().zip(o) {
            *a += w * v;
        }
    }
    acc
}

/// Per-example metric of routed inference over a split, and the chosen
/// candidate of every example.
pub fn routed_metrics(sm: &SuperModel, split: &SplitView) -> Result<(Vec<f64>, Vec<usize>)> {
    if split.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let chosen = route(sm, &split.selector_inputs)?;
    let mut metrics = vec![0.0; chosen.len()];
    for cand in 0..=sm.k() {
        let idx: Vec<usize> = (0..chosen.len()).filter(|i| chosen[*i] == cand).collect();
        if idx.is_empty() {
            continue;
        }
        let vals = example_metrics(&sm.spec, sm.candidate(cand), &split.batch.select(&idx))?;
        for (i, v) in idx.iter().zip(vals) {
            metrics[*i] = v;
        }
    }
    Ok((metrics, chosen))
}

/// Fraction of examples routed to each candidate (index 0 = global).
pub fn selection_frequencies(chosen: &[usize], k: usize) -> Vec<f64> {
    let mut f = vec![0.0; k + 1];
    for c in chosen {
        f[*c] += 1.0;
    }
    let n = chosen.len().max(1) as f64;
    f.iter_mut().for_each(|v| *v /= n);
    f
}

/// Settings specific to the super model.
#[derive(Clone, Debug, PartialEq)]
pub struct FedsmConfig {
    pub lambda: f64,
    pub gamma: f64,
    /// Hidden widths of the selector; input and output widths are implied.
    pub selector_hidden: Vec<usize>,
    pub selector_optimizer: OptimizerConfig,
    pub train_selector: bool,
    /// Selector minibatch size; 0 means one full-batch step per local
    /// epoch.
    pub selector_batch_size: usize,
    pub extra_rounds: usize,
    /// Keep every personalized model after every local step (for the
    /// convergence diagnostics).
    pub record_trace: bool,
}

impl Default for FedsmConfig {
    fn default() -> Self {
        FedsmConfig::new(FedsmConfig::default_selector_optimizer())
    }
}

impl FedsmConfig {
    pub fn new(selector_optimizer: OptimizerConfig) -> Self {
        FedsmConfig {
            lambda: DEFAULT_LAMBDA,
            gamma: DEFAULT_GAMMA,
            selector_hidden: vec![32],
            selector_optimizer,
            train_selector: true,
            selector_batch_size: 0,
            extra_rounds: DEFAULT_EXTRA_ROUNDS,
            record_trace: false,
        }
    }

    /// Full-batch heavy-ball SGD keeps every class alive when each client
    /// only ever sees its own label.
    pub fn default_selector_optimizer() -> OptimizerConfig {
        OptimizerConfig::sgd(0.1, 0.9)
    }

    pub fn selector_spec(&self, input: usize, classes: usize, settings: &TrainSettings) -> ModelSpec {
        let mut widths = vec![input];
        widths.extend(&self.selector_hidden);
        widths.push(classes);
        ModelSpec::selector(&widths, settings.spec.activation)
    }
}

/// Personalized weights after each local step: `[round][client][step]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepTrace {
    pub rounds: Vec<Vec<Vec<ParamVector>>>,
}

#[derive(Clone, Debug)]
pub struct FedsmRun {
    pub model: SuperModel,
    pub reports: Vec<RoundReport>,
    pub ledger: CommLedger,
    pub trace: Option<StepTrace>,
}

const SLOT_GLOBAL: usize = 0;
const SLOT_PERSONAL: usize = 1;
const SLOT_SELECTOR: usize = 2;

struct LocalOut {
    global: Option<ParamVector>,
    personal: Option<(ParamVector, LocalStats)>,
    selector: Option<ParamVector>,
    steps: Vec<ParamVector>,
}

fn selector_batch(view: &ClientView, labels: &[usize], classes: usize) -> Result<Batch> {
    Batch::new(view.train.selector_inputs.clone(), one_hot_rows(labels, classes))
}

fn check_federation(settings: &TrainSettings, views: &[ClientView]) -> Result<()> {
    settings.validate()?;
    if views.len() < 2 {
        return Err(Error::invalid(format!("the super model needs K >= 2 clients, got {}", views.len())));
    }
    Ok(())
}

fn selector_input_width(views: &[ClientView]) -> usize {
    views[0].train.selector_inputs.cols()
}

fn evaluate_routed(pool: &rayon::ThreadPool, sm: &SuperModel, views: &[ClientView]) -> Result<MetricSummary> {
    let per: Vec<Vec<f64>> = pool.install(|| {
        views
            .par_iter()
            .map(|v| routed_metrics(sm, &v.val).map(|r| r.0))
            .collect::<Result<_>>()
    })?;
    Ok(MetricSummary::from_examples(&per))
}

struct Trainer<'a> {
    settings: &'a TrainSettings,
    cfg: &'a FedsmConfig,
    views: &'a [ClientView],
    pool: rayon::ThreadPool,
    clients: Vec<ClientState<'a>>,
    n_k: Vec<usize>,
    p: Vec<f64>,
    sm: SuperModel,
    ledger: CommLedger,
    best: BestTracker,
    algo: &'static str,
}

impl<'a> Trainer<'a> {
    fn new(settings: &'a TrainSettings, cfg: &'a FedsmConfig, views: &'a [ClientView], variant: Variant) -> Result<Self> {
        check_federation(settings, views)?;
        check_lambda(views.len(), cfg.lambda)?;
        cfg.selector_optimizer.validate()?;
        if !(0.0..=1.0).contains(&cfg.gamma) {
            return Err(Error::invalid(format!("gamma must be in [0, 1], got {}", cfg.gamma)));
        }
        let k = views.len();
        let classes = match variant {
            Variant::Fedsm => k,
            Variant::FedsmExtra => k + 1,
        };
        let selector_spec = cfg.selector_spec(selector_input_width(views), classes, settings);
        selector_spec.validate()?;
        let init = settings.init();
        let selector = init_weights(&selector_spec, &RngStream::new(settings.seed, "init-selector", 0, 0));
        let dim = init.dim();
        let slots = [
            (settings.optimizer, dim),
            (settings.optimizer, dim),
            (cfg.selector_optimizer, selector.dim()),
        ];
        let clients = views
            .iter()
            .map(|v| ClientState::new(v, settings.seed, &slots, 0))
            .collect();
        let n_k: Vec<usize> = views.iter().map(|v| v.train.len()).collect();
        Ok(Trainer {
            settings,
            cfg,
            views,
            pool: settings.pool()?,
            clients,
            p: client_weights(&n_k),
            n_k,
            sm: SuperModel {
                spec: settings.spec.clone(),
                selector_spec,
                global: init.clone(),
                personalized: vec![init; k],
                selector,
                gamma: cfg.gamma,
                lambda: cfg.lambda,
                variant,
            },
            ledger: CommLedger::default(),
            best: BestTracker::default(),
            algo: match variant {
                Variant::Fedsm => "fedsm",
                Variant::FedsmExtra => "fedsm_extra",
            },
        })
    }

    /// One round of local updates for the requested parts, then server
    /// aggregation. `selector_targets` holds per-client label lists.
    fn round(
        &mut self,
        round: usize,
        train_models: bool,
        selector_targets: Option<&[Vec<usize>]>,
        trace: Option<&mut StepTrace>,
    ) -> Result<(f64, f64)> {
        let s = self.settings;
        let record = trace.is_some();
        let sm = &self.sm;
        let classes = sm.selector_spec.output_dim;
        let sel_bs = self.cfg.selector_batch_size;
        let outs: Vec<LocalOut> = self.pool.install(|| {
            self.clients
                .par_iter_mut()
                .map(|client| {
                    let id = client.client_id;
                    tag_client(id, (|| {
                        let schedule = client.schedule(round, s.batch_size, s.local_epochs);
                        let data = &client.data.train.batch;
                        let mut out = LocalOut {
                            global: None,
                            personal: None,
                            selector: None,
                            steps: Vec::new(),
                        };
                        if train_models {
                            let (g, _) = train_on_schedule(
                                &s.spec,
                                s.loss,
                                &mut client.optimizers[SLOT_GLOBAL],
                                data,
                                &sm.global,
                                &schedule,
                                &LocalMode::Plain,
                                |_| {},
                            )?;
                            out.global = Some(g);
                            let mut steps = Vec::new();
                            let p = train_on_schedule(
                                &s.spec,
                                s.loss,
                                &mut client.optimizers[SLOT_PERSONAL],
                                data,
                                &sm.personalized[id - 1],
                                &schedule,
                                &LocalMode::Plain,
                                |w| {
                                    if record {
                                        steps.push(w.clone());
                                    }
                                },
                            )?;
                            out.personal = Some(p);
                            out.steps = steps;
                        }
                        if let Some(targets) = selector_targets {
                            let batch = selector_batch(client.data, &targets[id - 1], classes)?;
                            let sel_schedule = match sel_bs {
                                0 => vec![(0..batch.len()).collect::<Vec<_>>(); s.local_epochs],
                                b => client.schedule(round, b, s.local_epochs),
                            };
                            let (w, _) = train_on_schedule(
                                &sm.selector_spec,
                                LossKind::CrossEntropy,
                                &mut client.optimizers[SLOT_SELECTOR],
                                &batch,
                                &sm.selector,
                                &sel_schedule,
                                &LocalMode::Plain,
                                |_| {},
                            )?;
                            out.selector = Some(w);
                        }
                        Ok(out)
                    })())
                })
                .collect::<Result<_>>()
        })?;
        let before = self.sm.global.clone();
        let mut train_loss = 0.0;
        if train_models {
            let globals: Vec<ParamVector> = outs.iter().map(|o| o.global.clone().unwrap()).collect();
            self.sm.global = aggregate_by_size(&globals, &self.n_k)?;
            let locals: Vec<ParamVector> = outs.iter().map(|o| o.personal.as_ref().unwrap().0.clone()).collect();
            self.sm.personalized = softpull(&locals, self.cfg.lambda)?;
            train_loss = outs
                .iter()
                .zip(&self.p)
                .map(|(o, p)| p * o.personal.as_ref().unwrap().1.mean_loss)
                .sum();
        }
        if selector_targets.is_some() {
            let sels: Vec<ParamVector> = outs.iter().map(|o| o.selector.clone().unwrap()).collect();
            self.sm.selector = aggregate_by_size(&sels, &self.n_k)?;
        }
        if let Some(t) = trace {
            t.rounds.push(outs.into_iter().map(|o| o.steps).collect());
        }
        Ok((train_loss, self.sm.global.dist_sq(&before)?.sqrt()))
    }

    fn report(&mut self, round: usize, train_loss: f64, update_norm: f64, weights: usize, routed: bool, start: Instant) -> Result<RoundReport> {
        let comm = self.ledger.record(round, weights, 0);
        let val = if self.settings.eval_each_round {
            Some(if routed {
                evaluate_routed(&self.pool, &self.sm, self.views)?
            } else {
                crate::flcore::evaluate_shared(&self.pool, &self.sm.spec, &self.sm.global, self.views, crate::flcore::Split3::Val)?
            })
        } else {
            None
        };
        let best = self.best.update(&val);
        Ok(RoundReport {
            round,
            algo: self.algo.to_string(),
            val,
            best_client_avg: best,
            train_loss,
            comm,
            update_norm,
            wall_ms: elapsed_ms(self.settings, start),
        })
    }
}

/// Joint training of the global, personalized and selector models.
pub fn train_fedsm(settings: &TrainSettings, cfg: &FedsmConfig, views: &[ClientView]) -> Result<FedsmRun> {
    let mut t = Trainer::new(settings, cfg, views, Variant::Fedsm)?;
    let k = views.len();
    let labels: Vec<Vec<usize>> = views
        .iter()
        .map(|v| Ok(vec![selector_label_fedsm(v.client_id, k)?; v.train.len()]))
        .collect::<Result<_>>()?;
    let dim_g = t.sm.global.dim();
    let dim_s = t.sm.selector.dim();
    let weights = if cfg.train_selector { 2 * dim_g + dim_s } else { 2 * dim_g };
    let mut trace = cfg.record_trace.then(StepTrace::default);
    let mut reports = Vec::with_capacity(settings.rounds);
    for r in 0..settings.rounds {
        let start = Instant::now();
        let targets = cfg.train_selector.then_some(labels.as_slice());
        let (loss, norm) = t.round(r, true, targets, trace.as_mut())?;
        let rep = t.report(r + 1, loss, norm, weights, true, start)?;
        log::debug!("fedsm round {} loss {:.5}", rep.round, rep.train_loss);
        reports.push(rep);
    }
    Ok(FedsmRun {
        model: t.sm,
        reports,
        ledger: t.ledger,
        trace,
    })
}

/// Global and personalized models for `settings.rounds` rounds, then
/// `cfg.extra_rounds` rounds of `K+1`-way selector training on lowest-loss
/// labels.
pub fn train_fedsm_extra(settings: &TrainSettings, cfg: &FedsmConfig, views: &[ClientView]) -> Result<FedsmRun> {
    let mut t = Trainer::new(settings, cfg, views, Variant::FedsmExtra)?;
    let dim_g = t.sm.global.dim();
    let dim_s = t.sm.selector.dim();
    let mut trace = cfg.record_trace.then(StepTrace::default);
    let mut reports = Vec::with_capacity(settings.rounds + cfg.extra_rounds);
    for r in 0..settings.rounds {
        let start = Instant::now();
        let (loss, norm) = t.round(r, true, None, trace.as_mut())?;
        let rep = t.report(r + 1, loss, norm, 2 * dim_g, false, start)?;
        reports.push(rep);
    }
    if cfg.extra_rounds > 0 {
        let sm = &t.sm;
        let labels: Vec<Vec<usize>> = t.pool.install(|| {
            views
                .par_iter()
                .map(|v| {
                    tag_client(
                        v.client_id,
                        selector_labels_extra(&sm.spec, settings.loss, &sm.global, &sm.personalized, &v.train.batch),
                    )
                })
                .collect::<Result<_>>()
        })?;
        for r in settings.rounds..settings.rounds + cfg.extra_rounds {
            let start = Instant::now();
            t.round(r, false, Some(&labels), None)?;
            let rep = t.report(r + 1, 0.0, 0.0, dim_s, true, start)?;
            reports.push(rep);
        }
    }
    Ok(FedsmRun {
        model: t.sm,
        reports,
        ledger: t.ledger,
        trace,
    })
}

// ---------------------------------------------------------------------------
// Bundle on disk: manifest.json plus one ParamVector file per model.

#[derive(Serialize, Deserialize)]
struct FileEntry {
    name: String,
    crc32: u32,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    k: usize,
    lambda: f64,
    #[serde(default)]
    gamma: Option<f64>,
    variant: Variant,
    spec: ModelSpec,
    selector_spec: ModelSpec,
    files: Vec<FileEntry>,
}

fn file_names(k: usize) -> Vec<String> {
    let mut v = vec!["global.bin".to_string()];
    v.extend((1..=k).map(|i| format!("personalized_{i}.bin")));
    v.push("selector.bin".to_string());
    v
}

pub fn save_supermodel(sm: &SuperModel, dir: &Path) -> Result<()> {
    sm.validate()?;
    fs::create_dir_all(dir)?;
    let weights: Vec<&ParamVector> = std::iter::once(&sm.global)
        .chain(&sm.personalized)
        .chain(std::iter::once(&sm.selector))
        .collect();
    let mut files = Vec::with_capacity(weights.len());
    for (name, w) in file_names(sm.k()).into_iter().zip(weights) {
        let bytes = w.to_bytes();
        fs::write(dir.join(&name), &bytes)?;
        files.push(FileEntry {
            name,
            crc32: crc32fast::hash(&bytes),
            dim: w.dim(),
        });
    }
    let manifest = Manifest {
        version: BUNDLE_VERSION,
        k: sm.k(),
        lambda: sm.lambda,
        gamma: Some(sm.gamma),
        variant: sm.variant,
        spec: sm.spec.clone(),
        selector_spec: sm.selector_spec.clone(),
        files,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn load_supermodel(dir: &Path) -> Result<SuperModel> {
    let mpath = dir.join("manifest.json");
    let raw = fs::read(&mpath)?;
    let m: Manifest = serde_json::from_slice(&raw).map_err(|e| Error::format(&mpath, format!("bad manifest: {e}")))?;
    if m.version > BUNDLE_VERSION || m.version == 0 {
        return Err(Error::UnsupportedVersion {
            found: m.version,
            supported: BUNDLE_VERSION,
        });
    }
    let expected = file_names(m.k);
    if m.files.len() != expected.len() {
        return Err(Error::format(
            &mpath,
            format!("K = {} needs {} weight files, manifest lists {}", m.k, expected.len(), m.files.len()),
        ));
    }
    let mut weights = Vec::with_capacity(expected.len());
    for (entry, name) in m.files.iter().zip(&expected) {
        if &entry.name != name {
            return Err(Error::format(&mpath, format!("expected file {name}, manifest lists {}", entry.name)));
        }
        let path = dir.join(name);
        let bytes = fs::read(&path)?;
        if crc32fast::hash(&bytes) != entry.crc32 {
            return Err(Error::Checksum { section: name.clone() });
        }
        let w = ParamVector::read_from(bytes.as_slice()).map_err(|e| Error::format(&path, format!("truncated weights: {e}")))?;
        if w.dim() != entry.dim || bytes.len() != 8 + 8 * w.dim() {
            return Err(Error::format(&path, "weight length disagrees with manifest"));
        }
        weights.push(w);
    }
    let gamma = m.gamma.unwrap_or_else(|| {
        log::warn!("manifest in {} has no gamma; using {DEFAULT_GAMMA}", dir.display());
        DEFAULT_GAMMA
    });
    let selector = weights.pop().unwrap();
    let global = weights.remove(0);
    let sm = SuperModel {
        spec: m.spec,
        selector_spec: m.selector_spec,
        global,
        personalized: weights,
        selector,
        gamma,
        lambda: m.lambda,
        variant: m.variant,
    };
    sm.validate().map_err(|e| Error::format(&mpath, format!("manifest does not match weights: {e}")))?;
    Ok(sm)
}
