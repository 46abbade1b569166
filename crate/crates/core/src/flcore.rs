//! Federated round simulation: client and server state, local training,
//! FedAvg aggregation, FedProx and SCAFFOLD, communication accounting and
//! per-round reports.
//!
//! Every client participates in every round. Clients train concurrently on a
//! private rayon pool; results are gathered in client order and aggregation
//! is sequential, so outputs never depend on scheduling or thread count.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ClientView;
use crate::error::{Error, Result};
use crate::losses::{example_metric, LossKind};
use crate::math::{weighted_mean, ParamVector, RngStream};
use crate::models::{self, init_weights, Batch, ModelKind, ModelSpec};
use crate::optim::{fedprox_grad, OptimizerConfig, OptimizerState};

pub const DEFAULT_ROUNDS: usize = 150;
pub const DEFAULT_LOCAL_EPOCHS: usize = 1;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_MU_PROX: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FedAlgo {
    FedAvg,
    FedProx,
    Scaffold,
}

impl FedAlgo {
    pub fn name(self) -> &'static str {
        match self {
            FedAlgo::FedAvg => "fedavg",
            FedAlgo::FedProx => "fedprox",
            FedAlgo::Scaffold => "scaffold",
        }
    }
}

/// Hyperparameters shared by every trainer.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub spec: ModelSpec,
    pub loss: LossKind,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub rounds: usize,
    pub seed: u64,
    pub threads: usize,
    pub mu_prox: f64,
    /// Forces SCAFFOLD control variates to zero every round.
    pub scaffold_zero_variates: bool,
    /// Evaluate validation metrics after every round.
    pub eval_each_round: bool,
    /// Record wall-clock time per round (off keeps reports reproducible).
    pub wall_clock: bool,
}

impl TrainSettings {
    pub fn new(spec: ModelSpec, loss: LossKind, optimizer: OptimizerConfig) -> Self {
        TrainSettings {
            spec,
            loss,
            optimizer,
            batch_size: DEFAULT_BATCH_SIZE,
            local_epochs: DEFAULT_LOCAL_EPOCHS,
            rounds: DEFAULT_ROUNDS,
            seed: 0,
            threads: 1,
            mu_prox: DEFAULT_MU_PROX,
            scaffold_zero_variates: false,
            eval_each_round: true,
            wall_clock: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.local_epochs == 0 {
            return Err(Error::invalid("local epochs must be >= 1"));
        }
        if self.mu_prox < 0.0 {
            return Err(Error::invalid("mu_prox must be >= 0"));
        }
        Ok(())
    }

    pub fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads.max(1))
            .build()
            .map_err(|e| Error::invalid(format!("cannot build thread pool: {e}")))
    }

    pub fn init(&self) -> ParamVector {
        init_weights(&self.spec, &RngStream::new(self.seed, "init", 0, 0))
    }
}

/// Minibatch index lists for `epochs` passes over `n` examples, reshuffled
/// each epoch; the last partial batch is kept.
pub fn batch_schedule(seed: u64, client_id: usize, round: usize, n: usize, batch_size: usize, epochs: usize) -> Vec<Vec<usize>> {
    batch_schedule_for("batches", seed, client_id, round, n, batch_size, epochs)
}

/// [`batch_schedule`] drawn from a stream with a different purpose tag.
pub fn batch_schedule_for(
    purpose: &str,
    seed: u64,
    client_id: usize,
    round: usize,
    n: usize,
    batch_size: usize,
    epochs: usize,
) -> Vec<Vec<usize>> {
    let mut rng = RngStream::new(seed, purpose, client_id as u64, round as u64).rng();
    let mut out = Vec::with_capacity(epochs * n.div_ceil(batch_size.max(1)));
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        out.extend(order.chunks(batch_size).map(<[usize]>::to_vec));
    }
    out
}

pub enum LocalMode<'a> {
    Plain,
    FedProx { mu: f64 },
    Scaffold { c: &'a ParamVector, c_k: &'a ParamVector },
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LocalStats {
    pub steps: usize,
    pub mean_loss: f64,
}

/// Runs the optimizer over `schedule` starting at `start`. `on_step` sees the
/// weights after every step.
#[allow(clippy::too_many_arguments)]
pub fn train_on_schedule(
    spec: &ModelSpec,
    loss: LossKind,
    opt: &mut OptimizerState,
    data: &Batch,
    start: &ParamVector,
    schedule: &[Vec<usize>],
    mode: &LocalMode<'_>,
    mut on_step: impl FnMut(&ParamVector),
) -> Result<(ParamVector, LocalStats)> {
    let mut w = start.clone();
    let mut total = 0.0;
    for idx in schedule {
        let batch = data.select(idx);
        let (value, mut grad) = models::backward(spec, &w, &batch, loss)?;
        total += value;
        match mode {
            LocalMode::Plain => {}
            LocalMode::FedProx { mu } => grad = fedprox_grad(&grad, &w, start, *mu)?,
            LocalMode::Scaffold { c, c_k } => {
                let g = grad.as_mut_slice();
                for ((gi, ck), ci) in g.iter_mut().zip(c_k.iter()).zip(c.iter()) {
                    *gi = *gi - ck + ci;
                }
            }
        }
        opt.step(&mut w, &grad)?;
        on_step(&w);
    }
    let steps = schedule.len();
    let mean_loss = if steps == 0 { 0.0 } else { total / steps as f64 };
    Ok((w, LocalStats { steps, mean_loss }))
}

/// One client's private state.
#[derive(Clone, Debug)]
pub struct ClientState<'a> {
    pub client_id: usize,
    pub data: &'a ClientView,
    /// One optimizer per tracked model (e.g. global copy, personalized,
    /// selector); buffers persist across rounds.
    pub optimizers: Vec<OptimizerState>,
    pub scaffold_c: ParamVector,
    pub seed: u64,
}

impl<'a> ClientState<'a> {
    pub fn new(data: &'a ClientView, seed: u64, slots: &[(OptimizerConfig, usize)], variate_dim: usize) -> Self {
        ClientState {
            client_id: data.client_id,
            data,
            optimizers: slots.iter().map(|(c, d)| OptimizerState::new(*c, *d)).collect(),
            scaffold_c: ParamVector::zeros(variate_dim),
            seed,
        }
    }

    pub fn n_train(&self) -> usize {
        self.data.train.len()
    }

    pub fn schedule(&self, round: usize, batch_size: usize, epochs: usize) -> Vec<Vec<usize>> {
        batch_schedule(self.seed, self.client_id, round, self.n_train(), batch_size, epochs)
    }

    /// Trains the model in optimizer slot 0 for `epochs` epochs of this
    /// round's batch order.
    pub fn local_train(
        &mut self,
        settings: &TrainSettings,
        start: &ParamVector,
        round: usize,
        mode: &LocalMode<'_>,
    ) -> Result<(ParamVector, LocalStats)> {
        let schedule = self.schedule(round, settings.batch_size, settings.local_epochs);
        train_on_schedule(
            &settings.spec,
            settings.loss,
            &mut self.optimizers[0],
            &self.data.train.batch,
            start,
            &schedule,
            mode,
            |_| {},
        )
    }
}

/// Result of one client's SCAFFOLD round.
#[derive(Clone, Debug)]
pub struct ScaffoldUpdate {
    pub weights: ParamVector,
    pub c_k: ParamVector,
    pub delta_c: ParamVector,
    pub stats: LocalStats,
}

/// Corrected local steps followed by the step-count control-variate update
/// `c_k' = c_k − c + (w_start − w_end)/(M·η)`.
pub fn scaffold_update(
    client: &mut ClientState<'_>,
    settings: &TrainSettings,
    start: &ParamVector,
    c: &ParamVector,
    round: usize,
) -> Result<ScaffoldUpdate> {
    if settings.scaffold_zero_variates {
        client.scaffold_c = ParamVector::zeros(c.dim());
    }
    let c_k = client.scaffold_c.clone();
    let zero;
    let c_used = if settings.scaffold_zero_variates {
        zero = ParamVector::zeros(c.dim());
        &zero
    } else {
        c
    };
    let (w, stats) = client.local_train(settings, start, round, &LocalMode::Scaffold { c: c_used, c_k: &c_k })?;
    let m_eta = stats.steps as f64 * settings.optimizer.lr;
    if m_eta == 0.0 {
        return Err(Error::invalid("SCAFFOLD needs a positive step count times learning rate"));
    }
    let mut new_c = c_k.sub(c_used)?;
    new_c.add_scaled(1.0 / m_eta, &start.sub(&w)?)?;
    if settings.scaffold_zero_variates {
        new_c = ParamVector::zeros(c.dim());
    }
    let delta_c = new_c.sub(&c_k)?;
    client.scaffold_c = new_c.clone();
    Ok(ScaffoldUpdate {
        weights: w,
        c_k: new_c,
        delta_c,
        stats,
    })
}

/// `Σ p_k w_k`; `p` must sum to one within 1e-9.
pub fn aggregate_fedavg(locals: &[ParamVector], p: &[f64]) -> Result<ParamVector> {
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidWeights(format!("client weights sum to {s}, expected 1")));
    }
    weighted_mean(locals, p)
}

/// Per-client parameter counts for one round, in each direction. `down`/`up`
/// count model weights only; the totals add auxiliary state such as SCAFFOLD
/// control variates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommRecord {
    pub round: usize,
    pub down: u64,
    pub up: u64,
    pub down_total: u64,
    pub up_total: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    pub records: Vec<CommRecord>,
}

impl CommLedger {
    pub fn record(&mut self, round: usize, weights: usize, extra: usize) -> CommRecord {
        let rec = CommRecord {
            round,
            down: weights as u64,
            up: weights as u64,
            down_total: (weights + extra) as u64,
            up_total: (weights + extra) as u64,
        };
        self.records.push(rec);
        rec
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServerState {
    /// Completed rounds.
    pub round: usize,
    pub global: ParamVector,
    pub selector: Option<ParamVector>,
    pub personalized: Vec<ParamVector>,
    pub scaffold_c: ParamVector,
    /// Training-set sizes `n_k`.
    pub n_k: Vec<usize>,
    pub ledger: CommLedger,
}

impl ServerState {
    pub fn new(global: ParamVector, n_k: Vec<usize>) -> Self {
        let dim = global.dim();
        ServerState {
            round: 0,
            global,
            selector: None,
            personalized: Vec::new(),
            scaffold_c: ParamVector::zeros(dim),
            n_k,
            ledger: CommLedger::default(),
        }
    }

    /// `p_k = n_k / n`.
    pub fn p(&self) -> Vec<f64> {
        client_weights(&self.n_k)
    }
}

pub fn client_weights(n_k: &[usize]) -> Vec<f64> {
    let n: usize = n_k.iter().sum();
    n_k.iter().map(|v| *v as f64 / n as f64).collect()
}

/// `Σ_k (n_k/n)·w_k`. The counts go to `weighted_mean` directly (it
/// normalizes), so equal-size clients give exactly the uniform mean.
pub fn aggregate_by_size(locals: &[ParamVector], n_k: &[usize]) -> Result<ParamVector> {
    let counts: Vec<f64> = n_k.iter().map(|v| *v as f64).collect();
    weighted_mean(locals, &counts)
}

/// `Σ_k p_k L_k(w)` over the full local training sets.
pub fn global_objective(spec: &ModelSpec, loss: LossKind, w: &ParamVector, views: &[ClientView]) -> Result<f64> {
    let n_k: Vec<usize> = views.iter().map(|v| v.train.len()).collect();
    let p = client_weights(&n_k);
    let mut acc = 0.0;
    for (view, pk) in views.iter().zip(&p) {
        acc += pk * models::loss_value(spec, w, &view.train.batch, loss)?;
    }
    Ok(acc)
}

/// Per-example metric of one model: Dice for masks, accuracy for classes,
/// and `−½‖w − c‖²` for the quadratic kind (higher is better everywhere).
pub fn example_metrics(spec: &ModelSpec, w: &ParamVector, batch: &Batch) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    if spec.kind == ModelKind::Quadratic {
        return Ok((0..batch.len())
            .map(|i| {
                -0.5 * w
                    .iter()
                    .zip(batch.targets.row(i))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .collect());
    }
    let out = models::forward(spec, w, &batch.inputs)?;
    let act = spec.output_activation();
    Ok((0..batch.len())
        .map(|i| example_metric(act, out.row(i), batch.targets.row(i)))
        .collect())
}

/// Per-client means, their unweighted average, and the pooled per-example
/// mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub per_client: Vec<f64>,
    pub client_avg: f64,
    pub global: f64,
}

impl MetricSummary {
    pub fn from_examples(per_client: &[Vec<f64>]) -> Self {
        let means: Vec<f64> = per_client
            .iter()
            .map(|v| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 })
            .collect();
        let client_avg = means.iter().sum::<f64>() / means.len().max(1) as f64;
        let count: usize = per_client.iter().map(Vec::len).sum();
        let global = per_client.iter().flatten().sum::<f64>() / count.max(1) as f64;
        MetricSummary {
            per_client: means,
            client_avg,
            global,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundReport {
    /// 1-based.
    pub round: usize,
    pub algo: String,
    pub val: Option<MetricSummary>,
    pub best_client_avg: f64,
    pub train_loss: f64,
    pub comm: CommRecord,
    /// `‖w_g(after) − w_g(before)‖`.
    pub update_norm: f64,
    pub wall_ms: u64,
}

pub fn csv_header(k: usize) -> String {
    let mut s = String::from("round,algo");
    for c in 1..=k {
        let _ = write!(s, ",client_{c}");
    }
    s.push_str(",client_avg,global,best_client_avg,train_loss,comm_down,comm_up,comm_down_total,comm_up_total,update_norm,wall_ms");
    s
}

impl RoundReport {
    pub fn csv_row(&self, k: usize) -> String {
        let mut s = format!("{},{}", self.round, self.algo);
        match &self.val {
            Some(m) => {
                for v in &m.per_client {
                    let _ = write!(s, ",{v}");
                }
                let _ = write!(s, ",{},{}", m.client_avg, m.global);
            }
            None => s.push_str(&",".repeat(k + 2)),
        }
        let c = &self.comm;
        let _ = write!(
            s,
            ",{},{},{},{},{},{},{},{}",
            self.best_client_avg, self.train_loss, c.down, c.up, c.down_total, c.up_total, self.update_norm, self.wall_ms
        );
        s
    }
}

pub fn reports_csv(reports: &[RoundReport], k: usize) -> String {
    let mut s = csv_header(k);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row(k));
        s.push('\n');
    }
    s
}

/// Tracks the best client-average validation metric seen so far.
#[derive(Clone, Copy, Debug)]
pub struct BestTracker(pub f64);

impl Default for BestTracker {
    fn default() -> Self {
        BestTracker(f64::NEG_INFINITY)
    }
}

impl BestTracker {
    pub fn update(&mut self, val: &Option<MetricSummary>) -> f64 {
        if let Some(m) = val {
            if m.client_avg > self.0 {
                self.0 = m.client_avg;
            }
        }
        self.0
    }
}

pub(crate) fn tag_client<T>(client_id: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Client {
        client: client_id,
        source: Box::new(e),
    })
}

pub(crate) fn elapsed_ms(settings: &TrainSettings, start: Instant) -> u64 {
    if settings.wall_clock {
        start.elapsed().as_millis() as u64
    } else {
        0
    }
}

/// Validation metrics of one shared model on every client.
pub fn evaluate_shared(
    pool: &rayon::ThreadPool,
    spec: &ModelSpec,
    w: &ParamVector,
    views: &[ClientView],
    split: Split3,
) -> Result<MetricSummary> {
    let per: Vec<Vec<f64>> = pool.install(|| {
        views
            .par_iter()
            .map(|v| example_metrics(spec, w, &split.of(v).batch))
            .collect::<Result<_>>()
    })?;
    Ok(MetricSummary::from_examples(&per))
}

/// Which split of a client view to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split3 {
    Train,
    Val,
    Test,
}

impl Split3 {
    pub fn of(self, v: &ClientView) -> &crate::data::SplitView {
        match self {
            Split3::Train => &v.train,
            Split3::Val => &v.val,
            Split3::Test => &v.test,
        }
    }
}

/// One FedAvg / FedProx / SCAFFOLD round: broadcast, concurrent local
/// training, ordered gather, aggregation, ledger update and evaluation.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState<'_>],
    settings: &TrainSettings,
    algo: FedAlgo,
    pool: &rayon::ThreadPool,
) -> Result<RoundReport> {
    let start = Instant::now();
    let round = server.round;
    let w_g = server.global.clone();
    let c = server.scaffold_c.clone();
    let results: Vec<(ParamVector, LocalStats, Option<ParamVector>)> = pool.install(|| {
        clients
            .par_iter_mut()
            .map(|client| {
                let id = client.client_id;
                tag_client(
                    id,
                    match algo {
                        FedAlgo::FedAvg => client
                            .local_train(settings, &w_g, round, &LocalMode::Plain)
                            .map(|(w, s)| (w, s, None)),
                        FedAlgo::FedProx => client
                            .local_train(settings, &w_g, round, &LocalMode::FedProx { mu: settings.mu_prox })
                            .map(|(w, s)| (w, s, None)),
                        FedAlgo::Scaffold => {
                            scaffold_update(client, settings, &w_g, &c, round).map(|u| (u.weights, u.stats, Some(u.delta_c)))
                        }
                    },
                )
            })
            .collect::<Result<_>>()
    })?;
    let locals: Vec<ParamVector> = results.iter().map(|r| r.0.clone()).collect();
    let new_global = aggregate_by_size(&locals, &server.n_k)?;
    if algo == FedAlgo::Scaffold {
        if settings.scaffold_zero_variates {
            server.scaffold_c = ParamVector::zeros(c.dim());
        } else {
            let deltas: Vec<ParamVector> = results.iter().map(|r| r.2.clone().unwrap()).collect();
            let mean_delta = aggregate_by_size(&deltas, &server.n_k)?;
            server.scaffold_c.add_scaled(1.0, &mean_delta)?;
        }
    }
    let p = server.p();
    let train_loss = results.iter().zip(&p).map(|(r, pk)| pk * r.1.mean_loss).sum();
    let update_norm = new_global.dist_sq(&w_g)?.sqrt();
    server.global = new_global;
    server.round += 1;
    let dim = server.global.dim();
    let extra = if algo == FedAlgo::Scaffold { c.dim() } else { 0 };
    let comm = server.ledger.record(server.round, dim, extra);
    let val = if settings.eval_each_round {
        let per: Vec<Vec<f64>> = pool.install(|| {
            clients
                .par_iter()
                .map(|cl| example_metrics(&settings.spec, &server.global, &cl.data.val.batch))
                .collect::<Result<_>>()
        })?;
        Some(MetricSummary::from_examples(&per))
    } else {
        None
    };
    Ok(RoundReport {
        round: server.round,
        algo: algo.name().to_string(),
        val,
        best_client_avg: f64::NEG_INFINITY,
        train_loss,
        comm,
        update_norm,
        wall_ms: elapsed_ms(settings, start),
    })
}

/// Outcome of a full federated run.
#[derive(Clone, Debug)]
pub struct FedRun {
    pub server: ServerState,
    pub reports: Vec<RoundReport>,
}

pub fn new_clients<'a>(views: &'a [ClientView], settings: &TrainSettings, variate_dim: usize) -> Vec<ClientState<'a>> {
    let dim = settings.spec.param_count();
    views
        .iter()
        .map(|v| ClientState::new(v, settings.seed, &[(settings.optimizer, dim)], variate_dim))
        .collect()
}

/// Runs `settings.rounds` rounds of `algo` from `start` (the model init when
/// `None`).
pub fn train_federated(settings: &TrainSettings, views: &[ClientView], algo: FedAlgo, start: Option<ParamVector>) -> Result<FedRun> {
    settings.validate()?;
    if views.is_empty() {
        return Err(Error::Empty("federation has no clients"));
    }
    let pool = settings.pool()?;
    let global = start.unwrap_or_else(|| settings.init());
    let mut server = ServerState::new(global, views.iter().map(|v| v.train.len()).collect());
    let variate_dim = if algo == FedAlgo::Scaffold { server.global.dim() } else { 0 };
    let mut clients = new_clients(views, settings, variate_dim);
    let mut best = BestTracker::default();
    let mut reports = Vec::with_capacity(settings.rounds);
    for _ in 0..settings.rounds {
        let mut rep = run_round(&mut server, &mut clients, settings, algo, &pool)?;
        rep.best_client_avg = best.update(&rep.val);
        log::debug!("{} round {} loss {:.5}", algo.name(), rep.round, rep.train_loss);
        reports.push(rep);
    }
    Ok(FedRun { server, reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, view, GenConfig, Task};
    use crate::optim::OptimizerConfig;

    fn quad_views(sizes: &[usize], seed: u64) -> Vec<ClientView> {
        let ds = generate(&GenConfig {
            seed,
            sizes: sizes.to_vec(),
            task: Task::Quadratic,
            quad_dim: 3,
            ..GenConfig::default()
        })
        .unwrap();
        view(&ds).unwrap()
    }

    fn quad_settings(lr: f64) -> TrainSettings {
        let mut s = TrainSettings::new(ModelSpec::quadratic(3), LossKind::Mse, OptimizerConfig::sgd(lr, 0.0));
        s.rounds = 3;
        s
    }

    #[test]
    fn aggregate_examples() {
        let w = |v: f64| ParamVector::from_vec(vec![v]);
        assert_eq!(aggregate_fedavg(&[w(0.0), w(2.0)], &[0.5, 0.5]).unwrap(), w(1.0));
        assert_eq!(aggregate_fedavg(&[w(4.0), w(0.0)], &[0.25, 0.75]).unwrap(), w(1.0));
        assert_eq!(aggregate_fedavg(&[w(3.5)], &[1.0]).unwrap(), w(3.5));
        assert!(aggregate_fedavg(&[w(1.0), w(2.0)], &[0.5, 0.6]).is_err());
    }

    #[test]
    fn client_weights_sum_to_one() {
        let p = client_weights(&[25, 49, 23, 115, 40, 200]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_covers_every_example_each_epoch() {
        let s = batch_schedule(1, 2, 3, 70, 32, 2);
        assert_eq!(s.iter().map(Vec::len).collect::<Vec<_>>(), vec![32, 32, 6, 32, 32, 6]);
        let mut first: Vec<usize> = s[..3].concat();
        first.sort();
        assert_eq!(first, (0..70).collect::<Vec<_>>());
        assert_eq!(s, batch_schedule(1, 2, 3, 70, 32, 2));
        assert_ne!(s, batch_schedule(1, 2, 4, 70, 32, 2));
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let views = quad_views(&[8, 12], 1);
        let settings = quad_settings(0.0);
        let run = train_federated(&settings, &views, FedAlgo::FedAvg, None).unwrap();
        assert_eq!(run.server.global, settings.init());
        assert!(run.reports.iter().all(|r| r.val.is_some()));
    }

    #[test]
    fn local_training_reaches_center() {
        let views = quad_views(&[40, 12], 2);
        let mut settings = quad_settings(0.5);
        settings.local_epochs = 60;
        let mut clients = new_clients(&views, &settings, 0);
        let (w, stats) = clients[0]
            .local_train(&settings, &settings.init(), 0, &LocalMode::Plain)
            .unwrap();
        assert_eq!(stats.steps, 60 * 1);
        let center = views[0].train.batch.targets.row(0);
        for (a, b) in w.iter().zip(center) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn objective_closed_form() {
        let views = quad_views(&[10, 10, 10], 3);
        let spec = ModelSpec::quadratic(3);
        let w = ParamVector::from_vec(vec![0.1, -0.2, 0.3]);
        let got = global_objective(&spec, LossKind::Mse, &w, &views).unwrap();
        let want: f64 = views
            .iter()
            .map(|v| {
                let c = v.train.batch.targets.row(0);
                0.5 * w.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 3.0
            })
            .sum();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn identical_shards_give_identical_locals() {
        let mut views = quad_views(&[12, 12, 12], 4);
        let first = views[0].clone();
        for (i, v) in views.iter_mut().enumerate() {
            *v = ClientView {
                client_id: i + 1,
                ..first.clone()
            };
        }
        let mut settings = quad_settings(0.1);
        settings.batch_size = 4;
        settings.rounds = 1;
        // same batch order needs the same client id in the rng key
        let mut clients = new_clients(&views, &settings, 0);
        for c in clients.iter_mut() {
            c.client_id = 1;
        }
        let pool = settings.pool().unwrap();
        let mut server = ServerState::new(settings.init(), vec![6, 6, 6]);
        let (local, _) = clients[0]
            .clone()
            .local_train(&settings, &server.global, 0, &LocalMode::Plain)
            .unwrap();
        run_round(&mut server, &mut clients, &settings, FedAlgo::FedAvg, &pool).unwrap();
        for (a, b) in server.global.iter().zip(local.iter()) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    #[test]
    fn scaffold_with_zero_variates_matches_plain_first_round() {
        let views = quad_views(&[9, 14], 5);
        let settings = quad_settings(0.2);
        let mut clients = new_clients(&views, &settings, 3);
        let start = settings.init();
        let (plain, _) = clients[0].clone().local_train(&settings, &start, 0, &LocalMode::Plain).unwrap();
        let upd = scaffold_update(&mut clients[0], &settings, &start, &ParamVector::zeros(3), 0).unwrap();
        assert_eq!(upd.weights, plain);
    }

    #[test]
    fn scaffold_variates_agree_on_identical_data() {
        let views = quad_views(&[12, 12], 6);
        let first = views[0].clone();
        let views = vec![first.clone(), ClientView { client_id: 2, ..first }];
        let mut settings = quad_settings(0.1);
        settings.rounds = 5;
        let pool = settings.pool().unwrap();
        let mut server = ServerState::new(settings.init(), vec![6, 6]);
        let mut clients = new_clients(&views, &settings, 3);
        for _ in 0..5 {
            run_round(&mut server, &mut clients, &settings, FedAlgo::Scaffold, &pool).unwrap();
        }
        assert!(clients[0].scaffold_c.dist_sq(&clients[1].scaffold_c).unwrap().sqrt() < 1e-6);
        assert_eq!(server.ledger.records[0].down, 3);
        assert_eq!(server.ledger.records[0].down_total, 6);
    }

    #[test]
    fn failures_name_the_client() {
        let views = quad_views(&[8, 8], 7);
        let mut settings = quad_settings(1e300);
        settings.optimizer.momentum = 0.0;
        settings.rounds = 5;
        let err = train_federated(&settings, &views, FedAlgo::FedAvg, Some(ParamVector::from_vec(vec![1e300; 3]))).unwrap_err();
        assert!(matches!(err, Error::Client { .. }), "{err:?}");
    }

    #[test]
    fn csv_layout() {
        let h = csv_header(2);
        assert!(h.starts_with("round,algo,client_1,client_2,client_avg"));
        let views = quad_views(&[8, 8], 8);
        let run = train_federated(&quad_settings(0.1), &views, FedAlgo::FedAvg, None).unwrap();
        let csv = reports_csv(&run.reports, 2);
        let cols = h.split(',').count();
        for line in csv.lines() {
            assert_eq!(line.split(',').count(), cols);
        }
    }
}
