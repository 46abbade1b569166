//! Non-federated references and personalization baselines: centralized
//! training on pooled data, local-only training, local fine-tuning of a
//! global model, and APFL-style interpolation.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientView, SplitView};
use crate::error::{Error, Result};
use crate::flcore::{
    batch_schedule_for, elapsed_ms, evaluate_shared, example_metrics, tag_client, train_federated, train_on_schedule,
    BestTracker, ClientState, CommRecord, FedAlgo, FedRun, LocalMode, MetricSummary, RoundReport, Split3, TrainSettings,
};
use crate::math::{axpby, ParamVector};
use crate::models;
use crate::optim::OptimizerState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PersonalizationMethod {
    LocalOnly,
    FineTune,
    Apfl,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonalizationConfig {
    pub method: PersonalizationMethod,
    pub ft_epochs: usize,
    /// Interpolation weight of the personalized model.
    pub apfl_alpha: f64,
}

impl PersonalizationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.apfl_alpha) {
            return Err(Error::invalid(format!("apfl alpha must be in [0, 1], got {}", self.apfl_alpha)));
        }
        Ok(())
    }
}

fn zero_comm(round: usize) -> CommRecord {
    CommRecord {
        round,
        ..CommRecord::default()
    }
}

/// Per-client validation metrics where client `k` uses `models[k]`.
pub fn evaluate_per_client(
    pool: &rayon::ThreadPool,
    settings: &TrainSettings,
    models: &[ParamVector],
    views: &[ClientView],
    split: Split3,
) -> Result<MetricSummary> {
    let per: Vec<Vec<f64>> = pool.install(|| {
        views
            .par_iter()
            .zip(models)
            .map(|(v, w)| example_metrics(&settings.spec, w, &split.of(v).batch))
            .collect::<Result<_>>()
    })?;
    Ok(MetricSummary::from_examples(&per))
}

/// `matrix[i][j]`: mean metric of client `i`'s model on client `j`'s split.
pub fn cross_evaluation(settings: &TrainSettings, models: &[ParamVector], views: &[ClientView], split: Split3) -> Result<Vec<Vec<f64>>> {
    models
        .iter()
        .map(|w| {
            views
                .iter()
                .map(|v| {
                    let m = example_metrics(&settings.spec, w, &split.of(v).batch)?;
                    Ok(m.iter().sum::<f64>() / m.len().max(1) as f64)
                })
                .collect()
        })
        .collect()
}

pub fn cross_evaluation_csv(matrix: &[Vec<f64>]) -> String {
    let k = matrix.len();
    let mut s = String::from("model");
    for j in 1..=k {
        s.push_str(&format!(",client_{j}"));
    }
    s.push('\n');
    for (i, row) in matrix.iter().enumerate() {
        s.push_str(&format!("client_{}", i + 1));
        for v in row {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

/// All clients' training splits pooled into one trainer. One round is
/// `local_epochs` passes over the pooled data.
pub fn train_centralized(settings: &TrainSettings, views: &[ClientView]) -> Result<(ParamVector, Vec<RoundReport>)> {
    settings.validate()?;
    if views.is_empty() {
        return Err(Error::Empty("no clients to pool"));
    }
    let parts: Vec<&SplitView> = views.iter().map(|v| &v.train).collect();
    let pooled = ClientView {
        client_id: 1,
        train: SplitView::concat(&parts)?,
        val: views[0].val.clone(),
        test: views[0].test.clone(),
    };
    let pool = settings.pool()?;
    let dim = settings.spec.param_count();
    let mut client = ClientState::new(&pooled, settings.seed, &[(settings.optimizer, dim)], 0);
    let mut w = settings.init();
    let mut best = BestTracker::default();
    let mut reports = Vec::with_capacity(settings.rounds);
    for r in 0..settings.rounds {
        let start = Instant::now();
        let before = w.clone();
        let (next, stats) = client.local_train(settings, &w, r, &LocalMode::Plain)?;
        w = next;
        let val = if settings.eval_each_round {
            Some(evaluate_shared(&pool, &settings.spec, &w, views, Split3::Val)?)
        } else {
            None
        };
        reports.push(RoundReport {
            round: r + 1,
            algo: "centralized".into(),
            best_client_avg: best.update(&val),
            val,
            train_loss: stats.mean_loss,
            comm: zero_comm(r + 1),
            update_norm: w.dist_sq(&before)?.sqrt(),
            wall_ms: elapsed_ms(settings, start),
        });
    }
    Ok((w, reports))
}

#[derive(Clone, Debug)]
pub struct LocalOnlyRun {
    pub models: Vec<ParamVector>,
    pub reports: Vec<RoundReport>,
}

/// Every client trains alone from the shared init for `rounds × local_epochs`
/// epochs.
pub fn train_local_only(settings: &TrainSettings, views: &[ClientView]) -> Result<LocalOnlyRun> {
    settings.validate()?;
    let pool = settings.pool()?;
    let dim = settings.spec.param_count();
    let mut clients: Vec<ClientState<'_>> = views
        .iter()
        .map(|v| ClientState::new(v, settings.seed, &[(settings.optimizer, dim)], 0))
        .collect();
    let init = settings.init();
    let mut models = vec![init; views.len()];
    let mut best = BestTracker::default();
    let mut reports = Vec::with_capacity(settings.rounds);
    for r in 0..settings.rounds {
        let start = Instant::now();
        let outs: Vec<(ParamVector, f64)> = pool.install(|| {
            clients
                .par_iter_mut()
                .zip(&models)
                .map(|(c, w)| {
                    let id = c.client_id;
                    tag_client(id, c.local_train(settings, w, r, &LocalMode::Plain).map(|(w, s)| (w, s.mean_loss)))
                })
                .collect::<Result<_>>()
        })?;
        let n: usize = views.iter().map(|v| v.train.len()).sum();
        let train_loss = outs
            .iter()
            .zip(views)
            .map(|(o, v)| o.1 * v.train.len() as f64 / n as f64)
            .sum();
        models = outs.into_iter().map(|o| o.0).collect();
        let val = if settings.eval_each_round {
            Some(evaluate_per_client(&pool, settings, &models, views, Split3::Val)?)
        } else {
            None
        };
        reports.push(RoundReport {
            round: r + 1,
            algo: "local".into(),
            best_client_avg: best.update(&val),
            val,
            train_loss,
            comm: zero_comm(r + 1),
            update_norm: 0.0,
            wall_ms: elapsed_ms(settings, start),
        });
    }
    Ok(LocalOnlyRun { models, reports })
}

/// Continues training `global` on one client's training split for `epochs`
/// epochs with a fresh optimizer.
pub fn train_fine_tune(settings: &TrainSettings, global: &ParamVector, view: &ClientView, epochs: usize) -> Result<ParamVector> {
    if epochs == 0 {
        return Ok(global.clone());
    }
    let schedule = batch_schedule_for(
        "finetune",
        settings.seed,
        view.client_id,
        0,
        view.train.len(),
        settings.batch_size,
        epochs,
    );
    let mut opt = OptimizerState::new(settings.optimizer, global.dim());
    let (w, _) = train_on_schedule(
        &settings.spec,
        settings.loss,
        &mut opt,
        &view.train.batch,
        global,
        &schedule,
        &LocalMode::Plain,
        |_| {},
    )?;
    Ok(w)
}

#[derive(Clone, Debug)]
pub struct PersonalizedRun {
    pub federated: FedRun,
    pub personalized: Vec<ParamVector>,
}

/// FedAvg followed by per-client fine-tuning.
pub fn train_fine_tune_all(settings: &TrainSettings, views: &[ClientView], epochs: usize) -> Result<PersonalizedRun> {
    let federated = train_federated(settings, views, FedAlgo::FedAvg, None)?;
    let global = &federated.server.global;
    let pool = settings.pool()?;
    let personalized = pool.install(|| {
        views
            .par_iter()
            .map(|v| tag_client(v.client_id, train_fine_tune(settings, global, v, epochs)))
            .collect::<Result<_>>()
    })?;
    Ok(PersonalizedRun { federated, personalized })
}

/// Minimizes `L_k(α·w_p + (1−α)·w_g)` over `w_p` from the model init for
/// `epochs` epochs (gradient `α·∇L_k` at the interpolated point) and returns
/// `(w_p*, α·w_p* + (1−α)·w_g)`.
pub fn apfl_personalize(
    settings: &TrainSettings,
    global: &ParamVector,
    view: &ClientView,
    alpha: f64,
    epochs: usize,
) -> Result<(ParamVector, ParamVector)> {
    let mut wp = settings.init();
    let mut opt = OptimizerState::new(settings.optimizer, wp.dim());
    let schedule = batch_schedule_for(
        "apfl",
        settings.seed,
        view.client_id,
        0,
        view.train.len(),
        settings.batch_size,
        epochs,
    );
    for idx in &schedule {
        let batch = view.train.batch.select(idx);
        let v = axpby(alpha, &wp, 1.0 - alpha, global)?;
        let (_, g) = models::backward(&settings.spec, &v, &batch, settings.loss)?;
        opt.step(&mut wp, &g.scale(alpha))?;
    }
    let mixed = axpby(alpha, &wp, 1.0 - alpha, global)?;
    Ok((wp, mixed))
}

/// FedAvg for the global model, then per-client interpolated training for
/// `rounds × local_epochs` epochs.
pub fn train_apfl(settings: &TrainSettings, views: &[ClientView], alpha: f64) -> Result<PersonalizedRun> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("apfl alpha must be in [0, 1], got {alpha}")));
    }
    let federated = train_federated(settings, views, FedAlgo::FedAvg, None)?;
    let global = &federated.server.global;
    let epochs = settings.rounds * settings.local_epochs;
    let pool = settings.pool()?;
    let personalized = pool.install(|| {
        views
            .par_iter()
            .map(|v| tag_client(v.client_id, apfl_personalize(settings, global, v, alpha, epochs).map(|r| r.1)))
            .collect::<Result<_>>()
    })?;
    Ok(PersonalizedRun { federated, personalized })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, view, GenConfig, Task};
    use crate::losses::LossKind;
    use crate::models::ModelSpec;
    use crate::optim::OptimizerConfig;

    fn quad(sizes: &[usize]) -> (TrainSettings, Vec<ClientView>) {
        let ds = generate(&GenConfig {
            seed: 11,
            sizes: sizes.to_vec(),
            task: Task::Quadratic,
            quad_dim: 3,
            ..GenConfig::default()
        })
        .unwrap();
        let mut s = TrainSettings::new(ModelSpec::quadratic(3), LossKind::Mse, OptimizerConfig::sgd(0.5, 0.0));
        s.rounds = 60;
        (s, view(&ds).unwrap())
    }

    fn center(v: &ClientView) -> Vec<f64> {
        v.train.batch.targets.row(0).to_vec()
    }

    fn close(a: &ParamVector, b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn local_only_reaches_each_center() {
        let (s, views) = quad(&[8, 20, 12]);
        let run = train_local_only(&s, &views).unwrap();
        for (w, v) in run.models.iter().zip(&views) {
            assert!(close(w, &center(v), 1e-8));
        }
        let m = cross_evaluation(&s, &run.models, &views, Split3::Test).unwrap();
        assert_eq!(m.len(), 3);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(m[i][i] > m[i][j]);
                }
            }
        }
        assert_eq!(cross_evaluation_csv(&m).lines().count(), 4);
    }

    #[test]
    fn fine_tune_limits() {
        let (s, views) = quad(&[8, 20]);
        let g = ParamVector::from_vec(vec![0.3, 0.1, -0.2]);
        assert_eq!(train_fine_tune(&s, &g, &views[0], 0).unwrap(), g);
        let mut frozen = s.clone();
        frozen.optimizer.lr = 0.0;
        assert_eq!(train_fine_tune(&frozen, &g, &views[0], 3).unwrap(), g);
        let w = train_fine_tune(&s, &g, &views[1], 80).unwrap();
        assert!(close(&w, &center(&views[1]), 1e-8));
    }

    #[test]
    fn apfl_limits_and_fixed_point() {
        let (s, views) = quad(&[8, 20]);
        let g = ParamVector::from_vec(vec![1.0, -1.0, 0.5]);
        let (_, mixed) = apfl_personalize(&s, &g, &views[0], 0.0, 5).unwrap();
        assert_eq!(mixed, g);
        let c = center(&views[0]);
        let (wp, mixed) = apfl_personalize(&s, &g, &views[0], 1.0, 100).unwrap();
        assert!(close(&wp, &c, 1e-8) && close(&mixed, &c, 1e-8));
        // α = 0.5: minimizer w_p = (c − (1−α)·w_g)/α, and the mix lands on c.
        let (wp, mixed) = apfl_personalize(&s, &g, &views[0], 0.5, 400).unwrap();
        let want: Vec<f64> = c.iter().zip(g.iter()).map(|(ci, gi)| (ci - 0.5 * gi) / 0.5).collect();
        assert!(close(&wp, &want, 1e-8));
        assert!(close(&mixed, &c, 1e-8));
    }

    #[test]
    fn centralized_with_one_client_matches_local() {
        let (mut s, views) = quad(&[8, 20]);
        s.rounds = 3;
        s.batch_size = 3;
        let (w, reports) = train_centralized(&s, &views[..1]).unwrap();
        let local = train_local_only(&s, &views[..1]).unwrap();
        assert_eq!(w, local.models[0]);
        assert_eq!(reports.len(), 3);
    }
}
