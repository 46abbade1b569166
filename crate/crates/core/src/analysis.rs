//! Checks on the math behind the personalized objective: the stacked
//! objective `F` and its gradient, closed forms for quadratic clients,
//! convergence diagnostics over a recorded trace, 1D loss-surface slices and
//! the held-out client routing harness.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, ClientView, FederationDataset};
use crate::error::{Error, Result};
use crate::fedsm::{routed_metrics, selection_frequencies, train_fedsm, FedsmConfig, StepTrace, SuperModel};
use crate::flcore::TrainSettings;
use crate::losses::LossKind;
use crate::math::{Differentiable, Matrix, ParamVector, RngStream};
use crate::models::{self, Batch, ModelSpec};

pub const DEFAULT_TAIL_FRACTION: f64 = 0.2;
pub const DEFAULT_SURFACE_DIRS: usize = 10;
pub const DEFAULT_SURFACE_RADIUS: f64 = 1.0;
pub const DEFAULT_SURFACE_STEPS: usize = 41;

fn check_objective_lambda(k: usize, lambda: f64) -> Result<()> {
    if k < 2 {
        return Err(Error::invalid(format!("the personalized objective needs K >= 2, got {k}")));
    }
    let lo = 1.0 / k as f64;
    if !(lambda > lo && lambda <= 1.0) {
        return Err(Error::invalid(format!("lambda must be in (1/K, 1] = ({lo}, 1], got {lambda}")));
    }
    Ok(())
}

/// `u_k = (1/λ)·w_k − ((1−λ)/λ)·mean_{k'≠k} w_{k'}`.
pub fn u_map(ws: &[ParamVector], lambda: f64) -> Result<Vec<ParamVector>> {
    check_objective_lambda(ws.len(), lambda)?;
    let k = ws.len();
    let dim = ws[0].dim();
    if let Some(w) = ws.iter().find(|w| w.dim() != dim) {
        return Err(Error::DimensionMismatch { left: dim, right: w.dim() });
    }
    let mut total = vec![0.0; dim];
    for w in ws {
        for (t, v) in total.iter_mut().zip(w.iter()) {
            *t += v;
        }
    }
    let self_c = 1.0 / lambda;
    let other_c = (1.0 - lambda) / (lambda * (k as f64 - 1.0));
    Ok(ws
        .iter()
        .map(|w| {
            ParamVector::from_vec(
                w.iter()
                    .zip(&total)
                    .map(|(wi, ti)| self_c * wi - other_c * (ti - wi))
                    .collect(),
            )
        })
        .collect())
}

/// `F(w_1..w_K) = Σ_k L_k(u_k)` over each client's full training split.
#[derive(Clone, Copy)]
pub struct ObjectiveF<'a> {
    pub spec: &'a ModelSpec,
    pub loss: LossKind,
    pub views: &'a [ClientView],
    pub lambda: f64,
}

impl<'a> ObjectiveF<'a> {
    pub fn new(spec: &'a ModelSpec, loss: LossKind, views: &'a [ClientView], lambda: f64) -> Result<Self> {
        check_objective_lambda(views.len(), lambda)?;
        Ok(ObjectiveF { spec, loss, views, lambda })
    }

    pub fn k(&self) -> usize {
        self.views.len()
    }

    fn check(&self, ws: &[ParamVector]) -> Result<()> {
        if ws.len() != self.k() {
            return Err(Error::DimensionMismatch { left: self.k(), right: ws.len() });
        }
        Ok(())
    }
}

pub fn eval_f(obj: &ObjectiveF<'_>, ws: &[ParamVector]) -> Result<f64> {
    obj.check(ws)?;
    let us = u_map(ws, obj.lambda)?;
    us.iter()
        .zip(obj.views)
        .map(|(u, v)| models::loss_value(obj.spec, u, &v.train.batch, obj.loss))
        .sum()
}

/// `∂F/∂w_k = (1/λ)·∇L_k(u_k) − ((1−λ)/(λ(K−1)))·Σ_{k'≠k} ∇L_{k'}(u_{k'})`.
pub fn grad_f(obj: &ObjectiveF<'_>, ws: &[ParamVector]) -> Result<(f64, Vec<ParamVector>)> {
    obj.check(ws)?;
    let us = u_map(ws, obj.lambda)?;
    let parts: Vec<(f64, ParamVector)> = us
        .iter()
        .zip(obj.views)
        .map(|(u, v)| models::backward(obj.spec, u, &v.train.batch, obj.loss))
        .collect::<Result<_>>()?;
    let value = parts.iter().map(|p| p.0).sum();
    let dim = ws[0].dim();
    let mut total = vec![0.0; dim];
    for (_, g) in &parts {
        for (t, v) in total.iter_mut().zip(g.iter()) {
            *t += v;
        }
    }
    let lambda = obj.lambda;
    let self_c = 1.0 / lambda;
    let other_c = (1.0 - lambda) / (lambda * (obj.k() as f64 - 1.0));
    let grads = parts
        .iter()
        .map(|(_, g)| {
            ParamVector::from_vec(
                g.iter()
                    .zip(&total)
                    .map(|(gi, ti)| self_c * gi - other_c * (ti - gi))
                    .collect(),
            )
        })
        .collect();
    Ok((value, grads))
}

/// `F` over the concatenation of all K weight vectors, for finite-difference
/// checks.
pub struct StackedF<'a>(pub ObjectiveF<'a>);

impl StackedF<'_> {
    pub fn split(&self, w: &ParamVector) -> Result<Vec<ParamVector>> {
        let d = self.0.spec.param_count();
        if w.dim() != d * self.0.k() {
            return Err(Error::DimensionMismatch {
                left: d * self.0.k(),
                right: w.dim(),
            });
        }
        Ok(w.as_slice().chunks(d).map(|c| ParamVector::from_vec(c.to_vec())).collect())
    }
}

impl Differentiable for StackedF<'_> {
    fn dim(&self) -> usize {
        self.0.spec.param_count() * self.0.k()
    }

    fn value(&self, w: &ParamVector) -> Result<f64> {
        eval_f(&self.0, &self.split(w)?)
    }

    fn value_and_grad(&self, w: &ParamVector) -> Result<(f64, ParamVector)> {
        let (v, gs) = grad_f(&self.0, &self.split(w)?)?;
        Ok((v, ParamVector::from_vec(gs.into_iter().flat_map(ParamVector::into_vec).collect())))
    }
}

// ---------------------------------------------------------------------------
// Quadratic closed forms

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticOracle {
    /// `λc_k + ((1−λ)/(K−1))·Σ_{k'≠k} c_{k'}`.
    pub eq8: Vec<ParamVector>,
    /// Solution of `w_k = λc_k + ((1−λ)/(K−1))·Σ_{k'≠k} w_{k'}`.
    pub eq7_solution: Vec<ParamVector>,
    pub fedavg_point: ParamVector,
    /// `max_k ‖eq8[k] − eq7_solution[k]‖`.
    pub discrepancy: f64,
    /// Max absolute residual of `eq7_solution` in its linear system.
    pub residual: f64,
}

/// Solves `a·x = b` for every column of `b` (row-major, `n × m`) by
/// Gaussian elimination with partial pivoting.
#[allow(clippy::needless_range_loop)]
pub fn solve_dense(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n || b.rows() != n {
        return Err(Error::DimensionMismatch { left: n, right: b.rows() });
    }
    let m = b.cols();
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
    let mut b: Vec<Vec<f64>> = (0..n).map(|i| b.row(i).to_vec()).collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .unwrap();
        if a[piv][col].abs() < 1e-300 {
            return Err(Error::invalid("singular linear system"));
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            for c in 0..m {
                b[r][c] -= f * b[col][c];
            }
        }
    }
    let mut x = vec![vec![0.0; m]; n];
    for r in (0..n).rev() {
        for c in 0..m {
            let s: f64 = (r + 1..n).map(|j| a[r][j] * x[j][c]).sum();
            x[r][c] = (b[r][c] - s) / a[r][r];
        }
    }
    Matrix::from_rows(&x)
}

pub fn quadratic_oracle(centers: &[ParamVector], lambda: f64) -> Result<QuadraticOracle> {
    let k = centers.len();
    if k < 2 {
        return Err(Error::invalid(format!("the oracle needs K >= 2 centers, got {k}")));
    }
    let lo = 1.0 / k as f64;
    if !(lambda >= lo - 1e-12 && lambda <= 1.0) {
        return Err(Error::invalid(format!("lambda must be in [1/K, 1], got {lambda}")));
    }
    let dim = centers[0].dim();
    if let Some(c) = centers.iter().find(|c| c.dim() != dim) {
        return Err(Error::DimensionMismatch { left: dim, right: c.dim() });
    }
    let a_off = (1.0 - lambda) / (k as f64 - 1.0);
    let mut total = vec![0.0; dim];
    for c in centers {
        for (t, v) in total.iter_mut().zip(c.iter()) {
            *t += v;
        }
    }
    let eq8: Vec<ParamVector> = centers
        .iter()
        .map(|c| ParamVector::from_vec(c.iter().zip(&total).map(|(ci, ti)| lambda * ci + a_off * (ti - ci)).collect()))
        .collect();
    let mut a = Matrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            a.row_mut(i)[j] = if i == j { 1.0 } else { -a_off };
        }
    }
    let rhs = Matrix::from_rows(&centers.iter().map(|c| c.iter().map(|v| lambda * v).collect()).collect::<Vec<_>>())?;
    let x = solve_dense(&a, &rhs)?;
    let eq7_solution: Vec<ParamVector> = (0..k).map(|i| ParamVector::from_vec(x.row(i).to_vec())).collect();
    let mut residual = 0.0f64;
    for i in 0..k {
        for d in 0..dim {
            let lhs: f64 = (0..k).map(|j| a.get(i, j) * x.get(j, d)).sum();
            residual = residual.max((lhs - rhs.get(i, d)).abs());
        }
    }
    let discrepancy = eq8
        .iter()
        .zip(&eq7_solution)
        .map(|(p, q)| p.dist_sq(q).map(f64::sqrt))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let fedavg_point = ParamVector::from_vec(total.iter().map(|t| t / k as f64).collect());
    Ok(QuadraticOracle {
        eq8,
        eq7_solution,
        fedavg_point,
        discrepancy,
        residual,
    })
}

// ---------------------------------------------------------------------------
// Convergence diagnostics

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremTrace {
    pub lambda: f64,
    /// `(1/K)·Σ_k ‖∂F/∂w_k‖²` at every recorded `(round, step)`.
    pub grad_sq: Vec<f64>,
    /// Round index of each sample.
    pub sample_round: Vec<usize>,
    pub running_avg: Vec<f64>,
    /// `Σ_k ‖w_k − w̄‖²` after the last local step of each round.
    pub dispersion: Vec<f64>,
    /// Mean of the last `tail_fraction` of `grad_sq`.
    pub tail_avg: f64,
    pub floor: f64,
    pub below_floor: bool,
}

/// Gradient-norm samples of `F` along a recorded trace. Clients that took
/// fewer local steps in a round contribute their last step to later samples.
pub fn theorem_diagnostics(trace: &StepTrace, obj: &ObjectiveF<'_>, floor: f64, tail_fraction: f64) -> Result<TheoremTrace> {
    if trace.rounds.is_empty() {
        return Err(Error::Empty("no rounds in trace"));
    }
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(Error::invalid(format!("tail fraction must be in (0, 1], got {tail_fraction}")));
    }
    let k = obj.k();
    let mut grad_sq = Vec::new();
    let mut sample_round = Vec::new();
    let mut dispersion = Vec::with_capacity(trace.rounds.len());
    for (r, clients) in trace.rounds.iter().enumerate() {
        if clients.len() != k {
            return Err(Error::DimensionMismatch { left: k, right: clients.len() });
        }
        if clients.iter().any(Vec::is_empty) {
            return Err(Error::Empty("client with no local steps in trace"));
        }
        let m_max = clients.iter().map(Vec::len).max().unwrap();
        let samples: Vec<f64> = (0..m_max)
            .into_par_iter()
            .map(|m| {
                let ws: Vec<ParamVector> = clients.iter().map(|s| s[m.min(s.len() - 1)].clone()).collect();
                let (_, gs) = grad_f(obj, &ws)?;
                Ok(gs.iter().map(ParamVector::norm_sq).sum::<f64>() / k as f64)
            })
            .collect::<Result<_>>()?;
        sample_round.extend(std::iter::repeat_n(r + 1, samples.len()));
        grad_sq.extend(samples);
        let last: Vec<&ParamVector> = clients.iter().map(|s| s.last().unwrap()).collect();
        let dim = last[0].dim();
        let mut mean = vec![0.0; dim];
        for w in &last {
            for (m, v) in mean.iter_mut().zip(w.iter()) {
                *m += v / k as f64;
            }
        }
        dispersion.push(
            last.iter()
                .map(|w| w.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .sum(),
        );
    }
    let mut running_avg = Vec::with_capacity(grad_sq.len());
    let mut acc = 0.0;
    for (i, g) in grad_sq.iter().enumerate() {
        acc += g;
        running_avg.push(acc / (i + 1) as f64);
    }
    let n_tail = ((grad_sq.len() as f64 * tail_fraction).ceil() as usize).clamp(1, grad_sq.len());
    let tail = &grad_sq[grad_sq.len() - n_tail..];
    let tail_avg = tail.iter().sum::<f64>() / n_tail as f64;
    Ok(TheoremTrace {
        lambda: obj.lambda,
        grad_sq,
        sample_round,
        running_avg,
        dispersion,
        tail_avg,
        floor,
        below_floor: tail_avg < floor,
    })
}

/// True when tail averages never decrease as λ decreases.
pub fn tail_monotone_in_lambda(traces: &[TheoremTrace]) -> bool {
    let mut v: Vec<(f64, f64)> = traces.iter().map(|t| (t.lambda, t.tail_avg)).collect();
    v.sort_by(|a, b| b.0.total_cmp(&a.0));
    v.windows(2).all(|p| p[1].1 >= p[0].1)
}

pub fn theorem_trace_csv(t: &TheoremTrace) -> String {
    let mut s = String::from("sample,round,grad_sq,running_avg,dispersion\n");
    for (i, g) in t.grad_sq.iter().enumerate() {
        let r = t.sample_round[i];
        s.push_str(&format!("{},{},{},{},{}\n", i + 1, r, g, t.running_avg[i], t.dispersion[r - 1]));
    }
    s
}

// ---------------------------------------------------------------------------
// Loss surface

#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceProfile {
    pub ts: Vec<f64>,
    /// `n_dirs × steps` loss values.
    pub losses: Matrix,
    pub mean: Vec<f64>,
}

/// Random unit direction `idx` of the probe around a run with master `seed`.
pub fn surface_direction(seed: u64, idx: usize, dim: usize) -> ParamVector {
    let mut r = RngStream::new(seed, "surface", idx as u64, 0).rng();
    loop {
        let d: Vec<f64> = (0..dim).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            return ParamVector::from_vec(d.into_iter().map(|v| v / n).collect());
        }
    }
}

/// Mean loss over `batch` at `w + t·d` for `t` evenly spaced on
/// `[−radius, radius]`, along `n_dirs` random unit directions.
#[allow(clippy::too_many_arguments)]
pub fn loss_surface_1d(
    spec: &ModelSpec,
    loss: LossKind,
    w: &ParamVector,
    batch: &Batch,
    n_dirs: usize,
    radius: f64,
    steps: usize,
    seed: u64,
) -> Result<SurfaceProfile> {
    if n_dirs == 0 {
        return Err(Error::invalid("loss surface needs at least one direction"));
    }
    if steps < 3 {
        return Err(Error::invalid(format!("loss surface needs at least 3 steps, got {steps}")));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::invalid(format!("radius must be positive, got {radius}")));
    }
    let ts: Vec<f64> = (0..steps)
        .map(|i| -radius + 2.0 * radius * i as f64 / (steps - 1) as f64)
        .collect();
    let rows: Vec<Vec<f64>> = (0..n_dirs)
        .into_par_iter()
        .map(|i| {
            let d = surface_direction(seed, i, w.dim());
            ts.iter()
                .map(|t| {
                    let mut p = w.clone();
                    p.add_scaled(*t, &d)?;
                    models::loss_value(spec, &p, batch, loss)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let mean = (0..steps)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n_dirs as f64)
        .collect();
    Ok(SurfaceProfile {
        ts,
        losses: Matrix::from_rows(&rows)?,
        mean,
    })
}

pub fn surface_csv(p: &SurfaceProfile) -> String {
    let mut s = String::from("t");
    for i in 1..=p.losses.rows() {
        s.push_str(&format!(",dir_{i}"));
    }
    s.push_str(",mean\n");
    for (j, t) in p.ts.iter().enumerate() {
        s.push_str(&t.to_string());
        for i in 0..p.losses.rows() {
            s.push_str(&format!(",{}", p.losses.get(i, j)));
        }
        s.push_str(&format!(",{}\n", p.mean[j]));
    }
    s
}

// ---------------------------------------------------------------------------
// Held-out client

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnseenRow {
    pub gamma: f64,
    /// Selection frequency of the global model followed by the K−1
    /// personalized models.
    pub frequencies: Vec<f64>,
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnseenReport {
    pub held_out: usize,
    pub rows: Vec<UnseenRow>,
}

/// Splits a federation's views into the renumbered remaining clients and
/// the held-out one.
pub fn hold_out(ds: &FederationDataset, held_out: usize) -> Result<(Vec<ClientView>, ClientView)> {
    let (rest, held) = ds.without_client(held_out)?;
    let views = data::view(&rest)?;
    let held_view = ClientView {
        client_id: held_out,
        train: data::view_split(&ds.config, &held.train)?,
        val: data::view_split(&ds.config, &held.val)?,
        test: data::view_split(&ds.config, &held.test)?,
    };
    Ok((views, held_view))
}

/// Evaluates one trained super model on a held-out client's test split at
/// each threshold. `0` and `1` are always included.
pub fn unseen_rows(sm: &SuperModel, held: &ClientView, gammas: &[f64]) -> Result<Vec<UnseenRow>> {
    let mut gs: Vec<f64> = gammas.to_vec();
    gs.extend([0.0, 1.0]);
    if let Some(g) = gs.iter().find(|g| !(0.0..=1.0).contains(*g)) {
        return Err(Error::invalid(format!("gamma must be in [0, 1], got {g}")));
    }
    gs.sort_by(f64::total_cmp);
    gs.dedup();
    gs.par_iter()
        .map(|g| {
            let mut m = sm.clone();
            m.gamma = *g;
            let (metrics, chosen) = routed_metrics(&m, &held.test)?;
            Ok(UnseenRow {
                gamma: *g,
                frequencies: selection_frequencies(&chosen, m.k()),
                metric: metrics.iter().sum::<f64>() / metrics.len().max(1) as f64,
            })
        })
        .collect()
}

/// Trains the super model without client `held_out` and routes that
/// client's test split at every threshold.
pub fn unseen_client_harness(
    settings: &TrainSettings,
    cfg: &FedsmConfig,
    ds: &FederationDataset,
    held_out: usize,
    gammas: &[f64],
) -> Result<(UnseenReport, SuperModel)> {
    if ds.k() < 3 {
        return Err(Error::invalid(format!("holding out a client needs K >= 3, got {}", ds.k())));
    }
    let (views, held) = hold_out(ds, held_out)?;
    let run = train_fedsm(settings, cfg, &views)?;
    let rows = settings.pool()?.install(|| unseen_rows(&run.model, &held, gammas))?;
    Ok((UnseenReport { held_out, rows }, run.model))
}

pub fn unseen_csv(report: &UnseenReport) -> String {
    let k = report.rows.first().map_or(0, |r| r.frequencies.len().saturating_sub(1));
    let mut s = String::from("gamma,freq_global");
    for i in 1..=k {
        s.push_str(&format!(",freq_personalized_{i}"));
    }
    s.push_str(",metric\n");
    for r in &report.rows {
        s.push_str(&r.gamma.to_string());
        for f in &r.frequencies {
            s.push_str(&format!(",{f}"));
        }
        s.push_str(&format!(",{}\n", r.metric));
    }
    s
}

/// Selector inputs of every training example, tagged with the client id.
pub fn features_csv(views: &[ClientView]) -> String {
    let width = views.first().map_or(0, |v| v.train.selector_inputs.cols());
    let mut s = String::from("client");
    for i in 0..width {
        s.push_str(&format!(",f{i}"));
    }
    s.push('\n');
    for v in views {
        let m = &v.train.selector_inputs;
        for i in 0..m.rows() {
            s.push_str(&v.client_id.to_string());
            for x in m.row(i) {
                s.push_str(&format!(",{x}"));
            }
            s.push('\n');
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, view, GenConfig, Task};
    use crate::fd_gradient_check;
    use crate::optim::OptimizerConfig;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_vec(v.to_vec())
    }

    fn quad_views(k: usize, seed: u64) -> (ModelSpec, Vec<ClientView>) {
        let ds = generate(&GenConfig {
            seed,
            sizes: vec![10; k],
            task: Task::Quadratic,
            quad_dim: 3,
            ..GenConfig::default()
        })
        .unwrap();
        (ModelSpec::quadratic(3), view(&ds).unwrap())
    }

    fn centers(views: &[ClientView]) -> Vec<ParamVector> {
        views.iter().map(|v| pv(v.train.batch.targets.row(0))).collect()
    }

    #[test]
    fn oracle_two_clients_by_hand() {
        let o = quadratic_oracle(&[pv(&[1.0]), pv(&[0.0])], 0.7).unwrap();
        assert!((o.eq8[0][0] - 0.7).abs() < 1e-15);
        assert!((o.eq8[1][0] - 0.3).abs() < 1e-15);
        assert!((o.eq7_solution[0][0] - 10.0 / 13.0).abs() < 1e-14);
        assert!((o.eq7_solution[1][0] - 3.0 / 13.0).abs() < 1e-14);
        assert!((o.discrepancy - (10.0 / 13.0 - 0.7)).abs() < 1e-12);
        assert!(o.residual < 1e-12);
        assert_eq!(o.fedavg_point, pv(&[0.5]));
    }

    #[test]
    fn oracle_degenerate_cases() {
        let cs = vec![pv(&[1.0, 2.0]), pv(&[-3.0, 0.5]), pv(&[0.0, 4.0])];
        let o = quadratic_oracle(&cs, 1.0).unwrap();
        assert!(o.discrepancy < 1e-12);
        let same = vec![pv(&[1.5, -2.0]); 4];
        let o = quadratic_oracle(&same, 0.6).unwrap();
        assert!(o.discrepancy < 1e-12);
        assert!(o.eq7_solution.iter().all(|w| w.dist_sq(&same[0]).unwrap() < 1e-24));
        assert!(quadratic_oracle(&cs[..1], 1.0).is_err());
    }

    #[test]
    fn objective_limits() {
        let (spec, views) = quad_views(3, 2);
        let ws = vec![pv(&[0.1, 0.2, 0.3]), pv(&[-1.0, 0.0, 2.0]), pv(&[0.5, 0.5, -0.5])];
        let obj = ObjectiveF::new(&spec, LossKind::Mse, &views, 1.0).unwrap();
        let plain: f64 = ws
            .iter()
            .zip(&views)
            .map(|(w, v)| models::loss_value(&spec, w, &v.train.batch, LossKind::Mse).unwrap())
            .sum();
        assert!((eval_f(&obj, &ws).unwrap() - plain).abs() < 1e-12);
        let same = vec![ws[0].clone(); 3];
        for u in u_map(&same, 0.6).unwrap() {
            assert!(u.dist_sq(&ws[0]).unwrap() < 1e-28);
        }
        assert!(ObjectiveF::new(&spec, LossKind::Mse, &views, 1.0 / 3.0).is_err());
        assert!(ObjectiveF::new(&spec, LossKind::Mse, &views[..1], 1.0).is_err());
    }

    #[test]
    fn objective_minimum_at_oracle() {
        let (spec, views) = quad_views(4, 5);
        let lambda = 0.7;
        let o = quadratic_oracle(&centers(&views), lambda).unwrap();
        let obj = ObjectiveF::new(&spec, LossKind::Mse, &views, lambda).unwrap();
        // F reaches Σ L_k(c_k) = 0 exactly where every u_k = c_k, i.e. at the
        // solution of the interpolation system written with the centers.
        let target = invert_u(&centers(&views), lambda);
        let (v, gs) = grad_f(&obj, &target).unwrap();
        assert!(v < 1e-20);
        assert!(gs.iter().all(|g| g.norm_sq().sqrt() < 1e-8));
        assert!(o.residual < 1e-10);
    }

    // w with u(w) = c: u is linear, so solve column-wise on the K×K map.
    fn invert_u(cs: &[ParamVector], lambda: f64) -> Vec<ParamVector> {
        let k = cs.len();
        let oc = (1.0 - lambda) / (lambda * (k as f64 - 1.0));
        let mut a = Matrix::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                a.row_mut(i)[j] = if i == j { 1.0 / lambda } else { -oc };
            }
        }
        let b = Matrix::from_rows(&cs.iter().map(|c| c.as_slice().to_vec()).collect::<Vec<_>>()).unwrap();
        let x = solve_dense(&a, &b).unwrap();
        (0..k).map(|i| pv(x.row(i))).collect()
    }

    #[test]
    fn grad_matches_finite_differences() {
        let ds = generate(&GenConfig {
            seed: 3,
            sizes: vec![12, 9, 15],
            task: Task::Classification,
            feature_dim: 3,
            classes: 3,
            ..GenConfig::default()
        })
        .unwrap();
        let views = view(&ds).unwrap();
        let spec = ModelSpec::mlp_classifier(&[3, 4, 3], crate::Activation::Tanh);
        for (i, lambda) in [1.0, 0.8, 0.5].into_iter().enumerate() {
            let obj = ObjectiveF::new(&spec, LossKind::CrossEntropy, &views, lambda).unwrap();
            let st = StackedF(obj);
            let mut r = RngStream::new(9, "test", i as u64, 0).rng();
            let w = ParamVector::from_vec((0..st.dim()).map(|_| r.random_range(-0.5..0.5)).collect());
            assert!(fd_gradient_check(&st, &w, 1e-5).unwrap() < 1e-5);
        }
    }

    #[test]
    fn surface_of_quadratic_is_parabola() {
        let (spec, views) = quad_views(2, 4);
        let c = centers(&views)[0].clone();
        let p = loss_surface_1d(&spec, LossKind::Mse, &c, &views[0].train.batch, 10, 1.0, 41, 7).unwrap();
        assert_eq!(p.losses.rows(), 10);
        for i in 0..10 {
            for (j, t) in p.ts.iter().enumerate() {
                assert!((p.losses.get(i, j) - t * t / 2.0).abs() < 1e-10);
            }
        }
        assert_eq!(p.ts[20], 0.0);
        assert!(loss_surface_1d(&spec, LossKind::Mse, &c, &views[0].train.batch, 0, 1.0, 41, 7).is_err());
        assert!(loss_surface_1d(&spec, LossKind::Mse, &c, &views[0].train.batch, 1, 1.0, 2, 7).is_err());
        assert_eq!(surface_csv(&p).lines().count(), 42);
    }

    #[test]
    fn diagnostics_reject_bad_traces() {
        let (spec, views) = quad_views(2, 1);
        let obj = ObjectiveF::new(&spec, LossKind::Mse, &views, 1.0).unwrap();
        assert!(theorem_diagnostics(&StepTrace::default(), &obj, 1e-6, 0.2).is_err());
        let t = StepTrace {
            rounds: vec![vec![vec![pv(&[0.0; 3])], vec![]]],
        };
        assert!(theorem_diagnostics(&t, &obj, 1e-6, 0.2).is_err());
    }

    #[test]
    fn diagnostics_on_quadratic_runs() {
        let (spec, views) = quad_views(3, 8);
        let mut s = TrainSettings::new(spec.clone(), LossKind::Mse, OptimizerConfig::sgd(0.3, 0.0));
        s.rounds = 30;
        s.batch_size = 4;
        s.eval_each_round = false;
        let mut traces = Vec::new();
        for lambda in [1.0, 0.9, 0.7, 0.5] {
            let mut cfg = FedsmConfig::default();
            cfg.lambda = lambda;
            cfg.train_selector = false;
            cfg.record_trace = true;
            let run = train_fedsm(&s, &cfg, &views).unwrap();
            let obj = ObjectiveF::new(&spec, LossKind::Mse, &views, lambda).unwrap();
            let t = theorem_diagnostics(run.trace.as_ref().unwrap(), &obj, 1e-6, 0.2).unwrap();
            assert!(t.grad_sq.iter().all(|g| g.is_finite() && *g >= 0.0));
            assert_eq!(t.dispersion.len(), 30);
            traces.push(t);
        }
        assert!(traces[0].below_floor);
        assert!(tail_monotone_in_lambda(&traces));
        assert_eq!(theorem_trace_csv(&traces[0]).lines().count(), traces[0].grad_sq.len() + 1);
    }

    #[test]
    fn dense_solver() {
        let a = Matrix::from_rows(&[vec![0.0, 2.0], vec![1.0, 1.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![4.0], vec![3.0]]).unwrap();
        let x = solve_dense(&a, &b).unwrap();
        assert!((x.get(0, 0) - 1.0).abs() < 1e-15 && (x.get(1, 0) - 2.0).abs() < 1e-15);
        let s = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(solve_dense(&s, &b).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn oracle_residual_small(
                k in 2usize..7,
                raw in prop::collection::vec(-5.0f64..5.0, 14),
                t in 0.0f64..1.0,
            ) {
                let cs: Vec<ParamVector> = (0..k).map(|i| pv(&raw[2 * i..2 * i + 2])).collect();
                let lambda = 1.0 / k as f64 + t * (1.0 - 1.0 / k as f64);
                let o = quadratic_oracle(&cs, lambda).unwrap();
                prop_assert!(o.residual < 1e-10);
            }

            #[test]
            fn u_map_preserves_mean(
                raw in prop::collection::vec(-5.0f64..5.0, 12),
                t in 0.01f64..1.0,
            ) {
                let ws: Vec<ParamVector> = raw.chunks(3).map(pv).collect();
                let lambda = 0.25 + t * 0.75;
                let us = u_map(&ws, lambda).unwrap();
                for d in 0..3 {
                    let a: f64 = ws.iter().map(|w| w[d]).sum();
                    let b: f64 = us.iter().map(|u| u[d]).sum();
                    prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
                }
            }
        }
    }
}
