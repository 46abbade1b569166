//! Acceptance suite. Every test writes one `[PASS]`/`[FAIL]` line straight
//! to stderr (bypassing output capture) before asserting.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;

use fedsm_core::analysis::{self, ObjectiveF};
use fedsm_core::baselines;
use fedsm_core::data::{generate, view, ClientView, GenConfig, Task, LOW_SIMILARITY, TABLE1_SIZES};
use fedsm_core::experiment::{self, Algo, ExperimentConfig, Trained};
use fedsm_core::fedsm::{
    self, lambda_prime, route, softpull, train_fedsm, train_fedsm_extra, FedsmConfig, SuperModel,
};
use fedsm_core::flcore::{
    client_weights, new_clients, run_round, train_federated, FedAlgo, ServerState, TrainSettings,
};
use fedsm_core::math::{fd_gradient_check, weighted_mean, Matrix, ParamVector, RngStream};
use fedsm_core::models::{Activation, Batch, ModelObjective, ModelSpec};
use fedsm_core::{LossKind, OptimizerConfig};

fn report(id: u32, name: &str, pass: bool, detail: &str, start: Instant) {
    let line = format!(
        "[{}] criterion {id:>2} {name}: {detail} ({:.1}s)\n",
        if pass { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn pv(v: Vec<f64>) -> ParamVector {
    ParamVector::from_vec(v)
}

fn quad_views(seed: u64, sizes: &[usize], dim: usize) -> Vec<ClientView> {
    let ds = generate(&GenConfig {
        seed,
        sizes: sizes.to_vec(),
        task: Task::Quadratic,
        quad_dim: dim,
        ..GenConfig::default()
    })
    .unwrap();
    view(&ds).unwrap()
}

fn center(v: &ClientView) -> ParamVector {
    pv(v.train.batch.targets.row(0).to_vec())
}

fn classification_views(seed: u64, sizes: &[usize]) -> Vec<ClientView> {
    let ds = generate(&GenConfig {
        seed,
        sizes: sizes.to_vec(),
        task: Task::Classification,
        similarity: LOW_SIMILARITY,
        ..GenConfig::default()
    })
    .unwrap();
    view(&ds).unwrap()
}

fn classification_settings(seed: u64, rounds: usize) -> TrainSettings {
    let spec = ModelSpec::mlp_classifier(&[8, 6, 4], Activation::Tanh);
    let mut s = TrainSettings::new(spec, LossKind::CrossEntropy, OptimizerConfig::adam(0.01));
    s.rounds = rounds;
    s.seed = seed;
    s.batch_size = 16;
    s
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_01_gradient_correctness() {
    let start = Instant::now();
    let kinds = [
        ModelSpec::mlp_classifier(&[4, 5, 3], Activation::Tanh),
        ModelSpec::pixel_segmenter(&[3, 4, 1], Activation::Tanh, 6),
        ModelSpec::selector(&[5, 4, 3], Activation::Tanh),
        ModelSpec::quadratic(5),
    ];
    let losses = [LossKind::soft_dice(), LossKind::CrossEntropy, LossKind::Mse];
    let mut worst = 0.0f64;
    let mut checks = 0;
    for (ki, spec) in kinds.iter().enumerate() {
        for (li, loss) in losses.iter().enumerate() {
            let mut r = RngStream::new(1, "acceptance-grad", ki as u64, li as u64).rng();
            for _ in 0..100 {
                let w = pv((0..spec.param_count()).map(|_| r.random_range(-1.0..1.0)).collect());
                let n = r.random_range(1..6);
                let in_w = spec.input_dim * spec.pixels;
                let inputs = Matrix::from_vec(n, in_w, (0..n * in_w).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
                let t_w = spec.target_row_width();
                let targets: Vec<f64> = match spec.kind {
                    fedsm_core::ModelKind::Quadratic => (0..n * t_w).map(|_| r.random_range(-2.0..2.0)).collect(),
                    fedsm_core::ModelKind::PixelSegmenter => {
                        (0..n * t_w).map(|_| if r.random_bool(0.4) { 1.0 } else { 0.0 }).collect()
                    }
                    _ => (0..n)
                        .flat_map(|_| {
                            let c = r.random_range(0..t_w);
                            (0..t_w).map(move |j| if j == c { 1.0 } else { 0.0 })
                        })
                        .collect(),
                };
                let batch = Batch::new(inputs, Matrix::from_vec(n, t_w, targets).unwrap()).unwrap();
                let obj = ModelObjective {
                    spec,
                    batch: &batch,
                    loss: *loss,
                };
                worst = worst.max(fd_gradient_check(&obj, &w, 1e-5).unwrap());
                checks += 1;
            }
        }
    }
    let pass = worst < 1e-5 && start.elapsed().as_secs() < 30;
    report(
        1,
        "gradient correctness",
        pass,
        &format!("{checks} checks, max rel err {worst:.2e} (< 1e-5)"),
        start,
    );
    assert!(pass);
}

#[test]
fn criterion_02_softpull_algebra() {
    let start = Instant::now();
    let mut r = RngStream::new(2, "acceptance-softpull", 0, 0).rng();
    let (mut ea, mut eb, mut ec, mut ed) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for k in [2usize, 3, 6] {
        for _ in 0..1000 {
            let dim = r.random_range(1..8);
            let ws: Vec<ParamVector> = (0..k)
                .map(|_| pv((0..dim).map(|_| r.random_range(-10.0..10.0)).collect()))
                .collect();
            let mean = weighted_mean(&ws, &vec![1.0; k]).unwrap();
            let lo = 1.0 / k as f64;
            let hard = softpull(&ws, lo).unwrap();
            for o in &hard {
                ea = ea.max(o.iter().zip(mean.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
            }
            let id = softpull(&ws, 1.0).unwrap();
            for (o, w) in id.iter().zip(&ws) {
                eb = eb.max(o.iter().zip(w.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
            }
            let lambda = lo + r.random::<f64>() * (1.0 - lo);
            let out = softpull(&ws, lambda).unwrap();
            let lp = lambda_prime(k, lambda);
            for (o, w) in out.iter().zip(&ws) {
                for ((a, wi), m) in o.iter().zip(w.iter()).zip(mean.iter()) {
                    ec = ec.max((a - (lp * wi + (1.0 - lp) * m)).abs());
                }
            }
            let out_mean = weighted_mean(&out, &vec![1.0; k]).unwrap();
            ed = ed.max(out_mean.iter().zip(mean.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }
    let pass = ea <= 1e-12 && eb <= 1e-12 && ec <= 1e-12 && ed <= 1e-12 && start.elapsed().as_secs() < 5;
    report(
        2,
        "SoftPull algebra",
        pass,
        &format!("hard-avg {ea:.1e}, identity {eb:.1e}, lambda' form {ec:.1e}, mean {ed:.1e} (each <= 1e-12)"),
        start,
    );
    assert!(pass);
}

/// Global weights after each of `rounds` rounds.
fn trajectory(settings: &TrainSettings, views: &[ClientView], algo: FedAlgo, rounds: usize) -> Vec<ParamVector> {
    let pool = settings.pool().unwrap();
    let dim = settings.spec.param_count();
    let mut clients = new_clients(views, settings, if algo == FedAlgo::Scaffold { dim } else { 0 });
    let mut server = ServerState::new(settings.init(), views.iter().map(|v| v.train.len()).collect());
    (0..rounds)
        .map(|_| {
            run_round(&mut server, &mut clients, settings, algo, &pool).unwrap();
            server.global.clone()
        })
        .collect()
}

#[test]
fn criterion_03_reduction_equivalences() {
    let start = Instant::now();
    let views = classification_views(3, &[40, 70, 30, 90]);
    let base = classification_settings(3, 10);
    let fedavg = trajectory(&base, &views, FedAlgo::FedAvg, 10);
    let mut prox = base.clone();
    prox.mu_prox = 0.0;
    let fedprox = trajectory(&prox, &views, FedAlgo::FedProx, 10);
    let mut zero = base.clone();
    zero.scaffold_zero_variates = true;
    let scaffold = trajectory(&zero, &views, FedAlgo::Scaffold, 10);
    let prox_eq = fedavg == fedprox;
    let scaf_eq = fedavg == scaffold;
    let moved = fedavg[0] != fedavg[9];
    let pass = prox_eq && scaf_eq && moved && start.elapsed().as_secs() < 60;
    report(
        3,
        "reduction equivalences",
        pass,
        &format!("FedProx(mu=0)==FedAvg: {prox_eq}, SCAFFOLD(zero variates)==FedAvg: {scaf_eq}, 10 rounds bitwise"),
        start,
    );
    assert!(pass);
}

#[test]
fn criterion_04_quadratic_oracles() {
    let start = Instant::now();
    let sizes = [12, 30, 18, 44];
    let views = quad_views(4, &sizes, 3);
    let centers: Vec<ParamVector> = views.iter().map(center).collect();
    // 40 local epochs of SGD at lr 0.5 contract to the local optimum by at
    // least 2^-40 per round.
    let mut s = TrainSettings::new(ModelSpec::quadratic(3), LossKind::Mse, OptimizerConfig::sgd(0.5, 0.0));
    s.rounds = 5;
    s.local_epochs = 40;
    s.batch_size = 8;
    s.seed = 4;
    let fa = train_federated(&s, &views, FedAlgo::FedAvg, None).unwrap();
    let n_k: Vec<usize> = views.iter().map(|v| v.train.len()).collect();
    let target = weighted_mean(&centers, &client_weights(&n_k)).unwrap();
    let ea = fa.server.global.dist_sq(&target).unwrap().sqrt();

    let lambda = 0.7;
    let mut cfg = FedsmConfig::default();
    cfg.lambda = lambda;
    cfg.train_selector = false;
    let run = train_fedsm(&s, &cfg, &views).unwrap();
    let oracle = analysis::quadratic_oracle(&centers, lambda).unwrap();
    let eb = run
        .model
        .personalized
        .iter()
        .zip(&oracle.eq8)
        .map(|(w, e)| w.dist_sq(e).unwrap().sqrt())
        .fold(0.0, f64::max);

    let mut r = RngStream::new(4, "acceptance-oracle", 0, 0).rng();
    let mut ec = 0.0f64;
    for _ in 0..200 {
        let k = r.random_range(2..8);
        let cs: Vec<ParamVector> = (0..k).map(|_| pv((0..3).map(|_| r.random_range(-5.0..5.0)).collect())).collect();
        let l = 1.0 / k as f64 + r.random::<f64>() * (1.0 - 1.0 / k as f64);
        ec = ec.max(analysis::quadratic_oracle(&cs, l).unwrap().residual);
    }
    let two = analysis::quadratic_oracle(&[pv(vec![1.0]), pv(vec![0.0])], 0.7).unwrap();
    let ed = (two.discrepancy - (0.7f64 - 10.0 / 13.0).abs()).abs();
    let pass = ea <= 1e-8 && eb <= 1e-8 && ec < 1e-10 && ed <= 1e-6 && start.elapsed().as_secs() < 10;
    report(
        4,
        "quadratic oracles",
        pass,
        &format!(
            "FedAvg fixed point err {ea:.1e}, SoftPull vs interpolation {eb:.1e}, solve residual {ec:.1e}, K=2 discrepancy {:.6} (err {ed:.1e})",
            two.discrepancy
        ),
        start,
    );
    assert!(pass);
}

#[test]
fn criterion_05_convergence_diagnostics() {
    let start = Instant::now();
    let lambdas = [1.0, 0.9, 0.7, 0.5];
    let mut all_ok = true;
    let mut details = Vec::new();
    for seed in 0..3u64 {
        let views = quad_views(seed, &[20, 40, 24, 60, 32, 80], 4);
        let mut s = TrainSettings::new(ModelSpec::quadratic(4), LossKind::Mse, OptimizerConfig::sgd(0.1, 0.0));
        s.rounds = 60;
        s.batch_size = 8;
        s.seed = seed;
        s.eval_each_round = false;
        let mut traces = Vec::new();
        for l in lambdas {
            let mut cfg = FedsmConfig::default();
            cfg.lambda = l;
            cfg.train_selector = false;
            cfg.record_trace = true;
            let run = train_fedsm(&s, &cfg, &views).unwrap();
            let obj = ObjectiveF::new(&s.spec, s.loss, &views, l).unwrap();
            traces.push(
                analysis::theorem_diagnostics(run.trace.as_ref().unwrap(), &obj, 1e-6, analysis::DEFAULT_TAIL_FRACTION)
                    .unwrap(),
            );
        }
        let mono = analysis::tail_monotone_in_lambda(&traces);
        let floor = traces[0].below_floor;
        all_ok &= mono && floor;
        details.push(format!(
            "seed {seed}: tails [{}] floor ok {floor} monotone {mono}",
            traces.iter().map(|t| format!("{:.2e}", t.tail_avg)).collect::<Vec<_>>().join(", ")
        ));
    }
    let pass = all_ok && start.elapsed().as_secs() < 120;
    report(5, "convergence diagnostics", pass, &details.join("; "), start);
    assert!(pass);
}

#[test]
fn criterion_06_routing_limits() {
    let start = Instant::now();
    let views = classification_views(6, &[1000, 1000, 1000, 1000]);
    let mut s = classification_settings(6, 5);
    s.batch_size = 64;
    let run = train_fedsm(&s, &FedsmConfig::default(), &views).unwrap();
    let dir = tempfile::tempdir().unwrap();
    fedsm::save_supermodel(&run.model, dir.path()).unwrap();
    let sm = fedsm::load_supermodel(dir.path()).unwrap();
    let inputs: Vec<&Matrix> = views.iter().map(|v| &v.test.selector_inputs).collect();
    let total: usize = inputs.iter().map(|m| m.rows()).sum();
    let frac_global = |gamma: f64| {
        let m = SuperModel { gamma, ..sm.clone() };
        let chosen: Vec<usize> = inputs.iter().flat_map(|x| route(&m, x).unwrap()).collect();
        chosen.iter().filter(|c| **c == 0).count() as f64 / chosen.len() as f64
    };
    let (g1, g0) = (frac_global(1.0), frac_global(0.0));
    let pass = total >= 1000 && g1 == 1.0 && g0 == 0.0 && start.elapsed().as_secs() < 10;
    report(
        6,
        "routing limits",
        pass,
        &format!("{total} test examples; global share at gamma=1: {g1}, at gamma=0: {g0}"),
        start,
    );
    assert!(pass);
}

/// Test-split client-average metric per algorithm for one seed of the
/// low-similarity segmentation protocol.
struct OrderingRun {
    fedavg: f64,
    scaffold: f64,
    central: f64,
    fedsm: f64,
    selector_acc: f64,
}

fn protocol_config(algo: Algo) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.algo = algo;
    c.rounds = 100;
    c.data.sizes = TABLE1_SIZES.to_vec();
    c.data.similarity = LOW_SIMILARITY;
    c.optimizer = OptimizerConfig::adam(0.03);
    c.batch_size = 32;
    c.local_epochs = 1;
    c.lambda = 0.7;
    c.gamma = 0.5;
    c.eval_each_round = false;
    c
}

fn ordering_runs() -> &'static (Vec<OrderingRun>, f64) {
    static RUNS: OnceLock<(Vec<OrderingRun>, f64)> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let runs = (0..3u64)
            .map(|seed| {
                let metric = |algo| {
                    let run = experiment::train_run(&protocol_config(algo), seed).unwrap();
                    let m = experiment::run_metrics(&run).unwrap();
                    (m.client_avg, run)
                };
                let (fedavg, _) = metric(Algo::FedAvg);
                let (scaffold, _) = metric(Algo::Scaffold);
                let (central, _) = metric(Algo::Centralized);
                let (fedsm, run) = metric(Algo::Fedsm);
                let sm = match &run.trained {
                    Trained::Super(sm) => sm.clone(),
                    _ => unreachable!(),
                };
                let argmax = SuperModel { gamma: 0.0, ..sm };
                let (mut hit, mut n) = (0usize, 0usize);
                for v in &run.views {
                    let chosen = route(&argmax, &v.test.selector_inputs).unwrap();
                    hit += chosen.iter().filter(|c| **c == v.client_id).count();
                    n += chosen.len();
                }
                OrderingRun {
                    fedavg,
                    scaffold,
                    central,
                    fedsm,
                    selector_acc: hit as f64 / n as f64,
                }
            })
            .collect();
        (runs, start.elapsed().as_secs_f64())
    })
}

#[test]
fn criterion_07_directional_ordering() {
    let start = Instant::now();
    let (runs, secs) = ordering_runs();
    let mean = |f: fn(&OrderingRun) -> f64| runs.iter().map(f).sum::<f64>() / runs.len() as f64;
    let (fedsm, fedavg, scaffold, central) = (mean(|r| r.fedsm), mean(|r| r.fedavg), mean(|r| r.scaffold), mean(|r| r.central));
    let fedsm_gap = central - fedsm;
    let fedavg_gap = central - fedavg;
    let pass = fedsm >= fedavg && fedavg >= scaffold && fedsm_gap <= 0.01 && fedavg_gap > fedsm_gap && *secs < 900.0;
    report(
        7,
        "directional ordering",
        pass,
        &format!(
            "mean test dice over 3 seeds: FedSM {fedsm:.4}, FedAvg {fedavg:.4}, SCAFFOLD {scaffold:.4}, centralized {central:.4}; \
             deficits FedSM {fedsm_gap:.4} (<= 0.01), FedAvg {fedavg_gap:.4}; training {secs:.0}s"
        ),
        start,
    );
    assert!(pass);
}

#[test]
fn criterion_08_selector_quality() {
    let start = Instant::now();
    let (runs, _) = ordering_runs();
    let accs: Vec<f64> = runs.iter().map(|r| r.selector_acc).collect();
    let pass = accs.iter().all(|a| *a >= 0.95);
    report(
        8,
        "selector quality",
        pass,
        &format!(
            "held-out source-client accuracy per seed [{}] (each >= 0.95)",
            accs.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(", ")
        ),
        start,
    );
    assert!(pass);
}

#[test]
fn criterion_09_communication_ledger() {
    let start = Instant::now();
    let views = classification_views(9, &[30, 50, 40]);
    let s = classification_settings(9, 4);
    let mut cfg = FedsmConfig::default();
    cfg.extra_rounds = 3;
    let dg = s.spec.param_count() as u64;

    let base = train_fedsm(&s, &cfg, &views).unwrap();
    let ds = base.model.selector.dim() as u64;
    let ok_base = base
        .ledger
        .records
        .iter()
        .all(|r| r.down == 2 * dg + ds && r.up == 2 * dg + ds);

    let extra = train_fedsm_extra(&s, &cfg, &views).unwrap();
    let ds_x = extra.model.selector.dim() as u64;
    let (p1, p2) = extra.ledger.records.split_at(s.rounds);
    let ok_extra = p1.iter().all(|r| r.down == 2 * dg && r.up == 2 * dg)
        && p2.len() == cfg.extra_rounds
        && p2.iter().all(|r| r.down == ds_x && r.up == ds_x);

    let fa = train_federated(&s, &views, FedAlgo::FedAvg, None).unwrap();
    let ok_fa = fa.reports.iter().all(|r| r.comm.down == dg && r.comm.up == dg);
    let pass = ok_base && ok_extra && ok_fa && base.ledger.records.len() == s.rounds;
    report(
        9,
        "communication ledger",
        pass,
        &format!(
            "dim(w_g)={dg}, dim(w_s)={ds}/{ds_x}: FedSM 2w_g+w_s {ok_base}, FedSM-extra phases {ok_extra}, FedAvg {ok_fa}"
        ),
        start,
    );
    assert!(pass);
}

#[test]
fn criterion_10_unseen_client_harness() {
    let start = Instant::now();
    let mut cfg = protocol_config(Algo::Fedsm);
    cfg.rounds = 40;
    let gammas: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let mut ok = true;
    let mut details = Vec::new();
    for held in 1..=TABLE1_SIZES.len() {
        let ds = cfg.dataset(0).unwrap();
        let settings = cfg.settings(&ds, 0);
        let (rep, _) = analysis::unseen_client_harness(&settings, &cfg.fedsm_config(), &ds, held, &gammas).unwrap();
        let sums_ok = rep.rows.iter().all(|r| (r.frequencies.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        let zero_ok = rep.rows[0].gamma == 0.0 && rep.rows[0].frequencies[0] == 0.0;
        let mono = rep.rows.windows(2).all(|w| w[1].frequencies[0] >= w[0].frequencies[0]);
        ok &= sums_ok && zero_ok && mono;
        details.push(format!(
            "k={held}: GM share {:.2}->{:.2}",
            rep.rows[0].frequencies[0],
            rep.rows.last().unwrap().frequencies[0]
        ));
    }
    let pass = ok && start.elapsed().as_secs() < 600;
    report(10, "unseen-client harness", pass, &details.join(", "), start);
    assert!(pass);
}

#[test]
fn criterion_11_determinism() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = protocol_config(Algo::Fedsm);
    cfg.rounds = 5;
    cfg.repeats = 1;
    cfg.data.sizes = vec![20, 30, 24, 40];
    cfg.eval_each_round = true;
    let mut outs = Vec::new();
    for threads in [1, 4, 1] {
        cfg.threads = threads;
        cfg.out = tmp.path().join(format!("t{threads}-{}", outs.len()));
        outs.push(experiment::run_experiment(&cfg).unwrap().dir.join("run_1_seed_0"));
    }
    let mut files = vec!["rounds.csv".to_string(), "bundle/manifest.json".into(), "bundle/global.bin".into(), "bundle/selector.bin".into()];
    files.extend((1..=4).map(|k| format!("bundle/personalized_{k}.bin")));
    let same = files.iter().all(|f| {
        let a = std::fs::read(outs[0].join(f)).unwrap();
        outs[1..].iter().all(|o| std::fs::read(o.join(f)).unwrap() == a)
    });
    report(
        11,
        "determinism",
        same,
        &format!("{} artifacts byte-identical across 3 runs (threads 1, 4, 1): {same}", files.len()),
        start,
    );
    assert!(same);
}

#[test]
fn criterion_12_loss_surface() {
    let start = Instant::now();
    let views = quad_views(12, &[16, 24, 20], 5);
    let spec = ModelSpec::quadratic(5);
    let c = center(&views[0]);
    let p = analysis::loss_surface_1d(&spec, LossKind::Mse, &c, &views[0].train.batch, 10, 1.0, 41, 12).unwrap();
    let mut err = 0.0f64;
    for i in 0..p.losses.rows() {
        for (j, t) in p.ts.iter().enumerate() {
            err = err.max((p.losses.get(i, j) - t * t / 2.0).abs());
        }
    }
    let mut s = TrainSettings::new(spec.clone(), LossKind::Mse, OptimizerConfig::sgd(0.3, 0.0));
    s.rounds = 40;
    s.batch_size = 4;
    s.eval_each_round = false;
    let local = baselines::train_local_only(&s, &views).unwrap();
    let mut min_ok = true;
    let mut convex = true;
    for (w, v) in local.models.iter().zip(&views) {
        let p = analysis::loss_surface_1d(&spec, LossKind::Mse, w, &v.train.batch, 10, 1.0, 41, 12).unwrap();
        let argmin = (0..p.mean.len()).min_by(|a, b| p.mean[*a].total_cmp(&p.mean[*b])).unwrap();
        min_ok &= p.ts[argmin] == 0.0;
        for i in 0..p.losses.rows() {
            for j in 1..p.ts.len() - 1 {
                convex &= p.losses.get(i, j - 1) - 2.0 * p.losses.get(i, j) + p.losses.get(i, j + 1) > 0.0;
            }
        }
    }
    let pass = err <= 1e-10 && min_ok && convex;
    report(
        12,
        "loss-surface probe",
        pass,
        &format!("parabola err {err:.1e} (<= 1e-10), local-only minimum at t=0: {min_ok}, strictly convex: {convex}"),
        start,
    );
    assert!(pass);
}
