use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fedsm_core::analysis;
use fedsm_core::data;
use fedsm_core::experiment::{self, Algo, ExperimentConfig, SweepParam};
use fedsm_core::flcore::Split3;
use fedsm_core::Error;

#[derive(Parser)]
#[command(name = "fedsm", version, about = "Federated super-model experiments on synthetic non-iid clients")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

// Flags shared by every subcommand; each overrides the matching config key.
#[derive(Args, Clone, Default)]
struct Common {
    /// `key = value` config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file and before the
    /// named flags.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    algo: Option<String>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    extra_rounds: Option<usize>,
    #[arg(long)]
    local_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    selector_lr: Option<f64>,
    #[arg(long)]
    mu_prox: Option<f64>,
    /// Saved FEDS dataset to use instead of generating one.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// `low`, `high` or a number in [0, 1].
    #[arg(long)]
    similarity: Option<String>,
    #[arg(long)]
    task: Option<String>,
    /// Output root directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> fedsm_core::Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config {
                field: kv.clone(),
                message: "expected KEY=VALUE".into(),
            })?;
            c.set(k.trim(), v.trim())?;
        }
        let pairs: [(&str, Option<String>); 17] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("algo", self.algo.clone()),
            ("rounds", self.rounds.map(|v| v.to_string())),
            ("extra_rounds", self.extra_rounds.map(|v| v.to_string())),
            ("local_epochs", self.local_epochs.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("repeats", self.repeats.map(|v| v.to_string())),
            ("threads", self.threads.map(|v| v.to_string())),
            ("lambda", self.lambda.map(|v| v.to_string())),
            ("gamma", self.gamma.map(|v| v.to_string())),
            ("optimizer.lr", self.lr.map(|v| v.to_string())),
            ("optimizer.selector_lr", self.selector_lr.map(|v| v.to_string())),
            ("optimizer.mu_prox", self.mu_prox.map(|v| v.to_string())),
            ("data.path", self.dataset.as_ref().map(|p| p.display().to_string())),
            ("data.similarity", self.similarity.clone()),
            ("data.task", self.task.clone()),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                c.set(k, &v)?;
            }
        }
        Ok(c)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Local,
    Ft,
    Apfl,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum AnalyzeKind {
    /// Gradient-norm diagnostics of the personalized objective across λ.
    Theorem {
        #[arg(long, value_delimiter = ',', default_value = "1.0,0.9,0.7,0.5")]
        lambdas: Vec<f64>,
        #[arg(long, default_value_t = 1e-6)]
        floor: f64,
    },
    /// 1D loss slices along random directions around a trained model.
    Surface {
        #[arg(long, default_value_t = analysis::DEFAULT_SURFACE_DIRS)]
        dirs: usize,
        #[arg(long, default_value_t = analysis::DEFAULT_SURFACE_RADIUS)]
        radius: f64,
        #[arg(long, default_value_t = analysis::DEFAULT_SURFACE_STEPS)]
        steps: usize,
    },
    /// Closed-form personalized optima for quadratic clients.
    Oracle,
    /// Export selector input features.
    Features,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a federation and save it as a FEDS file.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, short = 'o')]
        output: PathBuf,
    },
    /// Train the configured algorithm.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Route a dataset through a saved super-model bundle.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Personalization baselines.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        method: Method,
    },
    /// Retrain for each SoftPull λ and summarize.
    SweepLambda {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5,0.7,0.9")]
        values: Vec<f64>,
    },
    /// Re-route trained bundles for each selector threshold γ.
    SweepGamma {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        values: Vec<f64>,
    },
    /// Diagnostics and probes; writes CSVs under --dir.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Output directory (default `<out>/analysis`).
        #[arg(long, global = true)]
        dir: Option<PathBuf>,
        #[command(subcommand)]
        kind: AnalyzeKind,
    },
    /// Train without one client and route that client's test data.
    Unseen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        held_out: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        gammas: Vec<f64>,
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

fn print_metrics(m: &experiment::ExperimentMetrics) {
    println!("algo: {}", m.algo.name());
    for r in &m.runs {
        println!("seed {}: client_avg {:.4} global {:.4}", r.seed, r.client_avg, r.global);
    }
    println!("mean client_avg {:.4}", m.mean_client_avg);
    println!("mean global {:.4}", m.mean_global);
}

fn run(cli: Cli) -> fedsm_core::Result<()> {
    match cli.command {
        Command::GenData { common, output } => {
            let cfg = common.load()?;
            let ds = data::generate(&data::GenConfig {
                seed: cfg.seed,
                ..cfg.data.clone()
            })?;
            data::save_dataset(&ds, &output)?;
            println!("wrote {} ({} clients, sizes {:?})", output.display(), ds.k(), cfg.data.sizes);
        }
        Command::Train { common } => {
            let out = experiment::run_experiment(&common.load()?)?;
            print_metrics(&out.metrics);
            println!("output: {}", out.dir.display());
        }
        Command::Baseline { common, method } => {
            let mut cfg = common.load()?;
            cfg.algo = match method {
                Method::Local => Algo::Local,
                Method::Ft => Algo::FineTune,
                Method::Apfl => Algo::Apfl,
            };
            let out = experiment::run_experiment(&cfg)?;
            print_metrics(&out.metrics);
            println!("output: {}", out.dir.display());
        }
        Command::Infer { common, bundle, split } => {
            let cfg = common.load()?;
            cfg.validate()?;
            let ds = cfg.dataset(cfg.seed)?;
            let split = match split {
                SplitArg::Train => Split3::Train,
                SplitArg::Val => Split3::Val,
                SplitArg::Test => Split3::Test,
            };
            let gamma = common.gamma;
            let ev = experiment::infer_bundle(&bundle, &ds, gamma, split)?;
            for (i, m) in ev.summary.per_client.iter().enumerate() {
                println!("client {}: {m:.4}", i + 1);
            }
            println!("client_avg {:.4}", ev.summary.client_avg);
            println!("global {:.4}", ev.summary.global);
            if let Some(f) = ev.frequencies {
                let s: Vec<String> = f.iter().map(|v| format!("{v:.4}")).collect();
                println!("selection frequencies (global, personalized 1..K): {}", s.join(" "));
            }
        }
        Command::SweepLambda { common, values } => sweep(&common, SweepParam::Lambda, &values)?,
        Command::SweepGamma { common, values } => sweep(&common, SweepParam::Gamma, &values)?,
        Command::Analyze { common, dir, kind } => {
            let cfg = common.load()?;
            cfg.validate()?;
            let dir = dir.unwrap_or_else(|| cfg.out.join("analysis"));
            match kind {
                AnalyzeKind::Theorem { lambdas, floor } => {
                    let s = experiment::analyze_theorem(&cfg, &lambdas, floor, &dir)?;
                    for (l, t) in s.lambdas.iter().zip(&s.tail_avg) {
                        println!("lambda {l}: tail average {t:.3e}");
                    }
                    println!("nondecreasing as lambda decreases: {}", s.monotone);
                }
                AnalyzeKind::Surface { dirs, radius, steps } => {
                    let ps = experiment::analyze_surface(&cfg, dirs, radius, steps, &dir)?;
                    println!("wrote {} profile(s)", ps.len());
                }
                AnalyzeKind::Oracle => {
                    let o = experiment::analyze_oracle(&cfg, &dir)?;
                    println!("discrepancy {:.6e}, residual {:.3e}", o.discrepancy, o.residual);
                }
                AnalyzeKind::Features => experiment::analyze_features(&cfg, &dir)?,
            }
            println!("output: {}", dir.display());
        }
        Command::Unseen {
            common,
            held_out,
            gammas,
            dir,
        } => {
            let cfg = common.load()?;
            cfg.validate()?;
            let dir = dir.unwrap_or_else(|| cfg.out.join("unseen"));
            let r = experiment::run_unseen(&cfg, held_out, &gammas, &dir)?;
            for row in &r.rows {
                println!("gamma {}: global frequency {:.4}, metric {:.4}", row.gamma, row.frequencies[0], row.metric);
            }
            println!("output: {}", dir.display());
        }
    }
    Ok(())
}

fn sweep(common: &Common, param: SweepParam, values: &[f64]) -> fedsm_core::Result<()> {
    let (dir, rows) = experiment::sweep(&common.load()?, param, values)?;
    for r in rows {
        println!("{} {}: client_avg {:.4} global {:.4}", param.name(), r.value, r.client_avg, r.global);
    }
    println!("output: {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
