use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use krt_cli::config::{self, RunConfig};
use krt_cli::error::{CliError, Result};
use krt_cli::{compare, dplio, experiment};
use krt_core::datagen;
use krt_core::dpl::DplConfig;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "krt", version, about = "Incremental multi-label experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every session of one arm and write results, summary and curves.
    Run(RunArgs),
    /// Tabulate two or more finished runs against the first.
    Compare {
        /// results.json files or the run directories holding them.
        #[arg(required = true, num_args = 2..)]
        results: Vec<PathBuf>,
    },
    /// Pseudo-label a score matrix against a label file.
    Dpl(DplArgs),
    /// Write a synthetic dataset as train.mlds and test.mlds.
    Gen(GenArgs),
}

#[derive(Args, Default)]
struct Overrides {
    /// JSON config file; flags win over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any config field, e.g. `--set protocol.dpl.eta_step=0.02`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Overrides,
    #[arg(long)]
    arm: Option<String>,
    #[arg(long)]
    base: Option<usize>,
    #[arg(long)]
    inc: Option<usize>,
    #[arg(long, conflicts_with = "buffer_total")]
    buffer_per_class: Option<usize>,
    #[arg(long)]
    buffer_total: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    eta0: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    gamma_pos: Option<f64>,
    #[arg(long)]
    gamma_neg: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// f32 or f64.
    #[arg(long)]
    precision: Option<String>,
    /// Directory with train.mlds and test.mlds instead of generating.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct DplArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mu: Option<f64>,
    /// Target pseudo labels per image; derived from --mu when absent.
    #[arg(long)]
    mu_t: Option<f64>,
    #[arg(long)]
    total_classes: Option<usize>,
    #[arg(long)]
    eta0: Option<f64>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Overrides,
    #[arg(long)]
    out: PathBuf,
}

fn parse_sets(o: &Overrides) -> Result<Vec<(String, Value)>> {
    let mut sets = o
        .sets
        .iter()
        .map(|s| config::parse_assignment(s))
        .collect::<Result<Vec<_>>>()?;
    if let Some(s) = o.seed {
        sets.push(("seed".into(), json!(s)));
    }
    Ok(sets)
}

fn run_config(a: &RunArgs) -> Result<RunConfig> {
    let mut sets = parse_sets(&a.common)?;
    let mut put = |k: &str, v: Option<Value>| {
        if let Some(v) = v {
            sets.push((k.to_string(), v));
        }
    };
    put("protocol.arm", a.arm.as_ref().map(|v| json!(v)));
    put("protocol.base", a.base.map(|v| json!(v)));
    put("protocol.inc", a.inc.map(|v| json!(v)));
    put("protocol.buffer", a.buffer_per_class.map(|v| json!({ "per_class": v })));
    put("protocol.buffer", a.buffer_total.map(|v| json!({ "total": v })));
    put("protocol.loss.lambda", a.lambda.map(|v| json!(v)));
    put("protocol.loss.gamma_pos", a.gamma_pos.map(|v| json!(v)));
    put("protocol.loss.gamma_neg", a.gamma_neg.map(|v| json!(v)));
    put("protocol.dpl.eta_init", a.eta0.map(|v| json!(v)));
    put("protocol.dpl.mu", a.mu.map(|v| json!(v)));
    put("protocol.epochs", a.epochs.map(|v| json!(v)));
    put("out", a.out.as_ref().map(|v| json!(v)));
    put("precision", a.precision.as_ref().map(|v| json!(v)));
    put("data.dir", a.data_dir.as_ref().map(|v| json!(v)));
    config::resolve(a.common.config.as_deref(), &sets)
}

fn cmd_run(a: &RunArgs) -> Result<()> {
    let cfg = run_config(a)?;
    if a.print_config {
        println!(
            "{}",
            serde_json::to_string_pretty(&cfg).map_err(|e| CliError::Runtime(e.to_string()))?
        );
        return Ok(());
    }
    let finished = experiment::execute(&cfg)?;
    experiment::write_outputs(&finished, &cfg.out)?;
    let agg = &finished.result.aggregate;
    println!(
        "{} seed {}: avg mAP {:.2}, last mAP {:.2} -> {}",
        cfg.protocol.arm,
        cfg.seed,
        agg.avg_map,
        agg.last_map,
        cfg.out.display()
    );
    Ok(())
}

fn results_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(experiment::RESULTS_FILE)
    } else {
        p.to_path_buf()
    }
}

fn cmd_compare(paths: &[PathBuf]) -> Result<()> {
    let results = paths
        .iter()
        .map(|p| experiment::read_results(&results_path(p)))
        .collect::<Result<Vec<_>>>()?;
    print!("{}", compare::render(&compare::compare(&results)?));
    Ok(())
}

fn cmd_dpl(a: &DplArgs) -> Result<()> {
    let mut dpl = DplConfig::default();
    if let Some(mu) = a.mu {
        dpl.mu = mu;
    }
    if let Some(eta) = a.eta0 {
        dpl.eta_init = eta;
    }
    dpl.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let opts = dplio::Options {
        dpl,
        mu_t: a.mu_t,
        total_classes: a.total_classes,
    };
    let report = dplio::run_files(&a.scores, &a.labels, &a.out, &opts)?;
    println!(
        "{}",
        serde_json::to_string(&report).map_err(|e| CliError::Runtime(e.to_string()))?
    );
    Ok(())
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let cfg = config::resolve(a.common.config.as_deref(), &parse_sets(&a.common)?)?;
    cfg.data
        .generate
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let g = datagen::generate(&cfg.data.generate, cfg.data_seed())?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::Runtime(format!("{}: {e}", a.out.display())))?;
    for (name, ds) in [(experiment::TRAIN_FILE, &g.train), (experiment::TEST_FILE, &g.test)] {
        let p = a.out.join(name);
        datagen::save(ds, &p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
    }
    let info = experiment::fingerprint(&g.train, &g.test)?;
    println!(
        "{} train / {} test images, fingerprint {}",
        info.train_images, info.test_images, info.fingerprint
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("KRT_LOG", "error")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text
                .lines()
                .next()
                .unwrap_or("bad arguments")
                .trim_start_matches("error: ");
            eprintln!("{}", CliError::Config(first.to_string()).line());
            return ExitCode::from(2);
        }
    };
    let outcome = match &cli.cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Compare { results } => cmd_compare(results),
        Cmd::Dpl(a) => cmd_dpl(a),
        Cmd::Gen(a) => cmd_gen(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
