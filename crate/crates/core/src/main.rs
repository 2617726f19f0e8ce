//! `dgsml` command-line harness.
//!
//! Exit codes: 0 success, 1 failed check or all runs failed, 2 usage or
//! configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use dgsml::domains::{
    generate_rotated_moons, generate_shifted_gaussians, mask_labels, write_collection, DataError, GaussiansSpec,
    MoonsSpec,
};
use dgsml::experiment::{
    run_experiment, write_ablation_table, DatasetSpec, ExperimentConfig, ExperimentError, ExperimentOutcome, Method,
    Summary, Variant, ABLATION_FILE,
};
use dgsml::gradcheck::{self, GradcheckOptions};
use dgsml::model::ModelError;
use dgsml::trainer::TrainError;

const OUT_DIR_ENV: &str = "DGSML_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "dgsml",
    version,
    about = "Semi-supervised domain generalization by episodic meta-learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain dataset.
    GenData(GenDataArgs),
    /// Train and evaluate methods over rates, seeds and target domains.
    Train(TrainArgs),
    /// Compare DGSML with each of its losses removed and with first-order updates.
    Ablate(RunArgs),
    /// Check gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Generator {
    Moons,
    Gaussians,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum, default_value = "moons")]
    generator: Generator,
    /// Number of domains; defaults to the length of the shift list.
    #[arg(long)]
    domains: Option<usize>,
    /// Rotation per domain in degrees (moons).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    rotations: Option<Vec<f64>>,
    /// Diagonal translation per domain (gaussians).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    translations: Option<Vec<f64>>,
    /// Classes (gaussians; moons always has 2).
    #[arg(long)]
    classes: Option<usize>,
    /// Samples per domain.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Distance of class centres from the layout centre (gaussians).
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Withhold this fraction of labels per domain.
    #[arg(long, default_value_t = 0.0)]
    rate: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory or CSV written by gen-data, instead of the default benchmark.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Unlabeled rates in [0, 1).
    #[arg(long, value_delimiter = ',')]
    rates: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// `all` or a comma separated list of domain ids.
    #[arg(long)]
    targets: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    alpha0: Option<f64>,
    #[arg(long)]
    alpha1: Option<f64>,
    #[arg(long)]
    beta0: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    batch_per_domain: Option<usize>,
    /// Treat the inner update as constant in the outer gradient.
    #[arg(long)]
    first_order: bool,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    feature_dim: Option<usize>,
    /// Concurrent runs; 0 uses every core.
    #[arg(long)]
    jobs: Option<usize>,
    /// Skip runs already in the metrics file.
    #[arg(long)]
    resume: bool,
    #[arg(long, env = OUT_DIR_ENV)]
    out: Option<PathBuf>,
    /// Suppress per-run progress lines.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Methods: dgsml, deepall, dgsml-no-sl, dgsml-no-align, dgsml-neither, dgsml-first-order.
    #[arg(long, visible_alias = "method", value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the report as JSON to this file.
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

/// An error with its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        let code = if is_usage(&error) { 2 } else { 1 };
        Failure { code, error }
    }
}

fn is_usage(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        matches!(c.downcast_ref::<ExperimentError>(), Some(ExperimentError::Config(_)))
            || matches!(c.downcast_ref::<TrainError>(), Some(TrainError::Config(_)))
            || matches!(c.downcast_ref::<DataError>(), Some(DataError::Config(_)))
            || matches!(c.downcast_ref::<ModelError>(), Some(ModelError::Config(_)))
            || c.downcast_ref::<serde_json::Error>().is_some()
    })
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        error: anyhow::anyhow!(msg.into()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn shifts(list: Option<Vec<f64>>, domains: Option<usize>, step: f64, default: Vec<f64>) -> Result<Vec<f64>, Failure> {
    match (list, domains) {
        (Some(l), Some(n)) if l.len() != n => Err(usage(format!("--domains {n} but {} shifts given", l.len()))),
        (Some(l), _) => Ok(l),
        (None, Some(n)) => Ok((0..n).map(|i| i as f64 * step).collect()),
        (None, None) => Ok(default),
    }
}

fn gen_data(a: GenDataArgs) -> Result<ExitCode, Failure> {
    let data = match a.generator {
        Generator::Moons => {
            if a.translations.is_some() || a.classes.is_some() || a.separation.is_some() {
                return Err(usage(
                    "--translations, --classes and --separation apply to the gaussians generator",
                ));
            }
            let d = MoonsSpec::default();
            generate_rotated_moons(&MoonsSpec {
                rotations: shifts(a.rotations, a.domains, 30.0, d.rotations)?,
                samples_per_domain: a.n.unwrap_or(d.samples_per_domain),
                noise_sd: a.noise.unwrap_or(d.noise_sd),
                seed: a.seed,
            })?
        }
        Generator::Gaussians => {
            if a.rotations.is_some() {
                return Err(usage("--rotations applies to the moons generator"));
            }
            let d = GaussiansSpec::default();
            generate_shifted_gaussians(&GaussiansSpec {
                num_classes: a.classes.unwrap_or(d.num_classes),
                translations: shifts(a.translations, a.domains, 1.0, d.translations)?,
                samples_per_domain: a.n.unwrap_or(d.samples_per_domain),
                class_separation: a.separation.unwrap_or(d.class_separation),
                noise_sd: a.noise.unwrap_or(d.noise_sd),
                seed: a.seed,
            })?
        }
    };
    let data = mask_labels(&data, a.rate, a.seed)?;
    write_collection(&data, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "wrote {} domains, {} samples to {}",
        data.domains.len(),
        data.total_samples(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn parse_targets(s: &str) -> Result<Vec<usize>, Failure> {
    if s.trim() == "all" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| t.trim().parse().map_err(|_| usage(format!("bad target id `{t}`"))))
        .collect()
}

fn build_config(a: &RunArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::from_json_file(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(p) = &a.data {
        cfg.dataset = DatasetSpec::Csv { path: p.clone() };
    }
    if let Some(r) = &a.rates {
        cfg.rates = r.clone();
    }
    if let Some(s) = &a.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(t) = &a.targets {
        cfg.targets = parse_targets(t)?;
    }
    let hp = &mut cfg.hyper;
    let overrides = [
        (a.alpha0, &mut hp.alpha0),
        (a.alpha1, &mut hp.alpha1),
        (a.beta0, &mut hp.beta0),
        (a.beta1, &mut hp.beta1),
    ];
    for (flag, slot) in overrides {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    if let Some(v) = a.iterations {
        hp.iterations = v;
    }
    if let Some(v) = a.batch_per_domain {
        hp.batch_per_domain = v;
    }
    if let Some(v) = a.eval_every {
        hp.eval_every = v;
    }
    if a.first_order {
        hp.second_order = false;
    }
    if let Some(h) = &a.hidden {
        cfg.model.hidden_dims = h.clone();
    }
    if let Some(f) = a.feature_dim {
        cfg.model.feature_dim = f;
    }
    if let Some(j) = a.jobs {
        cfg.jobs = j;
    }
    if a.resume {
        cfg.resume = true;
    }
    if let Some(o) = &a.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn print_summary(summary: &Summary) {
    println!(
        "{:<20} {:>6} {:>6} {:>3} {:>8} {:>8}",
        "method", "target", "rate", "n", "mean", "std_err"
    );
    for e in &summary.entries {
        let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{:.4}", v));
        println!(
            "{:<20} {:>6} {:>6} {:>3} {:>8} {:>8}",
            e.method.to_string(),
            e.target,
            e.rate,
            e.n,
            f(e.mean),
            f(e.std_err)
        );
    }
    for o in &summary.overall {
        println!(
            "{:<20} {:>6} {:>6} {:>3} {:>8.4}",
            o.method.to_string(),
            "all",
            o.rate,
            o.targets,
            o.mean
        );
    }
}

fn execute(cfg: &ExperimentConfig, quiet: bool) -> Result<ExperimentOutcome, Failure> {
    let mut progress = |r: &dgsml::experiment::MetricsRecord, done: usize, total: usize| {
        if !quiet {
            let acc = r.accuracy.map_or("diverged".to_string(), |a| format!("{a:.4}"));
            eprintln!(
                "[{done}/{total}] {} target={} rate={} seed={} accuracy={acc}",
                r.method, r.target, r.rate, r.seed
            );
        }
    };
    let out = run_experiment(cfg, &mut progress)?;
    if out.skipped > 0 && !quiet {
        eprintln!("skipped {} runs already present", out.skipped);
    }
    Ok(out)
}

fn finish(out: &ExperimentOutcome, dir: &Path) -> ExitCode {
    print_summary(&out.summary);
    println!("results in {}", dir.display());
    if out.executed_all_failed() {
        eprintln!("error: every run diverged");
        return ExitCode::from(1);
    }
    ExitCode::SUCCESS
}

fn train(a: TrainArgs) -> Result<ExitCode, Failure> {
    let mut cfg = build_config(&a.run)?;
    if let Some(ms) = &a.methods {
        cfg.methods = ms.iter().map(|m| m.parse()).collect::<Result<Vec<Method>, _>>()?;
    }
    let out = execute(&cfg, a.run.quiet)?;
    Ok(finish(&out, &cfg.out_dir))
}

fn ablate(a: RunArgs) -> Result<ExitCode, Failure> {
    let mut cfg = build_config(&a)?;
    cfg.methods = Variant::ALL.iter().map(|&v| Method::Dgsml(v)).collect();
    let out = execute(&cfg, a.quiet)?;
    let table = write_ablation_table(&out.summary, &cfg.out_dir.join(ABLATION_FILE))?;
    if !a.quiet {
        eprint!("{table}");
    }
    Ok(finish(&out, &cfg.out_dir))
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode, Failure> {
    let opts = GradcheckOptions {
        cases_per_op: a.cases,
        seed: a.seed,
        inject_fault: a.inject_fault,
        ..GradcheckOptions::default()
    };
    let report = gradcheck::run(&opts)?;
    print!("{report}");
    if let Some(p) = &a.json {
        std::fs::write(p, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    let failures = report.failures();
    if failures.is_empty() {
        println!("all checks passed");
        return Ok(ExitCode::SUCCESS);
    }
    let names: Vec<&str> = failures.iter().map(|c| c.name.as_str()).collect();
    eprintln!("failed: {}", names.join(", "));
    Ok(ExitCode::from(1))
}
