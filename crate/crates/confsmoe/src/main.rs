//! Operator surface: dataset generation, training runs, ablation sweeps,
//! and theory audits. Every command is a pure function of (config, seed) to
//! output files.

use clap::{Args, Parser, Subcommand};
use confsmoe::analysis::{
    conflict_probe, load_balance_grad, moe_jacobian_check, psd_audit, sample_sharp_simplex,
    ProbeDirection,
};
use confsmoe::config::{env_seed, ExperimentConfig};
use confsmoe::error::Error;
use confsmoe::moe::ExpertPool;
use confsmoe::rng::{stream, StreamKind};
use confsmoe::runio::{fmt_f64, write_text};
use confsmoe::sweep::{run_sweep, SweepSpec};
use confsmoe::synth::{apply_protocol, generate, save_dataset, Split};
use confsmoe::train::run_training;
use confsmoe_core::{Mat, Simplex};
use rand::Rng;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "confsmoe", version, about = "Confidence-guided sparse MoE laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override (beats config and CONFMOE_SEED).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory (meta.json + CSVs).
    Generate(CommonArgs),
    /// Train one model per the config; writes metrics.csv, selection.csv,
    /// run_meta.json.
    Train(CommonArgs),
    /// Run a gate/variant/impute/seed sweep; writes runs/ and summary.csv.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Worker pool size.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Numerical audits: PSD, gradient conflict, MoE Jacobian; writes
    /// conflict.csv.
    Analyze {
        #[command(flatten)]
        common: CommonArgs,
        /// Sharp-distribution conflict samples.
        #[arg(long, default_value_t = 1000)]
        sharp: usize,
        /// Experts for the conflict sweep.
        #[arg(long = "n-experts", default_value_t = 8)]
        n_experts: usize,
        /// PSD audit sample count.
        #[arg(long = "psd-samples", default_value_t = 1000)]
        psd_samples: usize,
        /// Random MoE Jacobian instances to check.
        #[arg(long = "grad-check", default_value_t = 50)]
        grad_check: usize,
    },
}

fn load_config(common: &CommonArgs) -> Result<confsmoe::config::ResolvedConfig, Error> {
    let cfg = match &common.config {
        Some(path) => ExperimentConfig::from_path(path)?,
        None => ExperimentConfig::default(),
    };
    Ok(cfg.resolve(common.seed, common.out.clone(), env_seed()))
}

fn cmd_generate(common: &CommonArgs) -> Result<(), Error> {
    let cfg = load_config(common)?;
    let mut dataset = generate(&cfg.config.synth)?;
    let split = dataset.split_index();
    let n = dataset.len();
    let seed = cfg.synth_seed();
    apply_protocol(&mut dataset, &cfg.config.protocol, Split::Train, seed, 0..split)?;
    apply_protocol(&mut dataset, &cfg.config.protocol, Split::Test, seed, split..n)?;
    let dir = cfg.output_dir.join("dataset");
    save_dataset(&dataset, &cfg.config.protocol, &dir)?;

    let m_count = dataset.spec.num_modalities;
    let mut missing = vec![0usize; m_count];
    for inst in &dataset.instances {
        for (m, &obs) in inst.observed.iter().enumerate() {
            if !obs {
                missing[m] += 1;
            }
        }
    }
    let rates: Vec<String> = missing
        .iter()
        .map(|&c| format!("{:.3}", c as f64 / n as f64))
        .collect();
    println!(
        "generated {} train / {} test instances, {} modalities, missing rates [{}] -> {}",
        split,
        n - split,
        m_count,
        rates.join(", "),
        dir.display()
    );
    Ok(())
}

fn cmd_train(common: &CommonArgs) -> Result<(), Error> {
    let cfg = load_config(common)?;
    let dir = cfg.output_dir.clone();
    let outcome = run_training(&cfg, &dir)?;
    let last = confsmoe::train::final_test_row(&outcome.metrics);
    match last {
        Some(row) => println!(
            "trained {} epochs; final test f1={:.4} auc={:.4} -> {}",
            cfg.config.model.epochs,
            row.f1_macro,
            row.auc,
            dir.display()
        ),
        None => println!("trained; no test rows -> {}", dir.display()),
    }
    Ok(())
}

fn cmd_sweep(common: &CommonArgs, jobs: usize) -> Result<(), Error> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("sweep requires --config <sweep.json>".into()))?;
    let mut spec = SweepSpec::from_path(path)?;
    if let Some(seed) = common.seed {
        spec.seeds = vec![seed];
    }
    let out_dir = common
        .out
        .clone()
        .or_else(|| spec.base.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("confsmoe-sweep"));
    let outcome = run_sweep(&spec, &out_dir, jobs)?;
    println!(
        "sweep: {} completed ({} reused), {} failed -> {}",
        outcome.completed.len(),
        outcome.skipped,
        outcome.failures.len(),
        out_dir.join("summary.csv").display()
    );
    for (name, err) in &outcome.failures {
        eprintln!("failed: {name}: {err}");
    }
    Ok(())
}

fn cmd_analyze(
    common: &CommonArgs,
    sharp: usize,
    n_experts: usize,
    psd_samples: usize,
    grad_check: usize,
) -> Result<(), Error> {
    let seed = common.seed.or_else(env_seed).unwrap_or(2023);
    let out_dir = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("confsmoe-analysis"));
    std::fs::create_dir_all(&out_dir)?;
    let mut failures = Vec::new();

    // PSD audit over Dirichlet(1) simplex samples
    let mut rng = stream(seed, StreamKind::Audit, &[1]);
    let min_eig = psd_audit(psd_samples, 2..=16, &mut rng)?;
    let psd_ok = min_eig >= -1e-10;
    println!(
        "PSD min eigenvalue >= -1e-10: {} (min {:.3e} over {} samples, N in 2..16)",
        if psd_ok { "PASS" } else { "FAIL" },
        min_eig,
        psd_samples
    );
    if !psd_ok {
        failures.push("psd".to_string());
    }

    // uniform-point stationarity of the load-balance gradient
    let uniform = Simplex::uniform(n_experts).map_err(Error::Core)?;
    let grad = load_balance_grad(&uniform)?;
    let gnorm = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
    let uniform_ok = gnorm <= 1e-10;
    println!(
        "load gradient norm at uniform <= 1e-10: {} ({:.3e})",
        if uniform_ok { "PASS" } else { "FAIL" },
        gnorm
    );
    if !uniform_ok {
        failures.push("uniform".to_string());
    }

    // conflict sweep over sharp distributions
    let mut rng = stream(seed, StreamKind::Audit, &[2]);
    let mut csv = String::from("step,g_max,conflict_score,entropy\n");
    let mut negative = 0usize;
    let mut scored = 0usize;
    for step in 0..sharp {
        let g = sample_sharp_simplex(n_experts, 0.9, &mut rng);
        let report = conflict_probe(&g, ProbeDirection::DominantExpert, step);
        let score_text = match report.conflict_score {
            Some(s) => {
                scored += 1;
                if s < 0.0 {
                    negative += 1;
                }
                fmt_f64(s)
            }
            None => String::new(),
        };
        csv.push_str(&format!(
            "{},{},{},{}\n",
            report.step,
            fmt_f64(report.g_max),
            score_text,
            fmt_f64(report.h_entropy)
        ));
    }
    write_text(&out_dir.join("conflict.csv"), &csv)?;
    let rate = if scored == 0 {
        0.0
    } else {
        negative as f64 / scored as f64
    };
    let conflict_ok = sharp == 0 || rate >= 0.95;
    println!(
        "conflict negativity rate >= 0.95: {} ({:.4} over {} sharp samples, N={})",
        if conflict_ok { "PASS" } else { "FAIL" },
        rate,
        sharp,
        n_experts
    );
    if !conflict_ok {
        failures.push("conflict".to_string());
    }

    // analytic vs finite-difference MoE Jacobians on random small instances
    let mut rng = stream(seed, StreamKind::Audit, &[3]);
    let mut worst: f64 = 0.0;
    for _ in 0..grad_check {
        let d = rng.random_range(3..=6);
        let n = rng.random_range(3..=8usize);
        let k = 2.min(n);
        let pool = ExpertPool::init(n, d, &mut rng);
        let router = Mat::from_fn(d, n, |_, _| rng.random_range(-0.8..0.8));
        let h: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        worst = worst.max(moe_jacobian_check(&h, &pool, &router, k, &mut rng)?);
    }
    let grad_ok = grad_check == 0 || worst <= 1e-5;
    println!(
        "MoE Jacobian max rel error <= 1e-5: {} ({:.3e} over {} instances)",
        if grad_ok { "PASS" } else { "FAIL" },
        worst,
        grad_check
    );
    if !grad_ok {
        failures.push("grad".to_string());
    }

    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::Audit(format!(
            "audit thresholds violated: {}",
            failures.join(", ")
        )))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(common) => cmd_generate(common),
        Command::Train(common) => cmd_train(common),
        Command::Sweep { common, jobs } => cmd_sweep(common, *jobs),
        Command::Analyze {
            common,
            sharp,
            n_experts,
            psd_samples,
            grad_check,
        } => cmd_analyze(common, *sharp, *n_experts, *psd_samples, *grad_check),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
