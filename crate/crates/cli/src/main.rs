//! `lata`: experiments, synthetic data, the probe control and ablations.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use lata_core::harness::report::{
    ablation_csv, ablation_table, aggregate_table, coverage_size_csv, write_json, write_text,
};
use lata_core::harness::{
    build_provider, generate_synthetic, run_ablation, run_control, run_experiment, AblationParam,
    DataSource, SyntheticSpec,
};
use lata_core::io::{save_dataset, DataConfig};
use lata_core::{LataError, ProviderKind, RunConfig, ScoreKind};

#[derive(Parser)]
#[command(name = "lata", version, about = "Label-free transductive refinement with failure-aware conformal prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Multi-trial experiment from a config file plus flag overrides.
    Run(RunArgs),
    /// Write a synthetic dataset to disk.
    Synth(SynthArgs),
    /// Probe fitted and calibrated on the same split, next to the configured pipeline.
    Control(RunArgs),
    /// Sweep one parameter, one report row per value.
    Ablate {
        /// gamma, k, t_iter, beta, lambda, eta, tau, W, K, kappa or gate_threshold.
        #[arg(long)]
        param: AblationParam,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[command(flatten)]
        run: RunArgs,
    },
}

/// Every flag overrides the matching config field.
#[derive(Args, Default)]
struct RunArgs {
    /// JSON run configuration; missing fields take the defaults.
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    score: Option<ScoreKind>,
    #[arg(long)]
    k_reg: Option<usize>,
    #[arg(long)]
    gamma_raps: Option<f64>,
    /// Draw a fresh U per sample for APS/RAPS.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    randomize_u: Option<bool>,
    #[arg(long)]
    u_value: Option<f64>,

    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    t_iter: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    prior_pseudo_count: Option<f64>,
    #[arg(long)]
    kappa: Option<usize>,
    #[arg(long)]
    gate_threshold: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,

    #[arg(long, visible_alias = "W")]
    window: Option<usize>,
    #[arg(long, visible_alias = "K")]
    shots: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Trial threads; 0 uses every core.
    #[arg(long)]
    workers: Option<usize>,

    #[arg(long)]
    provider: Option<ProviderKind>,
    #[arg(long)]
    vilu_bundle: Option<PathBuf>,
    /// Directory written by `lata synth` (or any directory with the same file names).
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Use generated data; the `--classes` family of flags tunes it.
    #[arg(long)]
    synthetic: bool,
    #[command(flatten)]
    spec: SpecArgs,

    /// Output directory [default: lata-out].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Default)]
struct SpecArgs {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    prototype_noise: Option<f64>,
    /// Comma-separated class mixture weights.
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    /// Size of the labeled pool calibration splits are drawn from.
    #[arg(long)]
    n_pool: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
}

impl SpecArgs {
    fn any(&self) -> bool {
        self.classes.is_some()
            || self.dim.is_some()
            || self.separation.is_some()
            || self.noise.is_some()
            || self.prototype_noise.is_some()
            || self.weights.is_some()
            || self.n_pool.is_some()
            || self.n_test.is_some()
    }

    fn apply(&self, spec: &mut SyntheticSpec) {
        macro_rules! set {
            ($($f:ident => $g:ident),*) => {
                $(if let Some(v) = &self.$f { spec.$g = v.clone(); })*
            };
        }
        set!(classes => n_classes, dim => dim, separation => separation, noise => noise,
             prototype_noise => prototype_noise, n_pool => n_cal, n_test => n_test);
        if let Some(w) = &self.weights {
            spec.weights = Some(w.clone());
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    spec: SpecArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_json_file(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => {
                $(if let Some(v) = &self.$f { cfg.$f = v.clone(); })*
            };
        }
        set!(alpha, score, k_reg, gamma_raps, randomize_u, u_value, gamma, t_iter, k, beta,
             prior_pseudo_count, lambda, eta, tau, window, shots, trials, seed, workers, provider);
        if self.sigma.is_some() {
            cfg.sigma = self.sigma;
        }
        if self.kappa.is_some() {
            cfg.kappa = self.kappa;
        }
        if self.gate_threshold.is_some() {
            cfg.gate_threshold = self.gate_threshold;
        }
        if self.vilu_bundle.is_some() {
            cfg.vilu_bundle = self.vilu_bundle.clone();
        }
        if self.out.is_some() {
            cfg.out = self.out.clone();
        }
        if let Some(dir) = &self.data {
            cfg.data = Some(data_config(dir)?);
            cfg.synthetic = None;
        }
        if self.synthetic || self.spec.any() {
            let mut spec = cfg.synthetic.take().unwrap_or_default();
            self.spec.apply(&mut spec);
            cfg.synthetic = Some(spec);
            cfg.data = None;
        }
        cfg.validate()?;
        if cfg.data.is_none() && cfg.synthetic.is_none() {
            return Err(LataError::Config("no data: pass --data DIR, --synthetic or a config with one".into()).into());
        }
        Ok(cfg)
    }
}

/// `data.json` when the directory has one, else the default file names.
fn data_config(dir: &Path) -> Result<DataConfig> {
    let manifest = dir.join("data.json");
    if manifest.exists() {
        let text = std::fs::read_to_string(&manifest).with_context(|| manifest.display().to_string())?;
        serde_json::from_str(&text)
            .map_err(|e| LataError::Config(format!("{}: {e}", manifest.display())).into())
    } else {
        Ok(DataConfig::in_dir(dir))
    }
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from("lata-out"))
}

fn method_name(cfg: &RunConfig) -> String {
    if cfg.gamma == 0.0 && cfg.beta == 0.0 && cfg.lambda == 0.0 && cfg.eta == 0.0 {
        "scp".into()
    } else {
        "lata".into()
    }
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let source = DataSource::from_config(&cfg)?;
    let provider = build_provider(&cfg)?;
    let report = run_experiment(&cfg, &source, provider.as_ref())?;
    let out = out_dir(&cfg);
    let name = method_name(&cfg);
    write_json(&report, out.join("report.json"))?;
    let mut text = aggregate_table(&[(name.clone(), &report.aggregate)]);
    if !report.failed_trials.is_empty() {
        text.push_str(&format!("failed trials: {}\n", report.failed_trials.len()));
    }
    write_text(&text, out.join("report.txt"))?;
    write_text(&coverage_size_csv(&[(name, &report.trials)]), out.join("coverage_size.csv"))?;
    write_json(&report.timing(), out.join("timing.json"))?;
    print!("{text}");
    Ok(())
}

fn cmd_control(args: &RunArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let source = DataSource::from_config(&cfg)?;
    let provider = build_provider(&cfg)?;
    let report = run_control(&cfg, &source, provider.as_ref())?;
    let out = out_dir(&cfg);
    write_json(&report, out.join("report.json"))?;
    let text = aggregate_table(&[
        ("probe@cal+scp@same".into(), &report.probe),
        (method_name(&cfg), &report.lata),
    ]);
    write_text(&text, out.join("report.txt"))?;
    print!("{text}");
    Ok(())
}

fn cmd_ablate(param: AblationParam, values: &[f64], args: &RunArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let source = DataSource::from_config(&cfg)?;
    let provider = build_provider(&cfg)?;
    let rows = run_ablation(&cfg, &source, provider.as_ref(), param, values)?;
    let out = out_dir(&cfg);
    write_json(&rows, out.join("report.json"))?;
    write_text(&ablation_csv(&rows), out.join("ablation.csv"))?;
    let text = ablation_table(&rows);
    write_text(&text, out.join("report.txt"))?;
    print!("{text}");
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut spec = SyntheticSpec {
        seed: args.seed,
        ..Default::default()
    };
    args.spec.apply(&mut spec);
    let data = generate_synthetic(&spec)?;
    let cfg = save_dataset(&data, &args.out)?;
    write_json(&cfg, args.out.join("data.json"))?;
    write_json(&spec, args.out.join("spec.json"))?;
    println!(
        "wrote {} pool and {} test items ({} classes, dim {}) to {}",
        data.cal.len(),
        data.test.len(),
        data.n_classes(),
        data.dim(),
        args.out.display()
    );
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.downcast_ref::<LataError>().map_or(3, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Control(a) => cmd_control(a),
        Command::Ablate { param, values, run } => cmd_ablate(*param, values, run),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Core errors already embed their cause.
            match e.downcast_ref::<LataError>() {
                Some(core) => eprintln!("error: {core}"),
                None => eprintln!("error: {e:#}"),
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
