use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use twostage_core::experiment::{
    load_config, run_gradcheck, run_hier, run_joint, run_oracle_report, run_tsfb, run_two_stage, GradcheckConfig,
    HierConfig, HierVariant, JointConfig, ManifestEntry, OracleReportConfig, TsfbRunConfig, TwoStageSpec,
};
use twostage_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "twostage", version, about = "Two-stage normalizing flow experiments")]
struct Cli {
    /// TOML config; keys it omits keep their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Overrides the config's seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    /// Output directory for the artifact bundle.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Joint density of (X, Y, Z) from two subvector datasets.
    ExperimentJoint,
    /// Gaussian hierarchical model with a software prior, compared against TSFB and the exact posterior.
    ExperimentHier {
        #[arg(long, value_enum)]
        variant: Option<Variant>,
    },
    /// Generic two-stage fit from a spec file and per-component CSV samples.
    RunTwoStage {
        /// Spec file; defaults to --config.
        spec: Option<PathBuf>,
    },
    /// Metropolis-within-Gibbs over a recycled software pool.
    RunTsfb,
    /// Exact hierarchical posterior, optionally scored against a sample file.
    OracleReport,
    /// Finite-difference gradient checks for every layer and loss.
    Gradcheck,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Variant {
    J3Gaussian,
    J6Flat,
}

impl From<Variant> for HierVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::J3Gaussian => HierVariant::J3Gaussian,
            Variant::J6Flat => HierVariant::J6Flat,
        }
    }
}

fn exit_code(category: &str) -> u8 {
    match category {
        "usage" => 2,
        "input" => 3,
        "io" => 4,
        "numeric" => 5,
        "checkpoint" => 6,
        "check" => 7,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            eprintln!("error[{category}]: {e}");
            ExitCode::from(exit_code(category))
        }
    }
}

fn base_dir(config: Option<&Path>) -> PathBuf {
    config
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn report(out: &Path, manifest: &[ManifestEntry]) {
    println!("wrote {} files to {}", manifest.len(), out.display());
}

fn run(cli: Cli) -> Result<()> {
    let out = |name: &str| cli.out.clone().unwrap_or_else(|| Path::new("out").join(name));
    let config = cli.config.as_deref();
    match cli.command {
        Command::ExperimentJoint => {
            let mut cfg: JointConfig = load_config(config)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let dir = out("joint");
            let o = run_joint(&cfg, &dir)?;
            for (k, v) in o.metrics.entries() {
                println!("{k} = {v}");
            }
            report(&dir, &o.manifest);
        }
        Command::ExperimentHier { variant } => {
            let mut cfg: HierConfig = load_config(config)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(v) = variant {
                cfg.variant = v.into();
            }
            let dir = out("hier");
            let o = run_hier(&cfg, &dir)?;
            for (k, v) in o.metrics.entries() {
                println!("{k} = {v}");
            }
            report(&dir, &o.manifest);
        }
        Command::RunTwoStage { spec } => {
            let path = spec
                .as_deref()
                .or(config)
                .ok_or_else(|| Error::Spec(vec!["run-two-stage needs a spec file (positional or --config)".into()]))?;
            let mut cfg: TwoStageSpec = load_config(Some(path))?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let dir = out("two_stage");
            let o = run_two_stage(&cfg, &base_dir(Some(path)), &dir)?;
            for (k, v) in o.metrics.entries() {
                println!("{k} = {v}");
            }
            report(&dir, &o.manifest);
        }
        Command::RunTsfb => {
            let mut cfg: TsfbRunConfig = load_config(config)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let dir = out("tsfb");
            let m = run_tsfb(&cfg, &base_dir(config), &dir)?;
            report(&dir, &m);
        }
        Command::OracleReport => {
            let mut cfg: OracleReportConfig = load_config(config)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let dir = out("oracle");
            let m = run_oracle_report(&cfg, &base_dir(config), &dir)?;
            report(&dir, &m);
        }
        Command::Gradcheck => {
            let mut cfg: GradcheckConfig = load_config(config)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let (rows, manifest) = run_gradcheck(&cfg, cli.out.as_deref())?;
            for r in &rows {
                let status = if r.pass { "pass" } else { "FAIL" };
                println!(
                    "{status} {} draws={} max_rel_error={:.3e}",
                    r.case, r.draws, r.max_rel_error
                );
            }
            if let Some(dir) = &cli.out {
                report(dir, &manifest);
            }
            let failed: Vec<&str> = rows.iter().filter(|r| !r.pass).map(|r| r.case.as_str()).collect();
            if !failed.is_empty() {
                return Err(Error::Check(format!("gradient check failed for {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}
