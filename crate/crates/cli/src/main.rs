use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use skillopt::evaluation::{load_dataset, SplitKind};
use skillopt::pipeline::{
    self, AdvisorSpec, EvaluatorSpec, ExportFormat, Overrides, PipelineError, RunManifest,
};
use skillopt::skill_package::{validate, BudgetPolicy, SkillPackage};

/// Structure and content optimization for agent skill packages.
#[derive(Parser)]
#[command(name = "skillopt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a skill directory against the package rules and budgets.
    Validate {
        #[arg(long)]
        skill: PathBuf,
        /// Manifest whose [policy] budgets apply.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run one search and write its artifacts to the output directory.
    Optimize {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
        /// Clear a non-empty output directory first.
        #[arg(long)]
        overwrite: bool,
    },
    /// Run several configurations and select a winner on the confirm split.
    Sweep {
        /// One manifest per configuration, in priority order for ties.
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        #[command(flatten)]
        overrides: OverrideArgs,
        #[arg(long)]
        overwrite: bool,
    },
    /// Score a skill once on one split.
    Evaluate {
        #[arg(long)]
        skill: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        evaluator: Option<EvaluatorSpecArg>,
        /// JSONL dataset; without a manifest every instance is scored.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Write the JSON result here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a finished run's search tree.
    ExportTree {
        run_dir: PathBuf,
        #[arg(long, value_enum, default_value = "dot")]
        format: FormatArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct OverrideArgs {
    #[arg(long)]
    skill: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Search RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// `scripted:<playbook>` or `remote`.
    #[arg(long)]
    advisor: Option<AdvisorSpecArg>,
    /// `synthetic:<landscape>` or `exact-match:<runner command>`.
    #[arg(long)]
    evaluator: Option<EvaluatorSpecArg>,
}

#[derive(Clone)]
struct AdvisorSpecArg(AdvisorSpec);

impl std::str::FromStr for AdvisorSpecArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        s.parse().map(Self)
    }
}

#[derive(Clone)]
struct EvaluatorSpecArg(EvaluatorSpec);

impl std::str::FromStr for EvaluatorSpecArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        s.parse().map(Self)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Search,
    Confirm,
    Test,
}

impl From<SplitArg> for SplitKind {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Search => SplitKind::Search,
            SplitArg::Confirm => SplitKind::Confirm,
            SplitArg::Test => SplitKind::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Structured,
    Dot,
}

impl OverrideArgs {
    fn to_overrides(&self) -> Overrides {
        Overrides {
            skill: self.skill.clone(),
            dataset: self.dataset.clone(),
            out: self.out.clone(),
            seed: self.seed,
            advisor: self.advisor.clone().map(|a| a.0),
            evaluator: self.evaluator.clone().map(|e| e.0),
        }
    }
}

/// Exit codes: 0 success, 1 a completed check or run that failed, 2 bad input.
enum Failure {
    Code(u8),
    Pipeline(PipelineError),
    Other(anyhow::Error),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure::Pipeline(e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Code(c)) => ExitCode::from(c),
        Err(Failure::Pipeline(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_manifest(path: &Path, overrides: &Overrides) -> Result<RunManifest, PipelineError> {
    let mut m = RunManifest::load(path)?;
    m.apply(overrides);
    Ok(m)
}

fn emit(text: &str, out: Option<&Path>) -> anyhow::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Validate { skill, config } => {
            let policy = match config {
                Some(c) => RunManifest::load(&c)?.policy,
                None => BudgetPolicy::default(),
            };
            let pkg = match SkillPackage::load_dir(&skill) {
                Ok(p) => p,
                Err(e) => {
                    println!("{}: {e}", e.kind());
                    return Err(Failure::Code(2));
                }
            };
            let report = validate(&pkg, &policy);
            print!("{report}");
            if !report.valid {
                return Err(Failure::Code(1));
            }
        }
        Command::Optimize { config, overrides, overwrite } => {
            let m = load_manifest(&config, &overrides.to_overrides())?;
            let out = m
                .out
                .clone()
                .ok_or_else(|| anyhow!("no output directory: set `out` in the manifest or pass --out"))?;
            let (report, _) = pipeline::optimize(&m, &out, overwrite)?;
            println!(
                "{}: seed reward {:.4}, best reward {:.4} after {} round(s), {} accepted; stopped on {:?}",
                report.name, report.seed_reward, report.best_reward, report.rounds_run, report.accepted_rounds, report.stop_reason
            );
            println!("artifacts written to {}", out.display());
        }
        Command::Sweep { configs, overrides, overwrite } => {
            let mut o = overrides.to_overrides();
            let out = o.out.take().ok_or_else(|| anyhow!("sweep needs --out"))?;
            let manifests = configs
                .iter()
                .map(|c| load_manifest(c, &o))
                .collect::<Result<Vec<_>, _>>()?;
            let report = pipeline::sweep(&manifests, &out, overwrite)?;
            for e in &report.configs {
                match (e.search_peak, e.confirm_score) {
                    (Some(p), Some(c)) => println!("{}: search peak {p:.4}, confirm {c:.4}", e.name),
                    _ => println!("{}: failed: {}", e.name, e.error.as_deref().unwrap_or("")),
                }
            }
            println!(
                "winner {}: test {:.4} (seed {:.4})",
                report.winner, report.test.winner_score, report.test.seed_score
            );
            println!("report written to {}", out.join(pipeline::SWEEP_REPORT).display());
        }
        Command::Evaluate { skill, config, evaluator, dataset, split, out } => {
            let mut m = match (&config, &evaluator) {
                (Some(c), _) => RunManifest::load(c)?,
                (None, Some(e)) => RunManifest::for_evaluation(skill.clone(), e.0.clone()),
                (None, None) => return Err(anyhow!("evaluate needs --config or --evaluator").into()),
            };
            if let Some(e) = evaluator {
                m.evaluator = e.0;
            }
            let pkg = SkillPackage::load_dir(&skill).map_err(PipelineError::from)?;
            // A dataset without a manifest split is scored in full.
            let whole = match (&dataset, m.data.is_some()) {
                (Some(d), false) => Some(load_dataset(d).map_err(PipelineError::from)?),
                (Some(d), true) => {
                    m.apply(&Overrides {
                        dataset: Some(d.clone()),
                        ..Default::default()
                    });
                    None
                }
                (None, _) => None,
            };
            let summary = pipeline::evaluate_package(&pkg, &m, split.into(), whole.as_deref())?;
            let json = serde_json::to_string_pretty(&summary).context("serializing result")? + "\n";
            eprintln!("reward {:.4}", summary.reward);
            emit(&json, out.as_deref())?;
        }
        Command::ExportTree { run_dir, format, out } => {
            let format = match format {
                FormatArg::Structured => ExportFormat::Structured,
                FormatArg::Dot => ExportFormat::Dot,
            };
            let text = pipeline::export_tree(&run_dir, format)?;
            emit(&text, out.as_deref())?;
        }
    }
    Ok(())
}
