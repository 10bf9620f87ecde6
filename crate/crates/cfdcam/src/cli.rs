//! Argument parsing and exit codes.

use std::ffi::OsString;
use std::path::PathBuf;

use cfdcam_core::data::Modality;
use cfdcam_core::train::GateStatus;
use cfdcam_core::Weighting;
use clap::{Parser, Subcommand, ValueEnum};

use crate::commands::{cmd_ablate, cmd_benchmark, cmd_explain, cmd_ingest, cmd_train, ExplainRequest, Run};
use crate::config::RunConfig;
use crate::error::{exit, Error, Result};

#[derive(Debug, Parser)]
#[command(name = "cfdcam", version, about = "Weakly-supervised tumor segmentation from CAMs")]
pub struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum WeightingArg {
    Confidence,
    Logits,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the dataset manifest, labels and case split.
    Ingest,
    /// Train one classifier per modality.
    Train,
    /// Write the saliency map of one slice.
    Explain {
        /// Case id from the dataset manifest.
        #[arg(long)]
        case: String,
        /// Slice index along z.
        #[arg(long)]
        slice: usize,
        /// gradcam, scorecam, layercam or cfdcam.
        #[arg(long)]
        method: String,
        /// Defaults to the first configured modality.
        #[arg(long)]
        modality: Option<String>,
        /// Cfd-CAM channel weighting.
        #[arg(long, value_enum, default_value = "confidence")]
        weighting: WeightingArg,
    },
    /// Compare every configured method on the test split.
    Benchmark,
    /// Cfd-CAM weighting and scale ablations.
    Ablate,
}

fn load_run(cli: &Cli) -> Result<Run> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut config = RunConfig::from_path(path)?;
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
    }
    Ok(Run::new(config, cli.out.clone()))
}

fn execute(cli: &Cli) -> Result<()> {
    let run = load_run(cli)?;
    match &cli.command {
        Command::Ingest => {
            let m = cmd_ingest(&run)?;
            let s = m.split();
            println!(
                "ingested {} cases ({} train / {} val / {} test), {} slices",
                m.cases.len(),
                s.train.len(),
                s.val.len(),
                s.test.len(),
                m.total_slices
            );
        }
        Command::Train => {
            let summaries = cmd_train(&run)?;
            let mut below = Vec::new();
            for s in &summaries {
                println!(
                    "{}: test accuracy {:.4} (gate {}: {})",
                    s.modality,
                    s.test_accuracy,
                    s.accuracy_gate,
                    match s.gate {
                        GateStatus::Passed => "passed",
                        GateStatus::BelowGate => "below gate",
                    }
                );
                if s.untrained {
                    eprintln!("warning: {}: zero epochs configured, the classifier is untrained", s.modality);
                } else if s.gate == GateStatus::BelowGate {
                    below.push(s.modality.to_string());
                }
            }
            if !below.is_empty() {
                return Err(Error::Partial(format!("accuracy gate not reached for {}", below.join(", "))));
            }
        }
        Command::Explain {
            case,
            slice,
            method,
            modality,
            weighting,
        } => {
            let modality = modality
                .as_deref()
                .map(|m| Modality::from_name(m).ok_or_else(|| Error::Config(format!("unknown modality `{m}`"))))
                .transpose()?;
            let req = ExplainRequest {
                case_id: case.clone(),
                slice: *slice,
                method: method.clone(),
                modality,
                weighting: match weighting {
                    WeightingArg::Confidence => Weighting::Confidence,
                    WeightingArg::Logits => Weighting::Logits,
                },
            };
            let stem = cmd_explain(&run, &req)?;
            println!("wrote {}.{{bin,json,pgm}}", stem.display());
        }
        Command::Benchmark => {
            let report = cmd_benchmark(&run)?;
            print!("{}", report.render_markdown()?);
        }
        Command::Ablate => {
            let (w, s) = cmd_ablate(&run)?;
            print!("{}\n{}", w.render_markdown()?, s.render_markdown()?);
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code: 0 success, 1 partial failure, 2 I/O, 3 configuration.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::CONFIG } else { exit::SUCCESS };
        }
    };
    match execute(&cli) {
        Ok(()) => exit::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
