//! `corredit`: craft data, train the editors and evaluate test-time adaptation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use corredit::workbench::{report, EditRequest, ModelKind, Pipeline, Preset, RunConfig};
use corredit::Error;

#[derive(Parser)]
#[command(name = "corredit", version, about = "Corruption editing for test-time adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run directory holding every artifact of one configuration.
    #[arg(long, short)]
    out: PathBuf,
    /// TOML configuration; defaults to the run directory's config.toml, then the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in configuration: reference, toy or smoke.
    #[arg(long)]
    preset: Option<String>,
    /// Global seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted overrides such as `train_dpm.steps=500`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// No progress messages on stderr.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Build the paired (clean, corrupted) training set.
    Craft {
        #[command(flatten)]
        common: Common,
        /// Write the resolved configuration here (`-` for stdout) and stop.
        #[arg(long, value_name = "PATH")]
        emit_config: Option<PathBuf>,
    },
    /// Train the source classifier.
    TrainClassifier {
        #[command(flatten)]
        common: Common,
    },
    /// Train the diffusion editor.
    TrainDpm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Distil the consistency editor from the diffusion editor.
    DistillCm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Edit one PNG or a folder of PNGs.
    Edit {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "cm")]
        model: EditModel,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Consistency steps.
        #[arg(long)]
        nfe: Option<usize>,
        /// Diffusion sampling steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, requires = "omega_t")]
        omega_i: Option<f64>,
        #[arg(long, requires = "omega_i")]
        omega_t: Option<f64>,
        #[arg(long, default_value_t = 0)]
        edit_seed: u64,
    },
    /// Score the editors on the corrupted test sets.
    TtaEval {
        #[command(flatten)]
        common: Common,
        /// Test images per corruption.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Render report.md from the run's metrics.
    Report {
        #[command(flatten)]
        common: Common,
        /// Render even when artifacts carry different config hashes.
        #[arg(long)]
        force: bool,
    },
    /// Every stage in order.
    Run {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EditModel {
    Dpm,
    Cm,
}

fn resolve(common: &Common, stage_overrides: &[String]) -> corredit::Result<RunConfig> {
    let stored = common.out.join("config.toml");
    let mut config = match (&common.config, &common.preset) {
        (Some(_), Some(_)) => return Err(Error::Config("pass either --config or --preset, not both".into())),
        (Some(path), None) => {
            if !path.exists() {
                return Err(Error::MissingArtifact(path.clone()));
            }
            RunConfig::load(path)?
        }
        (None, Some(name)) => RunConfig::preset(name.parse::<Preset>()?),
        (None, None) if stored.exists() => RunConfig::load(&stored)?,
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    for o in common.overrides.iter().chain(stage_overrides) {
        config = config.with_override(o)?;
    }
    Ok(config)
}

fn open(common: &Common, stage_overrides: &[String]) -> corredit::Result<Pipeline> {
    Ok(Pipeline::new(resolve(common, stage_overrides)?, &common.out)?.verbose(!common.quiet))
}

fn run(cli: Cli) -> corredit::Result<()> {
    match cli.command {
        Command::Craft { common, emit_config } => {
            if let Some(path) = emit_config {
                let text = resolve(&common, &[])?.to_toml()?;
                if path == Path::new("-") {
                    print!("{text}");
                } else {
                    std::fs::write(&path, text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                }
                return Ok(());
            }
            let ds = open(&common, &[])?.craft()?;
            println!("crafted {} pairs from {} clean images", ds.pairs.len(), ds.clean.len());
        }
        Command::TrainClassifier { common } => {
            let (_, rep) = open(&common, &[])?.train_classifier()?;
            println!(
                "classifier: validation accuracy {:.4} after {} steps",
                rep.val_accuracy, rep.steps
            );
        }
        Command::TrainDpm { common, steps } => {
            let extra: Vec<String> = steps.map(|s| format!("train_dpm.steps={s}")).into_iter().collect();
            let (_, s) = open(&common, &extra)?.train_dpm()?;
            println!(
                "dpm: {} steps, final windowed loss {:.5}",
                s.steps,
                s.mean_loss(s.steps.saturating_sub(50), s.steps)
            );
        }
        Command::DistillCm { common, steps } => {
            let extra: Vec<String> = steps.map(|s| format!("distill_cm.steps={s}")).into_iter().collect();
            let (_, s) = open(&common, &extra)?.distill_cm()?;
            println!(
                "cm: {} steps, final windowed loss {:.6}",
                s.steps,
                s.mean_loss(s.steps.saturating_sub(50), s.steps)
            );
        }
        Command::Edit {
            common,
            model,
            input,
            output,
            nfe,
            steps,
            omega_i,
            omega_t,
            edit_seed,
        } => {
            let request = EditRequest {
                model: match model {
                    EditModel::Dpm => ModelKind::Dpm,
                    EditModel::Cm => ModelKind::Cm,
                },
                input,
                output,
                nfe,
                steps,
                omega: omega_i.zip(omega_t),
                seed: edit_seed,
            };
            for s in open(&common, &[])?.edit(&request)? {
                println!("{} -> {} ({} evaluations)", s.source, s.output, s.counted_nfe);
            }
        }
        Command::TtaEval { common, samples } => {
            let extra: Vec<String> = samples.map(|s| format!("tta.eval_samples={s}")).into_iter().collect();
            let r = open(&common, &extra)?.tta_eval()?;
            for res in &r.results {
                println!(
                    "{:>10}: source {:.4} -> tta {:.4} ({} evaluations per sample)",
                    res.editor,
                    res.mean_source_accuracy(),
                    res.mean_tta_accuracy(),
                    res.nfe_per_sample
                );
            }
        }
        Command::Report { common, force } => {
            let p = open(&common, &[])?;
            let text = report::render(&p.dir, force)?;
            std::fs::write(p.dir.report(), &text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.dir.report().display())))?;
            print!("{text}");
        }
        Command::Run { common } => {
            let s = open(&common, &[])?.run_all()?;
            if let Some(cm) = s.tta.result("cm") {
                println!(
                    "cm: source {:.4} -> tta {:.4}",
                    cm.mean_source_accuracy(),
                    cm.mean_tta_accuracy()
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::MissingArtifact(_) => 3,
                _ => 1,
            })
        }
    }
}
