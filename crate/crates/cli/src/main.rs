use std::path::PathBuf;
use std::process::ExitCode;

use carechoice::metrics::Variant;
use carechoice::run::{Run, RunConfig};
use carechoice::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "carechoice", version, about = "Hospital-level choice prediction pipeline")]
struct Cli {
    #[command(flatten)]
    opts: ConfigOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigOpts {
    /// key=value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set clf.epochs=10` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort into data_dir
    Synth,
    /// Load the raw files and write the exclusion audit
    Ingest,
    /// Export the feature matrix
    Features,
    /// Cross-validate on the balanced pool, then fit the final model
    Train {
        #[arg(long, conflicts_with = "no_ae")]
        ae: bool,
        #[arg(long)]
        no_ae: bool,
    },
    /// Score the held-out test split
    Evaluate(VariantArg),
    /// Shapley importance (global CSV) and local reports (JSON)
    Explain(VariantArg),
    /// Compare both variants side by side
    Compare,
}

#[derive(Args)]
struct VariantArg {
    #[arg(long, conflicts_with = "no_ae")]
    ae: bool,
    #[arg(long)]
    no_ae: bool,
}

fn variant(ae: bool) -> Variant {
    if ae {
        Variant::WithAe
    } else {
        Variant::WithoutAe
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::ExactLimit { .. } => 3,
        Error::MissingArtifact(_) => 4,
        Error::Divergence { .. } => 5,
        Error::Parse { .. }
        | Error::MissingFile(_)
        | Error::Io { .. }
        | Error::Json { .. }
        | Error::EmptyDataset
        | Error::CalendarCoverage(_)
        | Error::UnknownRegion(_)
        | Error::UnknownReference { .. }
        | Error::ClassAbsent(_)
        | Error::TooFewRows { .. } => 6,
        _ => 1,
    }
}

fn load_config(opts: &ConfigOpts) -> Result<RunConfig, Error> {
    let text = match &opts.config {
        Some(path) => std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?,
        None => String::new(),
    };
    let mut kv = carechoice::KeyValues::parse(&text)?;
    for item in &opts.overrides {
        kv.assign(item)?;
    }
    RunConfig::from_kv(&kv)
}

fn execute(cli: &Cli) -> Result<(), Error> {
    let run = Run::new(load_config(&cli.opts)?)?;
    match &cli.command {
        Command::Synth => {
            let spec = run.synth()?;
            println!(
                "cohort of {} patients written to {}",
                spec.n_patients,
                run.config.data_dir.display()
            );
        }
        Command::Ingest => {
            let s = run.ingest()?;
            println!(
                "{} patients, {} visits, {} providers kept",
                s.patients, s.visits, s.providers
            );
        }
        Command::Features => println!("{} feature rows", run.features()?),
        Command::Train { ae, .. } => {
            let cv = run.train(variant(*ae))?;
            match cv.mean_macro_auc {
                Some(auc) => println!("cv macro AUC {auc:.4}, macro accuracy {:.4}", cv.mean_macro_accuracy),
                None => println!("cv macro accuracy {:.4}", cv.mean_macro_accuracy),
            }
        }
        Command::Evaluate(v) => {
            let report = run.evaluate(variant(v.ae))?;
            println!("{}", report.to_json()?);
        }
        Command::Explain(v) => {
            let global = run.explain(variant(v.ae))?;
            println!(
                "top features: {}",
                global.ranked_names().into_iter().take(5).collect::<Vec<_>>().join(", ")
            );
        }
        Command::Compare => print!("{}", run.compare()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
