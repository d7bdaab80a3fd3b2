use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kmrf::backtest::SignalMode;
use kmrf::pipeline::{
    render_report, run_baseline, run_label, run_pipeline, run_tune, Artifacts, BaselineModel,
    PipelineConfig, Universe,
};

#[derive(Parser)]
#[command(
    name = "kmrf",
    version,
    about = "Regime prediction and contrarian backtesting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tune, select features, fit, and backtest against both baselines.
    Run(Common),
    /// Backtest one baseline on the test span.
    Baseline(Common),
    /// Write the training-span regime segmentation per asset.
    Label(Common),
    /// Run the hyperparameter search and feature selection only.
    Tune(Common),
    /// Print a summary of a finished run directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Contrarian,
    Conventional,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Kmrf,
    Hmm,
    Detection,
}

impl From<ModeArg> for SignalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Contrarian => SignalMode::Contrarian,
            ModeArg::Conventional => SignalMode::Conventional,
        }
    }
}

fn load(c: &Common) -> kmrf::Result<(PipelineConfig, Universe, Artifacts)> {
    let mut config = PipelineConfig::from_toml_file(&c.config)?;
    if let Some(s) = c.seed {
        config.seed = s;
    }
    if let Some(o) = &c.out {
        config.output_dir = o.clone();
    }
    if let (Some(m), None | Some(ModelArg::Kmrf)) = (c.mode, c.model) {
        config.backtest.mode = m.into();
    }
    config.validate()?;
    let artifacts = Artifacts::create(&config.output_dir, &config)?;
    let universe = Universe::load(&config).inspect_err(|e| artifacts.mark_failed(e))?;
    Ok((config, universe, artifacts))
}

fn execute(cli: Cli) -> kmrf::Result<()> {
    match cli.command {
        Command::Run(c) | Command::Baseline(c)
            if matches!(c.model, Some(ModelArg::Hmm | ModelArg::Detection)) =>
        {
            let (config, universe, artifacts) = load(&c)?;
            let model = match c.model {
                Some(ModelArg::Hmm) => BaselineModel::Hmm,
                _ => BaselineModel::Detection,
            };
            run_baseline(
                &config,
                &universe,
                model,
                c.mode.map(Into::into),
                Some(&artifacts),
            )?;
            println!("{}", render_report(artifacts.dir())?);
        }
        Command::Baseline(_) => {
            return Err(kmrf::Error::Config(
                "baseline needs --model hmm or --model detection".into(),
            ));
        }
        Command::Run(c) => {
            let (config, universe, artifacts) = load(&c)?;
            run_pipeline(&config, &universe, Some(&artifacts))?;
            println!("{}", render_report(artifacts.dir())?);
        }
        Command::Label(c) => {
            let (config, universe, artifacts) = load(&c)?;
            let labelings = run_label(&config, &universe, Some(&artifacts))?;
            println!(
                "labelled {} assets into {}",
                labelings.len(),
                artifacts.dir().join("labels").display()
            );
        }
        Command::Tune(c) => {
            let (config, universe, artifacts) = load(&c)?;
            let t = run_tune(&config, &universe, Some(&artifacts))?;
            println!("{}", serde_json::to_string_pretty(&t)?);
        }
        Command::Report { out } => print!("{}", render_report(out)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
