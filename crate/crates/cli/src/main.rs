//! `popcft`: generate data, train, evaluate, sweep and report from an
//! experiment spec.
//!
//! Exit codes: 0 ok, 1 usage or spec error, 2 data or I/O error, 3 numeric
//! divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use popcft::datagen::Split;
use popcft::experiment::{Experiment, ExperimentError, ExperimentSpec};

#[derive(Parser, Debug)]
#[command(name = "popcft", version, about = "Co-finetuned pop-bug detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate one dataset directory per title.
    Gen(Common),
    /// Train the spec's configuration once per seed.
    Train(Common),
    /// Evaluate a checkpoint on a split of the downstream title.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory, e.g. `<out>/cells/<key>/best`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Report path; defaults to `<out>/eval/<split>.json`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train every alpha/beta cell and select the best by validation mAP.
    Gridsearch {
        #[command(flatten)]
        common: Common,
        /// Stop after training this many new cells; rerun to resume.
        #[arg(long)]
        max_new_cells: Option<usize>,
    },
    /// Run the CSL/SSL matrix, then the labeled-fraction study when the
    /// spec lists fractions below 1.
    Ablate(Common),
    /// Normalized tables and t-tests from stored condition summaries.
    Report(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment spec (TOML).
    #[arg(long)]
    spec: PathBuf,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run this seed only.
    #[arg(long)]
    seed: Option<u64>,
    /// Labeled fraction of the downstream training split.
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    downstream_title: Option<String>,
    /// Comma-separated co-titles.
    #[arg(long, value_delimiter = ',')]
    co_titles: Option<Vec<String>>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    csl: Option<bool>,
    #[arg(long)]
    ssl: Option<bool>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Suppress progress messages.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

impl Common {
    fn experiment(&self) -> Result<Experiment, ExperimentError> {
        let mut spec = ExperimentSpec::load(&self.spec)?;
        if let Some(out) = &self.out {
            spec.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            spec.seeds = vec![seed];
        }
        if let Some(t) = &self.downstream_title {
            spec.downstream_title = t.clone();
        }
        if let Some(c) = &self.co_titles {
            spec.co_titles = c.clone();
        }
        let t = &mut spec.train_config;
        if let Some(f) = self.fraction {
            t.labeled_fraction = f;
            spec.data_fractions = vec![f];
        }
        t.alpha = self.alpha.unwrap_or(t.alpha);
        t.beta = self.beta.unwrap_or(t.beta);
        t.csl_enabled = self.csl.unwrap_or(t.csl_enabled);
        t.ssl_enabled = self.ssl.unwrap_or(t.ssl_enabled);
        if let Some(e) = self.epochs {
            t.epochs = e;
            t.warmup_epochs = t.warmup_epochs.min(e);
        }
        let mut exp = Experiment::new(spec)?;
        exp.quiet = self.quiet;
        Ok(exp)
    }
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Gen(c) => {
            for dir in c.experiment()?.gen()? {
                println!("{}", dir.display());
            }
        }
        Command::Train(c) => {
            let mut exp = c.experiment()?;
            for r in exp.train()? {
                let dir = exp.spec.cells_dir().join(&r.key);
                println!(
                    "seed {}: validation mAP {:.4}, test mAP {:.4}, test F1 {:.4}, best epoch {}, checkpoint {}",
                    r.seed,
                    r.validation_map,
                    r.test.map,
                    r.test.f1,
                    r.best_epoch,
                    dir.join("best").display()
                );
            }
        }
        Command::Eval {
            common,
            checkpoint,
            split,
            report,
        } => {
            let mut exp = common.experiment()?;
            let split: Split = split.into();
            let rep = exp.eval(&checkpoint, split)?;
            let path = report.unwrap_or_else(|| exp.spec.output_dir.join("eval").join(format!("{split}.json")));
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            rep.write(&path)?;
            println!(
                "{split}: mAP {:.4}, precision {:.4}, recall {:.4}, F1 {:.4} over {} images; report {}",
                rep.map,
                rep.precision,
                rep.recall,
                rep.f1,
                rep.num_images,
                path.display()
            );
        }
        Command::Gridsearch { common, max_new_cells } => {
            let mut exp = common.experiment()?.with_cell_budget(max_new_cells);
            if exp.spec.grid.is_none() {
                exp.spec.grid = Some(Default::default());
            }
            print!("{}", exp.gridsearch()?.render());
        }
        Command::Ablate(c) => {
            let mut exp = c.experiment()?;
            print!("{}", exp.ablate()?.render());
            if exp.spec.data_fractions.iter().any(|f| *f < 1.0) {
                print!("{}", exp.fractions()?.render());
            }
        }
        Command::Report(c) => print!("{}", c.experiment()?.report()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(ExperimentError::Interrupted { completed }) => {
            eprintln!("stopped after {completed} new cells; rerun to resume");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
