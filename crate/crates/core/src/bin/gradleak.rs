use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::value::{Error as ValueError, StrDeserializer};
use serde::Deserialize;

use gradleak::attacks::{LabelMode, Variant};
use gradleak::experiment::{exit_code, fed_train_cmd, render_cmd, run_attack_cmd, Architecture, ExperimentConfig, Overrides};
use gradleak::masks::MaskInitScheme;
use gradleak::{selfcheck, Error, Result};

#[derive(Parser)]
#[command(name = "gradleak", version, about = "Gradient inversion attacks against dropout-protected networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Attack every victim batch with every configured variant and dropout rate.
    RunAttack(ExperimentArgs),
    /// Federated training, one run per dropout rate.
    FedTrain(ExperimentArgs),
    /// Render an image grid from originals.csv and reconstructions.csv.
    Render {
        #[arg(long)]
        originals: PathBuf,
        #[arg(long)]
        reconstructions: PathBuf,
        /// Image shape as CxHxW; inferred for square single-channel images.
        #[arg(long, value_parser = parse_shape)]
        shape: Option<[usize; 3]>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference and analytic-reconstruction suites.
    Selfcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Flags named after the config keys they replace.
#[derive(Args)]
struct ExperimentArgs {
    /// TOML experiment file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Worker pool size.
    #[arg(long)]
    jobs: Option<usize>,
    /// Dropout rate(s), comma separated.
    #[arg(long, value_delimiter = ',')]
    p: Vec<f64>,
    #[arg(long, value_parser = parse_enum::<Architecture>)]
    architecture: Option<Architecture>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// MNIST directory (overrides GRADLEAK_DATA).
    #[arg(long)]
    data_path: Option<PathBuf>,
    #[arg(long)]
    victims: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Attack variant(s), comma separated: ig_train, ig_eval, wiig, dia.
    #[arg(long, value_delimiter = ',', value_parser = parse_enum::<Variant>)]
    variant: Vec<Variant>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    mask_weight: Option<f64>,
    #[arg(long)]
    tv_weight: Option<f64>,
    #[arg(long, value_parser = parse_enum::<MaskInitScheme>)]
    mask_init: Option<MaskInitScheme>,
    #[arg(long, value_parser = parse_enum::<LabelMode>)]
    label_mode: Option<LabelMode>,
    /// Federated rounds.
    #[arg(long)]
    rounds: Option<usize>,
}

impl ExperimentArgs {
    fn resolve(self) -> Result<ExperimentConfig> {
        let overrides = Overrides {
            name: self.name,
            seed: self.seed,
            output_dir: self.output_dir,
            jobs: self.jobs,
            p: self.p,
            architecture: self.architecture,
            checkpoint: self.checkpoint,
            data_path: self.data_path,
            victims: self.victims,
            batch_size: self.batch_size,
            variant: self.variant,
            max_iterations: self.max_iterations,
            mask_weight: self.mask_weight,
            tv_weight: self.tv_weight,
            mask_init: self.mask_init,
            label_mode: self.label_mode,
            rounds: self.rounds,
        };
        ExperimentConfig::load(self.config.as_deref())?.apply(&overrides)
    }
}

/// Parses the same snake_case names the config file uses.
fn parse_enum<T: for<'de> Deserialize<'de>>(s: &str) -> std::result::Result<T, String> {
    T::deserialize(StrDeserializer::<ValueError>::new(s)).map_err(|e| e.to_string())
}

fn parse_shape(s: &str) -> std::result::Result<[usize; 3], String> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| d.parse().map_err(|_| format!("bad shape '{s}', expected CxHxW")))
        .collect::<std::result::Result<_, _>>()?;
    dims.try_into().map_err(|_| format!("bad shape '{s}', expected CxHxW"))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::RunAttack(args) => {
            let config = args.resolve()?;
            let run = run_attack_cmd(&config)?;
            for c in &run.cells {
                let ssim = c.report.ssim().map_or(f64::NAN, |s| s.mean);
                println!("{} p={} ssim={ssim:.4} -> {}", c.variant.name(), c.p, c.dir.display());
            }
        }
        Command::FedTrain(args) => {
            let config = args.resolve()?;
            for s in fed_train_cmd(&config)? {
                println!("p={} accuracy={:.4} -> {}", s.p, s.final_accuracy, s.dir.display());
            }
        }
        Command::Render {
            originals,
            reconstructions,
            shape,
            out,
        } => render_cmd(&originals, &reconstructions, shape, &out)?,
        Command::Selfcheck { seed } => {
            let report = selfcheck::run_all(seed)?;
            print!("{report}");
            if !report.ok() {
                return Err(Error::Precondition("self-check failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gradleak: {}", e.to_string().replace('\n', " "));
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
