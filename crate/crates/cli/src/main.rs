use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use cosynorm_core::datagen::io::{read_features, write_features};
use cosynorm_core::datagen::{build_dataset, DatagenConfig, DatasetBank, Split, BANK_FILE};
use cosynorm_core::decoder::SpeakerEmbedding;
use cosynorm_core::flow::{GuidanceWeights, SamplerConfig};
use cosynorm_core::pipeline::eval::evaluate;
use cosynorm_core::pipeline::selftest;
use cosynorm_core::pipeline::train::save_trained;
use cosynorm_core::pipeline::{
    convert, train, train_recognizer, AccentNormalizer, Ablation, ConvertOptions, Corpus, DurationMode, Recognizer,
    TrainConfig,
};
use cosynorm_core::{Error, Result};

#[derive(Parser)]
#[command(name = "cosynorm", version, about = "Duration-controllable accent normalization on toy speech features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired corpus.
    Datagen {
        /// TOML file with corpus settings; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the converter.
    Train {
        #[command(flatten)]
        common: TrainArgs,
        /// Remove one component for an ablation run.
        #[arg(long, value_enum)]
        ablate: Option<AblationArg>,
    },
    /// Train the native-only recognizer used by `eval`.
    TrainRecognizer {
        #[command(flatten)]
        common: TrainArgs,
    },
    /// Convert one feature file.
    Convert {
        /// Directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        /// Corpus directory holding the speaker bank.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Speaker id whose signature conditions the output.
        #[arg(long)]
        speaker: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
    /// Convert and score one split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory written by `train-recognizer`; the model's own CTC head
        /// is used when absent.
        #[arg(long)]
        recognizer: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Per-utterance JSON lines; defaults to `eval_<split>_<mode>.jsonl`
        /// inside the model directory.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
    /// Run the CTC oracle, gradient-check and RoPE suites.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// TOML training configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SamplingArgs {
    #[arg(long, value_enum, default_value_t = ModeArg::Inherit)]
    mode: ModeArg,
    /// Output length for `--mode fixed`.
    #[arg(long)]
    fixed_len: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    w1: f64,
    #[arg(long, default_value_t = 1.0)]
    w2: f64,
    /// Euler steps.
    #[arg(long, default_value_t = 32)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Inherit,
    Predict,
    Fixed,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Ctc,
    Speaker,
    Posscale,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Ctc => Ablation::Ctc,
            AblationArg::Speaker => Ablation::Speaker,
            AblationArg::Posscale => Ablation::Posscale,
        }
    }
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

impl SamplingArgs {
    fn options(&self) -> Result<ConvertOptions> {
        let name = match self.mode {
            ModeArg::Inherit => "inherit",
            ModeArg::Predict => "predict",
            ModeArg::Fixed => "fixed",
        };
        let sampler = SamplerConfig {
            n_steps: self.steps,
            seed: self.seed,
        };
        sampler.validate()?;
        Ok(ConvertOptions {
            mode: DurationMode::parse(name, self.fixed_len)?,
            weights: GuidanceWeights::new(self.w1, self.w2)?,
            sampler,
        })
    }
}

fn load_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut config = match &args.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn write_text(path: &Path, text: String) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Datagen { config, out, seed } => {
            let config = match config {
                Some(path) => DatagenConfig::load(&path)?,
                None => DatagenConfig::default(),
            };
            let summary = build_dataset(&config, &out, seed)?;
            println!(
                "wrote {} rows to {} ({} of {} prompts retained, mean length ratio {:.3})",
                summary.rows,
                out.display(),
                summary.prompts_retained,
                summary.prompts_scored,
                summary.mean_length_ratio
            );
        }
        Command::Train { common, ablate } => {
            let mut config = load_train_config(&common)?;
            if let Some(a) = ablate {
                config.ablate = a.into();
            }
            let corpus = Corpus::load(&common.data)?;
            let (model, report) = train(&config, &corpus)?;
            save_trained(&model, &config, &report, &common.out)?;
            println!(
                "final validation flow loss {:.5}; model written to {}",
                report.final_val_cfm,
                common.out.display()
            );
        }
        Command::TrainRecognizer { common } => {
            let mut config = load_train_config(&common)?;
            if let Some(seed) = common.seed {
                config.recognizer.seed = seed;
            }
            let corpus = Corpus::load(&common.data)?;
            let recognizer = train_recognizer(&config, &corpus)?;
            recognizer.save(&common.out, &config.recognizer)?;
            println!("recognizer written to {}", common.out.display());
        }
        Command::Convert {
            model,
            data,
            input,
            speaker,
            out,
            sampling,
        } => {
            let options = sampling.options()?;
            let (model, _) = AccentNormalizer::load(&model)?;
            let bank = DatasetBank::load(&data.join(BANK_FILE))?;
            let signature = bank
                .speaker(&speaker)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown speaker {speaker:?}")))?
                .signature
                .clone();
            let source = read_features(&input)?;
            let result = convert(&model, &source, &SpeakerEmbedding::new(signature)?, &options)?;
            write_features(&out, &result.features)?;
            let mut meta_path = out.into_os_string();
            meta_path.push(".json");
            let metadata = serde_json::to_string(&result.metadata).expect("metadata serializes");
            write_text(Path::new(&meta_path), format!("{metadata}\n"))?;
            println!("{metadata}");
        }
        Command::Eval {
            model,
            data,
            recognizer,
            split,
            report,
            sampling,
        } => {
            let options = sampling.options()?;
            let (normalizer, _) = AccentNormalizer::load(&model)?;
            let recognizer = recognizer.map(|dir| Recognizer::load(&dir)).transpose()?;
            let split: Split = split.into();
            let result = evaluate(&normalizer, recognizer.as_ref(), &data, split, options)?;
            let path = report.unwrap_or_else(|| model.join(format!("eval_{split}_{}.jsonl", options.mode.name())));
            result.write_jsonl(&path)?;
            print!("{}", result.summary_table());
            info!("per-utterance rows written to {}", path.display());
        }
        Command::Selftest { seed } => {
            let reports = selftest::run_all(seed)?;
            for r in &reports {
                print!("{r}");
            }
            if !reports.iter().all(|r| r.passed()) {
                eprintln!("error: self-test failed");
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
