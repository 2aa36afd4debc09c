use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lmaug::bench::{run_seed, summary, write_synthetic_data, BenchScale, SynthDataConfig};
use lmaug::pipeline::{Pipeline, PipelineConfig, Stage};

#[derive(Parser)]
#[command(name = "lmaug", version, about = "N-gram data augmentation with a neural text generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline config (TOML)
    #[arg(long, default_value = "lmaug.toml")]
    config: PathBuf,
    /// Re-run the requested stage even if its outputs exist
    #[arg(long)]
    force: bool,
    /// Override the global seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Learn BPE merges from the general and in-domain training text
    BpeLearn(Common),
    /// Pre-train the Transformer on general-domain text
    Pretrain(Common),
    /// Fine-tune the pre-trained model on in-domain text
    Finetune(Common),
    /// Extract generation prefixes from the in-domain training text
    Prefixes(Common),
    /// Sample synthetic sentences from the fine-tuned model
    Generate(Common),
    /// Apply the rule filters to the synthetic sentences
    Filter(Common),
    /// Train the baseline and synthetic Kneser-Ney models
    NgramTrain(Common),
    /// Fit mixture weights on dev and write the flattened model
    Interpolate(Common),
    /// Report perplexities from whatever artifacts exist
    Eval(Common),
    /// Run the pipeline, up to --stage if given
    Run {
        #[command(flatten)]
        common: Common,
        /// Last stage to run (bpe, pretrain, finetune, scratch, prefixes,
        /// generate, filter, baseline, ngram, interpolate, eval)
        #[arg(long)]
        stage: Option<String>,
    },
    /// Write a two-domain template corpus
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200_000)]
        general: usize,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 500)]
        dev: usize,
        #[arg(long, default_value_t = 500)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the desk benchmark on synthetic data
    Bench {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        /// Tiny sizes, for checking the setup
        #[arg(long)]
        smoke: bool,
    },
}

fn pipeline(common: &Common) -> lmaug::Result<Pipeline> {
    let mut cfg = PipelineConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Pipeline::new(cfg)
}

fn run_stage(common: &Common, stage: Stage) -> lmaug::Result<()> {
    let p = pipeline(common)?;
    if stage == Stage::Eval {
        let report = p.run(Some(Stage::Eval), false)?;
        print!("{}", report.to_text());
        return Ok(());
    }
    let report = p.run(Some(stage), common.force)?;
    for (name, secs) in &report.timings {
        println!("{name:<12}{secs:>10.1}s");
    }
    println!("{}", p.stage_dir(stage).display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::BpeLearn(c) => run_stage(c, Stage::Bpe),
        Command::Pretrain(c) => run_stage(c, Stage::Pretrain),
        Command::Finetune(c) => run_stage(c, Stage::Finetune),
        Command::Prefixes(c) => run_stage(c, Stage::Prefixes),
        Command::Generate(c) => run_stage(c, Stage::Generate),
        Command::Filter(c) => run_stage(c, Stage::Filter),
        Command::NgramTrain(c) => run_stage(c, Stage::Ngram),
        Command::Interpolate(c) => run_stage(c, Stage::Interpolate),
        Command::Eval(c) => pipeline(c).and_then(|p| {
            print!("{}", p.eval_report()?.to_text());
            Ok(())
        }),
        Command::Run { common, stage } => match stage.as_deref().map(|s| (s, Stage::parse(s))) {
            Some((s, None)) => Err(lmaug::Error::Config(format!("unknown stage {s}"))),
            Some((_, Some(st))) => run_stage(common, st),
            None => run_stage(common, Stage::Eval),
        },
        Command::SynthData {
            out,
            general,
            train,
            dev,
            test,
            seed,
        } => {
            let cfg = SynthDataConfig {
                general: *general,
                train: *train,
                dev: *dev,
                test: *test,
                seed: *seed,
            };
            write_synthetic_data(out, &cfg).map(|p| println!("{}", p.general.parent().unwrap_or(out).display()))
        }
        Command::Bench { out, seeds, smoke } => {
            let scale = if *smoke { BenchScale::smoke() } else { BenchScale::desk() };
            let mut results = Vec::new();
            let mut err = None;
            for &seed in seeds {
                match run_seed(&out.join(format!("seed-{seed}")), seed, &scale) {
                    Ok(r) => {
                        print!("{}", summary(std::slice::from_ref(&r)));
                        results.push(r);
                    }
                    Err(e) => {
                        err = Some(e);
                        break;
                    }
                }
            }
            match err {
                Some(e) => Err(e),
                None => {
                    let ok = |f: &dyn Fn(&lmaug::bench::SeedResult) -> bool| results.iter().all(f);
                    println!("finetuned < scratch: {}", ok(&|r| r.finetune_beats_scratch()));
                    println!("interpolated >= 2% below baseline: {}", ok(&|r| r.interpolation_gain() >= 0.02));
                    println!("more synthetic data does not hurt: {}", ok(&|r| r.more_data_does_not_hurt()));
                    Ok(())
                }
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
