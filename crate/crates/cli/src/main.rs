//! `simvtp`: corpus generation, pre-training, retrieval evaluation, mask-ratio
//! sweeps, dumps and gradient checking from one JSON config.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use simvtp::config::RunConfig;
use simvtp::evalkit::{self, parse_split};
use simvtp::numerics::Coordinates;
use simvtp::objectives::{check_gradients, Batch};
use simvtp::synthclips::{export_corpus, import_corpus, make_corpus, Corpus};
use simvtp::trainer::{self, load_checkpoint, TrainOptions};
use simvtp::{model, Category, Error};

#[derive(Parser)]
#[command(name = "simvtp", version, about = "Masked video-text pre-training at desk scale")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config; missing fields take their defaults
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `loss.vtm=false` (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Training seed (same as `--set train.seed=N`)
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic corpus and write it to disk
    GenCorpus,
    /// Pre-train on the training split; writes checkpoint.ckpt, metrics.jsonl and timing.jsonl
    Pretrain,
    /// Text-to-video retrieval on the evaluation split
    EvalRetrieval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Train and evaluate one model per (video ratio, text ratio, seed); writes sweep.csv
    SweepMask {
        #[arg(long, value_delimiter = ',', default_values_t = [0.75, 0.9])]
        video_ratios: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.15, 0.75])]
        text_ratios: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0])]
        seeds: Vec<u64>,
    },
    /// Original, masked and reconstructed frames and captions
    DumpRecon {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Number of samples from the evaluation split
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Attention from one caption word to the video tokens, per frame pair
    DumpAttn {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Sample index in the evaluation split
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Caption position of the query word
        #[arg(long, default_value_t = 1)]
        word: usize,
        /// Encoder layer (default: eval.attention_layer, else the last)
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Finite-difference check of the full objective on a two-pair batch
    Gradcheck {
        /// Coordinates checked per parameter tensor
        #[arg(long, default_value_t = 3)]
        coords: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn resolve(common: &Common) -> simvtp::Result<RunConfig> {
    let mut run = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for s in &common.set {
        run.apply_override(s)?;
    }
    if let Some(seed) = common.seed {
        run.train.seed = seed;
    }
    run.validate()?;
    Ok(run)
}

fn corpus(run: &RunConfig) -> simvtp::Result<Corpus> {
    let c = match &run.data.corpus_dir {
        Some(dir) => import_corpus(Path::new(dir))?,
        None => make_corpus(run.data.n_clips, run.data.seed, run.model.clip)?,
    };
    if c.dims != run.model.clip {
        return Err(Error::Config(format!("corpus clips are {:?}, model expects {:?}", c.dims, run.model.clip)));
    }
    if c.vocab.len() != run.model.vocab_size {
        return Err(Error::Config(format!("corpus vocabulary has {} entries, model.vocab_size is {}", c.vocab.len(), run.model.vocab_size)));
    }
    Ok(c)
}

fn out_dir(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::Io { path: path.into(), source: e })?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let run = resolve(&cli.common)?;
    let common = &cli.common;
    match cli.command {
        Command::GenCorpus => {
            let dir = out_dir(common, "corpus");
            let c = corpus(&run)?;
            export_corpus(&c, &dir)?;
            println!("wrote {} train / {} val / {} test clips to {}", c.train.len(), c.val.len(), c.test.len(), dir.display());
        }
        Command::Pretrain => {
            let dir = out_dir(common, "run");
            let c = corpus(&run)?;
            std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
            write_json(&dir.join("config.json"), &run.to_value())?;
            let mut report = |r: &trainer::MetricsRecord| {
                if r.step % 50 == 0 {
                    eprintln!("step {:>6}  epoch {:>3}  loss {:.4}  tau {:.4}", r.step, r.epoch, r.l_total, r.tau);
                }
            };
            let out = trainer::train(&c.train, &run, TrainOptions { out_dir: Some(&dir), init: None, on_step: Some(&mut report) })?;
            let last = out.metrics.last().map_or(f64::NAN, |m| m.l_total);
            println!("{} steps, final loss {last:.6}, checkpoint {}", out.metrics.len(), dir.join(trainer::CHECKPOINT_FILE).display());
        }
        Command::EvalRetrieval { checkpoint } => {
            let state = load_checkpoint(&checkpoint, Some(&run.model))?;
            let c = corpus(&run)?;
            let report = evalkit::evaluate_retrieval(c.split(parse_split(&run.eval.split)?), &state, &run)?;
            if let Some(dir) = &common.out {
                std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
                write_json(&dir.join("eval.json"), &report)?;
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::SweepMask { video_ratios, text_ratios, seeds } => {
            let dir = out_dir(common, "sweep");
            let c = corpus(&run)?;
            let rows = evalkit::sweep_mask_ratios(&c.train, c.split(parse_split(&run.eval.split)?), &run, &video_ratios, &text_ratios, &seeds)?;
            let csv = evalkit::sweep_csv(&rows);
            std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
            let path = dir.join("sweep.csv");
            std::fs::write(&path, &csv).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            print!("{csv}");
        }
        Command::DumpRecon { checkpoint, count } => {
            let dir = out_dir(common, "recon");
            let state = load_checkpoint(&checkpoint, Some(&run.model))?;
            let c = corpus(&run)?;
            let split = c.split(parse_split(&run.eval.split)?);
            let picked = &split[..count.min(split.len())];
            let s = evalkit::dump_reconstructions(&state, picked, &c.vocab, &run.mask, run.train.seed, &dir)?;
            println!("wrote {} files to {}", s.files.len(), dir.display());
        }
        Command::DumpAttn { checkpoint, sample, word, layer } => {
            let dir = out_dir(common, "attention");
            let state = load_checkpoint(&checkpoint, Some(&run.model))?;
            let c = corpus(&run)?;
            let split = c.split(parse_split(&run.eval.split)?);
            let item = split
                .get(sample)
                .ok_or_else(|| Error::Config(format!("sample {sample} out of range for {} items", split.len())))?;
            let map = evalkit::dump_attention(&state, item, word, layer.or(run.eval.attention_layer), Some(&dir))?;
            let word_text = c.vocab.word(item.caption.ids[word]).unwrap_or("?");
            println!("word `{word_text}`: wrote {} maps to {}", map.files.len(), dir.display());
        }
        Command::Gradcheck { coords, step, tol } => {
            // A handful of clips is enough for a two-pair batch.
            let mut small = run.clone();
            small.data.n_clips = small.data.n_clips.min(10);
            let c = corpus(&small)?;
            let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed);
            let state = model::ModelState::init(run.model.clone(), &mut rng)?;
            let pairs = &c.train[..2];
            let cubes = pairs.iter().map(|s| model::patchify(&s.clip, &run.model)).collect::<simvtp::Result<Vec<_>>>()?;
            let captions = pairs.iter().map(|s| s.caption.ids.clone()).collect();
            let m = &run.mask;
            let batch = Batch::sample(
                cubes,
                captions,
                run.model.n_video_tokens(),
                m.video_ratio,
                m.text_ratio,
                m.text_strategy,
                run.model.vocab_size,
                run.loss.vtm,
                &mut rng,
            )?;
            let report = check_gradients(&state, &batch, &run.loss, step, tol, Coordinates::SampledPerParam(coords), &mut rng)?;
            println!(
                "max relative error {:.3e} over {} coordinates (tolerance {tol:e}): {}",
                report.max_rel_err,
                report.coordinates_checked,
                if report.passed { "pass" } else { "FAIL" }
            );
            if !report.passed {
                let worst = report.worst.map(|(p, i)| format!("{}[{i}]", state.names()[p])).unwrap_or_default();
                return Err(Error::Contract(format!("gradient check failed at {worst}")).into());
            }
        }
    }
    Ok(())
}

fn category(err: &anyhow::Error) -> Category {
    err.chain()
        .find_map(|e| e.downcast_ref::<Error>().map(Error::category))
        .unwrap_or(if err.chain().any(|e| e.is::<std::io::Error>()) { Category::Io } else { Category::Contract })
}

fn exit_code(c: Category) -> u8 {
    match c {
        Category::Config => 2,
        Category::Contract => 3,
        Category::Io => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    simvtp::tune_allocator();
    if let Some(n) = std::env::var("SIMVTP_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // Only fails if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let c = category(&e);
            eprintln!("error[{}]: {}", c.name(), format!("{e:#}").replace('\n', " "));
            ExitCode::from(exit_code(c))
        }
    }
}
