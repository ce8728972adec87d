//! `vred` command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Parser, Subcommand, ValueEnum};

use vred_core::audio::synth::{generate_corpus, write_corpus, SynthSpec};
use vred_core::audio::{
    default_sweep_configs, evaluate_files, load_wav, sweep_configs, sweep_csv, write_wav,
    AudioSignal,
};
use vred_core::codec::{decode_audio, encode_with_reconstruction, DigestPolicy, EncodedStream};
use vred_core::config::{Preset, RunConfig};
use vred_core::trainer::{
    finetune, gradcheck_suite, objective_gradcheck, pretrain_feature_codec, run_pipeline,
    train_vred, MetricsLog, Stage, TrainOutcome, GRADCHECK_TOL,
};
use vred_core::vred::EncodeMode;
use vred_core::{Checkpoint, Model, VredError};

#[derive(Parser)]
#[command(
    name = "vred",
    version,
    about = "Recurrent variational audio codec with binary latent codes"
)]
struct Cli {
    /// TOML run configuration (model shape and training plan). Unknown keys are errors.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Built-in configuration to use when no --config is given.
    #[arg(long, global = true, value_enum, default_value_t = PresetArg::Full)]
    preset: PresetArg,

    /// Seed for every random choice (initialization, minibatch order, latent sampling, corpus synthesis).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    /// C=32, K=88, S=44, W=32, D=H=128, T=8 at 44.1 kHz.
    Full,
    /// 16 kHz desk-scale model: C=8, K=8, S=4, W=4, D=H=32.
    Small,
    /// 16 kHz model for gradient checks: C=4, K=8, S=4, W=4, D=H=8, T=3.
    Tiny,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Full => Preset::Full,
            PresetArg::Small => Preset::Small,
            PresetArg::Tiny => Preset::Tiny,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus of mono 16-bit WAV files.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        files: usize,
        /// Length of each file.
        #[arg(long, default_value_t = 10.0)]
        seconds: f64,
        /// Defaults to the configured model's rate.
        #[arg(long)]
        sample_rate: Option<u32>,
    },
    /// Stage 1: train the conv/deconv feature codec and fit feature normalization.
    Pretrain(TrainArgs),
    /// Stage 2: train VRED on frozen features of a stage-1 checkpoint (--model).
    TrainVred(TrainArgs),
    /// Stage 3: fine-tune every parameter end to end from a stage-2 checkpoint (--model).
    Finetune(TrainArgs),
    /// All three stages from a fresh initialization.
    Train(TrainArgs),
    /// Compress audio (.wav, or .raw little-endian f64 at the model rate) into a .vred stream.
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the encoder's own reconstruction (.wav or .raw).
        #[arg(long)]
        recon: Option<PathBuf>,
    },
    /// Reconstruct audio from a .vred stream and the checkpoint (.wav or .raw output).
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Decode even if the stream was encoded with a different checkpoint.
        #[arg(long)]
        force_digest_mismatch: bool,
    },
    /// Threshold-encode, decode and report SDR for each file.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// WAV files or directories of WAV files.
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        /// Write the per-file table here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Stage-1 training over the twelve reference conv shapes.
    Sweep {
        /// Training WAV files or directories.
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        /// Held-out WAV files or directories.
        #[arg(long, num_args = 1.., required = true)]
        test: Vec<PathBuf>,
        /// Stage-1 epochs per configuration.
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        /// Write the table here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference checks of every op, layer and training objective;
    /// exits 0 only if all pass below 1e-4 relative error.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Check only the objective of stage 2 or 3.
        #[arg(long)]
        stage: Option<u8>,
    },
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Checkpoint to continue from (stages 2 and 3).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Training WAV files or directories of WAV files.
    #[arg(long = "in", num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Override the configured epoch count of this stage.
    #[arg(long)]
    epochs: Option<usize>,
    /// Per-epoch metrics CSV; wall times go to a `.timing.csv` sidecar.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let internal = e.chain().any(|c| {
                c.downcast_ref::<VredError>()
                    .is_some_and(VredError::is_internal)
            });
            ExitCode::from(if internal { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::for_preset(cli.preset.into()),
    };
    let seed = cli.seed;
    match cli.command {
        Command::GenCorpus {
            out,
            files,
            seconds,
            sample_rate,
        } => {
            let spec = SynthSpec::new(sample_rate.unwrap_or(cfg.model.sample_rate), seconds);
            let signals = generate_corpus(seed, files, &spec)?;
            let paths = write_corpus(&out, &signals)?;
            log::info!("wrote {} files to {}", paths.len(), out.display());
        }
        Command::Pretrain(a) => train_stage(&cfg, seed, Stage::Codec, a)?,
        Command::TrainVred(a) => train_stage(&cfg, seed, Stage::Vred, a)?,
        Command::Finetune(a) => train_stage(&cfg, seed, Stage::Finetune, a)?,
        Command::Train(a) => {
            if a.model.is_some() {
                bail!("`train` starts from a fresh model; use pretrain/train-vred/finetune to continue a checkpoint");
            }
            let corpus = load_corpus(&a.inputs)?;
            let mut settings = cfg.train;
            if let Some(e) = a.epochs {
                settings.stage1.epochs = e;
                settings.stage2.epochs = e;
                settings.stage3.epochs = e;
            }
            settings.validate()?;
            let mut log = MetricsLog::new();
            let model = Model::init(cfg.model.clone(), seed)?;
            let (ckpt, _) = run_pipeline(model, &corpus, &settings, seed, &mut log)?;
            finish_training(ckpt, &log, &a.out, a.csv.as_deref())?;
        }
        Command::Encode {
            model,
            input,
            out,
            recon,
        } => {
            let ckpt = Checkpoint::load(&model)?;
            let signal = read_audio(&input, ckpt.model.config.sample_rate)?;
            let (stream, reconstruction) =
                encode_with_reconstruction(&ckpt.model, &signal, EncodeMode::Threshold)?;
            stream.write(&out)?;
            if let Some(r) = recon {
                write_audio(&r, &reconstruction)?;
            }
            log::info!(
                "{} samples -> {} steps, {} payload bytes",
                signal.len(),
                stream.header.num_steps,
                stream.payload.len()
            );
        }
        Command::Decode {
            model,
            input,
            out,
            force_digest_mismatch,
        } => {
            let ckpt = Checkpoint::load(&model)?;
            let stream = EncodedStream::read(&input)?;
            let policy = if force_digest_mismatch {
                DigestPolicy::Ignore
            } else {
                DigestPolicy::Enforce
            };
            let signal = decode_audio(&ckpt.model, &stream, policy)?;
            write_audio(&out, &signal)?;
        }
        Command::Eval { model, inputs, csv } => {
            let ckpt = Checkpoint::load(&model)?;
            let files = expand_inputs(&inputs)?;
            let report = evaluate_files(&ckpt.model, &files);
            for (f, e) in &report.files_failed {
                log::warn!("{f}: {e}");
            }
            emit(csv.as_deref(), &report.to_csv())?;
            if report.mean_sdr.is_none() {
                bail!("no file produced a finite SDR");
            }
        }
        Command::Sweep {
            inputs,
            test,
            epochs,
            csv,
        } => {
            let train = load_corpus(&inputs)?;
            let test = load_corpus(&test)?;
            let mut plan = cfg.train.plan(Stage::Codec, seed);
            plan.epochs = epochs;
            let rows = sweep_configs(&train, &test, &default_sweep_configs(), &plan)?;
            emit(csv.as_deref(), &sweep_csv(&rows))?;
        }
        Command::Gradcheck { seeds, stage } => gradcheck(&cfg, seeds, stage)?,
    }
    Ok(())
}

fn gradcheck(cfg: &RunConfig, seeds: u64, stage: Option<u8>) -> Result<()> {
    let start = Instant::now();
    let weights = cfg.train.objective;
    let outcomes = match stage {
        None => gradcheck_suite(seeds, &weights)?,
        Some(n) => {
            let stage = Stage::from_number(n)?;
            let tiny = vred_core::config::ModelConfig::tiny();
            let mut max = 0.0f64;
            for s in 0..seeds {
                let r = objective_gradcheck(
                    &Model::init(tiny.clone(), s)?,
                    stage,
                    s + 100 * n as u64,
                    &weights,
                )?;
                max = max.max(r.max_rel_error);
            }
            vec![vred_core::trainer::CheckOutcome {
                name: format!("objective.stage{n}"),
                seeds,
                max_rel_error: max,
            }]
        }
    };
    let mut failed = 0;
    for o in &outcomes {
        let verdict = if o.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<24} seeds {:>3}  max rel err {:.3e}  {verdict}",
            o.name, o.seeds, o.max_rel_error
        );
        failed += usize::from(!o.passed());
    }
    println!(
        "{} checks, {failed} failed, {:.1} s",
        outcomes.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        bail!(VredError::Internal(format!(
            "{failed} gradient checks exceed {GRADCHECK_TOL:e}"
        )));
    }
    Ok(())
}

fn train_stage(cfg: &RunConfig, seed: u64, stage: Stage, a: TrainArgs) -> Result<()> {
    let model = match (&a.model, stage) {
        (None, Stage::Codec) => Model::init(cfg.model.clone(), seed)?,
        (Some(_), Stage::Codec) => {
            bail!("pretrain starts from a fresh model; --model is not accepted")
        }
        (Some(p), _) => {
            let m = Checkpoint::load(p)?.model;
            if m.config != cfg.model {
                log::warn!(
                    "model shape comes from {}, not from the configuration",
                    p.display()
                );
            }
            m
        }
        (None, _) => bail!(
            "stage {} needs --model with the previous stage's checkpoint",
            stage.number()
        ),
    };
    let corpus = load_corpus(&a.inputs)?;
    let mut settings = cfg.train;
    if let Some(e) = a.epochs {
        match stage {
            Stage::Codec => settings.stage1.epochs = e,
            Stage::Vred => settings.stage2.epochs = e,
            Stage::Finetune => settings.stage3.epochs = e,
        }
    }
    settings.validate()?;
    let plan = settings.plan(stage, seed);
    let mut log = MetricsLog::new();
    let out: TrainOutcome = match stage {
        Stage::Codec => pretrain_feature_codec(model, &corpus, &plan, &mut log)?,
        Stage::Vred => train_vred(model, &corpus, &plan, &mut log)?,
        Stage::Finetune => finetune(model, &corpus, &plan, &mut log)?,
    };
    let ckpt = out.into_checkpoint(&log);
    finish_training(ckpt, &log, &a.out, a.csv.as_deref())
}

fn finish_training(
    ckpt: Checkpoint,
    log: &MetricsLog,
    out: &Path,
    csv: Option<&Path>,
) -> Result<()> {
    ckpt.save(out)?;
    if let Some(p) = csv {
        log.write(p)?;
    }
    if let Some(last) = log.rows().last() {
        log::info!(
            "final loss {:.6}; model digest {}",
            last.loss,
            ckpt.model.digest()
        );
    }
    Ok(())
}

/// Files as given, directories replaced by their `.wav` files in name order.
fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut wavs: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("reading {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
                .collect();
            wavs.sort();
            if wavs.is_empty() {
                bail!("{} contains no .wav files", p.display());
            }
            out.extend(wavs);
        } else if p.exists() {
            out.push(p.clone());
        } else {
            bail!("{}: no such file or directory", p.display());
        }
    }
    Ok(out)
}

fn load_corpus(inputs: &[PathBuf]) -> Result<Vec<AudioSignal>> {
    expand_inputs(inputs)?
        .iter()
        .map(|p| load_wav(p).map_err(Into::into))
        .collect()
}

fn is_raw(path: &Path) -> bool {
    path.extension()
        .is_some_and(|x| x.eq_ignore_ascii_case("raw"))
}

fn read_audio(path: &Path, sample_rate: u32) -> Result<AudioSignal> {
    if !is_raw(path) {
        return Ok(load_wav(path)?);
    }
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.len() % 8 != 0 {
        bail!(
            "{}: raw audio must be a whole number of f64 samples",
            path.display()
        );
    }
    let samples = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(AudioSignal::new(samples, sample_rate)?)
}

fn write_audio(path: &Path, signal: &AudioSignal) -> Result<()> {
    if is_raw(path) {
        let bytes: Vec<u8> = signal
            .samples
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    } else {
        write_wav(signal, path)?;
    }
    Ok(())
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
