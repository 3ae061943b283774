//! `avlink` command line: corpus synthesis, stage training, linking,
//! translation, and evaluation as reproducible runs.
//!
//! Every subcommand resolves its settings with flag > config file >
//! built-in default precedence and writes a `run.json` (resolved config,
//! binary version, metric outputs) into its output directory, so any
//! artifact can be traced back to the exact configuration that produced
//! it. Identical configurations produce byte-identical outputs.
//!
//! Exit codes: 0 success, 1 usage error (bad flags, malformed config), 2
//! runtime failure (I/O, malformed artifacts, diverged training). Logging
//! goes to stderr; `AV_LOG_LEVEL` selects `error`, `info` (default) or
//! `debug`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde_json::json;

use avlink::audio::{self, MelSpectrogram, SAMPLE_RATE};
use avlink::config::{RunConfig, RunRecord, SmoothnessChoice};
use avlink::corpus::{load_corpus, save_corpus, PreparedCorpus};
use avlink::link::{self, AudioCheckpoint, ImageCheckpoint};
use avlink::metrics::{
    acceleration, mds_embed, path_length, velocity, write_mds_csv, MetricsReport,
};
use avlink::priors::TimeScale;
use avlink::synth::{make_corpus, make_image_corpus, CorpusConfig};
use avlink::vae::{load_vae, save_vae, vae_from_avwr_bytes, MlpVae, VaeMetadata};
use avlink::wav::load_wav;
use avlink::Result;

#[derive(Parser, Debug)]
#[command(
    name = "avlink",
    version,
    about = "Audio-to-video translation through linked VAE latent spaces"
)]
struct Cli {
    /// JSON run-config file; flags override file values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Base seed for all stage generators.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Audio latent dimension.
    #[arg(long, global = true)]
    d: Option<usize>,
    /// Style prefix width of the audio latent.
    #[arg(long, global = true)]
    m: Option<usize>,
    /// Cycle-consistency weight.
    #[arg(long, global = true)]
    lambda_cycle: Option<f64>,
    /// Temporal-smoothness weight.
    #[arg(long, global = true)]
    lambda_p: Option<f64>,
    /// Smoothness penalty: mse, q, logmse or none.
    #[arg(long, global = true)]
    smoothness: Option<SmoothnessChoice>,
    /// Training epochs for the invoked stage.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Samples per optimizer step.
    #[arg(long, global = true)]
    batch: Option<usize>,
    /// Worker threads for training batches.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Corpus directory.
    #[arg(long, global = true, value_name = "DIR")]
    corpus: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long, global = true, value_name = "DIR")]
    checkpoints: Option<PathBuf>,
    /// Output directory for run records and reports.
    #[arg(long, global = true, value_name = "DIR")]
    outputs: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic labeled speech corpus into the corpus directory.
    SynthData {
        /// Number of speakers.
        #[arg(long, default_value_t = 8)]
        speakers: usize,
        /// Number of phoneme classes.
        #[arg(long, default_value_t = 12)]
        phonemes: usize,
        /// Utterances per speaker.
        #[arg(long, default_value_t = 20)]
        utterances: usize,
    },
    /// Train the audio VAE on the corpus.
    TrainAudio,
    /// Train the image VAE on the synthetic image corpus.
    TrainImage {
        /// Number of image classes.
        #[arg(long, default_value_t = 10)]
        classes: usize,
        /// Images per class.
        #[arg(long, default_value_t = 32)]
        per_class: usize,
    },
    /// Link the audio and image checkpoints by joint cycle refinement.
    Link {
        /// Audio checkpoint; defaults to <checkpoints>/audio_vae.avwr.
        #[arg(long, value_name = "FILE")]
        audio: Option<PathBuf>,
        /// Image checkpoint; defaults to <checkpoints>/image_vae.avwr.
        #[arg(long, value_name = "FILE")]
        image: Option<PathBuf>,
        /// Number of image classes for the refinement batches.
        #[arg(long, default_value_t = 10)]
        classes: usize,
        /// Images per class for the refinement batches.
        #[arg(long, default_value_t = 32)]
        per_class: usize,
    },
    /// Translate a WAV file into a 25 Hz grayscale PGM frame sequence.
    Translate {
        /// Linked model checkpoint (.avlm).
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// Input WAV, PCM16 mono 16 kHz.
        #[arg(long, value_name = "FILE")]
        wav: PathBuf,
        /// Output directory; defaults to the outputs directory.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Round-trip a WAV through the linked model and report metrics.
    EvalRoundtrip {
        /// Linked model checkpoint (.avlm).
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// Input WAV, PCM16 mono 16 kHz.
        #[arg(long, value_name = "FILE")]
        wav: PathBuf,
        /// Output directory; defaults to the outputs directory.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Latent-trajectory smoothness metrics for an audio model.
    EvalSmoothness {
        /// Audio checkpoint (.avwr) or linked model (.avlm).
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// Input WAV, PCM16 mono 16 kHz.
        #[arg(long, value_name = "FILE")]
        wav: PathBuf,
        /// Output directory; defaults to the outputs directory.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Classical MDS embedding (x,y,z CSV) of a latent trajectory.
    Mds {
        /// Audio checkpoint (.avwr) or linked model (.avlm).
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// Input WAV, PCM16 mono 16 kHz.
        #[arg(long, value_name = "FILE")]
        wav: PathBuf,
        /// Output directory; defaults to the outputs directory.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    if let Err(msg) = init_logging() {
        eprintln!("{msg}");
        return 1;
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let rc = match resolve_config(&cli) {
        Ok(rc) => rc,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 1;
        }
    };
    match dispatch(cli.command, rc) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Validates `AV_LOG_LEVEL` and points the logger at stderr without
/// timestamps, keeping reruns byte-comparable.
fn init_logging() -> std::result::Result<(), String> {
    let level = std::env::var("AV_LOG_LEVEL").unwrap_or_else(|_| "info".into());
    match level.as_str() {
        "error" | "info" | "debug" => {
            env_logger::Builder::new()
                .parse_filters(&level)
                .format_timestamp(None)
                .init();
            Ok(())
        }
        other => Err(format!(
            "error: AV_LOG_LEVEL must be error, info or debug, got {other:?}"
        )),
    }
}

/// Flag > config file > built-in default, field by field.
fn resolve_config(cli: &Cli) -> std::result::Result<RunConfig, String> {
    let mut rc = match &cli.config {
        Some(path) => RunConfig::load(path)
            .map_err(|e| format!("config file {}: {e}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(v) = cli.seed {
        rc.seed = v;
    }
    if let Some(v) = cli.d {
        rc.d = v;
    }
    if let Some(v) = cli.m {
        rc.m = v;
    }
    if let Some(v) = cli.lambda_cycle {
        rc.lambda_cycle = v;
    }
    if let Some(v) = cli.lambda_p {
        rc.lambda_p = v;
    }
    if let Some(v) = cli.smoothness {
        rc.smoothness = v;
    }
    if let Some(v) = cli.epochs {
        rc.epochs = Some(v);
    }
    if let Some(v) = cli.batch {
        rc.batch = v;
    }
    if let Some(v) = cli.threads {
        rc.threads = v;
    }
    if let Some(v) = &cli.corpus {
        rc.corpus = v.clone();
    }
    if let Some(v) = &cli.checkpoints {
        rc.checkpoints = v.clone();
    }
    if let Some(v) = &cli.outputs {
        rc.outputs = v.clone();
    }
    rc.validate().map_err(|e| e.to_string())?;
    Ok(rc)
}

fn dispatch(command: Command, rc: RunConfig) -> Result<()> {
    match command {
        Command::SynthData {
            speakers,
            phonemes,
            utterances,
        } => synth_data(rc, speakers, phonemes, utterances),
        Command::TrainAudio => train_audio(rc),
        Command::TrainImage { classes, per_class } => train_image(rc, classes, per_class),
        Command::Link {
            audio,
            image,
            classes,
            per_class,
        } => link_models(rc, audio, image, classes, per_class),
        Command::Translate { model, wav, out } => translate(rc, model, wav, out),
        Command::EvalRoundtrip { model, wav, out } => eval_roundtrip(rc, model, wav, out),
        Command::EvalSmoothness { model, wav, out } => eval_smoothness(rc, model, wav, out),
        Command::Mds { model, wav, out } => mds(rc, model, wav, out),
    }
}

fn synth_data(rc: RunConfig, speakers: usize, phonemes: usize, utterances: usize) -> Result<()> {
    let cc = CorpusConfig {
        n_speakers: speakers,
        n_phonemes: phonemes,
        utterances_per_speaker: utterances,
        seed: rc.seed,
    };
    let corpus = make_corpus(&cc)?;
    save_corpus(&rc.corpus, &corpus)?;
    let seconds: f64 = corpus
        .utterances
        .iter()
        .map(|u| u.wave.samples.len() as f64 / SAMPLE_RATE as f64)
        .sum();
    log::info!(
        "wrote {} utterances ({seconds:.1} s) to {}",
        corpus.utterances.len(),
        rc.corpus.display()
    );
    let metrics = json!({
        "utterances": corpus.utterances.len(),
        "speakers": speakers,
        "phonemes": phonemes,
        "audio_seconds": seconds,
    });
    let dir = rc.corpus.clone();
    RunRecord::new("synth-data", rc, metrics).write(&dir)?;
    Ok(())
}

fn train_audio(rc: RunConfig) -> Result<()> {
    let corpus = load_corpus(&rc.corpus)?;
    let prepared = PreparedCorpus::prepare(&corpus)?;
    let cfg = rc.link_config();
    let ckpt = link::train_audio(&prepared, &cfg)?;
    let mut meta = VaeMetadata::describe(&ckpt.vae, cfg.m, cfg.seed);
    meta.epoch = cfg.audio_epochs;
    meta.log_s = Some(ckpt.time_scale.log_s);
    let path = rc.checkpoints.join("audio_vae.avwr");
    fs::create_dir_all(&rc.checkpoints)?;
    save_vae(&path, &ckpt.vae, &meta)?;
    log::info!("wrote audio checkpoint {}", path.display());
    let metrics = json!({
        "checkpoint": path.display().to_string(),
        "epoch_losses": ckpt.epoch_losses,
        "final_loss": ckpt.epoch_losses.last(),
        "log_s": ckpt.time_scale.log_s,
    });
    let dir = rc.outputs.clone();
    RunRecord::new("train-audio", rc, metrics).write(&dir)?;
    Ok(())
}

fn train_image(rc: RunConfig, classes: usize, per_class: usize) -> Result<()> {
    let cfg = rc.link_config();
    let images = make_image_corpus(classes, per_class, cfg.image_size, rc.seed)?;
    let ckpt = link::train_image(&images, &cfg)?;
    let mut meta = VaeMetadata::describe(&ckpt.vae, 0, cfg.seed);
    meta.epoch = cfg.image_epochs;
    let path = rc.checkpoints.join("image_vae.avwr");
    fs::create_dir_all(&rc.checkpoints)?;
    save_vae(&path, &ckpt.vae, &meta)?;
    log::info!("wrote image checkpoint {}", path.display());
    let metrics = json!({
        "checkpoint": path.display().to_string(),
        "epoch_losses": ckpt.epoch_losses,
        "final_loss": ckpt.epoch_losses.last(),
    });
    let dir = rc.outputs.clone();
    RunRecord::new("train-image", rc, metrics).write(&dir)?;
    Ok(())
}

fn link_models(
    rc: RunConfig,
    audio: Option<PathBuf>,
    image: Option<PathBuf>,
    classes: usize,
    per_class: usize,
) -> Result<()> {
    let corpus = load_corpus(&rc.corpus)?;
    let prepared = PreparedCorpus::prepare(&corpus)?;
    let cfg = rc.link_config();
    let audio_path = audio.unwrap_or_else(|| rc.checkpoints.join("audio_vae.avwr"));
    let image_path = image.unwrap_or_else(|| rc.checkpoints.join("image_vae.avwr"));
    let (audio_vae, audio_meta) = load_vae(&audio_path)?;
    let (image_vae, _) = load_vae(&image_path)?;
    let images = make_image_corpus(classes, per_class, cfg.image_size, rc.seed)?;
    let audio_ckpt = AudioCheckpoint {
        vae: audio_vae,
        time_scale: TimeScale::new(audio_meta.log_s.unwrap_or(0.0)),
        epoch_losses: Vec::new(),
    };
    let image_ckpt = ImageCheckpoint {
        vae: image_vae,
        epoch_losses: Vec::new(),
    };
    let (model, report) = link::refine_joint(audio_ckpt, image_ckpt, &prepared, &images, &cfg)?;
    let path = rc.checkpoints.join("linked.avlm");
    link::save_linked(&path, &model)?;
    log::info!("wrote linked model {}", path.display());
    let metrics = json!({
        "model": path.display().to_string(),
        "epoch_image_loss": report.epoch_image_loss,
        "epoch_cycle_loss": report.epoch_cycle_loss,
        "epoch_roundtrip_snr_db": report.epoch_roundtrip_snr_db,
        "final_roundtrip_snr_db": report.epoch_roundtrip_snr_db.last(),
    });
    let dir = rc.outputs.clone();
    RunRecord::new("link", rc, metrics).write(&dir)?;
    Ok(())
}

fn translate(rc: RunConfig, model: PathBuf, wav: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let model = link::load_linked(&model)?;
    let wave = load_wav(&wav)?;
    let video = link::translate_stream(&model, &wave)?;
    let dir = out.unwrap_or_else(|| rc.outputs.clone());
    link::save_video(&dir, &video)?;
    log::info!("wrote {} frames to {}", video.frames.len(), dir.display());
    let metrics = json!({
        "frames": video.frames.len(),
        "frame_rate": video.frame_rate,
    });
    RunRecord::new("translate", rc, metrics).write(&dir)?;
    Ok(())
}

fn eval_roundtrip(rc: RunConfig, model: PathBuf, wav: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let model = link::load_linked(&model)?;
    let mel = read_mel(&wav)?;
    let snr_db = link::roundtrip_snr(&model, &mel)?;
    let report = trajectory_report(&model.audio_vae, &mel, snr_db)?;
    let dir = out.unwrap_or_else(|| rc.outputs.clone());
    let path = write_metrics(&dir, &report)?;
    log::info!("round-trip SNR {snr_db:.3} dB; report at {}", path.display());
    RunRecord::new("eval-roundtrip", rc, serde_json::to_value(&report)?).write(&dir)?;
    Ok(())
}

fn eval_smoothness(
    rc: RunConfig,
    model: PathBuf,
    wav: PathBuf,
    out: Option<PathBuf>,
) -> Result<()> {
    let vae = load_audio_model(&model)?;
    let mel = read_mel(&wav)?;
    let snr_db = link::audio_roundtrip_snr(&vae, &mel)?;
    let report = trajectory_report(&vae, &mel, snr_db)?;
    let dir = out.unwrap_or_else(|| rc.outputs.clone());
    let path = write_metrics(&dir, &report)?;
    log::info!(
        "velocity {:.3}, acceleration {:.3}; report at {}",
        report.velocity,
        report.acceleration,
        path.display()
    );
    RunRecord::new("eval-smoothness", rc, serde_json::to_value(&report)?).write(&dir)?;
    Ok(())
}

fn mds(rc: RunConfig, model: PathBuf, wav: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let vae = load_audio_model(&model)?;
    let mel = read_mel(&wav)?;
    let traj = link::latent_trajectory(&vae, &mel)?;
    let emb = mds_embed(&traj.points, 3)?;
    let dir = out.unwrap_or_else(|| rc.outputs.clone());
    fs::create_dir_all(&dir)?;
    let path = dir.join("mds.csv");
    write_mds_csv(&path, &emb.coords)?;
    log::info!("wrote {} embedded points to {}", emb.coords.rows(), path.display());
    let metrics = json!({
        "points": emb.coords.rows(),
        "path_length": path_length(&emb.coords),
        "degenerate": emb.degenerate,
    });
    RunRecord::new("mds", rc, metrics).write(&dir)?;
    Ok(())
}

fn read_mel(wav: &Path) -> Result<MelSpectrogram> {
    audio::wave_to_mel(&load_wav(wav)?)
}

/// Accepts either a bare audio checkpoint or a linked model and returns
/// the audio VAE.
fn load_audio_model(path: &Path) -> Result<MlpVae> {
    let bytes = fs::read(path)?;
    if bytes.len() >= 4 && &bytes[0..4] == b"AVLM" {
        Ok(link::load_linked(path)?.audio_vae)
    } else {
        Ok(vae_from_avwr_bytes(&bytes)?.0)
    }
}

/// Round-trip SNR plus trajectory smoothness and MDS path length, the
/// per-model metrics report.
fn trajectory_report(vae: &MlpVae, mel: &MelSpectrogram, snr_db: f64) -> Result<MetricsReport> {
    let traj = link::latent_trajectory(vae, mel)?;
    let emb = mds_embed(&traj.points, 3)?;
    Ok(MetricsReport {
        snr_db,
        velocity: velocity(&traj)?,
        acceleration: acceleration(&traj)?,
        mds_path_length: path_length(&emb.coords),
    })
}

fn write_metrics(dir: &Path, report: &MetricsReport) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join("metrics.json");
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    fs::write(&path, text)?;
    Ok(path)
}
