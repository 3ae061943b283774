//! Cross-modal training orchestration and the translation pipelines.
//!
//! The audio VAE is trained with the recombined-reconstruction and
//! temporal-smoothness priors, the image VAE with a plain ELBO, and the two
//! latent spaces are linked by fine-tuning the image VAE under a
//! cycle-consistency loss on audio content latents. Inference (audio→video
//! translation and the mel round-trip) runs on posterior means only and is
//! deterministic.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::{
    self, MelSpectrogram, WaveBuffer, FLOOR_DB, N_MELS, SEGMENT_FRAMES, SEGMENT_HOP_FRAMES,
};
use crate::corpus::{LabeledSegment, PreparedCorpus, PreparedUtterance};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::metrics::{self, LatentTrajectory};
use crate::pgm::{self, GrayImage};
use crate::priors::{
    recombined_loss_for_triplet, smoothness_loss, split_latent, LatentPair, PairSampler,
    SmoothnessVariant, TimeScale, TripletSampler,
};
use crate::synth::ImageCorpus;
use crate::vae::{
    adam_step, elbo_loss_and_grads, vae_from_avwr_bytes, vae_to_avwr_bytes, AdamState, EncCache,
    MlpVae, VaeMetadata,
};

/// Video frame rate; one frame per 4-frame mel segment hop.
pub const VIDEO_FPS: u32 = 25;
/// Minimum translatable audio length in seconds (one full mel segment).
pub const MIN_TRANSLATE_S: f64 = 0.2;
/// A batch loss above this (or any non-finite loss) aborts training.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// Hyperparameters shared by the training stages; a trained [`LinkedModel`]
/// carries a snapshot of the values it was built with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkConfig {
    /// Audio latent dimension.
    pub d: usize,
    /// Style prefix width; the content suffix `d - m` feeds the image space.
    pub m: usize,
    /// Image side length; image models consume `image_size²` pixels.
    pub image_size: usize,
    /// Base seed; each stage derives its own deterministic RNG stream.
    pub seed: u64,
    pub audio_epochs: usize,
    pub image_epochs: usize,
    pub joint_epochs: usize,
    /// Samples (triplets, images, or content draws) per optimizer step.
    pub batch_size: usize,
    /// Smoothness pairs folded into each audio batch.
    pub pairs_per_batch: usize,
    /// Adam learning rate for every stage.
    pub lr: f64,
    /// Temporal-smoothness weight.
    pub lambda_p: f64,
    /// Cycle-consistency weight.
    pub lambda_cycle: f64,
    /// Penalty shape of the smoothness prior.
    pub smoothness: SmoothnessVariant,
    /// Worker threads for batch gradient accumulation. Results are
    /// deterministic per thread count; `1` reproduces the sequential loop
    /// bit for bit.
    pub threads: usize,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            d: 64,
            m: 16,
            image_size: 32,
            seed: 0,
            audio_epochs: 30,
            image_epochs: 30,
            joint_epochs: 10,
            batch_size: 32,
            pairs_per_batch: 8,
            lr: 1e-3,
            lambda_p: 1e3,
            lambda_cycle: 10.0,
            smoothness: SmoothnessVariant::LogMse,
            threads: 1,
        }
    }
}

impl LinkConfig {
    /// Image latent dimension implied by the split.
    pub fn content_dim(&self) -> usize {
        self.d - self.m
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.m >= self.d {
            return Err(Error::InvalidArgument(format!(
                "style dimension m = {} must satisfy 0 < m < d = {}",
                self.m, self.d
            )));
        }
        if self.image_size == 0 || self.batch_size == 0 || self.pairs_per_batch == 0 {
            return Err(Error::InvalidArgument(
                "image_size, batch_size and pairs_per_batch must be positive".into(),
            ));
        }
        if self.threads == 0 {
            return Err(Error::InvalidArgument("threads must be positive".into()));
        }
        if !(self.lr > 0.0)
            || !self.lambda_p.is_finite()
            || self.lambda_p < 0.0
            || !self.lambda_cycle.is_finite()
            || self.lambda_cycle < 0.0
        {
            return Err(Error::InvalidArgument(
                "lr must be positive; lambda_p and lambda_cycle nonnegative".into(),
            ));
        }
        Ok(())
    }
}

// Deterministic per-stage RNG streams derived from one base seed.
const STREAM_AUDIO: u64 = 1;
const STREAM_IMAGE: u64 = 2;
const STREAM_JOINT: u64 = 3;

fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn standard_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Audio codec plus its smoothness time scale, with the per-epoch loss trace.
#[derive(Debug, Clone)]
pub struct AudioCheckpoint {
    pub vae: MlpVae,
    pub time_scale: TimeScale,
    pub epoch_losses: Vec<f64>,
}

/// Image codec with its per-epoch loss trace.
#[derive(Debug, Clone)]
pub struct ImageCheckpoint {
    pub vae: MlpVae,
    pub epoch_losses: Vec<f64>,
}

/// The linked audio/image pair. Construction enforces the dimension
/// contract: the image latent equals the audio content dimension.
#[derive(Debug, Clone)]
pub struct LinkedModel {
    pub audio_vae: MlpVae,
    pub image_vae: MlpVae,
    pub time_scale: TimeScale,
    pub config: LinkConfig,
}

impl LinkedModel {
    pub fn new(
        audio_vae: MlpVae,
        image_vae: MlpVae,
        time_scale: TimeScale,
        config: LinkConfig,
    ) -> Result<Self> {
        config.validate()?;
        if audio_vae.latent_dim() != config.d {
            return Err(Error::Dimension {
                expected: config.d,
                got: audio_vae.latent_dim(),
                context: "audio latent dimension",
            });
        }
        if audio_vae.input_dim() != SEGMENT_FRAMES * N_MELS {
            return Err(Error::Dimension {
                expected: SEGMENT_FRAMES * N_MELS,
                got: audio_vae.input_dim(),
                context: "audio VAE input dimension",
            });
        }
        if image_vae.latent_dim() != config.content_dim() {
            return Err(Error::Dimension {
                expected: config.content_dim(),
                got: image_vae.latent_dim(),
                context: "image latent vs audio content dimension",
            });
        }
        if image_vae.input_dim() != config.image_size * config.image_size {
            return Err(Error::Dimension {
                expected: config.image_size * config.image_size,
                got: image_vae.input_dim(),
                context: "image VAE input dimension",
            });
        }
        Ok(Self {
            audio_vae,
            image_vae,
            time_scale,
            config,
        })
    }
}

/// A decoded 25 Hz grayscale clip; one frame per source mel segment.
#[derive(Debug, Clone)]
pub struct VideoSequence {
    pub frames: Vec<GrayImage>,
    pub frame_rate: u32,
    /// Index of the mel segment each frame was decoded from.
    pub source_segments: Vec<usize>,
}

fn diverged(epoch: usize, loss: f64) -> Error {
    log::error!("training diverged at epoch {epoch} with loss {loss:.3e}");
    Error::Diverged { epoch, loss }
}

/// Maps a batch-loss outcome onto the divergence policy: non-finite losses
/// and losses above [`DIVERGENCE_LOSS`] abort, as do non-finite activations
/// surfaced by the forward passes.
fn guard_loss(outcome: Result<f64>, epoch: usize) -> Result<f64> {
    match outcome {
        Ok(l) if l.is_finite() && l <= DIVERGENCE_LOSS => Ok(l),
        Ok(l) => Err(diverged(epoch, l)),
        Err(Error::NonFiniteLoss) | Err(Error::NonFiniteActivation { .. }) => {
            Err(diverged(epoch, f64::NAN))
        }
        Err(e) => Err(e),
    }
}

/// Trains a fresh default audio VAE on the corpus (see [`train_audio_into`]).
pub fn train_audio(corpus: &PreparedCorpus, cfg: &LinkConfig) -> Result<AudioCheckpoint> {
    cfg.validate()?;
    let mut vae = MlpVae::audio_default(cfg.d, cfg.seed)?;
    let mut time_scale = TimeScale::default();
    let epoch_losses = train_audio_into(&mut vae, &mut time_scale, corpus, cfg)?;
    Ok(AudioCheckpoint {
        vae,
        time_scale,
        epoch_losses,
    })
}

/// Trains the audio VAE in place. Per batch the loss is the mean
/// recombined-reconstruction loss over sampled triplets plus `lambda_p`
/// times the LOGMSE smoothness loss over sampled pairs of posterior means;
/// both terms backpropagate into the encoder and the time scale trains
/// alongside the weights. On divergence the model rolls back to the last
/// completed epoch and [`Error::Diverged`] is returned.
pub fn train_audio_into(
    vae: &mut MlpVae,
    time_scale: &mut TimeScale,
    corpus: &PreparedCorpus,
    cfg: &LinkConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if vae.latent_dim() != cfg.d {
        return Err(Error::Dimension {
            expected: cfg.d,
            got: vae.latent_dim(),
            context: "audio latent dimension",
        });
    }
    let labeled = corpus.labeled_train_segments();
    let triplets = TripletSampler::new(&labeled, corpus.n_speakers, corpus.n_phonemes)?;
    let pairs = PairSampler::new(&corpus.train)?;
    let n_segments: usize = corpus.train.iter().map(|u| u.segments.len()).sum();
    let batches_per_epoch = (n_segments / cfg.batch_size).max(1);

    let mut adam = AdamState::with_lr(vae.n_params(), cfg.lr);
    let mut adam_s = AdamState::with_lr(1, cfg.lr);
    let mut grads = vec![0.0; vae.n_params()];
    let mut rng = stage_rng(cfg.seed, STREAM_AUDIO);
    let mut last_good = (vae.params().to_vec(), time_scale.log_s);
    let mut epoch_losses = Vec::with_capacity(cfg.audio_epochs);

    for epoch in 0..cfg.audio_epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..batches_per_epoch {
            let outcome = audio_batch(
                vae,
                time_scale,
                cfg,
                &labeled,
                &triplets,
                &corpus.train,
                &pairs,
                &mut grads,
                &mut rng,
            );
            let (batch_loss, d_log_s) = match outcome {
                Ok((l, g)) if l.is_finite() && l <= DIVERGENCE_LOSS => (l, g),
                Ok((l, _)) => {
                    vae.params_mut().copy_from_slice(&last_good.0);
                    time_scale.log_s = last_good.1;
                    return Err(diverged(epoch, l));
                }
                Err(Error::NonFiniteLoss) | Err(Error::NonFiniteActivation { .. }) => {
                    vae.params_mut().copy_from_slice(&last_good.0);
                    time_scale.log_s = last_good.1;
                    return Err(diverged(epoch, f64::NAN));
                }
                Err(e) => return Err(e),
            };
            adam_step(&mut adam, vae.params_mut(), &grads)?;
            let mut s = [time_scale.log_s];
            adam_step(&mut adam_s, &mut s, &[d_log_s])?;
            time_scale.log_s = s[0];
            epoch_loss += batch_loss;
        }
        epoch_loss /= batches_per_epoch as f64;
        epoch_losses.push(epoch_loss);
        log::info!("audio epoch {epoch}: loss {epoch_loss:.6}");
        last_good = (vae.params().to_vec(), time_scale.log_s);
    }
    Ok(epoch_losses)
}

/// Accumulates per-item losses and parameter gradients over `items`,
/// splitting the work across up to `threads` workers. Each worker sums its
/// contiguous chunk into a private buffer; buffers are then reduced in
/// chunk order, so the result is deterministic for a given thread count and
/// `threads = 1` reproduces the plain sequential loop bit for bit.
fn parallel_accumulate<T: Sync>(
    threads: usize,
    items: &[T],
    grads: &mut [f64],
    f: impl Fn(&T, &mut [f64]) -> Result<f64> + Sync,
) -> Result<f64> {
    let workers = threads.min(items.len()).max(1);
    if workers == 1 {
        let mut sum = 0.0;
        for item in items {
            sum += f(item, grads)?;
        }
        return Ok(sum);
    }
    let n = grads.len();
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    let parts = std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    let mut local = vec![0.0; n];
                    let mut sum = 0.0;
                    for item in part {
                        sum += f(item, &mut local)?;
                    }
                    Ok((sum, local))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect::<Vec<Result<(f64, Vec<f64>)>>>()
    });
    let mut sum = 0.0;
    for part in parts {
        let (part_sum, local) = part?;
        sum += part_sum;
        for (g, l) in grads.iter_mut().zip(&local) {
            *g += l;
        }
    }
    Ok(sum)
}

/// One audio batch: fills `grads` with the scaled parameter gradient and
/// returns `(batch loss, time-scale gradient)`.
#[allow(clippy::too_many_arguments)]
fn audio_batch(
    vae: &MlpVae,
    time_scale: &TimeScale,
    cfg: &LinkConfig,
    labeled: &[LabeledSegment],
    triplets: &TripletSampler,
    utterances: &[PreparedUtterance],
    pairs: &PairSampler,
    grads: &mut [f64],
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    grads.fill(0.0);
    let d = vae.latent_dim();
    let b = cfg.batch_size as f64;

    // sampling stays sequential so the RNG stream is identical for every
    // thread count
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let triplet = triplets.sample(labeled, rng);
        let noise_style = standard_noise(d, rng);
        let noise_content = standard_noise(d, rng);
        batch.push((triplet, noise_style, noise_content));
    }
    let rr_sum = parallel_accumulate(cfg.threads, &batch, grads, |(t, ns, nc), g| {
        recombined_loss_for_triplet(vae, t, cfg.m, ns, nc, g)
    })?;
    for g in grads.iter_mut() {
        *g /= b;
    }
    let mut loss = rr_sum / b;
    let mut d_log_s = 0.0;

    if cfg.lambda_p > 0.0 {
        // smoothness over posterior means; gradients re-enter the encoder
        let mut encoded: Vec<(Vec<f64>, EncCache, Vec<f64>, EncCache, f64)> =
            Vec::with_capacity(cfg.pairs_per_batch);
        for _ in 0..cfg.pairs_per_batch {
            let pair = pairs.sample(utterances, rng);
            let (lg_i, cache_i) = vae.encode_with_cache(&pair.seg_i.unit_flat())?;
            let (lg_j, cache_j) = vae.encode_with_cache(&pair.seg_j.unit_flat())?;
            encoded.push((lg_i.mu, cache_i, lg_j.mu, cache_j, pair.dt()));
        }
        let latent_pairs: Vec<LatentPair> = encoded
            .iter()
            .map(|(mu_i, _, mu_j, _, dt)| LatentPair {
                z_i: mu_i,
                z_j: mu_j,
                dt: *dt,
            })
            .collect();
        let (sm_loss, sm_grads) = smoothness_loss(cfg.smoothness, &latent_pairs, time_scale)?;
        let zeros = vec![0.0; d];
        for (p, (_, cache_i, _, cache_j, _)) in encoded.iter().enumerate() {
            let d_mu_i: Vec<f64> = sm_grads.d_z_i[p].iter().map(|g| cfg.lambda_p * g).collect();
            let d_mu_j: Vec<f64> = sm_grads.d_z_j[p].iter().map(|g| cfg.lambda_p * g).collect();
            vae.encoder_backward(cache_i, &d_mu_i, &zeros, grads);
            vae.encoder_backward(cache_j, &d_mu_j, &zeros, grads);
        }
        loss += cfg.lambda_p * sm_loss;
        d_log_s = cfg.lambda_p * sm_grads.d_log_s;
    }
    Ok((loss, d_log_s))
}

/// Trains a fresh image VAE on the image corpus (see [`train_image_into`]).
pub fn train_image(images: &ImageCorpus, cfg: &LinkConfig) -> Result<ImageCheckpoint> {
    cfg.validate()?;
    let mut vae = MlpVae::new(
        cfg.image_size * cfg.image_size,
        &[256],
        cfg.content_dim(),
        crate::vae::OutputActivation::Sigmoid,
        cfg.seed,
    )?;
    let epoch_losses = train_image_into(&mut vae, images, cfg)?;
    Ok(ImageCheckpoint { vae, epoch_losses })
}

/// Trains the image VAE in place with a plain per-sample ELBO, mirroring
/// [`train_audio_into`]'s batching, logging, and divergence rollback.
pub fn train_image_into(
    vae: &mut MlpVae,
    images: &ImageCorpus,
    cfg: &LinkConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if images.images.is_empty() {
        return Err(Error::InvalidArgument("image corpus is empty".into()));
    }
    if vae.input_dim() != images.size * images.size {
        return Err(Error::Dimension {
            expected: images.size * images.size,
            got: vae.input_dim(),
            context: "image VAE input vs corpus image size",
        });
    }
    let d = vae.latent_dim();
    let batches_per_epoch = (images.images.len() / cfg.batch_size).max(1);
    let mut adam = AdamState::with_lr(vae.n_params(), cfg.lr);
    let mut grads = vec![0.0; vae.n_params()];
    let mut rng = stage_rng(cfg.seed, STREAM_IMAGE);
    let mut last_good = vae.params().to_vec();
    let mut epoch_losses = Vec::with_capacity(cfg.image_epochs);

    for epoch in 0..cfg.image_epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..batches_per_epoch {
            grads.fill(0.0);
            let outcome = (|| {
                let mut batch = Vec::with_capacity(cfg.batch_size);
                for _ in 0..cfg.batch_size {
                    let idx = rng.gen_range(0..images.images.len());
                    let noise = standard_noise(d, &mut rng);
                    batch.push((idx, noise));
                }
                let vae_ref: &MlpVae = vae;
                let sum = parallel_accumulate(cfg.threads, &batch, &mut grads, |(idx, noise), g| {
                    elbo_loss_and_grads(vae_ref, images.images[*idx].pixels(), noise, g)
                })?;
                Ok(sum / cfg.batch_size as f64)
            })();
            let batch_loss = match guard_loss(outcome, epoch) {
                Ok(l) => l,
                Err(e) => {
                    vae.params_mut().copy_from_slice(&last_good);
                    return Err(e);
                }
            };
            for g in grads.iter_mut() {
                *g /= cfg.batch_size as f64;
            }
            adam_step(&mut adam, vae.params_mut(), &grads)?;
            epoch_loss += batch_loss;
        }
        epoch_loss /= batches_per_epoch as f64;
        epoch_losses.push(epoch_loss);
        log::info!("image epoch {epoch}: loss {epoch_loss:.6}");
        last_good = vae.params().to_vec();
    }
    Ok(epoch_losses)
}

/// Cycle-consistency loss `L_cycle = Σ_k |E_V(D_V(z_c))_k − z_c_k|` where
/// both image passes use mean values. Parameter gradients accumulate into
/// `grads`; the returned vector is `dL/dz_c` for callers that also update
/// the content source. The L1 subgradient at exact zeros is taken as 0.
pub fn cycle_loss(image_vae: &MlpVae, z_c: &[f64], grads: &mut [f64]) -> Result<(f64, Vec<f64>)> {
    let d = image_vae.latent_dim();
    if z_c.len() != d {
        return Err(Error::Dimension {
            expected: d,
            got: z_c.len(),
            context: "cycle content vector",
        });
    }
    if grads.len() != image_vae.n_params() {
        return Err(Error::Dimension {
            expected: image_vae.n_params(),
            got: grads.len(),
            context: "cycle gradient buffer",
        });
    }
    let (img, dec_cache) = image_vae.decode_with_cache(z_c)?;
    let (lg, enc_cache) = image_vae.encode_with_cache(&img)?;
    let mut loss = 0.0;
    let mut d_mu = vec![0.0; d];
    for k in 0..d {
        let r = lg.mu[k] - z_c[k];
        loss += r.abs();
        d_mu[k] = if r > 0.0 {
            1.0
        } else if r < 0.0 {
            -1.0
        } else {
            0.0
        };
    }
    let d_zero = vec![0.0; d];
    let d_img = image_vae.encoder_backward(&enc_cache, &d_mu, &d_zero, grads);
    let d_z_dec = image_vae.decoder_backward(&dec_cache, &d_img, grads);
    let d_z_c = d_z_dec
        .iter()
        .zip(&d_mu)
        .map(|(through, sign)| through - sign)
        .collect();
    Ok((loss, d_z_c))
}

/// [`cycle_loss`] evaluated without gradients, recording the kink indicator
/// bits (hidden-unit signs of both passes plus the L1 residual signs) for
/// finite-difference checking.
pub fn cycle_loss_with_signs(
    image_vae: &MlpVae,
    z_c: &[f64],
    signs: &mut Vec<bool>,
) -> Result<f64> {
    let (img, dec_cache) = image_vae.decode_with_cache(z_c)?;
    let (lg, enc_cache) = image_vae.encode_with_cache(&img)?;
    dec_cache.push_kink_signs(signs);
    enc_cache.push_kink_signs(signs);
    let mut loss = 0.0;
    for k in 0..z_c.len() {
        let r = lg.mu[k] - z_c[k];
        signs.push(r > 0.0);
        loss += r.abs();
    }
    Ok(loss)
}

/// Per-epoch traces emitted by joint refinement.
#[derive(Debug, Clone, Default)]
pub struct JointReport {
    pub epoch_image_loss: Vec<f64>,
    pub epoch_cycle_loss: Vec<f64>,
    /// Round-trip SNR on the held-out probe utterance after each epoch.
    pub epoch_roundtrip_snr_db: Vec<f64>,
}

/// Joint cycle refinement: consumes the two checkpoints, links them, and
/// fine-tunes the image VAE (see [`refine_linked`]).
pub fn refine_joint(
    audio: AudioCheckpoint,
    image: ImageCheckpoint,
    corpus: &PreparedCorpus,
    images: &ImageCorpus,
    cfg: &LinkConfig,
) -> Result<(LinkedModel, JointReport)> {
    let mut model = LinkedModel::new(audio.vae, image.vae, audio.time_scale, cfg.clone())?;
    let report = refine_linked(&mut model, corpus, images, cfg)?;
    Ok((model, report))
}

/// Fine-tunes the image VAE of a linked model by alternating one image-ELBO
/// batch with one cycle batch (`lambda_cycle · L_cycle` on content latents
/// sampled from the audio posterior). The audio encoder and decoder stay
/// frozen, keeping the audio checkpoint's metrics valid. Emits the held-out
/// round-trip SNR after each epoch. On divergence the image VAE rolls back
/// to the last completed epoch and [`Error::Diverged`] is returned.
pub fn refine_linked(
    model: &mut LinkedModel,
    corpus: &PreparedCorpus,
    images: &ImageCorpus,
    cfg: &LinkConfig,
) -> Result<JointReport> {
    cfg.validate()?;
    if images.size != cfg.image_size {
        return Err(Error::Dimension {
            expected: cfg.image_size,
            got: images.size,
            context: "image corpus size vs config",
        });
    }
    let probe = corpus
        .val
        .first()
        .or_else(|| corpus.train.first())
        .ok_or_else(|| Error::InvalidArgument("corpus has no utterances".into()))?;
    let probe_mel = audio::mel_from_segments(&probe.segments)?;
    let train_segments: Vec<&crate::audio::MelSegment> = corpus.train_segments().collect();
    if train_segments.is_empty() {
        return Err(Error::InvalidArgument("corpus has no training segments".into()));
    }

    let d = model.audio_vae.latent_dim();
    let m = cfg.m;
    let batches_per_epoch = (images.images.len() / cfg.batch_size).max(1);
    let mut adam = AdamState::with_lr(model.image_vae.n_params(), cfg.lr);
    let mut grads = vec![0.0; model.image_vae.n_params()];
    let mut rng = stage_rng(cfg.seed, STREAM_JOINT);
    let mut last_good = model.image_vae.params().to_vec();
    let mut report = JointReport::default();

    for epoch in 0..cfg.joint_epochs {
        let mut image_loss = 0.0;
        let mut cycle_loss_sum = 0.0;
        for _ in 0..batches_per_epoch {
            // image ELBO batch
            grads.fill(0.0);
            let outcome = (|| {
                let d_img = model.image_vae.latent_dim();
                let mut batch = Vec::with_capacity(cfg.batch_size);
                for _ in 0..cfg.batch_size {
                    let idx = rng.gen_range(0..images.images.len());
                    let noise = standard_noise(d_img, &mut rng);
                    batch.push((idx, noise));
                }
                let sum = parallel_accumulate(cfg.threads, &batch, &mut grads, |(idx, noise), g| {
                    elbo_loss_and_grads(&model.image_vae, images.images[*idx].pixels(), noise, g)
                })?;
                Ok(sum / cfg.batch_size as f64)
            })();
            let batch_loss = match guard_loss(outcome, epoch) {
                Ok(l) => l,
                Err(e) => {
                    model.image_vae.params_mut().copy_from_slice(&last_good);
                    return Err(e);
                }
            };
            for g in grads.iter_mut() {
                *g /= cfg.batch_size as f64;
            }
            adam_step(&mut adam, model.image_vae.params_mut(), &grads)?;
            image_loss += batch_loss;

            // cycle batch on audio-posterior content draws
            grads.fill(0.0);
            let outcome = (|| {
                let mut batch = Vec::with_capacity(cfg.batch_size);
                for _ in 0..cfg.batch_size {
                    let seg = train_segments[rng.gen_range(0..train_segments.len())];
                    let noise = standard_noise(d - m, &mut rng);
                    batch.push((seg, noise));
                }
                let sum = parallel_accumulate(cfg.threads, &batch, &mut grads, |(seg, noise), g| {
                    let lg = model.audio_vae.encode(&seg.unit_flat())?;
                    let z_c: Vec<f64> = (m..d)
                        .map(|k| lg.mu[k] + (0.5 * lg.log_var[k]).exp() * noise[k - m])
                        .collect();
                    Ok(cycle_loss(&model.image_vae, &z_c, g)?.0)
                })?;
                Ok(cfg.lambda_cycle * sum / cfg.batch_size as f64)
            })();
            let batch_loss = match guard_loss(outcome, epoch) {
                Ok(l) => l,
                Err(e) => {
                    model.image_vae.params_mut().copy_from_slice(&last_good);
                    return Err(e);
                }
            };
            let scale = cfg.lambda_cycle / cfg.batch_size as f64;
            for g in grads.iter_mut() {
                *g *= scale;
            }
            adam_step(&mut adam, model.image_vae.params_mut(), &grads)?;
            cycle_loss_sum += batch_loss;
        }
        last_good = model.image_vae.params().to_vec();
        let snr = roundtrip_snr(model, &probe_mel)?;
        log::info!(
            "joint epoch {epoch}: image loss {:.6}, cycle loss {:.6}, round-trip SNR {snr:.3} dB",
            image_loss / batches_per_epoch as f64,
            cycle_loss_sum / batches_per_epoch as f64
        );
        report
            .epoch_image_loss
            .push(image_loss / batches_per_epoch as f64);
        report
            .epoch_cycle_loss
            .push(cycle_loss_sum / batches_per_epoch as f64);
        report.epoch_roundtrip_snr_db.push(snr);
    }
    Ok(report)
}

/// Translates audio to a 25 Hz grayscale video: mel → segments → encoder
/// means → content part → image decoder means. Pure and deterministic.
pub fn translate_stream(model: &LinkedModel, wave: &WaveBuffer) -> Result<VideoSequence> {
    let need = (MIN_TRANSLATE_S * wave.sample_rate as f64).round() as usize;
    if wave.samples.len() < need {
        return Err(Error::AudioTooShort {
            need,
            got: wave.samples.len(),
        });
    }
    let mel = audio::wave_to_mel(wave)?;
    let segments = audio::segment(&mel, SEGMENT_FRAMES, SEGMENT_HOP_FRAMES)?;
    let mut frames = Vec::with_capacity(segments.len());
    let mut source_segments = Vec::with_capacity(segments.len());
    for (i, seg) in segments.iter().enumerate() {
        let lg = model.audio_vae.encode(&seg.unit_flat())?;
        let (_, z_c) = split_latent(&lg.mu, model.config.m)?;
        let pixels = model.image_vae.decode_mean(z_c)?;
        frames.push(GrayImage::from_pixels(
            model.config.image_size,
            model.config.image_size,
            pixels,
        )?);
        source_segments.push(i);
    }
    Ok(VideoSequence {
        frames,
        frame_rate: VIDEO_FPS,
        source_segments,
    })
}

/// Mel round-trip through both latent spaces: per segment, the encoder mean
/// is split, the content part passes through the image VAE
/// (`ẑ_c = E_V(D_V(z_c))` means), and the audio decoder re-enters with the
/// original style. Overlapping reconstructions are averaged per frame.
pub fn roundtrip(model: &LinkedModel, mel: &MelSpectrogram) -> Result<MelSpectrogram> {
    let image_vae = &model.image_vae;
    roundtrip_with_content_map(model, mel, |z_c| {
        let img = image_vae.decode_mean(z_c)?;
        Ok(image_vae.encode(&img)?.mu)
    })
}

/// [`roundtrip`] with a caller-supplied content transform; the identity map
/// reproduces [`audio_only_roundtrip`] exactly.
pub fn roundtrip_with_content_map(
    model: &LinkedModel,
    mel: &MelSpectrogram,
    mut content_map: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<MelSpectrogram> {
    let m = model.config.m;
    roundtrip_with_latent_map(&model.audio_vae, mel, |z| {
        let (z_s, z_c) = split_latent(z, m)?;
        let z_c_hat = content_map(z_c)?;
        if z_c_hat.len() != z_c.len() {
            return Err(Error::Dimension {
                expected: z_c.len(),
                got: z_c_hat.len(),
                context: "content map output",
            });
        }
        let mut full = Vec::with_capacity(z.len());
        full.extend_from_slice(z_s);
        full.extend_from_slice(&z_c_hat);
        Ok(full)
    })
}

/// Audio-only round-trip (encoder mean → decoder), the image-free baseline.
pub fn audio_only_roundtrip(audio_vae: &MlpVae, mel: &MelSpectrogram) -> Result<MelSpectrogram> {
    roundtrip_with_latent_map(audio_vae, mel, |z| Ok(z.to_vec()))
}

fn roundtrip_with_latent_map(
    audio_vae: &MlpVae,
    mel: &MelSpectrogram,
    mut latent_map: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<MelSpectrogram> {
    segment_codec_roundtrip(mel, |unit| {
        let lg = audio_vae.encode(unit)?;
        let z = latent_map(&lg.mu)?;
        audio_vae.decode_mean(&z)
    })
}

/// Round-trips a mel spectrogram through an arbitrary per-segment codec:
/// `codec` maps each flattened unit-range segment to its reconstruction and
/// the blocks are overlap-averaged in dB. This is the shared evaluation
/// protocol for linear baselines and the VAE paths.
pub fn segment_codec_roundtrip(
    mel: &MelSpectrogram,
    mut codec: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<MelSpectrogram> {
    let segments = audio::segment(mel, SEGMENT_FRAMES, SEGMENT_HOP_FRAMES)?;
    let mut starts = Vec::with_capacity(segments.len());
    let mut blocks = Vec::with_capacity(segments.len());
    for seg in &segments {
        let unit = codec(&seg.unit_flat())?;
        if unit.len() != SEGMENT_FRAMES * N_MELS {
            return Err(Error::Dimension {
                expected: SEGMENT_FRAMES * N_MELS,
                got: unit.len(),
                context: "codec segment reconstruction",
            });
        }
        let mut block = Mat::zeros(SEGMENT_FRAMES, N_MELS);
        for r in 0..SEGMENT_FRAMES {
            for c in 0..N_MELS {
                block.set(r, c, audio::unit_to_db(unit[r * N_MELS + c]));
            }
        }
        starts.push(seg.start_frame);
        blocks.push(block);
    }
    Ok(average_overlapping(&starts, &blocks))
}

/// Averages overlapping segment reconstructions per frame and clamps to the
/// dB floor. Output rows cover `[0, max(start) + SEGMENT_FRAMES)`.
fn average_overlapping(starts: &[usize], blocks: &[Mat]) -> MelSpectrogram {
    let total = starts
        .iter()
        .map(|s| s + SEGMENT_FRAMES)
        .max()
        .unwrap_or(0);
    let mut sums = Mat::zeros(total, N_MELS);
    let mut counts = vec![0usize; total];
    for (&start, block) in starts.iter().zip(blocks) {
        for r in 0..block.rows() {
            let row = sums.row_mut(start + r);
            for (slot, &v) in row.iter_mut().zip(block.row(r)) {
                *slot += v;
            }
            counts[start + r] += 1;
        }
    }
    let frames = Mat::from_fn(total, N_MELS, |r, c| {
        if counts[r] == 0 {
            FLOOR_DB
        } else {
            (sums.get(r, c) / counts[r] as f64).max(FLOOR_DB)
        }
    });
    MelSpectrogram {
        frames,
        floor_db: FLOOR_DB,
    }
}

/// Linked round-trip SNR against the covered prefix of the reference mel.
pub fn roundtrip_snr(model: &LinkedModel, mel: &MelSpectrogram) -> Result<f64> {
    let rec = roundtrip(model, mel)?;
    snr_against_prefix(mel, &rec)
}

/// Audio-only round-trip SNR against the covered prefix of the reference.
pub fn audio_roundtrip_snr(audio_vae: &MlpVae, mel: &MelSpectrogram) -> Result<f64> {
    let rec = audio_only_roundtrip(audio_vae, mel)?;
    snr_against_prefix(mel, &rec)
}

/// SNR of `estimate` against the same-length prefix of `reference`;
/// round-trips only cover the frames their segments span.
pub fn snr_against_prefix(reference: &MelSpectrogram, estimate: &MelSpectrogram) -> Result<f64> {
    if estimate.n_frames() > reference.n_frames() {
        return Err(Error::Dimension {
            expected: reference.n_frames(),
            got: estimate.n_frames(),
            context: "round-trip frame count",
        });
    }
    let prefix = Mat::from_fn(estimate.n_frames(), reference.n_mels(), |r, c| {
        reference.frames.get(r, c)
    });
    metrics::snr_db(&prefix, &estimate.frames)
}

/// Full-latent posterior-mean trajectory at a 1-mel-frame stride (10 ms),
/// finer than the 4-frame video hop, for smoothness metrics.
pub fn latent_trajectory(audio_vae: &MlpVae, mel: &MelSpectrogram) -> Result<LatentTrajectory> {
    let segments = audio::segment(mel, SEGMENT_FRAMES, 1)?;
    let mut points = Mat::zeros(segments.len(), audio_vae.latent_dim());
    for (i, seg) in segments.iter().enumerate() {
        let lg = audio_vae.encode(&seg.unit_flat())?;
        points.row_mut(i).copy_from_slice(&lg.mu);
    }
    LatentTrajectory::new(points, audio::HOP_S)
}

const LINK_MAGIC: &[u8; 4] = b"AVLM";
const LINK_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct LinkFileMetadata {
    config: LinkConfig,
    log_s: f64,
}

/// Writes a linked-model container: magic `AVLM`, u32 version, u32 metadata
/// length, JSON metadata (config + time scale), then the audio and image
/// AVWR sub-blobs, each preceded by its u32 byte length.
pub fn save_linked(path: &Path, model: &LinkedModel) -> Result<()> {
    let meta = LinkFileMetadata {
        config: model.config.clone(),
        log_s: model.time_scale.log_s,
    };
    let json = serde_json::to_vec(&meta)?;
    let mut audio_meta =
        VaeMetadata::describe(&model.audio_vae, model.config.m, model.config.seed);
    audio_meta.log_s = Some(model.time_scale.log_s);
    let audio_blob = vae_to_avwr_bytes(&model.audio_vae, &audio_meta)?;
    let image_meta = VaeMetadata::describe(&model.image_vae, 0, model.config.seed);
    let image_blob = vae_to_avwr_bytes(&model.image_vae, &image_meta)?;

    let mut buf =
        Vec::with_capacity(12 + json.len() + 8 + audio_blob.len() + image_blob.len());
    buf.extend_from_slice(LINK_MAGIC);
    buf.extend_from_slice(&LINK_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(audio_blob.len() as u32).to_le_bytes());
    buf.extend_from_slice(&audio_blob);
    buf.extend_from_slice(&(image_blob.len() as u32).to_le_bytes());
    buf.extend_from_slice(&image_blob);
    fs::write(path, buf)?;
    Ok(())
}

/// Reads a linked-model container written by [`save_linked`].
pub fn load_linked(path: &Path) -> Result<LinkedModel> {
    let bytes = fs::read(path)?;
    let bad = |reason: String| Error::Format {
        format: "AVLM",
        reason,
    };
    if bytes.len() < 12 || &bytes[..4] != LINK_MAGIC {
        return Err(bad("missing AVLM magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != LINK_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut off = 8;
    let mut take = |n: usize| -> Result<&[u8]> {
        if bytes.len() < off + n {
            return Err(bad("truncated container".into()));
        }
        let slice = &bytes[off..off + n];
        off += n;
        Ok(slice)
    };
    let json_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let meta: LinkFileMetadata = serde_json::from_slice(take(json_len)?)?;
    let audio_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let (audio_vae, _) = vae_from_avwr_bytes(take(audio_len)?)?;
    let image_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let (image_vae, _) = vae_from_avwr_bytes(take(image_len)?)?;
    if off != bytes.len() {
        return Err(bad("trailing bytes after image blob".into()));
    }
    LinkedModel::new(
        audio_vae,
        image_vae,
        TimeScale::new(meta.log_s),
        meta.config,
    )
}

/// Serializable video manifest: `manifest.json` next to the PGM frames.
#[derive(Debug, Serialize, Deserialize)]
struct VideoManifest {
    frame_rate: u32,
    count: usize,
    source_segments: Vec<usize>,
}

/// Writes a video as `frame_000000.pgm…` plus `manifest.json`.
pub fn save_video(dir: &Path, video: &VideoSequence) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, frame) in video.frames.iter().enumerate() {
        pgm::save_pgm(dir.join(format!("frame_{i:06}.pgm")), frame)?;
    }
    let manifest = VideoManifest {
        frame_rate: video.frame_rate,
        count: video.frames.len(),
        source_segments: video.source_segments.clone(),
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Reads a video directory written by [`save_video`] (8-bit quantized).
pub fn load_video(dir: &Path) -> Result<VideoSequence> {
    let json = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: VideoManifest = serde_json::from_str(&json)?;
    let mut frames = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        frames.push(pgm::load_pgm(dir.join(format!("frame_{i:06}.pgm")))?);
    }
    if manifest.source_segments.len() != manifest.count {
        return Err(Error::Format {
            format: "video manifest",
            reason: format!(
                "{} source segments for {} frames",
                manifest.source_segments.len(),
                manifest.count
            ),
        });
    }
    Ok(VideoSequence {
        frames,
        frame_rate: manifest.frame_rate,
        source_segments: manifest.source_segments,
    })
}
