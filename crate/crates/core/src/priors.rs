//! Latent priors: temporal-smoothness pair losses and style/content
//! disentanglement through recombined-reconstruction triplets, plus the
//! seeded samplers that draw their training examples from a prepared corpus.
//!
//! Loss functions here operate on plain latent vectors or unit-domain model
//! inputs and return gradients with respect to those inputs (and to the
//! learned time scale), so the training loops in `link` can splice them into
//! the encoder/decoder backward passes of `vae`.

use rand::Rng;

use crate::audio::MelSegment;
use crate::corpus::{LabeledSegment, PreparedUtterance};
use crate::error::{Error, Result};
use crate::mat::{norm, sub};
use crate::vae::{
    kl_diag_gaussian, kl_diag_gaussian_grads, reparameterize, reparameterize_backward, MlpVae,
};

/// Maximum time gap between the two segments of a smoothness pair, seconds.
pub const MAX_PAIR_GAP_S: f64 = 0.8;

/// Same gap expressed in 10 ms mel frames (exact integer comparison).
const MAX_PAIR_GAP_FRAMES: usize = 80;

/// Stabilizer added inside the LOGMSE logarithm when a latent distance
/// collapses to (near) zero.
const LOG_EPS: f64 = 1e-8;

/// Splits a latent vector into its style prefix `z[0..m]` and content suffix
/// `z[m..d]`. Concatenating the two halves inverts the split exactly.
pub fn split_latent(z: &[f64], m: usize) -> Result<(&[f64], &[f64])> {
    if m == 0 || m >= z.len() {
        return Err(Error::InvalidArgument(format!(
            "style dimension m = {m} must satisfy 0 < m < d = {}",
            z.len()
        )));
    }
    Ok(z.split_at(m))
}

/// Learned scalar time scale `s = exp(log_s)` mapping latent distance to
/// predicted time gap; positive by construction.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TimeScale {
    pub log_s: f64,
}

impl TimeScale {
    pub fn new(log_s: f64) -> Self {
        Self { log_s }
    }

    pub fn s(&self) -> f64 {
        self.log_s.exp()
    }
}

impl Default for TimeScale {
    fn default() -> Self {
        Self { log_s: 0.0 }
    }
}

/// The three temporal-smoothness penalty shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SmoothnessVariant {
    /// `mean((dt_hat - dt)^2)`
    Mse,
    /// `mean((dt_hat / dt - 1)^2)`
    Q,
    /// `mean((log dt_hat - log dt)^2)`
    LogMse,
}

/// One smoothness pair ready for the loss: the two latent vectors (content
/// parts when the model is disentangled, full latents otherwise) and the
/// positive time gap.
#[derive(Debug, Clone, Copy)]
pub struct LatentPair<'a> {
    pub z_i: &'a [f64],
    pub z_j: &'a [f64],
    pub dt: f64,
}

/// Gradients of a smoothness batch, per pair and for the time scale.
#[derive(Debug, Clone)]
pub struct SmoothnessGrads {
    pub d_z_i: Vec<Vec<f64>>,
    pub d_z_j: Vec<Vec<f64>>,
    pub d_log_s: f64,
}

/// Batch-mean smoothness loss with gradients.
///
/// Predicted gaps are `dt_hat = s * ||z_i - z_j||`. Pairs with zero latent
/// distance get a zero latent gradient (the norm has no direction there);
/// under LOGMSE their predicted gap is stabilized with an epsilon inside the
/// logarithm and the occurrence is logged.
pub fn smoothness_loss(
    variant: SmoothnessVariant,
    pairs: &[LatentPair],
    scale: &TimeScale,
) -> Result<(f64, SmoothnessGrads)> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(
            "smoothness loss needs at least one pair".into(),
        ));
    }
    let s = scale.s();
    let inv_n = 1.0 / pairs.len() as f64;
    let mut loss = 0.0;
    let mut grads = SmoothnessGrads {
        d_z_i: Vec::with_capacity(pairs.len()),
        d_z_j: Vec::with_capacity(pairs.len()),
        d_log_s: 0.0,
    };
    let mut collapsed = 0usize;
    for pair in pairs {
        if !(pair.dt > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "smoothness pair gap must be positive, got {}",
                pair.dt
            )));
        }
        if pair.z_i.len() != pair.z_j.len() {
            return Err(Error::Dimension {
                expected: pair.z_i.len(),
                got: pair.z_j.len(),
                context: "smoothness pair latents",
            });
        }
        let diff = sub(pair.z_i, pair.z_j);
        let r = norm(&diff);
        let dt_hat = s * r;
        // d(loss_pair)/d(dt_hat)
        let (l_pair, g_dt_hat) = match variant {
            SmoothnessVariant::Mse => {
                let e = dt_hat - pair.dt;
                (e * e, 2.0 * e)
            }
            SmoothnessVariant::Q => {
                let q = dt_hat / pair.dt - 1.0;
                (q * q, 2.0 * q / pair.dt)
            }
            SmoothnessVariant::LogMse => {
                let u = if dt_hat < LOG_EPS {
                    collapsed += 1;
                    dt_hat + LOG_EPS
                } else {
                    dt_hat
                };
                let e = u.ln() - pair.dt.ln();
                (e * e, 2.0 * e / u)
            }
        };
        loss += inv_n * l_pair;
        grads.d_log_s += inv_n * g_dt_hat * dt_hat;
        let latent_scale = if r > 0.0 {
            inv_n * g_dt_hat * s / r
        } else {
            0.0
        };
        let d_i: Vec<f64> = diff.iter().map(|&v| latent_scale * v).collect();
        let d_j: Vec<f64> = d_i.iter().map(|&v| -v).collect();
        grads.d_z_i.push(d_i);
        grads.d_z_j.push(d_j);
    }
    if collapsed > 0 {
        log::warn!("{collapsed} smoothness pair(s) had zero latent distance under LOGMSE");
    }
    Ok((loss, grads))
}

/// Recombined reconstruction loss on unit-domain inputs: reconstruct the
/// target `x_ai` from the style of `x_aj` (same speaker, other phoneme) and
/// the content of `x_bi` (other speaker, same phoneme).
///
/// `loss = 0.5 * ||x_ai - decode([z_s(x_aj) ; z_c(x_bi)])||^2 + KL(aj) + KL(bi)`
///
/// Each contributing encoder gets its own reparameterization noise. The
/// direct encoding of the target is computed but takes no part in the loss,
/// matching the recombination diagram. Parameter gradients are accumulated
/// into `grads`.
#[allow(clippy::too_many_arguments)]
pub fn recombined_reconstruction_loss(
    vae: &MlpVae,
    x_ai: &[f64],
    x_bi: &[f64],
    x_aj: &[f64],
    m: usize,
    noise_style: &[f64],
    noise_content: &[f64],
    grads: &mut [f64],
) -> Result<f64> {
    let d = vae.latent_dim();
    if m == 0 || m >= d {
        return Err(Error::InvalidArgument(format!(
            "style dimension m = {m} must satisfy 0 < m < d = {d}"
        )));
    }
    if grads.len() != vae.n_params() {
        return Err(Error::Dimension {
            expected: vae.n_params(),
            got: grads.len(),
            context: "recombined-loss gradient buffer",
        });
    }
    let _unused_direct = vae.encode(x_ai)?;
    let (lg_aj, cache_aj) = vae.encode_with_cache(x_aj)?;
    let (lg_bi, cache_bi) = vae.encode_with_cache(x_bi)?;
    let z_aj = reparameterize(&lg_aj, noise_style);
    let z_bi = reparameterize(&lg_bi, noise_content);
    let mut z_mix = Vec::with_capacity(d);
    z_mix.extend_from_slice(&z_aj[..m]);
    z_mix.extend_from_slice(&z_bi[m..]);
    let (x_hat, cache_dec) = vae.decode_with_cache(&z_mix)?;

    let recon: f64 = x_hat
        .iter()
        .zip(x_ai)
        .map(|(&xh, &xi)| 0.5 * (xh - xi) * (xh - xi))
        .sum();
    let loss = recon + kl_diag_gaussian(&lg_aj) + kl_diag_gaussian(&lg_bi);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }

    let d_x_hat: Vec<f64> = x_hat.iter().zip(x_ai).map(|(&xh, &xi)| xh - xi).collect();
    let d_z_mix = vae.decoder_backward(&cache_dec, &d_x_hat, grads);

    // style source sees only the prefix of the mixed-latent gradient
    let mut d_z_aj = vec![0.0; d];
    d_z_aj[..m].copy_from_slice(&d_z_mix[..m]);
    let (mut d_mu_aj, mut d_lv_aj) = reparameterize_backward(&lg_aj, noise_style, &d_z_aj);
    let (kl_mu, kl_lv) = kl_diag_gaussian_grads(&lg_aj);
    crate::mat::axpy(1.0, &kl_mu, &mut d_mu_aj);
    crate::mat::axpy(1.0, &kl_lv, &mut d_lv_aj);
    vae.encoder_backward(&cache_aj, &d_mu_aj, &d_lv_aj, grads);

    // content source sees only the suffix
    let mut d_z_bi = vec![0.0; d];
    d_z_bi[m..].copy_from_slice(&d_z_mix[m..]);
    let (mut d_mu_bi, mut d_lv_bi) = reparameterize_backward(&lg_bi, noise_content, &d_z_bi);
    let (kl_mu, kl_lv) = kl_diag_gaussian_grads(&lg_bi);
    crate::mat::axpy(1.0, &kl_mu, &mut d_mu_bi);
    crate::mat::axpy(1.0, &kl_lv, &mut d_lv_bi);
    vae.encoder_backward(&cache_bi, &d_mu_bi, &d_lv_bi, grads);

    Ok(loss)
}

/// [`recombined_reconstruction_loss`] with kink indicator bits for
/// finite-difference gradient checks.
#[allow(clippy::too_many_arguments)]
pub fn recombined_loss_with_signs(
    vae: &MlpVae,
    x_ai: &[f64],
    x_bi: &[f64],
    x_aj: &[f64],
    m: usize,
    noise_style: &[f64],
    noise_content: &[f64],
    signs: &mut Vec<bool>,
) -> Result<f64> {
    let d = vae.latent_dim();
    let (lg_aj, cache_aj) = vae.encode_with_cache(x_aj)?;
    cache_aj.push_kink_signs(signs);
    let (lg_bi, cache_bi) = vae.encode_with_cache(x_bi)?;
    cache_bi.push_kink_signs(signs);
    let z_aj = reparameterize(&lg_aj, noise_style);
    let z_bi = reparameterize(&lg_bi, noise_content);
    let mut z_mix = Vec::with_capacity(d);
    z_mix.extend_from_slice(&z_aj[..m]);
    z_mix.extend_from_slice(&z_bi[m..]);
    let (x_hat, cache_dec) = vae.decode_with_cache(&z_mix)?;
    cache_dec.push_kink_signs(signs);
    let recon: f64 = x_hat
        .iter()
        .zip(x_ai)
        .map(|(&xh, &xi)| 0.5 * (xh - xi) * (xh - xi))
        .sum();
    Ok(recon + kl_diag_gaussian(&lg_aj) + kl_diag_gaussian(&lg_bi))
}

/// A same-utterance segment pair with start times at most 0.8 s apart.
#[derive(Debug, Clone)]
pub struct PairSample {
    pub seg_i: MelSegment,
    pub seg_j: MelSegment,
    /// Start time of `seg_i`, seconds.
    pub t_i: f64,
    /// Start time of `seg_j`, seconds.
    pub t_j: f64,
    /// `(speaker, per-speaker utterance index)` of the owning utterance.
    pub utterance: (usize, usize),
}

impl PairSample {
    /// Positive time gap between the two segments.
    pub fn dt(&self) -> f64 {
        (self.t_j - self.t_i).abs()
    }
}

/// A disentanglement triplet: target `M_ai`, content source `M_bi` (same
/// phoneme, different speaker) and style source `M_aj` (same speaker,
/// different phoneme).
#[derive(Debug, Clone)]
pub struct TripletSample {
    pub m_ai: MelSegment,
    pub m_bi: MelSegment,
    pub m_aj: MelSegment,
    pub speaker_a: usize,
    pub speaker_b: usize,
    pub phoneme_i: usize,
    pub phoneme_j: usize,
}

impl TripletSample {
    /// Validates the label pattern: distinct speakers, distinct phonemes.
    pub fn new(
        m_ai: MelSegment,
        m_bi: MelSegment,
        m_aj: MelSegment,
        speaker_a: usize,
        speaker_b: usize,
        phoneme_i: usize,
        phoneme_j: usize,
    ) -> Result<Self> {
        if speaker_a == speaker_b || phoneme_i == phoneme_j {
            return Err(Error::InvalidArgument(format!(
                "triplet labels must mix distinct speakers and phonemes, got speakers \
                 ({speaker_a}, {speaker_b}) and phonemes ({phoneme_i}, {phoneme_j})"
            )));
        }
        Ok(Self {
            m_ai,
            m_bi,
            m_aj,
            speaker_a,
            speaker_b,
            phoneme_i,
            phoneme_j,
        })
    }

    /// The three segments flattened into the unit model domain, ordered
    /// (target, content source, style source).
    pub fn unit_inputs(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        (
            self.m_ai.unit_flat(),
            self.m_bi.unit_flat(),
            self.m_aj.unit_flat(),
        )
    }
}

/// [`recombined_reconstruction_loss`] applied to a labeled triplet,
/// normalizing its segments into the unit domain first.
pub fn recombined_loss_for_triplet(
    vae: &MlpVae,
    triplet: &TripletSample,
    m: usize,
    noise_style: &[f64],
    noise_content: &[f64],
    grads: &mut [f64],
) -> Result<f64> {
    let (x_ai, x_bi, x_aj) = triplet.unit_inputs();
    recombined_reconstruction_loss(
        vae,
        &x_ai,
        &x_bi,
        &x_aj,
        m,
        noise_style,
        noise_content,
        grads,
    )
}

/// Uniform sampler over all same-utterance segment pairs with gaps in
/// `(0, 0.8]` seconds. Candidates are enumerated once; `sample` must be
/// called with the same utterance slice the sampler was built from.
#[derive(Debug, Clone)]
pub struct PairSampler {
    candidates: Vec<(u32, u32, u32)>,
}

impl PairSampler {
    pub fn new(utterances: &[PreparedUtterance]) -> Result<Self> {
        let mut candidates = Vec::new();
        for (u, utt) in utterances.iter().enumerate() {
            for i in 0..utt.segments.len() {
                for j in i + 1..utt.segments.len() {
                    let gap_frames = utt.segments[j].start_frame - utt.segments[i].start_frame;
                    if gap_frames > MAX_PAIR_GAP_FRAMES {
                        break; // starts are sorted; later j only grow the gap
                    }
                    candidates.push((u as u32, i as u32, j as u32));
                }
            }
        }
        if candidates.is_empty() {
            return Err(Error::Sampling(
                "no same-utterance segment pair with gap in (0, 0.8] s; utterances are too \
                 short or the corpus is empty"
                    .into(),
            ));
        }
        Ok(Self { candidates })
    }

    /// Number of distinct candidate pairs.
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Draws one pair uniformly over the candidates.
    pub fn sample(&self, utterances: &[PreparedUtterance], rng: &mut impl Rng) -> PairSample {
        let (u, i, j) = self.candidates[rng.gen_range(0..self.candidates.len())];
        let utt = &utterances[u as usize];
        let (seg_i, seg_j) = (&utt.segments[i as usize], &utt.segments[j as usize]);
        PairSample {
            seg_i: seg_i.clone(),
            seg_j: seg_j.clone(),
            t_i: seg_i.t_start(),
            t_j: seg_j.t_start(),
            utterance: (utt.speaker, utt.index),
        }
    }
}

/// Draws `count` smoothness pairs from the utterance list.
pub fn sample_pairs(
    utterances: &[PreparedUtterance],
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<PairSample>> {
    let sampler = PairSampler::new(utterances)?;
    Ok((0..count).map(|_| sampler.sample(utterances, rng)).collect())
}

/// Uniform sampler over all valid disentanglement triplets of labeled
/// segments. Validity requires the content source to share the target's
/// phoneme under a different speaker, and the style source to share the
/// target's speaker under a different phoneme.
#[derive(Debug, Clone)]
pub struct TripletSampler {
    /// Segment indices grouped by `speaker * n_phonemes + phoneme`.
    groups: Vec<Vec<u32>>,
    n_phonemes: usize,
    /// Label combos `(a, b, i, j)` with at least one triple each.
    combos: Vec<(u16, u16, u16, u16)>,
    /// Cumulative triple counts aligned with `combos`.
    cum: Vec<u64>,
}

impl TripletSampler {
    pub fn new(
        labeled: &[LabeledSegment],
        n_speakers: usize,
        n_phonemes: usize,
    ) -> Result<Self> {
        let mut groups = vec![Vec::new(); n_speakers * n_phonemes];
        for (idx, seg) in labeled.iter().enumerate() {
            groups[seg.speaker * n_phonemes + seg.phoneme].push(idx as u32);
        }
        let count = |s: usize, p: usize| groups[s * n_phonemes + p].len() as u64;
        let mut combos = Vec::new();
        let mut cum = Vec::new();
        let mut total = 0u64;
        for a in 0..n_speakers {
            for b in 0..n_speakers {
                if a == b {
                    continue;
                }
                for i in 0..n_phonemes {
                    for j in 0..n_phonemes {
                        if i == j {
                            continue;
                        }
                        let w = count(a, i) * count(b, i) * count(a, j);
                        if w > 0 {
                            total += w;
                            combos.push((a as u16, b as u16, i as u16, j as u16));
                            cum.push(total);
                        }
                    }
                }
            }
        }
        if total == 0 {
            return Err(Error::Sampling(
                "no valid triplet candidates: need two speakers sharing a phoneme plus a \
                 second phoneme from the style speaker"
                    .into(),
            ));
        }
        Ok(Self {
            groups,
            n_phonemes,
            combos,
            cum,
        })
    }

    /// Number of distinct valid triples.
    pub fn total(&self) -> u64 {
        *self.cum.last().unwrap()
    }

    /// Draws one triplet uniformly over all valid triples.
    pub fn sample(&self, labeled: &[LabeledSegment], rng: &mut impl Rng) -> TripletSample {
        let t = rng.gen_range(0..self.total());
        let c = self.cum.partition_point(|&acc| acc <= t);
        let (a, b, i, j) = self.combos[c];
        let (a, b, i, j) = (a as usize, b as usize, i as usize, j as usize);
        let g_ai = &self.groups[a * self.n_phonemes + i];
        let g_bi = &self.groups[b * self.n_phonemes + i];
        let g_aj = &self.groups[a * self.n_phonemes + j];
        // decompose the offset within this combo into the three group indices
        let mut r = t - if c == 0 { 0 } else { self.cum[c - 1] };
        let idx_ai = (r % g_ai.len() as u64) as usize;
        r /= g_ai.len() as u64;
        let idx_bi = (r % g_bi.len() as u64) as usize;
        r /= g_bi.len() as u64;
        let idx_aj = r as usize;
        TripletSample::new(
            labeled[g_ai[idx_ai] as usize].segment.clone(),
            labeled[g_bi[idx_bi] as usize].segment.clone(),
            labeled[g_aj[idx_aj] as usize].segment.clone(),
            a,
            b,
            i,
            j,
        )
        .expect("sampler combos satisfy the label pattern")
    }
}

/// Draws `count` disentanglement triplets from the labeled segment list.
pub fn sample_triplets(
    labeled: &[LabeledSegment],
    n_speakers: usize,
    n_phonemes: usize,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<TripletSample>> {
    let sampler = TripletSampler::new(labeled, n_speakers, n_phonemes)?;
    Ok((0..count).map(|_| sampler.sample(labeled, rng)).collect())
}
