//! Deterministic synthetic corpora.
//!
//! Speech stand-in: harmonic utterances where speaker identity lives in the
//! pitch and harmonic decay (style) and phoneme identity lives in a formant
//! gain curve (content). Image stand-in: procedural stroke glyphs with
//! affine and brightness jitter. Both are pure functions of their seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::WaveBuffer;
use crate::error::{Error, Result};
use crate::pgm::GrayImage;

/// Sample rate used for all synthesized audio.
pub const SYNTH_SAMPLE_RATE: u32 = 16_000;
/// Crossfade length at phoneme boundaries, seconds.
pub const CROSSFADE_S: f64 = 0.010;
/// Relative depth of the slow pitch modulation.
pub const JITTER_DEPTH: f64 = 0.008;
/// Components at or above this frequency are dropped (aliasing guard).
pub const ALIAS_LIMIT_HZ: f64 = 8_000.0;
/// Flat spectral floor of the phoneme gain curve.
const GAIN_BASELINE: f64 = 0.03;

/// A synthetic speaker: base pitch plus a 4-harmonic amplitude profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerParams {
    /// Base pitch in Hz.
    pub f0: f64,
    /// Amplitudes of harmonics `1*f0 .. 4*f0`, each in `[0, 1]`.
    pub timbre: [f64; 4],
    /// Seed for the slow pitch modulation; `None` disables it.
    pub jitter_seed: Option<u64>,
}

impl SpeakerParams {
    pub fn new(f0: f64, timbre: [f64; 4], jitter_seed: Option<u64>) -> Result<Self> {
        if !(80.0..=400.0).contains(&f0) {
            return Err(Error::InvalidArgument(format!(
                "f0 must be in [80, 400] Hz, got {f0}"
            )));
        }
        if timbre.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(Error::InvalidArgument(
                "timbre amplitudes must be in [0, 1]".into(),
            ));
        }
        Ok(Self {
            f0,
            timbre,
            jitter_seed,
        })
    }
}

/// One formant band of a phoneme gain curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Formant {
    pub center_hz: f64,
    pub bandwidth_hz: f64,
}

/// A synthetic phoneme: a formant gain curve plus a nominal duration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhonemeTemplate {
    /// Label, also the index into the corpus phoneme table.
    pub id: usize,
    /// Two to three formant bands.
    pub formants: Vec<Formant>,
    pub duration_ms: u32,
}

impl PhonemeTemplate {
    pub fn new(id: usize, formants: Vec<Formant>, duration_ms: u32) -> Result<Self> {
        if !(2..=3).contains(&formants.len()) {
            return Err(Error::InvalidArgument(format!(
                "phonemes carry 2-3 formants, got {}",
                formants.len()
            )));
        }
        if formants
            .iter()
            .any(|f| f.center_hz <= 0.0 || f.center_hz >= 8000.0 || f.bandwidth_hz <= 0.0)
        {
            return Err(Error::InvalidArgument(
                "formant centers must lie in (0, 8000) Hz".into(),
            ));
        }
        if duration_ms < 200 {
            return Err(Error::InvalidArgument(format!(
                "phoneme duration must cover one segment (>= 200 ms), got {duration_ms}"
            )));
        }
        Ok(Self {
            id,
            formants,
            duration_ms,
        })
    }

    /// Gain of the curve at frequency `f`: a flat baseline plus one unit
    /// Gaussian bump per formant.
    pub fn gain_at(&self, f: f64) -> f64 {
        let bumps: f64 = self
            .formants
            .iter()
            .map(|b| {
                let d = (f - b.center_hz) / b.bandwidth_hz;
                (-0.5 * d * d).exp()
            })
            .sum();
        GAIN_BASELINE + bumps
    }
}

/// Phoneme occupancy within an utterance, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeSpan {
    pub phoneme: usize,
    pub t_start_ms: u32,
    pub t_end_ms: u32,
}

/// One rendered utterance with its phoneme timeline.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub speaker: usize,
    pub index: usize,
    pub wave: WaveBuffer,
    pub spans: Vec<PhonemeSpan>,
}

/// A full labeled speech corpus; utterances are grouped per speaker and the
/// train/val split is by speaker id.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub speakers: Vec<SpeakerParams>,
    pub phonemes: Vec<PhonemeTemplate>,
    pub utterances: Vec<Utterance>,
    pub train_speakers: Vec<usize>,
    pub val_speakers: Vec<usize>,
}

impl Corpus {
    pub fn train_utterances(&self) -> impl Iterator<Item = &Utterance> {
        self.utterances
            .iter()
            .filter(|u| self.train_speakers.contains(&u.speaker))
    }

    pub fn val_utterances(&self) -> impl Iterator<Item = &Utterance> {
        self.utterances
            .iter()
            .filter(|u| self.val_speakers.contains(&u.speaker))
    }
}

/// Configuration for [`make_corpus`].
#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub n_speakers: usize,
    pub n_phonemes: usize,
    pub utterances_per_speaker: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_speakers: 8,
            n_phonemes: 12,
            utterances_per_speaker: 20,
            seed: 0,
        }
    }
}

/// Evenly spaced speakers: pitch spans 170-240 Hz, harmonic decay
/// 0.75-0.95. The pitch floor keeps 4 harmonics reaching 680 Hz, so every
/// default formant stays within ~120 Hz of some harmonic for every speaker.
pub fn default_speakers(n: usize) -> Result<Vec<SpeakerParams>> {
    if n < 2 {
        return Err(Error::InvalidArgument("need at least 2 speakers".into()));
    }
    (0..n)
        .map(|i| {
            let frac = i as f64 / (n - 1) as f64;
            let f0 = 170.0 + 70.0 * frac;
            let rho = 0.75 + 0.20 * frac;
            SpeakerParams::new(f0, [1.0, rho, rho * rho, rho * rho * rho], Some(i as u64))
        })
        .collect()
}

/// Phoneme grid over three contrast axes occupying disjoint frequency
/// regions: first-formant position (320-560 Hz), second-formant position
/// (680 or 800 Hz), and presence of a low third formant at 200 Hz. The
/// regions are spaced so no bump's tail can imitate a neighbor region's
/// bump, and the low formant sits within 40 Hz of every default speaker's
/// fundamental, so every axis is visible for every voice. Durations cycle
/// over 320-410 ms, decorrelated from the grid so every class yields a
/// similar number of labeled segments.
pub fn default_phonemes(n: usize) -> Result<Vec<PhonemeTemplate>> {
    if n < 2 {
        return Err(Error::InvalidArgument("need at least 2 phonemes".into()));
    }
    let n_f1 = n.div_ceil(4);
    (0..n)
        .map(|i| {
            let i1 = i / 4;
            let r = i % 4;
            let f1 = if n_f1 > 1 {
                320.0 + 240.0 * i1 as f64 / (n_f1 - 1) as f64
            } else {
                440.0
            };
            let f2 = 680.0 + 120.0 * (r / 2) as f64;
            let duration_ms = 320 + 30 * ((i as u32 + i as u32 / 4) % 4);
            let mut formants = vec![
                Formant {
                    center_hz: f1,
                    bandwidth_hz: 70.0,
                },
                Formant {
                    center_hz: f2,
                    bandwidth_hz: 80.0,
                },
            ];
            if r % 2 == 1 {
                formants.push(Formant {
                    center_hz: 200.0,
                    bandwidth_hz: 60.0,
                });
            }
            PhonemeTemplate::new(i, formants, duration_ms)
        })
        .collect()
}

/// Timeline implied by a phoneme sequence: spans are the cumulative nominal
/// durations (crossfades blend across the boundaries without shifting them).
pub fn spans_of(phonemes: &[PhonemeTemplate]) -> Vec<PhonemeSpan> {
    let mut spans = Vec::with_capacity(phonemes.len());
    let mut t = 0u32;
    for p in phonemes {
        spans.push(PhonemeSpan {
            phoneme: p.id,
            t_start_ms: t,
            t_end_ms: t + p.duration_ms,
        });
        t += p.duration_ms;
    }
    spans
}

/// Renders one utterance: each harmonic `k*f0` carries amplitude
/// `timbre[k] * gain(k*f0)` of the active phoneme, gains crossfade over
/// 10 ms at boundaries, a slow pitch modulation adds intra-phoneme motion,
/// and the result is peak-normalized to 0.9.
///
/// Components at or above 8 kHz are dropped with a warning.
pub fn synth_utterance(
    speaker: &SpeakerParams,
    phonemes: &[PhonemeTemplate],
    rng: &mut impl Rng,
) -> Result<WaveBuffer> {
    if phonemes.is_empty() {
        return Err(Error::InvalidArgument(
            "utterance needs at least one phoneme".into(),
        ));
    }

    let sr = SYNTH_SAMPLE_RATE as f64;
    let spans = spans_of(phonemes);
    let total_ms = spans.last().unwrap().t_end_ms;
    let n = (total_ms as f64 / 1000.0 * sr).round() as usize;

    // per-harmonic drop list, precomputed gains, and per-utterance variation
    let mut active = [true; 4];
    for (k, slot) in active.iter_mut().enumerate() {
        let f = (k + 1) as f64 * speaker.f0;
        if f >= ALIAS_LIMIT_HZ {
            log::warn!("dropping harmonic {} at {f} Hz (aliasing)", k + 1);
            *slot = false;
        }
    }
    // gains are loudness-equalized per phoneme (strongest harmonic -> 1) so
    // the per-utterance dB reference downstream is stable across renderings
    let gains: Vec<[f64; 4]> = phonemes
        .iter()
        .map(|p| {
            let mut g = [0.0; 4];
            for (k, slot) in g.iter_mut().enumerate() {
                *slot = p.gain_at((k + 1) as f64 * speaker.f0);
            }
            let loudest = (0..4)
                .map(|k| speaker.timbre[k] * g[k])
                .fold(0.0f64, f64::max);
            if loudest > 0.0 {
                for slot in &mut g {
                    *slot /= loudest;
                }
            }
            g
        })
        .collect();
    let phases: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU));
    let wobble: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.97..1.03));

    // slow pitch modulation: rate from the speaker seed, phase per rendering
    let (jitter_rate, jitter_phase) = match speaker.jitter_seed {
        Some(seed) => {
            let mut jrng = ChaCha8Rng::seed_from_u64(seed);
            (
                jrng.gen_range(2.0..4.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        }
        None => (0.0, 0.0),
    };
    let depth = if speaker.jitter_seed.is_some() {
        JITTER_DEPTH
    } else {
        0.0
    };

    let half_fade = CROSSFADE_S / 2.0;
    let mut samples = vec![0.0f64; n];
    let mut theta = 0.0f64;
    let mut span_idx = 0usize;

    for (i, slot) in samples.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let f0_t = speaker.f0
            * (1.0 + depth * (std::f64::consts::TAU * jitter_rate * t + jitter_phase).sin());
        theta += std::f64::consts::TAU * f0_t / sr;

        while span_idx + 1 < spans.len() && t * 1000.0 >= spans[span_idx].t_end_ms as f64 {
            span_idx += 1;
        }

        // gain blend: raised-cosine crossfade around the nearest boundary
        let mut g = gains[span_idx];
        let span_start = spans[span_idx].t_start_ms as f64 / 1000.0;
        let span_end = spans[span_idx].t_end_ms as f64 / 1000.0;
        if span_idx > 0 && t < span_start + half_fade {
            let w = fade_weight(t - (span_start - half_fade));
            g = blend(gains[span_idx - 1], g, w);
        } else if span_idx + 1 < spans.len() && t > span_end - half_fade {
            let w = fade_weight(t - (span_end - half_fade));
            g = blend(g, gains[span_idx + 1], w);
        }

        // utterance edge fades avoid clicks in the written audio
        let edge = edge_fade(t, n as f64 / sr);

        let mut s = 0.0;
        for k in 0..4 {
            if !active[k] {
                continue;
            }
            s += speaker.timbre[k] * wobble[k] * g[k] * ((k + 1) as f64 * theta + phases[k]).sin();
        }
        *slot = s * edge;
    }

    let peak = samples.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if peak > 0.0 {
        let scale = 0.9 / peak;
        for v in &mut samples {
            *v *= scale;
        }
    }
    WaveBuffer::new(samples, SYNTH_SAMPLE_RATE)
}

/// Raised-cosine ramp 0 -> 1 over the crossfade length.
fn fade_weight(offset: f64) -> f64 {
    let x = (offset / CROSSFADE_S).clamp(0.0, 1.0);
    0.5 * (1.0 - (std::f64::consts::PI * x).cos())
}

fn blend(a: [f64; 4], b: [f64; 4], w: f64) -> [f64; 4] {
    std::array::from_fn(|k| a[k] * (1.0 - w) + b[k] * w)
}

fn edge_fade(t: f64, total: f64) -> f64 {
    let ramp = CROSSFADE_S;
    let up = (t / ramp).clamp(0.0, 1.0);
    let down = ((total - t) / ramp).clamp(0.0, 1.0);
    up.min(down)
}

/// splitmix64-style mixing for per-utterance seeds.
fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Builds the full labeled corpus. Phoneme sequences are dealt from a
/// per-speaker reshuffled deck so every speaker utters every phoneme, and
/// each utterance is rendered from its own derived seed (pure function of
/// `cfg.seed`). Validation speakers are the last quarter (at least one).
pub fn make_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    if cfg.n_speakers < 2 || cfg.n_phonemes < 2 {
        return Err(Error::InvalidArgument(
            "corpus needs at least 2 speakers and 2 phonemes".into(),
        ));
    }
    if cfg.utterances_per_speaker == 0 {
        return Err(Error::InvalidArgument(
            "utterances_per_speaker must be >= 1".into(),
        ));
    }

    let speakers = default_speakers(cfg.n_speakers)?;
    let phonemes = default_phonemes(cfg.n_phonemes)?;

    // ensure the dealt slots can cover the deck at the minimum length
    let base_len = if 3 * cfg.utterances_per_speaker < cfg.n_phonemes {
        cfg.n_phonemes.div_ceil(cfg.utterances_per_speaker)
    } else {
        0
    };

    let mut utterances = Vec::with_capacity(cfg.n_speakers * cfg.utterances_per_speaker);
    for s in 0..cfg.n_speakers {
        let mut deck_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, s as u64, u64::MAX));
        let mut deck: Vec<usize> = Vec::new();
        for u in 0..cfg.utterances_per_speaker {
            let len = if base_len > 0 {
                base_len
            } else {
                deck_rng.gen_range(3..=5)
            };
            let mut seq = Vec::with_capacity(len);
            for _ in 0..len {
                if deck.is_empty() {
                    deck = shuffled_ids(cfg.n_phonemes, &mut deck_rng);
                }
                seq.push(deck.pop().unwrap());
            }
            let templates: Vec<PhonemeTemplate> =
                seq.iter().map(|&p| phonemes[p].clone()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, s as u64, u as u64));
            let wave = synth_utterance(&speakers[s], &templates, &mut rng)?;
            utterances.push(Utterance {
                speaker: s,
                index: u,
                wave,
                spans: spans_of(&templates),
            });
        }
    }

    let n_val = (cfg.n_speakers / 4).max(1);
    let val_speakers: Vec<usize> = (cfg.n_speakers - n_val..cfg.n_speakers).collect();
    let train_speakers: Vec<usize> = (0..cfg.n_speakers - n_val).collect();

    Ok(Corpus {
        speakers,
        phonemes,
        utterances,
        train_speakers,
        val_speakers,
    })
}

fn shuffled_ids(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..n).collect();
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        ids.swap(i, j);
    }
    ids
}

/// Labeled procedural glyph images.
#[derive(Debug, Clone)]
pub struct ImageCorpus {
    pub images: Vec<GrayImage>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub size: usize,
}

/// Stroke endpoints per class in unit glyph coordinates.
fn class_strokes(class: usize) -> Vec<[f64; 4]> {
    match class {
        0 => vec![[0.5, 0.15, 0.5, 0.85]],                         // vertical bar
        1 => vec![[0.15, 0.5, 0.85, 0.5]],                         // horizontal bar
        2 => vec![[0.2, 0.8, 0.8, 0.2]],                           // diagonal /
        3 => vec![[0.2, 0.2, 0.8, 0.8]],                           // diagonal \
        4 => vec![[0.2, 0.2, 0.8, 0.8], [0.2, 0.8, 0.8, 0.2]],     // X
        5 => vec![[0.5, 0.15, 0.5, 0.85], [0.15, 0.5, 0.85, 0.5]], // +
        6 => vec![[0.25, 0.15, 0.25, 0.8], [0.25, 0.8, 0.8, 0.8]], // L
        7 => vec![[0.15, 0.2, 0.85, 0.2], [0.5, 0.2, 0.5, 0.85]],  // T
        8 => vec![
            [0.2, 0.2, 0.8, 0.2],
            [0.8, 0.2, 0.8, 0.8],
            [0.8, 0.8, 0.2, 0.8],
            [0.2, 0.8, 0.2, 0.2],
        ], // square
        9 => vec![
            [0.5, 0.15, 0.85, 0.8],
            [0.85, 0.8, 0.15, 0.8],
            [0.15, 0.8, 0.5, 0.15],
        ], // triangle
        _ => unreachable!("class out of range"),
    }
}

fn point_segment_dist(px: f64, py: f64, seg: &[f64; 4]) -> f64 {
    let (ax, ay, bx, by) = (seg[0], seg[1], seg[2], seg[3]);
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Renders procedural stroke glyphs: the class fixes the stroke pattern,
/// a small random affine transform and brightness give intra-class
/// variation. Pixels are in `[0, 1]` and the corpus is a pure function of
/// the seed.
pub fn make_image_corpus(
    n_classes: usize,
    per_class: usize,
    size: usize,
    seed: u64,
) -> Result<ImageCorpus> {
    if size < 8 {
        return Err(Error::InvalidArgument(format!(
            "image size must be >= 8, got {size}"
        )));
    }
    if n_classes == 0 || n_classes > 10 {
        return Err(Error::InvalidArgument(format!(
            "supported class count is 1-10, got {n_classes}"
        )));
    }

    let thickness = 0.055;
    let aa = 0.02;
    let mut images = Vec::with_capacity(n_classes * per_class);
    let mut labels = Vec::with_capacity(n_classes * per_class);

    for class in 0..n_classes {
        let strokes = class_strokes(class);
        for item in 0..per_class {
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_seed(seed, class as u64, item as u64));
            let theta: f64 = rng.gen_range(-0.08..0.08);
            let scale: f64 = rng.gen_range(0.95..1.05);
            let (tx, ty) = (
                rng.gen_range(-1.0..1.0) / size as f64,
                rng.gen_range(-1.0..1.0) / size as f64,
            );
            let brightness: f64 = rng.gen_range(0.85..1.0);
            let (cos_t, sin_t) = ((-theta).cos(), (-theta).sin());

            let mut img = GrayImage::zeros(size, size);
            for y in 0..size {
                for x in 0..size {
                    // inverse affine about the glyph center
                    let px = (x as f64 + 0.5) / size as f64 - 0.5 - tx;
                    let py = (y as f64 + 0.5) / size as f64 - 0.5 - ty;
                    let gx = (px * cos_t - py * sin_t) / scale + 0.5;
                    let gy = (px * sin_t + py * cos_t) / scale + 0.5;
                    let dist = strokes
                        .iter()
                        .map(|s| point_segment_dist(gx, gy, s))
                        .fold(f64::INFINITY, f64::min);
                    let v = ((thickness - dist) / aa + 0.5).clamp(0.0, 1.0);
                    if v > 0.0 {
                        img.set(x, y, brightness * v);
                    }
                }
            }
            images.push(img);
            labels.push(class);
        }
    }

    Ok(ImageCorpus {
        images,
        labels,
        n_classes,
        size,
    })
}
