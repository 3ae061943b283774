//! Corpus preparation and on-disk layout.
//!
//! Bridges the raw synthetic corpus to model inputs: runs the mel frontend
//! over every utterance, materializes overlapping segments, and attaches
//! (speaker, phoneme) labels to segments that lie fully inside one phoneme
//! span. Also reads/writes the corpus directory: a `manifest.json` plus one
//! PCM16 WAV per utterance.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::{self, MelSegment, SEGMENT_FRAMES, SEGMENT_HOP_FRAMES};
use crate::error::{Error, Result};
use crate::synth::{Corpus, PhonemeSpan, PhonemeTemplate, SpeakerParams, Utterance};
use crate::wav;

/// A mel segment carrying its corpus labels. Only segments lying entirely
/// inside a single phoneme span are labeled.
#[derive(Debug, Clone)]
pub struct LabeledSegment {
    pub segment: MelSegment,
    pub speaker: usize,
    pub phoneme: usize,
    /// Index into the prepared utterance list of the owning split.
    pub utterance: usize,
    /// Segment start within the utterance, seconds.
    pub t_start: f64,
}

/// One utterance after the mel frontend.
#[derive(Debug, Clone)]
pub struct PreparedUtterance {
    pub speaker: usize,
    /// Per-speaker utterance index.
    pub index: usize,
    pub segments: Vec<MelSegment>,
    pub spans: Vec<PhonemeSpan>,
}

/// Mel-domain corpus grouped by split.
#[derive(Debug, Clone)]
pub struct PreparedCorpus {
    pub train: Vec<PreparedUtterance>,
    pub val: Vec<PreparedUtterance>,
    pub n_speakers: usize,
    pub n_phonemes: usize,
}

impl PreparedCorpus {
    /// Runs the mel frontend over every utterance. Utterances too short to
    /// produce a segment are rejected (the synthesizer's 200 ms phoneme
    /// floor prevents this for generated corpora).
    pub fn prepare(corpus: &Corpus) -> Result<Self> {
        let one = |u: &Utterance| -> Result<PreparedUtterance> {
            let mel = audio::wave_to_mel(&u.wave)?;
            let segments = audio::segment(&mel, SEGMENT_FRAMES, SEGMENT_HOP_FRAMES)?;
            Ok(PreparedUtterance {
                speaker: u.speaker,
                index: u.index,
                segments,
                spans: u.spans.clone(),
            })
        };
        let train = corpus
            .train_utterances()
            .map(one)
            .collect::<Result<Vec<_>>>()?;
        let val = corpus.val_utterances().map(one).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            train,
            val,
            n_speakers: corpus.speakers.len(),
            n_phonemes: corpus.phonemes.len(),
        })
    }

    /// Labeled (pure) segments of the training split.
    pub fn labeled_train_segments(&self) -> Vec<LabeledSegment> {
        labeled(&self.train)
    }

    /// Labeled (pure) segments of the validation split.
    pub fn labeled_val_segments(&self) -> Vec<LabeledSegment> {
        labeled(&self.val)
    }

    /// Every training segment regardless of label purity.
    pub fn train_segments(&self) -> impl Iterator<Item = &MelSegment> {
        self.train.iter().flat_map(|u| u.segments.iter())
    }

    /// Every validation segment regardless of label purity.
    pub fn val_segments(&self) -> impl Iterator<Item = &MelSegment> {
        self.val.iter().flat_map(|u| u.segments.iter())
    }
}

/// Margin kept between a labeled segment and its span's boundaries, so
/// labeled segments never include crossfaded audio from a neighbor.
const PURITY_MARGIN_MS: u32 = 10;

/// Attaches labels to segments fully covered by one phoneme span (with the
/// crossfade margin). Segment frames are on a 10 ms grid, so the
/// containment test is exact integer arithmetic. Spans shorter than 260 ms
/// can fail to own any segment and are skipped silently.
fn labeled(utterances: &[PreparedUtterance]) -> Vec<LabeledSegment> {
    let mut out = Vec::new();
    for (ui, u) in utterances.iter().enumerate() {
        let last_end = u.spans.last().map_or(0, |s| s.t_end_ms);
        for seg in &u.segments {
            let start_ms = seg.start_frame as u32 * 10;
            let end_ms = start_ms + SEGMENT_FRAMES as u32 * 10;
            let owner = u.spans.iter().find(|s| {
                // utterance edges have no neighbor to bleed in
                let lo = if s.t_start_ms == 0 {
                    0
                } else {
                    s.t_start_ms + PURITY_MARGIN_MS
                };
                let hi = if s.t_end_ms == last_end {
                    s.t_end_ms
                } else {
                    s.t_end_ms - PURITY_MARGIN_MS
                };
                start_ms >= lo && end_ms <= hi
            });
            if let Some(span) = owner {
                out.push(LabeledSegment {
                    segment: seg.clone(),
                    speaker: u.speaker,
                    phoneme: span.phoneme,
                    utterance: ui,
                    t_start: seg.t_start(),
                });
            }
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestUtterance {
    wav: String,
    speaker: usize,
    index: usize,
    timeline: Vec<PhonemeSpan>,
}

/// `manifest.json` schema: generation parameters plus one entry per WAV.
#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    sample_rate: u32,
    speakers: Vec<SpeakerParams>,
    phonemes: Vec<PhonemeTemplate>,
    train_speakers: Vec<usize>,
    val_speakers: Vec<usize>,
    utterances: Vec<ManifestUtterance>,
}

/// Writes the corpus directory: `manifest.json` plus
/// `wav/spk{S}_utt{U}.wav` files (PCM16 mono).
pub fn save_corpus(dir: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    let dir = dir.as_ref();
    let wav_dir = dir.join("wav");
    fs::create_dir_all(&wav_dir)?;

    let mut utterances = Vec::with_capacity(corpus.utterances.len());
    for u in &corpus.utterances {
        let name = format!("spk{}_utt{}.wav", u.speaker, u.index);
        wav::save_wav(wav_dir.join(&name), &u.wave)?;
        utterances.push(ManifestUtterance {
            wav: format!("wav/{name}"),
            speaker: u.speaker,
            index: u.index,
            timeline: u.spans.clone(),
        });
    }

    let manifest = Manifest {
        sample_rate: audio::SAMPLE_RATE,
        speakers: corpus.speakers.clone(),
        phonemes: corpus.phonemes.clone(),
        train_speakers: corpus.train_speakers.clone(),
        val_speakers: corpus.val_speakers.clone(),
        utterances,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Reads a corpus directory written by [`save_corpus`]. Waves come back
/// PCM16-quantized.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    let json = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&json)?;

    if manifest.sample_rate != audio::SAMPLE_RATE {
        return Err(Error::Format {
            format: "manifest",
            reason: format!("unsupported sample rate {}", manifest.sample_rate),
        });
    }
    let n_speakers = manifest.speakers.len();
    let mut utterances = Vec::with_capacity(manifest.utterances.len());
    for mu in &manifest.utterances {
        if mu.speaker >= n_speakers {
            return Err(Error::Format {
                format: "manifest",
                reason: format!("utterance references unknown speaker {}", mu.speaker),
            });
        }
        let wave = wav::load_wav(dir.join(&mu.wav))?;
        utterances.push(Utterance {
            speaker: mu.speaker,
            index: mu.index,
            wave,
            spans: mu.timeline.clone(),
        });
    }

    Ok(Corpus {
        speakers: manifest.speakers,
        phonemes: manifest.phonemes,
        utterances,
        train_speakers: manifest.train_speakers,
        val_speakers: manifest.val_speakers,
    })
}
