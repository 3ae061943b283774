//! Mel-spectrogram frontend.
//!
//! Converts raw audio into dB-scaled mel segments: 25 ms periodic Hann
//! windows with 10 ms hops, an 80-band triangular mel filterbank, per
//! utterance dB normalization floored at -80 dB, and overlapping 20-frame
//! (200 ms) segments. A 4-frame segment hop gives the 25 Hz video rate.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::mat::Mat;

/// Default sample rate in Hz.
pub const SAMPLE_RATE: u32 = 16_000;
/// Analysis window length in seconds.
pub const WINDOW_S: f64 = 0.025;
/// Frame hop in seconds.
pub const HOP_S: f64 = 0.010;
/// Mel band count.
pub const N_MELS: usize = 80;
/// dB floor applied after normalization.
pub const FLOOR_DB: f64 = -80.0;
/// Frames per segment (200 ms at a 10 ms hop).
pub const SEGMENT_FRAMES: usize = 20;
/// Segment hop in mel frames; 4 frames = 40 ms = 25 Hz.
pub const SEGMENT_HOP_FRAMES: usize = 4;

/// Mono PCM audio with amplitudes in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct WaveBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl WaveBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample_rate must be > 0".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite sample at index {i}"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Squared-magnitude STFT frames, `T x (n_fft/2 + 1)`.
#[derive(Debug, Clone)]
pub struct PowerSpectrogram {
    pub frames: Mat,
    pub frame_hop_s: f64,
    pub window_s: f64,
    pub sample_rate: u32,
}

impl PowerSpectrogram {
    /// FFT length the bins were computed from.
    pub fn n_fft(&self) -> usize {
        (self.frames.cols() - 1) * 2
    }
}

/// Triangular mel filterbank, `F x (n_fft/2 + 1)`.
#[derive(Debug, Clone)]
pub struct MelFilterBank {
    pub weights: Mat,
    pub fmin: f64,
    pub fmax: f64,
}

impl MelFilterBank {
    pub fn n_filters(&self) -> usize {
        self.weights.rows()
    }

    /// Center frequency in Hz of filter `i`, recomputed from the mel grid.
    pub fn center_hz(&self, i: usize) -> f64 {
        let grid = mel_grid_hz(self.n_filters(), self.fmin, self.fmax);
        grid[i + 1]
    }
}

/// dB-scaled mel spectrogram, `T x F`, normalized to a 0 dB per-utterance
/// maximum and floored.
#[derive(Debug, Clone)]
pub struct MelSpectrogram {
    pub frames: Mat,
    pub floor_db: f64,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.cols()
    }
}

/// One model input: a `SEGMENT_FRAMES x F` window of the mel spectrogram.
#[derive(Debug, Clone)]
pub struct MelSegment {
    pub values: Mat,
    pub start_frame: usize,
}

impl MelSegment {
    /// Segment start time in seconds (10 ms mel frames).
    pub fn t_start(&self) -> f64 {
        self.start_frame as f64 * HOP_S
    }

    /// Row-major flattening, the layout the models consume.
    pub fn flatten(&self) -> Vec<f64> {
        self.values.data().to_vec()
    }

    /// Flattened segment mapped into the unit model domain via
    /// [`db_to_unit`].
    pub fn unit_flat(&self) -> Vec<f64> {
        self.values.data().iter().map(|&v| db_to_unit(v)).collect()
    }
}

/// Maps a floored dB value into `[0, 1]` for model consumption
/// (`-80 dB -> 0`, `0 dB -> 1`).
pub fn db_to_unit(db: f64) -> f64 {
    (db - FLOOR_DB) / -FLOOR_DB
}

/// Inverse of [`db_to_unit`].
pub fn unit_to_db(u: f64) -> f64 {
    u * -FLOOR_DB + FLOOR_DB
}

/// Mel scale: `mel(f) = 2595 * log10(1 + f/700)`.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

/// Inverse mel scale.
pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Periodic Hann window: `w[k] = 0.5 * (1 - cos(2 pi k / n))`.
pub fn hann_window(n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidArgument("window length must be >= 1".into()));
    }
    Ok((0..n)
        .map(|k| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * k as f64 / n as f64).cos()))
        .collect())
}

/// Windowed power STFT. Frame `t` covers samples `[t*hop, t*hop + n_window)`,
/// zero-extended past the end of the buffer so that every sample falls in
/// some frame (`n_frames = ceil(len / hop)`, one frame per hop — 1 s at a
/// 10 ms hop is exactly 100 frames); bins `0..=n_fft/2` hold `|X_b|^2`.
pub fn stft_power(wave: &WaveBuffer, window_s: f64, hop_s: f64) -> Result<PowerSpectrogram> {
    let n_window = (window_s * wave.sample_rate as f64).round() as usize;
    let hop = (hop_s * wave.sample_rate as f64).round() as usize;
    if n_window == 0 || hop == 0 {
        return Err(Error::InvalidArgument(
            "window and hop must be at least one sample".into(),
        ));
    }
    if wave.samples.len() < n_window {
        return Err(Error::AudioTooShort {
            need: n_window,
            got: wave.samples.len(),
        });
    }

    let window = hann_window(n_window)?;
    let n_bins = n_window / 2 + 1;
    let n_frames = wave.samples.len().div_ceil(hop);

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_window);
    let mut frames = Mat::zeros(n_frames, n_bins);
    let mut buf = vec![Complex::new(0.0, 0.0); n_window];

    for t in 0..n_frames {
        let start = t * hop;
        for (k, slot) in buf.iter_mut().enumerate() {
            let sample = wave.samples.get(start + k).copied().unwrap_or(0.0);
            *slot = Complex::new(sample * window[k], 0.0);
        }
        fft.process(&mut buf);
        let row = frames.row_mut(t);
        for (b, slot) in row.iter_mut().enumerate() {
            *slot = buf[b].norm_sqr();
        }
    }

    Ok(PowerSpectrogram {
        frames,
        frame_hop_s: hop_s,
        window_s,
        sample_rate: wave.sample_rate,
    })
}

/// Hz positions of the `n_filters + 2` mel-grid nodes between fmin and fmax.
fn mel_grid_hz(n_filters: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let lo = hz_to_mel(fmin);
    let hi = hz_to_mel(fmax);
    (0..n_filters + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_filters + 1) as f64))
        .collect()
}

/// Triangular mel filterbank with centers equally spaced on the mel scale.
/// Filter `i` rises from node `i-1` to node `i` and falls to node `i+1`.
pub fn mel_filterbank(
    n_filters: usize,
    n_fft: usize,
    sample_rate: u32,
    fmin: f64,
    fmax: f64,
) -> Result<MelFilterBank> {
    if n_filters == 0 {
        return Err(Error::InvalidArgument("need at least one filter".into()));
    }
    if !(fmin >= 0.0 && fmin < fmax && fmax <= sample_rate as f64 / 2.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 <= fmin < fmax <= sr/2, got fmin={fmin}, fmax={fmax}, sr={sample_rate}"
        )));
    }

    let n_bins = n_fft / 2 + 1;
    let grid = mel_grid_hz(n_filters, fmin, fmax);
    let bin_hz = sample_rate as f64 / n_fft as f64;
    let mut weights = Mat::zeros(n_filters, n_bins);

    for i in 0..n_filters {
        let (left, center, right) = (grid[i], grid[i + 1], grid[i + 2]);
        let row = weights.row_mut(i);
        for (b, w) in row.iter_mut().enumerate() {
            let f = b as f64 * bin_hz;
            let rising = (f - left) / (center - left);
            let falling = (right - f) / (right - center);
            *w = rising.min(falling).max(0.0);
        }
        if row.iter().all(|&w| w == 0.0) {
            return Err(Error::InvalidArgument(format!(
                "filter {i} has no FFT bin support; too many filters for n_fft={n_fft}"
            )));
        }
    }

    Ok(MelFilterBank {
        weights,
        fmin,
        fmax,
    })
}

/// Mel energies per frame converted to dB relative to the utterance-wide
/// maximum, clamped at `floor_db`. A silent utterance yields an all-floor
/// spectrogram (with a logged warning).
pub fn to_mel_db(
    power: &PowerSpectrogram,
    fb: &MelFilterBank,
    floor_db: f64,
) -> Result<MelSpectrogram> {
    if fb.weights.cols() != power.frames.cols() {
        return Err(Error::Dimension {
            expected: fb.weights.cols(),
            got: power.frames.cols(),
            context: "filterbank bins vs power spectrogram bins",
        });
    }

    let t = power.frames.rows();
    let f = fb.n_filters();
    let mut energies = Mat::zeros(t, f);
    let mut max_e = 0.0f64;
    for ti in 0..t {
        let e = fb.weights.matvec(power.frames.row(ti));
        for (fi, &v) in e.iter().enumerate() {
            energies.set(ti, fi, v);
            max_e = max_e.max(v);
        }
    }

    let mut frames = Mat::zeros(t, f);
    if max_e <= 0.0 {
        log::warn!("silent utterance: returning all-floor mel spectrogram");
        frames.fill(floor_db);
        return Ok(MelSpectrogram { frames, floor_db });
    }

    for ti in 0..t {
        for fi in 0..f {
            let ratio = energies.get(ti, fi) / max_e;
            let db = if ratio > 0.0 {
                (10.0 * ratio.log10()).max(floor_db)
            } else {
                floor_db
            };
            frames.set(ti, fi, db);
        }
    }
    Ok(MelSpectrogram { frames, floor_db })
}

/// Cuts the spectrogram into overlapping segments starting at
/// `0, hop_frames, 2*hop_frames, ...`; a trailing partial window is dropped.
pub fn segment(mel: &MelSpectrogram, t_m: usize, hop_frames: usize) -> Result<Vec<MelSegment>> {
    if t_m == 0 || hop_frames == 0 {
        return Err(Error::InvalidArgument(
            "segment length and hop must be positive".into(),
        ));
    }
    let total = mel.n_frames();
    if total < t_m {
        return Err(Error::AudioTooShort {
            need: t_m,
            got: total,
        });
    }
    let f = mel.n_mels();
    let mut out = Vec::new();
    let mut start = 0;
    while start + t_m <= total {
        let mut values = Mat::zeros(t_m, f);
        for r in 0..t_m {
            values.row_mut(r).copy_from_slice(mel.frames.row(start + r));
        }
        out.push(MelSegment {
            values,
            start_frame: start,
        });
        start += hop_frames;
    }
    Ok(out)
}

/// Rebuilds the covered prefix of a mel spectrogram from its segments by
/// direct placement; overlapping rows are identical copies of the source, so
/// `mel_from_segments(segment(mel, ..)?)` equals the prefix of `mel` exactly.
pub fn mel_from_segments(segments: &[MelSegment]) -> Result<MelSpectrogram> {
    let first = segments
        .first()
        .ok_or_else(|| Error::InvalidArgument("no segments to reassemble".into()))?;
    let n_mels = first.values.cols();
    let total = segments
        .iter()
        .map(|s| s.start_frame + s.values.rows())
        .max()
        .unwrap_or(0);
    let mut frames = Mat::zeros(total, n_mels);
    let mut covered = vec![false; total];
    for seg in segments {
        if seg.values.cols() != n_mels {
            return Err(Error::Dimension {
                expected: n_mels,
                got: seg.values.cols(),
                context: "segment mel bands",
            });
        }
        for r in 0..seg.values.rows() {
            frames
                .row_mut(seg.start_frame + r)
                .copy_from_slice(seg.values.row(r));
            covered[seg.start_frame + r] = true;
        }
    }
    if let Some(gap) = covered.iter().position(|&c| !c) {
        return Err(Error::InvalidArgument(format!(
            "segments leave frame {gap} uncovered"
        )));
    }
    Ok(MelSpectrogram {
        frames,
        floor_db: FLOOR_DB,
    })
}

/// Full frontend with the default parameters: STFT, 80-band filterbank over
/// `[0, sr/2]`, dB conversion with the -80 dB floor.
pub fn wave_to_mel(wave: &WaveBuffer) -> Result<MelSpectrogram> {
    let power = stft_power(wave, WINDOW_S, HOP_S)?;
    let n_fft = (wave.sample_rate as f64 * WINDOW_S).round() as usize;
    let fb = mel_filterbank(N_MELS, n_fft, wave.sample_rate, 0.0, wave.sample_rate as f64 / 2.0)?;
    to_mel_db(&power, &fb, FLOOR_DB)
}

const MEL_MAGIC: &[u8; 4] = b"AVMS";
const MEL_VERSION: u32 = 1;

/// Writes a mel spectrogram dump: magic `AVMS`, u32 version, u32 T, u32 F,
/// then `T*F` little-endian f32 values row-major.
pub fn save_mel(path: impl AsRef<Path>, mel: &MelSpectrogram) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MEL_MAGIC)?;
    w.write_all(&MEL_VERSION.to_le_bytes())?;
    w.write_all(&(mel.n_frames() as u32).to_le_bytes())?;
    w.write_all(&(mel.n_mels() as u32).to_le_bytes())?;
    for &v in mel.frames.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a mel spectrogram dump written by [`save_mel`].
pub fn load_mel(path: impl AsRef<Path>) -> Result<MelSpectrogram> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| mel_err("unexpected end of file"))?;
    if &magic != MEL_MAGIC {
        return Err(mel_err("bad magic"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|_| mel_err("truncated"))?;
    let version = u32::from_le_bytes(u32buf);
    if version != MEL_VERSION {
        return Err(mel_err(format!("unsupported version {version}")));
    }
    r.read_exact(&mut u32buf).map_err(|_| mel_err("truncated"))?;
    let t = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf).map_err(|_| mel_err("truncated"))?;
    let f = u32::from_le_bytes(u32buf) as usize;

    let mut data = Vec::with_capacity(t * f);
    let mut f32buf = [0u8; 4];
    for _ in 0..t * f {
        r.read_exact(&mut f32buf).map_err(|_| mel_err("truncated payload"))?;
        data.push(f32::from_le_bytes(f32buf) as f64);
    }
    Ok(MelSpectrogram {
        frames: Mat::from_vec(t, f, data)?,
        floor_db: FLOOR_DB,
    })
}

fn mel_err(reason: impl Into<String>) -> Error {
    Error::Format {
        format: "AVMS",
        reason: reason.into(),
    }
}
