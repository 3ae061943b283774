//! Python bindings for the avlink pipeline.
//!
//! Thin wrappers over the core types: waveforms, mel spectrograms, MLP
//! VAEs, the whitened-PCA codec, and the linked audio-to-video model.
//! Vectors cross the boundary as plain Python lists of floats.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use avlink::audio::{self, MelSpectrogram, WaveBuffer};
use avlink::link::{self, LinkConfig, LinkedModel};
use avlink::metrics;
use avlink::pca::PcaCodec;
use avlink::synth;
use avlink::vae::{MlpVae, OutputActivation};
use avlink::Mat;

fn to_py_err(e: avlink::Error) -> PyErr {
    match e {
        avlink::Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn mat_from_rows(rows: &[Vec<f64>], context: &str) -> PyResult<Mat> {
    if rows.is_empty() {
        return Err(PyValueError::new_err(format!("{context}: no rows")));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err(format!(
            "{context}: rows have inconsistent lengths"
        )));
    }
    let mut m = Mat::zeros(rows.len(), cols);
    for (i, row) in rows.iter().enumerate() {
        m.row_mut(i).copy_from_slice(row);
    }
    Ok(m)
}

fn mat_to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Mono waveform.
#[pyclass]
#[derive(Clone)]
struct Wave {
    inner: WaveBuffer,
}

#[pymethods]
impl Wave {
    #[new]
    fn new(samples: Vec<f64>, sample_rate: u32) -> PyResult<Self> {
        Ok(Self {
            inner: WaveBuffer::new(samples, sample_rate).map_err(to_py_err)?,
        })
    }

    /// Reads a PCM16 mono WAV file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: avlink::wav::load_wav(&path).map_err(to_py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        avlink::wav::save_wav(&path, &self.inner).map_err(to_py_err)
    }

    #[getter]
    fn sample_rate(&self) -> u32 {
        self.inner.sample_rate
    }

    #[getter]
    fn duration_s(&self) -> f64 {
        self.inner.duration_s()
    }

    fn samples(&self) -> Vec<f64> {
        self.inner.samples.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.samples.len()
    }
}

/// Log-mel spectrogram in dB.
#[pyclass]
#[derive(Clone)]
struct Mel {
    inner: MelSpectrogram,
}

#[pymethods]
impl Mel {
    #[getter]
    fn n_frames(&self) -> usize {
        self.inner.n_frames()
    }

    #[getter]
    fn n_mels(&self) -> usize {
        self.inner.n_mels()
    }

    /// One frame as a list of dB values.
    fn frame(&self, i: usize) -> PyResult<Vec<f64>> {
        if i >= self.inner.n_frames() {
            return Err(PyValueError::new_err(format!(
                "frame {i} out of range ({} frames)",
                self.inner.n_frames()
            )));
        }
        Ok(self.inner.frames.row(i).to_vec())
    }

    fn frames(&self) -> Vec<Vec<f64>> {
        mat_to_rows(&self.inner.frames)
    }

    /// SNR of `estimate` against the same-length prefix of this mel.
    fn snr_against_prefix(&self, estimate: &Mel) -> PyResult<f64> {
        link::snr_against_prefix(&self.inner, &estimate.inner).map_err(to_py_err)
    }
}

/// MLP variational autoencoder with manually derived gradients.
#[pyclass]
#[derive(Clone)]
struct Vae {
    inner: MlpVae,
}

fn parse_output(output: &str) -> PyResult<OutputActivation> {
    match output {
        "linear" => Ok(OutputActivation::Linear),
        "sigmoid" => Ok(OutputActivation::Sigmoid),
        other => Err(PyValueError::new_err(format!(
            "output must be 'linear' or 'sigmoid', got '{other}'"
        ))),
    }
}

#[pymethods]
impl Vae {
    #[new]
    fn new(
        input_dim: usize,
        hidden: Vec<usize>,
        latent_dim: usize,
        output: &str,
        seed: u64,
    ) -> PyResult<Self> {
        Ok(Self {
            inner: MlpVae::new(input_dim, &hidden, latent_dim, parse_output(output)?, seed)
                .map_err(to_py_err)?,
        })
    }

    /// The default audio architecture (1600 -> 512 -> 256 -> d, linear output).
    #[staticmethod]
    fn audio_default(d: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: MlpVae::audio_default(d, seed).map_err(to_py_err)?,
        })
    }

    /// The default image architecture (1024 -> 256 -> d_img, sigmoid output).
    #[staticmethod]
    fn image_default(d_img: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: MlpVae::image_default(d_img, seed).map_err(to_py_err)?,
        })
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }

    /// Posterior parameters `(mu, log_var)` for one input.
    fn encode(&self, x: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let lg = self.inner.encode(&x).map_err(to_py_err)?;
        Ok((lg.mu, lg.log_var))
    }

    /// Decoder mean for one latent vector.
    fn decode_mean(&self, z: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.decode_mean(&z).map_err(to_py_err)
    }
}

/// Whitened-PCA baseline codec.
#[pyclass]
struct Pca {
    inner: PcaCodec,
}

#[pymethods]
impl Pca {
    /// Fits mean, eigenbasis and whitening on `rows` (one sample per row).
    #[staticmethod]
    fn fit(rows: Vec<Vec<f64>>, z_d: usize) -> PyResult<Self> {
        let m = mat_from_rows(&rows, "PCA training data")?;
        Ok(Self {
            inner: PcaCodec::fit(&m, z_d).map_err(to_py_err)?,
        })
    }

    #[getter]
    fn dim_input(&self) -> usize {
        self.inner.dim_input()
    }

    #[getter]
    fn dim_latent(&self) -> usize {
        self.inner.dim_latent()
    }

    #[getter]
    fn eigenvalues(&self) -> Vec<f64> {
        self.inner.eigenvalues().to_vec()
    }

    fn encode(&self, u: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.encode(&u).map_err(to_py_err)
    }

    fn decode(&self, z: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.decode(&z).map_err(to_py_err)
    }
}

/// A decoded grayscale clip.
#[pyclass]
struct Video {
    frames: Vec<Vec<f64>>,
    frame_rate: u32,
    size: usize,
}

#[pymethods]
impl Video {
    #[getter]
    fn n_frames(&self) -> usize {
        self.frames.len()
    }

    #[getter]
    fn frame_rate(&self) -> u32 {
        self.frame_rate
    }

    /// Edge length of the square frames.
    #[getter]
    fn size(&self) -> usize {
        self.size
    }

    /// One frame as a row-major list of pixels in [0, 1].
    fn frame(&self, i: usize) -> PyResult<Vec<f64>> {
        self.frames
            .get(i)
            .cloned()
            .ok_or_else(|| PyValueError::new_err(format!("frame {i} out of range")))
    }
}

/// Linked audio/image model: the audio-to-video translator.
#[pyclass]
struct Linked {
    inner: LinkedModel,
}

#[pymethods]
impl Linked {
    /// Links an audio and an image VAE; the image latent size fixes the
    /// content dimension, so the style size is their difference.
    #[new]
    fn new(audio: &Vae, image: &Vae, log_s: f64) -> PyResult<Self> {
        let d = audio.inner.latent_dim();
        let d_img = image.inner.latent_dim();
        if d_img >= d {
            return Err(PyValueError::new_err(format!(
                "image latent ({d_img}) must be smaller than audio latent ({d})"
            )));
        }
        let image_size = (image.inner.input_dim() as f64).sqrt() as usize;
        let cfg = LinkConfig {
            d,
            m: d - d_img,
            image_size,
            ..LinkConfig::default()
        };
        Ok(Self {
            inner: LinkedModel::new(
                audio.inner.clone(),
                image.inner.clone(),
                avlink::priors::TimeScale::new(log_s),
                cfg,
            )
            .map_err(to_py_err)?,
        })
    }

    /// Reads an AVLM file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: link::load_linked(&path).map_err(to_py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        link::save_linked(&path, &self.inner).map_err(to_py_err)
    }

    #[getter]
    fn style_dim(&self) -> usize {
        self.inner.config.m
    }

    #[getter]
    fn content_dim(&self) -> usize {
        self.inner.config.content_dim()
    }

    /// Translates a waveform into a 25 Hz grayscale clip.
    fn translate(&self, wave: &Wave) -> PyResult<Video> {
        let video = link::translate_stream(&self.inner, &wave.inner).map_err(to_py_err)?;
        let size = self.inner.config.image_size;
        Ok(Video {
            frames: video.frames.iter().map(|f| f.pixels().to_vec()).collect(),
            frame_rate: video.frame_rate,
            size,
        })
    }

    /// Round-trip SNR (audio -> image latent -> audio) on a mel spectrogram.
    fn roundtrip_snr(&self, mel: &Mel) -> PyResult<f64> {
        link::roundtrip_snr(&self.inner, &mel.inner).map_err(to_py_err)
    }
}

/// Mel spectrogram of a waveform (25 ms window, 10 ms hop, 80 bands).
#[pyfunction]
fn wave_to_mel(wave: &Wave) -> PyResult<Mel> {
    Ok(Mel {
        inner: audio::wave_to_mel(&wave.inner).map_err(to_py_err)?,
    })
}

/// Classical MDS embedding of points (one per row) into k dimensions.
#[pyfunction]
fn mds_embed(points: Vec<Vec<f64>>, k: usize) -> PyResult<Vec<Vec<f64>>> {
    let m = mat_from_rows(&points, "MDS input")?;
    let emb = metrics::mds_embed(&m, k).map_err(to_py_err)?;
    Ok(mat_to_rows(&emb.coords))
}

/// Mean latent velocity and acceleration of `vae`'s trajectory over `mel`.
#[pyfunction]
fn latent_motion(vae: &Vae, mel: &Mel) -> PyResult<(f64, f64)> {
    let traj = link::latent_trajectory(&vae.inner, &mel.inner).map_err(to_py_err)?;
    Ok((
        metrics::velocity(&traj).map_err(to_py_err)?,
        metrics::acceleration(&traj).map_err(to_py_err)?,
    ))
}

/// Renders one synthetic utterance: `phoneme_ids` spoken by `speaker` of a
/// `n_speakers`-strong default cast, with deterministic jitter from `seed`.
#[pyfunction]
fn synth_wave(
    speaker: usize,
    n_speakers: usize,
    phoneme_ids: Vec<usize>,
    seed: u64,
) -> PyResult<Wave> {
    use rand::SeedableRng;
    let speakers = synth::default_speakers(n_speakers).map_err(to_py_err)?;
    let templates = synth::default_phonemes(12).map_err(to_py_err)?;
    let cast = speakers
        .get(speaker)
        .ok_or_else(|| PyValueError::new_err(format!("speaker {speaker} out of range")))?;
    let picked: Vec<_> = phoneme_ids
        .iter()
        .map(|&id| {
            templates
                .get(id)
                .cloned()
                .ok_or_else(|| PyValueError::new_err(format!("phoneme {id} out of range")))
        })
        .collect::<PyResult<_>>()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Ok(Wave {
        inner: synth::synth_utterance(cast, &picked, &mut rng).map_err(to_py_err)?,
    })
}

#[pymodule]
fn avlink_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Wave>()?;
    m.add_class::<Mel>()?;
    m.add_class::<Vae>()?;
    m.add_class::<Pca>()?;
    m.add_class::<Video>()?;
    m.add_class::<Linked>()?;
    m.add_function(wrap_pyfunction!(wave_to_mel, m)?)?;
    m.add_function(wrap_pyfunction!(mds_embed, m)?)?;
    m.add_function(wrap_pyfunction!(latent_motion, m)?)?;
    m.add_function(wrap_pyfunction!(synth_wave, m)?)?;
    Ok(())
}
