//! Desk-scale MLP variational autoencoder with manual reverse-mode
//! gradients, an Adam optimizer, and a finite-difference gradient checker.
//!
//! Parameters live in one flat `Vec<f64>` ordered encoder-first,
//! layer-by-layer, weights before biases. That order is simultaneously the
//! checkpoint tensor order, the Adam moment layout, and the index space of
//! the gradient checker, so no repacking happens anywhere.
//!
//! The composite losses in `priors` and `link` are assembled from the
//! public building blocks here: cached forward passes
//! ([`MlpVae::encode_with_cache`], [`MlpVae::decode_with_cache`]) and the
//! matching backward passes that accumulate parameter gradients and return
//! the gradient with respect to the half's input.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::{axpy, dot};

/// Negative-side slope of the leaky rectifier used on all hidden layers.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Encoder log-variance outputs are clamped to `[-LOG_VAR_CLAMP, LOG_VAR_CLAMP]`.
pub const LOG_VAR_CLAMP: f64 = 10.0;

const AVWR_MAGIC: &[u8; 4] = b"AVWR";
const AVWR_VERSION: u32 = 1;

/// Activation applied by the final decoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    /// Raw affine output (mel-segment decoder).
    Linear,
    /// Elementwise logistic squashing to `[0, 1]` (image decoder).
    Sigmoid,
}

/// Diagonal-Gaussian posterior produced by the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGaussian {
    /// Posterior mean.
    pub mu: Vec<f64>,
    /// Posterior log-variance, clamped to `[-10, 10]`.
    pub log_var: Vec<f64>,
}

impl LatentGaussian {
    /// Builds a posterior, clamping the log-variance into range.
    pub fn new(mu: Vec<f64>, mut log_var: Vec<f64>) -> Self {
        for v in log_var.iter_mut() {
            *v = v.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP);
        }
        Self { mu, log_var }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerShape {
    w_off: usize,
    b_off: usize,
    in_dim: usize,
    out_dim: usize,
}

/// Per-layer activations and preactivations recorded during a forward pass
/// through one network half.
#[derive(Debug, Clone)]
struct LayerTrace {
    /// `acts[0]` is the input; `acts[k + 1]` is the output of local layer `k`.
    acts: Vec<Vec<f64>>,
    /// `preacts[k]` is the affine output of local layer `k` before activation.
    preacts: Vec<Vec<f64>>,
}

impl LayerTrace {
    /// Appends one sign bit per hidden-layer preactivation, used by the
    /// gradient checker to detect perturbations that straddle a rectifier
    /// kink.
    fn push_hidden_signs(&self, out: &mut Vec<bool>) {
        for p in &self.preacts[..self.preacts.len() - 1] {
            out.extend(p.iter().map(|&v| v > 0.0));
        }
    }
}

/// Forward trace of the encoder half.
#[derive(Debug, Clone)]
pub struct EncCache {
    trace: LayerTrace,
    d: usize,
}

impl EncCache {
    /// Kink indicator bits: hidden rectifier signs plus the two clamp
    /// indicators per log-variance coordinate.
    pub fn push_kink_signs(&self, out: &mut Vec<bool>) {
        self.trace.push_hidden_signs(out);
        let raw = self.trace.preacts.last().expect("at least one layer");
        for &v in &raw[self.d..] {
            out.push(v > LOG_VAR_CLAMP);
            out.push(v < -LOG_VAR_CLAMP);
        }
    }
}

/// Forward trace of the decoder half.
#[derive(Debug, Clone)]
pub struct DecCache {
    trace: LayerTrace,
}

impl DecCache {
    /// Kink indicator bits (hidden rectifier signs; the output activation is
    /// smooth).
    pub fn push_kink_signs(&self, out: &mut Vec<bool>) {
        self.trace.push_hidden_signs(out);
    }
}

/// Multilayer-perceptron VAE: leaky-rectifier encoder ending in a `2d`-wide
/// mean/log-variance head, and a mirrored decoder.
#[derive(Debug, Clone)]
pub struct MlpVae {
    enc_dims: Vec<usize>,
    dec_dims: Vec<usize>,
    d: usize,
    output: OutputActivation,
    layers: Vec<LayerShape>,
    n_enc: usize,
    params: Vec<f64>,
}

impl MlpVae {
    /// Builds a VAE with the given encoder hidden widths; the decoder mirrors
    /// them. Weights are Xavier-uniform from a seeded generator, biases zero.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        d: usize,
        output: OutputActivation,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || d == 0 || hidden.contains(&0) {
            return Err(Error::InvalidArgument(
                "VAE layer widths must be positive".into(),
            ));
        }
        let mut enc_dims = Vec::with_capacity(hidden.len() + 2);
        enc_dims.push(input_dim);
        enc_dims.extend_from_slice(hidden);
        enc_dims.push(2 * d);
        let mut dec_dims = Vec::with_capacity(hidden.len() + 2);
        dec_dims.push(d);
        dec_dims.extend(hidden.iter().rev());
        dec_dims.push(input_dim);
        Self::from_dims(enc_dims, dec_dims, d, output, seed)
    }

    /// Builds a VAE from explicit per-half layer widths (used when loading
    /// checkpoints). The encoder must end at `2d` and the decoder start at `d`.
    pub fn from_dims(
        enc_dims: Vec<usize>,
        dec_dims: Vec<usize>,
        d: usize,
        output: OutputActivation,
        seed: u64,
    ) -> Result<Self> {
        let consistent = enc_dims.len() >= 2
            && dec_dims.len() >= 2
            && d > 0
            && *enc_dims.last().unwrap() == 2 * d
            && dec_dims[0] == d
            && enc_dims.iter().chain(&dec_dims).all(|&w| w > 0);
        if !consistent {
            return Err(Error::InvalidArgument(format!(
                "inconsistent VAE dims: encoder {enc_dims:?}, decoder {dec_dims:?}, d = {d}"
            )));
        }
        let mut layers = Vec::new();
        let mut off = 0;
        for dims in [&enc_dims, &dec_dims] {
            for pair in dims.windows(2) {
                let (in_dim, out_dim) = (pair[0], pair[1]);
                layers.push(LayerShape {
                    w_off: off,
                    b_off: off + in_dim * out_dim,
                    in_dim,
                    out_dim,
                });
                off += in_dim * out_dim + out_dim;
            }
        }
        let n_enc = enc_dims.len() - 1;

        let mut params = vec![0.0; off];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for shape in &layers {
            let limit = (6.0 / (shape.in_dim + shape.out_dim) as f64).sqrt();
            for w in &mut params[shape.w_off..shape.b_off] {
                *w = rng.gen_range(-limit..limit);
            }
        }
        Ok(Self {
            enc_dims,
            dec_dims,
            d,
            output,
            layers,
            n_enc,
            params,
        })
    }

    /// Default audio VAE: 1600 -> 512 -> 256 -> (2 * d), linear decoder output.
    pub fn audio_default(d: usize, seed: u64) -> Result<Self> {
        Self::new(
            crate::audio::SEGMENT_FRAMES * crate::audio::N_MELS,
            &[512, 256],
            d,
            OutputActivation::Linear,
            seed,
        )
    }

    /// Default image VAE: 1024 -> 256 -> (2 * d_img), sigmoid decoder output.
    pub fn image_default(d_img: usize, seed: u64) -> Result<Self> {
        Self::new(1024, &[256], d_img, OutputActivation::Sigmoid, seed)
    }

    pub fn input_dim(&self) -> usize {
        self.enc_dims[0]
    }

    pub fn latent_dim(&self) -> usize {
        self.d
    }

    pub fn output(&self) -> OutputActivation {
        self.output
    }

    pub fn enc_dims(&self) -> &[usize] {
        &self.enc_dims
    }

    pub fn dec_dims(&self) -> &[usize] {
        &self.dec_dims
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn run_half(&self, first: usize, count: usize, x: &[f64], sigmoid_out: bool) -> Result<LayerTrace> {
        let mut acts = Vec::with_capacity(count + 1);
        let mut preacts = Vec::with_capacity(count);
        acts.push(x.to_vec());
        for (k, shape) in self.layers[first..first + count].iter().enumerate() {
            let a_in = acts.last().unwrap();
            let w = &self.params[shape.w_off..shape.b_off];
            let b = &self.params[shape.b_off..shape.b_off + shape.out_dim];
            let mut pre = vec![0.0; shape.out_dim];
            for (r, p) in pre.iter_mut().enumerate() {
                *p = dot(&w[r * shape.in_dim..(r + 1) * shape.in_dim], a_in) + b[r];
            }
            let last = k + 1 == count;
            let act: Vec<f64> = if !last {
                pre.iter().map(|&v| if v > 0.0 { v } else { LEAKY_SLOPE * v }).collect()
            } else if sigmoid_out {
                pre.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect()
            } else {
                pre.clone()
            };
            if !act.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteActivation { layer: k });
            }
            preacts.push(pre);
            acts.push(act);
        }
        Ok(LayerTrace { acts, preacts })
    }

    /// Encoder forward pass; also returns the trace needed for backward.
    pub fn encode_with_cache(&self, x: &[f64]) -> Result<(LatentGaussian, EncCache)> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: x.len(),
                context: "VAE encoder input",
            });
        }
        let trace = self.run_half(0, self.n_enc, x, false)?;
        let out = trace.acts.last().unwrap();
        let lg = LatentGaussian::new(out[..self.d].to_vec(), out[self.d..].to_vec());
        Ok((lg, EncCache { trace, d: self.d }))
    }

    /// Encoder forward pass.
    pub fn encode(&self, x: &[f64]) -> Result<LatentGaussian> {
        Ok(self.encode_with_cache(x)?.0)
    }

    /// Decoder forward pass; also returns the trace needed for backward.
    pub fn decode_with_cache(&self, z: &[f64]) -> Result<(Vec<f64>, DecCache)> {
        if z.len() != self.dec_dims[0] {
            return Err(Error::Dimension {
                expected: self.dec_dims[0],
                got: z.len(),
                context: "VAE decoder input",
            });
        }
        let trace = self.run_half(
            self.n_enc,
            self.layers.len() - self.n_enc,
            z,
            self.output == OutputActivation::Sigmoid,
        )?;
        let out = trace.acts.last().unwrap().clone();
        Ok((out, DecCache { trace }))
    }

    /// Decoder forward pass (reconstruction mean `mu(z)`).
    pub fn decode_mean(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.decode_with_cache(z)?.0)
    }

    /// Reverse pass through the encoder given loss gradients with respect to
    /// the posterior mean and (clamped) log-variance. Parameter gradients are
    /// accumulated into `grads`; the return value is the loss gradient with
    /// respect to the encoder input.
    pub fn encoder_backward(
        &self,
        cache: &EncCache,
        d_mu: &[f64],
        d_log_var: &[f64],
        grads: &mut [f64],
    ) -> Vec<f64> {
        debug_assert_eq!(d_mu.len(), self.d);
        debug_assert_eq!(d_log_var.len(), self.d);
        let raw = cache.trace.preacts.last().expect("at least one layer");
        let mut dp = Vec::with_capacity(2 * self.d);
        dp.extend_from_slice(d_mu);
        for (g, &v) in d_log_var.iter().zip(&raw[self.d..]) {
            // the clamp has zero slope outside [-10, 10]
            dp.push(if v.abs() > LOG_VAR_CLAMP { 0.0 } else { *g });
        }
        self.backprop_half(0, self.n_enc, &cache.trace, dp, grads)
    }

    /// Reverse pass through the decoder given the loss gradient with respect
    /// to its output. Parameter gradients are accumulated into `grads`; the
    /// return value is the loss gradient with respect to the latent input.
    pub fn decoder_backward(&self, cache: &DecCache, d_out: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let out = cache.trace.acts.last().expect("at least one layer");
        debug_assert_eq!(d_out.len(), out.len());
        let dp = match self.output {
            OutputActivation::Linear => d_out.to_vec(),
            OutputActivation::Sigmoid => d_out
                .iter()
                .zip(out)
                .map(|(&g, &s)| g * s * (1.0 - s))
                .collect(),
        };
        self.backprop_half(
            self.n_enc,
            self.layers.len() - self.n_enc,
            &cache.trace,
            dp,
            grads,
        )
    }

    /// Shared reverse loop; `dp` is the gradient at the final preactivation.
    fn backprop_half(
        &self,
        first: usize,
        count: usize,
        trace: &LayerTrace,
        mut dp: Vec<f64>,
        grads: &mut [f64],
    ) -> Vec<f64> {
        debug_assert_eq!(grads.len(), self.params.len());
        for k in (0..count).rev() {
            let shape = self.layers[first + k];
            let a_in = &trace.acts[k];
            for (r, &g) in dp.iter().enumerate() {
                let w_row = shape.w_off + r * shape.in_dim;
                axpy(g, a_in, &mut grads[w_row..w_row + shape.in_dim]);
                grads[shape.b_off + r] += g;
            }
            let mut da = vec![0.0; shape.in_dim];
            for (r, &g) in dp.iter().enumerate() {
                let w_row = shape.w_off + r * shape.in_dim;
                axpy(g, &self.params[w_row..w_row + shape.in_dim], &mut da);
            }
            if k == 0 {
                return da;
            }
            dp = da
                .iter()
                .zip(&trace.preacts[k - 1])
                .map(|(&g, &p)| if p > 0.0 { g } else { LEAKY_SLOPE * g })
                .collect();
        }
        unreachable!("network halves have at least one layer");
    }
}

/// Reparameterized sample `z = mu + exp(log_var / 2) * noise`.
pub fn reparameterize(lg: &LatentGaussian, noise: &[f64]) -> Vec<f64> {
    debug_assert_eq!(noise.len(), lg.dim());
    lg.mu
        .iter()
        .zip(&lg.log_var)
        .zip(noise)
        .map(|((&m, &lv), &n)| m + (0.5 * lv).exp() * n)
        .collect()
}

/// Pulls a loss gradient at the sample `z` back onto the posterior
/// parameters: `d_mu = d_z`, `d_log_var = d_z * noise * exp(log_var / 2) / 2`.
pub fn reparameterize_backward(
    lg: &LatentGaussian,
    noise: &[f64],
    d_z: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let d_mu = d_z.to_vec();
    let d_lv = d_z
        .iter()
        .zip(noise)
        .zip(&lg.log_var)
        .map(|((&g, &n), &lv)| 0.5 * g * n * (0.5 * lv).exp())
        .collect();
    (d_mu, d_lv)
}

/// Closed-form KL divergence from the posterior to the standard-normal
/// prior: `0.5 * sum(mu^2 + exp(log_var) - 1 - log_var)`.
pub fn kl_diag_gaussian(lg: &LatentGaussian) -> f64 {
    lg.mu
        .iter()
        .zip(&lg.log_var)
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

/// Gradients of [`kl_diag_gaussian`] with respect to `mu` and `log_var`.
pub fn kl_diag_gaussian_grads(lg: &LatentGaussian) -> (Vec<f64>, Vec<f64>) {
    let d_mu = lg.mu.clone();
    let d_lv = lg.log_var.iter().map(|&lv| 0.5 * (lv.exp() - 1.0)).collect();
    (d_mu, d_lv)
}

/// Single-sample negative ELBO (up to a constant):
/// `0.5 * ||x - decode(reparameterize(encode(x), noise))||^2 + KL`.
///
/// Parameter gradients are **accumulated** (`+=`) into `grads`, which must
/// hold one entry per parameter; batch loops zero the buffer once, accumulate
/// every sample, then rescale.
pub fn elbo_loss_and_grads(
    vae: &MlpVae,
    x: &[f64],
    noise: &[f64],
    grads: &mut [f64],
) -> Result<f64> {
    if grads.len() != vae.n_params() {
        return Err(Error::Dimension {
            expected: vae.n_params(),
            got: grads.len(),
            context: "ELBO gradient buffer",
        });
    }
    if noise.len() != vae.latent_dim() {
        return Err(Error::Dimension {
            expected: vae.latent_dim(),
            got: noise.len(),
            context: "ELBO noise vector",
        });
    }
    let (lg, enc_cache) = vae.encode_with_cache(x)?;
    let z = reparameterize(&lg, noise);
    let (x_hat, dec_cache) = vae.decode_with_cache(&z)?;

    let recon: f64 = x_hat
        .iter()
        .zip(x)
        .map(|(&xh, &xi)| 0.5 * (xh - xi) * (xh - xi))
        .sum();
    let loss = recon + kl_diag_gaussian(&lg);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }

    let d_x_hat: Vec<f64> = x_hat.iter().zip(x).map(|(&xh, &xi)| xh - xi).collect();
    let d_z = vae.decoder_backward(&dec_cache, &d_x_hat, grads);
    let (mut d_mu, mut d_lv) = reparameterize_backward(&lg, noise, &d_z);
    let (kl_d_mu, kl_d_lv) = kl_diag_gaussian_grads(&lg);
    axpy(1.0, &kl_d_mu, &mut d_mu);
    axpy(1.0, &kl_d_lv, &mut d_lv);
    vae.encoder_backward(&enc_cache, &d_mu, &d_lv, grads);
    Ok(loss)
}

/// Adam optimizer state for one flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Fresh state with the default hyperparameters (lr 1e-3, betas 0.9 /
    /// 0.999, eps 1e-8).
    pub fn new(n_params: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn with_lr(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            ..Self::new(n_params)
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(Error::Dimension {
            expected: state.m.len(),
            got: params.len().max(grads.len()),
            context: "Adam parameter/gradient shape",
        });
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Outcome of a finite-difference gradient verification.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// Largest relative error over the checked parameters.
    pub max_rel_err: f64,
    /// Parameters compared against central differences.
    pub checked: usize,
    /// Parameters skipped because a `±eps` perturbation straddled a kink.
    pub skipped: usize,
}

/// Compares `analytic` against central finite differences of `loss` over
/// every coordinate of `theta`.
///
/// `loss` evaluates the objective at the given parameters and appends one
/// sign bit per kink-prone intermediate (rectifier preactivations, clamps,
/// absolute values) to its second argument; coordinates whose two
/// perturbed evaluations disagree on any sign are skipped as
/// non-differentiable. Relative error is
/// `|g_a - g_n| / max(1e-8, |g_a| + |g_n|)`.
pub fn max_rel_grad_err(
    theta: &mut [f64],
    analytic: &[f64],
    eps: f64,
    mut loss: impl FnMut(&[f64], &mut Vec<bool>) -> f64,
) -> GradCheckReport {
    debug_assert_eq!(theta.len(), analytic.len());
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    let (mut signs_plus, mut signs_minus) = (Vec::new(), Vec::new());
    for i in 0..theta.len() {
        let orig = theta[i];
        signs_plus.clear();
        signs_minus.clear();
        theta[i] = orig + eps;
        let l_plus = loss(theta, &mut signs_plus);
        theta[i] = orig - eps;
        let l_minus = loss(theta, &mut signs_minus);
        theta[i] = orig;
        if signs_plus != signs_minus {
            report.skipped += 1;
            continue;
        }
        let g_n = (l_plus - l_minus) / (2.0 * eps);
        let g_a = analytic[i];
        let rel = (g_a - g_n).abs() / f64::max(1e-8, g_a.abs() + g_n.abs());
        report.max_rel_err = report.max_rel_err.max(rel);
        report.checked += 1;
    }
    report
}

/// ELBO with kink indicator bits, for finite-difference probing.
fn elbo_with_signs(vae: &MlpVae, x: &[f64], noise: &[f64], signs: &mut Vec<bool>) -> Result<f64> {
    let (lg, enc_cache) = vae.encode_with_cache(x)?;
    enc_cache.push_kink_signs(signs);
    let z = reparameterize(&lg, noise);
    let (x_hat, dec_cache) = vae.decode_with_cache(&z)?;
    dec_cache.push_kink_signs(signs);
    let recon: f64 = x_hat
        .iter()
        .zip(x)
        .map(|(&xh, &xi)| 0.5 * (xh - xi) * (xh - xi))
        .sum();
    Ok(recon + kl_diag_gaussian(&lg))
}

/// Verifies the analytic ELBO gradient of `vae` at `x` (with the given fixed
/// noise) against central finite differences.
pub fn grad_check(vae: &MlpVae, x: &[f64], noise: &[f64], eps: f64) -> Result<GradCheckReport> {
    let mut analytic = vec![0.0; vae.n_params()];
    elbo_loss_and_grads(vae, x, noise, &mut analytic)?;
    let mut work = vae.clone();
    let mut theta = work.params().to_vec();
    Ok(max_rel_grad_err(&mut theta, &analytic, eps, |t, signs| {
        work.params_mut().copy_from_slice(t);
        elbo_with_signs(&work, x, noise, signs).expect("finite probe loss")
    }))
}

/// Sidecar description stored in the AVWR checkpoint header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeMetadata {
    pub enc_dims: Vec<usize>,
    pub dec_dims: Vec<usize>,
    /// Latent dimension.
    pub d: usize,
    /// Style prefix length for split latents (0 when not applicable).
    pub m: usize,
    /// Initialization seed.
    pub seed: u64,
    /// Training epochs completed.
    pub epoch: usize,
    pub output: OutputActivation,
    /// Learned time-scale `log s` of the smoothness prior, if one was trained.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_s: Option<f64>,
}

impl VaeMetadata {
    /// Metadata describing `vae` before any training.
    pub fn describe(vae: &MlpVae, m: usize, seed: u64) -> Self {
        Self {
            enc_dims: vae.enc_dims().to_vec(),
            dec_dims: vae.dec_dims().to_vec(),
            d: vae.latent_dim(),
            m,
            seed,
            epoch: 0,
            output: vae.output(),
            log_s: None,
        }
    }
}

/// Serializes an AVWR checkpoint: magic `AVWR`, u32 version, u32 metadata
/// length, UTF-8 JSON metadata, then all parameters in declaration order as
/// little-endian f32.
pub fn vae_to_avwr_bytes(vae: &MlpVae, meta: &VaeMetadata) -> Result<Vec<u8>> {
    if meta.enc_dims != vae.enc_dims || meta.dec_dims != vae.dec_dims || meta.d != vae.d {
        return Err(Error::InvalidArgument(
            "checkpoint metadata does not describe this VAE".into(),
        ));
    }
    let json = serde_json::to_vec(meta)?;
    let mut buf = Vec::with_capacity(12 + json.len() + 4 * vae.n_params());
    buf.extend_from_slice(AVWR_MAGIC);
    buf.extend_from_slice(&AVWR_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for &p in vae.params() {
        buf.extend_from_slice(&(p as f32).to_le_bytes());
    }
    Ok(buf)
}

/// Writes an AVWR checkpoint file (see [`vae_to_avwr_bytes`]).
pub fn save_vae(path: &Path, vae: &MlpVae, meta: &VaeMetadata) -> Result<()> {
    fs::write(path, vae_to_avwr_bytes(vae, meta)?)?;
    Ok(())
}

/// Parses AVWR bytes into a VAE and its metadata (see [`save_vae`]).
pub fn vae_from_avwr_bytes(bytes: &[u8]) -> Result<(MlpVae, VaeMetadata)> {
    let bad = |reason: String| Error::Format {
        format: "AVWR",
        reason,
    };
    if bytes.len() < 12 || &bytes[..4] != AVWR_MAGIC {
        return Err(bad("missing AVWR magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != AVWR_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + meta_len {
        return Err(bad("truncated metadata".into()));
    }
    let meta: VaeMetadata = serde_json::from_slice(&bytes[12..12 + meta_len])?;
    let mut vae = MlpVae::from_dims(
        meta.enc_dims.clone(),
        meta.dec_dims.clone(),
        meta.d,
        meta.output,
        0,
    )?;
    let tensor = &bytes[12 + meta_len..];
    if tensor.len() != 4 * vae.n_params() {
        return Err(bad(format!(
            "expected {} parameter bytes, got {}",
            4 * vae.n_params(),
            tensor.len()
        )));
    }
    for (p, chunk) in vae.params_mut().iter_mut().zip(tensor.chunks_exact(4)) {
        *p = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
    }
    if !vae.params().iter().all(|v| v.is_finite()) {
        return Err(bad("non-finite parameters".into()));
    }
    Ok((vae, meta))
}

/// Reads an AVWR checkpoint from disk (see [`save_vae`]).
pub fn load_vae(path: &Path) -> Result<(MlpVae, VaeMetadata)> {
    vae_from_avwr_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn toy_vae(seed: u64) -> MlpVae {
        MlpVae::new(16, &[8], 4, OutputActivation::Linear, seed).unwrap()
    }

    fn seeded_vec(n: usize, seed: u64, scale: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| scale * rng.gen_range(-1.0..1.0_f64)).collect()
    }

    fn seeded_noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        // enc 16->8 (128+8) and 8->8 (64+8); dec 4->8 (32+8) and 8->16 (128+16)
        assert_eq!(toy_vae(0).n_params(), 392);
    }

    #[test]
    fn zero_net_encodes_to_standard_prior() {
        let mut vae = toy_vae(3);
        vae.params_mut().fill(0.0);
        let lg = vae.encode(&seeded_vec(16, 1, 2.0)).unwrap();
        assert_eq!(lg.mu, vec![0.0; 4]);
        assert_eq!(lg.log_var, vec![0.0; 4]);
        assert_eq!(kl_diag_gaussian(&lg), 0.0);
    }

    #[test]
    fn encode_is_deterministic() {
        let vae = toy_vae(5);
        let x = seeded_vec(16, 2, 1.0);
        assert_eq!(vae.encode(&x).unwrap(), vae.encode(&x).unwrap());
    }

    #[test]
    fn single_linear_layer_arithmetic() {
        // encoder W = [[2], [0]], so x = [3] maps to mu = [6], log_var = [0]
        let mut vae = MlpVae::new(1, &[], 1, OutputActivation::Linear, 0).unwrap();
        vae.params_mut().fill(0.0);
        vae.params_mut()[0] = 2.0;
        let lg = vae.encode(&[3.0]).unwrap();
        assert_eq!(lg.mu, vec![6.0]);
        assert_eq!(lg.log_var, vec![0.0]);
    }

    #[test]
    fn encode_rejects_bad_input() {
        let vae = toy_vae(0);
        assert!(matches!(
            vae.encode(&[0.0; 7]),
            Err(Error::Dimension { .. })
        ));
        let mut x = vec![0.0; 16];
        x[3] = f64::NAN;
        assert!(matches!(
            vae.encode(&x),
            Err(Error::NonFiniteActivation { layer: 0 })
        ));
        assert!(matches!(
            vae.decode_mean(&[0.0; 3]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn log_var_is_clamped_with_zero_gradient() {
        // single linear encoder layer: bias rows d.. feed only log_var
        let mut vae = MlpVae::new(4, &[], 2, OutputActivation::Linear, 0).unwrap();
        vae.params_mut().fill(0.0);
        let b_off = 4 * 4; // encoder weight block is 4x4
        vae.params_mut()[b_off + 2] = 50.0;
        vae.params_mut()[b_off + 3] = -50.0;
        let x = vec![0.25; 4];
        let lg = vae.encode(&x).unwrap();
        assert_eq!(lg.log_var, vec![10.0, -10.0]);

        let mut grads = vec![0.0; vae.n_params()];
        elbo_loss_and_grads(&vae, &x, &[0.1, -0.2], &mut grads).unwrap();
        assert_eq!(grads[b_off + 2], 0.0);
        assert_eq!(grads[b_off + 3], 0.0);
    }

    #[test]
    fn reparameterize_identities() {
        let lg = LatentGaussian::new(vec![1.0, -2.0], vec![0.0, 0.0]);
        assert_eq!(reparameterize(&lg, &[0.0, 0.0]), vec![1.0, -2.0]);
        assert_eq!(reparameterize(&lg, &[0.5, 1.5]), vec![1.5, -0.5]);
    }

    #[test]
    fn reparameterize_monte_carlo_mean() {
        let lg = LatentGaussian::new(vec![0.7, -0.4, 1.2, 0.0], vec![0.3, -0.8, 0.0, 1.1]);
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut mean = vec![0.0; 4];
        for _ in 0..n {
            let noise: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
            axpy(1.0 / n as f64, &reparameterize(&lg, &noise), &mut mean);
        }
        for i in 0..4 {
            let sigma = (0.5 * lg.log_var[i]).exp();
            let bound = 3.0 * sigma / (n as f64).sqrt();
            assert!(
                (mean[i] - lg.mu[i]).abs() < bound,
                "dim {i}: {} vs {} (bound {bound})",
                mean[i],
                lg.mu[i]
            );
        }
    }

    #[test]
    fn kl_closed_forms() {
        let zero = LatentGaussian::new(vec![0.0; 3], vec![0.0; 3]);
        assert_eq!(kl_diag_gaussian(&zero), 0.0);
        let unit_mean = LatentGaussian::new(vec![1.0], vec![0.0]);
        assert!((kl_diag_gaussian(&unit_mean) - 0.5).abs() < 1e-15);
        // nonnegative on random posteriors, zero only at the prior
        let lg = LatentGaussian::new(vec![0.3, -0.1], vec![0.2, -0.5]);
        assert!(kl_diag_gaussian(&lg) > 0.0);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let lg = LatentGaussian::new(vec![0.3, -1.2, 0.7], vec![0.5, -0.4, 0.0]);
        let exact = kl_diag_gaussian(&lg);
        let n = 1_000_000;
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        let mut acc = 0.0;
        for _ in 0..n {
            let noise: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let z = reparameterize(&lg, &noise);
            // log q(z|x) - log p(z), the 2*pi terms cancel
            let mut diff = 0.0;
            for i in 0..3 {
                let centered = z[i] - lg.mu[i];
                let log_q = -0.5 * (lg.log_var[i] + centered * centered / lg.log_var[i].exp());
                let log_p = -0.5 * z[i] * z[i];
                diff += log_q - log_p;
            }
            acc += diff / n as f64;
        }
        assert!(
            (acc - exact).abs() < 0.01 * exact,
            "MC {acc} vs exact {exact}"
        );
    }

    #[test]
    fn perfect_autoencoder_has_zero_loss() {
        let mut vae = toy_vae(1);
        vae.params_mut().fill(0.0);
        let x = vec![0.0; 16];
        let mut grads = vec![0.0; vae.n_params()];
        let loss = elbo_loss_and_grads(&vae, &x, &seeded_noise(4, 8), &mut grads).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        for seed in [11, 12, 13] {
            let vae = toy_vae(seed);
            let x = seeded_vec(16, seed + 100, 0.8);
            let noise = seeded_noise(4, seed + 200);
            let report = grad_check(&vae, &x, &noise, 1e-4).unwrap();
            assert!(
                report.max_rel_err <= 1e-4,
                "seed {seed}: rel err {}",
                report.max_rel_err
            );
            assert!(report.checked > report.skipped);
        }
    }

    #[test]
    fn linear_decoder_gradient_is_machine_precise() {
        // no hidden layers anywhere: the loss is smooth in every parameter
        let vae = MlpVae::new(6, &[], 3, OutputActivation::Linear, 7).unwrap();
        let x = seeded_vec(6, 70, 0.5);
        let noise = seeded_noise(3, 71);
        let report = grad_check(&vae, &x, &noise, 1e-4).unwrap();
        assert_eq!(report.skipped, 0);
        assert!(report.max_rel_err <= 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn kink_straddling_parameters_are_skipped() {
        // zero weights put every hidden preactivation exactly on the kink:
        // each hidden bias straddles it (4 + 4), and with x = 0 but z = noise
        // nonzero so do the 4x2 decoder hidden weights
        let mut vae = MlpVae::new(4, &[4], 2, OutputActivation::Linear, 0).unwrap();
        vae.params_mut().fill(0.0);
        let report = grad_check(&vae, &[0.0; 4], &[0.3, -0.7], 1e-4).unwrap();
        assert_eq!(report.skipped, 16);
        assert_eq!(report.checked, vae.n_params() - 16);
    }

    #[test]
    fn sigmoid_decoder_gradient_checks_out() {
        let vae = MlpVae::new(9, &[6], 3, OutputActivation::Sigmoid, 21).unwrap();
        let x: Vec<f64> = seeded_vec(9, 210, 0.5).iter().map(|v| 0.5 + v).collect();
        let noise = seeded_noise(3, 211);
        let report = grad_check(&vae, &x, &noise, 1e-4).unwrap();
        assert!(report.max_rel_err <= 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn adam_zero_gradient_leaves_fresh_params_unchanged() {
        let mut params = vec![0.4, -1.2, 3.0];
        let mut st = AdamState::new(3);
        adam_step(&mut st, &mut params, &[0.0; 3]).unwrap();
        assert_eq!(params, vec![0.4, -1.2, 3.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut params = vec![0.0; 3];
        let mut st = AdamState::new(3);
        adam_step(&mut st, &mut params, &[0.3, -2.0, 1e-3]).unwrap();
        for (p, g) in params.iter().zip([0.3_f64, -2.0, 1e-3]) {
            // exact step-1 magnitude is lr * |g| / (|g| + eps)
            assert!(
                (p + st.lr * g.signum()).abs() < st.lr * 1e-4,
                "step {p} for grad {g}"
            );
        }
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut st = AdamState::new(3);
        assert!(matches!(
            adam_step(&mut st, &mut [0.0; 2], &[0.0; 2]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn adam_minimizes_scalar_quadratic() {
        // lr 1e-3 cannot cover the unit distance in 500 steps (Adam moves at
        // most about lr per step), so the oracle uses the lr field at 0.01
        let mut w = vec![1.0];
        let mut st = AdamState::with_lr(1, 0.01);
        for _ in 0..500 {
            let g = [2.0 * w[0]];
            adam_step(&mut st, &mut w, &g).unwrap();
        }
        assert!(w[0].abs() < 0.1, "w after 500 steps: {}", w[0]);
    }

    #[test]
    fn loss_decreases_over_first_ten_adam_steps() {
        let mut vae = toy_vae(31);
        let x = seeded_vec(16, 310, 0.6);
        let noise = seeded_noise(4, 311);
        let mut st = AdamState::new(vae.n_params());
        let mut last = f64::INFINITY;
        for step in 0..10 {
            let mut grads = vec![0.0; vae.n_params()];
            let loss = elbo_loss_and_grads(&vae, &x, &noise, &mut grads).unwrap();
            assert!(loss < last, "step {step}: loss {loss} >= {last}");
            last = loss;
            let params = vae.params_mut();
            adam_step(&mut st, params, &grads).unwrap();
        }
    }

    #[test]
    fn init_is_seeded_and_biases_start_at_zero() {
        let a = toy_vae(17);
        let b = toy_vae(17);
        let c = toy_vae(18);
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        // first bias block sits right after the first weight block
        assert_eq!(&a.params()[16 * 8..16 * 8 + 8], &[0.0; 8]);
    }

    #[test]
    fn avwr_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vae.avwr");
        let vae = toy_vae(9);
        let mut meta = VaeMetadata::describe(&vae, 2, 9);
        meta.epoch = 3;
        meta.log_s = Some(-0.25);
        save_vae(&path, &vae, &meta).unwrap();

        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"AVWR");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let json: serde_json::Value = serde_json::from_slice(&bytes[12..12 + meta_len]).unwrap();
        assert_eq!(json["d"], 4);
        assert_eq!(json["m"], 2);
        assert_eq!(json["output"], "linear");
        assert_eq!(bytes.len(), 12 + meta_len + 4 * vae.n_params());

        let (loaded, loaded_meta) = load_vae(&path).unwrap();
        assert_eq!(loaded_meta, meta);
        assert_eq!(loaded.enc_dims(), vae.enc_dims());
        for (a, b) in loaded.params().iter().zip(vae.params()) {
            assert!((a - b).abs() <= 1e-7 * (1.0 + b.abs()));
        }

        // identical nets serialize byte-identically
        let path2 = dir.path().join("vae2.avwr");
        save_vae(&path2, &toy_vae(9), &{
            let mut m = VaeMetadata::describe(&toy_vae(9), 2, 9);
            m.epoch = 3;
            m.log_s = Some(-0.25);
            m
        })
        .unwrap();
        assert_eq!(fs::read(&path2).unwrap(), bytes);
    }

    #[test]
    fn avwr_rejects_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.avwr");
        fs::write(&path, b"AVWR\x01\x00\x00\x00").unwrap();
        assert!(load_vae(&path).is_err());
        fs::write(&path, b"WHAT").unwrap();
        assert!(matches!(
            load_vae(&path),
            Err(Error::Format { format: "AVWR", .. })
        ));
        let vae = toy_vae(0);
        save_vae(&path, &vae, &VaeMetadata::describe(&vae, 0, 0)).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 1);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_vae(&path),
            Err(Error::Format { format: "AVWR", .. })
        ));
    }

    #[test]
    fn metadata_must_describe_the_vae() {
        let dir = tempfile::tempdir().unwrap();
        let vae = toy_vae(0);
        let other = MlpVae::new(8, &[4], 2, OutputActivation::Linear, 0).unwrap();
        let meta = VaeMetadata::describe(&other, 0, 0);
        assert!(matches!(
            save_vae(&dir.path().join("x.avwr"), &vae, &meta),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn vae_constructor_rejects_zero_widths() {
        assert!(MlpVae::new(0, &[4], 2, OutputActivation::Linear, 0).is_err());
        assert!(MlpVae::new(8, &[0], 2, OutputActivation::Linear, 0).is_err());
        assert!(MlpVae::new(8, &[4], 0, OutputActivation::Linear, 0).is_err());
    }
}