//! Whitened principal-component codec: the linear baseline against which the
//! VAE round-trips are scored.
//!
//! Fitting eigendecomposes the population (`1/n`) covariance of the training
//! set, keeps the leading `z_d` eigenpairs with a deterministic sign
//! convention, and divides each projection row by `sqrt(lambda)` so the
//! encoded training set has identity covariance — the same prior covariance
//! the VAE latent spaces are pulled toward. Decoding goes through the
//! Moore-Penrose pseudo-inverse of the whitened projection, which for an
//! orthonormal basis is simply the transpose rescaled by `sqrt(lambda)`.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::mat::Mat;

/// Eigenvalues at or below `RANK_EPS_REL * lambda_max` are treated as
/// numerical zeros; the codec shrinks to the remaining rank.
const RANK_EPS_REL: f64 = 1e-12;

const AVPC_MAGIC: &[u8; 4] = b"AVPC";
const AVPC_VERSION: u32 = 1;

/// Immutable whitened-PCA encoder/decoder pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaCodec {
    mean: Vec<f64>,
    /// Whitened projection, `z_d x d` row-major.
    w: Mat,
    /// Pseudo-inverse decode map, `d x z_d` row-major.
    w_dagger: Mat,
    /// Kept covariance eigenvalues, strictly positive and descending.
    eigenvalues: Vec<f64>,
}

impl PcaCodec {
    /// Input (data) dimension `D`.
    pub fn dim_input(&self) -> usize {
        self.mean.len()
    }

    /// Latent dimension `Z_D` actually kept (may be smaller than requested
    /// if the training data was rank-deficient).
    pub fn dim_latent(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Covariance eigenvalues of the kept components, descending.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Fits the codec on `samples` (one row per observation).
    ///
    /// Requires more samples than latent dimensions and `z_d <= D`. When the
    /// covariance is rank-deficient the latent dimension shrinks to the
    /// numerical rank and a warning is logged.
    pub fn fit(samples: &Mat, z_d: usize) -> Result<Self> {
        let (n, d) = (samples.rows(), samples.cols());
        if z_d == 0 || z_d > d {
            return Err(Error::InvalidArgument(format!(
                "PCA latent dimension must be in 1..={d}, got {z_d}"
            )));
        }
        if n <= z_d {
            return Err(Error::InvalidArgument(format!(
                "PCA needs more samples than latent dimensions, got {n} samples for z_d = {z_d}"
            )));
        }
        if !samples.is_finite() {
            return Err(Error::InvalidArgument(
                "PCA training data contains non-finite values".into(),
            ));
        }

        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, &v) in mean.iter_mut().zip(samples.row(r)) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }

        let centered = DMatrix::from_fn(n, d, |r, c| samples.get(r, c) - mean[c]);
        let cov = centered.tr_mul(&centered) / n as f64;
        let eig = cov.symmetric_eigen();

        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let lambda_max = eig.eigenvalues[order[0]];
        if !(lambda_max > 0.0) {
            return Err(Error::InvalidArgument(
                "PCA training data has no variance".into(),
            ));
        }
        let rank = order
            .iter()
            .take_while(|&&i| eig.eigenvalues[i] > RANK_EPS_REL * lambda_max)
            .count();
        let kept = z_d.min(rank);
        if kept < z_d {
            log::warn!(
                "rank-deficient PCA training data: requested z_d = {z_d} shrunk to numerical rank {kept}"
            );
        }

        let mut w = Mat::zeros(kept, d);
        let mut w_dagger = Mat::zeros(d, kept);
        let mut eigenvalues = Vec::with_capacity(kept);
        for (row, &idx) in order[..kept].iter().enumerate() {
            let col = eig.eigenvectors.column(idx);
            // deterministic sign: the largest-magnitude entry ends up positive
            let pivot = (0..d)
                .max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs()))
                .expect("d > 0");
            let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
            let lambda = eig.eigenvalues[idx];
            let sqrt_l = lambda.sqrt();
            for j in 0..d {
                let v = sign * col[j];
                w.set(row, j, v / sqrt_l);
                w_dagger.set(j, row, v * sqrt_l);
            }
            eigenvalues.push(lambda);
        }

        Ok(Self {
            mean,
            w,
            w_dagger,
            eigenvalues,
        })
    }

    /// Whitened projection `z = W (u - mean)`.
    pub fn encode(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.dim_input() {
            return Err(Error::Dimension {
                expected: self.dim_input(),
                got: u.len(),
                context: "PCA encode input",
            });
        }
        let centered: Vec<f64> = u.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok(self.w.matvec(&centered))
    }

    /// Pseudo-inverse reconstruction `u = W_dagger z + mean`.
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim_latent() {
            return Err(Error::Dimension {
                expected: self.dim_latent(),
                got: z.len(),
                context: "PCA decode input",
            });
        }
        let mut u = self.w_dagger.matvec(z);
        for (ui, m) in u.iter_mut().zip(&self.mean) {
            *ui += m;
        }
        Ok(u)
    }

    /// Writes the codec in the AVPC checkpoint format: magic `AVPC`,
    /// u32 version, u32 D, u32 Z_D, then mean, W, W_dagger and eigenvalues
    /// as little-endian f32.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (d, z) = (self.dim_input(), self.dim_latent());
        let floats = d + 2 * z * d + z;
        let mut buf = Vec::with_capacity(16 + 4 * floats);
        buf.extend_from_slice(AVPC_MAGIC);
        buf.extend_from_slice(&AVPC_VERSION.to_le_bytes());
        buf.extend_from_slice(&(d as u32).to_le_bytes());
        buf.extend_from_slice(&(z as u32).to_le_bytes());
        for v in self
            .mean
            .iter()
            .chain(self.w.data())
            .chain(self.w_dagger.data())
            .chain(&self.eigenvalues)
        {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        fs::write(path, buf)?;
        Ok(())
    }

    /// Reads a codec written by [`PcaCodec::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let bad = |reason: String| Error::Format {
            format: "AVPC",
            reason,
        };
        if bytes.len() < 16 || &bytes[..4] != AVPC_MAGIC {
            return Err(bad("missing AVPC magic".into()));
        }
        let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != AVPC_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let d = u32_at(8) as usize;
        let z = u32_at(12) as usize;
        if z == 0 || z > d {
            return Err(bad(format!("invalid dimensions D = {d}, Z_D = {z}")));
        }
        let floats = d + 2 * z * d + z;
        if bytes.len() != 16 + 4 * floats {
            return Err(bad(format!(
                "expected {} bytes of tensor data, got {}",
                4 * floats,
                bytes.len() - 16
            )));
        }
        let mut vals = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
        let mut take = |count: usize| -> Vec<f64> { vals.by_ref().take(count).collect() };
        let mean = take(d);
        let w = Mat::from_vec(z, d, take(z * d))?;
        let w_dagger = Mat::from_vec(d, z, take(d * z))?;
        let eigenvalues = take(z);
        if eigenvalues.iter().any(|&l| !(l > 0.0)) {
            return Err(bad("eigenvalues must be strictly positive".into()));
        }
        Ok(Self {
            mean,
            w,
            w_dagger,
            eigenvalues,
        })
    }
}
