//! Evaluation metrics: mel-domain SNR, latent-trajectory velocity and
//! acceleration by finite differences, and a classical (Torgerson) MDS
//! embedding for smoothness visualization.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;

/// Reported SNR for numerically exact reconstructions.
pub const SNR_CAP_DB: f64 = 300.0;

/// A latent trajectory sampled at a fixed stride; metrics use a 1-mel-frame
/// stride (`dt` = 0.010 s), finer than the 4-frame video hop.
#[derive(Debug, Clone)]
pub struct LatentTrajectory {
    /// One row per time step.
    pub points: Mat,
    /// Seconds between consecutive rows.
    pub dt: f64,
}

impl LatentTrajectory {
    pub fn new(points: Mat, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "trajectory stride must be positive, got {dt}"
            )));
        }
        Ok(Self { points, dt })
    }
}

/// `10 log10(sum ref^2 / sum (ref - est)^2)` over flat sample buffers,
/// capped at [`SNR_CAP_DB`] when the residual is below `1e-12` of the
/// reference energy.
pub fn snr_db_flat(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::Dimension {
            expected: reference.len(),
            got: estimate.len(),
            context: "SNR estimate shape",
        });
    }
    let num: f64 = reference.iter().map(|&r| r * r).sum();
    if num == 0.0 {
        return Err(Error::InvalidArgument(
            "SNR reference is all zero".into(),
        ));
    }
    let den: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(&r, &e)| (r - e) * (r - e))
        .sum();
    if den < 1e-12 * num {
        return Ok(SNR_CAP_DB);
    }
    Ok(10.0 * (num / den).log10())
}

/// [`snr_db_flat`] over matrices of identical shape.
pub fn snr_db(reference: &Mat, estimate: &Mat) -> Result<f64> {
    if reference.rows() != estimate.rows() || reference.cols() != estimate.cols() {
        return Err(Error::Dimension {
            expected: reference.rows() * reference.cols(),
            got: estimate.rows() * estimate.cols(),
            context: "SNR estimate shape",
        });
    }
    snr_db_flat(reference.data(), estimate.data())
}

/// Mean finite-difference speed `mean_t ||z_{t+1} - z_t|| / dt`, 1/s.
pub fn velocity(traj: &LatentTrajectory) -> Result<f64> {
    let t = traj.points.rows();
    if t < 2 {
        return Err(Error::InvalidArgument(format!(
            "velocity needs at least 2 trajectory points, got {t}"
        )));
    }
    let sum: f64 = (0..t - 1)
        .map(|i| step_norm(&traj.points, i + 1, i))
        .sum();
    Ok(sum / ((t - 1) as f64 * traj.dt))
}

/// Mean second-difference magnitude `mean_t ||z_{t+1} - 2 z_t + z_{t-1}|| / dt^2`, 1/s^2.
pub fn acceleration(traj: &LatentTrajectory) -> Result<f64> {
    let t = traj.points.rows();
    if t < 3 {
        return Err(Error::InvalidArgument(format!(
            "acceleration needs at least 3 trajectory points, got {t}"
        )));
    }
    let mut sum = 0.0;
    for i in 1..t - 1 {
        let (prev, cur, next) = (
            traj.points.row(i - 1),
            traj.points.row(i),
            traj.points.row(i + 1),
        );
        let sq: f64 = (0..traj.points.cols())
            .map(|c| {
                let d = next[c] - 2.0 * cur[c] + prev[c];
                d * d
            })
            .sum();
        sum += sq.sqrt();
    }
    Ok(sum / ((t - 2) as f64 * traj.dt * traj.dt))
}

fn step_norm(points: &Mat, a: usize, b: usize) -> f64 {
    let (ra, rb) = (points.row(a), points.row(b));
    ra.iter()
        .zip(rb)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Polyline length of a point sequence (one row per vertex).
pub fn path_length(points: &Mat) -> f64 {
    (1..points.rows()).map(|i| step_norm(points, i, i - 1)).sum()
}

/// Classical MDS output.
#[derive(Debug, Clone)]
pub struct MdsEmbedding {
    /// `N x k` coordinates.
    pub coords: Mat,
    /// True when every input point coincided; the coordinates are all zero.
    pub degenerate: bool,
}

/// Classical (Torgerson) MDS: double-centers the squared-distance matrix
/// (`B = -1/2 J D^2 J`) and scales the top-`k` eigenvectors by the square
/// roots of their eigenvalues. Negative eigenvalues are truncated to zero.
pub fn mds_embed(points: &Mat, k: usize) -> Result<MdsEmbedding> {
    let n = points.rows();
    if k == 0 || n < k + 1 {
        return Err(Error::InvalidArgument(format!(
            "MDS needs at least k + 1 = {} points, got {n}",
            k + 1
        )));
    }
    let mut d2 = DMatrix::zeros(n, n);
    let mut max_d2 = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            let s = step_norm(points, i, j).powi(2);
            d2[(i, j)] = s;
            d2[(j, i)] = s;
            max_d2 = max_d2.max(s);
        }
    }
    if max_d2 == 0.0 {
        log::warn!("MDS input is degenerate (all points identical); returning zeros");
        return Ok(MdsEmbedding {
            coords: Mat::zeros(n, k),
            degenerate: true,
        });
    }
    // double centering: B = -1/2 * J * D^2 * J with J = I - (1/n) 1 1^T
    let row_mean: Vec<f64> = (0..n).map(|i| d2.row(i).sum() / n as f64).collect();
    let grand = row_mean.iter().sum::<f64>() / n as f64;
    let b = DMatrix::from_fn(n, n, |i, j| {
        -0.5 * (d2[(i, j)] - row_mean[i] - row_mean[j] + grand)
    });
    let eig = b.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut coords = Mat::zeros(n, k);
    for (c, &idx) in order[..k].iter().enumerate() {
        let lambda = eig.eigenvalues[idx].max(0.0);
        let col = eig.eigenvectors.column(idx);
        // deterministic sign: largest-magnitude entry positive
        let pivot = (0..n)
            .max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs()))
            .expect("n > 0");
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        let scale = sign * lambda.sqrt();
        for r in 0..n {
            coords.set(r, c, scale * col[r]);
        }
    }
    Ok(MdsEmbedding {
        coords,
        degenerate: false,
    })
}

/// Per-model, per-split metrics bundle serialized into reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub snr_db: f64,
    pub velocity: f64,
    pub acceleration: f64,
    pub mds_path_length: f64,
}

/// Writes MDS coordinates as CSV with an `x,y,z` header; requires k = 3.
pub fn write_mds_csv(path: &Path, coords: &Mat) -> Result<()> {
    if coords.cols() != 3 {
        return Err(Error::Dimension {
            expected: 3,
            got: coords.cols(),
            context: "MDS CSV coordinate columns",
        });
    }
    let mut out = String::from("x,y,z\n");
    for r in 0..coords.rows() {
        let row = coords.row(r);
        out.push_str(&format!("{},{},{}\n", row[0], row[1], row[2]));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}
