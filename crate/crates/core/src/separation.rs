//! Source separation for sampled curves: centred PCA with automatic choice of
//! dimension, followed by a cumulant-based ICA rotation within the principal subspace.
//!
//! The ICA step sweeps Jacobi rotations over all component pairs. For a pair,
//! the sum of squared third- and fourth-order auto-cumulants of the two rotated
//! series is a trigonometric polynomial in `4 * angle` of degree two; its five
//! coefficients are recovered exactly from eight evaluations and the maximiser
//! is polished with Newton steps.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::sim::BasisSet;

/// Eigenvalues below this fraction of the largest are treated as exact zeros.
const SPECTRUM_FLOOR: f64 = 1e-15;
/// Sweeps stop once every rotation angle in a sweep is below this (radians).
const ANGLE_TOLERANCE: f64 = 1e-8;
const MAX_SWEEPS: usize = 200;
/// 0.999 quantile of chi-squared with 2 degrees of freedom. A component whose
/// cumulant statistic `n (k3^2 / 6 + k4^2 / 24)` falls below it is
/// indistinguishable from Gaussian.
const GAUSSIAN_CUMULANT_THRESHOLD: f64 = 13.815_510_557_964_274;

#[derive(Debug, Error)]
pub enum SeparationError {
    #[error("need at least 3 curves, got {0}")]
    TooFewCurves(usize),
    #[error("curves have zero total variance")]
    ConstantData,
    #[error("need more curves ({n}) than components ({k})")]
    TooManyComponents { n: usize, k: usize },
    #[error("ICA did not converge after {sweeps} sweeps (last max angle {max_angle:e})")]
    NotConverged {
        sweeps: usize,
        max_angle: f64,
        /// Best rotation found so far (applied to the whitened samples).
        rotation: DMatrix<f64>,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DimMethod {
    /// Laplace approximation to the probabilistic-PCA evidence.
    #[default]
    Laplace,
    /// Largest gap between consecutive log-eigenvalues.
    Gap,
}

#[derive(Clone, Debug)]
pub struct PcaResult {
    pub mean_curve: DVector<f64>,
    /// Orthonormal principal directions as rows, at most `n - 1` of them.
    pub components: DMatrix<f64>,
    /// Sample covariance eigenvalues, non-increasing.
    pub eigenvalues: Vec<f64>,
    pub estimated_k: usize,
    pub method: DimMethod,
}

/// Centred PCA of `curves` (one curve per row) with the dimension chosen by
/// `method`.
pub fn run_pca(curves: &DMatrix<f64>, method: DimMethod) -> Result<PcaResult, SeparationError> {
    let n = curves.nrows();
    if n < 3 {
        return Err(SeparationError::TooFewCurves(n));
    }
    let mean_curve: DVector<f64> = curves.row_mean().transpose();
    let centred = center(curves, &mean_curve);
    if centred.norm() == 0.0 {
        return Err(SeparationError::ConstantData);
    }
    // SVD of the data matrix itself keeps tail eigenvalues at working
    // precision instead of squaring the rounding error of a Gram matrix.
    let svd = centred.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let eigenvalues: Vec<f64> = order
        .iter()
        .map(|&i| svd.singular_values[i].powi(2) / (n - 1) as f64)
        .collect();
    let k_max = eigenvalues.len().min(n - 1);
    let mut components = DMatrix::zeros(k_max, curves.ncols());
    for (r, &i) in order.iter().take(k_max).enumerate() {
        components.set_row(r, &v_t.row(i));
    }
    let estimated_k = match method {
        DimMethod::Laplace => laplace_dimension(&eigenvalues, n, curves.ncols()),
        DimMethod::Gap => gap_dimension(&eigenvalues),
    }
    .min(k_max)
    .max(1);
    Ok(PcaResult {
        mean_curve,
        components,
        eigenvalues,
        estimated_k,
        method,
    })
}

fn peak_index<'a>(values: impl Iterator<Item = &'a f64>) -> usize {
    values
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v.abs() > best.1 { (i, v.abs()) } else { best })
        .0
}

fn center(curves: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut c = curves.clone();
    for mut row in c.row_iter_mut() {
        row -= mean.transpose();
    }
    c
}

fn floored(spectrum: &[f64]) -> Vec<f64> {
    let floor = spectrum.first().copied().unwrap_or(0.0) * SPECTRUM_FLOOR;
    spectrum
        .iter()
        .map(|&v| if v < floor { 0.0 } else { v })
        .collect()
}

/// Log evidence of a rank-`rank` probabilistic PCA model under the Laplace
/// approximation.
///
/// `spectrum` holds the leading sample covariance eigenvalues (non-increasing)
/// and `dim` the ambient dimension; eigenvalues past the end of `spectrum` are
/// zero, which is the situation whenever there are fewer curves than grid
/// points. Ranks whose retained eigenvalues tie with a later one have a
/// singular Hessian and score `-inf`.
pub fn laplace_log_evidence(spectrum: &[f64], rank: usize, n_samples: usize, dim: usize) -> f64 {
    assert!(spectrum.len() <= dim, "spectrum longer than the ambient dimension");
    assert!(rank >= 1 && rank < dim, "rank must lie in 1..{dim}");
    let spectrum = floored(spectrum);
    let eps = spectrum[0] * SPECTRUM_FLOOR;
    let at = |j: usize| spectrum.get(j).copied().unwrap_or(0.0);
    if rank > spectrum.len() || at(rank - 1) <= eps {
        return f64::NEG_INFINITY;
    }
    let n = n_samples as f64;
    let (df, kf) = (dim as f64, rank as f64);
    let mut pu = -kf * 2f64.ln();
    for i in 1..=rank {
        let a = (df - i as f64 + 1.0) / 2.0;
        pu += ln_gamma(a) - PI.ln() * a;
    }
    let pl = -spectrum[..rank].iter().map(|v| v.ln()).sum::<f64>() * n / 2.0;
    let v = (spectrum[rank..].iter().sum::<f64>() / (df - kf)).max(eps);
    let pv = -v.ln() * n * (df - kf) / 2.0;
    let m = df * kf - kf * (kf + 1.0) / 2.0;
    let pp = (2.0 * PI).ln() * (m + kf) / 2.0;
    let mut pa = 0.0;
    for i in 0..rank {
        let li = spectrum[i];
        let term = |lj: f64, sj: f64| ((li - lj) * (1.0 / sj - 1.0 / li)).ln() + n.ln();
        for j in (i + 1)..spectrum.len() {
            let sj = if j < rank { spectrum[j] } else { v };
            pa += term(spectrum[j], sj);
        }
        // implicit zero eigenvalues all contribute the same term
        let zeros = dim - spectrum.len().max(i + 1);
        if zeros > 0 {
            pa += zeros as f64 * term(0.0, v);
        }
    }
    if pa.is_nan() || pa == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    pu + pl + pv + pp - pa / 2.0 - kf * n.ln() / 2.0
}

fn laplace_dimension(spectrum: &[f64], n_samples: usize, dim: usize) -> usize {
    let mut best = (1, f64::NEG_INFINITY);
    for rank in 1..spectrum.len().min(dim) {
        let ll = laplace_log_evidence(spectrum, rank, n_samples, dim);
        if ll > best.1 {
            best = (rank, ll);
        }
    }
    best.0
}

/// Position of the largest drop between consecutive log-eigenvalues.
fn gap_dimension(spectrum: &[f64]) -> usize {
    let s = floored(spectrum);
    let floor = (s[0] * SPECTRUM_FLOOR).max(f64::MIN_POSITIVE);
    let logs: Vec<f64> = s.iter().map(|&v| v.max(floor).ln()).collect();
    let mut best = (1, f64::NEG_INFINITY);
    for k in 1..logs.len() {
        let gap = logs[k - 1] - logs[k];
        if gap > best.1 {
            best = (k, gap);
        }
    }
    best.0
}

#[derive(Clone, Debug, Serialize)]
pub struct IcaDiagnostics {
    pub orientation: IcaOrientation,
    pub sweeps: usize,
    /// Sum of squared third- and fourth-order cumulants after each sweep
    /// (first entry: before any rotation).
    pub objective_trace: Vec<f64>,
    /// `n (k3^2 / 6 + k4^2 / 24)` per recovered component.
    pub cumulant_statistics: Vec<f64>,
    /// Components whose statistic is compatible with a Gaussian series.
    pub weak_components: Vec<usize>,
    /// False when two or more components look Gaussian, in which case the
    /// rotation among them is arbitrary.
    pub rotation_identifiable: bool,
    pub reconstruction_rel_error: f64,
    pub unmixing_condition: f64,
}

#[derive(Clone, Debug)]
pub struct IcaResult {
    /// Gauge-fixed basis estimate: unit-norm rows, positive at the
    /// largest-magnitude grid point.
    pub estimated_basis: DMatrix<f64>,
    /// `n x k` weights; `tip_weights * estimated_basis + mean` reconstructs
    /// the curves.
    pub tip_weights: DMatrix<f64>,
    /// Maps centred principal-component scores to `tip_weights`.
    pub unmixing: DMatrix<f64>,
    pub mean_curve: DVector<f64>,
    pub diagnostics: IcaDiagnostics,
}

impl IcaResult {
    pub fn basis_set(&self, grid: Vec<f64>) -> BasisSet {
        BasisSet {
            curves: self.estimated_basis.clone(),
            grid,
        }
    }

    pub fn k(&self) -> usize {
        self.estimated_basis.nrows()
    }
}

struct PairMoments {
    third: [f64; 4],
    fourth: [f64; 5],
}

fn pair_moments(x: &[f64], y: &[f64]) -> PairMoments {
    let n = x.len() as f64;
    let mut s = [0.0f64; 12];
    for (&a, &b) in x.iter().zip(y) {
        let (a2, b2) = (a * a, b * b);
        s[0] += a2;
        s[1] += a * b;
        s[2] += b2;
        s[3] += a2 * a;
        s[4] += a2 * b;
        s[5] += a * b2;
        s[6] += b2 * b;
        s[7] += a2 * a2;
        s[8] += a2 * a * b;
        s[9] += a2 * b2;
        s[10] += a * b2 * b;
        s[11] += b2 * b2;
    }
    for v in &mut s {
        *v /= n;
    }
    let (xx, xy, yy) = (s[0], s[1], s[2]);
    PairMoments {
        third: [s[3], s[4], s[5], s[6]],
        fourth: [
            s[7] - 3.0 * xx * xx,
            s[8] - 3.0 * xx * xy,
            s[9] - xx * yy - 2.0 * xy * xy,
            s[10] - 3.0 * yy * xy,
            s[11] - 3.0 * yy * yy,
        ],
    }
}

impl PairMoments {
    /// Third and fourth cumulants of `c x + s y`.
    fn rotated(&self, c: f64, s: f64) -> (f64, f64) {
        let t = &self.third;
        let q = &self.fourth;
        let k3 = c * c * c * t[0] + 3.0 * c * c * s * t[1] + 3.0 * c * s * s * t[2] + s * s * s * t[3];
        let k4 = c.powi(4) * q[0]
            + 4.0 * c.powi(3) * s * q[1]
            + 6.0 * c * c * s * s * q[2]
            + 4.0 * c * s.powi(3) * q[3]
            + s.powi(4) * q[4];
        (k3, k4)
    }

    fn objective(&self, angle: f64) -> f64 {
        let (c, s) = (angle.cos(), angle.sin());
        let (a3, a4) = self.rotated(c, s);
        let (b3, b4) = self.rotated(-s, c);
        a3 * a3 + a4 * a4 + b3 * b3 + b4 * b4
    }

    /// Angle in `[-pi/4, pi/4]` maximising the pair objective.
    fn best_angle(&self) -> f64 {
        // objective(angle) = a0 + a1 cos t + b1 sin t + a2 cos 2t + b2 sin 2t, t = 4 angle
        let samples: Vec<f64> = (0..8).map(|j| self.objective(PI * j as f64 / 16.0)).collect();
        let (mut a1, mut b1, mut a2, mut b2) = (0.0, 0.0, 0.0, 0.0);
        for (j, f) in samples.iter().enumerate() {
            let t = 2.0 * PI * j as f64 / 8.0;
            a1 += f * t.cos();
            b1 += f * t.sin();
            a2 += f * (2.0 * t).cos();
            b2 += f * (2.0 * t).sin();
        }
        let (a1, b1, a2, b2) = (a1 / 4.0, b1 / 4.0, a2 / 4.0, b2 / 4.0);
        let g = |t: f64| a1 * t.cos() + b1 * t.sin() + a2 * (2.0 * t).cos() + b2 * (2.0 * t).sin();
        let dg = |t: f64| {
            -a1 * t.sin() + b1 * t.cos() - 2.0 * a2 * (2.0 * t).sin() + 2.0 * b2 * (2.0 * t).cos()
        };
        let d2g = |t: f64| {
            -a1 * t.cos() - b1 * t.sin() - 4.0 * a2 * (2.0 * t).cos() - 4.0 * b2 * (2.0 * t).sin()
        };
        const GRID: usize = 64;
        let step = 2.0 * PI / GRID as f64;
        // grid centred on zero so that an already-optimal pair returns exactly 0
        let mut best_t = 0.0;
        let mut best_g = g(0.0);
        for j in 1..GRID {
            let t = -PI + step * j as f64;
            let v = g(t);
            if v > best_g {
                best_g = v;
                best_t = t;
            }
        }
        let mut t = best_t;
        for _ in 0..60 {
            let h = d2g(t);
            if !(h < 0.0) {
                break;
            }
            let delta = (dg(t) / h).clamp(-step, step);
            let next = t - delta;
            if (next - best_t).abs() > step || g(next) < g(t) - 1e-15 * (1.0 + g(t).abs()) {
                break;
            }
            t = next;
            if delta.abs() < 1e-15 {
                break;
            }
        }
        if t > PI {
            t -= 2.0 * PI;
        } else if t < -PI {
            t += 2.0 * PI;
        }
        t / 4.0
    }
}

fn cumulants(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m2 = x.iter().map(|v| v * v).sum::<f64>() / n;
    let m3 = x.iter().map(|v| v * v * v).sum::<f64>() / n;
    let m4 = x.iter().map(|v| v.powi(4)).sum::<f64>() / n;
    (m3, m4 - 3.0 * m2 * m2)
}

fn contrast(z: &DMatrix<f64>) -> f64 {
    z.column_iter()
        .map(|c| {
            let (k3, k4) = cumulants(c.as_slice());
            k3 * k3 + k4 * k4
        })
        .sum()
}

/// Orthogonal rotation `R` (so that `z R` has maximally non-Gaussian columns)
/// by Jacobi sweeps. Returns the rotation, sweep count, and objective trace.
fn jacobi_rotation(
    z: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, usize, Vec<f64>), SeparationError> {
    let k = z.ncols();
    let mut y = z.clone();
    let mut rotation = DMatrix::identity(k, k);
    let mut trace = vec![contrast(&y)];
    for sweep in 1..=MAX_SWEEPS {
        let mut max_angle = 0.0f64;
        for p in 0..k {
            for q in (p + 1)..k {
                let moments = pair_moments(y.column(p).as_slice(), y.column(q).as_slice());
                let angle = moments.best_angle();
                max_angle = max_angle.max(angle.abs());
                if angle == 0.0 {
                    continue;
                }
                let (c, s) = (angle.cos(), angle.sin());
                for m in [&mut y, &mut rotation] {
                    for r in 0..m.nrows() {
                        let (a, b) = (m[(r, p)], m[(r, q)]);
                        m[(r, p)] = c * a + s * b;
                        m[(r, q)] = -s * a + c * b;
                    }
                }
            }
        }
        trace.push(contrast(&y));
        if max_angle < ANGLE_TOLERANCE {
            return Ok((rotation, sweep, trace));
        }
        if sweep == MAX_SWEEPS {
            return Err(SeparationError::NotConverged {
                sweeps: sweep,
                max_angle,
                rotation,
            });
        }
    }
    unreachable!()
}

/// Which samples the ICA rotation treats as draws of the sources.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IcaOrientation {
    /// The recovered basis curves are the independent sources, sampled over
    /// the grid; the rotation acts on the whitened principal directions.
    #[default]
    Curves,
    /// The recovered weights are the independent sources, sampled over
    /// curves; the rotation acts on the whitened principal scores.
    Weights,
}

/// Symmetric inverse square root of a positive definite matrix.
fn inverse_sqrt(c: &DMatrix<f64>) -> Result<DMatrix<f64>, SeparationError> {
    let eig = nalgebra::SymmetricEigen::new(c.clone());
    if eig.eigenvalues.iter().any(|&v| !(v > 0.0)) {
        return Err(SeparationError::ConstantData);
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Rotates the top-`estimated_k` principal subspace to maximise the sum of
/// squared third and fourth cumulants of the sources, then fixes the gauge of
/// every recovered basis row. With a single component the PCA solution is
/// returned.
pub fn run_ica(
    pca: &PcaResult,
    curves: &DMatrix<f64>,
    orientation: IcaOrientation,
) -> Result<IcaResult, SeparationError> {
    let k = pca.estimated_k;
    let n = curves.nrows();
    let m = curves.ncols();
    if m != pca.mean_curve.len() {
        return Err(SeparationError::Dimension(format!(
            "curves have {} grid points, PCA used {}",
            m,
            pca.mean_curve.len()
        )));
    }
    if k < 1 || n <= k || k > pca.components.nrows() {
        return Err(SeparationError::TooManyComponents { n, k });
    }
    let centred = center(curves, &pca.mean_curve);
    let axes = pca.components.rows(0, k).into_owned();
    let scores = &centred * axes.transpose();

    // whitened samples as columns of z, with z = samples * whitener
    let (z, whitener, whitener_inv) = match orientation {
        IcaOrientation::Weights => {
            let cov = scores.transpose() * &scores / n as f64;
            let w = inverse_sqrt(&cov)?;
            let w_inv = w.clone().try_inverse().ok_or(SeparationError::ConstantData)?;
            (&scores * &w, w, w_inv)
        }
        IcaOrientation::Curves => {
            let mut lc = axes.clone();
            for mut row in lc.row_iter_mut() {
                let mean = row.mean();
                row.add_scalar_mut(-mean);
            }
            let cov = &lc * lc.transpose() / m as f64;
            let w = inverse_sqrt(&cov)?;
            let w_inv = w.clone().try_inverse().ok_or(SeparationError::ConstantData)?;
            (lc.transpose() * &w, w, w_inv)
        }
    };
    let (rotation, sweeps, objective_trace) = if k == 1 {
        (DMatrix::identity(1, 1), 0, vec![contrast(&z)])
    } else {
        jacobi_rotation(&z)?
    };
    let sources = &z * &rotation;
    // raw weights = scores * mixing, raw basis = mixing^-1 * axes
    let (mixing, mixing_inv) = match orientation {
        IcaOrientation::Weights => (&whitener * &rotation, rotation.transpose() * &whitener_inv),
        IcaOrientation::Curves => (&whitener_inv * &rotation, rotation.transpose() * &whitener),
    };
    let raw_weights = &scores * &mixing;
    let raw_basis = &mixing_inv * &axes;

    // order by decreasing contribution, then unit-norm rows positive at their peak
    let basis_norms: Vec<f64> = raw_basis.row_iter().map(|r| r.norm()).collect();
    let contribution: Vec<f64> = (0..k)
        .map(|i| basis_norms[i] * raw_weights.column(i).norm())
        .collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| contribution[b].total_cmp(&contribution[a]).then(a.cmp(&b)));
    let gauge: Vec<f64> = (0..k)
        .map(|i| {
            let row = raw_basis.row(i);
            basis_norms[i] * row[peak_index(row.iter())].signum()
        })
        .collect();
    let mut estimated_basis = DMatrix::zeros(k, m);
    let mut tip_weights = DMatrix::zeros(n, k);
    let mut unmixing = DMatrix::zeros(k, k);
    let mut ordered_sources = DMatrix::zeros(sources.nrows(), k);
    for (slot, &i) in order.iter().enumerate() {
        estimated_basis.set_row(slot, &(raw_basis.row(i) / gauge[i]));
        tip_weights.set_column(slot, &(raw_weights.column(i) * gauge[i]));
        unmixing.set_column(slot, &(mixing.column(i) * gauge[i]));
        ordered_sources.set_column(slot, &sources.column(i));
    }

    let recon = &tip_weights * &estimated_basis;
    let reconstruction_rel_error = (&recon - &centred).norm() / centred.norm();
    let sv = unmixing.clone().svd(false, false).singular_values;
    let unmixing_condition = sv.max() / sv.min();
    let samples = sources.nrows() as f64;
    let cumulant_statistics: Vec<f64> = ordered_sources
        .column_iter()
        .map(|c| {
            let (k3, k4) = cumulants(c.as_slice());
            samples * (k3 * k3 / 6.0 + k4 * k4 / 24.0)
        })
        .collect();
    let weak_components: Vec<usize> = cumulant_statistics
        .iter()
        .enumerate()
        .filter(|(_, &s)| s < GAUSSIAN_CUMULANT_THRESHOLD)
        .map(|(j, _)| j)
        .collect();
    let rotation_identifiable = k == 1 || weak_components.len() <= 1;
    Ok(IcaResult {
        estimated_basis,
        tip_weights,
        unmixing,
        mean_curve: pca.mean_curve.clone(),
        diagnostics: IcaDiagnostics {
            orientation,
            sweeps,
            objective_trace,
            cumulant_statistics,
            weak_components,
            rotation_identifiable,
            reconstruction_rel_error,
            unmixing_condition,
        },
    })
}

/// How estimated rows map onto reference rows: estimated row `i` matches
/// reference row `permutation[i]`, with `estimated_i ~ signs[i] * scales[i] * reference`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentReport {
    pub permutation: Vec<usize>,
    pub signs: Vec<f64>,
    pub scales: Vec<f64>,
    pub correlations: Vec<f64>,
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

/// Matches estimated rows to reference rows by absolute Pearson correlation:
/// exhaustively for `k <= 7`, greedily beyond.
pub fn align_components(
    estimated: &DMatrix<f64>,
    truth: &DMatrix<f64>,
) -> Result<AlignmentReport, SeparationError> {
    let k = estimated.nrows();
    if truth.nrows() != k || truth.ncols() != estimated.ncols() {
        return Err(SeparationError::Dimension(format!(
            "estimated is {}x{}, reference is {}x{}",
            k,
            estimated.ncols(),
            truth.nrows(),
            truth.ncols()
        )));
    }
    let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
        m.row_iter().map(|r| r.iter().copied().collect()).collect()
    };
    let (est, tru) = (rows(estimated), rows(truth));
    let corr: Vec<Vec<f64>> = est
        .iter()
        .map(|e| tru.iter().map(|t| pearson(e, t)).collect())
        .collect();
    let permutation = if k <= 7 {
        permutations(k)
            .into_iter()
            .map(|p| {
                let score: f64 = p.iter().enumerate().map(|(i, &j)| corr[i][j].abs()).sum();
                (score, p)
            })
            .fold((f64::NEG_INFINITY, Vec::new()), |best, cand| {
                if cand.0 > best.0 {
                    cand
                } else {
                    best
                }
            })
            .1
    } else {
        let mut pairs: Vec<(usize, usize)> =
            (0..k).flat_map(|i| (0..k).map(move |j| (i, j))).collect();
        pairs.sort_by(|a, b| corr[b.0][b.1].abs().total_cmp(&corr[a.0][a.1].abs()));
        let mut perm = vec![usize::MAX; k];
        let mut used = vec![false; k];
        for (i, j) in pairs {
            if perm[i] == usize::MAX && !used[j] {
                perm[i] = j;
                used[j] = true;
            }
        }
        perm
    };
    let mut signs = Vec::with_capacity(k);
    let mut scales = Vec::with_capacity(k);
    let mut correlations = Vec::with_capacity(k);
    for (i, &j) in permutation.iter().enumerate() {
        let dot: f64 = est[i].iter().zip(&tru[j]).map(|(a, b)| a * b).sum();
        let tt: f64 = tru[j].iter().map(|b| b * b).sum();
        let s = if tt > 0.0 { dot / tt } else { 0.0 };
        signs.push(if s < 0.0 { -1.0 } else { 1.0 });
        scales.push(s.abs());
        correlations.push(corr[i][j]);
    }
    Ok(AlignmentReport {
        permutation,
        signs,
        scales,
        correlations,
    })
}
