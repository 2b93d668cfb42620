//! Embedding spectrum, effective rank and alignment/uniformity statistics.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::linalg;
use crate::losses::UNIT_NORM_TOL;
use crate::math;
use crate::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Backbone,
    Projection,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Backbone => "backbone",
            Source::Projection => "projection",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "backbone" => Some(Source::Backbone),
            "projection" | "proj" => Some(Source::Projection),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumReport {
    /// Singular values of the centered embeddings, descending.
    pub sigma: Vec<f64>,
    /// `log10(sigma)`, with zeros mapped to `log10(f64::MIN_POSITIVE)`.
    pub log10_sigma: Vec<f64>,
    pub effective_rank: f64,
    pub source: Source,
    pub n: usize,
    pub d: usize,
}

impl SpectrumReport {
    /// `sigma / sigma_max`.
    pub fn relative(&self) -> Vec<f64> {
        let top = self.sigma[0];
        self.sigma.iter().map(|s| if top > 0.0 { s / top } else { 0.0 }).collect()
    }
}

/// Eigen-decomposition of a symmetric `d x d` matrix by cyclic Jacobi
/// rotations. Returns eigenvalues (unsorted) and row-major eigenvectors as
/// columns of `v`.
pub fn jacobi_eigen(a: &[f64], d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != d * d {
        return Err(contract!("jacobi_eigen: {} entries for a {}x{} matrix", a.len(), d, d));
    }
    let mut m = a.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>();
    for _sweep in 0..100 {
        let off: f64 = (0..d).flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i * d + j] * m[i * d + j]).sum();
        if off <= 1e-30 * scale || off == 0.0 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = m[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (m[p * d + p], m[q * d + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (math::abs(theta) + math::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / math::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..d {
                    let (mkp, mkq) = (m[k * d + p], m[k * d + q]);
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let (mpk, mqk) = (m[p * d + k], m[q * d + k]);
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let (vkp, vkq) = (v[k * d + p], v[k * d + q]);
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Ok(((0..d).map(|i| m[i * d + i]).collect(), v))
}

/// Singular values of the row-centered `n x d` matrix from the Jacobi
/// eigenvectors of its `d x d` Gram matrix.
pub fn singular_spectrum(embeddings: &Tensor, source: Source) -> Result<SpectrumReport> {
    if embeddings.rank() != 2 {
        return Err(contract!("spectrum expects an n x d matrix, got {:?}", embeddings.shape()));
    }
    let (n, d) = (embeddings.rows(), embeddings.cols());
    if n < 2 {
        return Err(contract!("spectrum needs at least two rows, got {}", n));
    }
    if !embeddings.is_finite() {
        return Err(Error::NonFinite("spectrum input".into()));
    }
    let mut centered = embeddings.data().to_vec();
    for j in 0..d {
        let mean = (0..n).map(|i| centered[i * d + j]).sum::<f64>() / n as f64;
        (0..n).for_each(|i| centered[i * d + j] -= mean);
    }
    let mut gram = vec![0.0; d * d];
    linalg::gemm(d, n, d, 1.0, &centered, true, &centered, false, 0.0, &mut gram);
    // Exact symmetry for the rotations.
    for i in 0..d {
        for j in i + 1..d {
            let s = 0.5 * (gram[i * d + j] + gram[j * d + i]);
            gram[i * d + j] = s;
            gram[j * d + i] = s;
        }
    }
    let (_, v) = jacobi_eigen(&gram, d)?;
    // sigma_k = |X v_k| equals sqrt(max(eig_k, 0)) but keeps null directions
    // at rounding level instead of sqrt(eps * eig_max).
    let mut xv = vec![0.0; n * d];
    linalg::gemm(n, d, d, 1.0, &centered, false, &v, false, 0.0, &mut xv);
    let mut sigma: Vec<f64> = (0..d).map(|k| math::sqrt((0..n).map(|i| xv[i * d + k] * xv[i * d + k]).sum())).collect();
    sigma.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
    let log10_sigma = sigma.iter().map(|&s| math::log10(s.max(f64::MIN_POSITIVE))).collect();
    let effective_rank = effective_rank(&sigma)?;
    Ok(SpectrumReport { sigma, log10_sigma, effective_rank, source, n, d })
}

/// `exp(-sum p_k ln p_k)` with `p_k = sigma_k / sum sigma`.
pub fn effective_rank(sigma: &[f64]) -> Result<f64> {
    if sigma.iter().any(|s| *s < 0.0 || !s.is_finite()) {
        return Err(contract!("singular values must be finite and non-negative"));
    }
    let total: f64 = sigma.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("all-zero spectrum".into()));
    }
    let entropy: f64 = sigma
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| {
            let p = s / total;
            -p * math::ln(p)
        })
        .sum();
    Ok(math::exp(entropy))
}

/// Mean positive-pair cosine and `log mean exp(cos / tau)` over ordered
/// non-positive pairs `(i, j)`, `j != i`, `j != partner(i)`, of a unit-norm
/// `2B x d` pair batch.
pub fn alignment_uniformity(z: &Tensor, tau: f64) -> Result<(f64, f64)> {
    if !(tau > 0.0) {
        return Err(contract!("temperature must be positive, got {}", tau));
    }
    if z.rank() != 2 || z.rows() < 4 || !z.rows().is_multiple_of(2) {
        return Err(contract!("alignment_uniformity needs a 2B x d batch with B >= 2, got {:?}", z.shape()));
    }
    let n = z.rows();
    for i in 0..n {
        if math::abs(math::norm(z.row(i)) - 1.0) > UNIT_NORM_TOL {
            return Err(contract!("row {} is not unit-norm", i));
        }
    }
    let b = n / 2;
    let alignment = (0..b).map(|i| math::dot(z.row(i), z.row(i + b))).sum::<f64>() / b as f64;
    let mut scores = Vec::with_capacity(n * (n - 2));
    for i in 0..n {
        for j in 0..n {
            if j != i && j != (i + b) % n {
                scores.push(math::dot(z.row(i), z.row(j)) / tau);
            }
        }
    }
    Ok((alignment, math::log_mean_exp(&scores)))
}
