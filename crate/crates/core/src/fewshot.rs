//! Episodic N-way K-shot evaluation with a logistic-regression probe.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::seq::SliceRandom;

use crate::data::EpisodePool;
use crate::error::{contract, Error, Result};
use crate::linalg;
use crate::math;
use crate::models::EncoderStack;
use crate::rng::{self, Rng};
use crate::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub queries: usize,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self { n_way: 5, k_shot: 5, queries: 15, episodes: 3000, seed: 0 }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 || self.k_shot < 1 || self.queries < 1 {
            return Err(Error::Config(format!(
                "episodes need n_way >= 2, k_shot >= 1, queries >= 1; got {}/{}/{}",
                self.n_way, self.k_shot, self.queries
            )));
        }
        Ok(())
    }

    /// Generator of episode `index`: stream `index` of the spec seed.
    pub fn episode_rng(&self, index: usize) -> Rng {
        rng::stream(self.seed, index as u64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// `N*K x d`, grouped by label.
    pub support: Tensor,
    pub support_labels: Vec<usize>,
    /// `N*Q x d`, grouped by label.
    pub query: Tensor,
    pub query_labels: Vec<usize>,
    /// `classes[label]` is the global class id.
    pub classes: Vec<usize>,
    /// Pool row of every support and query sample, as `(pool class index, row)`.
    pub support_rows: Vec<(usize, usize)>,
    pub query_rows: Vec<(usize, usize)>,
}

impl Episode {
    /// Randomly permute support and query labels, destroying the class signal.
    pub fn shuffle_labels(&mut self, rng: &mut Rng) {
        self.support_labels.shuffle(rng);
        self.query_labels.shuffle(rng);
    }

    /// The same episode with features taken from `pool` (e.g. an encoded copy
    /// of the pool it was sampled from).
    pub fn regather(&self, pool: &EpisodePool) -> Result<Self> {
        let gather = |rows: &[(usize, usize)]| -> Result<Tensor> {
            let d = pool.dim();
            let mut data = Vec::with_capacity(rows.len() * d);
            for &(c, i) in rows {
                let s = pool.samples.get(c).ok_or_else(|| contract!("pool lacks class index {}", c))?;
                if i >= s.rows() {
                    return Err(contract!("pool class {} has no row {}", c, i));
                }
                data.extend_from_slice(s.row(i));
            }
            Tensor::matrix(rows.len(), d, data)
        };
        Ok(Self { support: gather(&self.support_rows)?, query: gather(&self.query_rows)?, ..self.clone() })
    }
}

/// Uniformly choose `N` classes, then `K + Q` distinct samples of each; the
/// first `K` go to the support set. Labels follow the order of choice.
pub fn sample_episode(pool: &EpisodePool, spec: &EpisodeSpec, rng: &mut Rng) -> Result<Episode> {
    spec.validate()?;
    let (n, k, q) = (spec.n_way, spec.k_shot, spec.queries);
    if pool.classes.len() < n {
        return Err(Error::Config(format!(
            "{} pool has {} classes, episode needs {}",
            pool.split.as_str(),
            pool.classes.len(),
            n
        )));
    }
    let chosen = index::sample(rng, pool.classes.len(), n).into_vec();
    let (mut support_rows, mut query_rows) = (Vec::with_capacity(n * k), Vec::with_capacity(n * q));
    let (mut support_labels, mut query_labels) = (Vec::with_capacity(n * k), Vec::with_capacity(n * q));
    for (label, &c) in chosen.iter().enumerate() {
        let m = pool.samples[c].rows();
        if m < k + q {
            return Err(Error::Config(format!("class {} has {} samples, episode needs {}", pool.classes[c], m, k + q)));
        }
        let rows = index::sample(rng, m, k + q).into_vec();
        for (j, &row) in rows.iter().enumerate() {
            if j < k {
                support_rows.push((c, row));
                support_labels.push(label);
            } else {
                query_rows.push((c, row));
                query_labels.push(label);
            }
        }
    }
    let skeleton = Episode {
        support: Tensor::zeros(&[1, 1]),
        support_labels,
        query: Tensor::zeros(&[1, 1]),
        query_labels,
        classes: chosen.iter().map(|&c| pool.classes[c]).collect(),
        support_rows,
        query_rows,
    };
    skeleton.regather(pool)
}

/// Elementwise `sign(v) |v|^beta`.
pub fn power_transform(features: &Tensor, beta: f64) -> Tensor {
    if beta == 1.0 {
        return features.clone();
    }
    features.map(|v| if v == 0.0 { 0.0 } else { v.signum() * math::powf(math::abs(v), beta) })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub power: f64,
    /// L2 strength on the weights; `None` means `1 / (N * K)`.
    pub reg: Option<f64>,
    pub max_iter: usize,
    /// Stop once the gradient norm falls below this.
    pub tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { power: 0.5, reg: None, max_iter: 1000, tol: 1e-6 }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.power > 0.0 && self.power <= 1.0) {
            return Err(contract!("power must lie in (0, 1], got {}", self.power));
        }
        if let Some(r) = self.reg {
            if !(r >= 0.0) {
                return Err(contract!("regularization must be non-negative, got {}", r));
            }
        }
        Ok(())
    }
}

/// A fitted multinomial logistic regression.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    /// `d x N`.
    pub weights: Tensor,
    pub bias: Vec<f64>,
    pub loss: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every accepted step, starting at the zero init.
    pub trace: Vec<f64>,
}

impl Probe {
    /// `x W + b`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let (n, d) = (x.rows(), x.cols());
        let c = self.bias.len();
        if self.weights.shape() != [d, c] {
            return Err(contract!("probe expects width {}, got {}", self.weights.rows(), d));
        }
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            out[i * c..(i + 1) * c].copy_from_slice(&self.bias);
        }
        linalg::gemm(n, d, c, 1.0, x.data(), false, self.weights.data(), false, 1.0, &mut out);
        Tensor::matrix(n, c, out)
    }

    /// Arg-max class per row; ties go to the lowest index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok((0..logits.rows())
            .map(|i| {
                let row = logits.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }
}

/// Objective `mean CE + (reg/2)|W|^2` and its gradient at `(w, b)`.
fn probe_objective(x: &Tensor, labels: &[usize], classes: usize, reg: f64, w: &[f64], b: &[f64], grad: Option<(&mut [f64], &mut [f64])>) -> f64 {
    let (n, d) = (x.rows(), x.cols());
    let mut logits = vec![0.0; n * classes];
    for i in 0..n {
        logits[i * classes..(i + 1) * classes].copy_from_slice(b);
    }
    linalg::gemm(n, d, classes, 1.0, x.data(), false, w, false, 1.0, &mut logits);
    let mut loss = 0.0;
    for i in 0..n {
        let row = &mut logits[i * classes..(i + 1) * classes];
        let lse = math::log_sum_exp(row);
        loss += lse - row[labels[i]];
        // Turn the row into dL/dlogits.
        for v in row.iter_mut() {
            *v = math::exp(*v - lse) / n as f64;
        }
        row[labels[i]] -= 1.0 / n as f64;
    }
    loss /= n as f64;
    loss += 0.5 * reg * w.iter().map(|v| v * v).sum::<f64>();
    if let Some((gw, gb)) = grad {
        gw.iter_mut().zip(w).for_each(|(g, wi)| *g = reg * wi);
        linalg::gemm(d, n, classes, 1.0, x.data(), true, &logits, false, 1.0, gw);
        gb.iter_mut().for_each(|g| *g = 0.0);
        for i in 0..n {
            for (g, v) in gb.iter_mut().zip(&logits[i * classes..(i + 1) * classes]) {
                *g += v;
            }
        }
    }
    loss
}

/// Full-batch gradient descent with Armijo backtracking from a zero init.
/// The bias is not regularized. Never fails on non-convergence; see
/// [`Probe::converged`].
pub fn fit_probe(features: &Tensor, labels: &[usize], classes: usize, reg: f64, cfg: &ProbeConfig) -> Result<Probe> {
    if features.rank() != 2 || features.rows() != labels.len() {
        return Err(contract!("{} labels for features of shape {:?}", labels.len(), features.shape()));
    }
    if !features.is_finite() {
        return Err(Error::NonFinite("probe features".into()));
    }
    if classes < 2 || labels.iter().any(|&l| l >= classes) {
        return Err(contract!("labels must lie in 0..{} with at least two classes", classes));
    }
    for c in 0..classes {
        if !labels.contains(&c) {
            return Err(contract!("class {} has no support sample", c));
        }
    }
    let d = features.cols();
    let (mut w, mut b) = (vec![0.0; d * classes], vec![0.0; classes]);
    let (mut gw, mut gb) = (vec![0.0; d * classes], vec![0.0; classes]);
    let (mut tw, mut tb) = (vec![0.0; d * classes], vec![0.0; classes]);
    let mut loss = probe_objective(features, labels, classes, reg, &w, &b, Some((&mut gw, &mut gb)));
    let mut trace = vec![loss];
    let mut step = 1.0;
    let mut iterations = 0;
    let grad_sq = |gw: &[f64], gb: &[f64]| gw.iter().chain(gb).map(|v| v * v).sum::<f64>();
    let mut gsq = grad_sq(&gw, &gb);
    while iterations < cfg.max_iter && math::sqrt(gsq) >= cfg.tol {
        iterations += 1;
        let mut accepted = false;
        for _ in 0..60 {
            tw.iter_mut().zip(&w).zip(&gw).for_each(|((t, x), g)| *t = x - step * g);
            tb.iter_mut().zip(&b).zip(&gb).for_each(|((t, x), g)| *t = x - step * g);
            let trial = probe_objective(features, labels, classes, reg, &tw, &tb, None);
            if trial <= loss - 0.5 * step * gsq {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        core::mem::swap(&mut w, &mut tw);
        core::mem::swap(&mut b, &mut tb);
        loss = probe_objective(features, labels, classes, reg, &w, &b, Some((&mut gw, &mut gb)));
        gsq = grad_sq(&gw, &gb);
        trace.push(loss);
        step *= 2.0;
    }
    let grad_norm = math::sqrt(gsq);
    Ok(Probe {
        weights: Tensor::matrix(d, classes, w)?,
        bias: b,
        loss,
        grad_norm,
        iterations,
        converged: grad_norm < cfg.tol,
        trace,
    })
}

/// Probe accuracy on an episode whose features are already encoded: power
/// transform, fit on the support set, arg-max on the queries.
pub fn evaluate_features(episode: &Episode, cfg: &ProbeConfig) -> Result<f64> {
    cfg.validate()?;
    let classes = episode.classes.len();
    let support = power_transform(&episode.support, cfg.power);
    let query = power_transform(&episode.query, cfg.power);
    let reg = cfg.reg.unwrap_or(1.0 / episode.support.rows() as f64);
    let probe = fit_probe(&support, &episode.support_labels, classes, reg, cfg)?;
    let pred = probe.predict(&query)?;
    let correct = pred.iter().zip(&episode.query_labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / episode.query_labels.len() as f64)
}

/// Accuracy of a frozen encoder on one episode of raw inputs. Only the
/// backbone is used.
pub fn evaluate_episode(encoder: &EncoderStack, episode: &Episode, cfg: &ProbeConfig) -> Result<f64> {
    let encoded = Episode {
        support: encoder.forward_backbone(&episode.support)?,
        query: encoder.forward_backbone(&episode.query)?,
        ..episode.clone()
    };
    evaluate_features(&encoded, cfg)
}

/// Backbone features of every pool sample.
pub fn encode_pool(encoder: &EncoderStack, pool: &EpisodePool) -> Result<EpisodePool> {
    pool.map(|x| encoder.forward_backbone(x))
}

/// Accuracy of episode `index` on a pool of precomputed features. Episode
/// indices and sample rows are the same as when sampling from the raw pool.
pub fn episode_accuracy(
    raw: &EpisodePool,
    encoded: &EpisodePool,
    spec: &EpisodeSpec,
    index: usize,
    shuffled: bool,
    cfg: &ProbeConfig,
) -> Result<f64> {
    let mut r = spec.episode_rng(index);
    let mut ep = sample_episode(raw, spec, &mut r)?.regather(encoded)?;
    if shuffled {
        ep.shuffle_labels(&mut r);
    }
    evaluate_features(&ep, cfg)
}

/// Serial evaluation of `spec.episodes` episodes; per-episode accuracies.
pub fn run_episodes(encoder: Option<&EncoderStack>, pool: &EpisodePool, spec: &EpisodeSpec, shuffled: bool, cfg: &ProbeConfig) -> Result<Vec<f64>> {
    let encoded = match encoder {
        Some(e) => encode_pool(e, pool)?,
        None => pool.clone(),
    };
    (0..spec.episodes).map(|i| episode_accuracy(pool, &encoded, spec, i, shuffled, cfg)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub ci95: f64,
    pub n: usize,
}

/// Mean and `1.96 s / sqrt(n)` with the `n - 1` sample standard deviation.
pub fn aggregate(accuracies: &[f64]) -> Result<Summary> {
    let n = accuracies.len();
    if n < 2 {
        return Err(contract!("aggregate needs at least two accuracies, got {}", n));
    }
    let mean = accuracies.iter().sum::<f64>() / n as f64;
    let var = accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1) as f64;
    Ok(Summary { mean, ci95: 1.96 * math::sqrt(var) / math::sqrt(n as f64), n })
}
