//! Mutual information estimation on correlated Gaussians with known MI.
//!
//! A statistics network (critic) is trained to maximize the MINE lower
//! bound; the same frozen critic is then scored with both the InfoNCE and
//! the MINE estimator on held-out batches.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::linalg;
use crate::math;
use crate::models::{sgd_step, Mlp, MlpSpec, OptimizerState};
use crate::rng::{self, Rng};
use crate::{Graph, Tensor};

/// `d` standardized components, each pair `(x_i, y_i)` correlated by `rho`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianSpec {
    pub dim: usize,
    pub rho: f64,
    pub seed: u64,
}

impl GaussianSpec {
    pub fn new(dim: usize, rho: f64, seed: u64) -> Result<Self> {
        let s = Self { dim, rho, seed };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(math::abs(self.rho) < 1.0) {
            return Err(contract!("correlation must satisfy |rho| < 1, got {}", self.rho));
        }
        if self.dim == 0 {
            return Err(contract!("dimension must be positive"));
        }
        Ok(())
    }
}

/// `-(d/2) ln(1 - rho^2)` nats.
pub fn analytic_mi(spec: &GaussianSpec) -> Result<f64> {
    spec.validate()?;
    Ok(-0.5 * spec.dim as f64 * math::ln_1p(-spec.rho * spec.rho))
}

/// `n` joint draws: `y = rho x + sqrt(1 - rho^2) e` componentwise.
pub fn sample_pairs(spec: &GaussianSpec, n: usize, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    spec.validate()?;
    if n == 0 {
        return Err(contract!("need at least one sample"));
    }
    let d = spec.dim;
    let s = math::sqrt(1.0 - spec.rho * spec.rho);
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        let a = rng::normal(rng);
        let e = rng::normal(rng);
        x.push(a);
        y.push(spec.rho * a + s * e);
    }
    Ok((Tensor::matrix(n, d, x)?, Tensor::matrix(n, d, y)?))
}

/// `y` rows rolled by one: pairs `(x_i, y_{i+1})` sample the product of the
/// empirical marginals while keeping both row multisets.
pub fn shuffle_marginal(x: &Tensor, y: &Tensor) -> Result<(Tensor, Tensor)> {
    let n = y.rows();
    let order: Vec<usize> = (0..n).map(|i| (i + 1) % n).collect();
    Ok((x.clone(), y.select_rows(&order)?))
}

/// Scalar score `C(x, y)` of a concatenated pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    pub net: Mlp,
    pub dim: usize,
}

impl Critic {
    /// ReLU MLP `[2d, hidden..., 1]`.
    pub fn new(dim: usize, hidden: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut widths = vec![2 * dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        Ok(Self { net: Mlp::new(MlpSpec::plain(widths)?, rng), dim })
    }

    pub fn default_for(dim: usize, rng: &mut Rng) -> Result<Self> {
        Self::new(dim, &[256, 256], rng)
    }

    fn check(&self, x: &Tensor, y: &Tensor) -> Result<()> {
        if x.rank() != 2 || y.rank() != 2 || x.cols() != self.dim || y.cols() != self.dim {
            return Err(contract!("critic expects two n x {} matrices, got {:?} and {:?}", self.dim, x.shape(), y.shape()));
        }
        Ok(())
    }

    /// `C(x_i, y_i)` for every row.
    pub fn score_pairs(&self, x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
        self.check(x, y)?;
        if x.rows() != y.rows() {
            return Err(contract!("{} x rows but {} y rows", x.rows(), y.rows()));
        }
        let n = x.rows();
        let d = self.dim;
        let mut data = Vec::with_capacity(n * 2 * d);
        for i in 0..n {
            data.extend_from_slice(x.row(i));
            data.extend_from_slice(y.row(i));
        }
        Ok(self.net.infer(&Tensor::matrix(n, 2 * d, data)?)?.into_data())
    }

    /// `K x K` matrix of `C(x_i, y_j)`. The first layer is split into its
    /// `x` and `y` halves so it is applied to `2K` rows instead of `K^2`.
    pub fn score_matrix(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        self.check(x, y)?;
        let (k, l, d) = (x.rows(), y.rows(), self.dim);
        let layers = self.net.layers();
        let w1 = &layers[0].linear.weight;
        let h = w1.cols();
        let mut ax = vec![0.0; k * h];
        let mut ay = vec![0.0; l * h];
        linalg::gemm(k, d, h, 1.0, x.data(), false, &w1.data()[..d * h], false, 0.0, &mut ax);
        linalg::gemm(l, d, h, 1.0, y.data(), false, &w1.data()[d * h..], false, 0.0, &mut ay);
        let b1 = layers[0].linear.bias.data();
        let last = layers.len() - 1;
        let mut act = vec![0.0; k * l * h];
        for i in 0..k {
            for j in 0..l {
                let out = &mut act[(i * l + j) * h..(i * l + j + 1) * h];
                for c in 0..h {
                    let v = ax[i * h + c] + ay[j * h + c] + b1[c];
                    out[c] = if last == 0 { v } else { v.max(0.0) };
                }
            }
        }
        let mut width = h;
        for (li, layer) in layers.iter().enumerate().skip(1) {
            let w = &layer.linear.weight;
            let out_w = w.cols();
            let mut next = vec![0.0; k * l * out_w];
            for r in 0..k * l {
                next[r * out_w..(r + 1) * out_w].copy_from_slice(layer.linear.bias.data());
            }
            linalg::gemm(k * l, width, out_w, 1.0, &act, false, w.data(), false, 1.0, &mut next);
            if li < last {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            act = next;
            width = out_w;
        }
        Tensor::matrix(k, l, act)
    }
}

/// InfoNCE estimate `(1/K) sum_i [C_ii - log((1/K) sum_j exp C_ij)]` from a
/// `K x K` score matrix. Terms are clamped at `ln K` so the bound holds
/// under rounding.
pub fn nce_from_scores(scores: &Tensor) -> Result<f64> {
    if scores.rank() != 2 || scores.rows() != scores.cols() || scores.rows() < 2 {
        return Err(contract!("InfoNCE needs a K x K score matrix with K >= 2, got {:?}", scores.shape()));
    }
    let k = scores.rows();
    let ln_k = math::ln(k as f64);
    let mut gaps = 0.0;
    for i in 0..k {
        let row = scores.row(i);
        gaps += (row[i] - math::log_sum_exp(row)).min(0.0);
    }
    // A non-positive mean added last keeps the result <= ln K exactly.
    Ok((gaps / k as f64).min(0.0) + ln_k)
}

/// Donsker-Varadhan estimate: mean joint score minus log-mean-exp of the
/// marginal scores.
pub fn mine_from_scores(joint: &[f64], marginal: &[f64]) -> Result<f64> {
    if joint.len() < 2 || marginal.len() < 2 {
        return Err(contract!("MINE needs at least two joint and two marginal samples"));
    }
    Ok(joint.iter().sum::<f64>() / joint.len() as f64 - math::log_mean_exp(marginal))
}

/// InfoNCE estimate of a critic on `K` joint pairs.
pub fn nce_estimate(critic: &Critic, x: &Tensor, y: &Tensor) -> Result<f64> {
    nce_from_scores(&critic.score_matrix(x, y)?)
}

/// MINE estimate of a critic on a joint batch and a marginal batch.
pub fn mine_estimate(critic: &Critic, joint: (&Tensor, &Tensor), marginal: (&Tensor, &Tensor)) -> Result<f64> {
    let j = critic.score_pairs(joint.0, joint.1)?;
    let m = critic.score_pairs(marginal.0, marginal.1)?;
    mine_from_scores(&j, &m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiConfig {
    pub dim: usize,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    /// Decay of the moving average of the marginal partition term; 0 uses
    /// the current batch alone.
    pub ema_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip: f64,
    pub eval_batches: usize,
    pub hidden: Vec<usize>,
}

impl Default for MiConfig {
    fn default() -> Self {
        Self { dim: 16, batch: 64, steps: 3000, lr: 0.003, ema_decay: 0.0, clip: 1.0, eval_batches: 100, hidden: vec![256, 256] }
    }
}

impl MiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 || self.eval_batches == 0 || self.dim == 0 {
            return Err(Error::Config("mi bench needs batch >= 2, dim >= 1 and eval batches >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) || !(self.lr >= 0.0) || !(self.clip >= 0.0) {
            return Err(Error::Config("ema decay must lie in [0, 1), lr and clip be non-negative".into()));
        }
        Ok(())
    }
}

/// Train a critic on `spec` by stochastic ascent on the MINE bound. The
/// gradient of the log-partition term divides by a moving average of the
/// marginal `mean exp C` (kept in the log domain); with `ema_decay = 0` this
/// is the plain batch gradient. Gradients are clipped to global norm
/// `cfg.clip`.
///
/// Streams of `spec.seed`: 0 for the critic init, 1 for training batches.
pub fn train_critic(spec: &GaussianSpec, cfg: &MiConfig) -> Result<Critic> {
    cfg.validate()?;
    spec.validate()?;
    let mut init = rng::stream(spec.seed, 0);
    let mut data = rng::stream(spec.seed, 1);
    let mut critic = Critic::new(spec.dim, &cfg.hidden, &mut init)?;
    let mut opt = OptimizerState::new(cfg.lr, cfg.steps).with_weight_decay(0.0);
    let k = cfg.batch;
    let d = spec.dim;
    let mut ema_log: Option<f64> = None;
    for step in 0..cfg.steps {
        let (x, y) = sample_pairs(spec, k, &mut data)?;
        let (xm, ym) = shuffle_marginal(&x, &y)?;
        let mut rows = Vec::with_capacity(2 * k * 2 * d);
        for (a, b) in [(&x, &y), (&xm, &ym)] {
            for i in 0..k {
                rows.extend_from_slice(a.row(i));
                rows.extend_from_slice(b.row(i));
            }
        }
        let mut g = Graph::new();
        let vars = critic.net.bind(&mut g, true);
        let input = g.constant(Tensor::matrix(2 * k, 2 * d, rows)?);
        let scores = critic.net.forward_eval(&mut g, &vars, input)?;
        let joint = g.slice_rows(scores, 0..k)?;
        let marginal = g.slice_rows(scores, k..2 * k)?;

        let m_vals: Vec<f64> = g.value(marginal).data().to_vec();
        let batch_log = math::log_mean_exp(&m_vals);
        let denom = match ema_log {
            None => batch_log,
            Some(_) if cfg.ema_decay == 0.0 => batch_log,
            Some(prev) => {
                let a = math::ln(cfg.ema_decay) + prev;
                let b = math::ln(1.0 - cfg.ema_decay) + batch_log;
                math::log_sum_exp(&[a, b])
            }
        };
        ema_log = Some(denom);

        // Surrogate: -(mean C_joint - mean exp(C_marg - denom)).
        let t_mean = g.mean(joint)?;
        let shift = g.constant(Tensor::new(vec![1], vec![-denom])?);
        let shifted = g.add(marginal, shift)?;
        let e = g.exp(shifted)?;
        let partition = g.mean(e)?;
        let objective = g.sub(t_mean, partition)?;
        let loss = g.scale(objective, -1.0)?;
        if !g.value(loss).is_finite() {
            return Err(Error::Divergence(format!("critic objective is not finite at step {}", step)));
        }
        g.backward(loss)?;
        let mut grads: Vec<Tensor> = vars.vars().iter().map(|&v| g.grad(v).expect("trainable").clone()).collect();
        let norm = math::sqrt(grads.iter().flat_map(|t| t.data()).map(|v| v * v).sum());
        if cfg.clip > 0.0 && norm > cfg.clip {
            let s = cfg.clip / norm;
            grads.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= s));
        }
        let mut params = critic.net.params_mut();
        sgd_step(&mut params, &grads, &mut opt)?;
    }
    Ok(critic)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MIBenchResult {
    pub rho: f64,
    pub true_mi: f64,
    pub est_nce: f64,
    pub est_mine: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    /// Critic training or evaluation diverged; estimates are NaN.
    pub diverged: bool,
}

/// Average both estimators of a frozen critic over `cfg.eval_batches`
/// held-out batches drawn from stream 2 of `spec.seed`.
pub fn evaluate_critic(critic: &Critic, spec: &GaussianSpec, cfg: &MiConfig) -> Result<(f64, f64)> {
    let mut r = rng::stream(spec.seed, 2);
    let (mut nce, mut mine) = (0.0, 0.0);
    for _ in 0..cfg.eval_batches {
        let (x, y) = sample_pairs(spec, cfg.batch, &mut r)?;
        let scores = critic.score_matrix(&x, &y)?;
        nce += nce_from_scores(&scores)?;
        let k = cfg.batch;
        let joint: Vec<f64> = (0..k).map(|i| scores.row(i)[i]).collect();
        let marginal: Vec<f64> = (0..k).map(|i| scores.row(i)[(i + 1) % k]).collect();
        mine += mine_from_scores(&joint, &marginal)?;
    }
    let n = cfg.eval_batches as f64;
    Ok((nce / n, mine / n))
}

/// One cell of the sweep. Divergence yields a flagged row instead of an error.
pub fn run_cell(rho: f64, seed: u64, cfg: &MiConfig) -> Result<MIBenchResult> {
    let spec = GaussianSpec::new(cfg.dim, rho, seed)?;
    let true_mi = analytic_mi(&spec)?;
    let mut row = MIBenchResult {
        rho,
        true_mi,
        est_nce: f64::NAN,
        est_mine: f64::NAN,
        batch: cfg.batch,
        steps: cfg.steps,
        seed,
        diverged: true,
    };
    let estimates = train_critic(&spec, cfg).and_then(|c| evaluate_critic(&c, &spec, cfg));
    match estimates {
        Ok((nce, mine)) if nce.is_finite() && mine.is_finite() => {
            row.est_nce = nce;
            row.est_mine = mine;
            row.diverged = false;
        }
        Ok(_) | Err(Error::Divergence(_)) | Err(Error::NonFinite(_)) => {}
        Err(e) => return Err(e),
    }
    Ok(row)
}

/// Serial sweep over `grid x seeds`, ordered by `rho` then seed.
pub fn run_bias_sweep(grid: &[f64], seeds: &[u64], cfg: &MiConfig) -> Result<Vec<MIBenchResult>> {
    cfg.validate()?;
    if let Some(bad) = grid.iter().find(|r| !(math::abs(**r) < 1.0)) {
        return Err(contract!("rho grid value {} outside (-1, 1)", bad));
    }
    let mut out = Vec::with_capacity(grid.len() * seeds.len());
    for &rho in grid {
        for &seed in seeds {
            out.push(run_cell(rho, seed, cfg)?);
        }
    }
    Ok(out)
}

/// `start:stop:step` inclusive grid; the last point is kept if within
/// `step * 1e-9` of `stop`. Points are rounded to 12 decimals.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad number {:?} in grid {:?}", s, text)));
    match parts.as_slice() {
        [single] => Ok(vec![num(single)?]),
        [a, b, c] => {
            let (start, stop, step) = (num(a)?, num(b)?, num(c)?);
            if !(step > 0.0) || stop < start {
                return Err(Error::Config(format!("grid {:?} needs step > 0 and stop >= start", text)));
            }
            let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
            // Snap to 12 decimals so 0.1 + 2 * 0.1 prints as 0.3.
            Ok((0..count).map(|i| libm::round((start + i as f64 * step) * 1e12) / 1e12).collect())
        }
        _ => Err(Error::Config(format!("grid {:?} must be a number or start:stop:step", text))),
    }
}
