//! Training loops: self-supervised pre-training, the supervised baseline and
//! teacher-to-student distillation.
//!
//! Randomness of a run comes from `seed` alone: stream 0 initializes the
//! model (and the supervised head after it), stream 1 draws the epoch
//! permutations and stream `AUGMENT_STREAM + t` augments the batch of global
//! step `t`, so batch contents never depend on how many steps ran before.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::data::{augment_in_place, build_pair_batch, AugmentLevel, AugmentPolicy, EpisodePool};
use crate::diagnostics::{singular_spectrum, Source};
use crate::error::{contract, Error, Result};
use crate::losses::{self, LossConfig, LossValues};
use crate::models::{sgd_step, EncoderStack, Mlp, MlpSpec, OptimizerState, Role, StackSpec, WEIGHT_DECAY};
use crate::rng::{self, Rng};
use crate::{Graph, Tensor};

/// First augmentation stream; step `t` uses `AUGMENT_STREAM + t`.
pub const AUGMENT_STREAM: u64 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    /// Asymmetric MINE loss with uniformity weight `lambda`.
    UniSiam,
    /// Asymmetric loss with `lambda = 0`.
    SimSiam,
    Nce,
    Mine,
    /// Cross-entropy through a linear head that is dropped afterwards.
    Supervised,
    Distill,
}

impl Regime {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "unisiam" => Some(Self::UniSiam),
            "simsiam" => Some(Self::SimSiam),
            "nce" => Some(Self::Nce),
            "mine" => Some(Self::Mine),
            "supervised" => Some(Self::Supervised),
            "distill" => Some(Self::Distill),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::UniSiam => "unisiam",
            Self::SimSiam => "simsiam",
            Self::Nce => "nce",
            Self::Mine => "mine",
            Self::Supervised => "supervised",
            Self::Distill => "distill",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch: usize,
    pub loss: LossConfig,
    /// Initial learning rate of the cosine schedule.
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: AugmentLevel,
    /// Log the effective rank every this many epochs (and after the last);
    /// 0 logs it after the last epoch only.
    pub eval_every: usize,
    /// Hidden widths of the backbone.
    pub hidden: Vec<usize>,
    /// Backbone output width.
    pub embed: usize,
    /// Training rows used for the effective-rank column.
    pub rank_samples: usize,
    /// Check at every asymmetric step that the alignment term sends no
    /// gradient into the projections through its stop-gradient targets.
    pub monitor_sg: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::UniSiam,
            epochs: 100,
            batch: 64,
            loss: LossConfig::default(),
            lr: 0.05,
            weight_decay: WEIGHT_DECAY,
            seed: 0,
            augment: AugmentLevel::Default,
            eval_every: 10,
            hidden: vec![256, 256],
            embed: 128,
            rank_samples: 512,
            monitor_sg: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch < 2 {
            return bad(format!("batch size must be at least 2, got {}", self.batch));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() || !(self.weight_decay >= 0.0) {
            return bad("lr and weight decay must be finite and non-negative".into());
        }
        if self.embed == 0 || self.hidden.contains(&0) {
            return bad("backbone widths must be positive".into());
        }
        if self.rank_samples < 2 {
            return bad("rank_samples must be at least 2".into());
        }
        self.loss.validate().map_err(|e| Error::Config(format!("{}", e)))
    }

    /// Architecture trained by this config on inputs of width `input_dim`.
    pub fn stack_spec(&self, input_dim: usize) -> StackSpec {
        StackSpec::with_backbone(input_dim, &self.hidden, self.embed)
    }

    fn policy(&self) -> AugmentPolicy {
        AugmentPolicy::for_level(self.augment)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    /// 1-based.
    pub epoch: usize,
    /// Epoch means of the loss and its parts. The supervised regime logs its
    /// cross-entropy as alignment and zero uniformity.
    pub total: f64,
    pub alignment: f64,
    pub uniformity: f64,
    /// Learning rate applied at the last step of the epoch.
    pub lr: f64,
    /// Effective rank of projection outputs (backbone outputs for the
    /// supervised regime) on evaluation epochs.
    pub effective_rank: Option<f64>,
    /// Seconds since the start of training, as reported by the observer.
    pub wall_time: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn last(&self) -> Option<&LogRow> {
        self.rows.last()
    }

    /// Rows with the wall-time column zeroed, for reproducibility checks.
    pub fn without_time(&self) -> Vec<LogRow> {
        self.rows.iter().map(|r| LogRow { wall_time: 0.0, ..*r }).collect()
    }
}

/// Hooks into a running loop.
pub trait Observer {
    /// Seconds elapsed since the run started.
    fn elapsed(&mut self) -> f64 {
        0.0
    }

    fn epoch(&mut self, _row: &LogRow) {}
}

impl Observer for () {}

#[derive(Clone, Debug)]
pub struct Trained {
    /// The model of the last epoch.
    pub stack: EncoderStack,
    pub log: TrainLog,
}

/// A failed run with the log of the epochs that completed.
#[derive(Clone, Debug, PartialEq, thiserror::Error)]
#[error("{error}")]
pub struct Aborted {
    pub error: Error,
    pub log: TrainLog,
}

impl From<Aborted> for Error {
    fn from(a: Aborted) -> Self {
        a.error
    }
}

impl From<Error> for Aborted {
    fn from(error: Error) -> Self {
        Aborted { error, log: TrainLog::default() }
    }
}

/// Pre-train a fresh stack on `pool` with a non-distillation regime.
pub fn pretrain(cfg: &TrainConfig, pool: &EpisodePool, obs: &mut dyn Observer) -> Result<Trained, Aborted> {
    if cfg.regime == Regime::Distill {
        return Err(Error::Config("the distill regime needs a teacher; use distill()".into()).into());
    }
    run(cfg, pool, None, obs)
}

/// Train a student from scratch against a frozen `teacher`, minimizing
/// `alpha * asymmetric + (1 - alpha) * distillation` on shared views.
pub fn distill(cfg: &TrainConfig, teacher: &EncoderStack, pool: &EpisodePool, obs: &mut dyn Observer) -> Result<Trained, Aborted> {
    if teacher.input_dim() != pool.dim() {
        return Err(Error::Config(format!(
            "teacher expects inputs of width {}, data has width {}",
            teacher.input_dim(),
            pool.dim()
        ))
        .into());
    }
    run(&TrainConfig { regime: Regime::Distill, ..cfg.clone() }, pool, Some(teacher), obs)
}

/// Row indices `0, n/m, 2n/m, ...` of at most `m` rows.
fn strided(n: usize, m: usize) -> Vec<usize> {
    let m = m.min(n);
    (0..m).map(|i| i * n / m).collect()
}

struct Batch {
    values: LossValues,
    grads: Vec<Tensor>,
}

fn run(cfg: &TrainConfig, pool: &EpisodePool, teacher: Option<&EncoderStack>, obs: &mut dyn Observer) -> Result<Trained, Aborted> {
    cfg.validate()?;
    let policy = cfg.policy();
    policy.validate()?;
    let (x, labels) = pool.flatten();
    let n = x.rows();
    if n < cfg.batch {
        return Err(Error::Config(format!("{} training rows cannot fill a batch of {}", n, cfg.batch)).into());
    }
    let steps_per_epoch = n / cfg.batch;
    let total_steps = cfg.epochs * steps_per_epoch;

    let mut spec = cfg.stack_spec(x.cols());
    if let Some(t) = teacher {
        spec = spec.with_distillation_head(t.proj().spec().output_dim());
    }
    let mut init = rng::stream(cfg.seed, 0);
    let mut stack = EncoderStack::new(spec, Role::Student, &mut init)?;
    let mut head = match cfg.regime {
        Regime::Supervised => Some(Mlp::new(MlpSpec::plain(vec![cfg.embed, pool.classes.len()])?, &mut init)),
        _ => None,
    };
    let mut opt = OptimizerState::new(cfg.lr, total_steps).with_weight_decay(cfg.weight_decay);
    let mut shuffle = rng::stream(cfg.seed, 1);
    let rank_rows = x.select_rows(&strided(n, cfg.rank_samples))?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainLog::default();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut sums = LossValues::default();
        let mut lr = 0.0;
        for s in 0..steps_per_epoch {
            let step = (epoch - 1) * steps_per_epoch + s;
            let ids = &order[s * cfg.batch..(s + 1) * cfg.batch];
            let mut aug = rng::stream(cfg.seed, AUGMENT_STREAM + step as u64);
            let outcome = train_step(cfg, &mut stack, head.as_mut(), teacher, &x, &labels, ids, &policy, &mut aug)
                .and_then(|batch| {
                    let mut params = stack.params_mut();
                    if let Some(h) = head.as_mut() {
                        params.extend(h.params_mut());
                    }
                    sgd_step(&mut params, &batch.grads, &mut opt).map(|lr| (batch.values, lr))
                });
            let (values, applied) = match outcome {
                Ok(v) => v,
                Err(e) => {
                    let error = match e {
                        Error::NonFinite(m) => Error::Divergence(format!("non-finite value in {}", m)),
                        e => e,
                    };
                    return Err(Aborted { error: with_position(error, epoch, s), log });
                }
            };
            stack.round_to_f32();
            if let Some(h) = head.as_mut() {
                h.round_to_f32();
            }
            sums.total += values.total;
            sums.alignment += values.alignment;
            sums.uniformity += values.uniformity;
            lr = applied;
        }
        let k = steps_per_epoch as f64;
        let due = epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0);
        let effective_rank = if due { Some(rank_of(&stack, cfg.regime, &rank_rows)) } else { None };
        let row = LogRow {
            epoch,
            total: sums.total / k,
            alignment: sums.alignment / k,
            uniformity: sums.uniformity / k,
            lr,
            effective_rank,
            wall_time: obs.elapsed(),
        };
        obs.epoch(&row);
        log.rows.push(row);
    }
    Ok(Trained { stack, log })
}

fn with_position(e: Error, epoch: usize, step: usize) -> Error {
    let at = |m: String| format!("{} (epoch {}, step {})", m, epoch, step);
    match e {
        Error::Divergence(m) => Error::Divergence(at(m)),
        Error::Contract(m) => Error::Contract(at(m)),
        e => e,
    }
}

/// Effective rank of eval-mode embeddings; NaN when the spectrum is degenerate.
fn rank_of(stack: &EncoderStack, regime: Regime, rows: &Tensor) -> f64 {
    let (emb, source) = match regime {
        Regime::Supervised => (stack.forward_backbone(rows), Source::Backbone),
        _ => (stack.forward_proj(rows), Source::Projection),
    };
    emb.and_then(|e| singular_spectrum(&e, source)).map(|r| r.effective_rank).unwrap_or(f64::NAN)
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    cfg: &TrainConfig,
    stack: &mut EncoderStack,
    head: Option<&mut Mlp>,
    teacher: Option<&EncoderStack>,
    x: &Tensor,
    labels: &[usize],
    ids: &[usize],
    policy: &AugmentPolicy,
    aug: &mut Rng,
) -> Result<Batch> {
    let instances = x.select_rows(ids)?;
    let mut g = Graph::new();
    let vars = stack.bind(&mut g);

    if let Some(head) = head {
        let mut views = instances;
        for i in 0..views.rows() {
            augment_in_place(views.row_mut(i), policy, aug);
        }
        let hv = head.bind(&mut g, true);
        let input = g.constant(views);
        let h = stack.train_backbone(&mut g, &vars, input)?;
        let logits = head.forward_train(&mut g, &hv, h)?;
        let batch_labels: Vec<usize> = ids.iter().map(|&i| labels[i]).collect();
        let loss = losses::cross_entropy(&mut g, logits, &batch_labels)?;
        let ce = finite(&g, loss)?;
        g.backward(loss)?;
        let mut grads = vars.grads(&g)?;
        grads.extend(hv.vars().iter().map(|&v| g.grad(v).expect("trainable head").clone()));
        return Ok(Batch { values: LossValues { total: ce, alignment: ce, uniformity: 0.0 }, grads });
    }

    let pair = build_pair_batch(&instances, ids, policy, aug)?;
    let teacher_z = match teacher {
        Some(t) => Some(t.forward_proj(&pair.views)?),
        None => None,
    };
    let input = g.constant(pair.views);
    let (h, z) = stack.train_backbone_proj(&mut g, &vars, input)?;
    let (loss, values) = match cfg.regime {
        Regime::Nce | Regime::Mine => {
            let b = if cfg.regime == Regime::Nce { losses::nce(&mut g, z, &cfg.loss)? } else { losses::mine(&mut g, z, &cfg.loss)? };
            (b.total, b.values(&g))
        }
        Regime::UniSiam | Regime::SimSiam | Regime::Distill => {
            let loss_cfg = match cfg.regime {
                Regime::SimSiam => LossConfig { lambda: 0.0, ..cfg.loss },
                _ => cfg.loss,
            };
            let p = stack.train_pred(&mut g, &vars, z)?;
            let a = losses::amine(&mut g, z, p, &loss_cfg)?;
            if cfg.monitor_sg {
                // z also reaches the alignment through p = pred(z); only the
                // target side is checked, so p is detached here.
                let p_fixed = g.stop_gradient(p)?;
                let check = losses::amine(&mut g, z, p_fixed, &loss_cfg)?;
                let dz = g.gradient(check.alignment, z)?;
                if dz.data().iter().any(|&v| v != 0.0) {
                    return Err(contract!("alignment term leaked gradient into the projections"));
                }
            }
            let parts = a.values(&g);
            match teacher_z {
                Some(tz) => {
                    let d = stack.train_dist(&mut g, &vars, h)?;
                    let target = g.constant(tz);
                    let dl = losses::distill(&mut g, d, target)?;
                    let total = losses::total(&mut g, a.total, dl, &loss_cfg)?;
                    let total_value = g.value(total).data()[0];
                    (total, LossValues { total: total_value, ..parts })
                }
                None => (a.total, parts),
            }
        }
        Regime::Supervised => unreachable!("handled above"),
    };
    finite(&g, loss)?;
    g.backward(loss)?;
    Ok(Batch { values, grads: vars.grads(&g)? })
}

fn finite(g: &Graph, loss: crate::Var) -> Result<f64> {
    let v = g.value(loss).data()[0];
    if !v.is_finite() {
        return Err(Error::Divergence("loss is not finite".into()));
    }
    Ok(v)
}
