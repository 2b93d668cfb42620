//! Contrastive, asymmetric, distillation and supervised objectives.
//!
//! Pair batches are `2B x d` graph nodes whose rows `i` and `i + B` are two
//! views of the same instance. Every contrastive loss returns a
//! [`LossBreakdown`] with its alignment and uniformity parts.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Result};
use crate::math;
use crate::{Graph, Var};

/// Rows may deviate from unit norm by at most this much.
pub const UNIT_NORM_TOL: f64 = 1e-4;

/// Which entries `j` count as negatives of row `i` in the pooled uniformity term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NegPolicy {
    /// `j != i` and `j != partner(i)`.
    #[default]
    ExcludeSelfAndPositive,
    /// `j != i`.
    ExcludeSelfOnly,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Temperature.
    pub tau: f64,
    /// Uniformity weight of the asymmetric loss.
    pub lambda: f64,
    /// Weight of the asymmetric loss against the distillation loss.
    pub alpha: f64,
    pub neg: NegPolicy,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { tau: 2.0, lambda: 0.1, alpha: 0.5, neg: NegPolicy::default() }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(contract!("temperature must be positive, got {}", self.tau));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(contract!("uniformity weight must be non-negative, got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(contract!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        Ok(())
    }
}

/// Scalar nodes of a loss: `total = alignment + weight * uniformity`.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub alignment: Var,
    pub uniformity: Var,
    pub weight: f64,
}

/// Values of a [`LossBreakdown`].
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LossValues {
    pub total: f64,
    pub alignment: f64,
    pub uniformity: f64,
}

impl LossBreakdown {
    pub fn values(&self, g: &Graph) -> LossValues {
        let item = |v: Var| g.value(v).data()[0];
        LossValues { total: item(self.total), alignment: item(self.alignment), uniformity: item(self.uniformity) }
    }
}

/// Number of pairs `B` of a `2B x d` unit-norm batch.
fn pair_count(g: &Graph, z: Var, what: &str) -> Result<usize> {
    let t = g.value(z);
    if t.rank() != 2 {
        return Err(contract!("{}: expected a 2B x d matrix, got shape {:?}", what, t.shape()));
    }
    let n = t.rows();
    if !n.is_multiple_of(2) || n == 0 {
        return Err(contract!("{}: pair batch needs an even, non-zero row count, got {}", what, n));
    }
    for i in 0..n {
        let norm = math::norm(t.row(i));
        if math::abs(norm - 1.0) > UNIT_NORM_TOL {
            return Err(contract!("{}: row {} has norm {}, expected unit norm", what, i, norm));
        }
    }
    Ok(n / 2)
}

/// `-(1/(B tau)) sum_i z_i . z_{i+B}`.
fn symmetric_alignment(g: &mut Graph, z: Var, b: usize, tau: f64) -> Result<Var> {
    let first = g.slice_rows(z, 0..b)?;
    let second = g.slice_rows(z, b..2 * b)?;
    let prod = g.mul(first, second)?;
    let s = g.sum(prod)?;
    g.scale(s, -1.0 / (b as f64 * tau))
}

/// Similarity matrix `z z^T / tau`.
fn similarities(g: &mut Graph, z: Var, tau: f64) -> Result<Var> {
    let zt = g.transpose(z)?;
    let s = g.matmul(z, zt)?;
    g.scale(s, 1.0 / tau)
}

fn negative_mask(b: usize, policy: NegPolicy) -> Vec<bool> {
    let n = 2 * b;
    let mut mask = vec![true; n * n];
    for i in 0..n {
        mask[i * n + i] = false;
        if policy == NegPolicy::ExcludeSelfAndPositive {
            mask[i * n + (i + b) % n] = false;
        }
    }
    mask
}

/// `log sum_i sum_{j in Neg(i)} exp(z_i . z_j / tau)` as a single pooled log.
fn pooled_uniformity(g: &mut Graph, z: Var, b: usize, cfg: &LossConfig) -> Result<Var> {
    if b == 1 && cfg.neg == NegPolicy::ExcludeSelfAndPositive {
        return Err(contract!("a single pair has no negatives once self and partner are excluded"));
    }
    let sim = similarities(g, z, cfg.tau)?;
    let mask = negative_mask(b, cfg.neg);
    let rows = g.log_sum_exp_rows(sim, Some(&mask))?;
    let col = g.transpose(rows)?;
    let pooled = g.log_sum_exp_rows(col, None)?;
    g.sum(pooled)
}

/// InfoNCE-style loss: symmetric alignment plus the per-row averaged
/// log-sum-exp over all `j != i`.
pub fn nce(g: &mut Graph, z: Var, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    let b = pair_count(g, z, "nce")?;
    let alignment = symmetric_alignment(g, z, b, cfg.tau)?;
    let sim = similarities(g, z, cfg.tau)?;
    let mask = negative_mask(b, NegPolicy::ExcludeSelfOnly);
    let rows = g.log_sum_exp_rows(sim, Some(&mask))?;
    let uniformity = g.mean(rows)?;
    let total = g.add(alignment, uniformity)?;
    Ok(LossBreakdown { total, alignment, uniformity, weight: 1.0 })
}

/// MINE-style loss: symmetric alignment plus a single log over the pooled
/// negative sum.
pub fn mine(g: &mut Graph, z: Var, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    let b = pair_count(g, z, "mine")?;
    let alignment = symmetric_alignment(g, z, b, cfg.tau)?;
    let uniformity = pooled_uniformity(g, z, b, cfg)?;
    let total = g.add(alignment, uniformity)?;
    Ok(LossBreakdown { total, alignment, uniformity, weight: 1.0 })
}

/// Asymmetric MINE loss: predictions `p` align with stop-gradient
/// projections of the partner view (no temperature), plus `lambda` times the
/// pooled uniformity of `z`.
pub fn amine(g: &mut Graph, z: Var, p: Var, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    let b = pair_count(g, z, "amine")?;
    let bp = pair_count(g, p, "amine predictions")?;
    if b != bp || g.value(z).cols() != g.value(p).cols() {
        return Err(contract!(
            "amine: projections {:?} and predictions {:?} must align",
            g.value(z).shape(),
            g.value(p).shape()
        ));
    }
    let target = g.stop_gradient(z)?;
    let first = g.slice_rows(target, 0..b)?;
    let second = g.slice_rows(target, b..2 * b)?;
    let swapped = g.concat_rows(&[second, first])?;
    let prod = g.mul(p, swapped)?;
    let s = g.sum(prod)?;
    let alignment = g.scale(s, -1.0 / (2 * b) as f64)?;
    let uniformity = pooled_uniformity(g, z, b, cfg)?;
    let weighted = g.scale(uniformity, cfg.lambda)?;
    let total = g.add(alignment, weighted)?;
    Ok(LossBreakdown { total, alignment, uniformity, weight: cfg.lambda })
}

/// `-(1/2B) sum_i d_i . z_i` between student outputs and teacher targets.
/// The teacher side is detached.
pub fn distill(g: &mut Graph, d_student: Var, z_teacher: Var) -> Result<Var> {
    let (ds, zt) = (g.value(d_student).shape().to_vec(), g.value(z_teacher).shape().to_vec());
    if ds != zt {
        return Err(contract!("distill: student {:?} and teacher {:?} must be row-aligned", ds, zt));
    }
    let b = pair_count(g, d_student, "distill")?;
    pair_count(g, z_teacher, "distill teacher")?;
    let target = g.stop_gradient(z_teacher)?;
    let prod = g.mul(d_student, target)?;
    let s = g.sum(prod)?;
    g.scale(s, -1.0 / (2 * b) as f64)
}

/// `alpha * amine + (1 - alpha) * distill`.
pub fn total(g: &mut Graph, amine: Var, distill: Var, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    // Exact boundaries: a zero-weighted term must not leak NaN or rounding.
    if cfg.alpha == 1.0 {
        return g.scale(amine, 1.0);
    }
    if cfg.alpha == 0.0 {
        return g.scale(distill, 1.0);
    }
    let a = g.scale(amine, cfg.alpha)?;
    let d = g.scale(distill, 1.0 - cfg.alpha)?;
    g.add(a, d)
}

/// Mean multinomial cross-entropy of `logits` against integer labels.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    g.softmax_cross_entropy(logits, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::rng;
    use crate::{Error, Tensor};
    use alloc::vec::Vec;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    type LossFn<'a> = dyn Fn(&mut Graph, Var) -> Result<Var> + 'a;

    const E1: [f64; 2] = [1.0, 0.0];
    const E2: [f64; 2] = [0.0, 1.0];

    fn cfg(tau: f64, lambda: f64) -> LossConfig {
        LossConfig { tau, lambda, ..LossConfig::default() }
    }

    fn unit_rows(r: &mut rng::Rng, n: usize, d: usize) -> Tensor {
        let mut t = Tensor::matrix(n, d, (0..n * d).map(|_| rng::normal(r)).collect()).unwrap();
        for i in 0..n {
            let norm = math::norm(t.row(i));
            t.row_mut(i).iter_mut().for_each(|v| *v /= norm);
        }
        t
    }

    fn eval(f: impl Fn(&mut Graph) -> Result<LossBreakdown>) -> LossValues {
        let mut g = Graph::new();
        let l = f(&mut g).unwrap();
        l.values(&g)
    }

    fn brute_dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Direct double-loop evaluation of the three contrastive losses.
    fn oracle(z: &Tensor, p: &Tensor, c: &LossConfig) -> (f64, f64, f64) {
        let n = z.rows();
        let b = n / 2;
        let partner = |i: usize| (i + b) % n;
        let align: f64 = -(0..b).map(|i| brute_dot(z.row(i), z.row(i + b))).sum::<f64>() / (b as f64 * c.tau);
        let mut nce_u = 0.0;
        let mut pooled = 0.0;
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let e = (brute_dot(z.row(i), z.row(j)) / c.tau).exp();
                s += e;
                if c.neg == NegPolicy::ExcludeSelfOnly || j != partner(i) {
                    pooled += e;
                }
            }
            nce_u += s.ln();
        }
        nce_u /= n as f64;
        let asym: f64 = -(0..n).map(|i| brute_dot(p.row(i), z.row(partner(i)))).sum::<f64>() / n as f64;
        (align + nce_u, align + pooled.ln(), asym + c.lambda * pooled.ln())
    }

    fn ladder() -> Tensor {
        Tensor::from_rows(&[E1, E2, E1, E2]).unwrap()
    }

    #[test]
    fn nce_identical_pair() {
        let v = eval(|g| {
            let z = g.constant(Tensor::from_rows(&[E1, E1]).unwrap());
            nce(g, z, &cfg(1.0, 0.1))
        });
        assert_eq!(v.alignment, -1.0);
        assert!((v.uniformity - 1.0).abs() < 1e-15);
        assert!(v.total.abs() < 1e-15);
    }

    #[test]
    fn worked_examples() {
        let c = cfg(1.0, 0.1);
        let nce_v = eval(|g| {
            let z = g.constant(ladder());
            nce(g, z, &c)
        });
        let e = core::f64::consts::E;
        assert!((nce_v.total - ((2.0 + e).ln() - 1.0)).abs() < 1e-10);
        assert!((nce_v.total - 0.5515).abs() < 1e-4);

        let mine_v = eval(|g| {
            let z = g.constant(ladder());
            mine(g, z, &c)
        });
        assert!((mine_v.uniformity - 8f64.ln()).abs() < 1e-10);
        assert!((mine_v.total - (8f64.ln() - 1.0)).abs() < 1e-10);
        assert!((mine_v.total - 1.0794).abs() < 1e-4);

        let amine_v = eval(|g| {
            let z = g.constant(ladder());
            let p = g.constant(ladder());
            amine(g, z, p, &c)
        });
        assert!((amine_v.alignment + 1.0).abs() < 1e-10);
        assert!((amine_v.total - (0.1 * 8f64.ln() - 1.0)).abs() < 1e-10);
        assert!((amine_v.total + 0.7921).abs() < 1e-4);

        let mut g = Graph::new();
        let d = g.constant(Tensor::from_rows(&[[0.6, 0.8], [0.0, 1.0]]).unwrap());
        let z = g.constant(Tensor::from_rows(&[E1, E2]).unwrap());
        let l = distill(&mut g, d, z).unwrap();
        assert!((g.value(l).data()[0] + 0.8).abs() < 1e-12);
    }

    #[test]
    fn distill_boundaries() {
        let mut r = rng::seeded(11);
        let z = unit_rows(&mut r, 6, 5);
        let mut g = Graph::new();
        let a = g.constant(z.clone());
        let b = g.constant(z.clone());
        let same = distill(&mut g, a, b).unwrap();
        assert!((g.value(same).data()[0] + 1.0).abs() < 1e-12);
        let o1 = g.constant(Tensor::from_rows(&[E1, E2]).unwrap());
        let o2 = g.constant(Tensor::from_rows(&[E2, E1]).unwrap());
        let orth = distill(&mut g, o1, o2).unwrap();
        assert_eq!(g.value(orth).data()[0], 0.0);
        let c = g.constant(z.select_rows(&[0, 1, 2, 3]).unwrap());
        assert!(matches!(distill(&mut g, a, c), Err(Error::Contract(_))));
    }

    #[test]
    fn total_mixes_by_alpha() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(-0.7921));
        let d = g.constant(Tensor::scalar(-0.8));
        for (alpha, want) in [(1.0, -0.7921), (0.0, -0.8), (0.5, -0.79605)] {
            let c = LossConfig { alpha, ..LossConfig::default() };
            let t = total(&mut g, a, d, &c).unwrap();
            assert!((g.value(t).data()[0] - want).abs() < 1e-12, "alpha {}", alpha);
        }
        let exact = total(&mut g, a, d, &LossConfig { alpha: 1.0, ..LossConfig::default() }).unwrap();
        assert_eq!(g.value(exact).data()[0], -0.7921);
        assert!(total(&mut g, a, d, &LossConfig { alpha: 1.5, ..LossConfig::default() }).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::from_rows(&[[0.0, 0.0]]).unwrap());
        let ce = cross_entropy(&mut g, l, &[0]).unwrap();
        assert!((g.value(ce).data()[0] - 2f64.ln()).abs() < 1e-15);
        let l = g.constant(Tensor::from_rows(&[[60.0, -60.0]]).unwrap());
        let ce = cross_entropy(&mut g, l, &[0]).unwrap();
        assert!(g.value(ce).data()[0] < 1e-40);
        assert!(matches!(cross_entropy(&mut g, l, &[2]), Err(Error::Contract(_))));

        let mut r = rng::seeded(4);
        let logits = Tensor::matrix(4, 3, (0..12).map(|_| 3.0 * rng::normal(&mut r)).collect()).unwrap();
        let labels = [2, 0, 1, 1];
        let mut want = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = logits.row(i);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            want -= (row[y].exp() / z).ln();
        }
        want /= 4.0;
        let l = g.constant(logits);
        let ce = cross_entropy(&mut g, l, &labels).unwrap();
        assert!((g.value(ce).data()[0] - want).abs() < 1e-10);
    }

    #[test]
    fn contract_violations() {
        let mut g = Graph::new();
        let odd = g.constant(Tensor::from_rows(&[E1, E2, E1]).unwrap());
        assert!(matches!(nce(&mut g, odd, &cfg(1.0, 0.1)), Err(Error::Contract(_))));
        let off = g.constant(Tensor::from_rows(&[[1.0, 0.1], E2]).unwrap());
        assert!(matches!(mine(&mut g, off, &cfg(1.0, 0.1)), Err(Error::Contract(_))));
        let single = g.constant(Tensor::from_rows(&[E1, E2]).unwrap());
        assert!(matches!(mine(&mut g, single, &cfg(1.0, 0.1)), Err(Error::Contract(_))));
        let self_only = LossConfig { neg: NegPolicy::ExcludeSelfOnly, ..cfg(1.0, 0.1) };
        assert!(mine(&mut g, single, &self_only).is_ok());
        assert!(nce(&mut g, single, &LossConfig { tau: 0.0, ..cfg(1.0, 0.1) }).is_err());
    }

    #[test]
    fn duplicating_a_negative_raises_mine_uniformity() {
        let mut r = rng::seeded(8);
        let z = unit_rows(&mut r, 4, 3);
        let u = |t: Tensor| eval(|g| {
            let z = g.constant(t.clone());
            mine(g, z, &cfg(1.0, 0.1))
        }).uniformity;
        let base = u(z.clone());
        // Rows [z0 z1 z0 | z2 z3 z0]: the original pairs are kept and an extra
        // copy of z0 joins every negative set.
        let rows: Vec<Vec<f64>> = [0usize, 1, 0, 2, 3, 0].iter().map(|&i| z.row(i).to_vec()).collect();
        let bigger = Tensor::from_rows(&rows).unwrap();
        assert!(u(bigger) > base);
    }

    #[test]
    fn amine_alignment_has_bit_zero_gradient_in_z() {
        let mut r = rng::seeded(21);
        let z = unit_rows(&mut r, 8, 6);
        let p = unit_rows(&mut r, 8, 6);
        let mut g = Graph::new();
        let zv = g.param(z);
        let pv = g.param(p);
        let l = amine(&mut g, zv, pv, &cfg(2.0, 0.1)).unwrap();
        let dz = g.gradient(l.alignment, zv).unwrap();
        assert!(dz.data().iter().all(|v| v.to_bits() == 0));
        let dp = g.gradient(l.alignment, pv).unwrap();
        assert!(dp.data().iter().any(|&v| v != 0.0));
        // With lambda = 0 the total sees z only through the stop-gradient.
        let l0 = amine(&mut g, zv, pv, &cfg(2.0, 0.0)).unwrap();
        assert!(g.gradient(l0.total, zv).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng::seeded(99);
        let c = LossConfig::default();
        for &b in &[2usize, 4, 8] {
            for &d in &[4usize, 16] {
                let x = Tensor::matrix(2 * b, d, (0..2 * b * d).map(|_| rng::normal(&mut r)).collect()).unwrap();
                let other = unit_rows(&mut r, 2 * b, d);
                let checks: [&LossFn<'_>; 5] = [
                    &|g, x| {
                        let z = g.l2_normalize_rows(x)?;
                        Ok(nce(g, z, &c)?.total)
                    },
                    &|g, x| {
                        let z = g.l2_normalize_rows(x)?;
                        Ok(mine(g, z, &c)?.total)
                    },
                    &|g, x| {
                        let p = g.l2_normalize_rows(x)?;
                        let z = g.constant(other.clone());
                        Ok(amine(g, z, p, &c)?.total)
                    },
                    // z reaches the total only through the weighted uniformity.
                    &|g, x| {
                        let z = g.l2_normalize_rows(x)?;
                        let p = g.constant(other.clone());
                        let l = amine(g, z, p, &c)?;
                        g.scale(l.uniformity, l.weight)
                    },
                    &|g, x| {
                        let ds = g.l2_normalize_rows(x)?;
                        let zt = g.constant(other.clone());
                        let a = amine(g, zt, ds, &c)?.total;
                        let dl = distill(g, ds, zt)?;
                        total(g, a, dl, &c)
                    },
                ];
                for (k, f) in checks.iter().enumerate() {
                    let err = grad_check(f, &x, 1e-5).unwrap();
                    assert!(err < 1e-4, "loss {} at B={} d={}: {}", k, b, d, err);
                }
            }
        }
    }

    #[test]
    fn mine_pooled_log_dominates_nce_row_average() {
        // Jensen: (1/2B) sum_i log S_i <= log sum_i S_i - log(2B).
        let self_only = LossConfig { neg: NegPolicy::ExcludeSelfOnly, ..cfg(1.0, 0.1) };
        let mut r = rng::seeded(13);
        for _ in 0..50 {
            let z = unit_rows(&mut r, 4, 3);
            let n = eval(|g| {
                let v = g.constant(z.clone());
                nce(g, v, &self_only)
            });
            let m = eval(|g| {
                let v = g.constant(z.clone());
                mine(g, v, &self_only)
            });
            assert!(n.uniformity <= m.uniformity - 4f64.ln() + 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn losses_match_brute_force(seed in any::<u64>(), b in 2usize..6, d in 2usize..7, tau in 0.5f64..3.0, lambda in 0.0f64..1.0, self_only in any::<bool>()) {
            let mut r = rng::seeded(seed);
            let z = unit_rows(&mut r, 2 * b, d);
            let p = unit_rows(&mut r, 2 * b, d);
            let neg = if self_only { NegPolicy::ExcludeSelfOnly } else { NegPolicy::ExcludeSelfAndPositive };
            let c = LossConfig { tau, lambda, alpha: 0.5, neg };
            let (want_nce, want_mine, want_amine) = oracle(&z, &p, &c);
            let mut g = Graph::new();
            let zv = g.constant(z);
            let pv = g.constant(p);
            let losses = [nce(&mut g, zv, &c).unwrap(), mine(&mut g, zv, &c).unwrap(), amine(&mut g, zv, pv, &c).unwrap()];
            for (l, want) in losses.iter().zip([want_nce, want_mine, want_amine]) {
                let v = l.values(&g);
                prop_assert!((v.total - want).abs() < 1e-10);
                prop_assert!((v.total - (v.alignment + l.weight * v.uniformity)).abs() < 1e-10);
            }
        }

        #[test]
        fn rotation_and_pair_permutation_invariance(seed in any::<u64>(), b in 2usize..6, d in 2usize..6) {
            let mut r = rng::seeded(seed);
            let z = unit_rows(&mut r, 2 * b, d);
            let p = unit_rows(&mut r, 2 * b, d);
            let c = LossConfig::default();
            let all = |z: &Tensor, p: &Tensor| -> [f64; 4] {
                let mut g = Graph::new();
                let zv = g.constant(z.clone());
                let pv = g.constant(p.clone());
                [
                    nce(&mut g, zv, &c).unwrap().values(&g).total,
                    mine(&mut g, zv, &c).unwrap().values(&g).total,
                    amine(&mut g, zv, pv, &c).unwrap().values(&g).total,
                    { let l = distill(&mut g, pv, zv).unwrap(); g.value(l).data()[0] },
                ]
            };
            let base = all(&z, &p);

            let q = random_orthogonal(&mut r, d);
            let rot = |t: &Tensor| {
                let mut out = Tensor::zeros(t.shape());
                for i in 0..t.rows() {
                    for j in 0..d {
                        out.row_mut(i)[j] = (0..d).map(|k| t.row(i)[k] * q[k * d + j]).sum();
                    }
                }
                out
            };
            for (x, y) in all(&rot(&z), &rot(&p)).iter().zip(&base) {
                prop_assert!((x - y).abs() < 1e-8);
            }

            let mut perm: Vec<usize> = (0..b).collect();
            perm.shuffle(&mut r);
            let order: Vec<usize> = perm.iter().copied().chain(perm.iter().map(|i| i + b)).collect();
            let permuted = all(&z.select_rows(&order).unwrap(), &p.select_rows(&order).unwrap());
            for (x, y) in permuted.iter().zip(&base) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }
    }

    /// Gram-Schmidt on a Gaussian matrix.
    fn random_orthogonal(r: &mut rng::Rng, d: usize) -> Vec<f64> {
        let mut q: Vec<Vec<f64>> = Vec::new();
        while q.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng::normal(r)).collect();
            for u in &q {
                let c = brute_dot(&v, u);
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= c * b);
            }
            let n = math::norm(&v);
            if n > 1e-6 {
                q.push(v.into_iter().map(|a| a / n).collect());
            }
        }
        q.concat()
    }
}
