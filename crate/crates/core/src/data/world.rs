use alloc::format;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::math;
use crate::rng::{self, Rng};
use crate::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Generation parameters of a [`SyntheticWorld`].
///
/// A sample of class `c` is `A (mu_c + latent_noise * e) + nuisance * eps`
/// with `A` a `d x k` mixing matrix with orthonormal columns scaled by
/// `signal_scale`, `mu_c ~ N(0, I_k)`, `e ~ N(0, I_k)` and `eps ~ N(0, I_d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldParams {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub latent: usize,
    pub nuisance: f64,
    pub latent_noise: f64,
    pub signal_scale: f64,
    /// Way count the splits must support; `classes >= 3 * n_way`.
    pub n_way: usize,
    /// Class counts of the train, val and test splits.
    pub split: [usize; 3],
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            classes: 20,
            per_class: 200,
            dim: 64,
            latent: 8,
            nuisance: 0.1,
            latent_noise: 0.6,
            signal_scale: 0.15,
            n_way: 5,
            split: [10, 5, 5],
        }
    }
}

impl WorldParams {
    /// Default split for `classes`: one `n_way` block each for val and test,
    /// the rest for training.
    pub fn default_split(classes: usize, n_way: usize) -> [usize; 3] {
        [classes.saturating_sub(2 * n_way), n_way, n_way]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::Config(m));
        if self.n_way < 2 {
            return bad(format!("n_way must be at least 2, got {}", self.n_way));
        }
        if self.classes < 3 * self.n_way {
            return bad(format!(
                "{} classes cannot form three class-disjoint {}-way splits",
                self.classes, self.n_way
            ));
        }
        if self.split.iter().sum::<usize>() != self.classes || self.split.contains(&0) {
            return bad(format!("split {:?} must be positive and sum to {} classes", self.split, self.classes));
        }
        if self.per_class == 0 || self.dim == 0 || self.latent == 0 {
            return bad("per_class, dim and latent must be positive".into());
        }
        if self.latent > self.dim {
            return bad(format!("latent dim {} exceeds ambient dim {}", self.latent, self.dim));
        }
        for (name, v) in [
            ("nuisance", self.nuisance),
            ("latent_noise", self.latent_noise),
            ("signal_scale", self.signal_scale),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{} must be finite and non-negative, got {}", name, v));
            }
        }
        Ok(())
    }
}

/// Generator state: prototypes and mixing matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub params: WorldParams,
    pub seed: u64,
    /// `C x k`.
    pub prototypes: Tensor,
    /// `d x k`.
    pub mixing: Tensor,
}

/// Class-grouped samples of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodePool {
    pub split: Split,
    /// Global class ids.
    pub classes: Vec<usize>,
    /// One `M x d` matrix per entry of `classes`.
    pub samples: Vec<Tensor>,
}

impl EpisodePool {
    pub fn new(split: Split, classes: Vec<usize>, samples: Vec<Tensor>) -> Result<Self> {
        if classes.len() != samples.len() || classes.is_empty() {
            return Err(contract!("pool needs one sample matrix per class"));
        }
        let d = samples[0].cols();
        if samples.iter().any(|s| s.rank() != 2 || s.cols() != d) {
            return Err(contract!("pool sample matrices must share a width"));
        }
        Ok(Self { split, classes, samples })
    }

    pub fn dim(&self) -> usize {
        self.samples[0].cols()
    }

    pub fn len(&self) -> usize {
        self.samples.iter().map(|s| s.rows()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All rows stacked class by class, with local class indices as labels.
    pub fn flatten(&self) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(self.len() * self.dim());
        let mut labels = Vec::with_capacity(self.len());
        for (c, s) in self.samples.iter().enumerate() {
            data.extend_from_slice(s.data());
            labels.extend(core::iter::repeat_n(c, s.rows()));
        }
        (Tensor::matrix(labels.len(), self.dim(), data).expect("non-empty pool"), labels)
    }

    /// Apply `f` to every class matrix (e.g. an encoder).
    pub fn map(&self, mut f: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<Self> {
        let samples = self.samples.iter().map(&mut f).collect::<Result<Vec<_>>>()?;
        Self::new(self.split, self.classes.clone(), samples)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pools {
    pub train: EpisodePool,
    pub val: EpisodePool,
    pub test: EpisodePool,
}

impl Pools {
    pub fn get(&self, split: Split) -> &EpisodePool {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Orthonormal `d x k` columns via Gram-Schmidt on Gaussian draws.
fn orthonormal_columns(rng: &mut Rng, d: usize, k: usize) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| rng::normal(rng)).collect();
        for u in &cols {
            let c = math::dot(&v, u);
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= c * b);
        }
        let n = math::norm(&v);
        if n > 1e-8 {
            cols.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    cols
}

/// Build the world and its class-disjoint train/val/test pools.
///
/// Classes `0..train` form the train split, the next `val` the validation
/// split and the remainder the test split. Everything is drawn from the
/// stream-0 generator of `seed` in a fixed order.
pub fn make_world(params: &WorldParams, seed: u64) -> Result<(SyntheticWorld, Pools)> {
    params.validate()?;
    let (c, m, d, k) = (params.classes, params.per_class, params.dim, params.latent);
    let mut rng = rng::seeded(seed);
    let prototypes = Tensor::matrix(c, k, (0..c * k).map(|_| rng::normal(&mut rng)).collect())?;
    let cols = orthonormal_columns(&mut rng, d, k);
    let mut mixing = Tensor::zeros(&[d, k]);
    for (j, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            mixing.row_mut(i)[j] = params.signal_scale * v;
        }
    }

    let mut per_class = Vec::with_capacity(c);
    let mut latent = alloc::vec![0.0; k];
    for class in 0..c {
        let mut data = Vec::with_capacity(m * d);
        for _ in 0..m {
            for (j, l) in latent.iter_mut().enumerate() {
                *l = prototypes.row(class)[j] + params.latent_noise * rng::normal(&mut rng);
            }
            for i in 0..d {
                let signal = math::dot(mixing.row(i), &latent);
                data.push(signal + params.nuisance * rng::normal(&mut rng));
            }
        }
        per_class.push(Tensor::matrix(m, d, data)?);
    }

    let [tr, va, _] = params.split;
    let mut pools = [(Split::Train, 0..tr), (Split::Val, tr..tr + va), (Split::Test, tr + va..c)]
        .into_iter()
        .map(|(split, range)| {
            let classes: Vec<usize> = range.collect();
            let samples = classes.iter().map(|&i| per_class[i].clone()).collect();
            EpisodePool::new(split, classes, samples)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter();
    let pools = Pools {
        train: pools.next().expect("three pools"),
        val: pools.next().expect("three pools"),
        test: pools.next().expect("three pools"),
    };
    Ok((SyntheticWorld { params: params.clone(), seed, prototypes, mixing }, pools))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldParams {
        WorldParams { per_class: 30, ..WorldParams::default() }
    }

    #[test]
    fn explicit_split_counts() {
        let p = WorldParams { split: [12, 4, 4], ..small() };
        let (_, pools) = make_world(&p, 1).unwrap();
        assert_eq!(pools.train.classes.len(), 12);
        assert_eq!(pools.val.classes.len(), 4);
        assert_eq!(pools.test.classes.len(), 4);
    }

    #[test]
    fn splits_are_disjoint_and_cover_all_classes() {
        let (_, pools) = make_world(&small(), 2).unwrap();
        let mut all: Vec<usize> = [&pools.train, &pools.val, &pools.test]
            .iter()
            .flat_map(|p| p.classes.iter().copied())
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        assert_eq!(pools.train.samples[0].shape(), &[30, 64]);
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let a = make_world(&small(), 9).unwrap();
        let b = make_world(&small(), 9).unwrap();
        assert_eq!(a, b);
        let c = make_world(&small(), 10).unwrap();
        assert_ne!(a.1.train, c.1.train);
    }

    #[test]
    fn too_few_classes_is_a_config_error() {
        let p = WorldParams { classes: 14, split: [4, 5, 5], ..small() };
        assert!(matches!(make_world(&p, 0), Err(Error::Config(_))));
        let p = WorldParams { split: [10, 5, 4], ..small() };
        assert!(matches!(make_world(&p, 0), Err(Error::Config(_))));
        let p = WorldParams { latent: 65, ..small() };
        assert!(matches!(make_world(&p, 0), Err(Error::Config(_))));
    }

    #[test]
    fn within_class_distance_below_between_class() {
        let p = WorldParams { per_class: 60, ..WorldParams::default() };
        let (_, pools) = make_world(&p, 3).unwrap();
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let mut r = rng::seeded(4);
        use rand::Rng as _;
        let (mut within, mut between) = (0.0, 0.0);
        let n = 4000;
        for _ in 0..n {
            let c1 = r.random_range(0..10);
            let c2 = (c1 + r.random_range(1..10)) % 10;
            let s = &pools.train.samples;
            let (i, j, l) = (r.random_range(0..60), r.random_range(0..60), r.random_range(0..60));
            within += dist(s[c1].row(i), s[c1].row(j));
            between += dist(s[c1].row(i), s[c2].row(l));
        }
        assert!(within / n as f64 + 0.1 < between / n as f64);
    }

    #[test]
    fn flatten_labels_follow_class_order() {
        let (_, pools) = make_world(&small(), 5).unwrap();
        let (x, y) = pools.test.flatten();
        assert_eq!(x.rows(), 150);
        assert_eq!(y[0], 0);
        assert_eq!(y[149], 4);
        assert_eq!(x.row(30), pools.test.samples[1].row(0));
    }
}
