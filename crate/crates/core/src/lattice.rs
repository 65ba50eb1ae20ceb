//! Environments: transition kernels, i.i.d. environment laws and their lazy
//! realizations on `Z^d`.
//!
//! An environment assigns a kernel to every site. Realizations are lazy: the
//! kernel at a site is derived on first use from a stream keyed by
//! `(env_seed, site)` and memoized, so the environment is a well-defined
//! field no matter in which order walkers explore it.

use std::fmt;
use std::sync::Arc;

use dashmap::DashMap;
use rand::Rng;
use rustc_hash::{FxBuildHasher, FxHashSet};
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{config, usage, Result};
use crate::scalar::Scalar;
use crate::seeding::{self, Stream};
use crate::walk::WalkPath;

/// A point of `Z^d`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Site(pub SmallVec<[i32; 4]>);

impl Site {
    pub fn new(coords: &[i32]) -> Self {
        Site(SmallVec::from_slice(coords))
    }

    pub fn origin(dim: usize) -> Self {
        Site(SmallVec::from_elem(0, dim))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[i32] {
        &self.0
    }

    /// `⟨self, e_1⟩`.
    pub fn level(&self) -> i64 {
        self.0[0] as i64
    }

    /// Neighbor in direction index `dir` (see [`direction_index`]).
    pub fn neighbor(&self, dir: usize) -> Site {
        let mut out = self.clone();
        out.0[dir / 2] += if dir % 2 == 0 { 1 } else { -1 };
        out
    }

    /// Sup-norm distance.
    pub fn sup_distance(&self, other: &Site) -> i64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(&a, &b)| (a as i64 - b as i64).abs())
            .max()
            .unwrap_or(0)
    }
}

impl fmt::Debug for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0.as_slice())
    }
}

impl From<&[i32]> for Site {
    fn from(c: &[i32]) -> Self {
        Site::new(c)
    }
}

/// Directions are indexed `+e_1, -e_1, +e_2, -e_2, ...`.
pub fn direction_index(axis: usize, positive: bool) -> usize {
    2 * axis + usize::from(!positive)
}

/// Exit probabilities over the `2d` unit directions.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
#[serde(bound(serialize = "S: Serialize", deserialize = "S: Deserialize<'de>"))]
pub struct TransitionKernel<S: Scalar> {
    probs: SmallVec<[S; 8]>,
}

impl<S: Scalar> fmt::Debug for TransitionKernel<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.probs.iter()).finish()
    }
}

impl<S: Scalar> TransitionKernel<S> {
    /// Build from `2d` entries. Only the shape is checked here; see
    /// [`validate_ellipticity`] for the probabilistic constraints.
    pub fn new(probs: Vec<S>) -> Result<Self> {
        if probs.is_empty() || probs.len() % 2 != 0 {
            return config(format!(
                "a kernel needs 2d entries, got {}",
                probs.len()
            ));
        }
        Ok(Self {
            probs: SmallVec::from_vec(probs),
        })
    }

    /// The uniform kernel `1/(2d)`.
    pub fn uniform(dim: usize) -> Self {
        let p = S::one() / S::from_usize(2 * dim).unwrap();
        Self {
            probs: SmallVec::from_elem(p, 2 * dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.probs.len() / 2
    }

    pub fn probs(&self) -> &[S] {
        &self.probs
    }

    pub fn prob(&self, dir: usize) -> &S {
        &self.probs[dir]
    }

    pub fn sum(&self) -> S {
        self.probs.iter().fold(S::zero(), |acc, p| acc + p.clone())
    }

    pub fn min_entry(&self) -> &S {
        self.probs
            .iter()
            .min_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal))
            .unwrap()
    }

    /// Mean step `Σ_e p(e) e`.
    pub fn mean_step(&self) -> Vec<S> {
        (0..self.dim())
            .map(|i| self.probs[2 * i].clone() - self.probs[2 * i + 1].clone())
            .collect()
    }

    /// Pick a direction index from a uniform `u ∈ [0, 1)`.
    #[inline]
    pub fn pick(&self, u: f64) -> usize {
        let mut acc = 0.0;
        let last = self.probs.len() - 1;
        for (i, p) in self.probs.iter().enumerate().take(last) {
            acc += p.as_f64();
            if u < acc {
                return i;
            }
        }
        last
    }
}

/// True iff every entry is at least `kappa` and the entries sum to one, both
/// up to the scalar's tolerance.
pub fn validate_ellipticity<S: Scalar>(kernel: &TransitionKernel<S>, kappa: &S) -> bool {
    let floor = kappa.clone() - S::tolerance();
    kernel.probs.iter().all(|p| *p >= floor) && S::approx_eq(&kernel.sum(), &S::one())
}

/// Law of the per-axis perturbation in the perturbed-drift family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationRule {
    /// `U ~ Uniform[-1, 1]`.
    Uniform,
    /// `U = ±1` with equal probability.
    Rademacher,
}

/// The single-site law `Q`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[serde(bound(serialize = "S: Serialize", deserialize = "S: Deserialize<'de>"))]
pub enum Family<S: Scalar> {
    PointMass {
        kernel: TransitionKernel<S>,
    },
    FiniteMixture {
        components: Vec<(TransitionKernel<S>, S)>,
    },
    /// For each axis `i` an independent symmetric `U_i` is drawn and
    /// `p(+e_i) = b(+e_i) + ε U_i`, `p(-e_i) = b(-e_i) - ε U_i`. The total mass
    /// is preserved exactly.
    PerturbedDrift {
        base: TransitionKernel<S>,
        amplitude: S,
        rule: PerturbationRule,
    },
}

/// `Q` together with its ellipticity constant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(bound(serialize = "S: Serialize", deserialize = "S: Deserialize<'de>"))]
pub struct EnvDistribution<S: Scalar> {
    pub family: Family<S>,
    pub kappa: S,
}

impl<S: Scalar> EnvDistribution<S> {
    pub fn new(family: Family<S>, kappa: S) -> Result<Self> {
        let dist = Self { family, kappa };
        dist.validate()?;
        Ok(dist)
    }

    pub fn point_mass(kernel: TransitionKernel<S>, kappa: S) -> Result<Self> {
        Self::new(Family::PointMass { kernel }, kappa)
    }

    pub fn mixture(components: Vec<(TransitionKernel<S>, S)>, kappa: S) -> Result<Self> {
        Self::new(Family::FiniteMixture { components }, kappa)
    }

    pub fn perturbed(
        base: TransitionKernel<S>,
        amplitude: S,
        rule: PerturbationRule,
        kappa: S,
    ) -> Result<Self> {
        Self::new(
            Family::PerturbedDrift {
                base,
                amplitude,
                rule,
            },
            kappa,
        )
    }

    pub fn dim(&self) -> usize {
        match &self.family {
            Family::PointMass { kernel } => kernel.dim(),
            Family::FiniteMixture { components } => {
                components.first().map(|(k, _)| k.dim()).unwrap_or(0)
            }
            Family::PerturbedDrift { base, .. } => base.dim(),
        }
    }

    /// Finite support: point masses and finite mixtures.
    pub fn support(&self) -> Option<Vec<(TransitionKernel<S>, S)>> {
        match &self.family {
            Family::PointMass { kernel } => Some(vec![(kernel.clone(), S::one())]),
            Family::FiniteMixture { components } => Some(components.clone()),
            Family::PerturbedDrift { .. } => None,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(self.family, Family::PointMass { .. })
    }

    /// Annealed mean of the local drift, `E_Q[Σ_e ω(0,e) e]`.
    pub fn mean_drift(&self) -> Vec<f64> {
        let d = self.dim();
        match &self.family {
            Family::PointMass { kernel } => kernel.mean_step().iter().map(S::as_f64).collect(),
            Family::FiniteMixture { components } => {
                let mut out = vec![0.0; d];
                for (k, w) in components {
                    for (o, m) in out.iter_mut().zip(k.mean_step()) {
                        *o += w.as_f64() * m.as_f64();
                    }
                }
                out
            }
            // perturbations are symmetric
            Family::PerturbedDrift { base, .. } => base.mean_step().iter().map(S::as_f64).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return config("environment law has no kernels");
        }
        let cap = S::one() / S::from_usize(2 * d).unwrap();
        if self.kappa <= S::zero() || self.kappa > cap {
            return config(format!(
                "kappa must lie in (0, 1/(2d)] = (0, {:?}], got {:?}",
                cap, self.kappa
            ));
        }
        let check = |k: &TransitionKernel<S>, what: &str| -> Result<()> {
            if k.dim() != d {
                return config(format!("{what}: kernel dimension {} != {d}", k.dim()));
            }
            if !validate_ellipticity(k, &self.kappa) {
                return config(format!(
                    "{what}: kernel {k:?} is not a probability vector with entries >= kappa = {:?}",
                    self.kappa
                ));
            }
            Ok(())
        };
        match &self.family {
            Family::PointMass { kernel } => check(kernel, "point mass"),
            Family::FiniteMixture { components } => {
                if components.is_empty() {
                    return config("finite mixture needs at least one component");
                }
                let mut total = S::zero();
                for (i, (k, w)) in components.iter().enumerate() {
                    check(k, &format!("mixture component {i}"))?;
                    if *w < S::zero() {
                        return config(format!("mixture weight {i} is negative"));
                    }
                    total = total + w.clone();
                }
                if !S::approx_eq(&total, &S::one()) {
                    return config(format!("mixture weights sum to {total:?}, not 1"));
                }
                Ok(())
            }
            Family::PerturbedDrift {
                base, amplitude, ..
            } => {
                check(base, "perturbed-drift base")?;
                if *amplitude < S::zero() {
                    return config("perturbation amplitude must be non-negative");
                }
                for axis in 0..d {
                    let lo = if base.probs[2 * axis] < base.probs[2 * axis + 1] {
                        &base.probs[2 * axis]
                    } else {
                        &base.probs[2 * axis + 1]
                    };
                    if lo.clone() - amplitude.clone() + S::tolerance() < self.kappa {
                        return config(format!(
                            "perturbation amplitude {amplitude:?} breaks ellipticity on axis {}: \
                             min(base) - amplitude < kappa",
                            axis + 1
                        ));
                    }
                }
                Ok(())
            }
        }
    }
}

/// Draw one kernel from `Q`.
pub fn sample_kernel<S: Scalar>(dist: &EnvDistribution<S>, stream: &mut Stream) -> TransitionKernel<S> {
    let kernel = match &dist.family {
        Family::PointMass { kernel } => kernel.clone(),
        Family::FiniteMixture { components } => {
            let u: f64 = stream.random();
            let mut acc = 0.0;
            let mut chosen = &components[components.len() - 1].0;
            for (k, w) in components {
                acc += w.as_f64();
                if u < acc {
                    chosen = k;
                    break;
                }
            }
            chosen.clone()
        }
        Family::PerturbedDrift {
            base,
            amplitude,
            rule,
        } => {
            let mut probs = base.probs.clone();
            for axis in 0..base.dim() {
                let u = match rule {
                    PerturbationRule::Uniform => 2.0 * stream.random::<f64>() - 1.0,
                    PerturbationRule::Rademacher => {
                        if stream.random::<bool>() {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                };
                let shift = amplitude.clone() * S::from_f64_lossy(u);
                probs[2 * axis] = probs[2 * axis].clone() + shift.clone();
                probs[2 * axis + 1] = probs[2 * axis + 1].clone() - shift;
            }
            TransitionKernel { probs }
        }
    };
    debug_assert!(validate_ellipticity(&kernel, &dist.kappa));
    kernel
}

/// Kernel at `site` for the i.i.d. field with seed `seed`.
fn derive_kernel<S: Scalar>(dist: &EnvDistribution<S>, seed: u64, site: &[i32]) -> TransitionKernel<S> {
    let mut s = seeding::stream(seeding::site_seed(seed, site));
    sample_kernel(dist, &mut s)
}

#[derive(Clone, Debug)]
enum KernelSource {
    Iid {
        seed: u64,
    },
    /// Sites in `designated` take the shared field `J`, others the own field.
    Overlay {
        designated: Arc<FxHashSet<Site>>,
        shared_seed: u64,
        own_seed: u64,
    },
}

/// One realization `ω ~ P = Q^{Z^d}`, materialized on demand.
pub struct LazyEnvironment<S: Scalar> {
    dist: Arc<EnvDistribution<S>>,
    source: KernelSource,
    memo: DashMap<Site, TransitionKernel<S>, FxBuildHasher>,
}

impl<S: Scalar> fmt::Debug for LazyEnvironment<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LazyEnvironment")
            .field("source", &self.source)
            .field("materialized", &self.memo.len())
            .finish()
    }
}

impl<S: Scalar> LazyEnvironment<S> {
    pub fn new(dist: EnvDistribution<S>, env_seed: u64) -> Result<Self> {
        dist.validate()?;
        Ok(Self::from_shared(Arc::new(dist), env_seed))
    }

    /// Environment sharing an already validated law.
    pub fn from_shared(dist: Arc<EnvDistribution<S>>, env_seed: u64) -> Self {
        Self {
            dist,
            source: KernelSource::Iid { seed: env_seed },
            memo: DashMap::with_hasher(FxBuildHasher),
        }
    }

    fn overlay(
        dist: Arc<EnvDistribution<S>>,
        designated: Arc<FxHashSet<Site>>,
        shared_seed: u64,
        own_seed: u64,
    ) -> Self {
        Self {
            dist,
            source: KernelSource::Overlay {
                designated,
                shared_seed,
                own_seed,
            },
            memo: DashMap::with_hasher(FxBuildHasher),
        }
    }

    pub fn dist(&self) -> &EnvDistribution<S> {
        &self.dist
    }

    pub fn shared_dist(&self) -> Arc<EnvDistribution<S>> {
        self.dist.clone()
    }

    pub fn dim(&self) -> usize {
        self.dist.dim()
    }

    /// Seed of the environment's own field.
    pub fn env_seed(&self) -> u64 {
        match &self.source {
            KernelSource::Iid { seed } => *seed,
            KernelSource::Overlay { own_seed, .. } => *own_seed,
        }
    }

    /// Number of memoized sites.
    pub fn materialized(&self) -> usize {
        self.memo.len()
    }

    fn derive(&self, site: &[i32]) -> TransitionKernel<S> {
        match &self.source {
            KernelSource::Iid { seed } => derive_kernel(&self.dist, *seed, site),
            KernelSource::Overlay {
                designated,
                shared_seed,
                own_seed,
            } => {
                let key = Site::new(site);
                if designated.contains(&key) {
                    derive_kernel(&self.dist, *shared_seed, site)
                } else {
                    derive_kernel(&self.dist, *own_seed, site)
                }
            }
        }
    }

    /// `ω(site, ·)`.
    pub fn kernel_at(&self, site: &[i32]) -> Result<TransitionKernel<S>> {
        if site.len() != self.dim() {
            return usage(format!(
                "site of dimension {} queried in a {}-dimensional environment",
                site.len(),
                self.dim()
            ));
        }
        Ok(self.with_kernel(site, |k| k.clone()))
    }

    /// Run `f` on the kernel at `site` without cloning it.
    #[inline]
    pub fn with_kernel<T>(&self, site: &[i32], f: impl FnOnce(&TransitionKernel<S>) -> T) -> T {
        if let Family::PointMass { kernel } = &self.dist.family {
            return f(kernel);
        }
        let key = Site::new(site);
        if let Some(k) = self.memo.get(&key) {
            return f(&k);
        }
        // Derivation is pure, so a racing insert of the same site is harmless.
        let kernel = self.derive(site);
        let entry = self.memo.entry(key).or_insert(kernel);
        f(&entry)
    }
}

/// Seeds of the three-environment coupling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CouplingSeeds {
    /// Seeds of the independent fields `η^(1)`, `η^(2)`, `η^(3)`.
    pub eta: [u64; 3],
    /// Seed of the shared field `J`.
    pub shared: u64,
}

/// Three environments built around two deterministic paths: `env1` and `env3`
/// agree on the sites of `lambda1`, `env2` and `env3` agree on the sites of
/// `lambda2`, and the fields off the paths are mutually independent.
#[derive(Debug)]
pub struct CoupledTriple<S: Scalar> {
    pub env1: LazyEnvironment<S>,
    pub env2: LazyEnvironment<S>,
    pub env3: LazyEnvironment<S>,
    pub lambda1: WalkPath,
    pub lambda2: WalkPath,
    pub shared_seed: u64,
}

pub fn make_coupled_triple<S: Scalar>(
    lambda1: &WalkPath,
    lambda2: &WalkPath,
    dist: EnvDistribution<S>,
    seeds: CouplingSeeds,
) -> Result<CoupledTriple<S>> {
    dist.validate()?;
    if lambda1.dim() != dist.dim() || lambda2.dim() != dist.dim() {
        return usage("coupling paths must have the environment's dimension");
    }
    let dist = Arc::new(dist);
    let sites1: FxHashSet<Site> = lambda1.sites().collect();
    let sites2: FxHashSet<Site> = lambda2.sites().collect();
    let union: FxHashSet<Site> = sites1.union(&sites2).cloned().collect();
    Ok(CoupledTriple {
        env1: LazyEnvironment::overlay(dist.clone(), Arc::new(sites1), seeds.shared, seeds.eta[0]),
        env2: LazyEnvironment::overlay(dist.clone(), Arc::new(sites2), seeds.shared, seeds.eta[1]),
        env3: LazyEnvironment::overlay(dist, Arc::new(union), seeds.shared, seeds.eta[2]),
        lambda1: lambda1.clone(),
        lambda2: lambda2.clone(),
        shared_seed: seeds.shared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::ratio;
    use num_rational::BigRational;

    fn k(p: &[f64]) -> TransitionKernel<f64> {
        TransitionKernel::new(p.to_vec()).unwrap()
    }

    fn two_kernel_mixture() -> EnvDistribution<f64> {
        EnvDistribution::mixture(
            vec![(k(&[0.4, 0.1, 0.25, 0.25]), 0.5), (k(&[0.1, 0.4, 0.25, 0.25]), 0.5)],
            0.1,
        )
        .unwrap()
    }

    #[test]
    fn ellipticity_examples() {
        assert!(validate_ellipticity(&TransitionKernel::<f64>::uniform(2), &0.1));
        assert!(!validate_ellipticity(&k(&[0.5, 0.0, 0.25, 0.25]), &0.05));
        assert!(!validate_ellipticity(&k(&[0.4, 0.099, 0.25, 0.25]), &0.05));
    }

    #[test]
    fn exact_ellipticity_with_rationals() {
        let kern = TransitionKernel::new(vec![ratio(2, 5), ratio(1, 10), ratio(1, 4), ratio(1, 4)]).unwrap();
        assert!(validate_ellipticity(&kern, &ratio(1, 10)));
        assert!(!validate_ellipticity(&kern, &ratio(11, 100)));
        let off = TransitionKernel::new(vec![ratio(2, 5), ratio(1, 10), ratio(1, 4), ratio(1, 4) - ratio(1, 1000)]).unwrap();
        assert!(!validate_ellipticity::<BigRational>(&off, &ratio(1, 100)));
    }

    #[test]
    fn odd_length_kernel_rejected() {
        assert!(TransitionKernel::new(vec![0.5, 0.25, 0.25]).is_err());
    }

    #[test]
    fn point_mass_always_returns_its_kernel() {
        let base = k(&[0.4, 0.1, 0.25, 0.25]);
        let dist = EnvDistribution::point_mass(base.clone(), 0.1).unwrap();
        let mut s = seeding::stream(3);
        for _ in 0..100 {
            assert_eq!(sample_kernel(&dist, &mut s), base);
        }
    }

    #[test]
    fn zero_perturbation_is_base() {
        let base = k(&[0.4, 0.1, 0.25, 0.25]);
        let dist = EnvDistribution::perturbed(base.clone(), 0.0, PerturbationRule::Uniform, 0.1).unwrap();
        let mut s = seeding::stream(4);
        for _ in 0..100 {
            assert_eq!(sample_kernel(&dist, &mut s), base);
        }
    }

    #[test]
    fn mixture_frequency() {
        let dist = two_kernel_mixture();
        let first = k(&[0.4, 0.1, 0.25, 0.25]);
        let mut s = seeding::stream(5);
        let n = 100_000;
        let hits = (0..n).filter(|_| sample_kernel(&dist, &mut s) == first).count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.01, "frequency {freq}");
    }

    #[test]
    fn malformed_families_rejected() {
        let a = k(&[0.4, 0.1, 0.25, 0.25]);
        assert!(EnvDistribution::mixture(vec![(a.clone(), 0.5), (a.clone(), 0.4)], 0.1).is_err());
        assert!(EnvDistribution::mixture(vec![], 0.1).is_err());
        assert!(EnvDistribution::perturbed(a.clone(), 0.06, PerturbationRule::Uniform, 0.05).is_err());
        assert!(EnvDistribution::perturbed(a.clone(), 0.05, PerturbationRule::Uniform, 0.05).is_ok());
        assert!(EnvDistribution::point_mass(a.clone(), 0.3).is_err());
        assert!(EnvDistribution::point_mass(a, 0.0).is_err());
    }

    #[test]
    fn perturbed_kernels_stay_elliptic() {
        let base = k(&[0.35, 0.15, 0.3, 0.2]);
        for rule in [PerturbationRule::Uniform, PerturbationRule::Rademacher] {
            let dist = EnvDistribution::perturbed(base.clone(), 0.1, rule, 0.05).unwrap();
            let mut s = seeding::stream(6);
            for _ in 0..10_000 {
                let kern = sample_kernel(&dist, &mut s);
                assert!((kern.sum() - 1.0).abs() < 1e-12);
                assert!(*kern.min_entry() >= 0.05 - 1e-15);
            }
        }
    }

    #[test]
    fn kernel_at_is_memoized_and_order_independent() {
        let dist = two_kernel_mixture();
        let a = [3, -2];
        let b = [0, 7];
        let e1 = LazyEnvironment::new(dist.clone(), 11).unwrap();
        let ka = e1.kernel_at(&a).unwrap();
        let kb = e1.kernel_at(&b).unwrap();
        assert_eq!(e1.kernel_at(&a).unwrap(), ka);
        let e2 = LazyEnvironment::new(dist, 11).unwrap();
        assert_eq!(e2.kernel_at(&b).unwrap(), kb);
        assert_eq!(e2.kernel_at(&a).unwrap(), ka);
        assert_eq!(e1.materialized(), 2);
    }

    #[test]
    fn dimension_mismatch_is_usage_error() {
        let env = LazyEnvironment::new(two_kernel_mixture(), 1).unwrap();
        assert!(env.kernel_at(&[0, 0, 0]).is_err());
    }

    #[test]
    fn seed_collision_rate_over_three_sites() {
        // P(all three probe sites agree) = 0.5^3 for a fair two-kernel mixture.
        let dist = Arc::new(two_kernel_mixture());
        let probes = [[0, 0], [1, 0], [0, 1]];
        let pairs = 1000u64;
        let mut collisions = 0;
        for i in 0..pairs {
            let e1 = LazyEnvironment::from_shared(dist.clone(), seeding::derive(100, 2 * i));
            let e2 = LazyEnvironment::from_shared(dist.clone(), seeding::derive(100, 2 * i + 1));
            if probes
                .iter()
                .all(|s| e1.kernel_at(s).unwrap() == e2.kernel_at(s).unwrap())
            {
                collisions += 1;
            }
        }
        let rate = collisions as f64 / pairs as f64;
        assert!((rate - 0.125).abs() < 0.02, "rate {rate}");
    }

    #[test]
    fn concurrent_first_queries_agree() {
        use rayon::prelude::*;
        let env = LazyEnvironment::new(two_kernel_mixture(), 77).unwrap();
        let sites: Vec<[i32; 2]> = (0..200).map(|i| [i % 10, i / 10]).collect();
        let seen: Vec<_> = sites
            .par_iter()
            .chain(sites.par_iter())
            .map(|s| env.kernel_at(s).unwrap())
            .collect();
        let fresh = LazyEnvironment::new(two_kernel_mixture(), 77).unwrap();
        for (s, kern) in sites.iter().chain(sites.iter()).zip(seen) {
            assert_eq!(fresh.kernel_at(s).unwrap(), kern);
        }
    }

    #[test]
    fn coupled_triple_agrees_on_paths() {
        let dist = two_kernel_mixture();
        let l1 = WalkPath::from_sites(&[vec![0, 0]]).unwrap();
        let l2 = WalkPath::from_sites(&[vec![5, 0]]).unwrap();
        let seeds = CouplingSeeds {
            eta: [1, 2, 3],
            shared: 4,
        };
        let t = make_coupled_triple(&l1, &l2, dist, seeds).unwrap();
        assert_eq!(t.env1.kernel_at(&[0, 0]).unwrap(), t.env3.kernel_at(&[0, 0]).unwrap());
        assert_eq!(t.env2.kernel_at(&[5, 0]).unwrap(), t.env3.kernel_at(&[5, 0]).unwrap());
    }

    #[test]
    fn coupled_off_path_fields_are_independent() {
        let dist = Arc::new(two_kernel_mixture());
        let l1 = WalkPath::from_sites(&[vec![0, 0], vec![1, 0]]).unwrap();
        let l2 = WalkPath::from_sites(&[vec![0, 3], vec![1, 3]]).unwrap();
        let trials = 2000u64;
        let mut same = 0;
        for i in 0..trials {
            let seeds = CouplingSeeds {
                eta: [seeding::derive(i, 1), seeding::derive(i, 2), seeding::derive(i, 3)],
                shared: seeding::derive(i, 4),
            };
            let t = make_coupled_triple(&l1, &l2, (*dist).clone(), seeds).unwrap();
            if t.env1.kernel_at(&[9, 9]).unwrap() == t.env3.kernel_at(&[9, 9]).unwrap() {
                same += 1;
            }
        }
        let rate = same as f64 / trials as f64;
        // collision probability 0.5, s.e. ~0.011
        assert!((rate - 0.5).abs() < 0.045, "rate {rate}");
    }

    #[test]
    fn point_mass_environment_is_constant() {
        let base = k(&[0.4, 0.1, 0.25, 0.25]);
        let env = LazyEnvironment::new(EnvDistribution::point_mass(base.clone(), 0.1).unwrap(), 9).unwrap();
        for x in -5..5 {
            assert_eq!(env.kernel_at(&[x, 2 * x]).unwrap(), base);
        }
    }

    #[test]
    fn pick_follows_cumulative_probabilities() {
        let kern = k(&[0.4, 0.1, 0.25, 0.25]);
        assert_eq!(kern.pick(0.0), 0);
        assert_eq!(kern.pick(0.39), 0);
        assert_eq!(kern.pick(0.41), 1);
        assert_eq!(kern.pick(0.6), 2);
        assert_eq!(kern.pick(0.99), 3);
    }

    #[test]
    fn distribution_round_trips_through_json() {
        let dist = EnvDistribution::perturbed(k(&[0.35, 0.15, 0.3, 0.2]), 0.1, PerturbationRule::Rademacher, 0.05).unwrap();
        let text = serde_json::to_string(&dist).unwrap();
        let back: EnvDistribution<f64> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, dist);
    }
}
