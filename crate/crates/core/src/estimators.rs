//! Scaled paths, the `d_T` metric, test functionals and the statistics built
//! on them.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{config, usage, Result};
use crate::lattice::{EnvDistribution, LazyEnvironment};
use crate::scalar::{Real, Scalar};
use crate::seeding::{derive, SeedTree, StreamRole};
use crate::walk::{replicate, simulate_path, WalkPath};

fn lit<T: Real>(x: f64) -> T {
    T::from_f64_lossy(x)
}

/// Diffusively rescaled, centered path with polygonal interpolation.
///
/// Knot `k` sits at time `k / n` and equals `(X(k) - ⌊v k⌋) / √n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaledPath<T: Real = f64> {
    pub n: usize,
    pub v_used: Vec<T>,
    dim: usize,
    knots: Vec<T>,
}

impl<T: Real> ScaledPath<T> {
    /// Path from explicit knot values (times `k / n`).
    pub fn from_knots(n: usize, v_used: Vec<T>, knots: &[Vec<T>]) -> Result<Self> {
        if n == 0 || knots.is_empty() {
            return usage("scaled path needs n >= 1 and at least one knot");
        }
        let dim = knots[0].len();
        if knots.iter().any(|k| k.len() != dim) {
            return usage("ragged knot vectors");
        }
        Ok(Self {
            n,
            v_used,
            dim,
            knots: knots.concat(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn knot_count(&self) -> usize {
        self.knots.len() / self.dim
    }

    pub fn knot(&self, k: usize) -> &[T] {
        &self.knots[k * self.dim..(k + 1) * self.dim]
    }

    /// Last time covered.
    pub fn span(&self) -> T {
        lit::<T>((self.knot_count() - 1) as f64) / lit(self.n as f64)
    }

    /// Value at `t`, clamped to `[0, span]`.
    pub fn value(&self, t: T) -> Vec<T> {
        let s = (t * lit(self.n as f64)).max(T::zero());
        let last = self.knot_count() - 1;
        let k = s.floor().to_usize().unwrap_or(0).min(last);
        if k == last {
            return self.knot(last).to_vec();
        }
        let frac = s - lit(k as f64);
        self.knot(k)
            .iter()
            .zip(self.knot(k + 1))
            .map(|(&a, &b)| a + (b - a) * frac)
            .collect()
    }
}

/// Build `β^n` on `[0, t_max]`; needs `⌈n t_max⌉` steps of the path.
pub fn build_scaled_path<T: Real>(path: &WalkPath, n: usize, v: &[T], t_max: T) -> Result<ScaledPath<T>> {
    if n == 0 {
        return usage("n must be at least 1");
    }
    if v.len() != path.dim() {
        return usage(format!("centering vector of length {} for a {}-dimensional path", v.len(), path.dim()));
    }
    if t_max < T::zero() {
        return usage("negative time span");
    }
    let last = (t_max * lit(n as f64)).ceil().to_usize().unwrap_or(usize::MAX);
    if last > path.horizon() {
        return usage(format!("horizon {} is shorter than n·T = {last}", path.horizon()));
    }
    let root = lit::<T>(n as f64).sqrt();
    let mut knots = Vec::with_capacity((last + 1) * path.dim());
    for k in 0..=last {
        let kk = lit::<T>(k as f64);
        for (x, &vi) in path.position(k).iter().zip(v) {
            knots.push((lit::<T>(*x as f64) - (vi * kk).floor()) / root);
        }
    }
    Ok(ScaledPath {
        n,
        v_used: v.to_vec(),
        dim: path.dim(),
        knots,
    })
}

fn norm<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).fold(T::zero(), |s, x| s + x).sqrt()
}

/// Knot times of both paths inside `[0, t_max]` plus `t_max`, merged exactly.
fn union_grid<T: Real>(nf: usize, ng: usize, t_max: T) -> Vec<T> {
    let mut times: Vec<(u64, u64)> = Vec::new();
    for n in [nf, ng] {
        let last = (t_max * lit(n as f64)).floor().to_u64().unwrap_or(0);
        times.extend((0..=last).map(|k| (k, n as u64)));
    }
    let key = |a: &(u64, u64), b: &(u64, u64)| (a.0 as u128 * b.1 as u128).cmp(&(b.0 as u128 * a.1 as u128));
    times.sort_by(key);
    times.dedup_by(|a, b| key(a, b).is_eq());
    let mut out: Vec<T> = times.into_iter().map(|(k, n)| lit::<T>(k as f64) / lit(n as f64)).collect();
    if out.last().map_or(true, |&t| t < t_max) {
        out.push(t_max);
    }
    out
}

/// `d_T(f, g) = min(1, sup_{[0, T]} |f - g|)`, exact for polygonal paths: the
/// norm of the difference is convex between consecutive union knots.
pub fn d_t<T: Real>(f: &ScaledPath<T>, g: &ScaledPath<T>, t_max: T) -> Result<T> {
    if f.dim != g.dim {
        return usage("paths of different dimensions");
    }
    if f.span() < t_max || g.span() < t_max {
        return usage("a path does not cover [0, T]");
    }
    let sup = union_grid(f.n, g.n, t_max)
        .into_iter()
        .map(|t| norm(&f.value(t), &g.value(t)))
        .fold(T::zero(), T::max);
    Ok(sup.min(T::one()))
}

/// Bounded Lipschitz test functionals on scaled paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FunctionalSpec {
    /// `clamp(f_i(t0), -bound, bound)`; `axis` is 0-based.
    ClippedCoordinate { t0: f64, axis: usize, bound: f64 },
    /// `min(bound, sup_{[0, t_max]} |f|)`.
    CappedSupnorm { t_max: f64, bound: f64 },
    /// `bound · max(0, 1 - |f(at) - center| / width)`.
    SmoothedIndicator {
        center: Vec<f64>,
        width: f64,
        #[serde(default = "one")]
        at: f64,
        #[serde(default = "one")]
        bound: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl Default for FunctionalSpec {
    fn default() -> Self {
        FunctionalSpec::ClippedCoordinate {
            t0: 1.0,
            axis: 0,
            bound: 1.0,
        }
    }
}

impl FunctionalSpec {
    pub fn name(&self) -> &'static str {
        match self {
            FunctionalSpec::ClippedCoordinate { .. } => "clipped-coordinate",
            FunctionalSpec::CappedSupnorm { .. } => "capped-supnorm",
            FunctionalSpec::SmoothedIndicator { .. } => "smoothed-indicator",
        }
    }

    pub fn bound(&self) -> f64 {
        match *self {
            FunctionalSpec::ClippedCoordinate { bound, .. }
            | FunctionalSpec::CappedSupnorm { bound, .. }
            | FunctionalSpec::SmoothedIndicator { bound, .. } => bound,
        }
    }

    /// Lipschitz constant with respect to `d_T`. Since `d_T` is capped at 1,
    /// a jump of up to the full range must be covered at distance 1.
    pub fn lipschitz(&self) -> f64 {
        match *self {
            FunctionalSpec::ClippedCoordinate { bound, .. } => (2.0 * bound).max(1.0),
            FunctionalSpec::CappedSupnorm { bound, .. } => bound.max(1.0),
            FunctionalSpec::SmoothedIndicator { width, bound, .. } => (bound / width).max(bound),
        }
    }

    /// Time span the functional looks at.
    pub fn horizon(&self) -> f64 {
        match *self {
            FunctionalSpec::ClippedCoordinate { t0, .. } => t0,
            FunctionalSpec::CappedSupnorm { t_max, .. } => t_max,
            FunctionalSpec::SmoothedIndicator { at, .. } => at,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let ok = match self {
            FunctionalSpec::ClippedCoordinate { t0, axis, bound } => *t0 >= 0.0 && *axis < dim && *bound > 0.0,
            FunctionalSpec::CappedSupnorm { t_max, bound } => *t_max >= 0.0 && *bound > 0.0,
            FunctionalSpec::SmoothedIndicator {
                center,
                width,
                at,
                bound,
            } => center.len() == dim && *width > 0.0 && *at >= 0.0 && *bound > 0.0,
        };
        if ok {
            Ok(())
        } else {
            config(format!("invalid {} functional for dimension {dim}", self.name()))
        }
    }

    pub fn evaluate<T: Real>(&self, path: &ScaledPath<T>) -> T {
        match self {
            FunctionalSpec::ClippedCoordinate { t0, axis, bound } => {
                let b = lit::<T>(*bound);
                path.value(lit(*t0))[*axis].max(-b).min(b)
            }
            FunctionalSpec::CappedSupnorm { t_max, bound } => {
                let zero = vec![T::zero(); path.dim()];
                let sup = union_grid(path.n, path.n, lit(*t_max))
                    .into_iter()
                    .map(|t| norm(&path.value(t), &zero))
                    .fold(T::zero(), T::max);
                sup.min(lit(*bound))
            }
            FunctionalSpec::SmoothedIndicator {
                center,
                width,
                at,
                bound,
            } => {
                let c: Vec<T> = center.iter().map(|&x| lit(x)).collect();
                let r = norm(&path.value(lit(*at)), &c) / lit(*width);
                lit::<T>(*bound) * (T::one() - r).max(T::zero())
            }
        }
    }
}

fn check_replicas(n: usize) -> Result<()> {
    if n < 2 {
        return usage("need at least two samples");
    }
    Ok(())
}

/// Mean of `X(h) / h` over replicas with componentwise standard errors.
pub fn estimate_speed<T: Real>(endpoints: &[(Vec<i32>, usize)]) -> Result<(Vec<T>, Vec<T>)> {
    check_replicas(endpoints.len())?;
    let d = endpoints[0].0.len();
    if endpoints.iter().any(|(x, h)| x.len() != d || *h == 0) {
        return usage("endpoints need a common dimension and positive horizons");
    }
    let rows: Vec<Vec<T>> = endpoints
        .iter()
        .map(|(x, h)| x.iter().map(|&c| lit::<T>(c as f64) / lit(*h as f64)).collect())
        .collect();
    let (mean, cov) = mean_and_covariance(&rows);
    let n = lit::<T>(rows.len() as f64);
    let se = (0..d).map(|i| (cov[i][i] / n).sqrt()).collect();
    Ok((mean, se))
}

/// Sample mean and (n - 1)-normalized covariance of row vectors.
pub fn mean_and_covariance<T: Real>(rows: &[Vec<T>]) -> (Vec<T>, Vec<Vec<T>>) {
    let d = rows[0].len();
    let n = lit::<T>(rows.len() as f64);
    let mut mean = vec![T::zero(); d];
    for r in rows {
        for (m, &x) in mean.iter_mut().zip(r) {
            *m = *m + x;
        }
    }
    for m in &mut mean {
        *m = *m / n;
    }
    let mut cov = vec![vec![T::zero(); d]; d];
    for r in rows {
        for i in 0..d {
            for j in i..d {
                cov[i][j] = cov[i][j] + (r[i] - mean[i]) * (r[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i][j] = cov[i][j] / (n - T::one());
            cov[j][i] = cov[i][j];
        }
    }
    (mean, cov)
}

/// Sample covariance of `B^n(1)` across replicas, centered with the given `v`.
pub fn estimate_annealed_covariance<T: Real>(paths: &[WalkPath], n: usize, v: &[T]) -> Result<Vec<Vec<T>>> {
    let at_n = paths
        .iter()
        .map(|p| {
            if p.horizon() < n {
                return usage(format!("horizon {} is shorter than n = {n}", p.horizon()));
            }
            Ok(p.position(n).to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    covariance_at_one(&at_n, n, v)
}

/// Same as [`estimate_annealed_covariance`] from the positions `X(n)` alone.
pub fn covariance_at_one<T: Real>(positions: &[Vec<i32>], n: usize, v: &[T]) -> Result<Vec<Vec<T>>> {
    check_replicas(positions.len())?;
    if n == 0 || positions.iter().any(|x| x.len() != v.len()) {
        return usage("need n >= 1 and positions matching the centering vector");
    }
    let root = lit::<T>(n as f64).sqrt();
    let nn = lit::<T>(n as f64);
    let rows: Vec<Vec<T>> = positions
        .iter()
        .map(|x| x.iter().zip(v).map(|(&c, &vi)| (lit::<T>(c as f64) - (vi * nn).floor()) / root).collect())
        .collect();
    Ok(mean_and_covariance(&rows).1)
}

/// Between-group variance component of a balanced two-level design.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoLevelVariance<T: Real = f64> {
    /// `max(0, raw)`.
    pub estimate: T,
    /// `(MSB - MSW) / m`, unbiased but possibly negative.
    pub raw: T,
    /// Delete-one-group jackknife standard error of `raw`.
    pub stderr: T,
    pub clamped: bool,
    pub groups: usize,
    pub per_group: usize,
    pub grand_mean: T,
}

fn raw_between<T: Real>(means: &[T], ss_within: &[T], m: usize) -> T {
    let g = lit::<T>(means.len() as f64);
    let mm = lit::<T>(m as f64);
    let grand = means.iter().fold(T::zero(), |s, &x| s + x) / g;
    let msb = mm * means.iter().fold(T::zero(), |s, &x| s + (x - grand) * (x - grand)) / (g - T::one());
    let msw = ss_within.iter().fold(T::zero(), |s, &x| s + x) / (g * (mm - T::one()));
    (msb - msw) / mm
}

/// Unbiased estimate of the variance of group means' expectations from a
/// balanced design (each group: one environment, `m` walks).
pub fn two_level_variance<T: Real>(groups: &[Vec<T>]) -> Result<TwoLevelVariance<T>> {
    if groups.len() < 2 {
        return usage("need at least two groups");
    }
    let m = groups[0].len();
    if m < 2 {
        return usage("within-group variance needs at least two samples per group");
    }
    if groups.iter().any(|g| g.len() != m) {
        return usage("unbalanced groups");
    }
    let mm = lit::<T>(m as f64);
    let means: Vec<T> = groups.iter().map(|g| g.iter().fold(T::zero(), |s, &x| s + x) / mm).collect();
    let ss: Vec<T> = groups
        .iter()
        .zip(&means)
        .map(|(g, &mu)| g.iter().fold(T::zero(), |s, &x| s + (x - mu) * (x - mu)))
        .collect();
    let raw = raw_between(&means, &ss, m);
    let gcount = groups.len();
    let stderr = if gcount < 3 {
        T::zero()
    } else {
        let loo: Vec<T> = (0..gcount)
            .map(|skip| {
                let mu: Vec<T> = means.iter().enumerate().filter(|(i, _)| *i != skip).map(|(_, &x)| x).collect();
                let s: Vec<T> = ss.iter().enumerate().filter(|(i, _)| *i != skip).map(|(_, &x)| x).collect();
                raw_between(&mu, &s, m)
            })
            .collect();
        let gg = lit::<T>(gcount as f64);
        let avg = loo.iter().fold(T::zero(), |s, &x| s + x) / gg;
        let spread = loo.iter().fold(T::zero(), |s, &x| s + (x - avg) * (x - avg));
        ((gg - T::one()) / gg * spread).sqrt()
    };
    let grand_mean = means.iter().fold(T::zero(), |s, &x| s + x) / lit(gcount as f64);
    Ok(TwoLevelVariance {
        estimate: raw.max(T::zero()),
        raw,
        stderr,
        clamped: raw < T::zero(),
        groups: gcount,
        per_group: m,
        grand_mean,
    })
}

/// Sampling budget for the two-level estimator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budget {
    pub n_env: usize,
    pub n_walks: usize,
}

/// Functional values `F(β^N)` for `n_walks` walks in each of `n_env`
/// environments. Environment `e` is seeded by `(e, Environment)`, its walk `j`
/// by `derive((e, Walk1), j)`.
pub fn functional_samples<S: Scalar>(
    dist: &EnvDistribution<S>,
    spec: &FunctionalSpec,
    n: usize,
    v: &[f64],
    budget: Budget,
    seeds: &SeedTree,
) -> Result<Vec<Vec<f64>>> {
    dist.validate()?;
    spec.validate(dist.dim())?;
    if v.len() != dist.dim() {
        return usage("centering vector has the wrong dimension");
    }
    if n == 0 {
        return usage("N must be at least 1");
    }
    let t_max = spec.horizon();
    let horizon = (t_max * n as f64).ceil() as usize;
    let dist = Arc::new(dist.clone());
    let origin = vec![0; dist.dim()];
    Ok(replicate(budget.n_env as u64, |e| {
        let env = LazyEnvironment::from_shared(dist.clone(), seeds.seed(e, StreamRole::Environment));
        let base = seeds.seed(e, StreamRole::Walk1);
        (0..budget.n_walks as u64)
            .map(|j| {
                let p = simulate_path(&env, &origin, horizon, derive(base, j)).expect("dimension checked");
                spec.evaluate(&build_scaled_path(&p, n, v, t_max).expect("horizon covers n·T"))
            })
            .collect()
    }))
}

/// `⟨B^n(1), e_axis⟩` for `n_walks` walks in the single environment seeded
/// by `env_seed`; walk `j` uses `derive(walk_seed, j)`.
pub fn quenched_coordinate_samples<S: Scalar>(
    dist: &EnvDistribution<S>,
    env_seed: u64,
    walk_seed: u64,
    n: usize,
    n_walks: usize,
    v: &[f64],
    axis: usize,
) -> Result<Vec<f64>> {
    dist.validate()?;
    if v.len() != dist.dim() || axis >= dist.dim() || n == 0 {
        return usage("bad centering vector, axis or n");
    }
    let env = LazyEnvironment::new(dist.clone(), env_seed)?;
    let origin = vec![0; dist.dim()];
    let shift = (v[axis] * n as f64).floor();
    let root = (n as f64).sqrt();
    Ok(replicate(n_walks as u64, |j| {
        let p = simulate_path(&env, &origin, n, derive(walk_seed, j)).expect("dimension checked");
        (p.end()[axis] as f64 - shift) / root
    }))
}

/// `Var_P(E_ω F(β^N))` from the two-level decomposition.
pub fn quenched_mean_variance<S: Scalar>(
    dist: &EnvDistribution<S>,
    spec: &FunctionalSpec,
    n: usize,
    v: &[f64],
    budget: Budget,
    seeds: &SeedTree,
) -> Result<TwoLevelVariance> {
    if budget.n_env < 2 || budget.n_walks < 2 {
        return usage("need n_env >= 2 and n_walks_per_env >= 2");
    }
    two_level_variance(&functional_samples(dist, spec, n, v, budget, seeds)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summand {
    pub m: u32,
    pub n: usize,
    pub estimate: f64,
    pub raw: f64,
    pub stderr: f64,
    pub clamped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesSummary {
    pub b: f64,
    pub summands: Vec<Summand>,
    pub partial_sums: Vec<f64>,
    /// Weighted fit of `log summand` against `m`.
    pub fit: Option<TailFit>,
    pub excluded: Vec<u32>,
}

/// `⌊b^m⌋`.
pub fn geometric_scale(b: f64, m: u32) -> usize {
    b.powi(m as i32).floor() as usize
}

/// Summands `Var_P(E_ω F(β^{⌊b^m⌋}))` over `m_range`; summand `m` is
/// exactly [`quenched_mean_variance`] with seeds `seeds.child(m)`.
pub fn bs_series_summands<S: Scalar>(
    dist: &EnvDistribution<S>,
    spec: &FunctionalSpec,
    b: f64,
    m_range: std::ops::RangeInclusive<u32>,
    budget: Budget,
    v: &[f64],
    seeds: &SeedTree,
) -> Result<SeriesSummary> {
    if !(b > 1.0 && b <= 2.0) {
        return config(format!("b = {b} is outside (1, 2]"));
    }
    if m_range.is_empty() {
        return config("empty m range");
    }
    let mut summands = Vec::new();
    for m in m_range {
        let n = geometric_scale(b, m).max(1);
        let est = quenched_mean_variance(dist, spec, n, v, budget, &seeds.child(m as u64))?;
        summands.push(Summand {
            m,
            n,
            estimate: est.estimate,
            raw: est.raw,
            stderr: est.stderr,
            clamped: est.clamped,
        });
    }
    let partial_sums = summands
        .iter()
        .scan(0.0, |acc, s| {
            *acc += s.estimate;
            Some(*acc)
        })
        .collect();
    let xs: Vec<f64> = summands.iter().map(|s| s.m as f64).collect();
    let ps: Vec<f64> = summands.iter().map(|s| s.raw).collect();
    let ses: Vec<f64> = summands.iter().map(|s| s.stderr).collect();
    let (fit, excluded) = match fit_log_linear(&xs, &ps, &ses) {
        Ok(out) => (Some(out.fit), out.excluded.iter().map(|&i| summands[i].m).collect()),
        Err(_) => (None, summands.iter().filter(|s| s.raw <= 0.0).map(|s| s.m).collect()),
    };
    Ok(SeriesSummary {
        b,
        summands,
        partial_sums,
        fit,
        excluded,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
    pub r_squared: f64,
    pub points_used: usize,
}

impl TailFit {
    /// Upper end of the two-sided 95% interval for the slope.
    pub fn slope_upper_95(&self) -> f64 {
        self.slope + 1.96 * self.slope_stderr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOutcome {
    pub fit: TailFit,
    /// Indices of points dropped for non-positive `p`.
    pub excluded: Vec<usize>,
}

/// Weighted least squares of `log p` on `log x`, weights `(p / se)^2`.
pub fn fit_tail_exponent(xs: &[f64], ps: &[f64], ses: &[f64]) -> Result<FitOutcome> {
    if xs.iter().any(|&x| x <= 0.0) {
        return usage("x values must be positive");
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    fit_log_linear(&lx, ps, ses)
}

/// Weighted least squares of `log p` on `x`. If any standard error is zero
/// the fit is unweighted. The slope standard error uses the stated errors,
/// inflated by the residual scatter when that is larger; for an unweighted
/// fit it is the usual residual-based one (zero with two points).
pub fn fit_log_linear(xs: &[f64], ps: &[f64], ses: &[f64]) -> Result<FitOutcome> {
    if xs.len() != ps.len() || ps.len() != ses.len() {
        return usage("xs, ps and ses differ in length");
    }
    let excluded: Vec<usize> = (0..ps.len()).filter(|&i| !(ps[i] > 0.0)).collect();
    let keep: Vec<usize> = (0..ps.len()).filter(|&i| ps[i] > 0.0).collect();
    if keep.len() < 2 {
        return usage("fit needs at least two positive points");
    }
    let weighted = keep.iter().all(|&i| ses[i] > 0.0);
    let x: Vec<f64> = keep.iter().map(|&i| xs[i]).collect();
    let y: Vec<f64> = keep.iter().map(|&i| ps[i].ln()).collect();
    let w: Vec<f64> = keep
        .iter()
        .map(|&i| if weighted { (ps[i] / ses[i]).powi(2) } else { 1.0 })
        .collect();
    let sw: f64 = w.iter().sum();
    let xm = w.iter().zip(&x).map(|(w, x)| w * x).sum::<f64>() / sw;
    let ym = w.iter().zip(&y).map(|(w, y)| w * y).sum::<f64>() / sw;
    let sxx: f64 = w.iter().zip(&x).map(|(w, x)| w * (x - xm).powi(2)).sum();
    if sxx <= 0.0 {
        return usage("x values are all equal");
    }
    let sxy: f64 = (0..x.len()).map(|i| w[i] * (x[i] - xm) * (y[i] - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let chi2: f64 = (0..x.len()).map(|i| w[i] * (y[i] - intercept - slope * x[i]).powi(2)).sum();
    let syy: f64 = w.iter().zip(&y).map(|(w, y)| w * (y - ym).powi(2)).sum();
    let dof = x.len() as f64 - 2.0;
    let scale = match (weighted, dof > 0.0) {
        (true, true) => (chi2 / dof).max(1.0),
        (true, false) => 1.0,
        (false, true) => chi2 / dof,
        (false, false) => 0.0,
    };
    Ok(FitOutcome {
        fit: TailFit {
            slope,
            intercept,
            slope_stderr: (scale / sxx).sqrt(),
            r_squared: if syy > 0.0 { 1.0 - chi2 / syy } else { 1.0 },
            points_used: x.len(),
        },
        excluded,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub ks: f64,
    pub threshold: f64,
    pub n: usize,
    pub degenerate: bool,
}

impl KsResult {
    pub fn passes(&self) -> bool {
        !self.degenerate && self.ks < self.threshold
    }
}

/// Standard normal distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

/// Kolmogorov–Smirnov distance between the standardized samples and the
/// standard normal law, with the asymptotic 5% threshold `1.36 / √n`.
pub fn ks_normality_check<T: Real>(samples: &[T]) -> Result<KsResult> {
    let n = samples.len();
    if n < 20 {
        return usage("KS check needs at least 20 samples");
    }
    let xs: Vec<f64> = samples.iter().map(Scalar::as_f64).collect();
    let nf = n as f64;
    let mean = xs.iter().sum::<f64>() / nf;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let threshold = 1.36 / nf.sqrt();
    if !(var > 0.0) {
        return Ok(KsResult {
            ks: 1.0,
            threshold,
            n,
            degenerate: true,
        });
    }
    let sd = var.sqrt();
    let mut z: Vec<f64> = xs.iter().map(|x| (x - mean) / sd).collect();
    z.sort_by(f64::total_cmp);
    let mut ks: f64 = 0.0;
    let mut i = 0;
    while i < n {
        // ties: the empirical CDF jumps from i/n to j/n at z[i]
        let mut j = i + 1;
        while j < n && z[j] == z[i] {
            j += 1;
        }
        let f = normal_cdf(z[i]);
        ks = ks.max((f - i as f64 / nf).abs()).max((j as f64 / nf - f).abs());
        i = j;
    }
    Ok(KsResult {
        ks,
        threshold,
        n,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::TransitionKernel;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal};

    fn straight(len: usize) -> WalkPath {
        WalkPath::from_directions(&[0, 0], &vec![0; len])
    }

    fn random_path(rng: &mut impl Rng, len: usize) -> WalkPath {
        let dirs: Vec<usize> = (0..len).map(|_| rng.random_range(0..4)).collect();
        WalkPath::from_directions(&[0, 0], &dirs)
    }

    #[test]
    fn identity_scaling_and_ballistic_cancellation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let p = random_path(&mut rng, 20);
        let s = build_scaled_path(&p, 1, &[0.0, 0.0], 20.0).unwrap();
        for k in 0..=20 {
            assert_eq!(s.knot(k), &[p.position(k)[0] as f64, p.position(k)[1] as f64]);
        }
        for n in [1, 3, 16] {
            let s = build_scaled_path(&straight(64), n, &[1.0, 0.0], 2.0).unwrap();
            assert!((0..s.knot_count()).all(|k| s.knot(k) == [0.0, 0.0]));
        }
    }

    #[test]
    fn doubling_n_rescales() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let p = random_path(&mut rng, 64);
        let a = build_scaled_path(&p, 8, &[0.0, 0.0], 4.0).unwrap();
        let b = build_scaled_path(&p, 16, &[0.0, 0.0], 4.0).unwrap();
        // same path, twice the knots per unit time, spatial scale 1/√2
        assert_eq!(b.knot_count(), 2 * a.knot_count() - 1);
        for j in 0..a.knot_count() / 2 {
            for i in 0..2 {
                assert!((b.knot(j)[i] * 2f64.sqrt() - a.knot(j)[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn knot_identity_with_negative_floor() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let p = random_path(&mut rng, 50);
        let v = [-0.37, 0.21];
        let n = 25;
        let s = build_scaled_path(&p, n, &v, 2.0).unwrap();
        for k in 0..=50 {
            for i in 0..2 {
                let back = s.knot(k)[i] * (n as f64).sqrt() + (v[i] * k as f64).floor();
                assert!((back - p.position(k)[i] as f64).abs() < 1e-9);
            }
        }
        assert!(build_scaled_path(&p, n, &v, 2.1).is_err());
    }

    #[test]
    fn d_t_trivial_cases() {
        let f = ScaledPath::from_knots(2, vec![0.0; 2], &[vec![0.0, 0.0], vec![0.5, 0.1], vec![0.2, 0.2]]).unwrap();
        assert_eq!(d_t(&f, &f, 1.0).unwrap(), 0.0);
        let g = ScaledPath::from_knots(
            2,
            vec![0.0; 2],
            &[vec![3.0, 0.0], vec![3.5, 0.1], vec![3.2, 0.2]],
        )
        .unwrap();
        assert_eq!(d_t(&f, &g, 1.0).unwrap(), 1.0);
    }

    fn random_scaled(rng: &mut impl Rng, n: usize, t: f64) -> ScaledPath {
        let count = (t * n as f64).ceil() as usize + 1;
        let knots: Vec<Vec<f64>> = (0..count).map(|_| vec![rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)]).collect();
        ScaledPath::from_knots(n, vec![0.0; 2], &knots).unwrap()
    }

    #[test]
    fn d_t_matches_dense_grid() {
        // scales dividing 10^4 put every knot on the dense grid
        let scales = [1, 2, 4, 5, 8, 10, 16, 20, 25, 40, 50];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let (nf, ng) = (scales[rng.random_range(0..scales.len())], scales[rng.random_range(0..scales.len())]);
            let f = random_scaled(&mut rng, nf, 1.0);
            let g = random_scaled(&mut rng, ng, 1.0);
            let exact = d_t(&f, &g, 1.0).unwrap();
            let dense = (0..=10_000)
                .map(|s| {
                    let t = s as f64 / 1e4;
                    norm(&f.value(t), &g.value(t))
                })
                .fold(0.0, f64::max)
                .min(1.0);
            assert!((exact - dense).abs() < 1e-9, "{exact} {dense}");
        }
    }

    #[test]
    fn d_t_metric_properties() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let (a, b, c) = (
                random_scaled(&mut rng, 3, 1.0),
                random_scaled(&mut rng, 5, 1.0),
                random_scaled(&mut rng, 4, 1.0),
            );
            assert_eq!(d_t(&a, &b, 1.0).unwrap(), d_t(&b, &a, 1.0).unwrap());
            assert!(d_t(&a, &c, 1.0).unwrap() <= d_t(&a, &b, 1.0).unwrap() + d_t(&b, &c, 1.0).unwrap() + 1e-12);
        }
    }

    fn library() -> Vec<FunctionalSpec> {
        vec![
            FunctionalSpec::default(),
            FunctionalSpec::ClippedCoordinate {
                t0: 0.5,
                axis: 1,
                bound: 0.3,
            },
            FunctionalSpec::CappedSupnorm { t_max: 1.0, bound: 1.0 },
            FunctionalSpec::CappedSupnorm { t_max: 0.7, bound: 2.0 },
            FunctionalSpec::SmoothedIndicator {
                center: vec![0.1, -0.1],
                width: 0.5,
                at: 1.0,
                bound: 1.0,
            },
        ]
    }

    #[test]
    fn functional_examples() {
        let zero = ScaledPath::from_knots(4, vec![0.0; 2], &vec![vec![0.0, 0.0]; 5]).unwrap();
        assert_eq!(FunctionalSpec::default().evaluate(&zero), 0.0);
        let bump = ScaledPath::from_knots(2, vec![0.0; 2], &[vec![0.0, 0.0], vec![0.3, -0.4], vec![0.1, 0.0]]).unwrap();
        let sup: f64 = FunctionalSpec::CappedSupnorm { t_max: 1.0, bound: 1.0 }.evaluate(&bump);
        assert!((sup - 0.5).abs() < 1e-15);
    }

    #[test]
    fn functionals_bounded_and_lipschitz() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for spec in library() {
            let (b, l, t) = (spec.bound(), spec.lipschitz(), spec.horizon());
            for trial in 0..1000 {
                let f = random_scaled(&mut rng, 4, 1.0);
                let mut g = random_scaled(&mut rng, 6, 1.0);
                if trial % 2 == 0 {
                    // nearby pairs exercise the slope rather than the cap
                    let k: Vec<Vec<f64>> = (0..g.knot_count())
                        .map(|i| f.value(i as f64 / 6.0).iter().map(|x| x + rng.random_range(-0.05..0.05)).collect())
                        .collect();
                    g = ScaledPath::from_knots(6, vec![0.0; 2], &k).unwrap();
                }
                let (ff, gg) = (spec.evaluate(&f), spec.evaluate(&g));
                assert!(ff.abs() <= b + 1e-12 && gg.abs() <= b + 1e-12);
                assert!((ff - gg).abs() <= l * d_t(&f, &g, t).unwrap() + 1e-12, "{}", spec.name());
            }
        }
    }

    #[test]
    fn speed_examples() {
        let pts: Vec<(Vec<i32>, usize)> = (0..5).map(|_| (vec![7, 0], 7)).collect();
        let (v, se) = estimate_speed::<f64>(&pts).unwrap();
        assert_eq!((v, se), (vec![1.0, 0.0], vec![0.0, 0.0]));
        let (v, _) = estimate_speed::<f64>(&[(vec![9, 0], 9), (vec![0, 9], 9)]).unwrap();
        assert_eq!(v, vec![0.5, 0.5]);
        assert!(estimate_speed::<f64>(&[(vec![1, 0], 1)]).is_err());
    }

    #[test]
    fn covariance_of_identical_paths_is_zero() {
        let p = vec![straight(16); 4];
        let c = estimate_annealed_covariance(&p, 16, &[0.5, 0.0]).unwrap();
        assert_eq!(c, vec![vec![0.0; 2]; 2]);
    }

    #[test]
    fn covariance_symmetric_psd() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let paths: Vec<WalkPath> = (0..30).map(|_| random_path(&mut rng, 25)).collect();
        let c = estimate_annealed_covariance(&paths, 25, &[0.0, 0.0]).unwrap();
        assert_eq!(c[0][1], c[1][0]);
        assert!(c[0][0] >= 0.0 && c[1][1] >= 0.0);
        assert!(c[0][0] * c[1][1] - c[0][1] * c[0][1] >= -1e-12);
    }

    #[test]
    fn two_level_on_hierarchical_gaussian() {
        // y = a_g + e_gj with Var a = 0.5, Var e = 2
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let between = Normal::new(1.0, 0.5f64.sqrt()).unwrap();
        let within = Normal::new(0.0, 2f64.sqrt()).unwrap();
        let groups: Vec<Vec<f64>> = (0..400)
            .map(|_| {
                let a = between.sample(&mut rng);
                (0..8).map(|_| a + within.sample(&mut rng)).collect()
            })
            .collect();
        let est = two_level_variance(&groups).unwrap();
        assert!((est.raw - 0.5).abs() < 3.0 * est.stderr, "{est:?}");
        assert!(!est.clamped);
    }

    #[test]
    fn two_level_clamps() {
        // identical group means, nonzero within-group scatter
        let groups = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.5, 0.5]];
        let est = two_level_variance(&groups).unwrap();
        assert!(est.raw < 0.0 && est.clamped && est.estimate == 0.0);
        assert!(two_level_variance(&[vec![1.0], vec![2.0]]).is_err());
    }

    fn constant_dist() -> EnvDistribution<f64> {
        EnvDistribution::point_mass(TransitionKernel::new(vec![0.4, 0.1, 0.25, 0.25]).unwrap(), 0.1).unwrap()
    }

    #[test]
    fn quenched_variance_vanishes_for_point_mass() {
        let tree = SeedTree::new(11, "qmv");
        let budget = Budget { n_env: 40, n_walks: 20 };
        let est = quenched_mean_variance(&constant_dist(), &FunctionalSpec::default(), 64, &[0.3, 0.0], budget, &tree).unwrap();
        assert!(est.raw.abs() < 3.0 * est.stderr, "{est:?}");
        let bad = Budget { n_env: 40, n_walks: 1 };
        assert!(quenched_mean_variance(&constant_dist(), &FunctionalSpec::default(), 64, &[0.3, 0.0], bad, &tree).is_err());
    }

    #[test]
    fn summand_matches_quenched_variance() {
        let tree = SeedTree::new(12, "series");
        let budget = Budget { n_env: 10, n_walks: 5 };
        let spec = FunctionalSpec::default();
        let v = [0.3, 0.0];
        let s = bs_series_summands(&constant_dist(), &spec, 1.5, 4..=6, budget, &v, &tree).unwrap();
        for row in &s.summands {
            let direct = quenched_mean_variance(&constant_dist(), &spec, geometric_scale(1.5, row.m), &v, budget, &tree.child(row.m as u64)).unwrap();
            assert_eq!(row.raw, direct.raw);
            assert_eq!(row.stderr, direct.stderr);
        }
        assert_eq!(s.summands.iter().map(|r| r.n).collect::<Vec<_>>(), vec![5, 7, 11]);
        assert!(bs_series_summands(&constant_dist(), &spec, 2.5, 4..=6, budget, &v, &tree).is_err());
    }

    #[test]
    fn exact_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0, 16.0];
        let ps: Vec<f64> = xs.iter().map(|x: &f64| x.powi(-2)).collect();
        let fit = fit_tail_exponent(&xs, &ps, &[0.0; 5]).unwrap().fit;
        assert!((fit.slope + 2.0).abs() < 1e-9);
        let two = fit_tail_exponent(&[2.0, 5.0], &[0.3, 0.1], &[0.01, 0.02]).unwrap().fit;
        assert!((two.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_positive_points_are_excluded() {
        let out = fit_tail_exponent(&[1.0, 2.0, 4.0, 8.0], &[1.0, 0.0, 0.25, -1.0], &[0.1; 4]).unwrap();
        assert_eq!(out.excluded, vec![1, 3]);
        assert_eq!(out.fit.points_used, 2);
        assert!(fit_tail_exponent(&[1.0, 2.0], &[1.0, 0.0], &[0.1; 2]).is_err());
    }

    #[test]
    fn noisy_power_law_recovered() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let noise = Normal::new(0.0, 0.2).unwrap();
        let mut hits = 0;
        for _ in 0..100 {
            let xs: Vec<f64> = (0..8).map(|i| 2f64.powi(i)).collect();
            let ps: Vec<f64> = xs.iter().map(|x| (1.0 / x) * (1.0f64 + noise.sample(&mut rng)).max(0.05)).collect();
            let ses: Vec<f64> = xs.iter().map(|x| 0.2 / x).collect();
            let fit = fit_tail_exponent(&xs, &ps, &ses).unwrap().fit;
            if (fit.slope + 1.0).abs() < 3.0 * fit.slope_stderr {
                hits += 1;
            }
        }
        assert!(hits >= 95, "{hits}");
    }

    #[test]
    fn ks_examples() {
        let mut normal_passes = 0;
        for seed in 0..20 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(100 + seed);
            let xs: Vec<f64> = (0..10_000).map(|_| Normal::new(0.0, 1.0).unwrap().sample(&mut rng)).collect();
            if ks_normality_check(&xs).unwrap().passes() {
                normal_passes += 1;
            }
        }
        assert!(normal_passes >= 18, "{normal_passes}");

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let us: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        assert!(!ks_normality_check(&us).unwrap().passes());

        let flat = ks_normality_check(&[2.0f32; 30]).unwrap();
        assert!(flat.degenerate);
        assert!(ks_normality_check(&[1.0; 19]).is_err());
    }
}
