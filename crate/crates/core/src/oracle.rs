//! Exact small-instance computations: quenched laws, the coupling identity and
//! hitting probabilities of directed walks.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{config, usage, Error, Result};
use crate::lattice::{EnvDistribution, LazyEnvironment, Site, TransitionKernel};
use crate::scalar::Scalar;
use crate::walk::WalkPath;

pub const MAX_QUENCHED_HORIZON: usize = 12;
pub const MAX_COUPLING_HORIZON: usize = 6;
/// Cap on environment assignments summed over in one coupling evaluation.
pub const MAX_ASSIGNMENTS: u128 = 1 << 24;

fn refused<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Refused(msg.into()))
}

/// Endpoint law of the quenched walk after `horizon` steps.
pub fn enumerate_quenched_law<S: Scalar>(
    env: &LazyEnvironment<S>,
    start: &[i32],
    horizon: usize,
) -> Result<BTreeMap<Site, S>> {
    if horizon > MAX_QUENCHED_HORIZON {
        return refused(format!(
            "quenched enumeration is limited to horizon <= {MAX_QUENCHED_HORIZON}, got {horizon}"
        ));
    }
    if start.len() != env.dim() {
        return usage("start has the wrong dimension");
    }
    let mut law = BTreeMap::from([(Site::new(start), S::one())]);
    for _ in 0..horizon {
        let mut next: BTreeMap<Site, S> = BTreeMap::new();
        for (x, p) in &law {
            let k = env.kernel_at(x.coords())?;
            for (dir, q) in k.probs().iter().enumerate() {
                let slot = next.entry(x.neighbor(dir)).or_insert_with(S::zero);
                *slot = slot.clone() + p.clone() * q.clone();
            }
        }
        law = next;
    }
    Ok(law)
}

/// Direction index of the step `a -> b`.
fn step_dir(a: &[i32], b: &[i32]) -> usize {
    let axis = a.iter().zip(b).position(|(x, y)| x != y).expect("nearest-neighbor step");
    2 * axis + usize::from(b[axis] < a[axis])
}

/// The steps of a path prefix grouped by departure site.
fn step_table(path: &WalkPath, t: usize) -> BTreeMap<Site, Vec<usize>> {
    let mut table: BTreeMap<Site, Vec<usize>> = BTreeMap::new();
    for n in 0..t {
        table
            .entry(Site::new(path.position(n)))
            .or_default()
            .push(step_dir(path.position(n), path.position(n + 1)));
    }
    table
}

fn path_weight<S: Scalar>(table: &BTreeMap<Site, Vec<usize>>, kernel_of: impl Fn(&Site) -> usize, support: &[(TransitionKernel<S>, S)]) -> S {
    let mut w = S::one();
    for (z, dirs) in table {
        let k = &support[kernel_of(z)].0;
        for &d in dirs {
            w = w * k.prob(d).clone();
        }
    }
    w
}

/// `Σ_assignments Q-weight · f(assignment)` over all kernel assignments to
/// `sites` drawn from the finite support.
fn sum_over_assignments<S: Scalar>(
    sites: &[Site],
    support: &[(TransitionKernel<S>, S)],
    f: impl Fn(&BTreeMap<Site, usize>) -> S,
) -> Result<(S, u64)> {
    let s = support.len();
    let count = (s as u128).checked_pow(sites.len() as u32).unwrap_or(u128::MAX);
    if count > MAX_ASSIGNMENTS {
        return refused(format!("{count} environment assignments exceed the cap {MAX_ASSIGNMENTS}"));
    }
    let mut idx = vec![0usize; sites.len()];
    let mut total = S::zero();
    for _ in 0..count {
        let assign: BTreeMap<Site, usize> = sites.iter().cloned().zip(idx.iter().copied()).collect();
        let w = idx.iter().fold(S::one(), |acc, &i| acc * support[i].1.clone());
        total = total + w * f(&assign);
        for slot in idx.iter_mut() {
            *slot += 1;
            if *slot < s {
                break;
            }
            *slot = 0;
        }
    }
    Ok((total, count as u64))
}

/// Both sides of the coupling identity for fixed horizons.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingSides<S: Scalar> {
    /// Walks in two independent environments.
    pub lhs: S,
    /// Walks in one shared environment.
    pub rhs: S,
    pub disjoint: bool,
    pub assignments: u64,
}

impl<S: Scalar> CouplingSides<S> {
    pub fn residual(&self) -> S {
        (self.lhs.clone() - self.rhs.clone()).abs()
    }
}

fn check_coupling_inputs<S: Scalar>(
    l1: &WalkPath,
    l2: &WalkPath,
    dist: &EnvDistribution<S>,
    t1: usize,
    t2: usize,
) -> Result<Vec<(TransitionKernel<S>, S)>> {
    let Some(support) = dist.support() else {
        return refused("coupling enumeration needs a finite-support environment law");
    };
    dist.validate()?;
    if t1 > MAX_COUPLING_HORIZON || t2 > MAX_COUPLING_HORIZON {
        return refused(format!("coupling enumeration is limited to horizons <= {MAX_COUPLING_HORIZON}"));
    }
    if l1.dim() != dist.dim() || l2.dim() != dist.dim() {
        return usage("paths must have the environment's dimension");
    }
    if l1.horizon() < t1 || l2.horizon() < t2 {
        return usage("paths are shorter than the stopping horizons");
    }
    if !l1.is_nearest_neighbor() || !l2.is_nearest_neighbor() {
        return usage("paths must be nearest-neighbor");
    }
    Ok(support)
}

/// Probability that walk `i` follows `lambda_i` up to `T_i` and the two
/// traces are disjoint, under two independent environments (`lhs`) and under
/// one shared environment (`rhs`). Each side sums over every kernel
/// assignment to the sites the walks step from.
pub fn coupling_sides<S: Scalar>(
    lambda1: &WalkPath,
    lambda2: &WalkPath,
    dist: &EnvDistribution<S>,
    t1: usize,
    t2: usize,
) -> Result<CouplingSides<S>> {
    let support = check_coupling_inputs(lambda1, lambda2, dist, t1, t2)?;
    let trace1: BTreeSet<Site> = lambda1.truncated(t1).sites().collect();
    let disjoint = lambda2.truncated(t2).sites().all(|z| !trace1.contains(&z));
    let tab1 = step_table(lambda1, t1);
    let tab2 = step_table(lambda2, t2);
    let sites1: Vec<Site> = tab1.keys().cloned().collect();
    let sites2: Vec<Site> = tab2.keys().cloned().collect();
    let union: Vec<Site> = tab1.keys().chain(tab2.keys()).cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let indicator = if disjoint { S::one() } else { S::zero() };

    let (e1, n1) = sum_over_assignments(&sites1, &support, |a| path_weight(&tab1, |z| a[z], &support))?;
    let (e2, n2) = sum_over_assignments(&sites2, &support, |a| path_weight(&tab2, |z| a[z], &support))?;
    let (shared, n3) = sum_over_assignments(&union, &support, |a| {
        path_weight(&tab1, |z| a[z], &support) * path_weight(&tab2, |z| a[z], &support)
    })?;
    Ok(CouplingSides {
        lhs: indicator.clone() * e1 * e2,
        rhs: indicator * shared,
        disjoint,
        assignments: n1 + n2 + n3,
    })
}

/// `|LHS - RHS|` of the coupling identity for fixed horizons.
pub fn verify_coupling_identity<S: Scalar>(
    lambda1: &WalkPath,
    lambda2: &WalkPath,
    dist: &EnvDistribution<S>,
    t1: usize,
    t2: usize,
) -> Result<S> {
    Ok(coupling_sides(lambda1, lambda2, dist, t1, t2)?.residual())
}

/// Every nearest-neighbor path of length `t` from `start`.
pub fn all_paths(start: &[i32], t: usize) -> Vec<WalkPath> {
    let m = 2 * start.len();
    let total = m.pow(t as u32);
    (0..total)
        .map(|mut code| {
            let dirs: Vec<usize> = (0..t)
                .map(|_| {
                    let d = code % m;
                    code /= m;
                    d
                })
                .collect();
            WalkPath::from_directions(start, &dirs)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingSweep<S: Scalar> {
    pub pairs: usize,
    pub max_residual: S,
    /// Non-intersection probability up to the horizons, independent environments.
    pub total_lhs: S,
    /// The same, shared environment.
    pub total_rhs: S,
}

/// The identity over every pair of paths from the given starts.
pub fn coupling_sweep<S: Scalar>(
    start1: &[i32],
    start2: &[i32],
    dist: &EnvDistribution<S>,
    t1: usize,
    t2: usize,
) -> Result<CouplingSweep<S>> {
    let p1 = all_paths(start1, t1);
    let p2 = all_paths(start2, t2);
    let mut out = CouplingSweep {
        pairs: 0,
        max_residual: S::zero(),
        total_lhs: S::zero(),
        total_rhs: S::zero(),
    };
    for a in &p1 {
        for b in &p2 {
            let sides = coupling_sides(a, b, dist, t1, t2)?;
            if sides.residual() > out.max_residual {
                out.max_residual = sides.residual();
            }
            out.total_lhs = out.total_lhs + sides.lhs;
            out.total_rhs = out.total_rhs + sides.rhs;
            out.pairs += 1;
        }
    }
    Ok(out)
}

/// Law of the increments of a directed walk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDistribution<S: Scalar> {
    pub atoms: Vec<(Vec<i32>, S)>,
    /// Every atom advances the first coordinate by at least one.
    pub flagged: bool,
}

impl<S: Scalar> StepDistribution<S> {
    pub fn new(atoms: Vec<(Vec<i32>, S)>, flagged: bool) -> Result<Self> {
        let Some(d) = atoms.first().map(|a| a.0.len()) else {
            return config("step distribution has no atoms");
        };
        if d < 2 || atoms.iter().any(|a| a.0.len() != d) {
            return config("atoms must share a dimension of at least 2");
        }
        if atoms.iter().any(|a| a.1 < S::zero()) {
            return config("negative atom probability");
        }
        let total = atoms.iter().fold(S::zero(), |s, a| s + a.1.clone());
        if !S::approx_eq(&total, &S::one()) {
            return config(format!("atom probabilities sum to {total:?}"));
        }
        if flagged && atoms.iter().any(|a| a.0[0] < 1) {
            return config("flagged distribution has an atom without e1-increment >= 1");
        }
        Ok(Self { atoms, flagged })
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].0.len()
    }

    /// Largest sup-norm of an atom's transverse part.
    pub fn max_transverse(&self) -> i32 {
        self.atoms.iter().map(|a| a.0[1..].iter().map(|x| x.abs()).max().unwrap_or(0)).max().unwrap_or(0)
    }
}

/// `P(∃ n: W_n = z)` for `1 <= z_1 <= K_max` on a transverse box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HittingTable<S: Scalar> {
    pub k_max: i64,
    pub dim: usize,
    pub radius: i32,
    /// `levels[k - 1]` is the dense transverse box at level `k`.
    levels: Vec<Vec<S>>,
    /// Mass that stepped outside the box.
    pub leaked: S,
    /// Largest deviation from conservation observed while sweeping levels.
    pub conservation_error: S,
}

impl<S: Scalar> HittingTable<S> {
    fn side(&self) -> usize {
        (2 * self.radius + 1) as usize
    }

    fn offset(&self, transverse: &[i32]) -> Option<usize> {
        let side = self.side();
        let mut off = 0usize;
        for &c in transverse.iter().rev() {
            if c.abs() > self.radius {
                return None;
            }
            off = off * side + (c + self.radius) as usize;
        }
        Some(off)
    }

    /// Hitting probability of `z`; `None` outside the table's domain.
    pub fn get(&self, z: &[i32]) -> Option<&S> {
        if z.len() != self.dim || z[0] < 1 || z[0] as i64 > self.k_max {
            return None;
        }
        let off = self.offset(&z[1..])?;
        Some(&self.levels[z[0] as usize - 1][off])
    }

    /// Non-zero rows `(z_1, transverse, p)`.
    pub fn rows(&self) -> Vec<(i64, Vec<i32>, S)> {
        let side = self.side();
        let mut out = Vec::new();
        for (l, level) in self.levels.iter().enumerate() {
            for (off, p) in level.iter().enumerate() {
                if p.is_zero() {
                    continue;
                }
                let mut rest = off;
                let t: Vec<i32> = (1..self.dim)
                    .map(|_| {
                        let c = (rest % side) as i32 - self.radius;
                        rest /= side;
                        c
                    })
                    .collect();
                out.push((l as i64 + 1, t, p.clone()));
            }
        }
        out
    }
}

/// Forward slab dynamic program for the directed walk from the origin.
/// Each level is visited at most once, so the mass landing on `z` is its
/// hitting probability.
pub fn hitting_probabilities<S: Scalar>(
    sd: &StepDistribution<S>,
    k_max: i64,
    transverse_radius: i32,
) -> Result<HittingTable<S>> {
    if !sd.flagged {
        return usage("hitting probabilities need a flagged step distribution");
    }
    if k_max < 1 || transverse_radius < 0 {
        return usage("K_max must be positive and the radius non-negative");
    }
    let dim = sd.dim();
    let side = (2 * transverse_radius + 1) as usize;
    let cells = side.checked_pow((dim - 1) as u32).filter(|c| *c <= 1 << 26);
    let Some(cells) = cells else {
        return refused("transverse box too large");
    };
    let mut table = HittingTable {
        k_max,
        dim,
        radius: transverse_radius,
        levels: vec![vec![S::zero(); cells]; k_max as usize],
        leaked: S::zero(),
        conservation_error: S::zero(),
    };
    let decode = |off: usize| -> Vec<i32> {
        let mut rest = off;
        (1..dim)
            .map(|_| {
                let c = (rest % side) as i32 - transverse_radius;
                rest /= side;
                c
            })
            .collect()
    };
    // mass beyond K_max, and mass stepping out of the box
    let mut beyond = S::zero();
    let mut leaked = S::zero();
    let mut source = vec![S::zero(); cells];
    source[table.offset(&vec![0; dim - 1]).expect("origin in box")] = S::one();
    for level in 0..k_max {
        for (off, m) in source.iter().enumerate() {
            if m.is_zero() {
                continue;
            }
            let t = decode(off);
            for (step, p) in &sd.atoms {
                let mass = m.clone() * p.clone();
                let target = level + step[0] as i64;
                if target > k_max {
                    beyond = beyond + mass;
                    continue;
                }
                let dest: Vec<i32> = t.iter().zip(&step[1..]).map(|(a, b)| a + b).collect();
                match table.offset(&dest) {
                    Some(o) => {
                        let slot = &mut table.levels[target as usize - 1][o];
                        *slot = slot.clone() + mass;
                    }
                    None => leaked = leaked + mass,
                }
            }
        }
        // mass still ahead of the sweep plus what left it must be one
        let ahead = table.levels[level as usize..]
            .iter()
            .flatten()
            .fold(S::zero(), |s, p| s + p.clone());
        let drift = (ahead + beyond.clone() + leaked.clone() - S::one()).abs();
        if drift > table.conservation_error {
            table.conservation_error = drift;
        }
        source = table.levels[level as usize].clone();
    }
    table.leaked = leaked;
    if table.leaked > S::tolerance() {
        let need = k_max as i128 * sd.max_transverse() as i128;
        return refused(format!(
            "transverse truncation leaked {:?}; a radius of {need} is required",
            table.leaked
        ));
    }
    Ok(table)
}

/// `Σ_{z_1 = K} P(hit z)`.
pub fn slab_mass<S: Scalar>(table: &HittingTable<S>, k: i64) -> Result<S> {
    if k < 1 || k > table.k_max {
        return usage(format!("slab {k} is outside 1..={}", table.k_max));
    }
    Ok(table.levels[k as usize - 1].iter().fold(S::zero(), |s, p| s + p.clone()))
}
