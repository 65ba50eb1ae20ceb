//! Two-walk intersection events and statistics.
//!
//! Intersections are found with a site-keyed index over one path probed by
//! the other; time-pair counts keep per-site visit counts.

use std::collections::BTreeSet;
use std::sync::Arc;

use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};

use crate::error::{config, usage, Result};
use crate::estimators::{fit_tail_exponent, TailFit};
use crate::lattice::{EnvDistribution, LazyEnvironment, Site};
use crate::regeneration::RegenerationRecord;
use crate::scalar::Scalar;
use crate::seeding::{SeedTree, StreamRole};
use crate::walk::{replicate, simulate_path, WalkPath};

/// Outcome of an event that may not be decidable within the horizon.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriState {
    True,
    False,
    Censored,
}

impl TriState {
    pub fn is_true(self) -> bool {
        self == TriState::True
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntersectionReport {
    pub common_sites: BTreeSet<Site>,
    /// Sup-norm distance from each start to its closest intersection point.
    pub first_meet_distance: (Option<i64>, Option<i64>),
    /// Time-pair count up to `n = min(horizons)`.
    pub i_n: u64,
    pub n: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HalfSpaceEvent {
    pub k: i64,
    pub occurred: bool,
}

fn check_dims(p1: &WalkPath, p2: &WalkPath) -> Result<()> {
    if p1.dim() != p2.dim() {
        return usage(format!("paths of dimensions {} and {}", p1.dim(), p2.dim()));
    }
    Ok(())
}

/// Sites visited by both paths within their horizons.
pub fn intersection_points(p1: &WalkPath, p2: &WalkPath) -> Result<BTreeSet<Site>> {
    check_dims(p1, p2)?;
    let index: FxHashSet<Site> = p1.sites().collect();
    Ok(p2.sites().filter(|s| index.contains(s)).collect())
}

/// `W_K`: the paths share a site `z` with `⟨z, e_1⟩ > K`.
pub fn event_wk(p1: &WalkPath, p2: &WalkPath, k: i64) -> Result<HalfSpaceEvent> {
    check_dims(p1, p2)?;
    let index: FxHashSet<Site> = p1.sites().filter(|s| s.level() > k).collect();
    let occurred = p2.sites().any(|s| s.level() > k && index.contains(&s));
    Ok(HalfSpaceEvent { k, occurred })
}

/// Largest `e_1`-level among common sites.
pub fn max_common_level(p1: &WalkPath, p2: &WalkPath) -> Result<Option<i64>> {
    Ok(intersection_points(p1, p2)?.iter().map(Site::level).max())
}

/// `I_N = |{(i, j) ∈ [0, N]^2 : X_1(i) = X_2(j)}|`.
pub fn count_in(p1: &WalkPath, p2: &WalkPath, n: usize) -> Result<u64> {
    check_dims(p1, p2)?;
    if n > p1.horizon() || n > p2.horizon() {
        return usage(format!(
            "N = {n} exceeds a horizon ({}, {})",
            p1.horizon(),
            p2.horizon()
        ));
    }
    let mut visits: FxHashMap<Site, u64> = FxHashMap::default();
    for s in p1.truncated(n).sites() {
        *visits.entry(s).or_insert(0) += 1;
    }
    Ok(p2.truncated(n).sites().map(|s| visits.get(&s).copied().unwrap_or(0)).sum())
}

/// For each walk, the sup-norm distance from its start to the closest common
/// site.
pub fn closest_intersection_distances(p1: &WalkPath, p2: &WalkPath) -> Result<(Option<i64>, Option<i64>)> {
    let common = intersection_points(p1, p2)?;
    let u1 = Site::new(p1.start());
    let u2 = Site::new(p2.start());
    Ok((
        common.iter().map(|z| z.sup_distance(&u1)).min(),
        common.iter().map(|z| z.sup_distance(&u2)).min(),
    ))
}

/// Both walks meet, and for each walk the closest meeting point is at
/// distance `>= r` from its start.
pub fn both_closest_at_least(p1: &WalkPath, p2: &WalkPath, r: i64) -> Result<bool> {
    Ok(match closest_intersection_distances(p1, p2)? {
        (Some(a), Some(b)) => a >= r && b >= r,
        _ => false,
    })
}

pub fn intersection_report(p1: &WalkPath, p2: &WalkPath) -> Result<IntersectionReport> {
    let n = p1.horizon().min(p2.horizon());
    Ok(IntersectionReport {
        common_sites: intersection_points(p1, p2)?,
        first_meet_distance: closest_intersection_distances(p1, p2)?,
        i_n: count_in(p1, p2, n)?,
        n,
    })
}

/// First time the path enters `H_k = {⟨x, e_1⟩ > k}`.
pub fn first_entry(path: &WalkPath, k: i64) -> Option<usize> {
    (0..path.len()).find(|&t| path.level(t) > k)
}

/// Observed part of the time window `[from, to)` where `to` may be unknown.
fn window(path: &WalkPath, from: usize, to: Option<usize>) -> std::ops::Range<usize> {
    from..to.unwrap_or(path.len())
}

/// Decide "stays above `floor` and the two windows are disjoint" from the
/// observed parts of the windows; `complete` says whether both windows were
/// fully observed.
fn disjoint_above(
    p1: &WalkPath,
    w1: std::ops::Range<usize>,
    p2: &WalkPath,
    w2: std::ops::Range<usize>,
    floor: i64,
    strict: bool,
    complete: bool,
) -> TriState {
    let below = |p: &WalkPath, t: usize| {
        let l = p.level(t);
        if strict {
            l <= floor
        } else {
            l < floor
        }
    };
    if w1.clone().any(|t| below(p1, t)) || w2.clone().any(|t| below(p2, t)) {
        return TriState::False;
    }
    let index: FxHashSet<&[i32]> = w1.map(|t| p1.position(t)).collect();
    if w2.into_iter().any(|t| index.contains(p2.position(t))) {
        return TriState::False;
    }
    if complete {
        TriState::True
    } else {
        TriState::Censored
    }
}

/// `A(R)`: before their first entries into `H_R` both walks stay in
/// `{⟨x, e_1⟩ >= 0}` and their pre-entry segments do not meet.
pub fn event_a_r(p1: &WalkPath, p2: &WalkPath, r: i64) -> Result<TriState> {
    check_dims(p1, p2)?;
    if p1.level(0) != 0 || p2.level(0) != 0 {
        return usage("A(R) needs both starts on the hyperplane ⟨x, e_1⟩ = 0");
    }
    let t1 = first_entry(p1, r);
    let t2 = first_entry(p2, r);
    Ok(disjoint_above(
        p1,
        window(p1, 0, t1),
        p2,
        window(p2, 0, t2),
        0,
        false,
        t1.is_some() && t2.is_some(),
    ))
}

/// `B(R)`: for some integer `n ∈ [R/2, R]` the first entry into `H_n` is a
/// regeneration time.
pub fn event_b_r(path: &WalkPath, record: &RegenerationRecord, r: i64) -> Result<TriState> {
    if !matches!(record.direction, crate::regeneration::Direction::E1) {
        return usage("B(R) uses e1-regenerations");
    }
    if record.path_horizon != path.horizon() {
        return usage("record was not produced from this path");
    }
    let mut undecided = false;
    for n in (r + 1) / 2..=r {
        match first_entry(path, n) {
            Some(t) if record.is_confirmed(t) => return Ok(TriState::True),
            Some(t) if record.is_censored(t) => undecided = true,
            Some(_) => {}
            None => undecided = true,
        }
    }
    Ok(if undecided {
        TriState::Censored
    } else {
        TriState::False
    })
}

/// Slab event `S_k` with slab width `w`: between their entries into `H_{kw}`
/// and `H_{(k+1)w}` both walks stay strictly above level `kw` and their
/// segments are disjoint.
pub fn slab_event(p1: &WalkPath, p2: &WalkPath, w: i64, k: i64) -> Result<TriState> {
    check_dims(p1, p2)?;
    if w < 1 || k < 1 {
        return usage("slab width and index must be positive");
    }
    let (lo, hi) = (k * w, (k + 1) * w);
    let (Some(a1), Some(a2)) = (first_entry(p1, lo), first_entry(p2, lo)) else {
        return Ok(TriState::Censored);
    };
    let b1 = first_entry(p1, hi);
    let b2 = first_entry(p2, hi);
    Ok(disjoint_above(
        p1,
        window(p1, a1, b1),
        p2,
        window(p2, a2, b2),
        lo,
        true,
        b1.is_some() && b2.is_some(),
    ))
}

/// How long to run the walks for a given `K`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WkHorizon {
    Fixed(usize),
    /// `max(min, ceil(multiplier * K / speed_e1))`.
    SpeedScaled {
        multiplier: f64,
        speed_e1: f64,
        min: usize,
    },
}

impl WkHorizon {
    pub fn for_k(&self, k: i64) -> usize {
        match *self {
            WkHorizon::Fixed(h) => h,
            WkHorizon::SpeedScaled {
                multiplier,
                speed_e1,
                min,
            } => ((multiplier * k as f64 / speed_e1).ceil() as usize).max(min),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WkRow {
    pub k: i64,
    pub successes: u64,
    pub replicas: u64,
    pub p_hat: f64,
    pub stderr: f64,
    pub horizon: usize,
    /// Replicas in which some walk ended before entering `H_{2K}`.
    pub short_of_2k: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WkDecay {
    pub rows: Vec<WkRow>,
    pub fit: Option<TailFit>,
    /// Grid points left out of the fit because no replica intersected there.
    pub excluded: Vec<i64>,
    pub degenerate: bool,
}

/// Estimate the same-environment annealed probability of `W_K` over a grid,
/// both walks started at the origin; each `K` uses its own replicas.
pub fn estimate_wk_decay<S: Scalar>(
    dist: &EnvDistribution<S>,
    k_grid: &[i64],
    replicas: u64,
    horizon: WkHorizon,
    seeds: &SeedTree,
) -> Result<WkDecay> {
    if k_grid.is_empty() || k_grid.windows(2).any(|w| w[1] <= w[0]) {
        return config("K grid must be non-empty and strictly increasing");
    }
    if k_grid[0] < 1 {
        return config("K grid must be positive");
    }
    if replicas < 100 {
        return config("W_K estimation needs at least 100 replicas");
    }
    dist.validate()?;
    let dist = Arc::new(dist.clone());
    let origin = vec![0; dist.dim()];
    let mut rows = Vec::with_capacity(k_grid.len());
    for &k in k_grid {
        let h = horizon.for_k(k);
        let tree = seeds.child(k as u64);
        let outcomes = replicate(replicas, |i| {
            let env = LazyEnvironment::from_shared(dist.clone(), tree.seed(i, StreamRole::Environment));
            let a = simulate_path(&env, &origin, h, tree.seed(i, StreamRole::Walk1)).expect("dimension");
            let b = simulate_path(&env, &origin, h, tree.seed(i, StreamRole::Walk2)).expect("dimension");
            let hit = event_wk(&a, &b, k).expect("dimension").occurred;
            let short = first_entry(&a, 2 * k).is_none() || first_entry(&b, 2 * k).is_none();
            (hit, short)
        });
        let successes = outcomes.iter().filter(|o| o.0).count() as u64;
        let short = outcomes.iter().filter(|o| o.1).count() as u64;
        let p = successes as f64 / replicas as f64;
        rows.push(WkRow {
            k,
            successes,
            replicas,
            p_hat: p,
            stderr: (p * (1.0 - p) / replicas as f64).sqrt(),
            horizon: h,
            short_of_2k: short,
        });
    }
    let excluded: Vec<i64> = rows.iter().filter(|r| r.successes == 0).map(|r| r.k).collect();
    let used: Vec<&WkRow> = rows.iter().filter(|r| r.successes > 0).collect();
    let fit = if used.len() >= 2 {
        let xs: Vec<f64> = used.iter().map(|r| r.k as f64).collect();
        let ps: Vec<f64> = used.iter().map(|r| r.p_hat).collect();
        let se: Vec<f64> = used.iter().map(|r| r.stderr).collect();
        Some(fit_tail_exponent(&xs, &ps, &se)?.fit)
    } else {
        None
    };
    Ok(WkDecay {
        degenerate: fit.is_none(),
        rows,
        fit,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regeneration::{detect_regenerations, DetectorConfig, Direction};

    fn path(sites: &[[i32; 2]]) -> WalkPath {
        WalkPath::from_sites(&sites.iter().map(|s| s.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// Walk along e1 at transverse height `y`, from level 0 to `len`.
    fn line(y: i32, len: i32) -> WalkPath {
        path(&(0..=len).map(|x| [x, y]).collect::<Vec<_>>())
    }

    #[test]
    fn intersection_point_examples() {
        let a = path(&[[0, 0], [1, 0]]);
        let b = path(&[[0, 1], [1, 1]]);
        assert!(intersection_points(&a, &b).unwrap().is_empty());
        let c = path(&[[1, 1], [1, 0], [2, 0]]);
        assert!(intersection_points(&a, &c).unwrap().contains(&Site::new(&[1, 0])));
        let loopy = path(&[[0, 0], [1, 0], [1, 1], [0, 1], [0, 0]]);
        assert_eq!(intersection_points(&loopy, &loopy).unwrap().len(), 4);
    }

    #[test]
    fn wk_is_strict() {
        let a = path(&[[4, 1], [5, 1], [5, 0]]);
        let b = path(&[[5, -1], [5, 0], [6, 0]]);
        assert!(event_wk(&a, &b, 4).unwrap().occurred);
        assert!(!event_wk(&a, &b, 5).unwrap().occurred);
        let far = line(7, 10);
        for k in -3..10 {
            assert!(!event_wk(&a, &far, k).unwrap().occurred);
        }
    }

    #[test]
    fn count_in_examples() {
        assert_eq!(count_in(&line(0, 5), &line(3, 5), 5).unwrap(), 0);
        assert_eq!(count_in(&line(0, 6), &line(0, 6), 6).unwrap(), 7);
        // X1 visits z = (1, 0) at times 2 and 4; X2 at time 3 only.
        let x1 = path(&[[0, 1], [0, 0], [1, 0], [2, 0], [1, 0], [1, -1]]);
        let x2 = path(&[[1, 3], [1, 2], [1, 1], [1, 0], [1, -1], [2, -1]]);
        // (1,-1) is shared with x1 at time 5; N = 4 excludes it.
        assert_eq!(count_in(&x1, &x2, 4).unwrap(), 2);
        assert!(count_in(&x1, &x2, 6).is_err());
    }

    #[test]
    fn closest_distances() {
        assert_eq!(
            closest_intersection_distances(&line(0, 3), &line(2, 3)).unwrap(),
            (None, None)
        );
        // single common site (3, 4); U1 = (0, 0), U2 = (0, 8)
        let mut s1 = vec![[0, 0]];
        for x in 1..=3 {
            s1.push([x, 0]);
        }
        for y in 1..=4 {
            s1.push([3, y]);
        }
        let mut s2 = vec![[0, 8]];
        for x in 1..=3 {
            s2.push([x, 8]);
        }
        for y in (4..8).rev() {
            s2.push([3, y]);
        }
        let (p1, p2) = (path(&s1), path(&s2));
        assert_eq!(intersection_points(&p1, &p2).unwrap().len(), 1);
        assert_eq!(closest_intersection_distances(&p1, &p2).unwrap(), (Some(4), Some(4)));
        assert!(both_closest_at_least(&p1, &p2, 4).unwrap());
        assert!(!both_closest_at_least(&p1, &p2, 5).unwrap());
    }

    #[test]
    fn a_r_examples() {
        let dip = path(&[[0, 0], [-1, 0], [0, 0], [1, 0], [2, 0], [3, 0]]);
        assert_eq!(event_a_r(&dip, &line(5, 5), 2).unwrap(), TriState::False);
        let cross = path(&[[0, 3], [1, 3], [1, 2], [1, 1], [1, 0], [2, 0], [3, 0]]);
        assert_eq!(event_a_r(&line(0, 5), &cross, 2).unwrap(), TriState::False);
        assert_eq!(event_a_r(&line(0, 5), &line(4, 5), 3).unwrap(), TriState::True);
        assert_eq!(event_a_r(&line(0, 2), &line(4, 5), 3).unwrap(), TriState::Censored);
        assert!(event_a_r(&path(&[[1, 0]]), &line(4, 5), 3).is_err());
    }

    #[test]
    fn b_r_examples() {
        let cfg = DetectorConfig::with_margin(0.0);
        let mono = line(0, 10);
        let rec = detect_regenerations(&mono, &Direction::E1, &cfg).unwrap();
        assert_eq!(event_b_r(&mono, &rec, 2).unwrap(), TriState::True);

        // levels 0 1 2 3 2 1 0 -1 -1 -1 0 1 .. 8: entries into H_1 and H_2
        // happen on the first climb and do not regenerate
        let mut s = vec![];
        for x in 0..=3 {
            s.push([x, 0]);
        }
        for x in (-1..3).rev() {
            s.push([x, 0]);
        }
        for y in 1..=2 {
            s.push([-1, y]);
        }
        for x in 0..=8 {
            s.push([x, 2]);
        }
        let p = path(&s);
        let rec = detect_regenerations(&p, &Direction::E1, &cfg).unwrap();
        assert_eq!(event_b_r(&p, &rec, 2).unwrap(), TriState::False);
        // the entry into H_3 is the level-4 record of the final climb
        assert!(rec.is_confirmed(first_entry(&p, 3).unwrap()));
        assert_eq!(event_b_r(&p, &rec, 3).unwrap(), TriState::True);

        let none = RegenerationRecord {
            direction: Direction::E1,
            confirmed_times: vec![],
            censored_candidates: vec![],
            path_horizon: mono.horizon(),
        };
        assert_eq!(event_b_r(&mono, &none, 4).unwrap(), TriState::False);
    }

    #[test]
    fn slab_event_examples() {
        assert_eq!(slab_event(&line(0, 10), &line(3, 10), 2, 1).unwrap(), TriState::True);
        assert_eq!(slab_event(&line(0, 10), &line(0, 10), 2, 1).unwrap(), TriState::False);
        assert_eq!(slab_event(&line(0, 3), &line(3, 10), 2, 1).unwrap(), TriState::Censored);
        let back = path(&[[0, 0], [1, 0], [2, 0], [3, 0], [2, 0], [3, 0], [4, 0], [5, 0], [6, 0]]);
        assert_eq!(slab_event(&back, &line(3, 10), 2, 1).unwrap(), TriState::False);
    }

    #[test]
    fn wk_grid_validation() {
        let k = crate::lattice::TransitionKernel::new(vec![0.4, 0.1, 0.25, 0.25]).unwrap();
        let dist = EnvDistribution::point_mass(k, 0.1).unwrap();
        let tree = SeedTree::new(1, "wk");
        assert!(estimate_wk_decay(&dist, &[4, 4, 8], 100, WkHorizon::Fixed(100), &tree).is_err());
        assert!(estimate_wk_decay(&dist, &[4, 8], 10, WkHorizon::Fixed(100), &tree).is_err());
    }

    #[test]
    fn wk_degenerate_when_walks_never_meet_late() {
        // horizon so short the walks cannot reach level K + 1
        let k = crate::lattice::TransitionKernel::new(vec![0.4, 0.1, 0.25, 0.25]).unwrap();
        let dist = EnvDistribution::point_mass(k, 0.1).unwrap();
        let out = estimate_wk_decay(&dist, &[8, 16], 100, WkHorizon::Fixed(5), &SeedTree::new(2, "wk")).unwrap();
        assert!(out.rows.iter().all(|r| r.p_hat == 0.0));
        assert!(out.degenerate && out.fit.is_none());
        assert_eq!(out.excluded, vec![8, 16]);
    }
}
