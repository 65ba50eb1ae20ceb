//! Quenched walks and pairs of walks.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{usage, Result};
use crate::lattice::{make_coupled_triple, CouplingSeeds, EnvDistribution, LazyEnvironment, Site};
use crate::scalar::Scalar;
use crate::seeding::{self, Stream};

/// A recorded nearest-neighbor trajectory `X(0), ..., X(horizon)`.
///
/// Positions are stored flat, `dim` coordinates per time step.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalkPath {
    dim: usize,
    coords: Vec<i32>,
    pub walk_seed: u64,
}

impl std::fmt::Debug for WalkPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WalkPath")
            .field("dim", &self.dim)
            .field("horizon", &self.horizon())
            .field("start", &self.start())
            .field("end", &self.end())
            .finish()
    }
}

impl WalkPath {
    /// Build from explicit sites, checking the nearest-neighbor property.
    pub fn from_sites(sites: &[Vec<i32>]) -> Result<Self> {
        let Some(first) = sites.first() else {
            return usage("a path needs at least one site");
        };
        let dim = first.len();
        if dim == 0 {
            return usage("sites must have dimension >= 1");
        }
        let mut coords = Vec::with_capacity(sites.len() * dim);
        for (t, s) in sites.iter().enumerate() {
            if s.len() != dim {
                return usage(format!("site {t} has dimension {} != {dim}", s.len()));
            }
            if t > 0 {
                let prev = &sites[t - 1];
                let l1: i64 = s.iter().zip(prev).map(|(&a, &b)| (a as i64 - b as i64).abs()).sum();
                if l1 != 1 {
                    return usage(format!("sites {} and {t} are not nearest neighbors", t - 1));
                }
            }
            coords.extend_from_slice(s);
        }
        Ok(Self {
            dim,
            coords,
            walk_seed: 0,
        })
    }

    /// Path starting at `start` following direction indices `dirs`.
    pub fn from_directions(start: &[i32], dirs: &[usize]) -> Self {
        let dim = start.len();
        let mut path = Self::with_capacity(start, dirs.len());
        let mut cur = start.to_vec();
        for &d in dirs {
            assert!(d < 2 * dim, "direction index out of range");
            cur[d / 2] += if d % 2 == 0 { 1 } else { -1 };
            path.coords.extend_from_slice(&cur);
        }
        path
    }

    fn with_capacity(start: &[i32], horizon: usize) -> Self {
        let mut coords = Vec::with_capacity((horizon + 1) * start.len());
        coords.extend_from_slice(start);
        Self {
            dim: start.len(),
            coords,
            walk_seed: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> usize {
        self.coords.len() / self.dim - 1
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    #[inline]
    pub fn position(&self, t: usize) -> &[i32] {
        &self.coords[t * self.dim..(t + 1) * self.dim]
    }

    pub fn start(&self) -> &[i32] {
        self.position(0)
    }

    pub fn end(&self) -> &[i32] {
        self.position(self.horizon())
    }

    pub fn positions(&self) -> std::slice::ChunksExact<'_, i32> {
        self.coords.chunks_exact(self.dim)
    }

    pub fn sites(&self) -> impl Iterator<Item = Site> + '_ {
        self.positions().map(Site::new)
    }

    /// `⟨X(t), e_1⟩`.
    #[inline]
    pub fn level(&self, t: usize) -> i64 {
        self.coords[t * self.dim] as i64
    }

    pub fn levels(&self) -> Vec<i64> {
        self.positions().map(|p| p[0] as i64).collect()
    }

    /// Prefix `X(0..=t)`.
    pub fn truncated(&self, t: usize) -> WalkPath {
        WalkPath {
            dim: self.dim,
            coords: self.coords[..(t + 1) * self.dim].to_vec(),
            walk_seed: self.walk_seed,
        }
    }

    pub fn flat_coords(&self) -> &[i32] {
        &self.coords
    }

    /// Nearest-neighbor check over the whole path.
    pub fn is_nearest_neighbor(&self) -> bool {
        self.positions()
            .zip(self.positions().skip(1))
            .all(|(a, b)| a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).sum::<i32>() == 1)
    }
}

/// One step from `site` in `env`.
pub fn step<S: Scalar>(env: &LazyEnvironment<S>, site: &[i32], stream: &mut Stream) -> Site {
    let u: f64 = stream.random();
    let dir = env.with_kernel(site, |k| k.pick(u));
    Site::new(site).neighbor(dir)
}

/// Advance a path in place until it reaches `horizon`.
fn extend<S: Scalar>(env: &LazyEnvironment<S>, path: &mut WalkPath, horizon: usize, stream: &mut Stream) {
    let dim = path.dim;
    let mut cur: smallvec::SmallVec<[i32; 8]> = smallvec::SmallVec::from_slice(path.end());
    path.coords.reserve((horizon - path.horizon()) * dim);
    while path.horizon() < horizon {
        let u: f64 = stream.random();
        let dir = env.with_kernel(&cur, |k| k.pick(u));
        cur[dir / 2] += if dir % 2 == 0 { 1 } else { -1 };
        path.coords.extend_from_slice(&cur);
    }
}

/// Quenched path of length `horizon` from `start`, driven by `walk_seed`.
pub fn simulate_path<S: Scalar>(
    env: &LazyEnvironment<S>,
    start: &[i32],
    horizon: usize,
    walk_seed: u64,
) -> Result<WalkPath> {
    if start.len() != env.dim() {
        return usage(format!(
            "start of dimension {} in a {}-dimensional environment",
            start.len(),
            env.dim()
        ));
    }
    let mut path = WalkPath::with_capacity(start, horizon);
    path.walk_seed = walk_seed;
    let mut stream = seeding::stream(walk_seed);
    extend(env, &mut path, horizon, &mut stream);
    Ok(path)
}

/// How the two environments of a pair relate.
#[derive(Clone, Debug, PartialEq)]
pub enum PairMode {
    /// Both walks in one environment.
    SameEnv,
    /// Each walk in its own independently seeded environment.
    IndependentEnvs,
    /// The three-environment coupling around `lambda1`, `lambda2`. With
    /// `shared = false` walk `i` runs in `env_i`; with `shared = true` both
    /// run in `env3`.
    Coupled {
        lambda1: WalkPath,
        lambda2: WalkPath,
        shared: bool,
    },
}

/// Seeds for a pair of walks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSeeds {
    /// Environment seeds; `SameEnv` uses the first, `IndependentEnvs` the first
    /// two, `Coupled` all three as the `η` fields.
    pub env: [u64; 3],
    /// Seed of the shared field `J` (coupled mode only).
    pub shared: u64,
    pub walk: [u64; 2],
}

impl PairSeeds {
    pub fn from_tree(tree: &seeding::SeedTree, replica: u64) -> Self {
        use seeding::StreamRole::*;
        Self {
            env: [
                tree.seed(replica, Environment),
                tree.seed(replica, Environment2),
                tree.seed(replica, Environment3),
            ],
            shared: tree.seed(replica, Shared),
            walk: [tree.seed(replica, Walk1), tree.seed(replica, Walk2)],
        }
    }
}

pub fn simulate_pair<S: Scalar>(
    mode: &PairMode,
    dist: &EnvDistribution<S>,
    starts: (&[i32], &[i32]),
    horizon: usize,
    seeds: PairSeeds,
) -> Result<(WalkPath, WalkPath)> {
    match mode {
        PairMode::SameEnv => {
            let env = LazyEnvironment::new(dist.clone(), seeds.env[0])?;
            Ok((
                simulate_path(&env, starts.0, horizon, seeds.walk[0])?,
                simulate_path(&env, starts.1, horizon, seeds.walk[1])?,
            ))
        }
        PairMode::IndependentEnvs => {
            let e1 = LazyEnvironment::new(dist.clone(), seeds.env[0])?;
            let e2 = LazyEnvironment::new(dist.clone(), seeds.env[1])?;
            Ok((
                simulate_path(&e1, starts.0, horizon, seeds.walk[0])?,
                simulate_path(&e2, starts.1, horizon, seeds.walk[1])?,
            ))
        }
        PairMode::Coupled {
            lambda1,
            lambda2,
            shared,
        } => {
            for l in [lambda1, lambda2] {
                if !l.is_nearest_neighbor() {
                    return usage("coupling paths must be nearest-neighbor paths");
                }
            }
            let triple = make_coupled_triple(
                lambda1,
                lambda2,
                dist.clone(),
                CouplingSeeds {
                    eta: seeds.env,
                    shared: seeds.shared,
                },
            )?;
            let (a, b) = if *shared {
                (&triple.env3, &triple.env3)
            } else {
                (&triple.env1, &triple.env2)
            };
            Ok((
                simulate_path(a, starts.0, horizon, seeds.walk[0])?,
                simulate_path(b, starts.1, horizon, seeds.walk[1])?,
            ))
        }
    }
}

/// Run `f` for replicas `0..n` in parallel, collecting in replica order.
pub fn replicate<T, F>(n: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}
