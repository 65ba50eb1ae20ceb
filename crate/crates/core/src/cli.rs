//! Experiment driver behind the `rwre` binary.
//!
//! Every subcommand reads one JSON config, validates it completely, computes
//! in memory and only then writes its outputs, so a configuration error never
//! leaves files behind. Result files are deterministic functions of the
//! config and seed; wall-clock data goes to `meta.json` only.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{config, Error, Result};
use crate::estimators::{
    bs_series_summands, covariance_at_one, estimate_speed, ks_normality_check, quenched_coordinate_samples,
    quenched_mean_variance, Budget, FunctionalSpec,
};
use crate::intersection::{count_in, estimate_wk_decay, event_a_r, event_b_r, TriState, WkHorizon};
use crate::lattice::{EnvDistribution, LazyEnvironment};
use crate::oracle::{
    coupling_sides, enumerate_quenched_law, hitting_probabilities, slab_mass, StepDistribution,
};
use crate::pathio;
use crate::regeneration::{
    detect_regenerations, estimate_d_probability, estimate_gap_moments, gap_speed, regeneration_gaps,
    DetectorConfig, Direction, Gap,
};
use crate::seeding::{label_hash, SeedTree, StreamRole};
use crate::walk::{replicate, simulate_pair, simulate_path, PairMode, PairSeeds, WalkPath};

pub const SCHEMA_VERSION: u32 = 1;
pub const THREADS_VAR: &str = "RWRE_THREADS";

#[derive(Parser, Debug)]
#[command(name = "rwre", version, about = "Random walks in random environments: simulation and exact oracles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(clap::Args, Debug, Clone)]
pub struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; without it results go to stdout only.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `master_seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Speed and annealed covariance.
    Simulate(Common),
    /// Regeneration detection, gap moments and P(D).
    Regen(Common),
    /// W_K decay, I_N growth and A(R)/B(R) rates.
    Intersect(Common),
    /// Quenched-mean variance and KS diagnostics.
    Clt(Common),
    /// Summands of the geometric-scale variance series.
    Series(Common),
    /// Exact small-instance computations.
    Oracle {
        #[arg(value_enum)]
        kind: OracleKind,
        #[command(flatten)]
        common: Common,
    },
    /// Quick known-answer checks.
    Selftest {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleKind {
    Quenched,
    Coupling,
    Hitting,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DumpFormat {
    Text,
    Binary,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    /// Start of the quenched enumeration (default: origin).
    pub start: Option<Vec<i32>>,
    /// Coupling paths as direction indices (`2i` = +e_{i+1}, `2i+1` = -e_{i+1}).
    pub lambda1: Option<Vec<usize>>,
    pub lambda2: Option<Vec<usize>>,
    pub lambda1_start: Option<Vec<i32>>,
    pub lambda2_start: Option<Vec<i32>>,
    pub t1: Option<usize>,
    pub t2: Option<usize>,
    /// Step law for the hitting table: `[[increment], probability]` pairs.
    pub atoms: Option<Vec<(Vec<i32>, f64)>>,
    pub k_max: Option<i64>,
    pub radius: Option<i32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dimension: usize,
    pub environment: EnvDistribution<f64>,
    pub master_seed: u64,
    pub replicas: u64,
    pub horizon: usize,
    #[serde(default)]
    pub threads: Option<usize>,
    /// Centering speed / regeneration direction; estimated when absent.
    #[serde(default)]
    pub v: Option<Vec<f64>>,
    /// Confirmation margin `M`; absent means the default detector.
    #[serde(default)]
    pub margin: Option<f64>,
    #[serde(default)]
    pub k_grid: Option<Vec<i64>>,
    #[serde(default)]
    pub n_grid: Option<Vec<usize>>,
    #[serde(default)]
    pub r_grid: Option<Vec<i64>>,
    #[serde(default)]
    pub b: Option<f64>,
    #[serde(default)]
    pub m_range: Option<[u32; 2]>,
    #[serde(default)]
    pub functional: Option<FunctionalSpec>,
    #[serde(default)]
    pub n_env: Option<usize>,
    #[serde(default)]
    pub n_walks: Option<usize>,
    #[serde(default)]
    pub ks_envs: Option<usize>,
    #[serde(default)]
    pub moment_orders: Option<Vec<f64>>,
    /// Transverse distance between the two starts of A(R).
    #[serde(default)]
    pub separation: Option<i32>,
    #[serde(default)]
    pub horizon_multiplier: Option<f64>,
    #[serde(default)]
    pub dump_paths: Option<DumpFormat>,
    #[serde(default)]
    pub oracle: Option<OracleConfig>,
}

fn strictly_increasing<T: PartialOrd>(xs: &[T]) -> bool {
    xs.windows(2).all(|w| w[0] < w[1])
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return config(format!("schema_version {} is not {SCHEMA_VERSION}", self.schema_version));
        }
        if self.dimension < 2 {
            return config("dimension must be at least 2");
        }
        self.environment.validate()?;
        if self.environment.dim() != self.dimension {
            return config(format!(
                "environment kernels are {}-dimensional, config says {}",
                self.environment.dim(),
                self.dimension
            ));
        }
        if self.replicas < 1 || self.horizon < 1 {
            return config("replicas and horizon must be at least 1");
        }
        if self.threads == Some(0) {
            return config("threads must be positive");
        }
        if let Some(v) = &self.v {
            if v.len() != self.dimension || v.iter().any(|x| !x.is_finite()) {
                return config("v must be a finite vector of the config's dimension");
            }
        }
        if let Some(m) = self.margin {
            if !(m >= 0.0) {
                return config("margin must be non-negative");
            }
        }
        let grids_ok = self.k_grid.as_deref().map_or(true, strictly_increasing)
            && self.n_grid.as_deref().map_or(true, strictly_increasing)
            && self.r_grid.as_deref().map_or(true, strictly_increasing)
            && self.moment_orders.as_deref().map_or(true, strictly_increasing);
        if !grids_ok {
            return config("grids must be strictly increasing");
        }
        if self.k_grid.as_ref().is_some_and(|g| g.is_empty() || g[0] < 1)
            || self.n_grid.as_ref().is_some_and(|g| g.is_empty() || g[0] < 1)
            || self.r_grid.as_ref().is_some_and(|g| g.is_empty() || g[0] < 1)
        {
            return config("grids must be non-empty with positive entries");
        }
        if let Some(b) = self.b {
            if !(b > 1.0 && b <= 2.0) {
                return config("b must lie in (1, 2]");
            }
        }
        if let Some([lo, hi]) = self.m_range {
            if lo > hi || hi > 40 {
                return config("m_range must be [lo, hi] with lo <= hi <= 40");
            }
        }
        if let Some(f) = &self.functional {
            f.validate(self.dimension)?;
        }
        if self.n_env.is_some_and(|n| n < 2) || self.n_walks.is_some_and(|n| n < 2) {
            return config("n_env and n_walks must be at least 2");
        }
        if self.ks_envs == Some(0) {
            return config("ks_envs must be positive");
        }
        if self.horizon_multiplier.is_some_and(|m| !(m > 0.0)) {
            return config("horizon_multiplier must be positive");
        }
        if self.separation.is_some_and(|s| s < 1) {
            return config("separation must be positive");
        }
        Ok(())
    }

    /// `v` from the config, else the empirical speed of `replicas` walks of
    /// length `horizon` (or the mean drift when there is only one replica).
    fn centering(&self, tree: &SeedTree) -> Result<(Vec<f64>, &'static str)> {
        if let Some(v) = &self.v {
            return Ok((v.clone(), "config"));
        }
        if self.replicas < 2 {
            return Ok((self.environment.mean_drift(), "mean_drift"));
        }
        let pilot = tree.child(label_hash("pilot"));
        let dist = Arc::new(self.environment.clone());
        let origin = vec![0; self.dimension];
        let ends = replicate(self.replicas, |i| {
            let env = LazyEnvironment::from_shared(dist.clone(), pilot.seed(i, StreamRole::Environment));
            let p = simulate_path(&env, &origin, self.horizon, pilot.seed(i, StreamRole::Walk1)).expect("dimension checked");
            (p.end().to_vec(), self.horizon)
        });
        Ok((estimate_speed::<f64>(&ends)?.0, "estimated"))
    }

    fn detector(&self) -> DetectorConfig {
        self.margin.map_or_else(DetectorConfig::default, DetectorConfig::with_margin)
    }

    fn budget(&self) -> Budget {
        Budget {
            n_env: self.n_env.unwrap_or(100),
            n_walks: self.n_walks.unwrap_or(100),
        }
    }
}

/// Floats with 17 significant digits.
pub fn fmt17(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

/// Pretty JSON whose floats are written by [`fmt17`].
struct Sig17<'a>(serde_json::ser::PrettyFormatter<'a>);

impl serde_json::ser::Formatter for Sig17<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> std::io::Result<()> {
        w.write_all(fmt17(value).as_bytes())
    }
    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> std::io::Result<()> {
        self.write_f64(w, value as f64)
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_json17(value: &Value) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Sig17(serde_json::ser::PrettyFormatter::new()));
    value.serialize(&mut ser).expect("in-memory JSON");
    buf.push(b'\n');
    String::from_utf8(buf).expect("utf-8 JSON")
}

/// Delimited table with floats written by [`fmt17`].
#[derive(Debug, Default)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

pub enum Cell {
    I(i64),
    U(u64),
    F(f64),
    S(String),
}

impl From<i64> for Cell {
    fn from(x: i64) -> Self {
        Cell::I(x)
    }
}
impl From<u64> for Cell {
    fn from(x: u64) -> Self {
        Cell::U(x)
    }
}
impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::U(x as u64)
    }
}
impl From<i32> for Cell {
    fn from(x: i32) -> Self {
        Cell::I(x as i64)
    }
}
impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::F(x)
    }
}
impl From<&str> for Cell {
    fn from(x: &str) -> Self {
        Cell::S(x.to_string())
    }
}
impl From<bool> for Cell {
    fn from(x: bool) -> Self {
        Cell::S(x.to_string())
    }
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        self.rows.push(
            row.into_iter()
                .map(|c| match c {
                    Cell::I(x) => x.to_string(),
                    Cell::U(x) => x.to_string(),
                    Cell::F(x) => fmt17(x),
                    Cell::S(s) => s,
                })
                .collect(),
        );
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

/// Everything a subcommand produces, written only after it succeeds.
#[derive(Default)]
pub struct Report {
    pub summary: Value,
    pub files: Vec<(String, Vec<u8>)>,
    pub lines: Vec<String>,
    pub ok: bool,
}

impl Report {
    fn new(summary: Value) -> Self {
        Self {
            summary,
            ok: true,
            ..Default::default()
        }
    }

    fn table(&mut self, name: &str, t: &Table) -> Result<()> {
        self.files.push((name.to_string(), t.to_csv()?));
        Ok(())
    }
}

fn f64s(xs: &[f64]) -> Value {
    Value::Array(xs.iter().map(|&x| json!(x)).collect())
}

fn seeds_for(cfg: &ExperimentConfig, id: &str) -> SeedTree {
    SeedTree::new(cfg.master_seed, id)
}

fn run_simulate(cfg: &ExperimentConfig) -> Result<Report> {
    let tree = seeds_for(cfg, "simulate");
    let dist = Arc::new(cfg.environment.clone());
    let origin = vec![0; cfg.dimension];
    let h = cfg.horizon;
    let keep = cfg.dump_paths.is_some();
    let runs = replicate(cfg.replicas, |i| {
        let env = LazyEnvironment::from_shared(dist.clone(), tree.seed(i, StreamRole::Environment));
        let p = simulate_path(&env, &origin, h, tree.seed(i, StreamRole::Walk1)).expect("dimension checked");
        (p.end().to_vec(), keep.then_some(p))
    });
    let endpoints: Vec<(Vec<i32>, usize)> = runs.iter().map(|r| (r.0.clone(), h)).collect();
    let mut summary = json!({
        "experiment": "simulate",
        "replicas": cfg.replicas,
        "horizon": h,
        "mean_drift": f64s(&cfg.environment.mean_drift()),
    });
    let mut lines = Vec::new();
    if cfg.replicas >= 2 {
        let (speed, se) = estimate_speed::<f64>(&endpoints)?;
        let v = cfg.v.clone().unwrap_or_else(|| speed.clone());
        let ends: Vec<Vec<i32>> = runs.iter().map(|r| r.0.clone()).collect();
        let cov = covariance_at_one(&ends, h, &v)?;
        lines.push(format!(
            "speed {}",
            speed.iter().zip(&se).map(|(s, e)| format!("{} ± {}", fmt17(*s), fmt17(*e))).collect::<Vec<_>>().join(", ")
        ));
        summary["speed"] = f64s(&speed);
        summary["speed_stderr"] = f64s(&se);
        summary["v_used"] = f64s(&v);
        summary["v_source"] = json!(if cfg.v.is_some() { "config" } else { "estimated" });
        summary["covariance"] = Value::Array(cov.iter().map(|r| f64s(r)).collect());
    }
    let mut t = Table::new(&["replica"]);
    t.header.extend((1..=cfg.dimension).map(|i| format!("x{i}")));
    for (i, r) in runs.iter().enumerate() {
        let mut row: Vec<Cell> = vec![i.into()];
        row.extend(r.0.iter().map(|&c| Cell::from(c)));
        t.push(row);
    }
    let mut rep = Report::new(summary);
    rep.lines = lines;
    rep.table("endpoints.csv", &t)?;
    if let Some(fmt) = cfg.dump_paths {
        let paths: Vec<(u64, &WalkPath)> = runs
            .iter()
            .enumerate()
            .map(|(i, r)| (i as u64, r.1.as_ref().expect("kept")))
            .collect();
        let mut buf = Vec::new();
        match fmt {
            DumpFormat::Text => {
                pathio::write_text(&mut buf, &paths)?;
                rep.files.push(("paths.csv".into(), buf));
            }
            DumpFormat::Binary => {
                pathio::write_binary(&mut buf, &paths)?;
                rep.files.push(("paths.bin".into(), buf));
            }
        }
    }
    Ok(rep)
}

fn renewal_check(speed: &[f64], speed_se: &[f64], gaps: &[Gap]) -> Result<Value> {
    let (ratio, ratio_se) = gap_speed(gaps)?;
    let z: Vec<f64> = (0..speed.len())
        .map(|i| {
            let joint = (speed_se[i].powi(2) + ratio_se[i].powi(2)).sqrt();
            if joint > 0.0 {
                (speed[i] - ratio[i]).abs() / joint
            } else {
                0.0
            }
        })
        .collect();
    Ok(json!({ "gap_speed": f64s(&ratio), "gap_speed_stderr": f64s(&ratio_se), "z": f64s(&z) }))
}

fn run_regen(cfg: &ExperimentConfig) -> Result<Report> {
    let tree = seeds_for(cfg, "regen");
    let dist = Arc::new(cfg.environment.clone());
    let origin = vec![0; cfg.dimension];
    let paths = replicate(cfg.replicas, |i| {
        let env = LazyEnvironment::from_shared(dist.clone(), tree.seed(i, StreamRole::Environment));
        simulate_path(&env, &origin, cfg.horizon, tree.seed(i, StreamRole::Walk1)).expect("dimension checked")
    });
    let endpoints: Vec<(Vec<i32>, usize)> = paths.iter().map(|p| (p.end().to_vec(), p.horizon())).collect();
    let (speed, speed_se) = if cfg.replicas >= 2 {
        estimate_speed::<f64>(&endpoints)?
    } else {
        (endpoints[0].0.iter().map(|&x| x as f64 / cfg.horizon as f64).collect(), vec![0.0; cfg.dimension])
    };
    let mut directions = vec![Direction::E1];
    let v = cfg.v.clone().unwrap_or_else(|| speed.clone());
    if v.iter().any(|&x| x != 0.0) {
        directions.push(Direction::along(&v)?);
    }
    let det = cfg.detector();
    let orders = cfg.moment_orders.clone().unwrap_or_else(|| vec![1.0, 2.0]);
    let mut table = Table::new(&["replica", "direction", "time", "status"]);
    let mut gap_table = Table::new(&["replica", "direction", "dt"]);
    gap_table.header.extend((1..=cfg.dimension).map(|i| format!("dx{i}")));
    let mut per_dir = Vec::new();
    for dir in &directions {
        let records = replicate(cfg.replicas, |i| {
            let p = &paths[i as usize];
            let rec = detect_regenerations(p, dir, &det).expect("levels");
            let gaps = regeneration_gaps(&rec, p);
            (rec, gaps)
        });
        let mut gaps = Vec::new();
        let (mut confirmed, mut censored) = (0u64, 0u64);
        for (i, (rec, g)) in records.iter().enumerate() {
            confirmed += rec.confirmed_times.len() as u64;
            censored += rec.censored_candidates.len() as u64;
            for &t in &rec.confirmed_times {
                table.push(vec![i.into(), dir.label().into(), t.into(), "confirmed".into()]);
            }
            for &t in &rec.censored_candidates {
                table.push(vec![i.into(), dir.label().into(), t.into(), "censored".into()]);
            }
            for gap in g {
                let mut row: Vec<Cell> = vec![i.into(), dir.label().into(), gap.dt.into()];
                row.extend(gap.dx.iter().map(|&x| Cell::from(x)));
                gap_table.push(row);
            }
            gaps.extend(g.iter().cloned());
        }
        let mut entry = json!({
            "direction": dir.label(),
            "confirmed": confirmed,
            "censored": censored,
            "gaps": gaps.len(),
        });
        if let Direction::V(vd) = dir {
            entry["v"] = f64s(&vd.v);
        }
        if !gaps.is_empty() {
            let moments = estimate_gap_moments(&gaps, &orders)?;
            entry["dt_moments"] = serde_json::to_value(&moments)?;
        }
        if gaps.len() >= 2 && cfg.replicas >= 2 {
            entry["renewal"] = renewal_check(&speed, &speed_se, &gaps)?;
        }
        per_dir.push(entry);
    }
    let (p_d, p_d_se) = estimate_d_probability(&cfg.environment, cfg.horizon, cfg.replicas as usize, &tree.child(label_hash("event-d")))?;
    let summary = json!({
        "experiment": "regen",
        "replicas": cfg.replicas,
        "horizon": cfg.horizon,
        "speed": f64s(&speed),
        "speed_stderr": f64s(&speed_se),
        "margin": det.margin,
        "directions": per_dir,
        "p_d": p_d,
        "p_d_stderr": p_d_se,
    });
    let mut rep = Report::new(summary);
    rep.lines.push(format!("P(D) {} ± {}", fmt17(p_d), fmt17(p_d_se)));
    rep.table("regenerations.csv", &table)?;
    rep.table("gaps.csv", &gap_table)?;
    Ok(rep)
}

fn tally(states: &[TriState]) -> (u64, u64, u64) {
    let c = |s| states.iter().filter(|&&x| x == s).count() as u64;
    (c(TriState::True), c(TriState::False), c(TriState::Censored))
}

fn run_intersect(cfg: &ExperimentConfig) -> Result<Report> {
    let tree = seeds_for(cfg, "intersect");
    let k_grid = cfg.k_grid.clone().unwrap_or_else(|| vec![4, 8, 16, 32]);
    let n_grid = cfg.n_grid.clone().unwrap_or_else(|| vec![cfg.horizon]);
    let r_grid = cfg.r_grid.clone().unwrap_or_else(|| vec![4, 8, 16]);
    let (v, v_source) = cfg.centering(&tree)?;
    let speed_e1 = v[0];
    let horizon_rule = if speed_e1 > 0.0 {
        WkHorizon::SpeedScaled {
            multiplier: cfg.horizon_multiplier.unwrap_or(10.0),
            speed_e1,
            min: cfg.horizon,
        }
    } else {
        WkHorizon::Fixed(cfg.horizon)
    };
    let wk = estimate_wk_decay(&cfg.environment, &k_grid, cfg.replicas.max(100), horizon_rule, &tree.child(label_hash("wk")))?;
    let mut wk_table = Table::new(&["K", "successes", "replicas", "p_hat", "stderr", "horizon", "short_of_2K"]);
    for r in &wk.rows {
        wk_table.push(vec![r.k.into(), r.successes.into(), r.replicas.into(), r.p_hat.into(), r.stderr.into(), r.horizon.into(), r.short_of_2k.into()]);
    }

    // same-environment pairs from the origin, horizon max N
    let n_max = *n_grid.last().expect("non-empty");
    let origin = vec![0; cfg.dimension];
    let in_tree = tree.child(label_hash("in"));
    let counts = replicate(cfg.replicas, |i| {
        let (a, b) = simulate_pair(&PairMode::SameEnv, &cfg.environment, (&origin, &origin), n_max, PairSeeds::from_tree(&in_tree, i))
            .expect("validated");
        n_grid.iter().map(|&n| count_in(&a, &b, n).expect("n <= horizon")).collect::<Vec<u64>>()
    });
    let mut in_table = Table::new(&["N", "mean_I_N", "stderr"]);
    for (j, &n) in n_grid.iter().enumerate() {
        let xs: Vec<f64> = counts.iter().map(|c| c[j] as f64).collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let se = if xs.len() > 1 {
            (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64 / xs.len() as f64).sqrt()
        } else {
            0.0
        };
        in_table.push(vec![n.into(), m.into(), se.into()]);
    }

    // A(R) with transversely separated starts, B(R) on the first walk
    let mut second = origin.clone();
    second[1] = cfg.separation.unwrap_or(4);
    let ab_tree = tree.child(label_hash("ab"));
    let det = cfg.detector();
    let ab = replicate(cfg.replicas, |i| {
        let (a, b) = simulate_pair(&PairMode::SameEnv, &cfg.environment, (&origin, &second), cfg.horizon, PairSeeds::from_tree(&ab_tree, i))
            .expect("validated");
        let rec = detect_regenerations(&a, &Direction::E1, &det).expect("levels");
        r_grid
            .iter()
            .map(|&r| (event_a_r(&a, &b, r).expect("starts on the hyperplane"), event_b_r(&a, &rec, r).expect("e1 record")))
            .collect::<Vec<_>>()
    });
    let mut ab_table = Table::new(&["R", "a_true", "a_false", "a_censored", "b_true", "b_false", "b_censored"]);
    for (j, &r) in r_grid.iter().enumerate() {
        let a: Vec<TriState> = ab.iter().map(|x| x[j].0).collect();
        let b: Vec<TriState> = ab.iter().map(|x| x[j].1).collect();
        let (at, af, ac) = tally(&a);
        let (bt, bf, bc) = tally(&b);
        ab_table.push(vec![r.into(), at.into(), af.into(), ac.into(), bt.into(), bf.into(), bc.into()]);
    }

    let summary = json!({
        "experiment": "intersect",
        "replicas": cfg.replicas,
        "speed_e1": speed_e1,
        "v_source": v_source,
        "wk": serde_json::to_value(&wk)?,
    });
    let mut rep = Report::new(summary);
    if let Some(fit) = &wk.fit {
        rep.lines.push(format!("W_K slope {} ± {}", fmt17(fit.slope), fmt17(fit.slope_stderr)));
    } else {
        rep.lines.push("W_K fit degenerate".into());
    }
    rep.table("wk.csv", &wk_table)?;
    rep.table("in.csv", &in_table)?;
    rep.table("ab.csv", &ab_table)?;
    Ok(rep)
}

fn run_clt(cfg: &ExperimentConfig) -> Result<Report> {
    let tree = seeds_for(cfg, "clt");
    let spec = cfg.functional.clone().unwrap_or_default();
    let n_grid = cfg.n_grid.clone().unwrap_or_else(|| vec![256, 4096]);
    let (v, v_source) = cfg.centering(&tree)?;
    let budget = cfg.budget();
    let mut qmv = Table::new(&["N", "estimate", "raw", "stderr", "clamped"]);
    let mut rows = Vec::new();
    for &n in &n_grid {
        let est = quenched_mean_variance(&cfg.environment, &spec, n, &v, budget, &tree.child(n as u64))?;
        qmv.push(vec![n.into(), est.estimate.into(), est.raw.into(), est.stderr.into(), est.clamped.into()]);
        rows.push(serde_json::to_value(&est)?);
    }
    let ks_n = *n_grid.last().expect("non-empty");
    let ks_walks = budget.n_walks;
    let ks_tree = tree.child(label_hash("ks"));
    let mut ks = Table::new(&["env", "ks", "threshold", "passes", "degenerate"]);
    let mut passes = 0;
    let envs = cfg.ks_envs.unwrap_or(10);
    for e in 0..envs as u64 {
        let xs = quenched_coordinate_samples(
            &cfg.environment,
            ks_tree.seed(e, StreamRole::Environment),
            ks_tree.seed(e, StreamRole::Walk1),
            ks_n,
            ks_walks,
            &v,
            0,
        )?;
        let r = ks_normality_check(&xs)?;
        passes += r.passes() as usize;
        ks.push(vec![e.into(), r.ks.into(), r.threshold.into(), r.passes().into(), r.degenerate.into()]);
    }
    let summary = json!({
        "experiment": "clt",
        "functional": serde_json::to_value(&spec)?,
        "lipschitz": spec.lipschitz(),
        "v_used": f64s(&v),
        "v_source": v_source,
        "n_env": budget.n_env,
        "n_walks": budget.n_walks,
        "quenched_mean_variance": rows,
        "ks_n": ks_n,
        "ks_environments": envs,
        "ks_passes": passes,
    });
    let mut rep = Report::new(summary);
    rep.lines.push(format!("KS below threshold in {passes}/{envs} environments"));
    rep.table("quenched_variance.csv", &qmv)?;
    rep.table("ks.csv", &ks)?;
    Ok(rep)
}

fn run_series(cfg: &ExperimentConfig) -> Result<Report> {
    let tree = seeds_for(cfg, "series");
    let spec = cfg.functional.clone().unwrap_or_default();
    let b = cfg.b.unwrap_or(1.5);
    let [lo, hi] = cfg.m_range.unwrap_or([4, 14]);
    let (v, v_source) = cfg.centering(&tree)?;
    let s = bs_series_summands(&cfg.environment, &spec, b, lo..=hi, cfg.budget(), &v, &tree)?;
    let mut t = Table::new(&["m", "N", "estimate", "raw", "stderr", "clamped", "partial_sum"]);
    for (row, ps) in s.summands.iter().zip(&s.partial_sums) {
        t.push(vec![(row.m as u64).into(), row.n.into(), row.estimate.into(), row.raw.into(), row.stderr.into(), row.clamped.into(), (*ps).into()]);
    }
    let mut rep = Report::new(json!({
        "experiment": "series",
        "functional": serde_json::to_value(&spec)?,
        "v_used": f64s(&v),
        "v_source": v_source,
        "series": serde_json::to_value(&s)?,
    }));
    if let Some(fit) = &s.fit {
        rep.lines.push(format!("log-summand slope {} ± {}", fmt17(fit.slope), fmt17(fit.slope_stderr)));
    }
    rep.table("summands.csv", &t)?;
    Ok(rep)
}

fn oracle_cfg(cfg: &ExperimentConfig) -> OracleConfig {
    cfg.oracle.clone().unwrap_or_default()
}

fn check_dirs(dirs: &[usize], dim: usize) -> Result<()> {
    if dirs.iter().any(|&d| d >= 2 * dim) {
        return config("direction index out of range");
    }
    Ok(())
}

fn run_oracle(kind: OracleKind, cfg: &ExperimentConfig) -> Result<Report> {
    let oc = oracle_cfg(cfg);
    let tree = seeds_for(cfg, "oracle");
    let d = cfg.dimension;
    match kind {
        OracleKind::Quenched => {
            let start = oc.start.clone().unwrap_or_else(|| vec![0; d]);
            if start.len() != d {
                return config("start has the wrong dimension");
            }
            let env = LazyEnvironment::new(cfg.environment.clone(), tree.seed(0, StreamRole::Environment))?;
            let law = enumerate_quenched_law(&env, &start, cfg.horizon)?;
            let mut t = Table::new(&[]);
            t.header.extend((1..=d).map(|i| format!("x{i}")));
            t.header.push("probability".into());
            for (z, p) in &law {
                let mut row: Vec<Cell> = z.coords().iter().map(|&c| Cell::from(c)).collect();
                row.push((*p).into());
                t.push(row);
            }
            let total: f64 = law.values().sum();
            let mut rep = Report::new(json!({ "experiment": "oracle-quenched", "horizon": cfg.horizon, "endpoints": law.len(), "total": total }));
            rep.lines.push(format!("total probability {}", fmt17(total)));
            rep.table("quenched_law.csv", &t)?;
            Ok(rep)
        }
        OracleKind::Coupling => {
            let t1 = oc.t1.unwrap_or(cfg.horizon.min(4));
            let t2 = oc.t2.unwrap_or(t1);
            let s1 = oc.lambda1_start.clone().unwrap_or_else(|| vec![0; d]);
            let s2 = oc.lambda2_start.clone().unwrap_or_else(|| {
                let mut s = vec![0; d];
                s[1] = cfg.separation.unwrap_or(2);
                s
            });
            if s1.len() != d || s2.len() != d {
                return config("lambda starts have the wrong dimension");
            }
            let pairs: Vec<(WalkPath, WalkPath)> = match (&oc.lambda1, &oc.lambda2) {
                (Some(a), Some(b)) => {
                    check_dirs(a, d)?;
                    check_dirs(b, d)?;
                    vec![(WalkPath::from_directions(&s1, a), WalkPath::from_directions(&s2, b))]
                }
                (None, None) => (0..cfg.replicas)
                    .map(|i| {
                        let mut s = tree.stream(i, StreamRole::Auxiliary(0));
                        let mut dirs = |t: usize| -> Vec<usize> {
                            use rand::Rng;
                            (0..t).map(|_| s.random_range(0..2 * d)).collect()
                        };
                        let a = dirs(t1);
                        let b = dirs(t2);
                        (WalkPath::from_directions(&s1, &a), WalkPath::from_directions(&s2, &b))
                    })
                    .collect(),
                _ => return config("give both lambda1 and lambda2 or neither"),
            };
            let mut t = Table::new(&["config", "disjoint", "lhs", "rhs", "residual"]);
            let mut worst: f64 = 0.0;
            for (i, (a, b)) in pairs.iter().enumerate() {
                let sides = coupling_sides(a, b, &cfg.environment, t1, t2)?;
                worst = worst.max(sides.residual());
                t.push(vec![i.into(), sides.disjoint.into(), sides.lhs.into(), sides.rhs.into(), sides.residual().into()]);
            }
            let mut rep = Report::new(json!({ "experiment": "oracle-coupling", "t1": t1, "t2": t2, "configurations": pairs.len(), "max_residual": worst }));
            rep.lines.push(format!("residual {}", fmt17(worst)));
            rep.table("coupling.csv", &t)?;
            Ok(rep)
        }
        OracleKind::Hitting => {
            let Some(atoms) = oc.atoms.clone() else {
                return config("oracle.atoms is required for the hitting table");
            };
            let sd = StepDistribution::new(atoms, true)?;
            let k_max = oc.k_max.unwrap_or(50);
            let radius = oc.radius.unwrap_or_else(|| (k_max as i32).saturating_mul(sd.max_transverse()));
            let table = hitting_probabilities(&sd, k_max, radius)?;
            let mut rows = Table::new(&["z1"]);
            rows.header.extend((2..=sd.dim()).map(|i| format!("x{i}")));
            rows.header.push("probability".into());
            for (z1, tr, p) in table.rows() {
                let mut row: Vec<Cell> = vec![z1.into()];
                row.extend(tr.iter().map(|&c| Cell::from(c)));
                row.push(p.into());
                rows.push(row);
            }
            let mut slabs = Table::new(&["K", "slab_mass", "K_times_p_axis"]);
            let mut max_mass: f64 = 0.0;
            for k in 1..=k_max {
                let m = slab_mass(&table, k)?;
                max_mass = max_mass.max(m);
                let mut axis = vec![0; sd.dim()];
                axis[0] = k as i32;
                let p = table.get(&axis).copied().unwrap_or(0.0);
                slabs.push(vec![k.into(), m.into(), (k as f64 * p).into()]);
            }
            let mut rep = Report::new(json!({
                "experiment": "oracle-hitting",
                "k_max": k_max,
                "radius": radius,
                "max_slab_mass": max_mass,
                "leaked": table.leaked,
                "conservation_error": table.conservation_error,
            }));
            rep.lines.push(format!("max slab mass {}", fmt17(max_mass)));
            rep.table("hitting.csv", &rows)?;
            rep.table("slabs.csv", &slabs)?;
            Ok(rep)
        }
    }
}

struct Check {
    name: &'static str,
    ok: bool,
}

/// Known-answer checks on tiny instances.
pub fn selftest() -> Result<Report> {
    use crate::estimators::fit_tail_exponent;
    use crate::intersection::event_wk;
    use crate::lattice::TransitionKernel;
    use crate::regeneration::check_event_d;

    let kern = TransitionKernel::new(vec![0.4, 0.1, 0.25, 0.25])?;
    let constant = EnvDistribution::point_mass(kern.clone(), 0.1)?;
    let tree = SeedTree::new(0, "selftest");
    let mut checks = Vec::new();

    checks.push(Check {
        name: "ellipticity of the constant kernel",
        ok: crate::lattice::validate_ellipticity(&kern, &0.1) && !crate::lattice::validate_ellipticity(&kern, &0.2),
    });
    let env = LazyEnvironment::new(constant.clone(), 1)?;
    let p0 = simulate_path(&env, &[0, 0], 0, 1)?;
    checks.push(Check {
        name: "horizon 0 path is its start",
        ok: p0.len() == 1 && p0.start() == [0, 0],
    });
    let ends = replicate(1000, |i| {
        let p = simulate_path(&env, &[0, 0], 1000, tree.seed(i, StreamRole::Walk1)).expect("2d");
        (p.end().to_vec(), 1000usize)
    });
    let (speed, se) = estimate_speed::<f64>(&ends)?;
    checks.push(Check {
        name: "constant-kernel speed (0.3, 0) within 3 s.e.",
        ok: (speed[0] - 0.3).abs() < 3.0 * se[0] && speed[1].abs() < 3.0 * se[1],
    });
    let law: std::collections::BTreeMap<_, f64> = enumerate_quenched_law(&env, &[0, 0], 2)?;
    checks.push(Check {
        name: "quenched law P(endpoint (2,0)) = 0.16",
        ok: (law[&crate::lattice::Site::new(&[2, 0])] - 0.16).abs() < 1e-15,
    });
    let a = WalkPath::from_directions(&[0, 0], &[0, 0]);
    let b = WalkPath::from_directions(&[0, 3], &[0, 0]);
    checks.push(Check {
        name: "coupling residual for a point mass",
        ok: coupling_sides(&a, &b, &constant, 2, 2)?.residual() < 1e-12,
    });
    let line = WalkPath::from_directions(&[0, 0], &[0; 6]);
    checks.push(Check {
        name: "I_N of a self-avoiding path with itself is N + 1",
        ok: count_in(&line, &line, 6)? == 7,
    });
    let five: Vec<[i32; 2]> = vec![[4, 0], [5, 0]];
    let p5 = WalkPath::from_sites(&five.iter().map(|s| s.to_vec()).collect::<Vec<_>>())?;
    checks.push(Check {
        name: "W_K is strict",
        ok: event_wk(&p5, &p5, 4)?.occurred && !event_wk(&p5, &p5, 5)?.occurred,
    });
    let rec = detect_regenerations(&line, &Direction::E1, &DetectorConfig::with_margin(2.0))?;
    checks.push(Check {
        name: "monotone path regenerates at every time with margin 2",
        ok: rec.confirmed_times == (0..=4).collect::<Vec<_>>() && check_event_d(&line, &Direction::E1)?,
    });
    let atoms = [[1, 0, 0], [1, 1, 0], [1, -1, 0], [1, 0, 1], [1, 0, -1]];
    let sd = StepDistribution::new(atoms.iter().map(|a| (a.to_vec(), 0.2)).collect(), true)?;
    let hit = hitting_probabilities::<f64>(&sd, 10, 10)?;
    checks.push(Check {
        name: "unit-increment slab masses are 1",
        ok: (1..=10).all(|k| (slab_mass(&hit, k).unwrap() - 1.0).abs() < 1e-12),
    });
    let xs = [1.0, 2.0, 4.0, 8.0];
    let ps: Vec<f64> = xs.iter().map(|x: &f64| x.powi(-2)).collect();
    checks.push(Check {
        name: "exact power law slope -2",
        ok: (fit_tail_exponent(&xs, &ps, &[0.0; 4])?.fit.slope + 2.0).abs() < 1e-9,
    });
    checks.push(Check {
        name: "constant samples are KS-degenerate",
        ok: ks_normality_check(&[1.0f64; 25])?.degenerate,
    });

    let mut t = Table::new(&["check", "result"]);
    let mut rep = Report::new(Value::Null);
    for c in &checks {
        let verdict = if c.ok { "PASS" } else { "FAIL" };
        rep.lines.push(format!("{verdict} {}", c.name));
        t.push(vec![c.name.into(), verdict.into()]);
    }
    rep.ok = checks.iter().all(|c| c.ok);
    rep.summary = json!({
        "experiment": "selftest",
        "checks": checks.len(),
        "failed": checks.iter().filter(|c| !c.ok).count(),
    });
    rep.table("selftest.csv", &t)?;
    Ok(rep)
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(&common.config)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", common.config.display())))?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(s) = common.seed {
        cfg.master_seed = s;
    }
    Ok(cfg)
}

fn thread_count(flag: Option<usize>, cfg: Option<usize>) -> Result<Option<usize>> {
    if let Some(n) = flag.or(cfg) {
        return if n == 0 { config("threads must be positive") } else { Ok(Some(n)) };
    }
    match std::env::var(THREADS_VAR) {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => config(format!("{THREADS_VAR}={s} is not a positive integer")),
        },
        Err(_) => Ok(None),
    }
}

fn write_outputs(dir: &Path, rep: &Report, meta: &Value) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("summary.json"), to_json17(&rep.summary))?;
    for (name, bytes) in &rep.files {
        std::fs::write(dir.join(name), bytes)?;
    }
    std::fs::write(dir.join("meta.json"), to_json17(meta))?;
    Ok(())
}

fn unix_now() -> f64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

type Job = Box<dyn FnOnce() -> Result<Report> + Send>;

fn config_job(
    name: &str,
    common: Common,
    f: fn(&ExperimentConfig) -> Result<Report>,
) -> Result<(String, Option<PathBuf>, Option<usize>, Option<usize>, Job)> {
    let cfg = load_config(&common)?;
    let threads = cfg.threads;
    Ok((name.to_string(), common.out, common.threads, threads, Box::new(move || f(&cfg))))
}

fn execute(cli: Cli) -> Result<bool> {
    let started = unix_now();
    let (name, out, threads, cfg_threads, job): (String, Option<PathBuf>, Option<usize>, Option<usize>, Job) =
        match cli.command {
            Command::Selftest { out, threads } => ("selftest".into(), out, threads, None, Box::new(selftest)),
            Command::Oracle { kind, common } => {
                let cfg = load_config(&common)?;
                let label = format!("oracle-{}", format!("{kind:?}").to_lowercase());
                (label, common.out, common.threads, cfg.threads, Box::new(move || run_oracle(kind, &cfg)))
            }
            Command::Simulate(c) => config_job("simulate", c, run_simulate)?,
            Command::Regen(c) => config_job("regen", c, run_regen)?,
            Command::Intersect(c) => config_job("intersect", c, run_intersect)?,
            Command::Clt(c) => config_job("clt", c, run_clt)?,
            Command::Series(c) => config_job("series", c, run_series)?,
        };
    let n = thread_count(threads, cfg_threads)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = n {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Config(e.to_string()))?;
    let used = pool.current_num_threads();
    let rep = pool.install(job)?;
    for l in &rep.lines {
        println!("{l}");
    }
    if let Some(dir) = out {
        let meta = json!({
            "subcommand": name,
            "version": env!("CARGO_PKG_VERSION"),
            "threads": used,
            "started_unix": started,
            "finished_unix": unix_now(),
        });
        write_outputs(&dir, &rep, &meta)?;
    }
    Ok(rep.ok)
}

/// Parse `argv`, run, and map the outcome to an exit code: 0 on success, 1 on
/// a failed self-test or I/O failure, 2 on configuration errors and refusals.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("rwre: {e}");
            match e {
                Error::Config(_) | Error::Usage(_) | Error::Refused(_) | Error::Json(_) => 2,
                Error::Io(_) | Error::Csv(_) => 1,
            }
        }
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"schema_version": 1, "dimension": 2,
        "environment": {"family": {"point_mass": {"kernel": [0.25, 0.25, 0.25, 0.25]}}, "kappa": 0.25},
        "master_seed": 0, "replicas": 1, "horizon": 1}"#;

    #[test]
    fn minimal_config_parses() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        let tree = SeedTree::new(0, "test");
        assert_eq!(cfg.centering(&tree).unwrap(), (vec![0.0, 0.0], "mean_drift"));
        assert_eq!(cfg.budget(), Budget { n_env: 100, n_walks: 100 });
    }

    #[test]
    fn grids_must_increase() {
        let bad = MINIMAL.replace("\"horizon\": 1", "\"horizon\": 1, \"n_grid\": [8, 4]");
        assert!(matches!(ExperimentConfig::from_json(&bad), Err(Error::Config(_))));
        let zero = MINIMAL.replace("\"horizon\": 1", "\"horizon\": 0");
        assert!(ExperimentConfig::from_json(&zero).is_err());
    }

    #[test]
    fn floats_keep_seventeen_digits() {
        assert_eq!(fmt17(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt17(-2.0), "-2.0000000000000000e0");
        let text = to_json17(&json!({"x": 0.3, "n": 3}));
        assert_eq!(text, "{\n  \"n\": 3,\n  \"x\": 2.9999999999999999e-1\n}\n");
        assert_eq!(fmt17(0.1).parse::<f64>().unwrap(), 0.1);
    }

    #[test]
    fn table_writes_csv() {
        let mut t = Table::new(&["k", "p", "tag"]);
        t.push(vec![3usize.into(), 0.5.into(), "a,b".into()]);
        assert_eq!(String::from_utf8(t.to_csv().unwrap()).unwrap(), "k,p,tag\n3,5.0000000000000000e-1,\"a,b\"\n");
    }

    #[test]
    fn explicit_threads_win() {
        assert_eq!(thread_count(Some(3), Some(5)).unwrap(), Some(3));
        assert_eq!(thread_count(None, Some(5)).unwrap(), Some(5));
        assert!(thread_count(Some(0), None).is_err());
    }
}
