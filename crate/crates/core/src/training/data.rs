//! Synthetic operator-learning tasks and their on-disk layout.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::geometry::{fmt_f64, PointCloud};
use crate::mls::{estimate_derivatives, MlsConfig, MlsError};
use crate::scalar::Scalar;

use super::TrainError;

const TAU: f64 = std::f64::consts::TAU;
/// Heat-kernel time of the 2-D smoothing operator.
const SMOOTHING_TIME: f64 = 0.01;
/// Fine grid used for the quadrature in the discontinuous task.
const FINE_GRID: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// `u(x) = ∫₀ˣ v`.
    Antiderivative1d,
    /// `−u'' = v`, `u(0) = u(1) = 0`.
    Poisson1d,
    /// `u = e^{tΔ} v` on the periodic unit square.
    Smoothing2d,
    /// Input: solution `p` of `−(a p')' = 1`; output: the piecewise constant `a`.
    DiscontinuousInverse,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Antiderivative1d => "antiderivative1d",
            TaskKind::Poisson1d => "poisson1d",
            TaskKind::Smoothing2d => "smoothing2d",
            TaskKind::DiscontinuousInverse => "discontinuous_inverse",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            TaskKind::Smoothing2d => 2,
            _ => 1,
        }
    }

    /// Targets are smooth enough for derivative supervision.
    pub fn smooth(self) -> bool {
        self != TaskKind::DiscontinuousInverse
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "antiderivative1d" => Ok(TaskKind::Antiderivative1d),
            "poisson1d" => Ok(TaskKind::Poisson1d),
            "smoothing2d" => Ok(TaskKind::Smoothing2d),
            "discontinuous_inverse" => Ok(TaskKind::DiscontinuousInverse),
            _ => Err(format!(
                "unknown task {s:?} (expected antiderivative1d, poisson1d, smoothing2d or discontinuous_inverse)"
            )),
        }
    }
}

/// `v(y) = a₀ + Σ_m a_m cos(2πmy) + b_m sin(2πmy)` on `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Fourier1d {
    pub a0: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl Fourier1d {
    /// Coefficients drawn as `N(0, m^{−2·decay})` for mode `m`.
    pub fn random<R: Rng>(modes: usize, decay: f64, rng: &mut R) -> Self {
        let mut g = || -> f64 { StandardNormal.sample(rng) };
        let a0 = g();
        let mut a = Vec::with_capacity(modes);
        let mut b = Vec::with_capacity(modes);
        for m in 1..=modes {
            let s = (m as f64).powf(-decay);
            a.push(g() * s);
            b.push(g() * s);
        }
        Self { a0, a, b }
    }

    fn terms(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.a.iter().zip(&self.b).enumerate().map(|(i, (&a, &b))| (TAU * (i + 1) as f64, a, b))
    }

    pub fn value(&self, y: f64) -> f64 {
        self.a0 + self.terms().map(|(w, a, b)| a * (w * y).cos() + b * (w * y).sin()).sum::<f64>()
    }

    pub fn derivative(&self, y: f64) -> f64 {
        self.terms().map(|(w, a, b)| w * (b * (w * y).cos() - a * (w * y).sin())).sum()
    }

    /// `∫₀ˣ v`.
    pub fn antiderivative(&self, x: f64) -> f64 {
        self.a0 * x + self.terms().map(|(w, a, b)| (a * (w * x).sin() + b * (1.0 - (w * x).cos())) / w).sum::<f64>()
    }

    /// Solution of `−u'' = v` with homogeneous Dirichlet conditions, and its derivative.
    pub fn poisson(&self, x: f64) -> (f64, f64) {
        // particular solution Σ (a cos + b sin)/ω² − a₀x²/2, corrected by a linear term
        let c0: f64 = self.terms().map(|(w, a, _)| a / (w * w)).sum();
        let up: f64 = self.terms().map(|(w, a, b)| (a * (w * x).cos() + b * (w * x).sin()) / (w * w)).sum::<f64>()
            - 0.5 * self.a0 * x * x;
        let dp: f64 = self.terms().map(|(w, a, b)| (b * (w * x).cos() - a * (w * x).sin()) / w).sum::<f64>()
            - self.a0 * x;
        (up - c0 + 0.5 * self.a0 * x, dp + 0.5 * self.a0)
    }
}

/// Real trigonometric field on the unit square over a fixed set of wave vectors.
#[derive(Debug, Clone, PartialEq)]
struct Fourier2d {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Fourier2d {
    fn random<R: Rng>(modes: usize, decay: f64, rng: &mut R) -> Self {
        let mut waves = Vec::new();
        let m = modes as i64;
        for k1 in -m..=m {
            for k2 in -m..=m {
                // one representative of each ±k pair, plus the constant mode
                if (k1, k2) < (0, 0) || k1 * k1 + k2 * k2 > m * m {
                    continue;
                }
                let r = ((k1 * k1 + k2 * k2) as f64).sqrt().max(1.0).powf(-decay);
                let c: f64 = StandardNormal.sample(rng);
                let s: f64 = StandardNormal.sample(rng);
                waves.push((TAU * k1 as f64, TAU * k2 as f64, c * r, s * r));
            }
        }
        Self { waves }
    }

    fn smoothed(&self, t: f64) -> Self {
        let waves = self
            .waves
            .iter()
            .map(|&(w1, w2, c, s)| {
                let d = (-t * (w1 * w1 + w2 * w2)).exp();
                (w1, w2, c * d, s * d)
            })
            .collect();
        Self { waves }
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.waves
            .iter()
            .map(|&(w1, w2, c, s)| {
                let p = w1 * x[0] + w2 * x[1];
                c * p.cos() + s * p.sin()
            })
            .sum()
    }

    fn gradient(&self, x: &[f64]) -> [f64; 2] {
        let mut g = [0.0; 2];
        for &(w1, w2, c, s) in &self.waves {
            let p = w1 * x[0] + w2 * x[1];
            let d = s * p.cos() - c * p.sin();
            g[0] += w1 * d;
            g[1] += w2 * d;
        }
        g
    }
}

/// Where derivative targets come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DerivTargets {
    #[default]
    None,
    /// Analytic derivatives of the clean targets.
    Exact,
    /// MLS estimates from the (possibly noisy) sampled targets.
    Mls { k: usize, m: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: TaskKind,
    pub samples: usize,
    pub sensors: usize,
    pub queries: usize,
    /// Noise std as a fraction of each target's range.
    pub noise: f64,
    pub modes: usize,
    /// Mode `m` has amplitude `m^{−decay}`.
    pub decay: f64,
    pub derivs: DerivTargets,
}

impl SynthSpec {
    pub fn new(kind: TaskKind, samples: usize) -> Self {
        let (sensors, queries) = match kind {
            TaskKind::Smoothing2d => (10, 144),
            _ => (64, 100),
        };
        Self { kind, samples, sensors, queries, noise: 0.0, modes: 3, decay: 1.0, derivs: DerivTargets::None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: String,
    pub seed: u64,
    pub noise: f64,
    pub samples: usize,
    pub sensors: usize,
    pub queries: usize,
    pub dim: usize,
    pub modes: usize,
    pub decay: f64,
    pub derivs: DerivTargets,
    pub derivatives_reliable: bool,
    /// MLS stencils that needed regularisation, summed over samples.
    pub flagged_points: usize,
}

/// Input functions at shared sensors and targets at shared query points.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorDataset<T> {
    pub meta: DatasetMeta,
    /// `J̃ × n` sensor locations.
    pub sensors: Vec<T>,
    /// `Q × n` query locations.
    pub queries: Vec<T>,
    pub inputs: Vec<Vec<T>>,
    pub targets: Vec<Vec<T>>,
    /// `Q × n` gradient components per sample.
    pub derivs: Option<Vec<Vec<T>>>,
}

impl<T: Scalar> OperatorDataset<T> {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

struct Geometry {
    sensors: Vec<f64>,
    queries: Vec<f64>,
}

fn geometry(spec: &SynthSpec, seed: u64) -> Geometry {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = spec.kind.dim();
    // sensors on a cell-centred grid (per axis in 2-D), queries scattered
    let sensors = if dim == 1 {
        (0..spec.sensors).map(|i| (i as f64 + 0.5) / spec.sensors as f64).collect()
    } else {
        let s = spec.sensors;
        (0..s * s).flat_map(|i| [((i / s) as f64 + 0.5) / s as f64, ((i % s) as f64 + 0.5) / s as f64]).collect()
    };
    let queries = (0..spec.queries * dim).map(|_| rng.random::<f64>()).collect();
    Geometry { sensors, queries }
}

/// Fine-grid solution `p` of `−(a p')' = 1`, `p(0) = p(1) = 0`.
fn solve_variable_coefficient(a: &dyn Fn(f64) -> f64) -> Vec<f64> {
    let n = FINE_GRID;
    let h = 1.0 / n as f64;
    let xs: Vec<f64> = (0..=n).map(|i| i as f64 * h).collect();
    let inv: Vec<f64> = xs.iter().map(|&x| 1.0 / a(x)).collect();
    let trap = |f: &dyn Fn(usize) -> f64| -> f64 { (0..n).map(|i| 0.5 * h * (f(i) + f(i + 1))).sum() };
    // a p' = c − x, with c fixed by p(1) = 0
    let c = trap(&|i| xs[i] * inv[i]) / trap(&|i| inv[i]);
    let mut p = vec![0.0; n + 1];
    for i in 0..n {
        let f0 = (c - xs[i]) * inv[i];
        let f1 = (c - xs[i + 1]) * inv[i + 1];
        p[i + 1] = p[i] + 0.5 * h * (f0 + f1);
    }
    p
}

fn interp(grid: &[f64], x: f64) -> f64 {
    let n = grid.len() - 1;
    let s = (x.clamp(0.0, 1.0) * n as f64).min(n as f64 - 1e-12);
    let i = s.floor() as usize;
    let t = s - i as f64;
    grid[i] * (1.0 - t) + grid[i + 1] * t
}

/// One sample: input values at sensors, target values and exact gradients at queries.
fn sample(spec: &SynthSpec, geo: &Geometry, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    match spec.kind {
        TaskKind::Antiderivative1d | TaskKind::Poisson1d => {
            let v = Fourier1d::random(spec.modes, spec.decay, rng);
            let input = geo.sensors.iter().map(|&y| v.value(y)).collect();
            let (u, du): (Vec<f64>, Vec<f64>) = geo
                .queries
                .iter()
                .map(|&x| match spec.kind {
                    TaskKind::Antiderivative1d => (v.antiderivative(x), v.value(x)),
                    _ => v.poisson(x),
                })
                .unzip();
            (input, u, du)
        }
        TaskKind::Smoothing2d => {
            let v = Fourier2d::random(spec.modes, spec.decay, rng);
            let u = v.smoothed(SMOOTHING_TIME);
            let input = geo.sensors.chunks_exact(2).map(|y| v.value(y)).collect();
            let targets = geo.queries.chunks_exact(2).map(|x| u.value(x)).collect();
            let grads = geo.queries.chunks_exact(2).flat_map(|x| u.gradient(x)).collect();
            (input, targets, grads)
        }
        TaskKind::DiscontinuousInverse => {
            let g = Fourier1d::random(spec.modes.max(1), spec.decay, rng);
            let a = move |x: f64| if g.value(x) > g.a0 { 2.0 } else { 1.0 };
            let p = solve_variable_coefficient(&a);
            let input = geo.sensors.iter().map(|&y| interp(&p, y)).collect();
            let targets = geo.queries.iter().map(|&x| a(x)).collect();
            (input, targets, vec![0.0; geo.queries.len()])
        }
    }
}

fn to_t<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x)).collect()
}

fn generate<T: Scalar>(
    spec: &SynthSpec,
    seed: u64,
    func_stream: u64,
    noise_stream: u64,
    geo: &Geometry,
) -> Result<OperatorDataset<T>, TrainError> {
    if spec.samples == 0 || spec.sensors == 0 || spec.queries == 0 {
        return Err(TrainError::BadConfig("dataset sizes must be positive".into()));
    }
    if !(spec.noise >= 0.0) || !spec.noise.is_finite() {
        return Err(TrainError::BadConfig(format!("noise must be nonnegative, got {}", spec.noise)));
    }
    let dim = spec.kind.dim();
    let mut frng = ChaCha8Rng::seed_from_u64(seed);
    frng.set_stream(func_stream);
    let mut nrng = ChaCha8Rng::seed_from_u64(seed);
    nrng.set_stream(noise_stream);
    let mut inputs = Vec::with_capacity(spec.samples);
    let mut targets = Vec::with_capacity(spec.samples);
    let mut derivs = Vec::with_capacity(spec.samples);
    let mut flagged = 0;
    for k in 0..spec.samples {
        let (input, mut u, du) = sample(spec, geo, &mut frng);
        if spec.noise > 0.0 {
            let (lo, hi) = u.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
            let std = spec.noise * (hi - lo);
            if std > 0.0 {
                let normal = Normal::new(0.0, std).expect("finite std");
                for x in u.iter_mut() {
                    *x += normal.sample(&mut nrng);
                }
            }
        }
        match spec.derivs {
            DerivTargets::None => {}
            DerivTargets::Exact => derivs.push(to_t(&du)),
            DerivTargets::Mls { k: kk, m } => {
                let mls_err = |source: MlsError| TrainError::Mls { sample: k, source };
                if m == 0 {
                    return Err(TrainError::BadConfig("MLS derivative targets need m >= 1".into()));
                }
                let cloud = PointCloud::from_flat(dim, to_t::<T>(&geo.queries), to_t::<T>(&u))
                    .map_err(|e| mls_err(e.into()))?;
                let jet = estimate_derivatives(&cloud, &MlsConfig::new(kk, m)).map_err(mls_err)?;
                flagged += jet.flagged.len();
                derivs.push((0..jet.len()).flat_map(|j| jet.gradient(j)).collect());
            }
        }
        inputs.push(to_t(&input));
        targets.push(to_t(&u));
    }
    let meta = DatasetMeta {
        generator: spec.kind.name().into(),
        seed,
        noise: spec.noise,
        samples: spec.samples,
        sensors: geo.sensors.len() / dim,
        queries: spec.queries,
        dim,
        modes: spec.modes,
        decay: spec.decay,
        derivs: spec.derivs.clone(),
        derivatives_reliable: spec.kind.smooth() && spec.derivs != DerivTargets::None,
        flagged_points: flagged,
    };
    Ok(OperatorDataset {
        meta,
        sensors: to_t(&geo.sensors),
        queries: to_t(&geo.queries),
        inputs,
        targets,
        derivs: if spec.derivs == DerivTargets::None { None } else { Some(derivs) },
    })
}

/// Seeded synthetic dataset. Geometry, input functions and noise use
/// independent random streams, so the clean targets do not depend on `noise`.
pub fn synth_dataset<T: Scalar>(spec: &SynthSpec, seed: u64) -> Result<OperatorDataset<T>, TrainError> {
    generate(spec, seed, 1, 100, &geometry(spec, seed))
}

/// Train, validation and test sets.
pub type Split<T> = (OperatorDataset<T>, OperatorDataset<T>, OperatorDataset<T>);

/// Training set per `spec` plus clean validation and test sets of the given
/// sizes on the same sensors and queries, with fresh input functions.
pub fn synth_split<T: Scalar>(
    spec: &SynthSpec,
    val: usize,
    test: usize,
    seed: u64,
) -> Result<Split<T>, TrainError> {
    let geo = geometry(spec, seed);
    let clean = |samples| SynthSpec { samples, noise: 0.0, derivs: DerivTargets::None, ..spec.clone() };
    Ok((
        generate(spec, seed, 1, 100, &geo)?,
        generate(&clean(val), seed, 2, 101, &geo)?,
        generate(&clean(test), seed, 3, 102, &geo)?,
    ))
}

fn io<E: std::fmt::Display>(e: E) -> TrainError {
    TrainError::Io(e.to_string())
}

fn write_points(path: &Path, prefix: &str, pts: &[f64], dim: usize) -> Result<(), TrainError> {
    let mut wr = csv::Writer::from_path(path).map_err(io)?;
    wr.write_record((1..=dim).map(|d| format!("{prefix}{d}"))).map_err(io)?;
    for p in pts.chunks_exact(dim) {
        wr.write_record(p.iter().map(|&x| fmt_f64(x))).map_err(io)?;
    }
    wr.flush().map_err(io)
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), TrainError> {
    let mut rd = csv::Reader::from_path(path).map_err(io)?;
    let header = rd.headers().map_err(io)?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(io)?;
        let row = rec
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|e| TrainError::Io(format!("{}: {e}", path.display()))))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

/// Writes `meta.json`, `sensors.csv`, `queries.csv` and per-sample
/// `samples/input_NNNNN.csv` (`v`) and `samples/target_NNNNN.csv`
/// (`u` and `du_dx1..`) files.
pub fn write_dataset<T: Scalar>(dir: &Path, ds: &OperatorDataset<T>) -> Result<(), TrainError> {
    let samples = dir.join("samples");
    fs::create_dir_all(&samples).map_err(io)?;
    let meta = serde_json::to_string_pretty(&ds.meta).map_err(io)?;
    fs::write(dir.join("meta.json"), meta + "\n").map_err(io)?;
    let dim = ds.meta.dim;
    let f = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<f64>>();
    write_points(&dir.join("sensors.csv"), "y", &f(&ds.sensors), dim)?;
    write_points(&dir.join("queries.csv"), "x", &f(&ds.queries), dim)?;
    for k in 0..ds.len() {
        let mut wr = csv::Writer::from_path(samples.join(format!("input_{k:05}.csv"))).map_err(io)?;
        wr.write_record(["v"]).map_err(io)?;
        for v in &ds.inputs[k] {
            wr.write_record([fmt_f64(v.as_f64())]).map_err(io)?;
        }
        wr.flush().map_err(io)?;
        let mut wr = csv::Writer::from_path(samples.join(format!("target_{k:05}.csv"))).map_err(io)?;
        let mut header = vec!["u".to_string()];
        if ds.derivs.is_some() {
            header.extend((1..=dim).map(|d| format!("du_dx{d}")));
        }
        wr.write_record(&header).map_err(io)?;
        for j in 0..ds.targets[k].len() {
            let mut rec = vec![fmt_f64(ds.targets[k][j].as_f64())];
            if let Some(d) = &ds.derivs {
                rec.extend(d[k][j * dim..(j + 1) * dim].iter().map(|x| fmt_f64(x.as_f64())));
            }
            wr.write_record(&rec).map_err(io)?;
        }
        wr.flush().map_err(io)?;
    }
    Ok(())
}

pub fn read_dataset<T: Scalar>(dir: &Path) -> Result<OperatorDataset<T>, TrainError> {
    let meta: DatasetMeta =
        serde_json::from_str(&fs::read_to_string(dir.join("meta.json")).map_err(io)?).map_err(io)?;
    let dim = meta.dim;
    let flat = |rows: Vec<Vec<f64>>| -> Result<Vec<T>, TrainError> {
        if rows.iter().any(|r| r.len() != dim) {
            return Err(TrainError::Io(format!("expected {dim} coordinate columns")));
        }
        Ok(rows.into_iter().flatten().map(T::lit).collect())
    };
    let sensors = flat(read_table(&dir.join("sensors.csv"))?.1)?;
    let queries = flat(read_table(&dir.join("queries.csv"))?.1)?;
    let has_derivs = meta.derivs != DerivTargets::None;
    let mut inputs = Vec::with_capacity(meta.samples);
    let mut targets = Vec::with_capacity(meta.samples);
    let mut derivs = Vec::new();
    for k in 0..meta.samples {
        let (_, rows) = read_table(&dir.join("samples").join(format!("input_{k:05}.csv")))?;
        inputs.push(rows.iter().map(|r| T::lit(r[0])).collect());
        let (header, rows) = read_table(&dir.join("samples").join(format!("target_{k:05}.csv")))?;
        let want = if has_derivs { 1 + dim } else { 1 };
        if header.len() != want {
            return Err(TrainError::Io(format!("target file {k}: expected {want} columns, got {}", header.len())));
        }
        targets.push(rows.iter().map(|r| T::lit(r[0])).collect());
        if has_derivs {
            derivs.push(rows.iter().flat_map(|r| r[1..].iter().map(|&x| T::lit(x))).collect());
        }
    }
    Ok(OperatorDataset { meta, sensors, queries, inputs, targets, derivs: has_derivs.then_some(derivs) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_antiderivative() {
        let v = Fourier1d { a0: 1.0, a: vec![], b: vec![] };
        for x in [0.0, 0.25, 0.9] {
            assert_eq!(v.antiderivative(x), x);
            assert_eq!(v.value(x), 1.0);
        }
    }

    #[test]
    fn fourier_calculus_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = Fourier1d::random(3, 1.0, &mut rng);
        let h = 1e-5;
        for x in [0.1, 0.5, 0.77] {
            let d = (v.antiderivative(x + h) - v.antiderivative(x - h)) / (2.0 * h);
            assert!((d - v.value(x)).abs() < 1e-8);
            let (_, du) = v.poisson(x);
            let fd = (v.poisson(x + h).0 - v.poisson(x - h).0) / (2.0 * h);
            assert!((fd - du).abs() < 1e-8);
            // −u'' = v
            let upp = (v.poisson(x + h).0 - 2.0 * v.poisson(x).0 + v.poisson(x - h).0) / (h * h);
            assert!((-upp - v.value(x)).abs() < 1e-4);
        }
        assert!(v.poisson(0.0).0.abs() < 1e-14 && v.poisson(1.0).0.abs() < 1e-12);
    }

    #[test]
    fn variable_coefficient_solve_constant_case() {
        // a ≡ 1: p = x(1 − x)/2
        let p = solve_variable_coefficient(&|_| 1.0);
        for x in [0.2, 0.5, 0.9] {
            assert!((interp(&p, x) - 0.5 * x * (1.0 - x)).abs() < 1e-7);
        }
    }
}
