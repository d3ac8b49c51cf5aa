//! Subcommand configs and runners. Each runner writes its outputs under the
//! run's output directory and returns the file list for the manifest.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sobolev_core::convlab::{self, ConvlabError, DerForm, FlowConfig, FlowMode, Verdict};
use sobolev_core::geometry::{fmt_f64, GeometryError, PointCloud};
use sobolev_core::mls::{self, MlsConfig, MlsError, Polynomial, SinCos, Sine1d, TestFunction};
use sobolev_core::training::{
    self, synth_split, write_dataset, DerivTargets, Optimizer, SynthSpec, TaskKind, TrainConfig, TrainError,
    TrainMode, TrainReport,
};

use crate::manifest::{io_err, write_atomic, CliError};
use crate::svg::{Heatmap, LinePlot, Series};

pub struct RunContext {
    pub seed: u64,
    pub out_dir: PathBuf,
}

#[derive(Debug, Default)]
pub struct Outcome {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<String>,
    pub summary: Vec<String>,
    /// Set when a check-style command ran to completion but some check failed.
    pub failed: bool,
}

impl Outcome {
    fn emit(&mut self, ctx: &RunContext, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        write_atomic(&ctx.out_dir.join(name), bytes)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn say(&mut self, line: impl Into<String>) {
        self.summary.push(line.into());
    }
}

pub fn mls_error(e: MlsError) -> CliError {
    match e {
        MlsError::SingularNormalMatrix { .. } | MlsError::NonFinite { .. } | MlsError::NonpositiveSupport(_) => {
            CliError::Numerical(e.to_string())
        }
        MlsError::Geometry { source: GeometryError::KTooLarge { .. } | GeometryError::KZero, .. } => {
            CliError::Config(e.to_string())
        }
        MlsError::Geometry { .. } | MlsError::Csv(_) => CliError::Parse(e.to_string()),
        _ => CliError::Config(e.to_string()),
    }
}

pub fn convlab_error(e: ConvlabError) -> CliError {
    match e {
        ConvlabError::StepTooLarge { .. } | ConvlabError::PhiZero | ConvlabError::NoLocalMin => {
            CliError::Numerical(e.to_string())
        }
        ConvlabError::OutsideBasin { .. } => CliError::Config(format!("{e}; pass --allow-outside to run anyway")),
        ConvlabError::Io(m) => CliError::Io(m),
        _ => CliError::Config(e.to_string()),
    }
}

pub fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::NonFiniteLoss { .. } | TrainError::BothZero | TrainError::ZeroTargetNorm { .. } => {
            CliError::Numerical(e.to_string())
        }
        TrainError::Mls { sample, source } => match mls_error(source.clone()) {
            CliError::Config(m) => CliError::Config(format!("sample {sample}: {m}")),
            _ => CliError::Numerical(format!("sample {sample}: {source}")),
        },
        TrainError::Io(m) => CliError::Io(m),
        _ => CliError::Config(e.to_string()),
    }
}

fn csv_bytes<E: std::fmt::Display>(
    f: impl FnOnce(&mut Vec<u8>) -> Result<(), E>,
) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(buf)
}

fn parse_der_form(s: &str) -> Result<DerForm, CliError> {
    match s {
        "exact" => Ok(DerForm::Exact),
        "printed" => Ok(DerForm::Printed),
        _ => Err(CliError::Config(format!("unknown der_form {s:?} (expected exact or printed)"))),
    }
}

// ---------------------------------------------------------------- derivs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DerivsConfig {
    pub input: Option<PathBuf>,
    pub k: usize,
    pub m: usize,
    /// Jet table file name inside the output directory.
    pub out: String,
    pub per_point_support: bool,
    pub strict: bool,
}

impl Default for DerivsConfig {
    fn default() -> Self {
        let d = MlsConfig::default();
        Self { input: None, k: d.k, m: d.order, out: "jets.csv".into(), per_point_support: false, strict: false }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct DerivsFlags {
    /// Point cloud CSV with columns x1..xn,u and a header row.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    /// Neighbours per stencil, the point itself included.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    /// Polynomial order.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    /// Output file name, relative to the output directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
    /// Per-point support radius instead of one global radius.
    #[arg(long)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub per_point_support: bool,
    /// Fail on degenerate stencils instead of regularising them.
    #[arg(long)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub strict: bool,
}

pub fn run_derivs(cfg: &DerivsConfig, ctx: &RunContext) -> Result<Outcome, CliError> {
    let input = cfg.input.as_ref().ok_or_else(|| CliError::Config("missing input CSV".into()))?;
    let file = fs::File::open(input).map_err(io_err(input))?;
    let cloud: PointCloud<f64> = PointCloud::read_csv(file).map_err(|e| CliError::Parse(format!("{}: {e}", input.display())))?;
    let mls_cfg = MlsConfig {
        per_point_support: cfg.per_point_support,
        strict: cfg.strict,
        ..MlsConfig::new(cfg.k, cfg.m)
    };
    let jet = mls::estimate_derivatives(&cloud, &mls_cfg).map_err(mls_error)?;
    let mut out = Outcome { inputs: vec![input.clone()], ..Outcome::default() };
    out.emit(ctx, &cfg.out, &csv_bytes(|b| jet.write_csv(b))?)?;
    out.say(format!("{} points, dim {}, order {}, K {}", jet.len(), jet.dim(), jet.order(), cfg.k));
    let flagged = jet.flagged.len();
    if flagged > 0 {
        out.say(format!("warning: {flagged} degenerate stencils were regularised"));
    }
    Ok(out)
}

// ---------------------------------------------------------------- rates

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatesConfig {
    /// `sincos`, `sin` or `poly`.
    pub function: String,
    /// Degree and dimension of the random polynomial for `poly`.
    pub degree: usize,
    pub dim: usize,
    pub resolutions: Vec<usize>,
    pub m: usize,
    pub k: usize,
    pub per_point_support: bool,
}

impl Default for RatesConfig {
    fn default() -> Self {
        Self {
            function: "sincos".into(),
            degree: 2,
            dim: 2,
            resolutions: Vec::new(),
            m: 2,
            k: 20,
            per_point_support: false,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct RatesFlags {
    /// Test function: sincos, sin or poly.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub function: Option<String>,
    /// Degree of the random polynomial for `poly`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degree: Option<usize>,
    /// Ambient dimension.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    /// Comma-separated point counts, at least three, increasing.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resolutions: Option<Vec<usize>>,
    /// MLS polynomial order m.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    /// MLS stencil size K.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    /// Per-point support radius instead of one global radius.
    #[arg(long)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub per_point_support: bool,
}

pub fn run_rates(cfg: &RatesConfig, ctx: &RunContext) -> Result<Outcome, CliError> {
    if cfg.resolutions.len() < 3 {
        return Err(CliError::Config("missing --resolutions: need at least 3 increasing point counts".into()));
    }
    let f: Box<dyn TestFunction> = match cfg.function.as_str() {
        "sincos" => Box::new(SinCos),
        "sin" => Box::new(Sine1d),
        "poly" => {
            if cfg.dim == 0 {
                return Err(CliError::Config("dim must be at least 1".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
            rng.set_stream(1000);
            Box::new(Polynomial::random(cfg.dim, cfg.degree, &mut rng))
        }
        other => return Err(CliError::Config(format!("unknown function {other:?} (expected sincos, sin or poly)"))),
    };
    let domain = vec![(0.0, 1.0); f.dim()];
    let mls_cfg = MlsConfig { per_point_support: cfg.per_point_support, ..MlsConfig::new(cfg.k, cfg.m) };
    let table = mls::convergence_study(f.as_ref(), &domain, &cfg.resolutions, &mls_cfg, ctx.seed).map_err(mls_error)?;
    let mut out = Outcome::default();
    out.emit(ctx, "rates.csv", &csv_bytes(|b| table.write_csv(b))?)?;
    let series = (0..=cfg.m)
        .map(|order| Series {
            name: format!("order {order}"),
            points: table.rows_for(order).map(|r| (r.h, r.mse)).collect(),
        })
        .collect();
    let plot = LinePlot {
        title: format!("MLS derivative error, {}", table.function),
        x_label: "h".into(),
        y_label: "mean squared error".into(),
        log_x: true,
        log_y: true,
        series,
    };
    out.emit(ctx, "rates.svg", plot.render().as_bytes())?;
    for order in 0..=cfg.m {
        let exact = table.rows_for(order).all(|r| r.exact);
        let line = match (exact, table.slope(order)) {
            (true, _) => format!("order {order}: exact"),
            (false, Some(s)) => format!("order {order}: slope {s:.4}"),
            (false, None) => format!("order {order}: slope undefined"),
        };
        out.say(line);
    }
    Ok(out)
}

// ---------------------------------------------------------------- flow

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowCmdConfig {
    pub dim: usize,
    pub theta0: f64,
    pub ratio0: f64,
    /// `l2`, `sob` or `both`.
    pub mode: String,
    pub dt: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub mu: Vec<f64>,
    pub der_form: String,
    pub allow_outside: bool,
    pub record_every: usize,
}

impl Default for FlowCmdConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            theta0: 1.0,
            ratio0: 1.0,
            mode: "both".into(),
            dt: 0.01,
            horizon: 10.0,
            mu: vec![1.0],
            der_form: "exact".into(),
            allow_outside: false,
            record_every: 10,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct FlowFlags {
    /// Ambient dimension.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    /// Initial angle between w and w*.
    #[arg(long, allow_negative_numbers = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta0: Option<f64>,
    /// Initial norm ratio ‖w‖/‖w*‖.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratio0: Option<f64>,
    /// l2, sob or both.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    /// RK4 step size.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    /// Time horizon.
    #[arg(long = "T")]
    #[serde(rename = "T", skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    /// Comma-separated output amplitudes μ.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu: Option<Vec<f64>>,
    /// exact or printed closed form of the derivative-loss gradient.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub der_form: Option<String>,
    /// Allow initial points outside ‖w − w*‖ < ‖w*‖.
    #[arg(long)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub allow_outside: bool,
    /// Record the trajectory every this many steps.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record_every: Option<usize>,
}

pub fn run_flow(cfg: &FlowCmdConfig, ctx: &RunContext) -> Result<Outcome, CliError> {
    let modes = match cfg.mode.as_str() {
        "both" => vec![FlowMode::L2, FlowMode::Sob],
        m => vec![m.parse::<FlowMode>().map_err(CliError::Config)?],
    };
    let form = parse_der_form(&cfg.der_form)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let (w0, ws) = convlab::random_pair(cfg.theta0, cfg.ratio0, cfg.dim, &mut rng).map_err(convlab_error)?;
    let mut out = Outcome::default();
    let mut curves = Vec::new();
    for mode in modes {
        let fc = FlowConfig {
            mu: cfg.mu.clone(),
            dt: cfg.dt,
            horizon: cfg.horizon,
            der_form: form,
            basin_only: !cfg.allow_outside,
            record_every: cfg.record_every,
            ..FlowConfig::new(w0.clone(), ws.clone(), mode)
        };
        let traj = convlab::flow_integrate(&fc).map_err(convlab_error)?;
        let tag = match mode {
            FlowMode::L2 => "l2",
            FlowMode::Sob => "sob",
        };
        out.emit(ctx, &format!("trajectory_{tag}.csv"), &csv_bytes(|b| traj.write_csv(b))?)?;
        let dist: Vec<(f64, f64)> = traj.times.iter().zip(&traj.dist2).map(|(&t, &d)| (t, d.sqrt())).collect();
        out.say(format!(
            "{tag}: distance {:.6e} -> {:.6e} over {} samples{}",
            dist[0].1,
            traj.final_dist(),
            traj.times.len(),
            if traj.started_in_basin { "" } else { " (started outside the basin)" }
        ));
        curves.push(Series { name: tag.into(), points: dist });
    }
    if let [a, b] = curves.as_slice() {
        let gap = a.points.iter().zip(&b.points).map(|(p, q)| q.1 - p.1).fold(f64::NEG_INFINITY, f64::max);
        out.say(format!("max (sob - l2) distance over samples: {gap:.3e}"));
    }
    let plot = LinePlot {
        title: format!("gradient flow, theta0={}, ratio0={}", cfg.theta0, cfg.ratio0),
        x_label: "t".into(),
        y_label: "||w - w*||".into(),
        log_x: false,
        log_y: false,
        series: curves,
    };
    out.emit(ctx, "distance.svg", plot.render().as_bytes())?;
    Ok(out)
}

// ---------------------------------------------------------------- landscape

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeConfig {
    pub theta_steps: usize,
    pub x_steps: usize,
    pub x_max: f64,
    pub dim: usize,
    pub der_form: String,
    pub out: String,
    pub h_steps: usize,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        Self {
            theta_steps: 64,
            x_steps: 64,
            x_max: 2.0,
            dim: 2,
            der_form: "printed".into(),
            out: "landscape.csv".into(),
            h_steps: 1001,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct LandscapeFlags {
    /// Grid points on θ ∈ [0, π].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_steps: Option<usize>,
    /// Grid points on x ∈ (0, x_max].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_steps: Option<usize>,
    /// Upper end of the norm-ratio axis.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_max: Option<f64>,
    /// Ambient dimension.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    /// exact or printed closed form of the derivative-loss gradient.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub der_form: Option<String>,
    /// Landscape table file name, relative to the output directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
    /// Grid points of the h(θ) curve.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h_steps: Option<usize>,
}

pub fn run_landscape(cfg: &LandscapeConfig, ctx: &RunContext) -> Result<Outcome, CliError> {
    if cfg.theta_steps < 2 || cfg.x_steps < 2 || cfg.h_steps < 2 {
        return Err(CliError::Config("theta_steps, x_steps and h_steps must be at least 2".into()));
    }
    if !cfg.x_max.is_finite() || cfg.x_max <= 0.0 {
        return Err(CliError::Config(format!("x_max must be positive, got {}", cfg.x_max)));
    }
    if cfg.dim < 2 {
        return Err(CliError::Config("dim must be at least 2".into()));
    }
    let form = parse_der_form(&cfg.der_form)?;
    let thetas = convlab::linspace(0.0, PI, cfg.theta_steps);
    let xs: Vec<f64> = (1..=cfg.x_steps).map(|i| cfg.x_max * i as f64 / cfg.x_steps as f64).collect();
    let land = convlab::landscape(&thetas, &xs, cfg.dim, form).map_err(convlab_error)?;
    let mut out = Outcome::default();
    out.emit(ctx, &cfg.out, &csv_bytes(|b| land.write_csv(b))?)?;

    let nx = xs.len();
    // rows over x, columns over theta; cells are stored theta-major
    let grid = |sob: bool| -> Vec<Vec<Option<f64>>> {
        (0..nx)
            .map(|i| {
                (0..thetas.len())
                    .map(|j| {
                        let c = &land.cells[j * nx + i];
                        if sob {
                            c.v_sob
                        } else {
                            c.v_l2
                        }
                    })
                    .collect()
            })
            .collect()
    };
    for (name, label, sob) in [("v_l2.svg", "V_L2", false), ("v_sob.svg", "V_Sob", true)] {
        let map = Heatmap {
            title: format!("{label} ({} form)", cfg.der_form),
            x_label: "theta".into(),
            y_label: "x = |w|/|w*|".into(),
            xs: thetas.clone(),
            ys: xs.clone(),
            values: grid(sob),
        };
        out.emit(ctx, name, map.render().as_bytes())?;
    }
    let undefined = land.cells.iter().filter(|c| c.v_l2.is_none()).count();
    let violations = land
        .cells
        .iter()
        .filter(|c| matches!((c.v_l2, c.v_sob), (Some(a), Some(b)) if b > a + 1e-12 * (1.0 + a.abs())))
        .count();
    out.say(format!("{} cells, {undefined} undefined (phi0 = 0)", land.cells.len()));
    out.say(format!("cells with V_Sob > V_L2: {violations}"));

    let hs = convlab::linspace(0.0, PI, cfg.h_steps);
    let mut rows = Vec::with_capacity(hs.len());
    for &th in &hs {
        rows.push((th, convlab::h_of_theta(th).map_err(convlab_error)?));
    }
    let mut wr = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Io(e.to_string());
    wr.write_record(["theta", "h", "defined_flag"]).map_err(csv_err)?;
    for &(th, h) in &rows {
        wr.write_record([fmt_f64(th), h.map_or_else(String::new, fmt_f64), u8::from(h.is_some()).to_string()])
            .map_err(csv_err)?;
    }
    let bytes = wr.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    out.emit(ctx, "h_curve.csv", &bytes)?;
    let h_plot = LinePlot {
        title: "h(theta) on the defined range".into(),
        x_label: "theta".into(),
        y_label: "h".into(),
        log_x: false,
        log_y: false,
        series: vec![Series { name: "h".into(), points: rows.iter().filter_map(|&(t, h)| h.map(|v| (t, v))).collect() }],
    };
    out.emit(ctx, "h_curve.svg", h_plot.render().as_bytes())?;
    let h_undefined = rows.iter().filter(|r| r.1.is_none()).count();
    let h_min = rows
        .iter()
        .filter(|r| r.0 > 0.0 && r.0 < PI)
        .filter_map(|r| r.1)
        .fold(f64::INFINITY, f64::min);
    out.say(format!("h curve: {h_undefined} of {} points undefined (negative discriminant)", rows.len()));
    out.say(format!("h minimum over defined 0 < theta < pi: {h_min:.3e}"));
    Ok(out)
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCmdConfig {
    pub task: String,
    pub mode: String,
    pub noise: f64,
    /// MLS stencil size for derivative targets.
    pub k: usize,
    /// MLS order for derivative targets.
    pub m: usize,
    /// `mls` or `exact` derivative targets.
    pub derivs: String,
    pub epochs: usize,
    pub samples: usize,
    pub val: usize,
    pub test: usize,
    pub sensors: Option<usize>,
    pub queries: Option<usize>,
    pub fourier_modes: usize,
    pub decay: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: String,
    pub lambda: f64,
    pub hidden: Vec<usize>,
    pub rank: usize,
    pub save_dataset: bool,
}

impl Default for TrainCmdConfig {
    fn default() -> Self {
        Self {
            task: "antiderivative1d".into(),
            mode: "ordinary".into(),
            noise: 0.0,
            k: 20,
            m: 2,
            derivs: "mls".into(),
            epochs: 3000,
            samples: 16,
            val: 16,
            test: 64,
            sensors: None,
            queries: None,
            fourier_modes: 3,
            decay: 1.0,
            batch_size: 16,
            lr: 1e-3,
            optimizer: "adam".into(),
            lambda: 1.0,
            hidden: vec![32, 32],
            rank: 8,
            save_dataset: false,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainFlags {
    /// antiderivative1d, poisson1d, smoothing2d or discontinuous.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    /// ordinary, sobolev or sobolev+pcgrad.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    /// Target noise std as a fraction of each sample's range.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    /// MLS stencil size K.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    /// MLS polynomial order m.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    /// mls or exact derivative targets.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub derivs: Option<String>,
    /// Training epochs.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    /// Training samples.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    /// Validation samples.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val: Option<usize>,
    /// Test samples.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<usize>,
    /// Sensor points per input function.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sensors: Option<usize>,
    /// Query points per output function.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub queries: Option<usize>,
    /// Fourier modes of the random input functions.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fourier_modes: Option<usize>,
    /// Spectral decay of the random input coefficients.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decay: Option<f64>,
    /// Mini-batch size in samples.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    /// gd or adam.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<String>,
    /// Weight of the derivative loss.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Comma-separated hidden widths of both MLPs.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    /// Rank of the operator network output.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    /// Also write the generated training set.
    #[arg(long)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub save_dataset: bool,
}

struct TrainPlan {
    spec: SynthSpec,
    cfg: TrainConfig,
    mode: TrainMode,
    val: usize,
    test: usize,
}

fn plan(c: &TrainCmdConfig, mode: &str, seed: u64) -> Result<TrainPlan, CliError> {
    let kind: TaskKind = c.task.parse().map_err(CliError::Config)?;
    let mode: TrainMode = mode.parse().map_err(CliError::Config)?;
    let optimizer = match c.optimizer.as_str() {
        "gd" => Optimizer::Gd,
        "adam" => Optimizer::Adam,
        o => return Err(CliError::Config(format!("unknown optimizer {o:?} (expected gd or adam)"))),
    };
    if !c.noise.is_finite() || c.noise < 0.0 {
        return Err(CliError::Config(format!("noise must be nonnegative, got {}", c.noise)));
    }
    if c.samples == 0 || c.val == 0 || c.test == 0 {
        return Err(CliError::Config("samples, val and test must be positive".into()));
    }
    let derivs = match (mode.needs_derivatives(), c.derivs.as_str()) {
        (false, _) => DerivTargets::None,
        (true, "mls") => {
            if c.m == 0 {
                return Err(CliError::Config("derivative targets need MLS order m >= 1".into()));
            }
            DerivTargets::Mls { k: c.k, m: c.m }
        }
        (true, "exact") => DerivTargets::Exact,
        (true, d) => return Err(CliError::Config(format!("unknown derivs {d:?} (expected mls or exact)"))),
    };
    let mut spec = SynthSpec::new(kind, c.samples);
    spec.noise = c.noise;
    spec.modes = c.fourier_modes;
    spec.decay = c.decay;
    spec.derivs = derivs;
    if let Some(s) = c.sensors {
        spec.sensors = s;
    }
    if let Some(q) = c.queries {
        spec.queries = q;
    }
    let cfg = TrainConfig {
        epochs: c.epochs,
        batch_size: c.batch_size,
        lr: c.lr,
        optimizer,
        lambda: c.lambda,
        hidden: c.hidden.clone(),
        rank: c.rank,
        seed,
    };
    cfg.validate().map_err(train_error)?;
    Ok(TrainPlan { spec, cfg, mode, val: c.val, test: c.test })
}

fn execute(p: &TrainPlan, seed: u64) -> Result<(TrainReport, training::OperatorDataset<f64>), CliError> {
    let (tr, va, te) = synth_split::<f64>(&p.spec, p.val, p.test, seed).map_err(train_error)?;
    let (report, _) = training::train(&p.cfg, p.mode, &tr, &va, &te).map_err(train_error)?;
    Ok((report, tr))
}

pub fn run_train(cfg: &TrainCmdConfig, ctx: &RunContext) -> Result<Outcome, CliError> {
    let p = plan(cfg, &cfg.mode, ctx.seed)?;
    let (report, ds) = execute(&p, ctx.seed)?;
    let mut out = Outcome::default();
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Io(e.to_string()))? + "\n";
    out.emit(ctx, "report.json", json.as_bytes())?;
    out.emit(ctx, "losses.csv", &csv_bytes(|b| report.write_losses_csv(b))?)?;
    if cfg.save_dataset {
        write_dataset(&ctx.out_dir.join("dataset"), &ds).map_err(train_error)?;
        out.outputs.push("dataset".into());
    }
    if report.dataset.derivs != DerivTargets::None && !report.dataset.derivatives_reliable {
        out.say("warning: derivative targets are unreliable for this task (discontinuous coefficients)");
    }
    let last = report.final_record();
    out.say(format!("{} on {}: {} epochs, {} parameters", report.mode, cfg.task, last.epoch, report.param_count));
    out.say(format!("final train L2 loss {:.6e}, val rel L2 {:.6e}", last.l2, last.val_rel_l2));
    out.say(format!("final test relative L2 error: {:.6e}", report.final_test_rel_l2));
    Ok(out)
}

// ---------------------------------------------------------------- sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    /// `K`, `m` or `noise`.
    pub param: String,
    pub values: Vec<f64>,
    /// Runs per value and mode, with seeds `seed, seed+1, …`.
    pub seeds: usize,
    pub modes: Vec<String>,
    #[serde(flatten)]
    pub base: TrainCmdConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            param: String::new(),
            values: Vec::new(),
            seeds: 5,
            modes: vec!["ordinary".into(), "sobolev".into()],
            base: TrainCmdConfig::default(),
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SweepFlags {
    /// Swept parameter: K, m or noise.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub param: Option<String>,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    /// Seeds per swept value.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<usize>,
    /// Comma-separated training modes.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub modes: Option<Vec<String>>,
    #[command(flatten)]
    #[serde(flatten)]
    pub base: TrainFlags,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

fn apply_param(base: &TrainCmdConfig, param: &str, value: f64) -> Result<TrainCmdConfig, CliError> {
    let int = || -> Result<usize, CliError> {
        if value.fract() != 0.0 || value < 0.0 {
            return Err(CliError::Config(format!("{param} values must be nonnegative integers, got {value}")));
        }
        Ok(value as usize)
    };
    let mut c = base.clone();
    match param {
        "K" | "k" => c.k = int()?,
        "m" => c.m = int()?,
        "noise" => c.noise = value,
        p => return Err(CliError::Config(format!("unknown sweep param {p:?} (expected K, m or noise)"))),
    }
    Ok(c)
}

pub fn run_sweep(cfg: &SweepConfig, ctx: &RunContext) -> Result<Outcome, CliError> {
    if cfg.values.len() < 2 {
        return Err(CliError::Config("a sweep needs at least 2 --values".into()));
    }
    if cfg.seeds == 0 || cfg.modes.is_empty() {
        return Err(CliError::Config("seeds and modes must be nonempty".into()));
    }
    let mut jobs = Vec::new();
    for &v in &cfg.values {
        let c = apply_param(&cfg.base, &cfg.param, v)?;
        for mode in &cfg.modes {
            for s in 0..cfg.seeds {
                let seed = ctx.seed + s as u64;
                jobs.push((v, mode.clone(), seed, plan(&c, mode, seed)?));
            }
        }
    }
    let errors: Vec<f64> = jobs
        .par_iter()
        .map(|(_, _, seed, p)| execute(p, *seed).map(|(r, _)| r.final_test_rel_l2))
        .collect::<Result<_, _>>()?;

    let mut wr = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Io(e.to_string());
    wr.write_record(["param", "value", "mode", "seed", "final_test_rel_l2"]).map_err(csv_err)?;
    for ((v, mode, seed, _), e) in jobs.iter().zip(&errors) {
        wr.write_record([cfg.param.clone(), fmt_f64(*v), mode.clone(), seed.to_string(), fmt_f64(*e)])
            .map_err(csv_err)?;
    }
    let runs = wr.into_inner().map_err(|e| CliError::Io(e.to_string()))?;

    let medians: Vec<Vec<f64>> = cfg
        .values
        .iter()
        .map(|&v| {
            cfg.modes
                .iter()
                .map(|m| {
                    let xs: Vec<f64> =
                        jobs.iter().zip(&errors).filter(|(j, _)| j.0 == v && &j.1 == m).map(|(_, &e)| e).collect();
                    median(&xs)
                })
                .collect()
        })
        .collect();
    let mut wr = csv::Writer::from_writer(Vec::new());
    let mut header = vec![cfg.param.clone()];
    header.extend(cfg.modes.iter().cloned());
    wr.write_record(&header).map_err(csv_err)?;
    for (v, row) in cfg.values.iter().zip(&medians) {
        let mut rec = vec![fmt_f64(*v)];
        rec.extend(row.iter().map(|&x| fmt_f64(x)));
        wr.write_record(&rec).map_err(csv_err)?;
    }
    let table = wr.into_inner().map_err(|e| CliError::Io(e.to_string()))?;

    let mut out = Outcome::default();
    out.emit(ctx, "sweep.csv", &runs)?;
    out.emit(ctx, "sweep_median.csv", &table)?;
    let plot = LinePlot {
        title: format!("median test error over {} seeds", cfg.seeds),
        x_label: cfg.param.clone(),
        y_label: "relative L2 error".into(),
        log_x: false,
        log_y: true,
        series: cfg
            .modes
            .iter()
            .enumerate()
            .map(|(k, m)| Series { name: m.clone(), points: cfg.values.iter().zip(&medians).map(|(&v, r)| (v, r[k])).collect() })
            .collect(),
    };
    out.emit(ctx, "sweep.svg", plot.render().as_bytes())?;
    out.say(format!("{:>10}  {}", cfg.param, cfg.modes.iter().map(|m| format!("{m:>16}")).collect::<String>()));
    for (v, row) in cfg.values.iter().zip(&medians) {
        out.say(format!("{v:>10}  {}", row.iter().map(|x| format!("{x:>16.6e}")).collect::<String>()));
    }
    Ok(out)
}

// ---------------------------------------------------------------- validate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateConfig {
    pub draws: usize,
    pub pairs: usize,
    pub rhos: Vec<f64>,
    pub scan_points: usize,
    pub cubic_trials: usize,
    pub flow_inits: usize,
    pub flow_dt: f64,
    pub flow_horizon: f64,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        Self {
            draws: 1_000_000,
            pairs: 20,
            rhos: vec![-0.9, 0.0, 0.5, 0.9],
            scan_points: 10_000,
            cubic_trials: 10_000,
            flow_inits: 100,
            flow_dt: 0.05,
            flow_horizon: 400.0,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct ValidateFlags {
    /// Gaussian draws per Monte-Carlo check.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub draws: Option<usize>,
    /// Random (e, w) pairs for the C(e, w) expectation check.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairs: Option<usize>,
    /// Comma-separated correlations for the quadrant check.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rhos: Option<Vec<f64>>,
    /// Grid points of the inequality scans.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scan_points: Option<usize>,
    /// Random inputs for the cubic-minimum check.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cubic_trials: Option<usize>,
    /// Random initializations for the flow check.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flow_inits: Option<usize>,
    /// Step size of the flow check.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flow_dt: Option<f64>,
    /// Time horizon of the flow check.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flow_horizon: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct Check {
    #[serde(flatten)]
    verdict: Verdict,
    /// Informational checks do not affect the overall result.
    required: bool,
}

fn check(v: Verdict) -> Check {
    Check { verdict: v, required: true }
}

fn verdict(name: &str, statistic: f64, bound: f64, pass: bool) -> Verdict {
    Verdict { name: name.into(), statistic, bound, pass }
}

fn unit_gaussian(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn scans(points: usize) -> Result<Vec<Check>, CliError> {
    let grid = convlab::linspace(0.0, PI, points);
    let mut g_max = f64::NEG_INFINITY;
    let mut phi0_min = f64::INFINITY;
    let mut h_min = f64::INFINITY;
    let mut h_zero_off_origin = 0usize;
    for &th in &grid {
        g_max = g_max.max(convlab::g_of_theta(th).map_err(convlab_error)?);
        phi0_min = phi0_min.min(convlab::phis_of_angle(th).phi0);
        if let Some(h) = convlab::h_of_theta(th).map_err(convlab_error)? {
            h_min = h_min.min(h);
            if th > 0.0 && th < PI && h.abs() <= 1e-10 * th {
                h_zero_off_origin += 1;
            }
        }
    }
    Ok(vec![
        check(verdict("g_le_0", g_max, 1e-12, g_max <= 1e-12)),
        check(verdict("phi0_ge_0", -phi0_min, 1e-12, phi0_min >= -1e-12)),
        check(verdict("h_ge_0", -h_min, 1e-10, h_min >= -1e-10)),
        check(verdict("h_zero_only_at_0", h_zero_off_origin as f64, 0.0, h_zero_off_origin == 0)),
    ])
}

fn cubic_check(trials: usize, seed: u64) -> Check {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < trials {
        let a: f64 = rng.random_range(0.01..10.0);
        let b: f64 = rng.random_range(-10.0..10.0);
        let c: f64 = rng.random_range(-10.0..10.0);
        let d: f64 = rng.random_range(-10.0..10.0);
        let Ok((t0, f0)) = convlab::cubic_min(a, b, c, d) else { continue };
        let direct = convlab::cubic_eval(a, b, c, d, t0);
        // stationary point with positive curvature
        let slope = 3.0 * a * t0 * t0 - 2.0 * b * t0 - c;
        let scale = 1.0 + direct.abs() + a * t0.abs().powi(3) + b.abs() * t0 * t0 + c.abs() * t0.abs();
        let err = ((f0 - direct).abs() / scale).max(slope.abs() / scale);
        worst = worst.max(if 6.0 * a * t0 - 2.0 * b > 0.0 { err } else { f64::INFINITY });
        done += 1;
    }
    check(verdict("cubic_min_closed_form", worst, 1e-10, worst <= 1e-10))
}

fn flow_check(cfg: &ValidateConfig, seed: u64) -> Result<Vec<Check>, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(11);
    let inits: Vec<(Vec<f64>, Vec<f64>)> =
        (0..cfg.flow_inits).map(|i| convlab::sample_basin_pair(if i % 2 == 0 { 2 } else { 5 }, 0.05, &mut rng)).collect();
    let results: Vec<(f64, f64, f64, bool)> = inits
        .par_iter()
        .map(|(w0, ws)| {
            let mk = |mode| FlowConfig {
                dt: cfg.flow_dt,
                horizon: cfg.flow_horizon,
                record_every: 20,
                ..FlowConfig::new(w0.clone(), ws.clone(), mode)
            };
            let a = convlab::flow_integrate(&mk(FlowMode::L2))?;
            let b = convlab::flow_integrate(&mk(FlowMode::Sob))?;
            let gap = a.dist2.iter().zip(&b.dist2).map(|(x, y)| y.sqrt() - x.sqrt()).fold(f64::NEG_INFINITY, f64::max);
            let strict = b.dist2.last() < a.dist2.last();
            Ok((a.max_increase(), a.final_dist(), gap, strict))
        })
        .collect::<Result<_, ConvlabError>>()
        .map_err(convlab_error)?;
    let inc = results.iter().map(|r| r.0).fold(0.0, f64::max);
    let fin = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let gap = results.iter().map(|r| r.2).fold(f64::NEG_INFINITY, f64::max);
    let not_strict = results.iter().filter(|r| !r.3).count();
    Ok(vec![
        check(verdict("flow_l2_monotone", inc, 1e-12, inc <= 1e-12)),
        check(verdict("flow_l2_converges", fin, 1e-3, fin < 1e-3)),
        check(verdict("flow_sob_below_l2", gap, 1e-12, gap <= 1e-12)),
        check(verdict("flow_sob_strict_at_T", not_strict as f64, 0.0, not_strict == 0)),
    ])
}

pub fn run_validate(cfg: &ValidateConfig, ctx: &RunContext) -> Result<Outcome, CliError> {
    if cfg.draws < 2 || cfg.scan_points < 2 {
        return Err(CliError::Config("draws and scan_points must be at least 2".into()));
    }
    let seed = ctx.seed;
    let mut checks = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..cfg.pairs {
        let n = [2, 5, 10][i % 3];
        let e = unit_gaussian(n, &mut rng);
        let w: Vec<f64> = unit_gaussian(n, &mut rng).iter().map(|x| 2.0 * x).collect();
        let v = convlab::mc_relu_moment(&e, &w, cfg.draws, seed + 1000 + i as u64).map_err(convlab_error)?;
        checks.push(check(v));
    }
    for (i, &rho) in cfg.rhos.iter().enumerate() {
        checks.push(check(convlab::mc_quadrant(rho, cfg.draws, seed + 2000 + i as u64).map_err(convlab_error)?));
    }
    let half = unit_gaussian(4, &mut rng);
    checks.push(check(convlab::mc_half_space(&half, cfg.draws, seed + 3000).map_err(convlab_error)?));
    let (w, ws) = convlab::sample_basin_pair(3, 0.05, &mut rng);
    let mu = [1.0, 0.5];
    checks.push(check(convlab::mc_grad_l2(&w, &ws, &mu, cfg.draws, seed + 4000).map_err(convlab_error)?));
    checks.push(check(
        convlab::mc_grad_der(&w, &ws, &mu, cfg.draws, seed + 4001, DerForm::Exact).map_err(convlab_error)?,
    ));
    checks.push(Check {
        verdict: convlab::mc_grad_der(&w, &ws, &mu, cfg.draws, seed + 4001, DerForm::Printed)
            .map_err(convlab_error)?,
        required: false,
    });
    checks.extend(scans(cfg.scan_points)?);
    checks.push(cubic_check(cfg.cubic_trials, seed));
    if cfg.flow_inits > 0 {
        checks.extend(flow_check(cfg, seed)?);
    }

    let mut out = Outcome::default();
    let json = serde_json::to_string_pretty(&checks).map_err(|e| CliError::Io(e.to_string()))? + "\n";
    out.emit(ctx, "validate.json", json.as_bytes())?;
    out.say(format!("{:<28} {:>12} {:>12}  result", "check", "statistic", "bound"));
    for c in &checks {
        let result = match (c.verdict.pass, c.required) {
            (true, _) => "pass",
            (false, true) => "FAIL",
            (false, false) => "fail (informational)",
        };
        out.say(format!("{:<28} {:>12.4e} {:>12.4e}  {result}", c.verdict.name, c.verdict.statistic, c.verdict.bound));
    }
    let failed = checks.iter().filter(|c| c.required && !c.verdict.pass).count();
    out.say(format!("{} checks, {failed} required failures", checks.len()));
    out.failed = failed > 0;
    Ok(out)
}

pub fn check_input_digest(path: &Path, expected: &str) -> Result<(), CliError> {
    let got = crate::manifest::digest_file(path)?;
    if got.sha256 != expected {
        return Err(CliError::Config(format!("input {} changed since the manifest was written", path.display())));
    }
    Ok(())
}
