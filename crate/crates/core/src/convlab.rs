//! Closed-form calculus of the one-neuron ReLU operator model and its
//! population gradient flows.
//!
//! The model is `u_k(x; w) = μ_k α(w, w*) σ(wᵀx)` for Gaussian inputs
//! `x ~ N(0, I)`, where `α(w₁, w₂) = ‖w₁‖‖w₂‖φ₀(θ)` is the Gaussian
//! expectation of `σ(w₁ᵀy)σ(w₂ᵀy)`. All gradients follow the convention
//! `E[D_w uᵀ (u − u*)]`, i.e. they are gradients of `½|u − u*|²`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::fmt_f64;
use crate::scalar::{dot, norm, Scalar};

/// Default angle snapping radius used by the flow integrator.
pub const THETA_EPS: f64 = 1e-8;
/// Landscape cells with `φ₀` at or below this are reported as missing.
pub const PHI0_FLOOR: f64 = 1e-12;
const UNIT_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConvlabError {
    #[error("zero vector where a nonzero one is required")]
    ZeroVector,
    #[error("direction must be a unit vector, got norm {0}")]
    NotUnit(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("amplitude list is empty")]
    EmptyAmplitudes,
    #[error("argument {0} outside the domain")]
    OutOfDomain(f64),
    #[error("cubic has no local minimum (need A > 0 and B² + 3AC ≥ 0)")]
    NoLocalMin,
    #[error("distance grew by a factor {ratio:.4} in one step at t={t}; reduce dt")]
    StepTooLarge { t: f64, ratio: f64 },
    #[error("φ₀ vanishes (θ = π); the normalisation is undefined")]
    PhiZero,
    #[error("invalid flow config: {0}")]
    BadConfig(String),
    #[error("initial point is outside the basin: ‖w0 − w*‖ = {dist} ≥ ‖w*‖ = {radius}")]
    OutsideBasin { dist: f64, radius: f64 },
    #[error("io: {0}")]
    Io(String),
}

fn check_nonzero<T: Scalar>(w: &[T]) -> Result<T, ConvlabError> {
    let n = norm(w);
    if !(n > T::zero()) || !n.is_finite() {
        return Err(ConvlabError::ZeroVector);
    }
    Ok(n)
}

fn check_dims(a: usize, b: usize) -> Result<(), ConvlabError> {
    if a != b {
        return Err(ConvlabError::DimMismatch { expected: a, got: b });
    }
    Ok(())
}

fn scaled<T: Scalar>(w: &[T], s: T) -> Vec<T> {
    w.iter().map(|&x| x * s).collect()
}

fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Angle between two nonzero vectors, computed as `2·atan2(‖â − b̂‖, ‖â + b̂‖)`.
///
/// This equals `arccos` of the clamped cosine but keeps full precision near
/// `0` and `π`.
pub fn theta<T: Scalar>(w1: &[T], w2: &[T]) -> Result<T, ConvlabError> {
    check_dims(w1.len(), w2.len())?;
    let n1 = check_nonzero(w1)?;
    let n2 = check_nonzero(w2)?;
    let (mut dm, mut dp) = (T::zero(), T::zero());
    for (&a, &b) in w1.iter().zip(w2) {
        let (a, b) = (a / n1, b / n2);
        dm += (a - b) * (a - b);
        dp += (a + b) * (a + b);
    }
    Ok(T::lit(2.0) * dm.sqrt().atan2(dp.sqrt()))
}

/// Snaps angles within `eps` of `0` or `π` onto the endpoint.
pub fn snap_angle<T: Scalar>(th: T, eps: T) -> T {
    if th < eps {
        T::zero()
    } else if th > T::PI() - eps {
        T::PI()
    } else {
        th
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phis<T> {
    pub phi0: T,
    pub phi1: T,
    pub phi2: T,
}

/// `φ₀ = ((π−θ)cosθ + sinθ)/2π`, `φ₁ = (π−θ)/2π`, `φ₂ = sinθ/2π`.
pub fn phis_of_angle<T: Scalar>(th: T) -> Phis<T> {
    let two_pi = T::TAU();
    let rest = T::PI() - th;
    Phis {
        phi0: (rest * th.cos() + th.sin()) / two_pi,
        phi1: rest / two_pi,
        phi2: th.sin() / two_pi,
    }
}

pub fn phis<T: Scalar>(w1: &[T], w2: &[T]) -> Result<Phis<T>, ConvlabError> {
    Ok(phis_of_angle(theta(w1, w2)?))
}

/// `C(e, w) = ((π − θ)w + ‖w‖ sinθ e)/2π` for a unit vector `e`.
pub fn c_vec<T: Scalar>(e: &[T], w: &[T]) -> Result<Vec<T>, ConvlabError> {
    check_dims(e.len(), w.len())?;
    let ne = norm(e);
    if !((ne - T::one()).abs().as_f64() <= UNIT_TOL) {
        return Err(ConvlabError::NotUnit(ne.as_f64()));
    }
    let nw = check_nonzero(w)?;
    let th = theta(e, w)?;
    Ok(c_vec_at(e, w, nw, th))
}

fn c_vec_at<T: Scalar>(e: &[T], w: &[T], nw: T, th: T) -> Vec<T> {
    let two_pi = T::TAU();
    let a = (T::PI() - th) / two_pi;
    let b = nw * th.sin() / two_pi;
    w.iter().zip(e).map(|(&wi, &ei)| a * wi + b * ei).collect()
}

/// `α(w₁, w₂) = ‖w₁‖‖w₂‖φ₀(w₁, w₂)`.
pub fn alpha<T: Scalar>(w1: &[T], w2: &[T]) -> Result<T, ConvlabError> {
    let th = theta(w1, w2)?;
    Ok(norm(w1) * norm(w2) * phis_of_angle(th).phi0)
}

/// `F(X, e, w) = Σ_j 1{x_jᵀe > 0} 1{x_jᵀw > 0} (x_jᵀw) x_j` for row-major `X`.
pub fn f_empirical<T: Scalar>(x: &[T], e: &[T], w: &[T]) -> Result<Vec<T>, ConvlabError> {
    let n = w.len();
    check_dims(n, e.len())?;
    if n == 0 || !x.len().is_multiple_of(n) {
        return Err(ConvlabError::DimMismatch { expected: n, got: x.len() });
    }
    let mut out = vec![T::zero(); n];
    for row in x.chunks_exact(n) {
        let pw = dot(row, w);
        if dot(row, e) > T::zero() && pw > T::zero() {
            axpy(&mut out, pw, row);
        }
    }
    Ok(out)
}

/// Which closed form to use for the derivative-loss population gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DerForm {
    /// Expectation of `D_w(D_x u)ᵀ(D_x u − D_x u*)`; agrees with Monte-Carlo.
    #[default]
    Exact,
    /// The expression with the transposed Jacobian factor `w C(ŵ,w*)ᵀ`.
    Printed,
}

/// Quantities shared by both population gradients at one `(w, w*)` pair.
struct Pair<T> {
    nw: T,
    a: T,
    a_star: T,
    phi1: T,
    c_ws: Vec<T>,
    scale: T,
}

impl<T: Scalar> Pair<T> {
    fn new(w: &[T], ws: &[T], mu: &[T], eps: T) -> Result<Self, ConvlabError> {
        check_dims(ws.len(), w.len())?;
        if mu.is_empty() {
            return Err(ConvlabError::EmptyAmplitudes);
        }
        let nw = check_nonzero(w)?;
        let ns = check_nonzero(ws)?;
        let th = snap_angle(theta(w, ws)?, eps);
        let ph = phis_of_angle(th);
        let e = scaled(w, T::one() / nw);
        let scale = mu.iter().map(|&m| m * m).sum::<T>() / T::from_usize_lossy(mu.len());
        Ok(Self {
            nw,
            a: nw * ns * ph.phi0,
            a_star: ns * ns / T::lit(2.0),
            phi1: ph.phi1,
            c_ws: c_vec_at(&e, ws, ns, th),
            scale,
        })
    }
}

fn grad_l2_pair<T: Scalar>(p: &Pair<T>, w: &[T]) -> Vec<T> {
    // C(ŵ, w) = w/2, so r = α·w/2 − α*·C(ŵ, w*)
    let mut r = scaled(w, p.a / T::lit(2.0));
    axpy(&mut r, -p.a_star, &p.c_ws);
    let wr = dot(w, &r);
    let mut g = scaled(&r, p.a);
    axpy(&mut g, wr, &p.c_ws);
    scaled(&g, p.scale)
}

fn grad_der_pair<T: Scalar>(p: &Pair<T>, w: &[T], ws: &[T], form: DerForm) -> Vec<T> {
    let half = T::lit(0.5);
    let mut g = scaled(w, p.a * p.a * half);
    axpy(&mut g, -p.a * p.a_star * p.phi1, ws);
    match form {
        DerForm::Exact => {
            axpy(&mut g, p.a * p.nw * p.nw * half, &p.c_ws);
            axpy(&mut g, -p.a_star * p.phi1 * dot(w, ws), &p.c_ws);
        }
        DerForm::Printed => {
            axpy(&mut g, p.a * half * dot(&p.c_ws, w), w);
            axpy(&mut g, -p.a * p.phi1 * dot(&p.c_ws, ws), w);
        }
    }
    scaled(&g, p.scale)
}

/// `E_X[∂L_{L²}/∂w]` for the amplitudes `μ`.
pub fn grad_l2_population<T: Scalar>(w: &[T], w_star: &[T], mu: &[T]) -> Result<Vec<T>, ConvlabError> {
    let p = Pair::new(w, w_star, mu, T::zero())?;
    Ok(grad_l2_pair(&p, w))
}

/// `E_X[∂L_Der/∂w]`.
pub fn grad_der_population<T: Scalar>(w: &[T], w_star: &[T], mu: &[T]) -> Result<Vec<T>, ConvlabError> {
    grad_der_population_form(w, w_star, mu, DerForm::Exact)
}

pub fn grad_der_population_form<T: Scalar>(
    w: &[T],
    w_star: &[T],
    mu: &[T],
    form: DerForm,
) -> Result<Vec<T>, ConvlabError> {
    let p = Pair::new(w, w_star, mu, T::zero())?;
    Ok(grad_der_pair(&p, w, w_star, form))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowMode {
    L2,
    Sob,
}

impl std::str::FromStr for FlowMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(FlowMode::L2),
            "sob" | "sobolev" => Ok(FlowMode::Sob),
            _ => Err(format!("unknown flow mode {s:?} (expected l2 or sob)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig<T> {
    pub w0: Vec<T>,
    pub w_star: Vec<T>,
    pub mu: Vec<T>,
    pub dt: T,
    pub horizon: T,
    pub mode: FlowMode,
    pub theta_eps: T,
    pub der_form: DerForm,
    /// Reject initial points outside `‖w − w*‖ < ‖w*‖`.
    pub basin_only: bool,
    /// Keep every `record_every`-th step in the trajectory.
    pub record_every: usize,
}

impl<T: Scalar> FlowConfig<T> {
    pub fn new(w0: Vec<T>, w_star: Vec<T>, mode: FlowMode) -> Self {
        Self {
            w0,
            w_star,
            mu: vec![T::one()],
            dt: T::lit(1e-2),
            horizon: T::lit(10.0),
            mode,
            theta_eps: T::lit(THETA_EPS),
            der_form: DerForm::Exact,
            basin_only: true,
            record_every: 1,
        }
    }

    pub fn validate(&self) -> Result<(), ConvlabError> {
        check_dims(self.w_star.len(), self.w0.len())?;
        check_nonzero(&self.w0)?;
        let radius = check_nonzero(&self.w_star)?;
        if self.mu.is_empty() {
            return Err(ConvlabError::EmptyAmplitudes);
        }
        if !(self.dt > T::zero()) || !self.dt.is_finite() {
            return Err(ConvlabError::BadConfig(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.horizon >= T::zero()) || !self.horizon.is_finite() {
            return Err(ConvlabError::BadConfig(format!("horizon must be nonnegative, got {}", self.horizon)));
        }
        if !(self.theta_eps >= T::zero()) {
            return Err(ConvlabError::BadConfig("theta_eps must be nonnegative".into()));
        }
        if self.record_every == 0 {
            return Err(ConvlabError::BadConfig("record_every must be at least 1".into()));
        }
        let dist = crate::scalar::dist2(&self.w0, &self.w_star).sqrt();
        if self.basin_only && !(dist < radius) {
            return Err(ConvlabError::OutsideBasin { dist: dist.as_f64(), radius: radius.as_f64() });
        }
        Ok(())
    }
}

/// Right-hand side `−E[∂L/∂w]` of the gradient flow.
pub fn flow_rhs<T: Scalar>(
    w: &[T],
    w_star: &[T],
    mu: &[T],
    mode: FlowMode,
    form: DerForm,
    eps: T,
) -> Result<Vec<T>, ConvlabError> {
    let p = Pair::new(w, w_star, mu, eps)?;
    let mut g = grad_l2_pair(&p, w);
    if mode == FlowMode::Sob {
        let d = grad_der_pair(&p, w, w_star, form);
        axpy(&mut g, T::one(), &d);
    }
    Ok(g.into_iter().map(|x| -x).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowTrajectory<T> {
    pub times: Vec<T>,
    pub w: Vec<Vec<T>>,
    pub dist2: Vec<T>,
    /// `d/dt ‖w − w*‖² = 2 (w − w*)ᵀ dw/dt` from the closed-form right-hand side.
    pub ddt_dist2: Vec<T>,
    /// First recorded time at which `θ(w, w*) < ε`.
    pub angle_converged_at: Option<T>,
    pub started_in_basin: bool,
}

impl<T: Scalar> FlowTrajectory<T> {
    pub fn final_dist(&self) -> T {
        self.dist2.last().copied().unwrap_or_else(T::zero).sqrt()
    }

    /// Largest single-sample increase of `‖w − w*‖²`.
    pub fn max_increase(&self) -> T {
        self.dist2.windows(2).map(|p| p[1] - p[0]).fold(T::zero(), T::max)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), ConvlabError> {
        let n = self.w.first().map_or(0, Vec::len);
        let mut wr = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("w{i}")));
        header.push("dist2".into());
        header.push("ddt_dist2".into());
        wr.write_record(&header).map_err(|e| ConvlabError::Io(e.to_string()))?;
        for i in 0..self.times.len() {
            let mut rec = vec![fmt_f64(self.times[i].as_f64())];
            rec.extend(self.w[i].iter().map(|x| fmt_f64(x.as_f64())));
            rec.push(fmt_f64(self.dist2[i].as_f64()));
            rec.push(fmt_f64(self.ddt_dist2[i].as_f64()));
            wr.write_record(&rec).map_err(|e| ConvlabError::Io(e.to_string()))?;
        }
        wr.flush().map_err(|e| ConvlabError::Io(e.to_string()))
    }
}

/// Integrates `dw/dt = −E[∂L/∂w]` with fixed-step classical RK4 for
/// `round(horizon/dt)` steps; a zero horizon yields the initial state only.
pub fn flow_integrate<T: Scalar>(cfg: &FlowConfig<T>) -> Result<FlowTrajectory<T>, ConvlabError> {
    cfg.validate()?;
    let ws = &cfg.w_star;
    let rhs = |w: &[T]| flow_rhs(w, ws, &cfg.mu, cfg.mode, cfg.der_form, cfg.theta_eps);
    let steps = (cfg.horizon / cfg.dt).round().to_usize().unwrap_or(0);
    let radius2 = dot(ws, ws);
    let floor = radius2 * T::lit(1e-24);
    let half = T::lit(0.5);
    let sixth = T::one() / T::lit(6.0);

    let mut w = cfg.w0.clone();
    let d0 = crate::scalar::dist2(&w, ws);
    let mut traj = FlowTrajectory {
        times: Vec::with_capacity(steps / cfg.record_every + 2),
        w: Vec::new(),
        dist2: Vec::new(),
        ddt_dist2: Vec::new(),
        angle_converged_at: None,
        started_in_basin: d0 < radius2,
    };
    let record = |traj: &mut FlowTrajectory<T>, t: T, w: &[T], f: &[T]| -> Result<(), ConvlabError> {
        let diff: Vec<T> = w.iter().zip(ws).map(|(&a, &b)| a - b).collect();
        traj.times.push(t);
        traj.w.push(w.to_vec());
        traj.dist2.push(dot(&diff, &diff));
        traj.ddt_dist2.push(T::lit(2.0) * dot(&diff, f));
        if traj.angle_converged_at.is_none() && theta(w, ws)? < cfg.theta_eps {
            traj.angle_converged_at = Some(t);
        }
        Ok(())
    };

    let mut k1 = rhs(&w)?;
    record(&mut traj, T::zero(), &w, &k1)?;
    let mut d_prev = d0;
    for step in 1..=steps {
        let h = cfg.dt;
        let probe = |k: &[T], s: T| -> Vec<T> { w.iter().zip(k).map(|(&a, &b)| a + s * h * b).collect() };
        let k2 = rhs(&probe(&k1, half))?;
        let k3 = rhs(&probe(&k2, half))?;
        let k4 = rhs(&probe(&k3, T::one()))?;
        for i in 0..w.len() {
            w[i] += h * sixth * (k1[i] + T::lit(2.0) * (k2[i] + k3[i]) + k4[i]);
        }
        if !w.iter().all(|x| x.is_finite()) {
            return Err(ConvlabError::BadConfig(format!("non-finite state at step {step}")));
        }
        let d = crate::scalar::dist2(&w, ws);
        let t = T::from_usize_lossy(step) * h;
        if d_prev > floor && d > d_prev * T::lit(1.1) {
            return Err(ConvlabError::StepTooLarge { t: t.as_f64(), ratio: (d / d_prev).as_f64() });
        }
        d_prev = d;
        k1 = rhs(&w)?;
        if step % cfg.record_every == 0 || step == steps {
            record(&mut traj, t, &w, &k1)?;
        }
    }
    Ok(traj)
}

/// `g(θ) = (cosθ − 1)((π − θ)(cosθ − 1) + 2 sinθ)`.
pub fn g_of_theta<T: Scalar>(th: T) -> Result<T, ConvlabError> {
    check_angle(th)?;
    let c = th.cos() - T::one();
    Ok(c * ((T::PI() - th) * c + T::lit(2.0) * th.sin()))
}

fn check_angle<T: Scalar>(th: T) -> Result<(), ConvlabError> {
    if !(th >= T::zero() && th <= T::PI()) {
        return Err(ConvlabError::OutOfDomain(th.as_f64()));
    }
    Ok(())
}

/// Coefficients `[M₀, M₁, M₂, M₃]` of the cubic in `x = ‖w‖/‖w*‖` obtained
/// from `(w − w*)ᵀ I₂ (printed form)` after dividing by `φ₀‖w‖‖w*‖⁵`.
pub fn m_coeffs<T: Scalar>(th: T) -> Result<[T; 4], ConvlabError> {
    check_angle(th)?;
    let p = phis_of_angle(th);
    let c = th.cos();
    let half = T::lit(0.5);
    Ok([
        p.phi1 * half,
        p.phi1 * c * (half - p.phi1 - p.phi2 * c),
        p.phi0 * c + p.phi1 * (p.phi1 + p.phi2 * c),
        p.phi0,
    ])
}

/// `h(θ) = 27M₃²M₀ − 2M₂³ − 9M₁M₂M₃ − 2(M₂² + 3M₁M₃)^{3/2}`, i.e. `27M₃²` times the
/// local minimum of `M₃x³ − M₂x² − M₁x + M₀`; `None` where the discriminant is
/// negative.
pub fn h_of_theta<T: Scalar>(th: T) -> Result<Option<T>, ConvlabError> {
    let [m0, m1, m2, m3] = m_coeffs(th)?;
    let disc = m2 * m2 + T::lit(3.0) * m1 * m3;
    if disc < T::zero() {
        return Ok(None);
    }
    Ok(Some(
        T::lit(27.0) * m3 * m3 * m0 - T::lit(2.0) * m2 * m2 * m2 - T::lit(9.0) * m1 * m2 * m3
            - T::lit(2.0) * disc * disc.sqrt(),
    ))
}

/// `f(t) = At³ − Bt² − Ct + D`.
pub fn cubic_eval<T: Scalar>(a: T, b: T, c: T, d: T, t: T) -> T {
    ((a * t - b) * t - c) * t + d
}

/// Local minimiser `t₀ = (B + √(B² + 3AC))/3A` of `f(t) = At³ − Bt² − Ct + D`
/// and the closed-form value
/// `f(t₀) = (27A²D − 2B³ − 9ABC − 2(B² + 3AC)^{3/2}) / 27A²`.
pub fn cubic_min<T: Scalar>(a: T, b: T, c: T, d: T) -> Result<(T, T), ConvlabError> {
    let disc = b * b + T::lit(3.0) * a * c;
    if !(a > T::zero()) || !(disc >= T::zero()) {
        return Err(ConvlabError::NoLocalMin);
    }
    let s = disc.sqrt();
    let t0 = (b + s) / (T::lit(3.0) * a);
    let a2 = a * a;
    let f0 = (T::lit(27.0) * a2 * d - T::lit(2.0) * b * b * b - T::lit(9.0) * a * b * c - T::lit(2.0) * disc * s)
        / (T::lit(27.0) * a2);
    Ok((t0, f0))
}

/// `P[x > 0, y > 0] = 1/4 + arcsin(ρ)/2π` for standard bivariate normals.
pub fn quadrant_prob<T: Scalar>(rho: T) -> Result<T, ConvlabError> {
    if !(rho >= -T::one() && rho <= T::one()) {
        return Err(ConvlabError::OutOfDomain(rho.as_f64()));
    }
    Ok(T::lit(0.25) + rho.asin() / T::TAU())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeCell<T> {
    pub theta: T,
    pub ratio: T,
    pub v_l2: Option<T>,
    pub v_sob: Option<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landscape<T> {
    pub dim: usize,
    pub cells: Vec<LandscapeCell<T>>,
}

/// Realises `(θ, x)` as `w* = ŝ` and `w = x(cosθ ŝ + sinθ t̂)` in `ℝⁿ`, with
/// `ŝ` along the all-ones diagonal and `t̂ ⟂ ŝ`.
pub fn realize_pair<T: Scalar>(th: T, ratio: T, dim: usize) -> (Vec<T>, Vec<T>) {
    assert!(dim >= 2, "a pair at an angle needs dim >= 2");
    let inv = T::one() / T::from_usize_lossy(dim).sqrt();
    let s = vec![inv; dim];
    let mut t = vec![T::zero(); dim];
    t[0] = T::one();
    axpy(&mut t, -inv, &s);
    let nt = norm(&t);
    let t = scaled(&t, T::one() / nt);
    let w = s.iter().zip(&t).map(|(&a, &b)| ratio * (th.cos() * a + th.sin() * b)).collect();
    (w, s)
}

fn random_unit<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-3 {
            return scaled(&v, 1.0 / n);
        }
    }
}

/// Random orientation of `(θ, x)`: unit `w*` uniform on the sphere and
/// `w = x(cosθ ŝ + sinθ t̂)` with `t̂ ⟂ ŝ` uniform.
pub fn random_pair<R: Rng>(th: f64, ratio: f64, dim: usize, rng: &mut R) -> Result<(Vec<f64>, Vec<f64>), ConvlabError> {
    if dim < 2 {
        return Err(ConvlabError::BadConfig("a pair needs dim >= 2".into()));
    }
    check_angle(th)?;
    if !(ratio > 0.0) {
        return Err(ConvlabError::OutOfDomain(ratio));
    }
    let s = random_unit(dim, rng);
    let t = loop {
        let mut t = random_unit(dim, rng);
        let c = dot(&t, &s);
        axpy(&mut t, -c, &s);
        let n = norm(&t);
        if n > 1e-3 {
            break scaled(&t, 1.0 / n);
        }
    };
    let w = s.iter().zip(&t).map(|(&a, &b)| ratio * (th.cos() * a + th.sin() * b)).collect();
    Ok((w, s))
}

/// Rejection sample of a unit `w*` and `w₀` uniform in the ball
/// `‖w₀ − w*‖ < ‖w*‖`, keeping only angles in `(margin, π − margin)`.
pub fn sample_basin_pair<R: Rng>(dim: usize, margin: f64, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let ws = random_unit(dim, rng);
    loop {
        let dir = random_unit(dim, rng);
        let r: f64 = rng.random::<f64>().powf(1.0 / dim as f64);
        let w0: Vec<f64> = ws.iter().zip(&dir).map(|(&a, &b)| a + r * b).collect();
        if crate::scalar::dist2(&w0, &ws) >= 1.0 || norm(&w0) == 0.0 {
            continue;
        }
        let th = theta(&w0, &ws).unwrap_or(0.0);
        if th > margin && th < std::f64::consts::PI - margin {
            return (w0, ws);
        }
    }
}

/// `V = (d/dt ‖w − w*‖²)/(2φ₀‖w‖‖w*‖⁵)` for the L² and Sobolev flows with
/// `N = 1`, `μ₁ = 1`.
pub fn landscape_values<T: Scalar>(
    th: T,
    ratio: T,
    dim: usize,
    form: DerForm,
) -> Result<(T, T), ConvlabError> {
    if !(ratio > T::zero()) {
        return Err(ConvlabError::OutOfDomain(ratio.as_f64()));
    }
    check_angle(th)?;
    let ph = phis_of_angle(th);
    if ph.phi0 <= T::lit(PHI0_FLOOR) {
        return Err(ConvlabError::PhiZero);
    }
    let (w, ws) = realize_pair(th, ratio, dim);
    let p = Pair::new(&w, &ws, &[T::one()], T::zero())?;
    let diff: Vec<T> = w.iter().zip(&ws).map(|(&a, &b)| a - b).collect();
    let ns = norm(&ws);
    let denom = ph.phi0 * norm(&w) * ns.powi(5);
    let l2 = -dot(&diff, &grad_l2_pair(&p, &w)) / denom;
    let der = -dot(&diff, &grad_der_pair(&p, &w, &ws, form)) / denom;
    Ok((l2, l2 + der))
}

pub fn landscape<T: Scalar>(
    thetas: &[T],
    ratios: &[T],
    dim: usize,
    form: DerForm,
) -> Result<Landscape<T>, ConvlabError> {
    for &th in thetas {
        check_angle(th)?;
    }
    for &x in ratios {
        if !(x > T::zero()) {
            return Err(ConvlabError::OutOfDomain(x.as_f64()));
        }
    }
    let cells = thetas
        .par_iter()
        .flat_map_iter(|&th| {
            ratios.iter().map(move |&x| match landscape_values(th, x, dim, form) {
                Ok((a, b)) => LandscapeCell { theta: th, ratio: x, v_l2: Some(a), v_sob: Some(b) },
                Err(_) => LandscapeCell { theta: th, ratio: x, v_l2: None, v_sob: None },
            })
        })
        .collect();
    Ok(Landscape { dim, cells })
}

impl<T: Scalar> Landscape<T> {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), ConvlabError> {
        let mut wr = csv::Writer::from_writer(writer);
        let err = |e: csv::Error| ConvlabError::Io(e.to_string());
        wr.write_record(["theta", "x", "V_L2", "V_Sob", "defined_flag"]).map_err(err)?;
        let opt = |v: Option<T>| v.map_or_else(String::new, |x| fmt_f64(x.as_f64()));
        for c in &self.cells {
            wr.write_record([
                fmt_f64(c.theta.as_f64()),
                fmt_f64(c.ratio.as_f64()),
                opt(c.v_l2),
                opt(c.v_sob),
                u8::from(c.v_l2.is_some()).to_string(),
            ])
            .map_err(err)?;
        }
        wr.flush().map_err(|e| ConvlabError::Io(e.to_string()))
    }
}

/// `count` evenly spaced points covering `[lo, hi]` inclusive.
pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect(),
    }
}

/// Outcome of one Monte-Carlo check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub statistic: f64,
    pub bound: f64,
    pub pass: bool,
}

impl Verdict {
    fn below(name: impl Into<String>, statistic: f64, bound: f64) -> Self {
        Self { name: name.into(), statistic, bound, pass: statistic <= bound }
    }
}

const MC_CHUNK: usize = 1 << 14;

/// Sums `f` over `draws` standard Gaussian vectors in `ℝⁿ`. Chunks use
/// independent ChaCha streams and are reduced in index order.
pub fn gaussian_sum<F>(dim: usize, draws: usize, seed: u64, width: usize, f: F) -> Vec<f64>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    let chunks = draws.div_ceil(MC_CHUNK);
    let partials: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64 + 1);
            let mut acc = vec![0.0; width];
            let mut x = vec![0.0; dim];
            let count = MC_CHUNK.min(draws - c * MC_CHUNK);
            for _ in 0..count {
                for xi in x.iter_mut() {
                    *xi = StandardNormal.sample(&mut rng);
                }
                f(&x, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; width];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Mean of `F(x, e, w)` over single Gaussian rows against `C(e, w)`; the
/// statistic is the largest componentwise deviation in standard errors.
pub fn mc_relu_moment(e: &[f64], w: &[f64], draws: usize, seed: u64) -> Result<Verdict, ConvlabError> {
    let target = c_vec(e, w)?;
    let n = w.len();
    let sums = gaussian_sum(n, draws, seed, 2 * n, |x, acc| {
        let pw = dot(x, w);
        if dot(x, e) > 0.0 && pw > 0.0 {
            for i in 0..n {
                let v = pw * x[i];
                acc[i] += v;
                acc[n + i] += v * v;
            }
        }
    });
    let m = draws as f64;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let mean = sums[i] / m;
        let var = (sums[n + i] / m - mean * mean).max(0.0) * m / (m - 1.0);
        let se = (var / m).sqrt();
        let z = if se > 0.0 { (mean - target[i]).abs() / se } else { (mean - target[i]).abs() * f64::INFINITY };
        worst = worst.max(if z.is_nan() { 0.0 } else { z });
    }
    Ok(Verdict::below(format!("relu_moment_n{n}"), worst, 3.0))
}

/// `|P̂[xᵀa > 0, xᵀb > 0] − quadrant_prob(ρ)|` with `corr(xᵀa, xᵀb) = ρ`.
pub fn mc_quadrant(rho: f64, draws: usize, seed: u64) -> Result<Verdict, ConvlabError> {
    let exact = quadrant_prob(rho)?;
    let c = (1.0 - rho * rho).max(0.0).sqrt();
    let s = gaussian_sum(2, draws, seed, 1, |x, acc| {
        let y = rho * x[0] + c * x[1];
        if x[0] > 0.0 && y > 0.0 {
            acc[0] += 1.0;
        }
    });
    let p = s[0] / draws as f64;
    Ok(Verdict::below(format!("quadrant_rho_{rho}"), (p - exact).abs(), 5e-3))
}

/// `P[xᵀw > 0] = 1/2`, as a deviation in standard errors.
pub fn mc_half_space(w: &[f64], draws: usize, seed: u64) -> Result<Verdict, ConvlabError> {
    check_nonzero(w)?;
    let s = gaussian_sum(w.len(), draws, seed, 1, |x, acc| {
        if dot(x, w) > 0.0 {
            acc[0] += 1.0;
        }
    });
    let p = s[0] / draws as f64;
    let se = (0.25 / draws as f64).sqrt();
    Ok(Verdict::below("half_space", (p - 0.5).abs() / se, 3.0))
}

/// Central-difference gradient of the closed-form `α(·, w*)` at `w`.
fn alpha_grad_fd(w: &[f64], ws: &[f64]) -> Result<Vec<f64>, ConvlabError> {
    let h = 1e-6 * norm(w);
    let mut g = vec![0.0; w.len()];
    let mut wp = w.to_vec();
    for i in 0..w.len() {
        wp[i] = w[i] + h;
        let fp = alpha(&wp, ws)?;
        wp[i] = w[i] - h;
        let fm = alpha(&wp, ws)?;
        wp[i] = w[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let nb = norm(b);
    if nb > 0.0 {
        diff / nb
    } else {
        diff
    }
}

/// Sample mean of the per-draw gradient of `½|u(x;w) − u(x;w*)|²`, where
/// `u(x;w) = μ α(w,w*) σ(wᵀx)` and `∇α` is taken by finite differences,
/// against [`grad_l2_population`].
pub fn mc_grad_l2(w: &[f64], ws: &[f64], mu: &[f64], draws: usize, seed: u64) -> Result<Verdict, ConvlabError> {
    let exact = grad_l2_population(w, ws, mu)?;
    let n = w.len();
    let a = alpha(w, ws)?;
    let a_star = alpha(ws, ws)?;
    let da = alpha_grad_fd(w, ws)?;
    let s2 = mu.iter().map(|m| m * m).sum::<f64>() / mu.len() as f64;
    let sums = gaussian_sum(n, draws, seed, n, |x, acc| {
        let pw = dot(x, w);
        let ps = dot(x, ws);
        let r = a * pw.max(0.0) - a_star * ps.max(0.0);
        if r == 0.0 {
            return;
        }
        for i in 0..n {
            let du = if pw > 0.0 { a * x[i] } else { 0.0 } + pw.max(0.0) * da[i];
            acc[i] += du * r;
        }
    });
    let mean: Vec<f64> = sums.iter().map(|s| s2 * s / draws as f64).collect();
    Ok(Verdict::below(format!("grad_l2_n{n}"), relative_error(&mean, &exact), 0.02))
}

/// Same check for the derivative loss `½|D_x u(x;w) − D_x u(x;w*)|²` with
/// `D_x u = μ α 1{wᵀx > 0} w`.
pub fn mc_grad_der(
    w: &[f64],
    ws: &[f64],
    mu: &[f64],
    draws: usize,
    seed: u64,
    form: DerForm,
) -> Result<Verdict, ConvlabError> {
    let exact = grad_der_population_form(w, ws, mu, form)?;
    let n = w.len();
    let a = alpha(w, ws)?;
    let a_star = alpha(ws, ws)?;
    let da = alpha_grad_fd(w, ws)?;
    let s2 = mu.iter().map(|m| m * m).sum::<f64>() / mu.len() as f64;
    let sums = gaussian_sum(n, draws, seed, n, |x, acc| {
        if dot(x, w) <= 0.0 {
            return;
        }
        // r = α w − α* 1{w*ᵀx > 0} w*, J = α I + w ∇αᵀ, gradient Jᵀ r
        let on = dot(x, ws) > 0.0;
        let r: Vec<f64> = (0..n).map(|i| a * w[i] - if on { a_star * ws[i] } else { 0.0 }).collect();
        let wr = dot(w, &r);
        for i in 0..n {
            acc[i] += a * r[i] + da[i] * wr;
        }
    });
    let mean: Vec<f64> = sums.iter().map(|s| s2 * s / draws as f64).collect();
    let tag = match form {
        DerForm::Exact => "exact",
        DerForm::Printed => "printed",
    };
    Ok(Verdict::below(format!("grad_der_{tag}_n{n}"), relative_error(&mean, &exact), 0.02))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn theta_special_angles() {
        assert_eq!(theta(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(close(theta(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), PI / 2.0, 1e-15));
        assert!(close(theta(&[1.0, 2.0], &[-1.0, -2.0]).unwrap(), PI, 1e-15));
        assert_eq!(theta(&[0.0, 0.0], &[1.0, 0.0]), Err(ConvlabError::ZeroVector));
    }

    #[test]
    fn theta_small_angle_precision() {
        let t: f64 = theta(&[1.0, 0.0], &[1.0, 1e-10]).unwrap();
        assert!(close(t, 1e-10, 1e-20));
    }

    #[test]
    fn phis_endpoints() {
        let p = phis_of_angle(0.0f64);
        assert!(close(p.phi0, 0.5, 1e-16) && close(p.phi1, 0.5, 1e-16) && p.phi2 == 0.0);
        let p = phis_of_angle(PI);
        assert!(p.phi0.abs() < 1e-16 && p.phi1 == 0.0 && p.phi2.abs() < 1e-16);
        let p = phis_of_angle(PI / 2.0);
        assert!(close(p.phi0, 1.0 / (2.0 * PI), 1e-16));
        assert!(close(p.phi1, 0.25, 1e-16));
        assert!(close(p.phi2, 1.0 / (2.0 * PI), 1e-16));
    }

    #[test]
    fn c_vec_cases() {
        let w = [3.0, 4.0];
        let c = c_vec(&[0.6, 0.8], &w).unwrap();
        assert!(close(c[0], 1.5, 1e-15) && close(c[1], 2.0, 1e-15));
        let e = [-0.8, 0.6];
        let c = c_vec(&e, &w).unwrap();
        for i in 0..2 {
            let want = ((PI / 2.0) * w[i] + 5.0 * e[i]) / (2.0 * PI);
            assert!(close(c[i], want, 1e-15));
        }
        assert!(matches!(c_vec(&[1.0, 1.0], &w), Err(ConvlabError::NotUnit(_))));
    }

    #[test]
    fn alpha_cases() {
        let w = [1.0, -2.0, 0.5];
        assert!(close(alpha(&w, &w).unwrap(), 5.25 / 2.0, 1e-15));
        let neg: Vec<f64> = w.iter().map(|x| -x).collect();
        assert!(alpha(&w, &neg).unwrap().abs() < 1e-15);
    }

    #[test]
    fn f_empirical_cases() {
        let w = [1.0, 1.0];
        assert_eq!(f_empirical(&[-1.0, -1.0, -2.0, 0.5], &[0.6, 0.8], &w).unwrap(), vec![0.0, 0.0]);
        let s = 0.5f64.sqrt();
        let f = f_empirical(&[s, s], &[s, s], &w).unwrap();
        // (xᵀw) x = √2 · (s, s) = (1, 1)
        assert!(close(f[0], 1.0, 1e-15) && close(f[1], 1.0, 1e-15));
        assert!(f_empirical(&[1.0, 2.0, 3.0], &[1.0, 0.0], &w).is_err());
    }

    #[test]
    fn gradients_vanish_at_target() {
        let ws = [0.3f64, -1.1, 0.7];
        let mu = [1.0, -0.5];
        for g in [
            grad_l2_population(&ws, &ws, &mu).unwrap(),
            grad_der_population(&ws, &ws, &mu).unwrap(),
            grad_der_population_form(&ws, &ws, &mu, DerForm::Printed).unwrap(),
        ] {
            assert!(g.iter().all(|x: &f64| x.abs() < 1e-15), "{g:?}");
        }
    }

    #[test]
    fn flow_stays_at_target() {
        let ws = vec![0.6, 0.8];
        let mut cfg = FlowConfig::new(ws.clone(), ws.clone(), FlowMode::Sob);
        cfg.horizon = 1.0;
        let tr = flow_integrate(&cfg).unwrap();
        assert!(tr.dist2.iter().all(|&d| d == 0.0));
        assert_eq!(tr.angle_converged_at, Some(0.0));
    }

    #[test]
    fn flow_rejects_outside_basin() {
        let cfg = FlowConfig::new(vec![-1.0, 0.0], vec![1.0, 0.0], FlowMode::L2);
        assert!(matches!(flow_integrate(&cfg), Err(ConvlabError::OutsideBasin { .. })));
    }

    #[test]
    fn flow_step_too_large() {
        let mut cfg = FlowConfig::new(vec![2.0, 1.0], vec![1.0, 0.0], FlowMode::Sob);
        cfg.basin_only = false;
        cfg.dt = 50.0;
        cfg.horizon = 500.0;
        assert!(matches!(flow_integrate(&cfg), Err(ConvlabError::StepTooLarge { .. })));
    }

    #[test]
    fn g_values() {
        assert_eq!(g_of_theta(0.0f64).unwrap(), 0.0);
        assert!(g_of_theta(PI).unwrap().abs() < 1e-15);
        assert!(close(g_of_theta(PI / 2.0).unwrap(), PI / 2.0 - 2.0, 1e-15));
        assert!(g_of_theta(-0.1f64).is_err() && g_of_theta(4.0f64).is_err());
    }

    #[test]
    fn h_vanishes_at_zero() {
        assert!(h_of_theta(0.0f64).unwrap().unwrap().abs() < 1e-15);
        assert!(h_of_theta(0.5f64).unwrap().unwrap() > 0.0);
        assert_eq!(h_of_theta(2.5f64).unwrap(), None);
    }

    #[test]
    fn cubic_examples() {
        let (t0, f0) = cubic_min(1.0f64, 0.0, 3.0, 0.0).unwrap();
        assert!(close(t0, 1.0, 1e-15) && close(f0, -2.0, 1e-15));
        let (t0, f0) = cubic_min(1.0f64, 0.0, 0.0, 5.0).unwrap();
        assert!(t0 == 0.0 && close(f0, 5.0, 1e-15));
        assert_eq!(cubic_min(-1.0f64, 0.0, 0.0, 0.0), Err(ConvlabError::NoLocalMin));
        assert_eq!(cubic_min(1.0f64, 0.0, -1.0, 0.0), Err(ConvlabError::NoLocalMin));
    }

    #[test]
    fn quadrant_values() {
        assert!(close(quadrant_prob(0.0f64).unwrap(), 0.25, 1e-16));
        assert!(close(quadrant_prob(1.0f64).unwrap(), 0.5, 1e-16));
        assert!(close(quadrant_prob(0.5f64).unwrap(), 0.25 + 1.0 / 12.0, 1e-15));
        assert!(quadrant_prob(1.01f64).is_err());
    }

    #[test]
    fn landscape_fixed_point_and_missing_cells() {
        let (a, b) = landscape_values(1e-9f64, 1.0, 2, DerForm::Exact).unwrap();
        assert!(a.abs() < 1e-8 && b.abs() < 1e-8);
        assert_eq!(landscape_values(PI, 1.0, 2, DerForm::Exact), Err(ConvlabError::PhiZero));
        let l = landscape(&[0.5, PI], &[1.0], 3, DerForm::Exact).unwrap();
        assert!(l.cells[0].v_l2.is_some() && l.cells[1].v_l2.is_none());
    }

    #[test]
    fn f32_instantiation() {
        let g = grad_l2_population(&[1.0f32, 0.5], &[0.8f32, -0.2], &[1.0]).unwrap();
        let d = grad_l2_population(&[1.0f64, 0.5], &[0.8f64, -0.2], &[1.0]).unwrap();
        assert!((g[0] as f64 - d[0]).abs() < 1e-5);
    }
}
