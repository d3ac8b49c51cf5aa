//! Sobolev-loss training of a kernel-form operator network.
//!
//! Losses follow the mean-of-squares convention: `L_{L²}` averages squared
//! residuals over query points and then samples, `L_Der` additionally over
//! the derivative components. [`train`] runs minibatch descent in one of three
//! modes and records per-epoch losses and validation error.

mod data;
mod net;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::fmt_f64;
use crate::mls::MlsError;
use crate::scalar::{dot, Scalar};

pub use data::{
    read_dataset, synth_dataset, synth_split, write_dataset, DatasetMeta, DerivTargets, Fourier1d, OperatorDataset,
    SynthSpec, TaskKind,
};
pub use net::{mlp_backward, mlp_forward, MlpCache, MlpShape, OperatorNet};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{what}: expected {expected}, got {got}")]
    DimMismatch { what: &'static str, expected: usize, got: usize },
    #[error("both task gradients are zero")]
    BothZero,
    #[error("target sample {sample} has zero norm")]
    ZeroTargetNorm { sample: usize },
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("mode {0} needs derivative targets but the dataset has none")]
    MissingDerivatives(String),
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("derivative estimation failed for sample {sample}: {source}")]
    Mls { sample: usize, source: MlsError },
    #[error("dataset io: {0}")]
    Io(String),
}

fn check_shapes<T>(pred: &[Vec<T>], target: &[Vec<T>]) -> Result<(), TrainError> {
    if pred.len() != target.len() {
        return Err(TrainError::ShapeMismatch(format!("{} vs {} samples", pred.len(), target.len())));
    }
    for (k, (p, t)) in pred.iter().zip(target).enumerate() {
        if p.len() != t.len() {
            return Err(TrainError::ShapeMismatch(format!("sample {k}: {} vs {} values", p.len(), t.len())));
        }
    }
    Ok(())
}

fn mean_of_means<T: Scalar>(pred: &[Vec<T>], target: &[Vec<T>]) -> Result<T, TrainError> {
    check_shapes(pred, target)?;
    if pred.is_empty() {
        return Ok(T::zero());
    }
    let total: T = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            if p.is_empty() {
                return T::zero();
            }
            let s: T = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum();
            s / T::from_usize_lossy(p.len())
        })
        .sum();
    Ok(total / T::from_usize_lossy(pred.len()))
}

/// `(1/N) Σ_k mean_j (u_k(x_j) − û_k(x_j))²`; rows are samples.
pub fn l2_loss<T: Scalar>(pred: &[Vec<T>], target: &[Vec<T>]) -> Result<T, TrainError> {
    mean_of_means(pred, target)
}

/// Same averaging over the stacked first derivatives; each row holds the
/// `Q × n` gradient components of one sample.
pub fn der_loss<T: Scalar>(pred_grad: &[Vec<T>], target_grad: &[Vec<T>]) -> Result<T, TrainError> {
    mean_of_means(pred_grad, target_grad)
}

/// `L_{L²} + λ L_Der`.
pub fn sobolev_loss<T: Scalar>(l2: T, der: T, lambda: T) -> T {
    l2 + lambda * der
}

/// `(1/N) Σ_k ‖pred_k − target_k‖₂ / ‖target_k‖₂`.
pub fn relative_l2_error<T: Scalar>(pred: &[Vec<T>], target: &[Vec<T>]) -> Result<T, TrainError> {
    check_shapes(pred, target)?;
    if pred.is_empty() {
        return Ok(T::zero());
    }
    let mut total = T::zero();
    for (k, (p, t)) in pred.iter().zip(target).enumerate() {
        let nt = dot(t, t).sqrt();
        if !(nt > T::zero()) {
            return Err(TrainError::ZeroTargetNorm { sample: k });
        }
        let diff: T = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum();
        total += diff.sqrt() / nt;
    }
    Ok(total / T::from_usize_lossy(pred.len()))
}

/// The two task gradients and their conflict-free merge.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientPair<T> {
    pub g1: Vec<T>,
    pub g2: Vec<T>,
    pub merged: Vec<T>,
}

/// Symmetric gradient surgery: if `g1·g2 < 0` each gradient is projected
/// onto the normal plane of the other before summing.
pub fn pcgrad_merge<T: Scalar>(g1: &[T], g2: &[T]) -> Result<GradientPair<T>, TrainError> {
    if g1.len() != g2.len() {
        return Err(TrainError::ShapeMismatch(format!("gradients of length {} and {}", g1.len(), g2.len())));
    }
    let n1 = dot(g1, g1);
    let n2 = dot(g2, g2);
    if n1 == T::zero() && n2 == T::zero() {
        return Err(TrainError::BothZero);
    }
    let c = dot(g1, g2);
    let merged = if c >= T::zero() {
        g1.iter().zip(g2).map(|(&a, &b)| a + b).collect()
    } else {
        let (s1, s2) = (c / n2, c / n1);
        g1.iter().zip(g2).map(|(&a, &b)| (a - s1 * b) + (b - s2 * a)).collect()
    };
    Ok(GradientPair { g1: g1.to_vec(), g2: g2.to_vec(), merged })
}

/// Samples sharing one sensor set and one query set.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a, T> {
    /// `J̃ × n_y` sensor locations.
    pub sensors: &'a [T],
    /// `Q × n` query locations.
    pub queries: &'a [T],
    /// Input values at the sensors, one row per sample.
    pub inputs: &'a [Vec<T>],
    /// Target values at the queries.
    pub targets: &'a [Vec<T>],
    /// Target gradients at the queries, `Q × n` per sample.
    pub derivs: Option<&'a [Vec<T>]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    L2,
    Der,
}

/// Predictions at every query point for every input.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub values: Vec<Vec<T>>,
    pub grads: Vec<Vec<T>>,
}

struct Forward<T> {
    phi: MlpCache<T>,
    psi: MlpCache<T>,
    z: Vec<T>,
    pred: Prediction<T>,
}

fn check_batch<T: Scalar>(net: &OperatorNet<T>, b: &Batch<'_, T>) -> Result<(usize, usize), TrainError> {
    let (n, ny) = (net.query_dim(), net.sensor_dim());
    if !b.queries.len().is_multiple_of(n) || !b.sensors.len().is_multiple_of(ny) {
        return Err(TrainError::DimMismatch { what: "point coordinates", expected: n, got: b.queries.len() });
    }
    let (q, j) = (b.queries.len() / n, b.sensors.len() / ny);
    for v in b.inputs {
        if v.len() != j {
            return Err(TrainError::DimMismatch { what: "sensor values", expected: j, got: v.len() });
        }
    }
    Ok((q, j))
}

fn forward<T: Scalar>(net: &OperatorNet<T>, b: &Batch<'_, T>, tangents: bool) -> Result<Forward<T>, TrainError> {
    let (q, _) = check_batch(net, b)?;
    let n = net.query_dim();
    let r = net.rank();
    let phi = mlp_forward(&net.phi, net.phi_params(), b.queries, tangents);
    let psi = mlp_forward(&net.psi, net.psi_params(), b.sensors, false);
    let z = net::encode(psi.output(), b.inputs, r);
    let out = phi.output();
    let mut values = Vec::with_capacity(b.inputs.len());
    let mut grads = Vec::with_capacity(b.inputs.len());
    for k in 0..b.inputs.len() {
        let zk = &z[k * r..(k + 1) * r];
        values.push((0..q).map(|j| dot(&out[j * r..(j + 1) * r], zk)).collect());
        if tangents {
            let t = phi.output_tangent();
            grads.push((0..q * n).map(|jd| dot(&t[jd * r..(jd + 1) * r], zk)).collect());
        }
    }
    Ok(Forward { phi, psi, z, pred: Prediction { values, grads } })
}

pub fn predict<T: Scalar>(net: &OperatorNet<T>, b: &Batch<'_, T>, with_grads: bool) -> Result<Prediction<T>, TrainError> {
    Ok(forward(net, b, with_grads)?.pred)
}

/// Losses and parameter gradients for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads<T> {
    pub l2: T,
    pub g_l2: Vec<T>,
    pub der: Option<T>,
    pub g_der: Option<Vec<T>>,
}

/// Parameter gradients of `L_{L²}` and, when derivative targets are present
/// and requested, of `L_Der`, sharing one forward pass.
pub fn loss_gradients<T: Scalar>(net: &OperatorNet<T>, b: &Batch<'_, T>, with_der: bool) -> Result<LossGrads<T>, TrainError> {
    let derivs = if with_der { b.derivs } else { None };
    let f = forward(net, b, derivs.is_some())?;
    let r = net.rank();
    let n = net.query_dim();
    let q = b.queries.len() / n;
    let nk = b.inputs.len();
    let l2 = l2_loss(&f.pred.values, b.targets)?;

    let scale = T::lit(2.0) / T::from_usize_lossy((nk * q).max(1));
    let du: Vec<Vec<T>> = f
        .pred
        .values
        .iter()
        .zip(b.targets)
        .map(|(p, t)| p.iter().zip(t).map(|(&a, &c)| scale * (a - c)).collect())
        .collect();
    let mut dz = vec![T::zero(); nk * r];
    let mut dphi = vec![T::zero(); q * r];
    let out = f.phi.output();
    for k in 0..nk {
        let zk = &f.z[k * r..(k + 1) * r];
        for j in 0..q {
            let g = du[k][j];
            let oj = &out[j * r..(j + 1) * r];
            for i in 0..r {
                dz[k * r + i] += g * oj[i];
                dphi[j * r + i] += g * zk[i];
            }
        }
    }
    let mut g_l2 = vec![T::zero(); net.param_count()];
    backprop(net, b, &f, &dphi, None, &dz, &mut g_l2);

    let (der, g_der) = match derivs {
        None => (None, None),
        Some(targets) => {
            let der = der_loss(&f.pred.grads, targets)?;
            let scale = T::lit(2.0) / T::from_usize_lossy((nk * q * n).max(1));
            let t = f.phi.output_tangent();
            let mut dz = vec![T::zero(); nk * r];
            let mut dtan = vec![T::zero(); q * n * r];
            for k in 0..nk {
                let zk = &f.z[k * r..(k + 1) * r];
                for jd in 0..q * n {
                    let g = scale * (f.pred.grads[k][jd] - targets[k][jd]);
                    let tj = &t[jd * r..(jd + 1) * r];
                    for i in 0..r {
                        dz[k * r + i] += g * tj[i];
                        dtan[jd * r + i] += g * zk[i];
                    }
                }
            }
            let mut g = vec![T::zero(); net.param_count()];
            backprop(net, b, &f, &vec![T::zero(); q * r], Some(&dtan), &dz, &mut g);
            (Some(der), Some(g))
        }
    };
    Ok(LossGrads { l2, g_l2, der, g_der })
}

fn backprop<T: Scalar>(
    net: &OperatorNet<T>,
    b: &Batch<'_, T>,
    f: &Forward<T>,
    dphi: &[T],
    dtan: Option<&[T]>,
    dz: &[T],
    grad: &mut [T],
) {
    let r = net.rank();
    let jn = f.psi.points();
    let inv = T::one() / T::from_usize_lossy(jn);
    let mut dpsi = vec![T::zero(); jn * r];
    for (k, v) in b.inputs.iter().enumerate() {
        let dzk = &dz[k * r..(k + 1) * r];
        for (l, &vl) in v.iter().enumerate() {
            for i in 0..r {
                dpsi[l * r + i] += inv * vl * dzk[i];
            }
        }
    }
    let np = net.phi.param_count();
    let (gphi, gpsi) = grad.split_at_mut(np);
    mlp_backward(&net.phi, net.phi_params(), &f.phi, dphi, dtan, gphi);
    mlp_backward(&net.psi, net.psi_params(), &f.psi, &dpsi, None, gpsi);
}

/// Flat parameter gradient of the selected loss.
pub fn backward<T: Scalar>(net: &OperatorNet<T>, b: &Batch<'_, T>, kind: LossKind) -> Result<Vec<T>, TrainError> {
    match kind {
        LossKind::L2 => Ok(loss_gradients(net, b, false)?.g_l2),
        LossKind::Der => {
            if b.derivs.is_none() {
                return Err(TrainError::MissingDerivatives("der".into()));
            }
            Ok(loss_gradients(net, b, true)?.g_der.expect("derivative targets present"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    #[serde(rename = "ordinary")]
    Ordinary,
    #[serde(rename = "sobolev")]
    Sobolev,
    #[serde(rename = "sobolev+pcgrad")]
    SobolevPcgrad,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Ordinary => "ordinary",
            TrainMode::Sobolev => "sobolev",
            TrainMode::SobolevPcgrad => "sobolev+pcgrad",
        }
    }

    pub fn needs_derivatives(self) -> bool {
        self != TrainMode::Ordinary
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TrainMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ordinary" => Ok(TrainMode::Ordinary),
            "sobolev" => Ok(TrainMode::Sobolev),
            "sobolev+pcgrad" | "pcgrad" => Ok(TrainMode::SobolevPcgrad),
            _ => Err(format!("unknown mode {s:?} (expected ordinary, sobolev or sobolev+pcgrad)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Gd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    /// Weight of `L_Der` in the Sobolev objective.
    pub lambda: f64,
    pub hidden: Vec<usize>,
    pub rank: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            lr: 1e-2,
            optimizer: Optimizer::Gd,
            lambda: 1.0,
            hidden: vec![64, 64],
            rank: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(TrainError::BadConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(TrainError::BadConfig(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if self.rank == 0 || self.hidden.contains(&0) {
            return Err(TrainError::BadConfig("rank and hidden widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn step<T: Scalar>(&mut self, params: &mut [T], grad: &[T], lr: f64) {
        if self.m.is_empty() {
            self.m = vec![0.0; params.len()];
            self.v = vec![0.0; params.len()];
        }
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i].as_f64();
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g;
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g * g;
            let upd = lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
            params[i] -= T::lit(upd);
        }
    }
}

/// Losses after one epoch (or at initialisation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l2: f64,
    pub der: Option<f64>,
    pub val_rel_l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub seed: u64,
    pub config: TrainConfig,
    pub param_count: usize,
    pub dataset: DatasetMeta,
    pub initial: EpochRecord,
    pub epochs: Vec<EpochRecord>,
    pub final_test_rel_l2: f64,
}

impl TrainReport {
    /// `epoch,l2,der,val_rel_l2`, epoch 0 being the initial state.
    pub fn write_losses_csv<W: Write>(&self, writer: W) -> Result<(), TrainError> {
        let mut wr = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| TrainError::Io(e.to_string());
        wr.write_record(["epoch", "l2", "der", "val_rel_l2"]).map_err(io)?;
        for r in std::iter::once(&self.initial).chain(&self.epochs) {
            wr.write_record([
                r.epoch.to_string(),
                fmt_f64(r.l2),
                r.der.map_or_else(String::new, fmt_f64),
                fmt_f64(r.val_rel_l2),
            ])
            .map_err(io)?;
        }
        wr.flush().map_err(|e| TrainError::Io(e.to_string()))
    }

    pub fn final_record(&self) -> &EpochRecord {
        self.epochs.last().unwrap_or(&self.initial)
    }
}

fn dataset_batch<'a, T: Scalar>(d: &'a OperatorDataset<T>, with_der: bool) -> Batch<'a, T> {
    Batch {
        sensors: &d.sensors,
        queries: &d.queries,
        inputs: &d.inputs,
        targets: &d.targets,
        derivs: if with_der { d.derivs.as_deref() } else { None },
    }
}

fn evaluate<T: Scalar>(
    net: &OperatorNet<T>,
    train: &OperatorDataset<T>,
    val: &OperatorDataset<T>,
    epoch: usize,
) -> Result<EpochRecord, TrainError> {
    let tb = dataset_batch(train, true);
    let p = predict(net, &tb, tb.derivs.is_some())?;
    let l2 = l2_loss(&p.values, &train.targets)?.as_f64();
    let der = match &train.derivs {
        Some(d) => Some(der_loss(&p.grads, d)?.as_f64()),
        None => None,
    };
    let vp = predict(net, &dataset_batch(val, false), false)?;
    let val_rel_l2 = relative_l2_error(&vp.values, &val.targets)?.as_f64();
    if !l2.is_finite() || der.is_some_and(|d| !d.is_finite()) || !val_rel_l2.is_finite() {
        return Err(TrainError::NonFiniteLoss { epoch });
    }
    Ok(EpochRecord { epoch, l2, der, val_rel_l2 })
}

/// Trains a fresh network on `train`, tracking `val` each epoch and reporting
/// the final relative L² error on `test`.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    mode: TrainMode,
    train: &OperatorDataset<T>,
    val: &OperatorDataset<T>,
    test: &OperatorDataset<T>,
) -> Result<(TrainReport, OperatorNet<T>), TrainError> {
    cfg.validate()?;
    if mode.needs_derivatives() && train.derivs.is_none() {
        return Err(TrainError::MissingDerivatives(mode.name().into()));
    }
    let dim = train.meta.dim;
    let mut net = OperatorNet::new(dim, dim, &cfg.hidden, cfg.rank, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let lambda = T::lit(cfg.lambda);
    let lr = T::lit(cfg.lr);
    let mut adam = Adam::default();

    let initial = evaluate(&net, train, val, 0)?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.inputs.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let inputs: Vec<Vec<T>> = chunk.iter().map(|&k| train.inputs[k].clone()).collect();
            let targets: Vec<Vec<T>> = chunk.iter().map(|&k| train.targets[k].clone()).collect();
            let derivs: Option<Vec<Vec<T>>> =
                train.derivs.as_ref().map(|d| chunk.iter().map(|&k| d[k].clone()).collect());
            let b = Batch {
                sensors: &train.sensors,
                queries: &train.queries,
                inputs: &inputs,
                targets: &targets,
                derivs: derivs.as_deref(),
            };
            let lg = loss_gradients(&net, &b, mode.needs_derivatives())?;
            if !lg.l2.is_finite() || lg.der.is_some_and(|d| !d.is_finite()) {
                return Err(TrainError::NonFiniteLoss { epoch });
            }
            let step = match (mode, lg.g_der) {
                (TrainMode::Ordinary, _) | (_, None) => lg.g_l2,
                (TrainMode::Sobolev, Some(gd)) => lg.g_l2.iter().zip(&gd).map(|(&a, &b)| a + lambda * b).collect(),
                (TrainMode::SobolevPcgrad, Some(gd)) => {
                    let g2: Vec<T> = gd.iter().map(|&x| lambda * x).collect();
                    match pcgrad_merge(&lg.g_l2, &g2) {
                        Ok(pair) => pair.merged,
                        Err(TrainError::BothZero) => continue,
                        Err(e) => return Err(e),
                    }
                }
            };
            match cfg.optimizer {
                Optimizer::Gd => {
                    for (p, g) in net.params.iter_mut().zip(&step) {
                        *p -= lr * *g;
                    }
                }
                Optimizer::Adam => adam.step(&mut net.params, &step, cfg.lr),
            }
        }
        epochs.push(evaluate(&net, train, val, epoch)?);
    }
    let tp = predict(&net, &dataset_batch(test, false), false)?;
    let final_test_rel_l2 = relative_l2_error(&tp.values, &test.targets)?.as_f64();
    let report = TrainReport {
        mode,
        seed: cfg.seed,
        config: cfg.clone(),
        param_count: net.param_count(),
        dataset: train.meta.clone(),
        initial,
        epochs,
        final_test_rel_l2,
    };
    Ok((report, net))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l2_loss_examples() {
        let z = vec![vec![1.0, 2.0]];
        assert_eq!(l2_loss(&z, &z).unwrap(), 0.0);
        assert_eq!(l2_loss(&[vec![1.0]], &[vec![0.0]]).unwrap(), 1.0);
        let pred = vec![vec![1.0, 1.0], vec![0.0, 2.0]];
        let tgt = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        assert!((l2_loss(&pred, &tgt).unwrap() - 1.5f64).abs() < 1e-15);
        assert!(matches!(l2_loss(&pred, &tgt[..1]), Err(TrainError::ShapeMismatch(_))));
    }

    #[test]
    fn der_loss_examples() {
        assert_eq!(der_loss(&[vec![1.0, 0.0]], &[vec![0.0, 0.0]]).unwrap(), 0.5);
        let a = vec![vec![0.3, -1.0, 2.0]];
        let b = vec![vec![0.1, 0.5, 1.0]];
        let sa: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|x| 3.0 * x).collect()).collect();
        let sb: Vec<Vec<f64>> = b.iter().map(|r| r.iter().map(|x| 3.0 * x).collect()).collect();
        assert!((der_loss(&sa, &sb).unwrap() - 9.0 * der_loss(&a, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn sobolev_loss_examples() {
        assert_eq!(sobolev_loss(0.0, 0.0, 1.0), 0.0);
        assert_eq!(sobolev_loss(1.5, 0.5, 1.0), 2.0);
        assert_eq!(sobolev_loss(1.5, 0.5, 0.0), 1.5);
    }

    #[test]
    fn pcgrad_examples() {
        assert_eq!(pcgrad_merge(&[1.0, 0.0], &[0.0, 1.0]).unwrap().merged, vec![1.0, 1.0]);
        let m = pcgrad_merge(&[1.0, 0.0], &[-1.0, 1.0]).unwrap().merged;
        assert!((m[0] - 0.5f64).abs() < 1e-15 && (m[1] - 1.5).abs() < 1e-15);
        let m = pcgrad_merge(&[1.0, -2.0], &[-1.0, 2.0]).unwrap().merged;
        assert!(m.iter().all(|x: &f64| x.abs() < 1e-15));
        assert!(matches!(pcgrad_merge(&[0.0, 0.0], &[0.0, 0.0]), Err(TrainError::BothZero)));
    }

    #[test]
    fn relative_error_examples() {
        let t = vec![vec![1.0, 2.0], vec![-1.0, 0.5]];
        assert_eq!(relative_l2_error(&t, &t).unwrap(), 0.0);
        let p: Vec<Vec<f64>> = t.iter().map(|r| r.iter().map(|x| 1.01 * x).collect()).collect();
        assert!((relative_l2_error(&p, &t).unwrap() - 0.01).abs() < 1e-12);
        let p = vec![vec![1.02], vec![1.04]];
        assert!((relative_l2_error(&p, &[vec![1.0], vec![1.0]]).unwrap() - 0.03f64).abs() < 1e-12);
        assert!(matches!(relative_l2_error(&[vec![1.0]], &[vec![0.0]]), Err(TrainError::ZeroTargetNorm { sample: 0 })));
    }
}
