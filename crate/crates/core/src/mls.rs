//! Moving-least-squares derivative estimation on irregular point clouds.
//!
//! Around every cloud point `x̄` a polynomial `p(x) = Σ_{|α|≤m} c_α (x − x̄)^α`
//! is fitted to the `K` nearest samples under the compactly supported weight
//! `ω(t) = (1 − t/D)⁴ (4t/D + 1)`. The coefficient vector is the solution of
//! the weighted normal equations `E c = Σ ω_k b(x_k) u(x_k)` with
//! `E = Σ ω_k b(x_k) b(x_k)ᵀ`. Since `(x − x̄)^α` is the monomial basis, the
//! derivative estimate is `D^α u(x̄) ≈ α! c_α`.
//!
//! The normal equations are assembled in coordinates scaled by the stencil
//! radius, which leaves the least-squares solution unchanged and keeps `E`
//! well conditioned on fine meshes.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{build_index, fmt_f64, GeometryError, PointCloud, SpatialIndex};
use crate::linalg::{cholesky_in_place, cholesky_solve, pseudo_inverse_solve, symmetric_eigen};
use crate::scalar::Scalar;

/// Stencils whose normal matrix exceeds this condition number are degenerate.
pub const MAX_CONDITION: f64 = 1e12;
/// Relative singular-value cutoff of the pseudo-inverse fallback.
pub const PINV_CUTOFF: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MlsError {
    #[error("support radius must be positive, got {0}")]
    NonpositiveSupport(f64),
    #[error("K={k} is smaller than the basis size I={basis}; need K >= I = (m+n)!/(m!n!)")]
    BasisTooLarge { k: usize, basis: usize },
    #[error("weight_margin must exceed 1, got {0}")]
    BadMargin(f64),
    #[error("ridge must be nonnegative, got {0}")]
    BadRidge(f64),
    #[error("multi-index order {order} exceeds fitted order {max}")]
    OrderTooHigh { order: usize, max: usize },
    #[error("multi-index has {got} components, expected {expected}")]
    IndexDim { expected: usize, got: usize },
    #[error("normal matrix at point {point} is singular beyond regularisation (degenerate stencil)")]
    SingularNormalMatrix { point: usize },
    #[error("non-finite coefficients at point {point}")]
    NonFinite { point: usize },
    #[error("at point {point:?}: {source}")]
    Geometry { point: Option<usize>, source: GeometryError },
    #[error("convergence study needs at least 3 strictly increasing resolutions")]
    BadResolutions,
    #[error("domain has {got} intervals, test function needs {expected}")]
    DomainDim { expected: usize, got: usize },
    #[error("jet csv: {0}")]
    Csv(String),
}

impl From<GeometryError> for MlsError {
    fn from(source: GeometryError) -> Self {
        MlsError::Geometry { point: None, source }
    }
}

/// Exponent tuple `α = (α¹, …, αⁿ)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MultiIndex(pub Vec<u32>);

impl MultiIndex {
    pub fn zero(dim: usize) -> Self {
        MultiIndex(vec![0; dim])
    }

    /// `e_i`, the first-order index along axis `axis`.
    pub fn unit(dim: usize, axis: usize) -> Self {
        let mut a = vec![0; dim];
        a[axis] = 1;
        MultiIndex(a)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// `|α|`
    pub fn order(&self) -> usize {
        self.0.iter().map(|&a| a as usize).sum()
    }

    /// `α! = Π αⁱ!`
    pub fn factorial(&self) -> u64 {
        self.0.iter().map(|&a| (1..=a as u64).product::<u64>()).product()
    }

    /// Column label `c_a1_a2_..._an`.
    pub fn label(&self) -> String {
        let parts: Vec<String> = self.0.iter().map(u32::to_string).collect();
        format!("c_{}", parts.join("_"))
    }

    pub fn parse_label(s: &str) -> Option<Self> {
        let rest = s.strip_prefix("c_")?;
        rest.split('_').map(|p| p.parse().ok()).collect::<Option<Vec<u32>>>().map(MultiIndex)
    }

    /// `x^α`
    pub fn monomial<T: Scalar>(&self, x: &[T]) -> T {
        self.0.iter().zip(x).fold(T::one(), |acc, (&a, &xi)| acc * xi.powi(a as i32))
    }
}

/// Size of the basis of `Π_m^n`: `(m+n)! / (m! n!)`.
pub fn basis_size(dim: usize, order: usize) -> usize {
    // binomial(m + n, n) without factorial overflow
    let mut acc: u128 = 1;
    for i in 1..=dim as u128 {
        acc = acc * (order as u128 + i) / i;
    }
    acc as usize
}

/// All multi-indices with `|α| ≤ m`, graded by order, then lexicographic
/// descending in the leading exponents: `(0,0),(1,0),(0,1),(2,0),(1,1),(0,2)`.
pub fn enumerate_multi_indices(dim: usize, order: usize) -> Vec<MultiIndex> {
    fn fill(dim: usize, remaining: u32, prefix: &mut Vec<u32>, out: &mut Vec<MultiIndex>) {
        if prefix.len() + 1 == dim {
            prefix.push(remaining);
            out.push(MultiIndex(prefix.clone()));
            prefix.pop();
            return;
        }
        for a in (0..=remaining).rev() {
            prefix.push(a);
            fill(dim, remaining - a, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::with_capacity(basis_size(dim, order));
    for d in 0..=order as u32 {
        fill(dim, d, &mut Vec::with_capacity(dim), &mut out);
    }
    out
}

/// Wendland-type weight `(1 − t/D)⁴ (4t/D + 1)`, zero beyond the support.
pub fn weight<T: Scalar>(t: T, support: T) -> Result<T, MlsError> {
    if !(support > T::zero()) {
        return Err(MlsError::NonpositiveSupport(support.as_f64()));
    }
    let r = t / support;
    if r >= T::one() {
        return Ok(T::zero());
    }
    let s = T::one() - r;
    Ok(s * s * s * s * (T::lit(4.0) * r + T::one()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlsConfig {
    /// Neighbours per stencil, the query point included.
    pub k: usize,
    /// Polynomial order `m`.
    pub order: usize,
    pub weight_margin: f64,
    pub ridge: f64,
    /// Use `D_j = margin · max_k ‖x_j − x_{j,k}‖` instead of one global radius.
    pub per_point_support: bool,
    /// Fail on degenerate stencils instead of regularising them.
    pub strict: bool,
}

impl Default for MlsConfig {
    fn default() -> Self {
        Self { k: 20, order: 2, weight_margin: 1.1, ridge: 1e-10, per_point_support: false, strict: false }
    }
}

impl MlsConfig {
    pub fn new(k: usize, order: usize) -> Self {
        Self { k, order, ..Self::default() }
    }

    pub fn validate(&self, dim: usize) -> Result<(), MlsError> {
        let basis = basis_size(dim, self.order);
        if self.k < basis {
            return Err(MlsError::BasisTooLarge { k: self.k, basis });
        }
        if !(self.weight_margin > 1.0) {
            return Err(MlsError::BadMargin(self.weight_margin));
        }
        if !(self.ridge >= 0.0) {
            return Err(MlsError::BadRidge(self.ridge));
        }
        Ok(())
    }
}

/// Solution of one local fit.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalJet<T> {
    /// Coefficients `c_α` in [`enumerate_multi_indices`] order.
    pub coeffs: Vec<T>,
    /// Set when the stencil needed regularisation or the pseudo-inverse.
    pub flagged: bool,
}

/// Local polynomial fit at cloud point `j` with support radius `support`.
pub fn fit_local_jet<T: Scalar>(
    cloud: &PointCloud<T>,
    index: &SpatialIndex<T>,
    j: usize,
    cfg: &MlsConfig,
    support: T,
) -> Result<LocalJet<T>, MlsError> {
    cfg.validate(cloud.dim())?;
    let indices = enumerate_multi_indices(cloud.dim(), cfg.order);
    let neighbors = index.knn(j, cfg.k).map_err(|source| MlsError::Geometry { point: Some(j), source })?;
    fit_with_neighbors(cloud, j, &neighbors, &indices, cfg, support)
}

fn fit_with_neighbors<T: Scalar>(
    cloud: &PointCloud<T>,
    j: usize,
    neighbors: &[crate::geometry::Neighbor<T>],
    indices: &[MultiIndex],
    cfg: &MlsConfig,
    support: T,
) -> Result<LocalJet<T>, MlsError> {
    if !(support > T::zero()) {
        return Err(MlsError::NonpositiveSupport(support.as_f64()));
    }
    let n = indices.len();
    let dim = cloud.dim();
    let center = cloud.point(j);
    let radius = neighbors.iter().map(|nb| nb.distance).fold(T::zero(), T::max);
    let scale = if radius > T::zero() { radius } else { T::one() };

    let mut e = vec![T::zero(); n * n];
    let mut rhs = vec![T::zero(); n];
    let mut b = vec![T::zero(); n];
    let mut local = vec![T::zero(); dim];
    for nb in neighbors {
        let w = weight(nb.distance, support)?;
        if w == T::zero() {
            continue;
        }
        let p = cloud.point(nb.index);
        for d in 0..dim {
            local[d] = (p[d] - center[d]) / scale;
        }
        for (bi, alpha) in b.iter_mut().zip(indices) {
            *bi = alpha.monomial(&local);
        }
        let u = cloud.value(nb.index);
        for r in 0..n {
            let wb = w * b[r];
            rhs[r] += wb * u;
            for c in r..n {
                e[r * n + c] += wb * b[c];
            }
        }
    }
    for r in 0..n {
        for c in 0..r {
            e[r * n + c] = e[c * n + r];
        }
    }

    let (scaled, flagged) = solve_normal(&e, &rhs, n, cfg).ok_or(MlsError::SingularNormalMatrix { point: j })?;
    let coeffs: Vec<T> = scaled
        .iter()
        .zip(indices)
        .map(|(&c, alpha)| c / scale.powi(alpha.order() as i32))
        .collect();
    if coeffs.iter().any(|c| !c.is_finite()) {
        return Err(MlsError::NonFinite { point: j });
    }
    Ok(LocalJet { coeffs, flagged })
}

fn condition<T: Scalar>(a: &[T], n: usize) -> T {
    let (vals, _) = symmetric_eigen(a, n);
    let max = vals.iter().copied().fold(T::neg_infinity(), T::max);
    let min = vals.iter().copied().fold(T::infinity(), T::min);
    if min > T::zero() {
        max / min
    } else {
        T::infinity()
    }
}

/// Cholesky on well-conditioned systems, ridge then pseudo-inverse otherwise.
/// `None` means the stencil is degenerate and `cfg.strict` forbids rescue.
fn solve_normal<T: Scalar>(e: &[T], rhs: &[T], n: usize, cfg: &MlsConfig) -> Option<(Vec<T>, bool)> {
    let max_cond = T::lit(MAX_CONDITION);
    if condition(e, n) <= max_cond {
        let mut l = e.to_vec();
        if cholesky_in_place(&mut l, n) {
            return Some((cholesky_solve(&l, n, rhs), false));
        }
    }
    if cfg.strict {
        return None;
    }
    let trace: T = (0..n).map(|i| e[i * n + i]).sum();
    let lambda = T::lit(cfg.ridge) * trace / T::from_usize_lossy(n);
    let mut ridged = e.to_vec();
    for i in 0..n {
        ridged[i * n + i] += lambda;
    }
    if lambda > T::zero() && condition(&ridged, n) <= max_cond {
        let mut l = ridged.clone();
        if cholesky_in_place(&mut l, n) {
            return Some((cholesky_solve(&l, n, rhs), true));
        }
    }
    Some((pseudo_inverse_solve(&ridged, n, rhs, T::lit(PINV_CUTOFF)), true))
}

/// Per-point MLS coefficients over a whole cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct JetField<T> {
    dim: usize,
    order: usize,
    indices: Vec<MultiIndex>,
    coords: Vec<T>,
    coeffs: Vec<T>,
    /// Points whose stencil needed regularisation.
    pub flagged: Vec<usize>,
    /// `min_{j,k} ‖x_j − x_{j,k}‖` over non-self neighbours; `None` when `K = 1`.
    pub h: Option<T>,
    /// Global support radius `D` (the largest one in per-point mode).
    pub support: T,
}

impl<T: Scalar> JetField<T> {
    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn indices(&self) -> &[MultiIndex] {
        &self.indices
    }

    pub fn point(&self, j: usize) -> &[T] {
        &self.coords[j * self.dim..(j + 1) * self.dim]
    }

    /// Raw coefficient vector `c_j`.
    pub fn coeffs(&self, j: usize) -> &[T] {
        let n = self.indices.len();
        &self.coeffs[j * n..(j + 1) * n]
    }

    /// `c_{j,α}`.
    pub fn coefficient(&self, j: usize, alpha: &MultiIndex) -> Result<T, MlsError> {
        let pos = self.position(alpha)?;
        Ok(self.coeffs(j)[pos])
    }

    fn position(&self, alpha: &MultiIndex) -> Result<usize, MlsError> {
        if alpha.dim() != self.dim {
            return Err(MlsError::IndexDim { expected: self.dim, got: alpha.dim() });
        }
        if alpha.order() > self.order {
            return Err(MlsError::OrderTooHigh { order: alpha.order(), max: self.order });
        }
        Ok(self.indices.iter().position(|a| a == alpha).expect("enumerated"))
    }

    /// Derivative estimate `D^α u(x_j) ≈ α! c_{j,α}`.
    pub fn derivative_at(&self, j: usize, alpha: &MultiIndex) -> Result<T, MlsError> {
        let c = self.coefficient(j, alpha)?;
        Ok(c * T::lit(alpha.factorial() as f64))
    }

    /// First-order derivative estimates at point `j`.
    pub fn gradient(&self, j: usize) -> Vec<T> {
        (0..self.dim)
            .map(|axis| self.derivative_at(j, &MultiIndex::unit(self.dim, axis)).unwrap_or_else(|_| T::nan()))
            .collect()
    }

    /// Columns `j, x1..xn, c_…` with one row per point.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), MlsError> {
        let err = |e: csv::Error| MlsError::Csv(e.to_string());
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["j".to_string()];
        header.extend((1..=self.dim).map(|i| format!("x{i}")));
        header.extend(self.indices.iter().map(MultiIndex::label));
        w.write_record(&header).map_err(err)?;
        for j in 0..self.len() {
            let mut row = vec![j.to_string()];
            row.extend(self.point(j).iter().map(|x| fmt_f64(x.as_f64())));
            row.extend(self.coeffs(j).iter().map(|c| fmt_f64(c.as_f64())));
            w.write_record(&row).map_err(err)?;
        }
        w.flush().map_err(|e| MlsError::Csv(e.to_string()))
    }

    /// Reads a jet table written by [`JetField::write_csv`]. Only the table
    /// columns are restored; `flagged`, `h` and `support` are not stored.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, MlsError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers().map_err(|e| MlsError::Csv(e.to_string()))?.clone();
        let dim = headers.iter().filter(|h| h.starts_with('x')).count();
        let indices: Vec<MultiIndex> = headers
            .iter()
            .skip(1 + dim)
            .map(|h| MultiIndex::parse_label(h).ok_or_else(|| MlsError::Csv(format!("bad column {h:?}"))))
            .collect::<Result<_, _>>()?;
        let order = indices.iter().map(MultiIndex::order).max().unwrap_or(0);
        if dim == 0 || indices != enumerate_multi_indices(dim, order) {
            return Err(MlsError::Csv("columns do not form a complete graded basis".into()));
        }
        let mut coords = Vec::new();
        let mut coeffs = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| MlsError::Csv(e.to_string()))?;
            for (col, field) in rec.iter().enumerate().skip(1) {
                let x: f64 = field.parse().map_err(|_| MlsError::Csv(format!("cannot parse {field:?}")))?;
                if col <= dim {
                    coords.push(T::lit(x));
                } else {
                    coeffs.push(T::lit(x));
                }
            }
        }
        Ok(Self { dim, order, indices, coords, coeffs, flagged: Vec::new(), h: None, support: T::zero() })
    }
}

/// Runs the full estimator: KNN stencils, global support radius, one local
/// fit per point. Points are processed in parallel; output is index-ordered.
pub fn estimate_derivatives<T: Scalar>(cloud: &PointCloud<T>, cfg: &MlsConfig) -> Result<JetField<T>, MlsError> {
    cfg.validate(cloud.dim())?;
    let index = build_index(cloud)?;
    let stencils: Vec<_> = (0..cloud.len())
        .into_par_iter()
        .map(|j| index.knn(j, cfg.k).map_err(|source| MlsError::Geometry { point: Some(j), source }))
        .collect::<Result<_, _>>()?;

    let local_max = |st: &[crate::geometry::Neighbor<T>]| st.iter().map(|n| n.distance).fold(T::zero(), T::max);
    let global_max = stencils.iter().map(|s| local_max(s)).fold(T::zero(), T::max);
    let margin = T::lit(cfg.weight_margin);
    // a stencil made of the query point alone only ever evaluates ω(0)
    let positive = |d: T| if d > T::zero() { d } else { T::one() };
    let global_support = positive(margin * global_max);

    let h = stencils
        .iter()
        .flat_map(|s| s.iter().skip(1).map(|n| n.distance))
        .fold(None, |acc: Option<T>, d| Some(acc.map_or(d, |a| a.min(d))));

    let indices = enumerate_multi_indices(cloud.dim(), cfg.order);
    let jets: Vec<LocalJet<T>> = stencils
        .par_iter()
        .enumerate()
        .map(|(j, st)| {
            let support = if cfg.per_point_support { positive(margin * local_max(st)) } else { global_support };
            fit_with_neighbors(cloud, j, st, &indices, cfg, support)
        })
        .collect::<Result<_, _>>()?;

    let flagged = jets.iter().enumerate().filter(|(_, jet)| jet.flagged).map(|(j, _)| j).collect();
    Ok(JetField {
        dim: cloud.dim(),
        order: cfg.order,
        indices,
        coords: cloud.coords().to_vec(),
        coeffs: jets.into_iter().flat_map(|j| j.coeffs).collect(),
        flagged,
        h,
        support: global_support,
    })
}

/// Analytic function with exact partial derivatives, used as ground truth.
pub trait TestFunction: Send + Sync {
    fn name(&self) -> String;
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn derivative(&self, x: &[f64], alpha: &MultiIndex) -> f64;
}

/// `sin(x¹) cos(x²)`, constant along any further axes.
#[derive(Debug, Clone, Copy)]
pub struct SinCos;

fn sin_derivative(x: f64, k: u32) -> f64 {
    (x + k as f64 * std::f64::consts::FRAC_PI_2).sin()
}

fn cos_derivative(x: f64, k: u32) -> f64 {
    (x + k as f64 * std::f64::consts::FRAC_PI_2).cos()
}

impl TestFunction for SinCos {
    fn name(&self) -> String {
        "sincos".into()
    }
    fn dim(&self) -> usize {
        2
    }
    fn value(&self, x: &[f64]) -> f64 {
        x[0].sin() * x[1].cos()
    }
    fn derivative(&self, x: &[f64], alpha: &MultiIndex) -> f64 {
        if alpha.0.iter().skip(2).any(|&a| a > 0) {
            return 0.0;
        }
        sin_derivative(x[0], alpha.0[0]) * cos_derivative(x[1], alpha.0[1])
    }
}

/// `sin(x¹)` in one dimension.
#[derive(Debug, Clone, Copy)]
pub struct Sine1d;

impl TestFunction for Sine1d {
    fn name(&self) -> String {
        "sin".into()
    }
    fn dim(&self) -> usize {
        1
    }
    fn value(&self, x: &[f64]) -> f64 {
        x[0].sin()
    }
    fn derivative(&self, x: &[f64], alpha: &MultiIndex) -> f64 {
        sin_derivative(x[0], alpha.0[0])
    }
}

/// `Σ a_β x^β`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    pub dim: usize,
    pub terms: Vec<(f64, MultiIndex)>,
}

impl Polynomial {
    pub fn degree(&self) -> usize {
        self.terms.iter().map(|(_, b)| b.order()).max().unwrap_or(0)
    }

    /// Random dense polynomial of the given degree with coefficients in [-1, 1].
    pub fn random<R: Rng>(dim: usize, degree: usize, rng: &mut R) -> Self {
        let terms = enumerate_multi_indices(dim, degree)
            .into_iter()
            .map(|b| (rng.random_range(-1.0..1.0), b))
            .collect();
        Self { dim, terms }
    }
}

impl TestFunction for Polynomial {
    fn name(&self) -> String {
        format!("poly{}", self.degree())
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|(a, b)| a * b.monomial(x)).sum()
    }
    fn derivative(&self, x: &[f64], alpha: &MultiIndex) -> f64 {
        let mut total = 0.0;
        'terms: for (a, beta) in &self.terms {
            let mut coef = *a;
            let mut rest = 1.0;
            for ((&bi, &ai), &xi) in beta.0.iter().zip(&alpha.0).zip(x) {
                if ai > bi {
                    continue 'terms;
                }
                // falling factorial b (b-1) ... (b-a+1)
                coef *= ((bi - ai + 1)..=bi).map(f64::from).product::<f64>();
                rest *= xi.powi((bi - ai) as i32);
            }
            total += coef * rest;
        }
        total
    }
}

/// Samples `count` uniform points in the box and evaluates `u` there.
pub fn sample_cloud(
    u: &dyn TestFunction,
    domain: &[(f64, f64)],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PointCloud<f64>, MlsError> {
    if domain.len() != u.dim() {
        return Err(MlsError::DomainDim { expected: u.dim(), got: domain.len() });
    }
    let dim = domain.len();
    let mut coords = Vec::with_capacity(count * dim);
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        let start = coords.len();
        for &(lo, hi) in domain {
            coords.push(rng.random_range(lo..hi));
        }
        values.push(u.value(&coords[start..]));
    }
    Ok(PointCloud::from_flat(dim, coords, values)?)
}

/// Mean over points of `Σ_{|α|=order} |α! c_{j,α} − D^α u(x_j)|²`.
pub fn derivative_mse(jet: &JetField<f64>, u: &dyn TestFunction, order: usize) -> f64 {
    let alphas: Vec<&MultiIndex> = jet.indices().iter().filter(|a| a.order() == order).collect();
    let total: f64 = (0..jet.len())
        .map(|j| {
            let x = jet.point(j);
            alphas
                .iter()
                .map(|a| {
                    let d = jet.derivative_at(j, a).expect("order within jet") - u.derivative(x, a);
                    d * d
                })
                .sum::<f64>()
        })
        .sum();
    total / jet.len() as f64
}

/// Max absolute error over all derivatives `|α| ≤ m` at all points.
pub fn max_derivative_error(jet: &JetField<f64>, u: &dyn TestFunction) -> f64 {
    let mut worst = 0.0f64;
    for j in 0..jet.len() {
        for a in jet.indices() {
            let d = jet.derivative_at(j, a).expect("in range") - u.derivative(jet.point(j), a);
            worst = worst.max(d.abs());
        }
    }
    worst
}

/// Errors below this mean-squared level count as exact reproduction.
pub const EXACT_MSE: f64 = 1e-20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub resolution: usize,
    pub h: f64,
    pub order: usize,
    pub mse: f64,
    /// Least-squares slope of `log mse` against `log h` over the rows of this
    /// order seen so far; `None` for the first row.
    pub slope_running: Option<f64>,
    /// Every row of this order so far is at round-off level.
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub function: String,
    pub seed: u64,
    pub config: MlsConfig,
    pub rows: Vec<ConvergenceRow>,
}

impl ConvergenceTable {
    pub fn rows_for(&self, order: usize) -> impl Iterator<Item = &ConvergenceRow> {
        self.rows.iter().filter(move |r| r.order == order)
    }

    /// Final fitted slope for one derivative order.
    pub fn slope(&self, order: usize) -> Option<f64> {
        self.rows_for(order).last().and_then(|r| r.slope_running)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), MlsError> {
        let err = |e: csv::Error| MlsError::Csv(e.to_string());
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["resolution", "h", "order", "mse", "slope_running"]).map_err(err)?;
        for r in &self.rows {
            let slope = if r.exact {
                "exact".to_string()
            } else {
                r.slope_running.map(fmt_f64).unwrap_or_default()
            };
            w.write_record([r.resolution.to_string(), fmt_f64(r.h), r.order.to_string(), fmt_f64(r.mse), slope])
                .map_err(err)?;
        }
        w.flush().map_err(|e| MlsError::Csv(e.to_string()))
    }
}

/// Ordinary least-squares slope of `ys` against `xs`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

/// Empirical convergence of the estimator on uniform random clouds of
/// increasing size. Each resolution draws from its own ChaCha stream of
/// `seed`, so tables are reproducible bit for bit.
pub fn convergence_study(
    u: &dyn TestFunction,
    domain: &[(f64, f64)],
    resolutions: &[usize],
    cfg: &MlsConfig,
    seed: u64,
) -> Result<ConvergenceTable, MlsError> {
    if resolutions.len() < 3 || resolutions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MlsError::BadResolutions);
    }
    cfg.validate(u.dim())?;
    let mut rows = Vec::new();
    let mut logs: Vec<Vec<(f64, f64)>> = vec![Vec::new(); cfg.order + 1];
    let mut exact = vec![true; cfg.order + 1];
    for (stream, &res) in resolutions.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream as u64);
        let cloud = sample_cloud(u, domain, res, &mut rng)?;
        let jet = estimate_derivatives(&cloud, cfg)?;
        let h = jet.h.unwrap_or(0.0);
        for order in 0..=cfg.order {
            let mse = derivative_mse(&jet, u, order);
            exact[order] &= mse < EXACT_MSE;
            if mse > 0.0 && h > 0.0 {
                logs[order].push((h.ln(), mse.ln()));
            }
            let (xs, ys): (Vec<f64>, Vec<f64>) = logs[order].iter().copied().unzip();
            rows.push(ConvergenceRow {
                resolution: res,
                h,
                order,
                mse,
                slope_running: fit_slope(&xs, &ys),
                exact: exact[order],
            });
        }
    }
    Ok(ConvergenceTable { function: u.name(), seed, config: cfg.clone(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(nx: usize, f: impl Fn(f64, f64) -> f64) -> PointCloud<f64> {
        let mut pts = Vec::new();
        let mut vals = Vec::new();
        for i in 0..nx {
            for j in 0..nx {
                let (x, y) = (i as f64 / (nx - 1) as f64, j as f64 / (nx - 1) as f64);
                pts.push(vec![x, y]);
                vals.push(f(x, y));
            }
        }
        PointCloud::new(pts, vals).unwrap()
    }

    fn random_cloud(n: usize, dim: usize, seed: u64, f: impl Fn(&[f64]) -> f64) -> PointCloud<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords: Vec<f64> = (0..n * dim).map(|_| rng.random::<f64>()).collect();
        let vals = coords.chunks(dim).map(&f).collect();
        PointCloud::from_flat(dim, coords, vals).unwrap()
    }

    #[test]
    fn multi_index_enumeration() {
        let idx = enumerate_multi_indices(2, 2);
        let expect: Vec<MultiIndex> = [[0, 0], [1, 0], [0, 1], [2, 0], [1, 1], [0, 2]]
            .iter()
            .map(|a| MultiIndex(a.to_vec()))
            .collect();
        assert_eq!(idx, expect);
        assert_eq!(enumerate_multi_indices(1, 0), vec![MultiIndex(vec![0])]);
        assert_eq!(enumerate_multi_indices(3, 4).len(), 35);
        assert_eq!(basis_size(3, 4), 35);
        for n in 1..5 {
            for m in 0..6 {
                assert_eq!(enumerate_multi_indices(n, m).len(), basis_size(n, m));
            }
        }
    }

    #[test]
    fn factorial_and_labels() {
        let a = MultiIndex(vec![8, 0, 3]);
        assert_eq!(a.factorial(), 40320 * 6);
        assert_eq!(a.label(), "c_8_0_3");
        assert_eq!(MultiIndex::parse_label("c_8_0_3"), Some(a));
    }

    #[test]
    fn weight_values() {
        assert_eq!(weight(0.0, 2.0).unwrap(), 1.0);
        assert_eq!(weight(2.0, 2.0).unwrap(), 0.0);
        assert!((weight(1.0f64, 2.0).unwrap() - 0.1875).abs() < 1e-15);
        assert_eq!(weight(3.0, 2.0).unwrap(), 0.0);
        assert_eq!(weight(0.5, 0.0), Err(MlsError::NonpositiveSupport(0.0)));
    }

    #[test]
    fn weight_strictly_decreasing() {
        let d = 1.7;
        let vals: Vec<f64> = (0..=1000).map(|i| weight(d * i as f64 / 1000.0, d).unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn constants_are_reproduced() {
        let cloud = random_cloud(200, 2, 1, |_| 3.0);
        let cfg = MlsConfig::new(12, 2);
        let index = build_index(&cloud).unwrap();
        for j in [0, 17, 199] {
            let jet = fit_local_jet(&cloud, &index, j, &cfg, 1.0).unwrap();
            assert!((jet.coeffs[0] - 3.0).abs() < 1e-10);
            assert!(jet.coeffs[1..].iter().all(|c| c.abs() < 1e-10), "{:?}", jet.coeffs);
        }
    }

    #[test]
    fn linear_and_quadratic_reproduced() {
        let cloud = random_cloud(300, 2, 2, |x| x[0]);
        let jet = estimate_derivatives(&cloud, &MlsConfig::new(20, 2)).unwrap();
        for j in 0..jet.len() {
            let c = jet.coeffs(j);
            assert!((c[1] - 1.0).abs() < 1e-9);
            assert!((c[0] - jet.point(j)[0]).abs() < 1e-10);
            assert!(c[2..].iter().all(|v| v.abs() < 1e-8));
        }
        let cloud = random_cloud(300, 2, 3, |x| x[0] * x[0]);
        let jet = estimate_derivatives(&cloud, &MlsConfig::new(20, 2)).unwrap();
        let a20 = MultiIndex(vec![2, 0]);
        for j in 0..jet.len() {
            assert!((jet.coefficient(j, &a20).unwrap() - 1.0).abs() < 1e-8);
            assert!((jet.derivative_at(j, &a20).unwrap() - 2.0).abs() < 1e-8);
        }
    }

    /// Oracle: solve the weighted normal equations in raw (unscaled)
    /// coordinates by Gaussian elimination and compare.
    #[test]
    fn matches_direct_normal_equation_solve() {
        let cloud = random_cloud(60, 2, 9, |x| (x[0] * 3.0).sin() + x[1] * x[1] * x[0]);
        let cfg = MlsConfig::new(10, 2);
        let index = build_index(&cloud).unwrap();
        let support = 0.9;
        let idx = enumerate_multi_indices(2, 2);
        for j in [0, 5, 33] {
            let got = fit_local_jet(&cloud, &index, j, &cfg, support).unwrap().coeffs;
            let nb = index.knn(j, 10).unwrap();
            let n = idx.len();
            let mut a = vec![vec![0.0; n + 1]; n];
            for k in &nb {
                let w = (1.0 - k.distance / support).powi(4) * (4.0 * k.distance / support + 1.0);
                let d: Vec<f64> = cloud.point(k.index).iter().zip(cloud.point(j)).map(|(p, c)| p - c).collect();
                let b: Vec<f64> = idx.iter().map(|al| al.monomial(&d)).collect();
                for r in 0..n {
                    for c in 0..n {
                        a[r][c] += w * b[r] * b[c];
                    }
                    a[r][n] += w * b[r] * cloud.value(k.index);
                }
            }
            for col in 0..n {
                let piv = (col..n).max_by(|&x, &y| a[x][col].abs().partial_cmp(&a[y][col].abs()).unwrap()).unwrap();
                a.swap(col, piv);
                for r in 0..n {
                    if r != col {
                        let f = a[r][col] / a[col][col];
                        let pivot = a[col].clone();
                        for (x, p) in a[r][col..].iter_mut().zip(&pivot[col..]) {
                            *x -= f * p;
                        }
                    }
                }
            }
            for r in 0..n {
                let expect = a[r][n] / a[r][r];
                assert!((got[r] - expect).abs() < 1e-7 * (1.0 + expect.abs()), "{r}: {} vs {expect}", got[r]);
            }
        }
    }

    #[test]
    fn grid_plane_first_derivatives() {
        let cloud = grid(5, |x, y| x + y);
        let jet = estimate_derivatives(&cloud, &MlsConfig::new(6, 1)).unwrap();
        for j in 0..jet.len() {
            let g = jet.gradient(j);
            assert!((g[0] - 1.0).abs() < 1e-10 && (g[1] - 1.0).abs() < 1e-10, "{j}: {g:?}");
        }
        assert!((jet.h.unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn single_point_order_zero() {
        let cloud = PointCloud::new(vec![vec![0.3]], vec![4.5]).unwrap();
        let jet = estimate_derivatives(&cloud, &MlsConfig::new(1, 0)).unwrap();
        assert_eq!(jet.coeffs(0), &[4.5]);
        assert_eq!(jet.h, None);
    }

    #[test]
    fn basis_constraint() {
        let cloud = grid(4, |x, _| x);
        let err = estimate_derivatives(&cloud, &MlsConfig::new(3, 2)).unwrap_err();
        assert_eq!(err, MlsError::BasisTooLarge { k: 3, basis: 6 });
        assert!(err.to_string().contains("K >= I"));
    }

    #[test]
    fn derivative_order_checks() {
        let cloud = random_cloud(50, 2, 4, |x| x[0]);
        let jet = estimate_derivatives(&cloud, &MlsConfig::new(8, 1)).unwrap();
        assert_eq!(
            jet.derivative_at(0, &MultiIndex(vec![2, 0])),
            Err(MlsError::OrderTooHigh { order: 2, max: 1 })
        );
        assert!(matches!(jet.derivative_at(0, &MultiIndex(vec![1])), Err(MlsError::IndexDim { .. })));
    }

    #[test]
    fn collinear_stencil_is_flagged_or_rejected() {
        // all points on the x-axis: a 2-D quadratic basis is rank deficient
        let pts: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64 * 0.1, 0.0]).collect();
        let vals = pts.iter().map(|p| p[0] * p[0]).collect();
        let cloud = PointCloud::new(pts, vals).unwrap();
        let jet = estimate_derivatives(&cloud, &MlsConfig::new(8, 2)).unwrap();
        assert_eq!(jet.flagged.len(), 12);
        for j in 0..jet.len() {
            assert!(jet.coeffs(j).iter().all(|c| c.is_finite()));
            assert!((jet.derivative_at(j, &MultiIndex(vec![1, 0])).unwrap() - 2.0 * jet.point(j)[0]).abs() < 1e-4);
        }
        let strict = MlsConfig { strict: true, ..MlsConfig::new(8, 2) };
        assert!(matches!(
            estimate_derivatives(&cloud, &strict),
            Err(MlsError::SingularNormalMatrix { .. })
        ));
    }

    #[test]
    fn sine_derivative_converges_in_1d() {
        let mut errs = Vec::new();
        for n in [50usize, 200, 800] {
            let pts: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 / n as f64 * 3.0]).collect();
            let vals = pts.iter().map(|p| p[0].sin()).collect();
            let cloud = PointCloud::new(pts, vals).unwrap();
            let jet = estimate_derivatives(&cloud, &MlsConfig::new(5, 2)).unwrap();
            let e = (0..n)
                .map(|j| (jet.derivative_at(j, &MultiIndex(vec![1])).unwrap() - jet.point(j)[0].cos()).abs())
                .fold(0.0, f64::max);
            errs.push(e);
        }
        assert!(errs[0] > errs[1] && errs[1] > errs[2]);
        assert!(errs[2] < 1e-5);
    }

    #[test]
    fn per_point_support_still_exact() {
        let cloud = random_cloud(100, 2, 8, |x| 1.0 + 2.0 * x[0] - x[1]);
        let cfg = MlsConfig { per_point_support: true, ..MlsConfig::new(6, 1) };
        let jet = estimate_derivatives(&cloud, &cfg).unwrap();
        for j in 0..jet.len() {
            let g = jet.gradient(j);
            assert!((g[0] - 2.0).abs() < 1e-9 && (g[1] + 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn jet_csv_round_trip() {
        let cloud = random_cloud(25, 2, 5, |x| x[0] * x[1]);
        let jet = estimate_derivatives(&cloud, &MlsConfig::new(8, 2)).unwrap();
        let mut buf = Vec::new();
        jet.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("j,x1,x2,c_0_0,c_1_0,c_0_1,c_2_0,c_1_1,c_0_2\n"));
        let back = JetField::<f64>::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.coeffs, jet.coeffs);
        assert_eq!(back.coords, jet.coords);
    }

    #[test]
    fn polynomial_derivatives() {
        // p = 2 x y² - x³ + 4
        let p = Polynomial {
            dim: 2,
            terms: vec![
                (2.0, MultiIndex(vec![1, 2])),
                (-1.0, MultiIndex(vec![3, 0])),
                (4.0, MultiIndex(vec![0, 0])),
            ],
        };
        let x = [0.5, -2.0];
        assert!((p.value(&x) - (2.0 * 0.5 * 4.0 - 0.125 + 4.0)).abs() < 1e-14);
        assert!((p.derivative(&x, &MultiIndex(vec![1, 0])) - (2.0 * 4.0 - 3.0 * 0.25)).abs() < 1e-14);
        assert!((p.derivative(&x, &MultiIndex(vec![1, 1])) - (4.0 * -2.0)).abs() < 1e-14);
        assert!((p.derivative(&x, &MultiIndex(vec![3, 0])) + 6.0).abs() < 1e-14);
        assert_eq!(p.derivative(&x, &MultiIndex(vec![4, 0])), 0.0);
    }

    #[test]
    fn study_rejects_bad_resolutions() {
        let cfg = MlsConfig::new(20, 2);
        let dom = [(0.0, 1.0), (0.0, 1.0)];
        assert_eq!(convergence_study(&SinCos, &dom, &[100, 200], &cfg, 0), Err(MlsError::BadResolutions));
        assert_eq!(convergence_study(&SinCos, &dom, &[100, 300, 200], &cfg, 0), Err(MlsError::BadResolutions));
    }

    #[test]
    fn study_polynomial_is_exact_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Polynomial::random(2, 2, &mut rng);
        let cfg = MlsConfig::new(12, 2);
        let dom = [(0.0, 1.0), (0.0, 1.0)];
        let a = convergence_study(&p, &dom, &[100, 200, 400], &cfg, 3).unwrap();
        assert!(a.rows.iter().all(|r| r.mse < 1e-20 && r.exact));
        let b = convergence_study(&p, &dom, &[100, 200, 400], &cfg, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fit_slope_line() {
        assert_eq!(fit_slope(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]), Some(2.0));
        assert_eq!(fit_slope(&[1.0], &[1.0]), None);
    }

    #[test]
    fn works_in_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let coords: Vec<f32> = (0..200).map(|_| rng.random::<f32>()).collect();
        let vals = coords.chunks(2).map(|x| 1.0 + x[0] - 0.5 * x[1]).collect();
        let cloud = PointCloud::from_flat(2, coords, vals).unwrap();
        let jet = estimate_derivatives(&cloud, &MlsConfig::new(8, 1)).unwrap();
        let g = jet.gradient(10);
        assert!((g[0] - 1.0).abs() < 1e-3 && (g[1] + 0.5).abs() < 1e-3);
    }
}
