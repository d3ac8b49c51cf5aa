//! Kernel-form operator network with value and input-gradient outputs.
//!
//! Both factor networks are ReLU MLPs. The forward pass carries the Jacobian
//! with respect to the input alongside the activations (forward-mode tangents),
//! and the backward pass differentiates through both, so the derivative loss
//! gets an exact parameter gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

use super::TrainError;

/// Layer widths `[input, hidden…, output]` of a fully connected ReLU network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub sizes: Vec<usize>,
}

impl MlpShape {
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        Self { sizes }
    }

    pub fn input(&self) -> usize {
        self.sizes[0]
    }

    pub fn output(&self) -> usize {
        *self.sizes.last().expect("nonempty shape")
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Offset of layer `l`'s weight block; its bias follows the weights.
    fn offset(&self, l: usize) -> usize {
        self.sizes.windows(2).take(l).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Activations and input tangents of one MLP over a set of points.
///
/// `acts[l]` is `P × sizes[l]` (post-activation for hidden layers, raw for the
/// output). `tans[l]` is `P × in × sizes[l]`.
#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    points: usize,
    acts: Vec<Vec<T>>,
    tans: Vec<Vec<T>>,
}

impl<T: Scalar> MlpCache<T> {
    pub fn output(&self) -> &[T] {
        self.acts.last().expect("nonempty")
    }

    /// `P × in × out` input Jacobian of the output.
    pub fn output_tangent(&self) -> &[T] {
        self.tans.last().expect("nonempty")
    }

    pub fn points(&self) -> usize {
        self.points
    }
}

pub fn mlp_forward<T: Scalar>(shape: &MlpShape, params: &[T], xs: &[T], tangents: bool) -> MlpCache<T> {
    let n_in = shape.input();
    let points = xs.len() / n_in;
    let mut acts = vec![xs.to_vec()];
    let mut tans = Vec::new();
    if tangents {
        let mut t0 = vec![T::zero(); points * n_in * n_in];
        for p in 0..points {
            for d in 0..n_in {
                t0[(p * n_in + d) * n_in + d] = T::one();
            }
        }
        tans.push(t0);
    }
    for l in 0..shape.layers() {
        let (fan_in, fan_out) = (shape.sizes[l], shape.sizes[l + 1]);
        let off = shape.offset(l);
        let w = &params[off..off + fan_in * fan_out];
        let b = &params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
        let hidden = l + 1 < shape.layers();
        let prev = &acts[l];
        let mut next = vec![T::zero(); points * fan_out];
        for p in 0..points {
            let h = &prev[p * fan_in..(p + 1) * fan_in];
            let a = &mut next[p * fan_out..(p + 1) * fan_out];
            for o in 0..fan_out {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let mut s = b[o];
                for i in 0..fan_in {
                    s += row[i] * h[i];
                }
                a[o] = if hidden && s <= T::zero() { T::zero() } else { s };
            }
        }
        if tangents {
            let prev_t = &tans[l];
            let mut next_t = vec![T::zero(); points * n_in * fan_out];
            for p in 0..points {
                let a = &next[p * fan_out..(p + 1) * fan_out];
                for d in 0..n_in {
                    let t = &prev_t[(p * n_in + d) * fan_in..(p * n_in + d + 1) * fan_in];
                    let out = &mut next_t[(p * n_in + d) * fan_out..(p * n_in + d + 1) * fan_out];
                    for o in 0..fan_out {
                        if hidden && a[o] <= T::zero() {
                            continue;
                        }
                        let row = &w[o * fan_in..(o + 1) * fan_in];
                        let mut s = T::zero();
                        for i in 0..fan_in {
                            s += row[i] * t[i];
                        }
                        out[o] = s;
                    }
                }
            }
            tans.push(next_t);
        }
        acts.push(next);
    }
    MlpCache { points, acts, tans }
}

/// Accumulates into `grad` the parameter gradient for upstream adjoints of
/// the output (`P × out`) and, optionally, of the output tangent (`P × in × out`).
pub fn mlp_backward<T: Scalar>(
    shape: &MlpShape,
    params: &[T],
    cache: &MlpCache<T>,
    d_out: &[T],
    d_tan: Option<&[T]>,
    grad: &mut [T],
) {
    let n_in = shape.input();
    let points = cache.points;
    let mut da = d_out.to_vec();
    let mut dt = d_tan.map(<[T]>::to_vec);
    for l in (0..shape.layers()).rev() {
        let (fan_in, fan_out) = (shape.sizes[l], shape.sizes[l + 1]);
        let off = shape.offset(l);
        let w = &params[off..off + fan_in * fan_out];
        let (gw, gb) = grad[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
        let h = &cache.acts[l];
        for p in 0..points {
            let hp = &h[p * fan_in..(p + 1) * fan_in];
            let dap = &da[p * fan_out..(p + 1) * fan_out];
            for o in 0..fan_out {
                let g = dap[o];
                if g == T::zero() {
                    continue;
                }
                gb[o] += g;
                let row = &mut gw[o * fan_in..(o + 1) * fan_in];
                for i in 0..fan_in {
                    row[i] += g * hp[i];
                }
            }
        }
        if let Some(dt) = &dt {
            let t = &cache.tans[l];
            for p in 0..points {
                for d in 0..n_in {
                    let tp = &t[(p * n_in + d) * fan_in..(p * n_in + d + 1) * fan_in];
                    let dtp = &dt[(p * n_in + d) * fan_out..(p * n_in + d + 1) * fan_out];
                    for o in 0..fan_out {
                        let g = dtp[o];
                        if g == T::zero() {
                            continue;
                        }
                        let row = &mut gw[o * fan_in..(o + 1) * fan_in];
                        for i in 0..fan_in {
                            row[i] += g * tp[i];
                        }
                    }
                }
            }
        }
        if l == 0 {
            break;
        }
        // propagate to the previous (hidden) layer; the ReLU mask has zero derivative
        let act = &cache.acts[l];
        let mut da_prev = vec![T::zero(); points * fan_in];
        for p in 0..points {
            let dap = &da[p * fan_out..(p + 1) * fan_out];
            let out = &mut da_prev[p * fan_in..(p + 1) * fan_in];
            for o in 0..fan_out {
                let g = dap[o];
                if g == T::zero() {
                    continue;
                }
                let row = &w[o * fan_in..(o + 1) * fan_in];
                for i in 0..fan_in {
                    out[i] += g * row[i];
                }
            }
            let ap = &act[p * fan_in..(p + 1) * fan_in];
            for i in 0..fan_in {
                if ap[i] <= T::zero() {
                    out[i] = T::zero();
                }
            }
        }
        if let Some(dtv) = dt.as_mut() {
            let mut dt_prev = vec![T::zero(); points * n_in * fan_in];
            for p in 0..points {
                let ap = &act[p * fan_in..(p + 1) * fan_in];
                for d in 0..n_in {
                    let dtp = &dtv[(p * n_in + d) * fan_out..(p * n_in + d + 1) * fan_out];
                    let out = &mut dt_prev[(p * n_in + d) * fan_in..(p * n_in + d + 1) * fan_in];
                    for o in 0..fan_out {
                        let g = dtp[o];
                        if g == T::zero() {
                            continue;
                        }
                        let row = &w[o * fan_in..(o + 1) * fan_in];
                        for i in 0..fan_in {
                            out[i] += g * row[i];
                        }
                    }
                    for i in 0..fan_in {
                        if ap[i] <= T::zero() {
                            out[i] = T::zero();
                        }
                    }
                }
            }
            *dtv = dt_prev;
        }
        da = da_prev;
    }
}

/// `u(x) = (1/J̃) Σ_l Σ_ĩ φ^ĩ(x) ψ^ĩ(y_l) v(y_l)` with MLPs `φ: ℝⁿ → ℝ^Ĩ`
/// and `ψ: ℝ^{n_y} → ℝ^Ĩ`. Parameters are one flat vector, `φ` first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorNet<T> {
    pub phi: MlpShape,
    pub psi: MlpShape,
    pub params: Vec<T>,
}

impl<T: Scalar> OperatorNet<T> {
    /// He-normal weights and biases uniform in `±1/√fan_in`, so first-layer
    /// kinks of low-dimensional inputs are spread over the domain.
    pub fn new(query_dim: usize, sensor_dim: usize, hidden: &[usize], rank: usize, seed: u64) -> Self {
        let phi = MlpShape::new(query_dim, hidden, rank);
        let psi = MlpShape::new(sensor_dim, hidden, rank);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(phi.param_count() + psi.param_count());
        for shape in [&phi, &psi] {
            for w in shape.sizes.windows(2) {
                let std = (2.0 / w[0] as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                params.extend((0..w[0] * w[1]).map(|_| T::lit(normal.sample(&mut rng))));
                let bound = 1.0 / (w[0] as f64).sqrt();
                params.extend((0..w[1]).map(|_| T::lit(rng.random_range(-bound..bound))));
            }
        }
        Self { phi, psi, params }
    }

    pub fn rank(&self) -> usize {
        self.phi.output()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn query_dim(&self) -> usize {
        self.phi.input()
    }

    pub fn sensor_dim(&self) -> usize {
        self.psi.input()
    }

    pub fn phi_params(&self) -> &[T] {
        &self.params[..self.phi.param_count()]
    }

    pub fn psi_params(&self) -> &[T] {
        &self.params[self.phi.param_count()..]
    }

    /// Prediction and input gradient at one query point.
    pub fn forward(&self, sensors: &[T], v: &[T], x: &[T]) -> Result<(T, Vec<T>), TrainError> {
        let ny = self.sensor_dim();
        if x.len() != self.query_dim() {
            return Err(TrainError::DimMismatch { what: "query point", expected: self.query_dim(), got: x.len() });
        }
        if sensors.len() != v.len() * ny {
            return Err(TrainError::DimMismatch { what: "sensor values", expected: sensors.len() / ny, got: v.len() });
        }
        let psi = mlp_forward(&self.psi, self.psi_params(), sensors, false);
        let z = encode(psi.output(), &[v.to_vec()], self.rank());
        let phi = mlp_forward(&self.phi, self.phi_params(), x, true);
        let r = self.rank();
        let value = (0..r).map(|i| phi.output()[i] * z[i]).sum();
        let grad = (0..x.len())
            .map(|d| (0..r).map(|i| phi.output_tangent()[d * r + i] * z[i]).sum())
            .collect();
        Ok((value, grad))
    }
}

/// `Z_{k,ĩ} = (1/J̃) Σ_l ψ^ĩ(y_l) v_k(y_l)`, returned `N × Ĩ` row-major.
pub(crate) fn encode<T: Scalar>(psi_out: &[T], inputs: &[Vec<T>], rank: usize) -> Vec<T> {
    let inv = T::one() / T::from_usize_lossy(psi_out.len() / rank);
    let mut z = vec![T::zero(); inputs.len() * rank];
    for (k, v) in inputs.iter().enumerate() {
        let zk = &mut z[k * rank..(k + 1) * rank];
        for (l, &vl) in v.iter().enumerate() {
            let row = &psi_out[l * rank..(l + 1) * rank];
            for i in 0..rank {
                zk[i] += row[i] * vl;
            }
        }
        for zi in zk.iter_mut() {
            *zi *= inv;
        }
    }
    z
}
