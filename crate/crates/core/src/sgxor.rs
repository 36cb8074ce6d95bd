//! Exact XOR forward with a sigmoid-gated gradient proxy.
//!
//! Key bits are produced by rounding two soft feature maps and XOR-ing them,
//! which has zero gradient everywhere. Training therefore backpropagates
//! through a smooth surrogate instead: each operand is squashed by a steep
//! shifted sigmoid and the XOR is replaced by its arithmetic relaxation
//! `p1 + p2 - 2*p1*p2`. The forward value stays exactly binary; only the
//! backward pass uses the relaxation.

use ndarray::Array3;
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Steepness and shift of the gating sigmoid `1 / (1 + exp(-m * (x + n)))`.
///
/// The shift centres the transition at `x = -n`, so with the default
/// `n = -0.5` the gate flips where rounding flips.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgXorParams {
    pub m: f32,
    pub n: f32,
}

impl Default for SgXorParams {
    fn default() -> Self {
        SgXorParams { m: 10.0, n: -0.5 }
    }
}

impl SgXorParams {
    pub fn validate(&self) -> Result<()> {
        if !self.m.is_finite() || !self.n.is_finite() {
            return Err(Error::config("sgxor m and n must be finite"));
        }
        if self.m <= 0.0 {
            return Err(Error::config(format!(
                "sgxor steepness m must be positive, got {}",
                self.m
            )));
        }
        Ok(())
    }
}

/// Which backward rule replaces the zero-gradient rounding + XOR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradEstimator {
    /// Sigmoid-gated relaxation (the default).
    SgXor,
    /// Straight-through: the incoming gradient is copied to both operands.
    Ste,
}

/// Rounds a soft value in `[0, 1]` to a bit. Ties at exactly 0.5 round up.
#[inline]
pub fn round_bit(x: f32) -> u8 {
    (x >= 0.5) as u8
}

/// `1 / (1 + exp(-m * (x + n)))`, the smooth stand-in for rounding.
#[inline]
pub fn soft_binarize_scalar<F: Float>(x: F, m: F, n: F) -> F {
    F::one() / (F::one() + (-m * (x + n)).exp())
}

/// Arithmetic XOR relaxation; equals XOR exactly when both inputs are bits.
#[inline]
pub fn xor_proxy_scalar<F: Float>(p1: F, p2: F) -> F {
    p1 + p2 - (F::one() + F::one()) * p1 * p2
}

/// Gradient of `xor_proxy(soft_binarize(x1), soft_binarize(x2))` with
/// respect to `(x1, x2)`, scaled by the incoming gradient `gw`.
#[inline]
pub fn grad_pair<F: Float>(gw: F, x1: F, x2: F, m: F, n: F) -> (F, F) {
    let two = F::one() + F::one();
    let p1 = soft_binarize_scalar(x1, m, n);
    let p2 = soft_binarize_scalar(x2, m, n);
    let g1 = gw * (F::one() - two * p2) * m * p1 * (F::one() - p1);
    let g2 = gw * (F::one() - two * p1) * m * p2 * (F::one() - p2);
    (g1, g2)
}

fn check_same_shape(a: &Array3<f32>, b: &Array3<f32>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!(
            "{what}: operand shapes {:?} and {:?} differ",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn check_unit_range(x: &Array3<f32>, what: &str) -> Result<()> {
    for &v in x.iter() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::input(format!(
                "{what}: element {v} outside [0, 1]"
            )));
        }
    }
    Ok(())
}

/// Exact forward: round both maps, then XOR bitwise.
///
/// This is the only forward rule; the relaxation below never replaces it.
pub fn xor_bits(x1: &Array3<f32>, x2: &Array3<f32>) -> Result<Array3<u8>> {
    check_same_shape(x1, x2, "xor_bits")?;
    check_unit_range(x1, "xor_bits x1")?;
    check_unit_range(x2, "xor_bits x2")?;
    let mut out = Array3::<u8>::zeros(x1.dim());
    ndarray::Zip::from(&mut out)
        .and(x1)
        .and(x2)
        .for_each(|w, &a, &b| *w = round_bit(a) ^ round_bit(b));
    Ok(out)
}

/// Elementwise gating sigmoid over a tensor.
pub fn soft_binarize(x: &Array3<f32>, p: &SgXorParams) -> Result<Array3<f32>> {
    p.validate()?;
    if let Some(v) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::input(format!("soft_binarize: non-finite input {v}")));
    }
    Ok(x.mapv(|v| soft_binarize_scalar(v, p.m, p.n)))
}

/// Elementwise XOR relaxation of two soft-bit tensors in `[0, 1]`.
pub fn xor_proxy(p1: &Array3<f32>, p2: &Array3<f32>) -> Result<Array3<f32>> {
    check_same_shape(p1, p2, "xor_proxy")?;
    check_unit_range(p1, "xor_proxy p1")?;
    check_unit_range(p2, "xor_proxy p2")?;
    let mut out = Array3::<f32>::zeros(p1.dim());
    ndarray::Zip::from(&mut out)
        .and(p1)
        .and(p2)
        .for_each(|w, &a, &b| *w = xor_proxy_scalar(a, b));
    Ok(out)
}

/// Sigmoid-gated backward for `W = round(x1) XOR round(x2)`.
///
/// Returns `(grad_x1, grad_x2)` for incoming gradient `gw`. All three
/// tensors must share one shape; operands must be finite.
pub fn sgxor_backward(
    gw: &Array3<f32>,
    x1: &Array3<f32>,
    x2: &Array3<f32>,
    p: &SgXorParams,
) -> Result<(Array3<f32>, Array3<f32>)> {
    p.validate()?;
    check_same_shape(gw, x1, "sgxor_backward (gw vs x1)")?;
    check_same_shape(x1, x2, "sgxor_backward")?;
    for t in [x1, x2] {
        if let Some(v) = t.iter().find(|v| !v.is_finite()) {
            return Err(Error::input(format!(
                "sgxor_backward: non-finite operand {v}"
            )));
        }
    }
    let mut g1 = Array3::<f32>::zeros(x1.dim());
    let mut g2 = Array3::<f32>::zeros(x1.dim());
    ndarray::Zip::from(&mut g1)
        .and(&mut g2)
        .and(gw)
        .and(x1)
        .and(x2)
        .for_each(|o1, o2, &g, &a, &b| {
            let (da, db) = grad_pair(g, a, b, p.m, p.n);
            *o1 = da;
            *o2 = db;
        });
    Ok((g1, g2))
}

/// Straight-through backward: the incoming gradient passes to both operands
/// unchanged.
pub fn ste_backward(gw: &Array3<f32>) -> (Array3<f32>, Array3<f32>) {
    (gw.clone(), gw.clone())
}

/// Dispatches on the configured estimator.
pub fn estimator_backward(
    est: GradEstimator,
    gw: &Array3<f32>,
    x1: &Array3<f32>,
    x2: &Array3<f32>,
    p: &SgXorParams,
) -> Result<(Array3<f32>, Array3<f32>)> {
    match est {
        GradEstimator::SgXor => sgxor_backward(gw, x1, x2, p),
        GradEstimator::Ste => {
            check_same_shape(gw, x1, "ste_backward (gw vs x1)")?;
            check_same_shape(x1, x2, "ste_backward")?;
            Ok(ste_backward(gw))
        }
    }
}
