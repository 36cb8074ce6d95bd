//! Minimal neural-network layers with explicit backward passes.
//!
//! Everything here is CPU-only, f32, channel-major (`(C, H, W)`), and
//! deterministic: forward/backward are plain loops, weight updates walk
//! parameters in a fixed order, and initialisation draws from a caller-owned
//! seeded RNG. Per-parameter reductions inside backward passes accumulate in
//! f64 before narrowing to f32.

use ndarray::{s, Array1, Array2, Array3, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Weight initialisation schemes. Biases always start at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`; use in front of ReLU.
    He,
    /// Uniform on `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`; use in
    /// front of sigmoid or linear outputs.
    Xavier,
    /// All zeros; used by residual heads that must start as the identity.
    Zero,
}

fn draw(init: Init, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> f32 {
    match init {
        Init::He => {
            let std = (2.0 / fan_in as f64).sqrt();
            Normal::new(0.0, std).unwrap().sample(rng) as f32
        }
        Init::Xavier => {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            rng.random_range(-a..a) as f32
        }
        Init::Zero => 0.0,
    }
}

// ---------------------------------------------------------------------------
// 2-D convolution
// ---------------------------------------------------------------------------

/// 2-D convolution with zero padding. Weights are `(out, in, k, k)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Array4<f32>,
    pub b: Array1<f32>,
    pub stride: usize,
    pub pad: usize,
}

/// Gradient buffer matching a [`Conv2d`]. Backward passes accumulate into
/// it; callers zero it once per optimisation step.
#[derive(Debug, Clone)]
pub struct Conv2dGrad {
    pub w: Array4<f32>,
    pub b: Array1<f32>,
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(in_ch > 0 && out_ch > 0 && k > 0 && stride > 0);
        let fan_in = in_ch * k * k;
        let fan_out = out_ch * k * k;
        let w = Array4::from_shape_fn((out_ch, in_ch, k, k), |_| {
            draw(init, fan_in, fan_out, rng)
        });
        Conv2d { w, b: Array1::zeros(out_ch), stride, pad }
    }

    pub fn grad(&self) -> Conv2dGrad {
        Conv2dGrad { w: Array4::zeros(self.w.dim()), b: Array1::zeros(self.b.dim()) }
    }

    pub fn out_ch(&self) -> usize {
        self.w.dim().0
    }

    pub fn in_ch(&self) -> usize {
        self.w.dim().1
    }

    fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.w.dim().2;
        let num_h = h + 2 * self.pad;
        let num_w = w + 2 * self.pad;
        if num_h < k || num_w < k {
            return Err(Error::shape(format!(
                "conv2d: input {h}x{w} too small for kernel {k} with pad {}",
                self.pad
            )));
        }
        Ok(((num_h - k) / self.stride + 1, (num_w - k) / self.stride + 1))
    }

    pub fn forward(&self, x: &Array3<f32>) -> Result<Array3<f32>> {
        let (ci, h, w) = x.dim();
        let (co, cin, kh, kw) = self.w.dim();
        if ci != cin {
            return Err(Error::shape(format!(
                "conv2d: input has {ci} channels, layer expects {cin}"
            )));
        }
        let (oh, ow) = self.out_hw(h, w)?;
        let mut out = Array3::<f32>::zeros((co, oh, ow));
        for oc in 0..co {
            out.slice_mut(s![oc, .., ..]).fill(self.b[oc]);
        }
        let xs = x.as_slice().expect("conv input contiguous");
        let ws = self.w.as_slice().expect("conv weights contiguous");
        let os = out.as_slice_mut().expect("conv output contiguous");
        let (s, p) = (self.stride, self.pad);
        for oc in 0..co {
            for ic in 0..ci {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = ws[((oc * ci + ic) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let Some((ox_lo, ox_hi)) = valid_ox(w, ow, s, p, kx) else {
                                continue;
                            };
                            let orow = (oc * oh + oy) * ow;
                            let xrow = (ic * h + iy as usize) * w;
                            let x0 = xrow + ox_lo * s + kx - p;
                            if s == 1 {
                                let n = ox_hi - ox_lo + 1;
                                let dst = &mut os[orow + ox_lo..orow + ox_lo + n];
                                let src = &xs[x0..x0 + n];
                                for (d, &v) in dst.iter_mut().zip(src) {
                                    *d += wv * v;
                                }
                            } else {
                                let mut xi = x0;
                                for ox in ox_lo..=ox_hi {
                                    os[orow + ox] += wv * xs[xi];
                                    xi += s;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Backward pass. `x` is the forward input, `dy` the incoming gradient.
    /// Returns the input gradient and accumulates weight/bias gradients.
    pub fn backward(
        &self,
        x: &Array3<f32>,
        dy: &Array3<f32>,
        grad: &mut Conv2dGrad,
    ) -> Result<Array3<f32>> {
        let (ci, h, w) = x.dim();
        let (co, cin, kh, kw) = self.w.dim();
        if ci != cin {
            return Err(Error::shape("conv2d backward: channel mismatch"));
        }
        let (oh, ow) = self.out_hw(h, w)?;
        if dy.dim() != (co, oh, ow) {
            return Err(Error::shape(format!(
                "conv2d backward: dy is {:?}, expected {:?}",
                dy.dim(),
                (co, oh, ow)
            )));
        }
        let mut dx = Array3::<f32>::zeros((ci, h, w));
        let xs = x.as_slice().expect("contiguous");
        let ws = self.w.as_slice().expect("contiguous");
        let dys = dy.as_slice().expect("contiguous");
        let dxs = dx.as_slice_mut().expect("contiguous");
        let gws = grad.w.as_slice_mut().expect("contiguous");
        let (s, p) = (self.stride, self.pad);
        for oc in 0..co {
            let mut db = 0f64;
            for v in &dys[oc * oh * ow..(oc + 1) * oh * ow] {
                db += *v as f64;
            }
            grad.b[oc] += db as f32;
            for ic in 0..ci {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let widx = ((oc * ci + ic) * kh + ky) * kw + kx;
                        let wv = ws[widx];
                        let mut acc = 0f64;
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let Some((ox_lo, ox_hi)) = valid_ox(w, ow, s, p, kx) else {
                                continue;
                            };
                            let orow = (oc * oh + oy) * ow;
                            let xrow = (ic * h + iy as usize) * w;
                            let x0 = xrow + ox_lo * s + kx - p;
                            if s == 1 {
                                let n = ox_hi - ox_lo + 1;
                                let g = &dys[orow + ox_lo..orow + ox_lo + n];
                                let xv = &xs[x0..x0 + n];
                                let dv = &mut dxs[x0..x0 + n];
                                for i in 0..n {
                                    dv[i] += wv * g[i];
                                    acc += (xv[i] * g[i]) as f64;
                                }
                            } else {
                                let mut xi = x0;
                                for ox in ox_lo..=ox_hi {
                                    let g = dys[orow + ox];
                                    dxs[xi] += wv * g;
                                    acc += (xs[xi] * g) as f64;
                                    xi += s;
                                }
                            }
                        }
                        gws[widx] += acc as f32;
                    }
                }
            }
        }
        Ok(dx)
    }
}

/// Output-column range for which `ox * s + kx - p` lands inside the input
/// row, or `None` when the whole row misses.
#[inline]
fn valid_ox(w: usize, ow: usize, s: usize, p: usize, kx: usize) -> Option<(usize, usize)> {
    let lo = if p > kx { (p - kx).div_ceil(s) } else { 0 };
    let hi_num = w as isize - 1 + p as isize - kx as isize;
    if hi_num < 0 {
        return None;
    }
    let hi = (hi_num as usize / s).min(ow - 1);
    if lo > hi {
        None
    } else {
        Some((lo, hi))
    }
}

// ---------------------------------------------------------------------------
// Dense layer
// ---------------------------------------------------------------------------

/// Fully connected layer. Weights are `(out, in)`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Array2<f32>,
    pub b: Array1<f32>,
}

#[derive(Debug, Clone)]
pub struct DenseGrad {
    pub w: Array2<f32>,
    pub b: Array1<f32>,
}

impl Dense {
    pub fn new(in_dim: usize, out_dim: usize, init: Init, rng: &mut impl Rng) -> Self {
        assert!(in_dim > 0 && out_dim > 0);
        let w = Array2::from_shape_fn((out_dim, in_dim), |_| draw(init, in_dim, out_dim, rng));
        Dense { w, b: Array1::zeros(out_dim) }
    }

    pub fn grad(&self) -> DenseGrad {
        DenseGrad { w: Array2::zeros(self.w.dim()), b: Array1::zeros(self.b.dim()) }
    }

    pub fn forward(&self, x: &Array1<f32>) -> Result<Array1<f32>> {
        let (o, i) = self.w.dim();
        if x.len() != i {
            return Err(Error::shape(format!(
                "dense: input length {} != {i}",
                x.len()
            )));
        }
        let xs = x.as_slice().expect("contiguous");
        let ws = self.w.as_slice().expect("contiguous");
        let mut y = Array1::<f32>::zeros(o);
        for r in 0..o {
            let row = &ws[r * i..(r + 1) * i];
            let mut acc = self.b[r] as f64;
            for (a, b) in row.iter().zip(xs) {
                acc += (*a * *b) as f64;
            }
            y[r] = acc as f32;
        }
        Ok(y)
    }

    pub fn backward(
        &self,
        x: &Array1<f32>,
        dy: &Array1<f32>,
        grad: &mut DenseGrad,
    ) -> Result<Array1<f32>> {
        let (o, i) = self.w.dim();
        if x.len() != i || dy.len() != o {
            return Err(Error::shape("dense backward: dimension mismatch"));
        }
        let mut dx = Array1::<f32>::zeros(i);
        for r in 0..o {
            let g = dy[r];
            grad.b[r] += g;
            let wrow = self.w.row(r);
            let mut gw = grad.w.row_mut(r);
            for c in 0..i {
                dx[c] += wrow[c] * g;
                gw[c] += x[c] * g;
            }
        }
        Ok(dx)
    }
}

// ---------------------------------------------------------------------------
// Activations and shape ops
// ---------------------------------------------------------------------------

pub fn relu(x: &Array3<f32>) -> Array3<f32> {
    x.mapv(|v| v.max(0.0))
}

/// `y` is the forward output; ReLU's gradient needs only the output sign.
pub fn relu_backward(dy: &Array3<f32>, y: &Array3<f32>) -> Array3<f32> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn sigmoid(x: &Array3<f32>) -> Array3<f32> {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn sigmoid_backward(dy: &Array3<f32>, y: &Array3<f32>) -> Array3<f32> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &v| *d *= v * (1.0 - v));
    dx
}

pub fn sigmoid1(x: &Array1<f32>) -> Array1<f32> {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn sigmoid1_backward(dy: &Array1<f32>, y: &Array1<f32>) -> Array1<f32> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &v| *d *= v * (1.0 - v));
    dx
}

/// Clamp to `[0, 1]`.
pub fn clamp01(x: &Array3<f32>) -> Array3<f32> {
    x.mapv(|v| v.clamp(0.0, 1.0))
}

/// Subgradient of [`clamp01`]: zero where the pre-clamp input saturates.
pub fn clamp01_backward(dy: &Array3<f32>, x_pre: &Array3<f32>) -> Array3<f32> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x_pre).for_each(|d, &v| {
        if !(v > 0.0 && v < 1.0) {
            *d = 0.0;
        }
    });
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ch, i, j)| x[(ch, i / 2, j / 2)])
}

/// Adjoint of [`upsample2`]: sums each 2x2 block.
pub fn upsample2_backward(dy: &Array3<f32>) -> Result<Array3<f32>> {
    let (c, h2, w2) = dy.dim();
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(Error::shape("upsample2 backward: odd spatial dims"));
    }
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                dx[(ch, i / 2, j / 2)] += dy[(ch, i, j)];
            }
        }
    }
    Ok(dx)
}

/// Concatenates along the channel axis.
pub fn concat_channels(a: &Array3<f32>, b: &Array3<f32>) -> Result<Array3<f32>> {
    let (ca, ha, wa) = a.dim();
    let (cb, hb, wb) = b.dim();
    if (ha, wa) != (hb, wb) {
        return Err(Error::shape("concat: spatial dims differ"));
    }
    let mut out = Array3::<f32>::zeros((ca + cb, ha, wa));
    out.slice_mut(s![..ca, .., ..]).assign(a);
    out.slice_mut(s![ca.., .., ..]).assign(b);
    Ok(out)
}

/// Splits a gradient back into the two concatenated parts.
pub fn concat_backward(dy: &Array3<f32>, ca: usize) -> (Array3<f32>, Array3<f32>) {
    let da = dy.slice(s![..ca, .., ..]).to_owned();
    let db = dy.slice(s![ca.., .., ..]).to_owned();
    (da, db)
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

/// AdamW with decoupled weight decay.
///
/// State slots are allocated lazily in the order `update` is called within a
/// step, so callers must visit parameters in the same fixed order every
/// step, bracketed by [`AdamW::begin_step`].
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    lr: f32,
    t: u64,
    cursor: usize,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(weight_decay: f32) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            lr: 0.0,
            t: 0,
            cursor: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Starts an optimisation step at the given learning rate.
    pub fn begin_step(&mut self, lr: f32) {
        assert!(lr.is_finite() && lr >= 0.0, "learning rate must be finite and >= 0");
        self.t += 1;
        self.cursor = 0;
        self.lr = lr;
    }

    /// Applies one AdamW update to a parameter slice.
    pub fn update(&mut self, w: &mut [f32], g: &[f32]) {
        assert_eq!(w.len(), g.len(), "parameter/gradient length mismatch");
        assert!(self.t > 0, "call begin_step before update");
        if self.cursor == self.m.len() {
            self.m.push(vec![0.0; w.len()]);
            self.v.push(vec![0.0; w.len()]);
        }
        let (m, v) = (&mut self.m[self.cursor], &mut self.v[self.cursor]);
        assert_eq!(
            m.len(),
            w.len(),
            "optimizer slot {} bound to a different parameter",
            self.cursor
        );
        self.cursor += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..w.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            w[i] -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * w[i]);
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// Convenience: runs AdamW on a conv layer and its gradient buffer.
pub fn update_conv(opt: &mut AdamW, layer: &mut Conv2d, grad: &Conv2dGrad) {
    opt.update(
        layer.w.as_slice_mut().expect("contiguous"),
        grad.w.as_slice().expect("contiguous"),
    );
    opt.update(
        layer.b.as_slice_mut().expect("contiguous"),
        grad.b.as_slice().expect("contiguous"),
    );
}

pub fn update_dense(opt: &mut AdamW, layer: &mut Dense, grad: &DenseGrad) {
    opt.update(
        layer.w.as_slice_mut().expect("contiguous"),
        grad.w.as_slice().expect("contiguous"),
    );
    opt.update(
        layer.b.as_slice_mut().expect("contiguous"),
        grad.b.as_slice().expect("contiguous"),
    );
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent f64 reference convolution, written as the textbook
    /// quadruple loop over output positions.
    fn ref_conv(
        x: &Array3<f32>,
        w: &Array4<f32>,
        b: &Array1<f32>,
        stride: usize,
        pad: usize,
    ) -> Array3<f64> {
        let (ci, h, wd) = x.dim();
        let (co, _, kh, kw) = w.dim();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Array3::<f64>::zeros((co, oh, ow));
        for oc in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[oc] as f64;
                    for ic in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w[(oc, ic, ky, kx)] as f64
                                    * x[(ic, iy as usize, ix as usize)] as f64;
                            }
                        }
                    }
                    out[(oc, oy, ox)] = acc;
                }
            }
        }
        out
    }

    fn rand_array3(dim: (usize, usize, usize), rng: &mut impl Rng) -> Array3<f32> {
        Array3::from_shape_fn(dim, |_| rng.random_range(-1.0f32..1.0))
    }

    #[test]
    fn conv_forward_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(ci, co, k, s, p, h, w) in &[
            (1usize, 1usize, 3usize, 1usize, 1usize, 5usize, 5usize),
            (3, 4, 3, 1, 1, 8, 6),
            (4, 2, 3, 2, 1, 8, 8),
            (2, 3, 1, 1, 0, 4, 7),
            (3, 2, 3, 2, 1, 9, 7),
        ] {
            let mut conv = Conv2d::new(ci, co, k, s, p, Init::He, &mut rng);
            for b in conv.b.iter_mut() {
                *b = rng.random_range(-0.5..0.5);
            }
            let x = rand_array3((ci, h, w), &mut rng);
            let got = conv.forward(&x).unwrap();
            let want = ref_conv(&x, &conv.w, &conv.b, s, p);
            assert_eq!(got.dim(), want.dim());
            for (g, r) in got.iter().zip(want.iter()) {
                assert_relative_eq!(*g as f64, *r, max_relative = 1e-4, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn conv_forward_hand_example() {
        // 3x3 input, 3x3 averaging-like kernel, pad 1: centre output is the
        // full sum, corners see only a 2x2 window.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv2d::new(1, 1, 3, 1, 1, Init::Zero, &mut rng);
        conv.w.fill(1.0);
        let x = Array3::from_shape_vec(
            (1, 3, 3),
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let y = conv.forward(&x).unwrap();
        assert_eq!(y[(0, 1, 1)], 45.0);
        assert_eq!(y[(0, 0, 0)], 1.0 + 2.0 + 4.0 + 5.0);
        assert_eq!(y[(0, 2, 2)], 5.0 + 6.0 + 8.0 + 9.0);
    }

    /// Scalar loss `sum(out * r)` lets finite differences of the f64
    /// reference check every analytic gradient entry at once.
    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &(ci, co, k, s, p, h, w) in
            &[(2usize, 3usize, 3usize, 1usize, 1usize, 6usize, 5usize), (3, 2, 3, 2, 1, 8, 8)]
        {
            let conv = Conv2d::new(ci, co, k, s, p, Init::He, &mut rng);
            let x = rand_array3((ci, h, w), &mut rng);
            let y = conv.forward(&x).unwrap();
            let r = rand_array3(y.dim(), &mut rng);
            let mut grad = conv.grad();
            let dx = conv.backward(&x, &r, &mut grad).unwrap();

            let loss = |xx: &Array3<f32>, ww: &Array4<f32>, bb: &Array1<f32>| -> f64 {
                let out = ref_conv(xx, ww, bb, s, p);
                out.iter().zip(r.iter()).map(|(o, g)| o * *g as f64).sum()
            };
            let h_fd = 1e-3f32;
            // Input gradient, spot-checked on a grid of entries.
            for idx in [(0, 0, 0), (1, h / 2, w / 2), (ci - 1, h - 1, w - 1)] {
                let mut xp = x.clone();
                xp[idx] += h_fd;
                let mut xm = x.clone();
                xm[idx] -= h_fd;
                let fd = (loss(&xp, &conv.w, &conv.b) - loss(&xm, &conv.w, &conv.b))
                    / (2.0 * h_fd as f64);
                assert_relative_eq!(dx[idx] as f64, fd, max_relative = 2e-2, epsilon = 2e-3);
            }
            // Weight and bias gradients.
            for widx in [(0, 0, 0, 0), (co - 1, ci - 1, k - 1, k - 1)] {
                let mut wp = conv.w.clone();
                wp[widx] += h_fd;
                let mut wm = conv.w.clone();
                wm[widx] -= h_fd;
                let fd =
                    (loss(&x, &wp, &conv.b) - loss(&x, &wm, &conv.b)) / (2.0 * h_fd as f64);
                assert_relative_eq!(grad.w[widx] as f64, fd, max_relative = 2e-2, epsilon = 2e-3);
            }
            let mut bp = conv.b.clone();
            bp[0] += h_fd;
            let mut bm = conv.b.clone();
            bm[0] -= h_fd;
            let fd = (loss(&x, &conv.w, &bp) - loss(&x, &conv.w, &bm)) / (2.0 * h_fd as f64);
            assert_relative_eq!(grad.b[0] as f64, fd, max_relative = 2e-2, epsilon = 2e-3);
        }
    }

    #[test]
    fn dense_forward_and_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = Dense::new(5, 3, Init::Xavier, &mut rng);
        let x = Array1::from_shape_fn(5, |_| rng.random_range(-1.0f32..1.0));
        let y = layer.forward(&x).unwrap();
        // Reference matvec.
        for r in 0..3 {
            let mut acc = layer.b[r] as f64;
            for c in 0..5 {
                acc += layer.w[(r, c)] as f64 * x[c] as f64;
            }
            assert_relative_eq!(y[r] as f64, acc, max_relative = 1e-5, epsilon = 1e-6);
        }
        // Backward: loss = sum(y * g).
        let g = Array1::from_shape_fn(3, |_| rng.random_range(-1.0f32..1.0));
        let mut grad = layer.grad();
        let dx = layer.backward(&x, &g, &mut grad).unwrap();
        for c in 0..5 {
            let mut want = 0f64;
            for r in 0..3 {
                want += layer.w[(r, c)] as f64 * g[r] as f64;
            }
            assert_relative_eq!(dx[c] as f64, want, max_relative = 1e-4, epsilon = 1e-6);
        }
        for r in 0..3 {
            assert_eq!(grad.b[r], g[r]);
            for c in 0..5 {
                assert_relative_eq!(
                    grad.w[(r, c)] as f64,
                    x[c] as f64 * g[r] as f64,
                    max_relative = 1e-5,
                    epsilon = 1e-7
                );
            }
        }
    }

    /// Linear shape ops satisfy the adjoint identity `<dy, f(x)> == <f'(dy), x>`.
    #[test]
    fn upsample_and_concat_are_adjoint()    {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_array3((3, 4, 6), &mut rng);
        let y = upsample2(&x);
        assert_eq!(y.dim(), (3, 8, 12));
        assert_eq!(y[(1, 5, 7)], x[(1, 2, 3)]);
        let dy = rand_array3(y.dim(), &mut rng);
        let dx = upsample2_backward(&dy).unwrap();
        let lhs: f64 = dy.iter().zip(y.iter()).map(|(a, b)| (*a * *b) as f64).sum();
        let rhs: f64 = dx.iter().zip(x.iter()).map(|(a, b)| (*a * *b) as f64).sum();
        assert_relative_eq!(lhs, rhs, max_relative = 1e-4);

        let a = rand_array3((2, 4, 4), &mut rng);
        let b = rand_array3((3, 4, 4), &mut rng);
        let cat = concat_channels(&a, &b).unwrap();
        assert_eq!(cat.dim(), (5, 4, 4));
        let dcat = rand_array3(cat.dim(), &mut rng);
        let (da, db) = concat_backward(&dcat, 2);
        assert_eq!(da.dim(), a.dim());
        assert_eq!(db.dim(), b.dim());
        let lhs: f64 = dcat.iter().zip(cat.iter()).map(|(p, q)| (*p * *q) as f64).sum();
        let rhs: f64 = da.iter().zip(a.iter()).map(|(p, q)| (*p * *q) as f64).sum::<f64>()
            + db.iter().zip(b.iter()).map(|(p, q)| (*p * *q) as f64).sum::<f64>();
        assert_relative_eq!(lhs, rhs, max_relative = 1e-4);
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_array3((2, 3, 3), &mut rng).mapv(|v| v * 2.0);
        let r = rand_array3((2, 3, 3), &mut rng);
        let h = 1e-3f64;

        let y = sigmoid(&x);
        let dx = sigmoid_backward(&r, &y);
        for idx in [(0, 0, 0), (1, 2, 2)] {
            let f = |v: f64| 1.0 / (1.0 + (-v).exp());
            let v = x[idx] as f64;
            let fd = (f(v + h) - f(v - h)) / (2.0 * h) * r[idx] as f64;
            assert_relative_eq!(dx[idx] as f64, fd, max_relative = 1e-3, epsilon = 1e-6);
        }

        let y = relu(&x);
        let dx = relu_backward(&r, &y);
        for (i, (&xv, &d)) in x.iter().zip(dx.iter()).enumerate() {
            let want = if xv > 0.0 { r.as_slice().unwrap()[i] } else { 0.0 };
            assert_eq!(d, want);
        }
    }

    #[test]
    fn clamp_gradient_masks_saturated_entries() {
        let x = Array3::from_shape_vec((1, 1, 5), vec![-0.5, 0.25, 0.5, 0.99, 1.5]).unwrap();
        let dy = Array3::from_elem((1, 1, 5), 1.0f32);
        let dx = clamp01_backward(&dy, &x);
        assert_eq!(dx.as_slice().unwrap(), &[0.0, 1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn adamw_matches_hand_computed_steps() {
        // One parameter, g = 0.5, lr = 0.1, wd = 0.02.
        // Step 1: m_hat = 0.5, v_hat = 0.25, so
        //   w = 1 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.02 * 1.0) = 0.898000001...
        let mut opt = AdamW::new(0.02);
        let mut w = [1.0f32];
        opt.begin_step(0.1);
        opt.update(&mut w, &[0.5]);
        assert_relative_eq!(w[0], 0.898, max_relative = 1e-5);

        // Decoupled decay: with zero gradient the Adam term stays zero at
        // every step, leaving pure multiplicative decay.
        let mut opt = AdamW::new(0.02);
        let mut w = [1.0f32];
        for _ in 0..3 {
            opt.begin_step(0.1);
            opt.update(&mut w, &[0.0]);
        }
        assert_relative_eq!(w[0], (1.0f32 - 0.1 * 0.02).powi(3), max_relative = 1e-6);
    }

    #[test]
    #[should_panic(expected = "different parameter")]
    fn adamw_detects_slot_misalignment() {
        let mut opt = AdamW::new(0.0);
        let mut a = [0.0f32; 3];
        let mut b = [0.0f32; 4];
        opt.begin_step(0.1);
        opt.update(&mut a, &[0.0; 3]);
        opt.begin_step(0.1);
        opt.update(&mut b, &[0.0; 4]);
    }

    #[test]
    fn init_statistics_are_sane() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let conv = Conv2d::new(16, 16, 3, 1, 1, Init::He, &mut rng);
        let n = conv.w.len() as f64;
        let mean: f64 = conv.w.iter().map(|v| *v as f64).sum::<f64>() / n;
        let var: f64 = conv.w.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n;
        let want = 2.0 / (16.0 * 9.0);
        // Standard error of the mean is std/sqrt(n) ~ 0.0025; allow 4 sigma.
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - want).abs() / want < 0.2, "var {var} vs {want}");
        assert!(conv.b.iter().all(|&b| b == 0.0));

        let z = Conv2d::new(4, 3, 3, 1, 1, Init::Zero, &mut rng);
        assert!(z.w.iter().all(|&v| v == 0.0));
    }
}
