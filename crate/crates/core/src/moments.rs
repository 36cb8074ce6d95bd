//! Radial-harmonic moment features of a grayscale image.
//!
//! Each feature is the magnitude of the image's projection onto one complex
//! kernel `T_s(r) * exp(-i*k*theta)` supported on the inscribed unit disk,
//! with the radial-harmonic profile
//!
//! ```text
//! T_0(r) = 1/sqrt(r)
//! T_s(r) = sqrt(2/r) * sin((s+1)*pi*r)   s odd
//! T_s(r) = sqrt(2/r) * cos(s*pi*r)       s even, s > 0
//! ```
//!
//! The profiles are orthonormal under the disk measure and the angular
//! factors are orthogonal across `k`, so distinct kernels are numerically
//! near-orthogonal on the pixel grid. Magnitudes are rotation-robust, which
//! is what makes the derived verification key survive capture geometry.
//!
//! The projection is linear in the image, so its Jacobian is the kernel
//! itself; the backward pass here is exact, not an estimator. Kernels are
//! stored factored into radial and angular tables (`O(sqrt(count) * pixels)`
//! memory instead of `O(count * pixels)`), which keeps large grids cheap.

use ndarray::{Array2, Array3};
use num_complex::Complex;

use crate::error::{Error, Result};

const GRAY_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

/// ITU-R BT.601 luminance of an RGB image in `[0, 1]`.
pub fn to_gray(rgb: &Array3<f32>) -> Result<Array2<f32>> {
    let (c, h, w) = rgb.dim();
    if c != 3 {
        return Err(Error::shape(format!("to_gray: expected 3 channels, got {c}")));
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            out[(i, j)] = GRAY_WEIGHTS[0] * rgb[(0, i, j)]
                + GRAY_WEIGHTS[1] * rgb[(1, i, j)]
                + GRAY_WEIGHTS[2] * rgb[(2, i, j)];
        }
    }
    Ok(out)
}

/// Distributes a grayscale gradient back over the RGB channels.
pub fn to_gray_backward(dgray: &Array2<f32>) -> Array3<f32> {
    let (h, w) = dgray.dim();
    Array3::from_shape_fn((3, h, w), |(c, i, j)| GRAY_WEIGHTS[c] * dgray[(i, j)])
}

/// Precomputed moment kernels for one grid size and feature-map shape.
///
/// Kernels are enumerated row-major over a `side x side` grid of
/// `(radial order s, angular repetition k)` pairs, `side = ceil(sqrt(n))`,
/// so slot `q` holds `(s, k) = (q / side, q % side)`.
#[derive(Debug, Clone)]
pub struct MomentKernelBank {
    h: usize,
    w: usize,
    feat: (usize, usize, usize),
    side: usize,
    /// `radial[s][p] = T_s(r_p)`, zero outside the unit disk.
    radial: Array2<f32>,
    /// `ang_re[k][p] = cos(k * theta_p)` inside the disk.
    ang_re: Array2<f32>,
    /// `ang_im[k][p] = -sin(k * theta_p)` inside the disk.
    ang_im: Array2<f32>,
}

/// Builds the kernel bank for an `h x w` grid and a `(c, fh, fw)` feature
/// map, i.e. `c * fh * fw` kernels.
pub fn build_kernel_bank(
    h: usize,
    w: usize,
    c: usize,
    fh: usize,
    fw: usize,
) -> Result<MomentKernelBank> {
    if h < 8 || w < 8 {
        return Err(Error::config(format!(
            "kernel bank: grid {h}x{w} too small (minimum 8x8)"
        )));
    }
    let count = c * fh * fw;
    if count == 0 {
        return Err(Error::config("kernel bank: zero kernels requested"));
    }
    let side = (count as f64).sqrt().ceil() as usize;
    // Orders beyond min(h, w) / 2 oscillate faster than the pixel grid can
    // represent; such banks would alias rather than project.
    if side > h.min(w) / 2 {
        return Err(Error::config(format!(
            "kernel bank: {count} kernels need orders up to {side}, more than \
             the {h}x{w} grid resolves"
        )));
    }

    let npix = h * w;
    let mut radial = Array2::<f32>::zeros((side, npix));
    let mut ang_re = Array2::<f32>::zeros((side, npix));
    let mut ang_im = Array2::<f32>::zeros((side, npix));
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let x = (2.0 * j as f64 + 1.0 - w as f64) / w as f64;
            let y = (2.0 * i as f64 + 1.0 - h as f64) / h as f64;
            let r = (x * x + y * y).sqrt();
            if r > 1.0 || r == 0.0 {
                // Outside the inscribed disk, or the singular centre sample
                // of an odd-sized grid: no support.
                continue;
            }
            let theta = y.atan2(x);
            for s in 0..side {
                radial[(s, p)] = radial_profile(s, r) as f32;
            }
            for k in 0..side {
                let a = k as f64 * theta;
                ang_re[(k, p)] = a.cos() as f32;
                ang_im[(k, p)] = (-a.sin()) as f32;
            }
        }
    }
    Ok(MomentKernelBank { h, w, feat: (c, fh, fw), side, radial, ang_re, ang_im })
}

fn radial_profile(s: usize, r: f64) -> f64 {
    use std::f64::consts::PI;
    if s == 0 {
        1.0 / r.sqrt()
    } else if s % 2 == 1 {
        (2.0 / r).sqrt() * ((s as f64 + 1.0) * PI * r).sin()
    } else {
        (2.0 / r).sqrt() * (s as f64 * PI * r).cos()
    }
}

impl MomentKernelBank {
    pub fn grid(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn feature_shape(&self) -> (usize, usize, usize) {
        self.feat
    }

    pub fn count(&self) -> usize {
        self.feat.0 * self.feat.1 * self.feat.2
    }

    /// `(radial order, angular repetition)` of a flat slot.
    pub fn orders(&self, slot: usize) -> (usize, usize) {
        (slot / self.side, slot % self.side)
    }

    /// Kernel value at one pixel, composed from the factored tables.
    pub fn kernel_value(&self, slot: usize, i: usize, j: usize) -> Complex<f32> {
        let (s, k) = self.orders(slot);
        let p = i * self.w + j;
        Complex::new(
            self.radial[(s, p)] * self.ang_re[(k, p)],
            self.radial[(s, p)] * self.ang_im[(k, p)],
        )
    }

    /// Complex projections `M_q = sum_p gray_p * kernel_q(p)`.
    ///
    /// This is the linear core of the extractor: `project(a*I + b*J)` equals
    /// `a*project(I) + b*project(J)` up to rounding.
    pub fn project(&self, gray: &Array2<f32>) -> Result<Vec<Complex<f64>>> {
        if gray.dim() != (self.h, self.w) {
            return Err(Error::shape(format!(
                "project: image {:?} does not match bank grid {}x{}",
                gray.dim(),
                self.h,
                self.w
            )));
        }
        let npix = self.h * self.w;
        let gs = gray.as_slice().expect("contiguous");
        let mut out = vec![Complex::new(0.0, 0.0); self.count()];
        let mut u_re = vec![0f32; npix];
        let mut u_im = vec![0f32; npix];
        for k in 0..self.side {
            let are = &self.ang_re.as_slice().unwrap()[k * npix..(k + 1) * npix];
            let aim = &self.ang_im.as_slice().unwrap()[k * npix..(k + 1) * npix];
            for p in 0..npix {
                u_re[p] = gs[p] * are[p];
                u_im[p] = gs[p] * aim[p];
            }
            for s in 0..self.side {
                let q = s * self.side + k;
                if q >= self.count() {
                    continue;
                }
                let rad = &self.radial.as_slice().unwrap()[s * npix..(s + 1) * npix];
                let mut acc_re = 0f64;
                let mut acc_im = 0f64;
                for p in 0..npix {
                    acc_re += (rad[p] * u_re[p]) as f64;
                    acc_im += (rad[p] * u_im[p]) as f64;
                }
                out[q] = Complex::new(acc_re, acc_im);
            }
        }
        Ok(out)
    }

    /// Adjoint of [`project`]: maps cogradients on the complex moments back
    /// to a pixel gradient. `cograds[q] = (dL/dRe M_q, dL/dIm M_q)`.
    pub fn project_adjoint(&self, cograds: &[Complex<f64>]) -> Result<Array2<f32>> {
        if cograds.len() != self.count() {
            return Err(Error::shape(format!(
                "project_adjoint: {} cogradients for {} kernels",
                cograds.len(),
                self.count()
            )));
        }
        let npix = self.h * self.w;
        let mut dgray = vec![0f32; npix];
        let mut t = vec![0f32; npix];
        for s in 0..self.side {
            t.iter_mut().for_each(|v| *v = 0.0);
            let mut any = false;
            for k in 0..self.side {
                let q = s * self.side + k;
                if q >= self.count() {
                    continue;
                }
                let gr = cograds[q].re as f32;
                let gi = cograds[q].im as f32;
                if gr == 0.0 && gi == 0.0 {
                    continue;
                }
                any = true;
                let are = &self.ang_re.as_slice().unwrap()[k * npix..(k + 1) * npix];
                let aim = &self.ang_im.as_slice().unwrap()[k * npix..(k + 1) * npix];
                for p in 0..npix {
                    t[p] += gr * are[p] + gi * aim[p];
                }
            }
            if !any {
                continue;
            }
            let rad = &self.radial.as_slice().unwrap()[s * npix..(s + 1) * npix];
            for p in 0..npix {
                dgray[p] += rad[p] * t[p];
            }
        }
        Ok(Array2::from_shape_vec((self.h, self.w), dgray).expect("shape"))
    }
}

/// Per-map min-max normalization to `[0, 1]`. A constant map (including the
/// all-zero one) maps to 0.5 everywhere, keeping downstream rounding neutral.
pub fn normalize_features(mags: &[f32]) -> Result<Vec<f32>> {
    if mags.is_empty() {
        return Err(Error::input("normalize_features: empty input"));
    }
    if mags.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("normalize_features: non-finite magnitude"));
    }
    if let Some(v) = mags.iter().find(|v| **v < 0.0) {
        return Err(Error::input(format!(
            "normalize_features: negative magnitude {v}"
        )));
    }
    Ok(min_max_unit(mags))
}

/// Plain min-max to `[0, 1]` over arbitrary finite reals, degenerate
/// input mapping to 0.5. Shared by the public magnitude entry point and
/// the log-domain path inside the extractor.
fn min_max_unit(xs: &[f32]) -> Vec<f32> {
    let (mn, mx) = min_max(xs);
    let d = mx - mn;
    if d == 0.0 {
        return vec![0.5; xs.len()];
    }
    xs.iter().map(|v| (v - mn) / d).collect()
}

/// First-occurrence (argmin, argmax) and the extreme values.
fn min_max_idx(xs: &[f32]) -> (usize, usize, f32, f32) {
    let mut mn = xs[0];
    let mut mx = xs[0];
    let mut imn = 0;
    let mut imx = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v < mn {
            mn = v;
            imn = i;
        }
        if v > mx {
            mx = v;
            imx = i;
        }
    }
    (imn, imx, mn, mx)
}

fn min_max(xs: &[f32]) -> (f32, f32) {
    let (_, _, mn, mx) = min_max_idx(xs);
    (mn, mx)
}

/// Gradient of [`normalize_features`] with respect to the raw magnitudes.
///
/// The min and max entries receive the extra terms from the data-dependent
/// bounds; a degenerate (constant) map gets zero gradient.
pub fn normalize_backward(dy: &[f32], mags: &[f32]) -> Result<Vec<f32>> {
    if dy.len() != mags.len() {
        return Err(Error::shape("normalize_backward: length mismatch"));
    }
    let (imn, imx, mn, mx) = min_max_idx(mags);
    let d = mx - mn;
    if d == 0.0 {
        return Ok(vec![0.0; mags.len()]);
    }
    let dd = d as f64;
    let mut s = 0f64; // sum dy
    let mut t = 0f64; // sum dy * y
    for (i, &g) in dy.iter().enumerate() {
        let y = (mags[i] - mn) as f64 / dd;
        s += g as f64;
        t += g as f64 * y;
    }
    let mut dx: Vec<f32> = dy.iter().map(|g| (*g as f64 / dd) as f32).collect();
    dx[imn] += ((t - s) / dd) as f32;
    dx[imx] -= (t / dd) as f32;
    Ok(dx)
}

/// Everything the extractor backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct MomentCtx {
    pub moments: Vec<Complex<f64>>,
    pub mags: Vec<f32>,
}

/// Floor added before the log so zero magnitudes stay finite; a constant
/// magnitude vector still normalizes to all 0.5.
const LOG_EPS: f32 = 1e-6;

/// Log compression applied to raw magnitudes before min-max. The radial-DC
/// slot responds to the coherent pixel sum and exceeds every oscillatory
/// slot by orders of magnitude on any [0,1] image, so min-max over raw
/// magnitudes pins the whole map to one slot; the log domain keys the map
/// on relative magnitude structure instead. A global image rescale shifts
/// all log magnitudes equally and cancels in the min-max.
fn log_mags(mags: &[f32]) -> Vec<f32> {
    mags.iter().map(|m| (m + LOG_EPS).ln()).collect()
}

/// Full extractor: project, take magnitudes, log-compress, min-max
/// normalize, reshape to the bank's feature shape.
pub fn extract_moment_map(gray: &Array2<f32>, bank: &MomentKernelBank) -> Result<Array3<f32>> {
    Ok(extract_with_ctx(gray, bank)?.0)
}

pub fn extract_with_ctx(
    gray: &Array2<f32>,
    bank: &MomentKernelBank,
) -> Result<(Array3<f32>, MomentCtx)> {
    let moments = bank.project(gray)?;
    let mags: Vec<f32> = moments.iter().map(|m| m.norm() as f32).collect();
    let normd = min_max_unit(&log_mags(&mags));
    let map = Array3::from_shape_vec(bank.feature_shape(), normd).expect("slot count");
    Ok((map, MomentCtx { moments, mags }))
}

/// Pixel gradient of a loss through raw (pre-normalization) magnitudes.
pub fn magnitudes_backward(
    dmags: &[f32],
    ctx: &MomentCtx,
    bank: &MomentKernelBank,
) -> Result<Array2<f32>> {
    if dmags.len() != ctx.moments.len() {
        return Err(Error::shape("magnitudes_backward: length mismatch"));
    }
    let cograds: Vec<Complex<f64>> = ctx
        .moments
        .iter()
        .zip(dmags)
        .map(|(m, &g)| {
            let norm = m.norm();
            if norm == 0.0 {
                Complex::new(0.0, 0.0)
            } else {
                // d|M|/dM = M / |M| under the real pairing.
                Complex::new(g as f64 * m.re / norm, g as f64 * m.im / norm)
            }
        })
        .collect();
    bank.project_adjoint(&cograds)
}

/// Pixel gradient of a loss on the normalized feature map.
pub fn extract_backward(
    dmap: &Array3<f32>,
    ctx: &MomentCtx,
    bank: &MomentKernelBank,
) -> Result<Array2<f32>> {
    if dmap.dim() != bank.feature_shape() {
        return Err(Error::shape("extract_backward: feature shape mismatch"));
    }
    let dy = dmap.as_slice().expect("contiguous");
    let lm = log_mags(&ctx.mags);
    let dlm = normalize_backward(dy, &lm)?;
    let dmags: Vec<f32> =
        dlm.iter().zip(&ctx.mags).map(|(&g, &m)| g / (m + LOG_EPS)).collect();
    magnitudes_backward(&dmags, ctx, bank)
}
