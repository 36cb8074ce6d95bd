//! Restoration network and the pixel/structural training loss.
//!
//! The restorer is a 3-level convolutional encoder-decoder with skip
//! connections and a global residual: the network predicts a correction
//! `delta` and outputs `clamp01(input + delta)`. The final conv is
//! zero-initialised, so an untrained restorer is exactly the identity on
//! valid images, which keeps early training from destroying the signal the
//! decoder needs.
//!
//! The training loss is `lambda_pix * MSE + lambda_str * (1 - SSIM)` with
//! `lambda_pix = 10`, `lambda_str = 1`. SSIM is the standard single-scale
//! form (11x11 Gaussian window, sigma 1.5, C1 = 0.01^2, C2 = 0.03^2 for unit
//! dynamic range); a multi-scale variant is available behind a config flag.
//! The backward passes are arranged so that at `I_re == I_co` every
//! intermediate difference cancels bitwise and the loss gradient is exactly
//! zero, not merely small.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, Conv2dGrad, Init};

// ---------------------------------------------------------------------------
// SSIM
// ---------------------------------------------------------------------------

const WIN: usize = 11;
const C1: f32 = 0.01 * 0.01;
const C2: f32 = 0.03 * 0.03;
/// Standard multi-scale SSIM exponents for up to five scales.
const MS_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn gaussian_window() -> [f32; WIN] {
    let sigma = 1.5f64;
    let mut g = [0f64; WIN];
    let mut sum = 0f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - (WIN as f64 - 1.0) / 2.0;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
        sum += *v;
    }
    let mut out = [0f32; WIN];
    for i in 0..WIN {
        out[i] = (g[i] / sum) as f32;
    }
    out
}

/// Separable valid-mode filtering with a 1-D window applied to rows then
/// columns. Output is `(c, h - WIN + 1, w - WIN + 1)`.
fn filter_valid(x: &Array3<f32>, win: &[f32; WIN]) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let ow = w - WIN + 1;
    let oh = h - WIN + 1;
    let mut tmp = Array3::<f32>::zeros((c, h, ow));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..ow {
                let mut acc = 0f32;
                for t in 0..WIN {
                    acc += win[t] * x[(ch, i, j + t)];
                }
                tmp[(ch, i, j)] = acc;
            }
        }
    }
    let mut out = Array3::<f32>::zeros((c, oh, ow));
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0f32;
                for t in 0..WIN {
                    acc += win[t] * tmp[(ch, i + t, j)];
                }
                out[(ch, i, j)] = acc;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a gradient on the valid map back
/// onto the full grid.
fn filter_valid_adjoint(g: &Array3<f32>, win: &[f32; WIN], h: usize, w: usize) -> Array3<f32> {
    let (c, oh, ow) = g.dim();
    debug_assert_eq!((oh, ow), (h - WIN + 1, w - WIN + 1));
    let mut tmp = Array3::<f32>::zeros((c, h, ow));
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let gv = g[(ch, i, j)];
                if gv == 0.0 {
                    continue;
                }
                for t in 0..WIN {
                    tmp[(ch, i + t, j)] += win[t] * gv;
                }
            }
        }
    }
    let mut dx = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..ow {
                let gv = tmp[(ch, i, j)];
                if gv == 0.0 {
                    continue;
                }
                for t in 0..WIN {
                    dx[(ch, i, j + t)] += win[t] * gv;
                }
            }
        }
    }
    dx
}

/// Filtered statistics shared by the SSIM value and gradient paths.
struct SsimMaps {
    u1: Array3<f32>,
    u2: Array3<f32>,
    v1: Array3<f32>,
    v2: Array3<f32>,
    v12: Array3<f32>,
}

fn ssim_maps(a: &Array3<f32>, b: &Array3<f32>, win: &[f32; WIN]) -> SsimMaps {
    SsimMaps {
        u1: filter_valid(a, win),
        u2: filter_valid(b, win),
        v1: filter_valid(&(a * a), win),
        v2: filter_valid(&(b * b), win),
        v12: filter_valid(&(a * b), win),
    }
}

fn check_pair(a: &Array3<f32>, b: &Array3<f32>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!(
            "image pair shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (_, h, w) = a.dim();
    if h < WIN || w < WIN {
        return Err(Error::shape(format!(
            "image {h}x{w} smaller than the {WIN}x{WIN} SSIM window"
        )));
    }
    Ok(())
}

/// Single-scale structural similarity in `[-1, 1]`. `ssim(I, I)` is exactly
/// 1 because numerator and denominator are computed from bitwise-identical
/// subexpressions.
pub fn ssim(a: &Array3<f32>, b: &Array3<f32>) -> Result<f64> {
    check_pair(a, b)?;
    let win = gaussian_window();
    let maps = ssim_maps(a, b, &win);
    let mut acc = 0f64;
    let mut n = 0usize;
    ndarray::Zip::from(&maps.u1)
        .and(&maps.u2)
        .and(&maps.v1)
        .and(&maps.v2)
        .and(&maps.v12)
        .for_each(|&u1, &u2, &v1, &v2, &v12| {
            let (a1, b1, a2, b2) = ssim_terms(u1, u2, v1, v2, v12);
            acc += ((a1 * a2) / (b1 * b2)) as f64;
            n += 1;
        });
    Ok(acc / n as f64)
}

/// Luminance and contrast-structure terms at one map position, structured so
/// that identical inputs give `a1 == b1` and `a2 == b2` bitwise.
#[inline]
fn ssim_terms(u1: f32, u2: f32, v1: f32, v2: f32, v12: f32) -> (f32, f32, f32, f32) {
    let a1 = 2.0 * (u1 * u2) + C1;
    let b1 = (u1 * u1 + u2 * u2) + C1;
    let d12 = v12 - u1 * u2;
    let a2 = 2.0 * d12 + C2;
    let b2 = ((v1 - u1 * u1) + (v2 - u2 * u2)) + C2;
    (a1, b1, a2, b2)
}

/// SSIM value plus gradients with respect to both images.
pub fn ssim_with_grad(
    a: &Array3<f32>,
    b: &Array3<f32>,
) -> Result<(f64, Array3<f32>, Array3<f32>)> {
    check_pair(a, b)?;
    let win = gaussian_window();
    let (_, h, w) = a.dim();
    let maps = ssim_maps(a, b, &win);
    let dim = maps.u1.dim();
    let n = dim.0 * dim.1 * dim.2;
    let wgt = 1.0f32 / n as f32;

    let mut value = 0f64;
    let mut gu1 = Array3::<f32>::zeros(dim);
    let mut gu2 = Array3::<f32>::zeros(dim);
    let mut gv1 = Array3::<f32>::zeros(dim);
    let mut gv2 = Array3::<f32>::zeros(dim);
    let mut gv12 = Array3::<f32>::zeros(dim);

    ndarray::Zip::indexed(&maps.u1)
        .and(&maps.u2)
        .and(&maps.v1)
        .and(&maps.v2)
        .and(&maps.v12)
        .for_each(|idx, &u1, &u2, &v1, &v2, &v12| {
            let (a1, b1, a2, b2) = ssim_terms(u1, u2, v1, v2, v12);
            let s = (a1 * a2) / (b1 * b2);
            value += s as f64;
            // d s / d u: both difference factors vanish bitwise at a == b.
            let ea = a2 - a1;
            let eb = b2 - b1;
            let c = 2.0 * wgt / (b1 * b2);
            gu1[idx] = c * (u2 * ea - u1 * (s * eb));
            gu2[idx] = c * (u1 * ea - u2 * (s * eb));
            // d s / d v terms, phrased so gv12 == -2 * gv1 bitwise at a == b.
            let q = a1 / b1;
            let r = s / b2;
            let rv = wgt * r;
            gv1[idx] = -rv;
            gv2[idx] = -rv;
            gv12[idx] = 2.0 * (wgt * (q / b2));
        });

    let fu1 = filter_valid_adjoint(&gu1, &win, h, w);
    let fu2 = filter_valid_adjoint(&gu2, &win, h, w);
    let fv1 = filter_valid_adjoint(&gv1, &win, h, w);
    let fv2 = filter_valid_adjoint(&gv2, &win, h, w);
    let fv12 = filter_valid_adjoint(&gv12, &win, h, w);

    let mut da = Array3::<f32>::zeros(a.dim());
    let mut db = Array3::<f32>::zeros(a.dim());
    ndarray::Zip::from(&mut da)
        .and(&fu1)
        .and(&fv1)
        .and(&fv12)
        .and(a)
        .and(b)
        .for_each(|d, &f_u, &f_v, &f_x, &av, &bv| {
            *d = f_u + 2.0 * av * f_v + bv * f_x;
        });
    ndarray::Zip::from(&mut db)
        .and(&fu2)
        .and(&fv2)
        .and(&fv12)
        .and(b)
        .and(a)
        .for_each(|d, &f_u, &f_v, &f_x, &bv, &av| {
            *d = f_u + 2.0 * bv * f_v + av * f_x;
        });
    Ok((value / n as f64, da, db))
}

// ---------------------------------------------------------------------------
// Multi-scale SSIM
// ---------------------------------------------------------------------------

/// 2x2 average pooling with stride 2; trailing odd rows/columns are dropped.
fn avg_pool2(x: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    Array3::from_shape_fn((c, oh, ow), |(ch, i, j)| {
        (x[(ch, 2 * i, 2 * j)]
            + x[(ch, 2 * i, 2 * j + 1)]
            + x[(ch, 2 * i + 1, 2 * j)]
            + x[(ch, 2 * i + 1, 2 * j + 1)])
            / 4.0
    })
}

fn avg_pool2_backward(dy: &Array3<f32>, h: usize, w: usize) -> Array3<f32> {
    let (c, oh, ow) = dy.dim();
    let mut dx = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let g = dy[(ch, i, j)] / 4.0;
                dx[(ch, 2 * i, 2 * j)] = g;
                dx[(ch, 2 * i, 2 * j + 1)] = g;
                dx[(ch, 2 * i + 1, 2 * j)] = g;
                dx[(ch, 2 * i + 1, 2 * j + 1)] = g;
            }
        }
    }
    dx
}

fn ms_weights(scales: usize) -> Vec<f64> {
    let raw = &MS_WEIGHTS[..scales];
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|w| w / sum).collect()
}

fn check_ms(a: &Array3<f32>, b: &Array3<f32>, scales: usize) -> Result<()> {
    check_pair(a, b)?;
    if scales == 0 || scales > MS_WEIGHTS.len() {
        return Err(Error::config(format!(
            "ms-ssim: {scales} scales outside 1..={}",
            MS_WEIGHTS.len()
        )));
    }
    let (_, h, w) = a.dim();
    let need = WIN << (scales - 1);
    if h < need || w < need {
        return Err(Error::config(format!(
            "ms-ssim: {h}x{w} image too small for {scales} scales \
             (needs at least {need} per side)"
        )));
    }
    Ok(())
}

/// Contrast-structure mean and (optionally) luminance mean at one scale.
fn scale_stats(maps: &SsimMaps, with_lum: bool) -> (f64, f64) {
    let mut cs = 0f64;
    let mut lum = 0f64;
    let mut n = 0usize;
    ndarray::Zip::from(&maps.u1)
        .and(&maps.u2)
        .and(&maps.v1)
        .and(&maps.v2)
        .and(&maps.v12)
        .for_each(|&u1, &u2, &v1, &v2, &v12| {
            let (a1, b1, a2, b2) = ssim_terms(u1, u2, v1, v2, v12);
            cs += (a2 / b2) as f64;
            if with_lum {
                lum += (a1 / b1) as f64;
            }
            n += 1;
        });
    (cs / n as f64, if with_lum { lum / n as f64 } else { 1.0 })
}

/// Multi-scale SSIM: contrast-structure terms at every scale, luminance at
/// the coarsest, combined with the standard exponents (renormalised when
/// fewer than five scales are used).
pub fn ms_ssim(a: &Array3<f32>, b: &Array3<f32>, scales: usize) -> Result<f64> {
    check_ms(a, b, scales)?;
    let win = gaussian_window();
    let weights = ms_weights(scales);
    let mut ca = a.clone();
    let mut cb = b.clone();
    let mut value = 1f64;
    for (j, wj) in weights.iter().enumerate() {
        let last = j + 1 == scales;
        let maps = ssim_maps(&ca, &cb, &win);
        let (cs, lum) = scale_stats(&maps, last);
        let cs = cs.max(0.0);
        value *= cs.powf(*wj);
        if last {
            value *= lum.max(0.0).powf(*wj);
        } else {
            ca = avg_pool2(&ca);
            cb = avg_pool2(&cb);
        }
    }
    Ok(value)
}

/// MS-SSIM with gradients for both images.
pub fn ms_ssim_with_grad(
    a: &Array3<f32>,
    b: &Array3<f32>,
    scales: usize,
) -> Result<(f64, Array3<f32>, Array3<f32>)> {
    check_ms(a, b, scales)?;
    let win = gaussian_window();
    let weights = ms_weights(scales);

    struct Scale {
        a: Array3<f32>,
        b: Array3<f32>,
        maps: SsimMaps,
        cs: f64,
        lum: f64,
    }
    let mut stack: Vec<Scale> = Vec::with_capacity(scales);
    let mut ca = a.clone();
    let mut cb = b.clone();
    for j in 0..scales {
        let last = j + 1 == scales;
        let maps = ssim_maps(&ca, &cb, &win);
        let (cs, lum) = scale_stats(&maps, last);
        let (na, nb) = if last {
            (ca.clone(), cb.clone())
        } else {
            (avg_pool2(&ca), avg_pool2(&cb))
        };
        stack.push(Scale { a: std::mem::replace(&mut ca, na), b: std::mem::replace(&mut cb, nb), maps, cs, lum });
    }

    let mut value = 1f64;
    for (j, sc) in stack.iter().enumerate() {
        value *= sc.cs.max(0.0).powf(weights[j]);
        if j + 1 == scales {
            value *= sc.lum.max(0.0).powf(weights[j]);
        }
    }

    // Backward: log-derivative of the product, chained through the pools.
    let mut da_coarse: Option<Array3<f32>> = None;
    let mut db_coarse: Option<Array3<f32>> = None;
    for j in (0..scales).rev() {
        let sc = &stack[j];
        let last = j + 1 == scales;
        // d value / d cs_j and, at the last scale, d value / d lum.
        let cs_factor = if sc.cs > 1e-12 { value * weights[j] / sc.cs } else { 0.0 };
        let lum_factor = if last && sc.lum > 1e-12 { value * weights[j] / sc.lum } else { 0.0 };
        let (mut da, mut db) =
            scale_backward(&sc.maps, &sc.a, &sc.b, &win, cs_factor as f32, lum_factor as f32);
        if let (Some(ua), Some(ub)) = (&da_coarse, &db_coarse) {
            let (_, h, w) = sc.a.dim();
            da += &avg_pool2_backward(ua, h, w);
            db += &avg_pool2_backward(ub, h, w);
        }
        da_coarse = Some(da);
        db_coarse = Some(db);
    }
    Ok((value, da_coarse.unwrap(), db_coarse.unwrap()))
}

/// Gradient of `cs_factor * mean(cs) + lum_factor * mean(lum)` at one scale.
fn scale_backward(
    maps: &SsimMaps,
    a: &Array3<f32>,
    b: &Array3<f32>,
    win: &[f32; WIN],
    cs_factor: f32,
    lum_factor: f32,
) -> (Array3<f32>, Array3<f32>) {
    let dim = maps.u1.dim();
    let n = dim.0 * dim.1 * dim.2;
    let wc = cs_factor / n as f32;
    let wl = lum_factor / n as f32;
    let (_, h, w) = a.dim();

    let mut gu1 = Array3::<f32>::zeros(dim);
    let mut gu2 = Array3::<f32>::zeros(dim);
    let mut gv1 = Array3::<f32>::zeros(dim);
    let mut gv2 = Array3::<f32>::zeros(dim);
    let mut gv12 = Array3::<f32>::zeros(dim);
    ndarray::Zip::indexed(&maps.u1)
        .and(&maps.u2)
        .and(&maps.v1)
        .and(&maps.v2)
        .and(&maps.v12)
        .for_each(|idx, &u1, &u2, &v1, &v2, &v12| {
            let (a1, b1, a2, b2) = ssim_terms(u1, u2, v1, v2, v12);
            // Contrast-structure part: cs = a2 / b2.
            let q2 = a2 / b2;
            let r = 1.0 / b2;
            // d cs/d u1 = (2/b2) * (u1*q2 - u2): vanishes bitwise at a == b.
            gu1[idx] = wc * (2.0 * r) * (u1 * q2 - u2);
            gu2[idx] = wc * (2.0 * r) * (u2 * q2 - u1);
            // d cs/d v1 = -q2/b2 and d cs/d v12 = 2/b2; the shared wc * r
            // factor makes gv12 == -2 * gv1 bitwise at a == b where q2 == 1.
            let rv = wc * r;
            gv1[idx] = -(q2 * rv);
            gv2[idx] = -(q2 * rv);
            gv12[idx] = 2.0 * rv;
            if wl != 0.0 {
                // Luminance part: l = a1 / b1.
                let q1 = a1 / b1;
                let rl = 1.0 / b1;
                gu1[idx] += wl * (2.0 * rl) * (u2 - u1 * q1);
                gu2[idx] += wl * (2.0 * rl) * (u1 - u2 * q1);
            }
        });

    let fu1 = filter_valid_adjoint(&gu1, win, h, w);
    let fu2 = filter_valid_adjoint(&gu2, win, h, w);
    let fv1 = filter_valid_adjoint(&gv1, win, h, w);
    let fv2 = filter_valid_adjoint(&gv2, win, h, w);
    let fv12 = filter_valid_adjoint(&gv12, win, h, w);

    let mut da = Array3::<f32>::zeros(a.dim());
    let mut db = Array3::<f32>::zeros(a.dim());
    ndarray::Zip::from(&mut da)
        .and(&fu1)
        .and(&fv1)
        .and(&fv12)
        .and(a)
        .and(b)
        .for_each(|d, &f_u, &f_v, &f_x, &av, &bv| {
            *d = f_u + 2.0 * av * f_v + bv * f_x;
        });
    ndarray::Zip::from(&mut db)
        .and(&fu2)
        .and(&fv2)
        .and(&fv12)
        .and(b)
        .and(a)
        .for_each(|d, &f_u, &f_v, &f_x, &bv, &av| {
            *d = f_u + 2.0 * bv * f_v + av * f_x;
        });
    (da, db)
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Weighting of the pixel and structural terms of the restoration loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_pix: f32,
    pub lambda_str: f32,
    /// Use multi-scale SSIM for the structural term.
    pub multi_scale: bool,
    /// Number of scales when `multi_scale` is set.
    pub ms_scales: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_pix: 10.0, lambda_str: 1.0, multi_scale: false, ms_scales: 3 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_pix >= 0.0) || !(self.lambda_str >= 0.0) {
            return Err(Error::config("loss weights must be nonnegative"));
        }
        Ok(())
    }
}

/// Mean squared error over all pixels, accumulated in f64.
pub fn mse(a: &Array3<f32>, b: &Array3<f32>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("mse: shape mismatch"));
    }
    let mut acc = 0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = (x - y) as f64;
        acc += d * d;
    }
    Ok(acc / a.len() as f64)
}

/// Stage-2 restoration loss `lambda_pix * MSE + lambda_str * (1 - SSIM)`.
pub fn stage2_loss(re: &Array3<f32>, co: &Array3<f32>, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    let structural = if w.multi_scale {
        ms_ssim(re, co, w.ms_scales)?
    } else {
        ssim(re, co)?
    };
    Ok(w.lambda_pix as f64 * mse(re, co)? + w.lambda_str as f64 * (1.0 - structural))
}

/// Loss plus its gradient with respect to the restored image.
pub fn stage2_loss_with_grad(
    re: &Array3<f32>,
    co: &Array3<f32>,
    w: &LossWeights,
) -> Result<(f64, Array3<f32>)> {
    w.validate()?;
    let (sval, ds_dre, _) = if w.multi_scale {
        ms_ssim_with_grad(re, co, w.ms_scales)?
    } else {
        ssim_with_grad(re, co)?
    };
    let n = re.len() as f32;
    let mut grad = Array3::<f32>::zeros(re.dim());
    ndarray::Zip::from(&mut grad)
        .and(re)
        .and(co)
        .and(&ds_dre)
        .for_each(|g, &x, &y, &ds| {
            // d/dx lambda_pix * mean((x-y)^2) - lambda_str * ds.
            *g = w.lambda_pix * 2.0 * (x - y) / n - w.lambda_str * ds;
        });
    let value = w.lambda_pix as f64 * mse(re, co)? + w.lambda_str as f64 * (1.0 - sval);
    Ok((value, grad))
}

// ---------------------------------------------------------------------------
// Restorer network
// ---------------------------------------------------------------------------

/// 3-level residual U-Net. `base` is the channel width of the top level;
/// lower levels double it. Upsampling is nearest-neighbour plus conv.
#[derive(Debug, Clone)]
pub struct Restorer {
    pub enc1a: Conv2d,
    pub enc1b: Conv2d,
    pub down1: Conv2d,
    pub enc2: Conv2d,
    pub down2: Conv2d,
    pub bott: Conv2d,
    pub up1: Conv2d,
    pub fuse1: Conv2d,
    pub up2: Conv2d,
    pub fuse2: Conv2d,
    pub head: Conv2d,
    pub frozen: bool,
}

/// Gradients matching [`Restorer`].
#[derive(Debug, Clone)]
pub struct RestorerGrad {
    pub enc1a: Conv2dGrad,
    pub enc1b: Conv2dGrad,
    pub down1: Conv2dGrad,
    pub enc2: Conv2dGrad,
    pub down2: Conv2dGrad,
    pub bott: Conv2dGrad,
    pub up1: Conv2dGrad,
    pub fuse1: Conv2dGrad,
    pub up2: Conv2dGrad,
    pub fuse2: Conv2dGrad,
    pub head: Conv2dGrad,
}

/// Forward intermediates needed by the backward pass.
pub struct RestorerCtx {
    x0: Array3<f32>,
    y1a: Array3<f32>,
    y1b: Array3<f32>,
    yd1: Array3<f32>,
    y2: Array3<f32>,
    yd2: Array3<f32>,
    yb: Array3<f32>,
    u1in: Array3<f32>,
    yu1: Array3<f32>,
    cat1: Array3<f32>,
    yf1: Array3<f32>,
    u2in: Array3<f32>,
    yu2: Array3<f32>,
    cat2: Array3<f32>,
    yf2: Array3<f32>,
    pre: Array3<f32>,
}

impl Restorer {
    pub fn new(base: usize, rng: &mut impl Rng) -> Self {
        assert!(base > 0);
        let c = base;
        Restorer {
            enc1a: Conv2d::new(3, c, 3, 1, 1, Init::He, rng),
            enc1b: Conv2d::new(c, c, 3, 1, 1, Init::He, rng),
            down1: Conv2d::new(c, 2 * c, 3, 2, 1, Init::He, rng),
            enc2: Conv2d::new(2 * c, 2 * c, 3, 1, 1, Init::He, rng),
            down2: Conv2d::new(2 * c, 4 * c, 3, 2, 1, Init::He, rng),
            bott: Conv2d::new(4 * c, 4 * c, 3, 1, 1, Init::He, rng),
            up1: Conv2d::new(4 * c, 2 * c, 3, 1, 1, Init::He, rng),
            fuse1: Conv2d::new(4 * c, 2 * c, 3, 1, 1, Init::He, rng),
            up2: Conv2d::new(2 * c, c, 3, 1, 1, Init::He, rng),
            fuse2: Conv2d::new(2 * c, c, 3, 1, 1, Init::He, rng),
            head: Conv2d::new(c, 3, 3, 1, 1, Init::Zero, rng),
            frozen: false,
        }
    }

    pub fn grad(&self) -> RestorerGrad {
        RestorerGrad {
            enc1a: self.enc1a.grad(),
            enc1b: self.enc1b.grad(),
            down1: self.down1.grad(),
            enc2: self.enc2.grad(),
            down2: self.down2.grad(),
            bott: self.bott.grad(),
            up1: self.up1.grad(),
            fuse1: self.fuse1.grad(),
            up2: self.up2.grad(),
            fuse2: self.fuse2.grad(),
            head: self.head.grad(),
        }
    }

    fn check_input(&self, x: &Array3<f32>) -> Result<()> {
        let (c, h, w) = x.dim();
        if c != 3 {
            return Err(Error::shape(format!("restore: expected 3 channels, got {c}")));
        }
        if h % 4 != 0 || w % 4 != 0 || h < 8 || w < 8 {
            return Err(Error::shape(format!(
                "restore: {h}x{w} input must be at least 8x8 with sides divisible by 4"
            )));
        }
        Ok(())
    }

    /// Restores an image. Same shape out, values clamped to `[0, 1]`.
    pub fn restore(&self, x: &Array3<f32>) -> Result<Array3<f32>> {
        Ok(self.forward_with_ctx(x)?.0)
    }

    pub fn forward_with_ctx(&self, x: &Array3<f32>) -> Result<(Array3<f32>, RestorerCtx)> {
        self.check_input(x)?;
        let y1a = nn::relu(&self.enc1a.forward(x)?);
        let y1b = nn::relu(&self.enc1b.forward(&y1a)?);
        let yd1 = nn::relu(&self.down1.forward(&y1b)?);
        let y2 = nn::relu(&self.enc2.forward(&yd1)?);
        let yd2 = nn::relu(&self.down2.forward(&y2)?);
        let yb = nn::relu(&self.bott.forward(&yd2)?);
        let u1in = nn::upsample2(&yb);
        let yu1 = nn::relu(&self.up1.forward(&u1in)?);
        let cat1 = nn::concat_channels(&yu1, &y2)?;
        let yf1 = nn::relu(&self.fuse1.forward(&cat1)?);
        let u2in = nn::upsample2(&yf1);
        let yu2 = nn::relu(&self.up2.forward(&u2in)?);
        let cat2 = nn::concat_channels(&yu2, &y1b)?;
        let yf2 = nn::relu(&self.fuse2.forward(&cat2)?);
        let delta = self.head.forward(&yf2)?;
        let pre = x + &delta;
        let out = nn::clamp01(&pre);
        Ok((
            out,
            RestorerCtx {
                x0: x.clone(),
                y1a,
                y1b,
                yd1,
                y2,
                yd2,
                yb,
                u1in,
                yu1,
                cat1,
                yf1,
                u2in,
                yu2,
                cat2,
                yf2,
                pre,
            },
        ))
    }

    /// Backward pass; returns the input gradient and fills `grad`.
    pub fn backward(
        &self,
        ctx: &RestorerCtx,
        dout: &Array3<f32>,
        grad: &mut RestorerGrad,
    ) -> Result<Array3<f32>> {
        let dpre = nn::clamp01_backward(dout, &ctx.pre);
        // pre = x0 + delta: gradient splits into the residual path and the
        // network path.
        let ddelta = dpre.clone();
        let dyf2 = self.head.backward(&ctx.yf2, &ddelta, &mut grad.head)?;
        let dcat2 = self.fuse2.backward(
            &ctx.cat2,
            &nn::relu_backward(&dyf2, &ctx.yf2),
            &mut grad.fuse2,
        )?;
        let (dyu2, dy1b_skip) = nn::concat_backward(&dcat2, self.up2.out_ch());
        let du2in = self.up2.backward(
            &ctx.u2in,
            &nn::relu_backward(&dyu2, &ctx.yu2),
            &mut grad.up2,
        )?;
        let dyf1 = nn::upsample2_backward(&du2in)?;
        let dcat1 = self.fuse1.backward(
            &ctx.cat1,
            &nn::relu_backward(&dyf1, &ctx.yf1),
            &mut grad.fuse1,
        )?;
        let (dyu1, dy2_skip) = nn::concat_backward(&dcat1, self.up1.out_ch());
        let du1in = self.up1.backward(
            &ctx.u1in,
            &nn::relu_backward(&dyu1, &ctx.yu1),
            &mut grad.up1,
        )?;
        let dyb = nn::upsample2_backward(&du1in)?;
        let dyd2 = self.bott.backward(
            &ctx.yd2,
            &nn::relu_backward(&dyb, &ctx.yb),
            &mut grad.bott,
        )?;
        let dy2 = self.down2.backward(
            &ctx.y2,
            &nn::relu_backward(&dyd2, &ctx.yd2),
            &mut grad.down2,
        )? + &dy2_skip;
        let dyd1 = self.enc2.backward(
            &ctx.yd1,
            &nn::relu_backward(&dy2, &ctx.y2),
            &mut grad.enc2,
        )?;
        let dy1b = self.down1.backward(
            &ctx.y1b,
            &nn::relu_backward(&dyd1, &ctx.yd1),
            &mut grad.down1,
        )? + &dy1b_skip;
        let dy1a = self.enc1b.backward(
            &ctx.y1a,
            &nn::relu_backward(&dy1b, &ctx.y1b),
            &mut grad.enc1b,
        )?;
        let dx_net = self.enc1a.backward(
            &ctx.x0,
            &nn::relu_backward(&dy1a, &ctx.y1a),
            &mut grad.enc1a,
        )?;
        Ok(dx_net + &dpre)
    }

    fn layers(&self) -> [(&'static str, &Conv2d); 11] {
        [
            ("enc1a", &self.enc1a),
            ("enc1b", &self.enc1b),
            ("down1", &self.down1),
            ("enc2", &self.enc2),
            ("down2", &self.down2),
            ("bott", &self.bott),
            ("up1", &self.up1),
            ("fuse1", &self.fuse1),
            ("up2", &self.up2),
            ("fuse2", &self.fuse2),
            ("head", &self.head),
        ]
    }

    fn layers_mut(&mut self) -> [(&'static str, &mut Conv2d); 11] {
        [
            ("enc1a", &mut self.enc1a),
            ("enc1b", &mut self.enc1b),
            ("down1", &mut self.down1),
            ("enc2", &mut self.enc2),
            ("down2", &mut self.down2),
            ("bott", &mut self.bott),
            ("up1", &mut self.up1),
            ("fuse1", &mut self.fuse1),
            ("up2", &mut self.up2),
            ("fuse2", &mut self.fuse2),
            ("head", &mut self.head),
        ]
    }

    /// Applies AdamW to every layer in fixed declaration order.
    pub fn apply_grads(&mut self, grads: &RestorerGrad, opt: &mut nn::AdamW) {
        assert!(!self.frozen, "restorer is frozen");
        nn::update_conv(opt, &mut self.enc1a, &grads.enc1a);
        nn::update_conv(opt, &mut self.enc1b, &grads.enc1b);
        nn::update_conv(opt, &mut self.down1, &grads.down1);
        nn::update_conv(opt, &mut self.enc2, &grads.enc2);
        nn::update_conv(opt, &mut self.down2, &grads.down2);
        nn::update_conv(opt, &mut self.bott, &grads.bott);
        nn::update_conv(opt, &mut self.up1, &grads.up1);
        nn::update_conv(opt, &mut self.fuse1, &grads.fuse1);
        nn::update_conv(opt, &mut self.up2, &grads.up2);
        nn::update_conv(opt, &mut self.fuse2, &grads.fuse2);
        nn::update_conv(opt, &mut self.head, &grads.head);
    }

    /// Named tensors in fixed order, for checkpointing and digests.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out = Vec::new();
        for (name, layer) in self.layers() {
            out.push((
                format!("restorer.{name}.w"),
                layer.w.shape().to_vec(),
                layer.w.as_slice().unwrap().to_vec(),
            ));
            out.push((
                format!("restorer.{name}.b"),
                layer.b.shape().to_vec(),
                layer.b.as_slice().unwrap().to_vec(),
            ));
        }
        out
    }

    /// Restores tensors written by [`Restorer::named_tensors`].
    pub fn load_named(&mut self, tensors: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
        for (name, layer) in self.layers_mut() {
            for (suffix, arr) in [("w", 0), ("b", 1)] {
                let full = format!("restorer.{name}.{suffix}");
                let t = tensors
                    .iter()
                    .find(|(n, _, _)| *n == full)
                    .ok_or_else(|| Error::MalformedCheckpoint(format!("missing tensor {full}")))?;
                let (want_shape, data): (Vec<usize>, &Vec<f32>) = if arr == 0 {
                    (layer.w.shape().to_vec(), &t.2)
                } else {
                    (layer.b.shape().to_vec(), &t.2)
                };
                if t.1 != want_shape || data.len() != want_shape.iter().product::<usize>() {
                    return Err(Error::MalformedCheckpoint(format!(
                        "tensor {full}: shape {:?}, expected {:?}",
                        t.1, want_shape
                    )));
                }
                if arr == 0 {
                    layer.w.as_slice_mut().unwrap().copy_from_slice(data);
                } else {
                    layer.b.as_slice_mut().unwrap().copy_from_slice(data);
                }
            }
        }
        Ok(())
    }
}
