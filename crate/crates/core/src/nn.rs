//! Layer primitives: 2D convolution (plain and transposed), GELU, GDN/IGDN,
//! and the Adam step. Forward values are f32; every reduction accumulates
//! in f64 to bound drift.

use crate::error::{HvqError, Result};
use crate::par;
use crate::tensor::Tensor;

/// Per-edge padding, in (top, bottom, left, right) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn symmetric(p: usize) -> Self {
        Self {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    /// Padding that keeps spatial size for an even kernel at stride 1
    /// (total pad k-1, split low/high).
    pub fn same_even(k: usize) -> Self {
        let total = k - 1;
        let lo = total / 2;
        let hi = total - lo;
        Self {
            top: lo,
            bottom: hi,
            left: lo,
            right: hi,
        }
    }
}

/// Convolution geometry shared by the plain and transposed variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: Padding,
    /// Extra size added to the output of a transposed convolution; ignored
    /// by the plain convolution.
    pub out_pad: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, pad: Padding) -> Self {
        Self {
            stride,
            pad,
            out_pad: 0,
        }
    }

    pub fn with_out_pad(mut self, out_pad: usize) -> Self {
        self.out_pad = out_pad;
        self
    }
}

/// A convolution layer: kernel is [out_ch, in_ch, kh, kw], bias is [out_ch].
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub geom: ConvGeom,
    pub transposed: bool,
}

/// GDN / IGDN parameters. `beta` is [C] (clamped above `BETA_MIN`),
/// `gamma` is [C, C] (clamped non-negative).
#[derive(Debug, Clone)]
pub struct GdnLayer {
    pub beta: Tensor,
    pub gamma: Tensor,
    pub inverse: bool,
}

pub const BETA_MIN: f32 = 1e-6;

pub fn conv2d_out_size(h: usize, w: usize, kh: usize, kw: usize, g: &ConvGeom) -> (usize, usize) {
    let ho = (h + g.pad.top + g.pad.bottom - kh) / g.stride + 1;
    let wo = (w + g.pad.left + g.pad.right - kw) / g.stride + 1;
    (ho, wo)
}

pub fn convt2d_out_size(h: usize, w: usize, kh: usize, kw: usize, g: &ConvGeom) -> (usize, usize) {
    let ho = (h - 1) * g.stride + kh + g.out_pad - g.pad.top - g.pad.bottom;
    let wo = (w - 1) * g.stride + kw + g.out_pad - g.pad.left - g.pad.right;
    (ho, wo)
}

fn check_conv_inputs(input: &Tensor, kernel: &Tensor, bias: &Tensor, in_ch: usize) -> Result<()> {
    if input.shape().len() != 4 {
        return Err(HvqError::ShapeMismatch(format!(
            "conv input must be [N,C,H,W], got {:?}",
            input.shape()
        )));
    }
    if kernel.shape().len() != 4 {
        return Err(HvqError::ShapeMismatch(format!(
            "conv kernel must be 4D, got {:?}",
            kernel.shape()
        )));
    }
    if input.dim(1) != in_ch {
        return Err(HvqError::ShapeMismatch(format!(
            "input has {} channels, layer expects {}",
            input.dim(1),
            in_ch
        )));
    }
    if bias.numel() != kernel.dim(0) && bias.numel() != kernel.dim(1) {
        return Err(HvqError::ShapeMismatch(format!(
            "bias has {} entries for kernel {:?}",
            bias.numel(),
            kernel.shape()
        )));
    }
    input.assert_finite("conv2d input")?;
    Ok(())
}

/// Discrete cross-correlation plus bias.
pub fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    g: &ConvGeom,
) -> Result<Tensor> {
    check_conv_inputs(input, kernel, bias, kernel.dim(1))?;
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (o, kh, kw) = (kernel.dim(0), kernel.dim(2), kernel.dim(3));
    let (ho, wo) = conv2d_out_size(h, w, kh, kw, g);
    let s = g.stride;
    let (pt, pl) = (g.pad.top as isize, g.pad.left as isize);

    let x = input.data();
    let k = kernel.data();
    let b = bias.data();
    let mut out = vec![0.0f32; n * o * ho * wo];

    // One chunk per (n, o) output plane.
    par::for_each_chunk(&mut out, ho * wo, |plane, dst| {
        let ni = plane / o;
        let oi = plane % o;
        let mut acc = vec![f64::from(b[oi]); ho * wo];
        for ci in 0..c {
            let xin = &x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            let kbase = (oi * c + ci) * kh * kw;
            for ki in 0..kh {
                for kj in 0..kw {
                    let wgt = f64::from(k[kbase + ki * kw + kj]);
                    if wgt == 0.0 {
                        continue;
                    }
                    for row in 0..ho {
                        let ii = (row * s) as isize + ki as isize - pt;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let src = &xin[ii as usize * w..(ii as usize + 1) * w];
                        let dst_row = &mut acc[row * wo..(row + 1) * wo];
                        for col in 0..wo {
                            let jj = (col * s) as isize + kj as isize - pl;
                            if jj >= 0 && jj < w as isize {
                                dst_row[col] += wgt * f64::from(src[jj as usize]);
                            }
                        }
                    }
                }
            }
        }
        for (d, a) in dst.iter_mut().zip(acc.iter()) {
            *d = *a as f32;
        }
    });
    Tensor::new(vec![n, o, ho, wo], out)
}

/// Gradients of `conv2d_forward` with respect to input, kernel, and bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    gout: &Tensor,
    g: &ConvGeom,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (o, kh, kw) = (kernel.dim(0), kernel.dim(2), kernel.dim(3));
    let (ho, wo) = (gout.dim(2), gout.dim(3));
    let s = g.stride;
    let (pt, pl) = (g.pad.top as isize, g.pad.left as isize);

    let x = input.data();
    let k = kernel.data();
    let go = gout.data();

    let mut gin = vec![0.0f32; n * c * h * w];
    par::for_each_chunk(&mut gin, h * w, |plane, dst| {
        let ni = plane / c;
        let ci = plane % c;
        let mut acc = vec![0.0f64; h * w];
        for oi in 0..o {
            let gplane = &go[(ni * o + oi) * ho * wo..(ni * o + oi + 1) * ho * wo];
            let kbase = (oi * c + ci) * kh * kw;
            for ki in 0..kh {
                for kj in 0..kw {
                    let wgt = f64::from(k[kbase + ki * kw + kj]);
                    if wgt == 0.0 {
                        continue;
                    }
                    for row in 0..ho {
                        let ii = (row * s) as isize + ki as isize - pt;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for col in 0..wo {
                            let jj = (col * s) as isize + kj as isize - pl;
                            if jj >= 0 && jj < w as isize {
                                acc[ii as usize * w + jj as usize] +=
                                    wgt * f64::from(gplane[row * wo + col]);
                            }
                        }
                    }
                }
            }
        }
        for (d, a) in dst.iter_mut().zip(acc.iter()) {
            *d = *a as f32;
        }
    });

    let mut gk = vec![0.0f32; o * c * kh * kw];
    par::for_each_chunk(&mut gk, kh * kw, |pair, dst| {
        let oi = pair / c;
        let ci = pair % c;
        let mut acc = vec![0.0f64; kh * kw];
        for ni in 0..n {
            let xin = &x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            let gplane = &go[(ni * o + oi) * ho * wo..(ni * o + oi + 1) * ho * wo];
            for ki in 0..kh {
                for kj in 0..kw {
                    let mut sum = 0.0f64;
                    for row in 0..ho {
                        let ii = (row * s) as isize + ki as isize - pt;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for col in 0..wo {
                            let jj = (col * s) as isize + kj as isize - pl;
                            if jj >= 0 && jj < w as isize {
                                sum += f64::from(gplane[row * wo + col])
                                    * f64::from(xin[ii as usize * w + jj as usize]);
                            }
                        }
                    }
                    acc[ki * kw + kj] += sum;
                }
            }
        }
        for (d, a) in dst.iter_mut().zip(acc.iter()) {
            *d = *a as f32;
        }
    });

    let mut gb = vec![0.0f32; o];
    for oi in 0..o {
        let mut sum = 0.0f64;
        for ni in 0..n {
            let gplane = &go[(ni * o + oi) * ho * wo..(ni * o + oi + 1) * ho * wo];
            for v in gplane {
                sum += f64::from(*v);
            }
        }
        gb[oi] = sum as f32;
    }

    (
        Tensor::new(vec![n, c, h, w], gin).unwrap(),
        Tensor::new(vec![o, c, kh, kw], gk).unwrap(),
        Tensor::new(vec![o], gb).unwrap(),
    )
}

/// Transposed convolution (the adjoint of `conv2d_forward` in its spatial
/// part). Kernel layout is [out_ch, in_ch, kh, kw] like the plain variant.
pub fn convt2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    g: &ConvGeom,
) -> Result<Tensor> {
    check_conv_inputs(input, kernel, bias, kernel.dim(1))?;
    let (n, ci_n, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (co_n, kh, kw) = (kernel.dim(0), kernel.dim(2), kernel.dim(3));
    let (ho, wo) = convt2d_out_size(h, w, kh, kw, g);
    let s = g.stride;
    let (pt, pl) = (g.pad.top as isize, g.pad.left as isize);

    let x = input.data();
    let k = kernel.data();
    let b = bias.data();
    let mut out = vec![0.0f32; n * co_n * ho * wo];

    par::for_each_chunk(&mut out, ho * wo, |plane, dst| {
        let ni = plane / co_n;
        let co = plane % co_n;
        let mut acc = vec![f64::from(b[co]); ho * wo];
        for ci in 0..ci_n {
            let xin = &x[(ni * ci_n + ci) * h * w..(ni * ci_n + ci + 1) * h * w];
            let kbase = (co * ci_n + ci) * kh * kw;
            for ki in 0..kh {
                for kj in 0..kw {
                    let wgt = f64::from(k[kbase + ki * kw + kj]);
                    if wgt == 0.0 {
                        continue;
                    }
                    for i in 0..h {
                        let oi = (i * s) as isize + ki as isize - pt;
                        if oi < 0 || oi >= ho as isize {
                            continue;
                        }
                        let src = &xin[i * w..(i + 1) * w];
                        let arow = &mut acc[oi as usize * wo..(oi as usize + 1) * wo];
                        for j in 0..w {
                            let oj = (j * s) as isize + kj as isize - pl;
                            if oj >= 0 && oj < wo as isize {
                                arow[oj as usize] += wgt * f64::from(src[j]);
                            }
                        }
                    }
                }
            }
        }
        for (d, a) in dst.iter_mut().zip(acc.iter()) {
            *d = *a as f32;
        }
    });
    Tensor::new(vec![n, co_n, ho, wo], out)
}

/// Gradients of `convt2d_forward`.
pub fn convt2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    gout: &Tensor,
    g: &ConvGeom,
) -> (Tensor, Tensor, Tensor) {
    let (n, ci_n, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (co_n, kh, kw) = (kernel.dim(0), kernel.dim(2), kernel.dim(3));
    let (ho, wo) = (gout.dim(2), gout.dim(3));
    let s = g.stride;
    let (pt, pl) = (g.pad.top as isize, g.pad.left as isize);

    let x = input.data();
    let k = kernel.data();
    let go = gout.data();

    let mut gin = vec![0.0f32; n * ci_n * h * w];
    par::for_each_chunk(&mut gin, h * w, |plane, dst| {
        let ni = plane / ci_n;
        let ci = plane % ci_n;
        let mut acc = vec![0.0f64; h * w];
        for co in 0..co_n {
            let gplane = &go[(ni * co_n + co) * ho * wo..(ni * co_n + co + 1) * ho * wo];
            let kbase = (co * ci_n + ci) * kh * kw;
            for ki in 0..kh {
                for kj in 0..kw {
                    let wgt = f64::from(k[kbase + ki * kw + kj]);
                    if wgt == 0.0 {
                        continue;
                    }
                    for i in 0..h {
                        let oi = (i * s) as isize + ki as isize - pt;
                        if oi < 0 || oi >= ho as isize {
                            continue;
                        }
                        for j in 0..w {
                            let oj = (j * s) as isize + kj as isize - pl;
                            if oj >= 0 && oj < wo as isize {
                                acc[i * w + j] +=
                                    wgt * f64::from(gplane[oi as usize * wo + oj as usize]);
                            }
                        }
                    }
                }
            }
        }
        for (d, a) in dst.iter_mut().zip(acc.iter()) {
            *d = *a as f32;
        }
    });

    let mut gk = vec![0.0f32; co_n * ci_n * kh * kw];
    par::for_each_chunk(&mut gk, kh * kw, |pair, dst| {
        let co = pair / ci_n;
        let ci = pair % ci_n;
        let mut acc = vec![0.0f64; kh * kw];
        for ni in 0..n {
            let xin = &x[(ni * ci_n + ci) * h * w..(ni * ci_n + ci + 1) * h * w];
            let gplane = &go[(ni * co_n + co) * ho * wo..(ni * co_n + co + 1) * ho * wo];
            for ki in 0..kh {
                for kj in 0..kw {
                    let mut sum = 0.0f64;
                    for i in 0..h {
                        let oi = (i * s) as isize + ki as isize - pt;
                        if oi < 0 || oi >= ho as isize {
                            continue;
                        }
                        for j in 0..w {
                            let oj = (j * s) as isize + kj as isize - pl;
                            if oj >= 0 && oj < wo as isize {
                                sum += f64::from(xin[i * w + j])
                                    * f64::from(gplane[oi as usize * wo + oj as usize]);
                            }
                        }
                    }
                    acc[ki * kw + kj] += sum;
                }
            }
        }
        for (d, a) in dst.iter_mut().zip(acc.iter()) {
            *d = *a as f32;
        }
    });

    let mut gb = vec![0.0f32; co_n];
    for co in 0..co_n {
        let mut sum = 0.0f64;
        for ni in 0..n {
            for v in &go[(ni * co_n + co) * ho * wo..(ni * co_n + co + 1) * ho * wo] {
                sum += f64::from(*v);
            }
        }
        gb[co] = sum as f32;
    }

    (
        Tensor::new(vec![n, ci_n, h, w], gin).unwrap(),
        Tensor::new(vec![co_n, ci_n, kh, kw], gk).unwrap(),
        Tensor::new(vec![co_n], gb).unwrap(),
    )
}

/// Standard normal CDF via erf.
#[inline]
pub fn phi(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

#[inline]
fn phi_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// GELU in its exact erf form: x * Phi(x).
pub fn gelu_forward(input: &Tensor) -> Result<Tensor> {
    input.assert_finite("gelu input")?;
    let data = input
        .data()
        .iter()
        .map(|&v| {
            let x = f64::from(v);
            (x * phi(x)) as f32
        })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

pub fn gelu_backward(input: &Tensor, gout: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(gout.data())
        .map(|(&v, &g)| {
            let x = f64::from(v);
            ((phi(x) + x * phi_pdf(x)) * f64::from(g)) as f32
        })
        .collect::<Vec<_>>();
    Tensor::new(input.shape().to_vec(), data).unwrap()
}

/// GDN: y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2) per spatial
/// location; IGDN multiplies instead of dividing.
pub fn gdn_forward(input: &Tensor, beta: &Tensor, gamma: &Tensor, inverse: bool) -> Result<Tensor> {
    input.assert_finite("gdn input")?;
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    if beta.numel() != c || gamma.shape() != [c, c] {
        return Err(HvqError::ShapeMismatch(format!(
            "gdn parameters for {} channels, beta {:?}, gamma {:?}",
            c,
            beta.shape(),
            gamma.shape()
        )));
    }
    let x = input.data();
    let b = beta.data();
    let gm = gamma.data();
    let hw = h * w;
    let mut out = vec![0.0f32; n * c * hw];
    par::for_each_chunk(&mut out, c * hw, |ni, dst| {
        let xn = &x[ni * c * hw..(ni + 1) * c * hw];
        let mut sq = vec![0.0f64; c];
        for p in 0..hw {
            for (j, s) in sq.iter_mut().enumerate() {
                let v = f64::from(xn[j * hw + p]);
                *s = v * v;
            }
            for i in 0..c {
                let mut d = f64::from(b[i]);
                let grow = &gm[i * c..(i + 1) * c];
                for (j, s) in sq.iter().enumerate() {
                    d += f64::from(grow[j]) * s;
                }
                assert!(d > 0.0, "gdn denominator must stay positive");
                let xi = f64::from(xn[i * hw + p]);
                dst[i * hw + p] = if inverse {
                    (xi * d.sqrt()) as f32
                } else {
                    (xi / d.sqrt()) as f32
                };
            }
        }
    });
    Tensor::new(vec![n, c, h, w], out)
}

/// Gradients of GDN/IGDN with respect to input, beta, and gamma.
pub fn gdn_backward(
    input: &Tensor,
    beta: &Tensor,
    gamma: &Tensor,
    inverse: bool,
    gout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let x = input.data();
    let b = beta.data();
    let gm = gamma.data();
    let go = gout.data();
    let hw = h * w;

    let mut gin = vec![0.0f32; n * c * hw];
    let mut gbeta = vec![0.0f64; c];
    let mut ggamma = vec![0.0f64; c * c];

    let mut xv = vec![0.0f64; c];
    let mut gv = vec![0.0f64; c];
    let mut dv = vec![0.0f64; c];
    for ni in 0..n {
        let xn = &x[ni * c * hw..(ni + 1) * c * hw];
        let gn = &go[ni * c * hw..(ni + 1) * c * hw];
        for p in 0..hw {
            for j in 0..c {
                xv[j] = f64::from(xn[j * hw + p]);
                gv[j] = f64::from(gn[j * hw + p]);
            }
            for i in 0..c {
                let mut d = f64::from(b[i]);
                let grow = &gm[i * c..(i + 1) * c];
                for j in 0..c {
                    d += f64::from(grow[j]) * xv[j] * xv[j];
                }
                dv[i] = d;
            }
            if !inverse {
                // y_i = x_i d_i^{-1/2}
                for k in 0..c {
                    let mut acc = gv[k] / dv[k].sqrt();
                    for i in 0..c {
                        let di = dv[i];
                        acc -= gv[i] * xv[i] * f64::from(gm[i * c + k]) * xv[k]
                            / (di * di.sqrt());
                    }
                    gin[ni * c * hw + k * hw + p] = acc as f32;
                }
                for i in 0..c {
                    let di = dv[i];
                    let common = -0.5 * gv[i] * xv[i] / (di * di.sqrt());
                    gbeta[i] += common;
                    for j in 0..c {
                        ggamma[i * c + j] += common * xv[j] * xv[j];
                    }
                }
            } else {
                // y_i = x_i d_i^{1/2}
                for k in 0..c {
                    let mut acc = gv[k] * dv[k].sqrt();
                    for i in 0..c {
                        acc += gv[i] * xv[i] * f64::from(gm[i * c + k]) * xv[k] / dv[i].sqrt();
                    }
                    gin[ni * c * hw + k * hw + p] = acc as f32;
                }
                for i in 0..c {
                    let common = 0.5 * gv[i] * xv[i] / dv[i].sqrt();
                    gbeta[i] += common;
                    for j in 0..c {
                        ggamma[i * c + j] += common * xv[j] * xv[j];
                    }
                }
            }
        }
    }

    (
        Tensor::new(vec![n, c, h, w], gin).unwrap(),
        Tensor::new(vec![c], gbeta.iter().map(|&v| v as f32).collect()).unwrap(),
        Tensor::new(vec![c, c], ggamma.iter().map(|&v| v as f32).collect()).unwrap(),
    )
}

/// Adam state for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// Optimizer configuration plus the global step counter.
#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update for a single parameter tensor.
/// `step` is the post-increment counter (1 on the first call).
pub fn adam_step(
    param: &mut [f32],
    grad: &[f32],
    state: &mut AdamState,
    cfg: &AdamConfig,
    step: u64,
) {
    debug_assert_eq!(param.len(), grad.len());
    let b1 = f64::from(cfg.beta1);
    let b2 = f64::from(cfg.beta2);
    let bc1 = 1.0 - b1.powi(step as i32);
    let bc2 = 1.0 - b2.powi(step as i32);
    for i in 0..param.len() {
        let g = f64::from(grad[i]);
        let m = b1 * f64::from(state.m[i]) + (1.0 - b1) * g;
        let v = b2 * f64::from(state.v[i]) + (1.0 - b2) * g * g;
        state.m[i] = m as f32;
        state.v[i] = v as f32;
        let mhat = m / bc1;
        let vhat = v / bc2;
        param[i] -= (f64::from(cfg.lr) * mhat / (vhat.sqrt() + f64::from(cfg.eps))) as f32;
    }
}
