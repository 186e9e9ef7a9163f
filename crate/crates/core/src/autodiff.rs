//! Recorded-tape reverse-mode differentiation.
//!
//! Each forward op pushes a node holding its output value; `backward`
//! walks the tape in reverse and accumulates gradients into every
//! reachable node. The graph is rebuilt on every forward pass.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{HvqError, Result};
use crate::nn::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    ConvT {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Gelu {
        input: Var,
    },
    Gdn {
        input: Var,
        beta: Var,
        gamma: Var,
        inverse: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    StraightThrough {
        input: Var,
    },
    /// mean((x - target)^2); gradient flows to x only.
    SqDiffMeanConst {
        input: Var,
        target: Tensor,
    },
    /// sum(mask * w * (x - target)^2) / max(1, sum(mask)).
    MaskedSqDiffMeanConst {
        input: Var,
        target: Tensor,
        mask: Tensor,
        weights: Option<Tensor>,
    },
    /// mean over frequency bins of |F(target) - F(x)|^2, unnormalized 2D DFT.
    FftLoss {
        input: Var,
        target: Tensor,
    },
    /// Scalar combination sum_i c_i * v_i.
    WeightedSum {
        terms: Vec<(f32, Var)>,
    },
    SumAll {
        input: Var,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    op: Op,
}

/// The tape itself. Create one per forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` call with respect to `v`; zeros if
    /// the node was not reached.
    pub fn grad(&self, v: Var) -> Vec<f32> {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[v.0].value.numel()],
        }
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, geom: ConvGeom) -> Result<Var> {
        let out = nn::conv2d_forward(
            self.value(input),
            self.value(kernel),
            self.value(bias),
            &geom,
        )?;
        Ok(self.push(
            out,
            Op::Conv {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }

    pub fn convt2d(&mut self, input: Var, kernel: Var, bias: Var, geom: ConvGeom) -> Result<Var> {
        let out = nn::convt2d_forward(
            self.value(input),
            self.value(kernel),
            self.value(bias),
            &geom,
        )?;
        Ok(self.push(
            out,
            Op::ConvT {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }

    pub fn gelu(&mut self, input: Var) -> Result<Var> {
        let out = nn::gelu_forward(self.value(input))?;
        Ok(self.push(out, Op::Gelu { input }))
    }

    pub fn gdn(&mut self, input: Var, beta: Var, gamma: Var, inverse: bool) -> Result<Var> {
        let out = nn::gdn_forward(
            self.value(input),
            self.value(beta),
            self.value(gamma),
            inverse,
        )?;
        Ok(self.push(
            out,
            Op::Gdn {
                input,
                beta,
                gamma,
                inverse,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(HvqError::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    /// Concatenate two [N,C,H,W] tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 4
            || sb.len() != 4
            || sa[0] != sb[0]
            || sa[2] != sb[2]
            || sa[3] != sb[3]
        {
            return Err(HvqError::ShapeMismatch(format!(
                "concat_channels: {sa:?} vs {sb:?}"
            )));
        }
        let (n, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let mut data = Vec::with_capacity((ca + cb) * n * hw);
        for ni in 0..n {
            data.extend_from_slice(&ta.data()[ni * ca * hw..(ni + 1) * ca * hw]);
            data.extend_from_slice(&tb.data()[ni * cb * hw..(ni + 1) * cb * hw]);
        }
        let out = Tensor::new(vec![n, ca + cb, sa[2], sa[3]], data)?;
        Ok(self.push(out, Op::ConcatChannels { a, b }))
    }

    /// Forward value is `quantized`; the backward pass maps the incoming
    /// gradient to `input` unchanged.
    pub fn straight_through(&mut self, input: Var, quantized: Tensor) -> Result<Var> {
        if self.value(input).shape() != quantized.shape() {
            return Err(HvqError::ShapeMismatch(format!(
                "straight_through: {:?} vs {:?}",
                self.value(input).shape(),
                quantized.shape()
            )));
        }
        Ok(self.push(quantized, Op::StraightThrough { input }))
    }

    /// Commitment-style loss: mean((x - target)^2), target detached.
    pub fn sq_diff_mean(&mut self, input: Var, target: Tensor) -> Result<Var> {
        if self.value(input).shape() != target.shape() {
            return Err(HvqError::ShapeMismatch(format!(
                "sq_diff_mean: {:?} vs {:?}",
                self.value(input).shape(),
                target.shape()
            )));
        }
        let n = target.numel() as f64;
        let sum: f64 = self
            .value(input)
            .data()
            .iter()
            .zip(target.data())
            .map(|(x, t)| {
                let d = f64::from(*x) - f64::from(*t);
                d * d
            })
            .sum();
        let out = Tensor::scalar((sum / n) as f32);
        Ok(self.push(out, Op::SqDiffMeanConst { input, target }))
    }

    /// Masked reconstruction loss; `weights` optionally scales each term.
    pub fn masked_sq_diff_mean(
        &mut self,
        input: Var,
        target: Tensor,
        mask: Tensor,
        weights: Option<Tensor>,
    ) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        if target.shape() != &shape[..] || mask.shape() != &shape[..] {
            return Err(HvqError::ShapeMismatch(format!(
                "masked_sq_diff_mean: input {:?}, target {:?}, mask {:?}",
                shape,
                target.shape(),
                mask.shape()
            )));
        }
        if let Some(w) = &weights {
            if w.shape() != &shape[..] {
                return Err(HvqError::ShapeMismatch(format!(
                    "weight plane {:?} vs input {:?}",
                    w.shape(),
                    shape
                )));
            }
        }
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(HvqError::InvalidArgument(
                "mask must be 0/1 valued".into(),
            ));
        }
        let denom: f64 = mask.data().iter().map(|&m| f64::from(m)).sum::<f64>().max(1.0);
        let mut num = 0.0f64;
        for (i, (x, t)) in self.value(input).data().iter().zip(target.data()).enumerate() {
            let m = f64::from(mask.data()[i]);
            if m == 0.0 {
                continue;
            }
            let w = weights.as_ref().map_or(1.0, |wp| f64::from(wp.data()[i]));
            let d = f64::from(*x) - f64::from(*t);
            num += m * w * d * d;
        }
        let out = Tensor::scalar((num / denom) as f32);
        Ok(self.push(
            out,
            Op::MaskedSqDiffMeanConst {
                input,
                target,
                mask,
                weights,
            },
        ))
    }

    /// Frequency-domain loss over the trailing two axes (power-of-two
    /// extents required).
    pub fn fft_loss(&mut self, input: Var, target: Tensor) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        if target.shape() != &shape[..] {
            return Err(HvqError::ShapeMismatch(format!(
                "fft_loss: {:?} vs {:?}",
                shape,
                target.shape()
            )));
        }
        if shape.len() < 2 {
            return Err(HvqError::ShapeMismatch(
                "fft_loss needs at least 2 axes".into(),
            ));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if !h.is_power_of_two() || !w.is_power_of_two() {
            return Err(HvqError::InvalidArgument(format!(
                "fft_loss extents must be powers of two, got {h}x{w}"
            )));
        }
        let batch = shape.iter().take(shape.len() - 2).product::<usize>().max(1);
        let bins = (h * w) as f64;
        let mut total = 0.0f64;
        for bi in 0..batch {
            let xs = &self.value(input).data()[bi * h * w..(bi + 1) * h * w];
            let ts = &target.data()[bi * h * w..(bi + 1) * h * w];
            let fx = fft2(xs, h, w);
            let ft = fft2(ts, h, w);
            let sum: f64 = fx
                .iter()
                .zip(ft.iter())
                .map(|(a, b)| (a - b).norm_sqr())
                .sum();
            total += sum / bins;
        }
        let out = Tensor::scalar((total / batch as f64) as f32);
        Ok(self.push(out, Op::FftLoss { input, target }))
    }

    /// Scalar linear combination of scalar nodes.
    pub fn weighted_sum(&mut self, terms: Vec<(f32, Var)>) -> Result<Var> {
        let mut total = 0.0f64;
        for (c, v) in &terms {
            let t = self.value(*v);
            if t.numel() != 1 {
                return Err(HvqError::ShapeMismatch(
                    "weighted_sum expects scalar terms".into(),
                ));
            }
            total += f64::from(*c) * f64::from(t.item());
        }
        let out = Tensor::scalar(total as f32);
        Ok(self.push(out, Op::WeightedSum { terms }))
    }

    pub fn sum_all(&mut self, input: Var) -> Var {
        let total: f64 = self.value(input).data().iter().map(|&v| f64::from(v)).sum();
        self.push(Tensor::scalar(total as f32), Op::SumAll { input })
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(HvqError::DoubleBackward);
        }
        self.backward_done = true;
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(HvqError::InvalidArgument(
                "backward requires a scalar loss".into(),
            ));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let gout = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            self.dispatch_backward(i, &gout)?;
            self.nodes[i].grad = Some(gout);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: &[f32]) {
        let node = &mut self.nodes[v.0];
        let g = node
            .grad
            .get_or_insert_with(|| vec![0.0; node.value.numel()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    fn dispatch_backward(&mut self, i: usize, gout: &[f32]) -> Result<()> {
        // Op data is cheap to describe by reference; clone the small bits we
        // need so the borrow on self.nodes can end.
        enum Plan {
            None,
            Conv(Var, Var, Var, ConvGeom, bool),
            Gelu(Var),
            Gdn(Var, Var, Var, bool),
            Add(Var, Var),
            Concat(Var, Var),
            Straight(Var),
            SqDiff(Var),
            MaskedSqDiff(Var),
            Fft(Var),
            WeightedSum(Vec<(f32, Var)>),
            SumAll(Var),
        }
        let plan = match &self.nodes[i].op {
            Op::Leaf => Plan::None,
            Op::Conv {
                input,
                kernel,
                bias,
                geom,
            } => Plan::Conv(*input, *kernel, *bias, *geom, false),
            Op::ConvT {
                input,
                kernel,
                bias,
                geom,
            } => Plan::Conv(*input, *kernel, *bias, *geom, true),
            Op::Gelu { input } => Plan::Gelu(*input),
            Op::Gdn {
                input,
                beta,
                gamma,
                inverse,
            } => Plan::Gdn(*input, *beta, *gamma, *inverse),
            Op::Add { a, b } => Plan::Add(*a, *b),
            Op::ConcatChannels { a, b } => Plan::Concat(*a, *b),
            Op::StraightThrough { input } => Plan::Straight(*input),
            Op::SqDiffMeanConst { input, .. } => Plan::SqDiff(*input),
            Op::MaskedSqDiffMeanConst { input, .. } => Plan::MaskedSqDiff(*input),
            Op::FftLoss { input, .. } => Plan::Fft(*input),
            Op::WeightedSum { terms } => Plan::WeightedSum(terms.clone()),
            Op::SumAll { input } => Plan::SumAll(*input),
        };

        match plan {
            Plan::None => {}
            Plan::Conv(input, kernel, bias, geom, transposed) => {
                let gt = Tensor::new(self.nodes[i].value.shape().to_vec(), gout.to_vec())?;
                let (gin, gk, gb) = if transposed {
                    nn::convt2d_backward(self.value(input), self.value(kernel), &gt, &geom)
                } else {
                    nn::conv2d_backward(self.value(input), self.value(kernel), &gt, &geom)
                };
                self.accumulate(input, gin.data());
                self.accumulate(kernel, gk.data());
                self.accumulate(bias, gb.data());
            }
            Plan::Gelu(input) => {
                let gt = Tensor::new(self.nodes[i].value.shape().to_vec(), gout.to_vec())?;
                let gin = nn::gelu_backward(self.value(input), &gt);
                self.accumulate(input, gin.data());
            }
            Plan::Gdn(input, beta, gamma, inverse) => {
                let gt = Tensor::new(self.nodes[i].value.shape().to_vec(), gout.to_vec())?;
                let (gin, gb, gg) = nn::gdn_backward(
                    self.value(input),
                    self.value(beta),
                    self.value(gamma),
                    inverse,
                    &gt,
                );
                self.accumulate(input, gin.data());
                self.accumulate(beta, gb.data());
                self.accumulate(gamma, gg.data());
            }
            Plan::Add(a, b) => {
                self.accumulate(a, gout);
                self.accumulate(b, gout);
            }
            Plan::Concat(a, b) => {
                let sa = self.value(a).shape().to_vec();
                let sb = self.value(b).shape().to_vec();
                let (n, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                let mut ga = vec![0.0f32; n * ca * hw];
                let mut gb = vec![0.0f32; n * cb * hw];
                for ni in 0..n {
                    let base = ni * (ca + cb) * hw;
                    ga[ni * ca * hw..(ni + 1) * ca * hw]
                        .copy_from_slice(&gout[base..base + ca * hw]);
                    gb[ni * cb * hw..(ni + 1) * cb * hw]
                        .copy_from_slice(&gout[base + ca * hw..base + (ca + cb) * hw]);
                }
                self.accumulate(a, &ga);
                self.accumulate(b, &gb);
            }
            Plan::Straight(input) => {
                self.accumulate(input, gout);
            }
            Plan::SqDiff(input) => {
                let target = match &self.nodes[i].op {
                    Op::SqDiffMeanConst { target, .. } => target.clone(),
                    _ => unreachable!(),
                };
                let n = target.numel() as f64;
                let g0 = f64::from(gout[0]);
                let gin: Vec<f32> = self
                    .value(input)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(x, t)| (g0 * 2.0 * (f64::from(*x) - f64::from(*t)) / n) as f32)
                    .collect();
                self.accumulate(input, &gin);
            }
            Plan::MaskedSqDiff(input) => {
                let (target, mask, weights) = match &self.nodes[i].op {
                    Op::MaskedSqDiffMeanConst {
                        target,
                        mask,
                        weights,
                        ..
                    } => (target.clone(), mask.clone(), weights.clone()),
                    _ => unreachable!(),
                };
                let denom: f64 = mask
                    .data()
                    .iter()
                    .map(|&m| f64::from(m))
                    .sum::<f64>()
                    .max(1.0);
                let g0 = f64::from(gout[0]);
                let gin: Vec<f32> = self
                    .value(input)
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(j, x)| {
                        let m = f64::from(mask.data()[j]);
                        if m == 0.0 {
                            return 0.0;
                        }
                        let w = weights.as_ref().map_or(1.0, |wp| f64::from(wp.data()[j]));
                        (g0 * 2.0 * m * w * (f64::from(*x) - f64::from(target.data()[j]))
                            / denom) as f32
                    })
                    .collect();
                self.accumulate(input, &gin);
            }
            Plan::Fft(input) => {
                let target = match &self.nodes[i].op {
                    Op::FftLoss { target, .. } => target.clone(),
                    _ => unreachable!(),
                };
                let shape = self.value(input).shape().to_vec();
                let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let batch = shape.iter().take(shape.len() - 2).product::<usize>().max(1);
                let bins = (h * w) as f64;
                let g0 = f64::from(gout[0]);
                let mut gin = vec![0.0f32; self.value(input).numel()];
                for bi in 0..batch {
                    let xs = &self.value(input).data()[bi * h * w..(bi + 1) * h * w];
                    let ts = &target.data()[bi * h * w..(bi + 1) * h * w];
                    let mut delta = fft2(xs, h, w);
                    let ft = fft2(ts, h, w);
                    for (d, t) in delta.iter_mut().zip(ft.iter()) {
                        *d -= t;
                    }
                    // d/dx mean|F(x)-F(t)|^2 = (2 / bins) * Re(F^H delta),
                    // and F^H = bins * IFFT for the unnormalized DFT.
                    let adj = ifft2(&delta, h, w);
                    for (j, a) in adj.iter().enumerate() {
                        gin[bi * h * w + j] =
                            (g0 * 2.0 / (bins * batch as f64) * a.re * bins) as f32;
                    }
                }
                self.accumulate(input, &gin);
            }
            Plan::WeightedSum(terms) => {
                let g0 = gout[0];
                for (c, v) in terms {
                    self.accumulate(v, &[c * g0]);
                }
            }
            Plan::SumAll(input) => {
                let g0 = gout[0];
                let gin = vec![g0; self.value(input).numel()];
                self.accumulate(input, &gin);
            }
        }
        Ok(())
    }
}

/// Unnormalized 2D DFT of a real field.
pub fn fft2(data: &[f32], h: usize, w: usize) -> Vec<Complex<f64>> {
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);
    let mut buf: Vec<Complex<f64>> = data
        .iter()
        .map(|&v| Complex::new(f64::from(v), 0.0))
        .collect();
    for row in buf.chunks_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            col[i] = buf[i * w + j];
        }
        col_fft.process(&mut col);
        for i in 0..h {
            buf[i * w + j] = col[i];
        }
    }
    buf
}

/// Normalized inverse 2D DFT (divides by h*w).
pub fn ifft2(data: &[Complex<f64>], h: usize, w: usize) -> Vec<Complex<f64>> {
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_inverse(w);
    let col_fft = planner.plan_fft_inverse(h);
    let mut buf = data.to_vec();
    for row in buf.chunks_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            col[i] = buf[i * w + j];
        }
        col_fft.process(&mut col);
        for i in 0..h {
            buf[i * w + j] = col[i];
        }
    }
    let norm = 1.0 / (h * w) as f64;
    for v in &mut buf {
        *v *= norm;
    }
    buf
}
