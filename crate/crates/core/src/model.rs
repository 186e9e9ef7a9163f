//! The hierarchical encoder/decoder wired to its vector quantizers, the
//! training objective, and checkpoint serialization.
//!
//! Stages are counted bottom-up: stage 0 is the least-downsampled latent.
//! Quantization runs top-down; each quantized level is upsampled and
//! merged into the level below as a prior before that level is assigned
//! to its codebook. The decoder consumes the bottom-level quantized grid
//! concatenated with the upsampled prior.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{HvqError, Result};
use crate::nn::{AdamState, ConvGeom, Padding, BETA_MIN};
use crate::tensor::Tensor;
use crate::vq::{dequantize, Codebook};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HVQM";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Everything that determines the architecture and the objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub codebook_sizes: Vec<usize>,
    pub codebook_dim: usize,
    pub lambda_recon: f32,
    pub lambda_q: f32,
    pub lambda_fft: f32,
    pub block_size_train: usize,
    pub block_size_compress: usize,
    pub overlap: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            stage_channels: vec![64, 128],
            stage_strides: vec![2, 2],
            codebook_sizes: vec![128, 128],
            codebook_dim: 64,
            lambda_recon: 2.0,
            lambda_q: 0.25,
            lambda_fft: 0.0,
            block_size_train: 64,
            block_size_compress: 256,
            overlap: 8,
        }
    }
}

impl ModelConfig {
    /// A small profile that trains in minutes on a CPU.
    pub fn smoke() -> Self {
        Self {
            base_channels: 8,
            stage_channels: vec![12, 16],
            stage_strides: vec![2, 2],
            codebook_sizes: vec![64, 64],
            codebook_dim: 8,
            ..Self::default()
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn total_stride(&self) -> usize {
        self.stage_strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty()
            || self.stage_channels.len() != self.stage_strides.len()
            || self.stage_channels.len() != self.codebook_sizes.len()
        {
            return Err(HvqError::InvalidArgument(
                "stage_channels, stage_strides, codebook_sizes must be equal-length and non-empty"
                    .into(),
            ));
        }
        for &s in &self.stage_strides {
            if !s.is_power_of_two() || s < 2 {
                return Err(HvqError::InvalidArgument(format!(
                    "stage stride {s} must be a power of two >= 2"
                )));
            }
        }
        let total = self.total_stride();
        for b in [self.block_size_train, self.block_size_compress] {
            if b % total != 0 {
                return Err(HvqError::InvalidArgument(format!(
                    "block size {b} not divisible by total stride {total}"
                )));
            }
        }
        if self.codebook_dim == 0 {
            return Err(HvqError::InvalidArgument("codebook_dim must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvKernel,
    Bias,
    GdnBeta,
    GdnGamma,
}

#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
}

/// Index-based reference to a conv layer inside the parameter list.
#[derive(Debug, Clone, Copy)]
struct ConvRef {
    kernel: usize,
    bias: usize,
    geom: ConvGeom,
    transposed: bool,
}

#[derive(Debug, Clone, Copy)]
struct GdnRef {
    beta: usize,
    gamma: usize,
    inverse: bool,
}

#[derive(Debug, Clone)]
struct ResBlockRef {
    conv1: ConvRef,
    conv2: ConvRef,
    gdn: GdnRef,
    skip: Option<ConvRef>,
}

#[derive(Debug, Clone)]
struct StageRef {
    blocks: Vec<ResBlockRef>,
}

#[derive(Debug, Clone)]
struct Arch {
    pre: Vec<ConvRef>,
    enc_stages: Vec<StageRef>,
    bridges: Vec<ConvRef>,
    prior_merge: Vec<Option<ConvRef>>,
    upsample: Vec<Option<ConvRef>>,
    dec_in: ConvRef,
    dec_stages: Vec<StageRef>,
    post: Vec<ConvRef>,
}

/// All layer weights plus the codebooks.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: Vec<ParamTensor>,
    pub codebooks: Vec<Codebook>,
    arch: Arch,
}

/// Builder that appends parameter tensors while wiring the architecture.
struct ArchBuilder<'a> {
    tensors: Vec<ParamTensor>,
    rng: &'a mut ChaCha8Rng,
}

impl<'a> ArchBuilder<'a> {
    fn conv(
        &mut self,
        name: &str,
        out_ch: usize,
        in_ch: usize,
        k: usize,
        geom: ConvGeom,
        transposed: bool,
    ) -> ConvRef {
        let fan_in = in_ch * k * k;
        let bound = (1.0 / fan_in as f64).sqrt() as f32;
        let data: Vec<f32> = (0..out_ch * in_ch * k * k)
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        let kernel = Tensor::new(vec![out_ch, in_ch, k, k], data).unwrap();
        self.tensors.push(ParamTensor {
            name: format!("{name}.kernel"),
            value: kernel,
            kind: ParamKind::ConvKernel,
        });
        let kidx = self.tensors.len() - 1;
        self.tensors.push(ParamTensor {
            name: format!("{name}.bias"),
            value: Tensor::zeros(vec![out_ch]),
            kind: ParamKind::Bias,
        });
        ConvRef {
            kernel: kidx,
            bias: kidx + 1,
            geom,
            transposed,
        }
    }

    fn gdn(&mut self, name: &str, ch: usize, inverse: bool) -> GdnRef {
        self.tensors.push(ParamTensor {
            name: format!("{name}.beta"),
            value: Tensor::full(vec![ch], 1.0),
            kind: ParamKind::GdnBeta,
        });
        let beta = self.tensors.len() - 1;
        let mut gamma = vec![0.0f32; ch * ch];
        for i in 0..ch {
            gamma[i * ch + i] = 0.1;
        }
        self.tensors.push(ParamTensor {
            name: format!("{name}.gamma"),
            value: Tensor::new(vec![ch, ch], gamma).unwrap(),
            kind: ParamKind::GdnGamma,
        });
        GdnRef {
            beta,
            gamma: beta + 1,
            inverse,
        }
    }

    /// Residual block: (transposed) conv k5 stride s, GELU, conv k5, GDN,
    /// with a strided projection on the skip path when shapes change.
    fn res_block(
        &mut self,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        transposed: bool,
        inverse_gdn: bool,
    ) -> ResBlockRef {
        let g1 = if transposed {
            ConvGeom::new(stride, Padding::symmetric(2)).with_out_pad(stride - 1)
        } else {
            ConvGeom::new(stride, Padding::symmetric(2))
        };
        let conv1 = self.conv(&format!("{name}.conv1"), out_ch, in_ch, 5, g1, transposed);
        let conv2 = self.conv(
            &format!("{name}.conv2"),
            out_ch,
            out_ch,
            5,
            ConvGeom::new(1, Padding::symmetric(2)),
            false,
        );
        let gdn = self.gdn(&format!("{name}.gdn"), out_ch, inverse_gdn);
        let skip = if stride != 1 || in_ch != out_ch {
            Some(if transposed {
                // exact x`stride` upsampling projection
                self.conv(
                    &format!("{name}.skip"),
                    out_ch,
                    in_ch,
                    2 * stride,
                    ConvGeom::new(stride, Padding::symmetric(stride / 2)),
                    true,
                )
            } else {
                self.conv(
                    &format!("{name}.skip"),
                    out_ch,
                    in_ch,
                    1,
                    ConvGeom::new(stride, Padding::symmetric(0)),
                    false,
                )
            })
        } else {
            None
        };
        ResBlockRef {
            conv1,
            conv2,
            gdn,
            skip,
        }
    }

    /// One strided residual block followed by two unit-stride blocks.
    fn stage(
        &mut self,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        transposed: bool,
        inverse_gdn: bool,
    ) -> StageRef {
        let mut blocks = Vec::with_capacity(3);
        blocks.push(self.res_block(
            &format!("{name}.block0"),
            in_ch,
            out_ch,
            stride,
            transposed,
            inverse_gdn,
        ));
        for i in 1..3 {
            blocks.push(self.res_block(
                &format!("{name}.block{i}"),
                out_ch,
                out_ch,
                1,
                false,
                inverse_gdn,
            ));
        }
        StageRef { blocks }
    }
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ArchBuilder {
            tensors: Vec::new(),
            rng: &mut rng,
        };
        let stages = config.num_stages();
        let d = config.codebook_dim;
        let base = config.base_channels;

        let pre = vec![
            b.conv(
                "pre.conv0",
                base,
                1,
                4,
                ConvGeom::new(1, Padding::same_even(4)),
                false,
            ),
            b.conv(
                "pre.conv1",
                base,
                base,
                4,
                ConvGeom::new(1, Padding::same_even(4)),
                false,
            ),
        ];

        let mut enc_stages = Vec::new();
        let mut in_ch = base;
        for i in 0..stages {
            enc_stages.push(b.stage(
                &format!("enc{i}"),
                in_ch,
                config.stage_channels[i],
                config.stage_strides[i],
                false,
                false,
            ));
            in_ch = config.stage_channels[i];
        }

        let bridges: Vec<ConvRef> = (0..stages)
            .map(|i| {
                b.conv(
                    &format!("bridge{i}"),
                    d,
                    config.stage_channels[i],
                    1,
                    ConvGeom::new(1, Padding::symmetric(0)),
                    false,
                )
            })
            .collect();

        // stage i < top receives an upsampled prior from stage i+1
        let mut prior_merge = Vec::new();
        let mut upsample = Vec::new();
        for i in 0..stages {
            if i + 1 < stages {
                prior_merge.push(Some(b.conv(
                    &format!("merge{i}"),
                    d,
                    2 * d,
                    1,
                    ConvGeom::new(1, Padding::symmetric(0)),
                    false,
                )));
            } else {
                prior_merge.push(None);
            }
        }
        for i in 0..stages {
            if i > 0 {
                // carries concat(z_q_i, prior_i) when a prior exists above
                let carry_ch = if i + 1 < stages { 2 * d } else { d };
                let s = config.stage_strides[i];
                upsample.push(Some(b.conv(
                    &format!("up{i}"),
                    d,
                    carry_ch,
                    2 * s,
                    ConvGeom::new(s, Padding::symmetric(s / 2)),
                    true,
                )));
            } else {
                upsample.push(None);
            }
        }

        let comb_ch = if stages > 1 { 2 * d } else { d };
        let dec_in = b.conv(
            "dec.in",
            config.stage_channels[0],
            comb_ch,
            1,
            ConvGeom::new(1, Padding::symmetric(0)),
            false,
        );
        let dec_stages = vec![
            b.stage(
                "dec1",
                config.stage_channels[0],
                config.stage_channels[0],
                1,
                false,
                true,
            ),
            b.stage(
                "dec0",
                config.stage_channels[0],
                base,
                config.stage_strides[0],
                true,
                true,
            ),
        ];
        let post = vec![
            b.conv(
                "post.conv0",
                base,
                base,
                4,
                ConvGeom::new(1, Padding::same_even(4)),
                false,
            ),
            b.conv(
                "post.conv1",
                1,
                base,
                4,
                ConvGeom::new(1, Padding::same_even(4)),
                false,
            ),
        ];

        let arch = Arch {
            pre,
            enc_stages,
            bridges,
            prior_merge,
            upsample,
            dec_in,
            dec_stages,
            post,
        };
        let tensors = b.tensors;
        let codebooks = config
            .codebook_sizes
            .iter()
            .map(|&k| Codebook::init(k, d, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            tensors,
            codebooks,
            arch,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.value.numel()).sum()
    }

    /// Copies every parameter tensor onto a fresh tape; returns the leaf
    /// handles aligned with `self.tensors`.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| tape.leaf(t.value.clone()))
            .collect()
    }

    fn apply_conv(&self, tape: &mut Tape, vars: &[Var], c: &ConvRef, x: Var) -> Result<Var> {
        if c.transposed {
            tape.convt2d(x, vars[c.kernel], vars[c.bias], c.geom)
        } else {
            tape.conv2d(x, vars[c.kernel], vars[c.bias], c.geom)
        }
    }

    fn apply_res_block(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        blk: &ResBlockRef,
        x: Var,
    ) -> Result<Var> {
        let mut t = self.apply_conv(tape, vars, &blk.conv1, x)?;
        t = tape.gelu(t)?;
        t = self.apply_conv(tape, vars, &blk.conv2, t)?;
        t = tape.gdn(t, vars[blk.gdn.beta], vars[blk.gdn.gamma], blk.gdn.inverse)?;
        let skip = match &blk.skip {
            Some(s) => self.apply_conv(tape, vars, s, x)?,
            None => x,
        };
        tape.add(t, skip)
    }

    fn apply_stage(&self, tape: &mut Tape, vars: &[Var], stage: &StageRef, x: Var) -> Result<Var> {
        let mut t = x;
        for blk in &stage.blocks {
            t = self.apply_res_block(tape, vars, blk, t)?;
        }
        Ok(t)
    }

    /// Bottom-up latents, one per stage, each with `codebook_dim` channels.
    pub fn encode(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Vec<Var>> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(HvqError::ShapeMismatch(format!(
                "encode expects [N,1,H,W], got {shape:?}"
            )));
        }
        let total = self.config.total_stride();
        if shape[2] % total != 0 || shape[3] % total != 0 {
            return Err(HvqError::ShapeMismatch(format!(
                "spatial extents {}x{} not divisible by total stride {total}",
                shape[2], shape[3]
            )));
        }
        let mut t = x;
        for c in &self.arch.pre {
            t = self.apply_conv(tape, vars, c, t)?;
            t = tape.gelu(t)?;
        }
        let mut hs = Vec::with_capacity(self.config.num_stages());
        for (i, stage) in self.arch.enc_stages.iter().enumerate() {
            t = self.apply_stage(tape, vars, stage, t)?;
            hs.push(self.apply_conv(tape, vars, &self.arch.bridges[i], t)?);
        }
        Ok(hs)
    }

    /// Decode from the combined bottom-grid quantized representation.
    pub fn decode(&self, tape: &mut Tape, vars: &[Var], z_comb: Var) -> Result<Var> {
        let expect = if self.config.num_stages() > 1 {
            2 * self.config.codebook_dim
        } else {
            self.config.codebook_dim
        };
        if tape.value(z_comb).dim(1) != expect {
            return Err(HvqError::ShapeMismatch(format!(
                "decoder input has {} channels, expects {expect}",
                tape.value(z_comb).dim(1)
            )));
        }
        let mut t = self.apply_conv(tape, vars, &self.arch.dec_in, z_comb)?;
        for stage in &self.arch.dec_stages {
            t = self.apply_stage(tape, vars, stage, t)?;
        }
        let n = self.arch.post.len();
        for (i, c) in self.arch.post.iter().enumerate() {
            t = self.apply_conv(tape, vars, c, t)?;
            if i + 1 < n {
                t = tape.gelu(t)?;
            }
        }
        Ok(t)
    }

    pub fn upsample_prior(&self, tape: &mut Tape, vars: &[Var], level: usize, carry: Var) -> Result<Var> {
        let up = self.arch.upsample[level]
            .as_ref()
            .expect("no upsample at level 0");
        self.apply_conv(tape, vars, up, carry)
    }

    pub fn merge_prior(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        level: usize,
        h: Var,
        prior: Var,
    ) -> Result<Var> {
        let merge = self.arch.prior_merge[level]
            .as_ref()
            .expect("top level has no prior");
        let cat = tape.concat_channels(h, prior)?;
        self.apply_conv(tape, vars, merge, cat)
    }
}

/// Outcome of quantizing the full hierarchy for one batch.
pub struct HierarchyQuant {
    /// Per stage (bottom-up): flat indices in (n, y, x) row-major order.
    pub indices: Vec<Vec<usize>>,
    /// Per stage: latent grid shape [N, D, Hl, Wl].
    pub grid_shapes: Vec<Vec<usize>>,
    /// Per stage: the conditioned pre-quantization latents as [M, D] rows
    /// (EMA update inputs).
    pub cond_rows: Vec<Tensor>,
    /// Straight-through quantized combined grid for the decoder.
    pub z_comb: Var,
    /// Sum of per-stage commitment losses.
    pub commitment: Var,
}

/// [N,D,H,W] -> [M,D] row-major over (n, y, x).
pub fn nchw_to_rows(t: &Tensor) -> Tensor {
    let (n, d, h, w) = (t.dim(0), t.dim(1), t.dim(2), t.dim(3));
    let mut out = Vec::with_capacity(n * d * h * w);
    let data = t.data();
    for ni in 0..n {
        for p in 0..h * w {
            for c in 0..d {
                out.push(data[(ni * d + c) * h * w + p]);
            }
        }
    }
    Tensor::new(vec![n * h * w, d], out).unwrap()
}

/// [M,D] rows back to [N,D,H,W].
pub fn rows_to_nchw(rows: &Tensor, shape: &[usize]) -> Tensor {
    let (n, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = vec![0.0f32; n * d * h * w];
    let data = rows.data();
    for ni in 0..n {
        for p in 0..h * w {
            for c in 0..d {
                out[(ni * d + c) * h * w + p] = data[(ni * h * w + p) * d + c];
            }
        }
    }
    Tensor::new(shape.to_vec(), out).unwrap()
}

impl ModelParams {
    /// Top-down quantization with prior injection, returning everything
    /// training and compression need.
    pub fn quantize_hierarchy(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        hs: &[Var],
    ) -> Result<HierarchyQuant> {
        let stages = self.config.num_stages();
        debug_assert_eq!(hs.len(), stages);
        let mut indices = vec![Vec::new(); stages];
        let mut grid_shapes = vec![Vec::new(); stages];
        let mut cond_rows: Vec<Tensor> = (0..stages).map(|_| Tensor::zeros(vec![0])).collect();
        let mut commit_terms = Vec::with_capacity(stages);
        let mut prior: Option<Var> = None;
        let mut z_q_bottom: Option<Var> = None;

        for i in (0..stages).rev() {
            let cond = match prior {
                Some(p) => self.merge_prior(tape, vars, i, hs[i], p)?,
                None => hs[i],
            };
            let grid_shape = tape.value(cond).shape().to_vec();
            let rows = nchw_to_rows(tape.value(cond));
            let idx = crate::vq::nearest_code(&rows, &self.codebooks[i])?;
            let zq_rows = dequantize(&idx, &self.codebooks[i])?;
            let zq_grid = rows_to_nchw(&zq_rows, &grid_shape);
            let commit = tape.sq_diff_mean(cond, zq_grid.clone())?;
            let zq = tape.straight_through(cond, zq_grid)?;
            indices[i] = idx;
            grid_shapes[i] = grid_shape;
            cond_rows[i] = rows;
            commit_terms.push((1.0, commit));

            if i > 0 {
                let carry = match prior {
                    Some(p) => tape.concat_channels(zq, p)?,
                    None => zq,
                };
                prior = Some(self.upsample_prior(tape, vars, i, carry)?);
            } else {
                z_q_bottom = Some(zq);
            }
        }

        let zq0 = z_q_bottom.expect("at least one stage");
        let z_comb = match prior {
            Some(p) => tape.concat_channels(zq0, p)?,
            None => zq0,
        };
        let commitment = tape.weighted_sum(commit_terms)?;
        Ok(HierarchyQuant {
            indices,
            grid_shapes,
            cond_rows,
            z_comb,
            commitment,
        })
    }
}

/// The loss components of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f32,
    pub l_recon: f32,
    pub l_q: f32,
    pub l_fft: f32,
}

/// Masked objective: lambda_recon * masked MSE + lambda_q * commitment
/// (+ lambda_fft * frequency loss when enabled). Returns the scalar node
/// to differentiate plus the breakdown.
pub fn objective(
    tape: &mut Tape,
    xhat: Var,
    x: &Tensor,
    mask: &Tensor,
    weights: Option<&Tensor>,
    commitment: Var,
    config: &ModelConfig,
) -> Result<(Var, LossBreakdown)> {
    let l_recon =
        tape.masked_sq_diff_mean(xhat, x.clone(), mask.clone(), weights.cloned())?;
    let mut terms = vec![
        (config.lambda_recon, l_recon),
        (config.lambda_q, commitment),
    ];
    let l_fft = if config.lambda_fft != 0.0 {
        let shape = tape.value(xhat).shape().to_vec();
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if !h.is_power_of_two() || !w.is_power_of_two() {
            return Err(HvqError::InvalidArgument(
                "fft loss needs power-of-two block extents".into(),
            ));
        }
        let l = tape.fft_loss(xhat, x.clone())?;
        terms.push((config.lambda_fft, l));
        Some(l)
    } else {
        None
    };
    let total = tape.weighted_sum(terms)?;
    let breakdown = LossBreakdown {
        total: tape.value(total).item(),
        l_recon: tape.value(l_recon).item(),
        l_q: tape.value(commitment).item(),
        l_fft: l_fft.map_or(0.0, |l| tape.value(l).item()),
    };
    Ok((total, breakdown))
}

/// Per-parameter Adam buffers plus the shared step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub states: Vec<AdamState>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            states: params
                .tensors
                .iter()
                .map(|t| AdamState {
                    m: vec![0.0; t.value.numel()],
                    v: vec![0.0; t.value.numel()],
                })
                .collect(),
            step: 0,
        }
    }
}

/// Applies one Adam step to every parameter, then re-clamps the GDN
/// constraints (beta >= BETA_MIN, gamma >= 0).
pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &[Vec<f32>],
    state: &mut OptimizerState,
    cfg: &crate::nn::AdamConfig,
) -> Result<()> {
    if grads.len() != params.tensors.len() {
        return Err(HvqError::InvalidArgument(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.tensors.len()
        )));
    }
    state.step += 1;
    for (i, t) in params.tensors.iter_mut().enumerate() {
        crate::nn::adam_step(
            t.value.data_mut(),
            &grads[i],
            &mut state.states[i],
            cfg,
            state.step,
        );
        match t.kind {
            ParamKind::GdnBeta => {
                for v in t.value.data_mut() {
                    if *v < BETA_MIN {
                        *v = BETA_MIN;
                    }
                }
            }
            ParamKind::GdnGamma => {
                for v in t.value.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            _ => {}
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// checkpoint serialization
// ---------------------------------------------------------------------------

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32(out: &mut Vec<u8>, v: f32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(HvqError::Format("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn config_bytes(c: &ModelConfig) -> Vec<u8> {
    let mut out = Vec::new();
    put_u32(&mut out, c.base_channels as u32);
    put_u32(&mut out, c.stage_channels.len() as u32);
    for &v in &c.stage_channels {
        put_u32(&mut out, v as u32);
    }
    for &v in &c.stage_strides {
        put_u32(&mut out, v as u32);
    }
    for &v in &c.codebook_sizes {
        put_u32(&mut out, v as u32);
    }
    put_u32(&mut out, c.codebook_dim as u32);
    put_f32(&mut out, c.lambda_recon);
    put_f32(&mut out, c.lambda_q);
    put_f32(&mut out, c.lambda_fft);
    put_u32(&mut out, c.block_size_train as u32);
    put_u32(&mut out, c.block_size_compress as u32);
    put_u32(&mut out, c.overlap as u32);
    out
}

fn read_config(r: &mut Reader) -> Result<ModelConfig> {
    let base_channels = r.u32()? as usize;
    let stages = r.u32()? as usize;
    if stages == 0 || stages > 16 {
        return Err(HvqError::Format(format!("implausible stage count {stages}")));
    }
    let mut stage_channels = Vec::with_capacity(stages);
    for _ in 0..stages {
        stage_channels.push(r.u32()? as usize);
    }
    let mut stage_strides = Vec::with_capacity(stages);
    for _ in 0..stages {
        stage_strides.push(r.u32()? as usize);
    }
    let mut codebook_sizes = Vec::with_capacity(stages);
    for _ in 0..stages {
        codebook_sizes.push(r.u32()? as usize);
    }
    Ok(ModelConfig {
        base_channels,
        stage_channels,
        stage_strides,
        codebook_sizes,
        codebook_dim: r.u32()? as usize,
        lambda_recon: r.f32()?,
        lambda_q: r.f32()?,
        lambda_fft: r.f32()?,
        block_size_train: r.u32()? as usize,
        block_size_compress: r.u32()? as usize,
        overlap: r.u32()? as usize,
    })
}

fn model_body_bytes(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&config_bytes(&params.config));
    put_u32(&mut out, params.tensors.len() as u32);
    for t in &params.tensors {
        put_u32(&mut out, t.value.shape().len() as u32);
        for &d in t.value.shape() {
            put_u32(&mut out, d as u32);
        }
        for &v in t.value.data() {
            put_f32(&mut out, v);
        }
    }
    put_u32(&mut out, params.codebooks.len() as u32);
    for cb in &params.codebooks {
        put_u32(&mut out, cb.len() as u32);
        put_u32(&mut out, cb.dim() as u32);
        for &v in cb.entries() {
            put_f32(&mut out, v);
        }
        for &v in &cb.ema_cluster_size {
            put_f64(&mut out, v);
        }
        for &v in &cb.ema_embed_sum {
            put_f64(&mut out, v);
        }
        put_f64(&mut out, cb.decay);
        put_f64(&mut out, cb.epsilon);
    }
    out
}

impl ModelParams {
    /// 32-byte identity of the model (config + weights + codebooks);
    /// archives reference models by this hash.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(model_body_bytes(self));
        h.finalize().into()
    }
}

/// Serializes a model (and optionally its optimizer state plus the hash
/// of the training configuration that produced it) to the HVQM
/// checkpoint format; the trailer is the model content hash.
pub fn checkpoint_bytes(
    params: &ModelParams,
    opt: Option<&OptimizerState>,
    train_hash: Option<u64>,
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let mut flags: u16 = 0;
    if opt.is_some() {
        flags |= 1;
    }
    if train_hash.is_some() {
        flags |= 2;
    }
    out.extend_from_slice(&flags.to_le_bytes());
    let body = model_body_bytes(params);
    out.extend_from_slice(&body);
    if let Some(opt) = opt {
        put_u64(&mut out, opt.step);
        for st in &opt.states {
            for &v in &st.m {
                put_f32(&mut out, v);
            }
            for &v in &st.v {
                put_f32(&mut out, v);
            }
        }
    }
    if let Some(h) = train_hash {
        put_u64(&mut out, h);
    }
    let mut h = Sha256::new();
    h.update(&body);
    out.extend_from_slice(&h.finalize());
    out
}

/// Parses an HVQM checkpoint. The architecture is rebuilt from the stored
/// config, then weights are loaded over it.
pub fn checkpoint_from_bytes(
    bytes: &[u8],
) -> Result<(ModelParams, Option<OptimizerState>, Option<u64>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(HvqError::Format("bad checkpoint magic".into()));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(HvqError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let flags = r.u16()?;
    let body_start = r.pos;
    let config = read_config(&mut r)?;
    let mut params = ModelParams::init(config, 0)?;
    let n_tensors = r.u32()? as usize;
    if n_tensors != params.tensors.len() {
        return Err(HvqError::Format(format!(
            "checkpoint has {n_tensors} tensors, architecture expects {}",
            params.tensors.len()
        )));
    }
    for t in &mut params.tensors {
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        if shape != t.value.shape() {
            return Err(HvqError::Format(format!(
                "tensor {} shape {:?} does not match architecture {:?}",
                t.name,
                shape,
                t.value.shape()
            )));
        }
        for v in t.value.data_mut() {
            *v = r.f32()?;
        }
    }
    let n_cb = r.u32()? as usize;
    if n_cb != params.codebooks.len() {
        return Err(HvqError::Format("codebook count mismatch".into()));
    }
    for cb in &mut params.codebooks {
        let k = r.u32()? as usize;
        let d = r.u32()? as usize;
        if k != cb.len() || d != cb.dim() {
            return Err(HvqError::Format("codebook geometry mismatch".into()));
        }
        let mut entries = vec![0.0f32; k * d];
        for v in &mut entries {
            *v = r.f32()?;
        }
        let mut sizes = vec![0.0f64; k];
        for v in &mut sizes {
            *v = r.f64()?;
        }
        let mut sums = vec![0.0f64; k * d];
        for v in &mut sums {
            *v = r.f64()?;
        }
        let decay = r.f64()?;
        let eps = r.f64()?;
        *cb = Codebook::from_parts(k, d, entries, sizes, sums, decay, eps)?;
    }
    let body_end = r.pos;
    let opt = if flags & 1 != 0 {
        let step = r.u64()?;
        let mut states = Vec::with_capacity(params.tensors.len());
        for t in &params.tensors {
            let n = t.value.numel();
            let mut m = vec![0.0f32; n];
            for v in &mut m {
                *v = r.f32()?;
            }
            let mut vbuf = vec![0.0f32; n];
            for v in &mut vbuf {
                *v = r.f32()?;
            }
            states.push(AdamState { m, v: vbuf });
        }
        Some(OptimizerState { states, step })
    } else {
        None
    };
    let train_hash = if flags & 2 != 0 {
        Some(r.u64()?)
    } else {
        None
    };
    let trailer = r.take(32)?;
    let mut h = Sha256::new();
    h.update(&bytes[body_start..body_end]);
    let expect: [u8; 32] = h.finalize().into();
    if trailer != expect {
        return Err(HvqError::Format("checkpoint hash mismatch".into()));
    }
    Ok((params, opt, train_hash))
}

pub fn save_checkpoint(
    path: &std::path::Path,
    params: &ModelParams,
    opt: Option<&OptimizerState>,
    train_hash: Option<u64>,
) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(params, opt, train_hash))?;
    Ok(())
}

pub fn load_checkpoint(
    path: &std::path::Path,
) -> Result<(ModelParams, Option<OptimizerState>, Option<u64>)> {
    let bytes = std::fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}
