//! Dataset ingestion, the training loop with EMA codebook updates,
//! evaluation, and the ablation harness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::config::Config;
use crate::error::{HvqError, Result};
use crate::model::{
    objective, optimizer_step, LossBreakdown, ModelConfig, ModelParams,
    OptimizerState,
};
use crate::nn::AdamConfig;
use crate::preprocess::{
    compute_stats, extract_blocks, pad_cyclic, plan_partition, standardize, Block, FieldStats,
    MaskPlane,
};
use crate::tensor::Tensor;

/// Everything that determines a training run; the seed fixes data order
/// and initialization completely.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f32,
    /// Training block size B.
    pub block: usize,
    /// Overlap v between adjacent training blocks.
    pub overlap: usize,
    /// false = discrete partition (v treated as 0).
    pub partition_overlap: bool,
    /// Multiply the reconstruction term by a per-pixel weight plane.
    pub weighted_mask: bool,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 32,
            seed: 0,
            lr: 1e-4,
            block: 64,
            overlap: 8,
            partition_overlap: true,
            weighted_mask: false,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    /// Stable 64-bit digest, stored in checkpoints.
    pub fn hash(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(format!(
            "{};{};{};{};{};{};{};{}",
            self.steps,
            self.batch_size,
            self.seed,
            self.lr,
            self.block,
            self.overlap,
            self.partition_overlap,
            self.weighted_mask
        ));
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }
}

/// Seeded Gaussian random field: white noise smoothed by a cyclic
/// separable Gaussian of the given correlation length, then standardized
/// to zero mean and unit variance.
pub fn gaussian_random_field(h: usize, w: usize, corr_len: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise = vec![0.0f64; h * w];
    for pair in noise.chunks_mut(2) {
        // Box-Muller
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        pair[0] = r * (std::f64::consts::TAU * u2).cos();
        if pair.len() == 2 {
            pair[1] = r * (std::f64::consts::TAU * u2).sin();
        }
    }
    let field = if corr_len > 0.0 {
        let radius = (3.0 * corr_len).ceil() as i64;
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|i| (-0.5 * (i as f64 / corr_len).powi(2)).exp())
            .collect();
        let ksum: f64 = kernel.iter().sum();
        let kernel: Vec<f64> = kernel.iter().map(|v| v / ksum).collect();
        let blur_rows = |src: &[f64], h: usize, w: usize| {
            let mut dst = vec![0.0f64; h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (ki, kv) in kernel.iter().enumerate() {
                        let sx = (x as i64 + ki as i64 - radius).rem_euclid(w as i64) as usize;
                        acc += kv * src[y * w + sx];
                    }
                    dst[y * w + x] = acc;
                }
            }
            dst
        };
        // blur rows, transpose, blur rows again, transpose back
        let a = blur_rows(&noise, h, w);
        let mut at = vec![0.0f64; h * w];
        for y in 0..h {
            for x in 0..w {
                at[x * h + y] = a[y * w + x];
            }
        }
        let b = blur_rows(&at, w, h);
        let mut out = vec![0.0f64; h * w];
        for x in 0..w {
            for y in 0..h {
                out[y * w + x] = b[x * h + y];
            }
        }
        out
    } else {
        noise
    };
    let n = (h * w) as f64;
    let mean: f64 = field.iter().sum::<f64>() / n;
    let var: f64 = field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-12);
    Tensor::new(
        vec![h, w],
        field.iter().map(|v| ((v - mean) / sd) as f32).collect(),
    )
    .unwrap()
}

/// Raw little-endian f32 file plus a text sidecar (keys: shape, dtype,
/// fill_value, log_scale).
pub struct RawDataset {
    pub field: Tensor,
    pub mask: MaskPlane,
    pub log_scale: bool,
    pub fill_value: Option<f32>,
}

pub fn load_raw_dataset(data: &std::path::Path, sidecar: &std::path::Path) -> Result<RawDataset> {
    let meta = Config::from_file(sidecar)?;
    let shape = meta.usize_list_or("shape", &[])?;
    if shape.is_empty() {
        return Err(HvqError::InvalidArgument(format!(
            "sidecar {} missing shape",
            sidecar.display()
        )));
    }
    let dtype = meta.str_or("dtype", "f32");
    if dtype != "f32" {
        return Err(HvqError::InvalidArgument(format!(
            "unsupported dtype {dtype:?} (only f32)"
        )));
    }
    let numel: usize = shape.iter().product();
    let bytes = std::fs::read(data)?;
    if bytes.len() != numel * 4 {
        return Err(HvqError::InvalidArgument(format!(
            "{} is {} bytes; shape {shape:?} needs {}",
            data.display(),
            bytes.len(),
            numel * 4
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let fill_value = match meta.get("fill_value") {
        Some(v) => Some(v.parse::<f32>().map_err(|_| {
            HvqError::InvalidArgument(format!("bad fill_value {v:?}"))
        })?),
        None => None,
    };
    let bits: Vec<bool> = match fill_value {
        Some(f) => values.iter().map(|&v| v != f).collect(),
        None => vec![true; numel],
    };
    Ok(RawDataset {
        field: Tensor::new(shape.clone(), values)?,
        mask: MaskPlane::new(shape, bits)?,
        log_scale: meta.bool_or("log_scale", false)?,
        fill_value,
    })
}

/// Standardized, mean-filled, padded and partitioned training blocks.
pub struct TrainingSet {
    pub blocks: Vec<Block>,
    pub stats: FieldStats,
}

pub fn make_training_blocks(
    field: &Tensor,
    mask: &MaskPlane,
    cfg: &TrainConfig,
) -> Result<TrainingSet> {
    if field.shape().len() != 2 {
        return Err(HvqError::ShapeMismatch(
            "training blocks are cut from a 2D field".into(),
        ));
    }
    let stats = compute_stats(field, mask)?;
    let mut std_field = standardize(field, &stats)?;
    for (v, &ok) in std_field.data_mut().iter_mut().zip(mask.bits()) {
        if !ok {
            *v = 0.0;
        }
    }
    let overlap = if cfg.partition_overlap { cfg.overlap } else { 0 };
    let plan = plan_partition((field.dim(0), field.dim(1)), cfg.block, overlap)?;
    let (padded, padded_mask) = pad_cyclic(&std_field, mask, plan.padded)?;
    let blocks = extract_blocks(&padded, &padded_mask, &plan)?
        .into_iter()
        .filter(|b| b.mask.valid_count() > 0)
        .collect::<Vec<_>>();
    if blocks.is_empty() {
        return Err(HvqError::Degenerate("every block is fully masked".into()));
    }
    Ok(TrainingSet { blocks, stats })
}

/// Weight plane for the weighted-masking ablation: the central half of
/// the block counts double.
pub fn center_weight_plane(block: usize) -> Tensor {
    let q = block / 4;
    let mut w = vec![1.0f32; block * block];
    for y in q..block - q {
        for x in q..block - q {
            w[y * block + x] = 2.0;
        }
    }
    Tensor::new(vec![block, block], w).unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss: LossBreakdown,
}

/// CSV rendering of a loss trace: step,l_recon,l_q,l_fft,total.
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("step,l_recon,l_q,l_fft,total\n");
    for r in trace {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.loss.l_recon, r.loss.l_q, r.loss.l_fft, r.loss.total
        ));
    }
    out
}

pub struct TrainOutcome {
    pub trace: Vec<TraceRow>,
    pub optimizer: OptimizerState,
}

/// One gradient step plus the EMA codebook update on a batch of blocks.
/// Returns the loss breakdown of the batch.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    adam: &AdamConfig,
    batch: &[&Block],
    weights: Option<&Tensor>,
) -> Result<LossBreakdown> {
    let n = batch.len();
    let b = batch[0].data.dim(0);
    let mut x = Vec::with_capacity(n * b * b);
    let mut m = Vec::with_capacity(n * b * b);
    for blk in batch {
        x.extend_from_slice(blk.data.data());
        m.extend(blk.mask.bits().iter().map(|&v| if v { 1.0f32 } else { 0.0 }));
    }
    let x = Tensor::new(vec![n, 1, b, b], x)?;
    let m = Tensor::new(vec![n, 1, b, b], m)?;
    let w = weights.map(|plane| {
        let mut data = Vec::with_capacity(n * b * b);
        for _ in 0..n {
            data.extend_from_slice(plane.data());
        }
        Tensor::new(vec![n, 1, b, b], data).unwrap()
    });

    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let hs = params.encode(&mut tape, &vars, xv)?;
    let q = params.quantize_hierarchy(&mut tape, &vars, &hs)?;
    let xhat = params.decode(&mut tape, &vars, q.z_comb)?;
    let (total, breakdown) =
        objective(&mut tape, xhat, &x, &m, w.as_ref(), q.commitment, &params.config)?;
    if !breakdown.total.is_finite() {
        return Err(HvqError::Numeric(format!(
            "non-finite loss {:?}",
            breakdown
        )));
    }
    tape.backward(total)?;
    let grads: Vec<Vec<f32>> = vars.iter().map(|&v| tape.grad(v)).collect();
    optimizer_step(params, &grads, opt, adam)?;
    // gradient-free codebook learning from the pre-quantization latents
    for i in 0..params.config.num_stages() {
        params.codebooks[i].ema_update(q.cond_rows[i].data(), &q.indices[i])?;
    }
    Ok(breakdown)
}

/// Runs the full loop. `on_step` fires after every step (for CSV logging
/// and periodic checkpoints); a non-finite loss aborts with a diagnostic
/// naming the step, leaving the caller's last written checkpoint as the
/// recovery point.
pub fn train(
    params: &mut ModelParams,
    blocks: &[Block],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, &ModelParams, &OptimizerState, &LossBreakdown) -> Result<()>,
) -> Result<TrainOutcome> {
    if blocks.is_empty() {
        return Err(HvqError::Degenerate("no training blocks".into()));
    }
    if cfg.batch_size == 0 || cfg.steps == 0 {
        return Err(HvqError::InvalidArgument(
            "steps and batch_size must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut opt = OptimizerState::new(params);
    let weights = cfg.weighted_mask.then(|| center_weight_plane(cfg.block));
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch: Vec<&Block> = (0..cfg.batch_size)
            .map(|_| &blocks[rng.gen_range(0..blocks.len())])
            .collect();
        let breakdown =
            train_step(params, &mut opt, &adam, &batch, weights.as_ref()).map_err(|e| {
                match e {
                    HvqError::Numeric(msg) => {
                        HvqError::Numeric(format!("aborted at step {step}: {msg}"))
                    }
                    HvqError::NonFinite(what) => {
                        HvqError::Numeric(format!("aborted at step {step}: non-finite {what}"))
                    }
                    other => other,
                }
            })?;
        trace.push(TraceRow {
            step,
            loss: breakdown,
        });
        on_step(step, params, &opt, &breakdown)?;
    }
    Ok(TrainOutcome {
        trace,
        optimizer: opt,
    })
}

/// Block-level evaluation of a frozen model.
#[derive(Debug, Clone)]
pub struct EvalReport {
    /// (masked MSE, valid count) per block.
    pub block_mse: Vec<(f64, u64)>,
    /// Valid-count-weighted aggregate MSE (standardized domain).
    pub mse: f64,
    /// Over the pooled valid data range of the evaluated blocks.
    pub psnr: f64,
}

pub fn evaluate(params: &ModelParams, blocks: &[Block]) -> Result<EvalReport> {
    if blocks.is_empty() {
        return Err(HvqError::InvalidArgument("empty evaluation set".into()));
    }
    let results: Vec<Result<(f64, u64)>> = crate::par::map_indexed(blocks.len(), |i| {
        let blk = &blocks[i];
        let b = blk.data.dim(0);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let x = tape.leaf(blk.data.clone().reshaped(vec![1, 1, b, b])?);
        let hs = params.encode(&mut tape, &vars, x)?;
        let q = params.quantize_hierarchy(&mut tape, &vars, &hs)?;
        let xhat = params.decode(&mut tape, &vars, q.z_comb)?;
        let rec = tape.value(xhat);
        let mut ssq = 0.0f64;
        let mut count = 0u64;
        for ((&a, &r), &ok) in blk.data.data().iter().zip(rec.data()).zip(blk.mask.bits()) {
            if ok {
                let d = f64::from(a) - f64::from(r);
                ssq += d * d;
                count += 1;
            }
        }
        Ok((if count > 0 { ssq / count as f64 } else { 0.0 }, count))
    });
    let block_mse = results.into_iter().collect::<Result<Vec<_>>>()?;
    let total_valid: u64 = block_mse.iter().map(|&(_, c)| c).sum();
    let mse = block_mse
        .iter()
        .map(|&(m, c)| m * c as f64)
        .sum::<f64>()
        / total_valid.max(1) as f64;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for blk in blocks {
        for (&v, &ok) in blk.data.data().iter().zip(blk.mask.bits()) {
            if ok {
                min = min.min(f64::from(v));
                max = max.max(f64::from(v));
            }
        }
    }
    let range = max - min;
    let psnr = if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (range * range / mse).log10()
    };
    Ok(EvalReport {
        block_mse,
        mse,
        psnr,
    })
}

/// One ablation cell and its outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub stages: usize,
    pub partition: &'static str,
    pub masking: &'static str,
    pub mse: f64,
}

/// Derives an s-stage variant of a base architecture by truncating or
/// extending its per-stage lists.
pub fn config_with_stages(base: &ModelConfig, stages: usize) -> ModelConfig {
    let mut cfg = base.clone();
    let extend = |list: &[usize], grow: bool| -> Vec<usize> {
        let mut out = list.to_vec();
        while out.len() < stages {
            let last = *out.last().unwrap();
            out.push(if grow { last * 2 } else { last });
        }
        out.truncate(stages);
        out
    };
    cfg.stage_channels = extend(&base.stage_channels, true);
    cfg.stage_strides = extend(&base.stage_strides, false);
    cfg.codebook_sizes = extend(&base.codebook_sizes, false);
    cfg
}

/// Full grid: stages {1,2,3} x partition {overlap, discrete} x masking
/// {uniform, weighted}; every cell trains from the same seed on the same
/// field and reports its held-in block MSE.
pub fn run_ablation(
    field: &Tensor,
    mask: &MaskPlane,
    base: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for stages in [1usize, 2, 3] {
        for &partition_overlap in &[true, false] {
            for &weighted in &[false, true] {
                let cfg = TrainConfig {
                    partition_overlap,
                    weighted_mask: weighted,
                    ..train_cfg.clone()
                };
                let set = make_training_blocks(field, mask, &cfg)?;
                let mut params = ModelParams::init(config_with_stages(base, stages), cfg.seed)?;
                train(&mut params, &set.blocks, &cfg, |_, _, _, _| Ok(()))?;
                let report = evaluate(&params, &set.blocks)?;
                rows.push(AblationRow {
                    stages,
                    partition: if partition_overlap { "overlap" } else { "discrete" },
                    masking: if weighted { "weighted" } else { "uniform" },
                    mse: report.mse,
                });
            }
        }
    }
    Ok(rows)
}

/// Plain-text rendering of the ablation grid.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("stages  partition  masking   testing_mse\n");
    for r in rows {
        out.push_str(&format!(
            "{:<7} {:<10} {:<9} {:.6}\n",
            r.stages, r.partition, r.masking, r.mse
        ));
    }
    out
}
