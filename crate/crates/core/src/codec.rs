//! Whole-field compression and decompression: preprocessing, per-block
//! model inference, entropy coding, and the error-bound outlier pass.
//!
//! The reconstruction used for the outlier scan during compression and
//! the one produced by decompression run through the same code, so the
//! bound max |x - x_hat| <= tau is exact, not statistical.

use crate::archive::{CompressedArchive, FLAG_CONSTANT};
use crate::autodiff::Tape;
use crate::entropy::{read_varint, rle_mask_decode, rle_mask_encode, write_varint, HuffmanTable};
use crate::error::{HvqError, Result};
use crate::model::{rows_to_nchw, ModelParams};
use crate::preprocess::{
    build_mask_and_fill, compute_stats, destandardize, extract_blocks, inverse_log_scale,
    log_offset_for, log_scale, pad_cyclic, plan_partition, reassemble, standardize, Block,
    FieldStats, MaskPlane, MissingIndicator,
};
use crate::tensor::Tensor;
use crate::vq::dequantize;

/// Compression-time settings; the model supplies the architecture.
#[derive(Debug, Clone)]
pub struct CodecConfig {
    /// Absolute error bound in original data units; None disables the
    /// outlier pass.
    pub tau: Option<f32>,
    /// Compression block size; no overlap is used at compression time.
    pub block_size: usize,
    /// Apply ln(x + offset) before standardization.
    pub log_scale: bool,
    /// How missing values are recognized, if any.
    pub missing: Option<MissingIndicator>,
}

impl CodecConfig {
    pub fn for_model(params: &ModelParams) -> Self {
        Self {
            tau: None,
            block_size: params.config.block_size_compress,
            log_scale: false,
            missing: None,
        }
    }

    fn validate(&self, params: &ModelParams) -> Result<()> {
        if let Some(t) = self.tau {
            if !(t > 0.0) || !t.is_finite() {
                return Err(HvqError::InvalidArgument(format!(
                    "error bound {t} must be positive and finite"
                )));
            }
        }
        if !self.block_size.is_power_of_two() {
            return Err(HvqError::InvalidArgument(format!(
                "block size {} must be a power of two",
                self.block_size
            )));
        }
        if self.block_size % params.config.total_stride() != 0 {
            return Err(HvqError::InvalidArgument(format!(
                "block size {} not divisible by model stride {}",
                self.block_size,
                params.config.total_stride()
            )));
        }
        Ok(())
    }
}

/// Everything reported about one compress/decompress cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    /// dB over valid points; +infinity when the reconstruction is exact.
    pub psnr: f64,
    /// Compressed bits per original element.
    pub bit_rate: f64,
    pub compression_ratio: f64,
    /// MB/s; 0 when not measured.
    pub compress_throughput: f64,
    pub decompress_throughput: f64,
    pub outlier_fraction: f64,
}

fn slice_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape.len() {
        2 => Ok((1, shape[0], shape[1])),
        3 => Ok((shape[0], shape[1], shape[2])),
        _ => Err(HvqError::ShapeMismatch(format!(
            "codec expects a 2D or 3D field, got {shape:?}"
        ))),
    }
}

fn slice_tensor(field: &Tensor, s: usize, h: usize, w: usize) -> Tensor {
    Tensor::new(vec![h, w], field.data()[s * h * w..(s + 1) * h * w].to_vec()).unwrap()
}

/// Per-stage index counts for one block.
fn stage_grid_sides(params: &ModelParams, block: usize) -> Vec<usize> {
    let mut side = block;
    params
        .config
        .stage_strides
        .iter()
        .map(|&s| {
            side /= s;
            side
        })
        .collect()
}

fn encode_block_indices(params: &ModelParams, data: &Tensor) -> Result<Vec<Vec<usize>>> {
    let b = data.dim(0);
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let x = tape.leaf(data.clone().reshaped(vec![1, 1, b, b])?);
    let hs = params.encode(&mut tape, &vars, x)?;
    let q = params.quantize_hierarchy(&mut tape, &vars, &hs)?;
    Ok(q.indices)
}

/// Decodes one block from its index grids; shared by compression (for the
/// outlier scan) and decompression.
fn decode_block(params: &ModelParams, indices: &[Vec<usize>], block: usize) -> Result<Tensor> {
    let cfg = &params.config;
    let stages = cfg.num_stages();
    let sides = stage_grid_sides(params, block);
    for (i, side) in sides.iter().enumerate() {
        if indices[i].len() != side * side {
            return Err(HvqError::Codec(format!(
                "stage {i} stream has {} indices, expected {}",
                indices[i].len(),
                side * side
            )));
        }
    }
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let mut zq = Vec::with_capacity(stages);
    for i in 0..stages {
        let rows = dequantize(&indices[i], &params.codebooks[i])?;
        let grid = rows_to_nchw(&rows, &[1, cfg.codebook_dim, sides[i], sides[i]]);
        zq.push(tape.leaf(grid));
    }
    let z_comb = match stages {
        1 => zq[0],
        2 => {
            let prior = params.upsample_prior(&mut tape, &vars, 1, zq[1])?;
            tape.concat_channels(zq[0], prior)?
        }
        _ => {
            return Err(HvqError::Codec(format!(
                "the archive format carries two index streams; {stages}-stage models \
                 are for ablation studies only"
            )))
        }
    };
    let out = params.decode(&mut tape, &vars, z_comb)?;
    tape.value(out).clone().reshaped(vec![block, block])
}

fn tables_bytes(
    t0: &HuffmanTable,
    n0: u64,
    t1: Option<&HuffmanTable>,
    n1: u64,
) -> Vec<u8> {
    let mut out = Vec::new();
    write_varint(&mut out, t0.num_symbols() as u64);
    out.extend_from_slice(t0.lengths());
    write_varint(&mut out, n0);
    match t1 {
        Some(t) => {
            write_varint(&mut out, t.num_symbols() as u64);
            out.extend_from_slice(t.lengths());
            write_varint(&mut out, n1);
        }
        None => {
            write_varint(&mut out, 0);
            write_varint(&mut out, 0);
        }
    }
    out
}

fn parse_tables(bytes: &[u8]) -> Result<(HuffmanTable, u64, Option<HuffmanTable>, u64)> {
    let mut pos = 0usize;
    let k0 = read_varint(bytes, &mut pos)? as usize;
    if k0 == 0 || pos + k0 > bytes.len() {
        return Err(HvqError::Format("table section truncated".into()));
    }
    let t0 = HuffmanTable::from_lengths(bytes[pos..pos + k0].to_vec())?;
    pos += k0;
    let n0 = read_varint(bytes, &mut pos)?;
    let k1 = read_varint(bytes, &mut pos)? as usize;
    let (t1, n1) = if k1 > 0 {
        if pos + k1 > bytes.len() {
            return Err(HvqError::Format("table section truncated".into()));
        }
        let t = HuffmanTable::from_lengths(bytes[pos..pos + k1].to_vec())?;
        pos += k1;
        let n = read_varint(bytes, &mut pos)?;
        (Some(t), n)
    } else {
        (None, read_varint(bytes, &mut pos)?)
    };
    if pos != bytes.len() {
        return Err(HvqError::Format("trailing bytes in table section".into()));
    }
    Ok((t0, n0, t1, n1))
}

fn build_stream_table(symbols: &[u32], k: usize) -> Result<HuffmanTable> {
    let mut freqs = vec![0u64; k];
    for &s in symbols {
        freqs[s as usize] += 1;
    }
    HuffmanTable::from_frequencies(&freqs)
}

/// Standardized, mean-filled field plus its stats; shared preprocessing
/// front end for compression.
fn prepare_field(
    field: &Tensor,
    cfg: &CodecConfig,
) -> Result<(Tensor, MaskPlane, FieldStats)> {
    let (mut work, mask) = match cfg.missing {
        Some(m) => build_mask_and_fill(field, m)?,
        None => {
            field.assert_finite("input field")?;
            (field.clone(), MaskPlane::all_valid(field.shape().to_vec()))
        }
    };
    if mask.valid_count() == 0 {
        return Err(HvqError::Degenerate("field has no valid points".into()));
    }
    let mut log_offset = 0.0;
    if cfg.log_scale {
        log_offset = log_offset_for(&work, &mask);
        work = log_scale(&work, &mask, log_offset)?;
    }
    let mut stats = compute_stats(&work, &mask)?;
    stats.log_scaled = cfg.log_scale;
    stats.log_offset = log_offset;
    let mut std_field = standardize(&work, &stats)?;
    for (v, &ok) in std_field.data_mut().iter_mut().zip(mask.bits()) {
        if !ok {
            *v = 0.0;
        }
    }
    Ok((std_field, mask, stats))
}

fn constant_archive(
    field: &Tensor,
    mask: &MaskPlane,
    value: f32,
    params: &ModelParams,
    cfg: &CodecConfig,
) -> CompressedArchive {
    CompressedArchive {
        flags: FLAG_CONSTANT,
        model_hash: params.content_hash(),
        shape: field.shape().to_vec(),
        block_size: cfg.block_size,
        mean: f64::from(value),
        std: 0.0,
        log_offset: 0.0,
        log_scaled: false,
        tau: cfg.tau,
        mask: rle_mask_encode(mask.bits()),
        idx0: Vec::new(),
        idx1: Vec::new(),
        outliers: Vec::new(),
        tables: Vec::new(),
    }
}

/// Reconstructs the full field (original units) from per-block indices.
fn reconstruct_field(
    params: &ModelParams,
    stats: &FieldStats,
    mask: &MaskPlane,
    shape: &[usize],
    block: usize,
    block_indices: &[Vec<Vec<usize>>],
) -> Result<Tensor> {
    let (slices, h, w) = slice_dims(shape)?;
    let plan = plan_partition((h, w), block, 0)?;
    let per_slice = plan.num_blocks();
    if block_indices.len() != slices * per_slice {
        return Err(HvqError::Codec(format!(
            "{} blocks of indices for {} expected",
            block_indices.len(),
            slices * per_slice
        )));
    }
    let decoded: Vec<Result<Tensor>> = crate::par::map_indexed(block_indices.len(), |i| {
        decode_block(params, &block_indices[i], block)
    });
    let mut out = Vec::with_capacity(shape.iter().product());
    for s in 0..slices {
        let blocks: Vec<Block> = plan
            .origins()
            .enumerate()
            .map(|(bi, origin)| {
                decoded[s * per_slice + bi]
                    .as_ref()
                    .map(|t| Block {
                        origin,
                        data: t.clone(),
                        mask: MaskPlane::all_valid(vec![block, block]),
                    })
                    .map_err(|e| HvqError::Codec(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let std_slice = reassemble(&blocks, &plan)?;
        out.extend_from_slice(std_slice.data());
    }
    let mut field = Tensor::new(shape.to_vec(), out)?;
    field = destandardize(&field, stats)?;
    if stats.log_scaled {
        field = inverse_log_scale(&field, mask, stats.log_offset)?;
    }
    Ok(field)
}

/// Valid points whose reconstruction misses by more than tau, with their
/// exact original values; sorted by flat index.
pub fn outlier_pass(
    x: &Tensor,
    xhat: &Tensor,
    mask: &MaskPlane,
    tau: f32,
) -> Result<Vec<(u64, f32)>> {
    if x.shape() != xhat.shape() || x.shape() != mask.shape() {
        return Err(HvqError::ShapeMismatch(format!(
            "outlier pass: x {:?}, xhat {:?}, mask {:?}",
            x.shape(),
            xhat.shape(),
            mask.shape()
        )));
    }
    let mut out = Vec::new();
    for (i, ((&xv, &rv), &ok)) in x
        .data()
        .iter()
        .zip(xhat.data())
        .zip(mask.bits())
        .enumerate()
    {
        if ok && (xv - rv).abs() > tau {
            out.push((i as u64, xv));
        }
    }
    Ok(out)
}

/// Compresses a 2D field (or a 3D stack, slice by slice) into an archive.
pub fn compress(
    field: &Tensor,
    params: &ModelParams,
    cfg: &CodecConfig,
) -> Result<CompressedArchive> {
    cfg.validate(params)?;
    let (slices, h, w) = slice_dims(field.shape())?;

    // constant-field fast path: every valid value identical
    {
        let mask = match cfg.missing {
            Some(m) => build_mask_and_fill(field, m)?.1,
            None => MaskPlane::all_valid(field.shape().to_vec()),
        };
        let mut first: Option<f32> = None;
        let mut constant = true;
        for (&v, &ok) in field.data().iter().zip(mask.bits()) {
            if ok {
                match first {
                    None => first = Some(v),
                    Some(f) if f != v => {
                        constant = false;
                        break;
                    }
                    _ => {}
                }
            }
        }
        match first {
            None => {
                return Err(HvqError::Degenerate("field has no valid points".into()))
            }
            Some(f) if constant => {
                return Ok(constant_archive(field, &mask, f, params, cfg));
            }
            _ => {}
        }
    }

    let (std_field, mask, stats) = prepare_field(field, cfg)?;
    let plan = plan_partition((h, w), cfg.block_size, 0)?;

    // gather every block (all slices) then encode in parallel
    let mut block_data: Vec<Tensor> = Vec::with_capacity(slices * plan.num_blocks());
    for s in 0..slices {
        let sl = slice_tensor(&std_field, s, h, w);
        let sl_mask = MaskPlane::new(
            vec![h, w],
            mask.bits()[s * h * w..(s + 1) * h * w].to_vec(),
        )?;
        let (padded, padded_mask) = pad_cyclic(&sl, &sl_mask, plan.padded)?;
        for b in extract_blocks(&padded, &padded_mask, &plan)? {
            block_data.push(b.data);
        }
    }
    let encoded: Vec<Result<Vec<Vec<usize>>>> =
        crate::par::map_indexed(block_data.len(), |i| {
            encode_block_indices(params, &block_data[i])
        });
    let block_indices = encoded.into_iter().collect::<Result<Vec<_>>>()?;

    let stages = params.config.num_stages();
    if stages > 2 {
        return Err(HvqError::Codec(
            "the archive format carries two index streams; deeper models are for \
             ablation studies only"
                .into(),
        ));
    }
    let mut sym0: Vec<u32> = Vec::new();
    let mut sym1: Vec<u32> = Vec::new();
    for bi in &block_indices {
        sym0.extend(bi[0].iter().map(|&v| v as u32));
        if stages == 2 {
            sym1.extend(bi[1].iter().map(|&v| v as u32));
        }
    }
    let t0 = build_stream_table(&sym0, params.codebooks[0].len())?;
    let idx0 = t0.encode(&sym0)?;
    let (t1, idx1) = if stages == 2 {
        let t = build_stream_table(&sym1, params.codebooks[1].len())?;
        let bytes = t.encode(&sym1)?;
        (Some(t), bytes)
    } else {
        (None, Vec::new())
    };
    let tables = tables_bytes(&t0, sym0.len() as u64, t1.as_ref(), sym1.len() as u64);

    let outliers = match cfg.tau {
        Some(tau) => {
            let xhat = reconstruct_field(
                params,
                &stats,
                &mask,
                field.shape(),
                cfg.block_size,
                &block_indices,
            )?;
            outlier_pass(field, &xhat, &mask, tau)?
        }
        None => Vec::new(),
    };

    Ok(CompressedArchive {
        flags: 0,
        model_hash: params.content_hash(),
        shape: field.shape().to_vec(),
        block_size: cfg.block_size,
        mean: stats.mean,
        std: stats.std,
        log_offset: stats.log_offset,
        log_scaled: stats.log_scaled,
        tau: cfg.tau,
        mask: rle_mask_encode(mask.bits()),
        idx0,
        idx1,
        outliers,
        tables,
    })
}

/// Reconstructs the field and its validity mask from an archive. Masked
/// positions come back as the stored mean; outliers overwrite their
/// positions with the exact original values.
pub fn decompress(
    archive: &CompressedArchive,
    params: &ModelParams,
) -> Result<(Tensor, MaskPlane)> {
    let actual = params.content_hash();
    if actual != archive.model_hash {
        return Err(HvqError::HashMismatch {
            expected: hex(&archive.model_hash),
            actual: hex(&actual),
        });
    }
    let numel = archive.element_count();
    let mask_bits = rle_mask_decode(&archive.mask)?;
    if mask_bits.len() != numel {
        return Err(HvqError::Codec(format!(
            "mask has {} bits for {} elements",
            mask_bits.len(),
            numel
        )));
    }
    let mask = MaskPlane::new(archive.shape.clone(), mask_bits)?;

    if archive.flags & FLAG_CONSTANT != 0 {
        let field = Tensor::full(archive.shape.clone(), archive.mean as f32);
        return Ok((field, mask));
    }

    let (slices, h, w) = slice_dims(&archive.shape)?;
    let plan = plan_partition((h, w), archive.block_size, 0)?;
    let sides = stage_grid_sides(params, archive.block_size);
    let stages = params.config.num_stages();
    if stages > 2 {
        return Err(HvqError::Codec(
            "archive carries two index streams; model has more stages".into(),
        ));
    }
    let total_blocks = slices * plan.num_blocks();
    let per0 = sides[0] * sides[0];
    let (t0, n0, t1, n1) = parse_tables(&archive.tables)?;
    if n0 as usize != total_blocks * per0 {
        return Err(HvqError::Codec(format!(
            "index stream 0 declares {n0} symbols, geometry expects {}",
            total_blocks * per0
        )));
    }
    let sym0 = t0.decode(&archive.idx0, n0 as usize)?;
    let sym1 = match (&t1, stages) {
        (Some(t), 2) => {
            let per1 = sides[1] * sides[1];
            if n1 as usize != total_blocks * per1 {
                return Err(HvqError::Codec(format!(
                    "index stream 1 declares {n1} symbols, geometry expects {}",
                    total_blocks * per1
                )));
            }
            t.decode(&archive.idx1, n1 as usize)?
        }
        (None, 1) => Vec::new(),
        _ => {
            return Err(HvqError::Codec(
                "table section does not match the model's stage count".into(),
            ))
        }
    };
    for &s in &sym0 {
        if s as usize >= params.codebooks[0].len() {
            return Err(HvqError::Codec(format!("index {s} out of codebook range")));
        }
    }
    if stages == 2 {
        for &s in &sym1 {
            if s as usize >= params.codebooks[1].len() {
                return Err(HvqError::Codec(format!("index {s} out of codebook range")));
            }
        }
    }

    let mut block_indices = Vec::with_capacity(total_blocks);
    for bi in 0..total_blocks {
        let mut per_stage = Vec::with_capacity(stages);
        per_stage.push(
            sym0[bi * per0..(bi + 1) * per0]
                .iter()
                .map(|&v| v as usize)
                .collect::<Vec<_>>(),
        );
        if stages == 2 {
            let per1 = sides[1] * sides[1];
            per_stage.push(
                sym1[bi * per1..(bi + 1) * per1]
                    .iter()
                    .map(|&v| v as usize)
                    .collect(),
            );
        }
        block_indices.push(per_stage);
    }

    let stats = FieldStats {
        mean: archive.mean,
        std: archive.std,
        min: 0.0,
        max: 0.0,
        valid_count: mask.valid_count(),
        log_scaled: archive.log_scaled,
        log_offset: archive.log_offset,
    };
    let mut field = reconstruct_field(
        params,
        &stats,
        &mask,
        &archive.shape,
        archive.block_size,
        &block_indices,
    )?;

    // fill convention: masked positions report the stored mean exactly
    let fill = archive.mean as f32;
    for (v, &ok) in field.data_mut().iter_mut().zip(mask.bits()) {
        if !ok {
            *v = fill;
        }
    }
    for &(idx, val) in &archive.outliers {
        let i = idx as usize;
        if i >= numel {
            return Err(HvqError::Codec(format!(
                "outlier index {i} outside field of {numel} elements"
            )));
        }
        field.data_mut()[i] = val;
    }
    Ok((field, mask))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// 10*log10(range^2 / mse) over valid points; +infinity when exact.
pub fn psnr(x: &Tensor, xhat: &Tensor, mask: &MaskPlane) -> Result<f64> {
    let (mse, range) = mse_and_range(x, xhat, mask)?;
    if range == 0.0 {
        return Err(HvqError::Degenerate(
            "PSNR undefined for zero-range data".into(),
        ));
    }
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / mse).log10())
}

/// MSE over valid points and the valid-data range of the original.
pub fn mse_and_range(x: &Tensor, xhat: &Tensor, mask: &MaskPlane) -> Result<(f64, f64)> {
    if x.shape() != xhat.shape() || x.shape() != mask.shape() {
        return Err(HvqError::ShapeMismatch(format!(
            "psnr: x {:?}, xhat {:?}, mask {:?}",
            x.shape(),
            xhat.shape(),
            mask.shape()
        )));
    }
    let mut count = 0u64;
    let mut ssq = 0.0f64;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for ((&xv, &rv), &ok) in x.data().iter().zip(xhat.data()).zip(mask.bits()) {
        if ok {
            let d = f64::from(xv) - f64::from(rv);
            ssq += d * d;
            count += 1;
            min = min.min(f64::from(xv));
            max = max.max(f64::from(xv));
        }
    }
    if count == 0 {
        return Err(HvqError::Degenerate("no valid points".into()));
    }
    Ok((ssq / count as f64, max - min))
}

/// bit_rate = 8 * bytes / elements; ratio = 32 / bit_rate for f32 data.
pub fn bit_rate_and_ratio(archive_bytes: usize, element_count: usize) -> (f64, f64) {
    let bit_rate = 8.0 * archive_bytes as f64 / element_count as f64;
    (bit_rate, 32.0 / bit_rate)
}

/// MB/s over the full operation; zero-size input reports 0 without a
/// divide-by-zero.
pub fn throughput_mb_s(bytes: u64, seconds: f64) -> f64 {
    if bytes == 0 {
        return 0.0;
    }
    bytes as f64 / 1e6 / seconds.max(1e-12)
}

/// Runs `f`, returning its output and the MB/s rate for `bytes`.
pub fn measure_throughput<T>(f: impl FnOnce() -> Result<T>, bytes: u64) -> Result<(T, f64)> {
    let start = std::time::Instant::now();
    let out = f()?;
    Ok((out, throughput_mb_s(bytes, start.elapsed().as_secs_f64())))
}
