//! Data conditioning: masked statistics, standardization, log scaling,
//! missing-value fill, cyclic padding, and block partitioning.

use crate::error::{HvqError, Result};
use crate::tensor::Tensor;

/// Valid-data statistics of one field. `mean`/`std` are over valid points
/// only; `std` is the population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub valid_count: u64,
    pub log_scaled: bool,
    pub log_offset: f64,
}

/// Binary validity grid; 1 = valid datum, 0 = missing/uninteresting.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlane {
    bits: Vec<bool>,
    shape: Vec<usize>,
}

impl MaskPlane {
    pub fn new(shape: Vec<usize>, bits: Vec<bool>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != bits.len() {
            return Err(HvqError::ShapeMismatch(format!(
                "mask shape {:?} vs {} bits",
                shape,
                bits.len()
            )));
        }
        Ok(Self { bits, shape })
    }

    pub fn all_valid(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            bits: vec![true; numel],
            shape,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn valid_count(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    /// 0/1 float plane with the same shape, for use as a loss mask.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            self.shape.clone(),
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap()
    }
}

/// How missing values are recognized in a raw field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MissingIndicator {
    /// Exact match against a sentinel fill value.
    Sentinel(f32),
    /// Everything strictly below the threshold is missing.
    Below(f32),
}

/// Mean and population std over valid points. Errors when no point is
/// valid or when the field is constant (callers take the constant-field
/// fast path instead).
pub fn compute_stats(field: &Tensor, mask: &MaskPlane) -> Result<FieldStats> {
    if field.shape() != mask.shape() {
        return Err(HvqError::ShapeMismatch(format!(
            "field {:?} vs mask {:?}",
            field.shape(),
            mask.shape()
        )));
    }
    let mut count = 0u64;
    let mut sum = 0.0f64;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for (v, &ok) in field.data().iter().zip(mask.bits()) {
        if ok {
            let x = f64::from(*v);
            count += 1;
            sum += x;
            min = min.min(x);
            max = max.max(x);
        }
    }
    if count == 0 {
        return Err(HvqError::Degenerate("field has no valid points".into()));
    }
    let mean = sum / count as f64;
    let mut ssq = 0.0f64;
    for (v, &ok) in field.data().iter().zip(mask.bits()) {
        if ok {
            let d = f64::from(*v) - mean;
            ssq += d * d;
        }
    }
    let std = (ssq / count as f64).sqrt();
    if std == 0.0 {
        return Err(HvqError::Degenerate(
            "constant field (sigma = 0): use the constant-field shortcut".into(),
        ));
    }
    Ok(FieldStats {
        mean,
        std,
        min,
        max,
        valid_count: count,
        log_scaled: false,
        log_offset: 0.0,
    })
}

/// x_st = (x - mean) / std.
pub fn standardize(field: &Tensor, stats: &FieldStats) -> Result<Tensor> {
    if stats.std <= 0.0 {
        return Err(HvqError::Degenerate("sigma must be positive".into()));
    }
    let data = field
        .data()
        .iter()
        .map(|&v| ((f64::from(v) - stats.mean) / stats.std) as f32)
        .collect();
    Tensor::new(field.shape().to_vec(), data)
}

/// x = mean + x_st * std.
pub fn destandardize(field: &Tensor, stats: &FieldStats) -> Result<Tensor> {
    if stats.std <= 0.0 {
        return Err(HvqError::Degenerate("sigma must be positive".into()));
    }
    let data = field
        .data()
        .iter()
        .map(|&v| (stats.mean + f64::from(v) * stats.std) as f32)
        .collect();
    Tensor::new(field.shape().to_vec(), data)
}

/// Offset that makes every valid value strictly positive: 1e-6 - min when
/// min <= 0, otherwise 0.
pub fn log_offset_for(field: &Tensor, mask: &MaskPlane) -> f64 {
    let mut min = f64::INFINITY;
    for (v, &ok) in field.data().iter().zip(mask.bits()) {
        if ok {
            min = min.min(f64::from(*v));
        }
    }
    if min <= 0.0 {
        1e-6 - min
    } else {
        0.0
    }
}

/// y = ln(x + offset) on valid points; masked positions pass through.
pub fn log_scale(field: &Tensor, mask: &MaskPlane, offset: f64) -> Result<Tensor> {
    let mut out = field.data().to_vec();
    for (v, &ok) in out.iter_mut().zip(mask.bits()) {
        if ok {
            let shifted = f64::from(*v) + offset;
            if shifted <= 0.0 {
                return Err(HvqError::InvalidArgument(format!(
                    "nonpositive value {shifted} after log offset {offset}"
                )));
            }
            *v = shifted.ln() as f32;
        }
    }
    Tensor::new(field.shape().to_vec(), out)
}

/// x = exp(y) - offset on valid points.
pub fn inverse_log_scale(field: &Tensor, mask: &MaskPlane, offset: f64) -> Result<Tensor> {
    let mut out = field.data().to_vec();
    for (v, &ok) in out.iter_mut().zip(mask.bits()) {
        if ok {
            *v = (f64::from(*v).exp() - offset) as f32;
        }
    }
    Tensor::new(field.shape().to_vec(), out)
}

/// Builds the validity mask and replaces missing entries with the mean of
/// the valid data.
pub fn build_mask_and_fill(
    field: &Tensor,
    missing: MissingIndicator,
) -> Result<(Tensor, MaskPlane)> {
    let bits: Vec<bool> = field
        .data()
        .iter()
        .map(|&v| match missing {
            MissingIndicator::Sentinel(s) => v != s,
            MissingIndicator::Below(t) => v >= t,
        })
        .collect();
    if bits.iter().all(|&b| !b) {
        return Err(HvqError::Degenerate("all values are missing".into()));
    }
    let mut sum = 0.0f64;
    let mut count = 0u64;
    for (v, &ok) in field.data().iter().zip(&bits) {
        if ok {
            sum += f64::from(*v);
            count += 1;
        }
    }
    let mean = (sum / count as f64) as f32;
    let filled: Vec<f32> = field
        .data()
        .iter()
        .zip(&bits)
        .map(|(&v, &ok)| if ok { v } else { mean })
        .collect();
    Ok((
        Tensor::new(field.shape().to_vec(), filled)?,
        MaskPlane::new(field.shape().to_vec(), bits)?,
    ))
}

/// Cyclic padding of a 2D field (and its mask) up to `target`: the region
/// appended at the high end of each axis wraps around from the low end.
pub fn pad_cyclic(
    field: &Tensor,
    mask: &MaskPlane,
    target: (usize, usize),
) -> Result<(Tensor, MaskPlane)> {
    let (h, w) = (field.dim(0), field.dim(1));
    let (th, tw) = target;
    if th < h || tw < w {
        return Err(HvqError::InvalidArgument(format!(
            "target {th}x{tw} smaller than field {h}x{w}"
        )));
    }
    let mut data = vec![0.0f32; th * tw];
    let mut bits = vec![false; th * tw];
    for i in 0..th {
        let si = i % h;
        for j in 0..tw {
            let sj = j % w;
            data[i * tw + j] = field.data()[si * w + sj];
            bits[i * tw + j] = mask.bits()[si * w + sj];
        }
    }
    Ok((
        Tensor::new(vec![th, tw], data)?,
        MaskPlane::new(vec![th, tw], bits)?,
    ))
}

/// Partition geometry over a 2D field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPlan {
    pub original: (usize, usize),
    pub padded: (usize, usize),
    pub block: usize,
    pub overlap: usize,
    pub origins_y: Vec<usize>,
    pub origins_x: Vec<usize>,
}

impl BlockPlan {
    pub fn num_blocks(&self) -> usize {
        self.origins_y.len() * self.origins_x.len()
    }

    /// Block origins in row-major order.
    pub fn origins(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.origins_y
            .iter()
            .flat_map(move |&oy| self.origins_x.iter().map(move |&ox| (oy, ox)))
    }
}

fn axis_origins(len: usize, block: usize, overlap: usize) -> (Vec<usize>, usize) {
    let step = block - overlap;
    let n = if len <= block {
        1
    } else {
        (len - overlap).div_ceil(step)
    };
    let padded = (n - 1) * step + block;
    ((0..n).map(|k| k * step).collect(), padded)
}

/// Block origins at multiples of B - v; the padded extent is the smallest
/// one where the final block fits.
pub fn plan_partition(shape: (usize, usize), block: usize, overlap: usize) -> Result<BlockPlan> {
    if !block.is_power_of_two() {
        return Err(HvqError::InvalidArgument(format!(
            "block size {block} must be a power of two"
        )));
    }
    if overlap >= block {
        return Err(HvqError::InvalidArgument(format!(
            "overlap {overlap} must be smaller than block {block}"
        )));
    }
    let (oy, ph) = axis_origins(shape.0, block, overlap);
    let (ox, pw) = axis_origins(shape.1, block, overlap);
    Ok(BlockPlan {
        original: shape,
        padded: (ph, pw),
        block,
        overlap,
        origins_y: oy,
        origins_x: ox,
    })
}

/// One extracted tile: data plus its mask bits.
#[derive(Debug, Clone)]
pub struct Block {
    pub origin: (usize, usize),
    pub data: Tensor,
    pub mask: MaskPlane,
}

/// Cuts the padded field into plan-order blocks.
pub fn extract_blocks(field: &Tensor, mask: &MaskPlane, plan: &BlockPlan) -> Result<Vec<Block>> {
    if (field.dim(0), field.dim(1)) != plan.padded {
        return Err(HvqError::ShapeMismatch(format!(
            "field {:?} does not match padded plan {:?}",
            field.shape(),
            plan.padded
        )));
    }
    let b = plan.block;
    let w = plan.padded.1;
    let mut blocks = Vec::with_capacity(plan.num_blocks());
    for (oy, ox) in plan.origins() {
        let mut data = Vec::with_capacity(b * b);
        let mut bits = Vec::with_capacity(b * b);
        for i in 0..b {
            let row = (oy + i) * w + ox;
            data.extend_from_slice(&field.data()[row..row + b]);
            bits.extend_from_slice(&mask.bits()[row..row + b]);
        }
        blocks.push(Block {
            origin: (oy, ox),
            data: Tensor::new(vec![b, b], data)?,
            mask: MaskPlane::new(vec![b, b], bits)?,
        });
    }
    Ok(blocks)
}

/// Writes blocks back and trims to the original extents. Overlapping
/// regions take the later block's values (training-only path).
pub fn reassemble(blocks: &[Block], plan: &BlockPlan) -> Result<Tensor> {
    if blocks.len() != plan.num_blocks() {
        return Err(HvqError::ShapeMismatch(format!(
            "{} blocks for a plan of {}",
            blocks.len(),
            plan.num_blocks()
        )));
    }
    let (ph, pw) = plan.padded;
    let b = plan.block;
    let mut padded = vec![0.0f32; ph * pw];
    for (block, (oy, ox)) in blocks.iter().zip(plan.origins()) {
        if block.origin != (oy, ox) {
            return Err(HvqError::ShapeMismatch(
                "blocks out of plan order".into(),
            ));
        }
        for i in 0..b {
            let dst = (oy + i) * pw + ox;
            padded[dst..dst + b].copy_from_slice(&block.data.data()[i * b..(i + 1) * b]);
        }
    }
    let (h, w) = plan.original;
    let mut out = vec![0.0f32; h * w];
    for i in 0..h {
        out[i * w..(i + 1) * w].copy_from_slice(&padded[i * pw..i * pw + w]);
    }
    Tensor::new(vec![h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(h: usize, w: usize, data: Vec<f32>) -> Tensor {
        Tensor::new(vec![h, w], data).unwrap()
    }

    #[test]
    fn stats_hand_arithmetic() {
        let f = field(1, 3, vec![1.0, 2.0, 3.0]);
        let m = MaskPlane::all_valid(vec![1, 3]);
        let s = compute_stats(&f, &m).unwrap();
        assert_eq!(s.mean, 2.0);
        assert!((s.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(s.valid_count, 3);
    }

    #[test]
    fn stats_ignore_masked_values() {
        let f = field(1, 4, vec![1.0, 1e30, 3.0, -4e20]);
        let m = MaskPlane::new(vec![1, 4], vec![true, false, true, false]).unwrap();
        let s = compute_stats(&f, &m).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.valid_count, 2);
    }

    #[test]
    fn constant_field_is_degenerate() {
        let f = field(1, 3, vec![5.0; 3]);
        let m = MaskPlane::all_valid(vec![1, 3]);
        assert!(matches!(
            compute_stats(&f, &m),
            Err(HvqError::Degenerate(_))
        ));
    }

    #[test]
    fn standardize_known_value_and_round_trip() {
        let stats = FieldStats {
            mean: 5.0,
            std: 2.0,
            min: 0.0,
            max: 10.0,
            valid_count: 4,
            log_scaled: false,
            log_offset: 0.0,
        };
        let f = field(1, 2, vec![5.0, 7.0]);
        let st = standardize(&f, &stats).unwrap();
        assert_eq!(st.data(), &[0.0, 1.0]);
        let back = destandardize(&st, &stats).unwrap();
        for (a, b) in back.data().iter().zip(f.data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn log_round_trip_and_offset_rule() {
        let f = field(1, 3, vec![-1.0, 0.5, 2.0]);
        let m = MaskPlane::all_valid(vec![1, 3]);
        let off = log_offset_for(&f, &m);
        assert!((off - (1e-6 + 1.0)).abs() < 1e-12);
        let logged = log_scale(&f, &m, off).unwrap();
        let back = inverse_log_scale(&logged, &m, off).unwrap();
        for (a, b) in back.data().iter().zip(f.data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
        // x=1, offset=0 -> 0
        let f1 = field(1, 1, vec![1.0]);
        let m1 = MaskPlane::all_valid(vec![1, 1]);
        assert_eq!(log_scale(&f1, &m1, 0.0).unwrap().data()[0], 0.0);
    }

    #[test]
    fn mask_and_fill_sentinel() {
        const FILL: f32 = -9.96921e36;
        let f = field(1, 3, vec![1.0, FILL, 3.0]);
        let (filled, mask) = build_mask_and_fill(&f, MissingIndicator::Sentinel(FILL)).unwrap();
        assert_eq!(mask.bits(), &[true, false, true]);
        assert_eq!(filled.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn mask_threshold_predicate() {
        let f = field(1, 3, vec![1.0, -2e30, 3.0]);
        let (_, mask) = build_mask_and_fill(&f, MissingIndicator::Below(-1e30)).unwrap();
        assert_eq!(mask.bits(), &[true, false, true]);
    }

    #[test]
    fn no_missing_values_leaves_field_untouched() {
        let f = field(1, 3, vec![1.0, 2.0, 3.0]);
        let (filled, mask) = build_mask_and_fill(&f, MissingIndicator::Sentinel(-1.0)).unwrap();
        assert_eq!(filled.data(), f.data());
        assert_eq!(mask.valid_count(), 3);
    }

    #[test]
    fn cyclic_pad_wraps() {
        let f = field(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        let m = MaskPlane::all_valid(vec![1, 4]);
        let (p, _) = pad_cyclic(&f, &m, (1, 6)).unwrap();
        assert_eq!(p.data(), &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0]);
        // identity when target equals shape
        let (same, _) = pad_cyclic(&f, &m, (1, 4)).unwrap();
        assert_eq!(same.data(), f.data());
        // 2D: padded column j >= w equals column j - w
        let f2 = field(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let m2 = MaskPlane::all_valid(vec![2, 2]);
        let (p2, _) = pad_cyclic(&f2, &m2, (3, 3)).unwrap();
        assert_eq!(p2.data(), &[1.0, 2.0, 1.0, 3.0, 4.0, 3.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn partition_overlap_origins() {
        let plan = plan_partition((120, 120), 64, 8).unwrap();
        assert_eq!(plan.origins_y, vec![0, 56]);
        assert_eq!(plan.padded, (120, 120));
        assert_eq!(plan.num_blocks(), 4);
    }

    #[test]
    fn partition_discrete_ceiling() {
        let plan = plan_partition((1800, 3600), 256, 0).unwrap();
        assert_eq!(plan.padded, (2048, 3840));
        assert_eq!(plan.num_blocks(), 8 * 15);
    }

    #[test]
    fn partition_single_block() {
        for v in [0, 8, 63] {
            let plan = plan_partition((64, 64), 64, v).unwrap();
            assert_eq!(plan.num_blocks(), 1);
            assert_eq!(plan.padded, (64, 64));
        }
    }

    #[test]
    fn partition_rejects_bad_geometry() {
        assert!(plan_partition((64, 64), 60, 0).is_err());
        assert!(plan_partition((64, 64), 64, 64).is_err());
    }

    #[test]
    fn extract_reassemble_bitwise_identity() {
        let h = 100;
        let w = 70;
        let data: Vec<f32> = (0..h * w).map(|v| (v as f32).sin()).collect();
        let f = field(h, w, data.clone());
        let m = MaskPlane::all_valid(vec![h, w]);
        let plan = plan_partition((h, w), 64, 0).unwrap();
        let (pf, pm) = pad_cyclic(&f, &m, plan.padded).unwrap();
        let blocks = extract_blocks(&pf, &pm, &plan).unwrap();
        let back = reassemble(&blocks, &plan).unwrap();
        assert_eq!(back.data(), &data[..]);
    }

    #[test]
    fn overlap_blocks_share_columns() {
        let f = field(64, 120, (0..64 * 120).map(|v| v as f32).collect());
        let m = MaskPlane::all_valid(vec![64, 120]);
        let plan = plan_partition((64, 120), 64, 8).unwrap();
        let (pf, pm) = pad_cyclic(&f, &m, plan.padded).unwrap();
        let blocks = extract_blocks(&pf, &pm, &plan).unwrap();
        assert_eq!(blocks.len(), 2);
        // last 8 columns of block 0 equal first 8 columns of block 1
        for i in 0..64 {
            for j in 0..8 {
                assert_eq!(
                    blocks[0].data.data()[i * 64 + 56 + j],
                    blocks[1].data.data()[i * 64 + j]
                );
            }
        }
    }

    #[test]
    fn periodic_field_blocks_identical_at_wrapped_origins() {
        // 64-periodic along x: wrapped padding reproduces the same tile
        let h = 64;
        let w = 96;
        let data: Vec<f32> = (0..h * w)
            .map(|v| {
                let j = v % w;
                ((j % 64) as f32 * 0.1).cos()
            })
            .collect();
        let f = field(h, w, data);
        let m = MaskPlane::all_valid(vec![h, w]);
        let plan = plan_partition((h, w), 64, 0).unwrap();
        let (pf, pm) = pad_cyclic(&f, &m, plan.padded).unwrap();
        let blocks = extract_blocks(&pf, &pm, &plan).unwrap();
        // column 64..96 wrapped to 96..128 equals column 0..32 values
        assert_eq!(blocks.len(), 2);
        for i in 0..64 {
            for j in 64..96 {
                assert_eq!(
                    pf.data()[i * plan.padded.1 + j + 32],
                    pf.data()[i * plan.padded.1 + (j + 32) % 96]
                );
            }
        }
    }
}
