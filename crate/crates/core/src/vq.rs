//! Vector-quantization codebooks: nearest-neighbor assignment, EMA
//! learning, and dequantization. The straight-through estimator and the
//! commitment loss live on the autodiff tape (`autodiff::Tape`).

use rand::Rng;

use crate::error::{HvqError, Result};
use crate::tensor::Tensor;

/// K learnable vectors of dimension D plus the EMA accumulators that
/// drive their updates. EMA state is kept in f64 so long runs stay
/// deterministic and drift-free.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    entries: Vec<f32>,
    k: usize,
    d: usize,
    pub ema_cluster_size: Vec<f64>,
    pub ema_embed_sum: Vec<f64>,
    pub decay: f64,
    pub epsilon: f64,
}

impl Codebook {
    /// Entries drawn uniformly from [-1, 1]^D; EMA cluster sizes start at 1
    /// and embed sums at the initial entries so the first update never
    /// divides by zero.
    pub fn init<R: Rng>(k: usize, d: usize, rng: &mut R) -> Result<Self> {
        if k < 2 || d < 1 {
            return Err(HvqError::InvalidArgument(format!(
                "codebook needs K >= 2 and D >= 1, got K={k}, D={d}"
            )));
        }
        let entries: Vec<f32> = (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ema_embed_sum = entries.iter().map(|&v| f64::from(v)).collect();
        Ok(Self {
            entries,
            k,
            d,
            ema_cluster_size: vec![1.0; k],
            ema_embed_sum,
            decay: 0.99,
            epsilon: 1e-5,
        })
    }

    pub fn from_parts(
        k: usize,
        d: usize,
        entries: Vec<f32>,
        ema_cluster_size: Vec<f64>,
        ema_embed_sum: Vec<f64>,
        decay: f64,
        epsilon: f64,
    ) -> Result<Self> {
        if entries.len() != k * d || ema_cluster_size.len() != k || ema_embed_sum.len() != k * d {
            return Err(HvqError::ShapeMismatch("codebook part sizes".into()));
        }
        Ok(Self {
            entries,
            k,
            d,
            ema_cluster_size,
            ema_embed_sum,
            decay,
            epsilon,
        })
    }

    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn entry(&self, idx: usize) -> &[f32] {
        &self.entries[idx * self.d..(idx + 1) * self.d]
    }

    pub fn entries(&self) -> &[f32] {
        &self.entries
    }

    /// Index of the entry with the smallest squared Euclidean distance to
    /// `vector`; ties break to the lowest index.
    pub fn nearest(&self, vector: &[f32]) -> usize {
        debug_assert_eq!(vector.len(), self.d);
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for k in 0..self.k {
            let e = self.entry(k);
            let mut dist = 0.0f64;
            for (v, ev) in vector.iter().zip(e) {
                let diff = f64::from(*v) - f64::from(*ev);
                dist += diff * diff;
            }
            if dist < best_dist {
                best_dist = dist;
                best = k;
            }
        }
        best
    }

    /// EMA update from one batch of assigned vectors.
    ///
    /// N_k <- g*N_k + (1-g)*count_k; m_k <- g*m_k + (1-g)*sum_k;
    /// entries_k <- m_k / smoothed(N_k) with Laplace smoothing.
    pub fn ema_update(&mut self, vectors: &[f32], indices: &[usize]) -> Result<()> {
        let n_vec = indices.len();
        if vectors.len() != n_vec * self.d {
            return Err(HvqError::ShapeMismatch(format!(
                "{} vectors of dim {} vs {} values",
                n_vec,
                self.d,
                vectors.len()
            )));
        }
        let mut counts = vec![0.0f64; self.k];
        let mut sums = vec![0.0f64; self.k * self.d];
        for (i, &idx) in indices.iter().enumerate() {
            if idx >= self.k {
                return Err(HvqError::InvalidArgument(format!(
                    "index {idx} out of range for K={}",
                    self.k
                )));
            }
            counts[idx] += 1.0;
            for j in 0..self.d {
                sums[idx * self.d + j] += f64::from(vectors[i * self.d + j]);
            }
        }
        let g = self.decay;
        for k in 0..self.k {
            self.ema_cluster_size[k] = g * self.ema_cluster_size[k] + (1.0 - g) * counts[k];
            for j in 0..self.d {
                self.ema_embed_sum[k * self.d + j] =
                    g * self.ema_embed_sum[k * self.d + j] + (1.0 - g) * sums[k * self.d + j];
            }
        }
        let total: f64 = self.ema_cluster_size.iter().sum();
        for k in 0..self.k {
            let smoothed = (self.ema_cluster_size[k] + self.epsilon)
                / (total + self.k as f64 * self.epsilon)
                * total;
            for j in 0..self.d {
                self.entries[k * self.d + j] =
                    (self.ema_embed_sum[k * self.d + j] / smoothed) as f32;
            }
        }
        Ok(())
    }
}

/// Indices plus the dequantized vectors for one latent grid.
#[derive(Debug, Clone)]
pub struct QuantizeResult {
    pub indices: Vec<usize>,
    pub z_q: Tensor,
}

/// Nearest-code assignment over a [M, D] row-major batch of vectors.
pub fn nearest_code(vectors: &Tensor, codebook: &Codebook) -> Result<Vec<usize>> {
    if codebook.is_empty() {
        return Err(HvqError::InvalidArgument("empty codebook".into()));
    }
    let d = codebook.dim();
    let shape = vectors.shape();
    if shape.is_empty() || shape[shape.len() - 1] != d {
        return Err(HvqError::ShapeMismatch(format!(
            "last axis of {shape:?} must equal codebook dim {d}"
        )));
    }
    let m = vectors.numel() / d;
    Ok((0..m)
        .map(|i| codebook.nearest(&vectors.data()[i * d..(i + 1) * d]))
        .collect())
}

/// Exact copy of the indexed codebook rows, shaped [M, D].
pub fn dequantize(indices: &[usize], codebook: &Codebook) -> Result<Tensor> {
    let d = codebook.dim();
    let mut out = Vec::with_capacity(indices.len() * d);
    for &idx in indices {
        if idx >= codebook.len() {
            return Err(HvqError::InvalidArgument(format!(
                "index {idx} out of range for K={}",
                codebook.len()
            )));
        }
        out.extend_from_slice(codebook.entry(idx));
    }
    Tensor::new(vec![indices.len(), d], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_entry_codebook() -> Codebook {
        Codebook::from_parts(
            2,
            2,
            vec![0.0, 0.0, 1.0, 1.0],
            vec![1.0, 1.0],
            vec![0.0, 0.0, 1.0, 1.0],
            0.99,
            1e-5,
        )
        .unwrap()
    }

    #[test]
    fn nearest_exact_match_and_tie_break() {
        let cb = two_entry_codebook();
        assert_eq!(cb.nearest(&[1.0, 1.0]), 1);
        // (0.5, 0.5) is equidistant; lowest index wins
        assert_eq!(cb.nearest(&[0.5, 0.5]), 0);
    }

    #[test]
    fn nearest_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let cb = Codebook::init(16, 4, &mut rng).unwrap();
        for _ in 0..64 {
            let v: Vec<f32> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let got = cb.nearest(&v);
            // brute force oracle
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for k in 0..cb.len() {
                let d: f64 = cb
                    .entry(k)
                    .iter()
                    .zip(&v)
                    .map(|(e, x)| {
                        let diff = f64::from(*e) - f64::from(*x);
                        diff * diff
                    })
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            assert_eq!(got, best);
        }
    }

    #[test]
    fn dequantize_is_exact_copy() {
        let cb = two_entry_codebook();
        let z = dequantize(&[1, 0, 1], &cb).unwrap();
        assert_eq!(z.data(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        assert!(dequantize(&[2], &cb).is_err());
    }

    #[test]
    fn codebook_entries_are_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cb = Codebook::init(8, 3, &mut rng).unwrap();
        for k in 0..cb.len() {
            assert_eq!(cb.nearest(cb.entry(k)), k);
            let z = dequantize(&[k], &cb).unwrap();
            assert_eq!(z.data(), cb.entry(k));
        }
    }

    #[test]
    fn quantization_picks_minimum_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cb = Codebook::init(16, 4, &mut rng).unwrap();
        for _ in 0..32 {
            let v: Vec<f32> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let idx = cb.nearest(&v);
            let chosen: f64 = cb
                .entry(idx)
                .iter()
                .zip(&v)
                .map(|(e, x)| {
                    let d = f64::from(*e) - f64::from(*x);
                    d * d
                })
                .sum();
            for k in 0..cb.len() {
                let d: f64 = cb
                    .entry(k)
                    .iter()
                    .zip(&v)
                    .map(|(e, x)| {
                        let d = f64::from(*e) - f64::from(*x);
                        d * d
                    })
                    .sum();
                assert!(chosen <= d + 1e-12);
            }
        }
    }

    #[test]
    fn ema_hand_arithmetic() {
        let mut cb = Codebook::from_parts(
            2,
            2,
            vec![0.0, 0.0, 5.0, 5.0],
            vec![1.0, 1.0],
            vec![0.0, 0.0, 5.0, 5.0],
            0.99,
            0.0,
        )
        .unwrap();
        cb.ema_update(&[1.0, 0.0], &[0]).unwrap();
        // N' = 0.99*1 + 0.01*1 = 1.0; m' = 0.99*0 + 0.01*1 = 0.01
        assert!((cb.ema_cluster_size[0] - 1.0).abs() < 1e-12);
        assert!((cb.ema_embed_sum[0] - 0.01).abs() < 1e-12);
        assert!((f64::from(cb.entry(0)[0]) - 0.01).abs() < 1e-6);
    }

    #[test]
    fn ema_empty_cluster_stays_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cb = Codebook::init(4, 2, &mut rng).unwrap();
        for _ in 0..200 {
            cb.ema_update(&[0.5, 0.5], &[0]).unwrap();
        }
        for k in 0..cb.len() {
            assert!(cb.entry(k).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn ema_decay_one_freezes_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut cb = Codebook::init(4, 2, &mut rng).unwrap();
        cb.decay = 1.0;
        let before = cb.entries().to_vec();
        cb.ema_update(&[0.9, -0.9, 0.1, 0.1], &[0, 1]).unwrap();
        assert_eq!(cb.entries(), &before[..]);
    }

    #[test]
    fn ema_decay_zero_sets_batch_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut cb = Codebook::init(2, 1, &mut rng).unwrap();
        cb.decay = 0.0;
        cb.epsilon = 1e-12;
        cb.ema_update(&[2.0, 4.0, -1.0], &[0, 0, 1]).unwrap();
        assert!((f64::from(cb.entry(0)[0]) - 3.0).abs() < 1e-4);
        assert!((f64::from(cb.entry(1)[0]) + 1.0).abs() < 1e-4);
    }

    #[test]
    fn ema_converges_to_cluster_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut cb = Codebook::init(3, 2, &mut rng).unwrap();
        let centers = [[-3.0f64, -3.0], [0.0, 3.0], [3.0, -2.0]];
        for _ in 0..500 {
            let mut batch = Vec::new();
            for _ in 0..48 {
                let c = centers[rng.gen_range(0..3)];
                batch.push((c[0] + 0.02 * rng.gen_range(-1.0..1.0f64)) as f32);
                batch.push((c[1] + 0.02 * rng.gen_range(-1.0..1.0f64)) as f32);
            }
            let t = Tensor::new(vec![batch.len() / 2, 2], batch.clone()).unwrap();
            let idx = nearest_code(&t, &cb).unwrap();
            cb.ema_update(&batch, &idx).unwrap();
        }
        // each center should own exactly one entry within 0.05
        for c in centers {
            let hit = (0..cb.len()).any(|k| {
                let e = cb.entry(k);
                (f64::from(e[0]) - c[0]).abs() < 0.05 && (f64::from(e[1]) - c[1]).abs() < 0.05
            });
            assert!(hit, "no entry near {c:?}: {:?}", cb.entries());
        }
    }
}
