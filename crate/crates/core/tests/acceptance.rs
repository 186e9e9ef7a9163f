//! End-to-end acceptance suite. Each test covers one numbered criterion
//! and prints a single `criterion N: pass|FAIL` line (visible with
//! `cargo test -- --nocapture`).

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hvq::archive::{deserialize_archive, serialize_archive};
use hvq::autodiff::{Tape, Var};
use hvq::codec::{
    bit_rate_and_ratio, compress, decompress, psnr, CodecConfig,
};
use hvq::entropy::{rle_mask_decode, rle_mask_encode, HuffmanTable};
use hvq::model::{
    checkpoint_bytes, objective, ModelConfig, ModelParams, OptimizerState,
};
use hvq::nn::{AdamConfig, ConvGeom, Padding};
use hvq::preprocess::{
    build_mask_and_fill, compute_stats, destandardize, extract_blocks,
    inverse_log_scale, log_offset_for, log_scale, pad_cyclic, plan_partition,
    reassemble, standardize, MaskPlane, MissingIndicator,
};
use hvq::trainer::{
    ablation_table, gaussian_random_field, make_training_blocks, run_ablation,
    train, train_step, TrainConfig,
};
use hvq::vq::{nearest_code, Codebook};
use hvq::Tensor;

type Check = std::result::Result<String, String>;

macro_rules! check {
    ($cond:expr, $($msg:tt)*) => {
        if !$cond {
            return Err(format!($($msg)*));
        }
    };
}

fn s<T>(r: hvq::Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn report(n: usize, body: fn() -> Check) {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(detail)) => println!("criterion {n}: pass — {detail}"),
        Ok(Err(e)) => {
            println!("criterion {n}: FAIL — {e}");
            panic!("criterion {n} failed: {e}");
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            println!("criterion {n}: FAIL — panicked: {msg}");
            panic!("criterion {n} panicked: {msg}");
        }
    }
}

fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

// ---------------------------------------------------------------- 1 ---

/// Central finite differences on every leaf of a rebuilt tape.
/// Returns the worst relative error across all elements.
fn fd_worst(leaves: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |ts: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        f64::from(tape.value(loss).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let grads: Vec<Vec<f32>> = vars.iter().map(|&v| tape.grad(v)).collect();

    let eps = 1e-2f32;
    let mut worst = 0.0f64;
    for (li, g) in grads.iter().enumerate() {
        for i in 0..g.len() {
            let mut plus: Vec<Tensor> = leaves.to_vec();
            plus[li].data_mut()[i] += eps;
            let mut minus: Vec<Tensor> = leaves.to_vec();
            minus[li].data_mut()[i] -= eps;
            let num = (eval(&plus) - eval(&minus)) / (2.0 * f64::from(eps));
            let ana = f64::from(g[i]);
            let denom = ana.abs().max(num.abs()).max(1e-2);
            worst = worst.max((ana - num).abs() / denom);
        }
    }
    worst
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let tol = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_overall: f64 = 0.0;
    let mut run = |name: &str, leaves: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var| -> Check {
        let w = fd_worst(leaves, build);
        check!(w <= tol, "{name}: worst relative error {w:.2e} > {tol:.0e}");
        worst_overall = worst_overall.max(w);
        Ok(String::new())
    };

    // conv: stride 1, pad 1, k3
    {
        let input = rand_tensor(vec![1, 2, 4, 4], &mut rng);
        let kernel = rand_tensor(vec![2, 2, 3, 3], &mut rng);
        let bias = rand_tensor(vec![2], &mut rng);
        let target = rand_tensor(vec![1, 2, 4, 4], &mut rng);
        run("conv2d", &[input, kernel, bias], &|tape, v| {
            let out = tape
                .conv2d(v[0], v[1], v[2], ConvGeom::new(1, Padding::symmetric(1)))
                .unwrap();
            tape.sq_diff_mean(out, target.clone()).unwrap()
        })?;
    }

    // transposed conv: stride 2, pad 1, k3; out 7x7
    {
        let input = rand_tensor(vec![1, 2, 4, 4], &mut rng);
        let kernel = rand_tensor(vec![2, 2, 3, 3], &mut rng);
        let bias = rand_tensor(vec![2], &mut rng);
        let target = rand_tensor(vec![1, 2, 7, 7], &mut rng);
        run("convt2d", &[input, kernel, bias], &|tape, v| {
            let out = tape
                .convt2d(v[0], v[1], v[2], ConvGeom::new(2, Padding::symmetric(1)))
                .unwrap();
            tape.sq_diff_mean(out, target.clone()).unwrap()
        })?;
    }

    // gelu
    {
        let input = rand_tensor(vec![60], &mut rng);
        let target = rand_tensor(vec![60], &mut rng);
        run("gelu", &[input], &|tape, v| {
            let out = tape.gelu(v[0]).unwrap();
            tape.sq_diff_mean(out, target.clone()).unwrap()
        })?;
    }

    // gdn and igdn: input, beta, gamma all checked
    for inverse in [false, true] {
        let input = rand_tensor(vec![1, 3, 4, 4], &mut rng);
        let beta = Tensor::full(vec![3], 1.0);
        let gamma_data: Vec<f32> =
            (0..9).map(|_| rng.gen_range(0.01f32..0.2)).collect();
        let gamma = Tensor::new(vec![3, 3], gamma_data).unwrap();
        let target = rand_tensor(vec![1, 3, 4, 4], &mut rng);
        let name = if inverse { "igdn" } else { "gdn" };
        run(name, &[input, beta, gamma], &|tape, v| {
            let out = tape.gdn(v[0], v[1], v[2], inverse).unwrap();
            tape.sq_diff_mean(out, target.clone()).unwrap()
        })?;
    }

    // commitment: mean squared pull toward fixed codebook rows
    {
        let z = rand_tensor(vec![10, 4], &mut rng);
        let q = rand_tensor(vec![10, 4], &mut rng);
        run("commitment", &[z], &|tape, v| {
            tape.sq_diff_mean(v[0], q.clone()).unwrap()
        })?;
    }

    // full objective (recon + commitment + frequency term) on xhat and z.
    // Small magnitudes keep the scalar loss well-conditioned for finite
    // differences (the loss is stored as a single f32).
    {
        let small = |shape: Vec<usize>, rng: &mut ChaCha8Rng| {
            let mut t = rand_tensor(shape, rng);
            for v in t.data_mut() {
                *v *= 0.25;
            }
            t
        };
        let xhat = small(vec![2, 1, 8, 8], &mut rng);
        let z = small(vec![10, 4], &mut rng);
        let q = small(vec![10, 4], &mut rng);
        let x = small(vec![2, 1, 8, 8], &mut rng);
        let mask_data: Vec<f32> = (0..128)
            .map(|_| if rng.gen_bool(0.85) { 1.0 } else { 0.0 })
            .collect();
        let mask = Tensor::new(vec![2, 1, 8, 8], mask_data).unwrap();
        let weights_data: Vec<f32> = (0..128)
            .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 2.0 })
            .collect();
        let weights = Tensor::new(vec![2, 1, 8, 8], weights_data).unwrap();
        let cfg = ModelConfig {
            lambda_fft: 0.5,
            ..ModelConfig::smoke()
        };
        run("objective", &[xhat, z], &|tape, v| {
            let commitment = tape.sq_diff_mean(v[1], q.clone()).unwrap();
            let (total, _) = objective(
                tape,
                v[0],
                &x,
                &mask,
                Some(&weights),
                commitment,
                &cfg,
            )
            .unwrap();
            total
        })?;
    }

    let elapsed = start.elapsed().as_secs_f64();
    check!(elapsed < 60.0, "gradient suite took {elapsed:.1}s >= 60s");
    Ok(format!(
        "all layer gradients within 1e-3 of central differences \
         (worst {worst_overall:.2e}, {elapsed:.1}s)"
    ))
}

#[test]
fn acceptance_1_gradient_correctness() {
    report(1, criterion_1);
}

// ---------------------------------------------------------------- 2 ---

fn criterion_2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut checked = 0usize;
    for _ in 0..1000 {
        let k = rng.gen_range(2usize..=64);
        let d = rng.gen_range(1usize..=16);
        let m = rng.gen_range(1usize..=8);
        let cb = s(Codebook::init(k, d, &mut rng))?;
        let vectors = rand_tensor(vec![m, d], &mut rng);
        let got = s(nearest_code(&vectors, &cb))?;
        for (row, &idx) in got.iter().enumerate() {
            let v = &vectors.data()[row * d..(row + 1) * d];
            let mut best = 0usize;
            let mut best_dist = f64::INFINITY;
            for cand in 0..k {
                let e = cb.entry(cand);
                let dist: f64 = v
                    .iter()
                    .zip(e)
                    .map(|(a, b)| {
                        let diff = f64::from(*a) - f64::from(*b);
                        diff * diff
                    })
                    .sum();
                if dist < best_dist {
                    best_dist = dist;
                    best = cand;
                }
            }
            check!(
                idx == best,
                "instance (K={k}, D={d}) row {row}: got {idx}, oracle {best}"
            );
            checked += 1;
        }
    }
    Ok(format!(
        "nearest_code matched brute force on 1000 instances ({checked} rows), zero mismatches"
    ))
}

#[test]
fn acceptance_2_vq_oracle() {
    report(2, criterion_2);
}

// ---------------------------------------------------------------- 3 ---

fn criterion_3() -> Check {
    let centers = [[0.0f32, 0.0], [5.0, 5.0], [-5.0, 5.0]];
    // start each entry well off its center
    let entries: Vec<f32> = centers
        .iter()
        .flat_map(|c| [c[0] + 0.4, c[1] - 0.4])
        .collect();
    let mut cb = s(Codebook::from_parts(
        3,
        2,
        entries,
        vec![0.0; 3],
        vec![0.0; 6],
        0.99,
        1e-5,
    ))?;

    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut gauss = move |mu: f32, sigma: f32| -> f32 {
        let u1: f64 = rng.gen_range(1e-12f64..1.0);
        let u2: f64 = rng.gen_range(0.0f64..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        mu + sigma * z as f32
    };

    for _ in 0..500 {
        let mut batch = Vec::with_capacity(60 * 2);
        for c in &centers {
            for _ in 0..20 {
                batch.push(gauss(c[0], 0.1));
                batch.push(gauss(c[1], 0.1));
            }
        }
        let t = Tensor::new(vec![60, 2], batch).unwrap();
        let idx = s(nearest_code(&t, &cb))?;
        s(cb.ema_update(t.data(), &idx))?;
    }

    let mut worst = 0.0f64;
    for (i, c) in centers.iter().enumerate() {
        let e = cb.entry(i);
        let dist = (f64::from(e[0] - c[0]).powi(2) + f64::from(e[1] - c[1]).powi(2)).sqrt();
        check!(
            dist <= 0.05,
            "entry {i} ended {dist:.4} away from its cluster mean (> 0.05)"
        );
        worst = worst.max(dist);
    }
    Ok(format!(
        "K=3 EMA codebook converged to 3 cluster means after 500 updates (worst distance {worst:.4})"
    ))
}

#[test]
fn acceptance_3_ema_convergence() {
    report(3, criterion_3);
}

// ---------------------------------------------------------------- 4 ---

fn tiny_codec_model(seed: u64) -> ModelParams {
    let cfg = ModelConfig {
        base_channels: 2,
        stage_channels: vec![3, 4],
        stage_strides: vec![2, 2],
        codebook_sizes: vec![16, 16],
        codebook_dim: 4,
        block_size_compress: 64,
        ..ModelConfig::default()
    };
    ModelParams::init(cfg, seed).unwrap()
}

fn criterion_4() -> Check {
    let params = tiny_codec_model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut fields_checked = 0usize;
    for f in 0..50u64 {
        let scale = rng.gen_range(0.5f32..3.0);
        let shift = rng.gen_range(-2.0f32..2.0);
        let mut field = gaussian_random_field(64, 64, rng.gen_range(3.0..10.0), 100 + f);
        for v in field.data_mut() {
            *v = *v * scale + shift;
        }
        // every third field gets a missing region marked by a sentinel
        let missing = if f % 3 == 0 {
            for i in 0..200 {
                field.data_mut()[i * 17 % 4096] = 1e10;
            }
            Some(MissingIndicator::Sentinel(1e10))
        } else {
            None
        };
        let mask = match missing {
            Some(m) => s(build_mask_and_fill(&field, m))?.1,
            None => MaskPlane::all_valid(vec![64, 64]),
        };
        let sigma = s(compute_stats(&field, &mask))?.std as f32;

        let mut sizes = Vec::new();
        for frac in [0.5f32, 0.1, 0.01] {
            let tau = frac * sigma;
            let cfg = CodecConfig {
                tau: Some(tau),
                missing,
                ..CodecConfig::for_model(&params)
            };
            let archive = s(compress(&field, &params, &cfg))?;
            let (rec, rmask) = s(decompress(&archive, &params))?;
            let mut worst = 0.0f32;
            for ((&xv, &rv), &ok) in
                field.data().iter().zip(rec.data()).zip(rmask.bits())
            {
                if ok {
                    worst = worst.max((xv - rv).abs());
                }
            }
            check!(
                worst <= tau,
                "field {f}, tau={frac}σ: max error {worst} exceeds bound {tau}"
            );
            sizes.push(serialize_archive(&archive).len());
        }
        check!(
            sizes[0] <= sizes[1] && sizes[1] <= sizes[2],
            "field {f}: archive sizes {sizes:?} not non-increasing in tau"
        );
        fields_checked += 1;
    }
    Ok(format!(
        "error bound held exactly on {fields_checked} fields x 3 tau levels; size monotone in tau"
    ))
}

#[test]
fn acceptance_4_error_bound() {
    report(4, criterion_4);
}

// ---------------------------------------------------------------- 5 ---

fn criterion_5() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(55);

    // Huffman: 10^6 symbols from a skewed distribution
    let n = 1_000_000usize;
    let symbols: Vec<u32> = (0..n)
        .map(|_| {
            let mut v = 0u32;
            while v < 63 && rng.gen_bool(0.7) {
                v += 1;
            }
            v
        })
        .collect();
    let mut freqs = vec![0u64; 64];
    for &sym in &symbols {
        freqs[sym as usize] += 1;
    }
    let table = s(HuffmanTable::from_frequencies(&freqs))?;
    let bytes = s(table.encode(&symbols))?;
    let decoded = s(table.decode(&bytes, n))?;
    check!(decoded == symbols, "Huffman round trip diverged on 10^6 symbols");

    // RLE: 10^6 bits with biased runs
    let mut bits = Vec::with_capacity(n);
    let mut cur = true;
    while bits.len() < n {
        let run = rng.gen_range(1usize..200).min(n - bits.len());
        bits.extend(std::iter::repeat(cur).take(run));
        cur = !cur;
    }
    let enc = rle_mask_encode(&bits);
    check!(
        s(rle_mask_decode(&enc))? == bits,
        "RLE round trip diverged on 10^6 bits"
    );

    // archive serialize/deserialize is field-exact end to end
    let params = tiny_codec_model(5);
    let field = gaussian_random_field(64, 64, 6.0, 500);
    let cfg = CodecConfig {
        tau: Some(0.2),
        ..CodecConfig::for_model(&params)
    };
    let archive = s(compress(&field, &params, &cfg))?;
    let wire = serialize_archive(&archive);
    let back = s(deserialize_archive(&wire))?;
    let (rec_a, _) = s(decompress(&archive, &params))?;
    let (rec_b, _) = s(decompress(&back, &params))?;
    check!(
        rec_a.data() == rec_b.data(),
        "decompression differs after a serialization round trip"
    );

    // corrupt-header fuzzing must never crash (errors are fine)
    for _ in 0..2000 {
        let mut bad = wire.clone();
        match rng.gen_range(0u8..3) {
            0 => {
                let i = rng.gen_range(0..bad.len().min(101));
                bad[i] ^= 1 << rng.gen_range(0..8);
            }
            1 => {
                let i = rng.gen_range(0..bad.len());
                bad[i] = rng.gen();
            }
            _ => bad.truncate(rng.gen_range(0..bad.len())),
        }
        if let Ok(a) = deserialize_archive(&bad) {
            let _ = decompress(&a, &params);
        }
    }
    Ok(
        "Huffman and RLE exact on 10^6-symbol streams; archive round trip field-exact; \
         2000 corrupt-header fuzz cases crash-free"
            .into(),
    )
}

#[test]
fn acceptance_5_lossless_backend() {
    report(5, criterion_5);
}

// ---------------------------------------------------------------- 6 ---

fn criterion_6() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(66);

    // standardize/destandardize within 1e-5 relative
    let mut field = gaussian_random_field(100, 70, 5.0, 600);
    for v in field.data_mut() {
        *v = *v * 37.5 + 412.0;
    }
    let mask = MaskPlane::all_valid(vec![100, 70]);
    let stats = s(compute_stats(&field, &mask))?;
    let back = s(destandardize(&s(standardize(&field, &stats))?, &stats))?;
    for (&a, &b) in field.data().iter().zip(back.data()) {
        let rel = f64::from((a - b).abs()) / f64::from(a.abs()).max(1.0);
        check!(rel <= 1e-5, "standardize round trip off by {rel:.2e} at {a}");
    }

    // log/inverse-log within 1e-5 relative (positive skewed field)
    let pos_data: Vec<f32> = (0..100 * 70)
        .map(|_| (rng.gen_range(-2.0f32..4.0)).exp())
        .collect();
    let pos = Tensor::new(vec![100, 70], pos_data).unwrap();
    let offset = log_offset_for(&pos, &mask);
    let logged = s(log_scale(&pos, &mask, offset))?;
    let unlogged = s(inverse_log_scale(&logged, &mask, offset))?;
    for (&a, &b) in pos.data().iter().zip(unlogged.data()) {
        let rel = f64::from((a - b).abs()) / f64::from(a.abs()).max(1e-3);
        check!(rel <= 1e-5, "log round trip off by {rel:.2e} at {a}");
    }

    // v=0 partition / reassemble is a bitwise identity (cyclic padding)
    let plan = s(plan_partition((100, 70), 32, 0))?;
    let (padded, padded_mask) = s(pad_cyclic(&field, &mask, plan.padded))?;
    // padding must wrap from the opposite edge
    check!(
        padded.data()[100 * padded.dim(1)] == field.data()[0],
        "cyclic padding did not wrap the first row"
    );
    let blocks = s(extract_blocks(&padded, &padded_mask, &plan))?;
    let rec = s(reassemble(&blocks, &plan))?;
    check!(
        rec.data() == field.data(),
        "partition/reassemble is not a bitwise identity"
    );

    Ok(
        "standardize and log transforms invert within 1e-5; v=0 partition \
         round trip bitwise exact with cyclic padding"
            .into(),
    )
}

#[test]
fn acceptance_6_pipeline_identities() {
    report(6, criterion_6);
}

// ---------------------------------------------------------------- 7 ---

fn criterion_7() -> Check {
    let start = Instant::now();

    // single-block overfit oracle first (fast)
    let field = gaussian_random_field(192, 192, 12.0, 1);
    let mask = MaskPlane::all_valid(vec![192, 192]);
    let tcfg = TrainConfig {
        steps: 900,
        batch_size: 8,
        seed: 7,
        lr: 2e-3,
        block: 32,
        overlap: 8,
        partition_overlap: true,
        weighted_mask: false,
        checkpoint_every: 1_000_000,
    };
    let set = s(make_training_blocks(&field, &mask, &tcfg))?;

    let model_cfg = ModelConfig {
        block_size_compress: 32,
        ..ModelConfig::smoke()
    };
    {
        let mut params = s(ModelParams::init(model_cfg.clone(), 3))?;
        let mut opt = OptimizerState::new(&params);
        // batch-1 full-batch descent needs a gentler rate than the main
        // run; 2e-3 collapses into a dead plateau around step 150
        let adam = AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        };
        let one = &set.blocks[0];
        let mut overfit_mse = f64::INFINITY;
        let mut overfit_steps = 0usize;
        for step in 1..=2000usize {
            let loss = s(train_step(&mut params, &mut opt, &adam, &[one], None))?;
            overfit_mse = f64::from(loss.l_recon);
            overfit_steps = step;
            if overfit_mse < 0.05 {
                break;
            }
        }
        check!(
            overfit_mse < 0.05,
            "single-block overfit stuck at MSE {overfit_mse:.4} after 2000 steps"
        );
        println!(
            "  overfit: standardized MSE {overfit_mse:.4} after {overfit_steps} steps"
        );
    }

    // full run: train, then compress/decompress and measure rate + quality
    let mut params = s(ModelParams::init(model_cfg, 7))?;
    s(train(&mut params, &set.blocks, &tcfg, |_, _, _, _| Ok(())))?;

    let ccfg = CodecConfig::for_model(&params);
    let archive = s(compress(&field, &params, &ccfg))?;
    let bytes = serialize_archive(&archive).len();
    let (bit_rate, _) = bit_rate_and_ratio(bytes, field.numel());
    let (rec, rmask) = s(decompress(&archive, &params))?;
    let quality = s(psnr(&field, &rec, &rmask))?;
    let elapsed = start.elapsed().as_secs_f64();

    check!(
        quality >= 35.0,
        "masked PSNR {quality:.2} dB below 35 dB (bit rate {bit_rate:.3})"
    );
    check!(bit_rate <= 2.0, "bit rate {bit_rate:.3} bpp above 2.0");
    check!(tcfg.steps <= 20_000, "step budget exceeded");
    check!(elapsed < 1800.0, "training took {elapsed:.0}s >= 30 min");
    Ok(format!(
        "two-stage model reached {quality:.2} dB at {bit_rate:.3} bpp in {} steps \
         ({elapsed:.0}s); overfit oracle under 0.05",
        tcfg.steps
    ))
}

#[test]
fn acceptance_7_desk_scale_training() {
    report(7, criterion_7);
}

// ---------------------------------------------------------------- 8 ---

fn criterion_8() -> Check {
    // dyadic case: every quantity exact in binary floating point
    let (br, ratio) = bit_rate_and_ratio(1024, 65536);
    check!(br == 0.125, "bit rate for 1024B/65536 = {br}, want 0.125");
    check!(ratio == 256.0, "ratio for 1024B/65536 = {ratio}, want 256");
    check!(ratio * br == 32.0, "ratio*bit_rate = {} != 32 exactly", ratio * br);

    // 0.40 bpp maps to ratio 80
    let (br2, ratio2) = bit_rate_and_ratio(5, 100);
    check!(br2 == 0.4, "bit rate for 5B/100 = {br2}, want 0.4");
    check!((ratio2 - 80.0).abs() < 1e-9, "ratio for 0.40 bpp = {ratio2}, want 80");

    // product identity across random sizes
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    for _ in 0..100 {
        let bytes = rng.gen_range(1usize..100_000);
        let elems = rng.gen_range(1usize..1_000_000);
        let (b, r) = bit_rate_and_ratio(bytes, elems);
        let rel = (b * r / 32.0 - 1.0).abs();
        check!(rel <= 1e-12, "ratio*bit_rate off by {rel:.2e} for {bytes}B/{elems}");
    }

    // uniform 0.01 error on a unit-range field is 40 dB; a single 1.0
    // point sets the range (1.01 is not exactly representable, so its
    // rounding must carry negligible weight in the mean)
    let n = 10_000usize;
    let mut data = vec![0.0f32; n];
    data[0] = 1.0;
    let x = Tensor::new(vec![100, 100], data).unwrap();
    let mut xhat = x.clone();
    for v in xhat.data_mut() {
        *v += 0.01;
    }
    let mask = MaskPlane::all_valid(vec![100, 100]);
    let p = s(psnr(&x, &xhat, &mask))?;
    check!(
        (p - 40.0).abs() <= 1e-6,
        "PSNR of uniform 0.01 error = {p:.9}, want 40 +- 1e-6"
    );
    Ok(format!(
        "ratio*bit_rate = 32; 0.40 bpp -> ratio 80; uniform-0.01 PSNR = {p:.7} dB"
    ))
}

#[test]
fn acceptance_8_metric_identities() {
    report(8, criterion_8);
}

// ---------------------------------------------------------------- 9 ---

fn ablation_setup() -> (Tensor, MaskPlane, ModelConfig, TrainConfig) {
    let field = gaussian_random_field(48, 48, 6.0, 9);
    let mask = MaskPlane::all_valid(vec![48, 48]);
    let base = ModelConfig {
        base_channels: 2,
        stage_channels: vec![3, 4],
        stage_strides: vec![2, 2],
        codebook_sizes: vec![8, 8],
        codebook_dim: 4,
        block_size_train: 16,
        block_size_compress: 16,
        overlap: 4,
        ..ModelConfig::default()
    };
    let tcfg = TrainConfig {
        steps: 8,
        batch_size: 4,
        seed: 5,
        lr: 1e-3,
        block: 16,
        overlap: 4,
        checkpoint_every: 1_000_000,
        ..TrainConfig::default()
    };
    (field, mask, base, tcfg)
}

fn criterion_9() -> Check {
    let (field, mask, base, tcfg) = ablation_setup();
    let rows = s(run_ablation(&field, &mask, &base, &tcfg))?;
    check!(rows.len() == 12, "ablation produced {} rows, want 12", rows.len());
    for stages in [1usize, 2, 3] {
        for partition in ["overlap", "discrete"] {
            for masking in ["uniform", "weighted"] {
                check!(
                    rows.iter().any(|r| r.stages == stages
                        && r.partition == partition
                        && r.masking == masking),
                    "missing ablation cell ({stages}, {partition}, {masking})"
                );
            }
        }
    }
    for r in &rows {
        check!(r.mse.is_finite() && r.mse > 0.0, "non-finite MSE in cell {r:?}");
    }
    println!("{}", ablation_table(&rows));

    let rows2 = s(run_ablation(&field, &mask, &base, &tcfg))?;
    for (a, b) in rows.iter().zip(&rows2) {
        check!(
            a.mse.to_bits() == b.mse.to_bits(),
            "cell ({}, {}, {}) not bitwise reproducible: {} vs {}",
            a.stages,
            a.partition,
            a.masking,
            a.mse,
            b.mse
        );
    }
    Ok("12-cell ablation grid ran end to end; identical configs reproduce MSE bitwise".into())
}

#[test]
fn acceptance_9_ablation_harness() {
    report(9, criterion_9);
}

// --------------------------------------------------------------- 10 ---

fn trained_tiny(seed: u64) -> std::result::Result<(ModelParams, OptimizerState, TrainConfig), String> {
    let field = gaussian_random_field(64, 64, 6.0, 1000);
    let mask = MaskPlane::all_valid(vec![64, 64]);
    let cfg = ModelConfig {
        base_channels: 2,
        stage_channels: vec![3, 4],
        stage_strides: vec![2, 2],
        codebook_sizes: vec![16, 16],
        codebook_dim: 4,
        block_size_train: 32,
        block_size_compress: 64,
        ..ModelConfig::default()
    };
    let tcfg = TrainConfig {
        steps: 20,
        batch_size: 4,
        seed,
        lr: 1e-3,
        block: 32,
        checkpoint_every: 1_000_000,
        ..TrainConfig::default()
    };
    let set = s(make_training_blocks(&field, &mask, &tcfg))?;
    let mut params = s(ModelParams::init(cfg, seed))?;
    let outcome = s(train(&mut params, &set.blocks, &tcfg, |_, _, _, _| Ok(())))?;
    Ok((params, outcome.optimizer, tcfg))
}

fn criterion_10() -> Check {
    let (pa, oa, ta) = trained_tiny(17)?;
    let (pb, ob, tb) = trained_tiny(17)?;
    let ck_a = checkpoint_bytes(&pa, Some(&oa), Some(ta.hash()));
    let ck_b = checkpoint_bytes(&pb, Some(&ob), Some(tb.hash()));
    check!(ck_a == ck_b, "checkpoints differ between two identically seeded runs");

    let field = gaussian_random_field(96, 96, 8.0, 1001);
    let ccfg = CodecConfig {
        tau: Some(0.3),
        ..CodecConfig::for_model(&pa)
    };
    let wire_a = serialize_archive(&s(compress(&field, &pa, &ccfg))?);
    let wire_b = serialize_archive(&s(compress(&field, &pb, &ccfg))?);
    check!(wire_a == wire_b, "archives differ between two identically seeded runs");

    #[cfg(feature = "parallel")]
    for workers in [1usize, 4] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| e.to_string())?;
        let wire = pool.install(|| -> std::result::Result<Vec<u8>, String> {
            Ok(serialize_archive(&s(compress(&field, &pa, &ccfg))?))
        })?;
        check!(
            wire == wire_a,
            "archive differs with {workers} workers"
        );
    }

    #[cfg(feature = "parallel")]
    let pools = "worker counts 1 and 4";
    #[cfg(not(feature = "parallel"))]
    let pools = "sequential fallback";
    Ok(format!(
        "fixed seed reproduced checkpoints and archives bitwise; archives identical across {pools}"
    ))
}

#[test]
fn acceptance_10_determinism() {
    report(10, criterion_10);
}
