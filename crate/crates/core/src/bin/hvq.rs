//! Command-line surface: train, compress, decompress, eval, inspect.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numeric
//! failure, 5 model-hash mismatch, 6 corrupt archive.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use hvq::archive::{deserialize_archive, serialize_archive, FLAG_CONSTANT};
use hvq::codec::{
    bit_rate_and_ratio, compress, decompress, psnr, throughput_mb_s, CodecConfig,
};
use hvq::config::Config;
use hvq::entropy::{read_varint, HuffmanTable};
use hvq::error::HvqError;
use hvq::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelParams};
use hvq::preprocess::{MaskPlane, MissingIndicator};
use hvq::trainer::{
    evaluate, gaussian_random_field, load_raw_dataset, make_training_blocks, run_ablation,
    ablation_table, trace_csv, train, TrainConfig,
};
use hvq::{Result, Tensor};

#[derive(Parser)]
#[command(
    name = "hvq",
    version,
    about = "Hierarchical vector-quantized lossy compressor for 2D scientific fields"
)]
struct Cli {
    /// Worker threads for data-parallel sections; 1 forces serial runs.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model (synthetic corpus by default, raw+sidecar otherwise).
    Train {
        /// Flat key=value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// key=value overrides; these win over the config file.
        #[arg(long = "override")]
        overrides: Vec<String>,
        /// Convenience override for the training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Raw f32 training field (with --sidecar); omitted = synthetic.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        sidecar: Option<PathBuf>,
        /// Output checkpoint path.
        #[arg(long, default_value = "model.hvqm")]
        out: PathBuf,
        /// Loss trace CSV path.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Run the full ablation grid instead of a single training run.
        #[arg(long)]
        ablation: bool,
    },
    /// Compress a raw f32 field into an archive.
    Compress {
        /// Raw little-endian f32 input.
        input: PathBuf,
        /// Text sidecar with shape/dtype/fill_value/log_scale.
        #[arg(long)]
        sidecar: PathBuf,
        /// Model checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Absolute error bound in original units.
        #[arg(long)]
        tau: Option<f32>,
        #[arg(long, default_value = "out.hvqc")]
        out: PathBuf,
        /// Decompress again and report PSNR; fail if the bound is broken.
        #[arg(long)]
        verify: bool,
    },
    /// Reconstruct a field from an archive.
    Decompress {
        archive: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Output raw f32 file (4 bytes per element).
        #[arg(long, default_value = "out.raw")]
        out: PathBuf,
    },
    /// Block-level evaluation of a trained model on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        sidecar: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "override")]
        overrides: Vec<String>,
    },
    /// Print archive header, section sizes, and entropy estimates.
    Inspect { archive: PathBuf },
}

fn exit_code(e: &HvqError) -> i32 {
    match e {
        HvqError::InvalidArgument(_) => 2,
        HvqError::Io(_) | HvqError::ShapeMismatch(_) | HvqError::Degenerate(_) => 3,
        HvqError::Numeric(_) | HvqError::NonFinite(_) | HvqError::DoubleBackward => 4,
        HvqError::HashMismatch { .. } => 5,
        HvqError::Format(_)
        | HvqError::BadMagic
        | HvqError::UnsupportedVersion(_)
        | HvqError::SectionTable(_)
        | HvqError::Codec(_) => 6,
    }
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::from_file(p)?,
        None => Config::new(),
    };
    for o in overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

fn model_config_from(cfg: &Config) -> Result<ModelConfig> {
    // desk-scale defaults so training finishes in minutes on a CPU
    let d = ModelConfig::smoke();
    let mc = ModelConfig {
        base_channels: cfg.usize_or("base_channels", d.base_channels)?,
        stage_channels: cfg.usize_list_or("stage_channels", &d.stage_channels)?,
        stage_strides: cfg.usize_list_or("stage_strides", &d.stage_strides)?,
        codebook_sizes: cfg.usize_list_or("codebook_sizes", &d.codebook_sizes)?,
        codebook_dim: cfg.usize_or("codebook_dim", d.codebook_dim)?,
        lambda_recon: cfg.f32_or("lambda_recon", d.lambda_recon)?,
        lambda_q: cfg.f32_or("lambda_q", d.lambda_q)?,
        lambda_fft: cfg.f32_or("lambda_fft", d.lambda_fft)?,
        block_size_train: cfg.usize_or("block", d.block_size_train)?,
        block_size_compress: cfg.usize_or("block_compress", d.block_size_compress)?,
        overlap: cfg.usize_or("overlap", d.overlap)?,
    };
    mc.validate()?;
    Ok(mc)
}

fn train_config_from(cfg: &Config) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        steps: cfg.usize_or("steps", d.steps)?,
        batch_size: cfg.usize_or("batch_size", d.batch_size)?,
        seed: cfg.u64_or("seed", d.seed)?,
        lr: cfg.f32_or("lr", d.lr)?,
        block: cfg.usize_or("block", d.block)?,
        overlap: cfg.usize_or("overlap", d.overlap)?,
        partition_overlap: cfg.bool_or("partition_overlap", d.partition_overlap)?,
        weighted_mask: cfg.bool_or("weighted_mask", d.weighted_mask)?,
        checkpoint_every: cfg.usize_or("checkpoint_every", d.checkpoint_every)?,
    })
}

fn load_training_field(
    cfg: &Config,
    data: Option<&Path>,
    sidecar: Option<&Path>,
) -> Result<(Tensor, MaskPlane)> {
    match (data, sidecar) {
        (Some(d), Some(s)) => {
            let ds = load_raw_dataset(d, s)?;
            Ok((ds.field, ds.mask))
        }
        (Some(_), None) | (None, Some(_)) => Err(HvqError::InvalidArgument(
            "--data and --sidecar must be given together".into(),
        )),
        (None, None) => {
            let h = cfg.usize_or("field_h", 512)?;
            let w = cfg.usize_or("field_w", 512)?;
            let corr = cfg.f64_or("corr_len", 6.0)?;
            let seed = cfg.u64_or("data_seed", 1)?;
            let field = gaussian_random_field(h, w, corr, seed);
            let mask = MaskPlane::all_valid(vec![h, w]);
            Ok((field, mask))
        }
    }
}

fn cmd_train(
    config: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
    data: Option<&Path>,
    sidecar: Option<&Path>,
    out: &Path,
    trace_path: Option<&Path>,
    ablation: bool,
) -> Result<()> {
    let mut cfg = load_config(config, overrides)?;
    if let Some(s) = seed {
        cfg.apply_override(&format!("seed={s}"))?;
    }
    print!("resolved config:\n{}", cfg.render());
    let mc = model_config_from(&cfg)?;
    let tc = train_config_from(&cfg)?;
    let (field, mask) = load_training_field(&cfg, data, sidecar)?;

    if ablation {
        let rows = run_ablation(&field, &mask, &mc, &tc)?;
        print!("{}", ablation_table(&rows));
        return Ok(());
    }

    let set = make_training_blocks(&field, &mask, &tc)?;
    let mut params = ModelParams::init(mc, tc.seed)?;
    let train_hash = tc.hash();
    let every = tc.checkpoint_every.max(1);
    let outcome = train(&mut params, &set.blocks, &tc, |step, p, opt, loss| {
        if step % every == 0 {
            save_checkpoint(out, p, Some(opt), Some(train_hash))?;
        }
        if step % 100 == 0 {
            println!(
                "step {step}: total={:.6} recon={:.6} q={:.6}",
                loss.total, loss.l_recon, loss.l_q
            );
        }
        Ok(())
    })?;
    save_checkpoint(out, &params, Some(&outcome.optimizer), Some(train_hash))?;
    if let Some(tp) = trace_path {
        std::fs::write(tp, trace_csv(&outcome.trace))?;
    }
    let last = outcome.trace.last().unwrap();
    println!(
        "trained steps={} final_total={:.6} checkpoint={}",
        last.step,
        last.loss.total,
        out.display()
    );
    Ok(())
}

fn codec_config_for(
    params: &ModelParams,
    tau: Option<f32>,
    fill: Option<f32>,
    log_scale: bool,
) -> CodecConfig {
    let mut cfg = CodecConfig::for_model(params);
    cfg.tau = tau;
    cfg.missing = fill.map(MissingIndicator::Sentinel);
    cfg.log_scale = log_scale;
    cfg
}

fn cmd_compress(
    input: &Path,
    sidecar: &Path,
    model: &Path,
    tau: Option<f32>,
    out: &Path,
    verify: bool,
) -> Result<()> {
    let (params, _, _) = load_checkpoint(model)?;
    let ds = load_raw_dataset(input, sidecar)?;
    let cfg = codec_config_for(&params, tau, ds.fill_value, ds.log_scale);
    let start = std::time::Instant::now();
    let archive = compress(&ds.field, &params, &cfg)?;
    let bytes = serialize_archive(&archive);
    std::fs::write(out, &bytes)?;
    let seconds = start.elapsed().as_secs_f64();
    let elements = ds.field.numel();
    let (bit_rate, ratio) = bit_rate_and_ratio(bytes.len(), elements);
    let outlier_fraction = archive.outliers.len() as f64 / elements as f64;
    let mbps = throughput_mb_s(4 * elements as u64, seconds);

    let mut extra = String::new();
    if verify {
        let (rec, mask) = decompress(&archive, &params)?;
        let db = psnr(&ds.field, &rec, &mask)?;
        extra = format!(" psnr={db:.4}");
        if let Some(t) = tau {
            let max_err = ds
                .field
                .data()
                .iter()
                .zip(rec.data())
                .zip(mask.bits())
                .filter(|&(_, &ok)| ok)
                .map(|((a, b), _)| (a - b).abs())
                .fold(0.0f32, f32::max);
            if max_err > t {
                return Err(HvqError::Numeric(format!(
                    "error bound violated: max error {max_err} > tau {t}"
                )));
            }
        }
    }
    println!(
        "compress bit_rate={bit_rate:.6} ratio={ratio:.4}{extra} \
         outlier_fraction={outlier_fraction:.6} seconds={seconds:.3} mb_per_s={mbps:.2}"
    );
    Ok(())
}

fn cmd_decompress(archive_path: &Path, model: &Path, out: &Path) -> Result<()> {
    let (params, _, _) = load_checkpoint(model)?;
    let bytes = std::fs::read(archive_path)?;
    let archive = deserialize_archive(&bytes)?;
    let start = std::time::Instant::now();
    let (field, _mask) = decompress(&archive, &params)?;
    let seconds = start.elapsed().as_secs_f64();
    let raw: Vec<u8> = field.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(out, &raw)?;
    let mbps = throughput_mb_s(raw.len() as u64, seconds);
    println!(
        "decompress elements={} bytes={} seconds={seconds:.3} mb_per_s={mbps:.2}",
        field.numel(),
        raw.len()
    );
    Ok(())
}

fn cmd_eval(
    model: &Path,
    data: Option<&Path>,
    sidecar: Option<&Path>,
    config: Option<&Path>,
    overrides: &[String],
) -> Result<()> {
    let cfg = load_config(config, overrides)?;
    let (params, _, _) = load_checkpoint(model)?;
    let tc = train_config_from(&cfg)?;
    let (field, mask) = load_training_field(&cfg, data, sidecar)?;
    let set = make_training_blocks(&field, &mask, &tc)?;
    let report = evaluate(&params, &set.blocks)?;
    println!(
        "eval blocks={} mse={:.8} psnr={:.4}",
        report.block_mse.len(),
        report.mse,
        report.psnr
    );
    Ok(())
}

/// Empirical entropy (bits/symbol) of a decoded index stream.
fn stream_entropy(symbols: &[u32], k: usize) -> f64 {
    if symbols.is_empty() {
        return 0.0;
    }
    let mut counts = vec![0u64; k];
    for &s in symbols {
        counts[s as usize] += 1;
    }
    let n = symbols.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

fn cmd_inspect(path: &Path) -> Result<()> {
    let bytes = std::fs::read(path)?;
    let a = deserialize_archive(&bytes)?;
    println!("archive {} ({} bytes)", path.display(), bytes.len());
    println!("  shape: {:?}  block_size: {}", a.shape, a.block_size);
    println!(
        "  mean: {}  std: {}  log_scaled: {}  log_offset: {}",
        a.mean, a.std, a.log_scaled, a.log_offset
    );
    println!(
        "  tau: {}  constant: {}",
        a.tau.map_or("disabled".into(), |t| t.to_string()),
        a.flags & FLAG_CONSTANT != 0
    );
    let hash: String = a.model_hash.iter().map(|b| format!("{b:02x}")).collect();
    println!("  model_hash: {hash}");
    let outlier_bytes = 8 + a.outliers.len() * 12;
    let sections = [
        ("MASK", a.mask.len()),
        ("IDX0", a.idx0.len()),
        ("IDX1", a.idx1.len()),
        ("OUTLIERS", outlier_bytes),
        ("TABLES", a.tables.len()),
    ];
    let payload: usize = sections.iter().map(|&(_, l)| l).sum();
    println!("  payload: {payload} bytes in {} sections", sections.len());
    for (name, len) in sections {
        println!(
            "    {name:<9} {len:>10} bytes  {:6.2}%",
            100.0 * len as f64 / payload.max(1) as f64
        );
    }
    println!("  outliers: {}", a.outliers.len());

    if !a.tables.is_empty() {
        let mut pos = 0usize;
        let k0 = read_varint(&a.tables, &mut pos)? as usize;
        let t0 = HuffmanTable::from_lengths(a.tables[pos..pos + k0].to_vec())?;
        pos += k0;
        let n0 = read_varint(&a.tables, &mut pos)? as usize;
        let sym0 = t0.decode(&a.idx0, n0)?;
        let h0 = stream_entropy(&sym0, k0);
        println!(
            "  idx0: {} symbols over K={k0}, entropy {h0:.3} bits/symbol (<= {})",
            n0,
            (k0 as f64).log2().ceil()
        );
        let k1 = read_varint(&a.tables, &mut pos)? as usize;
        if k1 > 0 {
            let t1 = HuffmanTable::from_lengths(a.tables[pos..pos + k1].to_vec())?;
            pos += k1;
            let n1 = read_varint(&a.tables, &mut pos)? as usize;
            let sym1 = t1.decode(&a.idx1, n1)?;
            let h1 = stream_entropy(&sym1, k1);
            println!(
                "  idx1: {} symbols over K={k1}, entropy {h1:.3} bits/symbol (<= {})",
                n1,
                (k1 as f64).log2().ceil()
            );
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Train {
            config,
            overrides,
            seed,
            data,
            sidecar,
            out,
            trace,
            ablation,
        } => cmd_train(
            config.as_deref(),
            overrides,
            *seed,
            data.as_deref(),
            sidecar.as_deref(),
            out,
            trace.as_deref(),
            *ablation,
        ),
        Cmd::Compress {
            input,
            sidecar,
            model,
            tau,
            out,
            verify,
        } => cmd_compress(input, sidecar, model, *tau, out, *verify),
        Cmd::Decompress {
            archive,
            model,
            out,
        } => cmd_decompress(archive, model, out),
        Cmd::Eval {
            model,
            data,
            sidecar,
            config,
            overrides,
        } => cmd_eval(
            model,
            data.as_deref(),
            sidecar.as_deref(),
            config.as_deref(),
            overrides,
        ),
        Cmd::Inspect { archive } => cmd_inspect(archive),
    }
}

fn main() {
    let cli = Cli::parse();
    #[cfg(feature = "parallel")]
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
        {
            eprintln!("error: cannot configure {n} workers: {e}");
            std::process::exit(2);
        }
    }
    #[cfg(not(feature = "parallel"))]
    if let Some(n) = cli.workers {
        if n > 1 {
            eprintln!("note: built without the parallel feature; running serial");
        }
    }
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
