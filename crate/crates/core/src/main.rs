//! Command-line surface for the codec: encode, decode, train, eval, and
//! rate-distortion sweeps. Machine-readable results go to standard output
//! (JSON or CSV), diagnostics to standard error.
//!
//! Exit codes: 0 ok, 2 usage error, 3 runtime failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use spcg::codec::{
    decode, encode, rate_report, Bitstream, CodecConfig, CodecMode, LosslessArch, ModelSet,
};
use spcg::metrics::quality_report;
use spcg::ply::{read_ply, write_ply, PointCloud};
use spcg::train::{log_csv, manifest_clouds, train, Schedule, TrainOptions, TrainTask};

const EXIT_USAGE: i32 = 2;
const EXIT_RUNTIME: i32 = 3;

struct CliError {
    code: i32,
    msg: String,
}

impl From<spcg::Error> for CliError {
    fn from(e: spcg::Error) -> CliError {
        CliError {
            code: EXIT_RUNTIME,
            msg: e.to_string(),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_USAGE,
        msg: msg.into(),
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "spcg", about = "Multiscale sparse point cloud geometry codec", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Lossless,
    LossyDense,
    LossySparse,
}

impl ModeArg {
    fn to_mode(self) -> CodecMode {
        match self {
            ModeArg::Lossless => CodecMode::Lossless,
            ModeArg::LossyDense => CodecMode::LossyDense,
            ModeArg::LossySparse => CodecMode::LossySparse,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ArchArg {
    #[value(name = "one_stage")]
    OneStage,
    #[value(name = "three_stage")]
    ThreeStage,
    #[value(name = "eight_stage")]
    EightStage,
    #[value(name = "slne_one_stage")]
    SlneOneStage,
}

impl ArchArg {
    fn to_arch(self) -> LosslessArch {
        match self {
            ArchArg::OneStage => LosslessArch::OneStage,
            ArchArg::ThreeStage => LosslessArch::ThreeStage,
            ArchArg::EightStage => LosslessArch::EightStage,
            ArchArg::SlneOneStage => LosslessArch::SlneOneStage,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Compress a PLY file into a bitstream.
    Encode {
        #[arg(long)]
        input: PathBuf,
        /// Model bundle file; repeat to merge several bundles.
        #[arg(long, required = true)]
        model: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "lossless")]
        mode: ModeArg,
        #[arg(long, value_enum, default_value = "eight_stage")]
        arch: ArchArg,
        /// Voxelization precision N in bits per axis.
        #[arg(long)]
        precision: u32,
        /// Lossless/lossy split scale (lossy modes only).
        #[arg(long, default_value_t = 0)]
        m: u32,
        #[arg(long)]
        output: PathBuf,
    },
    /// Decompress a bitstream back to a PLY file.
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, required = true)]
        model: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train a model on a synthetic dataset manifest.
    Train {
        /// one_stage | three_stage | eight_stage | slne_one_stage | position
        #[arg(long)]
        arch: String,
        /// Manifest of `kind n_bits seed` lines.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output model bundle; the training log goes to `<out>.log.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Geometry quality of a reconstruction against its reference.
    Eval {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        precision: u32,
        /// Compressed size in bits, for the bpp column.
        #[arg(long, default_value_t = 0)]
        bits: u64,
    },
    /// Rate-distortion sweep over a list of split scales.
    Sweep {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, required = true)]
        model: Vec<PathBuf>,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long, value_enum, default_value = "eight_stage")]
        arch: ArchArg,
        #[arg(long)]
        precision: u32,
        /// Comma-separated split scales, e.g. 5,4,3.
        #[arg(long)]
        m_list: String,
    },
}

fn worker_cap() -> CliResult<usize> {
    match std::env::var("SPCG_THREADS") {
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| usage(format!("SPCG_THREADS must be a positive integer, got '{}'", v))),
    }
}

fn load_models(paths: &[PathBuf]) -> CliResult<ModelSet> {
    let mut set = ModelSet::default();
    for p in paths {
        let bytes = std::fs::read(p).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                usage(format!("model not found: {}", p.display()))
            } else {
                CliError {
                    code: EXIT_RUNTIME,
                    msg: format!("reading {}: {}", p.display(), e),
                }
            }
        })?;
        set.merge_bundle(&bytes)?;
    }
    Ok(set)
}

fn check_split(mode: CodecMode, m: u32, precision: u32) -> CliResult {
    if mode != CodecMode::Lossless && m >= precision {
        return Err(usage(format!(
            "split scale m={} must be below the precision N={}",
            m, precision
        )));
    }
    Ok(())
}

fn read_cloud(path: &Path, precision: u32) -> CliResult<PointCloud> {
    if !path.exists() {
        return Err(usage(format!("input not found: {}", path.display())));
    }
    Ok(read_ply(path, precision)?)
}

fn encode_once(
    cloud: &PointCloud,
    cfg: &CodecConfig,
    models: &ModelSet,
) -> CliResult<(Bitstream, serde_json::Value)> {
    let (bs, _) = encode(cloud, cfg, models)?;
    let r = rate_report(&bs);
    let per_scale: Vec<_> = r
        .per_scale
        .iter()
        .map(|&(scale, bits)| json!({"scale": scale, "bits": bits}))
        .collect();
    let summary = json!({
        "points": cloud.original_count,
        "total_bits": r.total_bits,
        "bpp": r.bpp,
        "per_scale": per_scale,
    });
    Ok((bs, summary))
}

fn run(cli: Cli) -> CliResult {
    let _workers = worker_cap()?;
    match cli.cmd {
        Cmd::Encode {
            input,
            model,
            mode,
            arch,
            precision,
            m,
            output,
        } => {
            check_split(mode.to_mode(), m, precision)?;
            let models = load_models(&model)?;
            let cloud = read_cloud(&input, precision)?;
            let cfg = CodecConfig {
                mode: mode.to_mode(),
                n_bits: precision,
                m,
                arch: arch.to_arch(),
            };
            let (bs, summary) = encode_once(&cloud, &cfg, &models)?;
            std::fs::write(&output, bs.to_bytes()).map_err(spcg::Error::from)?;
            println!("{}", summary);
        }
        Cmd::Decode {
            input,
            model,
            output,
        } => {
            let models = load_models(&model)?;
            let bytes = std::fs::read(&input).map_err(|e| {
                if e.kind() == std::io::ErrorKind::NotFound {
                    usage(format!("input not found: {}", input.display()))
                } else {
                    CliError {
                        code: EXIT_RUNTIME,
                        msg: e.to_string(),
                    }
                }
            })?;
            let bs = Bitstream::from_bytes(&bytes)?;
            let cloud = decode(&bs, &models)?;
            write_ply(&cloud, &output)?;
            println!(
                "{}",
                json!({"points": cloud.len(), "precision": cloud.n_bits})
            );
        }
        Cmd::Train {
            arch,
            dataset,
            epochs,
            batch,
            seed,
            out,
        } => {
            let task = TrainTask::from_str(&arch).map_err(|e| usage(e.to_string()))?;
            let text = std::fs::read_to_string(&dataset)
                .map_err(|e| usage(format!("dataset manifest {}: {}", dataset.display(), e)))?;
            let clouds = manifest_clouds(&text).map_err(|e| usage(e.to_string()))?;
            let sched = Schedule {
                epochs,
                batch,
                ..Default::default()
            };
            let opts = TrainOptions {
                seed,
                ..Default::default()
            };
            let (models, log) = train(task, &clouds, &sched, &opts)?;
            std::fs::write(&out, models.to_bundle()?).map_err(spcg::Error::from)?;
            let log_path = out.with_extension("log.csv");
            std::fs::write(&log_path, log_csv(&log)).map_err(spcg::Error::from)?;
            let last = log.last();
            println!(
                "{}",
                json!({
                    "task": task.as_str(),
                    "epochs": epochs,
                    "clouds": clouds.len(),
                    "final_bce": last.map(|e| e.bce),
                    "final_mse": last.map(|e| e.mse),
                    "model": out.display().to_string(),
                    "log": log_path.display().to_string(),
                })
            );
        }
        Cmd::Eval {
            reference,
            test,
            precision,
            bits,
        } => {
            let a = read_cloud(&reference, precision)?;
            let b = read_cloud(&test, precision)?;
            let report = quality_report(&a, &b, bits)?;
            println!("{}", serde_json::to_string(&report).unwrap());
        }
        Cmd::Sweep {
            input,
            model,
            mode,
            arch,
            precision,
            m_list,
        } => {
            if mode == ModeArg::Lossless {
                return Err(usage("sweep requires a lossy mode"));
            }
            let ms: Vec<u32> = m_list
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| {
                    s.trim()
                        .parse::<u32>()
                        .map_err(|_| usage(format!("bad split scale '{}'", s)))
                })
                .collect::<CliResult<_>>()?;
            if ms.is_empty() {
                return Err(usage("empty m-list"));
            }
            for &m in &ms {
                check_split(mode.to_mode(), m, precision)?;
            }
            let models = load_models(&model)?;
            let cloud = read_cloud(&input, precision)?;
            println!("m,bpp,d1_psnr,d2_psnr");
            for &m in &ms {
                let cfg = CodecConfig {
                    mode: mode.to_mode(),
                    n_bits: precision,
                    m,
                    arch: arch.to_arch(),
                };
                let (bs, _) = encode_once(&cloud, &cfg, &models)?;
                let rec = decode(&bs, &models)?;
                let r = rate_report(&bs);
                let q = quality_report(&cloud, &rec, r.total_bits)?;
                let d2 = q
                    .d2_psnr
                    .map(|v| format!("{:.4}", v))
                    .unwrap_or_default();
                println!("{},{:.6},{:.4},{}", m, q.bpp, q.d1_psnr, d2);
            }
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e.msg);
            std::process::exit(e.code);
        }
    }
}
