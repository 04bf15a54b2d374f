use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use nvc::bitstream::read_stream;
use nvc::complexity::{analytic_metrics, plan_isocontrol, run_bench, save_report, speedup, BenchConfig, Ratio, Vary};
use nvc::model::{CodecConfig, ColorSpace, Mode};
use nvc::pipeline::{decode_video, encode_video, EncodeSettings, Parallelism};
use nvc::rate::{Qp, RateModuleBank, QP_MAX};
use nvc::video::{bpp, frame_bytes, load_video, plane_names, psnr, save_video, Frame};
use nvc::weights::Weights;

#[derive(Parser)]
#[command(name = "nvc", version, about = "Neural video codec with bit-exact integer inference")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress a raw video file.
    Encode(EncodeArgs),
    /// Decompress a stream to a raw video file.
    Decode(DecodeArgs),
    /// Encode and decode in memory, then report rate and quality.
    Roundtrip(EncodeArgs),
    /// Per-plane PSNR between two raw video files.
    Psnr(PsnrArgs),
    /// Time convolution stacks that isolate MACs, latent size, and module count.
    Bench(BenchArgs),
    /// Print a stream's header and per-frame chunk fields.
    Info(InfoArgs),
    /// Write seeded weight and rate-bank files.
    Genweights(GenArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CliMode {
    Real,
    Int16,
}

impl From<CliMode> for Mode {
    fn from(m: CliMode) -> Mode {
        match m {
            CliMode::Real => Mode::Real,
            CliMode::Int16 => Mode::Int16,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CliColor {
    Yuv420,
    Rgb,
}

impl From<CliColor> for ColorSpace {
    fn from(c: CliColor) -> ColorSpace {
        match c {
            CliColor::Yuv420 => ColorSpace::Yuv420,
            CliColor::Rgb => ColorSpace::Rgb,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CliVary {
    Comp,
    Size,
    Num,
}

impl From<CliVary> for Vary {
    fn from(v: CliVary) -> Vary {
        match v {
            CliVary::Comp => Vary::Comp,
            CliVary::Size => Vary::Size,
            CliVary::Num => Vary::Num,
        }
    }
}

fn parse_qp(s: &str) -> std::result::Result<Qp, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if !(0.0..=QP_MAX as f64).contains(&v) {
        return Err(format!("qp must lie in [0, {QP_MAX}], got {v}"));
    }
    Qp::new(v).map_err(|e| e.to_string())
}

fn parse_offsets(s: &str) -> std::result::Result<[i8; 8], String> {
    let v = s
        .split(',')
        .map(|p| p.trim().parse::<i8>().map_err(|_| format!("bad offset `{p}`")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    v.try_into().map_err(|v: Vec<i8>| format!("need 8 offsets, got {}", v.len()))
}

fn parse_factor(s: &str) -> std::result::Result<(u64, u64), String> {
    let (n, d) = s.split_once('/').unwrap_or((s, "1"));
    let parse = |x: &str| x.trim().parse::<u64>().map_err(|_| format!("bad factor `{s}`"));
    let (n, d) = (parse(n)?, parse(d)?);
    if n == 0 || d == 0 {
        return Err(format!("factor `{s}` must be positive"));
    }
    Ok((n, d))
}

/// Weight and bank files, or seeded defaults when omitted.
#[derive(Args)]
struct ModelArgs {
    /// Weight file; seeded weights for the default configuration when omitted.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Rate bank file; seeded from --seed when omitted.
    #[arg(long)]
    bank: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Input colorspace of seeded weights.
    #[arg(long, value_enum, default_value = "yuv420")]
    colorspace: CliColor,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Overlap entropy coding with network inference.
    #[arg(long)]
    overlapped: bool,
}

impl ModelArgs {
    fn load(&self) -> Result<(Weights, RateModuleBank)> {
        let weights = match &self.weights {
            Some(p) => Weights::load(p).with_context(|| format!("loading weights {}", p.display()))?,
            None => Weights::seeded(
                CodecConfig {
                    colorspace: self.colorspace.into(),
                    ..CodecConfig::default()
                },
                self.seed,
            )?,
        };
        let cfg = weights.config;
        let bank = match &self.bank {
            Some(p) => RateModuleBank::load(p).with_context(|| format!("loading bank {}", p.display()))?,
            None => RateModuleBank::seeded(cfg.channels, cfg.hyper_channels, self.seed),
        };
        Ok((weights, bank))
    }

    fn parallelism(&self) -> Parallelism {
        if self.overlapped {
            Parallelism::Overlapped
        } else {
            Parallelism::Serial
        }
    }
}

#[derive(Args)]
struct EncodeArgs {
    /// Raw planar input (8-bit, frames back to back).
    #[arg(short, long)]
    input: PathBuf,
    #[arg(long)]
    width: usize,
    #[arg(long)]
    height: usize,
    /// Frames to read; the whole file when omitted.
    #[arg(long)]
    frames: Option<usize>,
    /// Base quantization parameter in [0, 63]; fractional values interpolate.
    #[arg(long, value_parser = parse_qp, default_value = "32")]
    qp: Qp,
    #[arg(long, value_enum, default_value = "int16")]
    mode: CliMode,
    /// Eight comma-separated qp offsets cycled over frames.
    #[arg(long, value_parser = parse_offsets, default_value = "0,8,0,4,0,4,0,4")]
    gop_offsets: [i8; 8],
    /// Stream output (encode) or optional stream copy (roundtrip).
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Encoder-side reconstruction output.
    #[arg(long)]
    recon: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct PsnrArgs {
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    distorted: PathBuf,
    #[arg(long)]
    width: usize,
    #[arg(long)]
    height: usize,
    #[arg(long, value_enum, default_value = "yuv420")]
    colorspace: CliColor,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 8)]
    n: u64,
    #[arg(long, default_value_t = 64)]
    c: u64,
    #[arg(long, default_value_t = 32)]
    h: u64,
    #[arg(long, default_value_t = 32)]
    w: u64,
    /// Kernel size of every convolution.
    #[arg(long, default_value_t = 1)]
    k: u64,
    /// Quantity to scale while the other two stay fixed.
    #[arg(long, value_enum, default_value = "comp")]
    vary: CliVary,
    /// Comma-separated scale factors such as `1/4,1/2`.
    #[arg(long, value_delimiter = ',', value_parser = parse_factor, default_value = "1/4,1/2")]
    factors: Vec<(u64, u64)>,
    #[arg(long, default_value_t = 20)]
    repeats: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report path stem; `.csv` and `.dat` are appended.
    #[arg(short, long, default_value = "bench")]
    output: PathBuf,
}

#[derive(Args)]
struct InfoArgs {
    #[arg(short, long)]
    input: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    channels: usize,
    #[arg(long, default_value_t = 16)]
    hyper_channels: usize,
    #[arg(long, default_value_t = 2)]
    dc_blocks: usize,
    #[arg(long, value_enum, default_value = "yuv420")]
    colorspace: CliColor,
    /// Also store precomputed int16 parameters.
    #[arg(long)]
    int16: bool,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    bank: PathBuf,
}

fn read_frames(path: &Path, cs: ColorSpace, width: usize, height: usize, frames: Option<usize>) -> Result<Vec<Frame>> {
    let frames = match frames {
        Some(n) => n,
        None => {
            let len = std::fs::metadata(path).with_context(|| format!("reading {}", path.display()))?.len() as usize;
            let per = frame_bytes(cs, width, height);
            if per == 0 || !len.is_multiple_of(per) {
                bail!("{} holds {len} bytes, not a whole number of {width}x{height} {cs} frames", path.display());
            }
            len / per
        }
    };
    if frames == 0 {
        bail!("no frames to encode");
    }
    load_video(path, cs, width, height, frames).with_context(|| format!("reading {}", path.display()))
}

fn settings(a: &EncodeArgs) -> EncodeSettings {
    EncodeSettings {
        mode: a.mode.into(),
        base_qp: a.qp,
        gop_offsets: a.gop_offsets,
        parallelism: a.model.parallelism(),
        threads: a.model.threads,
        reconstruct: a.recon.is_some(),
    }
}

fn encode(a: &EncodeArgs) -> Result<()> {
    let output = a.output.as_ref().context("--output is required")?;
    let (weights, bank) = a.model.load()?;
    let cs = weights.config.colorspace;
    let frames = read_frames(&a.input, cs, a.width, a.height, a.frames)?;
    let start = Instant::now();
    let enc = encode_video(&weights, &bank, &frames, &settings(a))?;
    let elapsed = start.elapsed().as_secs_f64();
    std::fs::write(output, &enc.bytes).with_context(|| format!("writing {}", output.display()))?;
    for (i, f) in enc.frames.iter().enumerate() {
        println!(
            "frame {i:4} qp {:>6} bits {:8} bpp {:.4} time {:.2} ms",
            f.qp,
            f.bits,
            bpp(f.bits / 8, a.width, a.height, 1),
            f.seconds * 1e3
        );
    }
    println!(
        "total {} bytes, {:.4} bpp, {:.3} s",
        enc.bytes.len(),
        bpp(enc.bytes.len(), a.width, a.height, frames.len()),
        elapsed
    );
    if let (Some(path), Some(recon)) = (&a.recon, &enc.recon) {
        save_video(path, recon)?;
    }
    Ok(())
}

fn decode(a: &DecodeArgs) -> Result<()> {
    let (weights, bank) = a.model.load()?;
    let bytes = std::fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let dec = decode_video(&weights, &bank, &bytes, a.model.parallelism(), a.model.threads)?;
    save_video(&a.output, &dec.frames).with_context(|| format!("writing {}", a.output.display()))?;
    for (i, s) in dec.seconds.iter().enumerate() {
        println!("frame {i:4} time {:.2} ms", s * 1e3);
    }
    println!(
        "decoded {} frames of {}x{} {}",
        dec.frames.len(),
        dec.header.width,
        dec.header.height,
        dec.header.config.colorspace
    );
    Ok(())
}

fn format_psnr(p: [f64; 3], cs: ColorSpace) -> String {
    plane_names(cs)
        .iter()
        .zip(p)
        .map(|(n, v)| if v.is_infinite() { format!("{n} inf") } else { format!("{n} {v:.4}") })
        .collect::<Vec<_>>()
        .join(" ")
}

fn roundtrip(a: &EncodeArgs) -> Result<()> {
    let (weights, bank) = a.model.load()?;
    let cs = weights.config.colorspace;
    let frames = read_frames(&a.input, cs, a.width, a.height, a.frames)?;
    let s = EncodeSettings {
        reconstruct: true,
        ..settings(a)
    };
    let enc = encode_video(&weights, &bank, &frames, &s)?;
    let dec = decode_video(&weights, &bank, &enc.bytes, s.parallelism, s.threads)?;
    if let Some(path) = &a.output {
        std::fs::write(path, &enc.bytes)?;
    }
    if let Some(path) = &a.recon {
        save_video(path, &dec.frames)?;
    }
    let matched = enc.recon.as_ref() == Some(&dec.frames);
    println!("bytes {}", enc.bytes.len());
    println!("bpp {:.4}", bpp(enc.bytes.len(), a.width, a.height, frames.len()));
    println!("psnr {}", format_psnr(psnr(&frames, &dec.frames)?, cs));
    println!("decoder matches encoder: {}", if matched { "yes" } else { "no" });
    if !matched && s.mode == Mode::Int16 {
        bail!("int16 decoder reconstruction differs from the encoder's");
    }
    Ok(())
}

fn psnr_cmd(a: &PsnrArgs) -> Result<()> {
    let cs = a.colorspace.into();
    let reference = read_frames(&a.reference, cs, a.width, a.height, None)?;
    let distorted = read_frames(&a.distorted, cs, a.width, a.height, None)?;
    println!("{}", format_psnr(psnr(&reference, &distorted)?, cs));
    Ok(())
}

fn bench(a: &BenchArgs) -> Result<()> {
    let base = BenchConfig {
        k: a.k,
        warmup: a.warmup,
        repeats: a.repeats,
        ..BenchConfig::new(a.n, a.c, a.h, a.w)
    };
    let factors: Vec<_> = a.factors.iter().map(|&(n, d)| Ratio::new(n, d)).collect();
    let mut configs = vec![base];
    configs.extend(plan_isocontrol(&base, a.vary.into(), &factors)?);
    let results = run_bench(&configs, a.threads, a.seed)?;
    save_report(&a.output, &results)?;
    println!("{:<24} {:>14} {:>10} {:>6} {:>10} {:>9} {:>8}", "config", "P_comp", "P_size", "P_num", "median_ms", "iqr_ms", "speedup");
    for r in &results {
        let m = analytic_metrics(&r.config);
        println!(
            "{:<24} {:>14} {:>10} {:>6} {:>10.3} {:>9.3} {:>8.3}",
            r.config.to_string(),
            m.p_comp,
            m.p_size,
            m.p_num,
            r.median_ms,
            r.iqr_ms,
            speedup(&results[0], r)
        );
    }
    println!("report {}", a.output.with_extension("csv").display());
    Ok(())
}

fn info_cmd(a: &InfoArgs) -> Result<()> {
    let bytes = std::fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let (h, chunks) = read_stream(&bytes)?;
    let c = h.config;
    println!("mode {}", h.mode);
    println!("colorspace {}", c.colorspace);
    println!("size {}x{}", h.width, h.height);
    println!("frames {}", h.frame_count);
    println!("base_qp {}", h.base_qp);
    println!(
        "gop_offsets {}",
        h.gop_offsets.iter().map(|o| o.to_string()).collect::<Vec<_>>().join(",")
    );
    println!(
        "config channels {} hyper_channels {} patch {} dc_blocks {} split {}",
        c.channels, c.hyper_channels, c.patch, c.dc_blocks, c.split
    );
    println!("model_hash {:016x}", h.model_hash);
    for (i, ch) in chunks.iter().enumerate() {
        println!(
            "chunk {i} qp {} z {} y1 {} y2 {} bits {}",
            ch.qp,
            ch.z.len(),
            ch.y1.len(),
            ch.y2.len(),
            ch.bits()
        );
    }
    Ok(())
}

fn genweights(a: &GenArgs) -> Result<()> {
    let cfg = CodecConfig {
        channels: a.channels,
        hyper_channels: a.hyper_channels,
        dc_blocks: a.dc_blocks,
        colorspace: a.colorspace.into(),
        ..CodecConfig::default()
    };
    let mut weights = Weights::seeded(cfg, a.seed)?;
    if a.int16 {
        weights = weights.with_int16(Default::default())?;
    }
    let bank = RateModuleBank::seeded(cfg.channels, cfg.hyper_channels, a.seed);
    weights.save(&a.weights).with_context(|| format!("writing {}", a.weights.display()))?;
    bank.save(&a.bank).with_context(|| format!("writing {}", a.bank.display()))?;
    info!("seed {} config {cfg:?}", a.seed);
    println!("model_hash {:016x}", nvc::weights::model_hash(&weights, &bank));
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Roundtrip(a) => roundtrip(a),
        Command::Psnr(a) => psnr_cmd(a),
        Command::Bench(a) => bench(a),
        Command::Info(a) => info_cmd(a),
        Command::Genweights(a) => genweights(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
