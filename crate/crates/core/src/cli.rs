//! Command-line front end.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::bench::{run_bench, BenchConfig, BenchRow, DEFAULT_SIZES, HUGE_SIZE};
use crate::error::{Error, Result};
use crate::formats::{
    load_model, load_msr, load_plut, load_raster, save_model, save_msr, save_pnm, MsrHeader, SampleType,
};
use crate::interp::LutTable;
use crate::metrics::{EvalReport, Q_BLOCK};
use crate::pipeline::{sharpen, PanLutModel};
use crate::raster::{MultiBandImage, ScalePair};
use crate::resample::{degrade, wald_degrade};
use crate::stages::{SdMode, StageKind};
use crate::synth::synth_scene;
use crate::training::{loss_mono, loss_smooth, train_with, AdamConfig, EpochRecord, LossConfig, TrainConfig, TrainingPair};

#[derive(Debug, Parser)]
#[command(name = "panlut", version, about = "Pan-sharpening with learnable lookup tables")]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "PANLUT_THREADS")]
    pub threads: Option<usize>,

    /// Print the default configuration as JSON and exit.
    #[arg(long)]
    pub print_config: bool,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on one PAN/MS/GT triple.
    Train(TrainArgs),
    /// Fuse PAN and MS with a trained model.
    Sharpen(SharpenArgs),
    /// Compute quality metrics.
    Eval(EvalArgs),
    /// Degrade an HRMS/PAN pair by the resolution ratio.
    Wald(WaldArgs),
    /// Write a procedural HRMS and PAN.
    Synth(SynthArgs),
    /// Time sharpen at several image sizes.
    Bench(BenchArgs),
    /// Inspect or create lookup tables.
    #[command(subcommand)]
    Lut(LutCommand),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Chained,
    Ensemble,
}

impl From<ModeArg> for SdMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Chained => SdMode::Chained,
            ModeArg::Ensemble => SdMode::Ensemble,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DtypeArg {
    U8,
    U16,
    F32,
}

impl From<DtypeArg> for SampleType {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::U8 => SampleType::U8,
            DtypeArg::U16 => SampleType::U16,
            DtypeArg::F32 => SampleType::F32,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub pan: PathBuf,
    /// Low-resolution MS; with --wald, the original MS to degrade.
    #[arg(long)]
    pub ms: Option<PathBuf>,
    /// Reference HRMS at PAN resolution.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Build the training pair by degradation: with --gt, MS = degrade(GT);
    /// with --ms, GT = MS and both MS and PAN are degraded.
    #[arg(long)]
    pub wald: bool,
    #[arg(long, short)]
    pub out: PathBuf,
    /// Training log (appended, tab-separated).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = 9)]
    pub points: usize,
    #[arg(long, default_value_t = 4)]
    pub ratio: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lambda_s: f64,
    #[arg(long, default_value_t = 10.0)]
    pub lambda_m: f64,
    #[arg(long, default_value_t = 1000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 5e-4)]
    pub lr: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Chained)]
    pub sd_mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SharpenArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub pan: PathBuf,
    #[arg(long)]
    pub ms: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    /// Output sample type (defaults to the MS file's).
    #[arg(long, value_enum)]
    pub dtype: Option<DtypeArg>,
    /// Output full-scale value (defaults to the MS file's).
    #[arg(long)]
    pub vmax: Option<u32>,
    /// Also write an 8-bit PPM of bands 0, 1, 2.
    #[arg(long)]
    pub preview: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Reduced,
    Full,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum, default_value_t = EvalMode::Reduced)]
    pub mode: EvalMode,
    /// Prediction (reduced mode).
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Reference (reduced mode).
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Fused image (full mode).
    #[arg(long)]
    pub fused: Option<PathBuf>,
    /// Original MS (full mode).
    #[arg(long)]
    pub ms: Option<PathBuf>,
    /// PAN (full mode).
    #[arg(long)]
    pub pan: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub ratio: usize,
    /// Q-index block size.
    #[arg(long, default_value_t = Q_BLOCK)]
    pub block: usize,
    /// Print the tab-separated form instead of JSON.
    #[arg(long)]
    pub tsv: bool,
    /// Also write the JSON report here.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct WaldArgs {
    #[arg(long)]
    pub hrms: PathBuf,
    #[arg(long)]
    pub pan: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub ratio: usize,
    #[arg(long)]
    pub out_ms: PathBuf,
    #[arg(long)]
    pub out_pan: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Overrides --size for the width.
    #[arg(long)]
    pub width: Option<usize>,
    /// Overrides --size for the height.
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_hrms: PathBuf,
    #[arg(long)]
    pub out_pan: PathBuf,
    /// Also write the Wald-degraded MS (HRMS reduced by --ratio).
    #[arg(long)]
    pub out_ms: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub ratio: usize,
    #[arg(long, value_enum, default_value_t = DtypeArg::U16)]
    pub dtype: DtypeArg,
    #[arg(long, default_value_t = 2047)]
    pub vmax: u32,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Model to time (defaults to an identity model with --points).
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 9)]
    pub points: usize,
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    /// Append the 9216 x 9216 size.
    #[arg(long)]
    pub huge: bool,
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    #[arg(long, default_value_t = 4)]
    pub ratio: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the table here.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum LutCommand {
    /// Summarize a model or a single PLUT block.
    Inspect {
        path: PathBuf,
    },
    /// Write an identity-initialized model.
    Init {
        #[arg(long, default_value_t = 9)]
        points: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Chained)]
        sd_mode: ModeArg,
        #[arg(long, short)]
        out: PathBuf,
    },
}

/// Defaults printed by `--print-config`.
#[derive(Debug, Serialize)]
pub struct CliConfig {
    pub points: usize,
    pub ratio: usize,
    pub lambda_s: f64,
    pub lambda_m: f64,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_halving_epochs: usize,
    pub batch: usize,
    pub sd_mode: SdMode,
    pub seed: u64,
    pub threads: Option<usize>,
    pub q_block: usize,
    pub strip_rows: usize,
}

impl CliConfig {
    pub fn defaults(threads: Option<usize>) -> Self {
        let t = TrainConfig::default();
        Self {
            points: t.points,
            ratio: ScalePair::DEFAULT_RATIO,
            lambda_s: t.loss.lambda_s,
            lambda_m: t.loss.lambda_m,
            epochs: t.epochs,
            lr: t.adam.base_lr,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            eps: t.adam.eps,
            lr_halving_epochs: t.adam.decay_every,
            batch: 1,
            sd_mode: t.sd_mode,
            seed: t.seed,
            threads,
            q_block: Q_BLOCK,
            strip_rows: crate::pipeline::STRIP_ROWS,
        }
    }
}

/// Parses arguments and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("panlut: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.print_config {
        let cfg = CliConfig::defaults(cli.threads);
        println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Error::Usage("no subcommand given; see --help".into()));
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::Usage("--threads must be positive".into()));
        }
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Usage(format!("cannot start thread pool: {e}")))?;
    pool.install(|| match command {
        Command::Train(a) => cmd_train(&a),
        Command::Sharpen(a) => cmd_sharpen(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Wald(a) => cmd_wald(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Lut(LutCommand::Inspect { path }) => cmd_lut_inspect(&path),
        Command::Lut(LutCommand::Init { points, sd_mode, out }) => {
            save_model(&out, &PanLutModel::identity(points, sd_mode.into())?)
        }
    })
}

fn load(path: &Path) -> Result<(MultiBandImage, MsrHeader)> {
    load_msr(path).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

/// Resolves the training triple from the argument combination.
pub fn training_pair(a: &TrainArgs) -> Result<(TrainingPair, MsrHeader)> {
    let (pan, _) = load(&a.pan)?;
    match (&a.ms, &a.gt, a.wald) {
        (Some(ms), Some(gt), false) => {
            let (ms, hdr) = load(ms)?;
            let (gt, _) = load(gt)?;
            Ok((TrainingPair { pan, ms, gt }, hdr))
        }
        (None, Some(gt), true) => {
            let (gt, hdr) = load(gt)?;
            let ms = degrade(&gt, a.ratio)?;
            Ok((TrainingPair { pan, ms, gt }, hdr))
        }
        (Some(ms), None, true) => {
            let (ms, hdr) = load(ms)?;
            let (ms_low, pan_low) = wald_degrade(&ms, &pan, a.ratio)?;
            Ok((
                TrainingPair {
                    pan: pan_low,
                    ms: ms_low,
                    gt: ms,
                },
                hdr,
            ))
        }
        (Some(_), Some(_), true) => Err(Error::Usage("--wald takes either --gt or --ms, not both".into())),
        _ => Err(Error::Usage(
            "train needs --ms with --gt, or --wald with one of --gt/--ms".into(),
        )),
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = TrainConfig {
        points: a.points,
        sd_mode: a.sd_mode.into(),
        epochs: a.epochs,
        loss: LossConfig {
            lambda_s: a.lambda_s,
            lambda_m: a.lambda_m,
        },
        adam: AdamConfig {
            base_lr: a.lr,
            ..AdamConfig::default()
        },
        seed: a.seed,
    };
    if a.points < 2 {
        return Err(Error::Usage("--points must be at least 2".into()));
    }
    let (pair, _) = training_pair(a)?;
    ScalePair::new(a.ratio)?.check_pair(&pair.pan, &pair.ms)?;

    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.tsv");
        PathBuf::from(p)
    });
    let mut log = OpenOptions::new().create(true).append(true).open(&log_path)?;
    if log.metadata()?.len() == 0 {
        writeln!(log, "{}", EpochRecord::HEADER)?;
    }
    let mut write_err = None;
    let outcome = train_with(std::slice::from_ref(&pair), &cfg, |rec| {
        if write_err.is_none() {
            if let Err(e) = writeln!(log, "{}", rec.to_tsv()) {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let mut model = outcome.model;
    model.round_to_f32();
    save_model(&a.out, &model)?;
    let fused = sharpen(&model, &pair.pan, &pair.ms)?;
    let mut base = crate::resample::upsample_bicubic(&pair.ms, a.ratio)?;
    base.clamp_unit_in_place();
    eprintln!(
        "trained {} epochs: PSNR {:.4} dB (bicubic {:.4} dB)",
        cfg.epochs,
        crate::metrics::psnr(&fused, &pair.gt)?,
        crate::metrics::psnr(&base, &pair.gt)?
    );
    Ok(())
}

pub fn cmd_sharpen(a: &SharpenArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let (pan, _) = load(&a.pan)?;
    let (ms, hdr) = load(&a.ms)?;
    let out = sharpen(&model, &pan, &ms)?;
    let dtype = a.dtype.map_or(hdr.dtype, SampleType::from);
    let vmax = a.vmax.unwrap_or(match dtype {
        d if d == hdr.dtype => hdr.vmax,
        SampleType::F32 => 1,
        d => d.max_vmax(),
    });
    save_msr(&a.out, &out, dtype, vmax)?;
    if let Some(p) = &a.preview {
        save_pnm(p, &out, &[0, 1, 2])?;
    }
    Ok(())
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str, mode: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Usage(format!("{mode} evaluation needs --{flag}")))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let report = match a.mode {
        EvalMode::Reduced => {
            if a.fused.is_some() || a.ms.is_some() || a.pan.is_some() {
                return Err(Error::Usage("reduced evaluation takes --pred and --gt only".into()));
            }
            let pred = load_raster(required(&a.pred, "pred", "reduced")?)?;
            let gt = load_raster(required(&a.gt, "gt", "reduced")?)?;
            EvalReport::reduced(&pred, &gt, a.ratio)?
        }
        EvalMode::Full => {
            if a.pred.is_some() || a.gt.is_some() {
                return Err(Error::Usage("full evaluation takes --fused, --ms and --pan".into()));
            }
            let fused = load_raster(required(&a.fused, "fused", "full")?)?;
            let ms = load_raster(required(&a.ms, "ms", "full")?)?;
            let pan = load_raster(required(&a.pan, "pan", "full")?)?;
            EvalReport::full(&fused, &ms, &pan, a.ratio, a.block)?
        }
    };
    if a.tsv {
        println!("{}", EvalReport::tsv_header());
        println!("{}", report.to_tsv());
    } else {
        println!("{}", report.to_json());
    }
    if let Some(p) = &a.out {
        std::fs::write(p, report.to_json() + "\n")?;
    }
    Ok(())
}

pub fn cmd_wald(a: &WaldArgs) -> Result<()> {
    let (hrms, hdr) = load(&a.hrms)?;
    let (pan, pan_hdr) = load(&a.pan)?;
    let (ms_low, pan_low) = wald_degrade(&hrms, &pan, a.ratio)?;
    save_msr(&a.out_ms, &ms_low, hdr.dtype, hdr.vmax)?;
    save_msr(&a.out_pan, &pan_low, pan_hdr.dtype, pan_hdr.vmax)?;
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let w = a.width.unwrap_or(a.size);
    let h = a.height.unwrap_or(a.size);
    let scene = synth_scene(w, h, a.seed)?;
    let dtype = SampleType::from(a.dtype);
    save_msr(&a.out_hrms, &scene.hrms, dtype, a.vmax)?;
    save_msr(&a.out_pan, &scene.pan, dtype, a.vmax)?;
    if let Some(p) = &a.out_ms {
        save_msr(p, &degrade(&scene.hrms, a.ratio)?, dtype, a.vmax)?;
    }
    Ok(())
}

pub fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let model = match &a.model {
        Some(p) => load_model(p)?,
        None => PanLutModel::identity(a.points, SdMode::Chained)?,
    };
    let mut sizes = a.sizes.clone().unwrap_or_else(|| DEFAULT_SIZES.to_vec());
    if a.huge {
        sizes.push(HUGE_SIZE);
    }
    if let Some(&s) = sizes.iter().find(|&&s| s == 0 || s % a.ratio != 0) {
        return Err(Error::Usage(format!("size {s} is not a positive multiple of ratio {}", a.ratio)));
    }
    let cfg = BenchConfig {
        ratio: a.ratio,
        runs: a.runs,
        warmups: 1,
        seed: a.seed,
    };
    let mut table = String::from(BenchRow::HEADER);
    table.push('\n');
    println!("{}", BenchRow::HEADER);
    for row in run_bench(&model, &sizes, &cfg)? {
        let line = row.to_tsv();
        println!("{line}");
        table.push_str(&line);
        table.push('\n');
    }
    if let Some(p) = &a.out {
        std::fs::write(p, table)?;
    }
    Ok(())
}

fn describe_table(kind: StageKind, t: &LutTable) -> String {
    let e = t.entries();
    let min = e.iter().copied().fold(f64::INFINITY, f64::min);
    let max = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = e.iter().sum::<f64>() / e.len() as f64;
    format!(
        "{}\tD={}\tN={}\tE={}\tentries={}\tmin={min:.6}\tmax={max:.6}\tmean={mean:.6}\tsmooth={:.6e}\tmono={:.6e}",
        kind.name(),
        t.dims(),
        t.points(),
        t.channels(),
        e.len(),
        loss_smooth(t),
        loss_mono(t)
    )
}

pub fn cmd_lut_inspect(path: &Path) -> Result<()> {
    let mut magic = [0u8; 4];
    {
        use std::io::Read;
        std::fs::File::open(path)?.read_exact(&mut magic).map_err(|_| Error::Format("file too short".into()))?;
    }
    if &magic == b"PLUT" {
        let (kind, t) = load_plut(path)?;
        println!("{}", describe_table(kind, &t));
        return Ok(());
    }
    let model = load_model(path)?;
    println!(
        "model\tN={}\tsd_mode={}\tparameters={}",
        model.n_points(),
        model.sd_mode(),
        model.param_count()
    );
    for kind in StageKind::ALL {
        println!("{}", describe_table(kind, model.table(kind)));
    }
    Ok(())
}
