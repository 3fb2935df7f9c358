//! The `echodepth` command line: dataset generation, training, evaluation
//! and artifact export.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 I/O failure,
//! 3 numeric failure (divergence, non-finite gradients), 4 malformed artifact.

pub mod config;
pub mod netpbm;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use echodepth_core::checkpoint;
use echodepth_core::experiments::{resolution_sweep, SweepRow, SWEEP_SCALES};
use echodepth_core::fusion::FusionKind;
use echodepth_core::kv::{KvList, KvMap};
use echodepth_core::metrics::{MetricsReport, RelMode};
use echodepth_core::model::{Modalities, Model, ModelKind};
use echodepth_core::nets::NetConfig;
use echodepth_core::optim::AdamConfig;
use echodepth_core::scene::{build_dataset, render_sample, DatasetConfig, DatasetDir, Profile, Split};
use echodepth_core::train::{evaluate, predict, train, TrainConfig, CSV_HEADER};
use echodepth_core::{Error, Result};

use config::{flag, Settings};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_FORMAT: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "echodepth", version, about = "Audio-visual depth estimation from echoes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Export one scene (and optionally a model's view of it) as image and audio files.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// `key=value` settings file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<String>,
    /// Image side in pixels: 32, 64 or 128.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// replica or matterport.
    #[arg(long)]
    pub profile: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<String>,
    /// Checkpoint path; the metrics log and run manifest are written next to it.
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// bilinear, dot or concat.
    #[arg(long)]
    pub fusion: Option<String>,
    /// `all`, or echo/img/mat joined by `,` or `+`.
    #[arg(long)]
    pub modalities: Option<String>,
    /// attention, concat or oracle.
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// toy or full network widths.
    #[arg(long)]
    pub net: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: Option<String>,
    #[arg(long)]
    pub data: Option<String>,
    /// train, val or test.
    #[arg(long)]
    pub split: Option<String>,
    /// Evaluate with the RGB input degraded to each of six scales.
    #[arg(long)]
    pub resolution_sweep: bool,
    /// CSV output path. Defaults to `<ckpt>.<split>.csv`, or `<ckpt>.<split>.sweep.csv`.
    #[arg(long)]
    pub csv: Option<String>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scene_seed: Option<u64>,
    #[arg(long)]
    pub out: Option<String>,
    /// Also export the model's predicted depth and attention map.
    #[arg(long)]
    pub ckpt: Option<String>,
    /// Scene profile when no checkpoint supplies one.
    #[arg(long)]
    pub profile: Option<String>,
    /// Image side when no checkpoint supplies one.
    #[arg(long)]
    pub size: Option<usize>,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } | Error::Wav { .. } => EXIT_IO,
        Error::Diverged { .. } | Error::NonFiniteGradient { .. } | Error::NoValidPixels => EXIT_NUMERIC,
        Error::Format { .. } => EXIT_FORMAT,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("echodepth: error: {e}");
            exit_code(&e)
        }
    }
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Inspect(a) => cmd_inspect(&a),
    }
}

fn quiet() -> bool {
    std::env::var_os("ECHODEPTH_QUIET").is_some_and(|v| !v.is_empty() && v != "0")
}

macro_rules! progress {
    ($($t:tt)*) => {
        if !quiet() {
            eprintln!($($t)*);
        }
    };
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// `path` with `suffix` appended to its file name.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let mut s = Settings::load(
        args.config.as_deref(),
        vec![
            ("out", flag(&args.out)),
            ("size", flag(&args.size)),
            ("n_train", flag(&args.n_train)),
            ("n_val", flag(&args.n_val)),
            ("n_test", flag(&args.n_test)),
            ("seed", flag(&args.seed)),
            ("profile", flag(&args.profile)),
        ],
    )?;
    let out: String = s.get("out", "data".to_string())?;
    let profile: Profile = s.get::<String>("profile", "replica".into())?.parse()?;
    let d = DatasetConfig::for_profile(profile);
    let size: usize = s.get("size", d.image_size)?;
    if ![32, 64, 128].contains(&size) {
        return Err(Error::Config(format!("size {size} must be 32, 64 or 128")));
    }
    let cfg = DatasetConfig {
        image_size: size,
        n_train: s.get("n_train", d.n_train)?,
        n_val: s.get("n_val", d.n_val)?,
        n_test: s.get("n_test", d.n_test)?,
        seed: s.get("seed", d.seed)?,
        ..d
    };
    s.finish()?;
    let out = Path::new(&out);
    create_dir(out)?;
    progress!(
        "generating {} samples ({} profile, {size}px) into {}",
        cfg.n_train + cfg.n_val + cfg.n_test,
        profile.name(),
        out.display()
    );
    build_dataset(&cfg, out)?;
    Ok(())
}

fn model_kind(arch: &str, fusion: FusionKind, modalities: Modalities) -> Result<ModelKind> {
    match arch {
        "oracle" => Ok(ModelKind::Oracle),
        "attention" if modalities == Modalities::ALL => Ok(ModelKind::Fused(fusion)),
        "attention" | "concat" => Ok(ModelKind::Subset(modalities)),
        other => Err(Error::Config(format!(
            "unknown arch {other:?} (expected attention, concat or oracle)"
        ))),
    }
}

fn net_config(width: &str, data: &DatasetConfig) -> Result<NetConfig> {
    let shape = data.spectro.shape();
    match width {
        "toy" => Ok(NetConfig::toy(data.image_size, shape)),
        "full" => Ok(NetConfig::full(data.image_size, shape)),
        other => Err(Error::Config(format!("unknown net {other:?} (expected toy or full)"))),
    }
}

fn prefixed(prefix: &str, kv: &KvList) -> KvList {
    let mut out = KvList::new();
    for (k, v) in kv.entries() {
        out.push(format!("{prefix}{k}"), v);
    }
    out
}

const DATASET_PREFIX: &str = "dataset.";

/// The dataset settings a checkpoint was trained with, if recorded.
fn checkpoint_dataset(meta: &KvMap) -> Result<Option<DatasetConfig>> {
    let keys = meta.keys_with_prefix(DATASET_PREFIX);
    if keys.is_empty() {
        return Ok(None);
    }
    let mut kv = KvList::new();
    for k in keys {
        let v = meta.raw(&k).expect("key listed by the map");
        kv.push(&k[DATASET_PREFIX.len()..], v);
    }
    DatasetConfig::from_kv(&kv.into_map()).map(Some)
}

fn check_compatible(model: &Model, data: &DatasetConfig, ckpt: &Path) -> Result<()> {
    let want = (data.image_size, data.spectro.shape());
    let have = (model.net.image_size, model.net.spec_shape);
    if want != have {
        return Err(Error::InvalidArgument(format!(
            "{} expects {}px images and {:?} spectrograms, data has {}px and {:?}",
            ckpt.display(),
            have.0,
            have.1,
            want.0,
            want.1
        )));
    }
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut s = Settings::load(
        args.config.as_deref(),
        vec![
            ("data", flag(&args.data)),
            ("out", flag(&args.out)),
            ("epochs", flag(&args.epochs)),
            ("batch", flag(&args.batch)),
            ("seed", flag(&args.seed)),
            ("fusion", flag(&args.fusion)),
            ("modalities", flag(&args.modalities)),
            ("arch", flag(&args.arch)),
            ("lr", flag(&args.lr)),
            ("weight_decay", flag(&args.weight_decay)),
            ("net", flag(&args.net)),
        ],
    )?;
    let td = TrainConfig::default();
    let ad = AdamConfig::default();
    let data: String = s.get("data", "data".to_string())?;
    let out: String = s.get("out", "model.ckpt".to_string())?;
    let epochs = s.get("epochs", td.epochs)?;
    let batch_size = s.get("batch", td.batch_size)?;
    let seed = s.get("seed", td.seed)?;
    let fusion: FusionKind = s.get::<String>("fusion", "bilinear".into())?.parse()?;
    let modalities: Modalities = s.get::<String>("modalities", "all".into())?.parse()?;
    let arch: String = s.get("arch", "attention".to_string())?;
    let lr = s.get("lr", ad.lr)?;
    let weight_decay = s.get("weight_decay", ad.weight_decay)?;
    let width: String = s.get("net", "toy".to_string())?;
    let eval_val = s.get("eval_val", td.eval_val)?;
    let resolved = s.finish()?;

    let tc = TrainConfig {
        epochs,
        batch_size,
        seed,
        eval_val,
        adam: AdamConfig { lr, weight_decay, ..ad },
    };
    let ds = DatasetDir::open(Path::new(&data))?;
    let kind = model_kind(&arch, fusion, modalities)?;
    let mut model = Model::new(kind, net_config(&width, &ds.config)?, seed)?;
    let train_set = ds.load_split(Split::Train)?;
    let val_set = if eval_val { ds.load_split(Split::Val)? } else { Vec::new() };
    let val = (!val_set.is_empty()).then_some(val_set.as_slice());

    let mut extra = tc.to_kv();
    extra.extend(&prefixed(DATASET_PREFIX, &ds.config.to_kv()));
    let ckpt = PathBuf::from(&out);
    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let csv_path = sibling(&ckpt, ".csv");
    progress!(
        "training {} on {} samples for {epochs} epochs ({} weights)",
        kind.describe(),
        train_set.len(),
        model.weight_count()
    );
    let outcome = train(&mut model, &train_set, val, &tc, |m, records| {
        checkpoint::save(m, &extra, &ckpt)?;
        let mut csv = format!("{CSV_HEADER}\n");
        for r in records {
            csv.push_str(&r.csv_row());
            csv.push('\n');
        }
        checkpoint::write_atomic(&csv_path, csv.as_bytes())?;
        if let Some(r) = records.last() {
            progress!("epoch {} {} loss {:.5} rmse {:.4}", r.epoch, r.split, r.loss, r.report.rmse);
        }
        Ok(())
    })?;
    checkpoint::save(&model, &extra, &ckpt)?;
    if outcome.records.is_empty() {
        checkpoint::write_atomic(&csv_path, format!("{CSV_HEADER}\n").as_bytes())?;
    }

    let mut manifest = resolved;
    manifest.push("model", kind.describe());
    manifest.push("weights", model.weight_count());
    manifest.push("steps", outcome.steps);
    manifest.push("final_loss", outcome.final_loss);
    manifest.push("checkpoint", ckpt.display());
    manifest.push("metrics_csv", csv_path.display());
    checkpoint::write_atomic(&sibling(&ckpt, ".manifest"), manifest.to_text().as_bytes())
}

pub const EVAL_CSV_HEADER: &str = "scale,rmse,rel,log10,d1,d2,d3,n_valid,n_clamped,note";

fn eval_row_csv(scale: f64, report: Option<&MetricsReport>, note: Option<&str>) -> String {
    let metrics = match report {
        Some(r) => format!(
            "{},{},{},{},{},{},{},{}",
            r.rmse, r.rel, r.log10, r.delta1, r.delta2, r.delta3, r.n_valid, r.n_clamped
        ),
        None => ",,,,,,,".to_string(),
    };
    format!("{scale},{metrics},{}", note.unwrap_or("").replace(',', ";"))
}

fn eval_table(rows: &[SweepRow]) -> String {
    let mut t = format!(
        "{:>8} {:>10} {:>10} {:>10} {:>8} {:>8} {:>8} {:>9}\n",
        "scale", "rmse", "rel", "log10", "d1", "d2", "d3", "n_valid"
    );
    for row in rows {
        match &row.report {
            Some(r) => t.push_str(&format!(
                "{:>8} {:>10.4} {:>10.4} {:>10.4} {:>8.4} {:>8.4} {:>8.4} {:>9}\n",
                row.scale, r.rmse, r.rel, r.log10, r.delta1, r.delta2, r.delta3, r.n_valid
            )),
            None => t.push_str(&format!(
                "{:>8} {}\n",
                row.scale,
                row.note.as_deref().unwrap_or("not evaluated")
            )),
        }
    }
    t
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let mut s = Settings::load(
        args.config.as_deref(),
        vec![
            ("ckpt", flag(&args.ckpt)),
            ("data", flag(&args.data)),
            ("split", flag(&args.split)),
            ("resolution_sweep", args.resolution_sweep.then(|| "true".to_string())),
            ("csv", flag(&args.csv)),
        ],
    )?;
    let ckpt: String = s.get("ckpt", "model.ckpt".to_string())?;
    let data: String = s.get("data", "data".to_string())?;
    let split: Split = s.get::<String>("split", "test".into())?.parse()?;
    let sweep = s.get("resolution_sweep", false)?;
    let csv: Option<String> = s.get_optional("csv")?;
    s.finish()?;

    let ckpt = PathBuf::from(ckpt);
    let (model, _meta) = checkpoint::load(&ckpt)?;
    let ds = DatasetDir::open(Path::new(&data))?;
    check_compatible(&model, &ds.config, &ckpt)?;
    let samples = ds.load_split(split)?;
    let rows = if sweep {
        resolution_sweep(&model, &samples, &SWEEP_SCALES)?
    } else {
        vec![SweepRow {
            scale: 1.0,
            report: Some(evaluate(&model, &samples, RelMode::Absolute)?.report),
            note: None,
        }]
    };
    let mut text = format!("{EVAL_CSV_HEADER}\n");
    for r in &rows {
        text.push_str(&eval_row_csv(r.scale, r.report.as_ref(), r.note.as_deref()));
        text.push('\n');
    }
    let csv_path = csv.map(PathBuf::from).unwrap_or_else(|| {
        let tail = if sweep { ".sweep.csv" } else { ".csv" };
        sibling(&ckpt, &format!(".{}{tail}", split.name()))
    });
    checkpoint::write_atomic(&csv_path, text.as_bytes())?;
    print!("{}", eval_table(&rows));
    Ok(())
}

fn interleave_rgb(planar: &[f64], n: usize) -> Vec<f64> {
    (0..3 * n).map(|i| planar[(i % 3) * n + i / 3]).collect()
}

/// Writes the spectrogram channel `ch` with time along x and frequency rising upwards.
fn spectrogram_pgm(values: &[f64], shape: [usize; 3], ch: usize) -> Vec<u8> {
    let [_, p, q] = shape;
    let plane = &values[ch * p * q..(ch + 1) * p * q];
    let flipped: Vec<f64> = (0..p).rev().flat_map(|f| plane[f * q..(f + 1) * q].iter().cloned()).collect();
    netpbm::encode_pgm8(q, p, &netpbm::heatmap(&flipped))
}

pub fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    let mut s = Settings::load(
        args.config.as_deref(),
        vec![
            ("scene_seed", flag(&args.scene_seed)),
            ("out", flag(&args.out)),
            ("ckpt", flag(&args.ckpt)),
            ("profile", flag(&args.profile)),
            ("size", flag(&args.size)),
        ],
    )?;
    let seed: u64 = s.get("scene_seed", 0)?;
    let out: String = s.get("out", "inspect".to_string())?;
    let ckpt: Option<String> = s.get_optional("ckpt")?;
    let profile: Profile = s.get::<String>("profile", "replica".into())?.parse()?;
    let size: usize = s.get("size", 32)?;
    s.finish()?;

    let model = match &ckpt {
        Some(path) => {
            let path = PathBuf::from(path);
            let (model, meta) = checkpoint::load(&path)?;
            let data = checkpoint_dataset(&meta).map_err(|e| Error::Format {
                path: path.clone(),
                msg: e.to_string(),
            })?;
            Some((model, data, path))
        }
        None => None,
    };
    let cfg = match &model {
        Some((_, Some(data), _)) => data.clone(),
        _ => DatasetConfig {
            image_size: size,
            ..DatasetConfig::for_profile(profile)
        },
    };
    if let Some((m, _, path)) = &model {
        check_compatible(m, &cfg, path)?;
    }
    let sample = render_sample(seed, &cfg, &cfg.pulse()?)?;
    let out = PathBuf::from(out);
    create_dir(&out)?;
    let w = sample.size;
    let n = w * w;

    netpbm::write(&out.join("depth.pgm"), &netpbm::encode_pgm16(w, w, &netpbm::depth_to_levels(&sample.depth)))?;
    let mut sidecar = KvList::new();
    sidecar.push("meters_per_level", netpbm::DEPTH_METERS_PER_LEVEL);
    sidecar.push("invalid_level", 0);
    sidecar.push("scene_seed", seed);
    sidecar.push("profile", cfg.profile.name());
    let rgb = netpbm::unit_to_bytes(&interleave_rgb(sample.image.data(), n));
    netpbm::write(&out.join("image.ppm"), &netpbm::encode_ppm(w, w, &rgb))?;
    sample.echo.write_wav(&out.join("echo.wav"))?;
    let values = sample.spectrogram.values.data();
    let shape = cfg.spectro.shape();
    for (ch, name) in ["spectrogram_left.pgm", "spectrogram_right.pgm"].iter().enumerate() {
        netpbm::write(&out.join(name), &spectrogram_pgm(values, shape, ch))?;
    }

    if let Some((m, _, _)) = &model {
        let (depth, alpha) = predict(m, &sample)?;
        let levels = netpbm::depth_to_levels(depth.data());
        netpbm::write(&out.join("prediction.pgm"), &netpbm::encode_pgm16(w, w, &levels))?;
        match alpha {
            Some(a) => {
                let bytes = netpbm::unit_to_bytes(a.data());
                netpbm::write(&out.join("attention.pgm"), &netpbm::encode_pgm8(w, w, &bytes))?;
                sidecar.push("attention", "attention.pgm weights the echo depth; 255 = echo only");
            }
            None => sidecar.push("attention", format!("none ({} has no attention map)", m.kind.describe())),
        }
    }
    checkpoint::write_atomic(&out.join("depth.txt"), sidecar.to_text().as_bytes())?;
    progress!("wrote scene {seed} to {}", out.display());
    Ok(())
}
