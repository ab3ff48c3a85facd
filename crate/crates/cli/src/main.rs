use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use sonogest::datagen::{generate, SynthConfig};
use sonogest::harness::{
    build_reports, checkpoint_dtype, collect_runs, evaluate, format_table, load_checkpoint, train_run, write_table_csv,
    ComparisonRow, TrainConfig,
};
use sonogest::model::{TwoDMode, Variant};
use sonogest::pipeline::{
    compute_joint_angles, crop_and_normalize, detect_peaks, extract_segments, read_marker_csv, split_dataset, write_angle_csv,
    write_segments, Dataset, FingerLayout, Manifest, UltrasoundSequence, CROP, MANIFEST_FILE,
};
use sonogest::tensor::ustf;
use sonogest::{DType, Error, Result, Scalar};

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "sonogest", version, about = "Hand gesture classification from forearm ultrasound clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (segments plus manifest).
    GenData {
        /// JSON synthetic-data configuration.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use 224x224 frames regardless of the configured size.
        #[arg(long)]
        full_size: bool,
    },
    /// Cut gesture segments from one recording and add them to a dataset.
    Segment(SegmentArgs),
    /// Train one variant for one or more seeds.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Evaluate on every segment instead of the checkpoint's held-out split.
        #[arg(long)]
        all: bool,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        #[arg(long, default_value_t = 1)]
        batch_size: usize,
    },
    /// Aggregate finished runs into a comparison table.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum Signal {
    /// Interior joint angle.
    Angle,
    /// 180 degrees minus the joint angle.
    Flexion,
}

#[derive(clap::Args)]
struct SegmentArgs {
    /// Marker CSV (`frame,marker_id,x_mm,y_mm,z_mm`).
    #[arg(long)]
    markers: PathBuf,
    /// USTF video of shape (T, H, W).
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    window: usize,
    /// Minimum peak prominence in degrees.
    #[arg(long, default_value_t = 20.0)]
    prominence: f64,
    /// Minimum distance between peaks in frames.
    #[arg(long, default_value_t = 60)]
    distance: usize,
    /// Gesture label of the recording.
    #[arg(long)]
    gesture: usize,
    #[arg(long, default_value_t = 0)]
    subject: u32,
    #[arg(long, default_value_t = 12)]
    num_classes: usize,
    /// Fingers whose mean drives peak detection, e.g. `1100` for index and middle.
    #[arg(long, default_value = "1111")]
    fingers: String,
    #[arg(long, value_enum, default_value_t = Signal::Flexion)]
    signal: Signal,
    #[arg(long, default_value_t = CROP.0)]
    crop_height: usize,
    #[arg(long, default_value_t = CROP.1)]
    crop_width: usize,
    /// Top-left crop corner as `ROW,COL`; centered when omitted.
    #[arg(long, value_parser = parse_pair)]
    crop_offset: Option<(usize, usize)>,
    /// Also write the per-finger angle traces here.
    #[arg(long)]
    angles_csv: Option<PathBuf>,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    variant: Variant,
    /// Run seed; repeat for several runs. Defaults to the configured list.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    /// JSON file with training options; flags given here take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long, value_parser = parse_dtype)]
    dtype: Option<DType>,
    /// Stop once the epoch train loss falls below this value.
    #[arg(long)]
    target_loss: Option<f64>,
    /// Channel widths per stage, comma separated.
    #[arg(long, value_delimiter = ',')]
    stage_filters: Option<Vec<usize>>,
    #[arg(long, value_parser = parse_two_d_mode)]
    two_d_mode: Option<TwoDMode>,
    /// Continue from each run's last checkpoint when one exists.
    #[arg(long)]
    resume: bool,
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected ROW,COL")?;
    Ok((a.trim().parse().map_err(|e| format!("{e}"))?, b.trim().parse().map_err(|e| format!("{e}"))?))
}

fn parse_dtype(s: &str) -> std::result::Result<DType, String> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        _ => Err(format!("unknown dtype {s:?}, expected f32 or f64")),
    }
}

fn parse_two_d_mode(s: &str) -> std::result::Result<TwoDMode, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|_| format!("unknown 2D mode {s:?}"))
}

fn read_json_file(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn gen_data(config: &Path, out: &Path, full_size: bool) -> Result<()> {
    let mut synth: SynthConfig = serde_json::from_value(read_json_file(config)?)
        .map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
    if full_size {
        synth = synth.full_size();
    }
    let manifest = generate(&synth, out)?;
    println!("wrote {} segments over {} classes to {}", manifest.segments.len(), manifest.num_classes, out.display());
    Ok(())
}

fn segment(args: &SegmentArgs) -> Result<()> {
    let file = fs::File::open(&args.markers).map_err(|e| Error::io(&args.markers, e))?;
    let frames = read_marker_csv(std::io::BufReader::new(file))?;
    let angles = compute_joint_angles(&frames, &FingerLayout::default())?;
    if let Some(path) = &args.angles_csv {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        write_angle_csv(file, &angles)?;
    }
    let mask: Vec<bool> = args
        .fingers
        .chars()
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            _ => Err(Error::Config(format!("finger mask {:?} may only contain 0 and 1", args.fingers))),
        })
        .collect::<Result<_>>()?;
    let signal = match args.signal {
        Signal::Angle => angles.mean_over(&mask)?,
        Signal::Flexion => angles.flexion().mean_over(&mask)?,
    };
    let peaks = detect_peaks(&signal, args.prominence, args.distance)?;

    let video: sonogest::Tensor<f32> = ustf::load_as(&args.frames)?;
    let seq = UltrasoundSequence {
        frames: video,
        subject_id: args.subject,
        gesture_id: args.gesture,
    };
    let seq = crop_and_normalize(&seq, (args.crop_height, args.crop_width), args.crop_offset)?;
    // marker frame indices address video frames; shift peaks onto the video timeline
    let shifted: Vec<_> = peaks
        .iter()
        .map(|p| sonogest::pipeline::Peak {
            index: p.index + angles.first_frame,
            prominence: p.prominence,
        })
        .collect();
    let segments = extract_segments(&seq, &shifted, args.window)?;

    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let manifest_path = args.out.join(MANIFEST_FILE);
    let mut manifest = if manifest_path.exists() {
        Manifest::load(&manifest_path)?
    } else {
        Manifest {
            num_classes: args.num_classes,
            segments: Vec::new(),
        }
    };
    if args.gesture >= manifest.num_classes {
        return Err(Error::Config(format!("gesture {} outside 0..{}", args.gesture, manifest.num_classes)));
    }
    let entries = write_segments(&args.out, &segments)?;
    manifest
        .segments
        .retain(|e| !(e.subject == args.subject && e.label == args.gesture));
    manifest.segments.extend(entries);
    manifest.save(&manifest_path)?;
    println!("{} peaks, {} segments written to {}", peaks.len(), segments.len(), args.out.display());
    Ok(())
}

fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut value = serde_json::to_value(TrainConfig::new(args.variant, &args.manifest, &args.out))?;
    let fields = value.as_object_mut().expect("config serializes to an object");
    if let Some(path) = &args.config {
        match read_json_file(path)? {
            Value::Object(file) => fields.extend(file),
            _ => return Err(Error::Config(format!("{} must hold a JSON object", path.display()))),
        }
    }
    fields.insert("variant".into(), json!(args.variant));
    fields.insert("manifest".into(), json!(args.manifest));
    fields.insert("out_dir".into(), json!(args.out));
    let overrides = [
        ("seeds", (!args.seeds.is_empty()).then(|| json!(args.seeds))),
        ("epochs", args.epochs.map(|v| json!(v))),
        ("batch_size", args.batch_size.map(|v| json!(v))),
        ("lr", args.lr.map(|v| json!(v))),
        ("dropout", args.dropout.map(|v| json!(v))),
        ("dtype", args.dtype.map(|v| json!(v))),
        ("target_loss", args.target_loss.map(|v| json!(v))),
        ("stage_filters", args.stage_filters.as_ref().map(|v| json!(v))),
        ("two_d_mode", args.two_d_mode.map(|v| json!(v))),
    ];
    for (key, v) in overrides {
        if let Some(v) = v {
            fields.insert(key.into(), v);
        }
    }
    let config: TrainConfig = serde_json::from_value(value).map_err(|e| Error::Config(format!("training options: {e}")))?;
    config.validate()?;
    Ok(config)
}

fn train_typed<T: Scalar>(config: &TrainConfig, resume: bool) -> Result<()> {
    let dataset = Dataset::<T>::load(&config.manifest)?;
    for &seed in &config.seeds {
        let out = train_run(config, &dataset, seed, resume, &mut |seed, epoch, loss| {
            eprintln!("{} seed {seed} epoch {epoch} loss {loss:.6}", config.variant);
        })?;
        let m = &out.metrics;
        println!(
            "{} seed {} accuracy {:.4} ({}/{}) params {} best epoch {} in {:.1}s",
            m.variant,
            m.seed,
            m.accuracy,
            m.confusion.trace(),
            m.confusion.total(),
            m.param_count,
            m.best_epoch,
            out.timing.wall_seconds
        );
    }
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let config = train_config(args)?;
    match config.dtype {
        DType::F32 => train_typed::<f32>(&config, args.resume),
        DType::F64 => train_typed::<f64>(&config, args.resume),
    }
}

fn eval_typed<T: Scalar>(checkpoint: &Path, manifest: &Path, all: bool, fraction: f64, batch: usize) -> Result<Value> {
    let mut ckpt = load_checkpoint::<T>(checkpoint)?;
    let dataset = Dataset::<T>::load(manifest)?;
    let indices: Vec<usize> = match (&ckpt.trainer, all) {
        (Some(state), false) => split_dataset(&dataset.manifest.segments, fraction, state.seed)?.1,
        _ => (0..dataset.len()).collect(),
    };
    let (accuracy, confusion) = evaluate(&mut ckpt.network, &dataset, &indices, batch)?;
    Ok(json!({
        "variant": ckpt.network.spec().variant,
        "samples": indices.len(),
        "accuracy": accuracy,
        "confusion": confusion,
    }))
}

fn eval(checkpoint: &Path, manifest: &Path, all: bool, fraction: f64, batch: usize) -> Result<()> {
    let result = match checkpoint_dtype(checkpoint)? {
        DType::F32 => eval_typed::<f32>(checkpoint, manifest, all, fraction, batch)?,
        DType::F64 => eval_typed::<f64>(checkpoint, manifest, all, fraction, batch)?,
    };
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

fn report(runs: &Path, format: Format) -> Result<()> {
    let found = collect_runs(runs)?;
    if found.is_empty() {
        return Err(Error::Data(format!("no runs found below {}", runs.display())));
    }
    let reports = build_reports(found)?;
    let rows: Vec<ComparisonRow> = reports.iter().map(ComparisonRow::from).collect();
    match format {
        Format::Csv => write_table_csv(std::io::stdout().lock(), &rows)?,
        Format::Json => println!("{}", serde_json::to_string_pretty(&reports)?),
    }
    eprint!("{}", format_table(&rows));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, full_size } => gen_data(&config, &out, full_size),
        Command::Segment(args) => segment(&args),
        Command::Train(args) => train(&args),
        Command::Eval {
            checkpoint,
            manifest,
            all,
            train_fraction,
            batch_size,
        } => eval(&checkpoint, &manifest, all, train_fraction, batch_size),
        Command::Report { runs, format } => report(&runs, format),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
