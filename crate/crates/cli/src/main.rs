use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use datr::config::RunConfig;
use datr::erpgeo::{distortion_report, report_csv, sig9};
use datr::selfcheck::{self, Fault};
use datr::synthdata::{generate_dataset, load_domain, read_meta, read_ppm, write_pgm, DomainKind, GenConfig, CLASS_NAMES};
use datr::train::{image_tensor, TrainData, TrainState};
use datr::{DatrError, Result};

/// Fixed display colors per class index.
const PALETTE: [[u8; 3]; 5] = [[70, 130, 180], [128, 64, 128], [70, 70, 70], [220, 220, 0], [0, 0, 142]];

#[derive(Parser)]
#[command(name = "datr", version, about = "Panoramic segmentation with distortion-aware attention and domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic pinhole/panorama dataset.
    GenData(GenArgs),
    /// Train source-only then adapt to the panoramic domain.
    Train(TrainArgs),
    /// Per-class IoU and mIoU of a checkpoint on a labeled split.
    Eval(EvalArgs),
    /// Segment one PPM image.
    Infer(InferArgs),
    /// Tabulate ERP lateral distortion against height.
    DistortionReport(ReportArgs),
    /// Run the built-in oracle checks.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    n_train: usize,
    #[arg(long, default_value_t = 32)]
    n_val: usize,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    /// Panorama height; the width is twice this.
    #[arg(long, default_value_t = 128)]
    erp_height: usize,
    /// Side of the square pinhole images.
    #[arg(long, default_value_t = 128)]
    pinhole_size: usize,
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint written by a previous run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    neighborhood: Option<String>,
    #[arg(long)]
    structure: Option<String>,
    #[arg(long)]
    pe: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    wrap_horizontal: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    epochs_source: Option<String>,
    #[arg(long)]
    epochs_adapt: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lambda_ss: Option<String>,
    #[arg(long)]
    lambda_f: Option<String>,
    #[arg(long)]
    threshold: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

impl TrainArgs {
    /// Defaults, then the config file, then flags.
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(p) = &self.config {
            cfg.apply_file(p)?;
        }
        let flags = [
            ("variant", &self.variant),
            ("neighborhood", &self.neighborhood),
            ("structure", &self.structure),
            ("pe", &self.pe),
            ("wrap_horizontal", &self.wrap_horizontal),
            ("lr", &self.lr),
            ("epochs_source", &self.epochs_source),
            ("epochs_adapt", &self.epochs_adapt),
            ("batch_size", &self.batch_size),
            ("lambda_ss", &self.lambda_ss),
            ("lambda_f", &self.lambda_f),
            ("threshold", &self.threshold),
            ("seed", &self.seed),
            ("data", &self.data),
            ("out", &self.out),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "data")]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    /// `target` (panoramas) or `source` (pinhole).
    #[arg(long, default_value = "target")]
    domain: String,
    /// Also write the per-class table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Output prefix: writes `<out>.pgm`, `<out>.ppm` and `<out>.palette.txt`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// ERP width in arc-length units.
    #[arg(long, default_value_t = 2.0 * std::f64::consts::PI)]
    width: f64,
    /// Pixels per row.
    #[arg(long, default_value_t = 512)]
    n: usize,
    /// Pixel steps between the compared points.
    #[arg(long, default_value_t = 1)]
    n_prime: usize,
    #[arg(long, default_value_t = 33)]
    rows: usize,
    /// Write to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SelfcheckArgs {
    /// Corrupt one component on purpose (`rpe-shape`) to see a check fail.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::DistortionReport(a) => report(a),
        Command::Selfcheck(a) => run_selfcheck(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                DatrError::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn gen_data(a: GenArgs) -> Result<ExitCode> {
    let cfg = GenConfig {
        seed: a.seed,
        classes: a.classes,
        pinhole_size: [a.pinhole_size, a.pinhole_size],
        erp_size: [a.erp_height, 2 * a.erp_height],
        n_train: a.n_train,
        n_val: a.n_val,
        ..GenConfig::default()
    };
    let meta = generate_dataset(&cfg, &a.out)?;
    println!("wrote {}", a.out.display());
    println!("classes: {}", CLASS_NAMES[..meta.classes].join(", "));
    println!(
        "pinhole {}x{}, panorama {}x{}",
        meta.pinhole_size[1], meta.pinhole_size[0], meta.erp_size[1], meta.erp_size[0]
    );
    for s in &meta.splits {
        println!(
            "{}: {} pairs, target labels {}",
            s.name,
            s.count,
            if s.target_labels { "yes" } else { "no" }
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let run = a.run_config()?;
    let meta = read_meta(&run.data_dir)?;
    let mut state = match &a.resume {
        Some(p) => {
            let mut s = TrainState::<f32>::load(p)?;
            s.run.data_dir = run.data_dir.clone();
            s.run.out_dir = run.out_dir.clone();
            s
        }
        None => TrainState::<f32>::new(run, meta.classes)?,
    };
    if state.classes() != meta.classes {
        return Err(DatrError::Config(format!(
            "checkpoint has {} classes but the dataset has {}",
            state.classes(),
            meta.classes
        )));
    }
    let dir = state.run.data_dir.clone();
    let source = load_domain(&dir, "train", DomainKind::Source)?;
    let target = load_domain(&dir, "train", DomainKind::Target)?;
    let val = load_domain(&dir, "val", DomainKind::Target)?;
    let val = val.labels.is_some().then_some(&val);
    let data = TrainData { source: &source, target: &target, val };
    let out = state.run.out_dir.clone();
    log::info!(
        "training {} for {}+{} epochs into {}",
        state.model.cfg.variant,
        state.run.epochs_source,
        state.run.epochs_adapt,
        out.display()
    );
    state.run(&data, Some(&out))?;
    if let Some(m) = state.best_miou {
        println!("best val mIoU {}", sig9(m));
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let state = TrainState::<f32>::load(&a.checkpoint)?;
    let kind = match a.domain.as_str() {
        "target" => DomainKind::Target,
        "source" => DomainKind::Source,
        other => return Err(DatrError::Config(format!("unknown domain {other:?}"))),
    };
    let set = load_domain(&a.data, &a.split, kind)?;
    if set.labels.is_none() {
        return Err(DatrError::Config(format!("{} split has no {} labels", a.split, a.domain)));
    }
    let cm = state.evaluate(&set)?;
    let mut csv = String::from("class,name,iou\n");
    println!("{:<6} {:<10} {:>10}", "class", "name", "IoU");
    for (c, iou) in cm.iou().into_iter().enumerate() {
        let name = CLASS_NAMES.get(c).copied().unwrap_or("?");
        let v = iou.map_or("nan".to_string(), sig9);
        println!("{c:<6} {name:<10} {v:>10}");
        let _ = writeln!(csv, "{c},{name},{v}");
    }
    println!("mIoU {} over classes present in the labels", sig9(cm.miou()));
    println!("pixel accuracy {}", sig9(cm.pixel_accuracy()));
    let _ = writeln!(csv, "mean,miou,{}", sig9(cm.miou()));
    if let Some(p) = &a.csv {
        fs::write(p, csv).map_err(|e| DatrError::io(p, e))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn infer(a: InferArgs) -> Result<ExitCode> {
    let state = TrainState::<f32>::load(&a.checkpoint)?;
    let (w, h, img) = read_ppm(&a.image)?;
    let (_, labels) = state.model.predict(&image_tensor(&img, h, w)?, h, w)?;
    let k = state.classes();
    write_pgm(&with_suffix(&a.out, ".pgm"), w, h, &labels)?;
    let mut ppm = format!("P6\n{w} {h}\n255\n").into_bytes();
    for &l in &labels {
        ppm.extend_from_slice(&PALETTE[l as usize % PALETTE.len()]);
    }
    let p = with_suffix(&a.out, ".ppm");
    fs::write(&p, ppm).map_err(|e| DatrError::io(&p, e))?;
    let mut pal = String::from("class,name,r,g,b\n");
    for c in 0..k {
        let [r, g, b] = PALETTE[c % PALETTE.len()];
        let _ = writeln!(pal, "{c},{},{r},{g},{b}", CLASS_NAMES.get(c).copied().unwrap_or("?"));
    }
    let p = with_suffix(&a.out, ".palette.txt");
    fs::write(&p, pal).map_err(|e| DatrError::io(&p, e))?;
    println!("segmented {w}x{h} image into {}", with_suffix(&a.out, ".{pgm,ppm}").display());
    Ok(ExitCode::SUCCESS)
}

fn report(a: ReportArgs) -> Result<ExitCode> {
    let rows = distortion_report(a.width, a.n, a.n_prime, a.rows).map_err(|e| DatrError::Config(e.to_string()))?;
    let csv = report_csv(&rows);
    match &a.out {
        Some(p) => fs::write(p, csv).map_err(|e| DatrError::io(p, e))?,
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn run_selfcheck(a: SelfcheckArgs) -> Result<ExitCode> {
    let fault = match a.inject_fault.as_deref() {
        None => None,
        Some("rpe-shape") => Some(Fault::RpeShape),
        Some(other) => return Err(DatrError::Config(format!("unknown fault {other:?}"))),
    };
    let results = selfcheck::run(fault);
    print!("{}", selfcheck::report(&results));
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed == 0 {
        println!("all {} checks passed", results.len());
        Ok(ExitCode::SUCCESS)
    } else {
        println!("{failed} of {} checks failed", results.len());
        Ok(ExitCode::from(1))
    }
}
