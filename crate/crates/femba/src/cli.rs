//! The `femba` command-line tool.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use femba_core::engine::{engine_forward, EngineModel};
use femba_core::model::{forward, ActPoint, BranchPoint, FembaWeights};
use femba_core::objectives::{focal_loss, info_nce, smooth_l1, LossParams};
use femba_core::quant::{
    bias_correct, build_image, calibrate, exponents_of, fake_quant_forward, reference_forward, FakeQuantConfig, IntOutput,
    Pow2ActQuant, QuantMode, QuantModel,
};
use femba_core::signal::preprocess;
use femba_core::stream::{bench, report, ReportFormat};
use femba_core::tensor::Matrix;

use crate::checkpoint::{self, ModelFile};
use crate::config::FileConfig;
use crate::container::{Container, Entry, Scale};
use crate::exec::ThreadExecutor;
use crate::recording::{read_archive, read_recording, window_name, write_archive};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "femba", version, about = "EEG preprocessing, quantization, integer inference and streaming cost model")]
pub struct Cli {
    /// Key-value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Fp32,
    W8a8,
    W4a8,
    W2a8,
    Fakequant,
}

impl Mode {
    fn quant(self) -> Option<QuantMode> {
        match self {
            Mode::W8a8 => Some(QuantMode::W8A8),
            Mode::W4a8 => Some(QuantMode::W4A8),
            Mode::W2a8 => Some(QuantMode::W2A8),
            _ => None,
        }
    }

    fn of(q: QuantMode) -> Self {
        match q {
            QuantMode::W8A8 => Mode::W8a8,
            QuantMode::W4A8 => Mode::W4a8,
            QuantMode::W2A8 => Mode::W2a8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Backend {
    /// The integer engine.
    Engine,
    /// The naive integer-semantics reference.
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossName {
    SmoothL1,
    InfoNce,
    Focal,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a randomly initialized float checkpoint.
    Init {
        #[arg(long)]
        out: PathBuf,
    },
    /// Filter, resample, window and normalize a FEMB-SIG recording.
    Preprocess { input: PathBuf, output: PathBuf },
    /// Build a deployment image (or repack / annotate a float checkpoint).
    Quantize {
        checkpoint: PathBuf,
        #[arg(long)]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
        /// Window archive used for activation calibration.
        #[arg(long)]
        calib: Option<PathBuf>,
        /// Store ternary layers one value per byte.
        #[arg(long)]
        expand_ternary: bool,
        #[arg(long)]
        no_bias_correct: bool,
    },
    /// Run a model over a window archive and write one logits row per window.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        windows: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the mode the model file was built for.
        #[arg(long)]
        mode: Option<Mode>,
        /// Fake-quant weight bits (2, 4, 8) or 32 for pass-through.
        #[arg(long, default_value_t = 8)]
        bits: u32,
        /// Directory for per-window integer activation dumps.
        #[arg(long)]
        dump: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Backend::Engine)]
        backend: Backend,
    },
    /// Run the streaming cost model.
    Bench {
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Writes `<out>.txt`, `<out>.csv` and, with `--format json`, `<out>.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a loss on tensors stored in a container and write its gradient.
    Losses {
        loss: LossName,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        grad: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long, default_value_t = 0.1)]
        unmasked_weight: f64,
        #[arg(long, default_value_t = 0.1)]
        tau: f64,
        #[arg(long, default_value_t = 2.0)]
        gamma: f64,
    },
}

pub fn main() -> i32 {
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match run(&cli, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = out.flush();
            eprintln!("femba: {e}");
            e.exit_code()
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn emit(out: &mut dyn Write, s: &str) -> Result<()> {
    out.write_all(s.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = FileConfig::load(cli.config.as_deref())?;
    match &cli.cmd {
        Command::Init { out: path } => {
            let w = FembaWeights::random(&cfg.model_config()?, cli.seed);
            checkpoint::encode_float(&w).write(path)?;
            emit(out, &format!("wrote {} parameters to {}\n", w.param_count(), path.display()))
        }
        Command::Preprocess { input, output } => {
            let rec = read_recording(input)?;
            let windows = if rec.is_empty() { Vec::new() } else { preprocess(&rec, &cfg.preprocess()?)? };
            write_archive(output, &windows)?;
            emit(out, &format!("{} windows\n", windows.len()))
        }
        Command::Quantize { checkpoint, mode, out: path, calib, expand_ternary, no_bias_correct } => {
            cmd_quantize(&cfg, checkpoint, *mode, path, calib.as_deref(), *expand_ternary, !no_bias_correct, out)
        }
        Command::Infer { model, windows, out: path, mode, bits, dump, backend } => {
            cmd_infer(model, windows, path, *mode, *bits, dump.as_deref(), *backend, out)
        }
        Command::Bench { format, out: path } => cmd_bench(&cfg, *format, path.as_deref(), out),
        Command::Losses { loss, input, grad, beta, unmasked_weight, tau, gamma } => {
            let p = LossParams { beta: *beta, unmasked_weight: *unmasked_weight, tau: *tau, alpha: Vec::new(), gamma: *gamma };
            cmd_losses(*loss, input, grad, p, out)
        }
    }
}

fn float_weights(path: &Path) -> Result<FembaWeights> {
    match checkpoint::decode(&Container::read(path)?)? {
        ModelFile::Float(w) | ModelFile::FakeQuant(w, _) => Ok(w),
        ModelFile::Image(_) => Err(Error::Config(format!("{} is an integer image, expected a float checkpoint", path.display()))),
    }
}

fn check_windows(windows: &[Matrix], w: &FembaWeights) -> Result<()> {
    let want = (w.config.n_channels, w.config.n_samples);
    match windows.iter().position(|x| x.shape() != want) {
        Some(i) => Err(Error::Config(format!("window {i} is {:?}, model expects {:?}", windows[i].shape(), want))),
        None => Ok(()),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_quantize(
    cfg: &FileConfig,
    ckpt: &Path,
    mode: Mode,
    path: &Path,
    calib: Option<&Path>,
    expand: bool,
    correct: bool,
    out: &mut dyn Write,
) -> Result<()> {
    let w = float_weights(ckpt)?;
    if mode == Mode::Fp32 {
        let c = checkpoint::encode_float(&w);
        c.write(path)?;
        return emit(out, &format!("fp32 repack: {} bytes\n", c.to_bytes().len()));
    }
    let calib = calib.ok_or_else(|| Error::Config(format!("mode {mode:?} needs --calib windows")))?;
    let windows = read_archive(calib)?;
    if windows.is_empty() {
        return Err(Error::Config("calibration archive holds no windows".into()));
    }
    check_windows(&windows, &w)?;
    let scales = calibrate(&w, &windows, &cfg.calibration())?;
    let Some(q) = mode.quant() else {
        let c = checkpoint::encode_fake_quant(&w, &exponents_of(&scales))?;
        c.write(path)?;
        return emit(out, &format!("fake-quant checkpoint: {} bytes\n", c.to_bytes().len()));
    };
    let w = if correct { bias_correct(&w, &windows, &scales, &FakeQuantConfig::from_mode(q))? } else { w };
    let mut m = build_image(&w, &scales, q)?;
    if expand {
        m = m.expand_ternary();
    }
    let bytes = checkpoint::encode_image(&m)?.to_bytes();
    write_file(path, &bytes)?;
    emit(out, &summary(&m, bytes.len()))
}

fn summary(m: &QuantModel, file_bytes: usize) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<28} {:>4} {:>4} {:>11} {:>10} {:>10} {:>9}", "layer", "bits", "type", "shape", "scale_min", "scale_max", "bytes");
    for (id, name) in m.layer_names() {
        let l = m.layer(id);
        let (lo, hi) = l.scales.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        let shape = format!("{}x{}", l.rows, l.cols);
        let ty = if l.is_ternary() { "t2" } else { "i8" };
        let _ = writeln!(s, "{name:<28} {:>4} {ty:>4} {shape:>11} {lo:>10.3e} {hi:>10.3e} {:>9}", l.bits, l.weight_bytes());
    }
    let _ = writeln!(s, "mode {} payload {} bytes, file {} bytes", m.mode.name(), m.payload_bytes(), file_bytes);
    s
}

fn header(cols: impl IntoIterator<Item = String>) -> String {
    let mut s = String::from("window");
    for c in cols {
        s.push(',');
        s.push_str(&c);
    }
    s.push('\n');
    s
}

fn fmt_row(i: usize, vals: impl IntoIterator<Item = String>) -> String {
    let mut s = i.to_string();
    for v in vals {
        s.push(',');
        s.push_str(&v);
    }
    s.push('\n');
    s
}

fn dump_trace(dir: &Path, i: usize, o: &IntOutput, m: &QuantModel) -> Result<()> {
    let trace = o.trace.as_ref().expect("trace requested");
    let mut c = Container::new();
    for (p, t) in trace {
        let dims = [t.rows, t.cols];
        let e = if matches!(p, ActPoint::Branch { point: BranchPoint::State, .. }) {
            Entry::q15(&p.name(), &dims, &t.data.iter().map(|&v| v as i16).collect::<Vec<_>>())
        } else {
            Entry::i8(&p.name(), &dims, &t.data.iter().map(|&v| v as i8).collect::<Vec<_>>())
        };
        c.push(e.with_scale(Scale::Pow2(m.act(*p)? as i8)));
    }
    c.push(Entry::i32("logits_acc", &[o.logits_acc.len()], &o.logits_acc));
    c.write(dir.join(format!("{}.fmbc", window_name(i))))
}

#[allow(clippy::too_many_arguments)]
fn cmd_infer(
    model: &Path,
    windows: &Path,
    path: &Path,
    mode: Option<Mode>,
    bits: u32,
    dump: Option<&Path>,
    backend: Backend,
    out: &mut dyn Write,
) -> Result<()> {
    let file = checkpoint::decode(&Container::read(model)?)?;
    let xs = read_archive(windows)?;
    let mut text = String::new();
    match (&file, mode) {
        (ModelFile::Image(m), mode) => {
            let mode = mode.unwrap_or(Mode::of(m.mode));
            if mode.quant() != Some(m.mode) {
                return Err(Error::Config(format!("image is {}, requested {mode:?}", m.mode.name())));
            }
            let want = (m.config.n_channels, m.config.n_samples);
            if let Some(i) = xs.iter().position(|x| x.shape() != want) {
                return Err(Error::Config(format!("window {i} is {:?}, model expects {want:?}", xs[i].shape())));
            }
            if let Some(d) = dump {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
            let em = EngineModel::load(m)?;
            let exec = ThreadExecutor::from_env();
            let k = m.config.n_classes;
            text.push_str(&header((0..k).map(|c| format!("logit_{c}")).chain((0..k).map(|c| format!("acc_{c}"))).chain(["saturations".into()])));
            for (i, x) in xs.iter().enumerate() {
                let o = match backend {
                    Backend::Engine => engine_forward(x, &em, &exec, dump.is_some())?,
                    Backend::Reference => reference_forward(x, m, dump.is_some())?,
                };
                let vals = o.logits.iter().map(|v| format!("{v:?}")).chain(o.logits_acc.iter().map(|v| v.to_string()));
                text.push_str(&fmt_row(i, vals.chain([o.saturations.to_string()])));
                if let Some(d) = dump {
                    dump_trace(d, i, &o, m)?;
                }
            }
        }
        (ModelFile::Float(w) | ModelFile::FakeQuant(w, _), mode) => {
            let mode = mode.unwrap_or(if matches!(file, ModelFile::FakeQuant(..)) { Mode::Fakequant } else { Mode::Fp32 });
            if dump.is_some() {
                return Err(Error::Config("--dump needs an integer image".into()));
            }
            check_windows(&xs, w)?;
            let fq = match mode {
                Mode::Fp32 => None,
                Mode::Fakequant => {
                    let fc = match bits {
                        32 => FakeQuantConfig::DISABLED,
                        2 => FakeQuantConfig::from_mode(QuantMode::W2A8),
                        4 => FakeQuantConfig::from_mode(QuantMode::W4A8),
                        8 => FakeQuantConfig::from_mode(QuantMode::W8A8),
                        b => return Err(Error::Config(format!("fake-quant bits must be 2, 4, 8 or 32, got {b}"))),
                    };
                    let scales = match &file {
                        ModelFile::FakeQuant(_, acts) => acts
                            .iter()
                            .map(|(p, &n)| (*p, Pow2ActQuant { exponent: n, bits: p.bits(), signed: true }))
                            .collect(),
                        _ if bits == 32 => Default::default(),
                        _ => return Err(Error::Config("fakequant needs a checkpoint written by `quantize --mode fakequant`".into())),
                    };
                    Some((fc, scales))
                }
                m => return Err(Error::Config(format!("mode {m:?} needs an integer image"))),
            };
            let k = w.config.n_classes;
            text.push_str(&header((0..k).map(|c| format!("logit_{c}"))));
            for (i, x) in xs.iter().enumerate() {
                let logits = match &fq {
                    None => forward(x, w)?,
                    Some((fc, scales)) => fake_quant_forward(x, w, fc, scales)?,
                };
                text.push_str(&fmt_row(i, logits.iter().map(|v| format!("{v:?}"))));
            }
        }
    }
    write_file(path, text.as_bytes())?;
    emit(out, &format!("{} windows\n", xs.len()))
}

fn cmd_bench(cfg: &FileConfig, format: Format, path: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let r = bench(&cfg.model_config()?, &cfg.cost_model()?, &cfg.hierarchy()?)?;
    let text = report(&r, ReportFormat::Text);
    let csv = report(&r, ReportFormat::Csv);
    let json = serde_json::json!({
        "cycles": r.total_cycles,
        "seconds": r.latency_s,
        "millijoules": r.energy_j * 1e3,
        "overlap_pct": r.overlap_pct(),
    })
    .to_string()
        + "\n";
    if let Some(p) = path {
        let with = |ext: &str| {
            let mut s = p.as_os_str().to_owned();
            s.push(ext);
            PathBuf::from(s)
        };
        write_file(&with(".txt"), text.as_bytes())?;
        write_file(&with(".csv"), csv.as_bytes())?;
        if format == Format::Json {
            write_file(&with(".json"), json.as_bytes())?;
        }
    }
    emit(
        out,
        match format {
            Format::Text => &text,
            Format::Csv => &csv,
            Format::Json => &json,
        },
    )
}

fn matrix(c: &Container, name: &str) -> Result<Matrix> {
    let e = c.get(name)?;
    let (r, k) = match e.dims[..] {
        [r, k] => (r as usize, k as usize),
        [n] => (1, n as usize),
        _ => return Err(Error::Config(format!("{name} must be rank 1 or 2"))),
    };
    Ok(Matrix::from_vec(r, k, e.to_f64()?)?)
}

fn grad_entry(name: &str, m: &Matrix) -> Entry {
    Entry::f32(name, &[m.rows(), m.cols()], &m.data().iter().map(|&v| v as f32).collect::<Vec<_>>())
}

fn cmd_losses(loss: LossName, input: &Path, grad: &Path, mut p: LossParams, out: &mut dyn Write) -> Result<()> {
    let c = Container::read(input)?;
    let mut g = Container::new();
    let value = match loss {
        LossName::SmoothL1 => {
            let pred = matrix(&c, "pred")?;
            let target = matrix(&c, "target")?;
            let mask = match c.find("mask") {
                Some(e) => e.to_i8()?.into_iter().map(|v| v != 0).collect(),
                None => vec![true; pred.data().len()],
            };
            if pred.shape() != target.shape() {
                return Err(Error::Config(format!("pred {:?} vs target {:?}", pred.shape(), target.shape())));
            }
            let r = smooth_l1(pred.data(), target.data(), &p, &mask)?;
            g.push(grad_entry("grad", &Matrix::from_vec(pred.rows(), pred.cols(), r.grad)?));
            r.loss
        }
        LossName::InfoNce => {
            let r = info_nce(&matrix(&c, "anchors")?, &matrix(&c, "positives")?, &matrix(&c, "negatives")?, p.tau)?;
            g.push(grad_entry("d_anchors", &r.d_anchor));
            g.push(grad_entry("d_positives", &r.d_positive));
            g.push(grad_entry("d_negatives", &r.d_negative));
            r.loss
        }
        LossName::Focal => {
            let probs = matrix(&c, "probs")?;
            let labels = c.get("labels")?.to_i32()?;
            if labels.iter().any(|&l| l < 0) {
                return Err(Error::Config("labels must be non-negative".into()));
            }
            if let Some(a) = c.find("alpha") {
                p.alpha = a.to_f64()?;
            }
            let labels: Vec<usize> = labels.into_iter().map(|l| l as usize).collect();
            let r = focal_loss(&probs, &labels, &p)?;
            if r.clamped > 0 {
                eprintln!("warning: {} probabilities clamped to 1e-12", r.clamped);
            }
            g.push(grad_entry("grad", &r.grad));
            r.loss
        }
    };
    g.write(grad)?;
    emit(out, &format!("{value:.12e}\n"))
}
