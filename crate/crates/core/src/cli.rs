//! Command-line front end. Every subcommand prints `key=value` lines (or CSV)
//! with fixed decimals, so output can be diffed across runs.
//!
//! Exit codes: 0 on success, 1 on runtime failure with a single
//! `error kind=<kind> message=<text>` line on stderr, 2 on usage errors.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::baseline::BaselineError;
use crate::codec::{self, CodecError, Features, WireFrame};
use crate::entropy::{self, EntropyError, Tap};
use crate::quantizer::{self, QuantizeError, QuantizedBlock, QuantizerConfig, Scaling};
use crate::splitnet::{self, BenchMethod, Client, SessionConfig, SplitError, Transport};
use crate::tensor::{FeatureTensor, TensorError};
use crate::training::{self, Activation, Dataset, SplitModel, TaskLoss, TrainConfig, TrainError};

pub const ADDR_ENV: &str = "SPLITQUANT_ADDR";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Quantize(#[from] QuantizeError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Input(_) => "input",
            CliError::Io { .. } => "io",
            CliError::Tensor(_) => "tensor",
            CliError::Quantize(_) => "quantize",
            CliError::Entropy(_) => "entropy",
            CliError::Codec(_) => "codec",
            CliError::Train(_) => "train",
            CliError::Split(SplitError::Timeout) => "timeout",
            CliError::Split(SplitError::Remote { .. }) => "remote",
            CliError::Split(_) => "split",
            CliError::Baseline(_) => "baseline",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "splitquant",
    version,
    about = "Low-bit feature quantization for split learning"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quantize a tensor fixture into a Features frame.
    Quantize(QuantizeArgs),
    /// Rebuild features from a Features frame.
    Reconstruct(ReconstructArgs),
    /// Estimate feature entropy and recommend a bit width.
    Entropy(EntropyArgs),
    /// Pack or unpack fixed-width indices.
    Pack(PackArgs),
    /// Decode and describe a wire frame.
    Frame(FrameArgs),
    /// Train a toy split model end to end.
    Train(TrainArgs),
    /// Check straight-through gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Run the decoder half as a TCP server.
    Serve(ServeArgs),
    /// Run the encoder half against a server.
    Infer(InferArgs),
    /// Compare discrete quantization with top-k sparsification.
    Benchmark(BenchmarkArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScalingArg {
    Linear,
    Tanh,
}

impl From<ScalingArg> for Scaling {
    fn from(s: ScalingArg) -> Self {
        match s {
            ScalingArg::Linear => Scaling::ClippedLinear,
            ScalingArg::Tanh => Scaling::Tanh,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TapArg {
    Raw,
    Scaled,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DatasetArg {
    /// 4-D Gaussian mixture, reconstructed through the bottleneck.
    Mixture,
    /// Two-moons classification.
    Moons,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ActivationArg {
    Gelu,
    Relu,
    Identity,
}

impl From<ActivationArg> for Activation {
    fn from(a: ActivationArg) -> Self {
        match a {
            ActivationArg::Gelu => Activation::Gelu,
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::Identity => Activation::Identity,
        }
    }
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    /// Tensor fixture to quantize.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long = "k", visible_alias = "levels", short = 'k')]
    pub levels: u32,
    #[arg(long, value_enum, default_value = "linear")]
    pub scaling: ScalingArg,
    #[arg(long, default_value_t = 1)]
    pub request_id: u64,
    /// Where to write the encoded frame.
    #[arg(long = "out", visible_alias = "output")]
    pub output: PathBuf,
    /// Read the input as comma-separated rows instead of a binary fixture.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    /// Encoded Features frame.
    #[arg(long)]
    pub input: PathBuf,
    /// Tensor fixture to write.
    #[arg(long = "out", visible_alias = "output")]
    pub output: Option<PathBuf>,
    /// Write the output as comma-separated rows.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Debug, Args)]
pub struct EntropyArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "raw")]
    pub tap: TapArg,
    #[arg(long, default_value_t = entropy::DEFAULT_GRID_POINTS)]
    pub grid: usize,
    /// Write the estimated density as `x,density` CSV.
    #[arg(long)]
    pub density_csv: Option<PathBuf>,
    /// Report each last-axis channel separately.
    #[arg(long)]
    pub per_dim: bool,
    /// Read the input as comma-separated rows.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Debug, Args)]
pub struct PackArgs {
    #[arg(long)]
    pub bits: u8,
    /// Comma-separated indices to pack.
    #[arg(long, value_delimiter = ',', conflicts_with = "unpack")]
    pub indices: Vec<u32>,
    /// Unpack the hex string instead.
    #[arg(long, requires = "count")]
    pub unpack: Option<String>,
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FrameArgs {
    /// Frame file to read.
    #[arg(required_unless_present = "hex", conflicts_with = "hex")]
    pub file: Option<PathBuf>,
    /// Frame bytes as hex.
    #[arg(long)]
    pub hex: Option<String>,
    /// Print a hex dump before the summary.
    #[arg(long)]
    pub dump: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value = "mixture")]
    pub dataset: DatasetArg,
    #[arg(long, default_value_t = 512)]
    pub rows: usize,
    /// Quantizer levels; 0 trains without a quantizer.
    #[arg(long = "k", visible_alias = "levels", short = 'k', default_value_t = 4)]
    pub levels: u32,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = quantizer::DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    #[arg(long, default_value_t = 2)]
    pub bottleneck: usize,
    #[arg(long, value_enum, default_value = "gelu")]
    pub activation: ActivationArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-epoch loss CSV.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Save the trained model parameters.
    #[arg(long)]
    pub save: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long = "k", visible_alias = "levels", short = 'k', default_value_t = 4)]
    pub levels: u32,
    #[arg(long, default_value_t = 1e-4)]
    pub perturbation: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 32)]
    pub rows: usize,
    #[arg(long, default_value_t = quantizer::DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = ADDR_ENV, default_value = "127.0.0.1:7878")]
    pub addr: String,
    /// Model file written by `train --save`; only the decoder is used.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "k", visible_alias = "levels", short = 'k')]
    pub levels: u32,
    #[arg(long, default_value_t = 30)]
    pub timeout_secs: u64,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long, env = ADDR_ENV, default_value = "127.0.0.1:7878")]
    pub addr: String,
    /// Model file written by `train --save`; only the encoder is used.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "k", visible_alias = "levels", short = 'k')]
    pub levels: u32,
    /// Input tensor fixture, rows along the last axis.
    #[arg(long)]
    pub input: PathBuf,
    /// Read the input as comma-separated rows.
    #[arg(long)]
    pub csv: bool,
    /// Write the server's output as a tensor fixture.
    #[arg(long = "out", visible_alias = "output")]
    pub output: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub timeout_secs: u64,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// Feature tensor fixture; without it a seeded standard-normal tensor of
    /// `--shape` is used.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Read the input as comma-separated rows.
    #[arg(long)]
    pub csv: bool,
    #[arg(long, value_delimiter = ',', default_value = "729,512")]
    pub shape: Vec<usize>,
    /// `discrete:<bits>` or `topk:<k>[:<epsilon>]`, repeatable.
    #[arg(long = "method", required = true)]
    pub methods: Vec<String>,
    #[arg(long, default_value_t = 3)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Include wall time (makes output nondeterministic).
    #[arg(long)]
    pub timing: bool,
    #[arg(long = "out", visible_alias = "output")]
    pub output: Option<PathBuf>,
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match execute(cli.command, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = out.flush();
            let message = e.to_string().replace('\n', " ");
            eprintln!("error kind={} message={message}", e.kind());
            1
        }
    }
}

pub fn execute<W: Write>(command: Command, out: &mut W) -> Result<(), CliError> {
    match command {
        Command::Quantize(a) => cmd_quantize(a, out),
        Command::Reconstruct(a) => cmd_reconstruct(a, out),
        Command::Entropy(a) => cmd_entropy(a, out),
        Command::Pack(a) => cmd_pack(a, out),
        Command::Frame(a) => cmd_frame(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::Serve(a) => cmd_serve(a, out),
        Command::Infer(a) => cmd_infer(a, out),
        Command::Benchmark(a) => cmd_benchmark(a, out),
    }
}

fn stdout_err(source: io::Error) -> CliError {
    CliError::Io {
        path: PathBuf::from("<stdout>"),
        source,
    }
}

macro_rules! emit {
    ($out:expr, $($arg:tt)*) => {
        writeln!($out, $($arg)*).map_err(stdout_err)?
    };
}

fn read_tensor(path: &Path, csv: bool) -> Result<FeatureTensor, CliError> {
    if csv {
        return read_csv_tensor(path);
    }
    let file = File::open(path).map_err(io_err(path))?;
    FeatureTensor::read_fixture(&mut BufReader::new(file))?
        .ok_or_else(|| CliError::Input(format!("{}: no tensor in file", path.display())))
}

/// One row per line, values separated by commas; yields a `rows × cols`
/// tensor.
fn read_csv_tensor(path: &Path) -> Result<FeatureTensor, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Input(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if *cols.get_or_insert(row.len()) != row.len() {
            return Err(CliError::Input(format!("{}:{}: ragged row", path.display(), n + 1)));
        }
        data.extend(row);
        rows += 1;
    }
    Ok(FeatureTensor::new(vec![rows, cols.unwrap_or(0)], data)?)
}

fn write_tensor(path: &Path, t: &FeatureTensor, csv: bool) -> Result<(), CliError> {
    if !csv {
        return fs::write(path, t.to_fixture_bytes()).map_err(io_err(path));
    }
    let mut text = String::new();
    for row in t.data().chunks(t.last_dim()) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

fn read_model(path: &Path) -> Result<SplitModel, CliError> {
    let file = File::open(path).map_err(io_err(path))?;
    Ok(SplitModel::load(&mut BufReader::new(file))?)
}

fn resolve(addr: &str) -> Result<SocketAddr, CliError> {
    addr.to_socket_addrs()
        .map_err(|e| CliError::Input(format!("cannot resolve {addr}: {e}")))?
        .next()
        .ok_or_else(|| CliError::Input(format!("no address for {addr}")))
}

fn fmt_shape(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn cmd_quantize<W: Write>(a: QuantizeArgs, out: &mut W) -> Result<(), CliError> {
    let x = read_tensor(&a.input, a.csv)?;
    let cfg = QuantizerConfig::new(a.levels)?.with_scaling(a.scaling.into());
    if a.levels > 1 << codec::MAX_BIT_WIDTH {
        return Err(CliError::Input(format!(
            "K={} needs more than 8 bits per index",
            a.levels
        )));
    }
    let q = quantizer::quantize(&x, &cfg)?;
    let bits = codec::bits_for_levels(a.levels);
    let packed = codec::pack(q.block.indices(), bits)?;
    let payload = packed.bytes().len();
    let frame = WireFrame::Features(Features {
        request_id: a.request_id,
        levels: a.levels as u16,
        shape: x.shape().iter().map(|&d| d as u32).collect(),
        packed,
    });
    let bytes = codec::encode_frame(&frame);
    fs::write(&a.output, &bytes).map_err(io_err(&a.output))?;
    let raw = codec::fp16_bytes(x.len());
    emit!(out, "levels={}", a.levels);
    emit!(out, "bit_width={bits}");
    emit!(out, "shape={}", fmt_shape(x.shape()));
    emit!(out, "count={}", x.len());
    emit!(out, "payload_bytes={payload}");
    emit!(out, "frame_bytes={}", bytes.len());
    emit!(out, "raw_fp16_bytes={raw}");
    emit!(out, "achieved_ratio={:.6}", codec::measured_ratio(raw, bytes.len()));
    emit!(out, "commit_loss={:.6}", q.commit_loss);
    emit!(out, "index_entropy_bits={:.6}", q.block.index_entropy());
    Ok(())
}

fn cmd_reconstruct<W: Write>(a: ReconstructArgs, out: &mut W) -> Result<(), CliError> {
    let bytes = fs::read(&a.input).map_err(io_err(&a.input))?;
    let WireFrame::Features(f) = codec::decode_frame(&bytes)? else {
        return Err(CliError::Input("expected a features frame".into()));
    };
    let shape: Vec<usize> = f.shape.iter().map(|&d| d as usize).collect();
    let block = QuantizedBlock::new(f.levels as u32, shape, codec::unpack(&f.packed)?)?;
    let c = quantizer::reconstruct(&block)?;
    if let Some(path) = &a.output {
        write_tensor(path, &c, a.csv)?;
    }
    let stats = c.stats()?;
    emit!(out, "request_id={}", f.request_id);
    emit!(out, "levels={}", f.levels);
    emit!(out, "shape={}", fmt_shape(c.shape()));
    emit!(out, "count={}", c.len());
    emit!(out, "min={:.6}", stats.min);
    emit!(out, "max={:.6}", stats.max);
    emit!(out, "mean={:.6}", stats.mean);
    Ok(())
}

fn cmd_entropy<W: Write>(a: EntropyArgs, out: &mut W) -> Result<(), CliError> {
    let x = read_tensor(&a.input, a.csv)?;
    let tap = match a.tap {
        TapArg::Raw => Tap::Raw,
        TapArg::Scaled => Tap::Scaled,
    };
    if a.per_dim {
        let x = match tap {
            Tap::Raw => x,
            Tap::Scaled => quantizer::scale_linear(&x)?,
        };
        emit!(out, "dim,entropy_bits,recommended_bits");
        for (i, r) in entropy::recommend_bits_per_dim(&x, a.grid)?.iter().enumerate() {
            emit!(out, "{i},{:.6},{}", r.entropy_bits, r.recommended_bits);
        }
        return Ok(());
    }
    let samples = entropy::tap_samples(&x, tap)?;
    let (report, density) = entropy::analyze(&samples, a.grid)?;
    if let Some(path) = &a.density_csv {
        let file = File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(file);
        density
            .write_csv(&mut w)
            .and_then(|_| w.flush())
            .map_err(io_err(path))?;
    }
    emit!(out, "tap={}", if tap == Tap::Raw { "raw" } else { "scaled" });
    write!(out, "{}", report.to_kv()).map_err(stdout_err)?;
    Ok(())
}

fn cmd_pack<W: Write>(a: PackArgs, out: &mut W) -> Result<(), CliError> {
    match (a.unpack, a.count) {
        (Some(hex), Some(count)) => {
            let bytes = codec::parse_hex(&hex)?;
            let packed = codec::PackedIndices::from_parts(a.bits, count, bytes)?;
            let indices = codec::unpack(&packed)?;
            let list: Vec<String> = indices.iter().map(|i| i.to_string()).collect();
            emit!(out, "bit_width={}", a.bits);
            emit!(out, "count={count}");
            emit!(out, "indices={}", list.join(","));
        }
        _ => {
            let packed = codec::pack(&a.indices, a.bits)?;
            let hex: String = packed.bytes().iter().map(|b| format!("{b:02x}")).collect();
            emit!(out, "bit_width={}", a.bits);
            emit!(out, "count={}", packed.count());
            emit!(out, "packed_bytes={}", packed.bytes().len());
            emit!(out, "hex={hex}");
        }
    }
    Ok(())
}

fn cmd_frame<W: Write>(a: FrameArgs, out: &mut W) -> Result<(), CliError> {
    let bytes = match (&a.file, &a.hex) {
        (Some(path), _) => fs::read(path).map_err(io_err(path))?,
        (None, Some(hex)) => codec::parse_hex(hex)?,
        (None, None) => return Err(CliError::Input("no frame given".into())),
    };
    if a.dump {
        write!(out, "{}", codec::hex_dump(&bytes)).map_err(stdout_err)?;
    }
    let frame = codec::decode_frame(&bytes)?;
    emit!(out, "{frame}");
    emit!(out, "frame_bytes={}", bytes.len());
    Ok(())
}

fn cmd_train<W: Write>(a: TrainArgs, out: &mut W) -> Result<(), CliError> {
    let (data, dims_in, dims_out, task) = match a.dataset {
        DatasetArg::Mixture => {
            let x = training::gaussian_mixture(a.rows, a.seed);
            (Dataset::autoencoder(x)?, 4, 4, TaskLoss::Mse)
        }
        DatasetArg::Moons => (training::two_moons(a.rows, 0.1, a.seed), 2, 2, TaskLoss::CrossEntropy),
    };
    let model = SplitModel::random(
        &[dims_in, a.hidden, a.bottleneck],
        &[a.bottleneck, a.hidden, dims_out],
        a.activation.into(),
        a.seed,
    )?;
    let quantizer = match a.levels {
        0 => None,
        k => Some(QuantizerConfig::new(k)?),
    };
    let cfg = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch,
        epochs: a.epochs,
        alpha: a.alpha,
        seed: a.seed,
        quantizer,
        task,
    };
    let outcome = training::train(model, &data, &cfg)?;
    if let Some(path) = &a.history {
        let file = File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(file);
        outcome
            .write_csv(&mut w)
            .and_then(|_| w.flush())
            .map_err(io_err(path))?;
    }
    if let Some(path) = &a.save {
        let file = File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(file);
        outcome.model.save(&mut w)?;
        w.flush().map_err(io_err(path))?;
    }
    let (first, last) = (outcome.initial(), outcome.last());
    emit!(out, "epochs={}", a.epochs);
    emit!(out, "levels={}", a.levels);
    emit!(out, "parameter_count={}", outcome.model.parameter_count());
    emit!(out, "initial_loss={:.6}", first.total);
    emit!(out, "final_loss={:.6}", last.total);
    emit!(out, "final_task_loss={:.6}", last.task);
    emit!(out, "final_commit_loss={:.6}", last.commit);
    emit!(out, "loss_ratio={:.6}", last.total / first.total);
    Ok(())
}

fn cmd_gradcheck<W: Write>(a: GradcheckArgs, out: &mut W) -> Result<(), CliError> {
    let model = SplitModel::random(&[4, 8, 3], &[3, 8, 4], Activation::Gelu, a.seed)?;
    let data = Dataset::autoencoder(training::gaussian_mixture(a.rows, a.seed))?;
    let q = QuantizerConfig::new(a.levels)?;
    let report = training::grad_check(&model, &data, &q, a.alpha, TaskLoss::Mse, a.perturbation)?;
    emit!(out, "parameter_count={}", report.parameter_count);
    emit!(out, "perturbation={:e}", report.perturbation);
    emit!(out, "max_rel_error={:.3e}", report.max_rel_error);
    emit!(out, "tolerance={:e}", a.tolerance);
    emit!(out, "pass={}", report.max_rel_error <= a.tolerance);
    if report.max_rel_error > a.tolerance {
        return Err(CliError::Input(format!(
            "max relative error {:.3e} exceeds {:e}",
            report.max_rel_error, a.tolerance
        )));
    }
    Ok(())
}

fn cmd_serve<W: Write>(a: ServeArgs, out: &mut W) -> Result<(), CliError> {
    let model = read_model(&a.model)?;
    let mut cfg = SessionConfig::new(QuantizerConfig::new(a.levels)?, Transport::Tcp(resolve(&a.addr)?));
    cfg.timeout = Duration::from_secs(a.timeout_secs);
    let handle = splitnet::serve(&cfg, model.decoder)?;
    emit!(out, "listening={}", handle.local_addr());
    out.flush().map_err(stdout_err)?;
    handle.wait();
    Ok(())
}

fn cmd_infer<W: Write>(a: InferArgs, out: &mut W) -> Result<(), CliError> {
    let model = read_model(&a.model)?;
    let x = read_tensor(&a.input, a.csv)?;
    let mut cfg = SessionConfig::new(QuantizerConfig::new(a.levels)?, Transport::Tcp(resolve(&a.addr)?));
    cfg.timeout = Duration::from_secs(a.timeout_secs);
    let mut client = Client::connect(cfg)?;
    let (y, log) = client.infer(&x, &model.encoder)?;
    if let Some(path) = &a.output {
        write_tensor(path, &y, false)?;
    }
    emit!(out, "output_shape={}", fmt_shape(y.shape()));
    emit!(out, "output_sum={:.6}", y.data().iter().sum::<f64>());
    write!(out, "{}", log.to_kv()).map_err(stdout_err)?;
    Ok(())
}

fn cmd_benchmark<W: Write>(a: BenchmarkArgs, out: &mut W) -> Result<(), CliError> {
    let x = match &a.input {
        Some(path) => read_tensor(path, a.csv)?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let n: usize = a.shape.iter().product();
            let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            FeatureTensor::new(a.shape.clone(), data)?
        }
    };
    let methods = a
        .methods
        .iter()
        .map(|m| BenchMethod::parse(m))
        .collect::<Result<Vec<_>, _>>()?;
    let rows = splitnet::benchmark(&methods, &x, a.trials, a.seed)?;
    let csv = splitnet::benchmark_csv(&rows, a.timing);
    match &a.output {
        Some(path) => fs::write(path, &csv).map_err(io_err(path))?,
        None => write!(out, "{csv}").map_err(stdout_err)?,
    }
    Ok(())
}
