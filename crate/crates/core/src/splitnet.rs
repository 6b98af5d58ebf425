//! Client/server split inference over the framed wire format.
//!
//! The client runs the encoder and quantizer and ships only packed indices;
//! the server rebuilds features from `K` and the indices, runs the decoder,
//! and answers with a `Response`. A session starts with a `Hello` exchange
//! that fixes `K` for its lifetime. One request is in flight per connection.

use std::fmt::Write as _;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::baseline::{self, BaselineError};
use crate::codec::{
    self, CodecError, CompressionMethod, ErrorFrame, Features, FrameType, Hello, Response, ResponseBody, WireFrame,
    HEADER_LEN, PROTOCOL_VERSION,
};
use crate::quantizer::{self, LinearScale, QuantizeError, QuantizedBlock, QuantizerConfig};
use crate::tensor::{FeatureTensor, TensorError};
use crate::training::{self, DenseLayer, TrainError};

/// Error codes carried in `Error` frames.
pub mod error_code {
    pub const MALFORMED: u16 = 1;
    pub const VERSION_MISMATCH: u16 = 2;
    pub const LEVEL_MISMATCH: u16 = 3;
    pub const UNEXPECTED_FRAME: u16 = 4;
    pub const CORRUPT_BLOCK: u16 = 5;
    pub const SHAPE_MISMATCH: u16 = 6;
    pub const INTERNAL: u16 = 7;
}

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("timed out waiting for peer")]
    Timeout,
    #[error("transport failure: {0}")]
    Transport(#[source] io::Error),
    #[error("server error {code}: {message}")]
    Remote { code: u16, message: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("unsupported benchmark method: {0}")]
    Method(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Quantize(#[from] QuantizeError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
}

impl From<io::Error> for SplitError {
    fn from(e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => SplitError::Timeout,
            _ => SplitError::Transport(e),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transport {
    Loopback,
    Tcp(SocketAddr),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    pub quantizer: QuantizerConfig,
    /// Expected shape of the quantized (encoder output) tensor; `None`
    /// accepts any shape.
    pub shape: Option<Vec<usize>>,
    pub transport: Transport,
    pub timeout: Duration,
}

impl SessionConfig {
    pub fn new(quantizer: QuantizerConfig, transport: Transport) -> Self {
        Self {
            quantizer,
            shape: None,
            transport,
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn levels(&self) -> u32 {
        self.quantizer.levels()
    }

    fn wire_levels(&self) -> Result<u16, SplitError> {
        let k = self.levels();
        if k > 1 << codec::MAX_BIT_WIDTH {
            return Err(SplitError::Protocol(format!("K={k} exceeds the 8-bit wire limit")));
        }
        Ok(k as u16)
    }
}

/// Byte accounting for frames a client has sent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TransferLog {
    pub frames_sent: u64,
    /// Packed index bytes, `Σ ceil(count·b/8)` over `Features` frames.
    pub payload_bytes: u64,
    /// Everything else sent: frame headers, metadata, `Hello`.
    pub overhead_bytes: u64,
    /// What the same features would cost as raw FP16.
    pub raw_fp16_bytes: u64,
}

impl TransferLog {
    pub fn total_bytes(&self) -> u64 {
        self.payload_bytes + self.overhead_bytes
    }

    pub fn achieved_ratio(&self) -> f64 {
        if self.total_bytes() == 0 {
            return 0.0;
        }
        codec::measured_ratio(self.raw_fp16_bytes as usize, self.total_bytes() as usize)
    }

    fn add(&mut self, other: &TransferLog) {
        self.frames_sent += other.frames_sent;
        self.payload_bytes += other.payload_bytes;
        self.overhead_bytes += other.overhead_bytes;
        self.raw_fp16_bytes += other.raw_fp16_bytes;
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "frames_sent={}", self.frames_sent);
        let _ = writeln!(s, "payload_bytes={}", self.payload_bytes);
        let _ = writeln!(s, "overhead_bytes={}", self.overhead_bytes);
        let _ = writeln!(s, "total_bytes={}", self.total_bytes());
        let _ = writeln!(s, "raw_fp16_bytes={}", self.raw_fp16_bytes);
        let _ = writeln!(s, "achieved_ratio={:.6}", self.achieved_ratio());
        s
    }

    pub fn csv_header() -> &'static str {
        "frames_sent,payload_bytes,overhead_bytes,total_bytes,raw_fp16_bytes,achieved_ratio"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6}",
            self.frames_sent,
            self.payload_bytes,
            self.overhead_bytes,
            self.total_bytes(),
            self.raw_fp16_bytes,
            self.achieved_ratio()
        )
    }
}

fn error_frame(code: u16, message: impl Into<String>) -> WireFrame {
    WireFrame::Error(ErrorFrame {
        code,
        message: message.into(),
    })
}

/// Server-side state for one connection.
#[derive(Debug)]
pub struct ServerSession {
    levels: u32,
    shape: Option<Vec<usize>>,
    decoder: Arc<Vec<DenseLayer>>,
    established: bool,
}

impl ServerSession {
    pub fn new(cfg: &SessionConfig, decoder: Arc<Vec<DenseLayer>>) -> Self {
        Self {
            levels: cfg.levels(),
            shape: cfg.shape.clone(),
            decoder,
            established: false,
        }
    }

    /// Answers one decoded frame.
    pub fn handle(&mut self, frame: WireFrame) -> WireFrame {
        match frame {
            WireFrame::Hello(h) => self.hello(h),
            WireFrame::Features(f) if self.established => self.features(f),
            WireFrame::Features(_) => error_frame(error_code::UNEXPECTED_FRAME, "features before hello"),
            other => error_frame(
                error_code::UNEXPECTED_FRAME,
                format!("server does not accept {:?} frames", other.frame_type()),
            ),
        }
    }

    /// Answers one encoded frame; undecodable input yields an `Error` frame.
    pub fn handle_bytes(&mut self, bytes: &[u8]) -> Vec<u8> {
        let reply = match codec::decode_frame(bytes) {
            Ok(frame) => self.handle(frame),
            Err(e) => error_frame(error_code::MALFORMED, e.to_string()),
        };
        codec::encode_frame(&reply)
    }

    fn hello(&mut self, h: Hello) -> WireFrame {
        if h.protocol_version != PROTOCOL_VERSION {
            return error_frame(
                error_code::VERSION_MISMATCH,
                format!(
                    "protocol version {} unsupported, expected {PROTOCOL_VERSION}",
                    h.protocol_version
                ),
            );
        }
        if h.levels as u32 != self.levels {
            return error_frame(
                error_code::LEVEL_MISMATCH,
                format!("client K={} but server K={}", h.levels, self.levels),
            );
        }
        self.established = true;
        let shape = self
            .shape
            .as_ref()
            .map_or_else(|| h.shape.clone(), |s| s.iter().map(|&d| d as u32).collect());
        WireFrame::Hello(Hello {
            protocol_version: PROTOCOL_VERSION,
            levels: self.levels as u16,
            shape,
        })
    }

    fn features(&mut self, f: Features) -> WireFrame {
        let id = f.request_id;
        if f.levels as u32 != self.levels {
            return error_frame(
                error_code::LEVEL_MISMATCH,
                format!("frame K={} but session K={}", f.levels, self.levels),
            );
        }
        let shape: Vec<usize> = f.shape.iter().map(|&d| d as usize).collect();
        if self.shape.as_ref().is_some_and(|s| *s != shape) {
            return error_frame(error_code::SHAPE_MISMATCH, format!("unexpected shape {shape:?}"));
        }
        let indices = match codec::unpack(&f.packed) {
            Ok(i) => i,
            Err(e) => return error_frame(error_code::MALFORMED, e.to_string()),
        };
        let c = match QuantizedBlock::new(self.levels, shape, indices).and_then(|b| quantizer::reconstruct(&b)) {
            Ok(c) => c,
            Err(e @ QuantizeError::CorruptBlock { .. }) => {
                return error_frame(error_code::CORRUPT_BLOCK, e.to_string())
            }
            Err(e) => return error_frame(error_code::SHAPE_MISMATCH, e.to_string()),
        };
        match training::forward_layers(&self.decoder, &c) {
            Ok(out) => WireFrame::Response(Response {
                request_id: id,
                body: ResponseBody::Tensor {
                    shape: out.shape().iter().map(|&d| d as u32).collect(),
                    data: out.into_data(),
                },
            }),
            Err(e) => error_frame(error_code::SHAPE_MISMATCH, e.to_string()),
        }
    }
}

fn read_frame<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>, SplitError> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match r.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(SplitError::Protocol("connection closed mid-frame".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let (_, len) = codec::parse_header(&header)?;
    let mut frame = vec![0u8; HEADER_LEN + len];
    frame[..HEADER_LEN].copy_from_slice(&header);
    r.read_exact(&mut frame[HEADER_LEN..])?;
    Ok(Some(frame))
}

fn serve_connection(mut stream: TcpStream, mut session: ServerSession, received: Arc<Mutex<Vec<FrameType>>>) {
    loop {
        let reply = match read_frame(&mut stream) {
            Ok(None) => return,
            Ok(Some(bytes)) => {
                if let Ok(t) = FrameType::from_u8(bytes[3]) {
                    received.lock().expect("log lock").push(t);
                }
                session.handle_bytes(&bytes)
            }
            Err(SplitError::Codec(e)) => {
                // The header itself is bad, so the stream cannot be resynced.
                let _ = stream.write_all(&codec::encode_frame(&error_frame(error_code::MALFORMED, e.to_string())));
                let _ = stream.shutdown(Shutdown::Both);
                return;
            }
            Err(_) => return,
        };
        if stream.write_all(&reply).is_err() {
            return;
        }
    }
}

/// Handle to a running TCP server; shuts down when dropped.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    received: Arc<Mutex<Vec<FrameType>>>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Types of every frame the server has read, in arrival order per
    /// connection.
    pub fn received_frame_types(&self) -> Vec<FrameType> {
        self.received.lock().expect("log lock").clone()
    }

    /// Blocks until the accept loop exits (it only exits on shutdown).
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.accept.is_some() {
            self.stop_accepting();
        }
    }
}

/// Binds and starts serving `cfg.transport` (must be TCP). Each connection
/// gets its own thread and session state.
pub fn serve(cfg: &SessionConfig, decoder: Vec<DenseLayer>) -> Result<ServerHandle, SplitError> {
    let addr = match cfg.transport {
        Transport::Tcp(addr) => addr,
        Transport::Loopback => return Err(SplitError::Protocol("serve needs a TCP address".into())),
    };
    cfg.wire_levels()?;
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let received = Arc::new(Mutex::new(Vec::new()));
    let decoder = Arc::new(decoder);
    let cfg = cfg.clone();
    let accept = {
        let stop = stop.clone();
        let received = received.clone();
        thread::spawn(move || {
            for conn in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let _ = stream.set_nodelay(true);
                let _ = stream.set_read_timeout(Some(cfg.timeout));
                let session = ServerSession::new(&cfg, decoder.clone());
                let received = received.clone();
                thread::spawn(move || serve_connection(stream, session, received));
            }
        })
    };
    Ok(ServerHandle {
        addr,
        stop,
        received,
        accept: Some(accept),
    })
}

enum Link {
    Loopback(ServerSession),
    Tcp(TcpStream),
}

/// Client end of a split session. Not shareable across threads.
pub struct Client {
    cfg: SessionConfig,
    link: Link,
    next_id: u64,
    log: TransferLog,
    sent: Vec<FrameType>,
}

impl Client {
    /// Connects over TCP and performs the `Hello` exchange.
    pub fn connect(cfg: SessionConfig) -> Result<Self, SplitError> {
        let Transport::Tcp(addr) = cfg.transport else {
            return Err(SplitError::Protocol("connect needs a TCP address".into()));
        };
        let stream = TcpStream::connect_timeout(&addr, cfg.timeout)?;
        stream.set_read_timeout(Some(cfg.timeout))?;
        stream.set_write_timeout(Some(cfg.timeout))?;
        stream.set_nodelay(true)?;
        Self::start(cfg, Link::Tcp(stream))
    }

    /// In-process session against `decoder`, still going through the
    /// encoded wire bytes.
    pub fn loopback(cfg: SessionConfig, decoder: Vec<DenseLayer>) -> Result<Self, SplitError> {
        let session = ServerSession::new(&cfg, Arc::new(decoder));
        Self::start(cfg, Link::Loopback(session))
    }

    fn start(cfg: SessionConfig, link: Link) -> Result<Self, SplitError> {
        let mut client = Self {
            link,
            next_id: 1,
            log: TransferLog::default(),
            sent: Vec::new(),
            cfg,
        };
        let hello = WireFrame::Hello(Hello {
            protocol_version: PROTOCOL_VERSION,
            levels: client.cfg.wire_levels()?,
            shape: client
                .cfg
                .shape
                .as_ref()
                .map_or_else(|| vec![1], |s| s.iter().map(|&d| d as u32).collect()),
        });
        let bytes = codec::encode_frame(&hello);
        client.log.frames_sent += 1;
        client.log.overhead_bytes += bytes.len() as u64;
        match client.exchange(&bytes)? {
            WireFrame::Hello(h) if h.levels as u32 == client.cfg.levels() => Ok(client),
            WireFrame::Hello(h) => Err(SplitError::Protocol(format!("server acknowledged K={}", h.levels))),
            WireFrame::Error(e) => Err(SplitError::Remote {
                code: e.code,
                message: e.message,
            }),
            other => Err(SplitError::Protocol(format!(
                "unexpected {:?} reply to hello",
                other.frame_type()
            ))),
        }
    }

    fn exchange(&mut self, bytes: &[u8]) -> Result<WireFrame, SplitError> {
        self.sent.push(FrameType::from_u8(bytes[3])?);
        let reply = match &mut self.link {
            Link::Loopback(session) => session.handle_bytes(bytes),
            Link::Tcp(stream) => {
                stream.write_all(bytes)?;
                read_frame(stream)?.ok_or_else(|| SplitError::Protocol("server closed the connection".into()))?
            }
        };
        Ok(codec::decode_frame(&reply)?)
    }

    /// Cumulative accounting for this session, including `Hello`.
    pub fn session_log(&self) -> &TransferLog {
        &self.log
    }

    /// Frame types this client has put on the wire.
    pub fn sent_frame_types(&self) -> &[FrameType] {
        &self.sent
    }

    /// Encode, quantize, pack, send, and wait for the decoded result. The
    /// returned log covers this request only.
    pub fn infer(&mut self, x: &FeatureTensor, enc: &[DenseLayer]) -> Result<(FeatureTensor, TransferLog), SplitError> {
        let h = training::forward_layers(enc, x)?;
        if let Some(expected) = &self.cfg.shape {
            if h.shape() != expected.as_slice() {
                return Err(SplitError::Protocol(format!(
                    "encoder output {:?} does not match session shape {expected:?}",
                    h.shape()
                )));
            }
        }
        let q = quantizer::quantize(&h, &self.cfg.quantizer)?;
        let levels = self.cfg.wire_levels()?;
        let packed = codec::pack(q.block.indices(), codec::bits_for_levels(levels as u32))?;
        let payload = packed.bytes().len() as u64;
        let request_id = self.next_id;
        self.next_id += 1;
        let frame = WireFrame::Features(Features {
            request_id,
            levels,
            shape: h.shape().iter().map(|&d| d as u32).collect(),
            packed,
        });
        let bytes = codec::encode_frame(&frame);
        let log = TransferLog {
            frames_sent: 1,
            payload_bytes: payload,
            overhead_bytes: bytes.len() as u64 - payload,
            raw_fp16_bytes: codec::fp16_bytes(h.len()) as u64,
        };
        self.log.add(&log);
        match self.exchange(&bytes)? {
            WireFrame::Response(r) if r.request_id == request_id => match r.body {
                ResponseBody::Tensor { shape, data } => {
                    let t = FeatureTensor::new(shape.iter().map(|&d| d as usize).collect(), data)?;
                    Ok((t, log))
                }
                ResponseBody::Scalar(_) => Err(SplitError::Protocol("expected a tensor response".into())),
            },
            WireFrame::Response(r) => Err(SplitError::Protocol(format!(
                "response for request {} while waiting for {request_id}",
                r.request_id
            ))),
            WireFrame::Error(e) => Err(SplitError::Remote {
                code: e.code,
                message: e.message,
            }),
            other => Err(SplitError::Protocol(format!(
                "unexpected {:?} reply",
                other.frame_type()
            ))),
        }
    }
}

/// One request on an established client.
pub fn client_infer(
    client: &mut Client,
    x: &FeatureTensor,
    enc: &[DenseLayer],
) -> Result<(FeatureTensor, TransferLog), SplitError> {
    client.infer(x, enc)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BenchMethod {
    /// Fixed-width indices at `bits` (1..=8), or the FP16 passthrough control
    /// at 16.
    Discrete { bits: u8 },
    /// Per-row top-k with random non-top-k slots.
    TopK { k: usize, epsilon: f64 },
}

impl BenchMethod {
    pub fn label(&self) -> String {
        match self {
            BenchMethod::Discrete { bits } => format!("discrete:{bits}"),
            BenchMethod::TopK { k, epsilon } => format!("topk:{k}:{epsilon}"),
        }
    }

    /// Parses `discrete:<bits>` or `topk:<k>[:<epsilon>]`.
    pub fn parse(s: &str) -> Result<Self, SplitError> {
        let bad = || SplitError::Method(s.to_string());
        let parts: Vec<&str> = s.trim().split(':').collect();
        match parts.as_slice() {
            ["discrete", b] => {
                let bits: u8 = b.parse().map_err(|_| bad())?;
                if (1..=codec::MAX_BIT_WIDTH).contains(&bits) || bits == 16 {
                    Ok(BenchMethod::Discrete { bits })
                } else {
                    Err(bad())
                }
            }
            ["topk", k] | ["topk", k, _] => {
                let k: usize = k.parse().map_err(|_| bad())?;
                let epsilon = match parts.get(2) {
                    Some(e) => e.parse().map_err(|_| bad())?,
                    None => 0.0,
                };
                Ok(BenchMethod::TopK { k, epsilon })
            }
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: String,
    pub nominal_ratio: f64,
    pub wire_ratio: f64,
    pub wire_bytes: usize,
    pub mse: f64,
    pub wall_ms: f64,
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Compares compression methods on `x` (rows along the last axis).
///
/// Features are first rounded to FP16, the baseline every ratio is measured
/// against, and reconstruction error is taken in that feature space: discrete
/// reconstructions are mapped back through the client's scaling. Top-k runs
/// use `seed + trial`.
pub fn benchmark(
    methods: &[BenchMethod],
    x: &FeatureTensor,
    trials: usize,
    seed: u64,
) -> Result<Vec<BenchRow>, SplitError> {
    if methods.is_empty() {
        return Err(SplitError::Method("no methods given".into()));
    }
    let trials = trials.max(1);
    let reference = x.map(|v| half::f16::from_f64(v).to_f64());
    let raw = codec::fp16_bytes(reference.len());
    let dims = reference.last_dim();
    let shape: Vec<u32> = reference.shape().iter().map(|&d| d as u32).collect();

    methods
        .iter()
        .map(|m| {
            let mut wire_bytes = 0;
            let mut err = 0.0;
            let start = Instant::now();
            for trial in 0..trials {
                let (bytes, recon) = match *m {
                    BenchMethod::Discrete { bits: 16 } => {
                        // FP16 passthrough: a Features-shaped header around raw halves.
                        let header = HEADER_LEN + 8 + 2 + 1 + 4 * shape.len() + 1 + 4;
                        (header + raw, reference.data().to_vec())
                    }
                    BenchMethod::Discrete { bits } => {
                        let cfg = QuantizerConfig::new(1 << bits)?;
                        let scale = LinearScale::fit(reference.data())?;
                        let q = quantizer::quantize(&reference, &cfg)?;
                        let frame = WireFrame::Features(Features {
                            request_id: trial as u64,
                            levels: cfg.levels() as u16,
                            shape: shape.clone(),
                            packed: codec::pack(q.block.indices(), bits)?,
                        });
                        let encoded = codec::encode_frame(&frame);
                        let WireFrame::Features(f) = codec::decode_frame(&encoded)? else {
                            unreachable!("features frame decodes as features")
                        };
                        let block = QuantizedBlock::new(
                            f.levels as u32,
                            reference.shape().to_vec(),
                            codec::unpack(&f.packed)?,
                        )?;
                        let c = quantizer::reconstruct(&block)?;
                        (encoded.len(), c.data().iter().map(|&v| scale.invert(v)).collect())
                    }
                    BenchMethod::TopK { k, epsilon } => {
                        let rows = baseline::sparsify_rows(&reference, k, epsilon, seed.wrapping_add(trial as u64))?;
                        let frame = WireFrame::TopK(baseline::rows_to_frame(&rows, trial as u64)?);
                        let encoded = codec::encode_frame(&frame);
                        let WireFrame::TopK(t) = codec::decode_frame(&encoded)? else {
                            unreachable!("top-k frame decodes as top-k")
                        };
                        let dense: Vec<f64> = baseline::rows_from_frame(&t)?
                            .iter()
                            .flat_map(baseline::densify)
                            .collect();
                        (encoded.len(), dense)
                    }
                };
                wire_bytes = bytes;
                err += mse(&recon, reference.data());
            }
            let wall_ms = start.elapsed().as_secs_f64() * 1e3 / trials as f64;
            let nominal_ratio = match *m {
                BenchMethod::Discrete { bits } => {
                    codec::compression_rate(CompressionMethod::Discrete, bits as u32, dims as u32)?
                }
                BenchMethod::TopK { k, .. } => codec::compression_rate(CompressionMethod::TopK, k as u32, dims as u32)?,
            };
            Ok(BenchRow {
                method: m.label(),
                nominal_ratio,
                wire_ratio: codec::measured_ratio(raw, wire_bytes),
                wire_bytes,
                mse: err / trials as f64,
                wall_ms,
            })
        })
        .collect()
}

/// CSV of benchmark rows. Wall time is left out unless asked for, so repeated
/// runs compare byte for byte.
pub fn benchmark_csv(rows: &[BenchRow], include_timing: bool) -> String {
    let mut s = String::from("method,nominal_ratio,wire_ratio,wire_bytes,mse");
    if include_timing {
        s.push_str(",wall_ms");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(
            s,
            "{},{:.6},{:.6},{},{:.9}",
            r.method, r.nominal_ratio, r.wire_ratio, r.wire_bytes, r.mse
        );
        if include_timing {
            let _ = write!(s, ",{:.3}", r.wall_ms);
        }
        s.push('\n');
    }
    s
}
