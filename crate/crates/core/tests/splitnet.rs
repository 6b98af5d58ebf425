use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::thread;
use std::time::Duration;

use splitquant::codec::{self, ErrorFrame, Features, Hello, WireFrame, HEADER_LEN, PROTOCOL_VERSION};
use splitquant::quantizer::QuantizerConfig;
use splitquant::splitnet::{self, error_code, Client, ServerHandle, SessionConfig, SplitError, Transport};
use splitquant::tensor::FeatureTensor;
use splitquant::training::{Activation, SplitModel};

fn model() -> SplitModel {
    SplitModel::random(&[6, 4], &[4, 5], Activation::Gelu, 21).unwrap()
}

fn server(k: u32) -> (ServerHandle, SplitModel) {
    let m = model();
    let cfg = SessionConfig::new(
        QuantizerConfig::new(k).unwrap(),
        Transport::Tcp("127.0.0.1:0".parse().unwrap()),
    );
    (splitnet::serve(&cfg, m.decoder.clone()).unwrap(), m)
}

fn tcp_cfg(k: u32, h: &ServerHandle) -> SessionConfig {
    SessionConfig::new(QuantizerConfig::new(k).unwrap(), Transport::Tcp(h.local_addr()))
}

fn send(stream: &mut TcpStream, frame: &WireFrame) {
    stream.write_all(&codec::encode_frame(frame)).unwrap();
}

fn recv(stream: &mut TcpStream) -> WireFrame {
    let mut header = [0u8; HEADER_LEN];
    stream.read_exact(&mut header).unwrap();
    let (_, len) = codec::parse_header(&header).unwrap();
    let mut bytes = header.to_vec();
    bytes.resize(HEADER_LEN + len, 0);
    stream.read_exact(&mut bytes[HEADER_LEN..]).unwrap();
    codec::decode_frame(&bytes).unwrap()
}

fn hello(version: u16, k: u16) -> WireFrame {
    WireFrame::Hello(Hello {
        protocol_version: version,
        levels: k,
        shape: vec![1],
    })
}

fn input(rows: usize, seed: u64) -> FeatureTensor {
    FeatureTensor::new(
        vec![rows, 6],
        (0..rows * 6)
            .map(|i| ((i as u64 * 31 + seed) as f64 * 0.17).sin())
            .collect(),
    )
    .unwrap()
}

#[test]
fn version_mismatch_gets_code_two() {
    let (h, _) = server(4);
    let mut s = TcpStream::connect(h.local_addr()).unwrap();
    send(&mut s, &hello(PROTOCOL_VERSION + 1, 4));
    assert!(matches!(
        recv(&mut s),
        WireFrame::Error(ErrorFrame {
            code: error_code::VERSION_MISMATCH,
            ..
        })
    ));
}

#[test]
fn bad_magic_gets_error_then_close() {
    let (h, _) = server(4);
    let mut s = TcpStream::connect(h.local_addr()).unwrap();
    s.write_all(b"XX\x01\x01\x00\x00\x00\x00").unwrap();
    assert!(matches!(
        recv(&mut s),
        WireFrame::Error(ErrorFrame {
            code: error_code::MALFORMED,
            ..
        })
    ));
    let mut rest = Vec::new();
    s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    assert_eq!(s.read_to_end(&mut rest).unwrap(), 0);
}

#[test]
fn corrupt_block_reported_and_session_survives() {
    let (h, _) = server(3);
    let mut s = TcpStream::connect(h.local_addr()).unwrap();
    send(&mut s, &hello(PROTOCOL_VERSION, 3));
    assert!(matches!(recv(&mut s), WireFrame::Hello(_)));
    let features = |id, idx: &[u32]| {
        WireFrame::Features(Features {
            request_id: id,
            levels: 3,
            shape: vec![1, 4],
            packed: codec::pack(idx, 2).unwrap(),
        })
    };
    match recv_after(&mut s, &features(1, &[0, 1, 3, 2])) {
        WireFrame::Error(e) => {
            assert_eq!(e.code, error_code::CORRUPT_BLOCK);
            assert!(e.message.starts_with("corrupt block"), "{}", e.message);
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(recv_after(&mut s, &features(2, &[0, 1, 2, 2])), WireFrame::Response(r) if r.request_id == 2));
}

fn recv_after(s: &mut TcpStream, f: &WireFrame) -> WireFrame {
    send(s, f);
    recv(s)
}

#[test]
fn k_mismatch_is_a_remote_error() {
    let (h, _) = server(4);
    match Client::connect(tcp_cfg(8, &h)) {
        Err(SplitError::Remote { code, .. }) => assert_eq!(code, error_code::LEVEL_MISMATCH),
        Err(e) => panic!("{e}"),
        Ok(_) => panic!("handshake should fail"),
    }
}

#[test]
fn silent_peer_times_out() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let _hold = thread::spawn(move || {
        let (s, _) = listener.accept().unwrap();
        thread::sleep(Duration::from_secs(3));
        drop(s);
    });
    let mut cfg = SessionConfig::new(QuantizerConfig::new(4).unwrap(), Transport::Tcp(addr));
    cfg.timeout = Duration::from_millis(200);
    assert!(matches!(Client::connect(cfg), Err(SplitError::Timeout)));
}

#[test]
fn concurrent_clients_get_their_own_answers() {
    let (h, m) = server(8);
    let workers: Vec<_> = (0..4)
        .map(|w| {
            let cfg = tcp_cfg(8, &h);
            let m = m.clone();
            thread::spawn(move || {
                let mut c = Client::connect(cfg.clone()).unwrap();
                let mut local = Client::loopback(
                    SessionConfig {
                        transport: Transport::Loopback,
                        ..cfg
                    },
                    m.decoder.clone(),
                )
                .unwrap();
                for i in 0..20 {
                    let x = input(1 + i % 3, w * 100 + i as u64);
                    assert_eq!(
                        c.infer(&x, &m.encoder).unwrap().0,
                        local.infer(&x, &m.encoder).unwrap().0
                    );
                }
            })
        })
        .collect();
    for w in workers {
        w.join().unwrap();
    }
}

#[test]
fn transfer_log_counts_bytes() {
    let (h, m) = server(4);
    let mut c = Client::connect(tcp_cfg(4, &h)).unwrap();
    let (_, log) = c.infer(&input(10, 0), &m.encoder).unwrap();
    // 10 rows x 4 dims at 2 bits.
    assert_eq!(log.payload_bytes, 10);
    assert_eq!(log.raw_fp16_bytes, 80);
    // Header 8, id 8, K 2, rank 1, dims 8, bit width 1, count 4.
    assert_eq!(log.overhead_bytes, 32);
    assert!((log.achieved_ratio() - 80.0 / 42.0).abs() < 1e-12);
    assert_eq!(c.session_log().frames_sent, 2);
}

#[test]
fn declared_shape_is_enforced() {
    let (h, m) = server(4);
    let mut cfg = tcp_cfg(4, &h);
    cfg.shape = Some(vec![2, 4]);
    let mut c = Client::connect(cfg).unwrap();
    assert!(c.infer(&input(2, 1), &m.encoder).is_ok());
    assert!(matches!(
        c.infer(&input(3, 1), &m.encoder),
        Err(SplitError::Protocol(_))
    ));
}

#[test]
fn top_k_frames_are_refused_by_server() {
    let (h, _) = server(4);
    let mut s = TcpStream::connect(h.local_addr()).unwrap();
    send(&mut s, &hello(PROTOCOL_VERSION, 4));
    recv(&mut s);
    let frame = WireFrame::TopK(codec::TopKFrame {
        request_id: 1,
        rows: 1,
        dims: 4,
        k: 1,
        indices: vec![2],
        values: vec![0x3c00],
    });
    assert!(matches!(
        recv_after(&mut s, &frame),
        WireFrame::Error(ErrorFrame {
            code: error_code::UNEXPECTED_FRAME,
            ..
        })
    ));
}
