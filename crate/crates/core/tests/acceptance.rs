//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::HashSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};

use splitquant::baseline;
use splitquant::codec::{self, CompressionMethod, Features, FrameType, WireFrame};
use splitquant::entropy::{self, ProbeDistribution, DEFAULT_GRID_POINTS};
use splitquant::quantizer::{self, QuantizerConfig, Scaling};
use splitquant::splitnet::{self, Client, SessionConfig, Transport};
use splitquant::tensor::FeatureTensor;
use splitquant::training::{self, Activation, Dataset, SplitModel, TaskLoss, TrainConfig};

type Check = fn() -> Outcome;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

fn quantizer_round_trip() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_excess = f64::NEG_INFINITY;
    let mut bad_index = false;
    for k in 2..=32u32 {
        let cfg = QuantizerConfig::new(k).unwrap();
        let bound = 1.0 / (k - 1) as f64 + 1e-6;
        for _ in 0..10_000 {
            let n = rng.random_range(1..=64);
            let scale = 10f64.powf(rng.random_range(-3.0..3.0));
            let x = FeatureTensor::new(vec![n], normal_vec(&mut rng, n, scale)).unwrap();
            let q = quantizer::quantize(&x, &cfg).unwrap();
            bad_index |= q.block.indices().iter().any(|&i| i >= k);
            let c = quantizer::reconstruct(&q.block).unwrap();
            for (a, b) in c.data().iter().zip(q.scaled.data()) {
                worst_excess = worst_excess.max((a - b).abs() - bound);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_excess <= 0.0 && !bad_index && secs < 10.0,
        format!(
            "K=2..32 x 10^4 tensors, max(err - bound)={worst_excess:.3e}, indices_ok={}, {secs:.2}s",
            !bad_index
        ),
    )
}

fn entropy_accuracy() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let normal = ProbeDistribution::Normal.sample(&mut rng, 100_000);
    let uniform = ProbeDistribution::Uniform.sample(&mut rng, 100_000);
    let hn = entropy::recommend_bits(&normal, DEFAULT_GRID_POINTS)
        .unwrap()
        .entropy_bits;
    let hu = entropy::recommend_bits(&uniform, DEFAULT_GRID_POINTS)
        .unwrap()
        .entropy_bits;
    let en = (hn - 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).log2()).abs();
    let eu = (hu - 1.0).abs();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        en <= 0.05 && eu <= 0.1 && secs < 30.0,
        format!("normal |err|={en:.4} (<=0.05), uniform |err|={eu:.4} (<=0.1), {secs:.2}s"),
    )
}

fn entropy_convergence() -> Outcome {
    let sizes = [100, 1_000, 10_000];
    let mut pass = true;
    let mut parts = Vec::new();
    for dist in [ProbeDistribution::Normal, ProbeDistribution::Uniform] {
        let errs = entropy::convergence_probe(dist, &sizes, 5, 3).unwrap();
        pass &= errs.windows(2).all(|w| w[1].1 < w[0].1);
        let e: Vec<String> = errs.iter().map(|(n, e)| format!("{n}:{e:.4}")).collect();
        parts.push(format!("{dist:?} [{}]", e.join(" ")));
    }
    outcome(pass, format!("mean |err| strictly decreasing: {}", parts.join(", ")))
}

fn bit_width_reproduction() -> Outcome {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/entropy_batches.bin");
    let t = FeatureTensor::from_fixture_bytes(&std::fs::read(path).unwrap()).unwrap();
    // Built as N(0, sigma^2) with sigma chosen so the true entropy is 1.82 bits.
    let sigma: f64 = 2f64.powf(1.82 - 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).log2());
    let truth = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * sigma * sigma).log2();
    let mut bits = Vec::new();
    let mut estimates = Vec::new();
    for row in t.data().chunks(t.last_dim()) {
        let r = entropy::recommend_bits(row, DEFAULT_GRID_POINTS).unwrap();
        bits.push(r.recommended_bits);
        estimates.push(format!("{:.3}", r.entropy_bits));
    }
    let pooled = entropy::recommend_bits(t.data(), DEFAULT_GRID_POINTS).unwrap();
    let pass = (1.79..=1.85).contains(&truth) && bits.iter().all(|&b| b == 2) && pooled.recommended_bits == 2;
    outcome(
        pass,
        format!(
            "true H={truth:.3}, batches H=[{}] -> bits {:?}, pooled -> {}",
            estimates.join(" "),
            bits,
            pooled.recommended_bits
        ),
    )
}

fn compression_rate() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = FeatureTensor::new(vec![729, 512], normal_vec(&mut rng, 729 * 512, 1.0)).unwrap();
    let raw = codec::fp16_bytes(x.len());
    let mut ratios = Vec::new();
    for bits in [2u8, 4] {
        let cfg = QuantizerConfig::new(1 << bits).unwrap();
        let q = quantizer::quantize(&x, &cfg).unwrap();
        let frame = WireFrame::Features(Features {
            request_id: 1,
            levels: cfg.levels() as u16,
            shape: vec![729, 512],
            packed: codec::pack(q.block.indices(), bits).unwrap(),
        });
        ratios.push(codec::measured_ratio(raw, codec::encode_frame(&frame).len()));
    }
    let n2 = codec::compression_rate(CompressionMethod::Discrete, 2, 512).unwrap();
    let n4 = codec::compression_rate(CompressionMethod::Discrete, 4, 512).unwrap();
    outcome(
        ratios[0] >= 7.9 && ratios[1] >= 3.95 && n2 == 8.0 && n4 == 4.0,
        format!(
            "729x512 wire ratio b=2 {:.4} (>=7.9), b=4 {:.4} (>=3.95), nominal {n2} and {n4}",
            ratios[0], ratios[1]
        ),
    )
}

fn ste_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut identity = [0.0, -0.0, 1e-300, -7.5, f64::MAX, f64::MIN_POSITIVE]
        .iter()
        .all(|&g| training::ste_round_backward(g).to_bits() == g.to_bits());
    for _ in 0..10_000 {
        let g: f64 = rng.random_range(-1e6..1e6);
        identity &= training::ste_round_backward(g).to_bits() == g.to_bits();
    }
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let model = SplitModel::random(&[4, 8, 3], &[3, 8, 4], Activation::Gelu, seed).unwrap();
        let data = Dataset::autoencoder(training::gaussian_mixture(32, seed)).unwrap();
        let q = QuantizerConfig::new(4).unwrap();
        let r = training::grad_check(&model, &data, &q, 0.25, TaskLoss::Mse, 1e-4).unwrap();
        worst = worst.max(r.max_rel_error);
    }
    outcome(
        identity && worst <= 1e-3,
        format!("backward is identity: {identity}, grad_check max rel err over 5 seeds {worst:.3e} (<=1e-3)"),
    )
}

fn training_viability() -> Outcome {
    let start = Instant::now();
    let seed = 0;
    let data = Dataset::autoencoder(training::gaussian_mixture(512, seed)).unwrap();
    let model = SplitModel::random(&[4, 16, 2], &[2, 16, 4], Activation::Gelu, seed).unwrap();
    let mut cfg = TrainConfig {
        learning_rate: 0.05,
        batch_size: 32,
        epochs: 50,
        alpha: 0.25,
        seed,
        quantizer: Some(QuantizerConfig::new(4).unwrap()),
        task: TaskLoss::Mse,
    };
    let quant = training::train(model.clone(), &data, &cfg).unwrap();
    cfg.quantizer = None;
    let plain = training::train(model, &data, &cfg).unwrap();
    let (first, last, reference) = (quant.initial().total, quant.last().total, plain.last().total);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        last < 0.5 * first && last <= 1.5 * reference && secs < 60.0,
        format!(
            "K=4 loss {first:.4} -> {last:.4} (ratio {:.3} < 0.5), unquantized {reference:.4} (quantized/unquantized {:.3} <= 1.5), {secs:.2}s",
            last / first,
            last / reference
        ),
    )
}

fn codebook_utilization() -> Outcome {
    // Large-magnitude heavy-tailed activations: Student-t with 3 degrees of
    // freedom, scaled by 30.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let t = StudentT::new(3.0).unwrap();
    let data: Vec<f64> = (0..10_000).map(|_| 30.0 * t.sample(&mut rng)).collect();
    let x = FeatureTensor::new(vec![data.len()], data).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for k in [4, 8] {
        let h = |scaling| {
            let cfg = QuantizerConfig::new(k).unwrap().with_scaling(scaling);
            quantizer::quantize(&x, &cfg).unwrap().block.index_entropy()
        };
        let (linear, tanh) = (h(Scaling::ClippedLinear), h(Scaling::Tanh));
        pass &= linear >= tanh;
        parts.push(format!("K={k} linear {linear:.3} vs tanh {tanh:.3} bits"));
    }
    outcome(pass, format!("Student-t(3)x30, 10^4 samples: {}", parts.join(", ")))
}

fn wire_robustness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let valid = codec::encode_frame(&WireFrame::Features(Features {
        request_id: 7,
        levels: 4,
        shape: vec![3, 5],
        packed: codec::pack(&[1; 15], 2).unwrap(),
    }));
    let fuzz = std::panic::catch_unwind(move || {
        let mut rejected = 0;
        for i in 0..10_000 {
            let bytes: Vec<u8> = if i % 2 == 0 {
                let n = rng.random_range(0..64);
                let mut b: Vec<u8> = (0..n).map(|_| rng.random()).collect();
                // Half of these carry a plausible header so body parsing is reached.
                if n >= 8 && i % 4 == 0 {
                    b[..2].copy_from_slice(&codec::MAGIC);
                    b[2] = codec::WIRE_VERSION;
                    b[3] = rng.random_range(1..=5);
                    b[4..8].copy_from_slice(&((n - 8) as u32).to_le_bytes());
                }
                b
            } else {
                let mut b = valid.clone();
                for _ in 0..rng.random_range(1..4) {
                    let at = rng.random_range(0..b.len());
                    b[at] = rng.random();
                }
                b.truncate(rng.random_range(0..=b.len()));
                b
            };
            rejected += codec::decode_frame(&bytes).is_err() as usize;
        }
        rejected
    });
    let fuzz_ok = fuzz.is_ok();

    let model = SplitModel::random(&[16, 12, 8], &[8, 12, 6], Activation::Gelu, 9).unwrap();
    let q = QuantizerConfig::new(4).unwrap();
    let addr = "127.0.0.1:0".parse().unwrap();
    let server = splitnet::serve(&SessionConfig::new(q, Transport::Tcp(addr)), model.decoder.clone()).unwrap();
    let mut tcp = Client::connect(SessionConfig::new(q, Transport::Tcp(server.local_addr()))).unwrap();
    let mut local = Client::loopback(SessionConfig::new(q, Transport::Loopback), model.decoder.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut identical = 0;
    for _ in 0..100 {
        let rows = rng.random_range(1..=8);
        let x = FeatureTensor::new(vec![rows, 16], normal_vec(&mut rng, rows * 16, 2.0)).unwrap();
        let (a, la) = tcp.infer(&x, &model.encoder).unwrap();
        let (b, lb) = local.infer(&x, &model.encoder).unwrap();
        let same = a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits());
        identical += (same && la == lb) as usize;
    }
    drop(tcp);
    let seen: HashSet<FrameType> = server.received_frame_types().into_iter().collect();
    let indices_only = seen.iter().all(|t| matches!(t, FrameType::Hello | FrameType::Features));
    server.shutdown();
    outcome(
        fuzz_ok && identical == 100 && indices_only,
        format!(
            "10^4 fuzzed frames without panic: {fuzz_ok} ({} rejected), loopback == TCP on {identical}/100 calls, server saw only {seen:?}",
            fuzz.unwrap_or(0)
        ),
    )
}

fn top_k_statistics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut exact = 0;
    for seed in 0..1_000u64 {
        let dims = rng.random_range(2..=256);
        let k = rng.random_range(1..=dims);
        let v = normal_vec(&mut rng, dims, 1.0);
        // Hand oracle: sort magnitudes, keep everything strictly above the
        // k-th largest, fill the rest from ties in index order.
        let mut mags: Vec<f64> = v.iter().map(|x| x.abs()).collect();
        mags.sort_by(|a, b| b.total_cmp(a));
        let kth = mags[k - 1];
        let above: Vec<usize> = (0..dims).filter(|&i| v[i].abs() > kth).collect();
        let ties = (0..dims).filter(|&i| v[i].abs() == kth).take(k - above.len());
        let mut expect: Vec<usize> = above.iter().copied().chain(ties).collect();
        expect.sort_unstable();
        let got: Vec<usize> = baseline::topk_sparsify(&v, k, 0.0, seed).unwrap().indices().collect();
        exact += (got == expect) as usize;
    }

    let (dims, k, eps, trials) = (512, 64, 0.1, 1_000u64);
    let mut outside = 0usize;
    for seed in 0..trials {
        let v = normal_vec(&mut rng, dims, 1.0);
        let top: HashSet<usize> = baseline::top_k_indices(&v, k).into_iter().collect();
        let s = baseline::topk_sparsify(&v, k, eps, seed).unwrap();
        outside += s.indices().filter(|i| !top.contains(i)).count();
    }
    let slots = (trials as usize * k) as f64;
    let frac = outside as f64 / slots;
    let se = (eps * (1.0 - eps) / slots).sqrt();
    let z = (frac - eps) / se;
    outcome(
        exact == 1_000 && z.abs() <= 3.0,
        format!("eps=0 exact on {exact}/1000 vectors, eps=0.1 non-top-k fraction {frac:.5} (z={z:.2}, |z|<=3)"),
    )
}

fn main() {
    let criteria: [(&str, Check); 10] = [
        ("quantizer round trip", quantizer_round_trip),
        ("entropy estimator accuracy", entropy_accuracy),
        ("entropy error shrinks with n", entropy_convergence),
        ("bit width from entropy", bit_width_reproduction),
        ("wire compression rate", compression_rate),
        ("straight-through gradients", ste_contract),
        ("training viability", training_viability),
        ("codebook utilization ordering", codebook_utilization),
        ("wire robustness", wire_robustness),
        ("top-k baseline statistics", top_k_statistics),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = match std::panic::catch_unwind(check) {
            Ok(o) => o,
            Err(_) => outcome(false, "panicked"),
        };
        failed += !o.pass as usize;
        println!(
            "criterion {:>2} {}: {name}: {}",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!("acceptance: {}/{} passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
