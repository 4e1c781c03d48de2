//! Acceptance run: prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use ecgsyn::classifier::{evaluate, train_classifier, Classifier, ClassifierConfig, ConfusionMatrix};
use ecgsyn::ddpm::{diffusion_loss, forward_diffuse, BackboneKind, Ddpm, DdpmConfig, Denoiser, NoiseSchedule};
use ecgsyn::dsp::{dft, frequency_transform, inverse_frequency_transform, istft, stft};
use ecgsyn::eval::*;
use ecgsyn::flow::{FlowConfig, FlowStack, FourierFlow};
use ecgsyn::generators::{train_generator, GeneratorSpec};
use ecgsyn::nn::{grad_check, Conv1d, Dense, Embedding, GradCheckOptions, Graph, LayerNorm, MultiHeadSelfAttention, ParamStore, Tensor, TransformerBlock, Var};
use ecgsyn::record::wfdb::{quantize, read_wfdb, write_wfdb};
use ecgsyn::record::*;
use ecgsyn::rng;
use ecgsyn::similarity::{mmd_rbf, mmd_rbf_vectors, two_sample_score};
use ecgsyn::synth::{sample_dataset, Generator, Normalizer};
use ecgsyn::vqvae::{Codebook, Stage1Batch, Vqvae, VqvaeConfig};
use ecgsyn::Result;
use rand::Rng;

const GRAD_TOL: f64 = 1e-5;
const GRAD_BUDGET_S: f64 = 120.0;
const STFT_TOL: f64 = 1e-6;
const FREQ_TOL: f64 = 1e-9;
const FLOW_TOL: f64 = 1e-6;
const DFT_TOL: f64 = 1e-10;
const MMD_TOL: f64 = 1e-9;
const CE_TOL: f64 = 1e-9;
const CHANCE: (f64, f64) = (0.4, 0.6);
const CHANCE_SEEDS_NEEDED: usize = 4;
const DIFFUSION_DRAWS: usize = 100_000;
const SIGMAS: f64 = 3.0;
const GEN_BUDGET_S: f64 = 15.0 * 60.0;
const MATRIX_BUDGET_S: f64 = 60.0 * 60.0;
const TRRTER_MIN_ACCURACY: f64 = 0.8;
const CONTROL_TOL: f64 = 0.1;
const GENERATORS: [&str; 3] = ["ddpm-unet", "vqvae", "fourier-flow"];

#[derive(Default)]
struct Outcome {
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Outcome {
    fn check(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.failures.push(what.into());
        }
    }

    fn note(&mut self, what: impl Into<String>) {
        self.notes.push(what.into());
    }

    /// Records an error from a step as a failure.
    fn step<T>(&mut self, what: &str, r: Result<T>) -> Option<T> {
        match r {
            Ok(v) => Some(v),
            Err(e) => {
                self.failures.push(format!("{what}: {e}"));
                None
            }
        }
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, rng::normals(&mut rng::stream(seed), n)).unwrap()
}

fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng::stream(seed);
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = r.random_range(-0.5..0.5);
        }
    }
}

/// `Σ y ⊙ r` for a fixed random `r`.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = g.input(random(g.shape(y), seed));
    let p = g.mul(y, r)?;
    Ok(g.sum_all(p))
}

fn fixture(per_class: usize, seed: u64) -> Dataset {
    generate_fixture_dataset(&FixtureSpec {
        per_class,
        seed,
        ..FixtureSpec::default()
    })
    .unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn gradient_integrity(o: &mut Outcome) {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut run = |o: &mut Outcome, name: &str, store: &mut ParamStore<f64>, f: &dyn Fn(&mut Graph<f64>) -> Result<Var>| {
        let opts = GradCheckOptions {
            tolerance: GRAD_TOL,
            ..GradCheckOptions::default()
        };
        if let Some(rep) = o.step(name, grad_check(store, f, opts)) {
            worst = worst.max(rep.max_rel_error);
            o.check(rep.passed() && rep.checked > 0, format!("{name}: max rel error {:.2e}", rep.max_rel_error));
        }
    };

    let mut r = rng::stream(1);
    let mut s = ParamStore::<f64>::new();
    let x = s.add("x", random(&[2, 3, 12], 2));
    let conv = Conv1d::new(&mut s, "conv", 3, 4, 3, &mut r);
    let strided = Conv1d::new(&mut s, "strided", 4, 2, 4, &mut r).with_stride(2);
    let dilated = Conv1d::new(&mut s, "dilated", 2, 2, 3, &mut r).with_dilation(2);
    run(o, "conv1d", &mut s, &|g| {
        let xv = g.param(x);
        let y = conv.forward(g, xv)?;
        let y = g.relu(y);
        let y = strided.forward(g, y)?;
        let y = dilated.forward(g, y)?;
        let y = g.max_pool1d(y, 2)?;
        probe(g, y, 3)
    });

    let mut s = ParamStore::<f64>::new();
    let x = s.add("x", random(&[3, 5], 4));
    let dense = Dense::new(&mut s, "dense", 5, 4, &mut r);
    run(o, "dense", &mut s, &|g| {
        let xv = g.param(x);
        let y = dense.forward(g, xv)?;
        let y = g.tanh(y);
        probe(g, y, 5)
    });

    let mut s = ParamStore::<f64>::new();
    let x = s.add("x", random(&[3, 6], 6));
    let ln = LayerNorm::new(&mut s, "ln", 6);
    randomize(&mut s, 7);
    run(o, "layer norm", &mut s, &|g| {
        let xv = g.param(x);
        let y = ln.forward(g, xv)?;
        probe(g, y, 8)
    });

    let mut s = ParamStore::<f64>::new();
    let emb = Embedding::new(&mut s, "emb", 5, 3, &mut r);
    run(o, "embedding", &mut s, &|g| {
        let y = emb.forward(g, &[0, 4, 4, 2])?;
        probe(g, y, 9)
    });

    let mut s = ParamStore::<f64>::new();
    let x = s.add("x", random(&[2, 3, 4], 10));
    let att = MultiHeadSelfAttention::new(&mut s, "att", 4, 2, &mut r).unwrap();
    run(o, "self-attention", &mut s, &|g| {
        let xv = g.param(x);
        let y = att.forward(g, xv)?;
        probe(g, y, 11)
    });

    let mut s = ParamStore::<f64>::new();
    let x = s.add("x", random(&[2, 3, 4], 12));
    let block = TransformerBlock::new(&mut s, "blk", 4, 2, 8, 0.0, &mut r).unwrap();
    run(o, "transformer block", &mut s, &|g| {
        let xv = g.param(x);
        let y = block.forward(g, xv)?;
        probe(g, y, 13)
    });

    let mut s = ParamStore::<f64>::new();
    let x = s.add("x", random(&[4, 7], 14));
    let y = s.add("y", random(&[4, 7], 15));
    run(o, "losses", &mut s, &|g| {
        let (xv, yv) = (g.param(x), g.param(y));
        let ce = g.cross_entropy(xv, &[0, 6, 3, 3])?;
        let m = g.mse(xv, yv)?;
        g.add(ce, m)
    });

    let cfg = ClassifierConfig {
        n_conv_blocks: 2,
        n_kernels: 3,
        kernel_len: 3,
        n_neurons: 5,
        n_dense_layers: 2,
        pool: 2,
        ..ClassifierConfig::desk()
    };
    let mut clf: Classifier<f64> = Classifier::new(&cfg, 2, 16, 3).unwrap();
    let xin = random(&[3, 2, 16], 16);
    let model = clf.clone();
    run(o, "classifier", &mut clf.store, &|g| {
        let xv = g.input(xin.clone());
        let y = model.forward(g, xv)?;
        g.cross_entropy(y, &[0, 3, 6])
    });

    for kind in [BackboneKind::Dilated, BackboneKind::Unet, BackboneKind::Decomposition] {
        let dcfg = DdpmConfig {
            diffusion_steps: 10,
            beta_end: 0.3,
            channels: 4,
            layers: 2,
            d_label: 6,
            d_time: 6,
            poly_degree: 2,
            harmonics: 2,
            ..DdpmConfig::quick(kind)
        };
        let mut m: Ddpm<f64> = Ddpm::new(&dcfg, 2, 16, Normalizer::identity(2), 1).unwrap();
        randomize(&mut m.store, 2);
        let x0 = random(&[3, 2, 16], 17);
        let eps = random(&[3, 2, 16], 18);
        let model = m.clone();
        run(o, &format!("ddpm {}", kind.tag()), &mut m.store, &|g| {
            diffusion_loss(g, model.denoiser(), &model.schedule, &x0, &eps, &[2, 5, 9], &[0, 3, 6])
        });
    }

    let vcfg = VqvaeConfig {
        hidden: 4,
        code_dim: 3,
        codebook_size: 4,
        prior_dim: 8,
        prior_heads: 2,
        prior_hidden: 8,
        prior_layers: 1,
        prior_dropout: 0.0,
        ..VqvaeConfig::quick()
    };
    let mut vq: Vqvae<f64> = Vqvae::new(&vcfg, 2, 64, Normalizer::identity(2), 1).unwrap();
    randomize(&mut vq.store, 19);
    let rows: Vec<Vec<f64>> = (0..2).map(|i| rng::normals(&mut rng::stream(20 + i), 128)).collect();
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let batch = Stage1Batch::new(&vq.geometry, &refs).unwrap();
    let model = vq.clone();
    run(o, "vq-vae stage 1", &mut vq.store, &|g| Ok(model.stage1_pass(g, &batch, false)?.loss));

    let mut flow: FlowStack<f64> = FlowStack::new(8, 1, 6, 5.0, 21).unwrap();
    randomize(&mut flow.store, 22);
    let frows: Vec<Vec<f64>> = (0..3).map(|i| rng::normals(&mut rng::stream(30 + i), 8)).collect();
    let model = flow.clone();
    run(o, "coupling layer", &mut flow.store, &|g| model.nll_graph(g, &frows));

    let elapsed = start.elapsed().as_secs_f64();
    o.check(elapsed < GRAD_BUDGET_S, format!("gradient checks took {elapsed:.1}s"));
    o.note(format!("worst rel error {worst:.2e} < {GRAD_TOL:e}, {elapsed:.1}s < {GRAD_BUDGET_S}s"));
}

fn round_trips(o: &mut Outcome) {
    let tmp = tempfile::tempdir().unwrap();
    let ds = fixture(1, 3);
    let gain = 1000.0;
    for rec in ds.records() {
        let q = rec.signal.map(|v| quantize(v, gain)).unwrap();
        let rec = EcgRecord::new(q, rec.fs, rec.label, rec.record_id.clone(), Source::Fixture).unwrap();
        let Some((hea, dat)) = o.step("write wfdb", write_wfdb(&rec, gain, tmp.path())) else { continue };
        let Some(back) = o.step("read wfdb", read_wfdb(&hea)) else { continue };
        let same = back.signal.as_slice().iter().zip(rec.signal.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
        o.check(same && back.fs == rec.fs, format!("wfdb {} not bit-exact", rec.record_id));
        let dat_bytes = std::fs::read(&dat).unwrap();
        let again = tmp.path().join("again");
        if let Some((_, dat2)) = o.step("rewrite wfdb", write_wfdb(&back, gain, &again)) {
            o.check(std::fs::read(dat2).unwrap() == dat_bytes, "wfdb rewrite changed bytes");
        }
    }

    let mut worst_stft: f64 = 0.0;
    for (len, n_fft, hop) in [(500, 64, 16), (1000, 128, 32), (257, 32, 8)] {
        let x = rng::normals(&mut rng::stream(len as u64), len);
        if let Some(s) = o.step("stft", stft(&x, n_fft, hop)) {
            if let Some(y) = o.step("istft", istft(&s, hop, len)) {
                worst_stft = worst_stft.max(max_abs_diff(&x, &y));
            }
        }
    }
    o.check(worst_stft < STFT_TOL, format!("stft/istft error {worst_stft:.2e}"));

    let mut worst_freq: f64 = 0.0;
    for (t, n) in [(15, 16), (16, 16), (64, 64), (1000, 1000), (1000, 1024)] {
        let x = rng::normals(&mut rng::stream(t as u64 + 7), t);
        if let Some(v) = o.step("frequency transform", frequency_transform(&x, n)) {
            worst_freq = worst_freq.max(max_abs_diff(&x, &inverse_frequency_transform(&v)));
        }
    }
    o.check(worst_freq < FREQ_TOL, format!("frequency transform inverse error {worst_freq:.2e}"));

    let mut worst_flow: f64 = 0.0;
    for seed in 0..5 {
        let mut f: FlowStack<f64> = FlowStack::new(16, 6, 8, 5.0, seed).unwrap();
        randomize(&mut f.store, seed + 50);
        let mut r = rng::stream(seed);
        f.mean = (0..16).map(|_| r.random_range(-1.0..1.0)).collect();
        f.std = (0..16).map(|_| r.random_range(0.2..3.0)).collect();
        let x: Vec<Vec<f64>> = (0..4).map(|_| rng::normals(&mut r, 16)).collect();
        let (z, _) = f.forward(&x).unwrap();
        let fg = f.inverse(&z).unwrap();
        let (gf, _) = f.forward(&f.inverse(&x).unwrap()).unwrap();
        for (a, (b, c)) in x.iter().zip(fg.iter().zip(&gf)) {
            worst_flow = worst_flow.max(max_abs_diff(a, b)).max(max_abs_diff(a, c));
        }
    }
    o.check(worst_flow < FLOW_TOL, format!("flow inverse error {worst_flow:.2e}"));

    let clf: Classifier = Classifier::new(&ClassifierConfig::desk(), 2, 100, 1).unwrap();
    let bytes = clf.to_bytes();
    let back = Classifier::<f32>::from_bytes(&bytes).unwrap();
    o.check(back.to_bytes() == bytes && back.store == clf.store, "classifier checkpoint");
    for kind in [BackboneKind::Dilated, BackboneKind::Unet, BackboneKind::Decomposition] {
        let m: Ddpm<f32> = Ddpm::new(&DdpmConfig::quick(kind), 2, 64, Normalizer::identity(2), 2).unwrap();
        let bytes = m.checkpoint_bytes();
        let back = Ddpm::<f32>::from_bytes(&bytes).unwrap();
        o.check(back.checkpoint_bytes() == bytes && back.store == m.store, format!("ddpm {} checkpoint", kind.tag()));
    }
    let v: Vqvae<f32> = Vqvae::new(&VqvaeConfig::quick(), 2, 200, Normalizer::identity(2), 3).unwrap();
    let bytes = v.checkpoint_bytes();
    let back = Vqvae::<f32>::from_bytes(&bytes).unwrap();
    o.check(back.checkpoint_bytes() == bytes && back.store == v.store, "vq-vae checkpoint");
    let f: FourierFlow<f32> = FourierFlow::new(&FlowConfig::default(), 2, 64, Normalizer::identity(2), 4).unwrap();
    let bytes = f.checkpoint_bytes();
    let back = FourierFlow::<f32>::from_bytes(&bytes).unwrap();
    o.check(back.checkpoint_bytes() == bytes, "flow checkpoint");
    o.note(format!(
        "stft {worst_stft:.1e} < {STFT_TOL:e}, freq {worst_freq:.1e} < {FREQ_TOL:e}, flow {worst_flow:.1e} < {FLOW_TOL:e}, wfdb and checkpoints bit-exact"
    ));
}

fn naive_dft(x: &[f64]) -> Vec<(f64, f64)> {
    let n = x.len() as f64;
    (0..x.len())
        .map(|k| {
            x.iter().enumerate().fold((0.0, 0.0), |(re, im), (t, v)| {
                let a = -2.0 * PI * (k * t) as f64 / n;
                (re + v * a.cos(), im + v * a.sin())
            })
        })
        .collect()
}

fn triple_sum_mmd(x: &[Vec<f64>], y: &[Vec<f64>], sigma: f64) -> f64 {
    let k = |a: &Vec<f64>, b: &Vec<f64>| {
        let d: f64 = a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum();
        (-d / (2.0 * sigma * sigma)).exp()
    };
    let mean = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        let mut s = 0.0;
        for p in a {
            for q in b {
                s += k(p, q);
            }
        }
        s / (a.len() * b.len()) as f64
    };
    mean(x, x) + mean(y, y) - 2.0 * mean(x, y)
}

fn oracle_equivalences(o: &mut Outcome) {
    let mut worst_dft: f64 = 0.0;
    for n in 1..=16 {
        let x = rng::normals(&mut rng::stream(n as u64), n);
        let fast = dft(&x);
        for (a, (re, im)) in fast.iter().zip(naive_dft(&x)) {
            worst_dft = worst_dft.max((a.re - re).abs()).max((a.im - im).abs());
        }
    }
    o.check(worst_dft < DFT_TOL, format!("dft vs naive {worst_dft:.2e}"));

    let mut vq_mismatch = 0;
    for (k, dim, seed) in [(2, 1, 0), (7, 3, 1), (16, 4, 2), (64, 8, 3), (64, 2, 4)] {
        let mut r = rng::stream(seed);
        let book = Codebook::new(rng::normals(&mut r, k * dim), k, dim).unwrap();
        let z = rng::normals(&mut r, 50 * dim);
        let (zq, idx) = book.quantize(&z).unwrap();
        for (i, row) in z.chunks(dim).enumerate() {
            let mut best = (0, f64::INFINITY);
            for c in 0..k {
                let d: f64 = row.iter().zip(&book.vectors[c * dim..(c + 1) * dim]).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best.1 {
                    best = (c, d);
                }
            }
            if idx[i] != best.0 || zq[i * dim..(i + 1) * dim] != book.vectors[best.0 * dim..(best.0 + 1) * dim] {
                vq_mismatch += 1;
            }
        }
    }
    o.check(vq_mismatch == 0, format!("{vq_mismatch} quantizations differ from brute force"));

    let mut worst_mmd: f64 = 0.0;
    for (n, m, seed) in [(1, 1, 0), (5, 9, 1), (20, 20, 2), (13, 4, 3)] {
        let mut r = rng::stream(seed);
        let x: Vec<Vec<f64>> = (0..n).map(|_| rng::normals(&mut r, 6)).collect();
        let y: Vec<Vec<f64>> = (0..m).map(|_| rng::normals(&mut r, 6).iter().map(|v| v + 0.5).collect()).collect();
        for sigma in [0.5, 1.0, 3.0] {
            if let Some(res) = o.step("mmd", mmd_rbf_vectors(&x, &y, Some(sigma))) {
                worst_mmd = worst_mmd.max((res.value - triple_sum_mmd(&x, &y, sigma).max(0.0)).abs());
            }
        }
    }
    o.check(worst_mmd < MMD_TOL, format!("mmd vs triple sum {worst_mmd:.2e}"));

    let mut f1_mismatch = 0;
    for seed in 0..20u64 {
        let mut r = rng::stream(seed);
        let n = 30 + seed as usize;
        let truth: Vec<usize> = (0..n).map(|_| r.random_range(0..7)).collect();
        let pred: Vec<usize> = truth.iter().map(|&t| if r.random_bool(0.6) { t } else { r.random_range(0..7) }).collect();
        let mut hand = 0.0;
        for c in 0..7 {
            let tp = truth.iter().zip(&pred).filter(|(t, p)| **t == c && **p == c).count() as f64;
            let fp = truth.iter().zip(&pred).filter(|(t, p)| **t != c && **p == c).count() as f64;
            let fneg = truth.iter().zip(&pred).filter(|(t, p)| **t == c && **p != c).count() as f64;
            let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let recall = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
            hand += if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        }
        let hand = hand / 7.0;
        let f1 = ConfusionMatrix::from_predictions(&truth, &pred, 7).macro_prf().2;
        if f1 != hand {
            f1_mismatch += 1;
        }
    }
    o.check(f1_mismatch == 0, format!("{f1_mismatch} macro-F1 values differ from hand computation"));
    o.note(format!("dft {worst_dft:.1e} < {DFT_TOL:e}, mmd {worst_mmd:.1e} < {MMD_TOL:e}, vq and macro-F1 exact"));
}

fn statistical_identities(o: &mut Outcome) {
    let x = fixture(3, 1);
    if let Some(r) = o.step("mmd(X, X)", mmd_rbf(&x, &x, None)) {
        o.check(r.value == 0.0, format!("mmd(X, X) = {:e}", r.value));
    }

    let mut accs = Vec::new();
    for seed in 0..5 {
        let a = fixture(40, 100 + seed);
        let b = fixture(40, 200 + seed);
        if let Some(r) = o.step("two-sample score", two_sample_score(&a, &b, &ClassifierConfig::two_sample(), seed)) {
            accs.push(r.accuracy);
        }
    }
    let near = accs.iter().filter(|a| (CHANCE.0..=CHANCE.1).contains(*a)).count();
    o.check(
        near >= CHANCE_SEEDS_NEEDED,
        format!("two-sample accuracy in [{}, {}] for {near}/5 seeds: {accs:.3?}", CHANCE.0, CHANCE.1),
    );

    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store, false, 0);
    let l = g.input(Tensor::full(&[5, 7], -1.7));
    let ce = g.cross_entropy(l, &[0, 1, 2, 5, 6]).unwrap();
    let err = (g.value(ce).item() - 7f64.ln()).abs();
    o.check(err <= CE_TOL, format!("uniform cross-entropy off ln 7 by {err:e}"));
    o.note(format!("two-sample accuracies {accs:.3?}, CE error {err:.1e}"));
}

struct InjectedNoise(Tensor<f64>);

impl Denoiser<f64> for InjectedNoise {
    fn predict_noise(&self, g: &mut Graph<f64>, _x: Var, _t: &[usize], _l: &[usize]) -> Result<Var> {
        Ok(g.input(self.0.clone()))
    }
}

fn diffusion_correctness(o: &mut Outcome) {
    let s = NoiseSchedule::from_betas(vec![0.1, 0.2, 0.05, 0.3, 0.15]).unwrap();
    let (x0, t) = (1.3, 4);
    let mut r = rng::stream(12);
    let (mut step_sum, mut step_sq, mut closed_sum, mut closed_sq) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..DIFFUSION_DRAWS {
        let mut x = x0;
        for k in 1..=t {
            x = (1.0 - s.beta(k)).sqrt() * x + s.beta(k).sqrt() * rng::normal(&mut r);
        }
        step_sum += x;
        step_sq += x * x;
        let c = forward_diffuse(&[x0], t, &s, 1_000_000 + i as u64).unwrap()[0];
        closed_sum += c;
        closed_sq += c * c;
    }
    let ab: f64 = (1..=t).map(|k| 1.0 - s.beta(k)).product();
    let (mean, var) = (ab.sqrt() * x0, 1.0 - ab);
    let n = DIFFUSION_DRAWS as f64;
    for (name, sum, sq) in [("stepwise", step_sum, step_sq), ("closed form", closed_sum, closed_sq)] {
        let m = sum / n;
        let v = sq / n - m * m;
        o.check((m - mean).abs() < SIGMAS * (var / n).sqrt(), format!("{name} mean {m} vs {mean}"));
        o.check(
            (v - var).abs() < SIGMAS * var * (2.0 / (n - 1.0)).sqrt(),
            format!("{name} variance {v} vs {var}"),
        );
    }

    let sched = NoiseSchedule::linear(20, 1e-4, 0.02).unwrap();
    let store = ParamStore::new();
    let x0 = random(&[4, 1, 30], 1);
    let eps = random(&[4, 1, 30], 2);
    let mut g = Graph::new(&store, false, 0);
    if let Some(l) = o.step(
        "oracle loss",
        diffusion_loss(&mut g, &InjectedNoise(eps.clone()), &sched, &x0, &eps, &[1, 5, 12, 20], &[0; 4]),
    ) {
        o.check(g.value(l).item() == 0.0, format!("oracle denoiser loss {}", g.value(l).item()));
    }

    for cfg in [
        DdpmConfig::standard(BackboneKind::Dilated),
        DdpmConfig::quick(BackboneKind::Unet),
    ] {
        let sched = cfg.schedule().unwrap();
        let abs: Vec<f64> = (0..=sched.steps()).map(|t| sched.alpha_bar(t)).collect();
        o.check(abs.windows(2).all(|w| w[1] < w[0]), format!("alpha bar not strictly decreasing over {} steps", sched.steps()));
    }
    o.note(format!("{DIFFUSION_DRAWS} draws within {SIGMAS} sigma, oracle loss 0, alpha bar decreasing"));
}

struct Trained {
    real: RealSplits,
    generators: Vec<Box<dyn Generator>>,
    report: Option<EvalReport>,
}

fn desk_fixture() -> Dataset {
    generate_fixture_dataset(&FixtureSpec {
        per_class: 40,
        fs: 100.0,
        seconds: 10.0,
        leads: 2,
        seed: 2024,
        ..FixtureSpec::default()
    })
    .unwrap()
}

fn end_to_end(o: &mut Outcome, state: &mut Option<Trained>) {
    let real = RealSplits::new(&desk_fixture(), &SplitSpec::with_seed(7)).unwrap();
    let mut generators: Vec<Box<dyn Generator>> = Vec::new();
    let mut times = Vec::new();
    for kind in GENERATORS {
        let spec = GeneratorSpec::from_kind(kind, true).unwrap();
        if let Some((g, wall)) = o.step(&format!("train {kind}"), train_generator(&spec, &real.train, 11)) {
            o.check(wall <= GEN_BUDGET_S, format!("{kind} trained in {wall:.0}s"));
            times.push(format!("{kind} {wall:.0}s"));
            generators.push(g);
        }
    }

    let mut order = rng::permutation(&mut rng::stream(5), real.train.len());
    order.truncate(50);
    let subset = Dataset::new(order.iter().map(|&i| real.train.records()[i].clone()).collect()).unwrap();
    let overfit = ClassifierConfig {
        dropout: 0.0,
        patience: 40,
        max_epochs: 150,
        ..ClassifierConfig::desk()
    };
    let mut clf = Classifier::<f32>::new(&overfit, 2, 1000, 3).unwrap();
    let mut train_acc = f64::NAN;
    if o.step("overfit training", train_classifier(&mut clf, &subset, &subset, 3)).is_some() {
        if let Some(m) = o.step("overfit evaluation", evaluate(&clf, &subset)) {
            train_acc = m.accuracy;
            o.check(m.accuracy == 1.0, format!("50-record train accuracy {:.3}", m.accuracy));
        }
    }

    let mut report = None;
    if generators.len() == GENERATORS.len() {
        let cfg = MatrixConfig {
            n_repeats: 3,
            seed: 13,
            ..MatrixConfig::default()
        };
        let refs: Vec<&dyn Generator> = generators.iter().map(|g| g.as_ref()).collect();
        let start = Instant::now();
        if let Some(rep) = o.step("eval matrix", run_matrix(&refs, &real, &cfg)) {
            let elapsed = start.elapsed().as_secs_f64();
            o.check(elapsed <= MATRIX_BUDGET_S, format!("matrix took {elapsed:.0}s"));
            o.check(!rep.partial(), format!("{} matrix cells failed", rep.failures.len()));
            o.check(rep.rows.len() == 4 * 5 * 3, format!("{} matrix rows", rep.rows.len()));
            let bad: Vec<_> = rep
                .rows
                .iter()
                .filter(|r| r.metrics.values().iter().any(|v| !(0.0..=1.0).contains(v)))
                .map(|r| format!("{}/{}/{}", r.generator, r.setting, r.repeat))
                .collect();
            o.check(bad.is_empty(), format!("metrics outside [0, 1]: {bad:?}"));
            let trrter: Vec<f64> = rep.rows.iter().filter(|r| r.setting == Setting::TrRTeR).map(|r| r.metrics.accuracy).collect();
            let acc = trrter.iter().sum::<f64>() / trrter.len().max(1) as f64;
            o.check(acc >= TRRTER_MIN_ACCURACY, format!("TrRTeR accuracy {acc:.3}"));
            println!("{}", render_tables("desk fixture", &rep));
            o.note(format!("TrRTeR {acc:.3} >= {TRRTER_MIN_ACCURACY}, matrix {elapsed:.0}s"));
            report = Some(rep);
        }
    } else {
        o.check(false, "matrix skipped: not every generator trained");
    }
    o.note(format!("{}; overfit accuracy {train_acc:.3}", times.join(", ")));
    *state = Some(Trained {
        real,
        generators,
        report,
    });
}

fn protocol_contracts(o: &mut Outcome, state: &Option<Trained>) {
    let Some(t) = state else {
        o.check(false, "no trained generators");
        return;
    };
    let real = &t.real;
    let budget = real.train.class_counts().clone();
    let fs = real.train.fs().unwrap();
    let n_budget: usize = budget.values().sum();

    match &t.report {
        Some(rep) => {
            for r in rep.rows.iter().filter(|r| r.setting == Setting::TrRSTeR) {
                let n_synth = if r.generator == "all" { n_budget * t.generators.len() } else { n_budget };
                o.check(
                    r.train_size == real.train.len() + n_synth,
                    format!("{} TrRSTeR train size {} != {} + {n_synth}", r.generator, r.train_size, real.train.len()),
                );
            }
            o.check(rep.failures.iter().all(|f| !f.error.contains("also used for training")), "matrix reported overlap");
        }
        None => o.check(false, "no matrix report"),
    }

    let spec = SplitSpec::with_seed(3);
    let mut sources = Vec::new();
    for g in &t.generators {
        if let Some(ds) = o.step("sample", sample_dataset(g.as_ref(), &budget, fs, 21)) {
            if let Some(s) = o.step("synthetic split", SynthSource::new(g.name(), &ds, &spec)) {
                sources.push(s);
            }
        }
    }
    if let Some(all) = o.step("merge", SynthSource::merge("all", &sources, &spec)) {
        sources.push(all);
    }
    let mut cells = 0;
    for s in &sources {
        for setting in Setting::ALL {
            if let Some(data) = o.step("setting data", setting_data(setting, real, Some(s))) {
                let shared = overlapping_ids(&data);
                o.check(shared.is_empty(), format!("{} {setting}: {} shared ids", s.name, shared.len()));
                if setting == Setting::TrRSTeR {
                    o.check(data.train.len() == real.train.len() + s.all.len(), format!("{} TrRSTeR size", s.name));
                }
                cells += 1;
            }
        }
    }

    let Some(source) = sources.iter().find(|s| s.name == "vqvae") else {
        o.check(false, "no vq-vae source for transfer");
        return;
    };
    let Some(pretrained) = o.step("pretrain", pretrain_on_source(source, &ClassifierConfig::desk(), 5)) else { return };
    let Some(rep) = o.step("transfer", run_transfer(&pretrained, real, &TransferPlan::default(), 9)) else { return };
    o.check(rep.frozen_intact(), "frozen parameters changed");
    let mut ratios = Vec::new();
    for (f, ft, base) in rep.aggregates() {
        o.check(
            ft.wall_time_s < base.wall_time_s,
            format!("fraction {f}: fine-tune {:.2}s vs fresh {:.2}s", ft.wall_time_s, base.wall_time_s),
        );
        ratios.push(format!("{:.0}%: {:.1}s/{:.1}s", f * 100.0, ft.wall_time_s, base.wall_time_s));
    }
    println!("{}", rep.render("transfer from vqvae samples"));
    o.note(format!("{cells} cells disjoint; fine-tune/fresh {}", ratios.join(", ")));
}

fn same_distribution_control(o: &mut Outcome) {
    let mut rr = Vec::new();
    let mut ss = Vec::new();
    for seed in 0..5u64 {
        let real = RealSplits::new(&fixture(40, 3000 + seed), &SplitSpec::with_seed(seed)).unwrap();
        let held_out = fixture(40, 4000 + seed);
        let cfg = MatrixConfig {
            n_repeats: 1,
            seed,
            settings: vec![Setting::TrRTeR, Setting::TrSTeS],
            include_all: false,
            ..MatrixConfig::default()
        };
        if let Some(rep) = o.step("control matrix", run_matrix_on(&[("held-out".into(), held_out)], &real, &cfg)) {
            o.check(!rep.partial(), "control cell failed");
            if let (Some(a), Some(b)) = (rep.aggregate("held-out", Setting::TrRTeR), rep.aggregate("held-out", Setting::TrSTeS)) {
                rr.push(a);
                ss.push(b);
            }
        }
    }
    if rr.is_empty() {
        return;
    }
    let mean = |v: &[ecgsyn::classifier::MetricsReport], i: usize| v.iter().map(|m| m.values()[i]).sum::<f64>() / v.len() as f64;
    let names = ["accuracy", "precision", "recall", "f1", "roc_auc"];
    let mut diffs = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let (a, b) = (mean(&rr, i), mean(&ss, i));
        o.check((a - b).abs() <= CONTROL_TOL, format!("{name}: TrRTeR {a:.3} vs TrSTeS {b:.3}"));
        diffs.push(format!("{name} {a:.3}/{b:.3}"));
    }
    o.note(format!("TrRTeR/TrSTeS over 5 seeds: {}", diffs.join(", ")));
}

fn run(i: usize, name: &'static str, f: impl FnOnce(&mut Outcome)) -> (usize, &'static str, f64, Outcome) {
    let start = Instant::now();
    let mut o = Outcome::default();
    if let Err(p) = catch_unwind(AssertUnwindSafe(|| f(&mut o))) {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        o.failures.push(format!("panicked: {msg}"));
    }
    let secs = start.elapsed().as_secs_f64();
    let verdict = if o.failures.is_empty() { "PASS" } else { "FAIL" };
    eprintln!("criterion {i} {name}: {verdict} ({secs:.1}s) {}", o.failures.join("; "));
    (i, name, secs, o)
}

fn main() {
    let _ = env_logger::builder().filter_level(log::LevelFilter::Warn).try_init();
    let mut state: Option<Trained> = None;
    let results = vec![
        run(1, "gradient integrity", gradient_integrity),
        run(2, "round trips", round_trips),
        run(3, "oracle equivalences", oracle_equivalences),
        run(4, "statistical identities", statistical_identities),
        run(5, "diffusion correctness", diffusion_correctness),
        run(6, "end-to-end desk pipeline", |o| end_to_end(o, &mut state)),
        run(7, "protocol contracts", |o| protocol_contracts(o, &state)),
        run(8, "same-distribution control", same_distribution_control),
    ];

    println!();
    let mut failed = 0;
    for (i, name, secs, o) in &results {
        let verdict = if o.failures.is_empty() { "PASS" } else { "FAIL" };
        let detail = if o.failures.is_empty() { o.notes.join("; ") } else { o.failures.join("; ") };
        println!("criterion {i} {name:<26} {verdict} ({secs:.1}s) {detail}");
        if !o.failures.is_empty() {
            failed += 1;
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
