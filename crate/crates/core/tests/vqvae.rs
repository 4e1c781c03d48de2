use ecgsyn::dsp::{stft, IstftPlan};
use ecgsyn::error::Error;
use ecgsyn::nn::{grad_check, GradCheckOptions, Graph, ParamStore};
use ecgsyn::record::*;
use ecgsyn::rng;
use ecgsyn::synth::{Generator, Normalizer};
use ecgsyn::vqvae::*;
use proptest::prelude::*;
use rand::Rng;

fn tiny() -> VqvaeConfig {
    VqvaeConfig {
        hidden: 4,
        code_dim: 3,
        codebook_size: 4,
        prior_dim: 8,
        prior_heads: 2,
        prior_hidden: 8,
        prior_layers: 1,
        prior_dropout: 0.0,
        decode_steps: 4,
        batch_size: 4,
        stage1_steps: 10,
        stage2_steps: 10,
        ..VqvaeConfig::quick()
    }
}

fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng::stream(seed);
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = r.random_range(-0.5..0.5);
        }
    }
}

fn noise_rows(n: usize, len: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed);
    (0..n).map(|_| rng::normals(&mut r, len)).collect()
}

fn refs(rows: &[Vec<f64>]) -> Vec<&[f64]> {
    rows.iter().map(Vec::as_slice).collect()
}

#[test]
fn grid_widths_follow_downsampling_rates() {
    // 504 samples at hop 8 gives 64 frames.
    let m: Vqvae<f32> = Vqvae::new(&VqvaeConfig::quick(), 1, 504, Normalizer::identity(1), 0).unwrap();
    assert_eq!(m.geometry.frames, 64);
    assert_eq!(m.grid_widths(), [16, 32]);
}

#[test]
fn stage1_gradients_match_finite_differences() {
    let mut m: Vqvae<f64> = Vqvae::new(&tiny(), 2, 64, Normalizer::identity(2), 1).unwrap();
    randomize(&mut m.store, 2);
    let rows = noise_rows(2, 128, 3);
    let batch = Stage1Batch::new(&m.geometry, &refs(&rows)).unwrap();
    let model = m.clone();
    let report = grad_check(
        &mut m.store,
        |g| Ok(model.stage1_pass(g, &batch, false)?.loss),
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
    assert!(report.checked > 100);
}

#[test]
fn straight_through_passes_gradient_unchanged() {
    // With the batch latents loaded as codes, z_q = z exactly, so the
    // quantized pass must reproduce the bypass gradients bit for bit.
    let cfg = VqvaeConfig {
        commitment: 0.0,
        codebook_size: 16,
        ..tiny()
    };
    let mut m: Vqvae<f64> = Vqvae::new(&cfg, 1, 64, Normalizer::identity(1), 4).unwrap();
    randomize(&mut m.store, 5);
    let rows = noise_rows(2, 64, 6);
    let batch = Stage1Batch::new(&m.geometry, &refs(&rows)).unwrap();
    let grads = |m: &Vqvae<f64>, quantize: bool| {
        let mut g = Graph::new(&m.store, false, 0);
        let pass = m.stage1_pass(&mut g, &batch, quantize).unwrap();
        let grads = g.backward(pass.loss);
        let mut out: Vec<_> = grads.param_grads().map(|(id, t)| (id, t.to_f64())).collect();
        out.sort_by_key(|(id, _)| *id);
        (out, pass.latents)
    };
    let (bypass, latents) = grads(&m, false);
    for (name, z) in [("codebook_lf", &latents[0]), ("codebook_hf", &latents[1])] {
        let mut book = vec![1e3; 16 * 3];
        book[..z.len()].copy_from_slice(z);
        let id = m.store.find(name).unwrap();
        m.store.get_mut(id).value = ecgsyn::nn::Tensor::from_f64(&[16, 3], &book).unwrap();
    }
    let (quantized, _) = grads(&m, true);
    assert_eq!(bypass, quantized);
    let enc = m.store.find("enc_lf.out.w").unwrap();
    assert!(quantized.iter().any(|(id, t)| *id == enc && t.iter().any(|v| *v != 0.0)));
}

#[test]
fn branch_reconstructions_add_to_full_spectrum_synthesis() {
    let m: Vqvae<f64> = Vqvae::new(&tiny(), 2, 64, Normalizer::identity(2), 7).unwrap();
    let mut r = rng::stream(8);
    let tokens = [vec![(0..3).map(|_| r.random_range(0..4)).collect::<Vec<_>>()], vec![(0..5).map(|_| r.random_range(0..4)).collect()]];
    let planes = m.decode_planes(&tokens).unwrap();
    let summed = &m.decode_tokens(&tokens).unwrap()[0];
    let g = &m.geometry;
    let (bins, frames) = (g.bins(), g.frames);
    let plan = IstftPlan::new(g.n_fft, g.hop, frames, g.length).unwrap();
    for lead in 0..2 {
        let mut re = vec![0.0; bins * frames];
        let mut im = vec![0.0; bins * frames];
        for (kind, p) in [(BranchKind::Lf, &planes[0][0]), (BranchKind::Hf, &planes[1][0])] {
            let range = g.branch_bins(kind);
            let nb = range.len();
            for (part, dst) in [&mut re, &mut im].into_iter().enumerate() {
                for (j, k) in range.clone().enumerate() {
                    let src = ((lead * 2 + part) * nb + j) * frames;
                    dst[k * frames..(k + 1) * frames].copy_from_slice(&p[src..src + frames]);
                }
            }
        }
        let full = plan.synthesize(&re, &im);
        let err = full.iter().zip(&summed[lead * 64..(lead + 1) * 64]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "lead {lead}: {err}");
    }
}

#[test]
fn spectral_planes_split_the_spectrogram() {
    let g = Geometry::new(1, 64, 16, 8, 2).unwrap();
    let x = noise_rows(1, 64, 9).remove(0);
    let (lf, hf) = g.spectral_planes(&x).unwrap();
    let s = stft(&x, 16, 8).unwrap();
    assert_eq!(lf.len(), 2 * 2 * g.frames);
    assert_eq!(hf.len(), 2 * 7 * g.frames);
    assert_eq!(&lf[g.frames..2 * g.frames], &s.re[g.frames..2 * g.frames]);
    assert_eq!(&hf[..g.frames], &s.re[2 * g.frames..3 * g.frames]);
    let rec: Vec<f64> = g
        .synthesize(BranchKind::Lf, &lf)
        .iter()
        .zip(g.synthesize(BranchKind::Hf, &hf))
        .map(|(a, b)| a + b)
        .collect();
    let err = rec.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-9, "{err}");
}

#[test]
fn stage2_requires_frozen_stage1_and_leaves_it_untouched() {
    let mut m: Vqvae<f32> = Vqvae::new(&tiny(), 1, 64, Normalizer::identity(1), 10).unwrap();
    let rows = noise_rows(8, 64, 11);
    let labels = vec![0, 1, 2, 3, 0, 1, 2, 3];
    m.train_stage1(&refs(&rows), 0).unwrap();
    let corpus = m.token_corpus(&refs(&rows), &labels).unwrap();
    assert!(matches!(m.train_stage2(&corpus, 0), Err(Error::State(_))));
    m.freeze_stage1();
    assert!(matches!(m.train_stage1(&refs(&rows), 0), Err(Error::State(_))));
    let before: Vec<_> = m.store.iter().filter(|p| !p.name.starts_with("prior")).cloned().collect();
    let prior_before: Vec<_> = m.store.iter().filter(|p| p.name.starts_with("prior")).map(|p| p.value.clone()).collect();
    m.train_stage2(&corpus, 0).unwrap();
    let after: Vec<_> = m.store.iter().filter(|p| !p.name.starts_with("prior")).cloned().collect();
    assert_eq!(before.len(), after.len());
    for (a, b) in before.iter().zip(&after) {
        assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
    }
    let prior_after: Vec<_> = m.store.iter().filter(|p| p.name.starts_with("prior")).map(|p| p.value.clone()).collect();
    assert_ne!(prior_before, prior_after);
}

fn token_corpus(k: usize, n: usize, widths: [usize; 2], seed: u64, constant: bool) -> TokenCorpus {
    let mut r = rng::stream(seed);
    let mut grid = |w: usize| -> Vec<usize> {
        if constant {
            vec![1; w]
        } else {
            (0..w).map(|_| r.random_range(0..k)).collect()
        }
    };
    let lf: Vec<_> = (0..n).map(|_| grid(widths[0])).collect();
    let hf: Vec<_> = (0..n).map(|_| grid(widths[1])).collect();
    TokenCorpus::from_tokens(lf, hf, (0..n).map(|i| i % 7).collect()).unwrap()
}

#[test]
fn masked_cross_entropy_at_initialization_and_zero_ratio() {
    let cfg = VqvaeConfig { codebook_size: 2, ..tiny() };
    let mut m: Vqvae<f64> = Vqvae::new(&cfg, 1, 64, Normalizer::identity(1), 12).unwrap();
    m.freeze_stage1();
    let corpus = token_corpus(2, 40, m.grid_widths(), 13, false);
    let e = m.evaluate_prior(&corpus, 0.5, 0).unwrap();
    assert!(e.masked > 0);
    assert!((e.loss_lf - 2f64.ln()).abs() < 1e-6 && (e.loss_hf - 2f64.ln()).abs() < 1e-6, "{e:?}");
    let zero = m.evaluate_prior(&corpus, 0.0, 0).unwrap();
    assert_eq!(zero.masked, 0);
    assert_eq!((zero.loss_lf, zero.loss_hf), (0.0, 0.0));
    let inputs = [vec![1usize; 3], vec![0; 5]];
    let mut g = Graph::new(&m.store, false, 0);
    let (loss, _) = m.prior_loss(&mut g, &inputs, &inputs, &[0]).unwrap();
    assert_eq!(g.value(loss).item(), 0.0);
}

#[test]
fn prior_learns_constant_corpus() {
    let cfg = VqvaeConfig {
        stage2_steps: 150,
        lr: 3e-3,
        ..tiny()
    };
    let mut m: Vqvae<f32> = Vqvae::new(&cfg, 1, 64, Normalizer::identity(1), 14).unwrap();
    m.freeze_stage1();
    let corpus = token_corpus(4, 16, m.grid_widths(), 15, true);
    let losses = m.train_stage2(&corpus, 1).unwrap();
    assert!(losses.last().unwrap() < &losses[0]);
    let e = m.evaluate_prior(&corpus, 0.7, 2).unwrap();
    assert_eq!(e.accuracy, 1.0, "{e:?}");
}

proptest! {
    #[test]
    fn mask_counts_never_increase_and_reach_zero(steps in 1usize..20, cells in 1usize..200) {
        let s = MaskSchedule::new(steps, 1.0, 0.1).unwrap();
        let mut prev = cells;
        for t in 1..=steps {
            let m = s.remaining(t, cells);
            prop_assert!(m <= prev);
            prev = m;
        }
        prop_assert_eq!(prev, 0);
    }
}

#[test]
fn decoding_is_deterministic_and_complete() {
    let mut m: Vqvae<f32> = Vqvae::new(&tiny(), 1, 64, Normalizer::identity(1), 16).unwrap();
    m.freeze_stage1();
    let a = m.sample_tokens(&[0, 3, 5], 9).unwrap();
    let b = m.sample_tokens(&[0, 3, 5], 9).unwrap();
    assert_eq!(a, b);
    for grids in &a {
        for grid in grids {
            assert!(grid.iter().all(|&c| c < 4));
        }
    }
    assert_eq!(a[0].len(), 3);
    assert_eq!(a[0][0].len(), 3);
    assert_eq!(a[1][0].len(), 5);
    // Row 1 alone matches row 1 of the batch.
    let solo = m.sample_tokens(&[0], 9).unwrap();
    assert_eq!(solo[0][0], a[0][0]);
    let single = Vqvae::<f32>::new(&VqvaeConfig { decode_steps: 1, ..tiny() }, 1, 64, Normalizer::identity(1), 16).unwrap();
    let s = single.sample_tokens(&[2], 0).unwrap();
    assert!(s[0][0].iter().chain(&s[1][0]).all(|&c| c != TokenGrid::MASK));
}

#[test]
fn sample_shapes_and_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let norm = Normalizer {
        mean: vec![0.5, -0.5],
        std: vec![2.0, 0.5],
    };
    let mut m: Vqvae<f32> = Vqvae::new(&tiny(), 2, 64, norm, 17).unwrap();
    m.freeze_stage1();
    assert!(m.sample(RhythmClass::Sr, 0, 0).unwrap().is_empty());
    let out = m.sample(RhythmClass::Afib, 3, 1).unwrap();
    assert_eq!(out.len(), 3);
    assert!(out.iter().all(|s| s.leads() == 2 && s.samples() == 64));
    let path = dir.path().join("vq.ckpt");
    m.save(&path).unwrap();
    let back: Vqvae<f32> = Vqvae::load(&path).unwrap();
    assert!(back.stage1_frozen());
    assert_eq!(back.store, m.store);
    assert_eq!(back.to_bytes(), m.to_bytes());
    assert_eq!(back.sample(RhythmClass::Afib, 3, 1).unwrap(), out);
    assert!(matches!(Vqvae::<f32>::new(&VqvaeConfig { codebook_size: 1, ..tiny() }, 1, 64, Normalizer::identity(1), 0), Err(Error::Config(_))));
}

#[test]
fn stage1_training_reduces_loss_and_quantization_costs_accuracy() {
    let ds = generate_fixture_dataset(&FixtureSpec {
        classes: vec![RhythmClass::Sr, RhythmClass::Afib],
        per_class: 4,
        seconds: 2.0,
        leads: 1,
        seed: 3,
        ..FixtureSpec::default()
    })
    .unwrap();
    let norm = Normalizer::fit(&ds).unwrap();
    let rows: Vec<Vec<f64>> = ds.records().iter().map(|r| norm.normalize(&r.signal).unwrap()).collect();
    let cfg = VqvaeConfig {
        stage1_steps: 300,
        batch_size: 8,
        ..VqvaeConfig::quick()
    };
    let mut m: Vqvae<f32> = Vqvae::new(&cfg, 1, 200, norm.clone(), 18).unwrap();
    let log = m.train_stage1(&refs(&rows), 4).unwrap();
    let head: f64 = log.losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = log.losses[log.losses.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "{head} -> {tail}");
    assert!(log.usage[0].iter().filter(|&&u| u > 0).count() > 1);
    // Same init trained without the bottleneck: the K -> infinity limit.
    let mut raw: Vqvae<f32> = Vqvae::new(&cfg, 1, 200, norm, 18).unwrap();
    raw.train_stage1_with(&refs(&rows), 4, false).unwrap();
    let quantized = m.reconstruction_error(&refs(&rows), true).unwrap();
    let unquantized = raw.reconstruction_error(&refs(&rows), false).unwrap();
    assert!(unquantized < quantized, "unquantized {unquantized} vs quantized {quantized}");
}

#[test]
fn zero_signals_reconstruct_to_zero() {
    let rows = vec![vec![0.0; 128]; 4];
    let cfg = VqvaeConfig {
        stage1_steps: 600,
        batch_size: 4,
        ..tiny()
    };
    let mut m: Vqvae<f32> = Vqvae::new(&cfg, 1, 128, Normalizer::identity(1), 19).unwrap();
    m.train_stage1(&refs(&rows), 0).unwrap();
    let err = m.reconstruction_error(&refs(&rows), true).unwrap().sqrt();
    assert!(err < 1e-3, "rms {err}");
}

#[test]
fn conditioning_orders_heart_rate_proxy() {
    let ds = generate_fixture_dataset(&FixtureSpec {
        classes: vec![RhythmClass::Sbrad, RhythmClass::Stach],
        per_class: 16,
        seconds: 4.0,
        leads: 1,
        seed: 5,
        ..FixtureSpec::default()
    })
    .unwrap();
    let cfg = VqvaeConfig {
        stage1_steps: 300,
        stage2_steps: 300,
        ..VqvaeConfig::quick()
    };
    let (m, log) = train_vqvae(&ds, &cfg, 0).unwrap();
    assert!(log.stage2.last().unwrap() < &log.stage2[0]);
    let slow = m.sample(RhythmClass::Sbrad, 8, 1).unwrap();
    let fast = m.sample(RhythmClass::Stach, 8, 2).unwrap();
    let (cs, cf) = (mean_centroid(&slow), mean_centroid(&fast));
    assert!(cf > cs, "STACH {cf} vs SBRAD {cs}");
}

/// Power-weighted mean frequency, averaged over leads and records.
fn mean_centroid(sigs: &[Signal]) -> f64 {
    let mut acc = 0.0;
    for sig in sigs {
        for row in sig.rows() {
            let spec = ecgsyn::dsp::dft(row);
            let (mut num, mut den) = (0.0, 0.0);
            for (k, c) in spec.iter().enumerate().take(row.len() / 2 + 1).skip(1) {
                num += k as f64 * c.norm_sqr();
                den += c.norm_sqr();
            }
            acc += num / den.max(1e-300) / sig.leads() as f64;
        }
    }
    acc / sigs.len() as f64
}
