//! Deterministic synthetic ECG fixtures.
//!
//! Each record is a sum of Gaussian bumps (P, Q, R, S, T) placed at beat
//! times drawn from a class-specific RR process, plus baseline wander and
//! white noise. Only the rhythm signatures are contractual:
//!
//! | class | rate (bpm) | RR pattern | extra |
//! |-------|-----------|------------|-------|
//! | SBRAD | 40–52 | regular | |
//! | SR    | 65–90 | regular | |
//! | AFIB  | 90–120 | uniform ×[0.45, 1.55] | no P wave, fibrillatory waves |
//! | STACH | 110–140 | regular | |
//! | AFLT  | 70–100 | regular | no P wave, sawtooth baseline |
//! | SARRH | 60–85 | respiratory modulation ±35% | |
//! | SVTAC | 160–200 | regular | no P wave |

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, EcgRecord, RhythmClass, Signal, Source};
use crate::error::{Error, Result};
use crate::rng;

const REGULAR_RR_CV: f64 = 0.02;
const NOISE_MV: f64 = 0.01;

#[derive(Debug, Clone, Copy)]
enum RrPattern {
    Regular,
    Irregular { lo: f64, hi: f64 },
    Respiratory { depth: f64 },
}

#[derive(Debug, Clone, Copy)]
struct Profile {
    bpm: (f64, f64),
    rr: RrPattern,
    p_wave: bool,
    fibrillation: bool,
    flutter: bool,
}

fn profile(class: RhythmClass) -> Profile {
    let base = Profile {
        bpm: (65.0, 90.0),
        rr: RrPattern::Regular,
        p_wave: true,
        fibrillation: false,
        flutter: false,
    };
    match class {
        RhythmClass::Sbrad => Profile { bpm: (40.0, 52.0), ..base },
        RhythmClass::Sr => base,
        RhythmClass::Afib => Profile {
            bpm: (90.0, 120.0),
            rr: RrPattern::Irregular { lo: 0.45, hi: 1.55 },
            p_wave: false,
            fibrillation: true,
            ..base
        },
        RhythmClass::Stach => Profile { bpm: (110.0, 140.0), ..base },
        RhythmClass::Aflt => Profile {
            bpm: (70.0, 100.0),
            p_wave: false,
            flutter: true,
            ..base
        },
        RhythmClass::Sarrh => Profile {
            bpm: (60.0, 85.0),
            rr: RrPattern::Respiratory { depth: 0.35 },
            ..base
        },
        RhythmClass::Svtac => Profile {
            bpm: (160.0, 200.0),
            p_wave: false,
            ..base
        },
    }
}

/// (offset from R peak in s, width in s, amplitude in mV)
const QRS: [(f64, f64, f64); 3] = [(-0.028, 0.010, -0.12), (0.0, 0.012, 1.0), (0.028, 0.012, -0.25)];
const P_WAVE: (f64, f64, f64) = (-0.16, 0.022, 0.15);
const T_WIDTH: f64 = 0.045;
const T_AMP: f64 = 0.3;

fn beat_times(p: &Profile, seconds: f64, rng: &mut impl Rng) -> Vec<f64> {
    let bpm = rng.random_range(p.bpm.0..p.bpm.1);
    let rr0 = 60.0 / bpm;
    let resp_period = rng.random_range(3.0..5.0);
    let resp_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut times = Vec::new();
    // Start one beat early so the first T wave can reach into the window.
    let mut t = -rng.random_range(0.0..rr0);
    let mut i = 0usize;
    while t < seconds + 0.5 {
        times.push(t);
        let rr = match p.rr {
            RrPattern::Regular => rr0 * (1.0 + REGULAR_RR_CV * rng::normal(rng)),
            RrPattern::Irregular { lo, hi } => rr0 * rng.random_range(lo..hi),
            RrPattern::Respiratory { depth } => {
                let phase = std::f64::consts::TAU * i as f64 / resp_period + resp_phase;
                rr0 * (1.0 + depth * phase.sin() + REGULAR_RR_CV * rng::normal(rng))
            }
        };
        t += rr.max(0.2);
        i += 1;
    }
    times
}

fn bump(t: f64, center: f64, width: f64, amp: f64) -> f64 {
    let z = (t - center) / width;
    if z.abs() > 6.0 {
        0.0
    } else {
        amp * (-0.5 * z * z).exp()
    }
}

/// Generates one fixture record. `fs` must be 100 or 500 Hz.
pub fn generate_fixture(class: RhythmClass, fs: f64, seconds: f64, leads: usize, seed: u64) -> Result<EcgRecord> {
    if fs != 100.0 && fs != 500.0 {
        return Err(Error::InvalidArgument(format!("fixture fs must be 100 or 500 Hz, got {fs}")));
    }
    if !(seconds > 0.0) || leads == 0 {
        return Err(Error::InvalidArgument(format!(
            "fixture needs positive duration and lead count, got {seconds} s, {leads} leads"
        )));
    }
    let mut rng = rng::stream(rng::mix(
        rng::mix(seed, class.id() as u64),
        rng::mix(fs.to_bits() ^ seconds.to_bits(), leads as u64),
    ));
    let p = profile(class);
    let n = (fs * seconds).round() as usize;
    let beats = beat_times(&p, seconds, &mut rng);
    let amp_scale = rng.random_range(0.8..1.2);
    let wander_amp = rng.random_range(0.05..0.15);
    let wander_f = rng.random_range(0.15..0.35);
    let wander_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let fib: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.03..0.06),
                rng.random_range(4.0..9.0),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let flutter_f = rng.random_range(4.5..5.5);
    let flutter_phase = rng.random_range(0.0..1.0);

    let mut clean = vec![0.0; n];
    for (i, v) in clean.iter_mut().enumerate() {
        let t = i as f64 / fs;
        let mut x = 0.0;
        for (k, &bt) in beats.iter().enumerate() {
            if (t - bt).abs() > 1.2 {
                continue;
            }
            let rr = beats.get(k + 1).map_or(0.8, |next| next - bt);
            for &(off, w, a) in &QRS {
                x += bump(t, bt + off, w, a);
            }
            if p.p_wave {
                x += bump(t, bt + P_WAVE.0, P_WAVE.1, P_WAVE.2);
            }
            x += bump(t, bt + 0.3 * rr.sqrt().min(1.2), T_WIDTH, T_AMP);
        }
        if p.fibrillation {
            x += fib
                .iter()
                .map(|&(a, f, ph)| a * (std::f64::consts::TAU * f * t + ph).sin())
                .sum::<f64>();
        }
        if p.flutter {
            let phase = (flutter_f * t + flutter_phase).fract();
            x += 0.15 * (1.0 - 2.0 * phase);
        }
        *v = amp_scale * x;
    }

    let mut data = Vec::with_capacity(leads * n);
    for l in 0..leads {
        let gain = 1.0 / (1.0 + 0.3 * l as f64);
        for (i, &c) in clean.iter().enumerate() {
            let t = i as f64 / fs;
            let wander = wander_amp * (std::f64::consts::TAU * wander_f * t + wander_phase + l as f64).sin();
            data.push(gain * c + wander + NOISE_MV * rng::normal(&mut rng));
        }
    }
    let signal = Signal::new(leads, n, data)?;
    EcgRecord::new(
        signal,
        fs,
        class,
        format!("fx-{}-{seed:016x}", class.code()),
        Source::Fixture,
    )
}

/// Parameters for a whole fixture dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub classes: Vec<RhythmClass>,
    pub per_class: usize,
    pub fs: f64,
    pub seconds: f64,
    pub leads: usize,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            classes: RhythmClass::ALL.to_vec(),
            per_class: 40,
            fs: 100.0,
            seconds: 10.0,
            leads: 2,
            seed: 0,
        }
    }
}

/// Generates `per_class` records for every class. Record `i` of a class uses
/// the child seed `mix(seed, i)`, so datasets with different seeds are disjoint.
pub fn generate_fixture_dataset(spec: &FixtureSpec) -> Result<Dataset> {
    let mut records = Vec::with_capacity(spec.classes.len() * spec.per_class);
    for &class in &spec.classes {
        for i in 0..spec.per_class {
            let seed = rng::mix(spec.seed, i as u64);
            let mut rec = generate_fixture(class, spec.fs, spec.seconds, spec.leads, seed)?;
            rec.record_id = format!("fx{}-{}-{i:04}", spec.seed, class.code());
            records.push(rec);
        }
    }
    Dataset::new(records)
}

/// Simple R-peak detector: local maxima above half the record maximum,
/// separated by at least 200 ms. Returns sample indices.
pub fn detect_beats(lead: &[f64], fs: f64) -> Vec<usize> {
    let mean = lead.iter().sum::<f64>() / lead.len().max(1) as f64;
    let x: Vec<f64> = lead.iter().map(|v| v - mean).collect();
    let peak = x.iter().fold(0.0f64, |m, &v| m.max(v));
    let threshold = 0.5 * peak;
    let refractory = (0.2 * fs).round() as usize;
    let mut beats: Vec<usize> = Vec::new();
    for i in 1..x.len().saturating_sub(1) {
        if x[i] > threshold && x[i] >= x[i - 1] && x[i] > x[i + 1] {
            match beats.last() {
                Some(&last) if i - last < refractory => {
                    if x[i] > x[last] {
                        *beats.last_mut().unwrap() = i;
                    }
                }
                _ => beats.push(i),
            }
        }
    }
    beats
}
