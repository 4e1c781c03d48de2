//! WFDB header (`.hea`) and format-16 signal (`.dat`) files.
//!
//! Only the subset PTB-XL and CHAPMAN use is supported: one `.dat` file per
//! record holding interleaved little-endian two's-complement int16 samples.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use super::{EcgRecord, RhythmClass, Signal, Source};
use crate::error::{Error, IoContext, Result};

/// Default ADC gain (counts per mV) when the header leaves it unset.
pub const DEFAULT_GAIN: f64 = 200.0;

/// Parsed `.hea` contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub record_name: String,
    pub fs: f64,
    pub n_samples: Option<usize>,
    pub signals: Vec<SignalSpec>,
}

/// One per-signal header line.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSpec {
    pub file: String,
    pub format: u32,
    pub gain: f64,
    pub baseline: i32,
    pub units: String,
    pub checksum: Option<i32>,
    pub description: String,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn leading_number(field: &str) -> &str {
    let end = field
        .char_indices()
        .find(|&(i, c)| !(c.is_ascii_digit() || c == '.' || ((c == '-' || c == '+') && i == 0) || c == 'e' || c == 'E'))
        .map_or(field.len(), |(i, _)| i);
    &field[..end]
}

/// Parses header text. `path` is only used for error messages.
pub fn parse_header(text: &str, path: &Path) -> Result<Header> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (lineno, record_line) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing record line"))?;
    let fields: Vec<&str> = record_line.split_whitespace().collect();
    if fields.len() < 2 {
        return Err(parse_err(path, lineno, "record line needs at least name and signal count"));
    }
    let record_name = fields[0].split('/').next().unwrap_or(fields[0]).to_string();
    let nsig: usize = fields[1]
        .parse()
        .map_err(|_| parse_err(path, lineno, format!("bad signal count {:?}", fields[1])))?;
    let fs = match fields.get(2) {
        Some(f) => leading_number(f)
            .parse::<f64>()
            .ok()
            .filter(|v| *v > 0.0)
            .ok_or_else(|| parse_err(path, lineno, format!("bad sampling frequency {f:?}")))?,
        None => 250.0,
    };
    let n_samples = match fields.get(3) {
        Some(f) => Some(
            f.parse::<usize>()
                .map_err(|_| parse_err(path, lineno, format!("bad sample count {f:?}")))?,
        ),
        None => None,
    };

    let mut signals = Vec::with_capacity(nsig);
    for _ in 0..nsig {
        let (lineno, line) = lines
            .next()
            .ok_or_else(|| parse_err(path, lineno, format!("expected {nsig} signal lines")))?;
        signals.push(parse_signal_line(line, path, lineno)?);
    }
    Ok(Header {
        record_name,
        fs,
        n_samples,
        signals,
    })
}

fn parse_signal_line(line: &str, path: &Path, lineno: usize) -> Result<SignalSpec> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() < 2 {
        return Err(parse_err(path, lineno, "signal line needs file name and format"));
    }
    let fmt_digits: String = fields[1].chars().take_while(char::is_ascii_digit).collect();
    let format: u32 = fmt_digits
        .parse()
        .map_err(|_| parse_err(path, lineno, format!("bad format field {:?}", fields[1])))?;

    let adc_zero: Option<i32> = fields.get(4).and_then(|f| f.parse().ok());
    let (mut gain, mut baseline, mut units) = (DEFAULT_GAIN, adc_zero.unwrap_or(0), "mV".to_string());
    if let Some(g) = fields.get(2) {
        let (value_part, unit_part) = match g.split_once('/') {
            Some((v, u)) => (v, Some(u)),
            None => (*g, None),
        };
        let (gain_str, base_str) = match value_part.split_once('(') {
            Some((gs, rest)) => {
                let inner = rest
                    .strip_suffix(')')
                    .ok_or_else(|| parse_err(path, lineno, format!("unterminated baseline in {g:?}")))?;
                (gs, Some(inner))
            }
            None => (value_part, None),
        };
        let parsed: f64 = gain_str
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad gain {gain_str:?}")))?;
        if parsed != 0.0 {
            gain = parsed;
        }
        if let Some(b) = base_str {
            baseline = b
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("bad baseline {b:?}")))?;
        }
        if let Some(u) = unit_part {
            units = u.to_string();
        }
    }
    let checksum = fields.get(6).and_then(|f| f.parse().ok());
    let description = if fields.len() > 8 {
        fields[8..].join(" ")
    } else {
        String::new()
    };
    Ok(SignalSpec {
        file: fields[0].to_string(),
        format,
        gain,
        baseline,
        units,
        checksum,
        description,
    })
}

/// WFDB 16-bit checksum: sum of samples modulo 2^16, as a signed value.
fn checksum(samples: impl Iterator<Item = i16>) -> i32 {
    samples.fold(0i16, |acc, s| acc.wrapping_add(s)) as i32
}

/// Reads a format-16 record. The label and source are not part of WFDB and
/// are supplied by the caller (usually from the label manifest).
pub fn read_wfdb_labeled(header_path: &Path, label: RhythmClass, source: Source) -> Result<EcgRecord> {
    let text = fs::read_to_string(header_path).io_context(|| format!("reading {}", header_path.display()))?;
    let header = parse_header(&text, header_path)?;
    if header.signals.is_empty() {
        return Err(Error::Schema(format!("{} declares no signals", header_path.display())));
    }
    if let Some(spec) = header.signals.iter().find(|s| s.format != 16) {
        return Err(Error::UnsupportedFormat(spec.format));
    }
    let file = &header.signals[0].file;
    if header.signals.iter().any(|s| &s.file != file) {
        return Err(Error::Schema("signals split across several .dat files".into()));
    }
    let dat_path = header_path.with_file_name(file);
    let bytes = fs::read(&dat_path).io_context(|| format!("reading {}", dat_path.display()))?;

    let nsig = header.signals.len();
    let frame_bytes = 2 * nsig;
    let n_samples = header.n_samples.unwrap_or(bytes.len() / frame_bytes);
    let expected = n_samples * frame_bytes;
    if bytes.len() < expected {
        return Err(Error::TruncatedData {
            path: dat_path,
            expected,
            found: bytes.len(),
        });
    }

    let adc: Vec<i16> = bytes[..expected]
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]))
        .collect();
    let mut data = vec![0.0; nsig * n_samples];
    for (l, spec) in header.signals.iter().enumerate() {
        let row = &mut data[l * n_samples..(l + 1) * n_samples];
        for (t, v) in row.iter_mut().enumerate() {
            *v = (adc[t * nsig + l] as f64 - spec.baseline as f64) / spec.gain;
        }
        if let Some(expected_sum) = spec.checksum {
            let actual = checksum((0..n_samples).map(|t| adc[t * nsig + l]));
            if actual != expected_sum {
                warn!(
                    "{}: checksum mismatch on signal {l} (header {expected_sum}, data {actual})",
                    header_path.display()
                );
            }
        }
    }
    let signal = Signal::new(nsig, n_samples, data)?;
    EcgRecord::new(signal, header.fs, label, header.record_name, source)
}

/// Reads a record whose label is unknown; it is tagged `SR`/`FIXTURE` until
/// relabeled from a manifest.
pub fn read_wfdb(header_path: &Path) -> Result<EcgRecord> {
    read_wfdb_labeled(header_path, RhythmClass::Sr, Source::Fixture)
}

/// Quantizes a value the same way [`write_wfdb`] does.
pub fn quantize(value: f64, gain: f64) -> f64 {
    (value * gain).round() / gain + 0.0
}

/// Writes `<record_id>.hea` and `<record_id>.dat` into `out_dir`.
pub fn write_wfdb(record: &EcgRecord, gain: f64, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    if !(gain.is_finite() && gain > 0.0) {
        return Err(Error::InvalidArgument(format!("gain must be positive, got {gain}")));
    }
    let sig = &record.signal;
    let (nsig, n) = (sig.leads(), sig.samples());
    let mut counts = vec![0i16; nsig * n];
    for (l, row) in sig.rows().enumerate() {
        for (t, &v) in row.iter().enumerate() {
            let q = (v * gain).round();
            if q.abs() > i16::MAX as f64 {
                return Err(Error::Range {
                    value: v,
                    lead: l,
                    sample: t,
                    gain,
                });
            }
            counts[t * nsig + l] = q as i16;
        }
    }

    fs::create_dir_all(out_dir).io_context(|| format!("creating {}", out_dir.display()))?;
    let name = &record.record_id;
    let dat_name = format!("{name}.dat");
    let mut header = format!("{name} {nsig} {} {n}\n", format_number(record.fs));
    for l in 0..nsig {
        let initial = counts.get(l).copied().unwrap_or(0);
        let sum = checksum((0..n).map(|t| counts[t * nsig + l]));
        header.push_str(&format!(
            "{dat_name} 16 {}(0)/mV 16 0 {initial} {sum} 0 lead{l}\n",
            format_number(gain)
        ));
    }
    let bytes: Vec<u8> = counts.iter().flat_map(|c| c.to_le_bytes()).collect();

    let hea_path = out_dir.join(format!("{name}.hea"));
    let dat_path = out_dir.join(&dat_name);
    fs::write(&hea_path, header).io_context(|| format!("writing {}", hea_path.display()))?;
    fs::write(&dat_path, bytes).io_context(|| format!("writing {}", dat_path.display()))?;
    Ok((hea_path, dat_path))
}

fn format_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Largest gain not above `preferred` that keeps every sample inside int16.
pub fn safe_gain(signal: &Signal, preferred: f64) -> f64 {
    let peak = signal.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak * preferred <= 32000.0 {
        preferred
    } else {
        (32000.0 / peak).floor().max(1.0)
    }
}
