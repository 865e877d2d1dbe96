//! EEG datasets: in-memory types, the on-disk directory format, a
//! synthetic ERD/ERS generator, and stratified subsampling.
//!
//! # On-disk format
//!
//! A dataset is a directory with three files:
//!
//! * `meta.txt` — text key-value pairs, one per line, space-separated:
//!   `format_version` (1), `channels`, `samples`, `sample_rate_hz`,
//!   `classes`, `trials`, optional `channel_names` (comma-separated,
//!   exactly `channels` entries), optional `subject`, optional `session`.
//! * `samples.bin` — little-endian 32-bit floats in (trial, channel,
//!   time) order; exactly `trials * channels * samples` values.
//! * `labels.txt` — one integer class label per line, `trials` lines.
//!
//! Values are stored at 32-bit precision; all in-memory computation is
//! 64-bit. Trial order is canonical: fold assignment and validation
//! splits are defined over it, and it survives a save/load round trip.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{design_cheby2_bandpass, BandSpec};
use crate::error::{Error, Result};

/// One EEG trial: a C x T sample matrix with its class label.
#[derive(Debug, Clone)]
pub struct EegTrial {
    /// Row-major (channel, time) samples in microvolts.
    pub x: Vec<f64>,
    pub label: usize,
    pub subject_id: String,
    pub session_id: String,
}

/// An ordered collection of equally shaped trials.
#[derive(Debug, Clone)]
pub struct EegDataset {
    pub trials: Vec<EegTrial>,
    pub channels: usize,
    pub samples: usize,
    pub sample_rate_hz: f64,
    pub classes: usize,
    pub channel_names: Vec<String>,
}

impl EegDataset {
    pub fn n_trials(&self) -> usize {
        self.trials.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.trials.iter().map(|t| t.label).collect()
    }

    /// Trials per class, indexed by label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.classes];
        for t in &self.trials {
            counts[t.label] += 1;
        }
        counts
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidConfig("dataset needs >= 2 classes".into()));
        }
        for (i, t) in self.trials.iter().enumerate() {
            if t.x.len() != self.channels * self.samples {
                return Err(Error::DataFormat(format!(
                    "trial {i} has {} values, expected {}",
                    t.x.len(),
                    self.channels * self.samples
                )));
            }
            if t.label >= self.classes {
                return Err(Error::LabelOutOfRange {
                    label: t.label as i64,
                    classes: self.classes,
                });
            }
            if let Some(p) = t.x.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("trial {i}, sample {p}")));
            }
        }
        Ok(())
    }

    /// A new dataset keeping the listed trial indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> EegDataset {
        EegDataset {
            trials: indices.iter().map(|&i| self.trials[i].clone()).collect(),
            channels: self.channels,
            samples: self.samples,
            sample_rate_hz: self.sample_rate_hz,
            classes: self.classes,
            channel_names: self.channel_names.clone(),
        }
    }
}

fn default_channel_names(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("ch{i:02}")).collect()
}

// ---------------------------------------------------------------------------
// Save / load
// ---------------------------------------------------------------------------

pub fn save_dataset(ds: &EegDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir)?;

    let mut meta = String::new();
    meta.push_str("format_version 1\n");
    meta.push_str(&format!("channels {}\n", ds.channels));
    meta.push_str(&format!("samples {}\n", ds.samples));
    meta.push_str(&format!("sample_rate_hz {}\n", ds.sample_rate_hz));
    meta.push_str(&format!("classes {}\n", ds.classes));
    meta.push_str(&format!("trials {}\n", ds.trials.len()));
    meta.push_str(&format!("channel_names {}\n", ds.channel_names.join(",")));
    if let Some(t) = ds.trials.first() {
        meta.push_str(&format!("subject {}\n", t.subject_id));
        meta.push_str(&format!("session {}\n", t.session_id));
    }
    fs::write(dir.join("meta.txt"), meta)?;

    let mut blob = Vec::with_capacity(ds.trials.len() * ds.channels * ds.samples * 4);
    for t in &ds.trials {
        for &v in &t.x {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(dir.join("samples.bin"))?;
    f.write_all(&blob)?;

    let labels: String = ds
        .trials
        .iter()
        .map(|t| format!("{}\n", t.label))
        .collect();
    fs::write(dir.join("labels.txt"), labels)?;
    Ok(())
}

fn parse_meta(text: &str) -> Result<std::collections::HashMap<String, String>> {
    let mut map = std::collections::HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once(' ').ok_or_else(|| {
            Error::DataFormat(format!("meta.txt line {}: expected 'key value'", lineno + 1))
        })?;
        map.insert(key.to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn meta_field<T: std::str::FromStr>(
    map: &std::collections::HashMap<String, String>,
    key: &str,
) -> Result<T> {
    map.get(key)
        .ok_or_else(|| Error::DataFormat(format!("meta.txt missing key '{key}'")))?
        .parse::<T>()
        .map_err(|_| Error::DataFormat(format!("meta.txt key '{key}' unparseable")))
}

pub fn load_dataset(dir: &Path) -> Result<EegDataset> {
    let meta_path = dir.join("meta.txt");
    if !meta_path.exists() {
        return Err(Error::DataFormat(format!(
            "missing {}",
            meta_path.display()
        )));
    }
    let map = parse_meta(&fs::read_to_string(&meta_path)?)?;

    let version: u32 = meta_field(&map, "format_version")?;
    if version != 1 {
        return Err(Error::DataFormat(format!(
            "unsupported format_version {version}, expected 1"
        )));
    }
    let channels: usize = meta_field(&map, "channels")?;
    let samples: usize = meta_field(&map, "samples")?;
    let sample_rate_hz: f64 = meta_field(&map, "sample_rate_hz")?;
    let classes: usize = meta_field(&map, "classes")?;
    let n_trials: usize = meta_field(&map, "trials")?;
    let channel_names = match map.get("channel_names") {
        Some(s) => {
            let names: Vec<String> = s.split(',').map(|v| v.to_string()).collect();
            if names.len() != channels {
                return Err(Error::DataFormat(format!(
                    "channel_names has {} entries, expected {channels}",
                    names.len()
                )));
            }
            names
        }
        None => default_channel_names(channels),
    };
    let subject = map.get("subject").cloned().unwrap_or_default();
    let session = map.get("session").cloned().unwrap_or_default();

    let mut blob = Vec::new();
    fs::File::open(dir.join("samples.bin"))?.read_to_end(&mut blob)?;
    let expected = n_trials * channels * samples * 4;
    if blob.len() != expected {
        return Err(Error::DataFormat(format!(
            "samples.bin has {} bytes, expected {expected}",
            blob.len()
        )));
    }

    let labels_text = fs::read_to_string(dir.join("labels.txt"))?;
    let labels: Vec<i64> = labels_text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<i64>()
                .map_err(|_| Error::DataFormat(format!("bad label line '{l}'")))
        })
        .collect::<Result<_>>()?;
    if labels.len() != n_trials {
        return Err(Error::DataFormat(format!(
            "labels.txt has {} entries, expected {n_trials}",
            labels.len()
        )));
    }

    let per_trial = channels * samples;
    let mut trials = Vec::with_capacity(n_trials);
    for (i, &label) in labels.iter().enumerate() {
        if label < 0 || label as usize >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let mut x = Vec::with_capacity(per_trial);
        let base = i * per_trial * 4;
        for j in 0..per_trial {
            let off = base + j * 4;
            let v = f32::from_le_bytes([blob[off], blob[off + 1], blob[off + 2], blob[off + 3]]);
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("trial {i}, sample {j}")));
            }
            x.push(v as f64);
        }
        trials.push(EegTrial {
            x,
            label: label as usize,
            subject_id: subject.clone(),
            session_id: session.clone(),
        });
    }

    let ds = EegDataset {
        trials,
        channels,
        samples,
        sample_rate_hz,
        classes,
        channel_names,
    };
    ds.validate()?;
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

/// Configuration for the synthetic ERD/ERS generator.
///
/// Each trial is pink-ish background noise on every channel plus a
/// narrowband oscillation on the target channel groups. Class `c`
/// attenuates the band power of group `c` by `erd_depth`, mimicking
/// event-related desynchronization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub trials_per_class: usize,
    pub channels: usize,
    pub samples: usize,
    pub sample_rate_hz: f64,
    pub classes: usize,
    /// One channel group per class; group `c` carries the oscillation
    /// that class `c` suppresses.
    pub class_channels: Vec<Vec<usize>>,
    /// Signature oscillation band (Hz).
    pub band_hz: (f64, f64),
    /// Fractional band-power attenuation in [0, 1].
    pub erd_depth: f64,
    /// Oscillation amplitude relative to background noise (std ratio).
    pub snr: f64,
    /// Pole of the one-pole lowpass shaping the background noise; closer
    /// to 1 means steeper spectral slope.
    pub noise_pole: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            trials_per_class: 100,
            channels: 6,
            samples: 500,
            sample_rate_hz: 250.0,
            classes: 2,
            class_channels: vec![vec![1, 2], vec![3, 4]],
            band_hz: (8.0, 12.0),
            erd_depth: 0.8,
            snr: 3.0,
            noise_pole: 0.9,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate_hz / 2.0;
        if !(self.band_hz.0 > 0.0 && self.band_hz.0 < self.band_hz.1 && self.band_hz.1 < nyquist) {
            return Err(Error::InvalidConfig(format!(
                "signature band {:?} outside (0, {nyquist})",
                self.band_hz
            )));
        }
        if !(0.0..=1.0).contains(&self.erd_depth) {
            return Err(Error::InvalidConfig("erd_depth must be in [0, 1]".into()));
        }
        if self.classes < 2 || self.class_channels.len() != self.classes {
            return Err(Error::InvalidConfig(
                "need one channel group per class and >= 2 classes".into(),
            ));
        }
        for group in &self.class_channels {
            if group.iter().any(|&c| c >= self.channels) {
                return Err(Error::InvalidConfig(format!(
                    "channel group {group:?} exceeds channel count {}",
                    self.channels
                )));
            }
        }
        if !(0.0..1.0).contains(&self.noise_pole) {
            return Err(Error::InvalidConfig("noise_pole must be in [0, 1)".into()));
        }
        if self.trials_per_class == 0 || self.samples == 0 || self.channels == 0 {
            return Err(Error::InvalidConfig("empty synthetic geometry".into()));
        }
        Ok(())
    }
}

/// Deterministically generate a synthetic dataset; identical seeds give
/// bit-identical output. Trials are interleaved by class (0, 1, ..,
/// N_c-1, 0, 1, ..) so any prefix is class-balanced.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<EegDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Shape the oscillation by bandpass-filtering white noise with a
    // filter from the same design machinery the classifier uses.
    let band_filter = design_cheby2_bandpass(&BandSpec::new(
        cfg.band_hz.0,
        cfg.band_hz.1,
        cfg.sample_rate_hz,
    ))?;

    let c = cfg.channels;
    let t = cfg.samples;
    // Warmup samples let the noise-shaping filters settle.
    let warm = 4 * band_filter.digital_order.max(16);

    let mut trials = Vec::with_capacity(cfg.trials_per_class * cfg.classes);
    for i in 0..cfg.trials_per_class {
        for class in 0..cfg.classes {
            let mut x = vec![0.0; c * t];
            for ch in 0..c {
                // One-pole lowpassed white noise, normalized to unit std.
                let mut bg = Vec::with_capacity(t + warm);
                let mut prev = 0.0;
                for _ in 0..t + warm {
                    let white: f64 = rng.gen_range(-1.0..1.0);
                    prev = cfg.noise_pole * prev + white;
                    bg.push(prev);
                }
                let bg = &bg[warm..];
                let bg_std = std_dev(bg);

                // Which class suppresses this channel's oscillation, if any.
                let group_class = cfg
                    .class_channels
                    .iter()
                    .position(|group| group.contains(&ch));
                let amp = match group_class {
                    None => 0.0,
                    Some(g) => {
                        let power = if g == class { 1.0 - cfg.erd_depth } else { 1.0 };
                        cfg.snr * power.sqrt()
                    }
                };

                let mut osc = vec![0.0; t];
                if amp > 0.0 {
                    let raw: Vec<f64> =
                        (0..t + warm).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let filtered = band_filter.filter_causal(&raw);
                    let seg = &filtered[warm..];
                    let seg_std = std_dev(seg).max(1e-12);
                    for (o, &v) in osc.iter_mut().zip(seg) {
                        *o = amp * v / seg_std;
                    }
                } else if group_class.is_some() {
                    // Keep the rng draw count identical across classes so
                    // class only affects amplitudes, not noise realizations.
                    for _ in 0..t + warm {
                        let _: f64 = rng.gen_range(-1.0..1.0);
                    }
                }

                for s in 0..t {
                    x[ch * t + s] = bg[s] / bg_std.max(1e-12) + osc[s];
                }
            }
            trials.push(EegTrial {
                x,
                label: class,
                subject_id: format!("synth{:04}", cfg.seed % 10000),
                session_id: "1".to_string(),
            });
        }
        let _ = i;
    }

    Ok(EegDataset {
        trials,
        channels: c,
        samples: t,
        sample_rate_hz: cfg.sample_rate_hz,
        classes: cfg.classes,
        channel_names: default_channel_names(c),
    })
}

fn std_dev(x: &[f64]) -> f64 {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.len() as f64).sqrt()
}

// ---------------------------------------------------------------------------
// Stratified subsampling
// ---------------------------------------------------------------------------

/// Keep the first `ceil(n_c * fraction)` trials of each class, in dataset
/// order. Order is preserved.
pub fn subsample_stratified(ds: &EegDataset, fraction: f64) -> Result<EegDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train fraction {fraction} outside (0, 1]"
        )));
    }
    let counts = ds.class_counts();
    let keep: Vec<usize> = counts
        .iter()
        .map(|&n| ((n as f64) * fraction).ceil() as usize)
        .collect();
    let mut seen = vec![0usize; ds.classes];
    let mut indices = Vec::new();
    for (i, t) in ds.trials.iter().enumerate() {
        if seen[t.label] < keep[t.label] {
            indices.push(i);
        }
        seen[t.label] += 1;
    }
    Ok(ds.subset(&indices))
}
