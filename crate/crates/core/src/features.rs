//! Log-Mel filterbank front-end: raw PCM audio in, `T×n_mels` log energies out.
//!
//! The exact variant, so downstream numbers are reproducible: 25 ms Hann
//! window (symmetric), 10 ms hop, power spectrum on the smallest power-of-two
//! FFT that fits the window, Mel scale `2595·log10(1 + f/700)`, triangular
//! filters with unit peak, natural log with a `1e-10` floor on power.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("signal of {samples} samples is shorter than one {window}-sample window")]
    TooShort { samples: usize, window: usize },
    #[error("non-finite sample at index {0}")]
    NonFiniteSample(usize),
    #[error("invalid front-end config: {0}")]
    InvalidConfig(String),
    #[error("delta window {window} must be smaller than the frame count {n_frames}")]
    DeltaWindow { window: usize, n_frames: usize },
    #[error("{path}: not a mono 16-bit PCM WAV file ({reason})")]
    BadWav { path: String, reason: String },
    #[error("{path}: not a feature file ({reason})")]
    BadFeatureFile { path: String, reason: String },
    #[error("cannot stack feature matrices with {a} and {b} frames")]
    FrameCountMismatch { a: usize, b: usize },
}

/// A mono waveform with amplitudes in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self, FeatureError> {
        if sample_rate == 0 {
            return Err(FeatureError::InvalidConfig("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(FeatureError::NonFiniteSample(i));
        }
        Ok(AudioSignal {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Front-end knobs; the defaults are the variant documented at module level.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub window_ms: u32,
    pub hop_ms: u32,
    pub n_mels: usize,
    pub fmin: f64,
    /// Upper band edge in Hz; `None` means Nyquist.
    pub fmax: Option<f64>,
    /// Floor applied to filterbank power before the log.
    pub log_floor: f64,
    /// Optional per-utterance, per-coefficient mean subtraction after the log.
    pub mean_subtract: bool,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            window_ms: 25,
            hop_ms: 10,
            n_mels: 80,
            fmin: 0.0,
            fmax: None,
            log_floor: 1e-10,
            mean_subtract: false,
        }
    }
}

impl FrontendConfig {
    fn validate(&self, sample_rate: u32) -> Result<(f64, usize, usize), FeatureError> {
        if self.n_mels == 0 {
            return Err(FeatureError::InvalidConfig("n_mels must be ≥ 1".into()));
        }
        if self.hop_ms == 0 || self.hop_ms > self.window_ms {
            return Err(FeatureError::InvalidConfig(format!(
                "hop ({} ms) must be positive and at most the window ({} ms)",
                self.hop_ms, self.window_ms
            )));
        }
        if self.log_floor <= 0.0 {
            return Err(FeatureError::InvalidConfig("log floor must be positive".into()));
        }
        let nyquist = sample_rate as f64 / 2.0;
        let fmax = self.fmax.unwrap_or(nyquist);
        if !(self.fmin >= 0.0 && self.fmin < fmax && fmax <= nyquist) {
            return Err(FeatureError::InvalidConfig(format!(
                "band edges must satisfy 0 ≤ fmin < fmax ≤ {nyquist} Hz, got {}..{fmax}",
                self.fmin
            )));
        }
        let window = (sample_rate as u64 * self.window_ms as u64 / 1000) as usize;
        let hop = (sample_rate as u64 * self.hop_ms as u64 / 1000) as usize;
        if window == 0 || hop == 0 {
            return Err(FeatureError::InvalidConfig(
                "window and hop must span at least one sample".into(),
            ));
        }
        Ok((fmax, window, hop))
    }
}

/// Row-major `n_frames × n_mels` log-energy matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: Vec<f32>,
    n_frames: usize,
    n_mels: usize,
    hop_ms: u32,
}

impl FeatureMatrix {
    pub fn from_rows(values: Vec<f32>, n_mels: usize, hop_ms: u32) -> Self {
        assert!(n_mels > 0 && values.len() % n_mels == 0);
        let n_frames = values.len() / n_mels;
        FeatureMatrix {
            values,
            n_frames,
            n_mels,
            hop_ms,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn hop_ms(&self) -> u32 {
        self.hop_ms
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, frame: usize) -> &[f32] {
        &self.values[frame * self.n_mels..(frame + 1) * self.n_mels]
    }
}

/// Number of complete analysis windows: `floor((len − window)/hop) + 1`.
pub fn frame_count(len: usize, window: usize, hop: usize) -> Option<usize> {
    if len < window {
        None
    } else {
        Some((len - window) / hop + 1)
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10.0f64.powf(m / 2595.0) - 1.0)
}

/// Unit-peak triangular Mel filters as per-filter `(first_bin, weights)` pairs.
fn mel_filterbank(
    n_mels: usize,
    n_fft: usize,
    sample_rate: u32,
    fmin: f64,
    fmax: f64,
) -> Vec<(usize, Vec<f64>)> {
    let n_bins = n_fft / 2 + 1;
    let (mlo, mhi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let centers_hz: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / n_fft as f64;
    let mut filters = Vec::with_capacity(n_mels);
    for m in 0..n_mels {
        let (lo, mid, hi) = (centers_hz[m], centers_hz[m + 1], centers_hz[m + 2]);
        let mut first = None;
        let mut weights = Vec::new();
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = if f > lo && f < mid {
                (f - lo) / (mid - lo)
            } else if (f - mid).abs() < f64::EPSILON * mid.abs().max(1.0) {
                1.0
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            if w > 0.0 {
                if first.is_none() {
                    first = Some(k);
                }
                weights.push(w);
            } else if first.is_some() {
                break;
            }
        }
        filters.push((first.unwrap_or(0), weights));
    }
    filters
}

/// Center frequencies (Hz) of the triangular filters, mostly useful for
/// sanity-checking which filter a pure tone should excite.
pub fn filter_centers_hz(cfg: &FrontendConfig, sample_rate: u32) -> Vec<f64> {
    let fmax = cfg.fmax.unwrap_or(sample_rate as f64 / 2.0);
    let (mlo, mhi) = (hz_to_mel(cfg.fmin), hz_to_mel(fmax));
    (1..=cfg.n_mels)
        .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Converts a waveform into log-Mel filterbank features.
pub fn extract_filterbank(
    signal: &AudioSignal,
    cfg: &FrontendConfig,
) -> Result<FeatureMatrix, FeatureError> {
    let (fmax, window, hop) = cfg.validate(signal.sample_rate)?;
    let n = signal.samples.len();
    let n_frames = frame_count(n, window, hop).ok_or(FeatureError::TooShort {
        samples: n,
        window,
    })?;

    let n_fft = window.next_power_of_two();
    let hann: Vec<f64> = (0..window)
        .map(|i| {
            0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (window - 1) as f64).cos()
        })
        .collect();
    let filters = mel_filterbank(cfg.n_mels, n_fft, signal.sample_rate, cfg.fmin, fmax);

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let n_bins = n_fft / 2 + 1;

    let mut values = Vec::with_capacity(n_frames * cfg.n_mels);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0f64; n_bins];
    for frame in 0..n_frames {
        let start = frame * hop;
        for (i, c) in buf.iter_mut().enumerate() {
            let s = if i < window {
                signal.samples[start + i] as f64 * hann[i]
            } else {
                0.0
            };
            *c = Complex::new(s, 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        for (first, weights) in &filters {
            let mut e = 0.0;
            for (j, w) in weights.iter().enumerate() {
                e += w * power[first + j];
            }
            values.push(e.max(cfg.log_floor).ln() as f32);
        }
    }

    if cfg.mean_subtract {
        for mel in 0..cfg.n_mels {
            let mean: f32 = (0..n_frames).map(|f| values[f * cfg.n_mels + mel]).sum::<f32>()
                / n_frames as f32;
            for f in 0..n_frames {
                values[f * cfg.n_mels + mel] -= mean;
            }
        }
    }

    Ok(FeatureMatrix {
        values,
        n_frames,
        n_mels: cfg.n_mels,
        hop_ms: cfg.hop_ms,
    })
}

/// First-order regression deltas over `±window` frames with edge replication.
pub fn compute_deltas(feats: &FeatureMatrix, window: usize) -> Result<FeatureMatrix, FeatureError> {
    if window == 0 {
        return Err(FeatureError::InvalidConfig("delta window must be ≥ 1".into()));
    }
    if window >= feats.n_frames {
        return Err(FeatureError::DeltaWindow {
            window,
            n_frames: feats.n_frames,
        });
    }
    let denom: f64 = 2.0 * (1..=window).map(|n| (n * n) as f64).sum::<f64>();
    let clamp = |t: isize| -> usize { t.clamp(0, feats.n_frames as isize - 1) as usize };
    let mut values = Vec::with_capacity(feats.values.len());
    for t in 0..feats.n_frames as isize {
        for mel in 0..feats.n_mels {
            let mut num = 0.0f64;
            for n in 1..=window as isize {
                let ahead = feats.values[clamp(t + n) * feats.n_mels + mel] as f64;
                let behind = feats.values[clamp(t - n) * feats.n_mels + mel] as f64;
                num += n as f64 * (ahead - behind);
            }
            values.push((num / denom) as f32);
        }
    }
    Ok(FeatureMatrix {
        values,
        n_frames: feats.n_frames,
        n_mels: feats.n_mels,
        hop_ms: feats.hop_ms,
    })
}

/// Concatenates two frame-aligned matrices along the coefficient axis,
/// e.g. base features with their deltas.
pub fn stack_features(
    base: &FeatureMatrix,
    extra: &FeatureMatrix,
) -> Result<FeatureMatrix, FeatureError> {
    if base.n_frames != extra.n_frames {
        return Err(FeatureError::FrameCountMismatch {
            a: base.n_frames,
            b: extra.n_frames,
        });
    }
    let n_mels = base.n_mels + extra.n_mels;
    let mut values = Vec::with_capacity(base.n_frames * n_mels);
    for f in 0..base.n_frames {
        values.extend_from_slice(base.row(f));
        values.extend_from_slice(extra.row(f));
    }
    Ok(FeatureMatrix {
        values,
        n_frames: base.n_frames,
        n_mels,
        hop_ms: base.hop_ms,
    })
}

fn wav_err(path: &Path, reason: impl Into<String>) -> FeatureError {
    FeatureError::BadWav {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Reads a mono 16-bit PCM little-endian WAV file.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioSignal, FeatureError> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 12];
    r.read_exact(&mut header)?;
    if &header[0..4] != b"RIFF" || &header[8..12] != b"WAVE" {
        return Err(wav_err(path, "missing RIFF/WAVE header"));
    }

    let mut sample_rate = None;
    let mut data: Option<Vec<u8>> = None;
    let mut chunk = [0u8; 8];
    while r.read_exact(&mut chunk).is_ok() {
        let id = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let size = u32::from_le_bytes([chunk[4], chunk[5], chunk[6], chunk[7]]) as usize;
        match &id {
            b"fmt " => {
                let mut fmt = vec![0u8; size];
                r.read_exact(&mut fmt)?;
                if fmt.len() < 16 {
                    return Err(wav_err(path, "truncated fmt chunk"));
                }
                let codec = u16::from_le_bytes([fmt[0], fmt[1]]);
                let channels = u16::from_le_bytes([fmt[2], fmt[3]]);
                let rate = u32::from_le_bytes([fmt[4], fmt[5], fmt[6], fmt[7]]);
                let bits = u16::from_le_bytes([fmt[14], fmt[15]]);
                if codec != 1 {
                    return Err(wav_err(path, format!("codec {codec}, want PCM")));
                }
                if channels != 1 {
                    return Err(wav_err(path, format!("{channels} channels, want mono")));
                }
                if bits != 16 {
                    return Err(wav_err(path, format!("{bits}-bit samples, want 16")));
                }
                sample_rate = Some(rate);
            }
            b"data" => {
                let mut bytes = vec![0u8; size];
                r.read_exact(&mut bytes)?;
                data = Some(bytes);
            }
            _ => {
                // Skip unknown chunks (word-aligned).
                let mut skip = vec![0u8; size + (size & 1)];
                r.read_exact(&mut skip)?;
            }
        }
    }

    let sample_rate = sample_rate.ok_or_else(|| wav_err(path, "no fmt chunk"))?;
    let bytes = data.ok_or_else(|| wav_err(path, "no data chunk"))?;
    let samples = bytes
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32 / 32768.0)
        .collect();
    AudioSignal::new(samples, sample_rate)
}

/// Writes a mono 16-bit PCM WAV file; samples are clamped to `[-1, 1]`.
pub fn write_wav(path: impl AsRef<Path>, signal: &AudioSignal) -> Result<(), FeatureError> {
    let mut w = BufWriter::new(File::create(path)?);
    let data_len = (signal.samples.len() * 2) as u32;
    w.write_all(b"RIFF")?;
    w.write_all(&(36 + data_len).to_le_bytes())?;
    w.write_all(b"WAVE")?;
    w.write_all(b"fmt ")?;
    w.write_all(&16u32.to_le_bytes())?;
    w.write_all(&1u16.to_le_bytes())?; // PCM
    w.write_all(&1u16.to_le_bytes())?; // mono
    w.write_all(&signal.sample_rate.to_le_bytes())?;
    w.write_all(&(signal.sample_rate * 2).to_le_bytes())?; // byte rate
    w.write_all(&2u16.to_le_bytes())?; // block align
    w.write_all(&16u16.to_le_bytes())?; // bits per sample
    w.write_all(b"data")?;
    w.write_all(&data_len.to_le_bytes())?;
    for &s in &signal.samples {
        let v = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

const FEATURE_MAGIC: &[u8; 4] = b"FBK1";

/// Writes a feature matrix: magic, frame/coefficient counts, then row-major
/// single-precision values, all little-endian.
pub fn write_features(path: impl AsRef<Path>, feats: &FeatureMatrix) -> Result<(), FeatureError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&(feats.n_frames as u32).to_le_bytes())?;
    w.write_all(&(feats.n_mels as u32).to_le_bytes())?;
    for v in &feats.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a feature matrix written by [`write_features`].
pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMatrix, FeatureError> {
    let path = path.as_ref();
    let err = |reason: &str| FeatureError::BadFeatureFile {
        path: path.display().to_string(),
        reason: reason.into(),
    };
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(err("bad magic"));
    }
    let mut counts = [0u8; 8];
    r.read_exact(&mut counts)?;
    let n_frames = u32::from_le_bytes(counts[0..4].try_into().unwrap()) as usize;
    let n_mels = u32::from_le_bytes(counts[4..8].try_into().unwrap()) as usize;
    if n_frames == 0 || n_mels == 0 {
        return Err(err("zero frames or coefficients"));
    }
    let mut bytes = vec![0u8; n_frames * n_mels * 4];
    r.read_exact(&mut bytes).map_err(|_| err("truncated values"))?;
    let values = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(FeatureMatrix {
        values,
        n_frames,
        n_mels,
        hop_ms: 10,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, secs: f64, rate: u32, amp: f32) -> AudioSignal {
        let n = (secs * rate as f64) as usize;
        let samples = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin() as f32)
            .collect();
        AudioSignal::new(samples, rate).unwrap()
    }

    #[test]
    fn one_second_of_silence_is_98_floored_frames() {
        let signal = AudioSignal::new(vec![0.0; 8000], 8000).unwrap();
        let feats = extract_filterbank(&signal, &FrontendConfig::default()).unwrap();
        assert_eq!(feats.n_frames(), 98);
        assert_eq!(feats.n_mels(), 80);
        let floor = (1e-10f64).ln() as f32;
        assert!(feats.values().iter().all(|&v| v == floor));
    }

    #[test]
    fn frame_count_formula_holds_across_lengths() {
        for (rate, window_ms, hop_ms) in [(8000u32, 25u32, 10u32), (16000, 25, 10), (8000, 20, 20)]
        {
            let window = (rate * window_ms / 1000) as usize;
            let hop = (rate * hop_ms / 1000) as usize;
            for len in [window, window + 1, window + hop - 1, window + hop, 8000, 12345] {
                let cfg = FrontendConfig {
                    window_ms,
                    hop_ms,
                    n_mels: 12,
                    ..FrontendConfig::default()
                };
                let signal = AudioSignal::new(vec![0.01; len], rate).unwrap();
                let feats = extract_filterbank(&signal, &cfg).unwrap();
                assert_eq!(feats.n_frames(), (len - window) / hop + 1, "len {len}");
            }
        }
    }

    #[test]
    fn trailing_partial_window_is_dropped_not_padded() {
        let base = sine(440.0, 1.0, 8000, 0.5);
        // 39 extra samples are not enough to complete the next window
        // (next start 7840 would need samples through 8039).
        let mut extended = base.samples().to_vec();
        extended.extend(std::iter::repeat(0.33).take(39));
        let longer = AudioSignal::new(extended, 8000).unwrap();
        let cfg = FrontendConfig::default();
        let a = extract_filterbank(&base, &cfg).unwrap();
        let b = extract_filterbank(&longer, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_short_signal_is_rejected() {
        let signal = AudioSignal::new(vec![0.0; 199], 8000).unwrap();
        assert!(matches!(
            extract_filterbank(&signal, &FrontendConfig::default()),
            Err(FeatureError::TooShort { samples: 199, window: 200 })
        ));
    }

    #[test]
    fn non_finite_samples_are_rejected() {
        assert!(matches!(
            AudioSignal::new(vec![0.0, f32::NAN], 8000),
            Err(FeatureError::NonFiniteSample(1))
        ));
    }

    /// Straight-line oracle: naive DFT power spectrum plus freshly-derived
    /// triangular Mel weights, no shared code with the front-end.
    fn oracle_frame(samples: &[f32], rate: u32, n_mels: usize, floor: f64) -> Vec<f64> {
        let window = samples.len();
        let n_fft = window.next_power_of_two();
        let hann: Vec<f64> = (0..window)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (window as f64 - 1.0)).cos())
            .collect();
        let mut power = Vec::new();
        for k in 0..=n_fft / 2 {
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for n in 0..n_fft {
                let x = if n < window { samples[n] as f64 * hann[n] } else { 0.0 };
                let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / n_fft as f64;
                re += x * ang.cos();
                im += x * ang.sin();
            }
            power.push(re * re + im * im);
        }
        let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
        let imel = |m: f64| 700.0 * (10.0f64.powf(m / 2595.0) - 1.0);
        let hi_mel = mel(rate as f64 / 2.0);
        let edge: Vec<f64> = (0..n_mels + 2)
            .map(|i| imel(hi_mel * i as f64 / (n_mels + 1) as f64))
            .collect();
        (0..n_mels)
            .map(|m| {
                let mut e = 0.0;
                for (k, p) in power.iter().enumerate() {
                    let f = k as f64 * rate as f64 / n_fft as f64;
                    let w = if f >= edge[m] && f <= edge[m + 1] && edge[m + 1] > edge[m] {
                        (f - edge[m]) / (edge[m + 1] - edge[m])
                    } else if f > edge[m + 1] && f <= edge[m + 2] {
                        (edge[m + 2] - f) / (edge[m + 2] - edge[m + 1])
                    } else {
                        0.0
                    };
                    e += w * p;
                }
                e.max(floor).ln()
            })
            .collect()
    }

    #[test]
    fn pure_tone_matches_independent_dft_oracle() {
        let rate = 8000;
        let signal = sine(1000.0, 0.1, rate, 0.8);
        let cfg = FrontendConfig {
            n_mels: 40,
            ..FrontendConfig::default()
        };
        let feats = extract_filterbank(&signal, &cfg).unwrap();

        // Oracle on the third frame (an arbitrary interior frame).
        let frame = 3;
        let start = frame * 80;
        let oracle = oracle_frame(&signal.samples()[start..start + 200], rate, 40, 1e-10);
        let got = feats.row(frame);
        let oracle_argmax = oracle
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let got_argmax = got
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(got_argmax, oracle_argmax);
        for (g, o) in got.iter().zip(&oracle) {
            assert!((*g as f64 - o).abs() < 1e-3, "{g} vs {o}");
        }

        // And that filter is the one whose center sits nearest 1 kHz.
        let centers = filter_centers_hz(&cfg, rate);
        let nearest = centers
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (a.1 - 1000.0).abs().partial_cmp(&(b.1 - 1000.0).abs()).unwrap()
            })
            .unwrap()
            .0;
        for f in 0..feats.n_frames() {
            let row = feats.row(f);
            let am = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(am, nearest, "frame {f}");
        }
    }

    #[test]
    fn doubling_amplitude_adds_log_four_to_unfloored_cells() {
        let quiet = sine(700.0, 0.2, 8000, 0.2);
        let loud = sine(700.0, 0.2, 8000, 0.4);
        let cfg = FrontendConfig {
            n_mels: 30,
            ..FrontendConfig::default()
        };
        let a = extract_filterbank(&quiet, &cfg).unwrap();
        let b = extract_filterbank(&loud, &cfg).unwrap();
        let floor = (1e-10f64).ln() as f32;
        let shift = (4.0f64).ln() as f32;
        let mut compared = 0;
        for (x, y) in a.values().iter().zip(b.values()) {
            if *x > floor + 1.0 && *y > floor + 1.0 {
                assert!((y - x - shift).abs() < 1e-4, "{x} -> {y}");
                compared += 1;
            }
        }
        assert!(compared > 100, "only {compared} cells above the floor");
    }

    #[test]
    fn log_floor_bounds_every_cell() {
        let signal = sine(300.0, 0.3, 8000, 0.05);
        let feats = extract_filterbank(&signal, &FrontendConfig::default()).unwrap();
        let floor = (1e-10f64).ln() as f32;
        assert!(feats.values().iter().all(|&v| v >= floor));
    }

    #[test]
    fn constant_features_have_zero_deltas() {
        let feats = FeatureMatrix::from_rows(vec![2.5; 10 * 4], 4, 10);
        let deltas = compute_deltas(&feats, 2).unwrap();
        assert_eq!(deltas.n_frames(), 10);
        assert!(deltas.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ramp_deltas_match_the_regression_formula() {
        let slope = 0.75f32;
        let n_frames = 12;
        let values: Vec<f32> = (0..n_frames).flat_map(|t| [t as f32 * slope; 3]).collect();
        let feats = FeatureMatrix::from_rows(values.clone(), 3, 10);
        let window = 2;
        let deltas = compute_deltas(&feats, window).unwrap();

        // Fresh evaluation of the ±window regression with index clamping.
        let denom = 2.0 * (1..=window).map(|n| (n * n) as f64).sum::<f64>();
        for t in 0..n_frames as isize {
            let mut num = 0.0;
            for n in 1..=window as isize {
                let hi = (t + n).clamp(0, n_frames as isize - 1) as usize;
                let lo = (t - n).clamp(0, n_frames as isize - 1) as usize;
                num += n as f64 * (values[hi * 3] - values[lo * 3]) as f64;
            }
            let expected = (num / denom) as f32;
            assert!((deltas.row(t as usize)[0] - expected).abs() < 1e-6);
        }
        // Away from the clamped edges the delta is exactly the slope.
        for t in window..n_frames - window {
            assert!((deltas.row(t)[1] - slope).abs() < 1e-6);
        }
    }

    #[test]
    fn stacking_base_and_deltas_doubles_the_dimension() {
        let feats = FeatureMatrix::from_rows((0..40).map(|v| v as f32).collect(), 4, 10);
        let deltas = compute_deltas(&feats, 1).unwrap();
        let stacked = stack_features(&feats, &deltas).unwrap();
        assert_eq!(stacked.n_mels(), 8);
        assert_eq!(stacked.n_frames(), 10);
        assert_eq!(&stacked.row(3)[..4], feats.row(3));
        assert_eq!(&stacked.row(3)[4..], deltas.row(3));
    }

    #[test]
    fn oversized_delta_window_is_rejected() {
        let feats = FeatureMatrix::from_rows(vec![0.0; 5 * 2], 2, 10);
        assert!(matches!(
            compute_deltas(&feats, 5),
            Err(FeatureError::DeltaWindow { window: 5, n_frames: 5 })
        ));
    }

    #[test]
    fn wav_roundtrip_preserves_samples_to_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tone.wav");
        let signal = sine(440.0, 0.05, 16000, 0.9);
        write_wav(&path, &signal).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate(), 16000);
        assert_eq!(back.samples().len(), signal.samples().len());
        for (a, b) in signal.samples().iter().zip(back.samples()) {
            assert!((a - b).abs() < 1.0 / 32000.0);
        }
    }

    #[test]
    fn truncated_wav_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wav");
        std::fs::write(&path, b"RIFFxxxxWAVEfmt").unwrap();
        assert!(read_wav(&path).is_err());
    }

    #[test]
    fn feature_file_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("utt.fbk");
        let signal = sine(900.0, 0.08, 8000, 0.6);
        let feats = extract_filterbank(&signal, &FrontendConfig::default()).unwrap();
        write_features(&path, &feats).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back.values(), feats.values());
        assert_eq!(back.n_frames(), feats.n_frames());
        assert_eq!(back.n_mels(), 80);
    }

    #[test]
    fn corrupt_feature_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.fbk");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(read_features(&path).is_err());
    }

    #[test]
    fn mean_subtraction_zeroes_the_per_coefficient_mean() {
        let signal = sine(500.0, 0.2, 8000, 0.4);
        let cfg = FrontendConfig {
            mean_subtract: true,
            n_mels: 20,
            ..FrontendConfig::default()
        };
        let feats = extract_filterbank(&signal, &cfg).unwrap();
        for mel in 0..20 {
            let mean: f32 = (0..feats.n_frames())
                .map(|f| feats.row(f)[mel])
                .sum::<f32>()
                / feats.n_frames() as f32;
            assert!(mean.abs() < 1e-4);
        }
    }
}
