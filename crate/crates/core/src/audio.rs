//! Audio ingestion and log-mel featurization.
//!
//! Conventions: HTK mel scale `m = 2595 log10(1 + f/700)`, filters spanning
//! 0 Hz to Nyquist, periodic Hann window, centered STFT with reflect
//! padding of `fft_window / 2` on each side, power spectrum, and a
//! `log(x + 1e-10)` floor.

use std::io::Cursor;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use thiserror::Error;

/// Added inside the log so silence maps to `ln(1e-10)`.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("audio io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid mel config: {0}")]
    ConfigError(String),
    #[error("clip is {clip} Hz but config expects {config} Hz")]
    SampleRateMismatch { clip: u32, config: u32 },
    #[error("empty audio clip")]
    EmptyClip,
}

/// Mono samples in `[-1, 1]` at a fixed rate.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveformClip {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl WaveformClip {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self, AudioError> {
        if samples.is_empty() {
            return Err(AudioError::EmptyClip);
        }
        if sample_rate_hz == 0 {
            return Err(AudioError::UnsupportedFormat("zero sample rate".into()));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelConfig {
    pub n_mels: usize,
    pub sample_rate_hz: u32,
    pub hop_length: usize,
    pub fft_window: usize,
    pub max_length_s: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: 64,
            sample_rate_hz: 48_000,
            hop_length: 480,
            fft_window: 1024,
            max_length_s: 10.0,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<(), AudioError> {
        if self.n_mels == 0 || self.hop_length == 0 || self.fft_window == 0 || self.sample_rate_hz == 0 {
            return Err(AudioError::ConfigError("all sizes must be positive".into()));
        }
        if self.fft_window < self.hop_length {
            return Err(AudioError::ConfigError(format!(
                "fft_window {} < hop_length {}",
                self.fft_window, self.hop_length
            )));
        }
        if self.n_mels >= self.fft_window / 2 {
            return Err(AudioError::ConfigError(format!(
                "n_mels {} too large for fft_window {}",
                self.n_mels, self.fft_window
            )));
        }
        Ok(())
    }

    pub fn n_freq_bins(&self) -> usize {
        self.fft_window / 2 + 1
    }

    /// Samples in a `max_length_s` window.
    pub fn max_samples(&self) -> usize {
        (self.max_length_s * self.sample_rate_hz as f64).round() as usize
    }
}

/// Log-mel frames, `T x n_mels`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Array2<f64>,
    pub config: MelConfig,
}

/// Reads a RIFF/WAVE PCM file (16-bit integer or 32-bit float), averaging
/// channels down to mono.
pub fn load_wav(path: &Path) -> Result<WaveformClip, AudioError> {
    let bytes = std::fs::read(path)?;
    decode_wav(&bytes)
}

pub fn decode_wav(bytes: &[u8]) -> Result<WaveformClip, AudioError> {
    let reader = hound::WavReader::new(Cursor::new(bytes)).map_err(wav_err)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(AudioError::UnsupportedFormat("zero channels".into()));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(wav_err)?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| (v as f64).clamp(-1.0, 1.0)))
            .collect::<Result<_, _>>()
            .map_err(wav_err)?,
        (fmt, bits) => {
            return Err(AudioError::UnsupportedFormat(format!("{fmt:?} {bits}-bit")));
        }
    };
    let samples: Vec<f64> = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    WaveformClip::new(samples, spec.sample_rate)
}

fn wav_err(e: hound::Error) -> AudioError {
    match e {
        hound::Error::IoError(io) => AudioError::Io(io),
        other => AudioError::UnsupportedFormat(other.to_string()),
    }
}

/// Encodes a clip as 16-bit mono PCM WAV.
pub fn encode_wav_i16(clip: &WaveformClip) -> Vec<u8> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut cur = Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut cur, spec).expect("in-memory writer");
        for &s in &clip.samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            w.write_sample(v).expect("in-memory write");
        }
        w.finalize().expect("in-memory finalize");
    }
    cur.into_inner()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropMode {
    /// Random offset drawn from a generator seeded with the given value.
    TrainRandom(u64),
    /// Centered window.
    EvalCenter,
}

/// Crops or zero-pads to exactly `max_length_s * sample_rate` samples.
/// Padding is split evenly, with any odd sample on the right.
pub fn crop_or_pad(clip: &WaveformClip, max_length_s: f64, mode: CropMode) -> WaveformClip {
    let target = (max_length_s * clip.sample_rate_hz as f64).round() as usize;
    let len = clip.samples.len();
    let samples = if len == target {
        clip.samples.clone()
    } else if len < target {
        let left = (target - len) / 2;
        let mut out = vec![0.0; target];
        out[left..left + len].copy_from_slice(&clip.samples);
        out
    } else {
        let slack = len - target;
        let start = match mode {
            CropMode::EvalCenter => slack / 2,
            CropMode::TrainRandom(seed) => ChaCha8Rng::seed_from_u64(seed).random_range(0..=slack),
        };
        clip.samples[start..start + target].to_vec()
    };
    WaveformClip {
        samples,
        sample_rate_hz: clip.sample_rate_hz,
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Filter center frequencies in Hz, `n_mels` of them.
pub fn mel_center_frequencies(config: &MelConfig) -> Vec<f64> {
    mel_edges(config)[1..=config.n_mels].to_vec()
}

fn mel_edges(config: &MelConfig) -> Vec<f64> {
    let top = hz_to_mel(config.sample_rate_hz as f64 / 2.0);
    let n = config.n_mels + 2;
    (0..n)
        .map(|i| mel_to_hz(top * i as f64 / (n - 1) as f64))
        .collect()
}

/// Triangular HTK filterbank, `n_mels x (fft_window / 2 + 1)`.
pub fn mel_filterbank(config: &MelConfig) -> Result<Array2<f64>, AudioError> {
    config.validate()?;
    let edges = mel_edges(config);
    let n_bins = config.n_freq_bins();
    let bin_hz = config.sample_rate_hz as f64 / config.fft_window as f64;
    let mut fb = Array2::zeros((config.n_mels, n_bins));
    for m in 0..config.n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let up = (f - lo) / (center - lo);
            let down = (hi - f) / (hi - center);
            fb[[m, k]] = up.min(down).max(0.0);
        }
        if fb.row(m).sum() <= 0.0 {
            return Err(AudioError::ConfigError(format!(
                "mel band {m} ({lo:.1}-{hi:.1} Hz) covers no FFT bin"
            )));
        }
    }
    Ok(fb)
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Index into a signal of length `len` under reflect padding (edge sample
/// not repeated), valid for any offset.
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

/// Reusable STFT + mel projection for one config.
pub struct MelExtractor {
    config: MelConfig,
    filterbank: Array2<f64>,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl MelExtractor {
    pub fn new(config: MelConfig) -> Result<Self, AudioError> {
        let filterbank = mel_filterbank(&config)?;
        let fft = FftPlanner::new().plan_fft_forward(config.fft_window);
        Ok(Self {
            window: hann(config.fft_window),
            filterbank,
            fft,
            config,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.config
    }

    pub fn filterbank(&self) -> &Array2<f64> {
        &self.filterbank
    }

    /// Power spectrogram, `T x (fft_window / 2 + 1)`.
    pub fn power_spectrogram(&self, clip: &WaveformClip) -> Result<Array2<f64>, AudioError> {
        if clip.sample_rate_hz != self.config.sample_rate_hz {
            return Err(AudioError::SampleRateMismatch {
                clip: clip.sample_rate_hz,
                config: self.config.sample_rate_hz,
            });
        }
        let len = clip.samples.len();
        if len == 0 {
            return Err(AudioError::EmptyClip);
        }
        let n_fft = self.config.fft_window;
        let hop = self.config.hop_length;
        let pad = (n_fft / 2) as isize;
        let n_frames = 1 + len / hop;
        let n_bins = self.config.n_freq_bins();
        let mut power = Array2::zeros((n_frames, n_bins));
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..n_frames {
            let start = (t * hop) as isize - pad;
            for (i, slot) in buf.iter_mut().enumerate() {
                let x = clip.samples[reflect_index(start + i as isize, len)];
                *slot = Complex::new(x * self.window[i], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (k, c) in buf[..n_bins].iter().enumerate() {
                power[[t, k]] = c.norm_sqr();
            }
        }
        Ok(power)
    }

    pub fn compute(&self, clip: &WaveformClip) -> Result<MelSpectrogram, AudioError> {
        let power = self.power_spectrogram(clip)?;
        let frames = power.dot(&self.filterbank.t()).mapv(|x| (x + LOG_FLOOR).ln());
        Ok(MelSpectrogram {
            frames,
            config: self.config,
        })
    }
}

/// Log-mel spectrogram with `T = 1 + floor(L / hop)` frames.
pub fn mel_spectrogram(clip: &WaveformClip, config: &MelConfig) -> Result<MelSpectrogram, AudioError> {
    MelExtractor::new(*config)?.compute(clip)
}

/// Linear-interpolation resampling; output length `round(L * target / source)`.
pub fn resample_linear(clip: &WaveformClip, target_hz: u32) -> WaveformClip {
    assert!(target_hz > 0, "target rate must be positive");
    if target_hz == clip.sample_rate_hz {
        return clip.clone();
    }
    let len = clip.samples.len();
    let ratio = clip.sample_rate_hz as f64 / target_hz as f64;
    let out_len = ((len as f64) / ratio).round().max(1.0) as usize;
    let samples = (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let i0 = pos.floor() as usize;
            if i0 + 1 >= len {
                clip.samples[len - 1]
            } else {
                let frac = pos - i0 as f64;
                clip.samples[i0] * (1.0 - frac) + clip.samples[i0 + 1] * frac
            }
        })
        .collect();
    WaveformClip {
        samples,
        sample_rate_hz: target_hz,
    }
}

/// Per-band time average, standardized across bands (population std).
/// A constant input maps to all zeros.
pub fn audio_feature_vector(spec: &MelSpectrogram) -> Vec<f64> {
    let means = spec
        .frames
        .mean_axis(Axis(0))
        .map(|m| m.to_vec())
        .unwrap_or_else(|| vec![0.0; spec.config.n_mels]);
    standardize(&means)
}

/// Zero mean, unit (population) variance; near-constant input gives zeros.
pub(crate) fn standardize(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 * mean.abs().max(1.0) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - mean) / std).collect()
}

/// Evaluation-path audio features: resample to the config rate, center
/// crop/pad to `max_length_s`, log-mel, band statistics.
pub fn featurize_clip(extractor: &MelExtractor, clip: &WaveformClip) -> Result<Vec<f64>, AudioError> {
    let cfg = extractor.config();
    let clip = resample_linear(clip, cfg.sample_rate_hz);
    let clip = crop_or_pad(&clip, cfg.max_length_s, CropMode::EvalCenter);
    let mel = extractor.compute(&clip)?;
    Ok(audio_feature_vector(&mel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn sine(freq: f64, sr: u32, seconds: f64, amp: f64) -> WaveformClip {
        let n = (seconds * sr as f64) as usize;
        let samples = (0..n)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / sr as f64).sin())
            .collect();
        WaveformClip::new(samples, sr).unwrap()
    }

    fn write_wav(path: &Path, spec: hound::WavSpec, frames: &[Vec<f64>]) {
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for frame in frames {
            for &s in frame {
                match spec.sample_format {
                    hound::SampleFormat::Int => w.write_sample(s as i16).unwrap(),
                    hound::SampleFormat::Float => w.write_sample(s as f32).unwrap(),
                }
            }
        }
        w.finalize().unwrap();
    }

    #[test]
    fn silence_wav_loads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 48_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        write_wav(&p, spec, &vec![vec![0.0]; 48_000]);
        let clip = load_wav(&p).unwrap();
        assert_eq!(clip.sample_rate_hz, 48_000);
        assert_eq!(clip.samples.len(), 48_000);
        assert!(clip.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn stereo_channels_are_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("st.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 44_100,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        write_wav(&p, spec, &vec![vec![0.5, -0.5]; 100]);
        let clip = load_wav(&p).unwrap();
        assert_eq!(clip.samples.len(), 100);
        assert!(clip.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn full_scale_i16_sample() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("fs.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        write_wav(&p, spec, &[vec![32767.0]]);
        let clip = load_wav(&p).unwrap();
        assert_eq!(clip.samples[0], 32767.0 / 32768.0);
        assert!((clip.samples[0] - 0.99997).abs() < 1e-5);
    }

    #[test]
    fn unsupported_formats_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u8.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8_000,
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        w.write_sample(5i32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(load_wav(&p), Err(AudioError::UnsupportedFormat(_))));
        assert!(matches!(decode_wav(b"not a wav file"), Err(AudioError::UnsupportedFormat(_))));
        assert!(matches!(load_wav(&dir.path().join("nope.wav")), Err(AudioError::Io(_))));
    }

    #[test]
    fn wav_encode_round_trip() {
        let clip = sine(440.0, 16_000, 0.1, 0.5);
        let back = decode_wav(&encode_wav_i16(&clip)).unwrap();
        assert_eq!(back.samples.len(), clip.samples.len());
        for (a, b) in back.samples.iter().zip(&clip.samples) {
            assert!((a - b).abs() < 1.0 / 16384.0);
        }
    }

    #[test]
    fn short_clip_is_centered_in_zeros() {
        let clip = WaveformClip::new(vec![1.0; 5 * 48_000], 48_000).unwrap();
        let out = crop_or_pad(&clip, 10.0, CropMode::EvalCenter);
        assert_eq!(out.samples.len(), 480_000);
        assert!(out.samples[..120_000].iter().all(|&s| s == 0.0));
        assert!(out.samples[120_000..360_000].iter().all(|&s| s == 1.0));
        assert!(out.samples[360_000..].iter().all(|&s| s == 0.0));
    }

    #[test]
    fn exact_length_is_unchanged() {
        let clip = sine(100.0, 48_000, 10.0, 0.3);
        let out = crop_or_pad(&clip, 10.0, CropMode::TrainRandom(3));
        assert_eq!(out, clip);
    }

    #[test]
    fn long_clip_center_crop_window() {
        let samples: Vec<f64> = (0..960_000).map(|i| i as f64 / 960_000.0).collect();
        let clip = WaveformClip::new(samples.clone(), 48_000).unwrap();
        let out = crop_or_pad(&clip, 10.0, CropMode::EvalCenter);
        assert_eq!(out.samples, samples[240_000..720_000]);
    }

    #[test]
    fn train_crop_is_seeded() {
        let samples: Vec<f64> = (0..960_000).map(|i| i as f64).collect();
        let clip = WaveformClip::new(samples, 48_000).unwrap();
        let a = crop_or_pad(&clip, 10.0, CropMode::TrainRandom(4));
        let b = crop_or_pad(&clip, 10.0, CropMode::TrainRandom(4));
        assert_eq!(a, b);
        // contiguous window of the original
        let start = a.samples[0] as usize;
        assert_eq!(a.samples[479_999] as usize, start + 479_999);
    }

    #[test]
    fn htk_fixed_point() {
        // 2595 * log10(1 + 1000/700) = 999.9856
        assert!((hz_to_mel(1000.0) - 1000.0).abs() < 0.05);
        assert!((hz_to_mel(1000.0) - 999.985_6).abs() < 1e-4);
        assert!((mel_to_hz(hz_to_mel(3210.0)) - 3210.0).abs() < 1e-9);
    }

    #[test]
    fn filterbank_rows_cover_and_centers_increase() {
        let cfg = MelConfig::default();
        let fb = mel_filterbank(&cfg).unwrap();
        assert_eq!(fb.dim(), (64, 513));
        assert!(fb.iter().all(|&w| w >= 0.0));
        for row in fb.rows() {
            assert!(row.sum() > 0.0);
        }
        // recompute centers from the inverse formula independently
        let top = 2595.0 * (1.0f64 + 24_000.0 / 700.0).log10();
        let centers: Vec<f64> = (1..=64)
            .map(|i| 700.0 * (10f64.powf(top * i as f64 / 65.0 / 2595.0) - 1.0))
            .collect();
        for w in centers.windows(2) {
            assert!(w[1] > w[0]);
        }
        for (a, b) in centers.iter().zip(mel_center_frequencies(&cfg)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn filterbank_on_flat_spectrum_is_positive() {
        let fb = mel_filterbank(&MelConfig::default()).unwrap();
        let flat = ndarray::Array1::<f64>::ones(513);
        assert!(fb.dot(&flat).iter().all(|&e| e > 0.0));
    }

    #[test]
    fn oversized_filterbank_is_config_error() {
        let cfg = MelConfig {
            n_mels: 600,
            ..MelConfig::default()
        };
        assert!(matches!(mel_filterbank(&cfg), Err(AudioError::ConfigError(_))));
        // legal by the size rule but the lowest bands fall between bins
        let cfg = MelConfig {
            n_mels: 200,
            fft_window: 512,
            hop_length: 256,
            ..MelConfig::default()
        };
        assert!(matches!(mel_filterbank(&cfg), Err(AudioError::ConfigError(_))));
    }

    #[test]
    fn ten_seconds_gives_1001_frames() {
        let clip = WaveformClip::new(vec![0.0; 480_000], 48_000).unwrap();
        let mel = mel_spectrogram(&clip, &MelConfig::default()).unwrap();
        assert_eq!(mel.frames.dim(), (1001, 64));
        let floor = LOG_FLOOR.ln();
        assert!(mel.frames.iter().all(|&v| v == floor));
    }

    #[test]
    fn pure_tone_lands_in_nearest_band() {
        let cfg = MelConfig::default();
        // cosine phase: even about sample 0, so the reflect-padded first
        // frame carries no kink
        let samples = (0..48_000)
            .map(|i| 0.5 * (2.0 * PI * 1000.0 * i as f64 / 48_000.0).cos())
            .collect();
        let clip = WaveformClip::new(samples, 48_000).unwrap();
        let mel = mel_spectrogram(&clip, &cfg).unwrap();
        let centers = mel_center_frequencies(&cfg);
        let nearest = centers
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 1000.0).abs().total_cmp(&(b.1 - 1000.0).abs()))
            .unwrap()
            .0;
        for row in mel.frames.rows() {
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax, nearest);
        }
    }

    #[test]
    fn rate_mismatch_is_error() {
        let clip = sine(100.0, 16_000, 0.1, 0.5);
        assert!(matches!(
            mel_spectrogram(&clip, &MelConfig::default()),
            Err(AudioError::SampleRateMismatch { clip: 16_000, config: 48_000 })
        ));
    }

    #[test]
    fn resample_constant_and_identity() {
        let c = WaveformClip::new(vec![0.25; 1600], 16_000).unwrap();
        let up = resample_linear(&c, 48_000);
        assert_eq!(up.samples.len(), 4800);
        assert!(up.samples.iter().all(|&s| s == 0.25));
        let s = sine(300.0, 48_000, 0.1, 0.5);
        assert_eq!(resample_linear(&s, 48_000), s);
    }

    #[test]
    fn resampled_sine_matches_analytic_reference() {
        let src = sine(100.0, 16_000, 1.0, 0.8);
        let up = resample_linear(&src, 48_000);
        assert!((up.duration_s() - src.duration_s()).abs() <= 1.0 / 16_000.0);
        let ideal: Vec<f64> = (0..up.samples.len())
            .map(|i| 0.8 * (2.0 * PI * 100.0 * i as f64 / 48_000.0).sin())
            .collect();
        let mx = up.samples.iter().sum::<f64>() / up.samples.len() as f64;
        let my = ideal.iter().sum::<f64>() / ideal.len() as f64;
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for (x, y) in up.samples.iter().zip(&ideal) {
            sxy += (x - mx) * (y - my);
            sxx += (x - mx).powi(2);
            syy += (y - my).powi(2);
        }
        assert!(sxy / (sxx * syy).sqrt() > 0.999);
    }

    #[test]
    fn feature_vector_of_silence_is_zero() {
        let clip = WaveformClip::new(vec![0.0; 48_000], 48_000).unwrap();
        let mel = mel_spectrogram(&clip, &MelConfig::default()).unwrap();
        let f = audio_feature_vector(&mel);
        assert_eq!(f.len(), 64);
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn feature_vector_is_standardized() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frames = Array2::from_shape_fn((50, 64), |_| rng.random_range(-20.0..5.0));
        let f = audio_feature_vector(&MelSpectrogram {
            frames,
            config: MelConfig::default(),
        });
        assert_eq!(f.len(), 64);
        let mean = f.iter().sum::<f64>() / 64.0;
        let std = (f.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 64.0).sqrt();
        assert!(mean.abs() < 1e-9);
        assert!((std - 1.0).abs() < 1e-6);
    }

    #[test]
    fn reflect_index_folds() {
        // signal a b c d -> reflect: ... c b | a b c d | c b a ...
        assert_eq!(reflect_index(-1, 4), 1);
        assert_eq!(reflect_index(-3, 4), 3);
        assert_eq!(reflect_index(4, 4), 2);
        assert_eq!(reflect_index(6, 4), 0);
        assert_eq!(reflect_index(-7, 4), 1);
        assert_eq!(reflect_index(5, 1), 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn frame_count_rule(len in 1usize..20_000) {
            let cfg = MelConfig::default();
            let clip = WaveformClip::new(vec![0.1; len], 48_000).unwrap();
            let mel = mel_spectrogram(&clip, &cfg).unwrap();
            prop_assert_eq!(mel.frames.nrows(), 1 + len / 480);
        }

        #[test]
        fn scaling_up_never_lowers_log_mel(seed in any::<u64>(), c in 1.01f64..10.0) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples: Vec<f64> = (0..4800).map(|_| rng.random_range(-0.1..0.1)).collect();
            let a = WaveformClip::new(samples.clone(), 48_000).unwrap();
            let b = WaveformClip::new(samples.iter().map(|s| s * c).collect(), 48_000).unwrap();
            let cfg = MelConfig::default();
            let ma = mel_spectrogram(&a, &cfg).unwrap();
            let mb = mel_spectrogram(&b, &cfg).unwrap();
            for (x, y) in ma.frames.iter().zip(mb.frames.iter()) {
                prop_assert!(y >= x);
            }
        }

        #[test]
        fn crop_or_pad_length_is_constant(len in 1usize..100_000, seed in any::<u64>()) {
            let clip = WaveformClip::new(vec![0.5; len], 8_000).unwrap();
            for mode in [CropMode::TrainRandom(seed), CropMode::EvalCenter] {
                prop_assert_eq!(crop_or_pad(&clip, 5.0, mode).samples.len(), 40_000);
            }
        }
    }
}
