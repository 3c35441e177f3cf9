use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
/// 25 ms analysis window.
pub const FRAME_LEN: usize = 400;
/// 10 ms hop.
pub const FRAME_HOP: usize = 160;
pub const N_FFT: usize = 512;
pub const MEL_BINS: usize = 80;
pub const LOG_FLOOR: f32 = 1e-10;
const MEL_FMAX: f64 = 8000.0;

/// `[frames, 80]` natural-log mel magnitudes at 100 frames per second.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFeatures(pub Tensor);

impl MelFeatures {
    pub fn num_frames(&self) -> usize {
        self.0.rows()
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters `[80, N_FFT / 2 + 1]` with corners equally spaced on the
/// mel scale from 0 Hz to 8 kHz. Each filter peaks at 1 at its centre.
pub fn mel_filterbank() -> Vec<Vec<f32>> {
    let bins = N_FFT / 2 + 1;
    let top = hz_to_mel(MEL_FMAX);
    let corners: Vec<f64> = (0..MEL_BINS + 2)
        .map(|i| mel_to_hz(top * i as f64 / (MEL_BINS + 1) as f64))
        .collect();
    (0..MEL_BINS)
        .map(|m| {
            let (lo, mid, hi) = (corners[m], corners[m + 1], corners[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * SAMPLE_RATE as f64 / N_FFT as f64;
                    let w = if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    };
                    w as f32
                })
                .collect()
        })
        .collect()
}

/// Periodic Hann window.
fn hann() -> Vec<f32> {
    (0..FRAME_LEN)
        .map(|n| {
            let x = std::f64::consts::TAU * n as f64 / FRAME_LEN as f64;
            (0.5 - 0.5 * x.cos()) as f32
        })
        .collect()
}

/// Log-mel features of 16 kHz mono samples in `[-1, 1]`.
///
/// Frames are `(N − 400) / 160 + 1`; inputs shorter than one window are
/// zero-padded to one frame.
pub fn extract_audio_features(samples: &[f32], sample_rate: u32) -> Result<MelFeatures> {
    if sample_rate != SAMPLE_RATE {
        return Err(Error::InvalidInput(format!(
            "sample rate {sample_rate} Hz; only {SAMPLE_RATE} Hz is accepted"
        )));
    }
    if samples.is_empty() {
        return Err(Error::InvalidInput("empty waveform".into()));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput(
            "waveform has non-finite samples".into(),
        ));
    }
    let mut padded;
    let samples = if samples.len() < FRAME_LEN {
        padded = samples.to_vec();
        padded.resize(FRAME_LEN, 0.0);
        &padded[..]
    } else {
        samples
    };
    let frames = (samples.len() - FRAME_LEN) / FRAME_HOP + 1;
    let window = hann();
    let filters = mel_filterbank();
    let fft: Arc<dyn Fft<f32>> = FftPlanner::new().plan_fft_forward(N_FFT);
    let bins = N_FFT / 2 + 1;

    let mut out = Vec::with_capacity(frames * MEL_BINS);
    let mut buf = vec![Complex::new(0.0f32, 0.0); N_FFT];
    let mut mag = vec![0.0f32; bins];
    for f in 0..frames {
        let chunk = &samples[f * FRAME_HOP..f * FRAME_HOP + FRAME_LEN];
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < FRAME_LEN {
                Complex::new(chunk[i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (m, b) in mag.iter_mut().zip(&buf) {
            *m = b.norm();
        }
        for filt in &filters {
            let e: f32 = filt.iter().zip(&mag).map(|(w, m)| w * m).sum();
            out.push(e.max(LOG_FLOOR).ln());
        }
    }
    Ok(MelFeatures(Tensor::new(&[frames, MEL_BINS], out)?))
}

/// Read a PCM16 mono 16 kHz WAV file as samples in `[-1, 1)`.
pub fn read_wav(path: &Path) -> Result<Vec<f32>> {
    let reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1
        || spec.sample_rate != SAMPLE_RATE
        || spec.bits_per_sample != 16
        || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(Error::InvalidInput(format!(
            "{}: need PCM16 mono {SAMPLE_RATE} Hz, found {}-bit {:?} with {} channel(s) at {} Hz",
            path.display(),
            spec.bits_per_sample,
            spec.sample_format,
            spec.channels,
            spec.sample_rate
        )));
    }
    reader
        .into_samples::<i16>()
        .map(|s| Ok(s? as f32 / 32768.0))
        .collect()
}

/// Write samples (clipped to `[-1, 1]`) as PCM16 mono 16 kHz.
pub fn write_wav(path: &Path, samples: &[f32]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut bytes = std::io::Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut bytes, spec)?;
        for &s in samples {
            w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
        }
        w.finalize()?;
    }
    crate::io::write_atomic(path, &bytes.into_inner())
}
