//! Deterministic log-mel audio features, one feature frame per video frame.
//!
//! 25 ms Hann windows at 16 kHz, frame starts chosen so the output rate
//! equals the video rate, triangular mel filters over 0..8 kHz, log energy,
//! then per-band mean/variance normalization over the clip. Bands whose
//! variance collapses (silence) normalize to zero instead of dividing by
//! nearly nothing.

use portray_grad::tensor::Tensor;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub const SUPPORTED_RATE: u32 = 16_000;
const WINDOW_SAMPLES: usize = 400; // 25 ms at 16 kHz
const FFT_SIZE: usize = 512;
const LOG_FLOOR: f64 = 1e-10;
const SILENCE_VAR: f64 = 1e-8;

/// Per-frame audio features `[T_a, D_a]` aligned to the video frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatureSeq {
    pub frames: Tensor,
}

impl AudioFeatureSeq {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bands(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let d = self.bands();
        &self.frames.data()[i * d..(i + 1) * d]
    }

    /// Rows `start..start + len`, zero-padded past the end.
    pub fn slice_padded(&self, start: usize, len: usize) -> Tensor {
        let d = self.bands();
        let mut out = Tensor::zeros(&[len, d]);
        for i in 0..len {
            if start + i < self.len() {
                out.data_mut()[i * d..(i + 1) * d].copy_from_slice(self.frame(start + i));
            }
        }
        out
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank: `bands` rows over `FFT_SIZE / 2 + 1` bins.
fn mel_filterbank(bands: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let nyquist = sample_rate as f64 / 2.0;
    let n_bins = FFT_SIZE / 2 + 1;
    let mel_max = hz_to_mel(nyquist);
    let edges: Vec<f64> =
        (0..bands + 2).map(|i| mel_to_hz(mel_max * i as f64 / (bands + 1) as f64)).collect();
    let bin_hz = sample_rate as f64 / FFT_SIZE as f64;
    (0..bands)
        .map(|b| {
            let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Frequency span (lo, hi) of one mel band's triangle.
pub fn mel_band_range(band: usize, bands: usize, sample_rate: u32) -> (f64, f64) {
    let mel_max = hz_to_mel(sample_rate as f64 / 2.0);
    let edge = |i: usize| mel_to_hz(mel_max * i as f64 / (bands + 1) as f64);
    (edge(band), edge(band + 2))
}

/// Log-mel band energies per frame, before normalization.
pub fn log_mel_frames(
    waveform: &[f64],
    sample_rate: u32,
    bands: usize,
    fps: usize,
) -> Result<Tensor> {
    if waveform.is_empty() {
        return Err(Error::Audio("empty waveform".into()));
    }
    if sample_rate != SUPPORTED_RATE {
        return Err(Error::Audio(format!("unsupported sample rate {sample_rate}")));
    }
    let n_frames = waveform.len() * fps / sample_rate as usize;
    if n_frames == 0 {
        return Err(Error::Audio(format!(
            "waveform too short: {} samples yields no {fps} fps frames",
            waveform.len()
        )));
    }
    let hann: Vec<f64> = (0..WINDOW_SAMPLES)
        .map(|i| {
            0.5 * (1.0 - (std::f64::consts::TAU * i as f64 / (WINDOW_SAMPLES - 1) as f64).cos())
        })
        .collect();
    let filters = mel_filterbank(bands, sample_rate);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(FFT_SIZE);

    let mut out = Tensor::zeros(&[n_frames, bands]);
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    for fi in 0..n_frames {
        let start =
            (fi as f64 * sample_rate as f64 / fps as f64).round() as usize;
        for (i, slot) in buf.iter_mut().enumerate() {
            let s = if i < WINDOW_SAMPLES {
                waveform.get(start + i).copied().unwrap_or(0.0) * hann[i]
            } else {
                0.0
            };
            *slot = Complex::new(s, 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> =
            buf[..FFT_SIZE / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        for (b, filter) in filters.iter().enumerate() {
            let energy: f64 = filter.iter().zip(&power).map(|(w, p)| w * p).sum();
            out.data_mut()[fi * bands + b] = (energy + LOG_FLOOR).ln();
        }
    }
    Ok(out)
}

/// Per-band mean/variance normalization over the clip; silent bands go to 0.
pub fn normalize_features(mut frames: Tensor) -> Tensor {
    let (n, d) = (frames.shape()[0], frames.shape()[1]);
    for b in 0..d {
        let mut mean = 0.0;
        for i in 0..n {
            mean += frames.data()[i * d + b];
        }
        mean /= n as f64;
        let mut var = 0.0;
        for i in 0..n {
            let v = frames.data()[i * d + b] - mean;
            var += v * v;
        }
        var /= n as f64;
        let scale = if var < SILENCE_VAR { 0.0 } else { 1.0 / var.sqrt() };
        for i in 0..n {
            let v = &mut frames.data_mut()[i * d + b];
            *v = (*v - mean) * scale;
        }
    }
    frames
}

/// Full front end: 16 kHz mono PCM to normalized per-frame features.
pub fn extract_audio_features(
    waveform: &[f64],
    sample_rate: u32,
    bands: usize,
    fps: usize,
) -> Result<AudioFeatureSeq> {
    let frames = log_mel_frames(waveform, sample_rate, bands, fps)?;
    Ok(AudioFeatureSeq { frames: normalize_features(frames) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_normalizes_to_zero() {
        let wave = vec![0.0; 16_000];
        let feats = extract_audio_features(&wave, 16_000, 32, 30).unwrap();
        assert!(feats.frames.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_second_yields_exactly_fps_frames() {
        let wave: Vec<f64> = (0..16_000).map(|i| (i as f64 * 0.1).sin() * 0.3).collect();
        let feats = extract_audio_features(&wave, 16_000, 32, 30).unwrap();
        assert_eq!(feats.len(), 30);
        assert_eq!(feats.bands(), 32);
        // hop-length arithmetic oracle: floor(n * fps / sr)
        let wave2 = vec![0.1; 40_000];
        let feats2 = extract_audio_features(&wave2, 16_000, 32, 30).unwrap();
        assert_eq!(feats2.len(), 40_000 * 30 / 16_000);
    }

    #[test]
    fn rejects_empty_and_bad_rate() {
        assert!(extract_audio_features(&[], 16_000, 32, 30).is_err());
        assert!(extract_audio_features(&[0.1; 16_000], 44_100, 32, 30).is_err());
        assert!(extract_audio_features(&[0.1; 10], 16_000, 32, 30).is_err());
    }

    #[test]
    fn pure_tone_peaks_in_covering_band() {
        let freq = 440.0;
        let wave: Vec<f64> = (0..16_000)
            .map(|i| (std::f64::consts::TAU * freq * i as f64 / 16_000.0).sin() * 0.7)
            .collect();
        let bands = 32;
        let pre = log_mel_frames(&wave, 16_000, bands, 30).unwrap();
        // average pre-normalization energy per band
        let n = pre.shape()[0];
        let mut avg = vec![0.0; bands];
        for i in 0..n {
            for b in 0..bands {
                avg[b] += pre.data()[i * bands + b] / n as f64;
            }
        }
        let argmax =
            (0..bands).max_by(|&a, &b| avg[a].partial_cmp(&avg[b]).unwrap()).unwrap();
        let (lo, hi) = mel_band_range(argmax, bands, 16_000);
        assert!(
            lo <= freq && freq <= hi,
            "peak band {argmax} covers {lo:.0}..{hi:.0} Hz, not {freq} Hz"
        );

        // DFT energy oracle: naive DFT of one window, same mel weighting,
        // same argmax
        let start = (5.0 * 16_000.0 / 30.0f64).round() as usize;
        let hann: Vec<f64> = (0..400)
            .map(|i| 0.5 * (1.0 - (std::f64::consts::TAU * i as f64 / 399.0).cos()))
            .collect();
        let mut power = vec![0.0f64; 257];
        #[allow(clippy::needless_range_loop)]
        for k in 0..257 {
            let (mut re, mut im) = (0.0, 0.0);
            for i in 0..512 {
                let s = if i < 400 { wave[start + i] * hann[i] } else { 0.0 };
                let ang = -std::f64::consts::TAU * k as f64 * i as f64 / 512.0;
                re += s * ang.cos();
                im += s * ang.sin();
            }
            power[k] = re * re + im * im;
        }
        let filters = mel_filterbank(bands, 16_000);
        let oracle: Vec<f64> = filters
            .iter()
            .map(|f| {
                (f.iter().zip(&power).map(|(w, p)| w * p).sum::<f64>() + LOG_FLOOR).ln()
            })
            .collect();
        let oracle_argmax =
            (0..bands).max_by(|&a, &b| oracle[a].partial_cmp(&oracle[b]).unwrap()).unwrap();
        assert_eq!(argmax, oracle_argmax);
        // the implementation's frame-5 energies match the naive DFT oracle
        for b in 0..bands {
            let got = pre.data()[5 * bands + b];
            assert!(
                (got - oracle[b]).abs() < 1e-6 * oracle[b].abs().max(1.0),
                "band {b}: {got} vs oracle {}",
                oracle[b]
            );
        }
    }

    #[test]
    fn deterministic() {
        let wave: Vec<f64> = (0..20_000).map(|i| ((i * i) % 97) as f64 / 97.0 - 0.5).collect();
        let a = extract_audio_features(&wave, 16_000, 32, 30).unwrap();
        let b = extract_audio_features(&wave, 16_000, 32, 30).unwrap();
        assert_eq!(a.frames.data(), b.frames.data());
    }

    #[test]
    fn slice_padded_zero_fills() {
        let feats = AudioFeatureSeq {
            frames: Tensor::new(&[3, 2], vec![1., 2., 3., 4., 5., 6.]),
        };
        let s = feats.slice_padded(2, 3);
        assert_eq!(s.data(), &[5., 6., 0., 0., 0., 0.]);
    }
}
