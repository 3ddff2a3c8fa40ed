use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{Frames, Mfcc};
use crate::error::Result;
use crate::numerics::Tensor;

pub const NUM_MELS: usize = 80;
pub const NUM_CEPS: usize = 80;
/// Floor applied to mel energies before the log.
pub const LOG_FLOOR: f64 = 1e-10;

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters `[mels, nfft/2 + 1]` evenly spaced on the mel scale over `0..sr/2`.
pub fn mel_filterbank(mels: usize, nfft: usize, sample_rate: u32) -> Tensor {
    let bins = nfft / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (mels + 1) as f64))
        .collect();
    let mut w = vec![0.0; mels * bins];
    for m in 0..mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * sample_rate as f64 / nfft as f64;
            let v = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            w[m * bins + k] = v;
        }
    }
    Tensor::new(&[mels, bins], w).expect("filterbank shape")
}

/// Orthonormal DCT-II basis `[ceps, n]`.
pub fn dct_matrix(ceps: usize, n: usize) -> Tensor {
    let mut d = vec![0.0; ceps * n];
    for k in 0..ceps {
        let s = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            d[k * n + i] = s * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos();
        }
    }
    Tensor::new(&[ceps, n], d).expect("dct shape")
}

/// Reusable FFT plan, filterbank and DCT for one window length.
pub struct MfccExtractor {
    nfft: usize,
    fft: Arc<dyn Fft<f64>>,
    filters: Tensor,
    dct: Tensor,
}

impl MfccExtractor {
    pub fn new(window: usize, sample_rate: u32) -> Self {
        let nfft = window.next_power_of_two();
        Self {
            nfft,
            fft: FftPlanner::new().plan_fft_forward(nfft),
            filters: mel_filterbank(NUM_MELS, nfft, sample_rate),
            dct: dct_matrix(NUM_CEPS, NUM_MELS),
        }
    }

    pub fn nfft(&self) -> usize {
        self.nfft
    }

    /// `|X_k|²` for `k = 0..=nfft/2` of one zero-padded frame.
    pub fn power_spectrum(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = frame.iter().map(|&v| Complex::new(v, 0.0)).collect();
        buf.resize(self.nfft, Complex::new(0.0, 0.0));
        self.fft.process(&mut buf);
        buf[..self.nfft / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
    }

    pub fn frame_coeffs(&self, frame: &[f64]) -> Vec<f64> {
        let power = self.power_spectrum(frame);
        let bins = power.len();
        let log_mel: Vec<f64> = self
            .filters
            .data()
            .chunks(bins)
            .map(|f| f.iter().zip(&power).map(|(w, p)| w * p).sum::<f64>().max(LOG_FLOOR).ln())
            .collect();
        self.dct
            .data()
            .chunks(NUM_MELS)
            .map(|basis| basis.iter().zip(&log_mel).map(|(b, v)| b * v).sum())
            .collect()
    }

    pub fn compute(&self, frames: &Frames) -> Result<Mfcc> {
        let t = frames.count();
        let mut coeffs = vec![0.0; NUM_CEPS * t];
        for (j, frame) in frames.data.data().chunks(frames.window()).enumerate() {
            for (k, c) in self.frame_coeffs(frame).into_iter().enumerate() {
                coeffs[k * t + j] = c;
            }
        }
        Mfcc::new(Tensor::new(&[NUM_CEPS, t], coeffs)?)
    }
}

/// Power spectrum, 80 mel filters over `0..Nyquist`, log and DCT-II: `[80, T]`.
pub fn mfcc(frames: &Frames) -> Result<Mfcc> {
    MfccExtractor::new(frames.window(), frames.sample_rate).compute(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{frame_signal, Waveform};

    #[test]
    fn silence_gives_identical_columns() {
        let w = Waveform::new(vec![0.0; 4000], 16_000).unwrap();
        let m = mfcc(&frame_signal(&w, 25.0, 10.0).unwrap()).unwrap();
        assert_eq!(m.coeffs.shape(), &[80, 23]);
        for row in m.coeffs.data().chunks(23) {
            assert!(row.iter().all(|&v| v == row[0]));
        }
        // only the DC coefficient survives a constant log spectrum
        assert!((m.coeffs.at(&[0, 0]) - LOG_FLOOR.ln() * 80f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn every_filter_covers_a_bin() {
        let fb = mel_filterbank(80, 512, 16_000);
        for row in fb.data().chunks(257) {
            assert!(row.iter().any(|&v| v > 0.0));
        }
    }

    #[test]
    fn dct_is_orthonormal() {
        let d = dct_matrix(80, 80);
        for a in 0..80 {
            for b in 0..80 {
                let dot: f64 = (0..80).map(|i| d.at(&[a, i]) * d.at(&[b, i])).sum();
                assert!((dot - f64::from(a == b)).abs() < 1e-12);
            }
        }
    }
}
