//! Waveforms to cepstral-mean-normalized 80-dim MFCC maps and fixed-length crops.

mod cache;
mod mfcc;
mod wav;

pub use cache::{file_stem, FeatureCache};
pub use mfcc::{dct_matrix, mel_filterbank, mfcc, MfccExtractor, LOG_FLOOR, NUM_CEPS, NUM_MELS};
pub use wav::{read_wav, write_wav};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const FRAME_LEN_MS: f64 = 25.0;
pub const FRAME_SHIFT_MS: f64 = 10.0;
/// Three seconds at a 10 ms shift.
pub const CROP_FRAMES: usize = 300;

/// Mono samples in `[−1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("empty waveform".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Data("sample rate must be positive".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Windowed frames `[T, window]` of one waveform.
#[derive(Debug, Clone)]
pub struct Frames {
    pub data: Tensor,
    pub sample_rate: u32,
}

impl Frames {
    pub fn count(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn window(&self) -> usize {
        self.data.shape()[1]
    }
}

/// Coefficients `[80, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mfcc {
    pub coeffs: Tensor,
}

impl Mfcc {
    pub fn new(coeffs: Tensor) -> Result<Self> {
        if coeffs.rank() != 2 {
            return Err(Error::dim("mfcc", "rank", 2, coeffs.rank()));
        }
        Ok(Self { coeffs })
    }

    pub fn num_coeffs(&self) -> usize {
        self.coeffs.shape()[0]
    }

    pub fn num_frames(&self) -> usize {
        self.coeffs.shape()[1]
    }
}

fn ms_to_samples(ms: f64, sample_rate: u32) -> usize {
    (ms * sample_rate as f64 / 1000.0).round() as usize
}

/// `floor((n − window) / hop) + 1`, or `None` when not even one window fits.
pub fn frame_count(n: usize, window: usize, hop: usize) -> Option<usize> {
    (n >= window && window > 0 && hop > 0).then(|| (n - window) / hop + 1)
}

pub fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Overlapping Hamming-windowed frames.
pub fn frame_signal(w: &Waveform, frame_len_ms: f64, shift_ms: f64) -> Result<Frames> {
    let window = ms_to_samples(frame_len_ms, w.sample_rate);
    let hop = ms_to_samples(shift_ms, w.sample_rate);
    if hop == 0 || window == 0 {
        return Err(Error::Config(format!("frame length {frame_len_ms} ms / shift {shift_ms} ms round to zero samples")));
    }
    let count = frame_count(w.samples.len(), window, hop).ok_or_else(|| {
        Error::Data(format!(
            "utterance shorter than one frame ({} samples < {window})",
            w.samples.len()
        ))
    })?;
    let taper = hamming(window);
    let mut data = Vec::with_capacity(count * window);
    for f in 0..count {
        let chunk = &w.samples[f * hop..f * hop + window];
        data.extend(chunk.iter().zip(&taper).map(|(s, h)| s * h));
    }
    Ok(Frames {
        data: Tensor::new(&[count, window], data)?,
        sample_rate: w.sample_rate,
    })
}

/// Subtracts each coefficient's mean over time.
///
/// Rows whose mean is already within summation roundoff of zero are left
/// untouched, which makes the operation exactly idempotent.
pub fn cepstral_mean_subtract(m: &Mfcc) -> Mfcc {
    let t = m.num_frames();
    let mut out = m.coeffs.clone();
    for row in out.data_mut().chunks_mut(t) {
        let mean = row.iter().sum::<f64>() / t as f64;
        let scale = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if mean.abs() <= 4.0 * t as f64 * f64::EPSILON * scale {
            continue;
        }
        row.iter_mut().for_each(|v| *v -= mean);
    }
    Mfcc { coeffs: out }
}

/// Contiguous `frames`-long slice at a random start; shorter inputs are
/// first extended by wrapping around to the beginning.
pub fn random_crop<R: Rng + ?Sized>(m: &Mfcc, frames: usize, rng: &mut R) -> Mfcc {
    let (rows, t) = (m.num_coeffs(), m.num_frames());
    let start = if t > frames { rng.random_range(0..=t - frames) } else { 0 };
    let src = m.coeffs.data();
    let mut data = Vec::with_capacity(rows * frames);
    for r in 0..rows {
        let row = &src[r * t..(r + 1) * t];
        data.extend((0..frames).map(|i| row[(start + i) % t]));
    }
    Mfcc {
        coeffs: Tensor::new(&[rows, frames], data).expect("crop shape"),
    }
}

/// Framing, MFCC and cepstral mean subtraction with the default settings.
pub fn extract_features(w: &Waveform) -> Result<Mfcc> {
    let frames = frame_signal(w, FRAME_LEN_MS, FRAME_SHIFT_MS)?;
    Ok(cepstral_mean_subtract(&mfcc(&frames)?))
}

/// [`extract_features`] of a WAV file.
pub fn wav_features(path: &std::path::Path) -> Result<Mfcc> {
    extract_features(&read_wav(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn wave(n: usize) -> Waveform {
        Waveform::new((0..n).map(|i| (i as f64 * 0.01).sin()).collect(), SAMPLE_RATE).unwrap()
    }

    #[test]
    fn one_second_gives_98_frames() {
        let f = frame_signal(&wave(16_000), 25.0, 10.0).unwrap();
        assert_eq!((f.count(), f.window()), (98, 400));
    }

    #[test]
    fn frame_boundaries() {
        assert_eq!(frame_signal(&wave(400), 25.0, 10.0).unwrap().count(), 1);
        let err = frame_signal(&wave(399), 25.0, 10.0).unwrap_err();
        assert!(err.to_string().contains("utterance shorter than one frame"));
    }

    #[test]
    fn hamming_window_applied() {
        let w = Waveform::new(vec![1.0; 400], SAMPLE_RATE).unwrap();
        let f = frame_signal(&w, 25.0, 10.0).unwrap();
        let d = f.data.data();
        assert!((d[0] - 0.08).abs() < 1e-12);
        assert!((d[399] - 0.08).abs() < 1e-12);
        assert!(d[199] > 0.99);
    }

    #[test]
    fn invalid_waveforms() {
        assert!(Waveform::new(vec![], 16_000).is_err());
        assert!(Waveform::new(vec![0.0], 0).is_err());
    }

    #[test]
    fn cms_small_row() {
        let m = Mfcc::new(Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        assert_eq!(cepstral_mean_subtract(&m).coeffs.data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn crop_identity_and_wrap() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let full = Mfcc::new(Tensor::uniform(&[80, 300], 1.0, &mut rng)).unwrap();
        assert_eq!(random_crop(&full, 300, &mut rng), full);

        let short = Mfcc::new(Tensor::uniform(&[80, 200], 1.0, &mut rng)).unwrap();
        let c = random_crop(&short, 300, &mut rng);
        assert_eq!(c.num_frames(), 300);
        for r in 0..80 {
            for i in 0..300 {
                assert_eq!(c.coeffs.at(&[r, i]), short.coeffs.at(&[r, i % 200]));
            }
        }
    }

    #[test]
    fn crop_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Mfcc::new(Tensor::uniform(&[80, 500], 1.0, &mut rng)).unwrap();
        let a = random_crop(&m, 300, &mut ChaCha8Rng::seed_from_u64(9));
        let b = random_crop(&m, 300, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }
}
