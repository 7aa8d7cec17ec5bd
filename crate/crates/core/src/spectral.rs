//! Hann-windowed, zero-padded magnitude spectra.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::stats;

pub const NFFT: usize = 1024;
pub const NUM_BINS: usize = NFFT / 2 + 1;

/// Reusable forward transform of size [`NFFT`].
pub struct Spectrum {
    fft: Arc<dyn Fft<f64>>,
}

impl Default for Spectrum {
    fn default() -> Self {
        Self::new()
    }
}

impl Spectrum {
    pub fn new() -> Self {
        Spectrum {
            fft: FftPlanner::new().plan_fft_forward(NFFT),
        }
    }

    /// One-sided magnitude spectrum of the mean-removed, Hann-windowed segment.
    /// Segments longer than [`NFFT`] keep their central `NFFT` samples.
    pub fn magnitude(&self, segment: &[f64]) -> Vec<f64> {
        let seg = if segment.len() > NFFT {
            let start = (segment.len() - NFFT) / 2;
            &segment[start..start + NFFT]
        } else {
            segment
        };
        let n = seg.len();
        let m = stats::mean(seg).unwrap_or(0.0);
        let mut buf = vec![Complex::new(0.0, 0.0); NFFT];
        for (i, (b, x)) in buf.iter_mut().zip(seg).enumerate() {
            let w = if n > 1 {
                0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / (n - 1) as f64).cos()
            } else {
                1.0
            };
            b.re = (x - m) * w;
        }
        self.fft.process(&mut buf);
        buf[..NUM_BINS].iter().map(|c| c.norm()).collect()
    }
}

pub fn bin_hz(bin: usize, fs: u32) -> f64 {
    bin as f64 * fs as f64 / NFFT as f64
}

/// Dominant peak of a magnitude spectrum within `[lo_hz, hi_hz]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralPeak {
    pub freq_hz: f64,
    /// Peak magnitude over the band's median magnitude (0 for a flat-zero band).
    pub prominence: f64,
}

pub fn band_peak(mag: &[f64], fs: u32, lo_hz: f64, hi_hz: f64) -> Option<SpectralPeak> {
    let band: Vec<(usize, f64)> = mag
        .iter()
        .enumerate()
        .filter(|(k, _)| {
            let f = bin_hz(*k, fs);
            f >= lo_hz && f <= hi_hz
        })
        .map(|(k, &m)| (k, m))
        .collect();
    let &(k, peak) = band
        .iter()
        .fold(None, |acc: Option<&(usize, f64)>, c| match acc {
            Some(a) if a.1 >= c.1 => Some(a),
            _ => Some(c),
        })?;
    let values: Vec<f64> = band.iter().map(|c| c.1).collect();
    let med = stats::median_or(&values, 0.0);
    let prominence = if med > 0.0 { peak / med } else { 0.0 };
    Some(SpectralPeak {
        freq_hz: bin_hz(k, fs),
        prominence,
    })
}
