//! Amplitude spectra and salient-periodicity detection.
//!
//! Detection works on plain values and never touches the differentiation
//! graph: the chosen periods and branch weights are constants for whatever
//! computation consumes them.

pub mod fft;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean DFT magnitude per frequency `f = 1..=⌊I/2⌋` (DC excluded).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeSpectrum {
    amps: Vec<f64>,
    window_length: usize,
}

impl AmplitudeSpectrum {
    /// Builds a spectrum from amplitudes for frequencies `1..=amps.len()`.
    pub fn from_amplitudes(amps: Vec<f64>, window_length: usize) -> Result<Self> {
        if window_length < 2 || amps.len() != window_length / 2 {
            return Err(Error::contract(format!(
                "a length-{window_length} window has {} frequencies, got {}",
                window_length / 2,
                amps.len()
            )));
        }
        if amps.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::contract(
                "amplitudes must be finite and non-negative",
            ));
        }
        Ok(AmplitudeSpectrum {
            amps,
            window_length,
        })
    }

    pub fn window_length(&self) -> usize {
        self.window_length
    }

    /// Amplitudes indexed from frequency 1.
    pub fn amplitudes(&self) -> &[f64] {
        &self.amps
    }

    /// Amplitude at frequency `f` (1-based).
    pub fn at(&self, f: usize) -> f64 {
        self.amps[f - 1]
    }

    pub fn max_amplitude(&self) -> f64 {
        self.amps.iter().copied().fold(0.0, f64::max)
    }

    /// Frequency with the largest amplitude, lowest frequency on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &a) in self.amps.iter().enumerate() {
            if a > self.amps[best] {
                best = i;
            }
        }
        best + 1
    }
}

/// Result of one detection: the retained frequencies, their periods and
/// amplitudes (strongest first), and the softmax branch weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodicitySet {
    pub frequencies: Vec<usize>,
    pub periods: Vec<usize>,
    pub amplitudes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl PeriodicitySet {
    /// A single branch covering the whole window with weight 1.
    pub fn whole_window(window_length: usize) -> Self {
        PeriodicitySet {
            frequencies: vec![1],
            periods: vec![window_length],
            amplitudes: vec![0.0],
            weights: vec![1.0],
        }
    }

    /// Branches with explicit periods and equal weights. Useful for
    /// forcing a block onto a chosen set of resolutions.
    pub fn uniform(window_length: usize, periods: &[usize]) -> Self {
        let k = periods.len();
        PeriodicitySet {
            frequencies: periods
                .iter()
                .map(|&p| window_length.div_ceil(p.max(1)).max(1))
                .collect(),
            periods: periods.to_vec(),
            amplitudes: vec![0.0; k],
            weights: vec![1.0 / k as f64; k],
        }
    }

    pub fn len(&self) -> usize {
        self.periods.len()
    }

    pub fn is_empty(&self) -> bool {
        self.periods.is_empty()
    }
}

/// Mean DFT magnitude over every example and variate of `x: [B, I, V]`.
pub fn amplitude_spectrum(x: &Tensor) -> Result<AmplitudeSpectrum> {
    let &[batch, len, variates] = x.shape() else {
        return Err(Error::contract(format!(
            "amplitude_spectrum expects [B, I, V], got {:?}",
            x.shape()
        )));
    };
    if len < 2 {
        return Err(Error::contract(format!(
            "amplitude_spectrum needs a window of at least 2 steps, got {len}"
        )));
    }
    if !x.is_finite() {
        return Err(Error::Numeric(
            "amplitude_spectrum input is not finite".into(),
        ));
    }
    let half = len / 2;
    let mut amps = vec![0.0; half];
    let data = x.data();
    let mut series = vec![0.0; len];
    for b in 0..batch {
        for v in 0..variates {
            for (t, s) in series.iter_mut().enumerate() {
                *s = data[(b * len + t) * variates + v];
            }
            let spectrum = fft::fft_real(&series);
            for (acc, c) in amps.iter_mut().zip(&spectrum[1..=half]) {
                *acc += c.norm();
            }
        }
    }
    let count = (batch * variates) as f64;
    amps.iter_mut().for_each(|a| *a /= count);
    Ok(AmplitudeSpectrum {
        amps,
        window_length: len,
    })
}

/// Spectrum of a single univariate window.
pub fn amplitude_spectrum_of(series: &[f64]) -> Result<AmplitudeSpectrum> {
    let n = series.len().max(1);
    amplitude_spectrum(&Tensor::new([1, n, 1], series.to_vec())?)
}

/// Picks up to `k` distinct periods `⌈I/f⌉` from the strongest frequencies.
///
/// Frequencies are scanned by decreasing amplitude, lower frequency first on
/// ties. A frequency whose period was already taken is skipped, as are
/// frequencies with zero amplitude. Fewer than `k` periods come back when the
/// spectrum runs out. Weights are the softmax of the retained raw amplitudes.
pub fn detect_salient_periods(spec: &AmplitudeSpectrum, k: usize) -> Result<PeriodicitySet> {
    let half = spec.amps.len();
    if k < 1 {
        return Err(Error::contract("detect_salient_periods needs k >= 1"));
    }
    if k > half {
        return Err(Error::contract(format!(
            "k = {k} exceeds the {half} frequencies of a length-{} window",
            spec.window_length
        )));
    }
    let mut order: Vec<usize> = (1..=half).collect();
    // Stable sort keeps ascending frequency order among equal amplitudes.
    order.sort_by(|&a, &b| spec.at(b).total_cmp(&spec.at(a)));

    let mut set = PeriodicitySet {
        frequencies: Vec::with_capacity(k),
        periods: Vec::with_capacity(k),
        amplitudes: Vec::with_capacity(k),
        weights: Vec::new(),
    };
    for f in order {
        if set.periods.len() == k {
            break;
        }
        let amp = spec.at(f);
        if amp <= 0.0 {
            break;
        }
        let period = spec.window_length.div_ceil(f);
        if set.periods.contains(&period) {
            continue;
        }
        set.frequencies.push(f);
        set.periods.push(period);
        set.amplitudes.push(amp);
    }
    set.weights = softmax(&set.amplitudes);
    Ok(set)
}

fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}
