//! Linear-frequency cepstral coefficients.
//!
//! Per frame: window → |FFT|² → linearly spaced triangular filterbank →
//! natural log (floored) → orthonormal DCT-II. Delta and delta-delta
//! coefficients are appended over the whole utterance, giving
//! `[static | delta | delta-delta]` rows of `3 · n_ceps` values.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    Hamming,
    Hann,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LfccConfig {
    /// Frame length in seconds.
    pub frame_len: f64,
    /// Hop length in seconds.
    pub hop_len: f64,
    pub n_fft: usize,
    pub n_filters: usize,
    pub n_ceps: usize,
    pub include_deltas: bool,
    pub window: WindowKind,
    pub log_floor: f64,
    /// Regression half-width for delta features.
    pub delta_window: usize,
}

impl Default for LfccConfig {
    fn default() -> Self {
        Self {
            frame_len: 0.020,
            hop_len: 0.010,
            n_fft: 512,
            n_filters: 20,
            n_ceps: 20,
            include_deltas: true,
            window: WindowKind::Hamming,
            log_floor: 1e-12,
            delta_window: 2,
        }
    }
}

impl LfccConfig {
    pub fn frame_samples(&self, sample_rate: u32) -> usize {
        (self.frame_len * sample_rate as f64).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.hop_len * sample_rate as f64).round() as usize
    }

    pub fn n_dims(&self) -> usize {
        if self.include_deltas {
            3 * self.n_ceps
        } else {
            self.n_ceps
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("[lfcc] {m}")));
        if !(self.hop_len > 0.0 && self.frame_len > self.hop_len) {
            return bad(format!(
                "need frame_len > hop_len > 0 (got {} / {})",
                self.frame_len, self.hop_len
            ));
        }
        if self.n_ceps == 0 || self.n_ceps > self.n_filters {
            return bad(format!("need 1 <= n_ceps <= n_filters (got {} / {})", self.n_ceps, self.n_filters));
        }
        if self.n_fft < self.frame_samples(sample_rate) {
            return bad(format!(
                "n_fft {} shorter than a {}-sample frame",
                self.n_fft,
                self.frame_samples(sample_rate)
            ));
        }
        if self.hop_samples(sample_rate) == 0 {
            return bad("hop rounds to zero samples".into());
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive".into());
        }
        if self.delta_window == 0 {
            return bad("delta_window must be at least 1".into());
        }
        Ok(())
    }
}

pub fn window(kind: WindowKind, len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    let denom = (len - 1) as f64;
    (0..len)
        .map(|n| {
            let c = (2.0 * PI * n as f64 / denom).cos();
            match kind {
                WindowKind::Hamming => 0.54 - 0.46 * c,
                WindowKind::Hann => 0.5 - 0.5 * c,
            }
        })
        .collect()
}

/// Split into overlapping frames and apply the analysis window.
/// Returns `n_frames × frame_samples`.
pub fn frame_and_window(audio: &AudioBuffer, cfg: &LfccConfig) -> Result<Array2<f64>> {
    let sr = audio.sample_rate();
    let frame = cfg.frame_samples(sr);
    let hop = cfg.hop_samples(sr);
    let samples = audio.samples();
    if frame == 0 || hop == 0 {
        return Err(Error::Config("frame or hop rounds to zero samples".into()));
    }
    if samples.len() < frame {
        return Err(Error::InvalidInput(format!(
            "audio has {} samples, shorter than one {frame}-sample frame",
            samples.len()
        )));
    }
    let n_frames = (samples.len() - frame) / hop + 1;
    let win = window(cfg.window, frame);
    let mut out = Array2::zeros((n_frames, frame));
    for (t, mut row) in out.rows_mut().into_iter().enumerate() {
        let start = t * hop;
        for (i, v) in row.iter_mut().enumerate() {
            *v = samples[start + i] * win[i];
        }
    }
    Ok(out)
}

/// Triangular filters with centres spaced linearly from 0 Hz to Nyquist.
/// Adjacent triangles overlap by half: filter `k` rises from edge `k` to
/// edge `k+1` and falls to edge `k+2`.
#[derive(Debug, Clone)]
pub struct LinearFilterbank {
    n_bins: usize,
    // (first bin, weights over the filter's support)
    filters: Vec<(usize, Vec<f64>)>,
}

impl LinearFilterbank {
    pub fn new(n_filters: usize, n_fft: usize, sample_rate: u32) -> Self {
        let n_bins = n_fft / 2 + 1;
        let nyquist = sample_rate as f64 / 2.0;
        let spacing = nyquist / (n_filters + 1) as f64;
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let filters = (0..n_filters)
            .map(|k| {
                let (lo, mid, hi) = (k as f64 * spacing, (k + 1) as f64 * spacing, (k + 2) as f64 * spacing);
                let support: Vec<(usize, f64)> = (0..n_bins)
                    .filter_map(|b| {
                        let f = b as f64 * bin_hz;
                        let w = if f > lo && f <= mid {
                            (f - lo) / (mid - lo)
                        } else if f > mid && f < hi {
                            (hi - f) / (hi - mid)
                        } else {
                            0.0
                        };
                        (w > 0.0).then_some((b, w))
                    })
                    .collect();
                let start = support.first().map_or(0, |(b, _)| *b);
                (start, support.into_iter().map(|(_, w)| w).collect())
            })
            .collect();
        Self { n_bins, filters }
    }

    pub fn n_filters(&self) -> usize {
        self.filters.len()
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    /// Dense `n_filters × n_bins` weight matrix.
    pub fn to_dense(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.filters.len(), self.n_bins));
        for (k, (start, w)) in self.filters.iter().enumerate() {
            for (j, v) in w.iter().enumerate() {
                m[[k, start + j]] = *v;
            }
        }
        m
    }

    pub fn apply(&self, power: &[f64]) -> Result<Vec<f64>> {
        if power.len() != self.n_bins {
            return Err(Error::Shape(format!(
                "power spectrum has {} bins, filterbank expects {}",
                power.len(),
                self.n_bins
            )));
        }
        if let Some(v) = power.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidInput(format!("power spectrum value {v} is not finite and non-negative")));
        }
        Ok(self.apply_unchecked(power))
    }

    fn apply_unchecked(&self, power: &[f64]) -> Vec<f64> {
        self.filters
            .iter()
            .map(|(start, w)| w.iter().zip(&power[*start..]).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Orthonormal DCT-II basis, truncated to the first `n_out` rows.
pub fn dct_matrix(n_out: usize, n_in: usize) -> Array2<f64> {
    let n = n_in as f64;
    Array2::from_shape_fn((n_out, n_in), |(k, i)| {
        let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        scale * (PI * (i as f64 + 0.5) * k as f64 / n).cos()
    })
}

/// Regression deltas with edge frames replicated:
/// `d_t = Σ_{w=1..W} w·(x_{t+w} − x_{t−w}) / (2·Σ w²)`.
pub fn deltas(x: ArrayView2<'_, f64>, half_width: usize) -> Array2<f64> {
    let n = x.nrows();
    let mut out = Array2::zeros(x.raw_dim());
    if n == 0 || half_width == 0 {
        return out;
    }
    let denom = 2.0 * (1..=half_width).map(|w| (w * w) as f64).sum::<f64>();
    for t in 0..n {
        let mut row = out.row_mut(t);
        for w in 1..=half_width {
            let ahead = x.row((t + w).min(n - 1));
            let behind = x.row(t.saturating_sub(w));
            row.zip_mut_with(&(&ahead - &behind), |o, d| *o += w as f64 * d);
        }
        row.mapv_inplace(|v| v / denom);
    }
    out
}

/// Reusable extractor: window, filterbank, DCT basis and FFT plan for one
/// sample rate.
pub struct LfccExtractor {
    cfg: LfccConfig,
    sample_rate: u32,
    window: Vec<f64>,
    filterbank: LinearFilterbank,
    dct: Array2<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl LfccExtractor {
    pub fn new(cfg: &LfccConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate(sample_rate)?;
        Ok(Self {
            cfg: cfg.clone(),
            sample_rate,
            window: window(cfg.window, cfg.frame_samples(sample_rate)),
            filterbank: LinearFilterbank::new(cfg.n_filters, cfg.n_fft, sample_rate),
            dct: dct_matrix(cfg.n_ceps, cfg.n_filters),
            fft: FftPlanner::new().plan_fft_forward(cfg.n_fft),
        })
    }

    pub fn filterbank(&self) -> &LinearFilterbank {
        &self.filterbank
    }

    /// `n_frames × n_filters` log filterbank energies.
    pub fn log_energies(&self, audio: &AudioBuffer) -> Result<Array2<f64>> {
        if audio.sample_rate() != self.sample_rate {
            return Err(Error::InvalidInput(format!(
                "extractor built for {} Hz, audio is {} Hz",
                self.sample_rate,
                audio.sample_rate()
            )));
        }
        let frames = frame_and_window(audio, &self.cfg)?;
        debug_assert_eq!(frames.ncols(), self.window.len());
        let n_fft = self.cfg.n_fft;
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; n_fft / 2 + 1];
        let mut out = Array2::zeros((frames.nrows(), self.filterbank.n_filters()));
        for (frame, mut row) in frames.rows().into_iter().zip(out.rows_mut()) {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (c, s) in buf.iter_mut().zip(frame.iter()) {
                c.re = *s;
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            let energies = self.filterbank.apply_unchecked(&power);
            for (o, e) in row.iter_mut().zip(energies) {
                *o = e.max(self.cfg.log_floor).ln();
            }
        }
        Ok(out)
    }

    pub fn extract(&self, audio: &AudioBuffer) -> Result<FeatureMatrix> {
        let log_e = self.log_energies(audio)?;
        let ceps = log_e.dot(&self.dct.t());
        let data = if self.cfg.include_deltas {
            let d1 = deltas(ceps.view(), self.cfg.delta_window);
            let d2 = deltas(d1.view(), self.cfg.delta_window);
            concatenate(Axis(1), &[ceps.view(), d1.view(), d2.view()])
                .map_err(|e| Error::Shape(e.to_string()))?
        } else {
            ceps
        };
        FeatureMatrix::new(data)
    }
}

pub fn lfcc(audio: &AudioBuffer, cfg: &LfccConfig) -> Result<FeatureMatrix> {
    LfccExtractor::new(cfg, audio.sample_rate())?.extract(audio)
}
