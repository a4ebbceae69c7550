//! STFT analysis and weighted overlap-add synthesis.
//!
//! Framing is left-aligned: frame `k` covers samples `k*hop .. k*hop + frame`
//! and the signal is zero-padded on the right. A signal of `len` samples gets
//! `ceil(len / hop)` frames. Synthesis divides the overlap-added, window-weighted
//! frames by `sum_k w^2(n - k*hop)`, so any sample covered by a non-zero window
//! value is reconstructed exactly. With the periodic Hann window at 50% overlap
//! that holds for every sample except sample 0 (where the only covering window
//! value is 0), so samples `hop..len` are treated as the interior.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Synthesis normaliser values below this are treated as uncovered samples.
const NORM_FLOOR: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Window {
    /// Periodic Hann: `0.5 - 0.5 cos(2 pi n / N)`.
    Hann,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftConfig {
    pub frame: usize,
    pub hop: usize,
    pub window: Window,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig { frame: 512, hop: 256, window: Window::Hann }
    }
}

impl StftConfig {
    pub fn new(frame: usize, hop: usize) -> Result<Self> {
        let c = StftConfig { frame, hop, window: Window::Hann };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.frame.is_power_of_two() || self.frame < 2 {
            return Err(Error::Config(format!("STFT frame {} must be a power of two", self.frame)));
        }
        if self.hop == 0 || self.hop > self.frame {
            return Err(Error::Config(format!("STFT hop {} must be in 1..={}", self.hop, self.frame)));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.frame / 2 + 1
    }

    pub fn num_frames(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }

    pub fn window(&self) -> Vec<f64> {
        let n = self.frame as f64;
        match self.window {
            Window::Hann => (0..self.frame).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos()).collect(),
        }
    }

    /// Per-sample synthesis normaliser `sum_k w^2(n - k*hop)` for a signal of `len` samples.
    /// This is also the gain relating signal energy to spectral energy sample by sample.
    pub fn synthesis_norm(&self, len: usize) -> Vec<f64> {
        let w = self.window();
        let mut norm = vec![0.0; len];
        for k in 0..self.num_frames(len) {
            let start = k * self.hop;
            for (n, wv) in w.iter().enumerate() {
                if start + n < len {
                    norm[start + n] += wv * wv;
                }
            }
        }
        norm
    }

    /// First sample of the reconstruction-exact region.
    pub fn interior_start(&self) -> usize {
        self.hop
    }
}

/// Planned transforms for one [`StftConfig`].
#[derive(Clone)]
pub struct StftEngine {
    config: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for StftEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftEngine").field("config", &self.config).finish()
    }
}

impl StftEngine {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = FftPlanner::new();
        Ok(StftEngine {
            window: config.window(),
            forward: planner.plan_fft_forward(config.frame),
            inverse: planner.plan_fft_inverse(config.frame),
            config,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len < self.config.frame {
            return Err(Error::Input(format!(
                "signal of {len} samples is shorter than the {}-sample STFT frame",
                self.config.frame
            )));
        }
        Ok(())
    }

    /// One channel to `(re, im)`, each `[frames * bins]` row-major.
    pub fn analyze(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_len(x.len())?;
        let (n, hop, bins) = (self.config.frame, self.config.hop, self.config.bins());
        let frames = self.config.num_frames(x.len());
        let mut re = Vec::with_capacity(frames * bins);
        let mut im = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for k in 0..frames {
            let start = k * hop;
            for (i, b) in buf.iter_mut().enumerate() {
                let v = x.get(start + i).copied().unwrap_or(0.0);
                *b = Complex::new(v * self.window[i], 0.0);
            }
            self.forward.process(&mut buf);
            for b in &buf[..bins] {
                re.push(b.re);
                im.push(b.im);
            }
        }
        Ok((re, im))
    }

    /// Inverse of [`StftEngine::analyze`] for `len` output samples.
    pub fn synthesize(&self, re: &[f64], im: &[f64], len: usize) -> Result<Vec<f64>> {
        let (n, hop, bins) = (self.config.frame, self.config.hop, self.config.bins());
        let frames = self.config.num_frames(len);
        if re.len() != frames * bins || im.len() != frames * bins {
            return Err(Error::Input(format!(
                "spectrum of {} values does not match {frames} frames x {bins} bins for {len} samples",
                re.len()
            )));
        }
        let padded = (frames - 1) * hop + n;
        let mut out = vec![0.0; padded];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let scale = 1.0 / n as f64;
        for k in 0..frames {
            let row = k * bins;
            hermitian_fill(&mut buf, &re[row..row + bins], &im[row..row + bins]);
            self.inverse.process(&mut buf);
            let start = k * hop;
            for i in 0..n {
                out[start + i] += buf[i].re * scale * self.window[i];
            }
        }
        out.truncate(len);
        let norm = self.config.synthesis_norm(len);
        for (o, nv) in out.iter_mut().zip(&norm) {
            *o = if *nv > NORM_FLOOR { *o / nv } else { 0.0 };
        }
        Ok(out)
    }

    /// Adjoint of [`StftEngine::analyze`]: spectral gradients to a signal gradient.
    pub fn analyze_adjoint(&self, gre: &[f64], gim: &[f64], len: usize) -> Vec<f64> {
        let (n, hop, bins) = (self.config.frame, self.config.hop, self.config.bins());
        let frames = self.config.num_frames(len);
        let mut gx = vec![0.0; len];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for k in 0..frames {
            let row = k * bins;
            buf.iter_mut().for_each(|b| *b = Complex::new(0.0, 0.0));
            for f in 0..bins {
                buf[f] = Complex::new(gre[row + f], gim[row + f]);
            }
            self.inverse.process(&mut buf);
            let start = k * hop;
            for i in 0..n {
                if start + i < len {
                    gx[start + i] += buf[i].re * self.window[i];
                }
            }
        }
        gx
    }

    /// Adjoint of [`StftEngine::synthesize`]: signal gradient to spectral gradients.
    pub fn synthesize_adjoint(&self, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (n, hop, bins) = (self.config.frame, self.config.hop, self.config.bins());
        let len = g.len();
        let frames = self.config.num_frames(len);
        let norm = self.config.synthesis_norm(len);
        let scaled: Vec<f64> = g.iter().zip(&norm).map(|(gv, nv)| if *nv > NORM_FLOOR { gv / nv } else { 0.0 }).collect();
        let mut gre = Vec::with_capacity(frames * bins);
        let mut gim = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let scale = 1.0 / n as f64;
        for k in 0..frames {
            let start = k * hop;
            for (i, b) in buf.iter_mut().enumerate() {
                let v = scaled.get(start + i).copied().unwrap_or(0.0);
                *b = Complex::new(v * self.window[i] * scale, 0.0);
            }
            self.forward.process(&mut buf);
            for (f, b) in buf[..bins].iter().enumerate() {
                let edge = f == 0 || f == n / 2;
                let c = if edge { 1.0 } else { 2.0 };
                gre.push(c * b.re);
                gim.push(if edge { 0.0 } else { c * b.im });
            }
        }
        (gre, gim)
    }
}

/// Fill a full-length buffer from the non-negative-frequency half. The
/// imaginary parts at DC and Nyquist are ignored.
fn hermitian_fill(buf: &mut [Complex<f64>], re: &[f64], im: &[f64]) {
    let n = buf.len();
    let half = n / 2;
    buf[0] = Complex::new(re[0], 0.0);
    buf[half] = Complex::new(re[half], 0.0);
    for f in 1..half {
        buf[f] = Complex::new(re[f], im[f]);
        buf[n - f] = Complex::new(re[f], -im[f]);
    }
}
