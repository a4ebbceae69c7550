//! Time/frequency transforms, complex spectra and per-bin filtering.

mod filter;
mod stft;
mod wav;

pub use filter::{apply_filter, apply_filter_graph, FilterMode, FilterSet};
pub use stft::{StftConfig, StftEngine, Window};
pub use wav::{read_wav, read_wav_expect, write_wav, SampleFormat};

use crate::error::{Error, Result};
use crate::numerics::{CustomOp, Tape, Tensor, Var};

/// Default sample rate in Hz.
pub const SAMPLE_RATE: u32 = 16_000;

/// Multi-channel time-domain signal.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiWave {
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl MultiWave {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        let Some(first) = channels.first() else {
            return Err(Error::Input("a wave needs at least one channel".into()));
        };
        if channels.iter().any(|c| c.len() != first.len()) {
            return Err(Error::Input("all channels must have the same length".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Input("sample rate must be positive".into()));
        }
        Ok(MultiWave { channels, sample_rate })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Self::new(vec![samples], sample_rate)
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channel(&self, m: usize) -> &[f64] {
        &self.channels[m]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    /// Sum of squares over all channels and samples.
    pub fn energy(&self) -> f64 {
        self.channels.iter().flatten().map(|x| x * x).sum()
    }

    /// Root-mean-square over all channels and samples.
    pub fn rms(&self) -> f64 {
        (self.energy() / (self.len() * self.num_channels()) as f64).sqrt()
    }

    pub fn scaled(&self, g: f64) -> MultiWave {
        MultiWave {
            channels: self.channels.iter().map(|c| c.iter().map(|x| x * g).collect()).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Complex `[M, K, F]` spectra stored as separate real and imaginary planes.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectra {
    pub re: Tensor,
    pub im: Tensor,
    pub config: StftConfig,
    /// Length in samples of the signal the frames describe.
    pub signal_len: usize,
    pub sample_rate: u32,
}

impl Spectra {
    pub fn new(re: Tensor, im: Tensor, config: StftConfig, signal_len: usize, sample_rate: u32) -> Result<Self> {
        let s = Spectra { re, im, config, signal_len, sample_rate };
        s.validate()?;
        Ok(s)
    }

    pub fn zeros(channels: usize, config: StftConfig, signal_len: usize, sample_rate: u32) -> Result<Self> {
        let shape = [channels, config.num_frames(signal_len), config.bins()];
        Self::new(Tensor::zeros(shape), Tensor::zeros(shape), config, signal_len, sample_rate)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let want = [self.re.shape().first().copied().unwrap_or(0), self.config.num_frames(self.signal_len), self.config.bins()];
        if self.re.shape() != want || self.im.shape() != want || want[0] == 0 {
            return Err(Error::Input(format!(
                "spectra planes {:?}/{:?} inconsistent with {} samples, frame {} hop {}",
                self.re.shape(),
                self.im.shape(),
                self.signal_len,
                self.config.frame,
                self.config.hop
            )));
        }
        Ok(())
    }

    pub fn num_channels(&self) -> usize {
        self.re.shape()[0]
    }

    pub fn num_frames(&self) -> usize {
        self.re.shape()[1]
    }

    pub fn num_bins(&self) -> usize {
        self.re.shape()[2]
    }

    /// Planes of channel `m` as `(re, im)` slices of length `K*F`.
    pub fn channel(&self, m: usize) -> (&[f64], &[f64]) {
        let n = self.num_frames() * self.num_bins();
        (&self.re.data()[m * n..(m + 1) * n], &self.im.data()[m * n..(m + 1) * n])
    }

    /// Single-channel spectra holding channel `m`.
    pub fn select(&self, m: usize) -> Spectra {
        let (re, im) = self.channel(m);
        let shape = [1, self.num_frames(), self.num_bins()];
        Spectra {
            re: Tensor::from_parts(shape.to_vec(), re.to_vec()),
            im: Tensor::from_parts(shape.to_vec(), im.to_vec()),
            ..self.clone()
        }
    }
}

/// Forward STFT of every channel.
pub fn stft(wave: &MultiWave, engine: &StftEngine) -> Result<Spectra> {
    let (m, len) = (wave.num_channels(), wave.len());
    let mut re = Vec::new();
    let mut im = Vec::new();
    for c in wave.channels() {
        let (r, i) = engine.analyze(c)?;
        re.extend(r);
        im.extend(i);
    }
    let cfg = *engine.config();
    let shape = vec![m, cfg.num_frames(len), cfg.bins()];
    Spectra::new(Tensor::new(shape.clone(), re)?, Tensor::new(shape, im)?, cfg, len, wave.sample_rate())
}

/// Weighted overlap-add inverse of every channel.
pub fn istft(spec: &Spectra, engine: &StftEngine) -> Result<MultiWave> {
    spec.validate()?;
    if spec.config != *engine.config() {
        return Err(Error::Input("spectra were produced with a different STFT configuration".into()));
    }
    let channels = (0..spec.num_channels())
        .map(|m| {
            let (re, im) = spec.channel(m);
            engine.synthesize(re, im, spec.signal_len)
        })
        .collect::<Result<Vec<_>>>()?;
    MultiWave::new(channels, spec.sample_rate)
}

struct StftOp {
    engine: StftEngine,
    len: usize,
}

impl CustomOp for StftOp {
    fn name(&self) -> &'static str {
        "stft"
    }

    fn backward(&self, _inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let half = output.numel() / 2;
        let (gre, gim) = grad.data().split_at(half);
        vec![Tensor::from_vec(self.engine.analyze_adjoint(gre, gim, self.len))]
    }
}

struct IstftOp {
    engine: StftEngine,
}

impl CustomOp for IstftOp {
    fn name(&self) -> &'static str {
        "istft"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (gre, gim) = self.engine.synthesize_adjoint(grad.data());
        vec![
            Tensor::from_parts(inputs[0].shape().to_vec(), gre),
            Tensor::from_parts(inputs[1].shape().to_vec(), gim),
        ]
    }
}

/// Differentiable STFT of a mono signal `[L]`, returning `([K, F], [K, F])` planes.
pub fn stft_graph(tape: &mut Tape, engine: &StftEngine, x: Var) -> Result<(Var, Var)> {
    if tape.shape(x).len() != 1 {
        return Err(Error::shape("stft", format!("expected a 1-D signal, got {:?}", tape.shape(x))));
    }
    let len = tape.shape(x)[0];
    let (re, im) = engine.analyze(tape.value(x).data())?;
    let cfg = engine.config();
    let (k, f) = (cfg.num_frames(len), cfg.bins());
    let mut both = re;
    both.extend(im);
    let value = Tensor::new(vec![2, k, f], both)?;
    let y = tape.custom(&[x], value, Box::new(StftOp { engine: engine.clone(), len }))?;
    let re = tape.slice(y, 0, 0, 1)?;
    let im = tape.slice(y, 0, 1, 2)?;
    Ok((tape.reshape(re, &[k, f])?, tape.reshape(im, &[k, f])?))
}

/// Differentiable inverse STFT of `[K, F]` planes to a mono signal of `len` samples.
pub fn istft_graph(tape: &mut Tape, engine: &StftEngine, re: Var, im: Var, len: usize) -> Result<Var> {
    let cfg = engine.config();
    let want = [cfg.num_frames(len), cfg.bins()];
    if tape.shape(re) != want || tape.shape(im) != want {
        return Err(Error::shape("istft", format!("{:?}/{:?} vs expected {want:?}", tape.shape(re), tape.shape(im))));
    }
    let y = engine.synthesize(tape.value(re).data(), tape.value(im).data(), len)?;
    tape.custom(&[re, im], Tensor::from_vec(y), Box::new(IstftOp { engine: engine.clone() }))
}
