//! End-to-end network: TNet spatial features and the raw spectra feed a
//! RUNet whose filters are applied to the input spectra, then inverted to
//! waveforms.

use crate::dsp::{apply_filter_graph, istft_graph, FilterMode, Spectra, StftConfig, StftEngine};
use crate::error::{Error, Result};
use crate::numerics::{Bound, Init, ParamStore, Tape, Tensor, Var};
use crate::runet::{RUNet, RUNetConfig};
use crate::tnet::{TNet, TNetConfig, TNetOutput, Variant};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub mics: usize,
    pub stft: StftConfig,
    /// `None` runs the RUNet alone on the spectra.
    pub tnet: Option<TNetConfig>,
    pub runet: RUNetConfig,
}

impl ModelConfig {
    /// Small configuration for tests and desk-scale training.
    pub fn toy(variant: Option<Variant>, mode: FilterMode) -> Self {
        ModelConfig {
            mics: 2,
            stft: StftConfig::default(),
            tnet: variant.map(|v| TNetConfig::new(v, 1, 2, 8)),
            runet: RUNetConfig::new(vec![4, 8], 32, mode),
        }
    }

    /// Full-size configuration.
    pub fn paper(variant: Option<Variant>, mode: FilterMode) -> Self {
        ModelConfig {
            mics: 8,
            stft: StftConfig::default(),
            tnet: variant.map(|v| TNetConfig::new(v, 4, 16, 1024)),
            runet: RUNetConfig::new(vec![16, 16, 32, 32, 64], 1200, mode),
        }
    }

    pub fn bins(&self) -> usize {
        self.stft.bins()
    }

    pub fn padded_bins(&self) -> usize {
        self.runet.padded_bins(self.bins())
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.runet.validate()?;
        if let Some(t) = &self.tnet {
            t.validate()?;
        }
        if self.mics == 0 {
            return Err(Error::Config("mics must be positive".into()));
        }
        if let FilterMode::Single { reference } = self.runet.mode {
            if reference >= self.mics {
                return Err(Error::Config(format!("reference channel {reference} out of range for {} mics", self.mics)));
            }
        }
        Ok(())
    }
}

/// A registered network; parameter values live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Trunet {
    pub config: ModelConfig,
    pub tnet: Option<TNet>,
    pub runet: RUNet,
    engine: StftEngine,
}

/// Tape handles produced by [`Trunet::forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub tnet: Option<TNetOutput>,
    /// Per source `(re, im)` filters `[taps, K, F]`.
    pub filters: Vec<(Var, Var)>,
    /// Per source filtered spectra `[K, F]`.
    pub spectra: Vec<(Var, Var)>,
    /// Per source waveform `[L]`.
    pub waves: Vec<Var>,
}

impl Trunet {
    /// Register all parameters with a seeded initialiser.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let net = Self::register(config, &mut store, &mut init)?;
        Ok((net, store))
    }

    pub fn register(config: ModelConfig, store: &mut ParamStore, init: &mut Init) -> Result<Self> {
        config.validate()?;
        let (bins, padded, m) = (config.bins(), config.padded_bins(), config.mics);
        let tnet = match &config.tnet {
            Some(c) => Some(TNet::register(store, init, "tnet", c.clone(), bins, padded)?),
            None => None,
        };
        let extra = tnet.as_ref().map_or(0, |t| t.out_planes(m));
        let runet = RUNet::register(store, init, "runet", config.runet.clone(), 2 * m + extra, m, bins)?;
        let engine = StftEngine::new(config.stft)?;
        Ok(Trunet { config, tnet, runet, engine })
    }

    pub fn engine(&self) -> &StftEngine {
        &self.engine
    }

    fn check_input(&self, spec: &Spectra) -> Result<()> {
        if spec.num_channels() != self.config.mics {
            return Err(Error::Input(format!(
                "input has {} channels, model expects {}",
                spec.num_channels(),
                self.config.mics
            )));
        }
        if spec.config != self.config.stft {
            return Err(Error::Input("input spectra use a different STFT configuration".into()));
        }
        Ok(())
    }

    /// Full forward pass on mixture spectra `[M, K, F]`.
    pub fn forward(&self, tape: &mut Tape, b: &Bound, spec: &Spectra) -> Result<ForwardOutput> {
        self.check_input(spec)?;
        spec.validate()?;
        let (m, k, f) = (spec.num_channels(), spec.num_frames(), spec.num_bins());
        let padded = self.config.padded_bins();
        let yr = tape.constant(spec.re.clone());
        let yi = tape.constant(spec.im.clone());
        let pad = |tape: &mut Tape, x: Var| -> Result<Var> {
            if padded == f {
                return Ok(x);
            }
            let z = tape.constant(Tensor::zeros([m, k, padded - f]));
            tape.concat(&[x, z], 2)
        };
        let mut planes = vec![pad(tape, yr)?, pad(tape, yi)?];
        let tnet = match &self.tnet {
            Some(t) => {
                let out = t.forward(tape, b, yr, yi)?;
                planes.push(out.planes);
                Some(out)
            }
            None => None,
        };
        let x = tape.concat(&planes, 0)?;
        let decoded = self.runet.encoder_decoder(tape, b, x)?;
        let filters = self.runet.filter_heads(tape, b, decoded)?;
        let mut spectra = Vec::with_capacity(filters.len());
        let mut waves = Vec::with_capacity(filters.len());
        for &fb in &filters {
            let (xr, xi) = apply_filter_graph(tape, (yr, yi), fb, self.config.runet.mode)?;
            waves.push(istft_graph(tape, &self.engine, xr, xi, spec.signal_len)?);
            spectra.push((xr, xi));
        }
        Ok(ForwardOutput { tnet, filters, spectra, waves })
    }
}
