//! Recurrent U-net over `[channels, K, F']` feature planes.
//!
//! Encoder layers are `(6, 6)` convolutions with stride `(1, 2)`, so every
//! layer halves the frequency axis and keeps the time axis. The decoder
//! mirrors them with transposed convolutions. Before each decoder layer the
//! matching encoder output passes through a `1x1` convolution and is added in.
//! Two BLSTM layers run over time at the bottleneck on features flattened
//! across channels and frequency; their outputs are summed, projected back and
//! added to the bottleneck.
//!
//! The filter head is a fully connected layer applied per frequency bin to the
//! decoder channels, followed by `tanh`. Output unit `((s * taps + m) * 2 + part)`
//! of bin `f` is the real (`part = 0`) or imaginary (`part = 1`) filter tap
//! `m` of source `s`.

use crate::dsp::FilterMode;
use crate::error::{Error, Result};
use crate::numerics::{bilstm_layer, Bound, Conv2dSpec, Init, LstmVars, ParamId, ParamStore, Tape, Tensor, Var, LEAKY_SLOPE};

pub const KERNEL: (usize, usize) = (6, 6);
pub const STRIDE: (usize, usize) = (1, 2);

/// Same-size padding along time, halving along frequency.
pub fn layer_spec() -> Conv2dSpec {
    Conv2dSpec::new(STRIDE, (2, 3), (2, 2))
}

/// Stride-1 same-size padding for the single-channel output convolution.
pub fn same_spec() -> Conv2dSpec {
    Conv2dSpec::new((1, 1), (2, 3), (2, 3))
}

fn pointwise_spec() -> Conv2dSpec {
    Conv2dSpec::new((1, 1), (0, 0), (0, 0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RUNetConfig {
    /// Encoder output channels per layer; the decoder mirrors them.
    pub channels: Vec<usize>,
    pub lstm_hidden: usize,
    pub mode: FilterMode,
    pub sources: usize,
    /// Negative slope of the leaky ReLU after every convolution.
    pub leaky_slope: f64,
}

impl RUNetConfig {
    pub fn new(channels: Vec<usize>, lstm_hidden: usize, mode: FilterMode) -> Self {
        RUNetConfig { channels, lstm_hidden, mode, sources: 2, leaky_slope: LEAKY_SLOPE }
    }

    pub fn layers(&self) -> usize {
        self.channels.len()
    }

    /// Smallest multiple of `2^L` holding `bins`.
    pub fn padded_bins(&self, bins: usize) -> usize {
        let q = 1usize << self.layers();
        bins.div_ceil(q) * q
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("runet needs at least one layer and positive channel counts".into()));
        }
        if self.lstm_hidden == 0 || self.sources == 0 {
            return Err(Error::Config("runet lstm_hidden and sources must be positive".into()));
        }
        Ok(())
    }

    /// Check that `bins` survives `L` stride-2 halvings and mirrors back.
    pub fn check_bins(&self, bins: usize) -> Result<()> {
        let q = 1usize << self.layers();
        if bins % q != 0 {
            return Err(Error::Config(format!(
                "{bins} frequency bins cannot be halved {} times; pad to {}",
                self.layers(),
                self.padded_bins(bins)
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    fn register(store: &mut ParamStore, init: &mut Init, name: &str, shape: [usize; 4], fan_in: usize, bias: usize) -> Self {
        Conv {
            w: store.add(format!("{name}.w"), init.uniform(&shape, fan_in)),
            b: store.add(format!("{name}.b"), Tensor::zeros([bias])),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmIds {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

impl LstmIds {
    fn register(store: &mut ParamStore, init: &mut Init, name: &str, input: usize, hidden: usize) -> Self {
        LstmIds {
            w_ih: store.add(format!("{name}.w_ih"), init.uniform(&[input, 4 * hidden], hidden)),
            w_hh: store.add(format!("{name}.w_hh"), init.uniform(&[hidden, 4 * hidden], hidden)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([4 * hidden])),
        }
    }

    pub fn bind(&self, b: &Bound) -> LstmVars {
        LstmVars { w_ih: b[self.w_ih], w_hh: b[self.w_hh], bias: b[self.bias] }
    }
}

#[derive(Clone, Debug)]
pub struct BridgeParams {
    pub layer1: (LstmIds, LstmIds),
    pub layer2: (LstmIds, LstmIds),
    pub proj: (ParamId, ParamId),
}

/// A registered RUNet for a given input plane count, microphone count and
/// frequency size.
#[derive(Clone, Debug)]
pub struct RUNet {
    pub config: RUNetConfig,
    pub in_channels: usize,
    pub mics: usize,
    /// Frequency bins kept by the filter head.
    pub bins: usize,
    /// Padded frequency size the U-net runs at.
    pub padded: usize,
    pub encoder: Vec<Conv>,
    pub residual: Vec<Conv>,
    pub decoder: Vec<Conv>,
    pub bridge: BridgeParams,
    pub single_out: Option<Conv>,
    /// `[F, C + 1, sources * taps * 2]`; the last input row is the bias.
    pub head: ParamId,
}

impl RUNet {
    pub fn register(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        config: RUNetConfig,
        in_channels: usize,
        mics: usize,
        bins: usize,
    ) -> Result<Self> {
        config.validate()?;
        let padded = config.padded_bins(bins);
        let (kh, kw) = KERNEL;
        let l = config.layers();
        let mut encoder = Vec::with_capacity(l);
        let mut prev = in_channels;
        for (i, &c) in config.channels.iter().enumerate() {
            encoder.push(Conv::register(store, init, &format!("{prefix}.enc{i}"), [c, prev, kh, kw], prev * kh * kw, c));
            prev = c;
        }
        let bottleneck = config.channels[l - 1] * (padded >> l);
        let h = config.lstm_hidden;
        let bridge = BridgeParams {
            layer1: (
                LstmIds::register(store, init, &format!("{prefix}.bridge.l1.fwd"), bottleneck, h),
                LstmIds::register(store, init, &format!("{prefix}.bridge.l1.bwd"), bottleneck, h),
            ),
            layer2: (
                LstmIds::register(store, init, &format!("{prefix}.bridge.l2.fwd"), 2 * h, h),
                LstmIds::register(store, init, &format!("{prefix}.bridge.l2.bwd"), 2 * h, h),
            ),
            proj: (
                store.add(format!("{prefix}.bridge.proj.w"), init.uniform(&[2 * h, bottleneck], 2 * h)),
                store.add(format!("{prefix}.bridge.proj.b"), Tensor::zeros([bottleneck])),
            ),
        };
        let mut residual = Vec::with_capacity(l);
        let mut decoder = Vec::with_capacity(l);
        for i in (0..l).rev() {
            let c = config.channels[i];
            let below = if i == 0 { mics } else { config.channels[i - 1] };
            residual.push(Conv::register(store, init, &format!("{prefix}.dec{i}.res"), [c, c, 1, 1], c, c));
            let fan_in = c * kh * kw / STRIDE.1;
            decoder.push(Conv::register(store, init, &format!("{prefix}.dec{i}"), [c, below, kh, kw], fan_in, below));
        }
        let single_out = match config.mode {
            FilterMode::Single { .. } => {
                Some(Conv::register(store, init, &format!("{prefix}.single_out"), [1, mics, kh, kw], mics * kh * kw, 1))
            }
            FilterMode::Multi => None,
        };
        let c_out = if single_out.is_some() { 1 } else { mics };
        let n_out = config.sources * config.mode.taps(mics) * 2;
        let mut w = init.uniform(&[bins, c_out + 1, n_out], c_out).into_data();
        for f in 0..bins {
            let row = (f * (c_out + 1) + c_out) * n_out;
            w[row..row + n_out].iter_mut().for_each(|v| *v = 0.0);
        }
        let head = store.add(format!("{prefix}.head.w"), Tensor::new([bins, c_out + 1, n_out], w)?);
        Ok(RUNet { config, in_channels, mics, bins, padded, encoder, residual, decoder, bridge, single_out, head })
    }

    /// Encoder outputs of every layer, shallowest first.
    pub fn encode(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Vec<Var>> {
        let s = tape.shape(x);
        if s.len() != 3 || s[0] != self.in_channels || s[2] != self.padded {
            return Err(Error::shape(
                "runet",
                format!("input {:?}, expected [{}, K, {}]", s, self.in_channels, self.padded),
            ));
        }
        let mut outs = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for conv in &self.encoder {
            let y = tape.conv2d(h, b[conv.w], Some(b[conv.b]), layer_spec())?;
            h = tape.leaky_relu(y, self.config.leaky_slope)?;
            outs.push(h);
        }
        Ok(outs)
    }

    /// Two BLSTM layers over time with summed outputs, projected and added to
    /// the `[C_L, K, F_L]` input.
    pub fn blstm_bridge(&self, tape: &mut Tape, b: &Bound, encoded: Var) -> Result<Var> {
        let s = tape.shape(encoded).to_vec();
        let (c, k, f) = (s[0], s[1], s[2]);
        let flat = tape.permute(encoded, &[1, 0, 2])?;
        let flat = tape.reshape(flat, &[k, c * f])?;
        let p = &self.bridge;
        let h1 = bilstm_layer(tape, flat, &p.layer1.0.bind(b), &p.layer1.1.bind(b))?;
        let h2 = bilstm_layer(tape, h1, &p.layer2.0.bind(b), &p.layer2.1.bind(b))?;
        let h = tape.add(h1, h2)?;
        let y = tape.matmul(h, b[p.proj.0])?;
        let y = tape.add_bias(y, b[p.proj.1])?;
        let y = tape.reshape(y, &[k, c, f])?;
        let y = tape.permute(y, &[1, 0, 2])?;
        tape.add(encoded, y)
    }

    /// Decoder from the bridge output, using encoder outputs as skips.
    pub fn decode(&self, tape: &mut Tape, b: &Bound, bottom: Var, skips: &[Var]) -> Result<Var> {
        let mut h = bottom;
        for ((dec, res), skip) in self.decoder.iter().zip(&self.residual).zip(skips.iter().rev()) {
            let r = tape.conv2d(*skip, b[res.w], Some(b[res.b]), pointwise_spec())?;
            let x = tape.add(h, r)?;
            let s = tape.shape(x).to_vec();
            let y = tape.conv2d_transpose(x, b[dec.w], Some(b[dec.b]), layer_spec(), (s[1], 2 * s[2]))?;
            h = tape.leaky_relu(y, self.config.leaky_slope)?;
        }
        if let Some(conv) = &self.single_out {
            let y = tape.conv2d(h, b[conv.w], Some(b[conv.b]), same_spec())?;
            h = tape.leaky_relu(y, self.config.leaky_slope)?;
        }
        Ok(h)
    }

    /// Encoder, bridge and decoder: `[in_channels, K, F']` to `[C_out, K, F']`.
    pub fn encoder_decoder(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        let skips = self.encode(tape, b, x)?;
        let bottom = self.blstm_bridge(tape, b, *skips.last().expect("at least one layer"))?;
        self.decode(tape, b, bottom, &skips)
    }

    /// Per-bin fully connected layer and `tanh` on `[C_out, K, F']` decoded
    /// features. Returns `(re, im)` filter planes `[taps, K, F]` per source.
    pub fn filter_heads(&self, tape: &mut Tape, b: &Bound, decoded: Var) -> Result<Vec<(Var, Var)>> {
        let s = tape.shape(decoded).to_vec();
        let k = s[1];
        let x = tape.slice(decoded, 2, 0, self.bins)?;
        let x = tape.permute(x, &[2, 1, 0])?;
        let ones = tape.constant(Tensor::ones([self.bins, k, 1]));
        let x = tape.concat(&[x, ones], 2)?;
        let y = tape.matmul(x, b[self.head])?;
        let y = tape.tanh(y)?;
        let taps = self.config.mode.taps(self.mics);
        let y = tape.permute(y, &[2, 1, 0])?;
        debug_assert_eq!(tape.shape(y), [self.config.sources * taps * 2, k, self.bins]);
        let y = tape.reshape(y, &[self.config.sources * taps, 2, k, self.bins])?;
        (0..self.config.sources)
            .map(|src| {
                let block = tape.slice(y, 0, src * taps, (src + 1) * taps)?;
                let re = tape.slice(block, 1, 0, 1)?;
                let im = tape.slice(block, 1, 1, 2)?;
                Ok((tape.reshape(re, &[taps, k, self.bins])?, tape.reshape(im, &[taps, k, self.bins])?))
            })
            .collect()
    }
}
