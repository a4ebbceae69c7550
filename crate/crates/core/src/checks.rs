//! Finite-difference checks of every layer type and of the whole network at
//! a size small enough to perturb each parameter.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::dsp::{apply_filter_graph, istft_graph, stft_graph, FilterMode, MultiWave, StftConfig, StftEngine};
use crate::error::Result;
use crate::loss::{cmse_graph, combined_graph, upit_graph, LossConfig, LossMode};
use crate::model::{ModelConfig, Trunet};
use crate::numerics::{
    bilstm_layer, grad_check_many, Bound, Conv2dSpec, GradCheckOptions, GradCheckReport, LstmVars, Tape, Tensor, Var,
    LAYER_NORM_EPS, LEAKY_SLOPE,
};
use crate::runet::{layer_spec, RUNetConfig, KERNEL};
use crate::tnet::{attention_head, complex_attention_head, TNetConfig, Variant};
use crate::train::Example;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub report: GradCheckReport,
}

fn random(rng: &mut Xoshiro256PlusPlus, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape matches data")
}

/// `sum(y * r)` with fixed random `r`, so every output coordinate matters.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let w = random(&mut rng, tape.shape(y), 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// Network with two microphones, three frames of eight padded bins and a handful of units.
pub fn tiny_config(variant: Option<Variant>, mode: FilterMode) -> ModelConfig {
    ModelConfig {
        mics: 2,
        stft: StftConfig::new(TINY_FRAME, TINY_FRAME / 2).expect("valid frame and hop"),
        tnet: variant.map(|v| TNetConfig::new(v, 1, 2, 8)),
        runet: RUNetConfig::new(vec![2, 4], 3, mode),
    }
}

/// Frame length giving five bins, padded to eight.
pub const TINY_FRAME: usize = 8;
/// Signal length giving three frames.
pub const TINY_LEN: usize = 12;

/// Random multi-channel example for `config`, `len` samples long.
pub fn random_example(config: &ModelConfig, len: usize, seed: u64) -> Result<Example> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut wave = |ch: usize| -> Vec<Vec<f64>> {
        (0..ch).map(|_| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    };
    let mixture = MultiWave::new(wave(config.mics), 16_000)?;
    let targets = wave(config.runet.sources);
    let engine = StftEngine::new(config.stft)?;
    let reference = crate::train::reference_channel(config.runet.mode);
    Example::new("check", &mixture, targets, &engine, reference)
}

/// Check a weighted sum of every network output (filters, filtered spectra
/// and waveforms) against every parameter. Parameters are the seeded
/// initialisation plus uniform noise in `±0.03`, so zero biases acting on the
/// zero-padded bins do not put pre-activations exactly on a ReLU kink.
pub fn model_check(config: &ModelConfig, seed: u64, max_coords: Option<usize>) -> Result<GradCheckReport> {
    let (model, mut params) = Trunet::new(config.clone(), seed)?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ 0x5eed);
    params.update(|_, d| d.iter_mut().for_each(|v| *v += rng.random_range(-0.03..0.03)));
    let ex = random_example(config, TINY_LEN, seed.wrapping_add(1))?;
    let opts = GradCheckOptions { max_coords, seed, ..Default::default() };
    grad_check_many(
        |tape, vars| {
            let b = Bound::from_vars(vars.to_vec());
            let out = model.forward(tape, &b, &ex.mixture)?;
            let mut parts = Vec::new();
            for ((f, x), w) in out.filters.iter().zip(&out.spectra).zip(&out.waves) {
                for v in [f.0, f.1, x.0, x.1, *w] {
                    let n = tape.value(v).numel();
                    parts.push(tape.reshape(v, &[n])?);
                }
            }
            let all = tape.concat(&parts, 0)?;
            weighted_sum(tape, all, seed)
        },
        params.tensors(),
        &opts,
    )
}

/// Check the training loss against its estimate inputs, for spectra with
/// magnitudes well away from zero.
pub fn loss_check(loss: &LossConfig, seed: u64) -> Result<GradCheckReport> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut r = |shape: &[usize]| {
        let t = random(&mut rng, shape, 1.0);
        t.map(|v| v + v.signum() * 0.5)
    };
    let targets: Vec<_> = (0..4).map(|_| r(&[3, 8])).collect();
    let estimates: Vec<_> = (0..4).map(|_| r(&[3, 8])).collect();
    let opts = GradCheckOptions { tol: 1e-5, ..Default::default() };
    grad_check_many(
        |tape, vars| {
            let t: Vec<_> = targets.iter().map(|x| tape.constant(x.clone())).collect();
            let tv = [(t[0], t[1]), (t[2], t[3])];
            let ev = [(vars[0], vars[1]), (vars[2], vars[3])];
            Ok(upit_graph(tape, &tv, &ev, |tape, a, b| loss.graph(tape, a, b))?.0)
        },
        &estimates,
        &opts,
    )
}

fn layer<F>(name: &str, points: Vec<Tensor>, seed: u64, f: F) -> Result<CheckOutcome>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let report = grad_check_many(
        |t, v| {
            let y = f(t, v)?;
            if t.value(y).numel() == 1 {
                return Ok(y);
            }
            weighted_sum(t, y, seed)
        },
        &points,
        &GradCheckOptions::default(),
    )?;
    Ok(CheckOutcome { name: name.to_string(), report })
}

/// One check per layer type used by the network.
pub fn layer_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut r = |shape: &[usize]| random(&mut rng, shape, 1.0);
    let mut out = Vec::new();

    out.push(layer("linear", vec![r(&[3, 5, 4]), r(&[4, 6]), r(&[6])], seed, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        t.add_bias(y, v[2])
    })?);
    let (kh, kw) = KERNEL;
    out.push(layer("conv2d_encoder", vec![r(&[2, 5, 8]), r(&[3, 2, kh, kw]), r(&[3])], seed, |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), layer_spec())?;
        t.leaky_relu(y, LEAKY_SLOPE)
    })?);
    out.push(layer("conv2d_decoder", vec![r(&[3, 5, 4]), r(&[3, 2, kh, kw]), r(&[2])], seed, |t, v| {
        t.conv2d_transpose(v[0], v[1], Some(v[2]), layer_spec(), (5, 8))
    })?);
    out.push(layer("conv1x1", vec![r(&[3, 4, 5]), r(&[2, 3, 1, 1])], seed, |t, v| {
        t.conv2d(v[0], v[1], None, Conv2dSpec::new((1, 1), (0, 0), (0, 0)))
    })?);
    out.push(layer("layer_norm", vec![r(&[3, 2, 6]), r(&[6]), r(&[6])], seed, |t, v| {
        t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)
    })?);
    out.push(layer("attention", vec![r(&[4, 3, 2]), r(&[4, 3, 2]), r(&[4, 3, 2])], seed, |t, v| {
        attention_head(t, v[0], v[1], v[2])
    })?);
    out.push(layer(
        "complex_attention",
        vec![r(&[4, 3, 2]), r(&[4, 3, 2]), r(&[4, 3, 2]), r(&[4, 3, 2]), r(&[4, 3, 2])],
        seed,
        |t, v| complex_attention_head(t, (v[0], v[1]), (v[2], v[3]), v[4]),
    )?);
    let (f, h) = (3, 2);
    out.push(layer(
        "blstm",
        vec![r(&[4, f]), r(&[f, 4 * h]), r(&[h, 4 * h]), r(&[4 * h]), r(&[f, 4 * h]), r(&[h, 4 * h]), r(&[4 * h])],
        seed,
        |t, v| {
            let fwd = LstmVars { w_ih: v[1], w_hh: v[2], bias: v[3] };
            let bwd = LstmVars { w_ih: v[4], w_hh: v[5], bias: v[6] };
            bilstm_layer(t, v[0], &fwd, &bwd)
        },
    )?);
    let engine = StftEngine::new(StftConfig::new(16, 8)?)?;
    out.push(layer("stft_istft", vec![r(&[40])], seed, |t, v| {
        let (re, im) = stft_graph(t, &engine, v[0])?;
        let re2 = t.scale(re, 0.5)?;
        istft_graph(t, &engine, re2, im, 40)
    })?);
    for (name, mode, taps) in [("filter_multi", FilterMode::Multi, 2), ("filter_single", FilterMode::Single { reference: 1 }, 1)] {
        out.push(layer(name, vec![r(&[2, 3, 5]), r(&[2, 3, 5]), r(&[taps, 3, 5]), r(&[taps, 3, 5])], seed, move |t, v| {
            let (xr, xi) = apply_filter_graph(t, (v[0], v[1]), (v[2], v[3]), mode)?;
            t.concat(&[xr, xi], 0)
        })?);
    }
    out.push(layer("cmse", vec![r(&[3, 5]), r(&[3, 5]), r(&[3, 5]), r(&[3, 5])], seed, |t, v| {
        cmse_graph(t, (v[0], v[1]), (v[2], v[3]), 0.3)
    })?);
    out.push(layer("combined_loss", vec![r(&[3, 5]), r(&[3, 5]), r(&[3, 5]), r(&[3, 5])], seed, |t, v| {
        combined_graph(t, (v[0], v[1]), (v[2], v[3]), 0.3, 0.7)
    })?);
    out.push(layer("upit", (0..8).map(|_| r(&[3, 5])).collect(), seed, |t, v| {
        let targets = [(v[0], v[1]), (v[2], v[3])];
        let estimates = [(v[4], v[5]), (v[6], v[7])];
        Ok(upit_graph(t, &targets, &estimates, |t, a, b| combined_graph(t, a, b, 0.3, 0.7))?.0)
    })?);
    Ok(out)
}

/// Layer checks, loss checks, and whole-network checks for every TNet variant,
/// without a TNet, and for both filter modes.
pub fn gradcheck_suite(seed: u64, max_coords: Option<usize>) -> Result<Vec<CheckOutcome>> {
    let mut out = layer_checks(seed)?;
    for mode in [LossMode::Cmse, LossMode::Combined] {
        let loss = LossConfig { mode, ..Default::default() };
        out.push(CheckOutcome { name: format!("loss_{mode}"), report: loss_check(&loss, seed)? });
    }
    let variants = [None, Some(Variant::Cat), Some(Variant::RealImag), Some(Variant::MagPhase)];
    for mode in [FilterMode::Multi, FilterMode::Single { reference: 1 }] {
        for v in variants {
            let report = model_check(&tiny_config(v, mode), seed, max_coords)?;
            let tag = match mode {
                FilterMode::Multi => "multi",
                FilterMode::Single { .. } => "single",
            };
            let name = format!("model_{}_{tag}", v.map_or("runet_only".to_string(), |v| v.to_string()));
            out.push(CheckOutcome { name, report });
        }
    }
    Ok(out)
}
