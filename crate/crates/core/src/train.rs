//! Training loop: uPIT loss on the tape, global-norm clipping, Adam, and
//! checkpoints holding parameters plus optimiser state.

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::{DataConfig, RunConfig};
use crate::datagen::{draw_scene, render_scene, Mixture, SceneSpec};
use crate::dsp::{stft, stft_graph, FilterMode, MultiWave, Spectra, StftEngine};
use crate::error::{Error, Result};
use crate::loss::{upit_graph, LossConfig};
use crate::metrics::{evaluate, EvalReport};
use crate::model::Trunet;
use crate::numerics::{Bound, ParamStore, Tape, Tensor, Var};

/// Factor applied to a gradient of global L2 norm `norm` so it does not exceed `max`.
pub fn clip_factor(norm: f64, max: f64) -> f64 {
    if norm > max {
        max / norm
    } else {
        1.0
    }
}

/// One training or evaluation item, reduced to what the model and loss need.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    /// Mixture spectra `[M, K, F]`.
    pub mixture: Spectra,
    /// Mixture waveform at the reference channel.
    pub reference: Vec<f64>,
    /// Target waveforms at the reference channel.
    pub targets: Vec<Vec<f64>>,
    /// Target spectra `[1, K, F]`.
    pub target_spectra: Vec<Spectra>,
}

/// Channel the targets and metrics refer to.
pub fn reference_channel(mode: FilterMode) -> usize {
    match mode {
        FilterMode::Multi => 0,
        FilterMode::Single { reference } => reference,
    }
}

impl Example {
    pub fn new(id: &str, mixture: &MultiWave, targets: Vec<Vec<f64>>, engine: &StftEngine, reference: usize) -> Result<Self> {
        if reference >= mixture.num_channels() {
            return Err(Error::Input(format!("reference channel {reference} out of range")));
        }
        let fs = mixture.sample_rate();
        let mut target_spectra = Vec::with_capacity(targets.len());
        for t in &targets {
            if t.len() != mixture.len() {
                return Err(Error::Input(format!("target length {} != mixture length {}", t.len(), mixture.len())));
            }
            target_spectra.push(stft(&MultiWave::mono(t.clone(), fs)?, engine)?);
        }
        Ok(Example {
            id: id.to_string(),
            mixture: stft(mixture, engine)?,
            reference: mixture.channel(reference).to_vec(),
            targets,
            target_spectra,
        })
    }

    pub fn from_mixture(id: &str, mix: &Mixture, engine: &StftEngine, reference: usize) -> Result<Self> {
        let targets = mix.targets.iter().map(|t| t.channel(reference).to_vec()).collect();
        Self::new(id, &mix.mixture, targets, engine, reference)
    }
}

/// Draw and render `cfg.scenes` scenes. Scene `i` depends only on the seed and `i`.
pub fn generate(cfg: &DataConfig) -> Result<Vec<(SceneSpec, Mixture)>> {
    (0..cfg.scenes as u64)
        .into_par_iter()
        .map(|i| {
            let scene = draw_scene(&cfg.scene, cfg.seed, i)?;
            let mix = render_scene(&scene)?;
            Ok((scene, mix))
        })
        .collect()
}

/// Render scenes and convert them into examples for `model`.
pub fn generate_examples(cfg: &DataConfig, model: &Trunet) -> Result<Vec<Example>> {
    let reference = reference_channel(model.config.runet.mode);
    generate(cfg)?
        .iter()
        .map(|(s, m)| Example::from_mixture(&s.id, m, model.engine(), reference))
        .collect()
}

/// Loss of one example on `tape`, with the assignment uPIT picked.
pub fn example_loss(tape: &mut Tape, model: &Trunet, b: &Bound, loss: &LossConfig, ex: &Example) -> Result<(Var, Vec<usize>)> {
    let out = model.forward(tape, b, &ex.mixture)?;
    let (k, f) = (ex.mixture.num_frames(), ex.mixture.num_bins());
    let mut targets = Vec::with_capacity(ex.target_spectra.len());
    for s in &ex.target_spectra {
        targets.push((tape.constant(s.re.reshape([k, f])?), tape.constant(s.im.reshape([k, f])?)));
    }
    let estimates = if loss.consistent {
        out.waves.iter().map(|&w| stft_graph(tape, model.engine(), w)).collect::<Result<Vec<_>>>()?
    } else {
        out.spectra.clone()
    };
    upit_graph(tape, &targets, &estimates, |t, a, e| loss.graph(t, a, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    /// Number of completed steps after this one.
    pub step: u64,
    pub loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Trunet,
    pub params: ParamStore,
    adam_m: Vec<Tensor>,
    adam_v: Vec<Tensor>,
    step: u64,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let (model, params) = Trunet::new(config.model.clone(), config.train.seed)?;
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Ok(Trainer { adam_m: zeros(), adam_v: zeros(), config, model, params, step: 0 })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Indices of the examples used by step `step` on a dataset of size `n`.
    pub fn batch_indices(&self, step: u64, n: usize) -> Vec<usize> {
        let b = self.config.train.batch_size as u64;
        (0..b).map(|j| ((step * b + j) % n as u64) as usize).collect()
    }

    /// Mean loss and parameter gradients over the examples at `indices`.
    /// Examples run in parallel; the reduction order is fixed.
    pub fn loss_and_grads(&self, data: &[Example], indices: &[usize]) -> Result<(f64, Vec<Tensor>)> {
        let per: Vec<(f64, Vec<Tensor>)> = indices
            .par_iter()
            .map(|&i| {
                let mut tape = Tape::new();
                let b = self.params.bind(&mut tape);
                let (l, _) = example_loss(&mut tape, &self.model, &b, &self.config.loss, &data[i])?;
                let mut g = tape.backward(l)?;
                let grads = b
                    .vars()
                    .iter()
                    .zip(self.params.tensors())
                    .map(|(&v, p)| g.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                    .collect();
                Ok((tape.value(l).item(), grads))
            })
            .collect::<Result<_>>()?;
        let scale = 1.0 / indices.len() as f64;
        let mut loss = 0.0;
        let mut total: Vec<Vec<f64>> = self.params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        for (l, grads) in &per {
            loss += l;
            for (acc, g) in total.iter_mut().zip(grads) {
                acc.iter_mut().zip(g.data()).for_each(|(a, v)| *a += v);
            }
        }
        let grads = total
            .into_iter()
            .zip(self.params.tensors())
            .map(|(d, p)| Tensor::new(p.shape(), d.into_iter().map(|v| v * scale).collect()))
            .collect::<Result<_>>()?;
        Ok((loss * scale, grads))
    }

    /// One optimiser step on the batch scheduled for the current step.
    pub fn train_step(&mut self, data: &[Example]) -> Result<StepStats> {
        if data.is_empty() {
            return Err(Error::Input("no training examples".into()));
        }
        let indices = self.batch_indices(self.step, data.len());
        let (loss, grads) = match self.loss_and_grads(data, &indices) {
            Err(Error::NonFinite { op }) => return Err(self.diverged(&format!("{op} produced a non-finite value"))),
            r => r?,
        };
        let norm = grads.iter().map(|g| g.l2_norm_sq()).sum::<f64>().sqrt();
        if !loss.is_finite() || !norm.is_finite() {
            return Err(self.diverged(&format!("loss {loss}, gradient norm {norm}")));
        }
        let t = &self.config.train;
        let clip = clip_factor(norm, t.clip);
        let step = self.step + 1;
        let bc1 = 1.0 - t.beta1.powf(step as f64);
        let bc2 = 1.0 - t.beta2.powf(step as f64);
        let (b1, b2, lr, eps) = (t.beta1, t.beta2, t.lr, t.eps);
        for (i, g) in grads.iter().enumerate() {
            let m = std::mem::replace(&mut self.adam_m[i], Tensor::scalar(0.0));
            let v = std::mem::replace(&mut self.adam_v[i], Tensor::scalar(0.0));
            let shape = m.shape().to_vec();
            let (mut m, mut v) = (m.into_data(), v.into_data());
            for ((mj, vj), gj) in m.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                let gj = gj * clip;
                *mj = b1 * *mj + (1.0 - b1) * gj;
                *vj = b2 * *vj + (1.0 - b2) * gj * gj;
            }
            self.adam_m[i] = Tensor::new(shape.clone(), m)?;
            self.adam_v[i] = Tensor::new(shape, v)?;
        }
        let (ms, vs) = (&self.adam_m, &self.adam_v);
        self.params.update(|id, p| {
            let (m, v) = (ms[id.index()].data(), vs[id.index()].data());
            for ((pj, mj), vj) in p.iter_mut().zip(m).zip(v) {
                *pj -= lr * (mj / bc1) / ((vj / bc2).sqrt() + eps);
            }
        });
        self.step = step;
        if let Some((name, _)) = self.params.iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::Diverged { step: step as usize, detail: format!("parameter {name} became non-finite") });
        }
        Ok(StepStats { step, loss, grad_norm: norm })
    }

    fn diverged(&self, cause: &str) -> Error {
        let mut worst = ("", 0.0f64);
        for (name, t) in self.params.iter() {
            if t.max_abs() > worst.1 || !t.is_finite() {
                worst = (name, t.max_abs());
            }
        }
        Error::Diverged {
            step: self.step as usize + 1,
            detail: format!("{cause}, largest parameter magnitude {} in {}", worst.1, worst.0),
        }
    }

    /// Run steps until `self.step() == until`, calling `on_step` after each.
    pub fn train_until(&mut self, data: &[Example], until: u64, mut on_step: impl FnMut(&Self, &StepStats) -> Result<()>) -> Result<Vec<StepStats>> {
        let mut stats = Vec::new();
        while self.step < until {
            let s = self.train_step(data)?;
            on_step(self, &s)?;
            stats.push(s);
        }
        Ok(stats)
    }

    /// Mean loss over `data` without updating anything.
    pub fn mean_loss(&self, data: &[Example]) -> Result<f64> {
        let losses: Vec<f64> = data
            .par_iter()
            .map(|ex| {
                let mut tape = Tape::new();
                let b = self.params.bind_constant(&mut tape);
                let (l, _) = example_loss(&mut tape, &self.model, &b, &self.config.loss, ex)?;
                Ok(tape.value(l).item())
            })
            .collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> = self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        for (prefix, state) in [("adam.m.", &self.adam_m), ("adam.v.", &self.adam_v)] {
            for ((n, _), t) in self.params.iter().zip(state) {
                tensors.push((format!("{prefix}{n}"), t.clone()));
            }
        }
        Checkpoint { step: self.step, config: self.config.to_text(), tensors }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = RunConfig::from_text(&ck.config)?;
        let mut t = Trainer::new(config)?;
        let expected = 3 * t.params.len();
        if ck.tensors.len() != expected {
            return Err(Error::Checkpoint(format!("{} tensors, model needs {expected}", ck.tensors.len())));
        }
        let ids: Vec<_> = t.params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let name = t.params.name(id).to_string();
            let fetch = |n: &str, like: &Tensor| -> Result<Tensor> {
                let v = ck.get(n).ok_or_else(|| Error::Checkpoint(format!("missing tensor {n}")))?;
                if v.shape() != like.shape() {
                    return Err(Error::Checkpoint(format!("{n}: shape {:?}, model needs {:?}", v.shape(), like.shape())));
                }
                Ok(v.clone())
            };
            let value = fetch(&name, t.params.get(id))?;
            t.adam_m[i] = fetch(&format!("adam.m.{name}"), &t.adam_m[i])?;
            t.adam_v[i] = fetch(&format!("adam.v.{name}"), &t.adam_v[i])?;
            t.params.set(id, value)?;
        }
        t.step = ck.step;
        Ok(t)
    }

    /// Separated waveforms for one mixture.
    pub fn separate(&self, mixture: &Spectra) -> Result<Vec<Vec<f64>>> {
        separate(&self.model, &self.params, mixture)
    }

    pub fn evaluate(&self, data: &[Example]) -> Result<EvalReport> {
        evaluate_examples(&self.model, &self.params, data)
    }
}

/// Separate a multi-channel waveform. The channel count must match the model.
pub fn separate_wave(model: &Trunet, params: &ParamStore, wave: &MultiWave) -> Result<Vec<Vec<f64>>> {
    let m = model.config.mics;
    if wave.num_channels() != m {
        return Err(Error::Input(format!("input has {} channels, the model expects M = {m}", wave.num_channels())));
    }
    separate(model, params, &stft(wave, model.engine())?)
}

/// Run the model without gradients and return one waveform per source.
pub fn separate(model: &Trunet, params: &ParamStore, mixture: &Spectra) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let b = params.bind_constant(&mut tape);
    let out = model.forward(&mut tape, &b, mixture)?;
    Ok(out.waves.iter().map(|&w| tape.value(w).data().to_vec()).collect())
}

pub fn evaluate_examples(model: &Trunet, params: &ParamStore, data: &[Example]) -> Result<EvalReport> {
    let utterances = data
        .par_iter()
        .map(|ex| {
            let est = separate(model, params, &ex.mixture)?;
            evaluate(&ex.id, &est, &ex.targets, &ex.reference)
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport { utterances })
}
