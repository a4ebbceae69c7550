//! Flat `key = value` run configuration.
//!
//! `#` starts a comment that runs to the end of the line. A `preset` key, if present, is applied
//! first and the remaining keys override it. Unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::datagen::SceneConfig;
use crate::dsp::{FilterMode, StftConfig};
use crate::error::{Error, Result};
use crate::loss::{LossConfig, LossMode};
use crate::model::ModelConfig;
use crate::tnet::{TNetConfig, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Toy,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Preset::Toy),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::Config(format!("unknown preset {s:?} (expected toy or paper)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub clip: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            clip: 5.0,
            steps: 2000,
            batch_size: 1,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            checkpoint_every: 0,
            log_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub scenes: usize,
    pub seed: u64,
    pub scene: SceneConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let variant = Some(Variant::MagPhase);
        match p {
            Preset::Toy => RunConfig {
                model: ModelConfig::toy(variant, FilterMode::Multi),
                loss: LossConfig::default(),
                train: TrainConfig::default(),
                data: DataConfig { scenes: 4, seed: 0, scene: SceneConfig { mics: 2, seconds: 2.0, ..Default::default() } },
            },
            Preset::Paper => RunConfig {
                model: ModelConfig::paper(variant, FilterMode::Multi),
                loss: LossConfig::default(),
                train: TrainConfig::default(),
                data: DataConfig { scenes: 1000, seed: 0, scene: SceneConfig::default() },
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let t = &self.train;
        if !(t.clip > 0.0) {
            return Err(Error::Config("train.clip must be positive".into()));
        }
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(t.lr >= 0.0) || !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.eps > 0.0) {
            return Err(Error::Config("invalid optimiser settings".into()));
        }
        if self.data.scene.mics != self.model.mics {
            return Err(Error::Config(format!(
                "data.mics = {} but model.mics = {}",
                self.data.scene.mics, self.model.mics
            )));
        }
        if self.data.scene.sample_rate == 0 || !(self.data.scene.seconds > 0.0) {
            return Err(Error::Config("data.sample_rate and data.seconds must be positive".into()));
        }
        Ok(())
    }

    /// Serialise every field as `key = value` lines in a fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let (mode, reference) = match m.runet.mode {
            FilterMode::Multi => ("multi", 0),
            FilterMode::Single { reference } => ("single", reference),
        };
        let list = |v: &[usize]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        let t = m.tnet.clone();
        let d = &self.data.scene;
        vec![
            ("model.mics", m.mics.to_string()),
            ("stft.frame", m.stft.frame.to_string()),
            ("stft.hop", m.stft.hop.to_string()),
            ("stft.window", "hann".into()),
            ("tnet.enabled", t.is_some().to_string()),
            ("tnet.variant", t.as_ref().map_or("magphase".into(), |c| c.variant.to_string())),
            ("tnet.blocks", t.as_ref().map_or(0, |c| c.blocks).to_string()),
            ("tnet.heads", t.as_ref().map_or(0, |c| c.heads).to_string()),
            ("tnet.dim", t.as_ref().map_or(0, |c| c.dim).to_string()),
            ("tnet.ff_dim", t.as_ref().map_or(0, |c| c.ff_dim).to_string()),
            ("tnet.positional_encoding", t.as_ref().is_none_or(|c| c.positional_encoding).to_string()),
            ("tnet.norm_order", "post".into()),
            ("runet.channels", list(&m.runet.channels)),
            ("runet.lstm_hidden", m.runet.lstm_hidden.to_string()),
            ("runet.mode", mode.into()),
            ("runet.reference", reference.to_string()),
            ("runet.sources", m.runet.sources.to_string()),
            ("runet.leaky_slope", fmt_f(m.runet.leaky_slope)),
            ("loss.mode", self.loss.mode.to_string()),
            ("loss.c", fmt_f(self.loss.c)),
            ("loss.alpha", fmt_f(self.loss.alpha)),
            ("loss.consistent", self.loss.consistent.to_string()),
            ("train.lr", fmt_f(self.train.lr)),
            ("train.clip", fmt_f(self.train.clip)),
            ("train.steps", self.train.steps.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.seed", self.train.seed.to_string()),
            ("train.beta1", fmt_f(self.train.beta1)),
            ("train.beta2", fmt_f(self.train.beta2)),
            ("train.eps", fmt_f(self.train.eps)),
            ("train.checkpoint_every", self.train.checkpoint_every.to_string()),
            ("train.log_every", self.train.log_every.to_string()),
            ("data.scenes", self.data.scenes.to_string()),
            ("data.seed", self.data.seed.to_string()),
            ("data.mics", d.mics.to_string()),
            ("data.radius", fmt_f(d.radius)),
            ("data.sample_rate", d.sample_rate.to_string()),
            ("data.seconds", fmt_f(d.seconds)),
            ("data.rt60_min", fmt_f(d.rt60.0)),
            ("data.rt60_max", fmt_f(d.rt60.1)),
            ("data.margin", fmt_f(d.margin)),
        ]
    }

    /// Parse config text on top of the toy preset (or the preset it names).
    pub fn from_text(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        let mut order = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if pairs.insert(k.clone(), v).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k}", i + 1)));
            }
            order.push(k);
        }
        let preset = match pairs.remove("preset") {
            Some(p) => p.parse()?,
            None => Preset::Toy,
        };
        let mut c = RunConfig::preset(preset);
        for k in order.iter().filter(|k| k.as_str() != "preset") {
            c.set(k, &pairs[k])?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Apply one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: String| Error::Config(format!("{key} = {value:?}: {e}"));
        macro_rules! parse {
            () => {
                parse_value(key, value)?
            };
        }
        let m = &mut self.model;
        match key {
            "model.mics" => m.mics = parse!(),
            "stft.frame" => m.stft = StftConfig::new(parse!(), m.stft.hop)?,
            "stft.hop" => m.stft = StftConfig::new(m.stft.frame, parse!())?,
            "stft.window" if value == "hann" => {}
            "tnet.enabled" => {
                let on: bool = parse!();
                if !on {
                    m.tnet = None;
                } else if m.tnet.is_none() {
                    m.tnet = Some(TNetConfig::new(Variant::MagPhase, 1, 2, 8));
                }
            }
            "tnet.variant" => {
                let v: Variant = value.parse()?;
                if let Some(t) = m.tnet.as_mut() {
                    t.variant = v;
                }
            }
            "tnet.blocks" | "tnet.heads" | "tnet.dim" | "tnet.ff_dim" | "tnet.positional_encoding" => {
                if let Some(t) = m.tnet.as_mut() {
                    match key {
                        "tnet.blocks" => t.blocks = parse!(),
                        "tnet.heads" => t.heads = parse!(),
                        "tnet.dim" => t.dim = parse!(),
                        "tnet.ff_dim" => t.ff_dim = parse!(),
                        _ => t.positional_encoding = parse!(),
                    }
                }
            }
            "tnet.norm_order" if value == "post" => {}
            "runet.channels" => {
                m.runet.channels = value
                    .split(',')
                    .map(|s| s.trim().parse::<usize>().map_err(|e| bad(e.to_string())))
                    .collect::<Result<_>>()?
            }
            "runet.lstm_hidden" => m.runet.lstm_hidden = parse!(),
            "runet.mode" => {
                let reference = match m.runet.mode {
                    FilterMode::Single { reference } => reference,
                    FilterMode::Multi => 0,
                };
                m.runet.mode = match value {
                    "multi" => FilterMode::Multi,
                    "single" => FilterMode::Single { reference },
                    _ => return Err(bad("expected multi or single".into())),
                }
            }
            "runet.reference" => {
                let r: usize = parse!();
                if let FilterMode::Single { reference } = &mut m.runet.mode {
                    *reference = r;
                }
            }
            "runet.sources" => m.runet.sources = parse!(),
            "runet.leaky_slope" => m.runet.leaky_slope = parse!(),
            "loss.mode" => self.loss.mode = value.parse::<LossMode>()?,
            "loss.c" => self.loss.c = parse!(),
            "loss.alpha" => self.loss.alpha = parse!(),
            "loss.consistent" => self.loss.consistent = parse!(),
            "train.lr" => self.train.lr = parse!(),
            "train.clip" => self.train.clip = parse!(),
            "train.steps" => self.train.steps = parse!(),
            "train.batch_size" => self.train.batch_size = parse!(),
            "train.seed" => self.train.seed = parse!(),
            "train.beta1" => self.train.beta1 = parse!(),
            "train.beta2" => self.train.beta2 = parse!(),
            "train.eps" => self.train.eps = parse!(),
            "train.checkpoint_every" => self.train.checkpoint_every = parse!(),
            "train.log_every" => self.train.log_every = parse!(),
            "data.scenes" => self.data.scenes = parse!(),
            "data.seed" => self.data.seed = parse!(),
            "data.mics" => self.data.scene.mics = parse!(),
            "data.radius" => self.data.scene.radius = parse!(),
            "data.sample_rate" => self.data.scene.sample_rate = parse!(),
            "data.seconds" => self.data.scene.seconds = parse!(),
            "data.rt60_min" => self.data.scene.rt60.0 = parse!(),
            "data.rt60_max" => self.data.scene.rt60.1 = parse!(),
            "data.margin" => self.data.scene.margin = parse!(),
            _ => return Err(Error::Config(format!("unknown or unsupported setting {key} = {value:?}"))),
        }
        Ok(())
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

/// Shortest text that parses back to the same `f64`.
fn fmt_f(x: f64) -> String {
    format!("{x:?}")
}
