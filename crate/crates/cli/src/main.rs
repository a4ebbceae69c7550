use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use trunet::checkpoint::Checkpoint;
use trunet::checks::gradcheck_suite;
use trunet::config::{Preset, RunConfig};
use trunet::datagen::{draw_scene, read_manifest, simulate_rir, write_manifest, ManifestRecord};
use trunet::dsp::{read_wav, read_wav_expect, write_wav, MultiWave, SampleFormat};
use trunet::model::Trunet;
use trunet::train::{evaluate_examples, generate, generate_examples, reference_channel, separate_wave, Example, Trainer};

#[derive(Parser)]
#[command(name = "trunet", version, about = "Multi-channel speech separation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset applied before the config file.
    #[arg(long, value_parser = ["toy", "paper"])]
    preset: Option<String>,
    /// Overrides both `train.seed` and `data.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Single `key=value` override, applied last. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Draw scenes and write their impulse responses.
    SimulateRir(Common),
    /// Render mixtures and targets with a manifest.
    Mixgen(Common),
    /// Train a model, writing checkpoints and the loss curve.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from this checkpoint; its embedded config is used.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset written by `mixgen`; generated from the config when absent.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Total step count to train to, overriding `train.steps`.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Separate a multi-channel WAV file.
    Separate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Score a checkpoint on a dataset.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Finite-difference check of every layer, the losses and each model variant.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Check at most this many coordinates per parameter tensor.
        #[arg(long)]
        max_coords: Option<usize>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let preset: Preset = c.preset.as_deref().unwrap_or("toy").parse()?;
    let mut cfg = RunConfig::preset(preset);
    if let Some(path) = &c.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut lines = Vec::new();
        if c.preset.is_some() && !text.lines().any(|l| l.trim_start().starts_with("preset")) {
            lines.push(format!("preset = {}", c.preset.as_deref().unwrap_or("toy")));
        }
        lines.push(text);
        cfg = RunConfig::from_text(&lines.join("\n")).with_context(|| format!("in {}", path.display()))?;
    }
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
        cfg.data.seed = seed;
    }
    for kv in &c.set {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set {kv}: expected KEY=VALUE"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(dir: &Path, cfg: Option<&RunConfig>) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    if let Some(cfg) = cfg {
        fs::write(dir.join("config.txt"), cfg.to_text())?;
    }
    Ok(())
}

fn simulate_rirs(c: &Common) -> Result<()> {
    let cfg = resolve(c)?;
    prepare_out(&c.out_dir, Some(&cfg))?;
    let mut lines = String::new();
    for i in 0..cfg.data.scenes as u64 {
        let scene = draw_scene(&cfg.data.scene, cfg.data.seed, i)?;
        let positions = [("s1", scene.sources[0]), ("s2", scene.sources[1]), ("noise", scene.noise_position)];
        for (tag, pos) in positions {
            let rirs = simulate_rir(&scene.room, &scene.array, &pos, scene.sample_rate)?;
            let wave = MultiWave::new(rirs, scene.sample_rate)?;
            write_wav(c.out_dir.join(format!("{}_rir_{tag}.wav", scene.id)), &wave, SampleFormat::Float32)?;
        }
        lines.push_str(&serde_json::to_string(&scene)?);
        lines.push('\n');
    }
    fs::write(c.out_dir.join("scenes.jsonl"), lines)?;
    info!("wrote impulse responses for {} scenes to {}", cfg.data.scenes, c.out_dir.display());
    Ok(())
}

fn mixgen(c: &Common) -> Result<()> {
    let cfg = resolve(c)?;
    prepare_out(&c.out_dir, Some(&cfg))?;
    let mut records = Vec::new();
    for (scene, mix) in generate(&cfg.data)? {
        let mixture = format!("{}_mix.wav", scene.id);
        let targets = [format!("{}_s1.wav", scene.id), format!("{}_s2.wav", scene.id)];
        write_wav(c.out_dir.join(&mixture), &mix.mixture, SampleFormat::Float32)?;
        for (name, t) in targets.iter().zip(&mix.targets) {
            write_wav(c.out_dir.join(name), t, SampleFormat::Float32)?;
        }
        records.push(ManifestRecord { scene, mixture, targets });
    }
    write_manifest(c.out_dir.join("manifest.jsonl"), &records)?;
    info!("wrote {} mixtures to {}", records.len(), c.out_dir.display());
    Ok(())
}

/// Examples from a `mixgen` manifest; WAV paths are relative to the manifest.
fn load_examples(path: &Path, model: &Trunet) -> Result<Vec<Example>> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let reference = reference_channel(model.config.runet.mode);
    let m = model.config.mics;
    read_manifest(path)?
        .iter()
        .map(|r| {
            let rate = r.scene.sample_rate;
            let mix = read_wav_expect(dir.join(&r.mixture), rate)?;
            if mix.num_channels() != m {
                bail!("{}: {} channels, the model expects M = {m}", r.mixture, mix.num_channels());
            }
            let targets = r
                .targets
                .iter()
                .map(|t| Ok(read_wav_expect(dir.join(t), rate)?.channel(reference).to_vec()))
                .collect::<Result<Vec<_>>>()?;
            Ok(Example::new(&r.scene.id, &mix, targets, model.engine(), reference)?)
        })
        .collect()
}

fn train(c: &Common, checkpoint: Option<&Path>, manifest: Option<&Path>, steps: Option<u64>) -> Result<()> {
    let mut trainer = match checkpoint {
        Some(p) => {
            let t = Trainer::from_checkpoint(&Checkpoint::load(p)?)?;
            info!("resuming from {} at step {}", p.display(), t.step());
            t
        }
        None => Trainer::new(resolve(c)?)?,
    };
    if let Some(n) = steps {
        trainer.config.train.steps = n;
    }
    let cfg = trainer.config.clone();
    prepare_out(&c.out_dir, Some(&cfg))?;
    let data = match manifest {
        Some(m) => load_examples(m, &trainer.model)?,
        None => generate_examples(&cfg.data, &trainer.model)?,
    };
    info!("training on {} examples, {} parameters", data.len(), trainer.params.num_scalars());
    let curve_path = c.out_dir.join("loss.tsv");
    let mut curve = if trainer.step() == 0 { String::from("step\tloss\tgrad_norm\n") } else { fs::read_to_string(&curve_path).unwrap_or_default() };
    let out = c.out_dir.clone();
    trainer.train_until(&data, cfg.train.steps, |t, s| {
        curve.push_str(&format!("{}\t{:?}\t{:?}\n", s.step, s.loss, s.grad_norm));
        if cfg.train.log_every > 0 && s.step % cfg.train.log_every == 0 {
            info!("step {} loss {:.4} grad norm {:.3}", s.step, s.loss, s.grad_norm);
        }
        if cfg.train.checkpoint_every > 0 && s.step % cfg.train.checkpoint_every == 0 {
            t.checkpoint().save(out.join(format!("step{:06}.ckpt", s.step)))?;
        }
        Ok(())
    })?;
    fs::write(&curve_path, curve)?;
    trainer.checkpoint().save(c.out_dir.join("final.ckpt"))?;
    let loss = trainer.mean_loss(&data)?;
    println!("step {} mean loss {loss:.4}", trainer.step());
    Ok(())
}

fn load_model(path: &Path) -> Result<Trainer> {
    Trainer::from_checkpoint(&Checkpoint::load(path)?).with_context(|| format!("loading {}", path.display()))
}

fn separate(checkpoint: &Path, input: &Path, out_dir: &Path) -> Result<()> {
    let t = load_model(checkpoint)?;
    prepare_out(out_dir, Some(&t.config))?;
    let wave = read_wav(input)?;
    let outputs = separate_wave(&t.model, &t.params, &wave).with_context(|| format!("separating {}", input.display()))?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("input");
    for (i, w) in outputs.into_iter().enumerate() {
        let path = out_dir.join(format!("{stem}_s{}.wav", i + 1));
        write_wav(&path, &MultiWave::mono(w, wave.sample_rate())?, SampleFormat::Float32)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn evaluate(c: &Common, checkpoint: &Path, manifest: Option<&Path>) -> Result<()> {
    let t = load_model(checkpoint)?;
    let mut cfg = t.config.clone();
    if c.config.is_some() || c.seed.is_some() || !c.set.is_empty() || c.preset.is_some() {
        let data_cfg = resolve(c)?;
        cfg.data = data_cfg.data;
    }
    prepare_out(&c.out_dir, Some(&cfg))?;
    let data = match manifest {
        Some(m) => load_examples(m, &t.model)?,
        None => generate_examples(&cfg.data, &t.model)?,
    };
    let report = evaluate_examples(&t.model, &t.params, &data)?;
    fs::write(c.out_dir.join("report.jsonl"), report.to_json_lines()?)?;
    print!("{}", report.to_table());
    Ok(())
}

fn gradcheck(seed: u64, max_coords: Option<usize>, out_dir: &Path) -> Result<()> {
    prepare_out(out_dir, None)?;
    let suite = gradcheck_suite(seed, max_coords)?;
    let mut text = String::new();
    for c in &suite {
        let r = &c.report;
        let verdict = if r.passed() { "pass" } else { "FAIL" };
        text.push_str(&format!("{:<28} {verdict} max rel error {:.3e} (tol {:.0e}, {} coords)\n", c.name, r.max_rel_error, r.tol, r.checked));
    }
    print!("{text}");
    fs::write(out_dir.join("gradcheck.txt"), &text)?;
    let failed: Vec<_> = suite.iter().filter(|c| !c.report.passed()).map(|c| c.name.as_str()).collect();
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("TRUNET_THREADS") {
        let n: usize = v.parse().with_context(|| format!("TRUNET_THREADS={v}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_threads()?;
    match Cli::parse().command {
        Command::SimulateRir(c) => simulate_rirs(&c),
        Command::Mixgen(c) => mixgen(&c),
        Command::Train { common, checkpoint, manifest, steps } => {
            train(&common, checkpoint.as_deref(), manifest.as_deref(), steps)
        }
        Command::Separate { checkpoint, input, out_dir } => separate(&checkpoint, &input, &out_dir),
        Command::Evaluate { common, checkpoint, manifest } => evaluate(&common, &checkpoint, manifest.as_deref()),
        Command::Gradcheck { seed, max_coords, out_dir } => gradcheck(seed, max_coords, &out_dir),
    }
}
