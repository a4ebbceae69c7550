//! Synthetic reverberant multi-speaker scenes.
//!
//! Room impulse responses come from the image method in a shoebox room with a
//! uniform wall reflection coefficient derived from a target RT60 by Eyring's
//! formula. Image contributions are placed at the nearest sample with
//! `1 / (4 pi d)` spreading loss.
//!
//! Training targets use a shaped copy of each speaker's RIR: the first 50 ms
//! after the direct path are kept, and the remainder is multiplied by an
//! exponential that reaches -60 dB at 200 ms after the direct path.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::MultiWave;
use crate::error::{Error, Result};

pub const SPEED_OF_SOUND: f64 = 343.0;

/// Sabine/Eyring constant `24 ln(10) / c`.
fn sabine_constant() -> f64 {
    24.0 * 10f64.ln() / SPEED_OF_SOUND
}

pub type Point = [f64; 3];

fn distance(a: &Point, b: &Point) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub dims: Point,
    /// Target reverberation time in seconds.
    pub rt60: f64,
    /// Pressure reflection coefficient shared by all six walls.
    pub beta: f64,
    /// Maximum number of wall reflections per image.
    pub max_order: usize,
}

impl RoomSpec {
    /// Room whose uniform reflection coefficient realises `rt60` by Eyring's
    /// formula. Fails when even full absorption by Sabine's estimate cannot
    /// reach `rt60`.
    pub fn from_rt60(dims: Point, rt60: f64) -> Result<Self> {
        check_dims(&dims)?;
        if rt60 <= 0.0 {
            return Err(Error::Config(format!("rt60 {rt60} must be positive")));
        }
        let (v, s) = volume_surface(&dims);
        let sabine_alpha = sabine_constant() * v / (s * rt60);
        if sabine_alpha >= 1.0 {
            return Err(Error::Config(format!(
                "rt60 {rt60} s is not realisable in a {:?} m room (Sabine absorption {sabine_alpha:.2})",
                dims
            )));
        }
        let alpha = 1.0 - (-sabine_constant() * v / (s * rt60)).exp();
        let beta = (1.0 - alpha).sqrt();
        Ok(RoomSpec { dims, rt60, beta, max_order: order_for(beta) })
    }

    /// Room with an explicit reflection coefficient.
    pub fn with_beta(dims: Point, beta: f64, rt60: f64) -> Result<Self> {
        check_dims(&dims)?;
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::Config(format!("reflection coefficient {beta} must lie in [0, 1)")));
        }
        Ok(RoomSpec { dims, rt60, beta, max_order: order_for(beta) })
    }

    /// RT60 implied by the reflection coefficient, by Eyring's formula.
    pub fn eyring_rt60(&self) -> f64 {
        let (v, s) = volume_surface(&self.dims);
        let alpha = 1.0 - self.beta * self.beta;
        if alpha >= 1.0 {
            return 0.0;
        }
        sabine_constant() * v / (-s * (1.0 - alpha).ln())
    }

    pub fn contains(&self, p: &Point, margin: f64) -> bool {
        p.iter().zip(&self.dims).all(|(x, d)| *x >= margin && *x <= d - margin)
    }
}

fn check_dims(dims: &Point) -> Result<()> {
    if dims.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
        return Err(Error::Config(format!("room dimensions {dims:?} must be positive")));
    }
    Ok(())
}

fn volume_surface(d: &Point) -> (f64, f64) {
    (d[0] * d[1] * d[2], 2.0 * (d[0] * d[1] + d[0] * d[2] + d[1] * d[2]))
}

/// Reflection count after which every image is at least 60 dB below a unit
/// direct path, ignoring the extra spreading loss.
fn order_for(beta: f64) -> usize {
    if beta <= 0.0 {
        0
    } else {
        (1e-3f64.ln() / beta.ln()).ceil() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub center: Point,
    pub radius: f64,
    pub mics: usize,
    /// Angle of microphone 0 in radians, in the horizontal plane.
    pub orientation: f64,
}

impl ArraySpec {
    pub fn circular(center: Point, mics: usize) -> Self {
        ArraySpec { center, radius: 0.05, mics, orientation: 0.0 }
    }

    pub fn positions(&self) -> Vec<Point> {
        (0..self.mics)
            .map(|m| {
                let a = self.orientation + 2.0 * PI * m as f64 / self.mics as f64;
                [self.center[0] + self.radius * a.cos(), self.center[1] + self.radius * a.sin(), self.center[2]]
            })
            .collect()
    }
}

/// Nearest-sample delay for a path of `d` metres.
pub fn delay_samples(d: f64, fs: u32) -> usize {
    (fs as f64 * d / SPEED_OF_SOUND).round() as usize
}

/// Number of RIR samples kept: the longest direct delay plus `rt60` seconds.
pub fn rir_length(room: &RoomSpec, mics: &[Point], source: &Point, fs: u32) -> usize {
    let direct = mics.iter().map(|m| delay_samples(distance(m, source), fs)).max().unwrap_or(0);
    direct + (room.rt60 * fs as f64).ceil() as usize + 1
}

/// Image-method impulse responses from `source` to every microphone.
pub fn simulate_rir(room: &RoomSpec, array: &ArraySpec, source: &Point, fs: u32) -> Result<Vec<Vec<f64>>> {
    if !room.contains(source, 0.0) {
        return Err(Error::Input(format!("source {source:?} is outside the room {:?}", room.dims)));
    }
    let mics = array.positions();
    if let Some(m) = mics.iter().find(|m| !room.contains(m, 0.0)) {
        return Err(Error::Input(format!("microphone {m:?} is outside the room {:?}", room.dims)));
    }
    let len = rir_length(room, &mics, source, fs);
    let max_dist = SPEED_OF_SOUND * len as f64 / fs as f64;
    let bound = |d: f64| (max_dist / (2.0 * d)).ceil() as i64 + 1;
    let (nx, ny, nz) = (bound(room.dims[0]), bound(room.dims[1]), bound(room.dims[2]));
    let order = room.max_order as i64;
    let mut out = Vec::with_capacity(mics.len());
    for mic in &mics {
        let mut h = vec![0.0; len];
        for p in 0..8u8 {
            let par = [(p & 1) as i64, ((p >> 1) & 1) as i64, ((p >> 2) & 1) as i64];
            for mx in -nx..=nx {
                let rx = (mx - par[0]).abs() + mx.abs();
                if rx > order {
                    continue;
                }
                let dx = (1 - 2 * par[0]) as f64 * source[0] + 2.0 * mx as f64 * room.dims[0] - mic[0];
                for my in -ny..=ny {
                    let ry = (my - par[1]).abs() + my.abs();
                    if rx + ry > order {
                        continue;
                    }
                    let dy = (1 - 2 * par[1]) as f64 * source[1] + 2.0 * my as f64 * room.dims[1] - mic[1];
                    for mz in -nz..=nz {
                        let rz = (mz - par[2]).abs() + mz.abs();
                        let refl = rx + ry + rz;
                        if refl > order {
                            continue;
                        }
                        let dz = (1 - 2 * par[2]) as f64 * source[2] + 2.0 * mz as f64 * room.dims[2] - mic[2];
                        let d = (dx * dx + dy * dy + dz * dz).sqrt();
                        let idx = delay_samples(d, fs);
                        if idx >= len {
                            continue;
                        }
                        let gain = room.beta.powi(refl as i32);
                        if gain != 0.0 {
                            h[idx] += gain / (4.0 * PI * d.max(1e-3));
                        }
                    }
                }
            }
        }
        out.push(h);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shaping {
    /// Seconds after the direct path left untouched.
    pub preserve: f64,
    /// Seconds after the direct path at which the envelope reaches -60 dB.
    pub cap: f64,
}

impl Default for Shaping {
    fn default() -> Self {
        Shaping { preserve: 0.05, cap: 0.2 }
    }
}

/// Apply the exponential target envelope to `rir` whose direct path arrives at
/// sample `direct`.
pub fn shape_target_rir(rir: &[f64], direct: usize, fs: u32, shaping: Shaping) -> Vec<f64> {
    let start = direct + (shaping.preserve * fs as f64).round() as usize;
    let span = ((shaping.cap - shaping.preserve) * fs as f64).max(1.0);
    // amplitude factor 1e-3 after `span` samples
    let rate = 1e-3f64.ln() / span;
    rir.iter()
        .enumerate()
        .map(|(n, &v)| if n <= start { v } else { v * (rate * (n - start) as f64).exp() })
        .collect()
}

/// Linear convolution via FFT, truncated to `out_len` samples.
pub fn fft_convolve(x: &[f64], h: &[f64], out_len: usize) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return vec![0.0; out_len];
    }
    let n = (x.len() + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let (fwd, inv) = (planner.plan_fft_forward(n), planner.plan_fft_inverse(n));
    let pad = |s: &[f64]| {
        let mut v: Vec<Complex<f64>> = s.iter().map(|&r| Complex::new(r, 0.0)).collect();
        v.resize(n, Complex::new(0.0, 0.0));
        v
    };
    let (mut a, mut b) = (pad(x), pad(h));
    fwd.process(&mut a);
    fwd.process(&mut b);
    a.iter_mut().zip(&b).for_each(|(p, q)| *p *= q);
    inv.process(&mut a);
    (0..out_len).map(|i| a.get(i).map_or(0.0, |c| c.re / n as f64)).collect()
}

fn convolve_multi(x: &[f64], rirs: &[Vec<f64>], fs: u32) -> Result<MultiWave> {
    MultiWave::new(rirs.iter().map(|h| fft_convolve(x, h, x.len())).collect(), fs)
}

/// Gain applied to `noise` so the speech-to-noise energy ratio is `snr_db`.
pub fn noise_gain(speech_energy: f64, noise_energy: f64, snr_db: f64) -> f64 {
    (speech_energy / (noise_energy * 10f64.powf(snr_db / 10.0))).sqrt()
}

fn add(a: &MultiWave, b: &MultiWave, gb: f64) -> MultiWave {
    let chans = a.channels().iter().zip(b.channels()).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + gb * q).collect());
    MultiWave::new(chans.collect(), a.sample_rate()).expect("same layout")
}

/// Mixture before level normalisation.
#[derive(Clone, Debug)]
pub struct Premix {
    pub mixture: MultiWave,
    /// Speaker images after the energy-ratio gain.
    pub speech: [MultiWave; 2],
    /// Noise image after the SNR gain.
    pub noise: MultiWave,
    pub speech2_gain: f64,
    pub noise_gain: f64,
}

/// Mix two reverberant speaker images at `energy_ratio_db` (speaker 1 over
/// speaker 2) and add noise at `snr_db`. Energies are summed over channels.
pub fn premix(images: [&MultiWave; 2], noise: &MultiWave, energy_ratio_db: f64, snr_db: f64) -> Result<Premix> {
    let (e1, e2, en) = (images[0].energy(), images[1].energy(), noise.energy());
    if e1 == 0.0 || e2 == 0.0 || en == 0.0 {
        return Err(Error::Input("silent source or noise: energy ratios are undefined".into()));
    }
    let g2 = (e1 / (e2 * 10f64.powf(energy_ratio_db / 10.0))).sqrt();
    let s2 = images[1].scaled(g2);
    let speech = add(images[0], &s2, 1.0);
    let gn = noise_gain(speech.energy(), en, snr_db);
    let noise = noise.scaled(gn);
    let mixture = add(&speech, &noise, 1.0);
    Ok(Premix { mixture, speech: [images[0].clone(), s2], noise, speech2_gain: g2, noise_gain: gn })
}

/// Geometry and random draws of one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub id: String,
    pub seed: u64,
    pub sample_rate: u32,
    pub samples: usize,
    pub room: RoomSpec,
    pub array: ArraySpec,
    pub sources: [Point; 2],
    pub noise_position: Point,
    pub energy_ratio_db: f64,
    pub snr_db: f64,
    /// Level as drawn, before clamping.
    pub level_drawn_dbfs: f64,
    /// Level applied to the mixture.
    pub level_dbfs: f64,
}

/// A rendered scene.
#[derive(Clone, Debug)]
pub struct Mixture {
    pub mixture: MultiWave,
    /// Speaker images through the shaped RIRs, with the mixture's gains.
    pub targets: [MultiWave; 2],
    /// Speaker images through the full RIRs, with the mixture's gains.
    pub speech: [MultiWave; 2],
    pub noise: MultiWave,
}

/// Highest level a mixture is scaled to.
pub const MAX_LEVEL_DBFS: f64 = -1.0;

/// Render a scene from dry mono speech and noise signals.
pub fn make_mixture(scene: &SceneSpec, speech: [&[f64]; 2], noise: &[f64]) -> Result<Mixture> {
    let fs = scene.sample_rate;
    let len = speech[0].len();
    if speech[1].len() != len || noise.len() != len {
        return Err(Error::Input("speech and noise inputs must have equal length".into()));
    }
    if [speech[0], speech[1], noise].iter().any(|s| s.iter().all(|v| *v == 0.0)) {
        return Err(Error::Input("silent input signal: energy ratios are undefined".into()));
    }
    let mics = scene.array.positions();
    let mut images = Vec::with_capacity(2);
    let mut targets = Vec::with_capacity(2);
    for (src, pos) in speech.iter().zip(&scene.sources) {
        let rirs = simulate_rir(&scene.room, &scene.array, pos, fs)?;
        images.push(convolve_multi(src, &rirs, fs)?);
        let shaped: Vec<Vec<f64>> = rirs
            .iter()
            .zip(&mics)
            .map(|(h, m)| shape_target_rir(h, delay_samples(distance(m, pos), fs), fs, Shaping::default()))
            .collect();
        targets.push(convolve_multi(src, &shaped, fs)?);
    }
    let noise_rirs = simulate_rir(&scene.room, &scene.array, &scene.noise_position, fs)?;
    let noise_img = convolve_multi(noise, &noise_rirs, fs)?;
    let pm = premix([&images[0], &images[1]], &noise_img, scene.energy_ratio_db, scene.snr_db)?;
    let g = 10f64.powf(scene.level_dbfs / 20.0) / pm.mixture.rms();
    Ok(Mixture {
        mixture: pm.mixture.scaled(g),
        targets: [targets[0].scaled(g), targets[1].scaled(g * pm.speech2_gain)],
        speech: [pm.speech[0].scaled(g), pm.speech[1].scaled(g)],
        noise: pm.noise.scaled(g),
    })
}

/// Ranges for drawing scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub mics: usize,
    pub radius: f64,
    pub sample_rate: u32,
    pub seconds: f64,
    pub rt60: (f64, f64),
    pub room_min: Point,
    pub room_max: Point,
    /// Minimum distance of sources and array from the walls.
    pub margin: f64,
    pub energy_ratio_db: (f64, f64),
    pub snr_db: (f64, f64),
    pub level_dbfs: (f64, f64),
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            mics: 8,
            radius: 0.05,
            sample_rate: 16_000,
            seconds: 30.0,
            rt60: (0.2, 0.8),
            room_min: [3.0, 3.0, 2.5],
            room_max: [10.0, 8.0, 4.0],
            margin: 0.5,
            energy_ratio_db: (0.0, 2.0),
            snr_db: (8.0, 10.0),
            level_dbfs: (-28.0, 10.0),
        }
    }
}

impl SceneConfig {
    pub fn samples(&self) -> usize {
        (self.seconds * self.sample_rate as f64).round() as usize
    }
}

/// Independent PRNG stream for item `index` of a run seeded with `seed`.
pub fn stream(seed: u64, index: u64) -> Xoshiro256PlusPlus {
    let mut r = Xoshiro256PlusPlus::seed_from_u64(seed);
    for _ in 0..(index % 64) {
        r.jump();
    }
    Xoshiro256PlusPlus::seed_from_u64(r.random::<u64>() ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn gaussian(rng: &mut Xoshiro256PlusPlus, (mean, std): (f64, f64)) -> f64 {
    Normal::new(mean, std).expect("finite std").sample(rng)
}

fn point_in(rng: &mut Xoshiro256PlusPlus, dims: &Point, margin: f64, z: (f64, f64)) -> Point {
    [
        rng.random_range(margin..dims[0] - margin),
        rng.random_range(margin..dims[1] - margin),
        rng.random_range(z.0.max(margin)..z.1.min(dims[2] - margin)),
    ]
}

/// Draw room, positions and mixing parameters for scene `index`.
pub fn draw_scene(cfg: &SceneConfig, seed: u64, index: u64) -> Result<SceneSpec> {
    let mut rng = stream(seed, index);
    for _ in 0..100 {
        let dims = [0, 1, 2].map(|i| rng.random_range(cfg.room_min[i]..=cfg.room_max[i]));
        let rt60 = rng.random_range(cfg.rt60.0..=cfg.rt60.1);
        let Ok(room) = RoomSpec::from_rt60(dims, rt60) else { continue };
        let margin = cfg.margin + cfg.radius;
        let center = point_in(&mut rng, &dims, margin, (1.0, 1.6));
        let orientation = rng.random_range(0.0..2.0 * PI);
        let array = ArraySpec { center, radius: cfg.radius, mics: cfg.mics, orientation };
        let sources = [
            point_in(&mut rng, &dims, cfg.margin, (1.2, 1.9)),
            point_in(&mut rng, &dims, cfg.margin, (1.2, 1.9)),
        ];
        let noise_position = point_in(&mut rng, &dims, cfg.margin, (0.3, 2.5));
        let spread = |a: &Point, b: &Point| distance(a, b) > 0.5;
        if !sources.iter().chain([&noise_position]).all(|s| spread(s, &center))
            || !spread(&sources[0], &sources[1])
        {
            continue;
        }
        let energy_ratio_db = gaussian(&mut rng, cfg.energy_ratio_db);
        let snr_db = gaussian(&mut rng, cfg.snr_db);
        let level_drawn_dbfs = gaussian(&mut rng, cfg.level_dbfs);
        return Ok(SceneSpec {
            id: format!("scene{index:05}"),
            seed: rng.random(),
            sample_rate: cfg.sample_rate,
            samples: cfg.samples(),
            room,
            array,
            sources,
            noise_position,
            energy_ratio_db,
            snr_db,
            level_drawn_dbfs,
            level_dbfs: level_drawn_dbfs.min(MAX_LEVEL_DBFS),
        });
    }
    Err(Error::Config("could not draw a valid scene in 100 attempts; check the room ranges".into()))
}

/// Speech-like test signal: voiced syllables with a gliding pitch, formant
/// envelopes and pauses, plus occasional fricative noise. Unit RMS.
pub fn synth_speech(rng: &mut Xoshiro256PlusPlus, len: usize, fs: u32) -> Vec<f64> {
    let fs_f = fs as f64;
    let mut out = vec![0.0; len];
    let mut t = (rng.random_range(0.0..0.1) * fs_f) as usize;
    let f0_base = rng.random_range(90.0..230.0);
    while t < len {
        let dur = (rng.random_range(0.1..0.3) * fs_f) as usize;
        let end = (t + dur).min(len);
        let fricative = rng.random_bool(0.2);
        let f0 = f0_base * rng.random_range(0.85..1.2);
        let glide = rng.random_range(-0.3..0.3);
        let formants = [rng.random_range(300.0..900.0), rng.random_range(900.0..2500.0), rng.random_range(2400.0..3500.0)];
        let mut phase = 0.0;
        let mut hp_prev = 0.0;
        for n in t..end {
            let u = (n - t) as f64 / (end - t).max(1) as f64;
            let env = (PI * u).sin().powi(2);
            let sample = if fricative {
                let w: f64 = rng.random_range(-1.0..1.0);
                let hp = w - hp_prev;
                hp_prev = w;
                0.3 * hp
            } else {
                let f = f0 * (1.0 + glide * u);
                phase += 2.0 * PI * f / fs_f;
                let mut s = 0.0;
                let mut k = 1.0;
                while k * f < 4000.0 {
                    let hf = k * f;
                    let amp: f64 = formants.iter().map(|&fm| 1.0 / (1.0 + ((hf - fm) / 150.0).powi(2))).sum();
                    s += amp / k.sqrt() * (k * phase).sin();
                    k += 1.0;
                }
                s
            };
            out[n] += env * sample;
        }
        t = end + (rng.random_range(0.03..0.15) * fs_f) as usize;
    }
    normalize_rms(out)
}

/// Low-pass tilted noise (roughly pink above a few hundred Hz). Unit RMS.
pub fn synth_noise(rng: &mut Xoshiro256PlusPlus, len: usize) -> Vec<f64> {
    let mut state = [0.0; 3];
    let poles = [0.99, 0.9, 0.5];
    let gains = [0.05, 0.15, 0.3];
    let out = (0..len)
        .map(|_| {
            let w: f64 = rng.random_range(-1.0..1.0);
            let mut y = 0.1 * w;
            for i in 0..3 {
                state[i] = poles[i] * state[i] + gains[i] * w;
                y += state[i];
            }
            y
        })
        .collect();
    normalize_rms(out)
}

fn normalize_rms(mut x: Vec<f64>) -> Vec<f64> {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
    x
}

/// Render a drawn scene with synthetic sources seeded from the scene seed.
pub fn render_scene(scene: &SceneSpec) -> Result<Mixture> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(scene.seed);
    let s1 = synth_speech(&mut rng, scene.samples, scene.sample_rate);
    let s2 = synth_speech(&mut rng, scene.samples, scene.sample_rate);
    let noise = synth_noise(&mut rng, scene.samples);
    make_mixture(scene, [&s1, &s2], &noise)
}

/// One line of the dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    #[serde(flatten)]
    pub scene: SceneSpec,
    pub mixture: String,
    pub targets: [String; 2],
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}
