use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use trunet::config::DataConfig;
use trunet::datagen::{
    delay_samples, draw_scene, make_mixture, premix, shape_target_rir, simulate_rir, synth_noise, synth_speech, ArraySpec,
    Point, RoomSpec, SceneConfig, Shaping, MAX_LEVEL_DBFS, SPEED_OF_SOUND,
};
use trunet::dsp::MultiWave;
use trunet::train::generate;

const FS: u32 = 16_000;

fn dist(a: &Point, b: &Point) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn small_scenes() -> SceneConfig {
    SceneConfig { mics: 4, seconds: 0.25, rt60: (0.2, 0.3), ..Default::default() }
}

#[test]
fn free_field_impulse_index_and_amplitude() {
    let room = RoomSpec::with_beta([6.0, 5.0, 3.0], 0.0, 0.1).unwrap();
    let array = ArraySpec::circular([3.0, 2.5, 1.5], 4);
    let src = [1.2, 4.1, 1.7];
    let rirs = simulate_rir(&room, &array, &src, FS).unwrap();
    for (h, m) in rirs.iter().zip(array.positions()) {
        let d = dist(&m, &src);
        let idx = (FS as f64 * d / SPEED_OF_SOUND).round() as usize;
        let nonzero: Vec<usize> = (0..h.len()).filter(|&i| h[i] != 0.0).collect();
        assert_eq!(nonzero, vec![idx]);
        assert!((h[idx] - 1.0 / (4.0 * PI * d)).abs() < 1e-15);
    }
}

#[test]
fn first_order_images_match_mirror_arithmetic() {
    let dims = [5.0, 4.0, 3.0];
    let mut room = RoomSpec::with_beta(dims, 0.6, 0.3).unwrap();
    room.max_order = 1;
    let array = ArraySpec::circular([2.0, 2.0, 1.2], 1);
    let mic = array.positions()[0];
    let src = [3.5, 1.0, 1.8];
    let h = &simulate_rir(&room, &array, &src, FS).unwrap()[0];
    let mut want = vec![0.0; h.len()];
    let mut put = |p: Point, g: f64| {
        let d = dist(&p, &mic);
        want[delay_samples(d, FS)] += g / (4.0 * PI * d);
    };
    put(src, 1.0);
    for axis in 0..3 {
        for wall in [0.0, dims[axis]] {
            let mut img = src;
            img[axis] = 2.0 * wall - src[axis];
            put(img, 0.6);
        }
    }
    for (a, b) in h.iter().zip(&want) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn images_scale_with_room_dimensions() {
    // Scaling room, positions and sample rate together keeps every arrival index
    // and scales amplitudes by the inverse factor.
    let room = RoomSpec::with_beta([4.0, 3.0, 2.5], 0.5, 0.05).unwrap();
    let big = RoomSpec::with_beta([8.0, 6.0, 5.0], 0.5, 0.05).unwrap();
    let array = ArraySpec { center: [1.5, 1.5, 1.0], radius: 0.05, mics: 2, orientation: 0.3 };
    let big_array = ArraySpec { center: [3.0, 3.0, 2.0], radius: 0.1, ..array.clone() };
    let h = simulate_rir(&room, &array, &[3.0, 2.0, 1.5], 8_000).unwrap();
    let hb = simulate_rir(&big, &big_array, &[6.0, 4.0, 3.0], 4_000).unwrap();
    for (a, b) in h.iter().zip(&hb) {
        let n = a.len().min(b.len());
        for i in 0..n {
            assert!((a[i] - 2.0 * b[i]).abs() < 1e-12 * a[i].abs().max(1.0), "sample {i}");
        }
    }
}

#[test]
fn circular_array_spacing() {
    let array = ArraySpec::circular([2.0, 2.0, 1.0], 8);
    let p = array.positions();
    for m in 0..8 {
        let d = dist(&p[m], &p[(m + 1) % 8]);
        assert!((d - 2.0 * 0.05 * (PI / 8.0).sin()).abs() < 1e-15);
        assert!((dist(&p[m], &array.center) - 0.05).abs() < 1e-15);
    }
}

#[test]
fn positions_outside_the_room_are_rejected() {
    let room = RoomSpec::with_beta([4.0, 3.0, 2.5], 0.5, 0.1).unwrap();
    let array = ArraySpec::circular([1.0, 1.0, 1.0], 2);
    assert!(simulate_rir(&room, &array, &[5.0, 1.0, 1.0], FS).is_err());
    let outside = ArraySpec::circular([0.01, 1.0, 1.0], 2);
    assert!(simulate_rir(&room, &outside, &[2.0, 1.0, 1.0], FS).is_err());
    assert!(RoomSpec::with_beta([4.0, 0.0, 2.5], 0.5, 0.1).is_err());
    assert!(RoomSpec::with_beta([4.0, 3.0, 2.5], 1.0, 0.1).is_err());
}

#[test]
fn shaped_target_keeps_early_part_and_decays_60_db() {
    let direct = 123;
    let flat = vec![1.0; direct + FS as usize];
    let shaped = shape_target_rir(&flat, direct, FS, Shaping::default());
    let keep = direct + (0.05 * FS as f64) as usize;
    assert_eq!(&shaped[..=keep], &flat[..=keep]);
    let cap = direct + (0.2 * FS as f64) as usize;
    assert!(shaped[cap] <= 1e-3 * (1.0 + 1e-9));
    assert!(20.0 * shaped[cap].log10() <= -60.0 + 1e-6);
    assert!(shaped[cap + 1..].iter().all(|&v| v < 1e-3));
    assert!(shaped.windows(2).skip(keep).all(|w| w[1] <= w[0]));
}

#[test]
fn premix_hits_energy_ratio_and_snr() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
    let mut wave = |g: f64| {
        let ch = (0..3).map(|_| (0..2000).map(|_| g * rng.random_range(-1.0..1.0)).collect()).collect();
        MultiWave::new(ch, FS).unwrap()
    };
    let (a, b, n) = (wave(1.0), wave(0.1), wave(7.0));
    let pm = premix([&a, &b], &n, 1.5, 9.0).unwrap();
    assert!((10.0 * (pm.speech[0].energy() / pm.speech[1].energy()).log10() - 1.5).abs() < 1e-9);
    let speech = pm.speech[0].energy() + pm.speech[1].energy() + 2.0 * cross(&pm.speech[0], &pm.speech[1]);
    assert!((10.0 * (speech / pm.noise.energy()).log10() - 9.0).abs() < 1e-9);
    let silent = MultiWave::new(vec![vec![0.0; 2000]; 3], FS).unwrap();
    assert!(premix([&a, &silent], &n, 0.0, 9.0).is_err());
}

fn cross(a: &MultiWave, b: &MultiWave) -> f64 {
    a.channels().iter().zip(b.channels()).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>()).sum()
}

fn sum_waves(ws: &[&MultiWave]) -> Vec<Vec<f64>> {
    let mut out = ws[0].channels().to_vec();
    for w in &ws[1..] {
        for (o, c) in out.iter_mut().zip(w.channels()) {
            o.iter_mut().zip(c).for_each(|(p, q)| *p += q);
        }
    }
    out
}

#[test]
fn rendered_scenes_match_drawn_parameters() {
    let cfg = small_scenes();
    for index in 0..4 {
        let scene = draw_scene(&cfg, 11, index).unwrap();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(index);
        let s1 = synth_speech(&mut rng, scene.samples, FS);
        let s2 = synth_speech(&mut rng, scene.samples, FS);
        let noise = synth_noise(&mut rng, scene.samples);
        let mix = make_mixture(&scene, [&s1, &s2], &noise).unwrap();

        let speech = MultiWave::new(sum_waves(&[&mix.speech[0], &mix.speech[1]]), FS).unwrap();
        let snr = 10.0 * (speech.energy() / mix.noise.energy()).log10();
        assert!((snr - scene.snr_db).abs() < 0.01, "{snr} vs {}", scene.snr_db);
        let level = 20.0 * mix.mixture.rms().log10();
        assert!((level - scene.level_dbfs).abs() < 0.1);
        assert!(scene.level_dbfs <= MAX_LEVEL_DBFS);
        let ratio = 10.0 * (mix.speech[0].energy() / mix.speech[1].energy()).log10();
        assert!((ratio - scene.energy_ratio_db).abs() < 1e-9);

        let total = sum_waves(&[&mix.speech[0], &mix.speech[1], &mix.noise]);
        for (a, b) in total.iter().zip(mix.mixture.channels()) {
            for (p, q) in a.iter().zip(b) {
                assert!((p - q).abs() < 1e-12);
            }
        }
        assert_eq!(mix.mixture.num_channels(), cfg.mics);
        assert_eq!(mix.targets[0].channel(0).len(), scene.samples);
    }
}

#[test]
fn silent_inputs_are_rejected() {
    let scene = draw_scene(&small_scenes(), 0, 0).unwrap();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
    let s = synth_speech(&mut rng, scene.samples, FS);
    let zero = vec![0.0; scene.samples];
    assert!(make_mixture(&scene, [&s, &zero], &s).is_err());
    assert!(make_mixture(&scene, [&s, &s], &zero).is_err());
    assert!(make_mixture(&scene, [&s, &s[..10]], &s).is_err());
}

#[test]
fn same_seed_gives_bit_identical_dataset() {
    let cfg = DataConfig { scenes: 3, seed: 5, scene: small_scenes() };
    let (a, b) = (generate(&cfg).unwrap(), generate(&cfg).unwrap());
    for ((sa, ma), (sb, mb)) in a.iter().zip(&b) {
        assert_eq!(sa, sb);
        assert_eq!(ma.mixture.channels(), mb.mixture.channels());
        assert_eq!(ma.targets[0].channels(), mb.targets[0].channels());
        assert_eq!(ma.targets[1].channels(), mb.targets[1].channels());
    }
    let other = generate(&DataConfig { seed: 6, ..cfg }).unwrap();
    assert_ne!(other[0].1.mixture.channels(), a[0].1.mixture.channels());
    assert_ne!(a[0].1.mixture.channels(), a[1].1.mixture.channels());
}

#[test]
fn drawn_scenes_respect_ranges() {
    let cfg = SceneConfig::default();
    for index in 0..50 {
        let s = draw_scene(&cfg, 3, index).unwrap();
        assert!(s.room.rt60 >= cfg.rt60.0 && s.room.rt60 <= cfg.rt60.1);
        assert!((s.room.eyring_rt60() - s.room.rt60).abs() < 1e-9);
        for i in 0..3 {
            assert!(s.room.dims[i] >= cfg.room_min[i] && s.room.dims[i] <= cfg.room_max[i]);
        }
        for p in s.sources.iter().chain([&s.noise_position]) {
            assert!(s.room.contains(p, cfg.margin));
        }
        assert!(s.array.positions().iter().all(|m| s.room.contains(m, cfg.margin)));
        assert_eq!(s.level_dbfs, s.level_drawn_dbfs.min(MAX_LEVEL_DBFS));
    }
}
