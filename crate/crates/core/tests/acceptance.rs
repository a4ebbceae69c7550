//! End-to-end acceptance run. Every criterion prints one PASS/FAIL line; the
//! process exits non-zero if any fails.

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use trunet::checkpoint::Checkpoint;
use trunet::checks::gradcheck_suite;
use trunet::config::{DataConfig, Preset, RunConfig};
use trunet::datagen::{
    draw_scene, make_mixture, shape_target_rir, simulate_rir, synth_noise, synth_speech, ArraySpec, RoomSpec, SceneConfig,
    Shaping, SPEED_OF_SOUND,
};
use trunet::dsp::{apply_filter, istft, stft, FilterMode, FilterSet, MultiWave, Spectra, StftConfig, StftEngine};
use trunet::loss::{cmse, combined_loss, upit, LossConfig};
use trunet::metrics::{si_sdr, sir};
use trunet::numerics::{Init, ParamStore, Tape, Tensor};
use trunet::tnet::{attention_head, TNet, TNetConfig, Variant};
use trunet::train::{generate, generate_examples, Trainer};

/// Outcome of one criterion: pass flag and a one-line summary of the measurements.
type Outcome = (bool, String);

fn noise(rng: &mut Xoshiro256PlusPlus, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn rand_tensor(rng: &mut Xoshiro256PlusPlus, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, noise(rng, n)).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let suite = gradcheck_suite(0, None).unwrap();
    let elapsed = t0.elapsed();
    let failed: Vec<_> = suite.iter().filter(|c| !c.report.passed() || c.report.tol > 1e-4).map(|c| c.name.clone()).collect();
    let worst = suite.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max);
    let models = suite.iter().filter(|c| c.name.starts_with("model_")).count();
    let ok = failed.is_empty() && models == 8 && elapsed < Duration::from_secs(300);
    (ok, format!("{} checks ({models} full models), worst rel error {worst:.2e}, {elapsed:.1?}, failed {failed:?}", suite.len()))
}

fn stft_consistency() -> Outcome {
    let e = StftEngine::new(StftConfig::default()).unwrap();
    let from = StftConfig::default().interior_start();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
    let (mut round, mut idem) = (0.0f64, 0.0f64);
    for len in [16_000, 5_003, 1_024] {
        let x = MultiWave::new(vec![noise(&mut rng, len), noise(&mut rng, len)], 16_000).unwrap();
        let once = istft(&stft(&x, &e).unwrap(), &e).unwrap();
        for m in 0..2 {
            round = round.max(rel_err(&once.channel(m)[from..], &x.channel(m)[from..]));
        }
        // project arbitrary (inconsistent) spectra twice
        let s = stft(&x, &e).unwrap();
        let scrambled = Spectra { re: rand_tensor(&mut rng, s.re.shape()), im: rand_tensor(&mut rng, s.im.shape()), ..s };
        let p1 = stft(&istft(&scrambled, &e).unwrap(), &e).unwrap();
        let p2 = stft(&istft(&p1, &e).unwrap(), &e).unwrap();
        idem = idem.max(rel_err(p2.re.data(), p1.re.data())).max(rel_err(p2.im.data(), p1.im.data()));
    }
    (round < 1e-10 && idem < 1e-10, format!("round trip {round:.2e}, projection idempotence {idem:.2e}"))
}

fn spectra_of(rng: &mut Xoshiro256PlusPlus, m: usize) -> Spectra {
    let chans = (0..m).map(|_| noise(rng, 96)).collect();
    stft(&MultiWave::new(chans, 16_000).unwrap(), &StftEngine::new(StftConfig::new(16, 8).unwrap()).unwrap()).unwrap()
}

fn filter_semantics() -> Outcome {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
    let y = spectra_of(&mut rng, 3);
    let (k, f) = (y.num_frames(), y.num_bins());
    let n = k * f;
    let multi = |re: Vec<f64>, im: Vec<f64>| FilterSet {
        mode: FilterMode::Multi,
        sources: vec![(Tensor::new([3, k, f], re).unwrap(), Tensor::new([3, k, f], im).unwrap())],
    };
    let mut one_hot = 0.0f64;
    for sel in 0..3 {
        let mut re = vec![0.0; 3 * n];
        re[sel * n..(sel + 1) * n].iter_mut().for_each(|v| *v = 1.0);
        let out = apply_filter(&y, &multi(re, vec![0.0; 3 * n])).unwrap();
        let (r, i) = y.channel(sel);
        one_hot = one_hot.max(out[0].re.max_abs_diff(&Tensor::new([1, k, f], r.to_vec()).unwrap()));
        one_hot = one_hot.max(out[0].im.max_abs_diff(&Tensor::new([1, k, f], i.to_vec()).unwrap()));
    }

    let fs = multi(noise(&mut rng, 3 * n), noise(&mut rng, 3 * n));
    let y2 = spectra_of(&mut rng, 3);
    let (a, b) = (0.7, -1.9);
    let comb = |p: &Tensor, q: &Tensor| Tensor::new(p.shape(), p.data().iter().zip(q.data()).map(|(x, y)| a * x + b * y).collect()).unwrap();
    let mix = Spectra { re: comb(&y.re, &y2.re), im: comb(&y.im, &y2.im), ..y.clone() };
    let (lhs, o1, o2) = (apply_filter(&mix, &fs).unwrap(), apply_filter(&y, &fs).unwrap(), apply_filter(&y2, &fs).unwrap());
    let linear = lhs[0].re.max_abs_diff(&comb(&o1[0].re, &o2[0].re)).max(lhs[0].im.max_abs_diff(&comb(&o1[0].im, &o2[0].im)));

    // B = j on every channel: conj(j) * Y = -j * Y, so the output is (sum im, -sum re)
    let out = apply_filter(&y, &multi(vec![0.0; 3 * n], vec![1.0; 3 * n])).unwrap();
    let mut conj = 0.0f64;
    for j in 0..n {
        let (sr, si): (f64, f64) = (0..3).map(|c| (y.channel(c).0[j], y.channel(c).1[j])).fold((0.0, 0.0), |s, v| (s.0 + v.0, s.1 + v.1));
        conj = conj.max((out[0].re.data()[j] - si).abs()).max((out[0].im.data()[j] + sr).abs());
    }
    (
        one_hot < 1e-12 && linear < 1e-12 && conj < 1e-12,
        format!("one-hot {one_hot:.1e}, linearity {linear:.1e}, conjugation {conj:.1e}"),
    )
}

fn permute_channels(t: &Tensor, perm: &[usize]) -> Tensor {
    let s = t.shape();
    let plane = s[1] * s[2];
    let data = perm.iter().flat_map(|&p| t.data()[p * plane..(p + 1) * plane].to_vec()).collect();
    Tensor::new(s, data).unwrap()
}

fn attention_invariants() -> Outcome {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(4);
    let mut stochastic = 0.0f64;
    let mut exact = true;
    let mut wide = 0.0f64;
    for v in Variant::ALL {
        for (m, pe) in [(2, false), (4, false), (3, true)] {
            let mut store = ParamStore::new();
            let mut cfg = TNetConfig::new(v, 2, 2, 8);
            cfg.positional_encoding = pe;
            let net = TNet::register(&mut store, &mut Init::new(9), "t", cfg, 6, 6).unwrap();
            let (re, im) = (rand_tensor(&mut rng, &[m, 3, 6]), rand_tensor(&mut rng, &[m, 3, 6]));
            let run = |re: &Tensor, im: &Tensor| {
                let mut t = Tape::new();
                let b = store.bind_constant(&mut t);
                let (r, i) = (t.constant(re.clone()), t.constant(im.clone()));
                let out = net.forward(&mut t, &b, r, i).unwrap();
                (t.value(out.planes).clone(), out.weights.iter().map(|w| t.value(*w).clone()).collect::<Vec<_>>())
            };
            let (a, weights) = run(&re, &im);
            for w in &weights {
                for row in w.data().chunks(m) {
                    stochastic = stochastic.max((row.iter().sum::<f64>() - 1.0).abs());
                }
            }
            if pe {
                continue;
            }
            let perm: Vec<usize> = (0..m).rev().collect();
            let (b, _) = run(&permute_channels(&re, &perm), &permute_channels(&im, &perm));
            let pa: Vec<usize> = (0..v.stacks()).flat_map(|s| perm.iter().map(move |&p| s * m + p)).collect();
            let pa = permute_channels(&a, &pa);
            if m == 2 {
                exact &= pa == b;
            } else {
                wide = wide.max(pa.max_abs_diff(&b));
            }
        }
    }
    let mut t = Tape::new();
    let (q, k, v) = (rand_tensor(&mut rng, &[5, 1, 4]), rand_tensor(&mut rng, &[5, 1, 4]), rand_tensor(&mut rng, &[5, 1, 4]));
    let (qv, kv, vv) = (t.constant(q), t.constant(k), t.constant(v.clone()));
    let a = attention_head(&mut t, qv, kv, vv).unwrap();
    let identity = *t.value(a) == v;
    (
        stochastic < 1e-9 && exact && wide < 1e-12 && identity,
        format!("row sums {stochastic:.1e}, M=2 permutation bit-exact {exact}, M=4 {wide:.1e}, M=1 identity {identity}"),
    )
}

fn loss_identities() -> Outcome {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
    let mut unit = 0.0f64;
    let mut endpoints = true;
    for _ in 0..20 {
        let (x, y) = (spectra_of(&mut rng, 1), spectra_of(&mut rng, 1));
        let ((xr, xi), (yr, yi)) = (x.channel(0), y.channel(0));
        let direct: f64 = (0..xr.len()).map(|i| (xr[i] - yr[i]).powi(2) + (xi[i] - yi[i]).powi(2)).sum();
        unit = unit.max((cmse(&x, &y, 1.0).unwrap() - direct.log10()).abs());
        endpoints &= combined_loss(&x, &y, 0.3, 1.0).unwrap() == cmse(&x, &y, 0.3).unwrap();
        endpoints &= combined_loss(&x, &y, 0.3, 0.0).unwrap() == cmse(&x, &y, 0.7).unwrap();
    }
    let config = LossConfig::default();
    let mut agree = 0;
    for _ in 0..100 {
        let t: Vec<_> = (0..2).map(|_| spectra_of(&mut rng, 1)).collect();
        let e: Vec<_> = (0..2).map(|_| spectra_of(&mut rng, 1)).collect();
        let pair = |a: &Spectra, b: &Spectra| combined_loss(a, b, config.c, config.alpha).unwrap();
        let id = (pair(&t[0], &e[0]) + pair(&t[1], &e[1])) / 2.0;
        let sw = (pair(&t[0], &e[1]) + pair(&t[1], &e[0])) / 2.0;
        let (want, want_perm) = if sw < id { (sw, vec![1, 0]) } else { (id, vec![0, 1]) };
        let (l, p) = upit(&t, &e, &config).unwrap();
        agree += usize::from(p == want_perm && (l - want).abs() < 1e-12);
    }
    (
        unit < 1e-12 && endpoints && agree == 100,
        format!("c=1 vs log10 MSE {unit:.1e}, alpha endpoints exact {endpoints}, uPIT oracle {agree}/100"),
    )
}

fn data_pipeline() -> Outcome {
    let fs = 16_000;
    let room = RoomSpec::with_beta([6.0, 5.0, 3.0], 0.0, 0.1).unwrap();
    let array = ArraySpec::circular([3.0, 2.5, 1.5], 4);
    let src = [1.2, 4.1, 1.7];
    let mut free_field = true;
    for (h, m) in simulate_rir(&room, &array, &src, fs).unwrap().iter().zip(array.positions()) {
        let d = m.iter().zip(&src).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let idx = (fs as f64 * d / SPEED_OF_SOUND).round() as usize;
        free_field &= (h[idx] - 1.0 / (4.0 * PI * d)).abs() < 1e-15 && h.iter().filter(|v| **v != 0.0).count() == 1;
    }

    let cfg = SceneConfig { mics: 2, seconds: 0.5, ..Default::default() };
    let mut snr_err = 0.0f64;
    for index in 0..4 {
        let scene = draw_scene(&cfg, 1, index).unwrap();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(index);
        let (s1, s2, n) = (synth_speech(&mut rng, scene.samples, fs), synth_speech(&mut rng, scene.samples, fs), synth_noise(&mut rng, scene.samples));
        let mix = make_mixture(&scene, [&s1, &s2], &n).unwrap();
        let speech: f64 = (0..2)
            .map(|m| mix.speech[0].channel(m).iter().zip(mix.speech[1].channel(m)).map(|(a, b)| (a + b).powi(2)).sum::<f64>())
            .sum();
        snr_err = snr_err.max((10.0 * (speech / mix.noise.energy()).log10() - scene.snr_db).abs());
    }

    let direct = 40;
    let flat = vec![1.0; direct + fs as usize / 2];
    let shaped = shape_target_rir(&flat, direct, fs, Shaping::default());
    let keep = direct + 800;
    let early = shaped[..=keep] == flat[..=keep];
    let decay = -20.0 * shaped[direct + 3200].log10();

    let data = DataConfig { scenes: 2, seed: 3, scene: SceneConfig { mics: 2, seconds: 0.5, ..Default::default() } };
    let (a, b) = (generate(&data).unwrap(), generate(&data).unwrap());
    let same = a.iter().zip(&b).all(|(x, y)| {
        x.0 == y.0 && x.1.mixture.channels() == y.1.mixture.channels() && x.1.targets.iter().zip(&y.1.targets).all(|(p, q)| p.channels() == q.channels())
    });
    (
        free_field && snr_err < 0.01 && early && decay >= 60.0 - 1e-9 && same,
        format!("free field {free_field}, SNR error {snr_err:.2e} dB, first 50 ms exact {early}, decay at 200 ms {decay:.2} dB, reproducible {same}"),
    )
}

fn metrics() -> Outcome {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(7);
    let (t, e) = (noise(&mut rng, 4000), noise(&mut rng, 4000));
    let base = si_sdr(&e, &t).unwrap();
    let exact = [-6, -1, 1, 3, 10].iter().all(|&k| {
        let s = 2f64.powi(k);
        si_sdr(&e.iter().map(|v| v * s).collect::<Vec<_>>(), &t).unwrap() == base
    });
    let general = [1e-3, 0.37, 5.1, 1e3]
        .iter()
        .map(|s| (si_sdr(&e.iter().map(|v| v * s).collect::<Vec<_>>(), &t).unwrap() - base).abs())
        .fold(0.0, f64::max);

    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let raw = noise(&mut rng, 4000);
    let k = dot(&t, &raw) / dot(&t, &t);
    let i: Vec<f64> = raw.iter().zip(&t).map(|(r, x)| r - k * x).collect();
    let g = (dot(&t, &t) / dot(&i, &i) / 100.0).sqrt();
    let est: Vec<f64> = t.iter().zip(&i).map(|(a, b)| a + g * b).collect();
    let sir_db = sir(&est, &t, &i).unwrap();
    (
        exact && general < 1e-10 && (sir_db - 20.0).abs() < 0.01,
        format!("power-of-two scaling bit-exact {exact}, other scales {general:.1e} dB, 20 dB case {sir_db:.6} dB"),
    )
}

struct Run {
    initial: f64,
    last: f64,
    delta_sdr: f64,
    delta_sir: f64,
    elapsed: Duration,
}

fn train_toy(c: f64) -> Run {
    let mut cfg = RunConfig::preset(Preset::Toy);
    cfg.loss.c = c;
    let t0 = Instant::now();
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    let data = generate_examples(&cfg.data, &trainer.model).unwrap();
    let initial = trainer.mean_loss(&data).unwrap();
    trainer.train_until(&data, cfg.train.steps, |_, _| Ok(())).unwrap();
    let last = trainer.mean_loss(&data).unwrap();
    let report = trainer.evaluate(&data).unwrap();
    Run { initial, last, delta_sdr: report.mean_delta_sdr(), delta_sir: report.mean_delta_sir(), elapsed: t0.elapsed() }
}

fn learning() -> Outcome {
    let main = train_toy(0.3);
    let alt = train_toy(0.9);
    let ratio = main.last / main.initial;
    let total = main.elapsed + alt.elapsed;
    let parts = [ratio < 0.5, main.delta_sdr > 3.0, alt.delta_sir < main.delta_sir, total < Duration::from_secs(1800)];
    (
        parts.iter().all(|p| *p),
        format!(
            "loss {:.4} -> {:.4} (ratio {ratio:.3}, need < 0.5: {}), dSI-SDR {:.2} dB (need > 3: {}), dSIR c=0.3 {:.2} vs c=0.9 {:.2} dB (trend {}), {total:.0?} (< 30 min: {})",
            main.initial, main.last, parts[0], main.delta_sdr, parts[1], main.delta_sir, alt.delta_sir, parts[2], parts[3]
        ),
    )
}

fn determinism() -> Outcome {
    let mut cfg = RunConfig::preset(Preset::Toy);
    cfg.train.steps = 6;
    let mut straight = Trainer::new(cfg.clone()).unwrap();
    let data = generate_examples(&cfg.data, &straight.model).unwrap();
    straight.train_until(&data, 6, |_, _| Ok(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    let mut first = Trainer::new(cfg).unwrap();
    first.train_until(&data, 3, |_, _| Ok(())).unwrap();
    first.checkpoint().save(&path).unwrap();
    drop(first);
    let mut resumed = Trainer::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    resumed.train_until(&data, 6, |_, _| Ok(())).unwrap();
    let same = straight.checkpoint().to_bytes() == resumed.checkpoint().to_bytes();
    (same, format!("6 straight steps vs 3 + save/load + 3: checkpoints bit-identical {same}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient oracle", gradients),
        ("stft consistency", stft_consistency),
        ("filter semantics", filter_semantics),
        ("attention invariants", attention_invariants),
        ("loss identities", loss_identities),
        ("data pipeline", data_pipeline),
        ("metrics", metrics),
        ("toy learning regression", learning),
        ("determinism", determinism),
    ];
    let only: Option<usize> = std::env::var("TRUNET_CRITERION").ok().and_then(|s| s.parse().ok());
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let (ok, detail) = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| (false, "panicked".to_string()));
        println!("criterion {n} {name}: {} {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
