use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use trunet::dsp::{stft, MultiWave, Spectra, StftConfig, StftEngine};
use trunet::loss::{cmse, cmse_graph, combined_loss, permutations, spectra_like, upit, LossConfig, LossMode, LOG_FLOOR};
use trunet::numerics::{Tape, Tensor};

fn noise_spectra(rng: &mut Xoshiro256PlusPlus, scale: f64) -> Spectra {
    let x: Vec<f64> = (0..200).map(|_| rng.random_range(-scale..scale)).collect();
    stft(&MultiWave::new(vec![x], 16_000).unwrap(), &StftEngine::new(StftConfig::new(32, 16).unwrap()).unwrap()).unwrap()
}

fn planes(s: &Spectra) -> (&[f64], &[f64]) {
    s.channel(0)
}

fn graph_cmse(x: (&[f64], &[f64]), y: (&[f64], &[f64]), c: f64) -> f64 {
    let mut t = Tape::new();
    let mut k = |v: &[f64]| t.constant(Tensor::new([v.len()], v.to_vec()).unwrap());
    let (xr, xi, yr, yi) = (k(x.0), k(x.1), k(y.0), k(y.1));
    let l = cmse_graph(&mut t, (xr, xi), (yr, yi), c).unwrap();
    t.value(l).item()
}

#[test]
fn unit_exponent_is_log_complex_mse() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
    for _ in 0..20 {
        let (x, y) = (noise_spectra(&mut rng, 1.0), noise_spectra(&mut rng, 1.0));
        let ((xr, xi), (yr, yi)) = (planes(&x), planes(&y));
        let direct: f64 = (0..xr.len()).map(|i| (xr[i] - yr[i]).powi(2) + (xi[i] - yi[i]).powi(2)).sum();
        assert!((cmse(&x, &y, 1.0).unwrap() - direct.log10()).abs() < 1e-12);
    }
}

#[test]
fn hand_evaluated_single_bin() {
    // |X| = 4, |Y| = 1, equal phases, c = 0.5: (2 - 1)^2 = 1
    let v = graph_cmse((&[4.0], &[0.0]), (&[1.0], &[0.0]), 0.5);
    assert!(v.abs() < 1e-12, "{v}");
    let phase = 0.7f64;
    let v = graph_cmse((&[4.0 * phase.cos()], &[4.0 * phase.sin()]), (&[phase.cos()], &[phase.sin()]), 0.5);
    assert!(v.abs() < 1e-12, "{v}");
}

#[test]
fn perfect_reconstruction_hits_the_floor() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
    let x = noise_spectra(&mut rng, 1.0);
    assert_eq!(cmse(&x, &x, 0.3).unwrap(), LOG_FLOOR.log10());
}

#[test]
fn combined_loss_endpoints_are_exact() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
    for c in [0.1, 0.3, 0.5, 0.9] {
        let (x, y) = (noise_spectra(&mut rng, 1.0), noise_spectra(&mut rng, 3.0));
        assert_eq!(combined_loss(&x, &y, c, 1.0).unwrap(), cmse(&x, &y, c).unwrap());
        assert_eq!(combined_loss(&x, &y, c, 0.0).unwrap(), cmse(&x, &y, 1.0 - c).unwrap());
        let mix = 0.7 * cmse(&x, &y, c).unwrap() + 0.3 * cmse(&x, &y, 1.0 - c).unwrap();
        assert!((combined_loss(&x, &y, c, 0.7).unwrap() - mix).abs() < 1e-12);
    }
}

#[test]
fn upit_matches_exhaustive_oracle() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
    let configs = [
        LossConfig { mode: LossMode::Combined, ..Default::default() },
        LossConfig { mode: LossMode::Cmse, ..Default::default() },
    ];
    for case in 0..100 {
        let config = configs[case % 2];
        let targets: Vec<_> = (0..2).map(|_| noise_spectra(&mut rng, 1.0)).collect();
        let estimates: Vec<_> = (0..2)
            .map(|_| {
                let scale = rng.random_range(0.2..2.0);
                noise_spectra(&mut rng, scale)
            })
            .collect();
        let pair = |t: &Spectra, e: &Spectra| match config.mode {
            LossMode::Cmse => cmse(t, e, config.c).unwrap(),
            LossMode::Combined => combined_loss(t, e, config.c, config.alpha).unwrap(),
        };
        let identity = (pair(&targets[0], &estimates[0]) + pair(&targets[1], &estimates[1])) / 2.0;
        let swapped = (pair(&targets[0], &estimates[1]) + pair(&targets[1], &estimates[0])) / 2.0;
        let (loss, perm) = upit(&targets, &estimates, &config).unwrap();
        let (want, want_perm) = if swapped < identity { (swapped, vec![1, 0]) } else { (identity, vec![0, 1]) };
        assert_eq!(perm, want_perm, "case {case}");
        assert!((loss - want).abs() < 1e-12, "case {case}");
    }
}

#[test]
fn upit_recovers_a_swapped_pair() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(4);
    let targets: Vec<_> = (0..3).map(|_| noise_spectra(&mut rng, 1.0)).collect();
    for p in permutations(3) {
        // estimate j is target perm^-1(j)
        let mut estimates = targets.clone();
        for (i, &j) in p.iter().enumerate() {
            estimates[j] = targets[i].clone();
        }
        let (loss, perm) = upit(&targets, &estimates, &LossConfig::default()).unwrap();
        assert_eq!(perm, p);
        assert_eq!(loss, LOG_FLOOR.log10());
    }
}

#[test]
fn mismatched_inputs_are_rejected() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
    let x = noise_spectra(&mut rng, 1.0);
    assert!(upit(&[x.clone()], &[x.clone(), x.clone()], &LossConfig::default()).is_err());
    assert!(upit(&[], &[], &LossConfig::default()).is_err());
    let bad = LossConfig { c: 0.0, ..Default::default() };
    assert!(bad.validate().is_err());
    let bad = LossConfig { alpha: 1.5, ..Default::default() };
    assert!(bad.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cmse_is_symmetric(seed in any::<u64>(), c in 0.05f64..1.0) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let (x, y) = (noise_spectra(&mut rng, 1.0), noise_spectra(&mut rng, 2.0));
        prop_assert_eq!(cmse(&x, &y, c).unwrap(), cmse(&y, &x, c).unwrap());
    }

    #[test]
    fn growing_magnitude_gap_never_lowers_cmse(seed in any::<u64>(), c in 0.05f64..1.0, g1 in 1.0f64..3.0, dg in 0.0f64..2.0) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let x = noise_spectra(&mut rng, 1.0);
        let (re, im) = planes(&x);
        let scaled = |g: f64| spectra_like(&x, re.iter().map(|v| v * g).collect(), im.iter().map(|v| v * g).collect()).unwrap();
        let near = cmse(&x, &scaled(g1), c).unwrap();
        let far = cmse(&x, &scaled(g1 + dg), c).unwrap();
        prop_assert!(far >= near - 1e-12, "{} < {}", far, near);
    }
}
