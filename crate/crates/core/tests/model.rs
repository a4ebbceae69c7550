use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use trunet::checks::{random_example, tiny_config, TINY_LEN};
use trunet::dsp::{stft, FilterMode, MultiWave, StftConfig, StftEngine};
use trunet::model::{ModelConfig, Trunet};
use trunet::numerics::{Init, ParamStore, Tape, Tensor};
use trunet::runet::{RUNet, RUNetConfig};
use trunet::tnet::Variant;

fn rand_tensor(rng: &mut Xoshiro256PlusPlus, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn runet(channels: Vec<usize>, mode: FilterMode, in_ch: usize, mics: usize, bins: usize) -> (RUNet, ParamStore) {
    let mut store = ParamStore::new();
    let mut init = Init::new(1);
    let net = RUNet::register(&mut store, &mut init, "r", RUNetConfig::new(channels, 4, mode), in_ch, mics, bins).unwrap();
    (net, store)
}

#[test]
fn shape_trace_over_five_layers() {
    let (net, store) = runet(vec![16, 16, 32, 32, 64], FilterMode::Multi, 4, 2, 256);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
    let mut t = Tape::new();
    let b = store.bind_constant(&mut t);
    let x = t.constant(rand_tensor(&mut rng, &[4, 2, 256]));
    let enc = net.encode(&mut t, &b, x).unwrap();
    let freqs: Vec<usize> = enc.iter().map(|v| t.shape(*v)[2]).collect();
    assert_eq!(freqs, [128, 64, 32, 16, 8]);
    let chans: Vec<usize> = enc.iter().map(|v| t.shape(*v)[0]).collect();
    assert_eq!(chans, [16, 16, 32, 32, 64]);
    let bottom = net.blstm_bridge(&mut t, &b, enc[4]).unwrap();
    assert_eq!(t.shape(bottom), [64, 2, 8]);
    let out = net.decode(&mut t, &b, bottom, &enc).unwrap();
    assert_eq!(t.shape(out), [2, 2, 256]);
}

#[test]
fn unrestorable_bins_are_a_config_error_naming_the_padding() {
    let cfg = RUNetConfig::new(vec![4, 8], 4, FilterMode::Multi);
    let err = cfg.check_bins(257).unwrap_err().to_string();
    assert!(err.contains("260"), "{err}");
    assert!(cfg.check_bins(260).is_ok());
    assert_eq!(RUNetConfig::new(vec![1; 5], 4, FilterMode::Multi).padded_bins(257), 288);
}

#[test]
fn zero_input_gives_zero_output() {
    for mode in [FilterMode::Multi, FilterMode::Single { reference: 0 }] {
        let (net, store) = runet(vec![4, 8], mode, 6, 2, 16);
        let mut t = Tape::new();
        let b = store.bind_constant(&mut t);
        let x = t.constant(Tensor::zeros([6, 5, 16]));
        let y = net.encoder_decoder(&mut t, &b, x).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn bridge_with_zero_lstm_weights_adds_only_the_projection_bias() {
    let (net, mut store) = runet(vec![4, 8], FilterMode::Multi, 6, 2, 16);
    let br = &net.bridge;
    for l in [br.layer1.0, br.layer1.1, br.layer2.0, br.layer2.1] {
        for id in [l.w_ih, l.w_hh] {
            let s = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(s)).unwrap();
        }
    }
    let bias: Vec<f64> = (0..8 * 4).map(|i| i as f64 * 0.1).collect();
    store.set(br.proj.1, Tensor::new([32], bias.clone()).unwrap()).unwrap();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
    for k in [1, 3] {
        let enc = rand_tensor(&mut rng, &[8, k, 4]);
        let mut t = Tape::new();
        let b = store.bind_constant(&mut t);
        let e = t.constant(enc.clone());
        let y = net.blstm_bridge(&mut t, &b, e).unwrap();
        let y = t.value(y);
        for c in 0..8 {
            for ki in 0..k {
                for f in 0..4 {
                    let i = (c * k + ki) * 4 + f;
                    assert!((y.data()[i] - enc.data()[i] - bias[c * 4 + f]).abs() < 1e-15);
                }
            }
        }
    }
}

#[test]
fn filters_are_tanh_bounded() {
    let (net, mut store) = runet(vec![4, 8], FilterMode::Multi, 6, 2, 14);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
    store.update(|_, d| d.iter_mut().for_each(|v| *v *= 20.0));
    let mut t = Tape::new();
    let b = store.bind_constant(&mut t);
    let x = t.constant(rand_tensor(&mut rng, &[6, 3, 16]).map(|v| v * 100.0));
    let y = net.encoder_decoder(&mut t, &b, x).unwrap();
    let heads = net.filter_heads(&mut t, &b, y).unwrap();
    assert_eq!(heads.len(), 2);
    for (re, im) in heads {
        assert_eq!(t.shape(re), [2, 3, 14]);
        for v in t.value(re).data().iter().chain(t.value(im).data()) {
            assert!(v.abs() <= 1.0);
        }
    }
}

fn mixture(cfg: &ModelConfig, len: usize, seed: u64) -> trunet::Spectra {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let ch = (0..cfg.mics).map(|_| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    stft(&MultiWave::new(ch, 16_000).unwrap(), &StftEngine::new(cfg.stft).unwrap()).unwrap()
}

#[test]
fn separated_spectra_obey_the_filter_bound() {
    let cfg = ModelConfig { stft: StftConfig::new(32, 16).unwrap(), ..ModelConfig::toy(Some(Variant::MagPhase), FilterMode::Multi) };
    let (model, mut params) = Trunet::new(cfg.clone(), 3).unwrap();
    params.update(|_, d| d.iter_mut().for_each(|v| *v *= 10.0));
    let spec = mixture(&cfg, 100, 4);
    let mut t = Tape::new();
    let b = params.bind_constant(&mut t);
    let out = model.forward(&mut t, &b, &spec).unwrap();
    let (m, kf) = (cfg.mics, spec.num_frames() * spec.num_bins());
    for (xr, xi) in &out.spectra {
        for i in 0..kf {
            let ymax = (0..m)
                .map(|c| {
                    let (r, im) = spec.channel(c);
                    r[i].hypot(im[i])
                })
                .fold(0.0, f64::max);
            let mag = t.value(*xr).data()[i].hypot(t.value(*xi).data()[i]);
            assert!(mag <= m as f64 * ymax * 2f64.sqrt() + 1e-12);
        }
    }
}

#[test]
fn zero_parameters_give_silent_waves_of_input_length() {
    for variant in [None, Some(Variant::Cat), Some(Variant::RealImag), Some(Variant::MagPhase)] {
        for mode in [FilterMode::Multi, FilterMode::Single { reference: 1 }] {
            let cfg = ModelConfig { stft: StftConfig::new(32, 16).unwrap(), ..ModelConfig::toy(variant, mode) };
            let (model, mut params) = Trunet::new(cfg.clone(), 5).unwrap();
            params.zero_all();
            let spec = mixture(&cfg, 77, 6);
            let mut t = Tape::new();
            let b = params.bind_constant(&mut t);
            let out = model.forward(&mut t, &b, &spec).unwrap();
            assert_eq!(out.waves.len(), 2);
            for w in &out.waves {
                assert_eq!(t.shape(*w), [77]);
                assert!(t.value(*w).data().iter().all(|&v| v == 0.0));
            }
            assert_eq!(out.tnet.is_some(), variant.is_some());
        }
    }
}

#[test]
fn runet_only_ablation_has_no_tnet_parameters() {
    let cfg = tiny_config(None, FilterMode::Multi);
    let (model, params) = Trunet::new(cfg.clone(), 0).unwrap();
    assert!(model.tnet.is_none());
    assert!(params.iter().all(|(n, _)| !n.starts_with("tnet")));
    assert_eq!(model.runet.in_channels, 2 * cfg.mics);
    let with = Trunet::new(tiny_config(Some(Variant::MagPhase), FilterMode::Multi), 0).unwrap().0;
    assert_eq!(with.runet.in_channels, 4 * cfg.mics);
    let cat = Trunet::new(tiny_config(Some(Variant::Cat), FilterMode::Multi), 0).unwrap().0;
    assert_eq!(cat.runet.in_channels, 3 * cfg.mics);
}

#[test]
fn filter_layout_matches_source_tap_part_order() {
    // Put a bias on one output unit of the head and read it back from the filter planes.
    let cfg = tiny_config(None, FilterMode::Multi);
    let (model, mut params) = Trunet::new(cfg.clone(), 0).unwrap();
    let ex = random_example(&cfg, TINY_LEN, 1).unwrap();
    let head = model.runet.head;
    let shape = params.get(head).shape().to_vec();
    let (c1, n_out) = (shape[1], shape[2]);
    let mut w = vec![0.0; shape.iter().product()];
    // bin 0: source 1, tap 0, imaginary part = unit (1 * 2 + 0) * 2 + 1 = 5
    w[(c1 - 1) * n_out + 5] = 0.5;
    params.set(head, Tensor::new(shape, w).unwrap()).unwrap();
    let mut t = Tape::new();
    let b = params.bind_constant(&mut t);
    let out = model.forward(&mut t, &b, &ex.mixture).unwrap();
    let (re1, im1) = out.filters[1];
    assert_eq!(t.value(im1).data()[0], 0.5f64.tanh());
    assert!(t.value(re1).data().iter().all(|&v| v == 0.0));
    assert!(t.value(out.filters[0].1).data().iter().all(|&v| v == 0.0));
    let nonzero = t.value(im1).data().iter().filter(|&&v| v != 0.0).count();
    assert_eq!(nonzero, ex.mixture.num_frames());
}

#[test]
fn wrong_inputs_are_rejected() {
    let cfg = tiny_config(Some(Variant::Cat), FilterMode::Multi);
    let (model, params) = Trunet::new(cfg.clone(), 0).unwrap();
    let mut t = Tape::new();
    let b = params.bind_constant(&mut t);
    let three = ModelConfig { mics: 3, ..cfg.clone() };
    assert!(model.forward(&mut t, &b, &mixture(&three, TINY_LEN, 0)).is_err());
    let other = ModelConfig { stft: StftConfig::new(16, 8).unwrap(), ..cfg.clone() };
    assert!(model.forward(&mut t, &b, &mixture(&other, 40, 0)).is_err());
    let bad_ref = tiny_config(None, FilterMode::Single { reference: 2 });
    assert!(Trunet::new(bad_ref, 0).is_err());
}
