use super::*;
use crate::checkpoint::Checkpoint;
use crate::dsp::{StftConfig, Waveform, WindowKind};
use crate::tensor::gradcheck::{check_store, GradCheckOptions};
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::{FRAC_PI_2, PI};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn tiny(multimodal: bool, blocks: usize) -> SeConfig {
    SeConfig {
        num_tf_blocks: blocks,
        channels: 2,
        multimodal,
        d_state: 2,
        stft: StftConfig::new(16, 4, WindowKind::Hann, 0.3).unwrap(),
        weights: LossWeights::default(),
    }
}

fn small_audio(multimodal: bool) -> SeConfig {
    SeConfig {
        num_tf_blocks: 1,
        channels: 4,
        multimodal,
        d_state: 4,
        ..SeConfig::default()
    }
}

fn build(cfg: &SeConfig, seed: u64) -> (SeNetwork, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let net = SeNetwork::new(cfg, &mut store, &mut rng(seed));
    (net, store)
}

/// Random magnitude (non-negative) and phase planes of shape `[b, t, f]`.
fn spectral(b: usize, t: usize, f: usize, r: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let n = b * t * f;
    let mag = (0..n).map(|_| r.random_range(0.05..1.0)).collect();
    let phase = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
    (mag, phase)
}

fn push(tape: &mut Tape<f64>, shape: &[usize], (m, p): &(Vec<f64>, Vec<f64>)) -> SpectralInput {
    SpectralInput {
        mag: tape.constant_f64(shape, m).unwrap(),
        phase: tape.constant_f64(shape, p).unwrap(),
    }
}

fn tone(len: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..len)
        .map(|i| {
            let t = i as f64 / 16000.0;
            0.3 * (2.0 * PI * 220.0 * t).sin()
                + 0.1 * (2.0 * PI * 1250.0 * t).sin()
                + 0.02 * r.random_range(-1.0..1.0)
        })
        .collect()
}

#[test]
fn encoder_output_has_c_channels_and_halved_bins() {
    let mut store = ParamStore::<f64>::new();
    let enc = DenseEncoder::new(&mut store, "e", 3, &mut rng(1));
    for f in [9, 10, 201] {
        let mut tape = Tape::new();
        let x = tape
            .constant_f64(&[2, 2, 5, f], &randn(20 * f, &mut rng(2)))
            .unwrap();
        let y = enc.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 5, (f - 1) / 2 + 1]);
    }
}

#[test]
fn encoder_rejects_wrong_channel_count() {
    let mut store = ParamStore::<f64>::new();
    let enc = DenseEncoder::new(&mut store, "e", 2, &mut rng(1));
    let mut tape = Tape::new();
    let x = tape.constant_f64(&[1, 3, 4, 9], &[0.0; 108]).unwrap();
    assert!(enc.forward(&mut tape, &store, x).is_err());
}

#[test]
fn encoder_impulse_stays_inside_receptive_field() {
    // Time reach: the dilations 1+2+4+8 on each side. Frequency reach: one
    // bin per dense layer, then the (1,3) stride-2 exit conv, so output
    // column f' sees input columns 2f'−1−4 ..= 2f'+1+4.
    let (t_len, f_len, t0, f0) = (48, 31, 24, 14);
    let mut store = ParamStore::<f64>::new();
    let enc = DenseEncoder::new(&mut store, "e", 3, &mut rng(5));
    let run = |impulse: bool| {
        let mut x = vec![0.0; 2 * t_len * f_len];
        if impulse {
            x[t0 * f_len + f0] = 1.0;
        }
        let mut tape = Tape::new();
        let v = tape.constant_f64(&[1, 2, t_len, f_len], &x).unwrap();
        let y = enc.forward(&mut tape, &store, v).unwrap();
        tape.value(y).to_vec()
    };
    let (base, hit) = (run(false), run(true));
    let fr = (f_len - 1) / 2 + 1;
    let mut inside = 0;
    for c in 0..3 {
        for t in 0..t_len {
            for f in 0..fr {
                let i = (c * t_len + t) * fr + f;
                let changed = (hit[i] - base[i]).abs() > 0.0;
                let reach = t.abs_diff(t0) <= 15 && (2 * f).abs_diff(f0) <= 5;
                assert!(!changed || reach, "response outside field at t={t} f'={f}");
                inside += changed as usize;
            }
        }
    }
    assert!(inside > 0);
    // The extreme time offsets are actually reached.
    let col = f0 / 2;
    let reached = |t: usize| {
        (0..3).any(|c| hit[(c * t_len + t) * fr + col] != base[(c * t_len + t) * fr + col])
    };
    assert!(reached(t0 - 15) && reached(t0 + 15));
}

#[test]
fn two_encoders_share_no_parameters() {
    let cfg = tiny(true, 1);
    let (net, mut store) = build(&cfg, 3);
    let ac: Vec<String> = SeNetwork::param_names(&store)
        .into_iter()
        .filter(|n| n.starts_with("enc_ac."))
        .collect();
    let aux: Vec<String> = SeNetwork::param_names(&store)
        .into_iter()
        .filter(|n| n.starts_with("enc_emg."))
        .collect();
    assert_eq!(ac.len(), aux.len());
    assert!(!ac.is_empty());
    for n in &ac {
        let twin = n.replacen("enc_ac.", "enc_emg.", 1);
        assert_ne!(store.find(n), store.find(&twin));
    }
    // Perturbing every acoustic-encoder tensor leaves the auxiliary
    // encoder's output bit-identical.
    let aux_enc = net.enc_aux.clone().unwrap();
    let x = randn(2 * 4 * 9, &mut rng(9));
    let eval = |s: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let v = tape.constant_f64(&[1, 2, 4, 9], &x).unwrap();
        let y = aux_enc.forward(&mut tape, s, v).unwrap();
        tape.value(y).to_vec()
    };
    let before = eval(&store);
    for n in &ac {
        let id = store.find(n).unwrap();
        store
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += 0.5);
    }
    assert_eq!(before, eval(&store));
}

fn set(store: &mut ParamStore<f64>, id: crate::tensor::ParamId, data: Vec<f64>) {
    let shape = store.get(id).shape().to_vec();
    *store.get_mut(id) = Tensor::new(&shape, data).unwrap().with_grad();
}

#[test]
fn cross_fuse_selection_weights_give_acoustic_features() {
    let c = 3;
    let mut store = ParamStore::<f64>::new();
    let fuse = CrossFuse::new(&mut store, "x", c, &mut rng(1));
    // fc1 rows for the acoustic half are [I, −I]; ReLU splits the sign;
    // fc2 = [I; −I] recombines relu(a) − relu(−a) = a.
    let mut w1 = vec![0.0; 2 * c * 2 * c];
    for i in 0..c {
        w1[i * 2 * c + i] = 1.0;
        w1[i * 2 * c + c + i] = -1.0;
    }
    let mut w2 = vec![0.0; 2 * c * c];
    for i in 0..c {
        w2[i * c + i] = 1.0;
        w2[(c + i) * c + i] = -1.0;
    }
    set(&mut store, fuse.fc1.w, w1);
    set(&mut store, fuse.fc1.b.unwrap(), vec![0.0; 2 * c]);
    set(&mut store, fuse.fc2.w, w2);
    set(&mut store, fuse.fc2.b.unwrap(), vec![0.0; c]);
    let shape = [2, c, 4, 5];
    let a = randn(2 * c * 20, &mut rng(2));
    let e = randn(2 * c * 20, &mut rng(3));
    let mut tape = Tape::new();
    let av = tape.constant_f64(&shape, &a).unwrap();
    let ev = tape.constant_f64(&shape, &e).unwrap();
    let y = fuse.forward_with(&mut tape, &store, av, ev, false).unwrap();
    assert_eq!(tape.value(y), a.as_slice());
}

#[test]
fn cross_fuse_depends_on_auxiliary_features() {
    let mut store = ParamStore::<f64>::new();
    let fuse = CrossFuse::new(&mut store, "x", 16, &mut rng(1));
    let shape = [2, 16, 10, 50];
    let n = 2 * 16 * 10 * 50;
    let a = randn(n, &mut rng(2));
    let e = randn(n, &mut rng(3));
    let run = |e: &[f64]| {
        let mut tape = Tape::new();
        let av = tape.constant_f64(&shape, &a).unwrap();
        let ev = tape.constant_f64(&shape, e).unwrap();
        let y = fuse.forward(&mut tape, &store, av, ev).unwrap();
        assert_eq!(tape.shape(y), &shape);
        tape.value(y).to_vec()
    };
    let base = run(&e);
    let mut e2 = e.clone();
    e2[77] += 0.5;
    assert_ne!(base, run(&e2));
}

#[test]
fn cross_fuse_rejects_mismatched_extents() {
    let mut store = ParamStore::<f64>::new();
    let fuse = CrossFuse::new(&mut store, "x", 2, &mut rng(1));
    let mut tape = Tape::new();
    let a = tape.constant_f64(&[1, 2, 3, 4], &[0.0; 24]).unwrap();
    let e = tape.constant_f64(&[1, 2, 3, 5], &[0.0; 30]).unwrap();
    assert!(fuse.forward(&mut tape, &store, a, e).is_err());
}

#[test]
fn decoders_restore_odd_and_even_bin_counts() {
    for bins in [9, 10, 201] {
        let mut store = ParamStore::<f64>::new();
        let dec = Decoder::new(&mut store, "d", 2, 2, bins, &mut rng(4));
        let fr = (bins - 1) / 2 + 1;
        let mut tape = Tape::new();
        let x = tape
            .constant_f64(&[1, 2, 3, fr], &randn(6 * fr, &mut rng(5)))
            .unwrap();
        let y = dec.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 3, bins]);
    }
}

#[test]
fn network_output_shapes_and_mask_range() {
    let cfg = tiny(true, 2);
    let (net, store) = build(&cfg, 7);
    let shape = [2, 6, 9];
    let mut tape = Tape::new();
    let noisy = push(&mut tape, &shape, &spectral(2, 6, 9, &mut rng(1)));
    let aux = push(&mut tape, &shape, &spectral(2, 6, 9, &mut rng(2)));
    let out = net.forward(&mut tape, &store, noisy, Some(aux)).unwrap();
    for v in [out.mask, out.mag, out.phase, out.real, out.imag] {
        assert_eq!(tape.shape(v), &shape);
    }
    assert!(tape.value(out.mask).iter().all(|&m| m > 0.0 && m < 2.0));
    assert!(tape.value(out.phase).iter().all(|&p| p > -PI && p <= PI));
}

#[test]
fn zero_preactivation_gives_unit_mask() {
    let cfg = tiny(false, 1);
    let (net, mut store) = build(&cfg, 8);
    let (w, b) = (net.mask_dec.out.w, net.mask_dec.out.b);
    let n = store.get(w).numel();
    set(&mut store, w, vec![0.0; n]);
    set(&mut store, b, vec![0.0]);
    let mut tape = Tape::new();
    let noisy = push(&mut tape, &[1, 5, 9], &spectral(1, 5, 9, &mut rng(1)));
    let out = net.forward(&mut tape, &store, noisy, None).unwrap();
    assert!(tape.value(out.mask).iter().all(|&m| m == 1.0));
    assert_eq!(tape.value(out.mag), tape.value(noisy.mag));
}

#[test]
fn phase_from_real_and_imaginary_parts() {
    let mut tape = Tape::<f64>::new();
    let r = tape.constant_f64(&[3], &[1.0, 0.0, 0.0]).unwrap();
    let i = tape.constant_f64(&[3], &[0.0, 1.0, 0.0]).unwrap();
    let p = tape.atan2(i, r).unwrap();
    assert_eq!(tape.value(p), &[0.0, FRAC_PI_2, 0.0]);
    let mut g = rng(3);
    let re = randn(500, &mut g);
    let im = randn(500, &mut g);
    let r = tape.constant_f64(&[500], &re).unwrap();
    let i = tape.constant_f64(&[500], &im).unwrap();
    let p = tape.atan2(i, r).unwrap();
    assert!(tape.value(p).iter().all(|&v| v > -PI && v <= PI));
}

#[test]
fn multimodal_network_requires_auxiliary_input() {
    let cfg = tiny(true, 1);
    let (net, store) = build(&cfg, 1);
    let mut tape = Tape::new();
    let noisy = push(&mut tape, &[1, 4, 9], &spectral(1, 4, 9, &mut rng(1)));
    assert!(net.forward(&mut tape, &store, noisy, None).is_err());
    let short = push(&mut tape, &[1, 3, 9], &spectral(1, 3, 9, &mut rng(2)));
    assert!(net.forward(&mut tape, &store, noisy, Some(short)).is_err());
}

#[test]
fn batch_items_do_not_interact() {
    let cfg = tiny(true, 1);
    let (net, store) = build(&cfg, 2);
    let items: Vec<_> = (0..3)
        .map(|k| {
            (
                spectral(1, 5, 9, &mut rng(10 + k)),
                spectral(1, 5, 9, &mut rng(20 + k)),
            )
        })
        .collect();
    let run = |order: &[usize]| {
        let cat = |second: bool| {
            let pick = |k: usize| if second { &items[k].1 } else { &items[k].0 };
            let m: Vec<f64> = order.iter().flat_map(|&k| pick(k).0.clone()).collect();
            let p: Vec<f64> = order.iter().flat_map(|&k| pick(k).1.clone()).collect();
            (m, p)
        };
        let mut tape = Tape::new();
        let shape = [order.len(), 5, 9];
        let noisy = push(&mut tape, &shape, &cat(false));
        let aux = push(&mut tape, &shape, &cat(true));
        let out = net.forward(&mut tape, &store, noisy, Some(aux)).unwrap();
        tape.value(out.mag)
            .chunks(45)
            .map(<[f64]>::to_vec)
            .collect::<Vec<_>>()
    };
    let a = run(&[0, 1, 2]);
    let b = run(&[2, 0, 1]);
    assert_eq!(a[0], b[1]);
    assert_eq!(a[1], b[2]);
    assert_eq!(a[2], b[0]);
}

#[test]
fn enhanced_length_equals_input_length() {
    let cfg = small_audio(true);
    let (net, store) = build(&cfg, 4);
    let enh = Enhancer::new(net, store).unwrap();
    for len in [1600, 1657] {
        let noisy = Waveform::audio(tone(len, 1)).unwrap();
        let aux = Waveform::audio(tone(len, 2)).unwrap();
        let y = se_forward(&enh, &noisy, &aux).unwrap();
        assert_eq!(y.len(), len);
        assert!(y.samples().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn length_or_rate_mismatch_is_input_error() {
    let cfg = small_audio(true);
    let (net, store) = build(&cfg, 4);
    let enh = Enhancer::new(net, store).unwrap();
    let noisy = Waveform::audio(tone(1600, 1)).unwrap();
    let aux = Waveform::audio(tone(1500, 2)).unwrap();
    assert!(matches!(
        se_forward(&enh, &noisy, &aux),
        Err(SeError::Input(_))
    ));
    assert!(matches!(
        enh.enhance(&noisy, None, ForwardOptions::default()),
        Err(SeError::Input(_))
    ));
    let slow = Waveform::new(tone(1600, 1), 10000).unwrap();
    assert!(matches!(
        enh.enhance(&slow, Some(&slow), ForwardOptions::default()),
        Err(SeError::Input(_))
    ));
}

#[test]
fn pass_through_reproduces_the_input() {
    let cfg = small_audio(true);
    let (net, store) = build(&cfg, 5);
    let enh = Enhancer::new(net, store).unwrap();
    let x = tone(4000, 3);
    let noisy = Waveform::audio(x.clone()).unwrap();
    let aux = Waveform::audio(tone(4000, 4)).unwrap();
    let y = enh
        .enhance(&noisy, Some(&aux), ForwardOptions { pass_through: true })
        .unwrap();
    let err: f64 = y
        .samples()
        .iter()
        .zip(&x)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(err / norm < 1e-6, "relative error {}", err / norm);
}

#[test]
fn uni_modal_output_ignores_auxiliary_content() {
    let cfg = small_audio(false);
    let (net, store) = build(&cfg, 6);
    assert!(net.enc_aux.is_none() && net.fuse.is_none());
    assert!(SeNetwork::param_names(&store)
        .iter()
        .all(|n| !n.starts_with("enc_emg") && !n.starts_with("cross")));
    let enh = Enhancer::new(net, store).unwrap();
    let len = 2400;
    let noisy = Waveform::audio(tone(len, 1)).unwrap();
    let base = enh
        .enhance(&noisy, None, ForwardOptions::default())
        .unwrap();
    let auxes = [
        vec![0.0; len],
        randn(len, &mut rng(9)),
        tone(len, 7),
        vec![0.0; 10],
    ];
    for a in auxes {
        let a = Waveform::audio(a).unwrap();
        let y = enh
            .enhance(&noisy, Some(&a), ForwardOptions::default())
            .unwrap();
        assert_eq!(y.samples(), base.samples());
    }
}

#[test]
fn param_count_formula_and_monotone_capacity() {
    for multimodal in [false, true] {
        let mut last = 0;
        for blocks in [1, 4, 8] {
            let cfg = SeConfig {
                num_tf_blocks: blocks,
                multimodal,
                ..SeConfig::default()
            };
            let (_, store) = build(&cfg, 0);
            assert_eq!(store.num_scalars(), cfg.param_count());
            assert!(cfg.param_count() > last);
            last = cfg.param_count();
        }
    }
    let (uni, multi) = (small_audio(false), small_audio(true));
    assert_eq!(
        multi.param_count() - uni.param_count(),
        multi.encoder_params() + multi.fusion_params()
    );
}

#[test]
fn config_text_round_trip_and_validation() {
    let cfg = SeConfig {
        num_tf_blocks: 8,
        channels: 12,
        multimodal: false,
        d_state: 6,
        stft: StftConfig::new(320, 80, WindowKind::Hann, 0.5).unwrap(),
        weights: LossWeights {
            time: 0.1,
            mag: 1.0,
            complex: 0.25,
            phase: 0.0,
        },
    };
    let text = cfg.to_kv().to_text();
    let back = SeConfig::from_kv(&crate::kv::KvMap::parse(&text).unwrap()).unwrap();
    assert_eq!(back, cfg);
    let bad = SeConfig {
        num_tf_blocks: 0,
        ..SeConfig::default()
    };
    assert!(matches!(bad.validate(), Err(SeError::Config(_))));
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let cfg = small_audio(true);
    let mut store32 = ParamStore::<f32>::new();
    let net = SeNetwork::new(&cfg, &mut store32, &mut rng(11));
    let enh = Enhancer::new(net, store32.cast::<f64>()).unwrap();
    let mut bytes = Vec::new();
    enh.checkpoint().write_to(&mut bytes).unwrap();
    let loaded =
        Enhancer::<f64>::from_checkpoint(&Checkpoint::read_from(bytes.as_slice()).unwrap())
            .unwrap();
    assert_eq!(loaded.config(), &cfg);
    let noisy = Waveform::audio(tone(2000, 1)).unwrap();
    let aux = Waveform::audio(tone(2000, 2)).unwrap();
    let a = se_forward(&enh, &noisy, &aux).unwrap();
    let b = se_forward(&loaded, &noisy, &aux).unwrap();
    assert_eq!(a.samples(), b.samples());
    let mut again = Vec::new();
    loaded.checkpoint().write_to(&mut again).unwrap();
    assert_eq!(bytes, again);
}

#[test]
fn checkpoint_of_other_kind_is_rejected() {
    let cfg = tiny(false, 1);
    let (_, store) = build(&cfg, 0);
    let ck = Checkpoint::from_store("emg", cfg.to_kv(), &store);
    assert!(Enhancer::<f64>::from_checkpoint(&ck).is_err());
}

fn speech(
    tape: &mut Tape<f64>,
    wave: &[f64],
    mag: &[f64],
    phase: &[f64],
    t: usize,
    f: usize,
) -> SpeechTensors {
    SpeechTensors {
        wave: tape.constant_f64(&[1, wave.len()], wave).unwrap(),
        mag: tape.constant_f64(&[1, t, f], mag).unwrap(),
        phase: tape.constant_f64(&[1, t, f], phase).unwrap(),
    }
}

fn only(time: f64, mag: f64, complex: f64, phase: f64) -> LossWeights {
    LossWeights {
        time,
        mag,
        complex,
        phase,
    }
}

#[test]
fn loss_vanishes_on_identical_signals() {
    let mut g = rng(1);
    let w = randn(64, &mut g);
    let (m, p) = spectral(1, 4, 5, &mut g);
    let mut tape = Tape::new();
    let a = speech(&mut tape, &w, &m, &p, 4, 5);
    let b = speech(&mut tape, &w, &m, &p, 4, 5);
    let v = stage2_loss(&mut tape, a, b, &LossWeights::default())
        .unwrap()
        .values(&tape);
    assert_eq!(v, LossValues::default());
}

#[test]
fn phase_term_is_wrap_invariant() {
    let mut g = rng(2);
    let (m, p) = spectral(1, 4, 5, &mut g);
    let shifted: Vec<f64> = p.iter().map(|x| x + 2.0 * PI).collect();
    let mut tape = Tape::new();
    let a = speech(&mut tape, &[0.0; 8], &m, &shifted, 4, 5);
    let b = speech(&mut tape, &[0.0; 8], &m, &p, 4, 5);
    let parts = stage2_loss(&mut tape, a, b, &only(0.0, 0.0, 0.0, 1.0)).unwrap();
    assert!(tape.item(parts.total).abs() < 1e-12);
    assert!(tape.item(parts.phase).abs() < 1e-12);
}

#[test]
fn time_term_is_mean_absolute_error() {
    let mut g = rng(3);
    let w = randn(100, &mut g);
    let shifted: Vec<f64> = w.iter().map(|x| x + 0.1).collect();
    let (m, p) = spectral(1, 2, 3, &mut g);
    let mut tape = Tape::new();
    let a = speech(&mut tape, &shifted, &m, &p, 2, 3);
    let b = speech(&mut tape, &w, &m, &p, 2, 3);
    let lt = 0.37;
    let parts = stage2_loss(&mut tape, a, b, &only(lt, 0.0, 0.0, 0.0)).unwrap();
    assert!((tape.item(parts.total) - 0.1 * lt).abs() < 1e-12);
}

#[test]
fn magnitude_and_complex_terms_match_hand_values() {
    // One bin: est 2∠0, clean 1∠π/2. Magnitude MSE = 1; complex MSE =
    // (2 − 0)² + (0 − 1)² = 5.
    let mut tape = Tape::new();
    let a = speech(&mut tape, &[0.0], &[2.0], &[0.0], 1, 1);
    let b = speech(&mut tape, &[0.0], &[1.0], &[FRAC_PI_2], 1, 1);
    let parts = stage2_loss(&mut tape, a, b, &LossWeights::default()).unwrap();
    let v = parts.values(&tape);
    assert!((v.mag - 1.0).abs() < 1e-15);
    assert!((v.complex - 5.0).abs() < 1e-15);
    assert!((v.phase - FRAC_PI_2).abs() < 1e-15);
    let expect = 0.9 * 1.0 + 0.1 * 5.0 + 0.3 * FRAC_PI_2;
    assert!((v.total - expect).abs() < 1e-14);
}

#[test]
fn phase_loss_sums_three_anti_wrapped_means() {
    let est = [0.0, 1.0, 3.0, -3.0];
    let clean = [0.5, 0.5, -3.0, 3.0];
    let aw = |d: f64| (d - 2.0 * PI * (d / (2.0 * PI)).round()).abs();
    // [1, 2, 2]: axis 1 is time, axis 2 is frequency.
    let ip = est.iter().zip(&clean).map(|(a, b)| aw(a - b)).sum::<f64>() / 4.0;
    let gd = (aw((est[1] - est[0]) - (clean[1] - clean[0]))
        + aw((est[3] - est[2]) - (clean[3] - clean[2])))
        / 2.0;
    let iaf = (aw((est[2] - est[0]) - (clean[2] - clean[0]))
        + aw((est[3] - est[1]) - (clean[3] - clean[1])))
        / 2.0;
    let mut tape = Tape::<f64>::new();
    let e = tape.constant_f64(&[1, 2, 2], &est).unwrap();
    let c = tape.constant_f64(&[1, 2, 2], &clean).unwrap();
    let l = phase_loss(&mut tape, e, c).unwrap();
    assert!((tape.item(l) - (ip + gd + iaf)).abs() < 1e-14);
}

#[test]
fn non_finite_component_is_numeric_error() {
    let v = LossValues {
        phase: f64::NAN,
        ..LossValues::default()
    };
    assert!(matches!(v.check_finite(), Err(SeError::Numeric(_))));
    assert!(LossValues::default().check_finite().is_ok());
}

const GC: GradCheckOptions = GradCheckOptions {
    h: 1e-5,
    max_probes: 12,
    floor: 1e-3,
};

fn assert_gradcheck(
    store: &mut ParamStore<f64>,
    f: impl FnMut(&mut Tape<f64>, &ParamStore<f64>) -> crate::tensor::Result<Var>,
) {
    let rep = check_store(store, f, &GC).unwrap();
    assert!(
        rep.max_rel_err < 1e-4,
        "{} at {}",
        rep.max_rel_err,
        rep.worst
    );
    assert!(rep.probes > 0);
}

/// Weighted sum with fixed random coefficients, so every output matters.
fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> crate::tensor::Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n = shape.iter().product();
    let w = tape
        .constant_f64(&shape, &randn(n, &mut rng(seed)))
        .unwrap();
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

#[test]
fn dense_encoder_gradients() {
    let mut store = ParamStore::<f64>::new();
    let enc = DenseEncoder::new(&mut store, "e", 2, &mut rng(1));
    let x = randn(2 * 3 * 7, &mut rng(2));
    assert_gradcheck(&mut store, |tape, s| {
        let v = tape.constant_f64(&[1, 2, 3, 7], &x)?;
        let y = enc.forward(tape, s, v)?;
        probe(tape, y, 3)
    });
}

#[test]
fn cross_fuse_gradients() {
    let mut store = ParamStore::<f64>::new();
    let fuse = CrossFuse::new(&mut store, "x", 2, &mut rng(1));
    let a = randn(2 * 3 * 4, &mut rng(2));
    let e = randn(2 * 3 * 4, &mut rng(3));
    assert_gradcheck(&mut store, |tape, s| {
        let av = tape.constant_f64(&[1, 2, 3, 4], &a)?;
        let ev = tape.constant_f64(&[1, 2, 3, 4], &e)?;
        let y = fuse.forward(tape, s, av, ev)?;
        probe(tape, y, 4)
    });
}

#[test]
fn decoder_gradients() {
    for (out, bins) in [(1, 9), (2, 10)] {
        let mut store = ParamStore::<f64>::new();
        let dec = Decoder::new(&mut store, "d", 2, out, bins, &mut rng(1));
        let fr = (bins - 1) / 2 + 1;
        let x = randn(2 * 3 * fr, &mut rng(2));
        assert_gradcheck(&mut store, |tape, s| {
            let v = tape.constant_f64(&[1, 2, 3, fr], &x)?;
            let y = dec.forward(tape, s, v)?;
            probe(tape, y, 5)
        });
    }
}

#[test]
fn stage2_loss_gradients_with_respect_to_estimates() {
    let mut g = rng(7);
    let (t, f, l) = (3, 4, 10);
    let mut store = ParamStore::<f64>::new();
    let (m, p) = spectral(1, t, f, &mut g);
    let wave = store.add(
        "wave",
        Tensor::from_f64(&[1, l], &randn(l, &mut g)).unwrap(),
    );
    let mag = store.add("mag", Tensor::from_f64(&[1, t, f], &m).unwrap());
    let phase = store.add("phase", Tensor::from_f64(&[1, t, f], &p).unwrap());
    let cw = randn(l, &mut g);
    let (cm, cp) = spectral(1, t, f, &mut g);
    assert_gradcheck(&mut store, |tape, s| {
        let est = SpeechTensors {
            wave: tape.param(s, wave),
            mag: tape.param(s, mag),
            phase: tape.param(s, phase),
        };
        let clean = speech(tape, &cw, &cm, &cp, t, f);
        Ok(stage2_loss(tape, est, clean, &LossWeights::default())?.total)
    });
}

#[test]
fn phase_loss_gradients() {
    let mut g = rng(8);
    let mut store = ParamStore::<f64>::new();
    let (_, p) = spectral(1, 3, 4, &mut g);
    let id = store.add("phase", Tensor::from_f64(&[1, 3, 4], &p).unwrap());
    let (_, c) = spectral(1, 3, 4, &mut g);
    assert_gradcheck(&mut store, |tape, s| {
        let e = tape.param(s, id);
        let cv = tape.constant_f64(&[1, 3, 4], &c)?;
        phase_loss(tape, e, cv)
    });
}

fn full_loss(
    net: &SeNetwork,
    tape: &mut Tape<f64>,
    s: &ParamStore<f64>,
    noisy: &[f64],
    aux: &[f64],
    clean: &[f64],
) -> crate::tensor::Result<Var> {
    let cfg = &net.config;
    let engine = crate::dsp::StftEngine::<f64>::new(&cfg.stft).unwrap();
    let feats = |x: &[f64]| spectral_features(&engine, x);
    let (nf, af, cf) = (feats(noisy), feats(aux), feats(clean));
    let bins = cfg.stft.bins();
    let ni = batch_input(tape, &[&nf], bins)?;
    let ai = batch_input(tape, &[&af], bins)?;
    let ci = batch_input(tape, &[&cf], bins)?;
    let out = net.forward(tape, s, ni, cfg.multimodal.then_some(ai))?;
    let (re, im) = to_complex(tape, out.mag, out.phase, cfg.stft.compression)?;
    let syn = std::sync::Arc::new(engine);
    let wave = crate::dsp::istft_tape(tape, re, im, &syn, noisy.len())?;
    let cw = tape.constant_f64(&[1, clean.len()], clean)?;
    let est = SpeechTensors {
        wave,
        mag: out.mag,
        phase: out.phase,
    };
    let target = SpeechTensors {
        wave: cw,
        mag: ci.mag,
        phase: ci.phase,
    };
    Ok(stage2_loss(tape, est, target, &cfg.weights)?.total)
}

#[test]
fn whole_network_gradients_through_the_composite_loss() {
    let cfg = tiny(true, 1);
    let (net, mut store) = build(&cfg, 12);
    let mut g = rng(13);
    let clean: Vec<f64> = (0..24).map(|i| (i as f64 * 0.7).sin() * 0.5).collect();
    let noisy: Vec<f64> = clean
        .iter()
        .map(|c| c + 0.2 * g.random_range(-1.0..1.0))
        .collect();
    let aux: Vec<f64> = clean.iter().map(|c| c * 0.8).collect();
    assert_gradcheck(&mut store, |tape, s| {
        full_loss(&net, tape, s, &noisy, &aux, &clean)
    });
}

#[test]
fn every_parameter_receives_a_finite_gradient() {
    let cfg = tiny(true, 2);
    let (net, mut store) = build(&cfg, 14);
    let mut g = rng(15);
    let clean = randn(40, &mut g);
    let noisy: Vec<f64> = clean
        .iter()
        .map(|c| c + 0.3 * g.random_range(-1.0..1.0))
        .collect();
    let aux = randn(40, &mut g);
    let mut tape = Tape::new();
    let loss = full_loss(&net, &mut tape, &store, &noisy, &aux, &clean).unwrap();
    tape.backward_into(loss, &mut store).unwrap();
    for (name, t) in store.iter() {
        let grad = t
            .grad
            .as_ref()
            .unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(grad.iter().all(|v| v.is_finite()), "{name}");
        assert!(
            grad.iter().any(|&v| v != 0.0),
            "{name} gradient is identically zero"
        );
    }
}

fn examples(n: usize, len: usize, multimodal: bool) -> Vec<SeExample> {
    (0..n as u64)
        .map(|k| {
            let clean = tone(len, k);
            let mut g = rng(100 + k);
            let noisy = clean
                .iter()
                .map(|c| c + 0.1 * g.random_range(-1.0..1.0))
                .collect();
            SeExample {
                noisy,
                aux: multimodal.then(|| clean.clone()),
                clean,
            }
        })
        .collect()
}

fn toy_train(seed: u64, steps: usize) -> SeTrainConfig {
    SeTrainConfig {
        steps,
        batch_size: 2,
        crop: 800,
        lr: 3e-3,
        seed,
        val_every: 5,
        ..SeTrainConfig::default()
    }
}

#[test]
fn short_training_lowers_loss_and_keeps_best_validation() {
    let cfg = small_audio(true);
    let items = examples(2, 1200, true);
    let mut tr = SeTrainer::<f32>::new(&cfg, toy_train(1, 30)).unwrap();
    let mut seen = 0;
    let rep = tr.run(&items, &items[..1], |_| seen += 1).unwrap();
    assert_eq!(seen, 30);
    assert!(rep.tail_mean(5).unwrap() < rep.first_loss().unwrap());
    let best = rep.best_val.unwrap();
    assert!(rep.validation.iter().all(|&(_, v)| v >= best));
    assert!((tr.validation_loss(&items[..1]).unwrap() - best).abs() < 1e-9 * best.max(1.0));
}

#[test]
fn training_is_deterministic() {
    let cfg = small_audio(false);
    let items = examples(2, 1000, false);
    let run = || {
        let mut tr = SeTrainer::<f32>::new(&cfg, toy_train(4, 4)).unwrap();
        let rep = tr.run(&items, &[], |_| {}).unwrap();
        (
            rep.steps,
            tr.store
                .iter()
                .map(|(_, t)| t.data().to_vec())
                .collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn nan_input_aborts_training() {
    let cfg = small_audio(false);
    let mut items = examples(1, 1000, false);
    items[0].noisy[500] = f64::NAN;
    let mut tc = toy_train(0, 3);
    tc.crop = 1000;
    let mut tr = SeTrainer::<f32>::new(&cfg, tc).unwrap();
    let err = tr.run(&items, &[], |_| {});
    assert!(matches!(err, Err(SeError::Numeric(_))), "{err:?}");
}

#[test]
fn multimodal_training_needs_auxiliary_signals() {
    let cfg = small_audio(true);
    let items = examples(1, 1000, false);
    let mut tr = SeTrainer::<f32>::new(&cfg, toy_train(0, 1)).unwrap();
    assert!(matches!(
        tr.run(&items, &[], |_| {}),
        Err(SeError::Input(_))
    ));
    let uni = small_audio(false);
    let mut tr = SeTrainer::<f32>::new(&uni, toy_train(0, 1)).unwrap();
    assert!(tr.run(&items, &[], |_| {}).is_ok());
}
