use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::autodiff::{grad_check, grad_check_store, Array, ParamStore, Tensor};
use crate::interctc::TapAssignment;
use crate::Error;

fn randn(shape: &[usize], seed: u64) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

fn conformer(store: &mut ParamStore, dim: usize, kernel: usize) -> ConformerBlock {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    ConformerBlock::new(&mut Builder::new(store, &mut rng), "conformer", dim, 2, 16, kernel).unwrap()
}

fn ebranch(store: &mut ParamStore, dim: usize, kernel: usize) -> EbranchformerBlock {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    EbranchformerBlock::new(&mut Builder::new(store, &mut rng), "ebranch", dim, 2, 16, 12, kernel).unwrap()
}

#[test]
fn frontend_lengths() {
    assert_eq!(subsampled_len(100), 25);
    assert_eq!(subsampled_len(7), 2);
    assert_eq!(subsampled_len(4), 1);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let fe = Frontend::new(
        &mut Builder::new(&mut store, &mut rng),
        FrontendConfig { input_dim: 3, dim: 8 },
    );
    let ctx = Ctx::inference(&store);
    for t in [4, 7, 100] {
        let x = Tensor::constant(randn(&[1, t, 3], t as u64));
        let (y, m) = fe.forward(&ctx, &x, &SeqMask::full(1, t)).unwrap();
        assert_eq!(y.shape(), &[1, subsampled_len(t), 8]);
        assert_eq!(m.lengths, vec![subsampled_len(t)]);
        assert!(y.value().is_finite());
    }
    let short = Tensor::constant(Array::zeros(&[1, 3, 3]));
    assert!(matches!(
        fe.forward(&ctx, &short, &SeqMask::full(1, 3)),
        Err(Error::InputTooShort { frames: 3, min: 4 })
    ));
}

#[test]
fn frontend_zero_input_is_bias_response() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let fe = Frontend::new(
        &mut Builder::new(&mut store, &mut rng),
        FrontendConfig { input_dim: 4, dim: 6 },
    );
    for id in [fe.conv1.b.unwrap(), fe.conv2.b.unwrap()] {
        store.value_mut(id).data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * i as f64 - 0.2);
    }
    let ctx = Ctx::inference(&store);
    let (y, _) = fe
        .forward(&ctx, &Tensor::constant(Array::zeros(&[1, 16, 4])), &SeqMask::full(1, 16))
        .unwrap();
    let first = y.value().row(0).to_vec();
    for r in 0..4 {
        assert_eq!(y.value().row(r), first.as_slice());
    }
    // Bias-only response: swish(W2ᵀ[s, s] + b2) with s = swish(b1).
    let b1 = store.value(fe.conv1.b.unwrap()).data();
    let s: Vec<f64> = b1.iter().map(|&v| v / (1.0 + (-v).exp())).collect();
    let w2 = store.value(fe.conv2.w);
    let b2 = store.value(fe.conv2.b.unwrap()).data();
    for j in 0..6 {
        let mut z = b2[j];
        for i in 0..12 {
            z += s[i % 6] * w2.data()[i * 6 + j];
        }
        let expect = z / (1.0 + (-z).exp());
        assert!((first[j] - expect).abs() < 1e-12);
    }
}

#[test]
fn blocks_preserve_shape() {
    let mut store = ParamStore::new();
    let c = conformer(&mut store, 8, 3);
    let e = ebranch(&mut store, 8, 3);
    let ctx = Ctx::inference(&store);
    let x = Tensor::constant(randn(&[2, 5, 8], 3));
    let mask = SeqMask::full(2, 5);
    let spec = AttnSpec::default();
    assert_eq!(c.forward(&ctx, &x, &mask, &spec).unwrap().shape(), &[2, 5, 8]);
    assert_eq!(e.forward(&ctx, &x, &mask, &spec).unwrap().shape(), &[2, 5, 8]);
}

#[test]
fn block_input_gradients() {
    let mut store = ParamStore::new();
    let c = conformer(&mut store, 4, 3);
    let e = ebranch(&mut store, 4, 3);
    let ctx = Ctx::inference(&store);
    let w = Tensor::constant(randn(&[1, 4, 4], 10));
    let mask = SeqMask::full(1, 4);
    let spec = AttnSpec::default();
    let x = randn(&[1, 4, 4], 11);
    let err = grad_check(|v| c.forward(&ctx, &v[0], &mask, &spec)?.mul(&w)?.sum(), &[x.clone()], 1e-5).unwrap();
    assert!(err < 1e-4, "conformer {err}");
    let err = grad_check(|v| e.forward(&ctx, &v[0], &mask, &spec)?.mul(&w)?.sum(), &[x], 1e-5).unwrap();
    assert!(err < 1e-4, "ebranchformer {err}");
}

#[test]
fn block_parameter_gradients() {
    let x = Tensor::constant(randn(&[1, 4, 4], 12));
    let w = Tensor::constant(randn(&[1, 4, 4], 13));
    let mask = SeqMask::full(1, 4);
    let spec = AttnSpec::default();
    let mut store = ParamStore::new();
    let c = conformer(&mut store, 4, 3);
    let err = grad_check_store(
        &mut store,
        |s, train| {
            let ctx = if train { Ctx::training(s, 0.0, 0) } else { Ctx::inference(s) };
            c.forward(&ctx, &x, &mask, &spec)?.mul(&w)?.sum()
        },
        usize::MAX,
        1e-5,
        0,
    )
    .unwrap();
    assert!(err < 1e-4, "conformer {err}");
    let mut store = ParamStore::new();
    let e = ebranch(&mut store, 4, 3);
    let err = grad_check_store(
        &mut store,
        |s, train| {
            let ctx = if train { Ctx::training(s, 0.0, 0) } else { Ctx::inference(s) };
            e.forward(&ctx, &x, &mask, &spec)?.mul(&w)?.sum()
        },
        usize::MAX,
        1e-5,
        0,
    )
    .unwrap();
    assert!(err < 1e-4, "ebranchformer {err}");
}

#[test]
fn batch_permutation_commutes() {
    let mut store = ParamStore::new();
    let c = conformer(&mut store, 8, 3);
    let e = ebranch(&mut store, 8, 3);
    let ctx = Ctx::inference(&store);
    let a = randn(&[1, 6, 8], 20);
    let b = randn(&[1, 6, 8], 21);
    let ab = Tensor::concat(&[&Tensor::constant(a.clone()), &Tensor::constant(b.clone())], 0).unwrap();
    let ba = Tensor::concat(&[&Tensor::constant(b), &Tensor::constant(a)], 0).unwrap();
    let mask = SeqMask::full(2, 6);
    let spec = AttnSpec::default();
    let run_c = |x: &Tensor| c.forward(&ctx, x, &mask, &spec).unwrap();
    let run_e = |x: &Tensor| e.forward(&ctx, x, &mask, &spec).unwrap();
    let runs: [&dyn Fn(&Tensor) -> Tensor; 2] = [&run_c, &run_e];
    for f in runs {
        let y1 = f(&ab);
        let y2 = f(&ba);
        let half = 6 * 8;
        assert_eq!(&y1.data()[..half], &y2.data()[half..]);
        assert_eq!(&y1.data()[half..], &y2.data()[..half]);
    }
}

#[test]
fn zeroed_cgmlp_leaves_attention_merge() {
    let mut store = ParamStore::new();
    let e = ebranch(&mut store, 8, 3);
    store.value_mut(e.cgmlp.down.w).data_mut().fill(0.0);
    store.value_mut(e.cgmlp.down.b.unwrap()).data_mut().fill(0.0);
    let ctx = Ctx::inference(&store);
    let x = Tensor::constant(randn(&[1, 5, 8], 30));
    let mask = SeqMask::full(1, 5);
    let spec = AttnSpec::default();
    let h = x.add(&e.ff1.forward(&ctx, &x).unwrap().scale(0.5).unwrap()).unwrap();
    let (global, local) = e.branches(&ctx, &h, &mask, &spec).unwrap();
    assert!(local.data().iter().all(|&v| v == 0.0));
    let zero = Tensor::constant(Array::zeros(&[1, 5, 8]));
    let merged = h.add(&e.merge(&ctx, &global, &zero, &mask).unwrap()).unwrap();
    let merged = merged.add(&e.ff2.forward(&ctx, &merged).unwrap().scale(0.5).unwrap()).unwrap();
    let expect = e.out_norm.forward(&ctx, &merged).unwrap();
    let got = e.forward(&ctx, &x, &mask, &spec).unwrap();
    assert_eq!(got.data(), expect.data());
}

fn encoder(variant: EncoderVariant, taps: &TapAssignment) -> (ParamStore, Frontend, Encoder) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut b = Builder::new(&mut store, &mut rng);
    let fe = Frontend::new(&mut b, FrontendConfig { input_dim: 3, dim: 8 });
    let cfg = EncoderConfig {
        variant,
        num_blocks: 4,
        dim: 8,
        heads: 2,
        ff_units: 16,
        cgmlp_units: 12,
        kernel: 3,
        ..Default::default()
    };
    let enc = Encoder::new(&mut b, cfg, taps, 5).unwrap();
    (store, fe, enc)
}

#[test]
fn padding_frames_do_not_leak() {
    let taps = TapAssignment::from_layers(&[2], &[1]);
    for variant in [EncoderVariant::ConformerLite, EncoderVariant::EbranchformerLite] {
        let (store, fe, enc) = encoder(variant, &taps);
        let ctx = Ctx::inference(&store);
        let x = randn(&[1, 22, 3], 50);
        let (h, m) = fe.forward(&ctx, &Tensor::constant(x.clone()), &SeqMask::full(1, 22)).unwrap();
        let alone = enc.forward(&ctx, &h, &m).unwrap();
        // The same utterance padded to 37 frames next to a longer one.
        let mut data = x.data().to_vec();
        data.extend(std::iter::repeat_n(0.0, 15 * 3));
        data.extend(randn(&[1, 37, 3], 51).data());
        let batch = Tensor::constant(Array::new(vec![2, 37, 3], data).unwrap());
        let (h, m) = fe.forward(&ctx, &batch, &SeqMask::new(vec![22, 37], 37)).unwrap();
        let padded = enc.forward(&ctx, &h, &m).unwrap();
        let n = alone.hidden.shape()[1];
        let d = 8;
        let diff = max_diff(alone.hidden.data(), &padded.hidden.data()[..n * d]);
        assert!(diff < 1e-6, "{variant:?}: {diff}");
        for (a, p) in alone.taps.iter().zip(&padded.taps) {
            for ((_, la), (_, lp)) in a.log_probs.iter().zip(&p.log_probs) {
                assert!(max_diff(la.data(), &lp.data()[..n * 5]) < 1e-6);
            }
        }
    }
}

#[test]
fn taps_are_reported_in_layer_order() {
    let (store, _, enc) = encoder(EncoderVariant::ConformerLite, &TapAssignment::from_layers(&[3], &[1, 2]));
    let ctx = Ctx::inference(&store);
    let out = enc
        .forward(&ctx, &Tensor::constant(randn(&[1, 3, 8], 60)), &SeqMask::full(1, 3))
        .unwrap();
    assert_eq!(out.taps.iter().map(|t| t.layer).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert_eq!(out.taps[2].log_probs.len(), 2);
    for tap in &out.taps {
        for (_, lp) in &tap.log_probs {
            for r in 0..lp.value().rows() {
                let s: f64 = lp.value().row(r).iter().map(|v| v.exp()).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn no_taps_is_a_plain_block_stack() {
    let (store, _, enc) = encoder(EncoderVariant::ConformerLite, &TapAssignment::none());
    let ctx = Ctx::inference(&store);
    let x = Tensor::constant(randn(&[1, 4, 8], 61));
    let mask = SeqMask::full(1, 4);
    let out = enc.forward(&ctx, &x, &mask).unwrap();
    assert!(out.taps.is_empty());
    let mut h = x.add(&sinusoidal_positions(0, 4, 8)).unwrap();
    for b in &enc.blocks {
        h = b.forward(&ctx, &h, &mask, &AttnSpec::default()).unwrap();
    }
    assert_eq!(out.hidden.data(), h.data());
}

#[test]
fn final_layer_cannot_be_tapped() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = EncoderConfig {
        num_blocks: 4,
        dim: 8,
        heads: 2,
        ..Default::default()
    };
    let err = Encoder::new(
        &mut Builder::new(&mut store, &mut rng),
        cfg,
        &TapAssignment::from_layers(&[4], &[]),
        5,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn encoder_config_validation() {
    let bad_heads = EncoderConfig {
        heads: 3,
        ..Default::default()
    };
    assert!(matches!(bad_heads.validate(), Err(Error::Config(_))));
    let even_kernel = EncoderConfig {
        kernel: 4,
        ..Default::default()
    };
    assert!(even_kernel.validate().is_err());
    EncoderConfig::default().validate().unwrap();
    let json = serde_json::to_string(&EncoderConfig::default()).unwrap();
    assert!(json.contains("\"conformer_lite\""));
}

#[test]
fn single_frame_attention_weights_are_one() {
    let (store, _, enc) = encoder(EncoderVariant::ConformerLite, &TapAssignment::none());
    let ctx = Ctx::inference(&store);
    let out = enc
        .forward(&ctx, &Tensor::constant(randn(&[1, 1, 8], 62)), &SeqMask::full(1, 1))
        .unwrap();
    assert_eq!(out.hidden.shape(), &[1, 1, 8]);
    assert!(out.hidden.value().is_finite());
}

fn decoder(cross: bool) -> (ParamStore, TransformerDecoder) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let cfg = DecoderConfig {
        num_blocks: 2,
        dim: 8,
        heads: 2,
        ff_units: 16,
        dropout: 0.0,
    };
    let dec = TransformerDecoder::new(&mut Builder::new(&mut store, &mut rng), "dec", cfg, 6, cross).unwrap();
    (store, dec)
}

#[test]
fn decoder_outputs_are_normalized_and_causal() {
    let (store, dec) = decoder(true);
    let ctx = Ctx::inference(&store);
    let mem = Tensor::constant(randn(&[1, 4, 8], 71));
    let a = dec.forward(&ctx, &[5, 1, 2, 3], 1, 4, Some((&mem, &[4]))).unwrap();
    let b = dec.forward(&ctx, &[5, 1, 4, 0], 1, 4, Some((&mem, &[4]))).unwrap();
    for r in 0..4 {
        let s: f64 = a.value().row(r).iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
    assert_eq!(&a.data()[..2 * 6], &b.data()[..2 * 6]);
    assert_ne!(&a.data()[2 * 6..3 * 6], &b.data()[2 * 6..3 * 6]);
    // Recomputing on a shorter prefix leaves earlier rows unchanged.
    let short = dec.forward(&ctx, &[5, 1], 1, 2, Some((&mem, &[4]))).unwrap();
    assert_eq!(short.data(), &a.data()[..2 * 6]);
    assert!(matches!(
        dec.forward(&ctx, &[5, 6], 1, 2, Some((&mem, &[4]))),
        Err(Error::Vocabulary(_))
    ));
}

#[test]
fn decoder_gradient_check() {
    let (mut store, dec) = decoder(true);
    let mem = Tensor::constant(randn(&[1, 3, 8], 72));
    let err = grad_check_store(
        &mut store,
        |s, train| {
            let ctx = if train { Ctx::training(s, 0.0, 0) } else { Ctx::inference(s) };
            let lp = dec.forward(&ctx, &[5, 2, 1], 1, 3, Some((&mem, &[3])))?;
            let pick = Tensor::constant(randn(&[1, 3, 6], 73));
            lp.mul(&pick)?.sum()
        },
        400,
        1e-5,
        1,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}
