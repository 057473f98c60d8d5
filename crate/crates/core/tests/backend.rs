mod common;

use common::*;
use ndarray::{Array2, Array4};
use scalestyle::backend::{
    embed_text, sample_residual, AttentionHook, Decoder, IdentityHook, TransformerWeights,
};
use scalestyle::pipeline::BinaryQuantizer;
use scalestyle::rng::Key;
use scalestyle::{FeatureMap, GenerationConfig, SamplingMode, Shape};

fn weights(seed: u64) -> TransformerWeights {
    TransformerWeights::new(&GenerationConfig::default(), Default::default(), seed).unwrap()
}

fn seeded_map(shape: Shape, seed: u64) -> FeatureMap {
    let key = Key::root(seed).named("test-input");
    let values = (0..shape.batch * shape.channels * shape.height * shape.width)
        .map(|i| 2.0 * key.derive(i as u64).uniform() - 1.0)
        .collect();
    FeatureMap::from_shape_vec(shape, values).unwrap()
}

#[test]
fn text_embedding_golden() {
    check_golden(
        "embed_a_cat_seed7",
        &embed_text("A Cat", 7).unwrap().checksum(),
    );
}

#[test]
fn sos_golden() {
    let w = weights(7);
    let prompts = [
        embed_text("A Cat", 7).unwrap(),
        embed_text("A Rose", 7).unwrap(),
    ];
    check_golden(
        "sos_cat_rose_seed7",
        &w.sos_features(&prompts).unwrap().checksum(),
    );
}

#[test]
fn forward_step_golden() {
    let w = weights(7);
    let prompts = [
        embed_text("A Cat", 7).unwrap(),
        embed_text("A Rose", 7).unwrap(),
    ];
    let input = seeded_map(Shape::new(2, 16, 4, 4), 1);
    let logits = w.forward_step(&input, &prompts, 4, None).unwrap();
    check_golden("forward_step4_seed7", &logits.checksum());
}

#[test]
fn decode_golden() {
    let config = GenerationConfig::default();
    let decoder = Decoder::new(&config, 7).unwrap();
    let features = seeded_map(Shape::new(1, 16, 32, 32), 2);
    check_golden(
        "decode_seed7",
        &decoder.decode(&features).unwrap().checksum(),
    );
}

#[test]
fn vanilla_images_golden() {
    let images = vanilla_loop(&prompts(2), &small_config(7));
    let bytes: Vec<u8> = (0..images.len()).flat_map(|n| images.to_rgb8(n)).collect();
    check_golden("vanilla_small_seed7_rgb8", &hex_of(&bytes));
}

struct ZeroValues;

impl AttentionHook for ZeroValues {
    fn transform_values(&self, _layer: usize, values: Array4<f64>) -> Array4<f64> {
        Array4::zeros(values.raw_dim())
    }
}

#[test]
fn zeroing_hook_equals_zero_value_weights() {
    let w = weights(3);
    let arch = w.architecture();
    let mut zeroed = w.clone();
    for l in 0..arch.layers {
        zeroed = zeroed
            .with_tensor(
                &format!("layer{l}.w_v"),
                Array2::zeros((arch.d_model, arch.d_model)),
            )
            .unwrap();
    }
    let prompts = [
        embed_text("A Cat", 3).unwrap(),
        embed_text("A Rose", 3).unwrap(),
    ];
    let input = seeded_map(Shape::new(2, 16, 5, 5), 4);
    let hooked = w
        .forward_step(&input, &prompts, 5, Some(&ZeroValues))
        .unwrap();
    let direct = zeroed.forward_step(&input, &prompts, 5, None).unwrap();
    assert_eq!(hooked, direct);
    let plain = w
        .forward_step(&input, &prompts, 5, Some(&IdentityHook))
        .unwrap();
    assert_eq!(plain, w.forward_step(&input, &prompts, 5, None).unwrap());
    assert_ne!(plain, hooked);
}

#[test]
fn identical_rows_give_identical_logits() {
    let w = weights(5);
    let row = seeded_map(Shape::new(1, 16, 3, 3), 6);
    let input = FeatureMap::stack(&[row.clone(), row.clone(), row]).unwrap();
    let e = embed_text("A Cat", 5).unwrap();
    let logits = w
        .forward_step(&input, &[e.clone(), e.clone(), e], 3, None)
        .unwrap();
    assert!(logits.rows_identical());
}

#[test]
fn batch_rows_never_mix() {
    let w = weights(6);
    let a = seeded_map(Shape::new(1, 16, 6, 6), 10);
    let b = seeded_map(Shape::new(1, 16, 6, 6), 11);
    let c = seeded_map(Shape::new(1, 16, 6, 6), 12);
    let ea = embed_text("A Cat", 6).unwrap();
    let eb = embed_text("A Rose is red", 6).unwrap();
    let ec = embed_text("A Robot", 6).unwrap();
    let abc = w
        .forward_step(
            &FeatureMap::stack(&[a.clone(), b.clone(), c.clone()]).unwrap(),
            &[ea.clone(), eb.clone(), ec.clone()],
            6,
            None,
        )
        .unwrap();
    let cab = w
        .forward_step(
            &FeatureMap::stack(&[c, a.clone(), b]).unwrap(),
            &[ec, ea.clone(), eb],
            6,
            None,
        )
        .unwrap();
    for (i, j) in [(0, 1), (1, 2), (2, 0)] {
        assert_eq!(
            abc.batch_slice(i + 1).unwrap(),
            cab.batch_slice(j + 1).unwrap()
        );
    }
    let alone = w.forward_step(&a, &[ea], 6, None).unwrap();
    assert_eq!(alone, abc.batch_slice(1).unwrap());
}

#[test]
fn forward_step_rejects_wrong_shapes() {
    let w = weights(1);
    let e = embed_text("A Cat", 1).unwrap();
    let input = seeded_map(Shape::new(1, 16, 4, 4), 0);
    assert!(w
        .forward_step(&input, std::slice::from_ref(&e), 3, None)
        .is_err());
    assert!(w
        .forward_step(&input, std::slice::from_ref(&e), 13, None)
        .is_err());
    assert!(w.forward_step(&input, &[e.clone(), e], 4, None).is_err());
}

#[test]
fn near_zero_temperature_matches_greedy() {
    let quantizer = BinaryQuantizer::new(16, 1.0).unwrap();
    let mut logits = seeded_map(Shape::new(4, 16, 13, 13), 99);
    // Keep every logit at least 1e-3 away from zero.
    let nudged = logits
        .view()
        .mapv(|v| if v.abs() < 1e-3 { v.signum() * 1e-3 } else { v });
    logits = FeatureMap::new(nudged).unwrap();
    assert!(logits.as_slice().len() >= 10_000);
    let greedy = sample_residual(&logits, SamplingMode::Greedy, 1.0, 0, 7, &quantizer).unwrap();
    let cold = sample_residual(
        &logits,
        SamplingMode::SeededStochastic,
        1e-6,
        0,
        7,
        &quantizer,
    )
    .unwrap();
    assert_eq!(greedy, cold);
}

#[test]
fn stochastic_sampling_rejects_bad_temperature() {
    let quantizer = BinaryQuantizer::new(16, 1.0).unwrap();
    let logits = seeded_map(Shape::new(1, 16, 2, 2), 0);
    for t in [0.0, -1.0, f64::NAN] {
        assert!(
            sample_residual(&logits, SamplingMode::SeededStochastic, t, 0, 2, &quantizer).is_err()
        );
    }
}

#[test]
fn stochastic_bit_rate_tracks_sigmoid() {
    let quantizer = BinaryQuantizer::new(16, 1.0).unwrap();
    let logits = FeatureMap::filled(Shape::new(4, 16, 16, 16), 0.5).unwrap();
    let r = sample_residual(
        &logits,
        SamplingMode::SeededStochastic,
        1.0,
        3,
        2,
        &quantizer,
    )
    .unwrap();
    let plus = r.map().as_slice().iter().filter(|&&v| v > 0.0).count() as f64;
    let rate = plus / r.map().as_slice().len() as f64;
    let expected = 1.0 / (1.0 + (-0.5f64).exp());
    // 16384 draws: standard error is about 0.0037.
    assert!((rate - expected).abs() < 0.02, "rate {rate} vs {expected}");
}

#[test]
fn weights_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("weights.bin");
    let w = weights(12);
    w.save(&path).unwrap();
    let back = TransformerWeights::load(&path).unwrap();
    assert_eq!(back.tensors(), w.tensors());
    assert_eq!(back.architecture(), w.architecture());

    std::fs::write(&path, b"short").unwrap();
    assert!(TransformerWeights::load(&path).is_err());
}

#[test]
fn decoder_constant_features() {
    let config = GenerationConfig::default();
    let decoder = Decoder::new(&config, 4).unwrap();
    let images = decoder
        .decode(&FeatureMap::zeros(Shape::new(2, 16, 32, 32)).unwrap())
        .unwrap();
    assert_eq!((images.height(), images.width()), (128, 128));
    for c in 0..3 {
        let expected = 1.0 / (1.0 + (-decoder.bias()[c]).exp());
        let plane = images.image(0).index_axis(ndarray::Axis(0), c).to_owned();
        assert!(plane.iter().all(|&v| (v - expected).abs() < 1e-15));
    }
    assert!(decoder
        .decode(&FeatureMap::zeros(Shape::new(1, 16, 16, 16)).unwrap())
        .is_err());
}
