mod common;

use common::*;
use ndarray::Array4;
use scalestyle::metrics::{cosine, describe, FilterBank, MetricSuite};
use scalestyle::rng::Key;
use scalestyle::ImageBatch;

/// Smooth periodic texture from a few seeded sinusoids per channel.
fn texture(seed: u64, side: usize) -> Array4<f64> {
    let key = Key::root(seed).named("texture");
    let waves: Vec<(f64, f64, f64)> = (0..9)
        .map(|i| {
            let k = key.derive(i);
            let fx = (1 + (k.derive(0).value() % 4)) as f64;
            let fy = (1 + (k.derive(1).value() % 4)) as f64;
            (fx, fy, k.derive(2).uniform() * std::f64::consts::TAU)
        })
        .collect();
    Array4::from_shape_fn((1, 3, side, side), |(_, c, y, x)| {
        let mut v = 0.0;
        for (fx, fy, phase) in &waves[c * 3..c * 3 + 3] {
            let arg = std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) / side as f64 + phase;
            v += arg.sin();
        }
        0.5 + v / 6.0
    })
}

fn shifted(img: &Array4<f64>, dy: usize, dx: usize) -> Array4<f64> {
    let (_, c, h, w) = img.dim();
    Array4::from_shape_fn((1, c, h, w), |(_, ch, y, x)| {
        img[[0, ch, (y + dy) % h, (x + dx) % w]]
    })
}

fn pixel_permuted(img: &Array4<f64>, seed: u64) -> Array4<f64> {
    let (_, c, h, w) = img.dim();
    let mut order: Vec<usize> = (0..h * w).collect();
    let key = Key::root(seed).named("permute");
    for i in (1..order.len()).rev() {
        let j = (key.derive(i as u64).value() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
    Array4::from_shape_fn((1, c, h, w), |(_, ch, y, x)| {
        let src = order[y * w + x];
        img[[0, ch, src / w, src % w]]
    })
}

#[test]
fn translation_keeps_style_closer_than_pixel_shuffling() {
    let bank = FilterBank::new(scalestyle::metrics::DEFAULT_METRIC_SEED);
    for seed in 0..10 {
        let raw = texture(seed, 48);
        let original = ImageBatch::new(raw.clone()).unwrap();
        let moved = ImageBatch::new(shifted(&raw, 7, 13)).unwrap();
        let shuffled = ImageBatch::new(pixel_permuted(&raw, seed)).unwrap();
        let d0 = describe(original.image(0), &bank).unwrap();
        let d1 = describe(moved.image(0), &bank).unwrap();
        let d2 = describe(shuffled.image(0), &bank).unwrap();
        let translated = cosine(&d0.gram_vector, &d1.gram_vector);
        let permuted = cosine(&d0.gram_vector, &d2.gram_vector);
        assert!(
            translated > permuted,
            "seed {seed}: {translated} vs {permuted}"
        );
    }
}

#[test]
fn histogram_matches_pixel_counting() {
    let img = texture(3, 20);
    let batch = ImageBatch::new(img.clone()).unwrap();
    let suite = MetricSuite::default();
    let hist = &suite.histograms(&batch).unwrap()[0];
    for c in 0..3 {
        let mut counts = [0usize; 32];
        for y in 0..20 {
            for x in 0..20 {
                let v = img[[0, c, y, x]];
                let mut b = 0;
                while b < 31 && v >= (b + 1) as f64 / 32.0 {
                    b += 1;
                }
                counts[b] += 1;
            }
        }
        for (b, &n) in counts.iter().enumerate() {
            assert_eq!(hist.channel(c)[b], n as f64 / 400.0, "channel {c} bin {b}");
        }
    }
}

#[test]
fn object_relevancy_golden() {
    let images = vanilla_loop(&prompts(3), &small_config(7));
    let value = MetricSuite::default()
        .object_relevancy(&images, &prompts(3))
        .unwrap();
    check_golden("object_relevancy_small_seed7", &format!("{value:?}"));
}

#[test]
fn object_relevancy_ignores_batch_order() {
    let images = vanilla_loop(&prompts(3), &small_config(1));
    let suite = MetricSuite::default();
    let p = prompts(3);
    let a = suite.object_relevancy(&images, &p).unwrap();
    let reordered = images.select(&[2, 0, 1]);
    let q = vec![p[2].clone(), p[0].clone(), p[1].clone()];
    let b = suite.object_relevancy(&reordered, &q).unwrap();
    assert!((a - b).abs() < 1e-15);
}
