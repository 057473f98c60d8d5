#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::Array4;
use scalestyle::backend::{embed_text, Decoder, TransformerWeights};
use scalestyle::{FeatureMap, GenerationConfig, ImageBatch, InterventionConfig};

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

/// Set `SCALESTYLE_BLESS=1` to (re)record golden values instead of checking them.
pub fn blessing() -> bool {
    std::env::var("SCALESTYLE_BLESS").is_ok_and(|v| v == "1")
}

pub fn goldens() -> BTreeMap<String, String> {
    let text =
        std::fs::read_to_string(fixture_path("goldens.json")).unwrap_or_else(|_| "{}".into());
    serde_json::from_str(&text).expect("goldens.json is a flat string map")
}

pub fn check_golden(name: &str, actual: &str) {
    let mut all = goldens();
    if blessing() {
        all.insert(name.to_string(), actual.to_string());
        let json = serde_json::to_string_pretty(&all).unwrap() + "\n";
        std::fs::write(fixture_path("goldens.json"), json).unwrap();
        return;
    }
    let expected = all
        .get(name)
        .unwrap_or_else(|| panic!("no golden value {name:?}; rerun with SCALESTYLE_BLESS=1"));
    assert_eq!(actual, expected, "golden {name} changed");
}

pub fn check_golden_file(name: &str, actual: &[u8]) {
    let path = fixture_path(name);
    if blessing() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read(&path).unwrap_or_else(|_| panic!("missing fixture {name}"));
    assert!(expected == actual, "fixture {name} differs");
}

pub fn small_config(seed: u64) -> GenerationConfig {
    GenerationConfig {
        num_steps: 5,
        scale_schedule: vec![(1, 1), (2, 2), (3, 3), (4, 4), (8, 8)],
        channels: 6,
        full_res: (16, 16),
        upsample_factor: 2,
        seed,
        ..GenerationConfig::default()
    }
}

pub fn small_interventions() -> InterventionConfig {
    InterventionConfig {
        early_steps: [1, 2].into_iter().collect(),
        mid_steps: [3, 4].into_iter().collect(),
        pivot_step: 3,
        ..InterventionConfig::default()
    }
}

pub const PROMPTS: [&str; 4] = ["A Cat", "A Rose", "A Robot", "A Lighthouse"];

pub fn prompts(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| PROMPTS[i % PROMPTS.len()].to_string())
        .collect()
}

/// Align-corners bilinear on one plane, written out longhand.
fn resize_plane(src: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
    if (h, w) == (th, tw) {
        return src.to_vec();
    }
    let tap = |i: usize, n: usize, m: usize| -> (usize, usize, f64) {
        let pos = if m == 1 || n == 1 {
            0.0
        } else {
            (i * (n - 1)) as f64 / (m - 1) as f64
        };
        let lo = (pos.floor() as usize).min(n - 1);
        (lo, (lo + 1).min(n - 1), pos - lo as f64)
    };
    let mut out = vec![0.0; th * tw];
    for y in 0..th {
        let (y0, y1, ty) = tap(y, h, th);
        for x in 0..tw {
            let (x0, x1, tx) = tap(x, w, tw);
            let at = |yy: usize, xx: usize| src[yy * w + xx];
            let top = at(y0, x0) + tx * (at(y0, x1) - at(y0, x0));
            let bottom = at(y1, x0) + tx * (at(y1, x1) - at(y1, x0));
            out[y * tw + x] = top + ty * (bottom - top);
        }
    }
    out
}

pub fn resize(map: &Array4<f64>, target: (usize, usize)) -> Array4<f64> {
    let (n, c, h, w) = map.dim();
    let mut out = Array4::zeros((n, c, target.0, target.1));
    for b in 0..n {
        for ch in 0..c {
            let plane: Vec<f64> = (0..h * w).map(|i| map[[b, ch, i / w, i % w]]).collect();
            let resized = resize_plane(&plane, h, w, target.0, target.1);
            for (i, v) in resized.into_iter().enumerate() {
                out[[b, ch, i / target.1, i % target.1]] = v;
            }
        }
    }
    out
}

/// Plain next-scale loop with no intervention code paths: greedy sign
/// quantization, `F += up(R)`, decode. Shares only the networks with the
/// library.
pub fn vanilla_loop(prompts: &[String], config: &GenerationConfig) -> ImageBatch {
    let weights = TransformerWeights::new(config, Default::default(), config.seed).unwrap();
    let decoder = Decoder::new(config, config.seed).unwrap();
    let embeddings: Vec<_> = prompts
        .iter()
        .map(|p| embed_text(p, config.seed).unwrap())
        .collect();
    let res = config.feature_res();
    let mut acc = Array4::<f64>::zeros((prompts.len(), config.channels, res.0, res.1));
    let sos = weights.sos_features(&embeddings).unwrap();
    for step in 1..=config.num_steps {
        let input = if step == 1 {
            sos.clone()
        } else {
            FeatureMap::new(resize(&acc, config.scale_schedule[step - 1])).unwrap()
        };
        let logits = weights
            .forward_step(&input, &embeddings, step, None)
            .unwrap();
        let residual = logits.view().mapv(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        acc = acc + resize(&residual, res);
    }
    decoder.decode(&FeatureMap::new(acc).unwrap()).unwrap()
}

pub fn hex_of(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
