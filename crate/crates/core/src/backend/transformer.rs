//! A small pre-norm transformer predicting residual-bit logits for one scale.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linalg::{gelu, layer_norm, matmul, matmul_t, softmax_rows};
use super::{AttentionHook, AttentionState};
use crate::config::GenerationConfig;
use crate::error::{Error, Result};
use crate::rng::Key;
use crate::types::{FeatureMap, PromptEmbedding, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub text_dim: usize,
    pub mlp_hidden: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            layers: 2,
            heads: 2,
            d_model: 32,
            text_dim: super::text::DEFAULT_TEXT_DIM,
            mlp_hidden: 64,
        }
    }
}

impl Architecture {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    fn validate(&self) -> Result<()> {
        if self.layers == 0
            || self.heads == 0
            || self.d_model == 0
            || self.text_dim == 0
            || self.mlp_hidden == 0
        {
            return Err(Error::Config(format!(
                "architecture has a zero size: {self:?}"
            )));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerWeights {
    w_q: Array2<f64>,
    w_k: Array2<f64>,
    w_v: Array2<f64>,
    w_o: Array2<f64>,
    cross_q: Array2<f64>,
    cross_k: Array2<f64>,
    cross_v: Array2<f64>,
    cross_o: Array2<f64>,
    mlp_in: Array2<f64>,
    mlp_out: Array2<f64>,
}

const LAYER_TENSORS: [&str; 10] = [
    "w_q", "w_k", "w_v", "w_o", "cross_q", "cross_k", "cross_v", "cross_o", "mlp_in", "mlp_out",
];

impl LayerWeights {
    fn tensors(&self) -> [&Array2<f64>; 10] {
        [
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.cross_q,
            &self.cross_k,
            &self.cross_v,
            &self.cross_o,
            &self.mlp_in,
            &self.mlp_out,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Array2<f64>; 10] {
        [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.cross_q,
            &mut self.cross_k,
            &mut self.cross_v,
            &mut self.cross_o,
            &mut self.mlp_in,
            &mut self.mlp_out,
        ]
    }
}

/// All transformer parameters, fully determined by the seed, the
/// architecture and the generation config's channels and scale schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerWeights {
    arch: Architecture,
    channels: usize,
    scales: Vec<(usize, usize)>,
    input_proj: Array2<f64>,
    sos_proj: Array2<f64>,
    scale_embed: Array2<f64>,
    positional: Vec<Array2<f64>>,
    layers: Vec<LayerWeights>,
    head: Array2<f64>,
}

impl TransformerWeights {
    pub fn new(config: &GenerationConfig, arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        if config.channels == 0 || config.scale_schedule.is_empty() {
            return Err(Error::Config(
                "weights need channels and a scale schedule".into(),
            ));
        }
        let d = arch.d_model;
        let bound = 1.0 / (d as f64).sqrt();
        let root = Key::root(seed).named("transformer");
        let init = |name: &str, rows: usize, cols: usize| -> Array2<f64> {
            let mut stream = root.named(name).stream();
            Array2::from_shape_simple_fn((rows, cols), || stream.random_range(-bound..bound))
        };
        let (h1, w1) = config.scale_schedule[0];
        let layers = (0..arch.layers)
            .map(|l| {
                let name = |t: &str| format!("layer{l}.{t}");
                LayerWeights {
                    w_q: init(&name("w_q"), d, d),
                    w_k: init(&name("w_k"), d, d),
                    w_v: init(&name("w_v"), d, d),
                    w_o: init(&name("w_o"), d, d),
                    cross_q: init(&name("cross_q"), d, d),
                    cross_k: init(&name("cross_k"), arch.text_dim, d),
                    cross_v: init(&name("cross_v"), arch.text_dim, d),
                    cross_o: init(&name("cross_o"), d, d),
                    mlp_in: init(&name("mlp_in"), d, arch.mlp_hidden),
                    mlp_out: init(&name("mlp_out"), arch.mlp_hidden, d),
                }
            })
            .collect();
        Ok(TransformerWeights {
            arch,
            channels: config.channels,
            scales: config.scale_schedule.clone(),
            input_proj: init("input_proj", config.channels, d),
            sos_proj: init("sos_proj", arch.text_dim, config.channels * h1 * w1),
            scale_embed: init("scale_embed", config.scale_schedule.len(), d),
            positional: config
                .scale_schedule
                .iter()
                .enumerate()
                .map(|(i, &(h, w))| init(&format!("positional{i}"), h * w, d))
                .collect(),
            layers,
            head: init("head", d, config.channels),
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn scales(&self) -> &[(usize, usize)] {
        &self.scales
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out: Vec<(String, &Array2<f64>)> = vec![
            ("input_proj".into(), &self.input_proj),
            ("sos_proj".into(), &self.sos_proj),
            ("scale_embed".into(), &self.scale_embed),
        ];
        for (i, p) in self.positional.iter().enumerate() {
            out.push((format!("positional{i}"), p));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_TENSORS.iter().zip(layer.tensors()) {
                out.push((format!("layer{l}.{name}"), t));
            }
        }
        out.push(("head".into(), &self.head));
        out
    }

    fn tensor_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        match name {
            "input_proj" => return Some(&mut self.input_proj),
            "sos_proj" => return Some(&mut self.sos_proj),
            "scale_embed" => return Some(&mut self.scale_embed),
            "head" => return Some(&mut self.head),
            _ => {}
        }
        if let Some(i) = name.strip_prefix("positional") {
            return i
                .parse::<usize>()
                .ok()
                .and_then(|i| self.positional.get_mut(i));
        }
        let (layer, tensor) = name.strip_prefix("layer")?.split_once('.')?;
        let layer = self.layers.get_mut(layer.parse::<usize>().ok()?)?;
        let idx = LAYER_TENSORS.iter().position(|t| *t == tensor)?;
        layer.tensors_mut().into_iter().nth(idx)
    }

    /// Copy with one tensor replaced (same shape, finite values).
    pub fn with_tensor(&self, name: &str, value: Array2<f64>) -> Result<Self> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(format!("tensor {name} has non-finite values")));
        }
        let mut out = self.clone();
        let slot = out
            .tensor_mut(name)
            .ok_or_else(|| Error::Input(format!("unknown tensor {name}")))?;
        if slot.dim() != value.dim() {
            return Err(Error::Shape(format!(
                "tensor {name} is {:?}, got {:?}",
                slot.dim(),
                value.dim()
            )));
        }
        *slot = value;
        Ok(out)
    }

    /// Start-of-sequence features `(N, C, h_1, w_1)`: each prompt's mean
    /// embedding through a fixed projection.
    pub fn sos_features(&self, prompts: &[PromptEmbedding]) -> Result<FeatureMap> {
        if prompts.is_empty() {
            return Err(Error::Input("no prompts".into()));
        }
        let (h1, w1) = self.scales[0];
        let mut values = Vec::with_capacity(prompts.len() * self.channels * h1 * w1);
        for p in prompts {
            self.check_text_dim(p)?;
            let mean = p.mean();
            let row = mean.view().insert_axis(Axis(0));
            values.extend(matmul(row, self.sos_proj.view()).iter());
        }
        FeatureMap::from_shape_vec(Shape::new(prompts.len(), self.channels, h1, w1), values)
    }

    fn check_text_dim(&self, p: &PromptEmbedding) -> Result<()> {
        if p.dim() != self.arch.text_dim {
            return Err(Error::Shape(format!(
                "prompt embedding dim {} != text dim {}",
                p.dim(),
                self.arch.text_dim
            )));
        }
        Ok(())
    }

    /// One next-scale prediction: features at step `step`'s token grid in,
    /// residual-bit logits `(N, C, h_s, w_s)` out.
    ///
    /// Self-attention is per image; `hook`, when present, sees every
    /// layer's value tensor for the whole batch before attention uses it.
    pub fn forward_step(
        &self,
        features: &FeatureMap,
        prompts: &[PromptEmbedding],
        step: usize,
        hook: Option<&dyn AttentionHook>,
    ) -> Result<FeatureMap> {
        let (h, w) = step
            .checked_sub(1)
            .and_then(|i| self.scales.get(i))
            .copied()
            .ok_or_else(|| Error::range("step", step, self.scales.len()))?;
        let shape = features.shape();
        if shape.channels != self.channels || shape.spatial() != (h, w) {
            return Err(Error::Shape(format!(
                "step {step} expects (·, {}, {h}, {w}) features, got {:?}",
                self.channels,
                (shape.batch, shape.channels, shape.height, shape.width)
            )));
        }
        if prompts.len() != shape.batch {
            return Err(Error::Shape(format!(
                "{} prompts for a batch of {}",
                prompts.len(),
                shape.batch
            )));
        }
        for p in prompts {
            self.check_text_dim(p)?;
        }

        let tokens = h * w;
        let scale_row = self.scale_embed.row(step - 1);
        let positional = &self.positional[step - 1];
        let mut states: Vec<Array2<f64>> = (0..shape.batch)
            .map(|n| {
                let img = features.row(n);
                let tok =
                    Array2::from_shape_fn((tokens, self.channels), |(t, c)| img[[c, t / w, t % w]]);
                let mut x = matmul(tok.view(), self.input_proj.view());
                x += positional;
                x += &scale_row;
                x
            })
            .collect();

        for (l, layer) in self.layers.iter().enumerate() {
            self.self_attention(l, layer, &mut states, hook);
            for (x, prompt) in states.iter_mut().zip(prompts) {
                let normed = layer_norm(x);
                let q = matmul(normed.view(), layer.cross_q.view());
                let k = matmul(prompt.embedding().view(), layer.cross_k.view());
                let v = matmul(prompt.embedding().view(), layer.cross_v.view());
                let attended = self.multi_head(&q, &k, &v);
                *x += &matmul(attended.view(), layer.cross_o.view());

                let normed = layer_norm(x);
                let hidden = matmul(normed.view(), layer.mlp_in.view()).mapv(gelu);
                *x += &matmul(hidden.view(), layer.mlp_out.view());
            }
        }

        let mut logits = Array4::zeros((shape.batch, self.channels, h, w));
        for (n, x) in states.iter().enumerate() {
            let out = matmul(layer_norm(x).view(), self.head.view());
            for t in 0..tokens {
                for c in 0..self.channels {
                    logits[[n, c, t / w, t % w]] = out[[t, c]];
                }
            }
        }
        FeatureMap::from_array_checked(logits, step, "logits")
    }

    fn self_attention(
        &self,
        layer_index: usize,
        layer: &LayerWeights,
        states: &mut [Array2<f64>],
        hook: Option<&dyn AttentionHook>,
    ) {
        let heads = self.arch.heads;
        let hd = self.arch.head_dim();
        let tokens = states[0].nrows();
        let normed: Vec<Array2<f64>> = states.iter().map(layer_norm).collect();
        let split = |w: &Array2<f64>| -> Array4<f64> {
            let mut out = Array4::zeros((states.len(), heads, tokens, hd));
            for (n, x) in normed.iter().enumerate() {
                let proj = matmul(x.view(), w.view());
                for head in 0..heads {
                    out.slice_mut(s![n, head, .., ..])
                        .assign(&proj.slice(s![.., head * hd..(head + 1) * hd]));
                }
            }
            out
        };
        let mut state = AttentionState {
            q: split(&layer.w_q),
            k: split(&layer.w_k),
            v: split(&layer.w_v),
        };
        if let Some(hook) = hook {
            state.v = hook.transform_values(layer_index, state.v);
        }
        let scale = 1.0 / (hd as f64).sqrt();
        for (n, x) in states.iter_mut().enumerate() {
            let mut merged = Array2::zeros((tokens, self.arch.d_model));
            for head in 0..heads {
                let q = state.q.slice(s![n, head, .., ..]);
                let k = state.k.slice(s![n, head, .., ..]);
                let v = state.v.slice(s![n, head, .., ..]);
                let mut scores = matmul_t(q, k);
                scores.mapv_inplace(|v| v * scale);
                softmax_rows(&mut scores);
                merged
                    .slice_mut(s![.., head * hd..(head + 1) * hd])
                    .assign(&matmul(scores.view(), v));
            }
            *x += &matmul(merged.view(), layer.w_o.view());
        }
    }

    fn multi_head(&self, q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Array2<f64> {
        let hd = self.arch.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = Array2::zeros((q.nrows(), self.arch.d_model));
        for head in 0..self.arch.heads {
            let cols = s![.., head * hd..(head + 1) * hd];
            let mut scores = matmul_t(q.slice(cols), k.slice(cols));
            scores.mapv_inplace(|v| v * scale);
            softmax_rows(&mut scores);
            out.slice_mut(cols)
                .assign(&matmul(scores.view(), v.slice(cols)));
        }
        out
    }

    /// Writes `path` (little-endian `f64` values, tensors back to back) and a
    /// JSON sidecar `path.json` describing names, shapes and offsets.
    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e: std::io::Error| Error::WeightFile(format!("{}: {e}", path.display()));
        let mut entries = Vec::new();
        let mut bytes = Vec::new();
        let mut offset = 0;
        for (name, t) in self.tensors() {
            entries.push(TensorEntry {
                name,
                shape: [t.nrows(), t.ncols()],
                offset,
            });
            offset += t.len();
            for v in t.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sidecar = WeightSidecar {
            architecture: self.arch,
            channels: self.channels,
            scales: self.scales.clone(),
            dtype: "f64-le".into(),
            tensors: entries,
        };
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(io)?;
        let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        fs::write(sidecar_path(path), json).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::WeightFile(format!("{}: {msg}", path.display()));
        let text = fs::read_to_string(sidecar_path(path)).map_err(|e| bad(e.to_string()))?;
        let sidecar: WeightSidecar = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if sidecar.dtype != "f64-le" {
            return Err(bad(format!("unsupported dtype {}", sidecar.dtype)));
        }
        let bytes = fs::read(path).map_err(|e| bad(e.to_string()))?;
        if bytes.len() % 8 != 0 {
            return Err(bad("length is not a multiple of 8".into()));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        // Shapes come from a zero-seed template, values from the file.
        let config = GenerationConfig {
            channels: sidecar.channels,
            scale_schedule: sidecar.scales.clone(),
            ..GenerationConfig::default()
        };
        let mut weights = TransformerWeights::new(&config, sidecar.architecture, 0)?;
        let expected: Vec<(String, (usize, usize))> = weights
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.dim()))
            .collect();
        if expected.len() != sidecar.tensors.len() {
            return Err(bad(format!(
                "expected {} tensors, sidecar lists {}",
                expected.len(),
                sidecar.tensors.len()
            )));
        }
        for ((name, dim), entry) in expected.iter().zip(&sidecar.tensors) {
            if *name != entry.name || [dim.0, dim.1] != entry.shape {
                return Err(bad(format!("tensor {} does not match layout", entry.name)));
            }
            let len = dim.0 * dim.1;
            let slice = values
                .get(entry.offset..entry.offset + len)
                .ok_or_else(|| bad(format!("tensor {} runs past end of file", entry.name)))?;
            let array = Array2::from_shape_vec(*dim, slice.to_vec()).expect("length checked");
            weights = weights.with_tensor(name, array)?;
        }
        Ok(weights)
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightSidecar {
    architecture: Architecture,
    channels: usize,
    scales: Vec<(usize, usize)>,
    dtype: String,
    tensors: Vec<TensorEntry>,
}
