use ndarray::{Array1, Array2, Array4};
use rand::Rng;

use super::linalg::sigmoid;
use crate::config::GenerationConfig;
use crate::error::{Error, Result};
use crate::pipeline::bilinear;
use crate::rng::Key;
use crate::types::{FeatureMap, ImageBatch};

/// Toy image decoder: a seeded 1x1 projection `C -> RGB`, logistic
/// squashing, then bilinear pixel upsampling by `factor`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    projection: Array2<f64>,
    bias: Array1<f64>,
    feature_res: (usize, usize),
    factor: usize,
}

impl Decoder {
    pub fn new(config: &GenerationConfig, seed: u64) -> Result<Self> {
        let channels = config.channels;
        if channels == 0 || config.upsample_factor == 0 {
            return Err(Error::Config(
                "decoder needs channels and an upsample factor".into(),
            ));
        }
        let key = Key::root(seed).named("decoder");
        let bound = 1.0 / (channels as f64).sqrt();
        let mut stream = key.named("projection").stream();
        let projection =
            Array2::from_shape_simple_fn((3, channels), || stream.random_range(-bound..bound));
        let mut stream = key.named("bias").stream();
        let bias = Array1::from_shape_simple_fn(3, || stream.random_range(-0.5..0.5));
        Ok(Decoder {
            projection,
            bias,
            feature_res: config.feature_res(),
            factor: config.upsample_factor,
        })
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn feature_res(&self) -> (usize, usize) {
        self.feature_res
    }

    pub fn decode(&self, features: &FeatureMap) -> Result<ImageBatch> {
        let shape = features.shape();
        if shape.spatial() != self.feature_res || shape.channels != self.projection.ncols() {
            return Err(Error::Shape(format!(
                "decoder expects (·, {}, {}, {}) features, got {:?}",
                self.projection.ncols(),
                self.feature_res.0,
                self.feature_res.1,
                (shape.batch, shape.channels, shape.height, shape.width)
            )));
        }
        let view = features.view();
        let rgb = Array4::from_shape_fn(
            (shape.batch, 3, shape.height, shape.width),
            |(n, k, y, x)| {
                let z = self.bias[k]
                    + (0..shape.channels)
                        .map(|c| self.projection[[k, c]] * view[[n, c, y, x]])
                        .sum::<f64>();
                sigmoid(z)
            },
        );
        let (h, w) = self.feature_res;
        let pixels =
            bilinear(rgb.view(), (h * self.factor, w * self.factor)).mapv(|v| v.clamp(0.0, 1.0));
        ImageBatch::new(pixels)
    }
}
