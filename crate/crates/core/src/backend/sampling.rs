use ndarray::Array4;

use super::linalg::sigmoid;
use crate::config::SamplingMode;
use crate::error::{Error, Result};
use crate::pipeline::BinaryQuantizer;
use crate::rng::Key;
use crate::types::{FeatureMap, ResidualMap};

/// Turns logits into a residual at scale `step`.
///
/// Greedy mode takes the sign of each logit (ties to `+`). Stochastic mode
/// draws each bit from `Bernoulli(sigmoid(logit / temperature))` with a
/// uniform keyed by `(seed, step, n, c, y, x)`, so no draw depends on any
/// other.
pub fn sample_residual(
    logits: &FeatureMap,
    mode: SamplingMode,
    temperature: f64,
    seed: u64,
    step: usize,
    quantizer: &BinaryQuantizer,
) -> Result<ResidualMap> {
    match mode {
        SamplingMode::Greedy => quantizer.quantize(logits, step),
        SamplingMode::SeededStochastic => {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::Config(format!(
                    "temperature must be positive, got {temperature}"
                )));
            }
            let step_key = Key::root(seed).named("sample").derive(step as u64);
            let view = logits.view();
            let magnitude = quantizer.magnitude();
            let data = Array4::from_shape_fn(view.dim(), |(n, c, y, x)| {
                let u = step_key
                    .derive(n as u64)
                    .derive(c as u64)
                    .derive(y as u64)
                    .derive(x as u64)
                    .uniform();
                if u < sigmoid(view[[n, c, y, x]] / temperature) {
                    magnitude
                } else {
                    -magnitude
                }
            });
            quantizer.residual(FeatureMap::new(data)?, step)
        }
    }
}
