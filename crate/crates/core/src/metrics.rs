//! Image-set measurements: RGB histograms with chi-square distance, a
//! seeded filter-bank descriptor (content statistics and Gram matrix),
//! pairwise style consistency, a prompt-relevancy proxy and their
//! harmonic-mean dual consistency.
//!
//! All sums run in a fixed order, so identical inputs give bit-identical
//! outputs regardless of how callers parallelize across images.

use std::io::{self, Write};

use ndarray::{Array2, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::embed_text;
use crate::error::{Error, Result};
use crate::rng::Key;
use crate::types::ImageBatch;

pub const DEFAULT_BINS: usize = 32;
pub const CHI_SQUARE_EPS: f64 = 1e-12;
/// Seed of the metric suite's filter bank and text projection. Fixed so
/// that runs with different generation seeds are measured identically.
pub const DEFAULT_METRIC_SEED: u64 = 0x5C41_E57E;
pub const NUM_FILTERS: usize = 16;
pub const FILTER_SIZE: usize = 5;

/// Per-channel normalized histogram with `bins` uniform bins over `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbHistogram {
    bins: usize,
    counts: [Vec<f64>; 3],
}

impl RgbHistogram {
    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.counts[c]
    }

    /// CSV with header `channel,bin_index,mass`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "channel,bin_index,mass")?;
        for (c, counts) in self.counts.iter().enumerate() {
            for (i, m) in counts.iter().enumerate() {
                writeln!(out, "{c},{i},{m:?}")?;
            }
        }
        Ok(())
    }
}

/// Bin index of a value in `[0, 1]`; the last bin is closed on the right.
pub fn bin_index(value: f64, bins: usize) -> usize {
    ((value * bins as f64) as usize).min(bins - 1)
}

/// Histogram of one `(3, H, W)` image.
pub fn rgb_histogram(image: ArrayView3<'_, f64>, bins: usize) -> Result<RgbHistogram> {
    if bins < 2 {
        return Err(Error::Config(format!("need at least 2 bins, got {bins}")));
    }
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    if image.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Input("pixel values must lie in [0, 1]".into()));
    }
    let total = (h * w) as f64;
    let counts = std::array::from_fn(|ch| {
        let mut counts = vec![0.0; bins];
        for &v in image.index_axis(ndarray::Axis(0), ch).iter() {
            counts[bin_index(v, bins)] += 1.0;
        }
        counts.iter_mut().for_each(|m| *m /= total);
        counts
    });
    Ok(RgbHistogram { bins, counts })
}

/// Mean over channels of `Σ (p − q)² / (p + q + ε)`.
pub fn chi_square(p: &RgbHistogram, q: &RgbHistogram) -> Result<f64> {
    if p.bins != q.bins {
        return Err(Error::Shape(format!(
            "bin counts differ: {} vs {}",
            p.bins, q.bins
        )));
    }
    let total: f64 = (0..3)
        .map(|c| {
            p.counts[c]
                .iter()
                .zip(&q.counts[c])
                .map(|(a, b)| (a - b) * (a - b) / (a + b + CHI_SQUARE_EPS))
                .sum::<f64>()
        })
        .sum();
    Ok(total / 3.0)
}

/// Cosine similarity; exactly 1 for bit-identical non-zero inputs.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    let denom = (dot(a, a) * dot(b, b)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        dot(a, b) / denom
    }
}

/// Sixteen seeded 5x5x3 filters.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    /// `(filter, c * 25 + dy * 5 + dx)`
    weights: Array2<f64>,
}

impl FilterBank {
    pub fn new(seed: u64) -> Self {
        let taps = 3 * FILTER_SIZE * FILTER_SIZE;
        let bound = 1.0 / (taps as f64).sqrt();
        let mut stream = Key::root(seed).named("filter_bank").stream();
        FilterBank {
            weights: Array2::from_shape_simple_fn((NUM_FILTERS, taps), || {
                stream.random_range(-bound..bound)
            }),
        }
    }

    /// Valid-mode responses, `(filter, position)`.
    fn responses(&self, image: ArrayView3<'_, f64>) -> Array2<f64> {
        let (_, h, w) = image.dim();
        let (oh, ow) = (h - FILTER_SIZE + 1, w - FILTER_SIZE + 1);
        let mut patch = vec![0.0; 3 * FILTER_SIZE * FILTER_SIZE];
        let mut out = Array2::zeros((NUM_FILTERS, oh * ow));
        for y in 0..oh {
            for x in 0..ow {
                let mut i = 0;
                for c in 0..3 {
                    for dy in 0..FILTER_SIZE {
                        for dx in 0..FILTER_SIZE {
                            patch[i] = image[[c, y + dy, x + dx]];
                            i += 1;
                        }
                    }
                }
                for (k, filter) in self.weights.rows().into_iter().enumerate() {
                    out[[k, y * ow + x]] =
                        filter.iter().zip(&patch).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        out
    }
}

/// Filter-bank statistics standing in for pretrained content and style
/// embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDescriptor {
    /// Per-filter spatial mean then standard deviation (`2 × 16`).
    pub content_vector: Vec<f64>,
    /// Upper triangle (with diagonal) of the position-normalized Gram
    /// matrix of filter responses (`16 · 17 / 2`).
    pub gram_vector: Vec<f64>,
}

pub fn describe(image: ArrayView3<'_, f64>, bank: &FilterBank) -> Result<FeatureDescriptor> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    if h < FILTER_SIZE || w < FILTER_SIZE {
        return Err(Error::Input(format!(
            "image {h}x{w} smaller than the {FILTER_SIZE}x{FILTER_SIZE} filters"
        )));
    }
    let responses = bank.responses(image);
    let positions = responses.ncols() as f64;
    let mut means = Vec::with_capacity(NUM_FILTERS);
    let mut stds = Vec::with_capacity(NUM_FILTERS);
    for row in responses.rows() {
        let mean = row.sum() / positions;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / positions;
        means.push(mean);
        stds.push(var.sqrt());
    }
    let mut gram_vector = Vec::with_capacity(NUM_FILTERS * (NUM_FILTERS + 1) / 2);
    for i in 0..NUM_FILTERS {
        for j in i..NUM_FILTERS {
            let ri = responses.row(i);
            let rj = responses.row(j);
            gram_vector.push(ri.iter().zip(rj.iter()).map(|(a, b)| a * b).sum::<f64>() / positions);
        }
    }
    means.extend(stds);
    Ok(FeatureDescriptor {
        content_vector: means,
        gram_vector,
    })
}

/// Mean Gram cosine over all unordered pairs of descriptors.
pub fn style_consistency_of(descriptors: &[FeatureDescriptor]) -> Result<f64> {
    let n = descriptors.len();
    if n < 2 {
        return Err(Error::Input(format!(
            "style consistency needs at least 2 images, got {n}"
        )));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += cosine(&descriptors[i].gram_vector, &descriptors[j].gram_vector);
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

/// Harmonic mean `2ab / (a + b)`.
pub fn dual_consistency(s_obj: f64, s_sty: f64) -> Result<f64> {
    let sum = s_obj + s_sty;
    if sum == 0.0 || !sum.is_finite() {
        return Err(Error::Domain(format!("s_obj + s_sty = {sum}")));
    }
    Ok(2.0 * s_obj * s_sty / sum)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub s_obj: f64,
    pub s_sty: f64,
    pub s_dual: f64,
}

impl ConsistencyReport {
    pub fn new(s_obj: f64, s_sty: f64) -> Result<Self> {
        Ok(ConsistencyReport {
            s_obj,
            s_sty,
            s_dual: dual_consistency(s_obj, s_sty)?,
        })
    }
}

/// The fixed measuring instruments: filter bank plus a projection from
/// prompt-embedding space into content-descriptor space.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricSuite {
    seed: u64,
    bank: FilterBank,
    text_projection: Array2<f64>,
    bins: usize,
}

impl Default for MetricSuite {
    fn default() -> Self {
        MetricSuite::new(DEFAULT_METRIC_SEED)
    }
}

impl MetricSuite {
    pub fn new(seed: u64) -> Self {
        let text_dim = crate::backend::DEFAULT_TEXT_DIM;
        let content_dim = 2 * NUM_FILTERS;
        let bound = 1.0 / (text_dim as f64).sqrt();
        let mut stream = Key::root(seed).named("text_projection").stream();
        MetricSuite {
            seed,
            bank: FilterBank::new(seed),
            text_projection: Array2::from_shape_simple_fn((text_dim, content_dim), || {
                stream.random_range(-bound..bound)
            }),
            bins: DEFAULT_BINS,
        }
    }

    pub fn bank(&self) -> &FilterBank {
        &self.bank
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn describe_all(&self, images: &ImageBatch) -> Result<Vec<FeatureDescriptor>> {
        (0..images.len())
            .map(|n| describe(images.image(n), &self.bank))
            .collect()
    }

    pub fn histograms(&self, images: &ImageBatch) -> Result<Vec<RgbHistogram>> {
        (0..images.len())
            .map(|n| rgb_histogram(images.image(n), self.bins))
            .collect()
    }

    pub fn style_consistency(&self, images: &ImageBatch) -> Result<f64> {
        style_consistency_of(&self.describe_all(images)?)
    }

    /// Prompt mean embedding mapped into content space.
    pub fn prompt_vector(&self, prompt: &str) -> Result<Vec<f64>> {
        let mean = embed_text(prompt, self.seed)?.mean();
        Ok(mean.dot(&self.text_projection).to_vec())
    }

    pub fn object_relevancy_of<S: AsRef<str>>(
        &self,
        descriptors: &[FeatureDescriptor],
        prompts: &[S],
    ) -> Result<f64> {
        if descriptors.len() != prompts.len() {
            return Err(Error::Input(format!(
                "{} images but {} prompts",
                descriptors.len(),
                prompts.len()
            )));
        }
        if descriptors.is_empty() {
            return Err(Error::Input("no images".into()));
        }
        let mut total = 0.0;
        for (d, p) in descriptors.iter().zip(prompts) {
            total += cosine(&self.prompt_vector(p.as_ref())?, &d.content_vector);
        }
        Ok(total / descriptors.len() as f64)
    }

    pub fn object_relevancy<S: AsRef<str>>(
        &self,
        images: &ImageBatch,
        prompts: &[S],
    ) -> Result<f64> {
        if images.len() != prompts.len() {
            return Err(Error::Input(format!(
                "{} images but {} prompts",
                images.len(),
                prompts.len()
            )));
        }
        self.object_relevancy_of(&self.describe_all(images)?, prompts)
    }

    pub fn evaluate<S: AsRef<str>>(
        &self,
        images: &ImageBatch,
        prompts: &[S],
    ) -> Result<ConsistencyReport> {
        let descriptors = self.describe_all(images)?;
        ConsistencyReport::new(
            self.object_relevancy_of(&descriptors, prompts)?,
            style_consistency_of(&descriptors)?,
        )
    }
}
