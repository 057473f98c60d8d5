//! Shared data model: batched feature maps, quantized residuals, prompt
//! embeddings and decoded image batches.
//!
//! All types are immutable once built. Batch rows are addressed with
//! 1-based indices throughout the public API, matching the anchor
//! convention of the intervention configuration.

use ndarray::{s, Array1, Array2, Array4, ArrayView3, ArrayView4, Axis};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Extents of a batched `(n, c, y, x)` array.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape {
            batch,
            channels,
            height,
            width,
        }
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn dims(&self) -> (usize, usize, usize, usize) {
        (self.batch, self.channels, self.height, self.width)
    }
}

fn check_array(data: &Array4<f64>, what: &str) -> Result<()> {
    if data.shape().contains(&0) {
        return Err(Error::Shape(format!(
            "{what} has an empty axis: {:?}",
            data.shape()
        )));
    }
    if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
        return Err(Error::Input(format!(
            "{what} contains non-finite value {bad}"
        )));
    }
    Ok(())
}

fn checksum_of<'a>(values: impl Iterator<Item = &'a f64>) -> String {
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

/// A batch of real-valued feature maps indexed `(n, c, y, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    data: Array4<f64>,
}

impl FeatureMap {
    /// Wraps `data`, rejecting empty axes and non-finite elements.
    pub fn new(data: Array4<f64>) -> Result<Self> {
        check_array(&data, "feature map")?;
        Ok(FeatureMap {
            data: data.as_standard_layout().into_owned(),
        })
    }

    pub fn from_shape_vec(shape: Shape, values: Vec<f64>) -> Result<Self> {
        let data = Array4::from_shape_vec(shape.dims(), values)
            .map_err(|e| Error::Shape(e.to_string()))?;
        FeatureMap::new(data)
    }

    pub fn zeros(shape: Shape) -> Result<Self> {
        FeatureMap::new(Array4::zeros(shape.dims()))
    }

    pub fn filled(shape: Shape, value: f64) -> Result<Self> {
        FeatureMap::new(Array4::from_elem(shape.dims(), value))
    }

    /// Stacks single-image maps along the batch axis.
    pub fn stack(rows: &[FeatureMap]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Input("cannot stack zero feature maps".into()))?;
        let per = first.shape();
        let mut out = Array4::zeros((0, per.channels, per.height, per.width));
        for row in rows {
            let s = row.shape();
            if (s.channels, s.height, s.width) != (per.channels, per.height, per.width) {
                return Err(Error::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    s.dims(),
                    per.dims()
                )));
            }
            for n in 0..s.batch {
                out.push(Axis(0), row.data.index_axis(Axis(0), n))
                    .map_err(|e| Error::Shape(e.to_string()))?;
            }
        }
        FeatureMap::new(out)
    }

    pub fn shape(&self) -> Shape {
        let d = self.data.dim();
        Shape::new(d.0, d.1, d.2, d.3)
    }

    pub fn batch(&self) -> usize {
        self.data.dim().0
    }

    pub fn channels(&self) -> usize {
        self.data.dim().1
    }

    pub fn height(&self) -> usize {
        self.data.dim().2
    }

    pub fn width(&self) -> usize {
        self.data.dim().3
    }

    pub fn view(&self) -> ArrayView4<'_, f64> {
        self.data.view()
    }

    /// The `(c, y, x)` slab of batch row `n` (0-based), borrowed.
    pub fn row(&self, n: usize) -> ArrayView3<'_, f64> {
        self.data.index_axis(Axis(0), n)
    }

    pub fn as_slice(&self) -> &[f64] {
        self.data
            .as_slice()
            .expect("feature maps are kept in standard layout")
    }

    pub fn into_array(self) -> Array4<f64> {
        self.data
    }

    /// Returns image `n` (1-based) as an owned `(1, C, h, w)` snapshot.
    ///
    /// The map is immutable, so a slice can never observe later changes
    /// to its parent.
    pub fn batch_slice(&self, n: usize) -> Result<FeatureMap> {
        let len = self.batch();
        if n == 0 || n > len {
            return Err(Error::range("batch index", n, len));
        }
        Ok(FeatureMap {
            data: self.data.slice(s![n - 1..n, .., .., ..]).to_owned(),
        })
    }

    /// True when every batch row is bit-identical to the first.
    pub fn rows_identical(&self) -> bool {
        let first = self.row(0);
        (1..self.batch()).all(|n| {
            self.row(n)
                .iter()
                .zip(first.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
        })
    }

    /// SHA-256 over the little-endian bytes of the elements in `(n, c, y, x)` order.
    pub fn checksum(&self) -> String {
        checksum_of(self.data.iter())
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> Option<f64> {
        if self.shape() != other.shape() {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    }

    pub(crate) fn from_array_checked(
        data: Array4<f64>,
        step: usize,
        what: &'static str,
    ) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what, step });
        }
        FeatureMap::new(data)
    }
}

/// A quantized residual predicted at scale `scale_index` (1-based).
///
/// Only built through [`crate::pipeline::BinaryQuantizer`] or the residual
/// sampler, so every spatial vector is a valid codeword.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualMap {
    map: FeatureMap,
    scale_index: usize,
}

impl ResidualMap {
    pub(crate) fn new_unchecked(map: FeatureMap, scale_index: usize) -> Self {
        ResidualMap { map, scale_index }
    }

    pub fn map(&self) -> &FeatureMap {
        &self.map
    }

    pub fn scale_index(&self) -> usize {
        self.scale_index
    }

    pub fn into_map(self) -> FeatureMap {
        self.map
    }
}

/// Prompt tokens and their embedding rows (`tokens × text_dim`).
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    pub(crate) tokens_hashed: Vec<u64>,
    pub(crate) embedding: Array2<f64>,
}

impl PromptEmbedding {
    pub fn tokens_hashed(&self) -> &[u64] {
        &self.tokens_hashed
    }

    pub fn embedding(&self) -> &Array2<f64> {
        &self.embedding
    }

    pub fn num_tokens(&self) -> usize {
        self.embedding.nrows()
    }

    pub fn dim(&self) -> usize {
        self.embedding.ncols()
    }

    /// Mean over token rows.
    pub fn mean(&self) -> Array1<f64> {
        self.embedding
            .mean_axis(Axis(0))
            .expect("embeddings have at least one token")
    }

    pub fn checksum(&self) -> String {
        checksum_of(self.embedding.iter())
    }
}

/// Decoded images `(n, rgb, y, x)` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    data: Array4<f64>,
}

impl ImageBatch {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        check_array(&data, "image batch")?;
        if data.dim().1 != 3 {
            return Err(Error::Shape(format!(
                "images need 3 channels, got {}",
                data.dim().1
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(ImageBatch {
            data: data.as_standard_layout().into_owned(),
        })
    }

    pub fn len(&self) -> usize {
        self.data.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.data.dim().2
    }

    pub fn width(&self) -> usize {
        self.data.dim().3
    }

    pub fn view(&self) -> ArrayView4<'_, f64> {
        self.data.view()
    }

    /// Image `n` (0-based) as a `(3, H, W)` view.
    pub fn image(&self, n: usize) -> ArrayView3<'_, f64> {
        self.data.index_axis(Axis(0), n)
    }

    /// 8-bit RGB bytes of image `n` (0-based), row-major, quantized by `round(255 v)`.
    pub fn to_rgb8(&self, n: usize) -> Vec<u8> {
        let img = self.image(n);
        let (h, w) = (self.height(), self.width());
        let mut out = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out.push((img[[c, y, x]] * 255.0).round() as u8);
                }
            }
        }
        out
    }

    /// Selects rows (0-based) into a new batch.
    pub fn select(&self, rows: &[usize]) -> ImageBatch {
        ImageBatch {
            data: self.data.select(Axis(0), rows),
        }
    }

    pub fn checksum(&self) -> String {
        checksum_of(self.data.iter())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: Shape) -> FeatureMap {
        let len = shape.batch * shape.channels * shape.height * shape.width;
        FeatureMap::from_shape_vec(shape, (0..len).map(|i| i as f64 * 0.5).collect()).unwrap()
    }

    #[test]
    fn batch_slice_shapes_and_contents() {
        let f = ramp(Shape::new(3, 2, 4, 5));
        let s = f.batch_slice(1).unwrap();
        assert_eq!(s.shape(), Shape::new(1, 2, 4, 5));
        assert_eq!(s.row(0), f.row(0));
        let third = f.batch_slice(3).unwrap();
        assert_eq!(third.row(0), f.row(2));
    }

    #[test]
    fn batch_slice_of_single_image_is_whole_map() {
        let f = ramp(Shape::new(1, 3, 2, 2));
        assert_eq!(f.batch_slice(1).unwrap(), f);
    }

    #[test]
    fn batch_slice_out_of_range() {
        let f = ramp(Shape::new(3, 1, 1, 1));
        assert!(matches!(
            f.batch_slice(4),
            Err(Error::Range {
                index: 4,
                len: 3,
                ..
            })
        ));
        assert!(matches!(f.batch_slice(0), Err(Error::Range { .. })));
    }

    #[test]
    fn slices_are_snapshots() {
        let f = ramp(Shape::new(2, 1, 2, 2));
        let slice = f.batch_slice(2).unwrap();
        // Rebuilding the parent with new contents cannot reach the slice.
        let mut raw = f.clone().into_array();
        raw.fill(9.0);
        let _rebuilt = FeatureMap::new(raw).unwrap();
        assert_eq!(slice.row(0), f.row(1));
    }

    #[test]
    fn non_finite_data_rejected() {
        let mut raw = Array4::zeros((1, 1, 2, 2));
        raw[[0, 0, 1, 1]] = f64::NAN;
        assert!(FeatureMap::new(raw.clone()).is_err());
        raw[[0, 0, 1, 1]] = f64::INFINITY;
        assert!(FeatureMap::new(raw).is_err());
        assert!(FeatureMap::new(Array4::zeros((0, 1, 1, 1))).is_err());
    }

    #[test]
    fn image_batch_rejects_out_of_range_pixels() {
        assert!(ImageBatch::new(Array4::from_elem((1, 3, 2, 2), 1.2)).is_err());
        assert!(ImageBatch::new(Array4::from_elem((1, 2, 2, 2), 0.2)).is_err());
        let ok = ImageBatch::new(Array4::from_elem((2, 3, 2, 2), 0.5)).unwrap();
        assert_eq!(ok.to_rgb8(1), vec![128; 12]);
    }

    #[test]
    fn stack_round_trips_rows() {
        let f = ramp(Shape::new(3, 2, 2, 2));
        let rows: Vec<_> = (1..=3).map(|n| f.batch_slice(n).unwrap()).collect();
        assert_eq!(FeatureMap::stack(&rows).unwrap(), f);
    }
}
