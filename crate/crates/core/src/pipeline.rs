//! Coarse-to-fine residual machinery: align-corners bilinear resizing, the
//! binary residual quantizer and the accumulated residual pyramid.

use ndarray::{Array4, ArrayView4};

use crate::config::GenerationConfig;
use crate::error::{Error, Result};
use crate::types::{FeatureMap, ResidualMap, Shape};

/// Sample positions along one axis: `(lower index, upper index, fraction)`.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let pos = if dst == 1 || src == 1 {
                0.0
            } else {
                (i * (src - 1)) as f64 / (dst - 1) as f64
            };
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

pub(crate) fn bilinear(src: ArrayView4<'_, f64>, target: (usize, usize)) -> Array4<f64> {
    let (n, c, h, w) = src.dim();
    let (th, tw) = target;
    let rows = axis_taps(h, th);
    let cols = axis_taps(w, tw);
    let mut out = Array4::zeros((n, c, th, tw));
    for b in 0..n {
        for ch in 0..c {
            let plane = src.slice(ndarray::s![b, ch, .., ..]);
            for (y, &(y0, y1, ty)) in rows.iter().enumerate() {
                for (x, &(x0, x1, tx)) in cols.iter().enumerate() {
                    // a + t (b - a) keeps constants exact.
                    let top = plane[[y0, x0]] + tx * (plane[[y0, x1]] - plane[[y0, x0]]);
                    let bottom = plane[[y1, x0]] + tx * (plane[[y1, x1]] - plane[[y1, x0]]);
                    out[[b, ch, y, x]] = top + ty * (bottom - top);
                }
            }
        }
    }
    out
}

/// Bilinear resize with align-corners semantics.
///
/// Corner samples map onto corner samples, constants stay constant and an
/// equal-size resize returns the input unchanged.
pub fn up(map: &FeatureMap, target: (usize, usize)) -> Result<FeatureMap> {
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::Shape(format!(
            "resize target {target:?} has a zero extent"
        )));
    }
    if map.shape().spatial() == target {
        return Ok(map.clone());
    }
    FeatureMap::new(bilinear(map.view(), target))
}

/// Resizes accumulated features onto the token grid of step `step` (1-based).
pub fn resize_for_step(
    map: &FeatureMap,
    step: usize,
    config: &GenerationConfig,
) -> Result<FeatureMap> {
    let target = step
        .checked_sub(1)
        .and_then(|i| config.scale_schedule.get(i))
        .ok_or_else(|| Error::range("step", step, config.scale_schedule.len()))?;
    up(map, *target)
}

/// Look-up-free quantizer: each channel becomes `±magnitude`, so every
/// spatial location carries one of `2^bit_depth` codewords.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinaryQuantizer {
    bit_depth: usize,
    magnitude: f64,
}

impl Default for BinaryQuantizer {
    fn default() -> Self {
        BinaryQuantizer {
            bit_depth: 16,
            magnitude: 1.0,
        }
    }
}

impl BinaryQuantizer {
    pub fn new(bit_depth: usize, magnitude: f64) -> Result<Self> {
        if bit_depth == 0 {
            return Err(Error::Config("bit depth must be at least 1".into()));
        }
        if !(magnitude > 0.0 && magnitude.is_finite()) {
            return Err(Error::Config(format!(
                "magnitude must be positive, got {magnitude}"
            )));
        }
        Ok(BinaryQuantizer {
            bit_depth,
            magnitude,
        })
    }

    pub fn for_config(config: &GenerationConfig) -> Result<Self> {
        BinaryQuantizer::new(config.channels, 1.0)
    }

    pub fn bit_depth(&self) -> usize {
        self.bit_depth
    }

    pub fn magnitude(&self) -> f64 {
        self.magnitude
    }

    /// `log2` of the codebook size per spatial location.
    pub fn codebook_bits(&self) -> usize {
        self.bit_depth
    }

    /// Sign rule with ties at zero mapped to `+magnitude`.
    #[inline]
    pub fn code(&self, value: f64) -> f64 {
        if value >= 0.0 {
            self.magnitude
        } else {
            -self.magnitude
        }
    }

    pub fn is_codeword(&self, map: &FeatureMap) -> bool {
        map.channels() == self.bit_depth
            && map
                .as_slice()
                .iter()
                .all(|&v| v == self.magnitude || v == -self.magnitude)
    }

    pub fn quantize(&self, raw: &FeatureMap, scale_index: usize) -> Result<ResidualMap> {
        self.check_channels(raw)?;
        let data = raw.view().mapv(|v| self.code(v));
        Ok(ResidualMap::new_unchecked(
            FeatureMap::new(data)?,
            scale_index,
        ))
    }

    /// Wraps `map` as a residual after checking every element is a codeword.
    pub fn residual(&self, map: FeatureMap, scale_index: usize) -> Result<ResidualMap> {
        self.check_channels(&map)?;
        if !self.is_codeword(&map) {
            return Err(Error::Input(format!(
                "residual elements must be ±{}",
                self.magnitude
            )));
        }
        Ok(ResidualMap::new_unchecked(map, scale_index))
    }

    fn check_channels(&self, map: &FeatureMap) -> Result<()> {
        if map.channels() != self.bit_depth {
            return Err(Error::Shape(format!(
                "quantizer expects {} channels, got {}",
                self.bit_depth,
                map.channels()
            )));
        }
        Ok(())
    }
}

/// A rewrite applied to the accumulated features after a given step,
/// stored as the difference it introduced.
#[derive(Clone, Debug, PartialEq)]
struct Edit {
    after_step: usize,
    delta: FeatureMap,
}

/// Residuals so far plus their running sum at feature resolution.
///
/// `accumulated` always equals the ordered sum of upsampled residuals and
/// recorded edits, recomputable with [`Pyramid::recompute`].
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    residuals: Vec<ResidualMap>,
    edits: Vec<Edit>,
    accumulated: FeatureMap,
}

impl Pyramid {
    pub fn new(batch: usize, channels: usize, feature_res: (usize, usize)) -> Result<Self> {
        Ok(Pyramid {
            residuals: Vec::new(),
            edits: Vec::new(),
            accumulated: FeatureMap::zeros(Shape::new(
                batch,
                channels,
                feature_res.0,
                feature_res.1,
            ))?,
        })
    }

    pub fn residuals(&self) -> &[ResidualMap] {
        &self.residuals
    }

    pub fn accumulated(&self) -> &FeatureMap {
        &self.accumulated
    }

    pub fn completed_steps(&self) -> usize {
        self.residuals.len()
    }

    pub fn feature_res(&self) -> (usize, usize) {
        self.accumulated.shape().spatial()
    }

    /// Adds `up(residual)` to the running sum.
    pub fn accumulate(mut self, residual: ResidualMap) -> Result<Self> {
        let completed = self.residuals.len();
        if residual.scale_index() != completed + 1 {
            return Err(Error::Sequencing {
                completed,
                got: residual.scale_index(),
            });
        }
        let acc = self.accumulated.shape();
        let res = residual.map().shape();
        if (res.batch, res.channels) != (acc.batch, acc.channels) {
            return Err(Error::Shape(format!(
                "residual batch/channels {:?} do not match pyramid {:?}",
                (res.batch, res.channels),
                (acc.batch, acc.channels)
            )));
        }
        let upsampled = up(residual.map(), acc.spatial())?;
        let sum = &self.accumulated.view() + &upsampled.view();
        self.accumulated = FeatureMap::new(sum)?;
        self.residuals.push(residual);
        Ok(self)
    }

    /// Replaces the accumulated features with `rewritten`, recording the
    /// difference so the sum stays recomputable.
    pub fn apply_edit(mut self, rewritten: FeatureMap) -> Result<Self> {
        if rewritten.shape() != self.accumulated.shape() {
            return Err(Error::Shape(format!(
                "edit shape {:?} does not match accumulated {:?}",
                rewritten.shape(),
                self.accumulated.shape()
            )));
        }
        let delta = &rewritten.view() - &self.accumulated.view();
        self.edits.push(Edit {
            after_step: self.residuals.len(),
            delta: FeatureMap::new(delta)?,
        });
        self.accumulated = rewritten;
        Ok(self)
    }

    pub fn num_edits(&self) -> usize {
        self.edits.len()
    }

    /// Rebuilds the running sum from residuals and edits alone.
    pub fn recompute(&self) -> Result<FeatureMap> {
        let shape = self.accumulated.shape();
        let mut sum = Array4::zeros((shape.batch, shape.channels, shape.height, shape.width));
        let mut edits = self.edits.iter().peekable();
        while let Some(edit) = edits.next_if(|e| e.after_step == 0) {
            sum += &edit.delta.view();
        }
        for (i, residual) in self.residuals.iter().enumerate() {
            sum += &up(residual.map(), shape.spatial())?.view();
            while let Some(edit) = edits.next_if(|e| e.after_step == i + 1) {
                sum += &edit.delta.view();
            }
        }
        FeatureMap::new(sum)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> FeatureMap {
        let data = Array4::from_shape_fn((1, 1, h, w), |(_, _, y, x)| f(y, x));
        FeatureMap::new(data).unwrap()
    }

    #[test]
    fn constant_stays_constant() {
        let c = FeatureMap::filled(Shape::new(2, 3, 3, 5), 0.7).unwrap();
        for target in [(1, 1), (4, 4), (7, 2), (32, 32)] {
            let out = up(&c, target).unwrap();
            assert!(out.as_slice().iter().all(|&v| v == 0.7), "{target:?}");
        }
    }

    #[test]
    fn equal_size_is_identity() {
        let f = plane(4, 4, |y, x| (y * 7 + x) as f64 * 0.13 - 1.0);
        assert_eq!(up(&f, (4, 4)).unwrap(), f);
    }

    #[test]
    fn ramp_two_by_two_to_four_by_four() {
        // Align-corners bilinear reproduces affine functions of the source
        // coordinates: v = 2 y_src + x_src with y_src = y / 3.
        let f = plane(2, 2, |y, x| (2 * y + x) as f64);
        let out = up(&f, (4, 4)).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let expected = 2.0 * y as f64 / 3.0 + x as f64 / 3.0;
                assert!((out.view()[[0, 0, y, x]] - expected).abs() < 1e-12);
            }
        }
        // Corners map onto corners.
        assert_eq!(out.view()[[0, 0, 0, 0]], 0.0);
        assert_eq!(out.view()[[0, 0, 3, 3]], 3.0);
    }

    #[test]
    fn zero_target_is_error() {
        let f = plane(2, 2, |_, _| 1.0);
        assert!(up(&f, (0, 3)).is_err());
        assert!(up(&f, (3, 0)).is_err());
    }

    #[test]
    fn quantize_sign_rule() {
        let q = BinaryQuantizer::new(3, 1.0).unwrap();
        let raw = FeatureMap::from_shape_vec(Shape::new(1, 3, 1, 1), vec![0.3, 0.0, -2.0]).unwrap();
        let r = q.quantize(&raw, 1).unwrap();
        assert_eq!(r.map().as_slice(), &[1.0, 1.0, -1.0]);
        let again = q.quantize(r.map(), 1).unwrap();
        assert_eq!(again, r);
        assert!(q.quantize(&raw.batch_slice(1).unwrap(), 1).is_ok());
        assert!(BinaryQuantizer::new(2, 1.0)
            .unwrap()
            .quantize(&raw, 1)
            .is_err());
    }

    #[test]
    fn negative_zero_ties_positive() {
        let q = BinaryQuantizer::new(1, 0.5).unwrap();
        assert_eq!(q.code(-0.0), 0.5);
    }

    #[test]
    fn single_full_resolution_residual() {
        let q = BinaryQuantizer::new(2, 1.0).unwrap();
        let raw = FeatureMap::new(Array4::from_shape_fn((1, 2, 4, 4), |(_, c, y, x)| {
            (c + y) as f64 - x as f64
        }))
        .unwrap();
        let r = q.quantize(&raw, 1).unwrap();
        let p = Pyramid::new(1, 2, (4, 4))
            .unwrap()
            .accumulate(r.clone())
            .unwrap();
        assert_eq!(p.accumulated(), r.map());
    }

    #[test]
    fn opposite_constants_cancel() {
        let q = BinaryQuantizer::new(2, 0.5).unwrap();
        let pos = q
            .quantize(&FeatureMap::filled(Shape::new(2, 2, 1, 1), 1.0).unwrap(), 1)
            .unwrap();
        let neg = q
            .quantize(
                &FeatureMap::filled(Shape::new(2, 2, 2, 2), -1.0).unwrap(),
                2,
            )
            .unwrap();
        let p = Pyramid::new(2, 2, (4, 4))
            .unwrap()
            .accumulate(pos)
            .unwrap()
            .accumulate(neg)
            .unwrap();
        assert!(p.accumulated().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_order_scale_rejected() {
        let q = BinaryQuantizer::new(1, 1.0).unwrap();
        let r = q
            .quantize(&FeatureMap::filled(Shape::new(1, 1, 1, 1), 1.0).unwrap(), 2)
            .unwrap();
        let err = Pyramid::new(1, 1, (2, 2))
            .unwrap()
            .accumulate(r)
            .unwrap_err();
        assert_eq!(
            err,
            Error::Sequencing {
                completed: 0,
                got: 2
            }
        );
    }

    #[test]
    fn edits_are_recomputable() {
        let q = BinaryQuantizer::new(1, 1.0).unwrap();
        let r1 = q
            .quantize(&FeatureMap::filled(Shape::new(2, 1, 1, 1), 1.0).unwrap(), 1)
            .unwrap();
        let r2 = q
            .quantize(
                &plane(2, 2, |y, x| y as f64 - x as f64)
                    .batch_slice(1)
                    .map(|f| FeatureMap::stack(&[f.clone(), f]).unwrap())
                    .unwrap(),
                2,
            )
            .unwrap();
        let p = Pyramid::new(2, 1, (4, 4)).unwrap().accumulate(r1).unwrap();
        let edited = FeatureMap::filled(Shape::new(2, 1, 4, 4), 0.25).unwrap();
        let p = p.apply_edit(edited).unwrap().accumulate(r2).unwrap();
        assert_eq!(p.num_edits(), 1);
        let diff = p
            .recompute()
            .unwrap()
            .max_abs_diff(p.accumulated())
            .unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn resize_for_step_targets_schedule() {
        let g = GenerationConfig::default();
        let f = FeatureMap::filled(Shape::new(1, 2, 32, 32), -0.3).unwrap();
        let at3 = resize_for_step(&f, 3, &g).unwrap();
        assert_eq!(at3.shape().spatial(), (3, 3));
        assert!(at3.as_slice().iter().all(|&v| v == -0.3));
        assert_eq!(resize_for_step(&f, 12, &g).unwrap(), f);
        assert!(matches!(
            resize_for_step(&f, 0, &g),
            Err(Error::Range { .. })
        ));
        assert!(matches!(
            resize_for_step(&f, 13, &g),
            Err(Error::Range { .. })
        ));
    }

    #[test]
    fn ramp_to_three_by_three_matches_closed_form() {
        let g = GenerationConfig::default();
        let f = plane(32, 32, |y, x| 0.5 * y as f64 - 0.25 * x as f64 + 1.0);
        let out = resize_for_step(&f, 3, &g).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                // Output index i samples source coordinate i * 31 / 2.
                let (sy, sx) = (y as f64 * 15.5, x as f64 * 15.5);
                let expected = 0.5 * sy - 0.25 * sx + 1.0;
                assert!((out.view()[[0, 0, y, x]] - expected).abs() < 1e-12);
            }
        }
    }
}
