//! Training-free style alignment: early feature replacement, pivotal
//! feature interpolation and scheduled value injection, plus the family of
//! schedule functions that set the injection weight per step.
//!
//! Every operation pulls non-anchor batch rows toward the anchor row and
//! never modifies the anchor itself. Anchors are 1-based batch indices.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array, Array4, Axis, RemoveAxis};
use serde::{Deserialize, Serialize};

use crate::backend::AttentionHook;
use crate::error::{Error, Result};
use crate::types::FeatureMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Normalized decaying exponential with rate `r`.
    #[serde(alias = "ours")]
    OursExponential,
    Constant,
    Linear,
    ConcaveUp,
    ConcaveDown,
    Cosine,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 6] = [
        ScheduleKind::OursExponential,
        ScheduleKind::Constant,
        ScheduleKind::Linear,
        ScheduleKind::ConcaveUp,
        ScheduleKind::ConcaveDown,
        ScheduleKind::Cosine,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::OursExponential => "ours_exponential",
            ScheduleKind::Constant => "constant",
            ScheduleKind::Linear => "linear",
            ScheduleKind::ConcaveUp => "concave_up",
            ScheduleKind::ConcaveDown => "concave_down",
            ScheduleKind::Cosine => "cosine",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "ours" {
            return Ok(ScheduleKind::OursExponential);
        }
        ScheduleKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown schedule kind {s:?}")))
    }
}

/// Maps a step `s ∈ [0, S]` to an injection weight in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleFunction {
    kind: ScheduleKind,
    decay_rate: f64,
    total_steps: usize,
}

impl ScheduleFunction {
    pub fn new(kind: ScheduleKind, decay_rate: f64, total_steps: usize) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if kind == ScheduleKind::OursExponential && !(decay_rate > 0.0 && decay_rate.is_finite()) {
            return Err(Error::Config(format!(
                "decay rate must be positive, got {decay_rate}"
            )));
        }
        Ok(ScheduleFunction {
            kind,
            decay_rate,
            total_steps,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    /// Weight at (possibly fractional) step `s`.
    pub fn value(&self, s: f64) -> Result<f64> {
        let total = self.total_steps as f64;
        if !(0.0..=total).contains(&s) {
            return Err(Error::Domain(format!(
                "schedule step {s} outside [0, {total}]"
            )));
        }
        let t = s / total;
        Ok(match self.kind {
            ScheduleKind::OursExponential => {
                let r = self.decay_rate;
                let floor = (-r).exp();
                ((-r * t).exp() - floor) / (1.0 - floor)
            }
            ScheduleKind::Constant => 0.5,
            ScheduleKind::Linear => 1.0 - t,
            ScheduleKind::ConcaveUp => (1.0 - t) * (1.0 - t),
            ScheduleKind::ConcaveDown => 1.0 - t * t,
            ScheduleKind::Cosine => 0.5 * (1.0 + (PI * t).cos()),
        })
    }

    pub fn at_step(&self, step: usize) -> Result<f64> {
        self.value(step as f64)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!(
            "interpolation weight {alpha} outside [0, 1]"
        )));
    }
    Ok(())
}

fn anchor_row(anchor: usize, batch: usize) -> Result<usize> {
    if anchor == 0 || anchor > batch {
        return Err(Error::range("anchor index", anchor, batch));
    }
    Ok(anchor - 1)
}

/// Row `n ← alpha · anchor + (1 − alpha) · n` along axis 0, anchor untouched.
///
/// `alpha = 0` returns the input bit for bit; `alpha = 1` copies the anchor.
fn blend_toward_anchor<D: RemoveAxis>(
    data: &Array<f64, D>,
    alpha: f64,
    anchor: usize,
) -> Result<Array<f64, D>> {
    check_alpha(alpha)?;
    let a = anchor_row(anchor, data.len_of(Axis(0)))?;
    let mut out = data.clone();
    if alpha == 0.0 {
        return Ok(out);
    }
    let anchor_view = data.index_axis(Axis(0), a);
    for (n, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        if n == a {
            continue;
        }
        if alpha == 1.0 {
            row.assign(&anchor_view);
        } else {
            row.zip_mut_with(&anchor_view, |v, &anc| {
                *v = alpha * anc + (1.0 - alpha) * *v
            });
        }
    }
    Ok(out)
}

/// Every batch row becomes a bit-exact copy of the anchor row.
pub fn replace_initial(features: &FeatureMap, anchor: usize) -> Result<FeatureMap> {
    FeatureMap::new(blend_toward_anchor(
        &features.view().to_owned(),
        1.0,
        anchor,
    )?)
}

/// One affine blend of every row toward the anchor with weight `alpha_pivot`.
pub fn pivotal_interpolate(
    features: &FeatureMap,
    alpha_pivot: f64,
    anchor: usize,
) -> Result<FeatureMap> {
    FeatureMap::new(blend_toward_anchor(
        &features.view().to_owned(),
        alpha_pivot,
        anchor,
    )?)
}

/// Blends self-attention values `(batch, heads, tokens, head_dim)` toward the anchor's.
pub fn inject_values(values: &Array4<f64>, alpha: f64, anchor: usize) -> Result<Array4<f64>> {
    blend_toward_anchor(values, alpha, anchor)
}

/// Value injection installed inside self-attention for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValueHook {
    alpha: f64,
    anchor_index: usize,
}

impl ValueHook {
    pub fn new(alpha: f64, anchor_index: usize) -> Result<Self> {
        check_alpha(alpha)?;
        if anchor_index == 0 {
            return Err(Error::range("anchor index", 0, 0));
        }
        Ok(ValueHook {
            alpha,
            anchor_index,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn anchor_index(&self) -> usize {
        self.anchor_index
    }
}

impl AttentionHook for ValueHook {
    fn transform_values(&self, _layer: usize, values: Array4<f64>) -> Array4<f64> {
        // Alpha and anchor were checked at construction; the engine also
        // checks the anchor against the batch size before installing.
        inject_values(&values, self.alpha, self.anchor_index).unwrap_or(values)
    }
}
