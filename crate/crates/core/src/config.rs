//! Generation and intervention configuration, with JSON (de)serialization
//! and whole-document validation.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interventions::ScheduleKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Residual bit = sign of its logit (ties to `+`).
    #[default]
    Greedy,
    /// Residual bit drawn from `Bernoulli(sigmoid(logit / temperature))`.
    SeededStochastic,
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplingMode::Greedy => f.write_str("greedy"),
            SamplingMode::SeededStochastic => f.write_str("seeded_stochastic"),
        }
    }
}

/// Default 12-step spatial schedule ending at a 32x32 feature grid.
pub const DEFAULT_SCALES: [usize; 12] = [1, 2, 3, 4, 5, 6, 8, 10, 12, 16, 24, 32];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub num_steps: usize,
    /// `(h_s, w_s)` token grid for each step.
    pub scale_schedule: Vec<(usize, usize)>,
    pub channels: usize,
    /// Pixel resolution `(H, W)` of decoded images.
    pub full_res: (usize, usize),
    /// Decoder pixel-upsampling factor `P`.
    pub upsample_factor: usize,
    pub seed: u64,
    pub sampling_mode: SamplingMode,
    pub temperature: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            num_steps: DEFAULT_SCALES.len(),
            scale_schedule: DEFAULT_SCALES.iter().map(|&s| (s, s)).collect(),
            channels: 16,
            full_res: (128, 128),
            upsample_factor: 4,
            seed: 0,
            sampling_mode: SamplingMode::Greedy,
            temperature: 1.0,
        }
    }
}

impl GenerationConfig {
    /// Resolution of the accumulated feature map, `(H / P, W / P)`.
    pub fn feature_res(&self) -> (usize, usize) {
        let p = self.upsample_factor.max(1);
        (self.full_res.0 / p, self.full_res.1 / p)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        GenerationConfig {
            seed,
            ..self.clone()
        }
    }

    /// Checks this config in isolation.
    pub fn validate(&self) -> Vec<ConfigError> {
        let mut errors = Vec::new();
        let steps = self.num_steps;
        if steps < 3 {
            errors.push(ConfigError::TooFewSteps { steps });
        }
        if self.scale_schedule.len() != steps {
            errors.push(ConfigError::ScheduleLength {
                expected: steps,
                got: self.scale_schedule.len(),
            });
        }
        for (i, &(h, w)) in self.scale_schedule.iter().enumerate() {
            if h == 0 || w == 0 {
                errors.push(ConfigError::ZeroExtent { step: i + 1 });
            }
        }
        for (i, pair) in self.scale_schedule.windows(2).enumerate() {
            if pair[1].0 < pair[0].0 || pair[1].1 < pair[0].1 {
                errors.push(ConfigError::ScheduleNotMonotone { step: i + 2 });
            }
        }
        if self.channels == 0 {
            errors.push(ConfigError::ZeroChannels);
        }
        if self.upsample_factor == 0 {
            errors.push(ConfigError::ZeroUpsampleFactor);
        } else {
            let (h, w) = self.full_res;
            let p = self.upsample_factor;
            if h == 0 || w == 0 || h % p != 0 || w % p != 0 {
                errors.push(ConfigError::ResolutionNotDivisible {
                    full_res: self.full_res,
                    factor: p,
                });
            } else if let Some(&last) = self.scale_schedule.last() {
                if last != self.feature_res() {
                    errors.push(ConfigError::ScheduleEnd {
                        expected: self.feature_res(),
                        got: last,
                    });
                }
            }
        }
        if self.sampling_mode == SamplingMode::SeededStochastic
            && !(self.temperature > 0.0 && self.temperature.is_finite())
        {
            errors.push(ConfigError::NonPositiveTemperature {
                temperature: self.temperature,
            });
        }
        errors
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterventionConfig {
    /// Steps after which features are replaced by the anchor's (1-based).
    pub early_steps: BTreeSet<usize>,
    /// Steps whose self-attention values are blended toward the anchor's.
    pub mid_steps: BTreeSet<usize>,
    pub pivot_step: usize,
    pub alpha_pivot: f64,
    pub decay_rate: f64,
    pub schedule: ScheduleKind,
    pub enable_replacement: bool,
    pub enable_pivot: bool,
    pub enable_injection: bool,
    /// 1-based batch row whose features define the shared style.
    pub anchor_index: usize,
}

impl Default for InterventionConfig {
    fn default() -> Self {
        InterventionConfig {
            early_steps: [1, 2].into_iter().collect(),
            mid_steps: (3..=7).collect(),
            pivot_step: 3,
            alpha_pivot: 0.4,
            decay_rate: 3.4,
            schedule: ScheduleKind::OursExponential,
            enable_replacement: true,
            enable_pivot: true,
            enable_injection: true,
            anchor_index: 1,
        }
    }
}

impl InterventionConfig {
    /// Same hyperparameters with every intervention switched off.
    pub fn disabled(&self) -> Self {
        InterventionConfig {
            enable_replacement: false,
            enable_pivot: false,
            enable_injection: false,
            ..self.clone()
        }
    }

    pub fn with_flags(&self, replacement: bool, pivot: bool, injection: bool) -> Self {
        InterventionConfig {
            enable_replacement: replacement,
            enable_pivot: pivot,
            enable_injection: injection,
            ..self.clone()
        }
    }

    pub fn any_enabled(&self) -> bool {
        self.enable_replacement || self.enable_pivot || self.enable_injection
    }

    /// Checks this config against a step count `num_steps`.
    pub fn validate(&self, num_steps: usize) -> Vec<ConfigError> {
        let mut errors = Vec::new();
        for (set, steps) in [("early", &self.early_steps), ("mid", &self.mid_steps)] {
            for &step in steps {
                if step == 0 || step > num_steps {
                    errors.push(ConfigError::StepOutOfRange {
                        set,
                        step,
                        num_steps,
                    });
                }
            }
        }
        if !self.early_steps.is_disjoint(&self.mid_steps) {
            errors.push(ConfigError::OverlappingStageSets);
        }
        if !self.mid_steps.contains(&self.pivot_step) {
            errors.push(ConfigError::PivotOutsideMidStage {
                pivot: self.pivot_step,
            });
        }
        if let Some(&last) = self.mid_steps.iter().next_back() {
            if last >= num_steps {
                errors.push(ConfigError::MidStageReachesEnd { last, num_steps });
            }
        }
        if !(0.0..=1.0).contains(&self.alpha_pivot) {
            errors.push(ConfigError::AlphaPivotOutOfRange {
                alpha: self.alpha_pivot,
            });
        }
        if !(self.decay_rate > 0.0 && self.decay_rate.is_finite()) {
            errors.push(ConfigError::NonPositiveDecayRate {
                rate: self.decay_rate,
            });
        }
        if self.anchor_index == 0 {
            errors.push(ConfigError::ZeroAnchor);
        }
        errors
    }
}

/// One violated configuration invariant.
#[derive(Clone, Debug, PartialEq, Error)]
pub enum ConfigError {
    #[error("too few steps: {steps} (need at least 3)")]
    TooFewSteps { steps: usize },
    #[error("scale schedule has {got} entries, expected {expected}")]
    ScheduleLength { expected: usize, got: usize },
    #[error("scale schedule has a zero extent at step {step}")]
    ZeroExtent { step: usize },
    #[error("scale schedule shrinks at step {step}")]
    ScheduleNotMonotone { step: usize },
    #[error("scale schedule ends at {got:?}, expected feature resolution {expected:?}")]
    ScheduleEnd {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("channels must be at least 1")]
    ZeroChannels,
    #[error("upsample factor must be at least 1")]
    ZeroUpsampleFactor,
    #[error("full resolution {full_res:?} is not a positive multiple of upsample factor {factor}")]
    ResolutionNotDivisible {
        full_res: (usize, usize),
        factor: usize,
    },
    #[error("temperature must be positive in stochastic mode, got {temperature}")]
    NonPositiveTemperature { temperature: f64 },
    #[error("{set} step {step} outside 1..={num_steps}")]
    StepOutOfRange {
        set: &'static str,
        step: usize,
        num_steps: usize,
    },
    #[error("overlapping stage sets")]
    OverlappingStageSets,
    #[error("pivot outside mid stage (pivot step {pivot})")]
    PivotOutsideMidStage { pivot: usize },
    #[error("mid stage must end before the last step: {last} >= {num_steps}")]
    MidStageReachesEnd { last: usize, num_steps: usize },
    #[error("alpha_pivot {alpha} outside [0, 1]")]
    AlphaPivotOutOfRange { alpha: f64 },
    #[error("decay rate must be positive, got {rate}")]
    NonPositiveDecayRate { rate: f64 },
    #[error("anchor index is 1-based and cannot be 0")]
    ZeroAnchor,
}

/// Validates both configs together, reporting every violation at once.
pub fn validate_config(
    generation: GenerationConfig,
    intervention: InterventionConfig,
) -> Result<(GenerationConfig, InterventionConfig), Vec<ConfigError>> {
    let mut errors = generation.validate();
    errors.extend(intervention.validate(generation.num_steps));
    if errors.is_empty() {
        Ok((generation, intervention))
    } else {
        Err(errors)
    }
}

/// The on-disk config document: both sections optional, defaults filled in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigDocument {
    pub generation: GenerationConfig,
    pub intervention: InterventionConfig,
}

impl ConfigDocument {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
