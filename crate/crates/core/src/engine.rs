//! The S-step next-scale generation loop with intervention hooks.
//!
//! Per step `s`: resize the accumulated features onto the step's token
//! grid, predict residual logits (with value injection installed for
//! `s ∈ S_m`), sample and accumulate the residual, then rewrite the
//! accumulated features with replacement (`s ∈ S_e`) or pivotal
//! interpolation (`s = s̄`). The final features are decoded to images.

use crate::backend::{
    embed_text, sample_residual, Architecture, AttentionHook, Decoder, TransformerWeights,
};
use crate::config::{validate_config, GenerationConfig, InterventionConfig};
use crate::error::{Error, Result};
use crate::interventions::{pivotal_interpolate, replace_initial, ScheduleFunction, ValueHook};
use crate::pipeline::{resize_for_step, BinaryQuantizer, Pyramid};
use crate::types::{FeatureMap, ImageBatch, PromptEmbedding};

/// Accumulated features after a completed step, post-intervention.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSnapshot {
    pub step: usize,
    pub accumulated: FeatureMap,
}

/// Counts of what one run actually did.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunStats {
    pub forward_calls: usize,
    pub replacements: usize,
    pub pivot_interpolations: usize,
    pub hook_installations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub images: ImageBatch,
    pub final_features: FeatureMap,
    pub snapshots: Option<Vec<StepSnapshot>>,
    pub stats: RunStats,
}

/// Mutable loop state of a single run.
struct RunState<'a> {
    step: usize,
    pyramid: Pyramid,
    prompts: Vec<PromptEmbedding>,
    generation: &'a GenerationConfig,
    snapshots: Option<Vec<StepSnapshot>>,
    stats: RunStats,
}

/// A model instance: weights, decoder and quantizer derived from one seed.
#[derive(Clone, Debug)]
pub struct Generator {
    config: GenerationConfig,
    weights: TransformerWeights,
    decoder: Decoder,
    quantizer: BinaryQuantizer,
}

impl Generator {
    pub fn new(config: &GenerationConfig) -> Result<Self> {
        Generator::with_architecture(config, Architecture::default())
    }

    pub fn with_architecture(config: &GenerationConfig, arch: Architecture) -> Result<Self> {
        let errors = config.validate();
        if !errors.is_empty() {
            return Err(Error::InvalidConfig(errors));
        }
        Ok(Generator {
            config: config.clone(),
            weights: TransformerWeights::new(config, arch, config.seed)?,
            decoder: Decoder::new(config, config.seed)?,
            quantizer: BinaryQuantizer::for_config(config)?,
        })
    }

    pub fn config(&self) -> &GenerationConfig {
        &self.config
    }

    pub fn weights(&self) -> &TransformerWeights {
        &self.weights
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn quantizer(&self) -> &BinaryQuantizer {
        &self.quantizer
    }

    pub fn embed_prompts<S: AsRef<str>>(&self, prompts: &[S]) -> Result<Vec<PromptEmbedding>> {
        if prompts.is_empty() {
            return Err(Error::Input("at least one prompt is required".into()));
        }
        prompts
            .iter()
            .map(|p| embed_text(p.as_ref(), self.config.seed))
            .collect()
    }

    pub fn generate<S: AsRef<str>>(
        &self,
        prompts: &[S],
        intervention: &InterventionConfig,
        trace: bool,
    ) -> Result<Generation> {
        let errors = intervention.validate(self.config.num_steps);
        if !errors.is_empty() {
            return Err(Error::InvalidConfig(errors));
        }
        let embeddings = self.embed_prompts(prompts)?;
        let batch = embeddings.len();
        if intervention.anchor_index > batch {
            return Err(Error::range(
                "anchor index",
                intervention.anchor_index,
                batch,
            ));
        }
        let schedule = ScheduleFunction::new(
            intervention.schedule,
            intervention.decay_rate,
            self.config.num_steps,
        )?;

        let mut state = RunState {
            step: 0,
            pyramid: Pyramid::new(batch, self.config.channels, self.config.feature_res())?,
            prompts: embeddings,
            generation: &self.config,
            snapshots: trace.then(Vec::new),
            stats: RunStats::default(),
        };
        let sos = self.weights.sos_features(&state.prompts)?;

        for step in 1..=state.generation.num_steps {
            let input = if step == 1 {
                sos.clone()
            } else {
                resize_for_step(state.pyramid.accumulated(), step, state.generation)?
            };

            let hook = if intervention.enable_injection && intervention.mid_steps.contains(&step) {
                state.stats.hook_installations += 1;
                Some(ValueHook::new(
                    schedule.at_step(step)?,
                    intervention.anchor_index,
                )?)
            } else {
                None
            };
            let logits = self.weights.forward_step(
                &input,
                &state.prompts,
                step,
                hook.as_ref().map(|h| h as &dyn AttentionHook),
            )?;
            state.stats.forward_calls += 1;

            let residual = sample_residual(
                &logits,
                state.generation.sampling_mode,
                state.generation.temperature,
                state.generation.seed,
                step,
                &self.quantizer,
            )?;
            state.pyramid = state.pyramid.accumulate(residual)?;

            if intervention.enable_replacement && intervention.early_steps.contains(&step) {
                let replaced =
                    replace_initial(state.pyramid.accumulated(), intervention.anchor_index)?;
                state.pyramid = state.pyramid.apply_edit(replaced)?;
                state.stats.replacements += 1;
            }
            if intervention.enable_pivot && step == intervention.pivot_step {
                let blended = pivotal_interpolate(
                    state.pyramid.accumulated(),
                    intervention.alpha_pivot,
                    intervention.anchor_index,
                )?;
                state.pyramid = state.pyramid.apply_edit(blended)?;
                state.stats.pivot_interpolations += 1;
            }

            if state
                .pyramid
                .accumulated()
                .as_slice()
                .iter()
                .any(|v| !v.is_finite())
            {
                return Err(Error::NonFinite {
                    what: "accumulated features",
                    step,
                });
            }
            state.step = step;
            if let Some(snapshots) = state.snapshots.as_mut() {
                snapshots.push(StepSnapshot {
                    step,
                    accumulated: state.pyramid.accumulated().clone(),
                });
            }
        }
        debug_assert_eq!(state.step, self.config.num_steps);

        let final_features = state.pyramid.accumulated().clone();
        Ok(Generation {
            images: self.decoder.decode(&final_features)?,
            final_features,
            snapshots: state.snapshots,
            stats: state.stats,
        })
    }

    /// Baseline (all interventions off) and intervened runs from the same
    /// model and seed. Residual draws are keyed per element, so the two
    /// runs consume identical random numbers.
    pub fn generate_pair<S: AsRef<str>>(
        &self,
        prompts: &[S],
        intervention: &InterventionConfig,
    ) -> Result<(ImageBatch, ImageBatch)> {
        let baseline = self.generate(prompts, &intervention.disabled(), false)?;
        let intervened = self.generate(prompts, intervention, false)?;
        Ok((baseline.images, intervened.images))
    }
}

/// Validates both configs, builds the model for `generation.seed` and runs it.
pub fn generate<S: AsRef<str>>(
    prompts: &[S],
    generation: &GenerationConfig,
    intervention: &InterventionConfig,
    trace: bool,
) -> Result<Generation> {
    let (generation, intervention) =
        validate_config(generation.clone(), intervention.clone()).map_err(Error::InvalidConfig)?;
    Generator::new(&generation)?.generate(prompts, &intervention, trace)
}

pub fn generate_pair<S: AsRef<str>>(
    prompts: &[S],
    generation: &GenerationConfig,
    intervention: &InterventionConfig,
) -> Result<(ImageBatch, ImageBatch)> {
    let (generation, intervention) =
        validate_config(generation.clone(), intervention.clone()).map_err(Error::InvalidConfig)?;
    Generator::new(&generation)?.generate_pair(prompts, &intervention)
}
