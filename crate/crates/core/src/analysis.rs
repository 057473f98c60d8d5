//! Measurement harness: per-step traces against the final output, the
//! nested intervention ablation, and schedule-function comparisons.
//!
//! Grid cells run in parallel across seeds; results are assembled in seed
//! order and every sum runs in a fixed order, so reruns are bit-identical.

use std::io::{self, Write};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{GenerationConfig, InterventionConfig};
use crate::engine::{Generation, Generator};
use crate::error::{Error, Result};
use crate::interventions::ScheduleKind;
use crate::metrics::{chi_square, cosine, style_consistency_of, ConsistencyReport, MetricSuite};

/// Measurements of one step's decoded preview.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    /// Mean chi-square between each image's histogram at this step and at the final step.
    pub rgb_chi_square: f64,
    /// Mean content-descriptor cosine between this step and the final step, per image.
    pub content_similarity: f64,
    /// Pairwise style consistency within the batch at this step.
    pub style_similarity: f64,
    /// Mean chi-square between the anchor image and every other image at this step.
    pub anchor_rgb_chi_square: f64,
}

/// Generates with tracing on, decodes every step's accumulated features
/// with the final decoder and measures each against the final step.
pub fn trace_run<S: AsRef<str>>(
    prompts: &[S],
    generation: &GenerationConfig,
    intervention: &InterventionConfig,
    suite: &MetricSuite,
) -> Result<Vec<StepTrace>> {
    if prompts.len() < 2 {
        return Err(Error::Input("tracing needs at least 2 prompts".into()));
    }
    let generator = Generator::new(generation)?;
    let run = generator.generate(prompts, intervention, true)?;
    trace_generation(&generator, &run, intervention.anchor_index, suite)
}

/// Measures an already traced run. `anchor_index` is 1-based.
pub fn trace_generation(
    generator: &Generator,
    run: &Generation,
    anchor_index: usize,
    suite: &MetricSuite,
) -> Result<Vec<StepTrace>> {
    let snapshots = run
        .snapshots
        .as_ref()
        .ok_or_else(|| Error::Input("run was generated without tracing".into()))?;
    if run.images.len() < 2 {
        return Err(Error::Input("tracing needs at least 2 prompts".into()));
    }
    if anchor_index == 0 || anchor_index > run.images.len() {
        return Err(Error::range("anchor index", anchor_index, run.images.len()));
    }
    let anchor = anchor_index - 1;

    let mut measured = Vec::with_capacity(snapshots.len());
    for snap in snapshots {
        let images = generator.decoder().decode(&snap.accumulated)?;
        measured.push((suite.histograms(&images)?, suite.describe_all(&images)?));
    }
    let (final_hist, final_desc) = measured.last().expect("at least one step");

    let mut traces = Vec::with_capacity(snapshots.len());
    for (snap, (hists, descs)) in snapshots.iter().zip(&measured) {
        let n = hists.len();
        let mut rgb = 0.0;
        let mut content = 0.0;
        for i in 0..n {
            rgb += chi_square(&hists[i], &final_hist[i])?;
            content += cosine(&descs[i].content_vector, &final_desc[i].content_vector);
        }
        let mut anchor_rgb = 0.0;
        for i in (0..n).filter(|&i| i != anchor) {
            anchor_rgb += chi_square(&hists[anchor], &hists[i])?;
        }
        traces.push(StepTrace {
            step: snap.step,
            rgb_chi_square: rgb / n as f64,
            content_similarity: content / n as f64,
            style_similarity: style_consistency_of(descs)?,
            anchor_rgb_chi_square: anchor_rgb / (n - 1) as f64,
        });
    }
    Ok(traces)
}

/// CSV with header `step,rgb_chi2,content_sim,style_sim`.
pub fn write_trace_csv<W: Write>(traces: &[StepTrace], mut out: W) -> io::Result<()> {
    writeln!(out, "step,rgb_chi2,content_sim,style_sim")?;
    for t in traces {
        writeln!(
            out,
            "{},{:?},{:?},{:?}",
            t.step, t.rgb_chi_square, t.content_similarity, t.style_similarity
        )?;
    }
    Ok(())
}

/// The four nested configurations: none, +replacement, +pivot, +injection.
pub const ABLATION_FLAGS: [(&str, bool, bool, bool); 4] = [
    ("a", false, false, false),
    ("b", true, false, false),
    ("c", true, true, false),
    ("d", true, true, true),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub replacement: bool,
    pub pivot: bool,
    pub injection: bool,
    pub s_dual: f64,
    pub s_obj: f64,
    pub s_sty: f64,
    pub seeds: Vec<u64>,
    /// Mean over prompt sets, one entry per seed.
    pub per_seed_s_obj: Vec<f64>,
    pub per_seed_s_sty: Vec<f64>,
    pub runtime_seconds_per_image: f64,
}

struct Cell {
    report: ConsistencyReport,
    seconds: f64,
    images: usize,
}

fn check_grid_inputs(prompt_sets: &[Vec<String>], seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::Input("at least one seed is required".into()));
    }
    if prompt_sets.is_empty() {
        return Err(Error::Input("at least one prompt set is required".into()));
    }
    if let Some(bad) = prompt_sets.iter().position(|s| s.len() < 2) {
        return Err(Error::Input(format!(
            "prompt set {} has fewer than 2 prompts",
            bad + 1
        )));
    }
    Ok(())
}

/// Runs every intervention config on every prompt set for one seed.
fn run_seed(
    generation: &GenerationConfig,
    seed: u64,
    prompt_sets: &[Vec<String>],
    configs: &[InterventionConfig],
    suite: &MetricSuite,
) -> Result<Vec<Vec<Cell>>> {
    let generator = Generator::new(&generation.with_seed(seed))?;
    configs
        .iter()
        .map(|config| {
            prompt_sets
                .iter()
                .map(|prompts| {
                    let start = Instant::now();
                    let run = generator.generate(prompts, config, false)?;
                    let seconds = start.elapsed().as_secs_f64();
                    Ok(Cell {
                        report: suite.evaluate(&run.images, prompts)?,
                        seconds,
                        images: prompts.len(),
                    })
                })
                .collect()
        })
        .collect()
}

struct Aggregate {
    s_obj: f64,
    s_sty: f64,
    per_seed_obj: Vec<f64>,
    per_seed_sty: Vec<f64>,
    seconds_per_image: f64,
}

/// Means over `results[seed][config][prompt_set]` for one config.
fn aggregate(results: &[Vec<Vec<Cell>>], config: usize) -> Aggregate {
    let mut per_seed_obj = Vec::with_capacity(results.len());
    let mut per_seed_sty = Vec::with_capacity(results.len());
    let mut seconds = 0.0;
    let mut images = 0;
    for seed_cells in results {
        let cells = &seed_cells[config];
        let k = cells.len() as f64;
        per_seed_obj.push(cells.iter().map(|c| c.report.s_obj).sum::<f64>() / k);
        per_seed_sty.push(cells.iter().map(|c| c.report.s_sty).sum::<f64>() / k);
        seconds += cells.iter().map(|c| c.seconds).sum::<f64>();
        images += cells.iter().map(|c| c.images).sum::<usize>();
    }
    let n = results.len() as f64;
    Aggregate {
        s_obj: per_seed_obj.iter().sum::<f64>() / n,
        s_sty: per_seed_sty.iter().sum::<f64>() / n,
        per_seed_obj,
        per_seed_sty,
        seconds_per_image: seconds / images.max(1) as f64,
    }
}

/// Rows (a)–(d) of the nested ablation with shared seeds.
pub fn ablation_grid(
    prompt_sets: &[Vec<String>],
    seeds: &[u64],
    generation: &GenerationConfig,
    base: &InterventionConfig,
    suite: &MetricSuite,
) -> Result<Vec<AblationRow>> {
    check_grid_inputs(prompt_sets, seeds)?;
    let configs: Vec<InterventionConfig> = ABLATION_FLAGS
        .iter()
        .map(|&(_, re, pfi, dsi)| base.with_flags(re, pfi, dsi))
        .collect();
    let results = seeds
        .par_iter()
        .map(|&seed| run_seed(generation, seed, prompt_sets, &configs, suite))
        .collect::<Result<Vec<_>>>()?;
    ABLATION_FLAGS
        .iter()
        .enumerate()
        .map(|(i, &(label, re, pfi, dsi))| {
            let agg = aggregate(&results, i);
            Ok(AblationRow {
                label: label.to_string(),
                replacement: re,
                pivot: pfi,
                injection: dsi,
                s_dual: crate::metrics::dual_consistency(agg.s_obj, agg.s_sty)?,
                s_obj: agg.s_obj,
                s_sty: agg.s_sty,
                seeds: seeds.to_vec(),
                per_seed_s_obj: agg.per_seed_obj,
                per_seed_s_sty: agg.per_seed_sty,
                runtime_seconds_per_image: agg.seconds_per_image,
            })
        })
        .collect()
}

/// CSV with header `row,re,pfi,dsi,s_dual,s_obj,s_sty` (runtime lives in
/// the JSON summary so the CSV stays reproducible).
pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], mut out: W) -> io::Result<()> {
    writeln!(out, "row,re,pfi,dsi,s_dual,s_obj,s_sty")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{:?},{:?},{:?}",
            r.label,
            r.replacement as u8,
            r.pivot as u8,
            r.injection as u8,
            r.s_dual,
            r.s_obj,
            r.s_sty
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub kind: ScheduleKind,
    pub report: ConsistencyReport,
    pub seeds: Vec<u64>,
    pub per_seed_s_obj: Vec<f64>,
    pub per_seed_s_sty: Vec<f64>,
    pub runtime_seconds_per_image: f64,
}

/// One full intervention run per schedule kind per seed, metrics averaged.
pub fn schedule_grid(
    prompt_sets: &[Vec<String>],
    seeds: &[u64],
    generation: &GenerationConfig,
    base: &InterventionConfig,
    kinds: &[ScheduleKind],
    suite: &MetricSuite,
) -> Result<Vec<ScheduleRow>> {
    check_grid_inputs(prompt_sets, seeds)?;
    if kinds.is_empty() {
        return Err(Error::Input(
            "at least one schedule kind is required".into(),
        ));
    }
    let configs: Vec<InterventionConfig> = kinds
        .iter()
        .map(|&kind| InterventionConfig {
            schedule: kind,
            ..base.clone()
        })
        .collect();
    let results = seeds
        .par_iter()
        .map(|&seed| run_seed(generation, seed, prompt_sets, &configs, suite))
        .collect::<Result<Vec<_>>>()?;
    kinds
        .iter()
        .enumerate()
        .map(|(i, &kind)| {
            let agg = aggregate(&results, i);
            Ok(ScheduleRow {
                kind,
                report: ConsistencyReport::new(agg.s_obj, agg.s_sty)?,
                seeds: seeds.to_vec(),
                per_seed_s_obj: agg.per_seed_obj,
                per_seed_s_sty: agg.per_seed_sty,
                runtime_seconds_per_image: agg.seconds_per_image,
            })
        })
        .collect()
}

/// CSV with header `schedule,s_dual,s_obj,s_sty`.
pub fn write_schedule_csv<W: Write>(rows: &[ScheduleRow], mut out: W) -> io::Result<()> {
    writeln!(out, "schedule,s_dual,s_obj,s_sty")?;
    for r in rows {
        writeln!(
            out,
            "{},{:?},{:?},{:?}",
            r.kind, r.report.s_dual, r.report.s_obj, r.report.s_sty
        )?;
    }
    Ok(())
}

/// First 16 hex digits of the SHA-256 of `value`'s JSON encoding.
pub fn run_id<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("run identity serializes");
    hex::encode(Sha256::digest(&json))[..16].to_string()
}
