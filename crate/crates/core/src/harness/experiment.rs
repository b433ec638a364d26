use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ExperimentConfig, VocabularyConfig};
use super::dataset::Dataset;
use super::metrics::{summarize, SummaryReport};
use super::report::ResultRecord;
use super::HarnessError;
use crate::features::Descriptor;
use crate::imaging::GrayImage;
use crate::pipelines::{Localizer, PipelineError, Query, RunRecord};
use crate::retrieval::{build_vocabulary_with, InvertedIndex};

/// Disjoint query and reference frame lists, both sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub queries: Vec<usize>,
    pub references: Vec<usize>,
}

/// Seeded random split with `round(n · fraction)` queries (at least one, and
/// at least one reference left when `n > 1`).
pub fn split_queries(n: usize, fraction: f64, seed: u64) -> Split {
    if n == 0 {
        return Split { queries: Vec::new(), references: Vec::new() };
    }
    let count = ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queries = sample(&mut rng, n, count).into_vec();
    queries.sort_unstable();
    let references = (0..n).filter(|i| queries.binary_search(i).is_err()).collect();
    Split { queries, references }
}

/// Per-query seed so that results do not depend on processing order.
pub fn query_seed(seed: u64, query: usize) -> u64 {
    seed ^ (query as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Builds a vocabulary from a seeded subsample of the reference descriptors
/// and indexes every reference frame.
pub fn build_reference_index(
    localizer: &Localizer,
    references: &[usize],
    cfg: &VocabularyConfig,
    seed: u64,
) -> Result<InvertedIndex, HarnessError> {
    let all: Vec<&Descriptor> =
        references.iter().flat_map(|&f| localizer.reference_features(f).descriptors.iter()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked: Vec<Descriptor> = if all.len() > cfg.sample {
        let mut idx = sample(&mut rng, all.len(), cfg.sample).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| all[i].clone()).collect()
    } else {
        all.into_iter().cloned().collect()
    };
    let vocab = build_vocabulary_with(&picked, cfg.size, seed, cfg.iterations)?;
    let docs: Vec<(usize, &[Descriptor])> =
        references.iter().map(|&f| (f, localizer.reference_features(f).descriptors.as_slice())).collect();
    Ok(InvertedIndex::build(vocab, &docs)?)
}

fn to_record(query: usize, run: &RunRecord, timing_ms: Option<f64>) -> ResultRecord {
    ResultRecord {
        query_id: query,
        method: run.method.to_string(),
        fusion: run.fusion.map(|f| f.to_string()).unwrap_or_default(),
        references: run.references.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(";"),
        status: run.estimate.status.as_str().to_string(),
        fallback: run.estimate.fallback.map(|f| f.as_str().to_string()).unwrap_or_default(),
        translation_error: run.translation_error,
        orientation_error: run.orientation_error,
        timing_ms,
    }
}

fn error_record(query: usize, method: &str, err: &PipelineError) -> ResultRecord {
    let status = match err {
        PipelineError::NoReferenceInRadius { .. } => "no_reference_in_radius",
        PipelineError::EmptyIndex => "empty_index",
        PipelineError::NoCandidates => "no_candidates",
    };
    ResultRecord {
        query_id: query,
        method: method.to_string(),
        status: status.to_string(),
        translation_error: f64::NAN,
        orientation_error: f64::NAN,
        ..Default::default()
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub split: Split,
    pub records: Vec<ResultRecord>,
    pub summary: SummaryReport,
}

/// Runs every configured method on every query of the seeded split.
///
/// `index` is used for large-uncertainty runs; when absent one is built from
/// the reference frames.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    index: Option<&InvertedIndex>,
) -> Result<ExperimentOutput, HarnessError> {
    cfg.validate()?;
    let split = split_queries(dataset.len(), cfg.query_fraction, cfg.seed);
    let localizer = Localizer::new(dataset, cfg.pipeline());
    let built;
    let index = match (cfg.large_uncertainty, index) {
        (false, _) => None,
        (true, Some(i)) => Some(i),
        (true, None) => {
            built = build_reference_index(&localizer, &split.references, &cfg.vocabulary, cfg.seed)?;
            Some(&built)
        }
    };
    let corruption = cfg.corruption;
    let apply = move |img: &GrayImage| corruption.expect("checked").apply(img);
    let mut records = Vec::new();
    for &q in &split.queries {
        let query: Query = match corruption {
            None => localizer.query_from_frame(q, None),
            Some(c) => localizer.query_from_frame(q, Some((&format!("{c:?}"), &apply))),
        };
        let seed = query_seed(cfg.seed, q);
        for &method in &cfg.methods {
            let start = Instant::now();
            let run = match index {
                Some(index) => localizer.run_large_uncertainty(
                    &query,
                    &split.references,
                    index,
                    Some(cfg.radius),
                    method,
                    cfg.refs,
                    cfg.fusion,
                ),
                None if cfg.refs == 1 => {
                    localizer.run_single_reference(&query, &split.references, cfg.radius, method, seed)
                }
                None => localizer.run_multi_reference(
                    &query,
                    &split.references,
                    cfg.radius,
                    method,
                    cfg.refs,
                    cfg.fusion,
                    seed,
                ),
            };
            let timing = cfg.record_timing.then(|| start.elapsed().as_secs_f64() * 1e3);
            records.push(match run {
                Ok(run) => to_record(q, &run, timing),
                Err(e) => error_record(q, method.as_str(), &e),
            });
        }
    }
    let summary = summarize(&records, cfg.threshold)?;
    Ok(ExperimentOutput { split, records, summary })
}
