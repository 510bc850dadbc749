//! One experiment end to end: corpus, training, held-out retrieval and the
//! per-source negative log-probability diagnostic.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{CorpusSource, ExperimentConfig};
use crate::encoders::EncoderParams;
use crate::engine::{train_new, StepRecord, TrainOutcome};
use crate::error::Result;
use crate::eval::{evaluate_split, probe_logp_per_source, RetrievalReport};
use crate::numerics::SeedContext;
use crate::sampling::SourceId;
use crate::synthdata::{generate_corpus, read_corpus, Corpus, CorruptionStats};

pub fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    match &cfg.corpus {
        CorpusSource::Preset => generate_corpus(&cfg.corpus_spec(), &cfg.corpus_context()),
        CorpusSource::Directory(dir) => read_corpus(dir),
    }
}

/// `batches × batch_size` distinct training indices, shuffled with a stream
/// that depends only on the corpus, so runs on one corpus share probes.
pub fn probe_indices(train_len: usize, batches: usize, batch_size: usize, ctx: &SeedContext) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..train_len).collect();
    idx.shuffle(&mut ctx.derive("probe").rng());
    idx.truncate((batches * batch_size).min(train_len) / batch_size * batch_size);
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub retrieval: RetrievalReport,
    /// Mean log p̄ over negatives per source on mixed probe batches drawn from
    /// the training split, evaluated with the final model.
    pub probe_logp_neg_per_source: BTreeMap<SourceId, f64>,
    pub steps: u64,
    pub final_tau: f64,
    pub corruption: CorruptionStats,
}

/// Retrieval on the eval split plus the probe diagnostic.
pub fn assess(params: &EncoderParams, corpus: &Corpus, cfg: &ExperimentConfig) -> Result<(RetrievalReport, BTreeMap<SourceId, f64>)> {
    let retrieval = evaluate_split(params, &corpus.eval)?;
    let probes = probe_indices(corpus.train.len(), cfg.probe_batches, cfg.batch_size, &cfg.corpus_context());
    let logp = probe_logp_per_source(params, &corpus.train, &probes, cfg.batch_size)?;
    Ok((retrieval, logp))
}

pub fn run_experiment(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    observer: &mut dyn FnMut(&StepRecord),
) -> Result<(TrainOutcome, ExperimentReport)> {
    let ctx = cfg.train_context();
    let dims = cfg.dims(corpus.spec.d_patch, corpus.spec.vocab);
    let outcome = train_new(dims, cfg.dropout, corpus, &cfg.train_config(), &ctx, observer)?;
    let (retrieval, logp) = assess(&outcome.params, corpus, cfg)?;
    let report = ExperimentReport {
        retrieval,
        probe_logp_neg_per_source: logp,
        steps: outcome.steps,
        final_tau: outcome.params.tau,
        corruption: outcome.corruption,
    };
    Ok((outcome, report))
}
