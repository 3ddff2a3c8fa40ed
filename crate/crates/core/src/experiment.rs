//! Synthetic end-to-end run: corpus, training, held-out embeddings and metrics.

use std::collections::HashMap;

use crate::architecture::{Model, NetworkConfig};
use crate::error::Result;
use crate::evaluation::{det_metrics, extract_embedding, make_trials, score_trials, DetMetrics, Scored, Trial};
use crate::training::{make_synthetic_corpus, train, SyntheticCorpus, SyntheticSpec, TrainConfig, TrainOutputs, TrainReport, Utterance};

/// Held-out evaluation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct HeldOut {
    pub utts_per_speaker: usize,
    pub target_trials: usize,
    pub nontarget_trials: usize,
    pub seed: u64,
}

impl Default for HeldOut {
    fn default() -> Self {
        Self {
            utts_per_speaker: 10,
            target_trials: 100,
            nontarget_trials: 100,
            seed: 0x4e1d,
        }
    }
}

pub struct HeldOutSet {
    pub utterances: Vec<Utterance>,
    pub trials: Vec<Trial>,
}

/// Fresh utterances of the corpus speakers plus balanced trials over them.
pub fn held_out_set(corpus: &SyntheticCorpus, h: &HeldOut) -> Result<HeldOutSet> {
    let utterances = corpus.utterances(h.utts_per_speaker, h.seed, "eval/");
    let trials = make_trials(&utterances, h.target_trials, h.nontarget_trials, h.seed.wrapping_add(1))?;
    Ok(HeldOutSet { utterances, trials })
}

pub fn embed_all(model: &Model, utts: &[Utterance]) -> Result<HashMap<String, Vec<f64>>> {
    utts.iter()
        .map(|u| Ok((u.id.clone(), extract_embedding(model, &u.feats)?)))
        .collect()
}

pub struct ExperimentResult {
    pub model: Model,
    pub report: TrainReport,
    pub scores: Vec<f64>,
    pub trials: Vec<Trial>,
    pub metrics: DetMetrics,
    pub embeddings: HashMap<String, Vec<f64>>,
}

/// Trains `net` on the synthetic corpus and scores the held-out trials.
pub fn run_synthetic(
    net: &NetworkConfig,
    train_cfg: &TrainConfig,
    spec: &SyntheticSpec,
    held: &HeldOut,
    out: &mut TrainOutputs<'_>,
) -> Result<ExperimentResult> {
    let corpus = make_synthetic_corpus(spec)?;
    let net = NetworkConfig {
        num_speakers: spec.speakers,
        ..net.clone()
    };
    let mut model = Model::new(net, train_cfg.seed)?;
    let report = train(&mut model, &corpus.dataset, train_cfg, out)?;
    let set = held_out_set(&corpus, held)?;
    let embeddings = embed_all(&model, &set.utterances)?;
    let scores = score_trials(&set.trials, &embeddings)?;
    let scored: Vec<Scored> = set
        .trials
        .iter()
        .zip(&scores)
        .map(|(t, &score)| Scored { score, target: t.target })
        .collect();
    let metrics = det_metrics(&scored)?;
    Ok(ExperimentResult {
        model,
        report,
        scores,
        trials: set.trials,
        metrics,
        embeddings,
    })
}
