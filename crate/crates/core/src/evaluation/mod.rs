//! Embedding extraction, cosine scoring, EER / MinDCF and trial-list I/O.

mod metrics;
mod trials;

pub use metrics::{cosine_score, det_metrics, eer, min_dcf, DetMetrics, Scored};
pub use trials::{
    format_scores, format_trials, label_scores, make_trials, parse_scores, parse_trials, utterance_id, Trial,
};

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use crate::architecture::{ForwardCtx, Mode, Model};
use crate::error::{Error, Result};
use crate::features::{file_stem, Mfcc};
use crate::numerics::{read_tensors, write_tensors, NamedTensor, Tape, Tensor};

/// Full-utterance embedding in eval mode (running batch-norm statistics).
pub fn extract_embedding(model: &Model, feats: &Mfcc) -> Result<Vec<f64>> {
    let x = feats.coeffs.reshape(&[1, feats.num_coeffs(), feats.num_frames()])?;
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::new(&mut tape, &model.params, Mode::Eval);
    let input = ctx.tape.constant(x);
    let out = model.network.forward(&mut ctx, input)?;
    let emb = tape.value(out.embedding);
    if !emb.is_finite() {
        return Err(Error::Numeric("non-finite embedding".into()));
    }
    Ok(emb.data().to_vec())
}

/// Cosine score of every trial; a missing embedding names the utterance.
pub fn score_trials(trials: &[Trial], embeddings: &HashMap<String, Vec<f64>>) -> Result<Vec<f64>> {
    let get = |id: &str| {
        embeddings
            .get(id)
            .ok_or_else(|| Error::Data(format!("no embedding for utterance '{id}'")))
    };
    trials
        .iter()
        .map(|t| cosine_score(get(&t.enroll)?, get(&t.test)?))
        .collect()
}

/// Directory with one tensor-container file per utterance embedding.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dir: PathBuf,
}

impl EmbeddingStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{}.emb", file_stem(id)))
    }

    pub fn put(&self, id: &str, embedding: &[f64]) -> Result<()> {
        let t = Tensor::new(&[embedding.len()], embedding.to_vec())?;
        write_tensors(BufWriter::new(File::create(self.path_for(id))?), &[NamedTensor::new(id, t)])
    }

    pub fn get(&self, id: &str) -> Result<Vec<f64>> {
        let path = self.path_for(id);
        if !path.exists() {
            return Err(Error::Data(format!("no embedding for utterance '{id}' ({})", path.display())));
        }
        let mut tensors = read_tensors(BufReader::new(File::open(&path)?))?;
        match tensors.pop() {
            Some(t) if tensors.is_empty() && t.name == id && t.tensor.rank() == 1 => Ok(t.tensor.into_vec()),
            _ => Err(Error::Format(format!("{}: not an embedding of '{id}'", path.display()))),
        }
    }

    /// Loads the embeddings of every utterance the trials mention.
    pub fn load_for(&self, trials: &[Trial]) -> Result<HashMap<String, Vec<f64>>> {
        let mut out = HashMap::new();
        for id in trials.iter().flat_map(|t| [&t.enroll, &t.test]) {
            if !out.contains_key(id) {
                out.insert(id.clone(), self.get(id)?);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::tiny_config;

    #[test]
    fn embedding_shape_and_determinism() {
        let model = Model::new(tiny_config(8), 3).unwrap();
        for t in [1, 7, 40] {
            let feats = Mfcc::new(Tensor::full(&[8, t], 0.3).map(|v| v * t as f64)).unwrap();
            let a = extract_embedding(&model, &feats).unwrap();
            assert_eq!(a.len(), model.config.embedding_dim);
            assert_eq!(a, extract_embedding(&model, &feats).unwrap());
        }
    }

    #[test]
    fn store_round_trip_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let store = EmbeddingStore::open(dir.path()).unwrap();
        store.put("spk/u1", &[0.25, -1.0]).unwrap();
        assert_eq!(store.get("spk/u1").unwrap(), vec![0.25, -1.0]);
        let err = store.get("spk/u2").unwrap_err().to_string();
        assert!(err.contains("spk/u2"));
    }
}
