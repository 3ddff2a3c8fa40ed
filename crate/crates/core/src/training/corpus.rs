use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::features::{wav_features, FeatureCache, Mfcc, NUM_CEPS};
use crate::numerics::Tensor;

/// One labeled utterance's features.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: usize,
    pub feats: Mfcc,
}

/// Utterances with integer speaker labels `0..num_speakers`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
    pub num_speakers: usize,
}

impl Dataset {
    pub fn new(utterances: Vec<Utterance>, num_speakers: usize) -> Result<Self> {
        if utterances.is_empty() {
            return Err(Error::Data("dataset has no utterances".into()));
        }
        if let Some(u) = utterances.iter().find(|u| u.speaker >= num_speakers) {
            return Err(Error::Data(format!("{}: speaker {} >= {num_speakers}", u.id, u.speaker)));
        }
        Ok(Self {
            utterances,
            num_speakers,
        })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.utterances[0].feats.num_coeffs()
    }
}

/// Generative parameters of the desk-scale stand-in corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub speakers: usize,
    pub utts_per_speaker: usize,
    pub frames: usize,
    /// Std of the per-utterance offset around the speaker mean.
    pub noise_scale: f64,
    /// Per-frame jitter, as a fraction of `noise_scale`.
    pub jitter: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn desk(seed: u64) -> Self {
        Self {
            speakers: 8,
            utts_per_speaker: 20,
            frames: 200,
            noise_scale: 1.0,
            jitter: 0.5,
            seed,
        }
    }
}

/// Speaker means plus the generated training utterances.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    /// `[speakers, 80]`
    pub means: Tensor,
    pub dataset: Dataset,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

impl SyntheticCorpus {
    /// Fresh utterances of the same speakers, drawn from an independent stream.
    pub fn utterances(&self, per_speaker: usize, seed: u64, prefix: &str) -> Vec<Utterance> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, s) = (self.spec.frames, &self.spec);
        let mut out = Vec::with_capacity(self.spec.speakers * per_speaker);
        for spk in 0..s.speakers {
            let mean = &self.means.data()[spk * NUM_CEPS..(spk + 1) * NUM_CEPS];
            for u in 0..per_speaker {
                let offset: Vec<f64> = mean.iter().map(|m| m + s.noise_scale * gaussian(&mut rng)).collect();
                let mut data = vec![0.0; NUM_CEPS * t];
                for (k, row) in data.chunks_mut(t).enumerate() {
                    for v in row.iter_mut() {
                        *v = offset[k] + s.noise_scale * s.jitter * gaussian(&mut rng);
                    }
                }
                out.push(Utterance {
                    id: format!("{prefix}spk{spk:02}/utt{u:03}"),
                    speaker: spk,
                    feats: Mfcc::new(Tensor::new(&[NUM_CEPS, t], data).expect("corpus shape")).expect("rank 2"),
                });
            }
        }
        out
    }
}

/// Speaker means uniform in `[−1, 1]^80`; each utterance is its speaker's
/// mean plus a Gaussian offset, tiled over time with per-frame jitter.
pub fn make_synthetic_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    if spec.speakers < 2 || spec.utts_per_speaker < 2 || spec.frames == 0 {
        return Err(Error::Config(
            "synthetic corpus needs at least 2 speakers, 2 utterances each and 1 frame".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = Tensor::uniform(&[spec.speakers, NUM_CEPS], 1.0, &mut rng);
    let mut corpus = SyntheticCorpus {
        spec: spec.clone(),
        means,
        dataset: Dataset {
            utterances: Vec::new(),
            num_speakers: spec.speakers,
        },
    };
    corpus.dataset.utterances = corpus.utterances(spec.utts_per_speaker, spec.seed.wrapping_add(1), "");
    Ok(corpus)
}

fn wav_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            wav_files(&path, out)?;
        } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            out.push(path);
        }
    }
    Ok(())
}

/// Every `.wav` below `dir`, labeled by its first path component
/// (`id10001/1zcIwhmdeo4/00001.wav` belongs to speaker `id10001`). Speakers
/// are numbered in sorted order; ids are relative paths without extension.
pub fn load_wav_corpus(dir: &Path, cache: Option<&FeatureCache>) -> Result<(Dataset, Vec<String>)> {
    let mut files = Vec::new();
    wav_files(dir, &mut files)?;
    files.sort();
    let mut speakers = BTreeMap::new();
    let mut pending = Vec::with_capacity(files.len());
    for path in files {
        let rel = path.strip_prefix(dir).expect("found below dir");
        let parts: Vec<String> = rel.iter().map(|c| c.to_string_lossy().into_owned()).collect();
        if parts.len() < 2 {
            return Err(Error::Data(format!(
                "{}: expected <speaker>/.../<utt>.wav below the corpus dir",
                path.display()
            )));
        }
        let id = crate::evaluation::utterance_id(&parts.join("/"));
        // files are sorted, so first-seen order is sorted speaker order
        let next = speakers.len();
        speakers.entry(parts[0].clone()).or_insert(next);
        pending.push((id, parts[0].clone(), path));
    }
    let mut utterances = Vec::with_capacity(pending.len());
    for (id, spk, path) in pending {
        let feats = match cache {
            Some(c) => c.get_or_insert_with(&id, || wav_features(&path))?,
            None => wav_features(&path)?,
        };
        utterances.push(Utterance {
            id,
            speaker: speakers[&spk],
            feats,
        });
    }
    let names: Vec<String> = speakers.into_keys().collect();
    Ok((Dataset::new(utterances, names.len())?, names))
}
