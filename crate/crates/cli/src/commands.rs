//! One function per subcommand. Each overwrites its outputs, so reruns with
//! the same inputs and seeds leave byte-identical files.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use maccif_core::architecture::{load_model, save_model};
use maccif_core::evaluation::{
    det_metrics, extract_embedding, format_scores, format_trials, label_scores, parse_scores, parse_trials,
    score_trials, utterance_id, EmbeddingStore, Trial,
};
use maccif_core::experiment::held_out_set;
use maccif_core::features::{wav_features, FeatureCache, Mfcc};
use maccif_core::training::{load_wav_corpus, make_synthetic_corpus, train as train_model, TrainOutputs};
use maccif_core::verify::gradient_suite;
use maccif_core::{Error, Model, Result};

use crate::RunConfig;

/// Mean over this many trailing iterations is reported as the final loss.
const FINAL_WINDOW: usize = 50;

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    parse_trials(&read_text(path)?).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        e => e,
    })
}

pub fn train(cfg: &RunConfig, synthetic: bool, deterministic: bool, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let data = if synthetic {
        make_synthetic_corpus(&cfg.corpus)?.dataset
    } else {
        let dir = cfg.paths.corpus_dir.as_ref().ok_or_else(|| {
            Error::Config("no corpus: set paths.corpus_dir or pass --synthetic".into())
        })?;
        let cache = cfg.paths.feature_cache.as_ref().map(FeatureCache::open).transpose()?;
        let (data, speakers) = load_wav_corpus(dir, cache.as_ref())?;
        info!("{} utterances from {} speakers", data.len(), speakers.len());
        data
    };
    if data.feature_dim() != cfg.network.input_dim {
        return Err(Error::Config(format!(
            "network.input_dim is {} but the features have {} coefficients",
            cfg.network.input_dim,
            data.feature_dim()
        )));
    }
    // the classifier always matches the corpus
    let mut cfg = cfg.clone();
    cfg.network.num_speakers = data.num_speakers;

    let mut model = Model::new(cfg.network.clone(), cfg.train.seed)?;
    let mut echo = cfg.entries();
    echo.push(("synthetic".into(), synthetic.to_string()));
    echo.push(("deterministic".into(), deterministic.to_string()));
    let mut trace = BufWriter::new(File::create(out.join("trace.tsv"))?);
    let report = train_model(
        &mut model,
        &data,
        &cfg.train,
        &mut TrainOutputs {
            trace: Some(&mut trace),
            checkpoint_dir: Some(cfg.paths.checkpoint_dir.clone().unwrap_or_else(|| out.to_path_buf())),
            echo: echo.clone(),
        },
    )?;
    trace.flush()?;
    let model_path = out.join("model.ckpt");
    save_model(&model_path, &model, report.losses.len() as u64, &echo)?;
    println!(
        "iterations={} initial_loss={:.6} final_loss={:.6} seconds={:.1} model={}",
        report.losses.len(),
        report.initial_loss().unwrap_or(f64::NAN),
        report.final_loss(FINAL_WINDOW).unwrap_or(f64::NAN),
        report.seconds,
        model_path.display()
    );
    Ok(())
}

/// Held-out utterances of the synthetic speakers as a feature cache, an
/// utterance list and a trial list.
pub fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let corpus = make_synthetic_corpus(&cfg.corpus)?;
    let set = held_out_set(&corpus, &cfg.eval)?;
    let cache = FeatureCache::open(out.join("features"))?;
    let mut list = String::new();
    for u in &set.utterances {
        cache.put(&u.id, &u.feats)?;
        list.push_str(&u.id);
        list.push('\n');
    }
    fs::write(out.join("utts.txt"), list)?;
    fs::write(out.join("trials.txt"), format_trials(&set.trials))?;
    println!(
        "utterances={} trials={} dir={}",
        set.utterances.len(),
        set.trials.len(),
        out.display()
    );
    Ok(())
}

pub struct ExtractArgs {
    pub checkpoint: PathBuf,
    pub utts: Option<PathBuf>,
    pub trials: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub audio_root: Option<PathBuf>,
    pub out: PathBuf,
}

fn features_for(path: &str, id: &str, cache: Option<&FeatureCache>, root: Option<&Path>) -> Result<Mfcc> {
    let compute = || match root {
        Some(r) => wav_features(&r.join(path)),
        None => Err(Error::Data(format!(
            "no features for utterance '{id}' and no audio root to compute them from"
        ))),
    };
    match cache {
        Some(c) => c.get_or_insert_with(id, compute),
        None => compute(),
    }
}

pub fn extract(a: &ExtractArgs) -> Result<()> {
    // list paths, deduplicated in first-seen order
    let paths: Vec<String> = match (&a.utts, &a.trials) {
        (Some(list), _) => read_text(list)?
            .lines()
            .filter_map(|l| l.split_whitespace().next())
            .map(String::from)
            .collect(),
        (None, Some(trials)) => read_text(trials)?
            .lines()
            .flat_map(|l| l.split_whitespace().skip(1).take(2))
            .map(String::from)
            .collect(),
        (None, None) => {
            return Err(Error::Config(
                "nothing to extract: pass --utts or --trials (or set paths.trial_list)".into(),
            ))
        }
    };
    let mut seen = BTreeSet::new();
    let paths: Vec<String> = paths.into_iter().filter(|p| seen.insert(utterance_id(p))).collect();

    let (model, header) = load_model(&a.checkpoint)?;
    info!("{}: iteration {}", a.checkpoint.display(), header.iteration);
    let cache = a.features.as_ref().map(FeatureCache::open).transpose()?;
    let store = EmbeddingStore::open(&a.out)?;
    for path in &paths {
        let id = utterance_id(path);
        let feats = features_for(path, &id, cache.as_ref(), a.audio_root.as_deref())?;
        if feats.num_coeffs() != model.config.input_dim {
            return Err(Error::Data(format!(
                "utterance '{id}': {} coefficients, model expects {}",
                feats.num_coeffs(),
                model.config.input_dim
            )));
        }
        let emb = extract_embedding(&model, &feats).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("utterance '{id}': {msg}")),
            e => e,
        })?;
        store.put(&id, &emb)?;
    }
    println!("embeddings={} dir={}", paths.len(), a.out.display());
    Ok(())
}

pub fn score(embeddings: &Path, trials: &Path, out: &Path) -> Result<()> {
    if !embeddings.is_dir() {
        return Err(Error::Data(format!("{}: no such embedding directory", embeddings.display())));
    }
    let trials = read_trials(trials)?;
    let store = EmbeddingStore::open(embeddings)?;
    let table = store.load_for(&trials)?;
    let scores = score_trials(&trials, &table)?;
    fs::write(out, format_scores(&trials, &scores))?;
    println!("trials={} scores={}", trials.len(), out.display());
    Ok(())
}

pub fn eval(scores: &Path, trials: &Path, out: Option<&Path>) -> Result<()> {
    let trials = read_trials(trials)?;
    let table = parse_scores(&read_text(scores)?)?;
    let metrics = det_metrics(&label_scores(&trials, &table)?)?;
    let line = metrics.report_line();
    if let Some(out) = out {
        fs::write(out, format!("{line}\n"))?;
    }
    println!("{line}");
    Ok(())
}

pub fn gradcheck(seed: u64, max_dim: usize) -> Result<()> {
    let checks = gradient_suite(seed, max_dim)?;
    let mut failing = Vec::new();
    for c in &checks {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        println!("{verdict:4} {:<32} max_rel_error={:.3e} coords={}", c.name, c.max_rel_error, c.coordinates);
        if !c.passed() {
            failing.push(c.name.clone());
        }
    }
    if failing.is_empty() {
        println!("all {} gradient checks passed", checks.len());
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "{} of {} gradient checks failed: {}",
            failing.len(),
            checks.len(),
            failing.join(", ")
        )))
    }
}
