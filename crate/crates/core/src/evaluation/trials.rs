use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::metrics::Scored;
use crate::error::{Error, Result};
use crate::training::Utterance;

/// Enrollment/test pair with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub target: bool,
    pub enroll: String,
    pub test: String,
}

/// Utterance id of a list path: the path without its extension.
pub fn utterance_id(path: &str) -> String {
    match path.rsplit_once('.') {
        Some((stem, ext)) if !stem.is_empty() && !ext.contains('/') => stem.to_string(),
        _ => path.to_string(),
    }
}

/// Parses `label enroll test` lines (`1` target, `0` nontarget); blank lines are skipped.
pub fn parse_trials(text: &str) -> Result<Vec<Trial>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let bad = |why: &str| Error::Data(format!("trial list line {}: {why}: '{line}'", n + 1));
        if fields.len() != 3 {
            return Err(bad("expected 3 fields"));
        }
        let target = match fields[0] {
            "1" => true,
            "0" => false,
            _ => return Err(bad("label must be 0 or 1")),
        };
        out.push(Trial {
            target,
            enroll: utterance_id(fields[1]),
            test: utterance_id(fields[2]),
        });
    }
    Ok(out)
}

pub fn format_trials(trials: &[Trial]) -> String {
    let mut s = String::new();
    for t in trials {
        writeln!(s, "{} {} {}", u8::from(t.target), t.enroll, t.test).unwrap();
    }
    s
}

/// Score file body: `score enroll test` with six decimals.
pub fn format_scores(trials: &[Trial], scores: &[f64]) -> String {
    let mut s = String::new();
    for (t, score) in trials.iter().zip(scores) {
        writeln!(s, "{score:.6} {} {}", t.enroll, t.test).unwrap();
    }
    s
}

/// Reads a score file into `(enroll, test) → score`.
pub fn parse_scores(text: &str) -> Result<HashMap<(String, String), f64>> {
    let mut out = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let bad = || Error::Data(format!("score file line {}: '{line}'", n + 1));
        if fields.len() != 3 {
            return Err(bad());
        }
        let score: f64 = fields[0].parse().map_err(|_| bad())?;
        out.insert((utterance_id(fields[1]), utterance_id(fields[2])), score);
    }
    Ok(out)
}

/// Attaches scores to trial labels; a trial without a score is an error.
pub fn label_scores(trials: &[Trial], scores: &HashMap<(String, String), f64>) -> Result<Vec<Scored>> {
    trials
        .iter()
        .map(|t| {
            scores
                .get(&(t.enroll.clone(), t.test.clone()))
                .map(|&score| Scored { score, target: t.target })
                .ok_or_else(|| Error::Data(format!("no score for trial {} {}", t.enroll, t.test)))
        })
        .collect()
}

/// Distinct same-speaker and different-speaker pairs drawn uniformly.
pub fn make_trials(utts: &[Utterance], targets: usize, nontargets: usize, seed: u64) -> Result<Vec<Trial>> {
    let n = utts.len();
    let same = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j)));
    let possible_targets = same.clone().filter(|&(i, j)| utts[i].speaker == utts[j].speaker).count();
    let possible_non = n * n.saturating_sub(1) / 2 - possible_targets;
    if possible_targets < targets || possible_non < nontargets {
        return Err(Error::Data(format!(
            "cannot draw {targets} target / {nontargets} nontarget trials from {n} utterances"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = BTreeSet::new();
    let (mut t, mut nt) = (0, 0);
    let mut out = Vec::with_capacity(targets + nontargets);
    while t < targets || nt < nontargets {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        let (i, j) = (i.min(j), i.max(j));
        if i == j || !chosen.insert((i, j)) {
            continue;
        }
        let target = utts[i].speaker == utts[j].speaker;
        if (target && t < targets) || (!target && nt < nontargets) {
            if target {
                t += 1;
            } else {
                nt += 1;
            }
            out.push(Trial {
                target,
                enroll: utts[i].id.clone(),
                test: utts[j].id.clone(),
            });
        }
    }
    Ok(out)
}
