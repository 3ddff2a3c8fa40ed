use crate::error::{Error, Result};

/// One scored trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub score: f64,
    pub target: bool,
}

/// EER, MinDCF and the interpolated EER threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetMetrics {
    pub eer: f64,
    pub min_dcf: f64,
    pub threshold_at_eer: f64,
}

impl DetMetrics {
    /// `eer=<v> min_dcf=<v> threshold=<v>` with six decimals.
    pub fn report_line(&self) -> String {
        format!(
            "eer={:.6} min_dcf={:.6} threshold={:.6}",
            self.eer, self.min_dcf, self.threshold_at_eer
        )
    }
}

/// Miss and false-alarm rates at every threshold of the sweep.
struct Sweep {
    thresholds: Vec<f64>,
    p_miss: Vec<f64>,
    p_fa: Vec<f64>,
}

/// Thresholds below all scores, at midpoints between consecutive distinct
/// scores, and above all scores; a trial is accepted when `score > θ`.
fn sweep(trials: &[Scored]) -> Result<Sweep> {
    let n_tgt = trials.iter().filter(|t| t.target).count();
    let n_non = trials.len() - n_tgt;
    if n_tgt == 0 || n_non == 0 {
        return Err(Error::Data(format!(
            "need both target and nontarget trials, got {n_tgt} and {n_non}"
        )));
    }
    if let Some(t) = trials.iter().find(|t| !t.score.is_finite()) {
        return Err(Error::Data(format!("non-finite score {}", t.score)));
    }
    let mut sorted = trials.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    let (mut misses, mut false_alarms) = (0usize, n_non);
    let rate = |k: usize, n: usize| k as f64 / n as f64;
    let mut s = Sweep {
        thresholds: vec![sorted[0].score - 1.0],
        p_miss: vec![0.0],
        p_fa: vec![1.0],
    };
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].score;
        while i < sorted.len() && sorted[i].score == v {
            if sorted[i].target {
                misses += 1;
            } else {
                false_alarms -= 1;
            }
            i += 1;
        }
        let next = if i < sorted.len() { (v + sorted[i].score) / 2.0 } else { v + 1.0 };
        s.thresholds.push(next);
        s.p_miss.push(rate(misses, n_tgt));
        s.p_fa.push(rate(false_alarms, n_non));
    }
    Ok(s)
}

/// Equal error rate and its threshold, interpolating linearly between the
/// two sweep points that bracket the miss/false-alarm crossing.
pub fn eer(trials: &[Scored]) -> Result<(f64, f64)> {
    let s = sweep(trials)?;
    let j = (0..s.thresholds.len())
        .find(|&j| s.p_miss[j] >= s.p_fa[j])
        .expect("miss rate reaches one above every score");
    let d_hi = s.p_miss[j] - s.p_fa[j];
    if d_hi == 0.0 || j == 0 {
        return Ok((s.p_fa[j], s.thresholds[j]));
    }
    let d_lo = s.p_miss[j - 1] - s.p_fa[j - 1];
    let t = -d_lo / (d_hi - d_lo);
    let rate = s.p_fa[j - 1] + t * (s.p_fa[j] - s.p_fa[j - 1]);
    let threshold = s.thresholds[j - 1] + t * (s.thresholds[j] - s.thresholds[j - 1]);
    Ok((rate, threshold))
}

/// Minimum over the sweep of `c_miss·p·P_miss + c_fa·(1−p)·P_fa`,
/// divided by the cheaper of the accept-all and reject-all costs.
pub fn min_dcf(trials: &[Scored], p_target: f64, c_fa: f64, c_miss: f64) -> Result<f64> {
    if !(0.0 < p_target && p_target < 1.0) || c_fa <= 0.0 || c_miss <= 0.0 {
        return Err(Error::Config("need 0 < p_target < 1 and positive costs".into()));
    }
    let s = sweep(trials)?;
    let norm = (c_miss * p_target).min(c_fa * (1.0 - p_target));
    let best = s
        .p_miss
        .iter()
        .zip(&s.p_fa)
        .map(|(m, f)| c_miss * p_target * m + c_fa * (1.0 - p_target) * f)
        .fold(f64::INFINITY, f64::min);
    Ok(best / norm)
}

/// Both metrics at `P_target = 0.01`, `C_FA = C_Miss = 1`.
pub fn det_metrics(trials: &[Scored]) -> Result<DetMetrics> {
    let (eer, threshold_at_eer) = eer(trials)?;
    Ok(DetMetrics {
        eer,
        min_dcf: min_dcf(trials, 0.01, 1.0, 1.0)?,
        threshold_at_eer,
    })
}

/// Cosine similarity; zero vectors are rejected.
pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine_score", "length", a.len(), b.len()));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine score of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trials(tgt: &[f64], non: &[f64]) -> Vec<Scored> {
        tgt.iter()
            .map(|&score| Scored { score, target: true })
            .chain(non.iter().map(|&score| Scored { score, target: false }))
            .collect()
    }

    #[test]
    fn separated_and_degenerate() {
        let sep = trials(&[0.9, 0.8], &[0.1, 0.2, 0.3]);
        let m = det_metrics(&sep).unwrap();
        assert_eq!((m.eer, m.min_dcf), (0.0, 0.0));
        assert!(m.threshold_at_eer > 0.3 && m.threshold_at_eer < 0.8);
        let flat = trials(&[0.5; 4], &[0.5; 6]);
        let m = det_metrics(&flat).unwrap();
        assert_eq!((m.eer, m.min_dcf), (0.5, 1.0));
    }

    #[test]
    fn four_by_four() {
        // sweep points (θ, P_miss, P_fa): (0.2, 0, .75) (0.35, 0, .5) (0.45, .25, .5) (0.55, .25, .25)
        let t = trials(&[0.9, 0.8, 0.6, 0.4], &[0.7, 0.5, 0.3, 0.1]);
        let (e, th) = eer(&t).unwrap();
        assert_eq!(e, 0.25);
        assert!((th - 0.55).abs() < 1e-12);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(eer(&trials(&[0.1, 0.2], &[])).is_err());
        assert!(min_dcf(&trials(&[], &[0.3]), 0.01, 1.0, 1.0).is_err());
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine_score(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 1.0);
        assert_eq!(cosine_score(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        assert!((cosine_score(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(cosine_score(&[0.0, 0.0], &[1.0, 1.0]).is_err());
    }
}
