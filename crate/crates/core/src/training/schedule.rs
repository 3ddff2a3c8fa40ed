use super::TrainConfig;

/// Cyclical triangular2 rate: each cycle ramps `lr_min → peak → lr_min`
/// linearly, and the peak excess over `lr_min` halves every cycle.
pub fn triangular2_lr(iter: u64, cfg: &TrainConfig) -> f64 {
    let len = cfg.cycle_len_iters.max(1);
    let cycle = iter / len;
    let pos = (iter % len) as f64;
    let half = len as f64 / 2.0;
    let frac = if pos <= half { pos / half } else { (len as f64 - pos) / half };
    let amplitude = (cfg.lr_max - cfg.lr_min) / 2f64.powi(cycle.min(1023) as i32);
    cfg.lr_min + amplitude * frac
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig {
            cycle_len_iters: 500,
            ..TrainConfig::large()
        }
    }

    #[test]
    fn anchor_points() {
        let c = cfg();
        assert_eq!(triangular2_lr(0, &c), 1e-8);
        assert!((triangular2_lr(250, &c) - 1e-3).abs() < 1e-12);
        assert_eq!(triangular2_lr(500, &c), 1e-8);
        assert!((triangular2_lr(750, &c) - (1e-8 + (1e-3 - 1e-8) / 2.0)).abs() < 1e-12);
        assert!((triangular2_lr(1250, &c) - (1e-8 + (1e-3 - 1e-8) / 4.0)).abs() < 1e-12);
    }

    #[test]
    fn linear_ramp() {
        let c = cfg();
        let quarter = triangular2_lr(125, &c);
        assert!((quarter - (1e-8 + (1e-3 - 1e-8) / 2.0)).abs() < 1e-15);
        assert!((triangular2_lr(375, &c) - quarter).abs() < 1e-15);
    }
}
