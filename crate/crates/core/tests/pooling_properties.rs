use maccif_core::pooling::{self, HeadVars, VARIANCE_FLOOR};
use maccif_core::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Case {
    h: Tensor,
    heads: Vec<[Tensor; 4]>,
}

fn case(b: usize, c: usize, t: usize, r: usize, heads: usize, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = Tensor::uniform(&[b, c, t], 3.0, &mut rng);
    let heads = (0..heads)
        .map(|_| {
            [
                Tensor::uniform(&[r, c], 1.0, &mut rng),
                Tensor::uniform(&[r], 1.0, &mut rng),
                Tensor::uniform(&[c, r], 1.0, &mut rng),
                Tensor::uniform(&[c], 1.0, &mut rng),
            ]
        })
        .collect();
    Case { h, heads }
}

fn bind(tape: &mut Tape, head: &[Tensor; 4]) -> HeadVars {
    HeadVars {
        w1: tape.constant(head[0].clone()),
        b1: tape.constant(head[1].clone()),
        w2: tape.constant(head[2].clone()),
        b2: tape.constant(head[3].clone()),
    }
}

fn run(c: &Case) -> (Tape, Var, Vec<Var>) {
    let mut tape = Tape::new();
    let h = tape.constant(c.h.clone());
    let heads: Vec<HeadVars> = c.heads.iter().map(|p| bind(&mut tape, p)).collect();
    let pooled = pooling::pool(&mut tape, h, &heads).unwrap();
    (tape, pooled.stats, pooled.attention)
}

fn dims() -> impl Strategy<Value = (usize, usize, usize, usize, usize, u64)> {
    (1usize..4, 1usize..7, 1usize..9, 1usize..5, 1usize..4, any::<u64>())
}

proptest! {
    #[test]
    fn columns_normalized_and_sigma_floored((b, c, t, r, i, seed) in dims()) {
        let cs = case(b, c, t, r, i, seed);
        let (tape, stats, attention) = run(&cs);
        for a in &attention {
            let v = tape.value(*a);
            for bi in 0..b {
                for ch in 0..c {
                    let col: f64 = (0..t).map(|ti| v.at(&[bi, ti, ch])).sum();
                    prop_assert!((col - 1.0).abs() < 1e-6);
                    prop_assert!((0..t).all(|ti| v.at(&[bi, ti, ch]) >= 0.0));
                }
            }
        }
        let s = tape.value(stats);
        prop_assert_eq!(s.shape(), &[b, 2 * i * c]);
        for bi in 0..b {
            for k in i * c..2 * i * c {
                prop_assert!(s.at(&[bi, k]) >= VARIANCE_FLOOR.sqrt());
            }
        }
    }

    #[test]
    fn moments_identity((b, c, t, r, _i, seed) in dims()) {
        // σ² + μ² equals the attention-weighted second moment unless floored
        let cs = case(b, c, t, r, 1, seed);
        let (tape, stats, attention) = run(&cs);
        let (s, a) = (tape.value(stats), tape.value(attention[0]));
        for bi in 0..b {
            for ch in 0..c {
                let second: f64 = (0..t).map(|ti| a.at(&[bi, ti, ch]) * cs.h.at(&[bi, ch, ti]).powi(2)).sum();
                let (mu, sigma) = (s.at(&[bi, ch]), s.at(&[bi, c + ch]));
                prop_assert!((sigma * sigma + mu * mu - second).abs() <= VARIANCE_FLOOR + 1e-9);
            }
        }
    }

    #[test]
    fn one_head_is_single_head_pooling_bitwise((b, c, t, r, _i, seed) in dims()) {
        let cs = case(b, c, t, r, 1, seed);
        let (tape, stats, _) = run(&cs);
        let mut reference = Tape::new();
        let h = reference.constant(cs.h.clone());
        let head = bind(&mut reference, &cs.heads[0]);
        let single = pooling::single_head_pool(&mut reference, h, &head).unwrap();
        prop_assert_eq!(tape.value(stats), reference.value(single));
    }

    #[test]
    fn identical_heads_penalty_exact((b, c, t, r, _i, seed) in dims(), heads in 1usize..5, lambda in 0.1f64..3.0, rho in 0.1f64..3.0) {
        let mut cs = case(b, c, t, r, 1, seed);
        cs.heads = vec![cs.heads[0].clone(); heads];
        let (mut tape, stats, attention) = run(&cs);
        let p = pooling::diversity_penalty(&mut tape, &attention, lambda, rho).unwrap();
        let pairs = (heads * (heads - 1) / 2) as f64;
        let want = rho * lambda * pairs;
        let got = tape.value(p).item();
        // bitwise wherever summing equal terms cannot round (a single utterance, at most three pairs)
        if b == 1 && heads <= 3 {
            prop_assert_eq!(got, want);
        } else {
            prop_assert!((got - want).abs() <= 4.0 * f64::EPSILON * want);
        }
        let s = tape.value(stats);
        for bi in 0..b {
            for k in 0..c {
                for hd in 1..heads {
                    prop_assert_eq!(s.at(&[bi, k]), s.at(&[bi, hd * c + k]));
                    prop_assert_eq!(s.at(&[bi, heads * c + k]), s.at(&[bi, (heads + hd) * c + k]));
                }
            }
        }
    }

    #[test]
    fn penalty_never_increases_with_distance(d in prop::collection::vec(0.0f64..3.0, 1..6), idx in any::<prop::sample::Index>(), grow in 0.0f64..2.0) {
        let eval = |ds: &[f64]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ds.iter().map(|&v| tape.constant(Tensor::new(&[1, 1, 1], vec![v]).unwrap())).collect();
            let p = pooling::hinge_penalty(&mut tape, &vars, 1.0, 1.5).unwrap();
            tape.value(p).item()
        };
        let mut bigger = d.clone();
        bigger[idx.index(d.len())] += grow;
        prop_assert!(eval(&bigger) <= eval(&d));
    }

    #[test]
    fn time_permutation_equivariance((b, c, t, r, i, seed) in dims(), shift in 0usize..8) {
        let cs = case(b, c, t, r, i, seed);
        let perm: Vec<usize> = (0..t).map(|k| (k * 5 + shift) % t).collect();
        let perm_ok = { let mut p = perm.clone(); p.sort(); p == (0..t).collect::<Vec<_>>() };
        prop_assume!(perm_ok);
        let mut shuffled = cs.h.clone();
        for bi in 0..b {
            for ch in 0..c {
                for (k, &src) in perm.iter().enumerate() {
                    shuffled.data_mut()[(bi * c + ch) * t + k] = cs.h.at(&[bi, ch, src]);
                }
            }
        }
        let (ta, sa, aa) = run(&cs);
        let (tb, sb, ab) = run(&Case { h: shuffled, heads: cs.heads.clone() });
        prop_assert!(ta.value(sa).max_abs_diff(tb.value(sb)) < 1e-12);
        for (x, y) in aa.iter().zip(&ab) {
            for bi in 0..b {
                for (k, &src) in perm.iter().enumerate() {
                    for ch in 0..c {
                        prop_assert!((tb.value(*y).at(&[bi, k, ch]) - ta.value(*x).at(&[bi, src, ch])).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn length_law_two_heads_four_channels() {
    let (tape, stats, _) = run(&case(1, 4, 5, 3, 2, 1));
    assert_eq!(tape.value(stats).shape(), &[1, 16]);
}
