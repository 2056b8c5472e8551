use amtl::eval::{bleu, detection_accuracy_topk, hittable_span};
use amtl::model::{CandidateDistribution, ScoreVector};
use amtl::policy::{diff_span, overlap_coeff, range_bounds};
use amtl::tensor::{soft_argmax, softmax};
use amtl::train::{interlaced_weight_d, interlaced_weight_g, rank_from_uniform};
use amtl::vocab::TokenSeq;
use proptest::prelude::*;

fn seq(max: usize) -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(4u32..9, 0..max)
}

fn dist(d0: f64, dr: f64) -> CandidateDistribution {
    CandidateDistribution {
        position: 0,
        ranked_ids: vec![4, 5],
        d: vec![d0, dr],
    }
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(v in prop::collection::vec(-30.0f64..30.0, 1..12), c in -50.0f64..50.0) {
        let a = softmax(&v).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let b = softmax(&shifted).unwrap();
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        let (sa, sb) = (soft_argmax(&v).unwrap(), soft_argmax(&shifted).unwrap());
        prop_assert!((sa - sb).abs() < 1e-9);
        prop_assert!(sa >= 0.0 && sa <= (v.len() - 1) as f64 + 1e-12);
    }

    #[test]
    fn rank_is_floor_of_log_uniform_draw(u in 0.0f64..1.0, ct in 2.0f64..5000.0) {
        let r = rank_from_uniform(u, ct);
        prop_assert!(r >= 1 && r as f64 <= ct);
        let x = (u * ct.ln()).exp();
        prop_assert!((r as f64) <= x + 1e-9 && x < (r + 1) as f64);
    }

    #[test]
    fn rank_is_monotone_in_u(a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(rank_from_uniform(lo, 1000.0) <= rank_from_uniform(hi, 1000.0));
    }

    #[test]
    fn weight_g_is_bounded_and_monotone(r1 in 1.0f64..50.0, r2 in 1.0f64..50.0, dr in 1e-4f64..0.5) {
        let s_g = 1.15;
        let w = |ratio: f64| interlaced_weight_g(&dist(ratio * dr, dr), 1, s_g).unwrap();
        let (lo, hi) = (r1.min(r2), r1.max(r2));
        let (wl, wh) = (w(lo), w(hi));
        prop_assert!(wl > -1.0 && wl <= 1.5);
        prop_assert!(wh > -1.0 && wh <= 1.5);
        let branch = |ratio: f64| ratio - 1.0 - s_g >= 0.0;
        if branch(lo) == branch(hi) {
            prop_assert!(wl <= wh + 1e-15);
        }
    }

    #[test]
    fn weight_d_is_the_score_ratio(g in 1e-3f64..1.0, o in 1e-3f64..1.0) {
        let sg = ScoreVector { scores: vec![0.5, g] };
        let so = ScoreVector { scores: vec![0.5, o] };
        prop_assert_eq!(interlaced_weight_d(&sg, &so, 0).unwrap(), 1.0);
        prop_assert!((interlaced_weight_d(&sg, &so, 1).unwrap() - g / o).abs() < 1e-15);
    }

    #[test]
    fn overlap_is_symmetric_and_unit_bounded(a in (0usize..20, 0usize..20), b in (0usize..20, 0usize..20)) {
        let a = (a.0.min(a.1), a.0.max(a.1));
        let b = (b.0.min(b.1), b.0.max(b.1));
        let (x, y) = (overlap_coeff(a, b), overlap_coeff(b, a));
        prop_assert_eq!(x, y);
        prop_assert!((0.0..=1.0).contains(&x));
        if a == b {
            prop_assert_eq!(x, 1.0);
        }
    }

    #[test]
    fn range_bounds_are_ordered(s in 0usize..30, t in 0usize..30, e in 0usize..30, f in 0usize..30, strict: bool) {
        let b = range_bounds(s, s + e, t, t + f, strict);
        prop_assert!(b.s_l <= b.s_h && b.e_l <= b.e_h);
    }

    #[test]
    fn diff_span_contains_every_difference(a in seq(12), b in seq(12)) {
        let (ta, tb) = (TokenSeq::new(a.clone()), TokenSeq::new(b.clone()));
        match diff_span(&ta, &tb) {
            Err(_) => prop_assert_eq!(a, b),
            Ok((p, q)) => {
                prop_assert!(p <= q && q <= a.len());
                let tail = a.len() - q;
                prop_assert!(p + tail <= b.len());
                // Splicing b's middle into a's window reproduces b.
                let mut rebuilt = a[..p].to_vec();
                rebuilt.extend_from_slice(&b[p..b.len() - tail]);
                rebuilt.extend_from_slice(&a[q..]);
                prop_assert_eq!(rebuilt, b);
            }
        }
    }

    #[test]
    fn bleu_is_unit_bounded(c in seq(15), r in prop::collection::vec(4u32..9, 1..15)) {
        let v = bleu(&c, &r, 4);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((bleu(&r, &r, 4) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn topk_accuracy_is_monotone_in_k(
        items in prop::collection::vec(
            (prop::collection::vec(0.0f64..1.0, 1..10), 0usize..10, 0usize..3),
            1..20,
        )
    ) {
        let items: Vec<(ScoreVector, (usize, usize))> = items
            .into_iter()
            .map(|(scores, s, w)| {
                let k = scores.len();
                let s = s.min(k);
                let e = (s + w).min(k);
                (ScoreVector { scores }, (s, e))
            })
            .collect();
        let mut prev = 0.0;
        for topk in 1..=10 {
            let acc = detection_accuracy_topk(&items, topk).unwrap();
            prop_assert!(acc >= prev && acc <= 1.0);
            prev = acc;
        }
    }

    #[test]
    fn hittable_span_is_nonempty_and_in_range(k in 1usize..20, s in 0usize..20, w in 0usize..4) {
        let s = s.min(k);
        let e = (s + w).min(k);
        let (a, b) = hittable_span((s, e), k);
        prop_assert!(a < b && b <= k);
        prop_assert!(a <= s && e <= b);
    }
}

#[test]
fn sampled_ranks_match_log_uniform_intervals() {
    use amtl::train::sample_candidate_rank;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
    let ct = 1000.0_f64;
    let n = 50_000;
    let draws: Vec<usize> = (0..n).map(|_| sample_candidate_rank(&mut rng, ct)).collect();
    for (a, b) in [(1, 2), (2, 20), (20, 100), (5, 500), (100, 1000)] {
        let p = ((b as f64).ln() - (a as f64).ln()) / ct.ln();
        let hits = draws.iter().filter(|&&r| r >= a && r < b).count() as f64 / n as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((hits - p).abs() <= 3.0 * sigma, "[{a},{b}): {hits} vs {p}");
    }
}
