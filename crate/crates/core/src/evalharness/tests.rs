use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};
use crate::recdata::{EncodedInstance, Split};

/// Scores a prompt by looking up its first token.
struct Table(Vec<f64>);

impl Scorer for Table {
    fn score(&self, tokens: &[u32]) -> Result<f64> {
        Ok(self.0[tokens[0] as usize])
    }
}

fn instances(n: usize) -> Vec<EncodedInstance> {
    (0..n)
        .map(|u| EncodedInstance {
            user: u as u32,
            prompts: (0..30).map(|c| vec![(u * 30 + c) as u32]).collect(),
        })
        .collect()
}

fn report(tag: &str, hit1: f64, mrr10: f64) -> EvalReport {
    EvalReport {
        hit1,
        hit3: hit1,
        hit10: hit1,
        mrr10,
        count: 1,
        model_tag: tag.into(),
        seed: 0,
    }
}

/// Rank by sorting: candidates ordered by descending score, the positive
/// placed after every candidate with an equal score.
fn brute_rank(scores: &[f64], positive: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then((a == positive).cmp(&(b == positive)))
    });
    order.iter().position(|&i| i == positive).unwrap() + 1
}

#[test]
fn rank_examples() {
    let mut s = vec![0.0; 30];
    s[0] = 1.0;
    assert_eq!(rank_of(&s, 0), 1);
    s[5] = 1.0;
    assert_eq!(rank_of(&s, 0), 2);
    assert_eq!(hit_at_k(1, 1), 1.0);
    assert_eq!(mrr_at_10(1), 1.0);
    assert_eq!(hit_at_k(2, 1), 0.0);
    assert_eq!(hit_at_k(2, 3), 1.0);
    assert_eq!(mrr_at_10(2), 0.5);
    assert_eq!(hit_at_k(11, 10), 0.0);
    assert_eq!(mrr_at_10(11), 0.0);
}

#[test]
fn metrics_match_brute_force_on_random_score_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ranks = Vec::new();
    let mut brute = Vec::new();
    for i in 0..10_000 {
        // Coarse scores so ties are common.
        let scores: Vec<f64> = (0..30)
            .map(|_| if i % 2 == 0 { rng.gen_range(0..8) as f64 } else { rng.gen() })
            .collect();
        let pos = rng.gen_range(0..30);
        ranks.push(rank_of(&scores, pos));
        brute.push(brute_rank(&scores, pos));
    }
    assert_eq!(ranks, brute);
    let r = EvalReport::from_ranks(&ranks, "m", 0).unwrap();
    let n = brute.len() as f64;
    let hits = |k: usize| 100.0 * brute.iter().filter(|&&b| b <= k).count() as f64 / n;
    let mrr = brute
        .iter()
        .map(|&b| if b <= 10 { 1.0 / b as f64 } else { 0.0 })
        .sum::<f64>()
        / n;
    assert_eq!(r.hit1, hits(1));
    assert_eq!(r.hit3, hits(3));
    assert_eq!(r.hit10, hits(10));
    assert_eq!(r.mrr10, mrr);
}

#[test]
fn perfect_model_scores_full_marks() {
    let data = instances(20);
    let table = Table((0..600).map(|t| if t % 30 == 0 { 1.0 } else { 0.0 }).collect());
    let (r, ranks) = evaluate(&table, &data, "oracle", 3).unwrap();
    assert!(ranks.iter().all(|&r| r == 1));
    assert_eq!((r.hit1, r.hit3, r.hit10, r.mrr10), (100.0, 100.0, 100.0, 1.0));
    assert_eq!((r.count, r.seed, r.model_tag.as_str()), (20, 3, "oracle"));
}

#[test]
fn random_model_hits_one_in_thirty() {
    let data = instances(3000);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let table = Table((0..90_000).map(|_| rng.gen()).collect());
    let (r, _) = evaluate(&table, &data, "random", 0).unwrap();
    assert!((r.hit1 - 100.0 / 30.0).abs() < 1.0, "{}", r.hit1);
    assert!(r.is_consistent());
}

#[test]
fn empty_dataset_is_rejected() {
    assert!(matches!(evaluate(&Table(vec![]), &[], "m", 0), Err(Error::Input(_))));
}

fn matrix(hits: &[(f64, f64)]) -> ZeroShotMatrix {
    ZeroShotMatrix {
        sources: (0..hits.len() as u16).collect(),
        targets: vec![9],
        split: Split::Valid,
        reports: hits.iter().map(|&(h, m)| vec![report("s", h, m)]).collect(),
    }
}

#[test]
fn source_selection_orders_by_hit1_then_mrr_then_id() {
    let m = matrix(&[(12.0, 0.2), (9.0, 0.2), (15.0, 0.2)]);
    assert_eq!(select_top_sources(&m, 9, 2).unwrap(), vec![2, 0]);
    assert_eq!(select_top_sources(&m, 9, 3).unwrap(), vec![2, 0, 1]);
    let tie = matrix(&[(10.0, 0.2), (10.0, 0.3), (10.0, 0.3)]);
    assert_eq!(select_top_sources(&tie, 9, 3).unwrap(), vec![1, 2, 0]);
    assert!(matches!(select_top_sources(&m, 9, 4), Err(Error::Input(_))));
}

#[test]
fn crossing_scan() {
    assert_eq!(crossing_size(&[50, 75, 100], &[2.0, 2.9, 3.6], 3.1), Some(100));
    assert_eq!(crossing_size(&[50, 75], &[2.0, 2.9], 3.1), None);
    assert_eq!(crossing_size(&[50, 75], &[3.2, 2.9], 3.1), Some(50));
}

#[test]
fn sweep_means_and_csv() {
    let run = |method, size, subset, hit1| SweepRun {
        method,
        size,
        subset,
        report: report("r", hit1, hit1 / 100.0),
    };
    let res = SweepResult {
        sizes: vec![50, 75],
        subsets: 2,
        reference: 3.0,
        reference_tag: "zero-shot".into(),
        runs: vec![
            run(SweepMethod::Xcross, 50, 0, 2.0),
            run(SweepMethod::Xcross, 50, 1, 3.0),
            run(SweepMethod::Xcross, 75, 0, 4.0),
            run(SweepMethod::Xcross, 75, 1, 5.0),
            run(SweepMethod::TargetLora, 50, 0, 1.0),
            run(SweepMethod::TargetLora, 50, 1, 1.0),
        ],
    };
    assert_eq!(res.means(SweepMethod::Xcross), vec![(50, 2.5), (75, 4.5)]);
    assert_eq!(res.crossing(SweepMethod::Xcross), Some(75));
    assert_eq!(res.crossing(SweepMethod::TargetLora), None);
    let csv = res.to_csv();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",3")));
}

#[test]
fn t_test_matches_reference_values() {
    let a = [3.1, 2.4, 5.6, 4.4, 3.9, 4.8];
    let b = [2.9, 2.8, 4.1, 3.9, 3.1, 4.0];
    let r = paired_t_test(&a, &b).unwrap();
    assert!((r.t - 2.1660005636099093).abs() < 1e-9);
    assert!((r.p_value - 0.08255887808295945).abs() < 1e-9);
    assert_eq!(r.df, 5.0);
    let s = paired_t_test(&b, &a).unwrap();
    assert_eq!(s.p_value, r.p_value);
    assert_eq!(s.t, -r.t);
}

#[test]
fn t_test_degenerate_and_strong_cases() {
    let a = [1.0, 2.0, 3.0];
    assert!(paired_t_test(&a, &a).unwrap().degenerate);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Vec<f64> = (0..50).map(|_| rng.gen()).collect();
    let y: Vec<f64> = x.iter().map(|v| v + 1.0 + 1e-3 * rng.gen::<f64>()).collect();
    let r = paired_t_test(&y, &x).unwrap();
    assert!(!r.degenerate && r.p_value < 1e-3);
    assert!(paired_t_test(&a, &a[..2]).is_err());
    assert!(paired_t_test(&a[..1], &a[..1]).is_err());
}

#[test]
fn variant_tags_and_flags() {
    let tags: std::collections::HashSet<_> = Variant::ABLATIONS.iter().map(|v| v.tag()).collect();
    assert_eq!(tags.len(), 3);
    assert!(!tags.contains(Variant::Full.tag()));
    assert_eq!(Variant::NoLayers.scaling(0.5, 0.4), (0.0, 0.0));
    assert_eq!(Variant::NoInteractions.scaling(0.5, 0.4), (0.5, 0.0));
    assert_eq!(Variant::NoExperts.scaling(0.5, 0.4), (0.0, 0.4));
    assert_eq!("-Layers".parse::<Variant>().unwrap(), Variant::NoLayers);
    assert_eq!("-Interactions".parse::<Variant>().unwrap(), Variant::NoInteractions);
    assert_eq!("-Experts".parse::<Variant>().unwrap(), Variant::NoExperts);
    assert!(matches!("-Heads".parse::<Variant>(), Err(Error::Usage(_))));
}

#[test]
fn table_lists_every_report() {
    let t = format_table(&[report("xcross", 12.5, 0.2), report("zero-shot-0", 5.0, 0.1)]);
    assert_eq!(t.lines().count(), 3);
    assert!(t.contains("12.50") && t.contains("20.00"));
}

proptest! {
    #[test]
    fn reports_are_always_consistent(ranks in proptest::collection::vec(1usize..=30, 1..200)) {
        let r = EvalReport::from_ranks(&ranks, "p", 0).unwrap();
        prop_assert!(r.is_consistent());
    }
}
