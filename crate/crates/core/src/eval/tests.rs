use proptest::prelude::*;

use super::*;
use crate::incident::labels::LabelStream;

fn set(v: &[usize]) -> BTreeSet<usize> {
    v.iter().copied().collect()
}

#[test]
fn identical_labels_score_one() {
    let l = [true, false, true, true, false];
    let r = prf1(&l, &l).unwrap();
    assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
    assert!(!r.degenerate);
}

#[test]
fn closed_form_counts() {
    // TP=3, FP=1, FN=2
    let pred = [true, true, true, true, false, false, false];
    let truth = [true, true, true, false, true, true, false];
    let r = prf1(&pred, &truth).unwrap();
    assert_eq!((r.tp, r.fp, r.fn_), (3, 1, 2));
    assert_eq!(r.precision, 0.75);
    assert_eq!(r.recall, 0.6);
    assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn all_negative_is_degenerate() {
    let r = prf1(&[false; 4], &[false; 4]).unwrap();
    assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    assert!(r.degenerate);
}

#[test]
fn length_mismatch_is_an_argument_error() {
    assert!(matches!(
        prf1(&[true], &[true, false]),
        Err(Error::Argument(_))
    ));
}

#[test]
fn worked_hitrate_examples() {
    // links a=0, b=1, c=2, d=3
    let truth = set(&[0, 1]);
    let ranking = [0, 2, 1, 3];
    assert_eq!(hitrate_at(&ranking, &truth, 100).unwrap(), 0.5);
    assert_eq!(hitrate_at(&ranking, &truth, 150).unwrap(), 1.0);
    let perfect = [1, 0, 2, 3];
    assert_eq!(hitrate_at(&perfect, &truth, 100).unwrap(), 1.0);
    assert_eq!(hitrate_at(&perfect, &truth, 150).unwrap(), 1.0);
}

#[test]
fn eight_true_links_consider_eight_and_twelve() {
    assert_eq!(top_k(100, 8), 8);
    assert_eq!(top_k(150, 8), 12);
    assert_eq!(top_k(150, 3), 5);
    assert_eq!(top_k(150, 1), 2);
    // the twelfth rank counts at 150 but not at 100
    let truth: BTreeSet<usize> = (0..8).collect();
    let mut ranking: Vec<usize> = (8..19).collect();
    ranking.insert(7, 0);
    ranking.extend(1..8);
    assert_eq!(hitrate_at(&ranking, &truth, 100).unwrap(), 1.0 / 8.0);
    let mut ranking: Vec<usize> = (8..19).collect();
    ranking.insert(11, 0);
    ranking.extend(1..8);
    assert_eq!(hitrate_at(&ranking, &truth, 100).unwrap(), 0.0);
    assert_eq!(hitrate_at(&ranking, &truth, 150).unwrap(), 1.0 / 8.0);
}

#[test]
fn worked_ndcg_example() {
    let truth = set(&[0, 1]);
    let ranking = [0, 2, 1];
    let ideal = 1.0 + 1.0 / 3f64.log2();
    assert!((ideal - 1.6309).abs() < 1e-4);
    assert!((ndcg_at(&ranking, &truth, 150).unwrap() - 1.5 / ideal).abs() < 1e-12);
    assert_eq!(ndcg_at(&[1, 0, 2], &truth, 100).unwrap(), 1.0);
    assert_eq!(ndcg_at(&[2, 3, 0, 1], &truth, 100).unwrap(), 0.0);
}

#[test]
fn empty_inputs_are_rejected() {
    assert!(hitrate_at(&[], &set(&[0]), 100).is_err());
    assert!(ndcg_at(&[], &set(&[0]), 100).is_err());
    assert!(hitrate_at(&[0], &set(&[]), 100).is_err());
}

#[test]
fn ties_break_by_ascending_id() {
    assert_eq!(rank_links(&[1.0, 3.0, 1.0, 3.0]), vec![1, 3, 0, 2]);
}

fn stream(scores: Vec<f64>, thresholds: Vec<f64>) -> LabelStream {
    let labels = scores
        .iter()
        .zip(&thresholds)
        .map(|(s, p)| s >= p)
        .collect();
    LabelStream {
        scores,
        thresholds,
        labels,
    }
}

fn labels(network: (Vec<f64>, Vec<f64>), links: Vec<(Vec<f64>, Vec<f64>)>) -> IncidentLabels {
    IncidentLabels {
        horizon: 1,
        timesteps: (0..network.0.len()).collect(),
        network: stream(network.0, network.1),
        links: links.into_iter().map(|(s, p)| stream(s, p)).collect(),
    }
}

#[test]
fn identical_streams_give_perfect_report() {
    // link 1 has the larger raw score at t=1 but a much larger threshold
    let l = labels(
        (vec![1.0, 5.0, 6.0], vec![2.0; 3]),
        vec![
            (vec![0.1, 3.0, 3.0], vec![1.0; 3]),
            (vec![0.1, 4.0, 0.5], vec![10.0; 3]),
            (vec![0.1, 0.2, 2.0], vec![1.0; 3]),
        ],
    );
    let r = evaluate(&l, &l).unwrap();
    assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
    assert_eq!(r.diagnosis_steps, 2);
    for p in DIAGNOSIS_PERCENTS {
        assert_eq!(r.hitrate[&p], 1.0);
        assert_eq!(r.ndcg[&p], 1.0);
    }
    let json = serde_json::to_string(&r).unwrap();
    let back: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
}

#[test]
fn misaligned_streams_are_rejected() {
    let a = labels(
        (vec![1.0; 3], vec![2.0; 3]),
        vec![(vec![1.0; 3], vec![1.0; 3])],
    );
    let b = labels(
        (vec![1.0; 2], vec![2.0; 2]),
        vec![(vec![1.0; 2], vec![1.0; 2])],
    );
    assert!(matches!(evaluate(&a, &b), Err(Error::Argument(_))));
}

#[test]
fn table_has_one_row_per_horizon() {
    let l = labels((vec![3.0], vec![2.0]), vec![(vec![3.0], vec![1.0])]);
    let r = evaluate(&l, &l).unwrap();
    let t = format_table(&[r.clone(), EvalReport { horizon: 3, ..r }]);
    assert_eq!(t.lines().count(), 3);
    assert!(t.lines().next().unwrap().contains("N@1.5"));
}

// brute-force references written independently of the implementation

fn brute_prf1(pred: &[bool], truth: &[bool]) -> (f64, f64, f64) {
    let tp = (0..pred.len()).filter(|&i| pred[i] && truth[i]).count() as f64;
    let pp = pred.iter().filter(|&&b| b).count() as f64;
    let ap = truth.iter().filter(|&&b| b).count() as f64;
    let p = if pp > 0.0 { tp / pp } else { 0.0 };
    let r = if ap > 0.0 { tp / ap } else { 0.0 };
    let f = if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    };
    (p, r, f)
}

fn brute_rank(scores: &[f64]) -> Vec<usize> {
    // selection: repeatedly take the best remaining, lowest id on ties
    let mut left: Vec<usize> = (0..scores.len()).collect();
    let mut out = vec![];
    while !left.is_empty() {
        let mut best = 0;
        for j in 1..left.len() {
            if scores[left[j]] > scores[left[best]] {
                best = j;
            }
        }
        out.push(left.remove(best));
    }
    out
}

fn brute_k(pct: u32, n: usize) -> usize {
    let mut k = 0;
    while k * 100 < pct as usize * n {
        k += 1;
    }
    k
}

fn brute_hit(rank: &[usize], truth: &[bool], pct: u32) -> f64 {
    let n = truth.iter().filter(|&&b| b).count();
    let k = brute_k(pct, n).min(rank.len());
    rank[..k].iter().filter(|&&l| truth[l]).count() as f64 / n as f64
}

fn brute_ndcg(rank: &[usize], truth: &[bool], pct: u32) -> f64 {
    let n = truth.iter().filter(|&&b| b).count();
    let k = brute_k(pct, n).min(rank.len());
    let mut dcg = 0.0;
    for (pos, &l) in rank[..k].iter().enumerate() {
        if truth[l] {
            dcg += 1.0 / (pos as f64 + 2.0).log2();
        }
    }
    let mut idcg = 0.0;
    for pos in 0..k.min(n) {
        idcg += 1.0 / (pos as f64 + 2.0).log2();
    }
    dcg / idcg
}

fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (1usize..=10).prop_flat_map(|n| {
        (
            prop::collection::vec(0u8..6, n).prop_map(|v| v.into_iter().map(f64::from).collect()),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_filter("at most five true links", |(_, t)| {
                let c = t.iter().filter(|&&b| b).count();
                (1..=5).contains(&c)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn prf1_matches_brute_force(v in prop::collection::vec((any::<bool>(), any::<bool>()), 0..40)) {
        let (pred, truth): (Vec<bool>, Vec<bool>) = v.into_iter().unzip();
        let r = prf1(&pred, &truth).unwrap();
        prop_assert_eq!((r.precision, r.recall, r.f1), brute_prf1(&pred, &truth));
        for m in [r.precision, r.recall, r.f1] {
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }

    #[test]
    fn diagnosis_matches_brute_force((scores, truth) in instance()) {
        let ranking = rank_links(&scores);
        prop_assert_eq!(&ranking, &brute_rank(&scores));
        let t: BTreeSet<usize> = (0..truth.len()).filter(|&i| truth[i]).collect();
        for p in DIAGNOSIS_PERCENTS {
            prop_assert_eq!(hitrate_at(&ranking, &t, p).unwrap(), brute_hit(&ranking, &truth, p));
            prop_assert_eq!(ndcg_at(&ranking, &t, p).unwrap(), brute_ndcg(&ranking, &truth, p));
        }
        prop_assert!(hitrate_at(&ranking, &t, 150).unwrap() >= hitrate_at(&ranking, &t, 100).unwrap());
    }

    #[test]
    fn only_order_matters((scores, truth) in instance(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let moved: Vec<f64> = scores.iter().map(|s| (a * s + b).exp()).collect();
        let t: BTreeSet<usize> = (0..truth.len()).filter(|&i| truth[i]).collect();
        let (r1, r2) = (rank_links(&scores), rank_links(&moved));
        prop_assert_eq!(&r1, &r2);
        for p in DIAGNOSIS_PERCENTS {
            prop_assert_eq!(ndcg_at(&r1, &t, p).unwrap(), ndcg_at(&r2, &t, p).unwrap());
        }
    }

    #[test]
    fn report_matches_brute_force(
        t_len in 1usize..12,
        n in 1usize..6,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            let net = ((0..t_len).map(|_| rng.random_range(0.0..2.0)).collect(), vec![1.0; t_len]);
            let links = (0..n)
                .map(|_| {
                    let s = (0..t_len).map(|_| rng.random_range(0.0..2.0)).collect();
                    let p = (0..t_len).map(|_| rng.random_range(0.5..1.5)).collect();
                    (s, p)
                })
                .collect();
            labels(net, links)
        };
        let (pred, truth) = (mk(&mut rng), mk(&mut rng));
        let r = evaluate(&pred, &truth).unwrap();
        let (p, rc, f) = brute_prf1(&pred.network.labels, &truth.network.labels);
        prop_assert_eq!((r.precision, r.recall, r.f1), (p, rc, f));
        let mut sums = [0.0; 4];
        let mut steps = 0;
        for i in 0..t_len {
            let tl: Vec<bool> = truth.links.iter().map(|s| s.labels[i]).collect();
            if !tl.contains(&true) {
                continue;
            }
            steps += 1;
            let keys: Vec<f64> = pred.links.iter().map(|s| s.scores[i] / s.thresholds[i]).collect();
            let rank = brute_rank(&keys);
            sums[0] += brute_hit(&rank, &tl, 100);
            sums[1] += brute_hit(&rank, &tl, 150);
            sums[2] += brute_ndcg(&rank, &tl, 100);
            sums[3] += brute_ndcg(&rank, &tl, 150);
        }
        prop_assert_eq!(r.diagnosis_steps, steps);
        if steps > 0 {
            prop_assert_eq!(r.hitrate[&100], sums[0] / steps as f64);
            prop_assert_eq!(r.hitrate[&150], sums[1] / steps as f64);
            prop_assert_eq!(r.ndcg[&100], sums[2] / steps as f64);
            prop_assert_eq!(r.ndcg[&150], sums[3] / steps as f64);
        }
    }
}
