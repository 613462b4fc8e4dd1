use proptest::prelude::*;

use snakevit::data::Labels;
use snakevit::metrics::{average_precision, report_multiclass, roc_auc};
use snakevit::model::HeadMode;
use snakevit::trainer::classification_loss;
use snakevit::{Graph, Tensor};

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    wins / pairs
}

fn sweep_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let (mut ap, mut prev) = (0.0, 0.0);
    for k in 1..=order.len() {
        let tp = order[..k].iter().filter(|&&i| labels[i]).count() as f64;
        ap += (tp / n_pos - prev) * tp / k as f64;
        prev = tp / n_pos;
    }
    ap
}

fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..80).prop_flat_map(|n| {
        let scores = prop_oneof![
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec((0u8..4).prop_map(|v| v as f64), n),
        ];
        (scores, prop::collection::vec(any::<bool>(), n))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn auc_matches_pairwise((scores, mut labels) in instance()) {
        labels[0] = true;
        labels[1] = false;
        let fast = roc_auc(&scores, &labels).unwrap();
        prop_assert!((fast - pairwise_auc(&scores, &labels)).abs() <= 1e-12);
    }

    #[test]
    fn ap_matches_threshold_sweep((scores, mut labels) in instance()) {
        labels[0] = true;
        let fast = average_precision(&scores, &labels).unwrap();
        prop_assert!((fast - sweep_ap(&scores, &labels)).abs() <= 1e-12);
    }

    #[test]
    fn auc_complement_without_ties(scores in prop::collection::hash_set(-1_000_000i64..1_000_000, 3..40), flips in prop::collection::vec(any::<bool>(), 40)) {
        let scores: Vec<f64> = scores.into_iter().map(|v| v as f64).collect();
        let mut labels: Vec<bool> = flips[..scores.len()].to_vec();
        labels[0] = true;
        labels[1] = false;
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let sum = roc_auc(&scores, &labels).unwrap() + roc_auc(&neg, &labels).unwrap();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn uniform_logits_cost_ln_c() {
    for c in 2..8 {
        let g = Graph::new();
        let labels = Labels::Classes((0..6).map(|i| i % c).collect());
        let l = classification_loss(g.constant(Tensor::full(&[6, c], -1.3)), &labels, HeadMode::Multiclass).unwrap();
        assert!((l.value().item() - (c as f64).ln()).abs() <= 1e-10);
        let hot = Labels::MultiHot((0..3).map(|i| (0..c).map(|j| (i + j) % 2 == 0).collect()).collect());
        let l = classification_loss(g.constant(Tensor::zeros(&[3, c])), &hot, HeadMode::Multilabel).unwrap();
        assert!((l.value().item() - 2f64.ln()).abs() <= 1e-10);
    }
}

#[test]
fn perfect_multiclass_report() {
    let probs = vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.7, 0.3], vec![0.4, 0.6]];
    let r = report_multiclass(&probs, &[0, 1, 0, 1]).unwrap();
    assert_eq!((r.auc, r.auprc, r.f1, r.accuracy), (1.0, 1.0, 1.0, 1.0));
}
