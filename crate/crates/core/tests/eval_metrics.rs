use fairflow::corpus::{Attribute, CorpusRecord};
use fairflow::eval::{
    accuracy_f1, fairness_from_records, induce_bias_sample, perplexity, read_predictions, tprd_fprd,
    transfer_accuracy, BiasSampleSpec, TextAttributeClassifier,
};
use fairflow::fixtures;
use fairflow::lm::{NgramModel, UniformLm};
use fairflow::rewrite::word_sequence;
use fairflow::subspace::ClassifierConfig;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Rates straight from the definition, in floating point over raw tuples.
fn recount(preds: &[bool], labels: &[bool], groups: &[Attribute]) -> (f64, f64, f64, f64) {
    let rate = |g: Attribute, y: bool| {
        let cell: Vec<bool> =
            (0..preds.len()).filter(|&i| groups[i] == g && labels[i] == y).map(|i| preds[i]).collect();
        cell.iter().filter(|p| **p).count() as f64 / cell.len() as f64
    };
    let tprd = (rate(Attribute::A, true) - rate(Attribute::B, true)).abs();
    let fprd = (rate(Attribute::A, false) - rate(Attribute::B, false)).abs();
    let acc = (0..preds.len()).filter(|&i| preds[i] == labels[i]).count() as f64 / preds.len() as f64;
    let tp = (0..preds.len()).filter(|&i| preds[i] && labels[i]).count() as f64;
    let fp = (0..preds.len()).filter(|&i| preds[i] && !labels[i]).count() as f64;
    let fn_ = (0..preds.len()).filter(|&i| !preds[i] && labels[i]).count() as f64;
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fn_);
    (tprd, fprd, acc, 2.0 * precision * recall / (precision + recall))
}

fn random_instances(rng: &mut ChaCha8Rng, n: usize) -> (Vec<bool>, Vec<bool>, Vec<Attribute>) {
    let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    let groups: Vec<Attribute> = (0..n).map(|_| Attribute::from_index(rng.random_range(0..2))).collect();
    let preds: Vec<bool> = labels.iter().map(|&y| if rng.random_bool(0.7) { y } else { !y }).collect();
    (preds, labels, groups)
}

#[test]
fn metrics_match_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (preds, labels, groups) = random_instances(&mut rng, 1000);
        let r = tprd_fprd(&preds, &labels, &groups).unwrap();
        let (tprd, fprd, acc, f1) = recount(&preds, &labels, &groups);
        // exact rationals agree with the float recount to rounding
        assert!((r.tprd - tprd).abs() < 1e-12 && (r.fprd - fprd).abs() < 1e-12);
        assert!((r.accuracy - acc).abs() < 1e-12 && (r.f1 - f1).abs() < 1e-12);
        assert_eq!(r.group_a.total() + r.group_b.total(), 1000);
        let hits = |g: Attribute| (0..1000).filter(|&i| groups[i] == g && labels[i] && preds[i]).count() as u64;
        assert_eq!(r.group_a.true_positives, hits(Attribute::A));
        assert_eq!(r.group_b.true_positives, hits(Attribute::B));
        assert_eq!(accuracy_f1(&preds, &labels).unwrap(), (r.accuracy, r.f1));
    }
}

#[test]
fn equal_rates_give_zero_gap() {
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    for (g, scale) in [(Attribute::A, 1), (Attribute::B, 3)] {
        for i in 0..20 * scale {
            labels.push(i % 2 == 0);
            preds.push(i % 4 != 3);
            groups.push(g);
        }
    }
    let r = tprd_fprd(&preds, &labels, &groups).unwrap();
    assert_eq!((r.tprd, r.fprd), (0.0, 0.0));
}

#[test]
fn predictions_jsonl_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("preds.jsonl");
    std::fs::write(&path, "{\"pred\":1,\"label\":1,\"group\":\"a\"}\n{\"pred\":0,\"label\":1,\"group\":\"b\"}\n{\"pred\":1,\"label\":0,\"group\":\"a\"}\n{\"pred\":0,\"label\":0,\"group\":\"b\"}\n").unwrap();
    let r = fairness_from_records(&read_predictions(&path).unwrap()).unwrap();
    assert_eq!((r.tprd, r.fprd), (1.0, 1.0));
    std::fs::write(&path, "{\"pred\":2,\"label\":1,\"group\":\"a\"}\n").unwrap();
    assert!(read_predictions(&path).unwrap_err().to_string().contains(":1:"));
}

#[test]
fn uniform_perplexity_equals_vocabulary_size() {
    let texts: Vec<String> = fixtures::corpus_records(50, 2, "d").into_iter().map(|r| r.text).collect();
    for v in [1usize, 7, 50, 30_522] {
        // exp(ln v) is only exact up to the last few ulps
        let ppl = perplexity(&texts, &UniformLm { vocab_size: v }).unwrap();
        assert!((ppl - v as f64).abs() <= 1e-12 * v as f64, "{ppl} vs {v}");
    }
}

#[test]
fn repeated_sentence_is_nearly_certain() {
    let s = "She taught herself python.".to_string();
    let lm = NgramModel::train(&vec![word_sequence(&s); 200], 0.1);
    let ppl = perplexity(&[s], &lm).unwrap();
    assert!(ppl <= 1.1, "{ppl}");
}

#[test]
fn shuffled_words_score_higher_perplexity() {
    let train: Vec<Vec<String>> =
        fixtures::corpus_records(2000, 3, "t").iter().map(|r| word_sequence(&r.text)).collect();
    let lm = NgramModel::train(&train, 0.1);
    let texts: Vec<String> = fixtures::corpus_records(200, 4, "e").into_iter().map(|r| r.text).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shuffled: Vec<String> = texts
        .iter()
        .map(|t| {
            let mut w: Vec<&str> = t.split(' ').collect();
            w.shuffle(&mut rng);
            w.join(" ")
        })
        .collect();
    assert!(perplexity(&shuffled, &lm).unwrap() > perplexity(&texts, &lm).unwrap());
}

#[test]
fn identity_outputs_keep_the_original_attribute() {
    let records: Vec<CorpusRecord> = fixtures::corpus_records(600, 6, "c");
    let labelled: Vec<(String, Attribute)> =
        records.iter().filter_map(|r| r.group.map(|g| (r.text.clone(), g))).collect();
    let clf = TextAttributeClassifier::train(fixtures::evaluation_backend(), &labelled, &ClassifierConfig::default()).unwrap();
    let held: Vec<String> =
        fixtures::corpus_records(200, 7, "h").into_iter().filter(|r| r.group.is_some()).map(|r| r.text).collect();
    let identity = transfer_accuracy(&held, &held, &clf).unwrap();
    assert!(identity <= 0.05, "{identity}");
    let swapped: Vec<String> = fixtures::template_pairs(100, 8).into_iter().map(|(_, t)| t).collect();
    let originals: Vec<String> = fixtures::template_pairs(100, 8).into_iter().map(|(s, _)| s).collect();
    let flipped = transfer_accuracy(&originals, &swapped, &clf).unwrap();
    assert!(flipped >= 0.9, "{flipped}");
}

#[test]
fn sampler_counts_match_a_tally() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pool: Vec<(bool, Attribute)> =
        (0..40_000).map(|_| (rng.random_bool(0.5), Attribute::from_index(rng.random_range(0..2)))).collect();
    let spec = BiasSampleSpec {
        n: 18_000,
        positive_fraction: 0.5,
        group_a_in_positive_fraction: 0.12,
        group_a_in_negative_fraction: None,
        seed: 3,
    };
    let idx = induce_bias_sample(&pool, &spec).unwrap();
    let tally = |y: bool, g: Attribute| idx.iter().filter(|&&i| pool[i] == (y, g)).count();
    assert_eq!(idx.len(), 18_000);
    assert_eq!(tally(true, Attribute::A) + tally(true, Attribute::B), 9_000);
    assert_eq!(tally(true, Attribute::A), 1_080);
    assert_eq!(tally(false, Attribute::A), 7_920);
    assert_eq!(idx, induce_bias_sample(&pool, &spec).unwrap());
    assert_ne!(idx, induce_bias_sample(&pool, &BiasSampleSpec { seed: 4, ..spec }).unwrap());
}

proptest! {
    #[test]
    fn gaps_ignore_group_names_and_order(seed in any::<u64>(), n in 20usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (preds, labels, groups) = random_instances(&mut rng, n);
        let Ok(base) = tprd_fprd(&preds, &labels, &groups) else { return Ok(()) };
        let swapped: Vec<Attribute> = groups.iter().map(|g| g.other()).collect();
        let s = tprd_fprd(&preds, &labels, &swapped).unwrap();
        prop_assert_eq!((s.tprd_exact, s.fprd_exact), (base.tprd_exact, base.fprd_exact));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let p: Vec<bool> = order.iter().map(|&i| preds[i]).collect();
        let l: Vec<bool> = order.iter().map(|&i| labels[i]).collect();
        let g: Vec<Attribute> = order.iter().map(|&i| groups[i]).collect();
        let o = tprd_fprd(&p, &l, &g).unwrap();
        prop_assert_eq!(o, base);
    }
}
