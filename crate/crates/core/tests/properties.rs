use std::collections::BTreeMap;

use collabvd::corpus::{split_stratified, CodeSample, Corpus, LabelPolarity};
use collabvd::dialogue::{parse_reply, LlmVerdict};
use collabvd::eval::{confusion, metrics, ConfusionCounts};
use collabvd::Verdict;
use proptest::prelude::*;

fn verdict() -> impl Strategy<Value = Verdict> {
    prop_oneof![Just(Verdict::Vulnerable), Just(Verdict::Clean)]
}

fn counts() -> impl Strategy<Value = ConfusionCounts> {
    (0u64..500, 0u64..500, 0u64..500, 0u64..500)
        .prop_filter("non-empty", |(a, b, c, d)| a + b + c + d > 0)
        .prop_map(|(tp, fp, tn, fn_)| ConfusionCounts { tp, fp, tn, fn_ })
}

proptest! {
    #[test]
    fn polarity_round_trip(v in verdict(), one_is_clean in any::<bool>()) {
        let p = if one_is_clean { LabelPolarity::OneIsClean } else { LabelPolarity::OneIsVulnerable };
        prop_assert_eq!(p.decode(p.encode(v)), Some(v));
        let other = if one_is_clean { LabelPolarity::OneIsVulnerable } else { LabelPolarity::OneIsClean };
        prop_assert_eq!(other.decode(p.encode(v)), Some(v.flip()));
    }

    #[test]
    fn metric_identities(c in counts()) {
        let m = metrics(c).unwrap();
        for x in [m.precision, m.recall, m.f1, m.accuracy] {
            prop_assert!((0.0..=1.0).contains(&x));
        }
        if !m.degenerate.any() {
            let lo = m.precision.min(m.recall);
            let hi = m.precision.max(m.recall);
            prop_assert!(m.f1 >= lo - 1e-12 && m.f1 <= hi + 1e-12);
            let direct = 2.0 * c.tp as f64 / (2 * c.tp + c.fp + c.fn_) as f64;
            prop_assert!((m.f1 - direct).abs() < 1e-12);
        } else {
            prop_assert_eq!(m.f1, 0.0);
        }
        prop_assert_eq!(m.degenerate.precision, c.tp + c.fp == 0);
        prop_assert_eq!(m.degenerate.recall, c.tp + c.fn_ == 0);
    }

    #[test]
    fn class_flip_duality(pairs in proptest::collection::vec((verdict(), verdict()), 1..200)) {
        let preds: BTreeMap<u64, Verdict> = pairs.iter().enumerate().map(|(i, p)| (i as u64, p.0)).collect();
        let truths: BTreeMap<u64, Verdict> = pairs.iter().enumerate().map(|(i, p)| (i as u64, p.1)).collect();
        let flip = |m: &BTreeMap<u64, Verdict>| m.iter().map(|(k, v)| (*k, v.flip())).collect::<BTreeMap<_, _>>();
        let c = confusion(&preds, &truths).unwrap();
        prop_assert_eq!(confusion(&flip(&preds), &flip(&truths)).unwrap(), c.swapped());
        prop_assert_eq!(c.total(), pairs.len() as u64);
        let a = metrics(c).unwrap().accuracy;
        let b = metrics(c.swapped()).unwrap().accuracy;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn split_partitions_and_stays_proportional(
        labels in proptest::collection::vec(any::<bool>(), 10..400),
        seed in any::<u64>(),
    ) {
        let samples = labels
            .iter()
            .enumerate()
            .map(|(i, &v)| CodeSample::new(i as u64, "f();", if v { Verdict::Vulnerable } else { Verdict::Clean }))
            .collect();
        let corpus = Corpus::new("p", samples).unwrap();
        let ratios = [0.8, 0.1, 0.1];
        let split = split_stratified(&corpus, ratios, seed).unwrap();
        let mut ids: Vec<u64> = split.parts().flat_map(|(_, c)| c.ids().collect::<Vec<_>>()).collect();
        ids.sort_unstable();
        prop_assert_eq!(ids, (0..labels.len() as u64).collect::<Vec<_>>());
        for label in [Verdict::Vulnerable, Verdict::Clean] {
            let total = corpus.count(label) as f64;
            for (k, (_, c)) in split.parts().enumerate() {
                prop_assert!((c.count(label) as f64 - ratios[k] * total).abs() <= 1.0);
            }
        }
        let again = split_stratified(&corpus, ratios, seed).unwrap();
        prop_assert_eq!(again.manifest(), split.manifest());
    }

    #[test]
    fn yes_no_openings_parse(desc in "[a-z ]{0,40}", punct in prop_oneof![Just(""), Just(","), Just("."), Just(":")]) {
        let yes = parse_reply(&format!("Yes{punct} {desc}"));
        prop_assert_eq!(yes.verdict, LlmVerdict::Vulnerable);
        let no = parse_reply(&format!("No{punct} {desc}"));
        prop_assert_eq!(no.verdict, LlmVerdict::Clean);
        prop_assert_eq!(no.description, None);
    }

    #[test]
    fn words_starting_with_yes_or_no_are_not_answers(rest in "[a-z]{1,10}") {
        prop_assert_eq!(parse_reply(&format!("yes{rest} maybe")).verdict, LlmVerdict::Unknown);
        prop_assert_eq!(parse_reply(&format!("no{rest} maybe")).verdict, LlmVerdict::Unknown);
    }
}
