use std::collections::HashSet;

use proptest::prelude::*;
use uls_dram::autodiff::{AdamState, LearningRates, ParamGroup, ParamStore, Tape};
use uls_dram::crf::{log_likelihood, viterbi_decode, TagSchema, TagSequence};
use uls_dram::data::{generate_corpus, SyntheticSpec};
use uls_dram::metrics::{pair_accuracy, extract_pairs, tag_f1, PairSet, SpanPrediction};
use uls_dram::par::{guide, RangePrediction};
use uls_dram::Tensor;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Tensor::from_rows(rows, cols, d).unwrap())
}

fn spans() -> impl Strategy<Value = Vec<SpanPrediction>> {
    prop::collection::vec((0usize..3, 0usize..6, 0usize..3), 0..6).prop_map(|v| {
        v.into_iter()
            .map(|(a, s, w)| SpanPrediction { attribute: a, start: s, end: s + w, surface: String::new() })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn guidance_ignores_prototype_scale(f in matrix(3, 4), p in matrix(1, 4), c in 0.01f64..50.0) {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let fv = tape.constant(f).unwrap();
        let pv = tape.constant(p.clone()).unwrap();
        let scaled = tape.constant(Tensor::from_rows(1, 4, p.data().iter().map(|v| v * c).collect()).unwrap()).unwrap();
        let a = guide(&mut tape, fv, pv).unwrap();
        let b = guide(&mut tape, fv, scaled).unwrap();
        prop_assert!(tape.value(a).max_abs_diff(tape.value(b)) < 1e-12);
    }

    #[test]
    fn raising_the_threshold_never_adds_attributes(
        scores in prop::collection::vec(0.0f64..1.0, 1..10),
        lo in 0.01f64..0.99,
        hi in 0.01f64..0.99,
    ) {
        let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
        let low = RangePrediction::from_scores(scores.clone(), lo);
        let high = RangePrediction::from_scores(scores, hi);
        prop_assert!(high.selected.iter().all(|a| low.selected.contains(a)));
        prop_assert!(high.selected.len() <= low.selected.len());
    }

    #[test]
    fn crf_is_invariant_to_per_position_emission_shifts(
        e in matrix(4, 3),
        t in matrix(5, 5),
        gold in prop::collection::vec(0usize..3, 4),
        shifts in prop::collection::vec(-5.0f64..5.0, 4),
    ) {
        let mut shifted = e.clone();
        for (r, s) in shifts.iter().enumerate() {
            for c in 0..3 {
                shifted.data_mut()[r * 3 + c] += s;
            }
        }
        let a = log_likelihood(&e, &t, &gold).unwrap();
        let b = log_likelihood(&shifted, &t, &gold).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
        prop_assert_eq!(viterbi_decode(&e, &t).unwrap().labels, viterbi_decode(&shifted, &t).unwrap().labels);
    }

    #[test]
    fn tag_f1_is_symmetric(pred in spans(), gold in spans()) {
        let ab = tag_f1(&pred, &gold);
        let ba = tag_f1(&gold, &pred);
        prop_assert_eq!(ab.precision, ba.recall);
        prop_assert_eq!(ab.recall, ba.precision);
        prop_assert!((ab.f1 - ba.f1).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&ab.f1));
    }

    #[test]
    fn gradients_are_linear_in_the_loss(
        a in matrix(2, 3),
        b in matrix(3, 2),
        alpha in -3.0f64..3.0,
        beta in -3.0f64..3.0,
    ) {
        let mut store = ParamStore::new();
        let pa = store.add("a", ParamGroup::TaskSpecific, a).unwrap();
        let pb = store.add("b", ParamGroup::TaskSpecific, b).unwrap();
        let grads = |wa: f64, wb: f64| {
            let mut tape = Tape::new(&store);
            let (x, y) = (tape.param(pa), tape.param(pb));
            let m = tape.matmul(x, y).unwrap();
            let l1 = tape.sum(m).unwrap();
            let sq = tape.tanh(m).unwrap();
            let l2 = tape.sum(sq).unwrap();
            let l1 = tape.scale(l1, wa).unwrap();
            let l2 = tape.scale(l2, wb).unwrap();
            let loss = tape.add(l1, l2).unwrap();
            tape.backward(loss).unwrap()
        };
        let combined = grads(alpha, beta);
        let mut parts = grads(alpha, 0.0);
        parts.accumulate(&grads(0.0, beta));
        for id in [pa, pb] {
            prop_assert!(combined.get(id).unwrap().max_abs_diff(parts.get(id).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn frozen_parameters_never_move(values in matrix(2, 2), lr in 1e-4f64..1.0) {
        let mut store = ParamStore::new();
        let frozen_id = store.add("frozen", ParamGroup::PretrainedText, values.clone()).unwrap();
        let live_id = store.add("live", ParamGroup::TaskSpecific, values.clone()).unwrap();
        let mut adam = AdamState::new(&store, LearningRates::uniform(lr));
        let frozen: HashSet<_> = [frozen_id].into_iter().collect();
        for _ in 0..3 {
            let grads = {
                let mut tape = Tape::with_frozen(&store, &frozen);
                let (f, l) = (tape.param(frozen_id), tape.param(live_id));
                let m = tape.matmul(f, l).unwrap();
                let loss = tape.sum(m).unwrap();
                tape.backward(loss).unwrap()
            };
            prop_assert!(grads.get(frozen_id).is_none());
            store.set_grads(grads);
            adam.step(&mut store, &frozen).unwrap();
        }
        let same = store.value(frozen_id).data().iter().zip(values.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
    }
}

#[test]
fn gold_tags_round_trip_to_gold_pairs() {
    let spec = SyntheticSpec::default();
    let corpus = generate_corpus(&spec, 300, 21).unwrap();
    let catalog = spec.catalog().unwrap();
    let vocab = uls_dram::data::Vocabulary::build(corpus.records.iter().flat_map(|r| r.tokens.iter().map(String::as_str)));
    let (mut preds, mut golds) = (Vec::new(), Vec::new());
    for record in &corpus.records {
        let enc = uls_dram::data::EncodedRecord::new(record, &vocab, &catalog, true).unwrap();
        let schema = TagSchema::Joint { attributes: catalog.len() };
        let seq = TagSequence { attribute: None, labels: enc.joint.clone(), score: 0.0 };
        let joint = extract_pairs(&[seq], schema, &record.tokens);
        let per: Vec<TagSequence> = (0..catalog.len())
            .map(|a| TagSequence { attribute: Some(a), labels: enc.tags[a].clone(), score: 0.0 })
            .collect();
        let separate = extract_pairs(&per, TagSchema::PerAttribute, &record.tokens);
        let mut gold = PairSet::new();
        for s in &record.spans {
            gold.entry(catalog.index(&s.attribute).unwrap()).or_default().insert(record.surface(s));
        }
        assert_eq!(joint.pairs, gold, "{}", record.id);
        assert_eq!(separate.pairs, gold, "{}", record.id);
        assert_eq!(joint.repairs, 0);
        preds.push(joint.pairs);
        golds.push(gold);
    }
    assert_eq!(pair_accuracy(&preds, &golds).unwrap().accuracy, 1.0);
}
