use proptest::prelude::*;

use icl_core::evaluator::{accuracy, bleu, extract_numeric_answer, numeric_accuracy};

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["the", "cat", "sat", "on", "a", "mat", "dog", "ran"]), 1..12)
        .prop_map(|w| w.join(" "))
}

fn paired() -> impl Strategy<Value = (Vec<String>, Vec<String>)> {
    (1usize..10).prop_flat_map(|n| (prop::collection::vec(sentence(), n), prop::collection::vec(sentence(), n)))
}

fn opt(xs: &[String]) -> Vec<Option<&str>> {
    xs.iter().map(|s| Some(s.as_str())).collect()
}

fn permuted<T: Clone>(xs: &[T], perm: &[usize]) -> Vec<T> {
    perm.iter().map(|&i| xs[i].clone()).collect()
}

proptest! {
    #[test]
    fn bleu_of_corpus_against_itself_is_one(refs in prop::collection::vec(sentence(), 1..10)) {
        let r = bleu(&opt(&refs), &refs, 4, false).unwrap();
        prop_assert_eq!(r.value, 1.0);
    }

    #[test]
    fn metrics_are_bounded((preds, refs) in paired()) {
        let b = bleu(&opt(&preds), &refs, 4, false).unwrap().value;
        prop_assert!((0.0..=1.0).contains(&b));
        let a = accuracy(&opt(&preds), &refs, true).unwrap().value;
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn metrics_are_permutation_covariant((preds, refs) in paired(), seed in any::<u64>()) {
        let n = preds.len();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let (pp, pr) = (permuted(&preds, &perm), permuted(&refs, &perm));
        let b0 = bleu(&opt(&preds), &refs, 4, false).unwrap().value;
        let b1 = bleu(&opt(&pp), &pr, 4, false).unwrap().value;
        prop_assert!((b0 - b1).abs() <= 1e-12);
        let a0 = accuracy(&opt(&preds), &refs, true).unwrap().value;
        let a1 = accuracy(&opt(&pp), &pr, true).unwrap().value;
        prop_assert_eq!(a0, a1);
    }

    #[test]
    fn raw_accuracy_is_byte_equality(a in "[a-zA-Z ]{0,6}", b in "[a-zA-Z ]{0,6}") {
        let r = accuracy(&[Some(a.as_str())], &[b.as_str()], false).unwrap();
        prop_assert_eq!(r.value, if a == b { 1.0 } else { 0.0 });
    }

    #[test]
    fn numeric_accuracy_on_identical_texts_is_one(refs in prop::collection::vec("[a-z ]{0,5}-?[0-9]{1,7}(\\.[0-9]{1,2})?[a-z .]{0,5}", 1..8)) {
        let r = numeric_accuracy(&opt(&refs), &refs).unwrap();
        prop_assert_eq!(r.value, 1.0);
        let extracted: Vec<String> = refs.iter().map(|s| extract_numeric_answer(s)).collect();
        let r = accuracy(&opt(&extracted), &extracted, false).unwrap();
        prop_assert_eq!(r.value, 1.0);
    }
}

#[test]
fn clipped_unigram_precision() {
    let p = [Some("the the the the the the the")];
    let r = ["the cat is on the mat"];
    let uni = bleu(&p, &r, 1, false).unwrap().value;
    // Seven candidate words against six reference words: the brevity
    // penalty is 1, so BLEU-1 is the clipped precision itself.
    assert!((uni - 2.0 / 7.0).abs() <= 1e-12, "{uni}");
    assert_eq!(bleu(&p, &r, 4, false).unwrap().value, 0.0);
}

#[test]
fn failed_predictions_count_as_wrong() {
    let r = accuracy(&[None, Some("a")], &["", "a"], true).unwrap();
    assert_eq!(r.value, 0.5);
    assert_eq!(r.n_failed, 1);
}
