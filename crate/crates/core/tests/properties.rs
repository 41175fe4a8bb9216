//! Property-based checks for sequences, masks, vocabularies, splits and the
//! reward blend.

mod common;

use proptest::prelude::*;
use reviewgan::corpus::{
    decode, encode, split_and_subsample, Class, Example, SplitSpec, TokenSequence, Vocabulary, END, PAD, START,
};
use reviewgan::rl::blend;

fn valid_sequence(vocab: u32, max_len: usize) -> impl Strategy<Value = Vec<u32>> {
    (2..=max_len).prop_flat_map(move |len| {
        (
            Just(len),
            1..len,
            any::<bool>(),
            prop::collection::vec(4..vocab, len),
        )
            .prop_map(|(len, content, end, words)| {
                let mut ids = vec![START];
                ids.extend(&words[..content - 1]);
                if end && ids.len() < len {
                    ids.push(END);
                }
                ids.resize(len, PAD);
                ids
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn arbitrary_ids_accepted_iff_well_formed(ids in prop::collection::vec(0u32..8, 0..12)) {
        prop_assert_eq!(TokenSequence::new(ids.clone()).is_ok(), common::well_formed(&ids));
    }

    #[test]
    fn mask_marks_exactly_the_non_pad_prefix(ids in valid_sequence(20, 24)) {
        let s = TokenSequence::new(ids.clone()).unwrap();
        prop_assert_eq!(s.len(), ids.len());
        for (i, (&m, &t)) in s.mask().iter().zip(&ids).enumerate() {
            prop_assert_eq!(m, t != PAD, "position {}", i);
        }
        prop_assert_eq!(s.content_len(), ids.iter().filter(|&&t| t != PAD).count());
        prop_assert!(s.mask().windows(2).all(|w| w[0] || !w[1]));
        prop_assert_eq!(s.has_end(), ids.contains(&END));
    }

    #[test]
    fn sequence_serde_round_trip(ids in valid_sequence(30, 16)) {
        let s = TokenSequence::new(ids).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        prop_assert_eq!(serde_json::from_str::<TokenSequence>(&json).unwrap(), s);
    }

    #[test]
    fn encode_is_fixed_length_and_decodes_back(
        words in prop::collection::vec(0usize..6, 0..20),
        max_len in 3usize..24,
    ) {
        let vocab = Vocabulary::from_words(["alpha", "beta", "gamma", "delta", "eps", "zeta"].map(String::from)).unwrap();
        let names = ["alpha", "beta", "gamma", "delta", "eps", "zeta"];
        let text = words.iter().map(|&w| names[w]).collect::<Vec<_>>().join(" ");
        let s = encode(&text, &vocab, max_len).unwrap();
        prop_assert_eq!(s.len(), max_len);
        prop_assert_eq!(s.ids()[0], START);
        let kept = words.len().min(max_len - 1);
        let expect: Vec<&str> = words[..kept].iter().map(|&w| names[w]).collect();
        prop_assert_eq!(decode(&s, &vocab, true).unwrap(), expect.join(" "));
        prop_assert_eq!(s.has_end(), words.len() + 2 <= max_len);
    }

    #[test]
    fn blend_is_bounded_symmetric_and_idempotent(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let m = blend(a, b);
        prop_assert_eq!(m, blend(b, a));
        prop_assert!(m >= a.min(b) - 1e-15);
        prop_assert!(m <= (a + b) / 2.0 + 1e-15);
        prop_assert_eq!(blend(a, a), a);
        if a != b && a.min(b) > 0.0 {
            prop_assert!(m < (a + b) / 2.0);
        }
    }

    #[test]
    fn split_is_stratified_disjoint_and_seeded(
        spam in 10usize..60,
        nonspam in 10usize..60,
        unl in 0usize..50,
        lf in 0.1f64..=1.0,
        uf in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let vocab = Vocabulary::from_words((0..40).map(|i| format!("w{i}"))).unwrap();
        let mk = |i: usize| common::seq(&[START, 4 + (i % 36) as u32, 4 + (i / 36 % 36) as u32, END]);
        let labeled: Vec<Example> = (0..spam + nonspam)
            .map(|i| Example::labeled(mk(i), if i < spam { Class::Spam } else { Class::NonSpam }))
            .collect();
        let unlabeled: Vec<Example> = (0..unl).map(|i| Example::unlabeled(mk(1000 + i))).collect();
        let split = SplitSpec { test_fraction: 0.25, labeled_fraction: lf, unlabeled_fraction: uf, seed };
        let a = split_and_subsample(&labeled, &unlabeled, vocab.clone(), split.clone()).unwrap();
        let b = split_and_subsample(&labeled, &unlabeled, vocab, split).unwrap();
        prop_assert_eq!(&a, &b);
        let count = |xs: &[Example], c: Class| xs.iter().filter(|e| e.label == Some(c)).count();
        for (c, n) in [(Class::Spam, spam), (Class::NonSpam, nonspam)] {
            let test = count(&a.labeled_test, c);
            prop_assert_eq!(test, (n as f64 * 0.25).round() as usize);
            let train_pool = n - test;
            prop_assert_eq!(count(&a.labeled_train, c), (train_pool as f64 * lf).round() as usize);
        }
        prop_assert_eq!(a.unlabeled.len(), (unl as f64 * uf).round() as usize);
        for e in &a.labeled_train {
            prop_assert!(!a.labeled_test.contains(e));
        }
    }
}

#[test]
fn blend_bounds_over_ten_thousand_pairs() {
    use rand::Rng;
    let mut r = common::rng(77);
    for _ in 0..10_000 {
        let a: f64 = r.random();
        let b: f64 = r.random();
        let m = blend(a, b);
        assert!(a.min(b) <= m + 1e-15 && m <= (a + b) / 2.0 + 1e-15);
        assert_eq!(blend(a, a), a);
    }
}
