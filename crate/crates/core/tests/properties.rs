use dapt_core::corpus::{split, Corpus};
use dapt_core::metrics::{confusion, macro_f1, prf, ConfusionCounts};
use dapt_core::mlm::{mask_batch, stream_rng, MaskingConfig};
use dapt_core::preprocess::{preprocess, EmojiAliasTable, PreprocessMode, MENTION_PLACEHOLDER, URL_PLACEHOLDER};
use dapt_core::tasks::Label;
use dapt_core::tokenizer::{is_special, TokenSequence, Vocab, CLS_ID, SEP_ID};
use once_cell::sync::Lazy;
use proptest::prelude::*;

fn noisy_text() -> impl Strategy<Value = String> {
    let piece = prop_oneof![
        "[a-zA-Z]{1,8}",
        Just("#".to_string()),
        Just("@".to_string()),
        Just("http://".to_string()),
        Just("www.".to_string()),
        Just("\u{1F97A}".to_string()),
        Just("\u{2764}\u{FE0F}".to_string()),
        Just(" ".to_string()),
        Just("  \t".to_string()),
        Just("\n".to_string()),
        Just("\n \n".to_string()),
        "[.,!?/:_]",
    ];
    prop::collection::vec(piece, 0..24).prop_map(|v| v.concat())
}

static VOCAB: Lazy<Vocab> = Lazy::new(|| {
    let texts = ["the quick brown fox jumps over the lazy dog", "pack my box with five dozen liquor jugs"];
    Vocab::train(texts.iter().copied(), 60, true).unwrap()
});

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn preprocessing_is_idempotent(text in noisy_text()) {
        for mode in [PreprocessMode::Retraining, PreprocessMode::Finetuning] {
            let once = preprocess(&text, mode, EmojiAliasTable::pinned());
            prop_assert_eq!(preprocess(&once, mode, EmojiAliasTable::pinned()), once.clone());
            prop_assert!(!once.contains('#'));
            prop_assert!(!once.contains("http://") && !once.to_lowercase().contains("www."));
            prop_assert!(!once.contains("  ") && !once.contains('\t'));
        }
    }

    #[test]
    fn placeholders_replace_whole_matches(user in "[A-Za-z0-9_]{1,10}", path in "[a-z0-9/.?=]{0,12}", word in "[a-z]{1,6}") {
        let text = format!("{word} @{user} https://{path} {word}");
        let out = preprocess(&text, PreprocessMode::Finetuning, EmojiAliasTable::pinned());
        prop_assert_eq!(out, format!("{word} {MENTION_PLACEHOLDER} {URL_PLACEHOLDER} {word}"));
    }

    #[test]
    fn tokenizer_round_trips_known_alphabet(words in prop::collection::vec("[a-z]{1,7}", 0..12), max_len in 2usize..40) {
        let text = words.join(" ");
        let full = VOCAB.encode(&text, 10_000);
        prop_assert!(full.ids.iter().all(|&id| id != dapt_core::tokenizer::UNK_ID || words.iter().any(|w| w.chars().any(|c| VOCAB.id(&c.to_string()).is_none()))));
        let known = words.iter().all(|w| w.chars().all(|c| VOCAB.id(&c.to_string()).is_some()));
        if known {
            prop_assert_eq!(VOCAB.decode(&full).unwrap(), text.clone());
        }
        let cut = VOCAB.encode(&text, max_len);
        prop_assert!(cut.len() <= max_len);
        prop_assert_eq!(cut.ids[0], CLS_ID);
        prop_assert_eq!(*cut.ids.last().unwrap(), SEP_ID);
        prop_assert!(cut.ids[1..cut.len() - 1].iter().all(|&id| !is_special(id) || id == dapt_core::tokenizer::UNK_ID));
    }

    #[test]
    fn metrics_agree_with_brute_force(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..50)) {
        let gold: Vec<Label> = pairs.iter().map(|p| if p.0 { Label::Positive } else { Label::Negative }).collect();
        let pred: Vec<Label> = pairs.iter().map(|p| if p.1 { Label::Positive } else { Label::Negative }).collect();
        let c = confusion(&gold, &pred).unwrap();
        prop_assert_eq!(c.total(), pairs.len());
        let mut f1s = Vec::new();
        for class in [Label::Positive, Label::Negative] {
            let (mut tp, mut fp, mut fneg) = (0.0f64, 0.0f64, 0.0f64);
            for (g, p) in gold.iter().zip(&pred) {
                if *p == class && *g == class { tp += 1.0 }
                if *p == class && *g != class { fp += 1.0 }
                if *p != class && *g == class { fneg += 1.0 }
            }
            let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let recall = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
            let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
            let m = prf(&c, class);
            prop_assert!((m.precision - precision).abs() <= 1e-12);
            prop_assert!((m.recall - recall).abs() <= 1e-12);
            prop_assert!((m.f1 - f1).abs() <= 1e-12);
            f1s.push(f1);
        }
        prop_assert!((macro_f1(&c) - (f1s[0] + f1s[1]) / 2.0).abs() <= 1e-12);
        let swapped: ConfusionCounts = c.swapped();
        prop_assert!((macro_f1(&swapped) - macro_f1(&c)).abs() <= 1e-12);
        prop_assert_eq!(prf(&swapped, Label::Positive), prf(&c, Label::Negative));
    }

    #[test]
    fn split_partitions_corpus(n in 1usize..200, frac in 0.0f64..1.0, seed in any::<u64>()) {
        let corpus = Corpus::from_texts("c", (0..n).map(|i| format!("doc {i}")));
        let held = ((n as f64) * frac) as usize;
        let s = split(&corpus, held, seed).unwrap();
        prop_assert_eq!(s.heldout.len(), held);
        let mut all: Vec<&str> = s.train.texts().chain(s.heldout.texts()).collect();
        all.sort_unstable();
        let mut want: Vec<&str> = corpus.texts().collect();
        want.sort_unstable();
        prop_assert_eq!(all, want);
    }

    #[test]
    fn masking_never_touches_specials(lens in prop::collection::vec(0usize..30, 1..8), seed in any::<u64>()) {
        let batch: Vec<TokenSequence> = lens.iter().enumerate().map(|(k, &len)| {
            let mut ids = vec![CLS_ID];
            ids.extend((0..len).map(|i| if (i + k) % 7 == 3 { dapt_core::tokenizer::UNK_ID } else { 5 + ((i * 13 + k) % 40) as u32 }));
            ids.push(SEP_ID);
            TokenSequence { ids }
        }).collect();
        let cfg = MaskingConfig { mask_prob: 0.5, ..Default::default() };
        let mb = mask_batch(&batch, 45, &cfg, &mut stream_rng(seed, 0));
        for (i, seq) in batch.iter().enumerate() {
            for &p in &mb.masked_positions[i] {
                prop_assert!(!is_special(seq.ids[p]));
            }
            for (p, &id) in seq.ids.iter().enumerate() {
                if is_special(id) {
                    prop_assert_eq!(mb.input_ids[i][p], id);
                    prop_assert!(mb.labels[i][p].is_none());
                }
            }
        }
    }
}
