use lql_core::data::{
    build_instruction_sample, detokenize, load_corpus, pack_pretraining_batches, parse_token_file,
    read_instruction_jsonl, read_token_file, tokenize, write_instruction_jsonl, write_token_file, InstructionRecord,
    TokenizedCorpus, END_TOKEN,
};
use lql_core::Error;
use proptest::prelude::*;

#[test]
fn corpus_files_concatenate_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.tok");
    std::fs::write(&a, b"hello ").unwrap();
    write_token_file(&b, &[119, 111, 114, 108, 100, END_TOKEN]).unwrap();
    let c = load_corpus(&[a.clone(), b.clone()]).unwrap();
    assert_eq!(detokenize(&c.tokens).unwrap(), b"hello world");
    assert_eq!(c.document(1).unwrap().len(), 6);
    assert_eq!(c.manifest[1].token_offset, 6);
    let missing = dir.path().join("missing.txt");
    assert!(matches!(load_corpus(&[a, missing]), Err(Error::Data(_))));
}

#[test]
fn instruction_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.jsonl");
    let recs = vec![
        InstructionRecord { prompt: "Q: 2+2?\n".into(), target: "4".into() },
        InstructionRecord { prompt: "line \"quoted\"".into(), target: "ok\ttab".into() },
    ];
    write_instruction_jsonl(&path, &recs).unwrap();
    assert_eq!(read_instruction_jsonl(&path).unwrap(), recs);
    std::fs::write(&path, "{\"prompt\": 1}\n").unwrap();
    assert!(matches!(read_instruction_jsonl(&path), Err(Error::Data(_))));
}

#[test]
fn overlong_target_is_rejected() {
    assert!(matches!(build_instruction_sample("p", "abcdef", 6), Err(Error::Length { .. })));
    assert!(build_instruction_sample("p", "abcde", 6).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn bytes_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..500)) {
        let ids = tokenize(&bytes);
        prop_assert!(ids.iter().all(|&t| t < 256));
        prop_assert_eq!(detokenize(&ids).unwrap(), bytes);
    }

    #[test]
    fn token_file_round_trip(ids in proptest::collection::vec(0u32..=256, 0..300)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tok");
        write_token_file(&path, &ids).unwrap();
        prop_assert_eq!(read_token_file(&path).unwrap(), ids.clone());
        let bytes = std::fs::read(&path).unwrap();
        prop_assert!(parse_token_file(&bytes[..bytes.len() - 1]).is_err() || ids.is_empty());
    }

    #[test]
    fn instruction_mask_covers_exactly_the_target(
        prompt in "[ -~]{0,80}",
        target in "[ -~]{0,20}",
        ctx in 21usize..64,
    ) {
        let s = build_instruction_sample(&prompt, &target, ctx).unwrap();
        let t = target.len() + 1;
        prop_assert!(s.tokens.len() <= ctx);
        prop_assert_eq!(s.tokens.len(), s.mask.len());
        prop_assert_eq!(*s.tokens.last().unwrap(), END_TOKEN);
        prop_assert_eq!(s.mask.count(), t);
        let split = s.tokens.len() - t;
        prop_assert!(s.mask.as_slice()[..split].iter().all(|&m| !m));
        prop_assert_eq!(&s.tokens[split..split + target.len()], &tokenize(target.as_bytes())[..]);
        // the kept prompt is a suffix of the original, as long as room allows
        let p = tokenize(prompt.as_bytes());
        prop_assert_eq!(&s.tokens[..split], &p[p.len() - split..]);
        prop_assert_eq!(split, p.len().min(ctx - t));
    }

    #[test]
    fn packing_partitions_the_prefix(len in 3usize..400, seq in 2usize..40, seed in 0u64..50) {
        let tokens: Vec<u32> = (0..len as u32).collect();
        match pack_pretraining_batches(&tokens, seq, seed) {
            Err(_) => prop_assert!(len < seq + 1),
            Ok(spans) => {
                prop_assert_eq!(spans.len(), len / seq);
                let mut starts: Vec<u32> = spans.iter().map(|s| s.tokens[0]).collect();
                starts.sort_unstable();
                let want: Vec<u32> = (0..len / seq).map(|i| (i * seq) as u32).collect();
                prop_assert_eq!(starts, want);
                for s in &spans {
                    prop_assert_eq!(s.tokens.len(), seq);
                    prop_assert!(s.tokens.windows(2).all(|w| w[1] == w[0] + 1));
                    prop_assert_eq!(s.mask.count(), seq);
                }
                prop_assert_eq!(pack_pretraining_batches(&tokens, seq, seed).unwrap(), spans);
            }
        }
    }

    #[test]
    fn tail_split_sizes(len in 0usize..500, frac in 0.0f64..0.99) {
        let c = TokenizedCorpus::from_tokens((0..len as u32).collect());
        let (train, eval) = c.split_tail(frac).unwrap();
        prop_assert_eq!(train.len() + eval.len(), len);
        prop_assert_eq!(eval.len(), (len as f64 * frac).round() as usize);
        prop_assert!(eval.iter().all(|&t| train.iter().all(|&u| u < t)));
    }
}
