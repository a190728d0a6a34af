mod common;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use ngtype_core::corpus::{split_overlap, validate_splits, Bitness, Corpus, Split};
use ngtype_core::lexer::{
    call_key, call_window, hash_context, tokenize, variable_key, variable_window, NGramKey, Token,
};
use ngtype_core::ngramdb::{
    build_ensemble, merge_databases, DbMeta, LabelTable, NGramDatabase, Vocabulary, DEFAULT_PORTFOLIO,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

const ATOMS: &[&str] = &[
    "x", "y", "_tmp1", "sub_4010", "buf$", "if", "while", "return", "int", "(", ")", "{", "}", "[", "]", ";",
    ",", ".", "->", "=", "==", "+=", "<<=", "&&", "++", "-", "*", "&", "!", "?", ":", "0", "0x1F", "42u",
    "1.5e3", "'a'", "'\\n'", "\"str\"", "\"a \\\" b\"", "/* c */", "// line\n", "\n", "\t",
];

fn source() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(ATOMS), 0..40).prop_map(|atoms| atoms.join(" "))
}

fn texts(tokens: &[Token]) -> Vec<&str> {
    tokens.iter().map(|t| t.text.as_str()).collect()
}

proptest! {
    #[test]
    fn joined_stream_retokenizes_identically(src in source()) {
        let first = tokenize(&src);
        let again = tokenize(&first.joined());
        prop_assert_eq!(first.tokens(), again.tokens());
    }

    #[test]
    fn arbitrary_text_normalizes_idempotently(src in "\\PC{0,80}") {
        let first = tokenize(&src);
        let again = tokenize(&first.joined());
        prop_assert_eq!(texts(first.tokens()), texts(again.tokens()));
    }

    #[test]
    fn window_lengths_follow_the_radius(src in source(), n in 1usize..10) {
        let stream = tokenize(&src);
        for pos in 0..stream.len() {
            let w = variable_window(&stream, pos, n);
            prop_assert_eq!(w.hashed_len(), 2 * n);
            prop_assert_eq!(w.key, variable_key(&stream, pos, n));
            if let Some(c) = call_window(&stream, pos, n) {
                prop_assert_eq!(c.left.len(), n);
                prop_assert!(c.right.len() >= n);
                let args = c.right.len() - n;
                prop_assert_eq!(c.hashed_len(), 2 * n + args);
                prop_assert_eq!(Some(c.key), call_key(&stream, pos, n));
                if !c.truncated {
                    prop_assert_eq!(c.right.get(args - 1).map(String::as_str), Some(")"));
                }
            }
        }
    }
}

#[test]
fn no_hash_collisions_among_a_million_sequences() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let vocab: Vec<String> = (0..500).map(|i| format!("t{i}")).collect();
    let mut seqs: HashSet<Vec<u16>> = HashSet::with_capacity(1_000_000);
    while seqs.len() < 1_000_000 {
        let len = rng.gen_range(4..12);
        seqs.insert((0..len).map(|_| rng.gen_range(0..vocab.len() as u16)).collect());
    }
    let mut keys: HashSet<NGramKey> = HashSet::with_capacity(seqs.len());
    let mut collisions = 0usize;
    for s in &seqs {
        if !keys.insert(hash_context(s.iter().map(|&i| vocab[i as usize].as_str()))) {
            collisions += 1;
        }
    }
    let rate = collisions as f64 / seqs.len() as f64;
    assert!(rate < 1e-6, "{collisions} collisions among {} sequences", seqs.len());
}

fn meta() -> DbMeta {
    DbMeta {
        n: 2,
        bitness: Bitness::B64,
        vocabulary: Vocabulary::Types,
    }
}

type RawDb = (Vec<String>, Vec<(u64, Vec<(u32, u32)>)>);

fn raw_db() -> impl Strategy<Value = RawDb> {
    let names = prop::collection::btree_set("[a-f]{1,2}", 1..8).prop_map(|s| s.into_iter().collect::<Vec<_>>());
    names.prop_flat_map(|names| {
        let l = names.len() as u32;
        let pairs = prop::collection::vec((0..l, 1u32..6), 1..6);
        (Just(names), prop::collection::vec((0u64..20, pairs), 0..15))
    })
}

fn db(raw: &RawDb) -> NGramDatabase {
    let (names, entries) = raw;
    let labels = Arc::new(LabelTable::from_names(names.iter().cloned()));
    let mut freq = vec![0u64; labels.len()];
    for (_, pairs) in entries {
        for &(l, c) in pairs {
            freq[l as usize] += c as u64;
        }
    }
    // ids in `entries` index `names`, which is already sorted
    NGramDatabase::from_entries(meta(), labels, freq, entries.iter().map(|(k, v)| (NGramKey(*k), v.clone()))).unwrap()
}

/// Entries with label ids replaced by names, for comparing across label tables.
fn by_name(db: &NGramDatabase) -> BTreeMap<u64, BTreeMap<String, u32>> {
    db.entries()
        .map(|(k, pairs)| {
            let named = pairs.into_iter().map(|(l, c)| (db.labels().name(l).to_string(), c)).collect();
            (k.0, named)
        })
        .collect()
}

proptest! {
    #[test]
    fn top_k_agrees_with_a_full_sort(raw in raw_db(), k in 1usize..6) {
        let d = db(&raw);
        let mut totals: HashMap<u64, BTreeMap<u32, u32>> = HashMap::new();
        for (key, pairs) in &raw.1 {
            for &(l, c) in pairs {
                *totals.entry(*key).or_default().entry(l).or_default() += c;
            }
        }
        for (key, per_label) in totals {
            let mut full: Vec<(u32, u32)> = per_label.into_iter().collect();
            full.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            let q = d.query(NGramKey(key), k);
            prop_assert_eq!(q.distinct_label_count, full.len());
            prop_assert_eq!(&q.candidates[..], &full[..k.min(full.len())]);
            if let Some(&(_, last)) = q.candidates.last() {
                prop_assert!(full[q.candidates.len()..].iter().all(|&(_, c)| c <= last));
            }
        }
    }

    #[test]
    fn merge_is_associative_and_commutative(a in raw_db(), b in raw_db(), c in raw_db()) {
        let (a, b, c) = (db(&a), db(&b), db(&c));
        let left = merge_databases(&merge_databases(&a, &b).unwrap(), &c).unwrap();
        let right = merge_databases(&a, &merge_databases(&b, &c).unwrap()).unwrap();
        prop_assert_eq!(by_name(&left), by_name(&right));
        prop_assert_eq!(left.labels().names(), right.labels().names());
        prop_assert_eq!(left.global_frequencies(), right.global_frequencies());
        let ab = merge_databases(&a, &b).unwrap();
        let ba = merge_databases(&b, &a).unwrap();
        prop_assert_eq!(by_name(&ab), by_name(&ba));
    }

    #[test]
    fn builds_are_query_identical(seed in 0u64..1000) {
        let c = random_corpus(seed, 30);
        let (x, _) = build_ensemble(&c, &DEFAULT_PORTFOLIO, Bitness::B64, Vocabulary::Types, 1).unwrap();
        let (y, _) = build_ensemble(&c, &DEFAULT_PORTFOLIO, Bitness::B64, Vocabulary::Types, 3).unwrap();
        for (dx, dy) in x.databases().iter().zip(y.databases()) {
            prop_assert_eq!(by_name(dx), by_name(dy));
        }
    }

    #[test]
    fn split_overlap_is_symmetric(seed in 0u64..1000) {
        let c = random_corpus(seed, 40);
        for a in Split::ALL {
            for b in Split::ALL {
                let ab = split_overlap(&c, a, b);
                let ba = split_overlap(&c, b, a);
                prop_assert_eq!(ab.shared, ba.shared);
                prop_assert_eq!(ab.overlap, ba.overlap);
                prop_assert_eq!(ab.a_in_b, ba.b_in_a);
            }
        }
        prop_assert_eq!(validate_splits(&c).counts.values().sum::<usize>(), c.functions.len());
    }

    #[test]
    fn corpus_survives_a_jsonl_round_trip(seed in 0u64..1000) {
        let c = random_corpus(seed, 20);
        let mut buf = Vec::new();
        c.write_jsonl(&mut buf).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(&path, &buf).unwrap();
        let back = Corpus::load(&path, c.types.clone(), c.signatures.clone()).unwrap();
        prop_assert_eq!(back, c);
    }
}
