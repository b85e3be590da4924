use proptest::prelude::*;
use sora_core::corpus::{
    chunk_text, generate_synthetic_corpus, organ_prototypes, read_jsonl, split_corpus, split_sentences, write_jsonl,
    CorpusConfig, OrganOverlap, SplitSpec,
};
use sora_core::ops::cosine_similarity;
use sora_core::stats::spearman;
use sora_core::Error;

fn sentences(n: usize) -> String {
    (0..n)
        .map(|i| format!("Sentence number {i} here."))
        .collect::<Vec<_>>()
        .join(" ")
}

fn chunk_sizes(raw: &str) -> Vec<usize> {
    chunk_text(raw, 2, 3).iter().map(|c| split_sentences(c).len()).collect()
}

#[test]
fn chunk_sizes_follow_greedy_rule() {
    assert_eq!(chunk_sizes(&sentences(6)), vec![3, 3]);
    assert_eq!(chunk_sizes(&sentences(5)), vec![3, 2]);
    assert_eq!(chunk_sizes(&sentences(1)), vec![1]);
    assert!(chunk_text("", 2, 3).is_empty());
    assert!(chunk_text("  \n ", 2, 3).is_empty());
}

#[test]
fn chunking_handles_mixed_delimiters() {
    let chunks = chunk_text("Sharp pain! Worse at night? Radiates to the back. Nausea.", 2, 3);
    assert_eq!(
        chunks,
        vec!["Sharp pain! Worse at night? Radiates to the back.", "Nausea."]
    );
}

proptest! {
    #[test]
    fn every_sentence_lands_in_exactly_one_chunk(
        words in prop::collection::vec("[a-z]{1,8}( [a-z]{1,8}){0,4}", 0..20),
        enders in prop::collection::vec(prop::sample::select(vec!['.', '!', '?']), 20),
    ) {
        let sents: Vec<String> = words.iter().zip(&enders).map(|(w, e)| format!("{w}{e}")).collect();
        let raw = sents.join(" ");
        let chunks = chunk_text(&raw, 2, 3);
        let rebuilt: Vec<String> = chunks
            .iter()
            .flat_map(|c| split_sentences(c).into_iter().map(String::from).collect::<Vec<_>>())
            .collect();
        prop_assert_eq!(rebuilt, sents.clone());
        prop_assert_eq!(chunks.len(), sents.len().div_ceil(3));
        for c in &chunks[..chunks.len().saturating_sub(1)] {
            prop_assert_eq!(split_sentences(c).len(), 3);
        }
    }
}

#[test]
fn degenerate_mixture_reproduces_prototypes() {
    let cfg = CorpusConfig {
        per_organ: 5,
        noise_sigma: 0.0,
        mixture_alpha: 0.0,
        ..Default::default()
    };
    let protos = organ_prototypes(&cfg).unwrap();
    for r in generate_synthetic_corpus(&cfg).unwrap() {
        for (k, p) in protos.iter().enumerate() {
            let c = cosine_similarity(&r.embedding, p).unwrap();
            if k == r.organ_id {
                assert!((c - 1.0).abs() < 1e-12);
                for (a, b) in r.embedding.iter().zip(p) {
                    assert!((a - b).abs() < 1e-12);
                }
            } else {
                assert!(c.abs() <= 0.1);
            }
        }
    }
}

#[test]
fn default_corpus_has_200_records_per_organ() {
    let records = generate_synthetic_corpus(&CorpusConfig::default()).unwrap();
    assert_eq!(records.len(), 1400);
    for organ in 0..7 {
        assert_eq!(records.iter().filter(|r| r.organ_id == organ).count(), 200);
    }
    for r in &records {
        assert_eq!(r.embedding.len(), 64);
        let w = r.planted_weights.as_ref().unwrap();
        assert_eq!(w[r.organ_id], 1.0);
        assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn generation_is_deterministic() {
    let cfg = CorpusConfig {
        per_organ: 20,
        seed: 42,
        ..Default::default()
    };
    let a = generate_synthetic_corpus(&cfg).unwrap();
    let b = generate_synthetic_corpus(&cfg).unwrap();
    assert_eq!(a, b);
    let c = generate_synthetic_corpus(&CorpusConfig { seed: 43, ..cfg }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn too_few_dimensions_is_a_config_error() {
    let cfg = CorpusConfig {
        n_organs: 7,
        d_txt: 5,
        ..Default::default()
    };
    assert!(matches!(generate_synthetic_corpus(&cfg), Err(Error::Config(_))));
}

fn prototype_spearman(alpha: f64, noise: f64, seed: u64) -> f64 {
    let cfg = CorpusConfig {
        mixture_alpha: alpha,
        noise_sigma: noise,
        seed,
        ..Default::default()
    };
    let protos = organ_prototypes(&cfg).unwrap();
    let records = generate_synthetic_corpus(&cfg).unwrap();
    records
        .iter()
        .map(|r| {
            let sims: Vec<f64> = protos
                .iter()
                .map(|p| cosine_similarity(&r.embedding, p).unwrap())
                .collect();
            spearman(&sims, r.planted_weights.as_ref().unwrap()).unwrap()
        })
        .sum::<f64>()
        / records.len() as f64
}

#[test]
fn planted_weights_track_prototype_similarity() {
    for alpha in [0.2, 0.4] {
        let s = prototype_spearman(alpha, 0.0, 1);
        assert!((s - 1.0).abs() < 1e-12, "alpha {alpha} noiseless: {s}");
    }
    for alpha in [0.4, 0.5] {
        let mean = (0..3).map(|seed| prototype_spearman(alpha, 0.05, seed)).sum::<f64>() / 3.0;
        assert!(mean > 0.9, "alpha {alpha}: mean spearman {mean}");
    }
}

#[test]
fn overlap_pairs_carry_each_others_weight() {
    let cfg = CorpusConfig {
        per_organ: 30,
        overlaps: vec![OrganOverlap {
            a: 1,
            b: 4,
            weight: 0.8,
        }],
        ..Default::default()
    };
    for r in generate_synthetic_corpus(&cfg).unwrap() {
        let w = r.planted_weights.unwrap();
        match r.organ_id {
            1 => assert!((0.4..0.8).contains(&w[4])),
            4 => assert!((0.4..0.8).contains(&w[1])),
            _ => {}
        }
    }
}

#[test]
fn split_is_stratified_partition() {
    let records = generate_synthetic_corpus(&CorpusConfig::default()).unwrap();
    let (train, test) = split_corpus(&records, &SplitSpec::default()).unwrap();
    for organ in 0..7 {
        assert_eq!(train.iter().filter(|r| r.organ_id == organ).count(), 160);
        assert_eq!(test.iter().filter(|r| r.organ_id == organ).count(), 40);
    }
    let mut ids: Vec<&str> = train.iter().chain(&test).map(|r| r.id.as_str()).collect();
    ids.sort_unstable();
    let mut all: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
    all.sort_unstable();
    assert_eq!(ids, all);

    let again = split_corpus(&records, &SplitSpec::default()).unwrap();
    assert_eq!(again.0, train);
}

#[test]
fn two_records_split_one_one_and_one_record_fails() {
    let cfg = CorpusConfig {
        n_organs: 2,
        per_organ: 2,
        d_txt: 4,
        ..Default::default()
    };
    let records = generate_synthetic_corpus(&cfg).unwrap();
    let spec = SplitSpec {
        train_fraction: 0.5,
        seed: 1,
    };
    let (train, test) = split_corpus(&records, &spec).unwrap();
    assert_eq!((train.len(), test.len()), (2, 2));
    assert!(matches!(split_corpus(&records[1..], &spec), Err(Error::Contract(_))));
}

#[test]
fn jsonl_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    let cfg = CorpusConfig {
        per_organ: 3,
        ..Default::default()
    };
    let records = generate_synthetic_corpus(&cfg).unwrap();
    write_jsonl(&path, &records).unwrap();
    assert_eq!(read_jsonl(&path).unwrap(), records);
    let first = std::fs::read_to_string(&path).unwrap();
    let line: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    for key in ["id", "organ_id", "text", "embedding", "planted_weights"] {
        assert!(line.get(key).is_some(), "missing {key}");
    }
}
