//! Random instance generators shared by the integration suites.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wmd::{doc_matrix_from_entries, DenseMatrix, DocMatrix, EmbeddingMatrix, QueryHistogram};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Embedding table with uniform coordinates in `[0, 1)` and synthetic token
/// names.
pub fn random_embedding<R: Rng>(rng: &mut R, vocab: usize, dim: usize) -> EmbeddingMatrix {
    let data: Vec<f64> = (0..vocab * dim).map(|_| rng.random::<f64>()).collect();
    let tokens = (0..vocab).map(|i| format!("w{i}")).collect();
    EmbeddingMatrix::new(DenseMatrix::from_vec(vocab, dim, data).unwrap(), tokens).unwrap()
}

/// Corpus where each `(word, doc)` pair is stored with probability
/// `density`; documents that would come out empty get one random word.
pub fn random_corpus<R: Rng>(rng: &mut R, vocab: usize, docs: usize, density: f64) -> DocMatrix {
    let mut entries = Vec::new();
    for j in 0..docs {
        let before = entries.len();
        for g in 0..vocab {
            if rng.random_bool(density) {
                entries.push((j, g, rng.random_range(1..=5) as f64));
            }
        }
        if entries.len() == before {
            entries.push((j, rng.random_range(0..vocab), 1.0));
        }
    }
    doc_matrix_from_entries(vocab, docs, &entries).unwrap()
}

/// Corpus with exactly `words_per_doc` distinct words per document, so the
/// total entry count is exactly `docs * words_per_doc`.
pub fn random_corpus_fixed_width<R: Rng>(
    rng: &mut R,
    vocab: usize,
    docs: usize,
    words_per_doc: usize,
) -> DocMatrix {
    let mut entries = Vec::with_capacity(docs * words_per_doc);
    for j in 0..docs {
        for g in rand::seq::index::sample(rng, vocab, words_per_doc) {
            entries.push((j, g, rng.random_range(1..=5) as f64));
        }
    }
    doc_matrix_from_entries(vocab, docs, &entries).unwrap()
}

/// Normalized histogram over `v_r` distinct random words.
pub fn random_query<R: Rng>(rng: &mut R, vocab: usize, v_r: usize) -> QueryHistogram {
    let mut sel = rand::seq::index::sample(rng, vocab, v_r).into_vec();
    sel.sort_unstable();
    let counts: Vec<f64> = (0..v_r).map(|_| rng.random_range(1..=9) as f64).collect();
    let total: f64 = counts.iter().sum();
    let val = counts.iter().map(|c| c / total).collect();
    QueryHistogram::new(vocab, sel, val).unwrap()
}
