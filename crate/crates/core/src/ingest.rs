//! Input loading: fastText-format embeddings, tokenization, and conversion of
//! token streams into the normalized corpus matrix and query histograms.

use std::collections::{HashMap, HashSet};
use std::io::BufRead;

use crate::error::{Error, Result};
use crate::matrix::{doc_matrix_from_entries, DenseMatrix, DocMatrix};

/// Word embedding table with token lookup.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    data: DenseMatrix,
    token_to_row: HashMap<String, usize>,
}

impl EmbeddingMatrix {
    /// Wraps an embedding table, pairing row `i` of `data` with `tokens[i]`.
    ///
    /// # Errors
    /// [`Error::DimensionMismatch`] if the token count differs from the row
    /// count, [`Error::DuplicateToken`] if a token repeats.
    pub fn new(data: DenseMatrix, tokens: Vec<String>) -> Result<Self> {
        if tokens.len() != data.rows() {
            return Err(Error::DimensionMismatch(format!(
                "{} tokens for {} embedding rows",
                tokens.len(),
                data.rows()
            )));
        }
        let mut token_to_row = HashMap::with_capacity(tokens.len());
        for (row, token) in tokens.into_iter().enumerate() {
            if token_to_row.insert(token.clone(), row).is_some() {
                return Err(Error::DuplicateToken(token));
            }
        }
        Ok(EmbeddingMatrix { data, token_to_row })
    }

    /// Number of vocabulary entries (V).
    pub fn vocab_size(&self) -> usize {
        self.data.rows()
    }

    /// Embedding dimension (w).
    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    /// The V x w coordinate matrix.
    pub fn data(&self) -> &DenseMatrix {
        &self.data
    }

    /// Embedding coordinates of vocabulary entry `g`.
    pub fn row(&self, g: usize) -> &[f64] {
        self.data.row(g)
    }

    /// Vocabulary index of `token`, if present.
    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.token_to_row.get(token).copied()
    }

    pub fn token_to_row(&self) -> &HashMap<String, usize> {
        &self.token_to_row
    }
}

/// Sparse normalized word histogram of a single query document.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryHistogram {
    vocab_size: usize,
    idx: Vec<usize>,
    val: Vec<f64>,
}

impl QueryHistogram {
    /// Validates and wraps a sparse histogram: `idx` strictly increasing and
    /// below `vocab_size`, all values positive, values summing to 1 within
    /// 1e-12.
    pub fn new(vocab_size: usize, idx: Vec<usize>, val: Vec<f64>) -> Result<Self> {
        if idx.len() != val.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} indices vs {} values",
                idx.len(),
                val.len()
            )));
        }
        if idx.is_empty() {
            return Err(Error::EmptyDocument(0));
        }
        for (pos, &g) in idx.iter().enumerate() {
            if g >= vocab_size {
                return Err(Error::IndexOutOfRange {
                    what: "word",
                    index: g,
                    limit: vocab_size,
                });
            }
            if pos > 0 && idx[pos - 1] >= g {
                return Err(Error::InvalidInput(format!(
                    "histogram indices must be strictly increasing, got {} after {}",
                    g,
                    idx[pos - 1]
                )));
            }
        }
        if val.iter().any(|&v| !v.is_finite() || v <= 0.0) {
            return Err(Error::InvalidInput(
                "histogram values must be positive and finite".into(),
            ));
        }
        let sum: f64 = val.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!(
                "histogram values must sum to 1 (got {sum})"
            )));
        }
        Ok(QueryHistogram {
            vocab_size,
            idx,
            val,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Strictly increasing vocabulary indices of the nonzero entries.
    pub fn idx(&self) -> &[usize] {
        &self.idx
    }

    /// Normalized frequencies matching [`Self::idx`].
    pub fn val(&self) -> &[f64] {
        &self.val
    }
}

/// Token counts observed while converting documents against a vocabulary.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestStats {
    /// Tokens that matched an embedding row.
    pub in_vocab: usize,
    /// Tokens silently dropped because the vocabulary lacks them.
    pub out_of_vocab: usize,
}

/// Parses a fastText-format text embedding stream.
///
/// The first line is `<count> <dim>`; each following line is a token and
/// `dim` decimal floats, all separated by single spaces. CRLF line endings
/// are accepted. Row order equals file order.
///
/// # Errors
/// [`Error::Format`] for a malformed header, wrong field count, unparseable
/// or non-finite float, or missing rows; [`Error::DuplicateToken`] if a token
/// repeats.
pub fn load_embeddings<R: BufRead>(source: R) -> Result<EmbeddingMatrix> {
    let mut lines = source.lines();
    let header = match lines.next() {
        Some(line) => line?,
        None => {
            return Err(Error::Format {
                line: 1,
                msg: "empty embedding stream, expected `<count> <dim>` header".into(),
            })
        }
    };
    let header = header.trim_end_matches('\r');
    let mut parts = header.split(' ');
    let (count, dim) = match (parts.next(), parts.next(), parts.next()) {
        (Some(c), Some(d), None) => {
            let count = c.parse::<usize>().map_err(|_| Error::Format {
                line: 1,
                msg: format!("header count {c:?} is not a nonnegative integer"),
            })?;
            let dim = d.parse::<usize>().map_err(|_| Error::Format {
                line: 1,
                msg: format!("header dim {d:?} is not a nonnegative integer"),
            })?;
            (count, dim)
        }
        _ => {
            return Err(Error::Format {
                line: 1,
                msg: format!("header {header:?} must be `<count> <dim>`"),
            })
        }
    };

    let mut data = Vec::with_capacity(count * dim);
    let mut tokens = Vec::with_capacity(count);
    let mut line_no = 1;
    for line in lines {
        let line = line?;
        let line = line.trim_end_matches('\r');
        line_no += 1;
        if tokens.len() == count {
            if line.is_empty() {
                continue;
            }
            return Err(Error::Format {
                line: line_no,
                msg: format!("unexpected content after {count} embedding rows"),
            });
        }
        let mut fields = line.split(' ');
        let token = fields.next().unwrap_or("");
        if token.is_empty() {
            return Err(Error::Format {
                line: line_no,
                msg: "missing token field".into(),
            });
        }
        let start = data.len();
        for field in fields {
            let value: f64 = field.parse().map_err(|_| Error::Format {
                line: line_no,
                msg: format!("field {field:?} is not a float"),
            })?;
            if !value.is_finite() {
                return Err(Error::Format {
                    line: line_no,
                    msg: format!("non-finite embedding value {field:?}"),
                });
            }
            data.push(value);
        }
        if data.len() - start != dim {
            return Err(Error::Format {
                line: line_no,
                msg: format!(
                    "expected {dim} values for token {token:?}, found {}",
                    data.len() - start
                ),
            });
        }
        tokens.push(token.to_string());
    }
    if tokens.len() != count {
        return Err(Error::Format {
            line: line_no + 1,
            msg: format!("header promised {count} rows, stream ended after {}", tokens.len()),
        });
    }

    EmbeddingMatrix::new(DenseMatrix::from_vec(count, dim, data)?, tokens)
}

/// Lowercases `text`, splits on every non-alphanumeric character, and drops
/// empty pieces and stopwords. Order and multiplicity are preserved.
pub fn tokenize(text: &str, stopwords: &HashSet<String>) -> Vec<String> {
    text.to_lowercase()
        .split(|ch: char| !ch.is_alphanumeric())
        .filter(|tok| !tok.is_empty() && !stopwords.contains(*tok))
        .map(str::to_string)
        .collect()
}

/// Reads a stopword list: one token per line, lowercased, blank lines
/// ignored.
pub fn load_stopwords<R: BufRead>(source: R) -> Result<HashSet<String>> {
    let mut words = HashSet::new();
    for line in source.lines() {
        let word = line?.trim().to_lowercase();
        if !word.is_empty() {
            words.insert(word);
        }
    }
    Ok(words)
}

/// Strips leading whitespace-delimited `__label__*` tokens (the fastText
/// classification convention) from a document line. Must run before
/// [`tokenize`], which would otherwise split the marker on its underscores.
pub fn strip_label_prefix(line: &str) -> &str {
    let mut rest = line.trim_start();
    while rest.starts_with("__label__") {
        match rest.find(char::is_whitespace) {
            Some(end) => rest = rest[end..].trim_start(),
            None => return "",
        }
    }
    rest
}

/// Reads one document per line: label prefixes stripped, then tokenized.
pub fn read_documents<R: BufRead>(
    source: R,
    stopwords: &HashSet<String>,
) -> Result<Vec<Vec<String>>> {
    let mut docs = Vec::new();
    for line in source.lines() {
        let line = line?;
        docs.push(tokenize(strip_label_prefix(&line), stopwords));
    }
    Ok(docs)
}

fn count_tokens(
    doc: &[String],
    emb: &EmbeddingMatrix,
    stats: &mut IngestStats,
) -> Vec<(usize, f64)> {
    let mut counts: HashMap<usize, f64> = HashMap::new();
    for token in doc {
        match emb.lookup(token) {
            Some(row) => {
                *counts.entry(row).or_insert(0.0) += 1.0;
                stats.in_vocab += 1;
            }
            None => stats.out_of_vocab += 1,
        }
    }
    counts.into_iter().collect()
}

/// Builds the corpus matrix from tokenized documents, reporting how many
/// tokens were in and out of vocabulary.
///
/// # Errors
/// [`Error::EmptyDocument`] if any document has no in-vocabulary tokens.
pub fn build_corpus_with_stats(
    docs: &[Vec<String>],
    emb: &EmbeddingMatrix,
) -> Result<(DocMatrix, IngestStats)> {
    let mut stats = IngestStats::default();
    let mut entries = Vec::new();
    for (j, doc) in docs.iter().enumerate() {
        for (word, count) in count_tokens(doc, emb, &mut stats) {
            entries.push((j, word, count));
        }
    }
    let corpus = doc_matrix_from_entries(emb.vocab_size(), docs.len(), &entries)?;
    Ok((corpus, stats))
}

/// [`build_corpus_with_stats`] without the statistics.
pub fn build_corpus(docs: &[Vec<String>], emb: &EmbeddingMatrix) -> Result<DocMatrix> {
    build_corpus_with_stats(docs, emb).map(|(corpus, _)| corpus)
}

/// Builds the normalized sparse histogram of a single query document.
/// Out-of-vocabulary tokens are dropped; an all-OOV or empty document is
/// rejected.
pub fn build_query(doc: &[String], emb: &EmbeddingMatrix) -> Result<QueryHistogram> {
    let mut stats = IngestStats::default();
    let mut counts = count_tokens(doc, emb, &mut stats);
    if counts.is_empty() {
        return Err(Error::EmptyDocument(0));
    }
    counts.sort_unstable_by_key(|&(word, _)| word);
    let total: f64 = counts.iter().map(|&(_, c)| c).sum();
    let idx: Vec<usize> = counts.iter().map(|&(word, _)| word).collect();
    let val: Vec<f64> = counts.iter().map(|&(_, c)| c / total).collect();
    QueryHistogram::new(emb.vocab_size(), idx, val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    fn set(words: &[&str]) -> HashSet<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn load_embeddings_parses_fixture() {
        let emb = load_embeddings(Cursor::new("2 2\na 0 0\nb 3 4\n")).unwrap();
        assert_eq!(emb.vocab_size(), 2);
        assert_eq!(emb.dim(), 2);
        assert_eq!(emb.row(0), &[0.0, 0.0]);
        assert_eq!(emb.row(1), &[3.0, 4.0]);
        assert_eq!(emb.lookup("a"), Some(0));
        assert_eq!(emb.lookup("b"), Some(1));
    }

    #[test]
    fn load_embeddings_parses_signed_and_fractional() {
        let emb = load_embeddings(Cursor::new("1 3\nx 1.5 -2 0.25\n")).unwrap();
        assert_eq!(emb.row(0), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn load_embeddings_rejects_duplicates() {
        let err = load_embeddings(Cursor::new("2 2\na 0 0\na 1 1\n")).unwrap_err();
        assert!(matches!(err, Error::DuplicateToken(t) if t == "a"));
    }

    #[test]
    fn load_embeddings_rejects_malformed_input() {
        assert!(matches!(
            load_embeddings(Cursor::new("nonsense\n")).unwrap_err(),
            Error::Format { line: 1, .. }
        ));
        assert!(matches!(
            load_embeddings(Cursor::new("1 2\na 1\n")).unwrap_err(),
            Error::Format { line: 2, .. }
        ));
        assert!(matches!(
            load_embeddings(Cursor::new("1 2\na 1 inf\n")).unwrap_err(),
            Error::Format { line: 2, .. }
        ));
        assert!(matches!(
            load_embeddings(Cursor::new("2 2\na 1 2\n")).unwrap_err(),
            Error::Format { .. }
        ));
    }

    #[test]
    fn load_embeddings_accepts_crlf() {
        let emb = load_embeddings(Cursor::new("1 2\r\na 1 2\r\n")).unwrap();
        assert_eq!(emb.row(0), &[1.0, 2.0]);
    }

    #[test]
    fn tokenize_folds_case_and_splits_punctuation() {
        assert_eq!(
            tokenize("Obama speaks to the media in Illinois.", &set(&["to", "the", "in"])),
            toks(&["obama", "speaks", "media", "illinois"])
        );
        assert_eq!(tokenize("", &HashSet::new()), Vec::<String>::new());
        assert_eq!(
            tokenize("Cat, cat! DOG", &HashSet::new()),
            toks(&["cat", "cat", "dog"])
        );
    }

    #[test]
    fn strip_label_prefix_removes_leading_markers() {
        assert_eq!(strip_label_prefix("__label__14 , some text"), ", some text");
        assert_eq!(strip_label_prefix("__label__1 __label__2 body"), "body");
        assert_eq!(strip_label_prefix("no labels here"), "no labels here");
        assert_eq!(strip_label_prefix("__label__only"), "");
    }

    #[test]
    fn build_corpus_counts_and_normalizes() {
        let emb = load_embeddings(Cursor::new("2 1\na 0\nb 1\n")).unwrap();
        let corpus =
            build_corpus(&[toks(&["a", "a", "b"]), toks(&["b"])], &emb).unwrap();
        assert_eq!(corpus.doc_ptr(), &[0, 2, 3]);
        assert_eq!(corpus.word_idx(), &[0, 1, 1]);
        assert_eq!(corpus.weight(), &[2.0 / 3.0, 1.0 / 3.0, 1.0]);
    }

    #[test]
    fn build_corpus_drops_oov_and_rejects_all_oov() {
        let emb = load_embeddings(Cursor::new("1 1\na 0\n")).unwrap();
        let (corpus, stats) =
            build_corpus_with_stats(&[toks(&["a", "zzz"])], &emb).unwrap();
        assert_eq!(corpus.word_idx(), &[0]);
        assert_eq!(corpus.weight(), &[1.0]);
        assert_eq!(stats, IngestStats { in_vocab: 1, out_of_vocab: 1 });

        let err = build_corpus(&[toks(&["zzz"])], &emb).unwrap_err();
        assert!(matches!(err, Error::EmptyDocument(0)));
    }

    #[test]
    fn build_query_examples() {
        let emb = load_embeddings(Cursor::new("2 1\na 0\nb 1\n")).unwrap();
        let q = build_query(&toks(&["a", "b", "a"]), &emb).unwrap();
        assert_eq!(q.idx(), &[0, 1]);
        assert_eq!(q.val(), &[2.0 / 3.0, 1.0 / 3.0]);

        let q = build_query(&toks(&["b"]), &emb).unwrap();
        assert_eq!(q.idx(), &[1]);
        assert_eq!(q.val(), &[1.0]);

        assert!(matches!(
            build_query(&[], &emb).unwrap_err(),
            Error::EmptyDocument(0)
        ));
    }

    #[test]
    fn read_documents_strips_labels_and_stopwords() {
        let stop = set(&["the"]);
        let docs = read_documents(
            Cursor::new("__label__3 The cat sat.\nplain line\n"),
            &stop,
        )
        .unwrap();
        assert_eq!(docs, vec![toks(&["cat", "sat"]), toks(&["plain", "line"])]);
    }
}
