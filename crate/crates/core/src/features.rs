//! Title tokenization, TF-IDF statistics, plain-text embedding tables and
//! TF-IDF-weighted document vectors.
//!
//! A title is turned into a fixed-size vector by averaging the embeddings of
//! its tokens, each weighted by `tf(t) * idf(t)` where `tf` is the raw count of
//! the token in the title and `idf(t) = ln((1 + N) / (1 + df(t))) + 1`.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercasing rule applied to titles and labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Locale {
    /// Dotted/dotless i aware: `İ` -> `i`, `I` -> `ı`.
    #[default]
    Turkish,
    Generic,
}

impl Locale {
    pub fn lowercase(self, text: &str) -> String {
        match self {
            Locale::Generic => text.to_lowercase(),
            Locale::Turkish => {
                let mut out = String::with_capacity(text.len());
                for ch in text.chars() {
                    match ch {
                        'I' => out.push('ı'),
                        'İ' => out.push('i'),
                        _ => out.extend(ch.to_lowercase()),
                    }
                }
                out
            }
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Locale::Turkish => "turkish",
            Locale::Generic => "generic",
        }
    }
}

impl FromStr for Locale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "turkish" | "tr" => Ok(Locale::Turkish),
            "generic" | "en" => Ok(Locale::Generic),
            other => Err(Error::InvalidArgument(format!("unknown locale `{other}`"))),
        }
    }
}

/// Canonicalized tokens of one title, in surface order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    tokens: Vec<String>,
}

impl TokenSequence {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(String::as_str)
    }

    pub fn into_tokens(self) -> Vec<String> {
        self.tokens
    }
}

fn is_token_char(ch: char) -> bool {
    // combining marks stay attached so that e.g. generic lowercasing of `İ` is not split
    ch.is_alphanumeric() || ('\u{0300}'..='\u{036F}').contains(&ch)
}

/// Lowercases per `locale` and splits on anything that is not a letter, digit
/// or combining mark. Punctuation is dropped.
pub fn tokenize(title: &str, locale: Locale) -> TokenSequence {
    let lowered = locale.lowercase(title);
    let tokens = lowered
        .split(|c: char| !is_token_char(c))
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect();
    TokenSequence { tokens }
}

/// Dense token index plus document frequencies.
///
/// Indices are assigned in lexicographic token order so that two fits over
/// the same set of titles agree regardless of title order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    document_frequency: Vec<u64>,
    document_count: u64,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Rebuilds a vocabulary from its exported parts.
    pub fn from_parts(
        tokens: Vec<String>,
        document_frequency: Vec<u64>,
        document_count: u64,
    ) -> Result<Self> {
        if tokens.len() != document_frequency.len() {
            return Err(Error::DimensionMismatch {
                expected: tokens.len(),
                found: document_frequency.len(),
            });
        }
        if let Some(df) = document_frequency.iter().find(|&&df| df > document_count) {
            return Err(Error::InvalidArgument(format!(
                "document frequency {df} exceeds document count {document_count}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::InvalidArgument("empty token in vocabulary".into()));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary {
            tokens,
            document_frequency,
            document_count,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn document_count(&self) -> u64 {
        self.document_count
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn document_frequencies(&self) -> &[u64] {
        &self.document_frequency
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn df(&self, token: &str) -> Option<u64> {
        self.index_of(token).map(|i| self.document_frequency[i])
    }

    pub fn idf_at(&self, index: usize) -> f64 {
        let n = self.document_count as f64;
        let df = self.document_frequency[index] as f64;
        ((1.0 + n) / (1.0 + df)).ln() + 1.0
    }

    pub fn idf(&self, token: &str) -> Option<f64> {
        self.index_of(token).map(|i| self.idf_at(i))
    }

    /// Writes `token<TAB>df<TAB>idf` rows, one per token, in index order.
    pub fn export<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "token\tdf\tidf")?;
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(out, "{t}\t{}\t{:.6}", self.document_frequency[i], self.idf_at(i))?;
        }
        Ok(())
    }
}

/// Counts, for every token, the number of titles containing it.
pub fn fit_tfidf(corpus: &[TokenSequence]) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("cannot fit TF-IDF on an empty corpus".into()));
    }
    let mut df: BTreeMap<&str, u64> = BTreeMap::new();
    for seq in corpus {
        let mut seen: Vec<&str> = seq.iter().collect();
        seen.sort_unstable();
        seen.dedup();
        for t in seen {
            *df.entry(t).or_default() += 1;
        }
    }
    let (tokens, freqs): (Vec<String>, Vec<u64>) =
        df.into_iter().map(|(t, c)| (t.to_owned(), c)).unzip();
    Vocabulary::from_parts(tokens, freqs, corpus.len() as u64)
}

/// Token vectors of a single common dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    tokens: Vec<String>,
    data: Vec<f64>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be >= 1".into()));
        }
        Ok(EmbeddingTable {
            dim,
            tokens: Vec::new(),
            data: Vec::new(),
            index: HashMap::new(),
        })
    }

    pub fn insert(&mut self, token: &str, vector: &[f64]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: vector.len(),
            });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite entry for `{token}`")));
        }
        if self.index.contains_key(token) {
            return Err(Error::InvalidArgument(format!("duplicate token `{token}`")));
        }
        self.index.insert(token.to_owned(), self.tokens.len());
        self.tokens.push(token.to_owned());
        self.data.extend_from_slice(vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.index
            .get(token)
            .map(|&i| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    /// Serializes in word2vec text layout (header line `V d`).
    pub fn write_text<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{} {}", self.len(), self.dim)?;
        for (i, t) in self.tokens.iter().enumerate() {
            write!(out, "{t}")?;
            for v in &self.data[i * self.dim..(i + 1) * self.dim] {
                // `{}` on f64 prints the shortest representation that round-trips
                write!(out, " {v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

fn parse_header(line: &str) -> Option<(usize, usize)> {
    let mut it = line.split_whitespace();
    let v = it.next()?.parse().ok()?;
    let d = it.next()?.parse().ok()?;
    it.next().is_none().then_some((v, d))
}

/// Reads a word2vec-style (`V d` header) or headerless GloVe-style text file.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_embeddings(file)
}

pub fn read_embeddings<R: Read>(reader: R) -> Result<EmbeddingTable> {
    let mut reader = BufReader::new(reader);
    let head = reader.fill_buf().map_err(|e| Error::io("<embeddings>", e))?;
    if head.starts_with(&[0x1f, 0x8b]) {
        return Err(Error::UnsupportedFormat(
            "gzip-compressed embeddings; decompress to plain text first".into(),
        ));
    }

    let mut table: Option<EmbeddingTable> = None;
    let mut declared_rows = None;
    let mut buf = Vec::new();
    let mut line_no = 0usize;
    loop {
        buf.clear();
        let n = reader
            .read_until(b'\n', &mut buf)
            .map_err(|e| Error::io("<embeddings>", e))?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let line = std::str::from_utf8(&buf).map_err(|_| {
            Error::UnsupportedFormat(format!(
                "line {line_no} is not UTF-8 text; binary embedding files are not supported"
            ))
        })?;
        let line = line.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            continue;
        }
        if line_no == 1 {
            if let Some((rows, dim)) = parse_header(line) {
                if dim == 0 {
                    return Err(Error::EmbeddingParse {
                        line: 1,
                        reason: "header declares dimension 0".into(),
                    });
                }
                table = Some(EmbeddingTable::new(dim)?);
                declared_rows = Some(rows);
                continue;
            }
        }
        let mut fields = line.split_whitespace();
        let token = fields.next().expect("non-blank line has a field");
        let values = fields
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::EmbeddingParse {
                        line: line_no,
                        reason: format!("`{f}` is not a finite number"),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(Error::EmbeddingParse {
                line: line_no,
                reason: "row has no vector components".into(),
            });
        }
        let table = match &mut table {
            Some(t) => t,
            slot @ None => slot.insert(EmbeddingTable::new(values.len())?),
        };
        if values.len() != table.dim {
            return Err(Error::EmbeddingParse {
                line: line_no,
                reason: format!("expected {} components, found {}", table.dim, values.len()),
            });
        }
        if table.index.contains_key(token) {
            return Err(Error::DuplicateToken {
                line: line_no,
                token: token.to_owned(),
            });
        }
        table.insert(token, &values)?;
    }

    let table = table.ok_or_else(|| Error::EmbeddingParse {
        line: line_no.max(1),
        reason: "file contains no vectors".into(),
    })?;
    if let Some(rows) = declared_rows {
        if rows != table.len() {
            return Err(Error::EmbeddingParse {
                line: 1,
                reason: format!("header declares {rows} rows, file has {}", table.len()),
            });
        }
    }
    Ok(table)
}

/// Weighted-average title vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DocVector {
    pub values: Vec<f64>,
    /// Fraction of title tokens missing from the vocabulary or the table.
    pub oov_ratio: f64,
}

pub fn embed_title_weighted(
    tokens: &TokenSequence,
    vocab: &Vocabulary,
    table: &EmbeddingTable,
) -> DocVector {
    embed_weighted_by(tokens, table, |t| vocab.idf(t))
}

/// Average of token vectors weighted by `tf · weight(token)`. Tokens with no
/// weight or no vector are skipped; if nothing remains the result is zero.
pub fn embed_weighted_by<F>(tokens: &TokenSequence, table: &EmbeddingTable, weight: F) -> DocVector
where
    F: Fn(&str) -> Option<f64>,
{
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in tokens.iter() {
        *counts.entry(t).or_default() += 1;
    }
    let mut values = vec![0.0; table.dim()];
    let mut weight_sum = 0.0;
    let mut skipped = 0usize;
    for (token, tf) in counts {
        match (weight(token), table.get(token)) {
            (Some(idf), Some(vec)) => {
                let w = tf as f64 * idf;
                weight_sum += w;
                for (acc, v) in values.iter_mut().zip(vec) {
                    *acc += w * v;
                }
            }
            _ => skipped += tf,
        }
    }
    if weight_sum > 0.0 {
        for v in &mut values {
            *v /= weight_sum;
        }
    }
    let oov_ratio = if tokens.is_empty() {
        1.0
    } else {
        skipped as f64 / tokens.len() as f64
    };
    DocVector { values, oov_ratio }
}
