//! Single-file model container.
//!
//! ```text
//! magic     8 bytes  "PRODCAT\0"
//! major     u16
//! minor     u16
//! sections  u32      count, then per section:
//!             tag  4 bytes (HEAD, TAXO, VOCB, PARM, EMBD)
//!             len  u64
//!             payload
//! footer    32 bytes SHA-256 of everything before it
//! ```
//!
//! Integers are little-endian, reals are IEEE-754 binary64. HEAD is JSON;
//! the other sections are binary. The version is checked before the hash and
//! before any section is parsed.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Taxonomy;
use crate::error::{Error, Result};
use crate::features::{EmbeddingTable, Locale, Vocabulary};
use crate::linear::LinearModel;
use crate::model::{LinearPipeline, Model, ModelFamily};
use crate::neural::{ClassifierNetwork, NetworkConfig, TowerInput};

pub const MAGIC: &[u8; 8] = b"PRODCAT\0";
pub const FORMAT_MAJOR: u16 = 1;
/// Minor 1 added run metadata to the header.
pub const FORMAT_MINOR: u16 = 1;

const HASH_LEN: usize = 32;

/// Where an embedding table came from, plus a hash of its text form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct EmbeddingRef {
    pub path: String,
    pub sha256: String,
}

impl EmbeddingRef {
    pub fn for_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let abs = std::fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf());
        Ok(EmbeddingRef {
            path: abs.to_string_lossy().into_owned(),
            sha256: sha256_hex(&bytes),
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunMetadata {
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    family: ModelFamily,
    locale: Locale,
    network: Option<NetworkConfig>,
    linear_c: Option<f64>,
    embeddings: Vec<EmbeddingRef>,
    inline_embeddings: bool,
    #[serde(default)]
    metadata: RunMetadata,
}

/// A model plus everything needed to reproduce its predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelContainer {
    pub model: Model,
    pub embedding_refs: Vec<EmbeddingRef>,
    pub metadata: RunMetadata,
}

#[derive(Default)]
struct Out(Vec<u8>);

impl Out {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct In<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> In<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        In { buf, pos: 0, what }
    }
    fn err(&self, msg: &str) -> Error {
        Error::MalformedContainer(format!("{} section: {msg} at byte {}", self.what, self.pos))
    }
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err("truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }
    /// Element count that must fit in the remaining bytes at `min_size` each.
    fn count(&mut self, n: u64, min_size: usize) -> Result<usize> {
        let remaining = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(min_size as u64) > remaining {
            return Err(self.err("count exceeds section size"));
        }
        Ok(n as usize)
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()?;
        let n = self.count(n, 8)?;
        Ok(self
            .bytes(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        let b = self.bytes(n)?;
        std::str::from_utf8(b)
            .map(str::to_owned)
            .map_err(|_| self.err("invalid UTF-8"))
    }
    fn strs(&mut self) -> Result<Vec<String>> {
        let n = self.u32()? as u64;
        let n = self.count(n, 4)?;
        (0..n).map(|_| self.str()).collect()
    }
    fn finish(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(self.err("trailing bytes"))
        }
    }
}

fn locale_code(l: Locale) -> u8 {
    match l {
        Locale::Turkish => 0,
        Locale::Generic => 1,
    }
}

fn locale_from(code: u8) -> Result<Locale> {
    match code {
        0 => Ok(Locale::Turkish),
        1 => Ok(Locale::Generic),
        _ => Err(Error::MalformedContainer(format!("unknown locale code {code}"))),
    }
}

fn encode_taxonomy(t: &Taxonomy) -> Vec<u8> {
    let mut o = Out::default();
    o.u8(locale_code(t.locale()));
    o.u32(t.num_categories());
    t.categories().iter().for_each(|c| o.str(c));
    o.u32(t.num_subcategories());
    for (s, label) in t.subcategories().iter().enumerate() {
        o.str(label);
        o.u32(t.parent(s));
    }
    o.0
}

fn decode_taxonomy(buf: &[u8]) -> Result<Taxonomy> {
    let mut r = In::new(buf, "TAXO");
    let locale = locale_from(r.u8()?)?;
    let categories = r.strs()?;
    let n = r.u32()? as u64;
    let n = r.count(n, 8)?;
    let mut subs = Vec::with_capacity(n);
    let mut parents = Vec::with_capacity(n);
    for _ in 0..n {
        subs.push(r.str()?);
        parents.push(r.u32()?);
    }
    r.finish()?;
    Taxonomy::from_parts(locale, categories, subs, parents)
        .map_err(|e| Error::MalformedContainer(format!("taxonomy: {e}")))
}

fn encode_vocabularies(towers: &[(&Vocabulary, Locale, usize)]) -> Vec<u8> {
    let mut o = Out::default();
    o.u32(towers.len());
    for (v, locale, dim) in towers {
        o.u8(locale_code(*locale));
        o.u32(*dim);
        o.u64(v.document_count());
        o.u32(v.len());
        for (t, df) in v.tokens().iter().zip(v.document_frequencies()) {
            o.str(t);
            o.u64(*df);
        }
    }
    o.0
}

fn decode_vocabularies(buf: &[u8]) -> Result<Vec<TowerInput>> {
    let mut r = In::new(buf, "VOCB");
    let n = r.u32()? as u64;
    let n = r.count(n, 17)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let locale = locale_from(r.u8()?)?;
        let dim = r.u32()?;
        let docs = r.u64()?;
        let len = r.u32()? as u64;
        let len = r.count(len, 12)?;
        let mut tokens = Vec::with_capacity(len);
        let mut dfs = Vec::with_capacity(len);
        for _ in 0..len {
            tokens.push(r.str()?);
            dfs.push(r.u64()?);
        }
        let vocabulary = Vocabulary::from_parts(tokens, dfs, docs)
            .map_err(|e| Error::MalformedContainer(format!("vocabulary: {e}")))?;
        out.push(TowerInput { vocabulary, locale, dim });
    }
    r.finish()?;
    Ok(out)
}

fn encode_linear(o: &mut Out, m: &LinearModel) {
    o.u32(m.classes().len());
    m.classes().iter().for_each(|&c| o.u32(c));
    o.u32(m.dim());
    o.f64s(m.weights());
    o.f64s(m.biases());
}

fn decode_linear(r: &mut In, c: f64) -> Result<LinearModel> {
    let n = r.u32()? as u64;
    let n = r.count(n, 4)?;
    let classes = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let dim = r.u32()?;
    let weights = r.f64s()?;
    let biases = r.f64s()?;
    LinearModel::from_parts(classes, dim, weights, biases, c)
        .map_err(|e| Error::MalformedContainer(format!("linear parameters: {e}")))
}

fn encode_tables(tables: &[&EmbeddingTable]) -> Vec<u8> {
    let mut o = Out::default();
    o.u32(tables.len());
    for t in tables {
        o.u32(t.dim());
        o.u32(t.len());
        for tok in t.tokens() {
            o.str(tok);
            o.f64s(t.get(tok).expect("own token"));
        }
    }
    o.0
}

fn decode_tables(buf: &[u8]) -> Result<Vec<EmbeddingTable>> {
    let mut r = In::new(buf, "EMBD");
    let n = r.u32()? as u64;
    let n = r.count(n, 8)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let dim = r.u32()?;
        let len = r.u32()? as u64;
        let len = r.count(len, 12)?;
        let mut t = EmbeddingTable::new(dim).map_err(|e| Error::MalformedContainer(e.to_string()))?;
        for _ in 0..len {
            let tok = r.str()?;
            let v = r.f64s()?;
            t.insert(&tok, &v).map_err(|e| Error::MalformedContainer(format!("embedding: {e}")))?;
        }
        out.push(t);
    }
    r.finish()?;
    Ok(out)
}

/// Hash of an in-memory table's canonical text form.
pub fn table_hash(table: &EmbeddingTable) -> String {
    let mut buf = Vec::new();
    table.write_text(&mut buf).expect("write to memory");
    sha256_hex(&buf)
}

/// Serializes `container`. Linear models whose embedding table has no
/// file reference are always stored inline.
pub fn encode(container: &ModelContainer, inline_embeddings: bool) -> Result<Vec<u8>> {
    let mut sections: Vec<(&[u8; 4], Vec<u8>)> = Vec::new();
    let (header, taxonomy, vocab, params, tables): (Header, &Taxonomy, Vec<u8>, Vec<u8>, Vec<&EmbeddingTable>) =
        match &container.model {
            Model::Linear(m) => {
                let inline = inline_embeddings || container.embedding_refs.first().is_none_or(|r| r.path.is_empty());
                let mut p = Out::default();
                encode_linear(&mut p, &m.category);
                encode_linear(&mut p, &m.subcategory);
                let mut refs = container.embedding_refs.clone();
                if refs.is_empty() {
                    refs.push(EmbeddingRef {
                        path: String::new(),
                        sha256: table_hash(&m.embeddings),
                    });
                }
                (
                    Header {
                        family: ModelFamily::Linear,
                        locale: m.locale,
                        network: None,
                        linear_c: Some(m.category.c()),
                        embeddings: refs,
                        inline_embeddings: inline,
                        metadata: container.metadata.clone(),
                    },
                    &m.taxonomy,
                    encode_vocabularies(&[(&m.vocabulary, m.locale, m.embeddings.dim())]),
                    p.0,
                    if inline { vec![m.embeddings.as_ref()] } else { Vec::new() },
                )
            }
            Model::Neural(n) => {
                let mut p = Out::default();
                p.f64s(n.params());
                let towers: Vec<_> = n.towers().iter().map(|t| (&t.vocabulary, t.locale, t.dim)).collect();
                (
                    Header {
                        family: ModelFamily::Neural,
                        locale: n.taxonomy().locale(),
                        network: Some(*n.config()),
                        linear_c: None,
                        embeddings: container.embedding_refs.clone(),
                        inline_embeddings: false,
                        metadata: container.metadata.clone(),
                    },
                    n.taxonomy(),
                    encode_vocabularies(&towers),
                    p.0,
                    Vec::new(),
                )
            }
        };
    let head = serde_json::to_vec(&header).map_err(|e| Error::MalformedContainer(e.to_string()))?;
    sections.push((b"HEAD", head));
    sections.push((b"TAXO", encode_taxonomy(taxonomy)));
    sections.push((b"VOCB", vocab));
    sections.push((b"PARM", params));
    if !tables.is_empty() {
        sections.push((b"EMBD", encode_tables(&tables)));
    }
    Ok(assemble(FORMAT_MAJOR, FORMAT_MINOR, &sections))
}

fn assemble(major: u16, minor: u16, sections: &[(&[u8; 4], Vec<u8>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&major.to_le_bytes());
    out.extend_from_slice(&minor.to_le_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (tag, payload) in sections {
        out.extend_from_slice(*tag);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(payload);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Parsed sections, before any external embedding file is consulted.
#[derive(Debug)]
pub struct Decoded {
    pub version: (u16, u16),
    header: Header,
    taxonomy: Taxonomy,
    towers: Vec<TowerInput>,
    params: Vec<u8>,
    tables: Vec<EmbeddingTable>,
}

impl Decoded {
    pub fn family(&self) -> ModelFamily {
        self.header.family
    }

    pub fn embedding_refs(&self) -> &[EmbeddingRef] {
        &self.header.embeddings
    }

    pub fn needs_external_embeddings(&self) -> bool {
        self.header.family == ModelFamily::Linear && !self.header.inline_embeddings
    }

    /// Builds the model; `resolve` supplies referenced embedding tables when
    /// they are not stored inline.
    pub fn into_container<F>(self, mut resolve: F) -> Result<ModelContainer>
    where
        F: FnMut(&EmbeddingRef) -> Result<EmbeddingTable>,
    {
        let h = self.header;
        let mut r = In::new(&self.params, "PARM");
        let model = match h.family {
            ModelFamily::Linear => {
                let c = h.linear_c.ok_or_else(|| Error::MalformedContainer("missing C".into()))?;
                let category = decode_linear(&mut r, c)?;
                let subcategory = decode_linear(&mut r, c)?;
                r.finish()?;
                let [tower]: [TowerInput; 1] = self
                    .towers
                    .try_into()
                    .map_err(|_| Error::MalformedContainer("linear model needs one vocabulary".into()))?;
                let table = if h.inline_embeddings {
                    self.tables
                        .into_iter()
                        .next()
                        .ok_or_else(|| Error::MalformedContainer("missing inline embeddings".into()))?
                } else {
                    let reference = h
                        .embeddings
                        .first()
                        .ok_or_else(|| Error::MalformedContainer("missing embedding reference".into()))?;
                    resolve(reference)?
                };
                if table.dim() != category.dim() || table.dim() != subcategory.dim() {
                    return Err(Error::MalformedContainer("embedding width does not match parameters".into()));
                }
                Model::Linear(LinearPipeline {
                    taxonomy: self.taxonomy,
                    locale: tower.locale,
                    vocabulary: tower.vocabulary,
                    embeddings: Arc::new(table),
                    category,
                    subcategory,
                })
            }
            ModelFamily::Neural => {
                let config = h
                    .network
                    .ok_or_else(|| Error::MalformedContainer("missing network configuration".into()))?;
                let theta = r.f64s()?;
                r.finish()?;
                let net = ClassifierNetwork::from_parts(config, self.taxonomy, self.towers, theta)
                    .map_err(|e| Error::MalformedContainer(format!("network: {e}")))?;
                Model::Neural(net)
            }
        };
        Ok(ModelContainer {
            model,
            embedding_refs: h.embeddings,
            metadata: h.metadata,
        })
    }
}

/// Parses container bytes. Never touches the file system.
pub fn decode(bytes: &[u8]) -> Result<Decoded> {
    if bytes.len() < MAGIC.len() + 8 + HASH_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Integrity("not a model container (bad magic or too short)".into()));
    }
    let mut r = In::new(&bytes[..bytes.len() - HASH_LEN], "container");
    r.bytes(MAGIC.len())?;
    let major = r.u16()?;
    let minor = r.u16()?;
    if major != FORMAT_MAJOR || minor > FORMAT_MINOR {
        return Err(Error::IncompatibleVersion {
            found: format!("{major}.{minor}"),
            supported: format!("{FORMAT_MAJOR}.0-{FORMAT_MAJOR}.{FORMAT_MINOR}"),
        });
    }
    let (body, footer) = bytes.split_at(bytes.len() - HASH_LEN);
    if Sha256::digest(body).as_slice() != footer {
        return Err(Error::Integrity("content hash mismatch".into()));
    }

    let n = r.u32()?;
    let mut found: BTreeMap<[u8; 4], &[u8]> = BTreeMap::new();
    for _ in 0..n {
        let tag: [u8; 4] = r.bytes(4)?.try_into().expect("4 bytes");
        let len = r.u64()?;
        let len = r.count(len, 1)?;
        let payload = r.bytes(len)?;
        if found.insert(tag, payload).is_some() {
            return Err(Error::MalformedContainer(format!(
                "duplicate section {}",
                String::from_utf8_lossy(&tag)
            )));
        }
    }
    r.finish()?;
    let section = |tag: &[u8; 4]| {
        found
            .get(tag)
            .copied()
            .ok_or_else(|| Error::MalformedContainer(format!("missing section {}", String::from_utf8_lossy(tag))))
    };
    let header: Header =
        serde_json::from_slice(section(b"HEAD")?).map_err(|e| Error::MalformedContainer(format!("header: {e}")))?;
    let taxonomy = decode_taxonomy(section(b"TAXO")?)?;
    let towers = decode_vocabularies(section(b"VOCB")?)?;
    let params = section(b"PARM")?.to_vec();
    let tables = match found.get(b"EMBD") {
        Some(buf) => decode_tables(buf)?,
        None => Vec::new(),
    };
    Ok(Decoded {
        version: (major, minor),
        header,
        taxonomy,
        towers,
        params,
        tables,
    })
}

/// Loads a referenced embedding file and checks it against the stored hash.
pub fn resolve_from_disk(reference: &EmbeddingRef) -> Result<EmbeddingTable> {
    if reference.path.is_empty() {
        return Err(Error::MalformedContainer("embedding reference has no path".into()));
    }
    let bytes = std::fs::read(&reference.path).map_err(|e| Error::io(&reference.path, e))?;
    if sha256_hex(&bytes) != reference.sha256 {
        return Err(Error::Integrity(format!(
            "embedding file {} does not match the hash recorded at training time",
            reference.path
        )));
    }
    crate::features::read_embeddings(&bytes[..])
}

pub fn save_model(path: impl AsRef<Path>, container: &ModelContainer, inline_embeddings: bool) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(container, inline_embeddings)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelContainer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)?.into_container(resolve_from_disk)
}

#[doc(hidden)]
pub fn assemble_for_tests(major: u16, minor: u16, sections: &[(&[u8; 4], Vec<u8>)]) -> Vec<u8> {
    assemble(major, minor, sections)
}
