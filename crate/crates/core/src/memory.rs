//! Planner memory: a bounded per-session working memory and a long-term
//! knowledge base of documents, vectors and SOP templates.
//!
//! On-disk layout of a knowledge base directory:
//!
//! ```text
//! docs/<doc_id>.json   StoredDocument
//! sops/<sop_id>.json   SopTemplate
//! vectors.bin          per document: [u16 LE id length][id bytes][256 x f32 LE]
//! ```

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::SourceKind;
use crate::compiler::PlanDocument;
use crate::executor::FeedbackTrace;

pub const EMBED_DIM: usize = 256;
pub const WORKING_MEMORY_LIMIT: usize = 50;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase)
}

/// Hashed bag-of-words embedding, unit length (zero vector for no tokens).
pub fn embed_text(text: &str) -> Vec<f32> {
    let mut v = vec![0f32; EMBED_DIM];
    for token in tokenize(text) {
        v[(fnv1a64(token.as_bytes()) % EMBED_DIM as u64) as usize] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn short_hash(parts: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p.as_bytes());
        hasher.update([0u8]);
    }
    hex::encode(&hasher.finalize()[..8])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredDocument {
    pub doc_id: String,
    pub collection: String,
    pub text: String,
    #[serde(default)]
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub doc_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SopHit {
    pub sop_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    AutoArchived,
    Manual,
}

/// A reusable plan with `{{source:N}}` and `{{param:NAME}}` placeholders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SopTemplate {
    pub sop_id: String,
    pub description: String,
    pub plan: PlanDocument,
    /// Kind of source each `{{source:N}}` slot expects.
    pub source_slots: Vec<SourceKind>,
    pub parameter_slots: Vec<String>,
    pub provenance: Provenance,
    pub success_count: u64,
}

pub type SharedKnowledgeBase = Arc<RwLock<KnowledgeBase>>;

#[derive(Debug, Clone, Default)]
pub struct KnowledgeBase {
    documents: BTreeMap<String, StoredDocument>,
    vectors: BTreeMap<String, Vec<f32>>,
    sops: BTreeMap<String, SopTemplate>,
    sop_vectors: BTreeMap<String, Vec<f32>>,
}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn shared() -> SharedKnowledgeBase {
        Arc::new(RwLock::new(Self::new()))
    }

    pub fn into_shared(self) -> SharedKnowledgeBase {
        Arc::new(RwLock::new(self))
    }

    /// Stores and embeds a document. Ids derive from content, so ingesting
    /// the same text into the same collection twice is a no-op.
    pub fn ingest_document(&mut self, collection: &str, text: &str, tags: Vec<String>) -> String {
        let doc_id = format!("doc-{}", short_hash(&[collection, text]));
        if !self.documents.contains_key(&doc_id) {
            self.vectors.insert(doc_id.clone(), embed_text(text));
            self.documents.insert(
                doc_id.clone(),
                StoredDocument { doc_id: doc_id.clone(), collection: collection.to_string(), text: text.to_string(), tags },
            );
        }
        doc_id
    }

    pub fn document(&self, doc_id: &str) -> Option<&StoredDocument> {
        self.documents.get(doc_id)
    }

    pub fn documents(&self) -> impl Iterator<Item = &StoredDocument> {
        self.documents.values()
    }

    pub fn vector(&self, doc_id: &str) -> Option<&[f32]> {
        self.vectors.get(doc_id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Top-`k` documents by cosine similarity; ties by doc id ascending.
    pub fn search_knowledge(&self, query: &str, k: usize, collection: Option<&str>) -> Vec<SearchHit> {
        let q = embed_text(query);
        let mut hits: Vec<SearchHit> = self
            .documents
            .values()
            .filter(|d| collection.is_none_or(|c| d.collection == c))
            .map(|d| SearchHit { doc_id: d.doc_id.clone(), score: cosine(&q, &self.vectors[&d.doc_id]) })
            .collect();
        rank(&mut hits, |h| (h.score, &h.doc_id));
        hits.truncate(k);
        hits
    }

    pub fn sop(&self, sop_id: &str) -> Option<&SopTemplate> {
        self.sops.get(sop_id)
    }

    pub fn sops(&self) -> impl Iterator<Item = &SopTemplate> {
        self.sops.values()
    }

    pub fn search_sops(&self, query: &str, k: usize) -> Vec<SopHit> {
        let q = embed_text(query);
        let mut hits: Vec<SopHit> = self
            .sops
            .keys()
            .map(|id| SopHit { sop_id: id.clone(), score: cosine(&q, &self.sop_vectors[id]) })
            .collect();
        rank(&mut hits, |h| (h.score, &h.sop_id));
        hits.truncate(k);
        hits
    }

    /// Stores a template keyed by the hash of its plan. Returns the id and
    /// whether it was new; a repeat archive bumps `success_count` instead.
    pub fn upsert_sop(&mut self, mut sop: SopTemplate) -> (String, bool) {
        let plan_json = serde_json::to_string(&sop.plan.nodes).expect("plans serialize");
        let sop_id = format!("sop-{}", short_hash(&[&plan_json]));
        if let Some(existing) = self.sops.get_mut(&sop_id) {
            existing.success_count += sop.success_count;
            return (sop_id, false);
        }
        sop.sop_id = sop_id.clone();
        self.sop_vectors.insert(sop_id.clone(), embed_text(&sop.description));
        self.sops.insert(sop_id.clone(), sop);
        (sop_id, true)
    }

    pub fn save(&self, dir: &Path) -> io::Result<()> {
        let docs = dir.join("docs");
        let sops = dir.join("sops");
        fs::create_dir_all(&docs)?;
        fs::create_dir_all(&sops)?;
        for doc in self.documents.values() {
            write_atomic(&docs.join(format!("{}.json", doc.doc_id)), &serde_json::to_vec_pretty(doc)?)?;
        }
        for sop in self.sops.values() {
            write_atomic(&sops.join(format!("{}.json", sop.sop_id)), &serde_json::to_vec_pretty(sop)?)?;
        }
        write_atomic(&dir.join("vectors.bin"), &encode_vectors(&self.vectors)?)
    }

    /// Loads a directory written by [`save`](Self::save); a missing
    /// directory yields an empty base.
    pub fn load(dir: &Path) -> io::Result<Self> {
        let mut kb = KnowledgeBase::new();
        if !dir.exists() {
            return Ok(kb);
        }
        for doc in read_json_dir::<StoredDocument>(&dir.join("docs"))? {
            kb.documents.insert(doc.doc_id.clone(), doc);
        }
        let vectors_path = dir.join("vectors.bin");
        if vectors_path.exists() {
            kb.vectors = decode_vectors(&fs::read(vectors_path)?)?;
        }
        kb.vectors.retain(|id, _| kb.documents.contains_key(id));
        for doc in kb.documents.values() {
            kb.vectors.entry(doc.doc_id.clone()).or_insert_with(|| embed_text(&doc.text));
        }
        for sop in read_json_dir::<SopTemplate>(&dir.join("sops"))? {
            kb.sop_vectors.insert(sop.sop_id.clone(), embed_text(&sop.description));
            kb.sops.insert(sop.sop_id.clone(), sop);
        }
        Ok(kb)
    }
}

/// Sort by score descending, then id ascending.
fn rank<T, F>(items: &mut [T], key: F)
where
    F: for<'a> Fn(&'a T) -> (f64, &'a String),
{
    items.sort_by(|a, b| {
        let (sa, ia) = key(a);
        let (sb, ib) = key(b);
        sb.total_cmp(&sa).then_with(|| ia.cmp(ib))
    });
}

fn read_json_dir<T: serde::de::DeserializeOwned>(dir: &Path) -> io::Result<Vec<T>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let raw = fs::read(p)?;
            serde_json::from_slice(&raw).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", p.display())))
        })
        .collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

fn encode_vectors(vectors: &BTreeMap<String, Vec<f32>>) -> io::Result<Vec<u8>> {
    let mut out = Vec::with_capacity(vectors.len() * (EMBED_DIM * 4 + 24));
    for (id, v) in vectors {
        let len = u16::try_from(id.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "doc id too long"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn decode_vectors(mut bytes: &[u8]) -> io::Result<BTreeMap<String, Vec<f32>>> {
    let truncated = || io::Error::new(io::ErrorKind::InvalidData, "truncated vectors.bin");
    let mut out = BTreeMap::new();
    while !bytes.is_empty() {
        let (len, rest) = bytes.split_first_chunk::<2>().ok_or_else(truncated)?;
        let len = u16::from_le_bytes(*len) as usize;
        if rest.len() < len + EMBED_DIM * 4 {
            return Err(truncated());
        }
        let id = String::from_utf8(rest[..len].to_vec())
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "non-utf8 doc id"))?;
        let v = rest[len..len + EMBED_DIM * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.insert(id, v);
        bytes = &rest[len + EMBED_DIM * 4..];
    }
    Ok(out)
}

/// One context-stack entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "entry", rename_all = "snake_case")]
pub enum MemoryEntry {
    Request { turn: u32, text: String, bindings: Vec<String> },
    Plan { plan_id: String, path: String, nodes: usize },
    Feedback { trace: FeedbackTrace },
    Outcome { run_id: String, status: String },
}

/// Per-session context stack (FIFO-bounded) plus named variable states.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct WorkingMemory {
    entries: VecDeque<MemoryEntry>,
    pub variables: BTreeMap<String, String>,
}

impl WorkingMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: MemoryEntry) {
        if self.entries.len() == WORKING_MEMORY_LIMIT {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn feedback(&self) -> Vec<&FeedbackTrace> {
        self.entries
            .iter()
            .filter_map(|e| match e {
                MemoryEntry::Feedback { trace } => Some(trace),
                _ => None,
            })
            .collect()
    }
}
