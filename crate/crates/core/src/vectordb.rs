//! Subgraph vector database: one combined graph/text vector per center node,
//! searched exactly by cosine similarity.

use std::cmp::Ordering;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{model_to_bytes, AlignmentModel};
use crate::encoders::TextEmbedder;
use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, NodeId};
use crate::sampler::{bfs_sample, SamplerConfig};
use crate::textualize::textualize_subgraph;

/// Below this norm the graph embedding is treated as zero.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Averages `h` with `e` rescaled to the norm of `h`. A (near-)zero `e`
/// falls back to `h`.
pub fn combine_embeddings(e: ArrayView1<f64>, h: ArrayView1<f64>) -> Result<Array1<f64>> {
    if e.len() != h.len() {
        return Err(Error::Shape {
            context: "combine_embeddings",
            expected: h.len(),
            got: e.len(),
        });
    }
    if e.iter().chain(h.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("combine_embeddings input"));
    }
    let ne = e.dot(&e).sqrt();
    if ne < DEGENERATE_NORM {
        return Ok(h.to_owned());
    }
    let nh = h.dot(&h).sqrt();
    let scaled = &e * (nh / ne);
    Ok((scaled + h) * 0.5)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubgraphVectorRecord {
    pub center: NodeId,
    pub node_count: u32,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbMetadata {
    pub sampler: SamplerConfig,
    /// FNV-1a digest of the serialised alignment model.
    pub model_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorDatabase {
    dim: usize,
    records: Vec<SubgraphVectorRecord>,
    pub metadata: DbMetadata,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub index: usize,
    pub similarity: f64,
}

pub fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Subgraph vector for a single center: sample, textualise, encode both
/// modalities, project, combine.
pub fn record_for_center(
    graph: &KnowledgeGraph,
    embedder: &dyn TextEmbedder,
    model: &AlignmentModel,
    sampler: &SamplerConfig,
    center: NodeId,
) -> Result<SubgraphVectorRecord> {
    let subgraph = bfs_sample(graph, center, sampler, &mut sampler.rng_for_center(center))?;
    let text = textualize_subgraph(graph, &subgraph);
    let e = model.embed_graph(graph, &subgraph)?;
    let h = model.embed_text(embedder, &text)?;
    let g = combine_embeddings(e.view(), h.view())?;
    let ne = e.dot(&e).sqrt();
    if ne >= DEGENERATE_NORM {
        let nh = h.dot(&h).sqrt();
        let scaled_e = &e * (nh / ne);
        let scaled = scaled_e.dot(&scaled_e).sqrt();
        if (scaled - nh).abs() > 1e-6 * nh.max(f64::MIN_POSITIVE) {
            return Err(Error::Format(format!(
                "norm regularisation violated at center {center}: {scaled} vs {nh}"
            )));
        }
    }
    Ok(SubgraphVectorRecord {
        center,
        node_count: subgraph.nodes.len() as u32,
        vector: g.iter().map(|&x| x as f32).collect(),
    })
}

/// Builds one record per graph node, in node-id order.
pub fn build_database(
    graph: &KnowledgeGraph,
    embedder: &dyn TextEmbedder,
    model: &AlignmentModel,
    sampler: &SamplerConfig,
) -> Result<VectorDatabase> {
    sampler.validate()?;
    let records: Vec<SubgraphVectorRecord> = (0..graph.num_nodes())
        .into_par_iter()
        .map(|c| {
            record_for_center(graph, embedder, model, sampler, c)
                .map_err(|e| e.context(format!("building record for center {c}")))
        })
        .collect::<Result<_>>()?;
    let metadata = DbMetadata {
        sampler: *sampler,
        model_hash: fnv1a_hex(&model_to_bytes(model)),
        seed: sampler.seed,
    };
    VectorDatabase::new(model.dim(), records, metadata)
}

/// Cosine between an `f64` query and a stored `f32` vector.
///
/// `dot / (|q| * |v|)` with sequential `f64` accumulation, clamped to
/// `[-1, 1]`; a zero stored vector scores 0.
pub fn cosine_to_record(query: &[f64], query_norm: f64, v: &[f32]) -> f64 {
    let mut dot = 0.0;
    let mut vv = 0.0;
    for (q, &x) in query.iter().zip(v) {
        let x = x as f64;
        dot += q * x;
        vv += x * x;
    }
    let vn = vv.sqrt();
    if vn == 0.0 {
        return 0.0;
    }
    (dot / (query_norm * vn)).clamp(-1.0, 1.0)
}

fn hit_order(a: &Hit, b: &Hit) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then(a.index.cmp(&b.index))
}

impl VectorDatabase {
    pub fn new(dim: usize, records: Vec<SubgraphVectorRecord>, metadata: DbMetadata) -> Result<Self> {
        for r in &records {
            if r.vector.len() != dim {
                return Err(Error::Shape {
                    context: "database record",
                    expected: dim,
                    got: r.vector.len(),
                });
            }
            if r.vector.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("database record"));
            }
        }
        Ok(Self {
            dim,
            records,
            metadata,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[SubgraphVectorRecord] {
        &self.records
    }

    pub fn record(&self, index: usize) -> &SubgraphVectorRecord {
        &self.records[index]
    }

    fn check_query(&self, query: &[f64], k: usize) -> Result<f64> {
        if query.len() != self.dim {
            return Err(Error::Shape {
                context: "query vector",
                expected: self.dim,
                got: query.len(),
            });
        }
        if k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if query.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("query vector"));
        }
        let norm = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroQuery);
        }
        Ok(norm)
    }

    fn scan(&self, query: &[f64], norm: f64, range: std::ops::Range<usize>, k: usize) -> Vec<Hit> {
        let mut hits: Vec<Hit> = range
            .map(|i| Hit {
                index: i,
                similarity: cosine_to_record(query, norm, &self.records[i].vector),
            })
            .collect();
        if hits.len() > k {
            hits.select_nth_unstable_by(k - 1, hit_order);
            hits.truncate(k);
        }
        hits.sort_by(hit_order);
        hits
    }

    /// Exact top-k by cosine, split into `partitions` contiguous chunks that
    /// are scanned in parallel and merged. Ties go to the lower index.
    pub fn top_k_partitioned(&self, query: &[f64], k: usize, partitions: usize) -> Result<Vec<Hit>> {
        let norm = self.check_query(query, k)?;
        let n = self.records.len();
        let parts = partitions.clamp(1, n.max(1));
        let chunk = n.div_ceil(parts).max(1);
        let mut merged: Vec<Hit> = (0..parts)
            .into_par_iter()
            .map(|p| {
                let start = (p * chunk).min(n);
                let end = ((p + 1) * chunk).min(n);
                self.scan(query, norm, start..end, k)
            })
            .flatten()
            .collect();
        merged.sort_by(hit_order);
        merged.truncate(k);
        Ok(merged)
    }

    pub fn top_k(&self, query: &[f64], k: usize) -> Result<Vec<Hit>> {
        let parts = if self.records.len() < 4096 {
            1
        } else {
            rayon::current_num_threads()
        };
        self.top_k_partitioned(query, k, parts)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.metadata)?;
        let mut out = Vec::with_capacity(24 + meta.len() + self.records.len() * (12 + 4 * self.dim));
        out.extend_from_slice(DB_MAGIC);
        out.extend_from_slice(&DB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        for r in &self.records {
            out.extend_from_slice(&(r.center as u64).to_le_bytes());
            out.extend_from_slice(&r.node_count.to_le_bytes());
            for x in &r.vector {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = crate::binio::Reader::new(bytes, "database file");
        r.magic(DB_MAGIC)?;
        let version = r.u32()?;
        if version != DB_VERSION {
            return Err(Error::Format(format!(
                "database version {version}, expected {DB_VERSION}"
            )));
        }
        let dim = r.u32()? as usize;
        let count = r.u64()? as usize;
        let meta_len = r.u32()? as usize;
        let metadata: DbMetadata = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Format(format!("database metadata: {e}")))?;
        let record_bytes = 12 + 4 * dim;
        if r.remaining() != count.saturating_mul(record_bytes) {
            return Err(Error::Format(format!(
                "database payload is {} bytes, expected {} records of {} bytes",
                r.remaining(),
                count,
                record_bytes
            )));
        }
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let center = r.u64()? as usize;
            let node_count = r.u32()?;
            let vector = (0..dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            records.push(SubgraphVectorRecord {
                center,
                node_count,
                vector,
            });
        }
        Self::new(dim, records, metadata)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

const DB_MAGIC: &[u8; 4] = b"SGVD";
const DB_VERSION: u32 = 1;

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn meta() -> DbMetadata {
        DbMetadata {
            sampler: SamplerConfig::default(),
            model_hash: "0".into(),
            seed: 0,
        }
    }

    fn db(vectors: &[[f32; 2]]) -> VectorDatabase {
        let records = vectors
            .iter()
            .enumerate()
            .map(|(i, v)| SubgraphVectorRecord {
                center: i,
                node_count: 1,
                vector: v.to_vec(),
            })
            .collect();
        VectorDatabase::new(2, records, meta()).unwrap()
    }

    #[test]
    fn combine_worked_example() {
        let g = combine_embeddings(array![3.0, 0.0].view(), array![0.0, 4.0].view()).unwrap();
        assert_eq!(g, array![2.0, 2.0]);
    }

    #[test]
    fn combine_parallel_returns_h() {
        let h = array![0.5, -1.5, 2.0];
        let e = &h * 2.0;
        assert_eq!(combine_embeddings(e.view(), h.view()).unwrap(), h);
    }

    #[test]
    fn combine_degenerate_and_errors() {
        let h = array![1.0, 2.0];
        assert_eq!(combine_embeddings(array![0.0, 0.0].view(), h.view()).unwrap(), h);
        assert!(combine_embeddings(array![f64::NAN, 0.0].view(), h.view()).is_err());
    }

    #[test]
    fn self_match_ranks_first() {
        let d = db(&[[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]]);
        let hits = d.top_k(&[0.6, 0.8], 1).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].index, 1);
        assert!((hits[0].similarity - 1.0).abs() < 1e-7);
    }

    #[test]
    fn k_beyond_len_returns_all_sorted_with_ties_by_index() {
        let d = db(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]);
        let hits = d.top_k(&[1.0, 0.0], 10).unwrap();
        let idx: Vec<usize> = hits.iter().map(|h| h.index).collect();
        assert_eq!(idx, vec![0, 2, 1]);
    }

    #[test]
    fn query_errors() {
        let d = db(&[[1.0, 0.0]]);
        assert!(matches!(d.top_k(&[0.0, 0.0], 1), Err(Error::ZeroQuery)));
        assert!(matches!(d.top_k(&[1.0, 0.0, 0.0], 1), Err(Error::Shape { .. })));
    }

    #[test]
    fn round_trip_and_corruption() {
        let d = db(&[[1.0, 0.25], [-0.5, 0.125]]);
        let bytes = d.to_bytes().unwrap();
        assert_eq!(VectorDatabase::from_bytes(&bytes).unwrap(), d);
        let mut bad = bytes.clone();
        bad[1] = 0;
        assert!(matches!(VectorDatabase::from_bytes(&bad), Err(Error::Format(_))));
        assert!(VectorDatabase::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad_version = bytes;
        bad_version[4] = 9;
        assert!(VectorDatabase::from_bytes(&bad_version).is_err());
    }
}
