//! The three propagation graphs: normalized user-item bipartite adjacency,
//! item-item KNN over averaged modality cosine similarity, and user-user
//! co-interaction KNN.

use std::cmp::Ordering;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::SparseOperator;
use crate::corpus::InteractionSet;
use crate::enrichment::FeatureTable;
use crate::error::{Error, Result};
use crate::fingerprint::Fingerprinter;
use crate::sparse::Csr;

/// Symmetric-normalized bipartite adjacency built from train interactions.
#[derive(Debug, Clone, PartialEq)]
pub struct NormBipartite {
    pub n_users: usize,
    pub n_items: usize,
    /// `(user, item, 1/sqrt(|N_u| |N_i|))`, sorted by user then item.
    pub edges: Vec<(u32, u32, f64)>,
    pub user_degree: Vec<usize>,
    pub item_degree: Vec<usize>,
}

impl NormBipartite {
    /// Items with no train interactions; their rows are empty.
    pub fn isolated_items(&self) -> Vec<usize> {
        (0..self.n_items).filter(|&i| self.item_degree[i] == 0).collect()
    }

    /// User-by-item operator.
    pub fn user_item(&self) -> Csr {
        Csr::from_triplets(self.n_users, self.n_items, &self.edges)
    }

    /// `(users <- items, items <- users)` operators for propagation.
    pub fn operators(&self) -> (Arc<SparseOperator>, Arc<SparseOperator>) {
        let ui = self.user_item();
        let iu = ui.transpose();
        (SparseOperator::new(ui), SparseOperator::new(iu))
    }

    /// Dense `(|U|+|I|)` square adjacency, users first.
    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.n_users + self.n_items;
        let mut a = Array2::zeros((n, n));
        for &(u, i, w) in &self.edges {
            a[[u as usize, self.n_users + i as usize]] = w;
            a[[self.n_users + i as usize, u as usize]] = w;
        }
        a
    }
}

pub fn build_norm_bipartite(train: &InteractionSet) -> NormBipartite {
    let user_degree = train.user_degrees();
    let item_degree = train.item_degrees();
    let isolated = item_degree.iter().filter(|&&d| d == 0).count();
    if isolated > 0 {
        log::info!("{isolated} items have no train interactions");
    }
    let edges = train
        .pairs()
        .map(|(u, i)| {
            let w = 1.0 / ((user_degree[u as usize] * item_degree[i as usize]) as f64).sqrt();
            (u, i, w)
        })
        .collect();
    NormBipartite {
        n_users: train.n_users(),
        n_items: train.n_items(),
        edges,
        user_degree,
        item_degree,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Item,
    User,
}

/// Directed KNN graph over one node type. Edges are ordered by
/// `(source, rank)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    pub kind: GraphKind,
    pub n_nodes: usize,
    pub k: usize,
    pub edges: Vec<(u32, u32, f64)>,
}

pub type ItemGraph = KnnGraph;
pub type UserGraph = KnnGraph;

impl KnnGraph {
    pub fn to_csr(&self) -> Csr {
        Csr::from_triplets(self.n_nodes, self.n_nodes, &self.edges)
    }

    pub fn operator(&self) -> Arc<SparseOperator> {
        SparseOperator::new(self.to_csr())
    }

    pub fn out_degree(&self, src: usize) -> usize {
        self.edges.iter().filter(|e| e.0 as usize == src).count()
    }

    pub fn fingerprint(&self) -> String {
        let mut fp = Fingerprinter::new("knn-graph");
        fp.u64(self.n_nodes as u64).u64(self.k as u64);
        for &(s, d, w) in &self.edges {
            fp.u64(s as u64).u64(d as u64).f64(w);
        }
        fp.finish()
    }

    /// Write `(u32 src, u32 dst, f32 w)` little-endian triplets to `path` and
    /// a JSON header to `path.json`.
    pub fn write(&self, path: &Path, source_fingerprints: &[String]) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.edges.len() * 12);
        for &(s, d, w) in &self.edges {
            bytes.extend_from_slice(&s.to_le_bytes());
            bytes.extend_from_slice(&d.to_le_bytes());
            bytes.extend_from_slice(&(w as f32).to_le_bytes());
        }
        crate::io::write_atomic(path, &bytes)?;
        let header = GraphHeader {
            kind: self.kind,
            k: self.k,
            n_nodes: self.n_nodes,
            n_edges: self.edges.len(),
            fingerprint: self.fingerprint(),
            source_fingerprints: source_fingerprints.to_vec(),
        };
        let mut header_path = path.as_os_str().to_owned();
        header_path.push(".json");
        crate::io::write_json(Path::new(&header_path), &header)
    }

    /// Read a graph written by [`KnnGraph::write`]. Weights come back at
    /// 32-bit precision.
    pub fn read(path: &Path) -> Result<Self> {
        let mut header_path = path.as_os_str().to_owned();
        header_path.push(".json");
        let header: GraphHeader = crate::io::read_json(Path::new(&header_path))?;
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() != header.n_edges * 12 {
            return Err(Error::format(path.display().to_string(), "edge payload length mismatch"));
        }
        let edges = bytes
            .chunks_exact(12)
            .map(|c| {
                (
                    u32::from_le_bytes(c[0..4].try_into().unwrap()),
                    u32::from_le_bytes(c[4..8].try_into().unwrap()),
                    f32::from_le_bytes(c[8..12].try_into().unwrap()) as f64,
                )
            })
            .collect();
        Ok(Self {
            kind: header.kind,
            n_nodes: header.n_nodes,
            k: header.k,
            edges,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphHeader {
    pub kind: GraphKind,
    pub k: usize,
    pub n_nodes: usize,
    pub n_edges: usize,
    pub fingerprint: String,
    pub source_fingerprints: Vec<String>,
}

/// Rows scaled to unit norm; zero rows stay zero.
fn unit_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    out
}

/// Descending score, then ascending index.
fn rank_order(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

/// Keep the best `k` candidates by [`rank_order`].
fn top_k(mut candidates: Vec<(usize, f64)>, k: usize) -> Vec<(usize, f64)> {
    if candidates.len() > k {
        candidates.select_nth_unstable_by(k, rank_order);
        candidates.truncate(k);
    }
    candidates.sort_by(rank_order);
    candidates
}

fn cosine_row(unit: &Array2<f64>, src: ArrayView1<f64>) -> ndarray::Array1<f64> {
    unit.dot(&src)
}

/// Item-item KNN graph: `S = (S^v + S^t) / 2` with cosine similarities per
/// modality. Zero-norm rows have similarity 0 to everything.
pub fn build_item_knn(visual: &FeatureTable, textual: &FeatureTable, k: usize) -> Result<ItemGraph> {
    if visual.n_rows() != textual.n_rows() || visual.ids != textual.ids {
        return Err(Error::Internal("visual and textual tables are not row-aligned".into()));
    }
    if k == 0 {
        return Err(Error::Config("item graph k must be at least 1".into()));
    }
    let n = visual.n_rows();
    let k_eff = k.min(n.saturating_sub(1));
    if k_eff < k {
        log::warn!("item graph k={k} exceeds {} candidates; clipped to {k_eff}", n.saturating_sub(1));
    }
    let v = unit_rows(visual.matrix());
    let t = unit_rows(textual.matrix());
    let rows: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|src| {
            let sv = cosine_row(&v, v.row(src));
            let st = cosine_row(&t, t.row(src));
            let candidates = (0..n)
                .filter(|&j| j != src)
                .map(|j| (j, (0.5 * (sv[j] + st[j])).clamp(-1.0, 1.0)))
                .collect();
            top_k(candidates, k_eff)
        })
        .collect();
    let edges = rows
        .into_iter()
        .enumerate()
        .flat_map(|(src, row)| row.into_iter().map(move |(dst, w)| (src as u32, dst as u32, w)))
        .collect();
    Ok(KnnGraph {
        kind: GraphKind::Item,
        n_nodes: n,
        k: k_eff,
        edges,
    })
}

/// User-user KNN graph on co-interaction counts. With `normalize`, each
/// user's kept weights sum to one.
pub fn build_user_knn(train: &InteractionSet, k: usize, normalize: bool) -> Result<UserGraph> {
    if k == 0 {
        return Err(Error::Config("user graph k must be at least 1".into()));
    }
    let n = train.n_users();
    let rows: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|u| {
            let mut counts = vec![0u32; n];
            for &i in train.user_items(u) {
                for &other in train.item_users(i as usize) {
                    counts[other as usize] += 1;
                }
            }
            counts[u] = 0;
            let candidates = counts
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > 0)
                .map(|(j, &c)| (j, c as f64))
                .collect();
            let mut kept = top_k(candidates, k);
            if normalize {
                let total: f64 = kept.iter().map(|e| e.1).sum();
                kept.iter_mut().for_each(|e| e.1 /= total);
            }
            kept
        })
        .collect();
    let edges = rows
        .into_iter()
        .enumerate()
        .flat_map(|(src, row)| row.into_iter().map(move |(dst, w)| (src as u32, dst as u32, w)))
        .collect();
    Ok(KnnGraph {
        kind: GraphKind::User,
        n_nodes: n,
        k,
        edges,
    })
}
