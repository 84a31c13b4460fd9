//! Feature fusion, Euclidean ranking, CMC and mAP.
//!
//! Fusion is by replacement: the descriptor starts as the flattened global
//! feature grid and the cells picked by the attention map are overwritten
//! with the raw per-patch features of the local net. The result is
//! L2-normalized and gallery images are ranked by Euclidean distance.

use crate::data::TestSplit;
use crate::error::{Error, Result};
use crate::global::{analyze, FeatureGrid, GlobalParams};
use crate::local::{embed_patches, Embedding, LocalParams};
use crate::tensor::{Elem, Tensor};

/// Overwrite the D-slices of the selected cells with per-patch features.
/// Empty selection returns the flattened grid unchanged.
pub fn fuse_features<T: Elem>(
    grid: &FeatureGrid<T>,
    positions: &[(usize, usize)],
    patch_feats: &[Vec<T>],
) -> Result<Vec<T>> {
    if positions.len() != patch_feats.len() {
        return Err(Error::Shape(format!(
            "{} positions vs {} patch features",
            positions.len(),
            patch_feats.len()
        )));
    }
    let (d1, d2, d) = (grid.rows(), grid.cols(), grid.channels());
    let mut out = grid.flatten_cells();
    for (&(i, j), feat) in positions.iter().zip(patch_feats) {
        if i >= d1 || j >= d2 {
            return Err(Error::Shape(format!(
                "cell ({i}, {j}) outside the {d1}x{d2} grid"
            )));
        }
        if feat.len() != d {
            return Err(Error::Shape(format!(
                "patch feature of dim {} cannot replace a {d}-channel cell",
                feat.len()
            )));
        }
        out[(i * d2 + j) * d..(i * d2 + j + 1) * d].copy_from_slice(feat);
    }
    Ok(out)
}

/// Descriptor for one image: fused (or plain) flattened grid, unit norm.
pub fn image_descriptor<T: Elem>(
    image: &Tensor<T>,
    global: &mut GlobalParams<T>,
    mut local: Option<&mut LocalParams<T>>,
    k_patches: usize,
) -> Result<Embedding<T>> {
    let raw = match (local.as_deref_mut(), k_patches) {
        (Some(local), k) if k > 0 => {
            let art = analyze(image, global, k)?;
            let pe = embed_patches(&art.patches, local)?;
            fuse_features(&art.grid, &art.patches.positions, &pe.per_patch)?
        }
        _ => {
            let (grid, _) = crate::global::global_forward(image, global)?;
            grid.flatten_cells()
        }
    };
    Embedding::from_raw(raw)
}

pub fn euclidean_distance<T: Elem>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.to_f64() - y.to_f64();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Query x gallery distance matrix.
pub fn pairwise_distances<T: Elem>(
    queries: &[Embedding<T>],
    gallery: &[Embedding<T>],
) -> Result<Vec<Vec<f64>>> {
    for e in queries.iter().chain(gallery) {
        if e.dim() != queries.first().map_or(e.dim(), |q| q.dim()) {
            return Err(Error::Shape("descriptor dimensions disagree".into()));
        }
    }
    Ok(queries
        .iter()
        .map(|q| gallery.iter().map(|g| euclidean_distance(&q.vector, &g.vector)).collect())
        .collect())
}

/// Gallery indices sorted by ascending distance, ties broken by lower
/// gallery index.
pub fn rank_gallery(distances: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].partial_cmp(&distances[b]).unwrap().then(a.cmp(&b)));
    order
}

/// CMC curve from per-query relevance lists (gallery relevance in ranked
/// order, excluded entries already removed). A query with no relevant
/// gallery item is a protocol error.
pub fn cmc(relevance: &[Vec<bool>], max_rank: usize) -> Result<Vec<f64>> {
    if relevance.is_empty() {
        return Err(Error::Protocol("no queries to evaluate".into()));
    }
    let mut curve = vec![0.0; max_rank];
    for (q, rel) in relevance.iter().enumerate() {
        let first = rel
            .iter()
            .position(|&r| r)
            .ok_or_else(|| Error::Protocol(format!("query {q} has no match in the gallery")))?;
        for r in first..max_rank {
            curve[r] += 1.0;
        }
    }
    for v in &mut curve {
        *v /= relevance.len() as f64;
    }
    Ok(curve)
}

/// Average precision of one ranked relevance list.
pub fn average_precision(relevance: &[bool]) -> Result<f64> {
    let total = relevance.iter().filter(|&&r| r).count();
    if total == 0 {
        return Err(Error::Protocol("query has no match in the gallery".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / total as f64)
}

pub fn mean_average_precision(relevance: &[Vec<bool>]) -> Result<f64> {
    if relevance.is_empty() {
        return Err(Error::Protocol("no queries to evaluate".into()));
    }
    let mut sum = 0.0;
    for rel in relevance {
        sum += average_precision(rel)?;
    }
    Ok(sum / relevance.len() as f64)
}

#[derive(Debug, Clone)]
pub struct RetrievalReport {
    /// CMC curve, index 0 = rank-1.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub num_queries: usize,
    pub num_gallery: usize,
    /// 1-based rank of the first correct match per query.
    pub first_match_ranks: Vec<usize>,
    /// Average precision per query, same order as the queries.
    pub average_precisions: Vec<f64>,
}

impl RetrievalReport {
    /// Rank-r accuracy (1-based); ranks past the curve saturate.
    pub fn rank(&self, r: usize) -> f64 {
        assert!(r >= 1);
        self.cmc[(r - 1).min(self.cmc.len() - 1)]
    }

    pub fn per_query_csv(&self) -> String {
        let mut out = String::from("query,first_match_rank,average_precision\n");
        for (q, (r, ap)) in self
            .first_match_ranks
            .iter()
            .zip(&self.average_precisions)
            .enumerate()
        {
            out.push_str(&format!("{q},{r},{ap:.6}\n"));
        }
        out
    }
}

impl std::fmt::Display for RetrievalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "queries: {}  gallery: {}", self.num_queries, self.num_gallery)?;
        for r in [1usize, 5, 10, 20] {
            writeln!(f, "rank-{r}: {:.4}", self.rank(r))?;
        }
        write!(f, "mAP: {:.4}", self.map)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalConfig {
    pub k_patches: usize,
    /// Drop gallery entries sharing both identity and camera with the query.
    pub filter_same_camera: bool,
    pub max_rank: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k_patches: 8,
            filter_same_camera: false,
            max_rank: 20,
        }
    }
}

/// Full retrieval evaluation over a query/gallery split.
pub fn evaluate<T: Elem>(
    split: &TestSplit<T>,
    global: &mut GlobalParams<T>,
    mut local: Option<&mut LocalParams<T>>,
    config: &EvalConfig,
) -> Result<RetrievalReport> {
    if split.queries.is_empty() || split.gallery.is_empty() {
        return Err(Error::Protocol("empty query or gallery set".into()));
    }
    let mut q_emb = Vec::with_capacity(split.queries.len());
    for s in &split.queries {
        q_emb.push(image_descriptor(&s.pixels, global, local.as_deref_mut(), config.k_patches)?);
    }
    let mut g_emb = Vec::with_capacity(split.gallery.len());
    for s in &split.gallery {
        g_emb.push(image_descriptor(&s.pixels, global, local.as_deref_mut(), config.k_patches)?);
    }
    let dists = pairwise_distances(&q_emb, &g_emb)?;
    let mut relevance = Vec::with_capacity(split.queries.len());
    for (q, row) in split.queries.iter().zip(&dists) {
        let order = rank_gallery(row);
        let rel: Vec<bool> = order
            .iter()
            .filter(|&&g| {
                !(config.filter_same_camera
                    && split.gallery[g].identity == q.identity
                    && split.gallery[g].camera == q.camera)
            })
            .map(|&g| split.gallery[g].identity == q.identity)
            .collect();
        relevance.push(rel);
    }
    let curve = cmc(&relevance, config.max_rank)?;
    let map = mean_average_precision(&relevance)?;
    let first_match_ranks = relevance
        .iter()
        .map(|rel| rel.iter().position(|&r| r).unwrap() + 1)
        .collect();
    let average_precisions = relevance
        .iter()
        .map(|rel| average_precision(rel))
        .collect::<Result<Vec<f64>>>()?;
    Ok(RetrievalReport {
        cmc: curve,
        map,
        num_queries: split.queries.len(),
        num_gallery: split.gallery.len(),
        first_match_ranks,
        average_precisions,
    })
}
