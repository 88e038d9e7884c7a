//! Retrieval metrics over cosine similarity and embedding diagnostics.
//!
//! Rankings are exhaustive. Equal similarities are ordered by gallery index,
//! ascending, so every metric is a deterministic function of its inputs.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::datakit::ClassId;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct RetrievalIndex {
    query: Mat,
    query_labels: Vec<ClassId>,
    gallery: Mat,
    gallery_labels: Vec<ClassId>,
    /// Query `q` is gallery item `q` and is skipped in its own ranking.
    exclude_self: bool,
}

fn normalized(x: &Mat, what: &str) -> Result<Mat> {
    let mut out = x.clone();
    for (r, mut row) in out.rows_mut().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if !n.is_finite() {
            return Err(Error::Numeric(format!("{what} row {r} has norm {n}")));
        }
        if n == 0.0 {
            return Err(Error::Invalid(format!("{what} row {r} has zero norm")));
        }
        row.mapv_inplace(|v| v / n);
    }
    Ok(out)
}

impl RetrievalIndex {
    /// Every item queries all the others.
    pub fn single_set(embeddings: &Mat, labels: &[ClassId]) -> Result<Self> {
        if embeddings.nrows() != labels.len() {
            return Err(Error::shape(
                "retrieval set",
                labels.len(),
                embeddings.nrows(),
            ));
        }
        if labels.len() < 2 {
            return Err(Error::Invalid("retrieval needs at least 2 items".into()));
        }
        let e = normalized(embeddings, "embedding")?;
        Ok(Self {
            query: e.clone(),
            query_labels: labels.to_vec(),
            gallery: e,
            gallery_labels: labels.to_vec(),
            exclude_self: true,
        })
    }

    /// Disjoint query and gallery sets.
    pub fn query_gallery(
        query: &Mat,
        query_labels: &[ClassId],
        gallery: &Mat,
        gallery_labels: &[ClassId],
    ) -> Result<Self> {
        if query.nrows() != query_labels.len() {
            return Err(Error::shape("query set", query_labels.len(), query.nrows()));
        }
        if gallery.nrows() != gallery_labels.len() {
            return Err(Error::shape(
                "gallery set",
                gallery_labels.len(),
                gallery.nrows(),
            ));
        }
        if query.ncols() != gallery.ncols() {
            return Err(Error::shape(
                "query/gallery dim",
                gallery.ncols(),
                query.ncols(),
            ));
        }
        if gallery_labels.is_empty() || query_labels.is_empty() {
            return Err(Error::Invalid("query and gallery must be nonempty".into()));
        }
        Ok(Self {
            query: normalized(query, "query")?,
            query_labels: query_labels.to_vec(),
            gallery: normalized(gallery, "gallery")?,
            gallery_labels: gallery_labels.to_vec(),
            exclude_self: false,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.query_labels.len()
    }

    /// Gallery size seen by each query.
    pub fn effective_gallery(&self) -> usize {
        self.gallery_labels.len() - usize::from(self.exclude_self)
    }

    /// Gallery indices for query `q`, most similar first.
    pub fn ranking(&self, q: usize) -> Vec<usize> {
        let qr = self.query.row(q);
        let mut scored: Vec<(f64, usize)> = (0..self.gallery_labels.len())
            .filter(|&g| !(self.exclude_self && g == q))
            .map(|g| {
                let s: f64 = qr.iter().zip(self.gallery.row(g)).map(|(a, b)| a * b).sum();
                (s, g)
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.into_iter().map(|(_, g)| g).collect()
    }

    /// Relevance flags along the ranking of `q`, and `R`.
    pub fn relevance(&self, q: usize) -> (Vec<bool>, usize) {
        let l = self.query_labels[q];
        let rel: Vec<bool> = self
            .ranking(q)
            .into_iter()
            .map(|g| self.gallery_labels[g] == l)
            .collect();
        let r = rel.iter().filter(|&&x| x).count();
        (rel, r)
    }
}

/// Fraction of queries with a same-class item among their top `k`, per `k`.
pub fn recall_at_k(index: &RetrievalIndex, ks: &[usize]) -> Result<Vec<f64>> {
    let g = index.effective_gallery();
    for &k in ks {
        if k == 0 || k > g {
            return Err(Error::config(
                "ks",
                format!("K = {k} is outside 1..={g} (gallery size)"),
            ));
        }
    }
    let mut hits = vec![0usize; ks.len()];
    for q in 0..index.num_queries() {
        let (rel, _) = index.relevance(q);
        let first = rel.iter().position(|&x| x);
        for (h, &k) in hits.iter_mut().zip(ks) {
            if first.is_some_and(|p| p < k) {
                *h += 1;
            }
        }
    }
    let n = index.num_queries() as f64;
    Ok(hits.into_iter().map(|h| h as f64 / n).collect())
}

/// `(1/R) Σ_{i≤R} P(i)·rel(i)` for one ranked relevance list.
pub fn average_precision_at_r(rel: &[bool], r: usize) -> f64 {
    if r == 0 {
        return 0.0;
    }
    let mut found = 0usize;
    let mut sum = 0.0;
    for (i, &x) in rel.iter().take(r).enumerate() {
        if x {
            found += 1;
            sum += found as f64 / (i + 1) as f64;
        }
    }
    sum / r as f64
}

fn per_query(index: &RetrievalIndex, f: impl Fn(&[bool], usize) -> f64) -> (f64, usize) {
    let mut total = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    for q in 0..index.num_queries() {
        let (rel, r) = index.relevance(q);
        if r == 0 {
            skipped += 1;
            continue;
        }
        total += f(&rel, r);
        used += 1;
    }
    if skipped > 0 {
        log::warn!("{skipped} queries have no same-class gallery item and were skipped");
    }
    (if used == 0 { 0.0 } else { total / used as f64 }, used)
}

pub fn r_precision(index: &RetrievalIndex) -> f64 {
    per_query(index, |rel, r| {
        rel.iter().take(r).filter(|&&x| x).count() as f64 / r as f64
    })
    .0
}

pub fn map_at_r(index: &RetrievalIndex) -> f64 {
    per_query(index, average_precision_at_r).0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub r_precision: f64,
    pub map_at_r: f64,
    pub n_queries: usize,
}

impl MetricReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.get(&k).copied()
    }
}

pub fn evaluate(index: &RetrievalIndex, ks: &[usize]) -> Result<MetricReport> {
    let recalls = recall_at_k(index, ks)?;
    Ok(MetricReport {
        recall_at: ks.iter().copied().zip(recalls).collect(),
        r_precision: r_precision(index),
        map_at_r: map_at_r(index),
        n_queries: index.num_queries(),
    })
}

/// Per-dimension spread of a set of embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingStats {
    pub mean: Vec<f64>,
    /// Population variance per dimension.
    pub variance: Vec<f64>,
    /// Histogram of per-dimension variances over `[min, max]`.
    pub histogram_edges: Vec<f64>,
    pub histogram_counts: Vec<usize>,
    /// Variance quantiles at 0, 0.25, 0.5, 0.75 and 1.
    pub quantiles: [f64; 5],
}

pub const VARIANCE_BINS: usize = 10;

pub fn embedding_stats(x: &Mat) -> Result<EmbeddingStats> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::Invalid(
            "embedding stats need at least 2 rows".into(),
        ));
    }
    let mean: Vec<f64> = x
        .columns()
        .into_iter()
        .map(|c| c.sum() / n as f64)
        .collect();
    let variance: Vec<f64> = x
        .columns()
        .into_iter()
        .zip(&mean)
        .map(|(c, m)| c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64)
        .collect();
    let mut sorted = variance.clone();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    };
    let quantiles = [q(0.0), q(0.25), q(0.5), q(0.75), q(1.0)];
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    let width = (hi - lo) / VARIANCE_BINS as f64;
    let histogram_edges = (0..=VARIANCE_BINS).map(|i| lo + width * i as f64).collect();
    let mut histogram_counts = vec![0; VARIANCE_BINS];
    for &v in &variance {
        let b = if width > 0.0 {
            (((v - lo) / width) as usize).min(VARIANCE_BINS - 1)
        } else {
            0
        };
        histogram_counts[b] += 1;
    }
    Ok(EmbeddingStats {
        mean,
        variance,
        histogram_edges,
        histogram_counts,
        quantiles,
    })
}

/// Top-two principal component coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `n×2`.
    pub coords: Mat,
    /// `D×2` unit component directions.
    pub components: Mat,
    /// Covariance eigenvalues (population normalization), descending.
    pub eigenvalues: Vec<f64>,
    pub mean: Vec<f64>,
}

/// Relative eigenvalue below which a component counts as absent.
const RANK_TOL: f64 = 1e-12;

pub fn project_2d(x: &Mat) -> Result<Projection> {
    let (n, d) = x.dim();
    if n < 3 {
        return Err(Error::Invalid("projection needs at least 3 rows".into()));
    }
    let mean: Vec<f64> = x
        .columns()
        .into_iter()
        .map(|c| c.sum() / n as f64)
        .collect();
    let centered = DMatrix::from_fn(n, d, |r, c| x[[r, c]] - mean[c]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let eigenvalues: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();

    let top = eigenvalues[0];
    let mut coords = Mat::zeros((n, 2));
    let mut components = Mat::zeros((d, 2));
    for c in 0..2.min(d) {
        if eigenvalues[c] <= RANK_TOL * top.max(f64::MIN_POSITIVE) {
            log::warn!("embeddings have rank < {}; component {c} is zero", c + 1);
            continue;
        }
        let v = eig.eigenvectors.column(order[c]);
        let proj: Vec<f64> = (0..n)
            .map(|r| centered.row(r).dot(&v.transpose()))
            .collect();
        let big = proj
            .iter()
            .copied()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap_or(0.0);
        let sign = if big < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            coords[[r, c]] = sign * proj[r];
        }
        for k in 0..d {
            components[[k, c]] = sign * v[k];
        }
    }
    if d < 2 {
        log::warn!("embeddings are 1-dimensional; component 1 is zero");
    }
    Ok(Projection {
        coords,
        components,
        eigenvalues,
        mean,
    })
}
