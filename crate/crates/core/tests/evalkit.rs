mod common;

use hng_core::datakit::ClassId;
use hng_core::evalkit::{
    average_precision_at_r, embedding_stats, evaluate, map_at_r, project_2d, r_precision,
    recall_at_k, RetrievalIndex,
};
use ndarray::array;

use common::*;

#[test]
fn query_gallery_matches_single_set_after_dropping_self() {
    let mut r = rng(11);
    let x = gaussian(60, 5, &mut r);
    let labels: Vec<ClassId> = (0..60).map(|i| i % 4 + 1).collect();
    let single = RetrievalIndex::single_set(&x, &labels).unwrap();
    let qg = RetrievalIndex::query_gallery(&x, &labels, &x, &labels).unwrap();
    assert_eq!(qg.effective_gallery(), single.effective_gallery() + 1);
    for q in 0..60 {
        let full = qg.ranking(q);
        // Each query's own copy is its nearest gallery item.
        assert_eq!(full[0], q);
        assert_eq!(full[1..], single.ranking(q)[..]);
    }
    // A gallery without the query reproduces the single-set metrics.
    let ks = [1, 2, 4, 8];
    let single_r = recall_at_k(&single, &ks).unwrap();
    let mut hits = [0.0; 4];
    for q in 0..60 {
        let keep: Vec<usize> = (0..60).filter(|&g| g != q).collect();
        let g = x.select(ndarray::Axis(0), &keep);
        let gl: Vec<ClassId> = keep.iter().map(|&k| labels[k]).collect();
        let qx = x.select(ndarray::Axis(0), &[q]);
        let one = RetrievalIndex::query_gallery(&qx, &labels[q..=q], &g, &gl).unwrap();
        for (h, v) in hits.iter_mut().zip(recall_at_k(&one, &ks).unwrap()) {
            *h += v;
        }
    }
    for (a, h) in single_r.iter().zip(hits) {
        assert!((a - h / 60.0).abs() < 1e-12);
    }
}

#[test]
fn hand_ranking_and_metrics() {
    // Query 0 sees: 1 (sim 0.8, same), 2 (0.6, other), 3 (0, same).
    let x = array![[1.0, 0.0], [0.8, 0.6], [0.6, 0.8], [0.0, 1.0]];
    let labels = [1, 1, 2, 1];
    let idx = RetrievalIndex::single_set(&x, &labels).unwrap();
    assert_eq!(idx.ranking(0), vec![1, 2, 3]);
    let (rel, r) = idx.relevance(0);
    assert_eq!((rel, r), (vec![true, false, true], 2));
    assert_eq!(average_precision_at_r(&[true, false, true], 2), 0.5);
    assert_eq!(average_precision_at_r(&[false, true, true], 2), 0.25);
    // Query 2 (class 2) has no partner and is skipped by RP and MAP@R.
    let rp = r_precision(&idx);
    let map = map_at_r(&idx);
    assert!(rp > 0.0 && map <= rp);
    let rep = evaluate(&idx, &[1, 3]).unwrap();
    assert_eq!(rep.n_queries, 4);
    assert_eq!(rep.recall(3), Some(0.75));
}

#[test]
fn ties_break_by_gallery_index() {
    let x = array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
    let idx = RetrievalIndex::single_set(&x, &[1, 2, 1, 2]).unwrap();
    assert_eq!(idx.ranking(0), vec![1, 2, 3]);
    assert_eq!(idx.ranking(2), vec![0, 1, 3]);
}

#[test]
fn k_outside_the_gallery_is_a_config_error() {
    let x = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
    let idx = RetrievalIndex::single_set(&x, &[1, 1, 2]).unwrap();
    assert_eq!(recall_at_k(&idx, &[0]).unwrap_err().exit_code(), 2);
    assert!(recall_at_k(&idx, &[3]).is_err());
    assert!(recall_at_k(&idx, &[2]).is_ok());
}

#[test]
fn zero_rows_are_rejected() {
    let x = array![[0.0, 0.0], [1.0, 0.0]];
    assert!(RetrievalIndex::single_set(&x, &[1, 2]).is_err());
}

#[test]
fn variance_histogram_counts_every_dimension() {
    let mut r = rng(12);
    let mut x = gaussian(100, 8, &mut r);
    x.column_mut(3).mapv_inplace(|v| v * 5.0);
    let s = embedding_stats(&x).unwrap();
    assert_eq!(s.histogram_counts.iter().sum::<usize>(), 8);
    assert_eq!(s.histogram_edges.len(), s.histogram_counts.len() + 1);
    assert_eq!(s.quantiles[4], s.variance[3]);
    assert!(s.quantiles.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn projection_recovers_the_dominant_plane() {
    let mut r = rng(13);
    let mut x = gaussian(200, 4, &mut r) * 0.01;
    for (i, mut row) in x.rows_mut().into_iter().enumerate() {
        row[0] += (i as f64 * 0.1).sin() * 3.0;
        row[2] += (i as f64 * 0.07).cos();
    }
    let p = project_2d(&x).unwrap();
    assert!(p.eigenvalues[0] >= p.eigenvalues[1] && p.eigenvalues[1] >= p.eigenvalues[2]);
    assert!(p.components[[0, 0]].abs() > 0.99);
    assert!(p.components[[2, 1]].abs() > 0.99);
    let c0 = p.components.column(0);
    let c1 = p.components.column(1);
    assert!(c0.dot(&c1).abs() < 1e-9);
}
