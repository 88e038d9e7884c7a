//! Plain loop implementations of the losses and metrics.

use hng_core::autodiff::Mat;
use hng_core::cacai::SynthesisPlan;
use hng_core::datakit::{BatchLayout, ClassId};
use ndarray::ArrayView1;

pub fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

fn norm(a: ArrayView1<f64>) -> f64 {
    dot(a, a).sqrt()
}

fn log1p_sum_exp(xs: &[f64]) -> f64 {
    let mut s = 1.0;
    for &x in xs {
        s += x.exp();
    }
    s.ln()
}

/// Cross-entropy of `x·W + b` against class index `target`.
pub fn cross_entropy(x: ArrayView1<f64>, w: &Mat, b: &Mat, target: usize) -> f64 {
    let c = w.ncols();
    let mut logits = vec![0.0; c];
    for (k, l) in logits.iter_mut().enumerate() {
        *l = b[[0, k]];
        for d in 0..x.len() {
            *l += x[d] * w[[d, k]];
        }
    }
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    lse - logits[target]
}

pub fn mean_cross_entropy(x: &Mat, labels: &[ClassId], w: &Mat, b: &Mat) -> f64 {
    let mut s = 0.0;
    for r in 0..x.nrows() {
        s += cross_entropy(x.row(r), w, b, labels[r] as usize - 1);
    }
    s / x.nrows() as f64
}

pub fn one_minus_cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    1.0 - dot(a, b) / (norm(a) * norm(b))
}

/// `1 − σ` over every entry of the anchor's negative-pair coefficient vectors.
pub fn diversity(lambda: &Mat, labels: &[ClassId], i: usize) -> f64 {
    let b = labels.len();
    let mut vals = Vec::new();
    for j in 0..b {
        if labels[j] != labels[i] {
            vals.extend(lambda.row(i * b + j).iter().copied());
        }
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    1.0 - var.sqrt()
}

#[allow(clippy::too_many_arguments)]
pub fn j_gen(
    z: &Mat,
    z_hat: &Mat,
    lambda: Option<&Mat>,
    plan: &SynthesisPlan,
    labels: &[ClassId],
    layout: BatchLayout,
    w: &Mat,
    b: &Mat,
    gamma_s: f64,
    gamma_d: f64,
) -> f64 {
    let mut total = 0.0;
    for (r, &(i, n)) in plan.rows.iter().enumerate() {
        let ce = cross_entropy(z_hat.row(r), w, b, n as usize - 1);
        let sim = one_minus_cosine(z.row(i), z_hat.row(r));
        let div = match lambda {
            Some(l) => diversity(l, labels, i),
            None => 1.0,
        };
        total += ce + gamma_s * sim + gamma_d * div;
    }
    total / (labels.len() * layout.classes) as f64
}

pub fn j_syn(z: &Mat, z_hat: &Mat, plan: &SynthesisPlan) -> f64 {
    let b = plan.batch_size;
    let mut total = 0.0;
    for i in 0..b {
        let p = plan.positives[i];
        let pos = dot(z.row(i), z.row(p));
        let mut xs = Vec::new();
        for (r, &(a, _)) in plan.rows.iter().enumerate() {
            if a == i {
                xs.push(dot(z.row(i), z_hat.row(r)) - pos);
            }
        }
        total += log1p_sum_exp(&xs);
    }
    total / b as f64
}

/// Group-0 anchors against every later group.
pub fn np_modified(z: &Mat, layout: BatchLayout) -> f64 {
    let n = layout.classes;
    let m = layout.instances;
    let mut total = 0.0;
    for g in 1..m {
        for j in 0..n {
            let pos = dot(z.row(j), z.row(j + g * n));
            let xs: Vec<f64> = (0..n)
                .filter(|&q| q != j)
                .map(|q| dot(z.row(j), z.row(q + g * n)) - pos)
                .collect();
            total += log1p_sum_exp(&xs);
        }
    }
    total / ((m - 1) * n) as f64
}

/// N-pair loss over `N` (anchor, positive) pairs, in the product form
/// `log(1 + Σ_{q≠j} exp(fᵀf⁺_q − fᵀf⁺_j))`.
pub fn np_textbook(anchors: &Mat, positives: &Mat) -> f64 {
    let n = anchors.nrows();
    let mut total = 0.0;
    for j in 0..n {
        let mut s = 0.0;
        for q in 0..n {
            if q != j {
                s += (dot(anchors.row(j), positives.row(q))
                    - dot(anchors.row(j), positives.row(j)))
                .exp();
            }
        }
        total += (1.0 + s).ln();
    }
    total / n as f64
}

pub fn proxy_anchor(z: &Mat, labels: &[ClassId], proxies: &Mat, alpha: f64, delta: f64) -> f64 {
    let c = proxies.nrows();
    let cos = |x: usize, q: usize| {
        dot(z.row(x), proxies.row(q)) / (norm(z.row(x)) * norm(proxies.row(q)))
    };
    let mut pull = 0.0;
    let mut with_pos = 0;
    let mut push = 0.0;
    for q in 0..c {
        let mut sp = 0.0;
        let mut sn = 0.0;
        let mut any = false;
        for x in 0..z.nrows() {
            if labels[x] as usize - 1 == q {
                any = true;
                sp += (-alpha * (cos(x, q) - delta)).exp();
            } else {
                sn += (alpha * (cos(x, q) + delta)).exp();
            }
        }
        if any {
            with_pos += 1;
            pull += (1.0 + sp).ln();
        }
        push += (1.0 + sn).ln();
    }
    pull / with_pos as f64 + push / c as f64
}

/// Retrieval metrics by brute force: the rank of every gallery item is the
/// number of items that beat it (higher similarity, or equal similarity and a
/// lower index).
pub struct BruteForce {
    pub recall: Vec<f64>,
    pub r_precision: f64,
    pub map_at_r: f64,
}

fn normalized(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        row.mapv_inplace(|v| v / n);
    }
    out
}

pub fn retrieval(x: &Mat, labels: &[ClassId], ks: &[usize]) -> BruteForce {
    let e = normalized(x);
    let n = e.nrows();
    let sim =
        |a: usize, b: usize| -> f64 { e.row(a).iter().zip(e.row(b)).map(|(x, y)| x * y).sum() };
    let mut hits = vec![0usize; ks.len()];
    let (mut rp, mut ap, mut used) = (0.0, 0.0, 0usize);
    for q in 0..n {
        let rank = |g: usize| {
            (0..n)
                .filter(|&h| h != q && h != g)
                .filter(|&h| sim(q, h) > sim(q, g) || (sim(q, h) == sim(q, g) && h < g))
                .count()
        };
        let mut relevant: Vec<usize> = (0..n)
            .filter(|&g| g != q && labels[g] == labels[q])
            .map(rank)
            .collect();
        relevant.sort_unstable();
        for (h, &k) in hits.iter_mut().zip(ks) {
            if relevant.first().is_some_and(|&r| r < k) {
                *h += 1;
            }
        }
        let r = relevant.len();
        if r == 0 {
            continue;
        }
        used += 1;
        rp += relevant.iter().filter(|&&x| x < r).count() as f64 / r as f64;
        let mut sum = 0.0;
        for (found, &pos) in relevant.iter().enumerate() {
            if pos < r {
                sum += (found + 1) as f64 / (pos + 1) as f64;
            }
        }
        ap += sum / r as f64;
    }
    BruteForce {
        recall: hits.iter().map(|&h| h as f64 / n as f64).collect(),
        r_precision: if used == 0 { 0.0 } else { rp / used as f64 },
        map_at_r: if used == 0 { 0.0 } else { ap / used as f64 },
    }
}
