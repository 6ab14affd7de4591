//! Per-filter source/target response distributions, KL-divergence scores and
//! the proxy A-distance.
//!
//! The KL score of a filter measures how much information is lost when the
//! source response distribution is used to encode the target one; it is the
//! quantity that later weights the L1 penalty during filter selection. The
//! A-distance is a classifier-based discrepancy proxy: train a linear
//! discriminator to tell source points from target points and map its
//! held-out balanced error eps to `d_A = 2 * (1 - 2 * eps)`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::FilterSampleMatrix;

/// Discrete distribution over shared bin edges. `probs` sums to 1 and every
/// entry is strictly positive whenever additive smoothing is used.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    bin_edges: Vec<f64>,
    probs: Vec<f64>,
}

impl Histogram {
    pub fn bin_edges(&self) -> &[f64] {
        &self.bin_edges
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn n_bins(&self) -> usize {
        self.probs.len()
    }
}

/// Count samples into `edges.len() - 1` bins and normalize with additive
/// smoothing: `prob_i = (count_i + alpha) / (n + bins * alpha)`. Values
/// outside the edge range clamp into the extreme bins.
pub fn build_histogram(samples: &[f64], edges: &[f64], smoothing: f64) -> Result<Histogram> {
    if samples.is_empty() {
        return Err(Error::EmptySamples("histogram input"));
    }
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::BadBinEdges);
    }
    if smoothing < 0.0 || !smoothing.is_finite() {
        return Err(Error::NonFinite("smoothing"));
    }
    let bins = edges.len() - 1;
    let mut counts = vec![0usize; bins];
    for &v in samples {
        if !v.is_finite() {
            return Err(Error::NonFinite("histogram sample"));
        }
        // partition_point gives the count of edges <= v; shift to a bin index
        // and clamp the out-of-range cases into the extreme bins.
        let pos = edges.partition_point(|&e| e <= v);
        let bin = pos.saturating_sub(1).min(bins - 1);
        counts[bin] += 1;
    }
    let denom = samples.len() as f64 + bins as f64 * smoothing;
    let probs = counts
        .iter()
        .map(|&c| (c as f64 + smoothing) / denom)
        .collect();
    Ok(Histogram {
        bin_edges: edges.to_vec(),
        probs,
    })
}

/// `D_KL(P_T || P_S) = sum_i P_T(i) * ln(P_T(i) / P_S(i))`, natural log.
/// Requires identical bin edges and strictly positive source probabilities.
pub fn kl_divergence(p_target: &Histogram, p_source: &Histogram) -> Result<f64> {
    if p_target.bin_edges != p_source.bin_edges {
        return Err(Error::EdgesMismatch);
    }
    let mut total = 0.0;
    for (&pt, &ps) in p_target.probs.iter().zip(&p_source.probs) {
        if ps <= 0.0 {
            return Err(Error::EmptySamples(
                "source histogram has a zero-probability bin",
            ));
        }
        if pt > 0.0 {
            total += pt * (pt / ps).ln();
        }
    }
    // Gibbs' inequality guarantees the true value is nonnegative; rounding can
    // leave a tiny negative residue for near-identical inputs.
    Ok(total.max(0.0))
}

/// Per-filter divergence entry.
#[derive(Debug, Clone)]
pub struct FilterDivergence {
    pub kl: f64,
    /// Proxy A-distance; filled by the analysis path, absent when only KL
    /// scores were requested.
    pub a_distance: Option<f64>,
    /// Set when the filter response was constant on both domains, which
    /// forces the KL score to zero by convention.
    pub degenerate: bool,
}

/// Divergence scores for every filter of one layer.
#[derive(Debug, Clone)]
pub struct DivergenceReport {
    pub filters: Vec<FilterDivergence>,
    pub n_source_samples: usize,
    pub n_target_samples: usize,
}

impl DivergenceReport {
    pub fn n_filters(&self) -> usize {
        self.filters.len()
    }

    pub fn kl_scores(&self) -> Vec<f64> {
        self.filters.iter().map(|f| f.kl).collect()
    }

    /// CSV export: `filter,kl,a_distance,n_src,n_tgt`, 6 decimal places.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("filter,kl,a_distance,n_src,n_tgt\n");
        for (j, f) in self.filters.iter().enumerate() {
            out.push_str(&format!(
                "{},{:.6},{:.6},{},{}\n",
                j,
                f.kl,
                f.a_distance.unwrap_or(f64::NAN),
                self.n_source_samples,
                self.n_target_samples,
            ));
        }
        out
    }
}

/// Shared per-filter histograms kept around for reuse by the selection step.
#[derive(Debug, Clone)]
pub struct FilterHistograms {
    /// Source-response histogram per filter; `None` for degenerate filters.
    pub source: Vec<Option<Histogram>>,
    /// Target-response histogram per filter, same edges as `source`.
    pub target: Vec<Option<Histogram>>,
}

/// Equal-width shared bin edges over the combined source and target range of
/// each filter, then `kl(target || source)` per filter.
pub fn filter_kl_scores(
    source: &FilterSampleMatrix,
    target: &FilterSampleMatrix,
    bins: usize,
    smoothing: f64,
) -> Result<DivergenceReport> {
    filter_distributions(source, target, bins, smoothing).map(|(report, _)| report)
}

/// Same as [`filter_kl_scores`] but also returns the per-filter histograms.
pub fn filter_distributions(
    source: &FilterSampleMatrix,
    target: &FilterSampleMatrix,
    bins: usize,
    smoothing: f64,
) -> Result<(DivergenceReport, FilterHistograms)> {
    if source.n_cols() != target.n_cols() {
        return Err(Error::DimMismatch {
            axis: "n_filters",
            expected: source.n_cols(),
            actual: target.n_cols(),
        });
    }
    if source.n_rows() == 0 || target.n_rows() == 0 {
        return Err(Error::EmptySamples("filter sample matrix"));
    }
    if bins < 1 {
        return Err(Error::BadBinEdges);
    }
    let p = source.n_cols();
    let per_filter: Vec<Result<(FilterDivergence, Option<Histogram>, Option<Histogram>)>> = (0..p)
        .into_par_iter()
        .map(|j| {
            let src = source.column(j);
            let tgt = target.column(j);
            let (lo, hi) = combined_range(&src, &tgt)?;
            if lo == hi {
                return Ok((
                    FilterDivergence {
                        kl: 0.0,
                        a_distance: None,
                        degenerate: true,
                    },
                    None,
                    None,
                ));
            }
            let edges = equal_width_edges(lo, hi, bins);
            let hs = build_histogram(&src, &edges, smoothing)?;
            let ht = build_histogram(&tgt, &edges, smoothing)?;
            let kl = kl_divergence(&ht, &hs)?;
            Ok((
                FilterDivergence {
                    kl,
                    a_distance: None,
                    degenerate: false,
                },
                Some(hs),
                Some(ht),
            ))
        })
        .collect();

    let mut filters = Vec::with_capacity(p);
    let mut src_hists = Vec::with_capacity(p);
    let mut tgt_hists = Vec::with_capacity(p);
    for item in per_filter {
        let (f, hs, ht) = item?;
        filters.push(f);
        src_hists.push(hs);
        tgt_hists.push(ht);
    }
    Ok((
        DivergenceReport {
            filters,
            n_source_samples: source.n_rows(),
            n_target_samples: target.n_rows(),
        },
        FilterHistograms {
            source: src_hists,
            target: tgt_hists,
        },
    ))
}

fn combined_range(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in a.iter().chain(b) {
        if !v.is_finite() {
            return Err(Error::NonFinite("filter response"));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok((lo, hi))
}

pub fn equal_width_edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let step = (hi - lo) / bins as f64;
    let mut edges: Vec<f64> = (0..=bins).map(|i| lo + step * i as f64).collect();
    edges[bins] = hi; // avoid the top edge landing below hi through rounding
    edges
}

/// Minimum number of feature vectors per domain for the discriminator.
pub const A_DISTANCE_MIN_SAMPLES: usize = 4;

const A_DISTANCE_EPOCHS: usize = 200;
const A_DISTANCE_C: f64 = 1.0;

/// Proxy A-distance between two clouds of per-image feature vectors.
///
/// Each domain is split 50/50 by a seeded shuffle; a linear hinge-loss
/// discriminator is trained full-batch on the first halves (source labeled
/// 0, target labeled 1) and evaluated on the held-out halves. The balanced
/// held-out error eps maps to `d_A = 2 * (1 - 2 * eps)`.
pub fn a_distance(source: &[Vec<f64>], target: &[Vec<f64>], seed: u64) -> Result<f64> {
    for (name, set) in [("source", source), ("target", target)] {
        if set.len() < A_DISTANCE_MIN_SAMPLES {
            let _ = name;
            return Err(Error::TooFewSamples {
                needed: A_DISTANCE_MIN_SAMPLES,
                got: set.len(),
            });
        }
    }
    let dim = source[0].len();
    if dim == 0 || target[0].len() != dim {
        return Err(Error::DimMismatch {
            axis: "feature dimension",
            expected: dim.max(1),
            actual: target.first().map_or(0, |v| v.len()),
        });
    }

    let (src_train, src_test) = split_half(source.len(), seed ^ 0x5eed_0001);
    let (tgt_train, tgt_test) = split_half(target.len(), seed ^ 0x5eed_0002);

    // Pooled mean/std over the training halves keeps the optimizer scale-free.
    let mut mean = vec![0.0; dim];
    let mut count = 0usize;
    for &i in src_train.iter() {
        add_assign(&mut mean, &source[i]);
        count += 1;
    }
    for &i in tgt_train.iter() {
        add_assign(&mut mean, &target[i]);
        count += 1;
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut var = vec![0.0; dim];
    for &i in src_train.iter() {
        accumulate_sq_dev(&mut var, &source[i], &mean);
    }
    for &i in tgt_train.iter() {
        accumulate_sq_dev(&mut var, &target[i], &mean);
    }
    let std: Vec<f64> = var
        .iter()
        .map(|v| (v / count as f64).sqrt().max(1e-12))
        .collect();

    let standardize = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .zip(&mean)
            .zip(&std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    };

    let mut train: Vec<(Vec<f64>, f64)> = Vec::with_capacity(src_train.len() + tgt_train.len());
    for &i in &src_train {
        train.push((standardize(&source[i]), -1.0));
    }
    for &i in &tgt_train {
        train.push((standardize(&target[i]), 1.0));
    }

    // Full-batch subgradient descent on 0.5*|w|^2 + C * mean hinge.
    let n = train.len() as f64;
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    for epoch in 0..A_DISTANCE_EPOCHS {
        let eta = 1.0 / (1.0 + 0.1 * epoch as f64);
        let mut gw: Vec<f64> = w.clone();
        let mut gb = 0.0;
        for (x, y) in &train {
            let margin = y * (dot(&w, x) + b);
            if margin < 1.0 {
                for (g, xv) in gw.iter_mut().zip(x) {
                    *g -= A_DISTANCE_C * y * xv / n;
                }
                gb -= A_DISTANCE_C * y / n;
            }
        }
        for (wv, g) in w.iter_mut().zip(&gw) {
            *wv -= eta * g;
        }
        b -= eta * gb;
    }

    // Balanced error on the held-out halves: score > 0 predicts target.
    let mut src_wrong = 0usize;
    for &i in &src_test {
        if dot(&w, &standardize(&source[i])) + b > 0.0 {
            src_wrong += 1;
        }
    }
    let mut tgt_wrong = 0usize;
    for &i in &tgt_test {
        if dot(&w, &standardize(&target[i])) + b <= 0.0 {
            tgt_wrong += 1;
        }
    }
    let eps = 0.5 * (src_wrong as f64 / src_test.len() as f64)
        + 0.5 * (tgt_wrong as f64 / tgt_test.len() as f64);
    Ok(2.0 * (1.0 - 2.0 * eps))
}

fn split_half(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let cut = n / 2;
    let train = idx[..cut].to_vec();
    let test = idx[cut..].to_vec();
    (train, test)
}

fn add_assign(acc: &mut [f64], v: &[f64]) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += x;
    }
}

fn accumulate_sq_dev(acc: &mut [f64], v: &[f64], mean: &[f64]) {
    for ((a, x), m) in acc.iter_mut().zip(v).zip(mean) {
        let d = x - m;
        *a += d * d;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Project points onto their top two principal components (power iteration
/// with deflation; deterministic for a fixed seed).
pub fn pca_project_2d(points: &[Vec<f64>], seed: u64) -> Result<Vec<(f64, f64)>> {
    if points.is_empty() {
        return Err(Error::EmptySamples("pca input"));
    }
    let dim = points[0].len();
    let n = points.len() as f64;
    let mut mean = vec![0.0; dim];
    for p in points {
        add_assign(&mut mean, p);
    }
    for m in &mut mean {
        *m /= n;
    }
    let centered: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut components: Vec<Vec<f64>> = Vec::new();
    for _ in 0..2.min(dim) {
        let mut v: Vec<f64> = (0..dim)
            .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
            .collect();
        normalize(&mut v);
        for _ in 0..100 {
            // Covariance-vector product without forming the matrix.
            let mut next = vec![0.0; dim];
            for row in &centered {
                let proj = dot(row, &v);
                for (nv, x) in next.iter_mut().zip(row) {
                    *nv += proj * x / n;
                }
            }
            for prev in &components {
                let c = dot(&next, prev);
                for (nv, pv) in next.iter_mut().zip(prev) {
                    *nv -= c * pv;
                }
            }
            if normalize(&mut next) < 1e-300 {
                break;
            }
            v = next;
        }
        components.push(v);
    }

    let zero = vec![0.0; dim];
    let c0 = components.first().unwrap_or(&zero);
    let c1 = components.get(1).unwrap_or(&zero);
    Ok(centered
        .iter()
        .map(|row| (dot(row, c0), dot(row, c1)))
        .collect())
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}
