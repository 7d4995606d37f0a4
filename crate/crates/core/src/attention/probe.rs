//! Timing and memory probe for the attention kernels.
//!
//! Time covers the normalization and aggregation stage on precomputed
//! weights, which is the part every kernel shares. Weight generation is left
//! out: the d -> d*d output layer of Ψ alone costs O(k d^3). Memory is the
//! tape size of a full forward pass, weight networks included.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{
    matrix_aggregate, scaled_dot_attention, vector_aggregate, AttentionKind, AttentionLayer, WeightLayout,
};
use super::neighborhood::Neighborhood;
use crate::diffcore::{Graph, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::spatial::Point3;

#[derive(Clone, Debug)]
pub struct ProbeConfig {
    /// Raised to k when smaller.
    pub anchors: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            anchors: 64,
            reps: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub kind: AttentionKind,
    pub k: usize,
    pub d: usize,
    /// Fastest of the timed repetitions.
    pub time_ns: u128,
    pub peak_bytes: usize,
}

/// Log-log slopes of time against d (per k) and against k (per d).
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSummary {
    pub kind: AttentionKind,
    pub d_slopes: Vec<(usize, f64)>,
    pub k_slopes: Vec<(usize, f64)>,
}

impl ProbeSummary {
    pub fn from_rows(kind: AttentionKind, rows: &[ProbeRow]) -> Self {
        let mine: Vec<&ProbeRow> = rows.iter().filter(|r| r.kind == kind).collect();
        let mut ks: Vec<usize> = mine.iter().map(|r| r.k).collect();
        let mut ds: Vec<usize> = mine.iter().map(|r| r.d).collect();
        ks.sort_unstable();
        ks.dedup();
        ds.sort_unstable();
        ds.dedup();
        let slope_over = |pick: &dyn Fn(&ProbeRow) -> Option<usize>| {
            let pts: Vec<(f64, f64)> = mine
                .iter()
                .filter_map(|r| pick(r).map(|x| (x as f64, r.time_ns.max(1) as f64)))
                .collect();
            if pts.len() < 2 {
                return None;
            }
            let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            Some(fit_slope(&x, &y))
        };
        let d_slopes = ks
            .iter()
            .filter_map(|&k| slope_over(&|r| (r.k == k).then_some(r.d)).map(|s| (k, s)))
            .collect();
        let k_slopes = ds
            .iter()
            .filter_map(|&d| slope_over(&|r| (r.d == d).then_some(r.k)).map(|s| (d, s)))
            .collect();
        Self {
            kind,
            d_slopes,
            k_slopes,
        }
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("sized to shape")
}

fn random_neighborhood(rng: &mut ChaCha8Rng, anchors: usize, k: usize) -> Result<Neighborhood> {
    let pts: Vec<Point3> = (0..anchors).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    Neighborhood::knn(&pts, k, Default::default())
}

/// Times the aggregation stage once.
fn time_stage(kind: AttentionKind, feats: &Tensor, weights: &Tensor, nbr: &Neighborhood) -> Result<u128> {
    let mut g = Graph::new();
    let f = g.constant(feats.clone());
    let w = g.constant(weights.clone());
    let start = Instant::now();
    let out = match kind {
        AttentionKind::ScalarDot => scaled_dot_attention(&mut g, f, nbr)?,
        AttentionKind::Vector => vector_aggregate(&mut g, f, nbr, w)?,
        AttentionKind::PointConv => matrix_aggregate(&mut g, f, nbr, w, WeightLayout::Full, super::MatrixNorm::None)?,
        other => {
            let norm = other.matrix_norm().expect("matrix kind");
            matrix_aggregate(&mut g, f, nbr, w, WeightLayout::Full, norm)?
        }
    };
    let elapsed = start.elapsed().as_nanos();
    std::hint::black_box(g.value(out).data()[0]);
    Ok(elapsed)
}

fn tape_bytes(kind: AttentionKind, feats: &Tensor, nbr: &Neighborhood, d: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let layer = AttentionLayer::new(&mut store, "probe", kind, d, &mut rng)?;
    let mut g = Graph::new();
    let params = store.bind_frozen(&mut g);
    let f = g.constant(feats.clone());
    layer.forward(&mut g, &params, f, nbr)?;
    Ok(g.tape_bytes())
}

/// One row per `(k, d)` combination.
pub fn complexity_probe(kind: AttentionKind, ks: &[usize], ds: &[usize], cfg: &ProbeConfig) -> Result<Vec<ProbeRow>> {
    if ks.is_empty() || ds.is_empty() || cfg.reps == 0 || cfg.anchors == 0 {
        return Err(Error::invalid("complexity probe needs nonempty ranges and reps"));
    }
    let mut rows = Vec::with_capacity(ks.len() * ds.len());
    for &k in ks {
        for &d in ds {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((k as u64) << 32) ^ d as u64);
            let anchors = cfg.anchors.max(k);
            let nbr = random_neighborhood(&mut rng, anchors, k)?;
            let feats = random_tensor(&mut rng, &[anchors, d]);
            let pairs = nbr.pairs();
            let weights = match kind {
                AttentionKind::ScalarDot => Tensor::zeros([1]),
                AttentionKind::Vector => random_tensor(&mut rng, &[pairs, d]),
                _ => random_tensor(&mut rng, &[pairs, d, d]),
            };
            let mut best = u128::MAX;
            for _ in 0..cfg.reps {
                best = best.min(time_stage(kind, &feats, &weights, &nbr)?);
            }
            let peak_bytes = tape_bytes(kind, &feats, &nbr, d, cfg.seed)?;
            rows.push(ProbeRow {
                kind,
                k,
                d,
                time_ns: best,
                peak_bytes,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let xs = [8.0, 16.0, 32.0, 64.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(2.0)).collect();
        assert!((fit_slope(&xs, &ys) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn probe_rows_cover_grid() {
        let cfg = ProbeConfig {
            anchors: 8,
            reps: 1,
            seed: 1,
        };
        let rows = complexity_probe(AttentionKind::NormalizedMatrix, &[4, 8], &[2, 4], &cfg).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.peak_bytes > 0));
        assert!(complexity_probe(AttentionKind::Vector, &[], &[2], &cfg).is_err());
    }
}
