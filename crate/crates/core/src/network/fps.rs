//! Greedy farthest point sampling.

use crate::error::{Error, Result};
use crate::spatial::{sq_dist, Point3};

/// Picks `m` indices starting from `start`; each later pick maximizes the
/// distance to the chosen set, ties going to the lower index.
pub fn farthest_point_sample(points: &[Point3], m: usize, start: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m > n {
        return Err(Error::invalid(format!("cannot pick {m} of {n} points")));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    if start >= n {
        return Err(Error::invalid(format!(
            "start index {start} out of range for {n} points"
        )));
    }
    let mut chosen = Vec::with_capacity(m);
    let mut dist = vec![f64::INFINITY; n];
    let mut cur = start;
    for _ in 0..m {
        chosen.push(cur);
        let p = points[cur];
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, d) in dist.iter_mut().enumerate() {
            let nd = sq_dist(&p, &points[i]);
            if nd < *d {
                *d = nd;
            }
            if *d > best.0 {
                best = (*d, i);
            }
        }
        cur = best.1;
    }
    Ok(chosen)
}
