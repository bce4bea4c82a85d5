//! Adam ascent and k-means initialization for inducing points.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adam with bias correction, maximizing. Moments are kept per coordinate of
/// an `M x d` parameter matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(rows: usize, cols: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![vec![0.0; cols]; rows],
            v: vec![vec![0.0; cols]; rows],
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Move `params` uphill along `grad` with learning rate `lr`.
    pub fn ascend(&mut self, params: &mut [Vec<f64>], grad: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, row) in params.iter_mut().enumerate() {
            for (k, x) in row.iter_mut().enumerate() {
                let g = grad[i][k];
                let m = &mut self.m[i][k];
                let v = &mut self.v[i][k];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *x += lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    centers
        .iter()
        .enumerate()
        .map(|(i, c)| (i, dist2(p, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// Greedy farthest-point selection, starting from a random point.
pub fn farthest_point_init<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    if points.len() < k {
        return Err(Error::Size { min: k, got: points.len() });
    }
    let mut centers = vec![points[rng.gen_range(0..points.len())].clone()];
    while centers.len() < k {
        let (far, _) = points
            .iter()
            .enumerate()
            .map(|(i, p)| (i, nearest(p, &centers).1))
            .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        centers.push(points[far].clone());
    }
    Ok(centers)
}

const KMEANS_RESTARTS: usize = 10;
const LLOYD_ITERATIONS: usize = 100;

/// k-means++ seeding followed by Lloyd iterations, restarted
/// `KMEANS_RESTARTS` times keeping the lowest within-cluster sum of squares.
/// With fewer than four points per cluster it falls back to farthest-point
/// selection.
pub fn kmeans_init<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    if points.len() < k {
        return Err(Error::Size { min: k, got: points.len() });
    }
    if points.len() < 4 * k {
        return farthest_point_init(points, k, rng);
    }
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let centers = lloyd(points, kmeans_pp(points, k, rng));
        let sse: f64 = points.iter().map(|p| nearest(p, &centers).1).sum();
        if best.as_ref().is_none_or(|(b, _)| sse < *b) {
            best = Some((sse, centers));
        }
    }
    Ok(best.expect("at least one restart").1)
}

fn kmeans_pp<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.gen_range(0..points.len())].clone()];
    while centers.len() < k {
        let d2: Vec<f64> = points.iter().map(|p| nearest(p, &centers).1).collect();
        let total: f64 = d2.iter().sum();
        if total == 0.0 {
            centers.push(points[rng.gen_range(0..points.len())].clone());
            continue;
        }
        let mut u = rng.gen::<f64>() * total;
        let mut pick = points.len() - 1;
        for (i, w) in d2.iter().enumerate() {
            if u < *w {
                pick = i;
                break;
            }
            u -= w;
        }
        centers.push(points[pick].clone());
    }
    centers
}

fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let (k, d) = (centers.len(), points[0].len());
    for _ in 0..LLOYD_ITERATIONS {
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for p in points {
            let (c, _) = nearest(p, &centers);
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut moved = false;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let new: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            if new != centers[c] {
                moved = true;
                centers[c] = new;
            }
        }
        if !moved {
            break;
        }
    }
    centers
}
