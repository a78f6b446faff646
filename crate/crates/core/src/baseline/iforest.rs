//! Isolation forest over small dense feature vectors.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_TREES: usize = 100;
pub const MAX_SUBSAMPLE: usize = 256;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Average path length of an unsuccessful BST search over `n` points.
pub fn average_path_length(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let n = n as f64;
            2.0 * ((n - 1.0).ln() + EULER_GAMMA) - 2.0 * (n - 1.0) / n
        }
    }
}

enum Node {
    Leaf {
        size: usize,
    },
    Split {
        feature: usize,
        value: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

fn grow(points: &[&[f64]], depth: usize, limit: usize, rng: &mut ChaCha8Rng) -> Node {
    if depth >= limit || points.len() <= 1 {
        return Node::Leaf { size: points.len() };
    }
    let dims = points[0].len();
    let ranges: Vec<(usize, f64, f64)> = (0..dims)
        .filter_map(|d| {
            let (lo, hi) = points
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                    (lo.min(p[d]), hi.max(p[d]))
                });
            (lo < hi).then_some((d, lo, hi))
        })
        .collect();
    if ranges.is_empty() {
        return Node::Leaf { size: points.len() };
    }
    let (feature, lo, hi) = ranges[rng.gen_range(0..ranges.len())];
    let value = rng.gen_range(lo..hi);
    let (l, r): (Vec<&[f64]>, Vec<&[f64]>) = points.iter().partition(|p| p[feature] < value);
    Node::Split {
        feature,
        value,
        left: Box::new(grow(&l, depth + 1, limit, rng)),
        right: Box::new(grow(&r, depth + 1, limit, rng)),
    }
}

fn path_length(node: &Node, x: &[f64], depth: usize) -> f64 {
    match node {
        Node::Leaf { size } => depth as f64 + average_path_length(*size),
        Node::Split {
            feature,
            value,
            left,
            right,
        } => {
            let next = if x[*feature] < *value { left } else { right };
            path_length(next, x, depth + 1)
        }
    }
}

pub struct IsolationForest {
    trees: Vec<Node>,
    subsample: usize,
}

impl IsolationForest {
    /// Builds `trees` trees, each on `min(256, n)` points drawn without
    /// replacement, with depth limit `ceil(log2(subsample))`.
    pub fn fit(points: &[Vec<f64>], trees: usize, seed: u64) -> Self {
        let subsample = points.len().min(MAX_SUBSAMPLE);
        let limit = (subsample.max(2) as f64).log2().ceil() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trees = (0..trees)
            .map(|_| {
                let picked: Vec<&[f64]> = sample(&mut rng, points.len(), subsample)
                    .into_iter()
                    .map(|i| points[i].as_slice())
                    .collect();
                grow(&picked, 0, limit, &mut rng)
            })
            .collect();
        Self { trees, subsample }
    }

    /// Mean path length of `x` over the forest.
    pub fn mean_path(&self, x: &[f64]) -> f64 {
        let total: f64 = self.trees.iter().map(|t| path_length(t, x, 0)).sum();
        total / self.trees.len().max(1) as f64
    }

    /// `2^(-E[h(x)] / c(psi))`. With fewer than two points nothing can be
    /// isolated and every score is 0.5.
    pub fn score(&self, x: &[f64]) -> f64 {
        let c = average_path_length(self.subsample);
        if c == 0.0 || self.trees.is_empty() {
            return 0.5;
        }
        2f64.powf(-self.mean_path(x) / c)
    }
}
