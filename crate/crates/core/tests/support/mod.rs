//! Reference implementations written directly from the trading equations,
//! independent of the library code. Shared by the integration tests and the
//! acceptance suite.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Every direction vector for `assets` assets, in index order.
pub fn actions(assets: usize) -> Vec<Vec<i8>> {
    let mut out = vec![vec![]];
    for _ in 0..assets {
        let mut next = Vec::new();
        for prefix in &out {
            for d in [-1i8, 0, 1] {
                let mut a: Vec<i8> = prefix.clone();
                a.push(d);
                next.push(a);
            }
        }
        out = next;
    }
    out
}

pub fn index(a: &[i8]) -> usize {
    a.iter().fold(0, |acc, d| acc * 3 + (*d + 1) as usize)
}

#[derive(Debug, Clone)]
pub struct Market {
    pub value: f64,
    pub weights: Vec<f64>,
    pub delta: f64,
    pub cost_sell: f64,
    pub cost_buy: f64,
}

impl Market {
    pub fn sells(a: &[i8]) -> f64 {
        a.iter().filter(|d| **d == -1).count() as f64
    }

    pub fn buys(a: &[i8]) -> f64 {
        a.iter().filter(|d| **d == 1).count() as f64
    }

    pub fn feasible(&self, a: &[i8]) -> bool {
        for (i, d) in a.iter().enumerate() {
            if *d == -1 && self.weights[i + 1] * self.value < self.delta {
                return false;
            }
        }
        let cash = self.weights[0] * self.value
            + self.delta * (1.0 - self.cost_sell) * Self::sells(a)
            - self.delta * (1.0 + self.cost_buy) * Self::buys(a);
        cash >= 0.0
    }

    /// Brute-force mapping: unsellable sells become holds; if still
    /// infeasible, the feasible relaxation (components switched to hold)
    /// closest in Hamming distance, highest q, lowest index.
    pub fn map(&self, a: &[i8], q: &[f64]) -> Vec<i8> {
        let relaxed: Vec<i8> = a
            .iter()
            .enumerate()
            .map(|(i, d)| {
                if *d == -1 && self.weights[i + 1] * self.value < self.delta {
                    0
                } else {
                    *d
                }
            })
            .collect();
        if self.feasible(&relaxed) {
            return relaxed;
        }
        let mut best: Option<(usize, f64, usize, Vec<i8>)> = None;
        for b in actions(a.len()) {
            let reachable = b.iter().zip(&relaxed).all(|(x, y)| *x == *y || *x == 0);
            if !reachable || !self.feasible(&b) {
                continue;
            }
            let dist = b.iter().zip(&relaxed).filter(|(x, y)| x != y).count();
            let idx = index(&b);
            let better = match &best {
                None => true,
                Some((d, v, i, _)) => {
                    dist < *d || (dist == *d && (q[idx] > *v || (q[idx] == *v && idx < *i)))
                }
            };
            if better {
                best = Some((dist, q[idx], idx, b));
            }
        }
        best.expect("all-hold relaxation is feasible").3
    }
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub cost_rate: f64,
    pub post_value: f64,
    pub aux: Vec<f64>,
    pub post_weights: Vec<f64>,
    pub static_next: f64,
    pub next_value: f64,
    pub next_weights: Vec<f64>,
    pub reward: f64,
}

/// Rebalance by `a`, then move the market by `kc`.
pub fn transition(m: &Market, a: &[i8], kc: &[f64]) -> Transition {
    let step = m.delta / m.value;
    let cost_rate = step * (m.cost_sell * Market::sells(a) + m.cost_buy * Market::buys(a));
    let post_value = m.value * (1.0 - cost_rate);
    let mut aux = m.weights.clone();
    for (i, d) in a.iter().enumerate() {
        aux[i + 1] += step * *d as f64;
    }
    aux[0] +=
        step * ((1.0 - m.cost_sell) * Market::sells(a) - (1.0 + m.cost_buy) * Market::buys(a));
    let total: f64 = aux.iter().sum();
    let post_weights: Vec<f64> = aux.iter().map(|w| w / total).collect();
    let growth: Vec<f64> = std::iter::once(1.0)
        .chain(kc.iter().map(|k| 1.0 + k))
        .collect();
    let dot = |w: &[f64]| w.iter().zip(&growth).map(|(x, g)| x * g).sum::<f64>();
    let static_next = m.value * dot(&m.weights);
    let moved = dot(&post_weights);
    let next_value = post_value * moved;
    let next_weights = post_weights
        .iter()
        .zip(&growth)
        .map(|(w, g)| w * g / moved)
        .collect();
    Transition {
        cost_rate,
        post_value,
        aux,
        post_weights,
        static_next,
        next_value,
        next_weights,
        reward: (next_value - static_next) / static_next,
    }
}

pub fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Weights on the simplex with a fair share of exact zeros.
pub fn random_weights(rng: &mut ChaCha8Rng, assets: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..=assets)
        .map(|_| {
            if rng.gen_bool(0.2) {
                0.0
            } else {
                rng.gen_range(0.0..1.0)
            }
        })
        .collect();
    if w.iter().all(|x| *x == 0.0) {
        w[0] = 1.0;
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

/// Probability of each recency rank (0 = most recent) under the truncated
/// geometric law.
pub fn truncated_geometric(beta: f64, n: usize) -> Vec<f64> {
    let norm = 1.0 - (1.0 - beta).powi(n as i32);
    (0..n)
        .map(|k| beta * (1.0 - beta).powi(k as i32) / norm)
        .collect()
}

/// Growth of the value series obtained by compounding its daily returns, in percent.
pub fn compounded_return(values: &[f64]) -> f64 {
    let growth: f64 = values
        .windows(2)
        .map(|w| 1.0 + (w[1] - w[0]) / w[0])
        .product();
    (growth - 1.0) * 100.0
}
