use serde::{Deserialize, Serialize};

/// Dense `Q[s][a]` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularQ {
    pub q: Vec<Vec<f64>>,
}

impl TabularQ {
    pub fn zeros(states: usize, actions: usize) -> Self {
        Self {
            q: vec![vec![0.0; actions]; states],
        }
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.q[s][a]
    }

    pub fn max_value(&self, s: usize) -> f64 {
        self.q[s].iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn greedy(&self, s: usize) -> usize {
        let row = &self.q[s];
        (1..row.len()).fold(0, |best, a| if row[a] > row[best] { a } else { best })
    }
}

/// `Q(s,a) += lr * (r + gamma * max_a' Q(s',a') - Q(s,a))`, with a zero
/// bootstrap when `next` is `None` (terminal).
pub fn q_learning_tabular_update(
    q: &mut TabularQ,
    s: usize,
    a: usize,
    r: f64,
    next: Option<usize>,
    gamma: f64,
    lr: f64,
) {
    let boot = next.map_or(0.0, |s2| q.max_value(s2));
    let target = r + gamma * boot;
    q.q[s][a] += lr * (target - q.q[s][a]);
}
