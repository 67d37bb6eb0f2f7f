use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ActionId, Dataset, Observation, Result, SimError, WorldConfig, NUM_ACTIONS, OBS_DIMS};

/// Per-dimension conditional distributions `P(o'_d | o_d, a, donated)`.
///
/// `tables[d][row][v']` with `row = (o_d * NUM_ACTIONS + a) * 2 + donated`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsTables {
    pub cardinalities: [usize; OBS_DIMS],
    pub alpha: f64,
    pub tables: Vec<Vec<Vec<f64>>>,
}

#[inline]
fn row_index(value: usize, action: ActionId, donated: bool) -> usize {
    (value * NUM_ACTIONS + action.index()) * 2 + donated as usize
}

impl ObsTables {
    pub fn rows_per_dim(&self, d: usize) -> usize {
        self.cardinalities[d] * NUM_ACTIONS * 2
    }

    /// Builds tables from explicit rows, checking every row is a distribution.
    pub fn from_rows(
        cardinalities: [usize; OBS_DIMS],
        alpha: f64,
        tables: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let t = Self {
            cardinalities,
            alpha,
            tables,
        };
        t.validate()?;
        Ok(t)
    }

    /// Point mass on the current value for every context.
    pub fn stay(cardinalities: [usize; OBS_DIMS]) -> Self {
        let tables = (0..OBS_DIMS)
            .map(|d| {
                let k = cardinalities[d];
                (0..k * NUM_ACTIONS * 2)
                    .map(|row| {
                        let mut p = vec![0.0; k];
                        p[row / (NUM_ACTIONS * 2)] = 1.0;
                        p
                    })
                    .collect()
            })
            .collect();
        Self {
            cardinalities,
            alpha: 0.0,
            tables,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tables.len() != OBS_DIMS {
            return Err(SimError::Config(format!("expected {OBS_DIMS} tables")));
        }
        for d in 0..OBS_DIMS {
            let k = self.cardinalities[d];
            if self.tables[d].len() != self.rows_per_dim(d) {
                return Err(SimError::Config(format!(
                    "table {} has wrong row count",
                    d + 1
                )));
            }
            for (r, row) in self.tables[d].iter().enumerate() {
                let sum: f64 = row.iter().sum();
                if row.len() != k || row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                    return Err(SimError::Config(format!(
                        "table {} row {r} is not a distribution (sum {sum})",
                        d + 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn row(&self, d: usize, value: usize, action: ActionId, donated: bool) -> &[f64] {
        &self.tables[d][row_index(value, action, donated)]
    }

    pub fn sample_dim<R: Rng>(
        &self,
        d: usize,
        value: usize,
        action: ActionId,
        donated: bool,
        rng: &mut R,
    ) -> u16 {
        let row = self.row(d, value, action, donated);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (v, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return v as u16;
            }
        }
        // Rounding left a sliver above the last cumulative sum.
        row.iter().rposition(|&p| p > 0.0).unwrap_or(0) as u16
    }

    /// Samples each dimension independently given `(o_d, a, donated)`.
    pub fn sample_next<R: Rng>(
        &self,
        o: &Observation,
        action: ActionId,
        donated: bool,
        rng: &mut R,
    ) -> Observation {
        let mut next = [0u16; OBS_DIMS];
        for (d, slot) in next.iter_mut().enumerate() {
            *slot = self.sample_dim(d, o.get(d), action, donated, rng);
        }
        Observation(next)
    }
}

/// Maximum-likelihood tables with add-`alpha` smoothing per
/// `(o_d, a, 1{r > 0})` context. Contexts never observed get the uniform row.
pub fn fit_observation_tables(ds: &Dataset, config: &WorldConfig, alpha: f64) -> Result<ObsTables> {
    config.validate()?;
    if !(alpha >= 0.0) {
        return Err(SimError::Config(format!(
            "smoothing alpha must be >= 0, got {alpha}"
        )));
    }
    let cards = config.cardinalities;
    let mut counts: Vec<Vec<Vec<f64>>> = (0..OBS_DIMS)
        .map(|d| vec![vec![0.0; cards[d]]; cards[d] * NUM_ACTIONS * 2])
        .collect();
    for traj in ds.trajectories() {
        for t in 0..traj.actions.len() {
            let (o, next) = (&traj.observations[t], &traj.observations[t + 1]);
            let donated = traj.rewards[t] > 0.0;
            for d in 0..OBS_DIMS {
                counts[d][row_index(o.get(d), traj.actions[t], donated)][next.get(d)] += 1.0;
            }
        }
    }
    let tables = counts
        .into_iter()
        .map(|rows| {
            rows.into_iter()
                .map(|row| {
                    let k = row.len() as f64;
                    let total: f64 = row.iter().sum();
                    if total == 0.0 {
                        vec![1.0 / k; row.len()]
                    } else {
                        let denom = total + alpha * k;
                        row.iter().map(|c| (c + alpha) / denom).collect()
                    }
                })
                .collect()
        })
        .collect();
    ObsTables::from_rows(cards, alpha, tables)
}
