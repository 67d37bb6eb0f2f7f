use std::io::Write;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub sl_loss: Option<f64>,
    pub td_loss: Option<f64>,
    /// Average per-step reward at evaluation checkpoints.
    pub eval_reward: Option<f64>,
}

/// Per-iteration losses and evaluation checkpoints. Wall-clock time is
/// informational and ignored by equality.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
    pub wall_clock_secs: f64,
}

impl PartialEq for TrainLog {
    fn eq(&self, other: &Self) -> bool {
        self.records == other.records
    }
}

impl TrainLog {
    pub fn push(&mut self, iteration: usize, sl_loss: Option<f64>, td_loss: Option<f64>) {
        debug_assert!(self.records.last().is_none_or(|r| r.iteration < iteration));
        self.records.push(TrainRecord {
            iteration,
            sl_loss,
            td_loss,
            eval_reward: None,
        });
    }

    pub fn set_eval(&mut self, iteration: usize, reward: f64) {
        if let Some(r) = self
            .records
            .iter_mut()
            .rev()
            .find(|r| r.iteration == iteration)
        {
            r.eval_reward = Some(reward);
        }
    }

    /// `(iteration, eval_reward)` at every evaluation checkpoint.
    pub fn checkpoints(&self) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.eval_reward.map(|e| (r.iteration, e)))
            .collect()
    }

    pub fn sl_losses(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.sl_loss).collect()
    }

    pub fn td_losses(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.td_loss).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "sl_loss", "td_loss", "eval_reward"])?;
        let cell = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                r.iteration.to_string(),
                cell(r.sl_loss),
                cell(r.td_loss),
                cell(r.eval_reward),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
