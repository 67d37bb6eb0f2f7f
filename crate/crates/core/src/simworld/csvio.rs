use std::collections::BTreeMap;
use std::path::Path;

use super::{
    ActionId, Dataset, Observation, Result, SimError, Trajectory, WorldConfig, HORIZON, OBS_DIMS,
};

pub const CSV_HEADER: [&str; 9] = [
    "donor_id", "t", "o1", "o2", "o3", "o4", "o5", "action", "reward",
];

const OBS_FIELDS: [&str; OBS_DIMS] = ["o1", "o2", "o3", "o4", "o5"];

fn io_err(path: &Path, e: impl ToString) -> SimError {
    SimError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

struct Row {
    t: usize,
    obs: Observation,
    action: Option<ActionId>,
    reward: Option<f64>,
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, line: u64) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let field = CSV_HEADER[idx];
    let raw = rec.get(idx).ok_or(SimError::Csv {
        line,
        field,
        msg: "missing".into(),
    })?;
    raw.trim().parse::<T>().map_err(|e| SimError::Csv {
        line,
        field,
        msg: format!("`{raw}`: {e}"),
    })
}

/// Reads the sequence CSV (one row per step, `t` in `1..=23`, empty action
/// and reward on the final row) into trajectories grouped by donor and
/// ordered by step.
pub fn load_sequences(path: &Path, config: &WorldConfig) -> Result<Dataset> {
    config.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    let header = reader.headers().map_err(|e| io_err(path, e))?.clone();
    if header.iter().map(str::trim).ne(CSV_HEADER.iter().copied()) {
        return Err(SimError::Csv {
            line: 1,
            field: "header",
            msg: format!("expected `{}`", CSV_HEADER.join(",")),
        });
    }
    let mut donors: BTreeMap<u64, Vec<Row>> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let donor: u64 = parse_field(&rec, 0, line)?;
        let t: usize = parse_field(&rec, 1, line)?;
        if !(1..=HORIZON).contains(&t) {
            return Err(SimError::Csv {
                line,
                field: "t",
                msg: format!("{t} outside [1, {HORIZON}]"),
            });
        }
        let mut obs = [0u16; OBS_DIMS];
        for d in 0..OBS_DIMS {
            let v: usize = parse_field(&rec, 2 + d, line)?;
            if v >= config.cardinalities[d] {
                return Err(SimError::Csv {
                    line,
                    field: OBS_FIELDS[d],
                    msg: format!("{v} outside [0, {})", config.cardinalities[d]),
                });
            }
            obs[d] = v as u16;
        }
        let action_raw = rec.get(7).unwrap_or("").trim();
        let reward_raw = rec.get(8).unwrap_or("").trim();
        let (action, reward) = if t == HORIZON {
            if !action_raw.is_empty() || !reward_raw.is_empty() {
                return Err(SimError::Csv {
                    line,
                    field: "action",
                    msg: format!("action/reward must be empty at t={HORIZON}"),
                });
            }
            (None, None)
        } else {
            let a: usize = parse_field(&rec, 7, line)?;
            let action = ActionId::new(a).map_err(|e| SimError::Csv {
                line,
                field: "action",
                msg: e.to_string(),
            })?;
            let r: f64 = parse_field(&rec, 8, line)?;
            if !(0.0..=super::MAX_REWARD).contains(&r) {
                return Err(SimError::Csv {
                    line,
                    field: "reward",
                    msg: format!("{r} outside [0, {}]", super::MAX_REWARD),
                });
            }
            (Some(action), Some(r))
        };
        donors.entry(donor).or_default().push(Row {
            t,
            obs: Observation(obs),
            action,
            reward,
        });
    }
    let mut trajectories = Vec::with_capacity(donors.len());
    for (donor_id, mut rows) in donors {
        rows.sort_by_key(|r| r.t);
        let steps: Vec<usize> = rows.iter().map(|r| r.t).collect();
        if steps != (1..=HORIZON).collect::<Vec<_>>() {
            return Err(SimError::Trajectory {
                donor: donor_id,
                msg: format!(
                    "expected steps 1..={HORIZON} exactly once, got {} rows",
                    rows.len()
                ),
            });
        }
        let traj = Trajectory {
            donor_id,
            observations: rows.iter().map(|r| r.obs).collect(),
            actions: rows.iter().filter_map(|r| r.action).collect(),
            rewards: rows.iter().filter_map(|r| r.reward).collect(),
        };
        traj.validate(config)?;
        trajectories.push(traj);
    }
    Ok(Dataset::new(trajectories, None))
}

/// Writes trajectories in the same format [`load_sequences`] reads.
pub fn save_sequences(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(CSV_HEADER).map_err(|e| io_err(path, e))?;
    for traj in dataset.trajectories() {
        for (t, o) in traj.observations.iter().enumerate() {
            let mut rec: Vec<String> = vec![traj.donor_id.to_string(), (t + 1).to_string()];
            rec.extend(o.0.iter().map(|v| v.to_string()));
            if t < traj.actions.len() {
                rec.push(traj.actions[t].index().to_string());
                rec.push(format!("{:?}", traj.rewards[t]));
            } else {
                rec.push(String::new());
                rec.push(String::new());
            }
            w.write_record(&rec).map_err(|e| io_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn donor_rows(donor: u64, action: usize) -> String {
        let mut s = String::new();
        for t in 1..=HORIZON {
            if t == HORIZON {
                s.push_str(&format!("{donor},{t},1,2,3,4,5,,\n"));
            } else {
                s.push_str(&format!(
                    "{donor},{t},1,2,3,4,{},{action},{}\n",
                    t % 12,
                    t as f64 * 0.5
                ));
            }
        }
        s
    }

    #[test]
    fn one_donor_gives_one_trajectory() {
        let f = write_tmp(&format!("{}\n{}", CSV_HEADER.join(","), donor_rows(42, 3)));
        let ds = load_sequences(f.path(), &WorldConfig::default()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.num_transitions(), 22);
        assert_eq!(ds.trajectories()[0].donor_id, 42);
        assert_eq!(ds.trajectories()[0].rewards[3], 2.0);
    }

    #[test]
    fn action_out_of_range_is_rejected() {
        let f = write_tmp(&format!("{}\n{}", CSV_HEADER.join(","), donor_rows(1, 12)));
        let err = load_sequences(f.path(), &WorldConfig::default()).unwrap_err();
        match err {
            SimError::Csv { line, field, .. } => {
                assert_eq!(field, "action");
                assert_eq!(line, 2);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn short_trajectory_is_rejected() {
        let rows: String = donor_rows(5, 1)
            .lines()
            .take(10)
            .map(|l| format!("{l}\n"))
            .collect();
        let f = write_tmp(&format!("{}\n{}", CSV_HEADER.join(","), rows));
        assert!(matches!(
            load_sequences(f.path(), &WorldConfig::default()),
            Err(SimError::Trajectory { donor: 5, .. })
        ));
    }

    #[test]
    fn malformed_number_names_line_and_field() {
        let mut body = donor_rows(7, 2);
        body = body.replacen("7,4,1,2,3,4,4", "7,4,1,x,3,4,4", 1);
        let f = write_tmp(&format!("{}\n{}", CSV_HEADER.join(","), body));
        let msg = load_sequences(f.path(), &WorldConfig::default())
            .unwrap_err()
            .to_string();
        assert!(msg.contains("line 5") && msg.contains("o2"), "{msg}");
    }

    #[test]
    fn save_then_load_is_identity() {
        let f = write_tmp(&format!(
            "{}\n{}{}",
            CSV_HEADER.join(","),
            donor_rows(9, 0),
            donor_rows(3, 11)
        ));
        let cfg = WorldConfig::default();
        let ds = load_sequences(f.path(), &cfg).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        save_sequences(out.path(), &ds).unwrap();
        assert_eq!(load_sequences(out.path(), &cfg).unwrap(), ds);
    }
}
