use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One recorded step. `pi` is the categorical used to draw `state`; both
/// are `M` rows over the `N + 1` states. Step 0 is the initial all-mask
/// state, for which `pi` equals `state`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub step: usize,
    pub time: f64,
    pub pi: Vec<Vec<f64>>,
    pub state: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    /// Writes one JSON record per step.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for s in &self.steps {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(text: &str) -> Result<Self> {
        let steps = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { steps })
    }

    /// Every recorded row is a probability vector within `tol`.
    pub fn on_simplex(&self, tol: f64) -> bool {
        self.steps.iter().all(|s| {
            s.pi.iter()
                .chain(&s.state)
                .all(|row| row.iter().all(|&v| v >= -tol) && (row.iter().sum::<f64>() - 1.0).abs() <= tol)
        })
    }
}
