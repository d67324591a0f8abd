//! Shared training plumbing: per-step reports and the optimizer step.

use std::io::Write;
use std::path::Path;

use crate::autodiff::{AdamState, Tape, Var};
use crate::error::Result;
use crate::policy::Policy;

/// One logged optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRow {
    pub step: usize,
    pub loss: f64,
    pub sft_loss: f64,
    pub mean_terminal_reward: Option<f64>,
    pub buffer_size: usize,
    pub l1_to_target: Option<f64>,
}

/// Per-step training log, written as CSV with the loss column named after
/// the method (`mean_<name>_loss`).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub loss_name: String,
    pub rows: Vec<TrainRow>,
}

impl TrainReport {
    pub fn new(loss_name: &str) -> Self {
        Self { loss_name: loss_name.to_string(), rows: Vec::new() }
    }

    pub fn header(&self) -> [String; 6] {
        [
            "step".into(),
            format!("mean_{}_loss", self.loss_name),
            "mean_sft_loss".into(),
            "mean_terminal_reward".into(),
            "buffer_size".into(),
            "l1_to_target".into(),
        ]
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(self.header())?;
        for r in &self.rows {
            out.write_record([
                r.step.to_string(),
                r.loss.to_string(),
                r.sft_loss.to_string(),
                r.mean_terminal_reward.map(|x| x.to_string()).unwrap_or_default(),
                r.buffer_size.to_string(),
                r.l1_to_target.map(|x| x.to_string()).unwrap_or_default(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Last reported proportionality diagnostic.
    pub fn final_l1(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.l1_to_target)
    }
}

/// Builds a loss on a tape over the policy's parameters and takes one Adam
/// step. `build` returns the loss followed by any auxiliary nodes whose
/// values are reported back.
pub(crate) fn descend<F>(policy: &mut Policy, adam: &mut AdamState, build: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&mut Tape<'_>, &Policy) -> Result<(Var, Vec<Var>)>,
{
    let (value, aux, grad) = {
        let mut tape = Tape::new(policy.params());
        let (loss, aux) = build(&mut tape, policy)?;
        let aux: Vec<f64> = aux.into_iter().map(|v| tape.value(v)).collect();
        (tape.value(loss), aux, tape.backward(loss)?)
    };
    adam.resize(policy.param_len());
    adam.step_sparse(policy.params_mut(), &grad)?;
    Ok((value, aux))
}
