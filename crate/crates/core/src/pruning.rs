//! Depth selection by removing top blocks.
//!
//! Starting from the full pretrained backbone, fine-tune and score the
//! network; then repeatedly reload the pretrained weights, remove one more
//! top block, fine-tune and score again, for as long as the score does not
//! fall below the best score seen so far.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::micronet::{transplant, NetSnapshot, Network, NetworkSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneAttempt {
    pub blocks_removed: usize,
    /// Backbone depth the attempt was fine-tuned with.
    pub depth: usize,
    pub score: f64,
    pub epochs: usize,
    pub wall_time_s: f64,
    /// Hash of the backbone parameters the attempt started from.
    pub start_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub attempts: Vec<PruneAttempt>,
    pub selected_blocks_removed: usize,
    pub selected_depth: usize,
    pub best_score: f64,
}

impl PruneReport {
    pub const CSV_HEADER: &'static str = "depth,score,epochs,wall_time_s";

    /// One row per attempt; `depth` is the number of blocks removed.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for a in &self.attempts {
            out.push_str(&format!(
                "{},{},{},{}\n",
                a.blocks_removed, a.score, a.epochs, a.wall_time_s
            ));
        }
        out
    }
}

/// Runs the prune-while-not-worse loop.
///
/// `fine_tune(net, epochs)` trains a freshly transplanted network in place
/// and `score` evaluates it (higher is better). Every attempt is rebuilt from
/// `pretrained`, never from an earlier attempt. Equal scores keep pruning and
/// move the selection to the shallower network.
pub fn run_pruning<F, S>(
    pretrained: &NetSnapshot,
    spec: &NetworkSpec,
    epochs_per_attempt: usize,
    mut fine_tune: F,
    mut score: S,
) -> Result<PruneReport>
where
    F: FnMut(&mut Network, usize) -> Result<()>,
    S: FnMut(&Network) -> Result<f64>,
{
    if epochs_per_attempt == 0 {
        return Err(Error::Config(
            "pruning budget must be at least one epoch".into(),
        ));
    }
    spec.validate()?;
    let full_depth = spec.depth();

    let mut attempt = |removed: usize| -> Result<PruneAttempt> {
        let started = Instant::now();
        let sub = spec.without_top_blocks(removed)?;
        let mut net = transplant(&sub, pretrained)?;
        let start_hash = net.snapshot().backbone_hash(sub.depth());
        fine_tune(&mut net, epochs_per_attempt)?;
        let s = score(&net)?;
        if s.is_nan() {
            return Err(Error::NonFinite(format!(
                "score with {removed} blocks removed"
            )));
        }
        Ok(PruneAttempt {
            blocks_removed: removed,
            depth: sub.depth(),
            score: s,
            epochs: epochs_per_attempt,
            wall_time_s: started.elapsed().as_secs_f64(),
            start_hash,
        })
    };

    let mut attempts = vec![attempt(0)?];
    let mut best_score = 0.0;
    let mut selected = 0;
    loop {
        let last = attempts.last().unwrap();
        if last.score < best_score {
            break;
        }
        best_score = last.score;
        selected = last.blocks_removed;
        let next = last.blocks_removed + 1;
        if next >= full_depth {
            break;
        }
        attempts.push(attempt(next)?);
    }

    // best_score starts at 0, so a negative first score never enters the loop
    if attempts.len() == 1 && attempts[0].score < 0.0 {
        best_score = attempts[0].score;
    }

    Ok(PruneReport {
        attempts,
        selected_blocks_removed: selected,
        selected_depth: full_depth - selected,
        best_score,
    })
}
