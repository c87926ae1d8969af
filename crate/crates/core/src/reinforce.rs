//! REINFORCE-style weights for hypothesis-selection feedback.
//!
//! With a binary reward `r` (1 when Candidate 1 is selected) and a scalar
//! `alpha` in `[0, 1]`, Candidate 1's frames are weighted by
//! `(1 + alpha) * (r - alpha / (1 + alpha))` and the rival's by
//! `(1 + alpha) * (-r + 1 / (1 + alpha))`. Both collapse to
//! `(1, -alpha)` when `r = 1` and `(-alpha, 1)` when `r = 0`: the selected
//! transcript is reinforced and the other is pushed away with strength
//! `alpha`. The common factor `1 + alpha` is kept in the weights.

use std::sync::Arc;

use num_traits::{Num, Signed};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acoustic_model::AcousticModel;
use crate::decoder::{nbest, viterbi, DecodeGraph, Hypothesis};
use crate::error::{Error, Result};
use crate::feedback::Selection;
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub mod policy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RivalStrategy {
    /// The rank-`n` hypothesis of the current model's N-best list.
    NthBest { n: usize },
    /// The 1-best of a uniformly drawn earlier-stage model.
    PreviousStage,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub alpha: f64,
    pub rival_strategy: RivalStrategy,
    pub skip_identical_candidates: bool,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            alpha: 0.5,
            rival_strategy: RivalStrategy::NthBest { n: 10 },
            skip_identical_candidates: true,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("rl.alpha", "must lie in [0, 1]"));
        }
        if let RivalStrategy::NthBest { n } = self.rival_strategy {
            if n < 2 {
                return Err(Error::config("rl.rival_strategy.n", "rival rank must be at least 2"));
            }
        }
        Ok(())
    }

    /// N-best depth the decoder must produce for this configuration.
    pub fn nbest_depth(&self) -> usize {
        match self.rival_strategy {
            RivalStrategy::NthBest { n } => n,
            RivalStrategy::PreviousStage => 1,
        }
    }
}

fn check_inputs<T: Num + PartialOrd>(r: u8, alpha: T) -> Result<()> {
    if r > 1 {
        return Err(Error::Validation(format!("reward must be 0 or 1, got {r}")));
    }
    if alpha < T::zero() || alpha > T::one() {
        return Err(Error::Validation("alpha must lie in [0, 1]".into()));
    }
    Ok(())
}

fn reward<T: Num>(r: u8) -> T {
    if r == 1 {
        T::one()
    } else {
        T::zero()
    }
}

/// Reinforcement baseline implied by `alpha`: `alpha / (1 + alpha)`.
pub fn reinforcement_baseline<T: Num + Copy>(alpha: T) -> T {
    alpha / (T::one() + alpha)
}

/// `(1 + alpha) * (r - alpha / (1 + alpha))`: the single-candidate weight,
/// `1` when selected and `-alpha` otherwise.
pub fn single_candidate_weight<T: Num + Copy + PartialOrd>(r: u8, alpha: T) -> Result<T> {
    check_inputs(r, alpha)?;
    let one = T::one();
    Ok((one + alpha) * (reward::<T>(r) - reinforcement_baseline(alpha)))
}

/// Candidate weights from the symmetric two-candidate expansion, evaluated
/// term by term.
pub fn candidate_weights_expanded<T: Num + Signed + Copy + PartialOrd>(r: u8, alpha: T) -> Result<(T, T)> {
    check_inputs(r, alpha)?;
    let one = T::one();
    let scale = one + alpha;
    let r = reward::<T>(r);
    let w1 = scale * (r - alpha / scale);
    let w2 = scale * ((-r) - (-one) / scale);
    Ok((w1, w2))
}

/// Candidate weights in conditional form: `(1, -alpha)` if `r = 1`,
/// `(-alpha, 1)` if `r = 0`.
pub fn candidate_weights<T: Num + Signed + Copy + PartialOrd>(r: u8, alpha: T) -> Result<(T, T)> {
    check_inputs(r, alpha)?;
    Ok(if r == 1 {
        (T::one(), -alpha)
    } else {
        (-alpha, T::one())
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub utterance_id: String,
    pub candidate1: Hypothesis,
    pub candidate2: Hypothesis,
}

impl CandidatePair {
    pub fn identical(&self) -> bool {
        self.candidate1.words == self.candidate2.words
    }
}

/// Frame labels with the scalar weight applied to their log-likelihood gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedAlignment {
    pub labels: Vec<usize>,
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    IdenticalCandidates,
    AlignmentFailed,
}

impl DropReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            DropReason::IdenticalCandidates => "identical_candidates",
            DropReason::AlignmentFailed => "alignment_failed",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PairOutcome {
    /// Candidate 1's request first, then the rival's.
    Requests([WeightedAlignment; 2]),
    Dropped(DropReason),
}

/// Turns a selected pair into two weighted alignments. A hypothesis with an
/// empty alignment is aligned with `aligner`; a failure drops the pair.
pub fn build_rl_requests(
    pair: &CandidatePair,
    selection: &Selection,
    config: &RlConfig,
    aligner: &mut dyn FnMut(&[usize]) -> Result<Vec<usize>>,
) -> Result<PairOutcome> {
    if config.skip_identical_candidates && pair.identical() {
        return Ok(PairOutcome::Dropped(DropReason::IdenticalCandidates));
    }
    let (w1, w2) = candidate_weights(selection.r, config.alpha)?;
    let mut labels = |h: &Hypothesis| -> Option<Vec<usize>> {
        if h.alignment.is_empty() {
            aligner(&h.words).ok()
        } else {
            Some(h.alignment.clone())
        }
    };
    let (Some(l1), Some(l2)) = (labels(&pair.candidate1), labels(&pair.candidate2)) else {
        return Ok(PairOutcome::Dropped(DropReason::AlignmentFailed));
    };
    Ok(PairOutcome::Requests([
        WeightedAlignment { labels: l1, weight: w1 },
        WeightedAlignment { labels: l2, weight: w2 },
    ]))
}

/// Chooses Candidate 2 for one utterance.
///
/// `nbest_list` is the current model's list for the utterance. For
/// [`RivalStrategy::NthBest`] the rank-`n` entry is returned, or the deepest
/// one when the list is shorter. For [`RivalStrategy::PreviousStage`] a model
/// is drawn uniformly from `archive` and its 1-best on `frames` is returned.
pub fn select_rival<T: Scalar>(
    nbest_list: &[Hypothesis],
    strategy: RivalStrategy,
    archive: &[Arc<AcousticModel<T>>],
    graph: &DecodeGraph,
    frames: &crate::corpus::Frames,
    rng: &mut impl Rng,
) -> Result<Hypothesis> {
    if nbest_list.is_empty() {
        return Err(Error::Validation("empty N-best list".into()));
    }
    match strategy {
        RivalStrategy::NthBest { n } => Ok(nth_or_deepest(nbest_list, n).clone()),
        RivalStrategy::PreviousStage => {
            if archive.is_empty() {
                return Err(Error::config(
                    "rl.rival_strategy",
                    "previous_stage needs at least one archived model",
                ));
            }
            let pick = rng.random_range(0..archive.len());
            viterbi(&archive[pick].scaled_log_likelihoods(frames)?, graph)
        }
    }
}

/// The rank-`n` entry, or the last one when the list is shorter than `n`.
pub fn nth_or_deepest(nbest_list: &[Hypothesis], n: usize) -> &Hypothesis {
    &nbest_list[n.clamp(1, nbest_list.len()) - 1]
}

/// N-best list for a precomputed score matrix, deep enough for `config`.
pub fn candidates_for(scores: &Matrix<f64>, graph: &DecodeGraph, config: &RlConfig) -> Result<Vec<Hypothesis>> {
    nbest(scores, graph, config.nbest_depth())
}
