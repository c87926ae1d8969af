//! Supervised bootstrap training and the staged large-batch campaign.
//!
//! Stage `k` decodes large batch `k + 1` with model `RLk`, collects a
//! selection for every candidate pair, and trains `RLk+1` on the resulting
//! weighted requests. Each epoch is one shuffled pass over the stage's
//! requests; after every epoch the cross-entropy on a held-out slice of the
//! labeled set drives the learning-rate schedule.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acoustic_model::{
    estimate_priors, init_model, weighted_ce_gradient, AcousticModel, ArchConfig, FrameGradientRequest,
    DEFAULT_PRIOR_FLOOR,
};
use crate::corpus::{CorpusSplit, Frames, TrueTaskModel, Utterance};
use crate::decoder::{align, nbest, viterbi, DecodeGraph};
use crate::error::{Error, Result};
use crate::feedback::{noisy_select, oracle_select, word_error_rate, Selection, WerBreakdown};
use crate::matrix::Matrix;
use crate::reinforce::{build_rl_requests, select_rival, CandidatePair, DropReason, PairOutcome, RlConfig, RivalStrategy};
use crate::scalar::Scalar;

/// Default multiplier on configured learning rates. Gradients are summed over
/// the frames of a minibatch; at this scale the baseline rate 0.008 gives a
/// step of 0.05 on the default corpus.
pub const DEFAULT_LEARNING_RATE_SCALE: f64 = 6.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    /// Utterances per parameter update.
    pub minibatch_utterances: usize,
    /// Global gradient norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Divide each minibatch gradient by its frame count.
    pub per_frame_normalize: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            minibatch_utterances: 4,
            clip_norm: None,
            per_frame_normalize: false,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.minibatch_utterances == 0 {
            return Err(Error::config("sgd.minibatch_utterances", "must be positive"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("sgd.clip_norm", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Supervised training of the initial model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplier applied to `learning_rate`; the step size is their product.
    pub learning_rate_scale: f64,
    pub max_epochs: usize,
    pub halving_threshold: f64,
    pub cv_fraction: f64,
    pub prior_floor: f64,
    pub sgd: SgdConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.008,
            learning_rate_scale: DEFAULT_LEARNING_RATE_SCALE,
            max_epochs: 25,
            halving_threshold: 0.01,
            cv_fraction: 0.1,
            prior_floor: DEFAULT_PRIOR_FLOOR,
            sgd: SgdConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("baseline.learning_rate", "must be positive"));
        }
        if !(self.learning_rate_scale > 0.0 && self.learning_rate_scale.is_finite()) {
            return Err(Error::config("baseline.learning_rate_scale", "must be positive and finite"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("baseline.max_epochs", "must be positive"));
        }
        check_fraction("baseline.cv_fraction", self.cv_fraction)?;
        self.sgd.validate()
    }
}

fn check_fraction(field: &str, value: f64) -> Result<()> {
    if !(value > 0.0 && value < 1.0) {
        return Err(Error::config(field, "must lie strictly between 0 and 1"));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    Reinforcement,
    /// Train on the 1-best hypothesis with weight 1 and no selection.
    UnsupervisedAdaptation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub stage_learning_rates: Vec<f64>,
    /// Multiplier applied to every stage rate.
    pub learning_rate_scale: f64,
    pub max_iterations_per_epoch: usize,
    pub cv_fraction: f64,
    pub halving_threshold: f64,
    pub labeled_mix: bool,
    pub labeled_mix_weight: f64,
    /// Refit the state priors to the positively weighted training labels of
    /// each stage.
    pub reestimate_priors: bool,
    pub prior_floor: f64,
    pub mode: UpdateMode,
    pub sgd: SgdConfig,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            stage_learning_rates: vec![0.004, 0.002, 0.001, 0.0005],
            learning_rate_scale: DEFAULT_LEARNING_RATE_SCALE,
            max_iterations_per_epoch: 7,
            cv_fraction: 0.1,
            halving_threshold: 0.01,
            labeled_mix: true,
            labeled_mix_weight: 1.0,
            reestimate_priors: true,
            prior_floor: DEFAULT_PRIOR_FLOOR,
            mode: UpdateMode::Reinforcement,
            sgd: SgdConfig::default(),
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_learning_rates.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::config("stage.stage_learning_rates", "every rate must be positive"));
        }
        if !(self.learning_rate_scale > 0.0 && self.learning_rate_scale.is_finite()) {
            return Err(Error::config("stage.learning_rate_scale", "must be positive and finite"));
        }
        if self.max_iterations_per_epoch == 0 {
            return Err(Error::config("stage.max_iterations_per_epoch", "must be positive"));
        }
        check_fraction("stage.cv_fraction", self.cv_fraction)?;
        if !(self.labeled_mix_weight >= 0.0) {
            return Err(Error::config("stage.labeled_mix_weight", "must be non-negative"));
        }
        self.sgd.validate()
    }

    /// Effective step size of `stage` (rate times scale).
    pub fn learning_rate(&self, stage: usize) -> Result<f64> {
        self.stage_learning_rates.get(stage).map(|r| r * self.learning_rate_scale).ok_or_else(|| {
            Error::config(
                "stage.stage_learning_rates",
                format!("no learning rate for stage {}", stage + 1),
            )
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrDecision {
    Continue(f64),
    Stop,
}

/// Called after `iteration` completed epochs with the relative CV
/// cross-entropy improvement of the last one.
pub fn lr_schedule_step(current_lr: f64, cv_improvement: f64, iteration: usize, cap: usize, halving_threshold: f64) -> LrDecision {
    if iteration >= cap {
        LrDecision::Stop
    } else if cv_improvement < halving_threshold {
        LrDecision::Continue(current_lr / 2.0)
    } else {
        LrDecision::Continue(current_lr)
    }
}

/// Per-frame Gaussian log-densities of every state under the generator,
/// with an optional feature bias added to the means.
pub fn generator_scores(truth: &TrueTaskModel, frames: &Frames, shift: Option<&[f64]>) -> Matrix<f64> {
    // floored so that a noiseless generator still gives finite scores
    let var = (truth.emission_noise_sigma * truth.emission_noise_sigma).max(1e-6);
    let norm = -0.5 * frames.dim() as f64 * (2.0 * std::f64::consts::PI * var).ln();
    let mut out = Matrix::zeros(frames.len(), truth.num_states());
    for t in 0..frames.len() {
        let x = frames.row(t);
        for (s, mean) in truth.state_means.iter().enumerate() {
            let d2: f64 = x
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let mu = mean[i] + shift.map_or(0.0, |b| b[i]);
                    (v as f64 - mu).powi(2)
                })
                .sum();
            out[(t, s)] = norm - 0.5 * d2 / var;
        }
    }
    out
}

/// Frame labels of the labeled set: each reference forced-aligned with the
/// generator's own emission densities.
pub fn labeled_alignments(truth: &TrueTaskModel, graph: &DecodeGraph, labeled: &[Utterance]) -> Result<Vec<Vec<usize>>> {
    labeled
        .iter()
        .map(|u| {
            let scores = generator_scores(truth, &u.frames, None);
            align(&scores, graph, &u.reference)
                .map(|a| a.alignment)
                .map_err(|e| Error::Alignment(format!("utterance {}: {e}", u.id)))
        })
        .collect()
}

/// Splits the labeled set into training and held-out indices. The held-out
/// part is the last `ceil(cv_fraction * n)` utterances.
pub fn cv_split(n: usize, cv_fraction: f64) -> Result<(std::ops::Range<usize>, std::ops::Range<usize>)> {
    let cv = ((n as f64 * cv_fraction).ceil() as usize).max(1);
    if cv >= n {
        return Err(Error::Training(format!(
            "labeled set of {n} utterances is too small for a cross-validation split"
        )));
    }
    Ok((0..n - cv, n - cv..n))
}

/// Deterministic seed for a named sub-stream.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    // splitmix64 finalizer over the running state
    let mut z = seed;
    for &t in tags {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(t);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Mean per-frame negative log posterior of the labels.
pub fn cross_entropy<T: Scalar>(model: &AcousticModel<T>, data: &[(&Frames, &[usize])]) -> Result<f64> {
    let mut total = 0.0;
    let mut frames = 0usize;
    for (f, labels) in data {
        total -= model.log_likelihood(f, labels)?.to_f64_lossy();
        frames += f.len();
    }
    if frames == 0 {
        return Err(Error::Validation("cross-entropy over an empty set".into()));
    }
    Ok(total / frames as f64)
}

/// One utterance's contribution to an epoch: all its weighted label
/// sequences are applied in the same minibatch.
#[derive(Clone, Debug)]
pub struct TrainingUnit<'a> {
    pub utterance: &'a Utterance,
    pub targets: Vec<(Vec<usize>, f64)>,
}

/// One shuffled pass of minibatch SGD over `units`.
pub fn sgd_epoch<T: Scalar>(
    model: &mut AcousticModel<T>,
    units: &[TrainingUnit<'_>],
    learning_rate: f64,
    sgd: &SgdConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut order: Vec<usize> = (0..units.len()).collect();
    order.shuffle(rng);
    let lr = T::from_f64_lossy(learning_rate);
    let clip = sgd.clip_norm.map(T::from_f64_lossy);
    for chunk in order.chunks(sgd.minibatch_utterances) {
        let mut requests = Vec::new();
        let mut frames = 0usize;
        for &i in chunk {
            let unit = &units[i];
            frames += unit.utterance.frames.len();
            for (labels, w) in &unit.targets {
                requests.push(FrameGradientRequest {
                    utterance_id: &unit.utterance.id,
                    frames: &unit.utterance.frames,
                    labels,
                    weight: T::from_f64_lossy(*w),
                });
            }
        }
        let mut grad = weighted_ce_gradient(model, &requests)?;
        if sgd.per_frame_normalize && frames > 0 {
            grad.scale(T::from_f64_lossy(1.0 / frames as f64));
        }
        model
            .apply_sgd(&grad, lr, clip)
            .map_err(|e| Error::Training(format!("update failed: {e}")))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub learning_rate: f64,
    pub cv_cross_entropy: f64,
}

#[derive(Clone, Debug)]
pub struct BaselineOutcome<T> {
    pub model: AcousticModel<T>,
    pub initial_cv_cross_entropy: f64,
    pub epochs: Vec<EpochRecord>,
}

/// Trains the initial model on the labeled set with the halving schedule and
/// returns the epoch with the best held-out cross-entropy.
pub fn train_baseline<T: Scalar>(
    labeled: &[Utterance],
    alignments: &[Vec<usize>],
    arch: &ArchConfig,
    config: &TrainConfig,
    seed: u64,
) -> Result<BaselineOutcome<T>> {
    config.validate()?;
    arch.validate()?;
    if labeled.is_empty() {
        return Err(Error::Validation("labeled set is empty".into()));
    }
    if alignments.len() != labeled.len() {
        return Err(Error::Shape {
            context: "labeled alignments".into(),
            expected: labeled.len(),
            found: alignments.len(),
        });
    }
    let (train, cv) = cv_split(labeled.len(), config.cv_fraction)?;
    let mut model: AcousticModel<T> = init_model(arch, seed)?;
    let priors = estimate_priors(alignments[train.clone()].iter().map(Vec::as_slice), arch.num_states, config.prior_floor)?;
    model.set_priors(priors)?;

    let cv_data: Vec<(&Frames, &[usize])> = cv.map(|i| (&labeled[i].frames, alignments[i].as_slice())).collect();
    let units: Vec<TrainingUnit> = train
        .map(|i| TrainingUnit {
            utterance: &labeled[i],
            targets: vec![(alignments[i].clone(), 1.0)],
        })
        .collect();

    let initial = cross_entropy(&model, &cv_data)?;
    let mut best = (initial, model.clone());
    let mut prev = initial;
    let mut lr = config.learning_rate * config.learning_rate_scale;
    let mut epochs = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xBA5E]));
    for epoch in 1..=config.max_epochs {
        sgd_epoch(&mut model, &units, lr, &config.sgd, &mut rng)?;
        let ce = cross_entropy(&model, &cv_data)?;
        if !ce.is_finite() {
            return Err(Error::Training(format!("cross-validation cross-entropy became {ce} at epoch {epoch}")));
        }
        epochs.push(EpochRecord { learning_rate: lr, cv_cross_entropy: ce });
        if ce < best.0 {
            best = (ce, model.clone());
        }
        let improvement = (prev - ce) / prev;
        prev = ce;
        match lr_schedule_step(lr, improvement, epoch, config.max_epochs, config.halving_threshold) {
            LrDecision::Stop => break,
            LrDecision::Continue(next) => lr = next,
        }
    }
    if best.0 >= initial {
        let trace: Vec<String> = epochs.iter().map(|e| format!("{:.4}", e.cv_cross_entropy)).collect();
        return Err(Error::Training(format!(
            "baseline diverged: held-out cross-entropy never improved on {initial:.4} (epochs: {})",
            trace.join(", ")
        )));
    }
    Ok(BaselineOutcome {
        model: best.1,
        initial_cv_cross_entropy: initial,
        epochs,
    })
}

/// 1-best decode of every utterance, errors summed over all reference words.
pub fn evaluate_model<T: Scalar>(model: &AcousticModel<T>, utterances: &[Utterance], graph: &DecodeGraph) -> Result<WerBreakdown> {
    if utterances.is_empty() {
        return Err(Error::Validation("evaluation set is empty".into()));
    }
    let mut parts = Vec::with_capacity(utterances.len());
    for u in utterances {
        let best = viterbi(&model.scaled_log_likelihoods(&u.frames)?, graph)?;
        parts.push(word_error_rate(&best.words, &u.reference)?);
    }
    Ok(WerBreakdown::aggregate(&parts))
}

/// What a selector sees for one pair.
#[derive(Clone, Copy, Debug)]
pub struct PairContext<'a> {
    pub stage: usize,
    pub utterance: &'a Utterance,
    pub pair: &'a CandidatePair,
}

/// Source of hypothesis-selection feedback for a whole stage.
pub trait Selector {
    /// One selection per pair, in order.
    fn select(&mut self, stage: usize, pairs: &[PairContext<'_>]) -> Result<Vec<Selection>>;
}

/// Always picks the candidate with the lower WER against the reference.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleSelector;

impl Selector for OracleSelector {
    fn select(&mut self, _stage: usize, pairs: &[PairContext<'_>]) -> Result<Vec<Selection>> {
        pairs
            .iter()
            .map(|c| oracle_select(&c.pair.candidate1.words, &c.pair.candidate2.words, &c.utterance.reference))
            .collect()
    }
}

/// Oracle choice swapped with probability `p`, one draw per pair from a
/// stream that depends only on `seed` and the stage.
#[derive(Clone, Copy, Debug)]
pub struct NoisySelector {
    pub p: f64,
    pub seed: u64,
}

impl Selector for NoisySelector {
    fn select(&mut self, stage: usize, pairs: &[PairContext<'_>]) -> Result<Vec<Selection>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[0x5E1E, stage as u64]));
        let clean = OracleSelector.select(stage, pairs)?;
        clean.iter().map(|s| noisy_select(s, self.p, &mut rng)).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedCounts {
    pub identical_candidates: usize,
    pub alignment_failed: usize,
}

/// Per-pair record kept for audits and the selection-error sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub utterance_id: String,
    pub candidate1: Vec<usize>,
    pub candidate2: Vec<usize>,
    pub candidate2_rank: usize,
    pub r: u8,
    pub candidate1_wer: WerBreakdown,
    pub candidate2_wer: WerBreakdown,
    /// Training weights of the two candidates; `None` when the pair was dropped
    /// or never trained on.
    pub weights: Option<(f64, f64)>,
    pub dropped: Option<DropReason>,
}

impl PairRecord {
    pub fn selected_wer(&self) -> &WerBreakdown {
        if self.r == 1 {
            &self.candidate1_wer
        } else {
            &self.candidate2_wer
        }
    }
}

/// Metrics of model `RLk`. `batch_wer` and the selection fields describe its
/// decode of batch `k + 1`; the learning-rate trajectory is that of the
/// update that produced `RLk+1`. The last stage of a campaign has no batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub arm: String,
    pub alpha: Option<f64>,
    pub p: Option<f64>,
    pub batch_wer: Option<WerBreakdown>,
    pub eval_wer: WerBreakdown,
    /// Eval WER is higher than at the previous report of the same arm.
    pub eval_wer_increased: bool,
    pub selected_wer: Option<WerBreakdown>,
    pub candidate1_wer: Option<WerBreakdown>,
    pub candidate2_wer: Option<WerBreakdown>,
    pub dropped: DroppedCounts,
    pub epochs: Vec<EpochRecord>,
    /// Seconds spent on the stage; not part of any emitted file.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// Labels and fixed inputs shared by every stage of a campaign.
pub struct CampaignData<'a> {
    pub split: &'a CorpusSplit,
    pub graph: &'a DecodeGraph,
    pub labeled_alignments: &'a [Vec<usize>],
}

/// One arm of a campaign.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmConfig {
    pub name: String,
    pub stage: StageConfig,
    pub rl: RlConfig,
    /// Selection error rate of the simulated selector; `None` for the
    /// noiseless oracle.
    pub p: Option<f64>,
    pub seed: u64,
}

impl ArmConfig {
    pub fn validate(&self) -> Result<()> {
        self.stage.validate()?;
        self.rl.validate()?;
        if let Some(p) = self.p {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config("selector.p", "must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct StageOutcome<T> {
    pub model: AcousticModel<T>,
    pub pairs: Vec<PairRecord>,
    pub selected_wer: Option<WerBreakdown>,
    pub candidate1_wer: WerBreakdown,
    pub candidate2_wer: Option<WerBreakdown>,
    pub batch_wer: WerBreakdown,
    pub dropped: DroppedCounts,
    pub epochs: Vec<EpochRecord>,
}

/// Candidate pairs of one batch with the score matrices they came from.
#[derive(Clone, Debug)]
pub struct DecodedBatch {
    pub pairs: Vec<CandidatePair>,
    pub scores: Vec<Matrix<f64>>,
    /// 1-best WER of the batch.
    pub batch_wer: WerBreakdown,
}

/// Decodes every utterance of `batch` and forms its candidate pair. Without
/// reinforcement both candidates are the 1-best.
pub fn decode_batch<T: Scalar>(
    stage: usize,
    model: &AcousticModel<T>,
    batch: &[Utterance],
    graph: &DecodeGraph,
    arm: &ArmConfig,
    archive: &[Arc<AcousticModel<T>>],
) -> Result<DecodedBatch> {
    let reinforce = arm.stage.mode == UpdateMode::Reinforcement;
    let depth = if reinforce { arm.rl.nbest_depth() } else { 1 };
    let mut rival_rng = ChaCha8Rng::seed_from_u64(derive_seed(arm.seed, &[0x41A1, stage as u64]));
    let mut scores = Vec::with_capacity(batch.len());
    let mut pairs = Vec::with_capacity(batch.len());
    let mut c1_parts = Vec::with_capacity(batch.len());
    for u in batch {
        let s = model.scaled_log_likelihoods(&u.frames)?;
        let list = nbest(&s, graph, depth)?;
        c1_parts.push(word_error_rate(&list[0].words, &u.reference)?);
        let candidate2 = if reinforce {
            let mut rival = select_rival(&list, arm.rl.rival_strategy, archive, graph, &u.frames, &mut rival_rng)?;
            if arm.rl.rival_strategy == RivalStrategy::PreviousStage {
                // realigned under the current model when requests are built
                rival.alignment.clear();
                rival.rank = 0;
            }
            rival
        } else {
            list[0].clone()
        };
        pairs.push(CandidatePair {
            utterance_id: u.id.clone(),
            candidate1: list[0].clone(),
            candidate2,
        });
        scores.push(s);
    }
    Ok(DecodedBatch {
        pairs,
        scores,
        batch_wer: WerBreakdown::aggregate(&c1_parts),
    })
}

/// Pair records of a decoded batch under noiseless oracle selection.
pub fn oracle_pair_records(decoded: &DecodedBatch, batch: &[Utterance]) -> Result<Vec<PairRecord>> {
    let contexts: Vec<PairContext> = batch
        .iter()
        .zip(&decoded.pairs)
        .map(|(u, pair)| PairContext { stage: 0, utterance: u, pair })
        .collect();
    let selections = OracleSelector.select(0, &contexts)?;
    Ok(decoded
        .pairs
        .iter()
        .zip(selections)
        .map(|(pair, sel)| {
            let (w1, w2) = sel.candidate_wers.expect("oracle selections carry WERs");
            PairRecord {
                utterance_id: pair.utterance_id.clone(),
                candidate1: pair.candidate1.words.clone(),
                candidate2: pair.candidate2.words.clone(),
                candidate2_rank: pair.candidate2.rank,
                r: sel.r,
                candidate1_wer: w1,
                candidate2_wer: w2,
                weights: None,
                dropped: None,
            }
        })
        .collect())
}

/// Decodes `batch` with `model`, gathers selections, and trains the next
/// model. `archive` holds the models available as previous-stage rivals.
///
/// A stage is a pure function of its inputs, so a stage whose selector was
/// interrupted can be resumed by running it again with a selector that
/// replays the answers already given.
#[allow(clippy::too_many_arguments)]
pub fn run_stage<T: Scalar>(
    stage: usize,
    model: &AcousticModel<T>,
    batch: &[Utterance],
    data: &CampaignData<'_>,
    arm: &ArmConfig,
    archive: &[Arc<AcousticModel<T>>],
    selector: &mut dyn Selector,
) -> Result<StageOutcome<T>> {
    arm.validate()?;
    let lr0 = arm.stage.learning_rate(stage)?;
    if batch.is_empty() {
        return Err(Error::Validation(format!("large batch {} is empty", stage + 1)));
    }
    let graph = data.graph;
    let mode = arm.stage.mode;
    let DecodedBatch { pairs, scores, batch_wer } = decode_batch(stage, model, batch, graph, arm, archive)?;

    let mut units: Vec<TrainingUnit> = Vec::with_capacity(batch.len());
    let mut records = Vec::new();
    let mut dropped = DroppedCounts::default();
    let (mut selected_wer, mut candidate2_wer) = (None, None);
    match mode {
        UpdateMode::UnsupervisedAdaptation => {
            for (u, p) in batch.iter().zip(&pairs) {
                units.push(TrainingUnit {
                    utterance: u,
                    targets: vec![(p.candidate1.alignment.clone(), 1.0)],
                });
            }
        }
        UpdateMode::Reinforcement => {
            let contexts: Vec<PairContext> = batch
                .iter()
                .zip(&pairs)
                .map(|(u, pair)| PairContext { stage, utterance: u, pair })
                .collect();
            let selections = selector.select(stage, &contexts)?;
            if selections.len() != pairs.len() {
                return Err(Error::Shape {
                    context: "selections returned by the selector".into(),
                    expected: pairs.len(),
                    found: selections.len(),
                });
            }
            let (mut sel_parts, mut c2_parts) = (Vec::new(), Vec::new());
            for (((u, pair), sel), s) in batch.iter().zip(&pairs).zip(&selections).zip(&scores) {
                let w1 = word_error_rate(&pair.candidate1.words, &u.reference)?;
                let w2 = word_error_rate(&pair.candidate2.words, &u.reference)?;
                let mut aligner = |words: &[usize]| align(s, graph, words).map(|a| a.alignment);
                let outcome = build_rl_requests(pair, sel, &arm.rl, &mut aligner)?;
                let mut weights = None;
                let reason = match outcome {
                    PairOutcome::Requests([a, b]) => {
                        weights = Some((a.weight, b.weight));
                        units.push(TrainingUnit {
                            utterance: u,
                            targets: vec![(a.labels, a.weight), (b.labels, b.weight)],
                        });
                        None
                    }
                    PairOutcome::Dropped(reason) => {
                        match reason {
                            DropReason::IdenticalCandidates => dropped.identical_candidates += 1,
                            DropReason::AlignmentFailed => dropped.alignment_failed += 1,
                        }
                        Some(reason)
                    }
                };
                let record = PairRecord {
                    utterance_id: u.id.clone(),
                    candidate1: pair.candidate1.words.clone(),
                    candidate2: pair.candidate2.words.clone(),
                    candidate2_rank: pair.candidate2.rank,
                    r: sel.r,
                    candidate1_wer: w1,
                    candidate2_wer: w2,
                    weights,
                    dropped: reason,
                };
                sel_parts.push(*record.selected_wer());
                c2_parts.push(w2);
                records.push(record);
            }
            selected_wer = Some(WerBreakdown::aggregate(&sel_parts));
            candidate2_wer = Some(WerBreakdown::aggregate(&c2_parts));
        }
    }

    let (train, cv) = cv_split(data.split.labeled.len(), arm.stage.cv_fraction)?;
    let labeled = &data.split.labeled;
    let alignments = data.labeled_alignments;
    if arm.stage.labeled_mix && arm.stage.labeled_mix_weight > 0.0 {
        for i in train {
            units.push(TrainingUnit {
                utterance: &labeled[i],
                targets: vec![(alignments[i].clone(), arm.stage.labeled_mix_weight)],
            });
        }
    }
    let cv_data: Vec<(&Frames, &[usize])> = cv.map(|i| (&labeled[i].frames, alignments[i].as_slice())).collect();

    let mut next = model.clone();
    if arm.stage.reestimate_priors {
        let labels = units
            .iter()
            .flat_map(|u| u.targets.iter())
            .filter(|(_, w)| *w > 0.0)
            .map(|(l, _)| l.as_slice());
        next.set_priors(estimate_priors(labels, next.num_states(), arm.stage.prior_floor)?)?;
    }
    let mut prev = cross_entropy(&next, &cv_data)?;
    let mut lr = lr0;
    let mut epochs = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(arm.seed, &[0xE90C, stage as u64]));
    for iteration in 1.. {
        sgd_epoch(&mut next, &units, lr, &arm.stage.sgd, &mut rng)?;
        let ce = cross_entropy(&next, &cv_data)?;
        if !ce.is_finite() {
            return Err(Error::Training(format!(
                "stage {}: held-out cross-entropy became {ce} after epoch {iteration}",
                stage + 1
            )));
        }
        epochs.push(EpochRecord { learning_rate: lr, cv_cross_entropy: ce });
        let improvement = (prev - ce) / prev;
        prev = ce;
        match lr_schedule_step(lr, improvement, iteration, arm.stage.max_iterations_per_epoch, arm.stage.halving_threshold) {
            LrDecision::Stop => break,
            LrDecision::Continue(l) => lr = l,
        }
    }

    Ok(StageOutcome {
        model: next,
        pairs: records,
        selected_wer,
        candidate1_wer: batch_wer,
        candidate2_wer,
        batch_wer,
        dropped,
        epochs,
    })
}

#[derive(Clone, Debug)]
pub struct CampaignOutcome<T> {
    pub reports: Vec<StageReport>,
    /// `RL0` (the starting model) through `RLK`.
    pub models: Vec<Arc<AcousticModel<T>>>,
    /// Pair audits of every stage, indexed by stage.
    pub pairs: Vec<Vec<PairRecord>>,
}

/// Runs every stage of one arm from `initial`. The number of stages is the
/// number of large batches in the corpus.
pub fn run_campaign<T: Scalar>(
    initial: &AcousticModel<T>,
    data: &CampaignData<'_>,
    arm: &ArmConfig,
    selector: &mut dyn Selector,
) -> Result<CampaignOutcome<T>> {
    arm.validate()?;
    let batches = &data.split.large_batches;
    let eval = &data.split.eval_set;
    let alpha = (arm.stage.mode == UpdateMode::Reinforcement).then_some(arm.rl.alpha);
    let p = match arm.stage.mode {
        UpdateMode::Reinforcement => Some(arm.p.unwrap_or(0.0)),
        UpdateMode::UnsupervisedAdaptation => None,
    };
    let mut models = vec![Arc::new(initial.clone())];
    let mut reports = Vec::with_capacity(batches.len() + 1);
    let mut pairs = Vec::with_capacity(batches.len());
    for (k, batch) in batches.iter().enumerate() {
        let started = Instant::now();
        let current = Arc::clone(&models[k]);
        let eval_wer = evaluate_model(&current, eval, data.graph)?;
        // Earlier stages only; stage 0 can only draw the starting model.
        let archive = &models[..k.max(1)];
        let outcome = run_stage(k, &current, batch, data, arm, archive, selector)?;
        log::info!(
            "{} stage {}: batch WER {:.4}, eval WER {:.4}",
            arm.name,
            k,
            outcome.batch_wer.wer,
            eval_wer.wer
        );
        reports.push(StageReport {
            stage: k,
            arm: arm.name.clone(),
            alpha,
            p,
            batch_wer: Some(outcome.batch_wer),
            eval_wer,
            eval_wer_increased: false,
            selected_wer: outcome.selected_wer,
            candidate1_wer: Some(outcome.candidate1_wer),
            candidate2_wer: outcome.candidate2_wer,
            dropped: outcome.dropped,
            epochs: outcome.epochs,
            wall_time_secs: started.elapsed().as_secs_f64(),
        });
        pairs.push(outcome.pairs);
        models.push(Arc::new(outcome.model));
    }
    let started = Instant::now();
    let last = models.last().unwrap();
    reports.push(StageReport {
        stage: batches.len(),
        arm: arm.name.clone(),
        alpha,
        p,
        batch_wer: None,
        eval_wer: evaluate_model(last, eval, data.graph)?,
        eval_wer_increased: false,
        selected_wer: None,
        candidate1_wer: None,
        candidate2_wer: None,
        dropped: DroppedCounts::default(),
        epochs: Vec::new(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    });
    for k in 1..reports.len() {
        if reports[k].eval_wer.wer > reports[k - 1].eval_wer.wer {
            reports[k].eval_wer_increased = true;
            log::warn!(
                "{}: eval WER rose from {:.4} at RL{} to {:.4} at RL{}",
                arm.name,
                reports[k - 1].eval_wer.wer,
                k - 1,
                reports[k].eval_wer.wer,
                k
            );
        }
    }
    Ok(CampaignOutcome { reports, models, pairs })
}

/// Selector for an arm's simulated feedback.
pub fn simulated_selector(arm: &ArmConfig) -> Box<dyn Selector> {
    match arm.p {
        Some(p) if p > 0.0 => Box::new(NoisySelector { p, seed: arm.seed }),
        _ => Box::new(OracleSelector),
    }
}
