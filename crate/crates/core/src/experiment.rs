//! Experiment configuration and the shared preparation steps of every
//! campaign: corpus, decoding graph, labeled alignments, initial model.

use serde::{Deserialize, Serialize};

use crate::acoustic_model::{AcousticModel, ArchConfig};
use crate::corpus::{generate_corpus, CorpusSplit, GenerationConfig, TrueTaskModel};
use crate::decoder::{DecodeGraph, GraphConfig};
use crate::error::{Error, Result};
use crate::reinforce::RlConfig;
use crate::scalar::Scalar;
use crate::trainer::{labeled_alignments, train_baseline, ArmConfig, BaselineOutcome, CampaignData, StageConfig, TrainConfig, UpdateMode};

/// Hidden-layer shape; input and output sizes follow from the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub splice: usize,
    pub hidden_layers: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let arch = ArchConfig::default();
        NetworkConfig {
            splice: arch.splice,
            hidden_layers: arch.hidden_layers,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectorSpec {
    Oracle,
    Noisy { p: f64 },
    /// Answers come from the selection service.
    Human,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmKind {
    Rl,
    Unsup,
}

impl ArmKind {
    pub fn name(&self) -> &'static str {
        match self {
            ArmKind::Rl => "rl",
            ArmKind::Unsup => "unsup",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed of initialization, shuffling, rival sampling and simulated noise.
    pub seed: u64,
    pub corpus: GenerationConfig,
    pub network: NetworkConfig,
    pub graph: GraphConfig,
    pub baseline: TrainConfig,
    pub stage: StageConfig,
    pub rl: RlConfig,
    pub selector: SelectorSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            corpus: GenerationConfig::default(),
            network: NetworkConfig::default(),
            graph: GraphConfig::default(),
            baseline: TrainConfig::default(),
            stage: StageConfig::default(),
            rl: RlConfig::default(),
            selector: SelectorSpec::Oracle,
        }
    }
}

impl ExperimentConfig {
    /// Same configuration with both the corpus and the training seed set to `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.corpus.seed = seed;
        c
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            feature_dim: self.corpus.feature_dim,
            splice: self.network.splice,
            hidden_layers: self.network.hidden_layers.clone(),
            num_states: self.corpus.num_states(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.arch().validate()?;
        self.graph.validate()?;
        self.baseline.validate()?;
        self.stage.validate()?;
        self.rl.validate()?;
        if let SelectorSpec::Noisy { p } = self.selector {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config("selector.p", "must lie in [0, 1]"));
            }
        }
        if self.stage.stage_learning_rates.len() < self.corpus.num_batches {
            return Err(Error::config(
                "stage.stage_learning_rates",
                format!(
                    "{} rates for {} large batches",
                    self.stage.stage_learning_rates.len(),
                    self.corpus.num_batches
                ),
            ));
        }
        Ok(())
    }

    pub fn arm(&self, kind: ArmKind) -> ArmConfig {
        let mut stage = self.stage.clone();
        stage.mode = match kind {
            ArmKind::Rl => UpdateMode::Reinforcement,
            ArmKind::Unsup => UpdateMode::UnsupervisedAdaptation,
        };
        ArmConfig {
            name: kind.name().to_string(),
            stage,
            rl: self.rl,
            p: match self.selector {
                SelectorSpec::Noisy { p } => Some(p),
                _ => None,
            },
            seed: self.seed,
        }
    }
}

/// Corpus, generator, decoding graph and labeled frame labels.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub split: CorpusSplit,
    pub truth: TrueTaskModel,
    pub graph: DecodeGraph,
    pub labeled_alignments: Vec<Vec<usize>>,
}

impl Prepared {
    pub fn data(&self) -> CampaignData<'_> {
        CampaignData {
            split: &self.split,
            graph: &self.graph,
            labeled_alignments: &self.labeled_alignments,
        }
    }
}

fn finish(split: CorpusSplit, truth: TrueTaskModel, graph: GraphConfig) -> Result<Prepared> {
    let graph = DecodeGraph::from_truth(&truth, graph)?;
    let labeled_alignments = labeled_alignments(&truth, &graph, &split.labeled)?;
    Ok(Prepared {
        split,
        truth,
        graph,
        labeled_alignments,
    })
}

/// Generates the corpus of `config` and everything derived from it.
pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let (split, truth) = generate_corpus(&config.corpus)?;
    finish(split, truth, config.graph)
}

/// Rebuilds the generator of a stored corpus from the configuration in its
/// header and checks that it reproduces the stored data.
pub fn prepare_from_split(split: CorpusSplit, graph: GraphConfig) -> Result<Prepared> {
    let (regenerated, truth) = generate_corpus(&split.config)?;
    if regenerated != split {
        return Err(Error::Schema(
            "corpus archive does not match the output of its own generation config".into(),
        ));
    }
    finish(split, truth, graph)
}

/// Supervised initial model of an experiment.
pub fn initial_model<T: Scalar>(config: &ExperimentConfig, prepared: &Prepared) -> Result<BaselineOutcome<T>> {
    train_baseline(
        &prepared.split.labeled,
        &prepared.labeled_alignments,
        &config.arch(),
        &config.baseline,
        config.seed,
    )
}

/// Checks that a model fits the corpus of `prepared`.
pub fn check_model<T: Scalar>(model: &AcousticModel<T>, prepared: &Prepared) -> Result<()> {
    if model.arch().feature_dim != prepared.split.config.feature_dim {
        return Err(Error::Shape {
            context: "model feature dimension".into(),
            expected: prepared.split.config.feature_dim,
            found: model.arch().feature_dim,
        });
    }
    if model.num_states() != prepared.split.num_states() {
        return Err(Error::Shape {
            context: "model state count".into(),
            expected: prepared.split.num_states(),
            found: model.num_states(),
        });
    }
    Ok(())
}
