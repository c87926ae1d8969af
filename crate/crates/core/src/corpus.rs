//! Synthetic recognition task: word HMMs with Gaussian emissions, a bigram
//! language model, and a labeled / staged-unlabeled / evaluation split.
//!
//! Every large batch carries a constant feature bias so that the unlabeled
//! data is mismatched to the labeled set. The evaluation set cycles through
//! the batch biases, so it is drawn from the same mixture of domains as the
//! unlabeled data.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CORPUS_MAGIC: &[u8; 8] = b"HSCORPUS";
pub const CORPUS_SCHEMA_VERSION: u32 = 1;

/// Relative weight of the per-batch random component of the bias direction.
const SHIFT_SPREAD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordRange {
    pub min: usize,
    pub max: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub vocab_size: usize,
    pub states_per_word: usize,
    pub feature_dim: usize,
    pub emission_noise_sigma: f64,
    pub self_loop_prob: f64,
    /// Dirichlet concentration of each bigram row.
    pub bigram_concentration: f64,
    pub utterance_length_range: WordRange,
    pub batch_shift_magnitude: f64,
    /// Probability of an optional silence segment between two words.
    /// Zero removes the silence state from the inventory.
    pub silence_prob: f64,
    pub num_labeled: usize,
    pub num_batches: usize,
    pub batch_size: usize,
    pub num_eval: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            vocab_size: 30,
            states_per_word: 3,
            feature_dim: 20,
            emission_noise_sigma: 2.4,
            self_loop_prob: 0.4,
            bigram_concentration: 0.3,
            utterance_length_range: WordRange { min: 2, max: 6 },
            batch_shift_magnitude: 1.5,
            silence_prob: 0.2,
            num_labeled: 300,
            num_batches: 4,
            batch_size: 500,
            num_eval: 200,
            seed: 1,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size", "must be at least 2"));
        }
        if self.states_per_word < 1 {
            return Err(Error::config("states_per_word", "must be at least 1"));
        }
        if self.feature_dim < 1 {
            return Err(Error::config("feature_dim", "must be at least 1"));
        }
        if !(self.emission_noise_sigma >= 0.0 && self.emission_noise_sigma.is_finite()) {
            return Err(Error::config("emission_noise_sigma", "must be finite and nonnegative"));
        }
        if !(self.self_loop_prob > 0.0 && self.self_loop_prob < 1.0) {
            return Err(Error::config("self_loop_prob", "must lie strictly between 0 and 1"));
        }
        if !(self.bigram_concentration > 0.0 && self.bigram_concentration.is_finite()) {
            return Err(Error::config("bigram_concentration", "must be positive"));
        }
        let range = self.utterance_length_range;
        if range.min < 1 || range.max < range.min {
            return Err(Error::config(
                "utterance_length_range",
                "need 1 <= min <= max",
            ));
        }
        if !(self.batch_shift_magnitude >= 0.0 && self.batch_shift_magnitude.is_finite()) {
            return Err(Error::config("batch_shift_magnitude", "must be finite and nonnegative"));
        }
        if !(self.silence_prob >= 0.0 && self.silence_prob < 1.0) {
            return Err(Error::config("silence_prob", "must lie in [0, 1)"));
        }
        if self.num_labeled < 1 {
            return Err(Error::config("num_labeled", "must be at least 1"));
        }
        if self.num_eval < 1 {
            return Err(Error::config("num_eval", "must be at least 1"));
        }
        if self.num_batches > 0 && self.batch_size < 1 {
            return Err(Error::config("batch_size", "must be at least 1 when batches exist"));
        }
        Ok(())
    }

    pub fn num_word_states(&self) -> usize {
        self.vocab_size * self.states_per_word
    }

    /// Size of the acoustic state inventory (word states plus optional silence).
    pub fn num_states(&self) -> usize {
        self.num_word_states() + usize::from(self.silence_prob > 0.0)
    }
}

/// Feature frames of one utterance, row-major `num_frames x dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frames {
    dim: usize,
    data: Vec<f32>,
}

impl Frames {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::Shape {
                context: "frame buffer".into(),
                expected: dim,
                found: data.len(),
            });
        }
        Ok(Frames { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BatchTag {
    Labeled,
    /// Zero-based large batch index.
    Batch(usize),
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub frames: Frames,
    pub reference: Vec<usize>,
    pub batch_tag: BatchTag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub config: GenerationConfig,
    pub labeled: Vec<Utterance>,
    pub large_batches: Vec<Vec<Utterance>>,
    pub eval_set: Vec<Utterance>,
}

impl CorpusSplit {
    pub fn all(&self) -> impl Iterator<Item = &Utterance> {
        self.labeled
            .iter()
            .chain(self.large_batches.iter().flatten())
            .chain(self.eval_set.iter())
    }

    pub fn num_states(&self) -> usize {
        self.config.num_states()
    }
}

/// Bigram language model in probability space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BigramLm {
    /// P(first word).
    pub start: Vec<f64>,
    /// `transitions[prev][next]` = P(next | prev).
    pub transitions: Vec<Vec<f64>>,
}

/// The generator behind a corpus, kept for oracle alignment and debugging.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrueTaskModel {
    pub vocab_size: usize,
    pub states_per_word: usize,
    pub feature_dim: usize,
    /// Mean vector of every acoustic state, silence last when present.
    pub state_means: Vec<Vec<f64>>,
    pub silence_state: Option<usize>,
    pub emission_noise_sigma: f64,
    pub self_loop_prob: f64,
    pub lm: BigramLm,
    pub batch_shifts: Vec<Vec<f64>>,
}

impl TrueTaskModel {
    pub fn num_states(&self) -> usize {
        self.state_means.len()
    }

    pub fn word_state(&self, word: usize, position: usize) -> usize {
        word * self.states_per_word + position
    }

    /// Feature bias applied to a partition member; `index` is the position
    /// inside the evaluation set for [`BatchTag::Eval`].
    pub fn shift_for(&self, tag: BatchTag, index: usize) -> Option<&[f64]> {
        match tag {
            BatchTag::Labeled => None,
            BatchTag::Batch(b) => self.batch_shifts.get(b).map(Vec::as_slice),
            BatchTag::Eval => {
                if self.batch_shifts.is_empty() {
                    None
                } else {
                    Some(&self.batch_shifts[index % self.batch_shifts.len()])
                }
            }
        }
    }
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn sample_dirichlet(rng: &mut ChaCha8Rng, n: usize, concentration: f64) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("validated concentration");
    loop {
        // Tiny concentrations can underflow every draw to zero.
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

fn sample_categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn unit_vector(v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v;
    }
    v.into_iter().map(|x| x / norm).collect()
}

fn build_truth(config: &GenerationConfig, rng: &mut ChaCha8Rng) -> TrueTaskModel {
    let num_states = config.num_states();
    let dim = config.feature_dim;
    let state_means = (0..num_states)
        .map(|_| (0..dim).map(|_| sample_normal(rng)).collect())
        .collect();
    let lm = BigramLm {
        start: sample_dirichlet(rng, config.vocab_size, config.bigram_concentration),
        transitions: (0..config.vocab_size)
            .map(|_| sample_dirichlet(rng, config.vocab_size, config.bigram_concentration))
            .collect(),
    };
    let common: Vec<f64> = unit_vector((0..dim).map(|_| sample_normal(rng)).collect());
    let batch_shifts = (0..config.num_batches)
        .map(|_| {
            let jitter = unit_vector((0..dim).map(|_| sample_normal(rng)).collect());
            let direction = unit_vector(
                common
                    .iter()
                    .zip(&jitter)
                    .map(|(c, j)| c + SHIFT_SPREAD * j)
                    .collect(),
            );
            direction
                .into_iter()
                .map(|d| d * config.batch_shift_magnitude)
                .collect()
        })
        .collect();
    TrueTaskModel {
        vocab_size: config.vocab_size,
        states_per_word: config.states_per_word,
        feature_dim: dim,
        state_means,
        silence_state: (config.silence_prob > 0.0).then_some(config.num_word_states()),
        emission_noise_sigma: config.emission_noise_sigma,
        self_loop_prob: config.self_loop_prob,
        lm,
        batch_shifts,
    }
}

fn sample_utterance(
    config: &GenerationConfig,
    truth: &TrueTaskModel,
    rng: &mut ChaCha8Rng,
    id: String,
    tag: BatchTag,
    shift: Option<&[f64]>,
) -> Utterance {
    let range = config.utterance_length_range;
    let length = rng.random_range(range.min..=range.max);
    let mut reference = Vec::with_capacity(length);
    let mut prev = None;
    for _ in 0..length {
        let probs = match prev {
            None => &truth.lm.start,
            Some(p) => &truth.lm.transitions[p],
        };
        let w = sample_categorical(rng, probs);
        reference.push(w);
        prev = Some(w);
    }

    let mut states = Vec::new();
    let mut emit = |state: usize, rng: &mut ChaCha8Rng| {
        states.push(state);
        while rng.random::<f64>() < config.self_loop_prob {
            states.push(state);
        }
    };
    for (i, &w) in reference.iter().enumerate() {
        if i > 0 {
            if let Some(sil) = truth.silence_state {
                if rng.random::<f64>() < config.silence_prob {
                    emit(sil, rng);
                }
            }
        }
        for j in 0..config.states_per_word {
            emit(truth.word_state(w, j), rng);
        }
    }

    let dim = config.feature_dim;
    let sigma = config.emission_noise_sigma;
    let mut data = Vec::with_capacity(states.len() * dim);
    for &s in &states {
        for d in 0..dim {
            let bias = shift.map_or(0.0, |b| b[d]);
            let x = truth.state_means[s][d] + bias + sigma * sample_normal(rng);
            data.push(x as f32);
        }
    }
    Utterance {
        id,
        frames: Frames { dim, data },
        reference,
        batch_tag: tag,
    }
}

/// Generates a corpus split and the generator that produced it.
/// Fully determined by `config` (including its seed).
pub fn generate_corpus(config: &GenerationConfig) -> Result<(CorpusSplit, TrueTaskModel)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let truth = build_truth(config, &mut rng);

    let labeled = (0..config.num_labeled)
        .map(|i| {
            sample_utterance(config, &truth, &mut rng, format!("lab-{i:05}"), BatchTag::Labeled, None)
        })
        .collect();
    let large_batches = (0..config.num_batches)
        .map(|b| {
            (0..config.batch_size)
                .map(|i| {
                    let tag = BatchTag::Batch(b);
                    let shift = truth.shift_for(tag, i).map(<[f64]>::to_vec);
                    sample_utterance(
                        config,
                        &truth,
                        &mut rng,
                        format!("b{}-{i:05}", b + 1),
                        tag,
                        shift.as_deref(),
                    )
                })
                .collect()
        })
        .collect();
    let eval_set = (0..config.num_eval)
        .map(|i| {
            let shift = truth.shift_for(BatchTag::Eval, i).map(<[f64]>::to_vec);
            sample_utterance(
                config,
                &truth,
                &mut rng,
                format!("eval-{i:05}"),
                BatchTag::Eval,
                shift.as_deref(),
            )
        })
        .collect();

    Ok((
        CorpusSplit {
            config: config.clone(),
            labeled,
            large_batches,
            eval_set,
        },
        truth,
    ))
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    labeled: Vec<String>,
    large_batches: Vec<Vec<String>>,
    eval: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusHeader {
    schema_version: u32,
    config: GenerationConfig,
    partitions: Manifest,
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Schema("corpus archive is truncated".into())
    } else {
        Error::Io(e)
    }
}

/// Writes the archive: magic, version, a JSON header (config echo and
/// partition manifest), then one binary record per utterance in manifest
/// order with little-endian `f32` frames and `u32` word ids.
pub fn save_corpus(split: &CorpusSplit, path: &Path) -> Result<()> {
    let ids = |v: &[Utterance]| v.iter().map(|u| u.id.clone()).collect::<Vec<_>>();
    let header = CorpusHeader {
        schema_version: CORPUS_SCHEMA_VERSION,
        config: split.config.clone(),
        partitions: Manifest {
            labeled: ids(&split.labeled),
            large_batches: split.large_batches.iter().map(|b| ids(b)).collect(),
            eval: ids(&split.eval_set),
        },
    };
    let header_json = serde_json::to_vec_pretty(&header)?;

    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(CORPUS_MAGIC)?;
    out.write_u32::<LittleEndian>(CORPUS_SCHEMA_VERSION)?;
    out.write_u64::<LittleEndian>(header_json.len() as u64)?;
    out.write_all(&header_json)?;
    for utt in split.all() {
        out.write_u32::<LittleEndian>(utt.id.len() as u32)?;
        out.write_all(utt.id.as_bytes())?;
        out.write_u32::<LittleEndian>(utt.frames.len() as u32)?;
        out.write_u32::<LittleEndian>(utt.frames.dim() as u32)?;
        for &x in utt.frames.as_slice() {
            out.write_f32::<LittleEndian>(x)?;
        }
        out.write_u32::<LittleEndian>(utt.reference.len() as u32)?;
        for &w in &utt.reference {
            out.write_u32::<LittleEndian>(w as u32)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_record(input: &mut impl Read, expected_dim: usize, tag: BatchTag, expected_id: &str) -> Result<Utterance> {
    let id_len = input.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    if id_len > 4096 {
        return Err(Error::Schema(format!("implausible id length {id_len}")));
    }
    let mut id = vec![0u8; id_len];
    input.read_exact(&mut id).map_err(truncated)?;
    let id = String::from_utf8(id).map_err(|_| Error::Schema("utterance id is not UTF-8".into()))?;
    if id != expected_id {
        return Err(Error::Schema(format!(
            "record {id} does not match manifest entry {expected_id}"
        )));
    }
    let num_frames = input.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let dim = input.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    if dim != expected_dim {
        return Err(Error::Shape {
            context: format!("frames of {id}"),
            expected: expected_dim,
            found: dim,
        });
    }
    let mut data = vec![0f32; num_frames * dim];
    input
        .read_f32_into::<LittleEndian>(&mut data)
        .map_err(truncated)?;
    let ref_len = input.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let mut words = vec![0u32; ref_len];
    input
        .read_u32_into::<LittleEndian>(&mut words)
        .map_err(truncated)?;
    Ok(Utterance {
        id,
        frames: Frames::new(dim, data)?,
        reference: words.into_iter().map(|w| w as usize).collect(),
        batch_tag: tag,
    })
}

pub fn load_corpus(path: &Path) -> Result<CorpusSplit> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(truncated)?;
    if &magic != CORPUS_MAGIC {
        return Err(Error::Schema("not a corpus archive (bad magic)".into()));
    }
    let version = input.read_u32::<LittleEndian>().map_err(truncated)?;
    if version != CORPUS_SCHEMA_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CORPUS_SCHEMA_VERSION,
        });
    }
    let header_len = input.read_u64::<LittleEndian>().map_err(truncated)? as usize;
    if header_len > 1 << 30 {
        return Err(Error::Schema(format!("implausible header length {header_len}")));
    }
    let mut header_bytes = vec![0u8; header_len];
    input.read_exact(&mut header_bytes).map_err(truncated)?;
    let header: CorpusHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Schema(format!("corpus header: {e}")))?;
    if header.schema_version != CORPUS_SCHEMA_VERSION {
        return Err(Error::Version {
            found: header.schema_version,
            expected: CORPUS_SCHEMA_VERSION,
        });
    }
    let dim = header.config.feature_dim;
    let mut read_part = |ids: &[String], tag: BatchTag| -> Result<Vec<Utterance>> {
        ids.iter()
            .map(|id| read_record(&mut input, dim, tag, id))
            .collect()
    };
    let labeled = read_part(&header.partitions.labeled, BatchTag::Labeled)?;
    let large_batches = header
        .partitions
        .large_batches
        .iter()
        .enumerate()
        .map(|(b, ids)| read_part(ids, BatchTag::Batch(b)))
        .collect::<Result<Vec<_>>>()?;
    let eval_set = read_part(&header.partitions.eval, BatchTag::Eval)?;

    let split = CorpusSplit {
        config: header.config,
        labeled,
        large_batches,
        eval_set,
    };
    let mut seen = HashSet::new();
    for utt in split.all() {
        if !seen.insert(utt.id.as_str()) {
            return Err(Error::Schema(format!("utterance id {} appears twice", utt.id)));
        }
    }
    Ok(split)
}
