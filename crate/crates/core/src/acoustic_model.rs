//! Feed-forward state-posterior network with sigmoid hidden layers and a
//! softmax output over HMM states.
//!
//! All gradients here are in gradient-ascent orientation: they point in the
//! direction that increases the weighted log-likelihood, and [`sgd_step`]
//! adds them to the parameters.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Frames;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::{Layout, Scalar};

pub const MODEL_MAGIC: &[u8; 8] = b"HSMODEL\0";
pub const MODEL_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_PRIOR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub feature_dim: usize,
    /// Context half-width in frames; the input layer sees `2 * splice + 1` frames.
    pub splice: usize,
    pub hidden_layers: Vec<usize>,
    pub num_states: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            feature_dim: 20,
            splice: 2,
            hidden_layers: vec![64, 64],
            num_states: 91,
        }
    }
}

impl ArchConfig {
    pub fn input_dim(&self) -> usize {
        self.feature_dim * (2 * self.splice + 1)
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(&self.hidden_layers);
        sizes.push(self.num_states);
        sizes
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::config("arch.feature_dim", "must be at least 1"));
        }
        if self.num_states == 0 {
            return Err(Error::config("arch.num_states", "must be at least 1"));
        }
        if let Some(i) = self.hidden_layers.iter().position(|&h| h == 0) {
            return Err(Error::config(
                format!("arch.hidden_layers[{i}]"),
                "must be at least 1",
            ));
        }
        Ok(())
    }
}

/// One affine layer; `weights` is `inputs x outputs`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Layer<T> {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Layer {
            inputs,
            outputs,
            weights: vec![T::zero(); inputs * outputs],
            bias: vec![T::zero(); outputs],
        }
    }

    fn values(&self) -> impl Iterator<Item = &T> {
        self.weights.iter().chain(self.bias.iter())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcousticModel<T> {
    arch: ArchConfig,
    layers: Vec<Layer<T>>,
    priors: Vec<T>,
}

/// Gradient with the same layout as the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Gradient<T> {
    pub fn zeros_like(model: &AcousticModel<T>) -> Self {
        Gradient {
            layers: model
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &T> {
        self.layers.iter().flat_map(Layer::values)
    }

    pub fn to_flat(&self) -> Vec<T> {
        self.values().copied().collect()
    }

    pub fn norm(&self) -> T {
        self.values().map(|&g| g * g).sum::<T>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|g| g.is_finite())
    }

    pub fn scale(&mut self, factor: T) {
        for l in &mut self.layers {
            l.values_mut().for_each(|g| *g *= factor);
        }
    }

    /// Adds `other` into `self`, coordinate-wise.
    pub fn accumulate(&mut self, other: &Gradient<T>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, &y) in a.values_mut().zip(b.values()) {
                *x += y;
            }
        }
    }
}

/// One utterance's contribution to a weighted cross-entropy gradient.
#[derive(Clone, Copy, Debug)]
pub struct FrameGradientRequest<'a, T> {
    pub utterance_id: &'a str,
    pub frames: &'a Frames,
    /// One state id per frame.
    pub labels: &'a [usize],
    pub weight: T,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Row-wise log-softmax, in place.
fn log_softmax_rows<T: Scalar>(data: &mut [T], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
        row.iter_mut().for_each(|z| *z -= lse);
    }
}

/// Stacks `2 * splice + 1` neighbouring frames per row, replicating edge frames.
pub fn splice_frames<T: Scalar>(frames: &Frames, splice: usize) -> Vec<T> {
    let n = frames.len();
    let dim = frames.dim();
    let width = dim * (2 * splice + 1);
    let mut out = Vec::with_capacity(n * width);
    for t in 0..n {
        for offset in 0..=2 * splice {
            let src = (t + offset).saturating_sub(splice).min(n - 1);
            out.extend(frames.row(src).iter().map(|&x| T::from_f64_lossy(x as f64)));
        }
    }
    out
}

/// Initializes weights uniformly in `±sqrt(3 / fan_in)` (variance `1 / fan_in`),
/// zero biases, and uniform priors.
pub fn init_model<T: Scalar>(arch: &ArchConfig, seed: u64) -> Result<AcousticModel<T>> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = arch.layer_sizes();
    let layers = sizes
        .windows(2)
        .map(|w| {
            let (inputs, outputs) = (w[0], w[1]);
            let bound = (3.0 / inputs as f64).sqrt();
            let weights = (0..inputs * outputs)
                .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
                .collect();
            Layer {
                inputs,
                outputs,
                weights,
                bias: vec![T::zero(); outputs],
            }
        })
        .collect();
    let uniform = T::from_f64_lossy(1.0 / arch.num_states as f64);
    Ok(AcousticModel {
        arch: arch.clone(),
        layers,
        priors: vec![uniform; arch.num_states],
    })
}

impl<T: Scalar> AcousticModel<T> {
    /// All weights and biases zero; posteriors are uniform for any input.
    pub fn zeros(arch: &ArchConfig) -> Result<Self> {
        arch.validate()?;
        let sizes = arch.layer_sizes();
        let uniform = T::from_f64_lossy(1.0 / arch.num_states as f64);
        Ok(AcousticModel {
            arch: arch.clone(),
            layers: sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
            priors: vec![uniform; arch.num_states],
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn num_states(&self) -> usize {
        self.arch.num_states
    }

    pub fn priors(&self) -> &[T] {
        &self.priors
    }

    pub fn set_priors(&mut self, priors: Vec<T>) -> Result<()> {
        if priors.len() != self.arch.num_states {
            return Err(Error::Shape {
                context: "state priors".into(),
                expected: self.arch.num_states,
                found: priors.len(),
            });
        }
        let total: f64 = priors.iter().map(|p| p.to_f64_lossy()).sum();
        if priors.iter().any(|&p| !(p > T::zero())) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(
                "priors must be positive and sum to one".into(),
            ));
        }
        self.priors = priors;
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Weights then biases, layer by layer; the same order as [`Gradient::to_flat`].
    pub fn parameters(&self) -> Vec<T> {
        self.layers.iter().flat_map(Layer::values).copied().collect()
    }

    pub fn parameter_mut(&mut self, index: usize) -> Option<&mut T> {
        self.layers.iter_mut().flat_map(Layer::values_mut).nth(index)
    }

    fn check_frames(&self, frames: &Frames) -> Result<()> {
        if frames.dim() != self.arch.feature_dim {
            return Err(Error::Shape {
                context: "frame dimension".into(),
                expected: self.arch.feature_dim,
                found: frames.dim(),
            });
        }
        if frames.is_empty() {
            return Err(Error::Validation("utterance has no frames".into()));
        }
        Ok(())
    }

    /// Layer activations: input, each sigmoid layer, then output logits.
    fn activations(&self, frames: &Frames) -> Vec<Vec<T>> {
        self.activations_from(splice_frames::<T>(frames, self.arch.splice), frames.len())
    }

    fn activations_from(&self, input: Vec<T>, n: usize) -> Vec<Vec<T>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input);
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(n * layer.outputs);
            for _ in 0..n {
                z.extend_from_slice(&layer.bias);
            }
            T::gemm(
                n,
                layer.inputs,
                layer.outputs,
                T::one(),
                acts.last().unwrap(),
                Layout::Plain,
                &layer.weights,
                Layout::Plain,
                T::one(),
                &mut z,
            );
            if i + 1 < self.layers.len() {
                z.iter_mut().for_each(|v| *v = sigmoid(*v));
            }
            acts.push(z);
        }
        acts
    }

    /// Per-frame log state posteriors, `num_frames x num_states`.
    pub fn log_posteriors(&self, frames: &Frames) -> Result<Matrix<T>> {
        self.check_frames(frames)?;
        let mut logits = self.activations(frames).pop().unwrap();
        log_softmax_rows(&mut logits, self.arch.num_states);
        Ok(Matrix::from_vec(frames.len(), self.arch.num_states, logits))
    }

    /// Per-frame `log P(state | frame) - log prior(state)`, the hybrid
    /// acoustic score used by the decoder.
    pub fn scaled_log_likelihoods(&self, frames: &Frames) -> Result<Matrix<f64>> {
        let logp = self.log_posteriors(frames)?;
        let log_priors: Vec<f64> = self.priors.iter().map(|p| p.to_f64_lossy().ln()).collect();
        let mut out = logp.map(|x| x.to_f64_lossy());
        for t in 0..out.rows() {
            for (x, lp) in out.row_mut(t).iter_mut().zip(&log_priors) {
                *x -= lp;
            }
        }
        Ok(out)
    }

    /// Sum over frames of `log P(labels[t] | frame t)`.
    pub fn log_likelihood(&self, frames: &Frames, labels: &[usize]) -> Result<T> {
        let logp = self.log_posteriors(frames)?;
        check_labels("", frames, labels, self.arch.num_states)?;
        Ok(labels
            .iter()
            .enumerate()
            .map(|(t, &l)| logp[(t, l)])
            .sum())
    }

    /// In-place form of [`sgd_step`]. Returns the factor the gradient was
    /// scaled by before being applied (1 when no clipping happened).
    pub fn apply_sgd(&mut self, gradient: &Gradient<T>, learning_rate: T, clip_norm: Option<T>) -> Result<T> {
        if !(learning_rate > T::zero()) {
            return Err(Error::Validation(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if gradient.layers.len() != self.layers.len()
            || gradient
                .layers
                .iter()
                .zip(&self.layers)
                .any(|(g, l)| g.weights.len() != l.weights.len() || g.bias.len() != l.bias.len())
        {
            return Err(Error::Shape {
                context: "gradient layout".into(),
                expected: self.num_parameters(),
                found: gradient.values().count(),
            });
        }
        if !gradient.is_finite() {
            return Err(Error::Numeric("non-finite gradient; update refused".into()));
        }
        let norm = gradient.norm();
        let clip_scale = match clip_norm {
            Some(c) if norm > c => c / norm,
            _ => T::one(),
        };
        let step = learning_rate * clip_scale;
        for (layer, g) in self.layers.iter_mut().zip(&gradient.layers) {
            for (w, &d) in layer.values_mut().zip(g.values()) {
                if d != T::zero() {
                    *w += step * d;
                }
            }
        }
        Ok(clip_scale)
    }
}

fn check_labels(utterance: &str, frames: &Frames, labels: &[usize], num_states: usize) -> Result<()> {
    if labels.len() != frames.len() {
        return Err(Error::Shape {
            context: format!("labels of utterance {utterance}"),
            expected: frames.len(),
            found: labels.len(),
        });
    }
    if let Some(t) = labels.iter().position(|&l| l >= num_states) {
        return Err(Error::Validation(format!(
            "utterance {utterance}: frame {t} has state label {} but the model has {num_states} states",
            labels[t]
        )));
    }
    Ok(())
}

/// Per-frame state posteriors, `num_frames x num_states`; each row sums to one.
pub fn forward_posteriors<T: Scalar>(model: &AcousticModel<T>, frames: &Frames) -> Result<Matrix<T>> {
    Ok(model.log_posteriors(frames)?.map(|x| x.exp()))
}

/// `sum_req w_req * sum_t d log P(l_t | s_t) / d theta`.
///
/// Consecutive requests that borrow the same frame buffer share one
/// forward pass; groups whose weights are all zero are skipped. All frames
/// of the remaining groups are stacked into one batch, so the result is a
/// deterministic function of the request slice.
pub fn weighted_ce_gradient<T: Scalar>(
    model: &AcousticModel<T>,
    requests: &[FrameGradientRequest<'_, T>],
) -> Result<Gradient<T>> {
    for req in requests {
        model.check_frames(req.frames)?;
        check_labels(req.utterance_id, req.frames, req.labels, model.arch.num_states)?;
    }
    let mut groups = Vec::new();
    let mut start = 0;
    while start < requests.len() {
        let mut end = start + 1;
        while end < requests.len() && std::ptr::eq(requests[end].frames, requests[start].frames) {
            end += 1;
        }
        let group = &requests[start..end];
        start = end;
        if group.iter().any(|r| r.weight != T::zero()) {
            groups.push(group);
        }
    }
    let mut grad = Gradient::zeros_like(model);
    if !groups.is_empty() {
        accumulate_groups(model, &groups, &mut grad);
    }
    Ok(grad)
}

fn accumulate_groups<T: Scalar>(
    model: &AcousticModel<T>,
    groups: &[&[FrameGradientRequest<'_, T>]],
    grad: &mut Gradient<T>,
) {
    let n: usize = groups.iter().map(|g| g[0].frames.len()).sum();
    let states = model.arch.num_states;
    let mut input = Vec::with_capacity(n * model.arch.input_dim());
    for g in groups {
        input.extend(splice_frames::<T>(g[0].frames, model.arch.splice));
    }
    let mut acts = model.activations_from(input, n);

    // d/dz sum_r w_r log softmax(z)[l_r] = sum_r w_r onehot(l_r) - (sum_r w_r) p
    let mut delta = acts.pop().unwrap();
    log_softmax_rows(&mut delta, states);
    let mut offset = 0;
    for group in groups {
        let len = group[0].frames.len();
        let total_weight: T = group.iter().map(|r| r.weight).sum();
        let block = &mut delta[offset * states..(offset + len) * states];
        block.iter_mut().for_each(|z| *z = -total_weight * z.exp());
        for req in group.iter() {
            for (t, &l) in req.labels.iter().enumerate() {
                block[t * states + l] += req.weight;
            }
        }
        offset += len;
    }

    for (li, layer) in model.layers.iter().enumerate().rev() {
        let input = &acts[li];
        let g = &mut grad.layers[li];
        T::gemm(
            layer.inputs,
            n,
            layer.outputs,
            T::one(),
            input,
            Layout::Transposed,
            &delta,
            Layout::Plain,
            T::one(),
            &mut g.weights,
        );
        for row in delta.chunks(layer.outputs) {
            for (b, &d) in g.bias.iter_mut().zip(row) {
                *b += d;
            }
        }
        if li > 0 {
            let mut back = vec![T::zero(); n * layer.inputs];
            T::gemm(
                n,
                layer.outputs,
                layer.inputs,
                T::one(),
                &delta,
                Layout::Plain,
                &layer.weights,
                Layout::Transposed,
                T::zero(),
                &mut back,
            );
            for (d, &a) in back.iter_mut().zip(input) {
                *d *= a * (T::one() - a);
            }
            delta = back;
        }
    }
}

/// `theta + learning_rate * g`, after scaling `g` down to `clip_norm` when its
/// global norm exceeds it. Priors are left untouched. A non-finite gradient
/// is refused.
pub fn sgd_step<T: Scalar>(
    model: &AcousticModel<T>,
    gradient: &Gradient<T>,
    learning_rate: T,
    clip_norm: Option<T>,
) -> Result<AcousticModel<T>> {
    let mut next = model.clone();
    next.apply_sgd(gradient, learning_rate, clip_norm)?;
    Ok(next)
}

/// Floored state frequencies: `floor + (1 - S * floor) * count / total`.
/// A state that never occurs gets exactly `floor`.
pub fn estimate_priors<'a, T: Scalar>(
    alignments: impl IntoIterator<Item = &'a [usize]>,
    num_states: usize,
    floor: f64,
) -> Result<Vec<T>> {
    if !(floor >= 0.0) || floor * num_states as f64 >= 1.0 {
        return Err(Error::config("prior_floor", "need 0 <= floor < 1 / num_states"));
    }
    let mut counts = vec![0u64; num_states];
    let mut total = 0u64;
    for alignment in alignments {
        for &s in alignment {
            if s >= num_states {
                return Err(Error::Validation(format!(
                    "alignment state {s} out of range for {num_states} states"
                )));
            }
            counts[s] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Validation("cannot estimate priors from an empty alignment set".into()));
    }
    let mass = 1.0 - num_states as f64 * floor;
    Ok(counts
        .into_iter()
        .map(|c| T::from_f64_lossy(floor + mass * c as f64 / total as f64))
        .collect())
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    schema_version: u32,
    scalar_bits: u32,
    arch: ArchConfig,
}

/// Serializes the model: magic, version, JSON architecture header, then every
/// tensor and the priors as little-endian `f64`.
pub fn write_model<T: Scalar>(model: &AcousticModel<T>, out: &mut impl Write) -> Result<()> {
    let header = ModelHeader {
        schema_version: MODEL_SCHEMA_VERSION,
        scalar_bits: (std::mem::size_of::<T>() * 8) as u32,
        arch: model.arch.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(MODEL_MAGIC)?;
    out.write_u32::<LittleEndian>(MODEL_SCHEMA_VERSION)?;
    out.write_u64::<LittleEndian>(json.len() as u64)?;
    out.write_all(&json)?;
    out.write_u32::<LittleEndian>(model.layers.len() as u32)?;
    for layer in &model.layers {
        out.write_u32::<LittleEndian>(layer.inputs as u32)?;
        out.write_u32::<LittleEndian>(layer.outputs as u32)?;
        for &v in layer.values() {
            out.write_f64::<LittleEndian>(v.to_f64_lossy())?;
        }
    }
    out.write_u32::<LittleEndian>(model.priors.len() as u32)?;
    for &p in &model.priors {
        out.write_f64::<LittleEndian>(p.to_f64_lossy())?;
    }
    Ok(())
}

pub fn model_bytes<T: Scalar>(model: &AcousticModel<T>) -> Vec<u8> {
    let mut buf = Vec::new();
    write_model(model, &mut buf).expect("writing to memory cannot fail");
    buf
}

pub fn save_model<T: Scalar>(model: &AcousticModel<T>, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_model(model, &mut out)?;
    out.flush()?;
    Ok(())
}

fn eof_is_schema(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Schema("model file is truncated".into())
    } else {
        Error::Io(e)
    }
}

pub fn read_model<T: Scalar>(input: &mut impl Read) -> Result<AcousticModel<T>> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(eof_is_schema)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Schema("not a model file (bad magic)".into()));
    }
    let version = input.read_u32::<LittleEndian>().map_err(eof_is_schema)?;
    if version != MODEL_SCHEMA_VERSION {
        return Err(Error::Version {
            found: version,
            expected: MODEL_SCHEMA_VERSION,
        });
    }
    let len = input.read_u64::<LittleEndian>().map_err(eof_is_schema)? as usize;
    if len > 1 << 20 {
        return Err(Error::Schema(format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len];
    input.read_exact(&mut json).map_err(eof_is_schema)?;
    let header: ModelHeader =
        serde_json::from_slice(&json).map_err(|e| Error::Schema(format!("model header: {e}")))?;
    header.arch.validate()?;
    let sizes = header.arch.layer_sizes();
    let num_layers = input.read_u32::<LittleEndian>().map_err(eof_is_schema)? as usize;
    if num_layers + 1 != sizes.len() {
        return Err(Error::Schema(format!(
            "model declares {num_layers} layers but its architecture has {}",
            sizes.len() - 1
        )));
    }
    let mut layers = Vec::with_capacity(num_layers);
    for w in sizes.windows(2) {
        let inputs = input.read_u32::<LittleEndian>().map_err(eof_is_schema)? as usize;
        let outputs = input.read_u32::<LittleEndian>().map_err(eof_is_schema)? as usize;
        if (inputs, outputs) != (w[0], w[1]) {
            return Err(Error::Schema(format!(
                "layer shape {inputs}x{outputs} does not match architecture {}x{}",
                w[0], w[1]
            )));
        }
        let mut buf = vec![0f64; inputs * outputs + outputs];
        input.read_f64_into::<LittleEndian>(&mut buf).map_err(eof_is_schema)?;
        let bias = buf.split_off(inputs * outputs);
        layers.push(Layer {
            inputs,
            outputs,
            weights: buf.into_iter().map(T::from_f64_lossy).collect(),
            bias: bias.into_iter().map(T::from_f64_lossy).collect(),
        });
    }
    let num_priors = input.read_u32::<LittleEndian>().map_err(eof_is_schema)? as usize;
    if num_priors != header.arch.num_states {
        return Err(Error::Schema("prior vector length differs from state count".into()));
    }
    let mut priors = vec![0f64; num_priors];
    input.read_f64_into::<LittleEndian>(&mut priors).map_err(eof_is_schema)?;
    Ok(AcousticModel {
        arch: header.arch,
        layers,
        priors: priors.into_iter().map(T::from_f64_lossy).collect(),
    })
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<AcousticModel<T>> {
    read_model(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assume, proptest, ProptestConfig};

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            feature_dim: 3,
            splice: 1,
            hidden_layers: vec![4],
            num_states: 2,
        }
    }

    fn frames(n: usize, dim: usize, seed: u64) -> Frames {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Frames::new(dim, (0..n * dim).map(|_| rng.random_range(-2.0f32..2.0)).collect()).unwrap()
    }

    #[test]
    fn same_seed_same_parameters() {
        let a: AcousticModel<f64> = init_model(&tiny_arch(), 3).unwrap();
        let b: AcousticModel<f64> = init_model(&tiny_arch(), 3).unwrap();
        let c: AcousticModel<f64> = init_model(&tiny_arch(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_model_posteriors_are_uniform() {
        let arch = ArchConfig {
            num_states: 5,
            ..tiny_arch()
        };
        let model = AcousticModel::<f64>::zeros(&arch).unwrap();
        let post = forward_posteriors(&model, &frames(7, 3, 1)).unwrap();
        for t in 0..7 {
            for &p in post.row(t) {
                assert!((p - 0.2).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn init_variance_scales_with_fan_in() {
        // Second layer fan-in is the first hidden width.
        let var_of_second_layer = |width: usize| {
            let arch = ArchConfig {
                feature_dim: 2,
                splice: 0,
                hidden_layers: vec![width, 1000],
                num_states: 2,
            };
            let m: AcousticModel<f64> = init_model(&arch, 9).unwrap();
            let w = &m.layers()[1].weights;
            w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64
        };
        let v100 = var_of_second_layer(100);
        let v200 = var_of_second_layer(200);
        assert!((v100 - 0.01).abs() < 0.01 * 0.03, "{v100}");
        assert!((v100 / v200 - 2.0).abs() < 0.05, "{}", v100 / v200);
    }

    #[test]
    fn wrong_frame_dim_is_shape_error() {
        let model: AcousticModel<f64> = init_model(&tiny_arch(), 1).unwrap();
        assert!(matches!(
            forward_posteriors(&model, &frames(3, 4, 1)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn logits_match_straight_line_forward() {
        let arch = ArchConfig {
            feature_dim: 2,
            splice: 1,
            hidden_layers: vec![3, 2],
            num_states: 3,
        };
        let model: AcousticModel<f64> = init_model(&arch, 5).unwrap();
        let fr = frames(4, 2, 8);
        let t = 0; // left edge exercises replication
        let mut x: Vec<f64> = Vec::new();
        for src in [0usize, 0, 1] {
            x.extend(fr.row(src).iter().map(|&v| v as f64));
        }
        let mut a = x;
        for (li, layer) in model.layers().iter().enumerate() {
            let mut z = vec![0.0; layer.outputs];
            for j in 0..layer.outputs {
                z[j] = layer.bias[j];
                for i in 0..layer.inputs {
                    z[j] += a[i] * layer.weights[i * layer.outputs + j];
                }
            }
            if li + 1 < model.layers().len() {
                z = z.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
            }
            a = z;
        }
        let denom: f64 = a.iter().map(|z| z.exp()).sum();
        let post = forward_posteriors(&model, &fr).unwrap();
        for j in 0..3 {
            assert!((post[(t, j)] - a[j].exp() / denom).abs() < 1e-10);
        }
    }

    #[test]
    fn label_out_of_range_names_utterance_and_frame() {
        let model: AcousticModel<f64> = init_model(&tiny_arch(), 1).unwrap();
        let fr = frames(3, 3, 1);
        let labels = [0, 5, 1];
        let req = FrameGradientRequest {
            utterance_id: "utt-7",
            frames: &fr,
            labels: &labels,
            weight: 1.0,
        };
        match weighted_ce_gradient(&model, &[req]) {
            Err(Error::Validation(msg)) => {
                assert!(msg.contains("utt-7") && msg.contains("frame 1"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_weight_gives_zero_gradient_and_negation_is_linear() {
        let model: AcousticModel<f64> = init_model(&tiny_arch(), 2).unwrap();
        let fr = frames(5, 3, 3);
        let labels = [0, 1, 1, 0, 1];
        let req = |w| FrameGradientRequest {
            utterance_id: "u",
            frames: &fr,
            labels: &labels,
            weight: w,
        };
        let g0 = weighted_ce_gradient(&model, &[req(0.0)]).unwrap();
        assert!(g0.values().all(|&g| g == 0.0));
        let gp = weighted_ce_gradient(&model, &[req(1.0)]).unwrap();
        let gn = weighted_ce_gradient(&model, &[req(-1.0)]).unwrap();
        for (a, b) in gp.values().zip(gn.values()) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn fused_requests_equal_separate_passes() {
        let model: AcousticModel<f64> = init_model(&tiny_arch(), 2).unwrap();
        let fr = frames(5, 3, 3);
        let fr_copy = fr.clone();
        let la = [0, 1, 1, 0, 1];
        let lb = [1, 1, 0, 0, 0];
        let fused = weighted_ce_gradient(
            &model,
            &[
                FrameGradientRequest { utterance_id: "u", frames: &fr, labels: &la, weight: 1.0 },
                FrameGradientRequest { utterance_id: "u", frames: &fr, labels: &lb, weight: -0.5 },
            ],
        )
        .unwrap();
        let separate = weighted_ce_gradient(
            &model,
            &[
                FrameGradientRequest { utterance_id: "u", frames: &fr, labels: &la, weight: 1.0 },
                FrameGradientRequest { utterance_id: "u", frames: &fr_copy, labels: &lb, weight: -0.5 },
            ],
        )
        .unwrap();
        for (a, b) in fused.values().zip(separate.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_zero_gradient_is_identity() {
        let model: AcousticModel<f64> = init_model(&tiny_arch(), 2).unwrap();
        let g = Gradient::zeros_like(&model);
        let next = sgd_step(&model, &g, 0.004, Some(5.0)).unwrap();
        assert_eq!(model_bytes(&model), model_bytes(&next));
    }

    #[test]
    fn sgd_moves_coordinate_by_learning_rate() {
        let model: AcousticModel<f64> = init_model(&tiny_arch(), 2).unwrap();
        let mut g = Gradient::zeros_like(&model);
        g.layers[0].weights[3] = 1.0;
        let next = sgd_step(&model, &g, 0.004, Some(5.0)).unwrap();
        let delta = next.layers()[0].weights[3] - model.layers()[0].weights[3];
        assert!((delta - 0.004).abs() < 1e-15);
        assert_eq!(next.priors(), model.priors());
    }

    #[test]
    fn clipping_limits_update_norm() {
        let model: AcousticModel<f64> = init_model(&tiny_arch(), 2).unwrap();
        let mut g = Gradient::zeros_like(&model);
        // norm 10 spread over two coordinates
        g.layers[0].weights[0] = 6.0;
        g.layers[1].bias[1] = 8.0;
        let next = sgd_step(&model, &g, 0.01, Some(1.0)).unwrap();
        let applied: f64 = next
            .parameters()
            .iter()
            .zip(model.parameters())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!((applied - 0.01).abs() < 1e-9, "{applied}");
    }

    #[test]
    fn non_finite_gradient_refused() {
        let mut model: AcousticModel<f64> = init_model(&tiny_arch(), 2).unwrap();
        let before = model.clone();
        let mut g = Gradient::zeros_like(&model);
        g.layers[0].bias[0] = f64::NAN;
        assert!(matches!(model.apply_sgd(&g, 0.1, None), Err(Error::Numeric(_))));
        assert_eq!(model, before);
        assert!(matches!(
            sgd_step(&model, &Gradient::zeros_like(&model), 0.0, None),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn priors_normalize_with_floor() {
        let counts: Vec<Vec<usize>> = vec![vec![0, 0, 0, 1]];
        let p: Vec<f64> = estimate_priors(counts.iter().map(Vec::as_slice), 2, 0.0).unwrap();
        assert_eq!(p, vec![0.75, 0.25]);
        let p: Vec<f64> = estimate_priors(counts.iter().map(Vec::as_slice), 3, 1e-3).unwrap();
        assert_eq!(p[2], 1e-3);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let empty: Vec<&[usize]> = vec![];
        assert!(estimate_priors::<f64>(empty, 3, 1e-3).is_err());
    }

    #[test]
    fn model_file_round_trip_and_version_check() {
        let model: AcousticModel<f64> = init_model(&tiny_arch(), 2).unwrap();
        let bytes = model_bytes(&model);
        let back: AcousticModel<f64> = read_model(&mut bytes.as_slice()).unwrap();
        assert_eq!(model, back);
        let mut bad = bytes.clone();
        bad[8..12].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(
            read_model::<f64>(&mut bad.as_slice()),
            Err(Error::Version { found: 9, .. })
        ));
        assert!(matches!(
            read_model::<f64>(&mut &bytes[..bytes.len() - 3]),
            Err(Error::Schema(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn posterior_rows_are_distributions(seed in 0u64..1000, n in 1usize..6) {
            let model: AcousticModel<f64> = init_model(&tiny_arch(), seed).unwrap();
            let post = forward_posteriors(&model, &frames(n, 3, seed + 1)).unwrap();
            for t in 0..n {
                let s: f64 = post.row(t).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                prop_assert!(post.row(t).iter().all(|&p| p > 0.0 && p < 1.0));
            }
        }

        #[test]
        fn priors_always_sum_to_one(counts in proptest::collection::vec(0usize..50, 1..12)) {
            let alignment: Vec<usize> = counts
                .iter()
                .enumerate()
                .flat_map(|(s, &c)| std::iter::repeat_n(s, c))
                .collect();
            prop_assume!(!alignment.is_empty());
            let p: Vec<f64> = estimate_priors([alignment.as_slice()], counts.len(), 1e-8).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&x| x >= 1e-8));
        }
    }
}
