//! Independent reference implementations used by the integration tests.
//! Nothing here calls into the code paths it checks.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A tiny decoding problem described without any crate types.
#[derive(Clone, Debug)]
pub struct TinyTask {
    pub word_states: Vec<Vec<usize>>,
    pub silence: Option<usize>,
    pub start: Vec<f64>,
    pub transitions: Vec<Vec<f64>>,
    pub lm_weight: f64,
    pub penalty: f64,
    /// scores[t][state]
    pub scores: Vec<Vec<f64>>,
}

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

impl TinyTask {
    pub fn random(seed: u64, max_vocab: usize, max_frames: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = rng.random_range(2..=max_vocab);
        let per_word = rng.random_range(1..=2usize);
        let with_silence = rng.random_bool(0.5);
        let word_states: Vec<Vec<usize>> = (0..vocab)
            .map(|w| (0..per_word).map(|j| w * per_word + j).collect())
            .collect();
        let silence = with_silence.then_some(vocab * per_word);
        let num_states = vocab * per_word + usize::from(with_silence);
        let frames = rng.random_range(per_word..=max_frames);
        TinyTask {
            start: random_distribution(&mut rng, vocab),
            transitions: (0..vocab).map(|_| random_distribution(&mut rng, vocab)).collect(),
            lm_weight: rng.random_range(0.0..2.0),
            penalty: rng.random_range(-1.0..1.0),
            scores: (0..frames)
                .map(|_| (0..num_states).map(|_| rng.random_range(-4.0..0.0)).collect())
                .collect(),
            word_states,
            silence,
        }
    }

    pub fn num_states(&self) -> usize {
        self.scores[0].len()
    }

    fn lm_score(&self, words: &[usize]) -> f64 {
        let mut total = 0.0;
        for (i, &w) in words.iter().enumerate() {
            let p = if i == 0 { self.start[w] } else { self.transitions[words[i - 1]][w] };
            total += self.lm_weight * p.ln() + self.penalty;
        }
        total
    }

    /// Every legal state sequence for `words`, as per-frame state ids.
    pub fn all_alignments(&self, words: &[usize]) -> Vec<Vec<usize>> {
        let frames = self.scores.len();
        let mut out = Vec::new();
        let gaps = words.len().saturating_sub(1);
        let patterns = if self.silence.is_some() { 1usize << gaps } else { 1 };
        for mask in 0..patterns {
            let mut chain = Vec::new();
            for (i, &w) in words.iter().enumerate() {
                if i > 0 && mask & (1 << (i - 1)) != 0 {
                    chain.push(self.silence.unwrap());
                }
                chain.extend(&self.word_states[w]);
            }
            if chain.len() > frames {
                continue;
            }
            // distribute frames over chain segments, each at least one frame
            let mut durations = vec![1usize; chain.len()];
            fn rec(
                chain: &[usize],
                durations: &mut Vec<usize>,
                idx: usize,
                remaining: usize,
                out: &mut Vec<Vec<usize>>,
            ) {
                if idx + 1 == chain.len() {
                    durations[idx] = 1 + remaining;
                    let mut path = Vec::new();
                    for (s, d) in chain.iter().zip(durations.iter()) {
                        path.extend(std::iter::repeat_n(*s, *d));
                    }
                    out.push(path);
                    return;
                }
                for extra in 0..=remaining {
                    durations[idx] = 1 + extra;
                    rec(chain, durations, idx + 1, remaining - extra, out);
                }
            }
            rec(&chain, &mut durations, 0, frames - chain.len(), &mut out);
        }
        out
    }

    pub fn acoustic(&self, path: &[usize]) -> f64 {
        path.iter().enumerate().map(|(t, &s)| self.scores[t][s]).sum()
    }

    /// Best alignment score of a fixed word sequence, by enumeration.
    pub fn best_alignment(&self, words: &[usize]) -> Option<(f64, Vec<usize>)> {
        self.all_alignments(words)
            .into_iter()
            .map(|p| (self.acoustic(&p), p))
            .max_by(|a, b| a.0.total_cmp(&b.0))
    }

    /// All word sequences with their best total score, sorted best first.
    pub fn ranked_sequences(&self) -> Vec<(Vec<usize>, f64)> {
        let vocab = self.word_states.len();
        let frames = self.scores.len();
        let min_len = self.word_states[0].len();
        let mut out = Vec::new();
        let mut len = 1;
        while len * min_len <= frames {
            let total = vocab.pow(len as u32);
            for code in 0..total {
                let mut c = code;
                let words: Vec<usize> = (0..len)
                    .map(|_| {
                        let w = c % vocab;
                        c /= vocab;
                        w
                    })
                    .collect();
                if let Some((ac, _)) = self.best_alignment(&words) {
                    out.push((words.clone(), ac + self.lm_score(&words)));
                }
            }
            len += 1;
        }
        out.sort_by(|a, b| b.1.total_cmp(&a.1));
        out
    }
}

/// Minimum edit distance by exhaustive enumeration of edit scripts.
/// Returns the best (total, substitutions, insertions, deletions), preferring
/// substitutions, then insertions, when totals tie.
pub fn exhaustive_edits(hyp: &[usize], reference: &[usize]) -> (usize, usize, usize, usize) {
    fn rec(h: &[usize], r: &[usize]) -> Vec<(usize, usize, usize)> {
        // all (S, I, D) reachable
        if h.is_empty() {
            return vec![(0, 0, r.len())];
        }
        if r.is_empty() {
            return vec![(0, h.len(), 0)];
        }
        let mut out = Vec::new();
        for (s, i, d) in rec(&h[1..], &r[1..]) {
            out.push((s + usize::from(h[0] != r[0]), i, d));
        }
        for (s, i, d) in rec(&h[1..], r) {
            out.push((s, i + 1, d));
        }
        for (s, i, d) in rec(h, &r[1..]) {
            out.push((s, i, d + 1));
        }
        out
    }
    let mut all = rec(hyp, reference);
    all.sort_by_key(|&(s, i, d)| (s + i + d, std::cmp::Reverse(s), std::cmp::Reverse(i)));
    let (s, i, d) = all[0];
    (s + i + d, s, i, d)
}

/// Central finite difference of `f` at `x` in coordinate `i`.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, step: f64) -> f64 {
    let mut plus = x.to_vec();
    let mut minus = x.to_vec();
    plus[i] += step;
    minus[i] -= step;
    (f(&plus) - f(&minus)) / (2.0 * step)
}
