//! Hybrid decoding over word HMMs and a bigram language model.
//!
//! A path is scored as the sum over frames of the scaled log-likelihood of
//! its acoustic state, plus `lm_weight * log P_LM(words)` plus
//! `insertion_penalty * |words|`. HMM transitions carry no score. An
//! optional silence state may sit between two words; it is expanded into one
//! copy per preceding word so the bigram context survives it.
//!
//! [`nbest_decode`] keeps, at every (frame, graph state), the `n` best tokens
//! with pairwise-distinct word histories. Because all tokens at a state share
//! their last word, any history displaced from that list is beaten by `n`
//! distinct completions with the same suffix, so the final list is the exact
//! top `n` of distinct word sequences.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};

use crate::acoustic_model::AcousticModel;
use crate::corpus::{BigramLm, Frames, TrueTaskModel};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub lm_weight: f64,
    pub insertion_penalty: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            lm_weight: 1.0,
            insertion_penalty: 0.0,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lm_weight.is_finite() && self.lm_weight >= 0.0) {
            return Err(Error::config("graph.lm_weight", "must be finite and non-negative"));
        }
        if !self.insertion_penalty.is_finite() {
            return Err(Error::config("graph.insertion_penalty", "must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NodeKind {
    Word { word: usize, position: usize, last: bool },
    Silence { after: usize },
}

#[derive(Clone, Copy, Debug)]
struct Node {
    kind: NodeKind,
    acoustic: usize,
}

#[derive(Clone, Debug)]
pub struct DecodeGraph {
    word_states: Vec<Vec<usize>>,
    silence_state: Option<usize>,
    log_start: Vec<f64>,
    log_transitions: Vec<Vec<f64>>,
    lm_weight: f64,
    insertion_penalty: f64,
    nodes: Vec<Node>,
    first_node: Vec<usize>,
    last_node: Vec<usize>,
    silence_node: Vec<Option<usize>>,
}

fn check_distribution(row: &[f64], what: &str) -> Result<()> {
    let total: f64 = row.iter().sum();
    if row.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-6 {
        return Err(Error::Validation(format!("{what} is not a probability distribution")));
    }
    Ok(())
}

impl DecodeGraph {
    /// `word_states[w]` lists the acoustic state ids of word `w`, left to right.
    pub fn new(
        word_states: Vec<Vec<usize>>,
        silence_state: Option<usize>,
        lm: &BigramLm,
        config: GraphConfig,
    ) -> Result<Self> {
        let vocab = word_states.len();
        if vocab == 0 {
            return Err(Error::Validation("decode graph needs at least one word".into()));
        }
        if let Some(w) = word_states.iter().position(Vec::is_empty) {
            return Err(Error::Validation(format!("word {w} has no states")));
        }
        if !(config.lm_weight >= 0.0 && config.lm_weight.is_finite()) {
            return Err(Error::config("lm_weight", "must be finite and nonnegative"));
        }
        if !config.insertion_penalty.is_finite() {
            return Err(Error::config("insertion_penalty", "must be finite"));
        }
        if lm.start.len() != vocab || lm.transitions.len() != vocab {
            return Err(Error::Shape {
                context: "bigram table".into(),
                expected: vocab,
                found: lm.transitions.len(),
            });
        }
        check_distribution(&lm.start, "LM start row")?;
        for (w, row) in lm.transitions.iter().enumerate() {
            if row.len() != vocab {
                return Err(Error::Shape {
                    context: format!("bigram row {w}"),
                    expected: vocab,
                    found: row.len(),
                });
            }
            check_distribution(row, &format!("LM row {w}"))?;
        }

        let mut nodes = Vec::new();
        let mut first_node = Vec::with_capacity(vocab);
        let mut last_node = Vec::with_capacity(vocab);
        for (w, chain) in word_states.iter().enumerate() {
            first_node.push(nodes.len());
            for (j, &s) in chain.iter().enumerate() {
                nodes.push(Node {
                    kind: NodeKind::Word {
                        word: w,
                        position: j,
                        last: j + 1 == chain.len(),
                    },
                    acoustic: s,
                });
            }
            last_node.push(nodes.len() - 1);
        }
        let silence_node = (0..vocab)
            .map(|w| {
                silence_state.map(|s| {
                    nodes.push(Node {
                        kind: NodeKind::Silence { after: w },
                        acoustic: s,
                    });
                    nodes.len() - 1
                })
            })
            .collect();

        Ok(DecodeGraph {
            word_states,
            silence_state,
            log_start: lm.start.iter().map(|p| p.ln()).collect(),
            log_transitions: lm
                .transitions
                .iter()
                .map(|row| row.iter().map(|p| p.ln()).collect())
                .collect(),
            lm_weight: config.lm_weight,
            insertion_penalty: config.insertion_penalty,
            nodes,
            first_node,
            last_node,
            silence_node,
        })
    }

    /// Graph for a generated task, using the generator's bigram table as the LM.
    pub fn from_truth(truth: &TrueTaskModel, config: GraphConfig) -> Result<Self> {
        let word_states = (0..truth.vocab_size)
            .map(|w| {
                (0..truth.states_per_word)
                    .map(|j| truth.word_state(w, j))
                    .collect()
            })
            .collect();
        DecodeGraph::new(word_states, truth.silence_state, &truth.lm, config)
    }

    pub fn vocab_size(&self) -> usize {
        self.word_states.len()
    }

    pub fn word_states(&self, word: usize) -> &[usize] {
        &self.word_states[word]
    }

    pub fn silence_state(&self) -> Option<usize> {
        self.silence_state
    }

    pub fn lm_weight(&self) -> f64 {
        self.lm_weight
    }

    pub fn insertion_penalty(&self) -> f64 {
        self.insertion_penalty
    }

    /// Largest acoustic state id referenced, plus one.
    pub fn num_acoustic_states(&self) -> usize {
        self.nodes.iter().map(|n| n.acoustic + 1).max().unwrap_or(0)
    }

    /// `lm_weight * log P(next | prev) + insertion_penalty`; `prev = None` is
    /// the sentence start.
    pub fn word_entry_score(&self, prev: Option<usize>, next: usize) -> f64 {
        let lp = match prev {
            None => self.log_start[next],
            Some(p) => self.log_transitions[p][next],
        };
        self.lm_weight * lp + self.insertion_penalty
    }

    /// Language-model and insertion part of a word sequence's score.
    pub fn language_score(&self, words: &[usize]) -> f64 {
        let mut prev = None;
        let mut total = 0.0;
        for &w in words {
            total += self.word_entry_score(prev, w);
            prev = Some(w);
        }
        total
    }

    fn check_scores(&self, scores: &Matrix<f64>) -> Result<()> {
        if scores.rows() == 0 {
            return Err(Error::Decode("utterance has no frames".into()));
        }
        let needed = self.num_acoustic_states();
        if scores.cols() < needed {
            return Err(Error::Shape {
                context: "acoustic score columns".into(),
                expected: needed,
                found: scores.cols(),
            });
        }
        if scores.as_slice().iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("acoustic scores contain NaN".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub words: Vec<usize>,
    /// Acoustic state id per frame.
    pub alignment: Vec<usize>,
    pub score: f64,
    /// 1-based position in the N-best list.
    pub rank: usize,
}

#[derive(Clone, Copy)]
struct Back {
    node: u32,
    entry: bool,
}

/// Best word sequence and alignment for a matrix of scaled log-likelihoods.
/// Exact ties go to the lowest predecessor graph state, self-loops first.
pub fn viterbi(scores: &Matrix<f64>, graph: &DecodeGraph) -> Result<Hypothesis> {
    graph.check_scores(scores)?;
    let n_frames = scores.rows();
    let n_nodes = graph.nodes.len();
    let mut prev = vec![f64::NEG_INFINITY; n_nodes];
    let mut cur = vec![f64::NEG_INFINITY; n_nodes];
    let mut back = vec![Back { node: u32::MAX, entry: true }; n_frames * n_nodes];

    for w in 0..graph.vocab_size() {
        let g = graph.first_node[w];
        prev[g] = graph.word_entry_score(None, w) + scores[(0, graph.nodes[g].acoustic)];
    }

    for t in 1..n_frames {
        let row = scores.row(t);
        for (g, node) in graph.nodes.iter().enumerate() {
            // (score, pred, entry); strictly-better replaces, so the first
            // candidate examined in ascending predecessor order wins ties.
            let mut best = (f64::NEG_INFINITY, u32::MAX, false);
            let mut consider = |s: f64, pred: usize, entry: bool| {
                let better = s > best.0
                    || (s == best.0
                        && s > f64::NEG_INFINITY
                        && ((pred as u32) < best.1 || (pred as u32 == best.1 && !entry && best.2)));
                if better {
                    best = (s, pred as u32, entry);
                }
            };
            match node.kind {
                NodeKind::Word { word, position, .. } => {
                    consider(prev[g], g, false);
                    if position > 0 {
                        consider(prev[g - 1], g - 1, false);
                    } else {
                        for w in 0..graph.vocab_size() {
                            let offset = graph.word_entry_score(Some(w), word);
                            consider(prev[graph.last_node[w]] + offset, graph.last_node[w], true);
                            if let Some(sil) = graph.silence_node[w] {
                                consider(prev[sil] + offset, sil, true);
                            }
                        }
                    }
                }
                NodeKind::Silence { after } => {
                    consider(prev[g], g, false);
                    consider(prev[graph.last_node[after]], graph.last_node[after], false);
                }
            }
            cur[g] = best.0 + row[node.acoustic];
            back[t * n_nodes + g] = Back {
                node: best.1,
                entry: best.2,
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }

    let mut end = None;
    for &g in &graph.last_node {
        if prev[g] > f64::NEG_INFINITY && end.is_none_or(|e: usize| prev[g] > prev[e] || (prev[g] == prev[e] && g < e)) {
            end = Some(g);
        }
    }
    let end = end.ok_or_else(|| {
        Error::Decode(format!("no complete path through {n_frames} frames"))
    })?;
    let score = prev[end];

    let mut alignment = vec![0; n_frames];
    let mut words = Vec::new();
    let mut g = end;
    for t in (0..n_frames).rev() {
        let node = graph.nodes[g];
        alignment[t] = node.acoustic;
        let b = back[t * n_nodes + g];
        if let NodeKind::Word { word, position: 0, .. } = node.kind {
            if t == 0 || b.entry {
                words.push(word);
            }
        }
        if t > 0 {
            g = b.node as usize;
        }
    }
    words.reverse();
    Ok(Hypothesis {
        words,
        alignment,
        score,
        rank: 1,
    })
}

/// Hash-consed word histories: node 0 is the empty history.
struct Histories {
    nodes: Vec<(u32, u32)>,
    index: HashMap<(u32, u32), u32>,
}

impl Histories {
    fn new() -> Self {
        Histories {
            nodes: vec![(u32::MAX, u32::MAX)],
            index: HashMap::new(),
        }
    }

    fn extend(&mut self, parent: u32, word: usize) -> u32 {
        let key = (parent, word as u32);
        if let Some(&id) = self.index.get(&key) {
            return id;
        }
        let id = self.nodes.len() as u32;
        self.nodes.push(key);
        self.index.insert(key, id);
        id
    }

    fn parent(&self, id: u32) -> u32 {
        self.nodes[id as usize].0
    }

    fn words(&self, mut id: u32) -> Vec<usize> {
        let mut out = Vec::new();
        while id != 0 {
            let (parent, word) = self.nodes[id as usize];
            out.push(word as usize);
            id = parent;
        }
        out.reverse();
        out
    }
}

#[derive(Clone, Copy, Debug)]
struct Token {
    score: f64,
    history: u32,
    node: u32,
    /// Index into the previous frame's token pool.
    pred: u32,
}

/// Candidate during a k-way merge; `key` identifies the resulting history.
#[derive(Clone, Copy)]
struct HeapItem {
    score: f64,
    list: u32,
    pos: u32,
}

impl PartialEq for HeapItem {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapItem {}
impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.list.cmp(&self.list))
            .then_with(|| other.pos.cmp(&self.pos))
    }
}

/// A sorted source list for the merge: tokens of the previous frame (by pool
/// index) with a constant score offset and a flag saying whether passing
/// through appends the target word.
struct Source<'a> {
    tokens: &'a [u32],
    offset: f64,
    entry: bool,
}

/// The `n` best distinct word sequences, best first.
pub fn nbest(scores: &Matrix<f64>, graph: &DecodeGraph, n: usize) -> Result<Vec<Hypothesis>> {
    if n == 0 {
        return Err(Error::Validation("n-best size must be at least 1".into()));
    }
    graph.check_scores(scores)?;
    let n_frames = scores.rows();
    let n_nodes = graph.nodes.len();
    let vocab = graph.vocab_size();
    let mut hist = Histories::new();

    // pools[t] holds all tokens of frame t; lists[g] indexes tokens of node g, best first.
    let mut pools: Vec<Vec<Token>> = Vec::with_capacity(n_frames);
    let mut prev_lists: Vec<Vec<u32>> = vec![Vec::new(); n_nodes];
    let mut pool0 = Vec::new();
    for w in 0..vocab {
        let g = graph.first_node[w];
        let score = graph.word_entry_score(None, w) + scores[(0, graph.nodes[g].acoustic)];
        prev_lists[g].push(pool0.len() as u32);
        pool0.push(Token {
            score,
            history: hist.extend(0, w),
            node: g as u32,
            pred: u32::MAX,
        });
    }
    pools.push(pool0);

    let mut heap = BinaryHeap::new();
    let mut keys: Vec<u32> = Vec::with_capacity(n);
    for t in 1..n_frames {
        let prev_pool = &pools[t - 1];
        // Exit list per word: tokens leaving the word directly or via its silence.
        let exits: Vec<Vec<u32>> = (0..vocab)
            .map(|w| {
                let direct = &prev_lists[graph.last_node[w]];
                match graph.silence_node[w] {
                    None => direct.clone(),
                    Some(sil) => {
                        let mut out = Vec::with_capacity(n);
                        let (mut i, mut j) = (0, 0);
                        let through_sil = &prev_lists[sil];
                        while out.len() < n && (i < direct.len() || j < through_sil.len()) {
                            let take_direct = j >= through_sil.len()
                                || (i < direct.len()
                                    && prev_pool[direct[i] as usize].score
                                        >= prev_pool[through_sil[j] as usize].score);
                            let idx = if take_direct {
                                i += 1;
                                direct[i - 1]
                            } else {
                                j += 1;
                                through_sil[j - 1]
                            };
                            let h = prev_pool[idx as usize].history;
                            if out.iter().all(|&o: &u32| prev_pool[o as usize].history != h) {
                                out.push(idx);
                            }
                        }
                        out
                    }
                }
            })
            .collect();

        let row = scores.row(t);
        let mut pool = Vec::new();
        let mut lists: Vec<Vec<u32>> = vec![Vec::new(); n_nodes];
        let mut sources: Vec<Source<'_>> = Vec::with_capacity(vocab + 2);
        for (g, node) in graph.nodes.iter().enumerate() {
            sources.clear();
            let target_word = match node.kind {
                NodeKind::Word { word, position, .. } => {
                    sources.push(Source { tokens: &prev_lists[g], offset: 0.0, entry: false });
                    if position > 0 {
                        sources.push(Source { tokens: &prev_lists[g - 1], offset: 0.0, entry: false });
                    } else {
                        for (w, exit) in exits.iter().enumerate() {
                            sources.push(Source {
                                tokens: exit,
                                offset: graph.word_entry_score(Some(w), word),
                                entry: true,
                            });
                        }
                    }
                    (position == 0).then_some(word)
                }
                NodeKind::Silence { after } => {
                    sources.push(Source { tokens: &prev_lists[g], offset: 0.0, entry: false });
                    sources.push(Source {
                        tokens: &prev_lists[graph.last_node[after]],
                        offset: 0.0,
                        entry: false,
                    });
                    None
                }
            };

            heap.clear();
            for (li, src) in sources.iter().enumerate() {
                if let Some(&first) = src.tokens.first() {
                    heap.push(HeapItem {
                        score: prev_pool[first as usize].score + src.offset,
                        list: li as u32,
                        pos: 0,
                    });
                }
            }
            keys.clear();
            while let Some(item) = heap.pop() {
                let src = &sources[item.list as usize];
                let idx = src.tokens[item.pos as usize];
                let tok = prev_pool[idx as usize];
                // At a word-initial node every surviving history has the form
                // parent + word, so the parent identifies it.
                let key = if src.entry {
                    tok.history
                } else if target_word.is_some() {
                    hist.parent(tok.history)
                } else {
                    tok.history
                };
                if !keys.contains(&key) {
                    keys.push(key);
                    let history = if src.entry {
                        hist.extend(tok.history, target_word.expect("entry targets a word start"))
                    } else {
                        tok.history
                    };
                    lists[g].push(pool.len() as u32);
                    pool.push(Token {
                        score: item.score + row[node.acoustic],
                        history,
                        node: g as u32,
                        pred: idx,
                    });
                    if keys.len() == n {
                        break;
                    }
                }
                let next = item.pos + 1;
                if (next as usize) < src.tokens.len() {
                    heap.push(HeapItem {
                        score: prev_pool[src.tokens[next as usize] as usize].score + src.offset,
                        list: item.list,
                        pos: next,
                    });
                }
            }
        }
        pools.push(pool);
        prev_lists = lists;
    }

    let last_pool = &pools[n_frames - 1];
    let mut finals: Vec<u32> = graph
        .last_node
        .iter()
        .flat_map(|&g| prev_lists[g].iter().copied())
        .filter(|&i| last_pool[i as usize].score > f64::NEG_INFINITY)
        .collect();
    if finals.is_empty() {
        return Err(Error::Decode(format!("no complete path through {n_frames} frames")));
    }
    // Stable sort keeps ascending node order among equal scores.
    finals.sort_by(|&a, &b| last_pool[b as usize].score.total_cmp(&last_pool[a as usize].score));
    let mut seen = Vec::new();
    let mut out = Vec::new();
    for idx in finals {
        let tok = last_pool[idx as usize];
        if seen.contains(&tok.history) {
            continue;
        }
        seen.push(tok.history);
        let mut alignment = vec![0; n_frames];
        let mut cursor = idx;
        for t in (0..n_frames).rev() {
            let tk = pools[t][cursor as usize];
            alignment[t] = graph.nodes[tk.node as usize].acoustic;
            cursor = tk.pred;
        }
        out.push(Hypothesis {
            words: hist.words(tok.history),
            alignment,
            score: tok.score,
            rank: out.len() + 1,
        });
        if out.len() == n {
            break;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForcedAlignment {
    /// Acoustic state id per frame.
    pub alignment: Vec<usize>,
    /// Sum of the per-frame scaled log-likelihoods along the alignment.
    pub acoustic_score: f64,
    /// Acoustic score plus the language and insertion terms of the words.
    pub total_score: f64,
}

/// Best alignment of exactly `words`, optional silence allowed between words.
pub fn align(scores: &Matrix<f64>, graph: &DecodeGraph, words: &[usize]) -> Result<ForcedAlignment> {
    if words.is_empty() {
        return Err(Error::Validation("cannot align an empty word sequence".into()));
    }
    if let Some(&w) = words.iter().find(|&&w| w >= graph.vocab_size()) {
        return Err(Error::Validation(format!("word {w} is not in the vocabulary")));
    }
    graph.check_scores(scores)?;

    // Expanded left-to-right sequence; `optional` marks skippable silences.
    let mut states = Vec::new();
    let mut optional = Vec::new();
    for (i, &w) in words.iter().enumerate() {
        if i > 0 {
            if let Some(sil) = graph.silence_state {
                states.push(sil);
                optional.push(true);
            }
        }
        for &s in &graph.word_states[w] {
            states.push(s);
            optional.push(false);
        }
    }
    let n_frames = scores.rows();
    let min_len = optional.iter().filter(|o| !**o).count();
    if n_frames < min_len {
        return Err(Error::Alignment(format!(
            "{n_frames} frames cannot cover {min_len} mandatory states"
        )));
    }

    let m = states.len();
    let mut prev = vec![f64::NEG_INFINITY; m];
    let mut cur = vec![f64::NEG_INFINITY; m];
    let mut back = vec![u32::MAX; n_frames * m];
    prev[0] = scores[(0, states[0])];
    for t in 1..n_frames {
        for j in 0..m {
            // Lowest predecessor position wins ties.
            let mut best = (f64::NEG_INFINITY, u32::MAX);
            let mut consider = |p: usize| {
                if prev[p] > best.0 {
                    best = (prev[p], p as u32);
                }
            };
            if j >= 2 && optional[j - 1] {
                consider(j - 2);
            }
            if j >= 1 {
                consider(j - 1);
            }
            consider(j);
            cur[j] = best.0 + scores[(t, states[j])];
            back[t * m + j] = best.1;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let acoustic_score = prev[m - 1];
    if !(acoustic_score > f64::NEG_INFINITY) {
        return Err(Error::Alignment("no legal alignment".into()));
    }
    let mut alignment = vec![0; n_frames];
    let mut j = m - 1;
    for t in (0..n_frames).rev() {
        alignment[t] = states[j];
        if t > 0 {
            j = back[t * m + j] as usize;
        }
    }
    Ok(ForcedAlignment {
        alignment,
        acoustic_score,
        total_score: acoustic_score + graph.language_score(words),
    })
}

pub fn viterbi_decode<T: Scalar>(
    model: &AcousticModel<T>,
    graph: &DecodeGraph,
    frames: &Frames,
) -> Result<Hypothesis> {
    viterbi(&model.scaled_log_likelihoods(frames)?, graph)
}

pub fn nbest_decode<T: Scalar>(
    model: &AcousticModel<T>,
    graph: &DecodeGraph,
    frames: &Frames,
    n: usize,
) -> Result<Vec<Hypothesis>> {
    nbest(&model.scaled_log_likelihoods(frames)?, graph, n)
}

pub fn force_align<T: Scalar>(
    model: &AcousticModel<T>,
    graph: &DecodeGraph,
    frames: &Frames,
    words: &[usize],
) -> Result<ForcedAlignment> {
    align(&model.scaled_log_likelihoods(frames)?, graph, words)
}

/// Run-length encoding of an alignment as `(state, frames)` pairs.
pub fn run_lengths(alignment: &[usize]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &s in alignment {
        match out.last_mut() {
            Some((state, len)) if *state == s => *len += 1,
            _ => out.push((s, 1)),
        }
    }
    out
}

/// Whether `alignment` walks the state chains of `words` in order using only
/// self-loops and advances, with optional silence between words.
pub fn is_legal_alignment(graph: &DecodeGraph, words: &[usize], alignment: &[usize]) -> bool {
    let mut states = Vec::new();
    let mut optional = Vec::new();
    for (i, &w) in words.iter().enumerate() {
        if i > 0 {
            if let Some(sil) = graph.silence_state {
                states.push(sil);
                optional.push(true);
            }
        }
        for &s in &graph.word_states[w] {
            states.push(s);
            optional.push(false);
        }
    }
    if states.is_empty() || alignment.is_empty() {
        return false;
    }
    let m = states.len();
    let mut reach = vec![false; m];
    reach[0] = alignment[0] == states[0];
    for &s in &alignment[1..] {
        let next: Vec<bool> = (0..m)
            .map(|j| {
                states[j] == s
                    && (reach[j]
                        || (j >= 1 && reach[j - 1])
                        || (j >= 2 && optional[j - 1] && reach[j - 2]))
            })
            .collect();
        reach = next;
    }
    reach[m - 1]
}
