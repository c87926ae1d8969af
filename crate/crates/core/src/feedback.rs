//! Word error rates and simulated hypothesis-selection feedback.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_length: usize,
    pub wer: f64,
}

impl WerBreakdown {
    pub fn new(substitutions: usize, insertions: usize, deletions: usize, reference_length: usize) -> Self {
        let errors = substitutions + insertions + deletions;
        WerBreakdown {
            substitutions,
            insertions,
            deletions,
            reference_length,
            wer: if reference_length == 0 {
                0.0
            } else {
                errors as f64 / reference_length as f64
            },
        }
    }

    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// Corpus-level breakdown: error counts and reference lengths are summed,
    /// then divided once.
    pub fn aggregate<'a>(parts: impl IntoIterator<Item = &'a WerBreakdown>) -> WerBreakdown {
        let (mut s, mut i, mut d, mut n) = (0, 0, 0, 0);
        for p in parts {
            s += p.substitutions;
            i += p.insertions;
            d += p.deletions;
            n += p.reference_length;
        }
        WerBreakdown::new(s, i, d, n)
    }
}

/// Edit cost ordered lexicographically: fewest edits, then most
/// substitutions, then most insertions.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Cost {
    edits: usize,
    neg_subs: isize,
    neg_ins: isize,
}

impl Cost {
    fn add(self, sub: bool, ins: bool, del: bool) -> Cost {
        Cost {
            edits: self.edits + usize::from(sub || ins || del),
            neg_subs: self.neg_subs - isize::from(sub),
            neg_ins: self.neg_ins - isize::from(ins),
        }
    }
}

/// Minimum edit distance with unit costs. Among equally short edit scripts
/// the one with the most substitutions, then the most insertions, is
/// reported.
pub fn word_error_rate<W: PartialEq>(hyp: &[W], reference: &[W]) -> Result<WerBreakdown> {
    if reference.is_empty() {
        return Err(Error::Validation("reference transcript is empty".into()));
    }
    let (n, m) = (reference.len(), hyp.len());
    let zero = Cost { edits: 0, neg_subs: 0, neg_ins: 0 };
    // table[i][j]: best cost aligning reference[..i] with hyp[..j]
    let mut table = vec![zero; (n + 1) * (m + 1)];
    let at = |i: usize, j: usize| i * (m + 1) + j;
    for i in 1..=n {
        table[at(i, 0)] = table[at(i - 1, 0)].add(false, false, true);
    }
    for j in 1..=m {
        table[at(0, j)] = table[at(0, j - 1)].add(false, true, false);
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = table[at(i - 1, j - 1)].add(reference[i - 1] != hyp[j - 1], false, false);
            let ins = table[at(i, j - 1)].add(false, true, false);
            let del = table[at(i - 1, j)].add(false, false, true);
            table[at(i, j)] = diag.min(ins).min(del);
        }
    }
    let best = table[at(n, m)];
    let subs = (-best.neg_subs) as usize;
    let ins = (-best.neg_ins) as usize;
    Ok(WerBreakdown::new(subs, ins, best.edits - subs - ins, n))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectionSource {
    Oracle,
    Noisy { p: f64 },
    Human,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// 1 when Candidate 1 was selected, 0 otherwise.
    pub r: u8,
    pub source: SelectionSource,
    pub candidate_wers: Option<(WerBreakdown, WerBreakdown)>,
}

impl Selection {
    pub fn human(candidate1_selected: bool) -> Self {
        Selection {
            r: u8::from(candidate1_selected),
            source: SelectionSource::Human,
            candidate_wers: None,
        }
    }

    pub fn candidate1_selected(&self) -> bool {
        self.r == 1
    }
}

/// Picks the candidate with the lower WER; an exact tie goes to Candidate 1.
pub fn oracle_select<W: PartialEq>(candidate1: &[W], candidate2: &[W], reference: &[W]) -> Result<Selection> {
    let w1 = word_error_rate(candidate1, reference)?;
    let w2 = word_error_rate(candidate2, reference)?;
    Ok(Selection {
        r: u8::from(w1.wer <= w2.wer),
        source: SelectionSource::Oracle,
        candidate_wers: Some((w1, w2)),
    })
}

/// Swaps the choice with probability `p`. Exactly one draw is taken from
/// `rng` per call, whatever `p` is.
pub fn noisy_select(selection: &Selection, p: f64, rng: &mut impl Rng) -> Result<Selection> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Validation(format!("selection error rate {p} outside [0, 1]")));
    }
    let u: f64 = rng.random();
    let flip = u < p;
    Ok(Selection {
        r: if flip { 1 - selection.r } else { selection.r },
        source: SelectionSource::Noisy { p },
        candidate_wers: selection.candidate_wers,
    })
}
