//! Ticket issuance and answer bookkeeping for one interactive stage.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use hypsel_core::feedback::{Selection, SelectionSource};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::log::{LogEntry, SelectionLog};
use crate::ServiceError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    Left,
    Right,
}

/// One candidate pair awaiting a human answer.
#[derive(Clone, Debug, PartialEq)]
pub struct PairItem {
    pub utterance_id: String,
    pub candidate1: Vec<usize>,
    pub candidate2: Vec<usize>,
    /// Reference WERs of the two candidates, shown only by debug status.
    pub oracle_wers: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairTicket {
    pub ticket: String,
    pub utterance_id: String,
    pub left: String,
    pub right: String,
    pub stage: usize,
    /// Milliseconds since the Unix epoch.
    pub issued_at_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub ticket: String,
    pub remaining: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionStatus {
    pub active: bool,
    pub stage: Option<usize>,
    pub total: usize,
    pub unserved: usize,
    pub pending: usize,
    pub answered: usize,
    /// Pairs still without an answer, leased or not.
    pub remaining: usize,
    pub annotators: BTreeMap<String, usize>,
    /// Mean reference WER of the chosen candidates so far; debug sessions only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wer_so_far: Option<f64>,
}

impl SessionStatus {
    pub fn inactive() -> Self {
        SessionStatus {
            active: false,
            stage: None,
            total: 0,
            unserved: 0,
            pending: 0,
            answered: 0,
            remaining: 0,
            annotators: BTreeMap::new(),
            wer_so_far: None,
        }
    }
}

#[derive(Clone, Debug)]
enum PairState {
    Unserved,
    Pending {
        ticket: String,
        deadline: Instant,
        candidate1_left: bool,
    },
    Answered {
        r: u8,
    },
}

/// Renders a word-id sequence for display.
pub fn render_words(words: &[usize]) -> String {
    words.iter().map(|w| format!("w{w}")).collect::<Vec<_>>().join(" ")
}

/// State of one interactive stage. Issuance and submission are meant to be
/// serialized by the caller (the service keeps the session behind a mutex).
pub struct Session {
    stage: usize,
    items: Vec<PairItem>,
    states: Vec<PairState>,
    lease: Duration,
    rng: ChaCha8Rng,
    serial: u64,
    tickets: HashMap<String, usize>,
    retired: HashSet<String>,
    annotators: BTreeMap<String, usize>,
    log: Option<SelectionLog>,
}

impl Session {
    /// Answers already present in `log` for this stage are restored, so a
    /// restarted stage does not ask them again.
    pub fn new(stage: usize, items: Vec<PairItem>, lease: Duration, seed: u64, log: Option<SelectionLog>) -> Self {
        let mut states = vec![PairState::Unserved; items.len()];
        if let Some(log) = &log {
            let index: HashMap<&str, usize> = items.iter().enumerate().map(|(i, p)| (p.utterance_id.as_str(), i)).collect();
            for entry in log.entries().iter().filter(|e| e.stage == stage) {
                if let Some(&i) = index.get(entry.utterance_id.as_str()) {
                    if matches!(states[i], PairState::Unserved) {
                        states[i] = PairState::Answered { r: entry.r };
                    }
                }
            }
        }
        Session {
            stage,
            items,
            states,
            lease,
            rng: ChaCha8Rng::seed_from_u64(seed ^ (stage as u64).rotate_left(32)),
            serial: 0,
            tickets: HashMap::new(),
            retired: HashSet::new(),
            annotators: BTreeMap::new(),
            log,
        }
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn total(&self) -> usize {
        self.items.len()
    }

    pub fn lease(&self) -> Duration {
        self.lease
    }

    fn expire(&mut self, now: Instant) {
        for state in &mut self.states {
            if let PairState::Pending { ticket, deadline, .. } = state {
                if *deadline <= now {
                    self.tickets.remove(ticket.as_str());
                    self.retired.insert(std::mem::take(ticket));
                    *state = PairState::Unserved;
                }
            }
        }
    }

    /// Leases the first unserved pair, or `None` when every pair is answered
    /// or currently leased.
    pub fn next_pair(&mut self, now: Instant) -> Option<PairTicket> {
        self.expire(now);
        let index = self.states.iter().position(|s| matches!(s, PairState::Unserved))?;
        self.serial += 1;
        let ticket = format!("s{}-{}", self.stage, self.serial);
        let item = &self.items[index];
        let (c1, c2) = (render_words(&item.candidate1), render_words(&item.candidate2));
        // indistinguishable sides are not shuffled, so either answer selects Candidate 1 on the left
        let candidate1_left: bool = c1 == c2 || self.rng.random();
        let (left, right) = if candidate1_left { (c1, c2) } else { (c2, c1) };
        self.states[index] = PairState::Pending {
            ticket: ticket.clone(),
            deadline: now + self.lease,
            candidate1_left,
        };
        self.tickets.insert(ticket.clone(), index);
        Some(PairTicket {
            ticket,
            utterance_id: item.utterance_id.clone(),
            left,
            right,
            stage: self.stage,
            issued_at_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_millis() as u64),
        })
    }

    /// Records the answer to `ticket`. The selection is appended to the log
    /// before the pair is closed.
    pub fn submit(&mut self, ticket: &str, choice: Choice, annotator: Option<&str>, now: Instant) -> Result<Ack, ServiceError> {
        self.expire(now);
        let Some(&index) = self.tickets.get(ticket) else {
            return Err(if self.retired.contains(ticket) {
                ServiceError::ExpiredTicket(ticket.to_string())
            } else {
                ServiceError::UnknownTicket(ticket.to_string())
            });
        };
        let candidate1_left = match &self.states[index] {
            PairState::Pending { candidate1_left, .. } => *candidate1_left,
            PairState::Answered { .. } => return Err(ServiceError::AlreadyAnswered(ticket.to_string())),
            PairState::Unserved => return Err(ServiceError::ExpiredTicket(ticket.to_string())),
        };
        let r = u8::from((choice == Choice::Left) == candidate1_left);
        if let Some(log) = &mut self.log {
            log.append(&LogEntry {
                stage: self.stage,
                utterance_id: self.items[index].utterance_id.clone(),
                ticket: ticket.to_string(),
                choice,
                candidate1_left,
                r,
                annotator: annotator.map(str::to_string),
            })?;
        }
        self.states[index] = PairState::Answered { r };
        *self.annotators.entry(annotator.unwrap_or("anonymous").to_string()).or_default() += 1;
        Ok(Ack {
            ticket: ticket.to_string(),
            remaining: self.remaining(),
        })
    }

    fn count(&self, f: impl Fn(&PairState) -> bool) -> usize {
        self.states.iter().filter(|s| f(s)).count()
    }

    pub fn remaining(&self) -> usize {
        self.count(|s| !matches!(s, PairState::Answered { .. }))
    }

    pub fn is_complete(&self) -> bool {
        self.remaining() == 0
    }

    pub fn status(&self, debug: bool) -> SessionStatus {
        let wer_so_far = if debug {
            let chosen: Vec<f64> = self
                .states
                .iter()
                .zip(&self.items)
                .filter_map(|(s, item)| match (s, item.oracle_wers) {
                    (PairState::Answered { r }, Some((w1, w2))) => Some(if *r == 1 { w1 } else { w2 }),
                    _ => None,
                })
                .collect();
            (!chosen.is_empty()).then(|| chosen.iter().sum::<f64>() / chosen.len() as f64)
        } else {
            None
        };
        SessionStatus {
            active: true,
            stage: Some(self.stage),
            total: self.total(),
            unserved: self.count(|s| matches!(s, PairState::Unserved)),
            pending: self.count(|s| matches!(s, PairState::Pending { .. })),
            answered: self.count(|s| matches!(s, PairState::Answered { .. })),
            remaining: self.remaining(),
            annotators: self.annotators.clone(),
            wer_so_far,
        }
    }

    /// One selection per pair in item order, once every pair is answered.
    pub fn selections(&self) -> Option<Vec<Selection>> {
        self.states
            .iter()
            .map(|s| match s {
                PairState::Answered { r } => Some(Selection {
                    r: *r,
                    source: SelectionSource::Human,
                    candidate_wers: None,
                }),
                _ => None,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(n: usize) -> Vec<PairItem> {
        (0..n)
            .map(|i| PairItem {
                utterance_id: format!("u{i}"),
                candidate1: vec![i, 1],
                candidate2: vec![i, 2],
                oracle_wers: Some((0.0, 0.5)),
            })
            .collect()
    }

    #[test]
    fn fresh_stage_issues_each_pair_once() {
        let now = Instant::now();
        let mut s = Session::new(0, items(5), Duration::from_secs(60), 1, None);
        let ids: HashSet<String> = std::iter::from_fn(|| s.next_pair(now)).map(|t| t.utterance_id).collect();
        assert_eq!(ids.len(), 5);
        assert!(s.next_pair(now).is_none());
        assert_eq!(s.status(false).pending, 5);
    }

    #[test]
    fn expired_lease_is_reissued() {
        let now = Instant::now();
        let mut s = Session::new(0, items(1), Duration::from_secs(10), 1, None);
        let first = s.next_pair(now).unwrap();
        assert!(s.next_pair(now + Duration::from_secs(5)).is_none());
        let second = s.next_pair(now + Duration::from_secs(11)).unwrap();
        assert_eq!(first.utterance_id, second.utterance_id);
        assert_ne!(first.ticket, second.ticket);
        let later = now + Duration::from_secs(12);
        assert!(matches!(s.submit(&first.ticket, Choice::Left, None, later), Err(ServiceError::ExpiredTicket(_))));
        s.submit(&second.ticket, Choice::Left, None, later).unwrap();
    }

    #[test]
    fn permutation_maps_to_candidate1() {
        let now = Instant::now();
        let mut s = Session::new(0, items(40), Duration::from_secs(60), 7, None);
        let mut expected = Vec::new();
        while let Some(t) = s.next_pair(now) {
            let c1 = render_words(&[t.utterance_id[1..].parse().unwrap(), 1]);
            let choice = if t.left == c1 { Choice::Left } else { Choice::Right };
            s.submit(&t.ticket, choice, Some("a"), now).unwrap();
            expected.push(1);
        }
        let r: Vec<u8> = s.selections().unwrap().iter().map(|x| x.r).collect();
        assert_eq!(r, expected);
        assert_eq!(s.status(true).wer_so_far, Some(0.0));
    }

    #[test]
    fn identical_candidates_keep_candidate1_on_the_left() {
        let now = Instant::now();
        let same = (0..20)
            .map(|i| PairItem { utterance_id: format!("u{i}"), candidate1: vec![3], candidate2: vec![3], oracle_wers: None })
            .collect();
        let mut s = Session::new(0, same, Duration::from_secs(60), 9, None);
        while let Some(t) = s.next_pair(now) {
            s.submit(&t.ticket, Choice::Left, None, now).unwrap();
        }
        assert!(s.selections().unwrap().iter().all(|x| x.r == 1));
    }

    #[test]
    fn duplicate_and_unknown() {
        let now = Instant::now();
        let mut s = Session::new(2, items(2), Duration::from_secs(60), 1, None);
        let t = s.next_pair(now).unwrap();
        s.submit(&t.ticket, Choice::Right, None, now).unwrap();
        assert!(matches!(s.submit(&t.ticket, Choice::Left, None, now), Err(ServiceError::AlreadyAnswered(_))));
        assert!(matches!(s.submit("nope", Choice::Left, None, now), Err(ServiceError::UnknownTicket(_))));
        let st = s.status(false);
        assert_eq!((st.answered, st.unserved, st.pending, st.remaining), (1, 1, 0, 1));
        assert_eq!(st.wer_so_far, None);
    }
}
