//! Analysis tables and report files: the selection-error sweep, paired
//! rival-rank campaigns, and CSV / plot-data emission.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acoustic_model::AcousticModel;
use crate::error::{Error, Result};
use crate::feedback::{noisy_select, Selection, SelectionSource, WerBreakdown};
use crate::reinforce::RivalStrategy;
use crate::scalar::Scalar;
use crate::trainer::{run_campaign, simulated_selector, ArmConfig, CampaignData, CampaignOutcome, PairRecord, StageReport};

pub const SUMMARY_HEADER: [&str; 7] = ["stage", "arm", "alpha", "p", "batch_wer", "eval_wer", "selected_wer"];
pub const STAGE_HEADER: [&str; 14] = [
    "stage",
    "arm",
    "alpha",
    "p",
    "batch_wer",
    "eval_wer",
    "selected_wer",
    "candidate1_wer",
    "candidate2_wer",
    "dropped_identical",
    "dropped_alignment",
    "epochs",
    "final_learning_rate",
    "eval_wer_increased",
];

pub const PAIR_HEADER: [&str; 10] = [
    "utterance_id",
    "candidate1",
    "candidate2",
    "candidate2_rank",
    "r",
    "weight1",
    "weight2",
    "candidate1_wer",
    "candidate2_wer",
    "dropped",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub error_rates: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            error_rates: (0..=10).map(|i| i as f64 / 20.0).collect(),
            trials: 200,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub p: f64,
    pub mean_selected_wer: f64,
    /// Standard error of `mean_selected_wer` across trials.
    pub selected_standard_error: f64,
    pub mean_candidate1_wer: f64,
    pub mean_candidate2_wer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// First error rate whose mean selected WER exceeds the Candidate 1 WER.
    pub crossing_p: Option<f64>,
}

/// Mean per-pair WER of the selected candidate as a function of the
/// selection error rate. Every pair starts from the oracle choice, which is
/// then swapped with probability `p` independently in each trial. Every rate
/// replays the same uniform draws, so a pair swapped at one rate is swapped
/// at every larger rate and the curve cannot decrease.
pub fn selection_error_sweep(pairs: &[PairRecord], spec: &SweepSpec) -> Result<SweepTable> {
    if pairs.is_empty() {
        return Err(Error::Validation("selection-error sweep needs at least one pair".into()));
    }
    if spec.trials < 2 {
        return Err(Error::config("sweep.trials", "need at least two trials"));
    }
    if let Some(p) = spec.error_rates.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::config("sweep.error_rates", format!("{p} is outside [0, 1]")));
    }
    let n = pairs.len() as f64;
    let c1 = pairs.iter().map(|r| r.candidate1_wer.wer).sum::<f64>() / n;
    let c2 = pairs.iter().map(|r| r.candidate2_wer.wer).sum::<f64>() / n;
    let oracle: Vec<Selection> = pairs
        .iter()
        .map(|r| Selection {
            r: u8::from(r.candidate1_wer.wer <= r.candidate2_wer.wer),
            source: SelectionSource::Oracle,
            candidate_wers: Some((r.candidate1_wer, r.candidate2_wer)),
        })
        .collect();

    let mut rows = Vec::with_capacity(spec.error_rates.len());
    for &p in &spec.error_rates {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut means = Vec::with_capacity(spec.trials);
        for _ in 0..spec.trials {
            let mut total = 0.0;
            for (sel, rec) in oracle.iter().zip(pairs) {
                let s = noisy_select(sel, p, &mut rng)?;
                total += if s.r == 1 { rec.candidate1_wer.wer } else { rec.candidate2_wer.wer };
            }
            means.push(total / n);
        }
        let t = spec.trials as f64;
        let mean = means.iter().sum::<f64>() / t;
        let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (t - 1.0);
        rows.push(SweepRow {
            p,
            mean_selected_wer: mean,
            selected_standard_error: (var / t).sqrt(),
            mean_candidate1_wer: c1,
            mean_candidate2_wer: c2,
        });
    }
    let crossing_p = rows.iter().find(|r| r.mean_selected_wer > r.mean_candidate1_wer).map(|r| r.p);
    Ok(SweepTable { rows, crossing_p })
}

/// Campaigns that differ only in the rival rank, plus their reference arm.
#[derive(Clone, Debug)]
pub struct RivalComparison<T> {
    pub reference: CampaignOutcome<T>,
    pub by_rank: Vec<(usize, CampaignOutcome<T>)>,
}

impl<T> RivalComparison<T> {
    fn final_eval(outcome: &CampaignOutcome<T>) -> f64 {
        outcome.reports.last().map_or(f64::NAN, |r| r.eval_wer.wer)
    }

    /// Whether every rival-rank arm ends at or below the reference arm.
    pub fn all_ranks_match_or_beat_reference(&self) -> bool {
        let reference = Self::final_eval(&self.reference);
        self.by_rank.iter().all(|(_, o)| Self::final_eval(o) <= reference)
    }

    pub fn reports(&self) -> Vec<StageReport> {
        let mut out = self.reference.reports.clone();
        for (_, o) in &self.by_rank {
            out.extend(o.reports.iter().cloned());
        }
        out
    }
}

/// Runs `reference` and one copy of `rl_arm` per rank in `ranks`, all from the
/// same initial model and seed. The RL arms are renamed `<name>-n<rank>`.
pub fn rival_rank_comparison<T: Scalar>(
    initial: &AcousticModel<T>,
    data: &CampaignData<'_>,
    reference: &ArmConfig,
    rl_arm: &ArmConfig,
    ranks: &[usize],
) -> Result<RivalComparison<T>> {
    let reference = run_campaign(initial, data, reference, simulated_selector(reference).as_mut())?;
    let mut by_rank = Vec::with_capacity(ranks.len());
    for &n in ranks {
        let mut arm = rl_arm.clone();
        arm.rl.rival_strategy = RivalStrategy::NthBest { n };
        arm.name = format!("{}-n{n}", rl_arm.name);
        let outcome = run_campaign(initial, data, &arm, simulated_selector(&arm).as_mut())?;
        by_rank.push((n, outcome));
    }
    Ok(RivalComparison { reference, by_rank })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_error)?;
    for row in rows {
        w.write_record(row).map_err(csv_error)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// `stage,arm,alpha,p,batch_wer,eval_wer,selected_wer`, one row per report.
pub fn summary_rows(reports: &[StageReport]) -> Vec<Vec<String>> {
    reports
        .iter()
        .map(|r| {
            vec![
                r.stage.to_string(),
                r.arm.clone(),
                opt(r.alpha),
                opt(r.p),
                opt(r.batch_wer.map(|w| w.wer)),
                r.eval_wer.wer.to_string(),
                opt(r.selected_wer.map(|w| w.wer)),
            ]
        })
        .collect()
}

fn stage_row(r: &StageReport) -> Vec<String> {
    let mut row = summary_rows(std::slice::from_ref(r)).remove(0);
    row.extend([
        opt(r.candidate1_wer.map(|w| w.wer)),
        opt(r.candidate2_wer.map(|w| w.wer)),
        r.dropped.identical_candidates.to_string(),
        r.dropped.alignment_failed.to_string(),
        r.epochs.len().to_string(),
        opt(r.epochs.last().map(|e| e.learning_rate)),
        r.eval_wer_increased.to_string(),
    ]);
    row
}

fn plot_bytes(reports: &[StageReport], value: impl Fn(&StageReport) -> Option<f64>) -> Vec<u8> {
    let mut arms: Vec<&str> = Vec::new();
    for r in reports {
        if !arms.contains(&r.arm.as_str()) {
            arms.push(&r.arm);
        }
    }
    let mut table: BTreeMap<usize, BTreeMap<&str, f64>> = BTreeMap::new();
    for r in reports {
        if let Some(v) = value(r) {
            table.entry(r.stage).or_default().insert(&r.arm, v);
        }
    }
    let mut out = format!("stage\t{}\n", arms.join("\t"));
    for (stage, row) in table {
        let cells: Vec<String> = arms
            .iter()
            .map(|a| row.get(a).map_or("nan".to_string(), |v| v.to_string()))
            .collect();
        out.push_str(&format!("{stage}\t{}\n", cells.join("\t")));
    }
    out.into_bytes()
}

/// Writes `summary.csv`, `reports/stage_<k>.csv` (one row per arm), and
/// tab-separated plot data `plot/eval_wer.tsv` and `plot/batch_wer.tsv`.
/// Values are written with shortest round-trip formatting, so they parse
/// back to the in-memory numbers exactly.
pub fn emit_report(reports: &[StageReport], out_dir: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::Validation("no stage reports to emit".into()));
    }
    fs::create_dir_all(out_dir.join("reports"))?;
    fs::create_dir_all(out_dir.join("plot"))?;
    fs::write(out_dir.join("summary.csv"), csv_bytes(&SUMMARY_HEADER, &summary_rows(reports))?)?;
    let mut by_stage: BTreeMap<usize, Vec<Vec<String>>> = BTreeMap::new();
    for r in reports {
        by_stage.entry(r.stage).or_default().push(stage_row(r));
    }
    for (stage, rows) in by_stage {
        fs::write(
            out_dir.join("reports").join(format!("stage_{stage}.csv")),
            csv_bytes(&STAGE_HEADER, &rows)?,
        )?;
    }
    fs::write(out_dir.join("plot/eval_wer.tsv"), plot_bytes(reports, |r| Some(r.eval_wer.wer)))?;
    fs::write(
        out_dir.join("plot/batch_wer.tsv"),
        plot_bytes(reports, |r| r.batch_wer.map(|w| w.wer)),
    )?;
    Ok(())
}

/// Writes the sweep table as `sweep.csv` and `plot/sweep.tsv`.
pub fn emit_sweep(table: &SweepTable, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir.join("plot"))?;
    let header = [
        "p",
        "mean_selected_wer",
        "selected_standard_error",
        "mean_candidate1_wer",
        "mean_candidate2_wer",
    ];
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| {
            vec![
                r.p.to_string(),
                r.mean_selected_wer.to_string(),
                r.selected_standard_error.to_string(),
                r.mean_candidate1_wer.to_string(),
                r.mean_candidate2_wer.to_string(),
            ]
        })
        .collect();
    fs::write(out_dir.join("sweep.csv"), csv_bytes(&header, &rows)?)?;
    let mut plot = String::from("p\tselected\tcandidate1\tcandidate2\n");
    for r in &table.rows {
        plot.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.p, r.mean_selected_wer, r.mean_candidate1_wer, r.mean_candidate2_wer
        ));
    }
    fs::write(out_dir.join("plot/sweep.tsv"), plot)?;
    Ok(())
}

/// One JSON object per pair, in batch order.
pub fn pairs_jsonl(pairs: &[PairRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for p in pairs {
        serde_json::to_writer(&mut out, p)?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Per-pair audit table: choice, training weights, WERs and drop reason.
/// Word sequences are space-separated word ids.
pub fn pairs_csv(pairs: &[PairRecord]) -> Result<Vec<u8>> {
    let words = |w: &[usize]| w.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
    let rows: Vec<Vec<String>> = pairs
        .iter()
        .map(|p| {
            vec![
                p.utterance_id.clone(),
                words(&p.candidate1),
                words(&p.candidate2),
                p.candidate2_rank.to_string(),
                p.r.to_string(),
                opt(p.weights.map(|w| w.0)),
                opt(p.weights.map(|w| w.1)),
                p.candidate1_wer.wer.to_string(),
                p.candidate2_wer.wer.to_string(),
                p.dropped.map_or(String::new(), |d| d.as_str().to_string()),
            ]
        })
        .collect();
    csv_bytes(&PAIR_HEADER, &rows)
}

pub const WER_HEADER: [&str; 6] = ["utterance_id", "substitutions", "insertions", "deletions", "reference_length", "wer"];

/// Per-utterance rows followed by an `ALL` row with the corpus-level breakdown.
pub fn wer_csv(rows: &[(String, WerBreakdown)]) -> Result<Vec<u8>> {
    let total = WerBreakdown::aggregate(rows.iter().map(|(_, w)| w));
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(id, w)| (id.as_str(), w))
        .chain(std::iter::once(("ALL", &total)))
        .map(|(id, w)| {
            vec![
                id.to_string(),
                w.substitutions.to_string(),
                w.insertions.to_string(),
                w.deletions.to_string(),
                w.reference_length.to_string(),
                w.wer.to_string(),
            ]
        })
        .collect();
    csv_bytes(&WER_HEADER, &body)
}

pub fn read_pairs_jsonl(bytes: &[u8]) -> Result<Vec<PairRecord>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Schema(format!("pair log is not UTF-8: {e}")))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
