//! Test-set evaluation, per-class F1, and aggregation over nodes and seeds.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::corruption::DataView;
use crate::dataset::{FederatedAssignment, NUM_CLASSES, PIXELS};
use crate::localtrain::gather;
use crate::neuralnet::{predict, NnError, ParamSet};
use crate::scenario::{Paradigm, Scheme};
use crate::topology::Graph;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("cannot aggregate: {0}")]
    Aggregation(String),
    #[error("metrics CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("metrics CSV line {line}: {msg}")]
    Row { line: u64, msg: String },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn record(&mut self, truth: u8, predicted: u8) {
        self.counts[truth as usize][predicted as usize] += 1;
    }

    pub fn count(&self, truth: u8, predicted: u8) -> u64 {
        self.counts[truth as usize][predicted as usize]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|c| self.counts[c][c]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    pub fn f1_per_class(&self) -> [f64; NUM_CLASSES] {
        f1_per_class(self)
    }
}

impl std::ops::AddAssign for ConfusionMatrix {
    fn add_assign(&mut self, other: Self) {
        for (row, other_row) in self.counts.iter_mut().zip(other.counts) {
            row.iter_mut().zip(other_row).for_each(|(a, b)| *a += b);
        }
    }
}

/// `2TP / (2TP + FP + FN)` per class, 0 where the denominator vanishes.
pub fn f1_per_class(cm: &ConfusionMatrix) -> [f64; NUM_CLASSES] {
    let mut out = [0.0; NUM_CLASSES];
    for (c, f1) in out.iter_mut().enumerate() {
        let tp = cm.counts[c][c];
        let fp: u64 = (0..NUM_CLASSES)
            .filter(|&r| r != c)
            .map(|r| cm.counts[r][c])
            .sum();
        let fn_: u64 = (0..NUM_CLASSES)
            .filter(|&k| k != c)
            .map(|k| cm.counts[c][k])
            .sum();
        let denom = 2 * tp + fp + fn_;
        if denom > 0 {
            *f1 = (2 * tp) as f64 / denom as f64;
        }
    }
    out
}

const EVAL_BATCH: usize = 500;

/// Evaluation-mode predictions of `p` on every sample of `test`.
pub fn evaluate(p: &ParamSet, test: &DataView<'_>) -> Result<ConfusionMatrix, NnError> {
    let mut cm = ConfusionMatrix::default();
    let all: Vec<usize> = (0..test.len()).collect();
    let mut inputs = Vec::with_capacity(EVAL_BATCH * PIXELS);
    let mut labels = Vec::with_capacity(EVAL_BATCH);
    for chunk in all.chunks(EVAL_BATCH) {
        gather(test, chunk, &mut inputs, &mut labels);
        for (truth, pred) in labels.iter().zip(predict(p, &inputs)?) {
            cm.record(*truth, pred);
        }
    }
    Ok(cm)
}

/// Test-set metrics of one node after one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub seed: u64,
    pub round: usize,
    pub node: usize,
    pub accuracy: f64,
    pub f1: [f64; NUM_CLASSES],
    pub holds_corrupt: bool,
    /// Only meaningful for decentralized runs.
    pub has_clean_neighbor: Option<bool>,
}

impl RoundRecord {
    pub fn from_confusion(seed: u64, round: usize, node: usize, cm: &ConfusionMatrix) -> Self {
        RoundRecord {
            seed,
            round,
            node,
            accuracy: cm.accuracy(),
            f1: cm.f1_per_class(),
            holds_corrupt: false,
            has_clean_neighbor: None,
        }
    }

    pub fn metric(&self, m: Metric) -> f64 {
        match m {
            Metric::Accuracy => self.accuracy,
            Metric::F1(c) => self.f1[c as usize],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    Accuracy,
    F1(u8),
}

impl Metric {
    pub fn name(self) -> String {
        match self {
            Metric::Accuracy => "accuracy".to_string(),
            Metric::F1(c) => format!("f1_{c}"),
        }
    }
}

/// Sweep-cell coordinates written alongside every record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellKey {
    pub paradigm: Paradigm,
    pub scheme: Scheme,
    pub alpha: f64,
    pub p: f64,
}

pub fn csv_header() -> Vec<String> {
    let mut h: Vec<String> = [
        "seed", "round", "node", "paradigm", "scheme", "alpha", "p", "accuracy",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((0..NUM_CLASSES).map(|c| format!("f1_{c}")));
    h.push("holds_corrupt".into());
    h.push("has_clean_neighbor".into());
    h
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

/// Writes the header and one row per record.
pub fn write_csv<W: Write>(
    out: W,
    cell: &CellKey,
    records: &[RoundRecord],
) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(csv_header())?;
    for r in records {
        let mut row = vec![
            r.seed.to_string(),
            r.round.to_string(),
            r.node.to_string(),
            cell.paradigm.to_string(),
            cell.scheme.to_string(),
            cell.alpha.to_string(),
            cell.p.to_string(),
            r.accuracy.to_string(),
        ];
        row.extend(r.f1.iter().map(f64::to_string));
        row.push(flag(r.holds_corrupt).into());
        row.push(r.has_clean_neighbor.map(flag).unwrap_or("").into());
        w.write_record(&row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Parses a metrics CSV back into `(cell, record)` rows.
pub fn read_csv<R: Read>(input: R) -> Result<Vec<(CellKey, RoundRecord)>, MetricsError> {
    let mut rd = csv::Reader::from_reader(input);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != csv_header() {
        return Err(MetricsError::Row {
            line: 1,
            msg: "unexpected header".into(),
        });
    }
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let err = |msg: String| MetricsError::Row { line, msg };
        let field = |k: usize| row.get(k).unwrap_or("");
        fn num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T, String> {
            s.parse().map_err(|_| format!("bad {what} `{s}`"))
        }
        let parse_flag = |s: &str| match s {
            "1" => Ok(true),
            "0" => Ok(false),
            other => Err(format!("bad flag `{other}`")),
        };
        let cell = CellKey {
            paradigm: field(3).parse().map_err(err)?,
            scheme: field(4).parse().map_err(err)?,
            alpha: num(field(5), "alpha").map_err(err)?,
            p: num(field(6), "p").map_err(err)?,
        };
        let mut f1 = [0.0; NUM_CLASSES];
        for (c, v) in f1.iter_mut().enumerate() {
            *v = num(field(8 + c), "f1").map_err(err)?;
        }
        let clean = match field(9 + NUM_CLASSES) {
            "" => None,
            s => Some(parse_flag(s).map_err(err)?),
        };
        out.push((
            cell,
            RoundRecord {
                seed: num(field(0), "seed").map_err(err)?,
                round: num(field(1), "round").map_err(err)?,
                node: num(field(2), "node").map_err(err)?,
                accuracy: num(field(7), "accuracy").map_err(err)?,
                f1,
                holds_corrupt: parse_flag(field(8 + NUM_CLASSES)).map_err(err)?,
                has_clean_neighbor: clean,
            },
        ));
    }
    Ok(out)
}

/// Mean of `metric` over the nodes of each round, for one seed's records.
pub fn node_average(records: &[RoundRecord], metric: Metric) -> Vec<(usize, f64)> {
    let mut by_round: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = by_round.entry(r.round).or_default();
        e.0 += r.metric(metric);
        e.1 += 1;
    }
    by_round
        .into_iter()
        .map(|(round, (sum, k))| (round, sum / k as f64))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedAggregate {
    pub round: usize,
    pub mean: f64,
    /// Absent with fewer than two seeds.
    pub ci_half_width: Option<f64>,
}

/// Mean across seeds and Student-t confidence half-width at `level`.
///
/// Every seed's series must cover the same rounds.
pub fn aggregate_seeds(
    series: &[Vec<(usize, f64)>],
    level: f64,
) -> Result<Vec<SeedAggregate>, MetricsError> {
    let Some(first) = series.first() else {
        return Err(MetricsError::Aggregation("no seeds".into()));
    };
    if !(level > 0.0 && level < 1.0) {
        return Err(MetricsError::Aggregation(format!(
            "confidence level {level} outside (0, 1)"
        )));
    }
    let rounds: Vec<usize> = first.iter().map(|&(r, _)| r).collect();
    for (k, s) in series.iter().enumerate() {
        if s.len() != rounds.len() || s.iter().zip(&rounds).any(|(a, &r)| a.0 != r) {
            return Err(MetricsError::Aggregation(format!(
                "seed #{k} covers different rounds than seed #0"
            )));
        }
    }
    let k = series.len();
    let t = if k >= 2 {
        let dist = StudentsT::new(0.0, 1.0, (k - 1) as f64)
            .map_err(|e| MetricsError::Aggregation(e.to_string()))?;
        Some(dist.inverse_cdf(1.0 - (1.0 - level) / 2.0))
    } else {
        None
    };
    Ok(rounds
        .iter()
        .enumerate()
        .map(|(idx, &round)| {
            let vals: Vec<f64> = series.iter().map(|s| s[idx].1).collect();
            let mean = vals.iter().sum::<f64>() / k as f64;
            let ci_half_width = t.map(|t| {
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
                t * var.sqrt() / (k as f64).sqrt()
            });
            SeedAggregate {
                round,
                mean,
                ci_half_width,
            }
        })
        .collect())
}

/// For each node: does some neighbour (other than itself) hold no corrupt samples?
pub fn clean_neighbor_flags(g: &Graph, assignment: &FederatedAssignment) -> Vec<bool> {
    (0..g.node_count())
        .map(|i| {
            g.neighbors(i)
                .iter()
                .any(|&j| !assignment.nodes[j].holds_corrupt())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupPoint {
    pub round: usize,
    pub with_clean: Option<f64>,
    pub without_clean: Option<f64>,
    pub network: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CleanNeighborReport {
    pub flags: Vec<bool>,
    pub series: Vec<GroupPoint>,
    pub notice: Option<String>,
}

/// Mean F1 of `class` per round for nodes with and without a clean neighbour.
pub fn clean_neighbor_report(
    records: &[RoundRecord],
    paradigm: Paradigm,
    g: &Graph,
    assignment: &FederatedAssignment,
    class: u8,
) -> CleanNeighborReport {
    if paradigm != Paradigm::Dfl {
        return CleanNeighborReport {
            notice: Some(format!(
                "clean-neighbour analysis applies to dfl runs only, not {paradigm}"
            )),
            ..Default::default()
        };
    }
    let flags = clean_neighbor_flags(g, assignment);
    let mut by_round: BTreeMap<usize, [(f64, usize); 3]> = BTreeMap::new();
    for r in records {
        let e = by_round.entry(r.round).or_default();
        let v = r.f1[class as usize];
        let group = if flags[r.node] { 0 } else { 1 };
        e[group].0 += v;
        e[group].1 += 1;
        e[2].0 += v;
        e[2].1 += 1;
    }
    let mean = |(s, k): (f64, usize)| (k > 0).then(|| s / k as f64);
    let series = by_round
        .into_iter()
        .map(|(round, g)| GroupPoint {
            round,
            with_clean: mean(g[0]),
            without_clean: mean(g[1]),
            network: mean(g[2]).unwrap_or(0.0),
        })
        .collect();
    CleanNeighborReport {
        flags,
        series,
        notice: None,
    }
}
