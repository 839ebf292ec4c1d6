//! Objective evaluation: DTW-aligned mel-cepstral distortion, detection
//! precision/recall/weighted F1, and the stratified 8:1:1 corpus split.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::MeanStd;
use crate::prosody::{FrameFeatures, ProsodyReport};
use crate::store::{Label, UtteranceRecord};

/// `10 / ln 10`, the natural-log to decibel factor of MCD.
pub const MCD_DB_FACTOR: f64 = 10.0 / std::f64::consts::LN_10;

/// Monotonic alignment between two frame sequences, from `(0, 0)` to
/// `(n - 1, m - 1)` with unit steps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentPath(Vec<(usize, usize)>);

impl AlignmentPath {
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Exact DTW with steps (1,1), (1,0), (0,1) and Euclidean frame cost.
/// Backtracking prefers the diagonal, then (1,0), then (0,1) on ties.
pub fn dtw_align(x: &FrameFeatures, y: &FrameFeatures) -> Result<(AlignmentPath, f64)> {
    dtw_on(x, y, 0)
}

/// DTW over the coefficients from `first_coef` onward.
fn dtw_on(x: &FrameFeatures, y: &FrameFeatures, first_coef: usize) -> Result<(AlignmentPath, f64)> {
    if x.dim() != y.dim() {
        return Err(Error::Dimension(format!(
            "cannot align {}-dim frames with {}-dim frames",
            x.dim(),
            y.dim()
        )));
    }
    let (n, m) = (x.n_frames(), y.n_frames());
    let (xv, yv) = (x.values(), y.values());
    let mut acc = vec![f64::INFINITY; n * m];
    let at = |i: usize, j: usize| i * m + j;
    for i in 0..n {
        for j in 0..m {
            let d = euclidean(&xv.row(i)[first_coef..], &yv.row(j)[first_coef..]);
            let best_prev = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 {
                    acc[at(i - 1, j - 1)]
                } else {
                    f64::INFINITY
                };
                let up = if i > 0 {
                    acc[at(i - 1, j)]
                } else {
                    f64::INFINITY
                };
                let left = if j > 0 {
                    acc[at(i, j - 1)]
                } else {
                    f64::INFINITY
                };
                diag.min(up).min(left)
            };
            acc[at(i, j)] = d + best_prev;
        }
    }

    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while (i, j) != (0, 0) {
        let candidates = [
            (i > 0 && j > 0).then(|| (i - 1, j - 1)),
            (i > 0).then(|| (i - 1, j)),
            (j > 0).then(|| (i, j - 1)),
        ];
        let mut best: Option<(usize, usize)> = None;
        for c in candidates.into_iter().flatten() {
            if best.is_none_or(|b| acc[at(c.0, c.1)] < acc[at(b.0, b.1)]) {
                best = Some(c);
            }
        }
        (i, j) = best.expect("a non-origin cell has a predecessor");
        path.push((i, j));
    }
    path.reverse();
    Ok((AlignmentPath(path), acc[at(n - 1, m - 1)]))
}

/// Mean over DTW-aligned frame pairs of `(10 / ln 10) * sqrt(2 * sum_d dc_d^2)`.
/// With `exclude_c0`, coefficient 0 is ignored both for alignment and
/// distance.
pub fn mcd(x: &FrameFeatures, y: &FrameFeatures, exclude_c0: bool) -> Result<f64> {
    let first = usize::from(exclude_c0);
    if x.dim() != y.dim() {
        return Err(Error::Dimension(format!(
            "cepstral dims differ: {} vs {}",
            x.dim(),
            y.dim()
        )));
    }
    if x.dim() <= first {
        return Err(Error::Parameter(
            "no cepstral coefficients left after excluding c0".into(),
        ));
    }
    let (path, _) = dtw_on(x, y, first)?;
    let total: f64 = path
        .pairs()
        .iter()
        .map(|&(i, j)| {
            let d2: f64 = x.values().row(i)[first..]
                .iter()
                .zip(&y.values().row(j)[first..])
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            MCD_DB_FACTOR * (2.0 * d2).sqrt()
        })
        .sum();
    Ok(total / path.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McdSummary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Per-utterance MCD summarized with a population standard deviation.
pub fn mcd_summary(
    pairs: &[(FrameFeatures, FrameFeatures)],
    exclude_c0: bool,
) -> Result<McdSummary> {
    let values = pairs
        .iter()
        .map(|(a, b)| mcd(a, b, exclude_c0))
        .collect::<Result<Vec<_>>>()?;
    let stats =
        MeanStd::of(&values).ok_or_else(|| Error::EmptyInput("no utterance pairs".into()))?;
    Ok(McdSummary {
        mean: stats.mean,
        std: stats.std,
        count: values.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPredictions {
    gold: Vec<Label>,
    pred: Vec<Label>,
}

impl LabeledPredictions {
    pub fn new(gold: Vec<Label>, pred: Vec<Label>) -> Result<Self> {
        if gold.len() != pred.len() {
            return Err(Error::Dimension(format!(
                "{} gold labels but {} predictions",
                gold.len(),
                pred.len()
            )));
        }
        if gold.is_empty() {
            return Err(Error::EmptyInput("no labels to score".into()));
        }
        Ok(Self { gold, pred })
    }

    pub fn gold(&self) -> &[Label] {
        &self.gold
    }

    pub fn pred(&self) -> &[Label] {
        &self.pred
    }
}

/// Support-weighted precision, recall and F1, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub weighted_f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Zero denominators count as a score of 0.
pub fn detection_metrics(lp: &LabeledPredictions) -> MetricsReport {
    let n = lp.gold.len() as f64;
    let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
    for class in Label::ALL {
        let mut tp = 0;
        let mut predicted = 0;
        let mut support = 0;
        for (&g, &q) in lp.gold.iter().zip(&lp.pred) {
            tp += usize::from(g == class && q == class);
            predicted += usize::from(q == class);
            support += usize::from(g == class);
        }
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let w = support as f64 / n;
        p += w * precision;
        r += w * recall;
        f += w * f1;
    }
    MetricsReport {
        precision: 100.0 * p,
        recall: 100.0 * r,
        weighted_f1: 100.0 * f,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<UtteranceRecord>,
    pub val: Vec<UtteranceRecord>,
    pub test: Vec<UtteranceRecord>,
}

/// Stratified 8:1:1 split. Within each label the records are shuffled by a
/// ChaCha8 generator seeded with `seed`; `floor(n / 10)` go to validation,
/// the next `floor(n / 10)` to test, and the rest to training. Each part
/// keeps the input order.
pub fn dataset_split(records: Vec<UtteranceRecord>, seed: u64) -> Result<DatasetSplit> {
    if records.is_empty() {
        return Err(Error::EmptyInput("nothing to split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_label: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_label.entry(r.label).or_default().push(i);
    }
    // 0 = train, 1 = val, 2 = test
    let mut part = vec![0u8; records.len()];
    for positions in by_label.values_mut() {
        positions.shuffle(&mut rng);
        let held = positions.len() / 10;
        for &i in &positions[..held] {
            part[i] = 1;
        }
        for &i in &positions[held..2 * held] {
            part[i] = 2;
        }
    }
    let mut split = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (r, p) in records.into_iter().zip(part) {
        match p {
            1 => split.val.push(r),
            2 => split.test.push(r),
            _ => split.train.push(r),
        }
    }
    Ok(split)
}

/// Structured evaluation output; sections not computed are omitted.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mcd_db: Option<McdSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pitch: Option<MeanStd>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub energy: Option<MeanStd>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub voiced_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frame_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detection: Option<MetricsReport>,
}

impl From<ProsodyReport> for EvalReport {
    fn from(r: ProsodyReport) -> Self {
        Self {
            pitch: r.pitch,
            energy: Some(r.energy),
            voiced_count: Some(r.voiced_count),
            frame_count: Some(r.frame_count),
            ..Self::default()
        }
    }
}
