//! Metrics and the hyperparameter grid-search harness: confusion matrices,
//! accuracy, weighted F1, per-axis sweep summaries, and CSV persistence.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSplit, LabeledSequence};
use crate::error::{Error, Result};
use crate::forest::{train_forest, ForestConfig, MaxFeatures, SplitCriterion};
use crate::hmm::TrainingConfig;
use crate::pipeline::{
    extract_features, fit_scaler, train_family_hmms, train_pipeline, train_raw_baseline,
    SequenceClassifier, TrainedModel,
};
use crate::util::derive_seed;

// ---------------------------------------------------------------------------
// Confusion matrix and derived metrics
// ---------------------------------------------------------------------------

/// Integer confusion counts: rows are actual families, columns predicted,
/// both in `families` order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub families: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Fraction of the total count on the diagonal.
    pub fn accuracy(&self) -> f64 {
        let trace: u64 = (0..self.families.len()).map(|i| self.counts[i][i]).sum();
        trace as f64 / self.total() as f64
    }

    /// Rows normalized to sum to 1; rows with no samples stay all-zero.
    pub fn row_scaled(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let sum: u64 = row.iter().sum();
                if sum == 0 {
                    vec![0.0; row.len()]
                } else {
                    row.iter().map(|&c| c as f64 / sum as f64).collect()
                }
            })
            .collect()
    }
}

/// Count actual/predicted label pairs into a confusion matrix over
/// `family_order`. Labels outside the order are an error.
pub fn confusion<S: AsRef<str>>(
    actual: &[S],
    predicted: &[S],
    family_order: &[String],
) -> Result<ConfusionMatrix> {
    if actual.len() != predicted.len() {
        return Err(Error::Argument(format!(
            "{} actual labels vs {} predictions",
            actual.len(),
            predicted.len()
        )));
    }
    let index_of = |label: &str| -> Result<usize> {
        family_order
            .iter()
            .position(|f| f == label)
            .ok_or_else(|| Error::Argument(format!("unknown label {label:?}")))
    };
    let n = family_order.len();
    let mut counts = vec![vec![0u64; n]; n];
    for (a, p) in actual.iter().zip(predicted) {
        counts[index_of(a.as_ref())?][index_of(p.as_ref())?] += 1;
    }
    Ok(ConfusionMatrix {
        families: family_order.to_vec(),
        counts,
    })
}

/// Support-weighted mean of per-class F1 scores. A class with `precision +
/// recall = 0` contributes an F1 of 0; a class with no actual samples has
/// zero weight.
pub fn weighted_f1(cm: &ConfusionMatrix) -> f64 {
    let total = cm.total();
    if total == 0 {
        return 0.0;
    }
    let n = cm.families.len();
    let mut acc = 0.0;
    for c in 0..n {
        let support: u64 = cm.counts[c].iter().sum();
        if support == 0 {
            continue;
        }
        let tp = cm.counts[c][c] as f64;
        let predicted: u64 = (0..n).map(|r| cm.counts[r][c]).sum();
        let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let recall = tp / support as f64;
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        acc += support as f64 / total as f64 * f1;
    }
    acc
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassMetrics {
    pub family: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Full evaluation output: accuracy, weighted F1, the raw and row-scaled
/// confusion matrices, and per-class metrics. `empty_families` flags rows
/// with no test samples, whose scaled rows are left at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub confusion: ConfusionMatrix,
    pub scaled_confusion: Vec<Vec<f64>>,
    pub per_class: Vec<PerClassMetrics>,
    pub empty_families: Vec<String>,
}

impl EvaluationReport {
    pub fn from_confusion(cm: ConfusionMatrix) -> Self {
        let n = cm.families.len();
        let mut per_class = Vec::with_capacity(n);
        let mut empty_families = Vec::new();
        for c in 0..n {
            let support: u64 = cm.counts[c].iter().sum();
            if support == 0 {
                empty_families.push(cm.families[c].clone());
            }
            let tp = cm.counts[c][c] as f64;
            let predicted: u64 = (0..n).map(|r| cm.counts[r][c]).sum();
            let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
            let recall = if support == 0 { 0.0 } else { tp / support as f64 };
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            per_class.push(PerClassMetrics {
                family: cm.families[c].clone(),
                precision,
                recall,
                f1,
                support,
            });
        }
        EvaluationReport {
            accuracy: cm.accuracy(),
            weighted_f1: weighted_f1(&cm),
            scaled_confusion: cm.row_scaled(),
            per_class,
            empty_families,
            confusion: cm,
        }
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn report_from_names(
    actual: &[&str],
    predicted: &[&str],
    family_order: &[String],
) -> Result<EvaluationReport> {
    Ok(EvaluationReport::from_confusion(confusion(
        actual,
        predicted,
        family_order,
    )?))
}

/// Classify every test sample with `model` and assemble the report.
/// Classification failures abort with the offending sample named.
pub fn evaluate(model: &dyn SequenceClassifier, test: &[LabeledSequence]) -> Result<EvaluationReport> {
    if test.is_empty() {
        return Err(Error::Evaluation("empty test split".into()));
    }
    let predicted: Vec<String> = test
        .par_iter()
        .map(|seq| {
            model
                .classify(&seq.symbols)
                .map(|(family, _)| family)
                .map_err(|e| Error::Evaluation(format!("sample {}: {e}", seq.sample_id)))
        })
        .collect::<Result<_>>()?;
    let actual: Vec<&str> = test.iter().map(|s| s.family.as_str()).collect();
    let predicted_refs: Vec<&str> = predicted.iter().map(|s| s.as_str()).collect();
    report_from_names(&actual, &predicted_refs, model.families())
}

// ---------------------------------------------------------------------------
// Grid search
// ---------------------------------------------------------------------------

/// Hyperparameter axes, each a non-empty list. Cells enumerate the cartesian
/// product in declared axis order (L outermost, max_features innermost) with
/// values in declared order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub l_values: Vec<usize>,
    pub n_estimators: Vec<usize>,
    pub criteria: Vec<SplitCriterion>,
    pub max_features: Vec<MaxFeatures>,
}

impl GridSpec {
    pub fn cells(&self) -> Result<Vec<GridCell>> {
        if self.l_values.is_empty()
            || self.n_estimators.is_empty()
            || self.criteria.is_empty()
            || self.max_features.is_empty()
        {
            return Err(Error::Config("every grid axis needs at least one value".into()));
        }
        let mut cells = Vec::new();
        for &l in &self.l_values {
            for &n_estimators in &self.n_estimators {
                for &criterion in &self.criteria {
                    for &max_features in &self.max_features {
                        cells.push(GridCell {
                            l,
                            n_estimators,
                            criterion,
                            max_features,
                        });
                    }
                }
            }
        }
        Ok(cells)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCell {
    pub l: usize,
    pub n_estimators: usize,
    pub criterion: SplitCriterion,
    pub max_features: MaxFeatures,
}

/// Which pipeline the grid trains per cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineKind {
    HmmRf,
    RawRf,
}

impl std::str::FromStr for PipelineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hmm-rf" => Ok(PipelineKind::HmmRf),
            "raw-rf" => Ok(PipelineKind::RawRf),
            other => Err(Error::Argument(format!(
                "unknown pipeline kind {other:?} (expected hmm-rf or raw-rf)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GridParams {
    pub kind: PipelineKind,
    /// Baum-Welch schedule (and HMM seed) shared by every cell.
    pub hmm_config: TrainingConfig,
    pub max_train_symbols: usize,
    pub bootstrap: bool,
    /// Master seed; each cell's forest trains with a seed derived from this
    /// and the cell's enumeration index, independent of execution order.
    pub seed: u64,
    /// Reuse HMM training and per-L feature extraction across cells. Results
    /// are identical either way; disabling is only useful for verification.
    pub cache: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: GridCell,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub wall_time_ms: u64,
}

#[derive(Debug, Clone)]
pub struct CellFailure {
    pub cell: GridCell,
    pub message: String,
}

#[derive(Debug)]
pub struct GridSearchOutput {
    /// Index into `results` of the winning cell: maximal accuracy, ties to
    /// the earliest cell in enumeration order.
    pub best_index: usize,
    pub results: Vec<CellResult>,
    pub failures: Vec<CellFailure>,
    pub best_model: TrainedModel,
    pub best_report: EvaluationReport,
}

impl GridSearchOutput {
    pub fn best(&self) -> &CellResult {
        &self.results[self.best_index]
    }
}

fn cell_forest_config(cell: &GridCell, bootstrap: bool, seed: u64) -> ForestConfig {
    ForestConfig {
        n_estimators: cell.n_estimators,
        criterion: cell.criterion,
        max_features: cell.max_features,
        bootstrap,
        max_depth: None,
        min_samples_split: 2,
        seed,
    }
}

/// Train and evaluate every cell of the grid against the held-out test split.
///
/// With caching on, family HMMs train once and hidden-state features are
/// extracted once per distinct L; forests still train per cell. Failed cells
/// are recorded and skipped; the search only errors when no cell succeeds.
pub fn grid_search(
    split: &CorpusSplit,
    grid: &GridSpec,
    params: &GridParams,
) -> Result<GridSearchOutput> {
    let cells = grid.cells()?;
    let outcomes: Vec<std::result::Result<(CellResult, EvaluationReport), String>> =
        if params.cache {
            run_cells_cached(split, &cells, params)?
        } else {
            cells
                .par_iter()
                .enumerate()
                .map(|(index, cell)| {
                    run_cell_uncached(split, cell, params, index)
                        .map_err(|e| e.to_string())
                })
                .collect()
        };

    let mut results = Vec::new();
    let mut failures = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut best_report = None;
    // Enumeration index of the best cell, used to re-derive its forest seed.
    let mut best_cell_index = 0;
    for (cell_index, (cell, outcome)) in cells.iter().zip(outcomes).enumerate() {
        match outcome {
            Ok((result, report)) => {
                if best.is_none_or(|(_, acc)| result.accuracy > acc) {
                    best = Some((results.len(), result.accuracy));
                    best_report = Some(report);
                    best_cell_index = cell_index;
                }
                results.push(result);
            }
            Err(message) => failures.push(CellFailure {
                cell: *cell,
                message,
            }),
        }
    }
    let Some((best_index, _)) = best else {
        return Err(Error::Search(format!(
            "all {} grid cells failed; first failure: {}",
            cells.len(),
            failures.first().map_or("none".into(), |f| f.message.clone())
        )));
    };
    let best_model = train_cell_model(split, &cells[best_cell_index], params, best_cell_index)?;
    Ok(GridSearchOutput {
        best_index,
        results,
        failures,
        best_model,
        best_report: best_report.unwrap(),
    })
}

/// Retrain the winning cell's model for persistence. Training is
/// deterministic, so this reproduces exactly what the cell evaluated.
fn train_cell_model(
    split: &CorpusSplit,
    cell: &GridCell,
    params: &GridParams,
    cell_index: usize,
) -> Result<TrainedModel> {
    let forest_config = cell_forest_config(
        cell,
        params.bootstrap,
        derive_seed(params.seed, cell_index as u64),
    );
    match params.kind {
        PipelineKind::HmmRf => Ok(TrainedModel::HmmRf(train_pipeline(
            split,
            &params.hmm_config,
            &forest_config,
            cell.l,
            params.max_train_symbols,
        )?)),
        PipelineKind::RawRf => Ok(TrainedModel::RawRf(train_raw_baseline(
            split,
            &forest_config,
            cell.l,
        )?)),
    }
}

fn run_cell_uncached(
    split: &CorpusSplit,
    cell: &GridCell,
    params: &GridParams,
    cell_index: usize,
) -> Result<(CellResult, EvaluationReport)> {
    let start = Instant::now();
    let model = train_cell_model(split, cell, params, cell_index)?;
    let report = evaluate(model.as_classifier(), &split.test)?;
    Ok((
        CellResult {
            cell: *cell,
            accuracy: report.accuracy,
            weighted_f1: report.weighted_f1,
            wall_time_ms: start.elapsed().as_millis() as u64,
        },
        report,
    ))
}

/// Per-L design matrices shared by every cell with that L.
struct CachedFeatures {
    x_train: Vec<Vec<f64>>,
    x_test: Vec<Vec<f64>>,
}

fn run_cells_cached(
    split: &CorpusSplit,
    cells: &[GridCell],
    params: &GridParams,
) -> Result<Vec<std::result::Result<(CellResult, EvaluationReport), String>>> {
    // Stage shared across all cells; a failure here fails the whole search.
    let family_models = match params.kind {
        PipelineKind::HmmRf => Some(
            train_family_hmms(
                &split.train,
                &params.hmm_config,
                split.vocabulary.size(),
                params.max_train_symbols,
            )
            .map_err(|e| Error::Search(format!("family HMM stage: {e}")))?,
        ),
        PipelineKind::RawRf => None,
    };
    let families: Vec<String> = match &family_models {
        Some(fm) => fm.families().to_vec(),
        None => {
            let mut f: Vec<String> = split.train.iter().map(|s| s.family.clone()).collect();
            f.sort();
            f.dedup();
            f
        }
    };
    let labels: Vec<usize> = split
        .train
        .iter()
        .map(|s| {
            families
                .binary_search_by(|f| f.as_str().cmp(&s.family))
                .map_err(|_| Error::Search(format!("unknown family {:?}", s.family)))
        })
        .collect::<Result<_>>()?;

    let mut distinct_ls: Vec<usize> = Vec::new();
    for cell in cells {
        if !distinct_ls.contains(&cell.l) {
            distinct_ls.push(cell.l);
        }
    }

    let featurize = |seqs: &[LabeledSequence], l: usize| -> Result<Vec<Vec<f64>>> {
        seqs.par_iter()
            .map(|seq| {
                let raw: Result<Vec<f64>> = match &family_models {
                    Some(fm) => extract_features(fm, &seq.symbols, l),
                    None => {
                        if seq.symbols.len() < l {
                            Err(Error::ShortSample {
                                length: seq.symbols.len(),
                                required: l,
                            })
                        } else {
                            Ok(seq.symbols[..l].iter().map(|&s| s as f64).collect())
                        }
                    }
                };
                raw.map_err(|e| Error::Search(format!("sample {}: {e}", seq.sample_id)))
            })
            .collect()
    };

    let mut per_l: Vec<(usize, std::result::Result<CachedFeatures, String>)> = Vec::new();
    for &l in &distinct_ls {
        let built = (|| -> Result<CachedFeatures> {
            let x_train_raw = featurize(&split.train, l)?;
            let x_test_raw = featurize(&split.test, l)?;
            match params.kind {
                PipelineKind::HmmRf => {
                    let scaler = fit_scaler(&x_train_raw)?;
                    Ok(CachedFeatures {
                        x_train: x_train_raw
                            .iter()
                            .map(|v| scaler.transform(v))
                            .collect::<Result<_>>()?,
                        x_test: x_test_raw
                            .iter()
                            .map(|v| scaler.transform(v))
                            .collect::<Result<_>>()?,
                    })
                }
                PipelineKind::RawRf => Ok(CachedFeatures {
                    x_train: x_train_raw,
                    x_test: x_test_raw,
                }),
            }
        })();
        per_l.push((l, built.map_err(|e| e.to_string())));
    }

    let actual: Vec<&str> = split.test.iter().map(|s| s.family.as_str()).collect();
    Ok(cells
        .par_iter()
        .enumerate()
        .map(|(index, cell)| {
            let start = Instant::now();
            let cached = match &per_l.iter().find(|(l, _)| *l == cell.l).unwrap().1 {
                Ok(c) => c,
                Err(e) => return Err(e.clone()),
            };
            let forest_config = cell_forest_config(
                cell,
                params.bootstrap,
                derive_seed(params.seed, index as u64),
            );
            let forest =
                train_forest(&cached.x_train, &labels, &forest_config).map_err(|e| e.to_string())?;
            let predicted: Vec<&str> = cached
                .x_test
                .iter()
                .map(|x| forest.predict(x).map(|(label, _)| families[label].as_str()))
                .collect::<Result<_>>()
                .map_err(|e| e.to_string())?;
            let report = report_from_names(&actual, &predicted, &families).map_err(|e| e.to_string())?;
            Ok((
                CellResult {
                    cell: *cell,
                    accuracy: report.accuracy,
                    weighted_f1: report.weighted_f1,
                    wall_time_ms: start.elapsed().as_millis() as u64,
                },
                report,
            ))
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Sweep summaries
// ---------------------------------------------------------------------------

/// Mean accuracy per value of one axis, averaged over all cells sharing that
/// value. Values appear in enumeration order.
pub fn sweep_report(results: &[CellResult], axis: &str) -> Result<Vec<(String, f64)>> {
    if results.is_empty() {
        return Err(Error::Argument("empty results table".into()));
    }
    let key = |cell: &GridCell| -> Result<String> {
        Ok(match axis {
            "L" => cell.l.to_string(),
            "n_estimators" => cell.n_estimators.to_string(),
            "criterion" => cell.criterion.to_string(),
            "max_features" => cell.max_features.to_string(),
            other => return Err(Error::Argument(format!("unknown sweep axis {other:?}"))),
        })
    };
    let mut groups: Vec<(String, Vec<f64>)> = Vec::new();
    for result in results {
        let k = key(&result.cell)?;
        match groups.iter_mut().find(|(g, _)| *g == k) {
            Some((_, accs)) => accs.push(result.accuracy),
            None => groups.push((k, vec![result.accuracy])),
        }
    }
    Ok(groups
        .into_iter()
        .map(|(k, accs)| {
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            (k, mean)
        })
        .collect())
}

/// Axis names accepted by [`sweep_report`], in declared order.
pub const SWEEP_AXES: [&str; 4] = ["L", "n_estimators", "criterion", "max_features"];

// ---------------------------------------------------------------------------
// CSV persistence
// ---------------------------------------------------------------------------

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// One row per successful cell: hyperparameters, accuracy, weighted F1, and
/// wall time. Floats are written in full precision.
pub fn write_results_csv(path: &Path, results: &[CellResult]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    writer
        .write_record([
            "L",
            "n_estimators",
            "criterion",
            "max_features",
            "accuracy",
            "weighted_f1",
            "wall_time_ms",
        ])
        .map_err(|e| csv_error(path, e))?;
    for r in results {
        writer
            .write_record([
                r.cell.l.to_string(),
                r.cell.n_estimators.to_string(),
                r.cell.criterion.to_string(),
                r.cell.max_features.to_string(),
                r.accuracy.to_string(),
                r.weighted_f1.to_string(),
                r.wall_time_ms.to_string(),
            ])
            .map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read back a results table written by [`write_results_csv`].
pub fn read_results_csv(path: &Path) -> Result<Vec<CellResult>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let field = |i: usize| -> Result<&str> {
            record.get(i).ok_or_else(|| Error::Ingestion {
                path: path.to_path_buf(),
                message: format!("missing column {i}"),
            })
        };
        let parse_err = |what: &str| Error::Ingestion {
            path: path.to_path_buf(),
            message: format!("bad {what} column"),
        };
        rows.push(CellResult {
            cell: GridCell {
                l: field(0)?.parse().map_err(|_| parse_err("L"))?,
                n_estimators: field(1)?.parse().map_err(|_| parse_err("n_estimators"))?,
                criterion: field(2)?.parse()?,
                max_features: field(3)?.parse()?,
            },
            accuracy: field(4)?.parse().map_err(|_| parse_err("accuracy"))?,
            weighted_f1: field(5)?.parse().map_err(|_| parse_err("weighted_f1"))?,
            wall_time_ms: field(6)?.parse().map_err(|_| parse_err("wall_time_ms"))?,
        });
    }
    Ok(rows)
}

/// Two columns: the axis value and the mean accuracy over cells sharing it.
pub fn write_sweep_csv(path: &Path, rows: &[(String, f64)]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    writer
        .write_record(["axis_value", "mean_accuracy"])
        .map_err(|e| csv_error(path, e))?;
    for (value, mean) in rows {
        writer
            .write_record([value.as_str(), &mean.to_string()])
            .map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

// ===========================================================================
// Tests
// ===========================================================================
