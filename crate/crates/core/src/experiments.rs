//! Experiment drivers behind the command-line harness. Each driver is a pure
//! function of its config and inputs, and each `write_*` helper lays the
//! result out in an output directory with fixed file names.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::{
    containment_grid, energy_decay_audit, frontier_sweep, inter_layer_similarity, interpolation_bound_report, lemma_fuzz,
    probe_bound_report, random_rank_pairs, spearman, convergence_similarity, FrontierTable,
};
use crate::config::RunConfig;
use crate::data::{load_checkpoint, load_dataset, save_checkpoint, synth_clusters, Checkpoint, Dataset, MetricsLog, RunLogWriter};
use crate::error::{NsnError, Result};
use crate::linalg::seeded_rng;
use crate::nn::{Layer, Model, NsnLayer, RankSpec};
use crate::surgery::{surgical_replace, SurgeryPlan, SurgeryReport};
use crate::training::{evaluate, train_with_callback, ModeKind, TrainConfig, UncertaintyParams};

pub const CHECKPOINT_FILE: &str = "checkpoint.nsnc";
pub const RUNLOG_FILE: &str = "runlog.jsonl";
pub const FRONTIER_FILE: &str = "frontier.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Mixed into the training seed to give weight initialization its own stream.
const INIT_STREAM: u64 = 0x1b87_3593_cc9e_2d51;

/// Train and held-out splits of the configured dataset.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let full = match &cfg.data.file {
        Some(f) => load_dataset(&f.path, f.format)?,
        None => {
            let s = cfg.synth_or_default();
            synth_clusters(s.seed, s.num_classes, s.dim, s.per_class, s.separation)?
        }
    };
    if cfg.data.test_fraction == 0.0 {
        return Ok((full.clone(), full));
    }
    full.stratified_split(cfg.data.test_fraction, cfg.data.split_seed)
}

/// The configured MLP with NSN layers of max rank `max_rank` (dense when `None`).
pub fn build_model(cfg: &RunConfig, data: &Dataset, max_rank: Option<usize>, seed: u64) -> Result<Model> {
    let mut dims = vec![data.dim()];
    dims.extend(&cfg.model.hidden);
    dims.push(data.num_classes);
    Model::mlp(&dims, max_rank, cfg.model.activation, &mut seeded_rng(seed ^ INIT_STREAM))
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub mode: ModeKind,
    pub seed: u64,
    pub anchor_rank: usize,
    /// Held-out accuracy of the anchor model.
    pub highest_accuracy: f64,
    pub avg_id_accuracy: f64,
    pub avg_ood_accuracy: f64,
    pub id_accuracy: BTreeMap<usize, f64>,
    pub ood_accuracy: BTreeMap<usize, f64>,
    pub s: BTreeMap<usize, f64>,
    /// Spearman correlation of rank against `s_k` over the rank pool.
    pub s_rank_spearman: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub log: MetricsLog,
    pub frontier: FrontierTable,
    pub summary: TrainSummary,
}

/// Trains one NSN model per the config. When `runlog` is set, records are
/// streamed there and flushed after every epoch.
pub fn run_train(cfg: &RunConfig, runlog: Option<&Path>) -> Result<TrainRun> {
    cfg.validate()?;
    let (train_data, test_data) = load_data(cfg)?;
    let model = build_model(cfg, &train_data, cfg.model.nsn_rank(), cfg.train.seed)?;
    train_model(cfg, &cfg.train, model, &train_data, &test_data, runlog)
}

fn train_model(
    cfg: &RunConfig,
    tc: &TrainConfig,
    model: Model,
    train_data: &Dataset,
    test_data: &Dataset,
    runlog: Option<&Path>,
) -> Result<TrainRun> {
    let mut writer = runlog.map(RunLogWriter::create).transpose()?;
    let outcome = train_with_callback(&model, train_data, Some(test_data), tc, |records| {
        if let Some(w) = writer.as_mut() {
            for r in records {
                w.append(r)?;
            }
            w.flush()?;
        }
        Ok(())
    })?;
    let max_rank = outcome.model.max_rank();
    let mut ranks: Vec<usize> = tc.id_ranks();
    ranks.extend(tc.ood_ranks());
    if max_rank.is_some() {
        ranks.push(tc.anchor_rank);
    }
    let frontier = frontier_sweep(&outcome.model, test_data, &ranks, Some(&outcome.uncertainty))?;
    let summary = summarize(tc, &outcome.model, test_data, &frontier, &outcome.uncertainty)?;

    let mut checkpoint = Checkpoint::new(outcome.model);
    checkpoint.uncertainty = tc.use_uncertainty.then_some(outcome.uncertainty);
    checkpoint.meta.seed = Some(tc.seed);
    checkpoint.meta.config_digest = Some(cfg.digest());
    checkpoint.meta.notes.insert("mode".into(), tc.mode.to_string());
    checkpoint.meta.notes.insert("anchor_rank".into(), tc.anchor_rank.to_string());
    Ok(TrainRun {
        checkpoint,
        log: outcome.log,
        frontier,
        summary,
    })
}

fn summarize(tc: &TrainConfig, model: &Model, test: &Dataset, frontier: &FrontierTable, u: &UncertaintyParams) -> Result<TrainSummary> {
    let acc = |r: usize| -> Result<f64> {
        match frontier.accuracy_at(r) {
            Some(a) => Ok(a),
            None => Ok(evaluate(model, test, RankSpec::Rank(r))?.1),
        }
    };
    let anchor = if model.max_rank().is_some() {
        acc(tc.anchor_rank)?
    } else {
        evaluate(model, test, RankSpec::Full)?.1
    };
    let id_accuracy: BTreeMap<usize, f64> = tc.id_ranks().into_iter().map(|r| Ok((r, acc(r)?))).collect::<Result<_>>()?;
    let ood_accuracy: BTreeMap<usize, f64> = tc.ood_ranks().into_iter().map(|r| Ok((r, acc(r)?))).collect::<Result<_>>()?;
    let pool: Vec<(f64, f64)> = tc
        .rank_pool
        .iter()
        .filter_map(|r| u.values().get(r).map(|&s| (*r as f64, s)))
        .collect();
    let s_rank_spearman = (pool.len() >= 2).then(|| {
        let (k, s): (Vec<f64>, Vec<f64>) = pool.into_iter().unzip();
        spearman(&k, &s)
    });
    Ok(TrainSummary {
        mode: tc.mode,
        seed: tc.seed,
        anchor_rank: tc.anchor_rank,
        highest_accuracy: anchor,
        avg_id_accuracy: mean(id_accuracy.values().copied()),
        avg_ood_accuracy: mean(ood_accuracy.values().copied()),
        id_accuracy,
        ood_accuracy,
        s: u.values().clone(),
        s_rank_spearman,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes `checkpoint.nsnc`, `frontier.csv` and `summary.json`. The run log
/// is written only if it was not already streamed.
pub fn write_train(run: &TrainRun, dir: &Path, runlog_streamed: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_checkpoint(&run.checkpoint, dir.join(CHECKPOINT_FILE))?;
    if !runlog_streamed {
        crate::data::write_runlog(&run.log, dir.join(RUNLOG_FILE))?;
    }
    fs::write(dir.join(FRONTIER_FILE), run.frontier.to_csv())?;
    write_json(&dir.join(SUMMARY_FILE), &run.summary)
}

// ---------------------------------------------------------------------------
// baselines
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Native,
    Truncate,
}

/// Plain cross-entropy at a single rank, same optimizer settings as `base`.
fn plain_config(base: &TrainConfig, anchor: usize) -> TrainConfig {
    TrainConfig {
        mode: ModeKind::CeOnly,
        use_uncertainty: false,
        anchor_rank: anchor,
        rank_pool: Vec::new(),
        eval_ranks: Vec::new(),
        interpolated_eval_ranks: Vec::new(),
        ..base.clone()
    }
}

#[derive(Debug, Clone)]
pub struct BaselineRun {
    pub kind: BaselineKind,
    pub table: FrontierTable,
    /// The truncation baseline's single trained model.
    pub checkpoint: Option<Checkpoint>,
}

pub fn run_baseline(cfg: &RunConfig, kind: BaselineKind) -> Result<BaselineRun> {
    cfg.validate()?;
    let (train_data, test_data) = load_data(cfg)?;
    let mut ranks = cfg.baseline.ranks.clone();
    ranks.sort_unstable();
    ranks.dedup();
    match kind {
        BaselineKind::Native => {
            let mut table = FrontierTable::default();
            for &r in &ranks {
                let model = build_model(cfg, &train_data, Some(r), cfg.train.seed)?;
                let run = train_model(cfg, &plain_config(&cfg.train, r), model, &train_data, &test_data, None)?;
                let mut row = frontier_sweep(&run.checkpoint.model, &test_data, &[r], None)?.rows.remove(0);
                row.s = None;
                table.rows.push(row);
            }
            Ok(BaselineRun {
                kind,
                table,
                checkpoint: None,
            })
        }
        BaselineKind::Truncate => {
            let max_rank = cfg
                .model
                .nsn_rank()
                .ok_or_else(|| NsnError::config("model.max_rank", "the truncation baseline needs NSN layers"))?;
            if let Some(&r) = ranks.iter().find(|&&r| r > max_rank) {
                return Err(NsnError::config("baseline.ranks", format!("rank {r} exceeds model.max_rank {max_rank}")));
            }
            let model = build_model(cfg, &train_data, Some(max_rank), cfg.train.seed)?;
            let tc = plain_config(&cfg.train, max_rank);
            let run = train_model(cfg, &tc, model, &train_data, &test_data, None)?;
            let table = frontier_sweep(&run.checkpoint.model, &test_data, &ranks, None)?;
            Ok(BaselineRun {
                kind,
                table,
                checkpoint: Some(run.checkpoint),
            })
        }
    }
}

pub fn baseline_file(kind: BaselineKind) -> &'static str {
    match kind {
        BaselineKind::Native => "baseline_native.csv",
        BaselineKind::Truncate => "baseline_truncate.csv",
    }
}

pub fn write_baseline(run: &BaselineRun, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(baseline_file(run.kind)), run.table.to_csv())?;
    if let Some(ck) = &run.checkpoint {
        save_checkpoint(ck, dir.join("baseline_truncate.nsnc"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: ModeKind,
    pub seed: u64,
    pub highest_accuracy: f64,
    pub avg_id_accuracy: f64,
    pub avg_ood_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummaryRow {
    pub mode: ModeKind,
    pub runs: usize,
    pub highest_mean: f64,
    pub highest_std: f64,
    pub avg_id_mean: f64,
    pub avg_id_std: f64,
    pub avg_ood_mean: f64,
    pub avg_ood_std: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn summary(&self) -> Vec<AblationSummaryRow> {
        let mut modes: Vec<ModeKind> = Vec::new();
        for r in &self.rows {
            if !modes.contains(&r.mode) {
                modes.push(r.mode);
            }
        }
        modes
            .into_iter()
            .map(|mode| {
                let rows: Vec<&AblationRow> = self.rows.iter().filter(|r| r.mode == mode).collect();
                let stats = |f: fn(&AblationRow) -> f64| mean_std(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
                let (highest_mean, highest_std) = stats(|r| r.highest_accuracy);
                let (avg_id_mean, avg_id_std) = stats(|r| r.avg_id_accuracy);
                let (avg_ood_mean, avg_ood_std) = stats(|r| r.avg_ood_accuracy);
                AblationSummaryRow {
                    mode,
                    runs: rows.len(),
                    highest_mean,
                    highest_std,
                    avg_id_mean,
                    avg_id_std,
                    avg_ood_mean,
                    avg_ood_std,
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,seed,highest_accuracy,avg_id_accuracy,avg_ood_accuracy\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{}", r.mode, r.seed, r.highest_accuracy, r.avg_id_accuracy, r.avg_ood_accuracy).unwrap();
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("mode,runs,highest_mean,highest_std,avg_id_mean,avg_id_std,avg_ood_mean,avg_ood_std\n");
        for r in self.summary() {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.mode, r.runs, r.highest_mean, r.highest_std, r.avg_id_mean, r.avg_id_std, r.avg_ood_mean, r.avg_ood_std
            )
            .unwrap();
        }
        out
    }
}

/// Population mean and sample standard deviation (0 for a single value).
fn mean_std(values: &[f64]) -> (f64, f64) {
    let m = mean(values.iter().copied());
    if values.len() < 2 {
        return (m, 0.0);
    }
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    (m, var.sqrt())
}

/// One training run per (mode, seed); data split is shared across runs.
pub fn run_ablation(cfg: &RunConfig) -> Result<AblationTable> {
    cfg.validate()?;
    let (train_data, test_data) = load_data(cfg)?;
    let mut table = AblationTable::default();
    for &mode in &cfg.ablate.modes {
        for &seed in &cfg.ablate.seeds {
            let tc = TrainConfig {
                mode,
                seed,
                ..cfg.train.clone()
            };
            tc.validate()?;
            let model = build_model(cfg, &train_data, cfg.model.nsn_rank(), seed)?;
            let run = train_model(cfg, &tc, model, &train_data, &test_data, None)?;
            table.rows.push(AblationRow {
                mode,
                seed,
                highest_accuracy: run.summary.highest_accuracy,
                avg_id_accuracy: run.summary.avg_id_accuracy,
                avg_ood_accuracy: run.summary.avg_ood_accuracy,
            });
        }
    }
    Ok(table)
}

pub fn write_ablation(table: &AblationTable, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("ablation.csv"), table.to_csv())?;
    fs::write(dir.join("ablation_summary.csv"), table.summary_csv())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// surgery
// ---------------------------------------------------------------------------

pub fn surgery_plan(cfg: &RunConfig, ckpt: &Checkpoint) -> SurgeryPlan {
    if cfg.surgery.layers.is_empty() && cfg.surgery.all_dense {
        SurgeryPlan::all_dense(&ckpt.model)
    } else {
        SurgeryPlan {
            layers: cfg.surgery.layers.clone(),
        }
    }
}

pub fn run_surgery(cfg: &RunConfig, input: &Path, output: &Path) -> Result<SurgeryReport> {
    let ckpt = load_checkpoint(input)?;
    let (out, report) = surgical_replace(&ckpt, &surgery_plan(cfg, &ckpt))?;
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_checkpoint(&out, output)?;
    let report_path = output.with_extension("report.json");
    write_json(&report_path, &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnalysisKind {
    Containment,
    Energy,
    Lemma,
    Bound,
    Similarity,
    Frontier,
}

impl AnalysisKind {
    pub const ALL: [AnalysisKind; 6] = [
        AnalysisKind::Containment,
        AnalysisKind::Energy,
        AnalysisKind::Lemma,
        AnalysisKind::Bound,
        AnalysisKind::Similarity,
        AnalysisKind::Frontier,
    ];
}

/// Named output files of one analysis, in write order.
pub type Outputs = Vec<(String, String)>;

fn nsn_layer(model: &Model, index: usize) -> Result<&NsnLayer> {
    match model.blocks().get(index).map(|b| &b.layer) {
        Some(Layer::Nsn(l)) => Ok(l),
        Some(Layer::Dense(_)) => Err(NsnError::Unsupported(format!("layer {index} is dense, not NSN"))),
        None => Err(NsnError::config("analysis.layer", format!("model has {} layers", model.blocks().len()))),
    }
}

pub fn run_analysis(cfg: &RunConfig, ckpt: &Checkpoint, kind: AnalysisKind) -> Result<Outputs> {
    cfg.validate()?;
    let a = &cfg.analysis;
    let model = &ckpt.model;
    match kind {
        AnalysisKind::Containment => {
            let grid = containment_grid(nsn_layer(model, a.layer)?, &a.containment_ranks)?;
            Ok(vec![("containment.csv".into(), grid.to_csv())])
        }
        AnalysisKind::Energy => {
            let report = energy_decay_audit(nsn_layer(model, a.layer)?);
            Ok(vec![
                ("energy.csv".into(), report.to_csv()),
                ("energy_violations.json".into(), json(&report.violations)?),
            ])
        }
        AnalysisKind::Lemma => {
            let layers: Vec<&NsnLayer> = model
                .blocks()
                .iter()
                .filter_map(|b| match &b.layer {
                    Layer::Nsn(l) => Some(l),
                    Layer::Dense(_) => None,
                })
                .collect();
            let report = lemma_fuzz(&layers, a.lemma_samples, &mut seeded_rng(a.seed))?;
            Ok(vec![("lemma.json".into(), json(&report)?)])
        }
        AnalysisKind::Bound => {
            let (_, test) = load_data(cfg)?;
            let single = model.blocks().len() == 1;
            if !single && !a.probe {
                return Err(NsnError::Unsupported(
                    "bound on a multi-layer model needs analysis.probe = true".into(),
                ));
            }
            let probe_layer = nsn_layer(model, model.blocks().len() - 1)?;
            let pairs = random_rank_pairs(probe_layer.max_rank(), a.bound_pairs, &mut seeded_rng(a.seed));
            let mut out = String::from("r1,r_int,empirical_gap,bound,holds\n");
            let mut held = 0usize;
            for (r1, r_int) in pairs {
                let rep = if single {
                    interpolation_bound_report(model, &test, r1, r_int, a.lipschitz)?
                } else {
                    probe_bound_report(model, &test, r1, r_int, a.lipschitz)?
                };
                held += rep.holds as usize;
                writeln!(out, "{},{},{},{},{}", rep.r1, rep.r_int, rep.empirical_gap, rep.bound, rep.holds).unwrap();
            }
            let summary = BTreeMap::from([("pairs", a.bound_pairs), ("held", held)]);
            Ok(vec![("bound.csv".into(), out), ("bound_summary.json".into(), json(&summary)?)])
        }
        AnalysisKind::Similarity => {
            let r = RankSpec::Rank(cfg.train.anchor_rank.min(model.max_rank().unwrap_or(cfg.train.anchor_rank)));
            match &a.reference {
                Some(path) => {
                    let reference = load_checkpoint(path)?;
                    let groups: Vec<_> = (0..model.blocks().len()).map(|i| i..i + 1).collect();
                    let sims = convergence_similarity(model, &reference.model, r, &groups)?;
                    let mut out = String::from("layer,similarity\n");
                    for (i, s) in sims.iter().enumerate() {
                        writeln!(out, "{i},{s}").unwrap();
                    }
                    Ok(vec![("convergence_similarity.csv".into(), out)])
                }
                None => Ok(vec![("similarity.json".into(), json(&inter_layer_similarity(model, r)?)?)]),
            }
        }
        AnalysisKind::Frontier => {
            let (_, test) = load_data(cfg)?;
            let ranks = if a.frontier_ranks.is_empty() {
                (1..=model.max_rank().unwrap_or(1)).collect()
            } else {
                a.frontier_ranks.clone()
            };
            let table = frontier_sweep(model, &test, &ranks, ckpt.uncertainty.as_ref())?;
            Ok(vec![("analysis_frontier.csv".into(), table.to_csv())])
        }
    }
}

fn json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_outputs(outputs: &Outputs, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, body) in outputs {
        fs::write(dir.join(name), body)?;
    }
    Ok(())
}
