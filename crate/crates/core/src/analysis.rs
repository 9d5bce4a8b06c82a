//! Empirical checks on trained or initialized NSN models: subspace
//! containment, factor energy decay, adjacent-rank perturbation and
//! interpolation bounds, weight similarity and compute frontiers.

use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{NsnError, Result};
use crate::linalg::{dot, norm, svd, Matrix, RandomStream};
use crate::nn::{Block, Layer, Model, NsnLayer, RankSpec};
use crate::training::{evaluate, UncertaintyParams};

/// Valid l2 Lipschitz constant of per-example softmax cross-entropy in the logits.
pub const CROSS_ENTROPY_LIPSCHITZ: f64 = std::f64::consts::SQRT_2;

// ---------------------------------------------------------------------------
// Containment
// ---------------------------------------------------------------------------

/// `(1/r_small)·‖U_largeᵀ U_small‖²_F` over the leading left singular vectors.
pub fn containment_score(w_small: &Matrix, w_large: &Matrix, r_small: usize, r_large: usize) -> Result<f64> {
    if w_small.shape() != w_large.shape() {
        return Err(NsnError::Dimension {
            op: "containment_score",
            left: format!("{:?}", w_small.shape()),
            right: format!("{:?}", w_large.shape()),
        });
    }
    let limit = w_small.rows().min(w_small.cols());
    for r in [r_small, r_large] {
        if r == 0 || r > limit {
            return Err(NsnError::Rank { rank: r, max_rank: limit });
        }
    }
    let u_small = svd(w_small)?.u.left_cols(r_small);
    let u_large = svd(w_large)?.u.left_cols(r_large);
    Ok(score_from_bases(&u_small, &u_large))
}

fn score_from_bases(u_small: &Matrix, u_large: &Matrix) -> f64 {
    let proj = u_large.t_matmul(u_small).expect("bases share row count");
    proj.frobenius_norm_sq() / u_small.cols() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainmentGrid {
    pub ranks: Vec<usize>,
    /// `scores[i][j]`: containment of rank `ranks[i]` inside rank `ranks[j]`.
    pub scores: Vec<Vec<f64>>,
}

impl ContainmentGrid {
    /// Smallest entry with `ranks[i] <= ranks[j]`.
    pub fn min_upper(&self) -> f64 {
        self.entries().filter(|&(i, j, _)| i <= j).map(|e| e.2).fold(f64::INFINITY, f64::min)
    }

    /// Smallest entry with `ranks[i] > ranks[j]`.
    pub fn min_lower(&self) -> f64 {
        self.entries().filter(|&(i, j, _)| i > j).map(|e| e.2).fold(f64::INFINITY, f64::min)
    }

    fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.scores
            .iter()
            .enumerate()
            .flat_map(move |(i, row)| row.iter().enumerate().map(move |(j, &s)| (self.ranks[i], self.ranks[j], s)))
    }

    /// Header row `r_small\r_large,<ranks...>`, then one row per small rank.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("r_small\\r_large");
        for r in &self.ranks {
            write!(out, ",{r}").unwrap();
        }
        out.push('\n');
        for (r, row) in self.ranks.iter().zip(&self.scores) {
            write!(out, "{r}").unwrap();
            for s in row {
                write!(out, ",{s}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

pub fn containment_grid(layer: &NsnLayer, ranks: &[usize]) -> Result<ContainmentGrid> {
    let mut ranks = ranks.to_vec();
    ranks.sort_unstable();
    ranks.dedup();
    let limit = layer.d_in().min(layer.d_out());
    let mut bases = Vec::with_capacity(ranks.len());
    for &r in &ranks {
        layer.check_rank(r)?;
        if r > limit {
            return Err(NsnError::Rank { rank: r, max_rank: limit });
        }
        let w = layer.effective_weight(RankSpec::Rank(r))?;
        bases.push(svd(&w)?.u.left_cols(r));
    }
    let scores = bases
        .iter()
        .map(|small| bases.iter().map(|large| score_from_bases(small, large)).collect())
        .collect();
    Ok(ContainmentGrid { ranks, scores })
}

// ---------------------------------------------------------------------------
// Energy decay
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Factor {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyViolation {
    /// 1-based index of the component whose norm exceeds its predecessor's.
    pub index: usize,
    pub factor: Factor,
    pub increase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub a_norms: Vec<f64>,
    pub b_norms: Vec<f64>,
    pub products: Vec<f64>,
    pub violations: Vec<EnergyViolation>,
    /// Violations over the number of adjacent comparisons (2·(R−1)).
    pub violation_fraction: f64,
}

impl EnergyReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,a_norm,b_norm,product\n");
        for i in 0..self.a_norms.len() {
            writeln!(out, "{},{},{},{}", i + 1, self.a_norms[i], self.b_norms[i], self.products[i]).unwrap();
        }
        out
    }
}

/// Per-component norms and every place they increase with index. Diagnostic only.
pub fn energy_decay_audit(layer: &NsnLayer) -> EnergyReport {
    const REL_TOL: f64 = 1e-12;
    let r = layer.max_rank();
    let a_norms: Vec<f64> = (0..r).map(|i| norm(layer.a_vec(i))).collect();
    let b_norms: Vec<f64> = (0..r).map(|i| norm(&layer.b_vec(i))).collect();
    let products = a_norms.iter().zip(&b_norms).map(|(a, b)| a * b).collect();
    let mut violations = Vec::new();
    for (factor, norms) in [(Factor::A, &a_norms), (Factor::B, &b_norms)] {
        for i in 1..r {
            let increase = norms[i] - norms[i - 1];
            if increase > REL_TOL * norms[i - 1].max(f64::MIN_POSITIVE) {
                violations.push(EnergyViolation {
                    index: i + 1,
                    factor,
                    increase,
                });
            }
        }
    }
    let comparisons = 2 * r.saturating_sub(1);
    EnergyReport {
        violation_fraction: if comparisons == 0 {
            0.0
        } else {
            violations.len() as f64 / comparisons as f64
        },
        a_norms,
        b_norms,
        products,
        violations,
    }
}

// ---------------------------------------------------------------------------
// Perturbation and interpolation bounds
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationCheck {
    /// `‖f(x; r+1) − f(x; r)‖`.
    pub lhs: f64,
    /// `‖b_{r+1}‖·‖a_{r+1}‖·‖x‖`.
    pub rhs: f64,
    pub satisfied: bool,
}

pub const PERTURBATION_TOLERANCE: f64 = 1e-9;

pub fn adjacent_perturbation_check(layer: &NsnLayer, x: &[f64], r: usize) -> Result<PerturbationCheck> {
    if r == 0 || r >= layer.max_rank() {
        return Err(NsnError::Rank {
            rank: r,
            max_rank: layer.max_rank().saturating_sub(1),
        });
    }
    if x.len() != layer.d_in() {
        return Err(NsnError::Dimension {
            op: "adjacent_perturbation_check",
            left: format!("x of length {}", x.len()),
            right: format!("d_in {}", layer.d_in()),
        });
    }
    let xm = Matrix::column_vector(x)?;
    let lo = layer.effective_weight(RankSpec::Rank(r))?.matmul(&xm)?;
    let hi = layer.effective_weight(RankSpec::Rank(r + 1))?.matmul(&xm)?;
    let lhs = hi.sub(&lo)?.frobenius_norm();
    let rhs = norm(&layer.b_vec(r)) * norm(layer.a_vec(r)) * norm(x);
    Ok(PerturbationCheck {
        lhs,
        rhs,
        satisfied: lhs <= rhs + PERTURBATION_TOLERANCE,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub r1: usize,
    pub r_int: usize,
    /// `|E(r_int) − E(r1)|` with `E` the dataset-mean cross-entropy.
    pub empirical_gap: f64,
    /// `C · Σ_{i=r1+1}^{r_int} ‖b_i‖‖a_i‖`.
    pub bound: f64,
    /// `lipschitz · mean ‖x‖`.
    pub c: f64,
    pub lipschitz: f64,
    pub mean_input_norm: f64,
    /// `‖b_i‖‖a_i‖` for `i = r1+1..=r_int`.
    pub energies: Vec<f64>,
    pub holds: bool,
}

fn single_nsn_probe(model: &Model) -> Result<&NsnLayer> {
    match model.blocks() {
        [Block {
            layer: Layer::Nsn(l), ..
        }] => Ok(l),
        _ => Err(NsnError::Unsupported(
            "interpolation bound needs a single-NSN-layer probe model; use the probe option for deeper models".into(),
        )),
    }
}

/// Interpolation bound on a model made of exactly one NSN layer feeding the
/// cross-entropy. `lipschitz` must bound the per-example loss in the logits
/// (see [`CROSS_ENTROPY_LIPSCHITZ`]).
pub fn interpolation_bound_report(model: &Model, data: &Dataset, r1: usize, r_int: usize, lipschitz: f64) -> Result<BoundReport> {
    let layer = single_nsn_probe(model)?;
    if r1 > r_int {
        return Err(NsnError::RankOrder {
            anchor: r_int,
            variant: r1,
        });
    }
    layer.check_rank(r1)?;
    layer.check_rank(r_int)?;
    if !(lipschitz >= 0.0 && lipschitz.is_finite()) {
        return Err(NsnError::config("lipschitz", "must be finite and non-negative"));
    }
    let empirical_gap = interpolation_gap(model, data, r1, r_int)?;
    let mean_input_norm = (0..data.len()).map(|i| norm(data.features.row(i))).sum::<f64>() / data.len() as f64;
    let energies: Vec<f64> = (r1..r_int).map(|i| norm(&layer.b_vec(i)) * norm(layer.a_vec(i))).collect();
    let c = lipschitz * mean_input_norm;
    let bound = c * energies.iter().sum::<f64>();
    Ok(BoundReport {
        r1,
        r_int,
        empirical_gap,
        bound,
        c,
        lipschitz,
        mean_input_norm,
        energies,
        holds: bound >= empirical_gap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaFuzzReport {
    pub samples: usize,
    pub violations: usize,
    /// Largest observed `lhs / rhs` over samples with `rhs > 0`.
    pub max_ratio: f64,
}

/// Adjacent-rank perturbation checks on `samples` random `(layer, x, r)`
/// draws from `layers`. Layers with `R < 2` are skipped.
pub fn lemma_fuzz(layers: &[&NsnLayer], samples: usize, rng: &mut RandomStream) -> Result<LemmaFuzzReport> {
    let usable: Vec<&NsnLayer> = layers.iter().copied().filter(|l| l.max_rank() >= 2).collect();
    if usable.is_empty() {
        return Err(NsnError::Unsupported("perturbation check needs an NSN layer with max rank >= 2".into()));
    }
    let mut report = LemmaFuzzReport {
        samples,
        violations: 0,
        max_ratio: 0.0,
    };
    for _ in 0..samples {
        let layer = usable[rng.below(usable.len())];
        let scale = 10f64.powf(4.0 * rng.uniform() - 2.0);
        let x: Vec<f64> = (0..layer.d_in()).map(|_| scale * rng.gaussian()).collect();
        let r = 1 + rng.below(layer.max_rank() - 1);
        let check = adjacent_perturbation_check(layer, &x, r)?;
        if !check.satisfied {
            report.violations += 1;
        }
        if check.rhs > 0.0 {
            report.max_ratio = report.max_ratio.max(check.lhs / check.rhs);
        }
    }
    Ok(report)
}

/// Random `(r1, r_int)` pairs with `1 <= r1 <= r_int <= R`.
pub fn random_rank_pairs(max_rank: usize, count: usize, rng: &mut RandomStream) -> Vec<(usize, usize)> {
    (0..count)
        .map(|_| {
            let a = 1 + rng.below(max_rank);
            let b = 1 + rng.below(max_rank);
            (a.min(b), a.max(b))
        })
        .collect()
}

/// Bound report on the last layer of a deeper model. Earlier layers run at
/// full rank and act as a fixed feature map for the probe.
pub fn probe_bound_report(model: &Model, data: &Dataset, r1: usize, r_int: usize, lipschitz: f64) -> Result<BoundReport> {
    let (probe, features) = last_layer_probe(model, data)?;
    interpolation_bound_report(&probe, &features, r1, r_int, lipschitz)
}

fn last_layer_probe(model: &Model, data: &Dataset) -> Result<(Model, Dataset)> {
    let blocks = model.blocks();
    let (last, prefix) = blocks.split_last().expect("models are non-empty");
    if !last.layer.is_nsn() {
        return Err(NsnError::Unsupported("probe layer (the last layer) is not an NSN layer".into()));
    }
    let probe = Model::new(vec![last.clone()])?;
    if prefix.is_empty() {
        return Ok((probe, data.clone()));
    }
    let trace = model.forward_trace(&data.features, RankSpec::Full)?;
    let features = trace.hidden().last().expect("prefix is non-empty").clone();
    Ok((probe, Dataset::new(features, data.labels.clone(), data.num_classes, data.split)?))
}

/// `|E(r_int) − E(r1)|` over `data`; descriptive, no bound claimed.
pub fn interpolation_gap(model: &Model, data: &Dataset, r1: usize, r_int: usize) -> Result<f64> {
    let (e1, _) = evaluate(model, data, RankSpec::Rank(r1))?;
    let (e2, _) = evaluate(model, data, RankSpec::Rank(r_int))?;
    Ok((e2 - e1).abs())
}

// ---------------------------------------------------------------------------
// Similarity
// ---------------------------------------------------------------------------

pub fn cosine_similarity(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(NsnError::Dimension {
            op: "cosine_similarity",
            left: format!("{:?}", a.shape()),
            right: format!("{:?}", b.shape()),
        });
    }
    let denom = a.frobenius_norm() * b.frobenius_norm();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(dot(a.data(), b.data()) / denom)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub similarity: f64,
    pub included: Vec<usize>,
    pub excluded: Vec<usize>,
}

/// Mean pairwise cosine similarity of flattened effective weights at rank
/// `r`, over the largest group of layers sharing one weight shape.
pub fn inter_layer_similarity(model: &Model, r: RankSpec) -> Result<SimilarityReport> {
    let shapes: Vec<(usize, usize)> = model.blocks().iter().map(|b| (b.layer.d_out(), b.layer.d_in())).collect();
    let mut best: Option<((usize, usize), usize)> = None;
    for s in &shapes {
        let count = shapes.iter().filter(|t| *t == s).count();
        if best.is_none_or(|(_, c)| count > c) {
            best = Some((*s, count));
        }
    }
    let (shape, count) = best.expect("models are non-empty");
    if count < 2 {
        return Err(NsnError::Unsupported("fewer than two layers share a weight shape".into()));
    }
    let (included, excluded): (Vec<usize>, Vec<usize>) = (0..shapes.len()).partition(|&i| shapes[i] == shape);
    let weights = included
        .iter()
        .map(|&i| model.blocks()[i].layer.weight_at(r))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..weights.len() {
        for j in i + 1..weights.len() {
            total += cosine_similarity(&weights[i], &weights[j])?;
            pairs += 1;
        }
    }
    Ok(SimilarityReport {
        similarity: total / pairs as f64,
        included,
        excluded,
    })
}

/// Cosine similarity between NSN effective weights at `r` and the reference
/// model's weights, averaged within each group of layer indices.
pub fn convergence_similarity(nsn: &Model, reference: &Model, r: RankSpec, depth_groups: &[Range<usize>]) -> Result<Vec<f64>> {
    if nsn.blocks().len() != reference.blocks().len() {
        return Err(NsnError::Dimension {
            op: "convergence_similarity",
            left: format!("{} layers", nsn.blocks().len()),
            right: format!("{} layers", reference.blocks().len()),
        });
    }
    nsn.check_rank(r)?;
    depth_groups
        .iter()
        .map(|group| {
            if group.is_empty() || group.end > nsn.blocks().len() {
                return Err(NsnError::config("depth_groups", format!("invalid group {group:?}")));
            }
            let mut total = 0.0;
            for i in group.clone() {
                let w = nsn.blocks()[i].layer.weight_at(r)?;
                let w_ref = reference.blocks()[i].layer.weight_at(RankSpec::Full)?;
                total += cosine_similarity(&w, &w_ref)?;
            }
            Ok(total / group.len() as f64)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Frontier
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierRow {
    pub rank: usize,
    pub flops: u64,
    pub loss: f64,
    pub accuracy: f64,
    /// Learned log-variance at this rank, when one exists.
    pub s: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrontierTable {
    pub rows: Vec<FrontierRow>,
}

impl FrontierTable {
    pub const CSV_HEADER: &'static str = "rank,flops,loss,accuracy";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.rank, r.flops, r.loss, r.accuracy).unwrap();
        }
        out
    }

    pub fn accuracy_at(&self, rank: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.rank == rank).map(|r| r.accuracy)
    }

    /// Largest accuracy drop from any rank to a higher one.
    pub fn max_accuracy_drop(&self) -> f64 {
        let mut best: f64 = f64::NEG_INFINITY;
        let mut drop: f64 = 0.0;
        for r in &self.rows {
            best = best.max(r.accuracy);
            drop = drop.max(best - r.accuracy);
        }
        drop
    }
}

pub fn frontier_sweep(model: &Model, data: &Dataset, ranks: &[usize], u: Option<&UncertaintyParams>) -> Result<FrontierTable> {
    let mut ranks = ranks.to_vec();
    ranks.sort_unstable();
    ranks.dedup();
    let rows = ranks
        .iter()
        .map(|&rank| {
            let r = RankSpec::Rank(rank);
            model.check_rank(r)?;
            let (loss, accuracy) = evaluate(model, data, r)?;
            Ok(FrontierRow {
                rank,
                flops: model.flops(r),
                loss,
                accuracy,
                s: u.and_then(|u| u.values().get(&rank).copied()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FrontierTable { rows })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (fractional_ranks(x), fractional_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn fractional_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}
