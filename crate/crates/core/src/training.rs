//! Multi-rank training.
//!
//! Each step evaluates the model at a fixed anchor rank and (for the joint
//! objectives) one sampled variant rank below it. Per-rank cross-entropies
//! are combined through learnable log-variances `s_k`:
//!
//! ```text
//! L = exp(-s_anchor) CE(anchor) + s_anchor + exp(-s_variant) CE(variant) + s_variant
//! ```
//!
//! plus an optional regularizer selected by [`ModeKind`]. Gradients are
//! computed analytically; an NSN layer evaluated at rank `r` only receives
//! cotangents in rows `0..r` of `A` and columns `0..r` of `B`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, MetricsLog, Phase, RunRecord};
use crate::error::{NsnError, Result};
use crate::linalg::{seeded_rng, Matrix, RandomStream};
use crate::nn::{Activation, ForwardTrace, Layer, Model, RankSpec};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean softmax cross-entropy and its gradient `(softmax - onehot) / batch`.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (n, c) = logits.shape();
    if labels.len() != n {
        return Err(NsnError::Dimension {
            op: "cross_entropy",
            left: format!("{n} logit rows"),
            right: format!("{} labels", labels.len()),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(NsnError::Label { label, num_classes: c });
    }
    let mut grad = Matrix::zeros(n, c);
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        let g = grad.row_mut(i);
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj = (v - log_z).exp() * inv_n;
        }
        g[label] -= inv_n;
    }
    Ok((loss * inv_n, grad))
}

/// Fraction of rows whose arg-max equals the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &label)| argmax(logits.row(i)) == label)
        .count();
    correct as f64 / labels.len().max(1) as f64
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// `exp(-s)·loss + s` with its loss multiplier and derivative in `s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Surrogate {
    pub value: f64,
    pub loss_coeff: f64,
    pub ds: f64,
}

pub fn surrogate_term(loss_ce: f64, s: f64) -> Surrogate {
    let w = (-s).exp();
    Surrogate {
        value: w * loss_ce + s,
        loss_coeff: w,
        ds: 1.0 - w * loss_ce,
    }
}

// ---------------------------------------------------------------------------
// Uncertainty parameters and objective modes
// ---------------------------------------------------------------------------

/// Log-variances `s_k`, one per rank, shared across layers. Missing entries read as 0.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UncertaintyParams {
    s: BTreeMap<usize, f64>,
}

impl UncertaintyParams {
    pub fn from_values(s: BTreeMap<usize, f64>) -> Self {
        UncertaintyParams { s }
    }

    pub fn get(&self, rank: usize) -> f64 {
        self.s.get(&rank).copied().unwrap_or(0.0)
    }

    pub fn set(&mut self, rank: usize, value: f64) {
        self.s.insert(rank, value);
    }

    pub fn values(&self) -> &BTreeMap<usize, f64> {
        &self.s
    }

    fn touch(&mut self, rank: usize) {
        self.s.entry(rank).or_insert(0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    /// Cross-entropy at the anchor only.
    CeOnly,
    /// Anchor CE plus `‖AAᵀ − I‖²_F` per NSN layer.
    CeHardOrtho,
    /// Anchor and variant CE.
    TwoCe,
    /// Two CEs plus `‖logits(anchor) − logits(variant)‖²`.
    TwoCeLogitsReg,
    /// Two CEs plus `‖A_r A_resᵀ‖²_F`, `A_res` the rows between variant and anchor.
    TwoCeResidualOrtho,
    /// Two CEs plus `Σ ‖h_anchor − h_variant‖²` over hidden layers.
    TwoCeHiddenReg,
}

impl ModeKind {
    pub const ALL: [ModeKind; 6] = [
        ModeKind::CeOnly,
        ModeKind::CeHardOrtho,
        ModeKind::TwoCe,
        ModeKind::TwoCeLogitsReg,
        ModeKind::TwoCeResidualOrtho,
        ModeKind::TwoCeHiddenReg,
    ];

    pub fn needs_variant(self) -> bool {
        !matches!(self, ModeKind::CeOnly | ModeKind::CeHardOrtho)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModeKind::CeOnly => "ce_only",
            ModeKind::CeHardOrtho => "ce_hard_ortho",
            ModeKind::TwoCe => "two_ce",
            ModeKind::TwoCeLogitsReg => "two_ce_logits_reg",
            ModeKind::TwoCeResidualOrtho => "two_ce_residual_ortho",
            ModeKind::TwoCeHiddenReg => "two_ce_hidden_reg",
        }
    }
}

impl fmt::Display for ModeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModeKind {
    type Err = NsnError;

    fn from_str(s: &str) -> Result<Self> {
        ModeKind::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| NsnError::config("mode", format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationMode {
    pub kind: ModeKind,
    /// Regularizer weight; ignored by unregularized modes.
    pub lambda: f64,
}

impl AblationMode {
    pub fn new(kind: ModeKind, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(NsnError::config("lambda", "must be finite and non-negative"));
        }
        Ok(AblationMode { kind, lambda })
    }

    pub fn plain(kind: ModeKind) -> Self {
        AblationMode { kind, lambda: 1.0 }
    }
}

/// Everything that determines one step's objective besides data and parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSpec {
    pub anchor: usize,
    pub variant: Option<usize>,
    pub mode: AblationMode,
    pub use_uncertainty: bool,
    /// Regularizers treat anchor-side activations as constants.
    pub detach_anchor: bool,
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrad {
    Nsn { da: Matrix, db: Matrix, dbias: Vec<f64> },
    Dense { dw: Matrix, dbias: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGrad>,
    pub ds: BTreeMap<usize, f64>,
}

impl GradientSet {
    pub fn zeros_like(model: &Model) -> Self {
        let layers = model
            .blocks()
            .iter()
            .map(|b| match &b.layer {
                Layer::Nsn(l) => LayerGrad::Nsn {
                    da: Matrix::zeros(l.a.rows(), l.a.cols()),
                    db: Matrix::zeros(l.b.rows(), l.b.cols()),
                    dbias: vec![0.0; l.bias.len()],
                },
                Layer::Dense(l) => LayerGrad::Dense {
                    dw: Matrix::zeros(l.w.rows(), l.w.cols()),
                    dbias: vec![0.0; l.bias.len()],
                },
            })
            .collect();
        GradientSet {
            layers,
            ds: BTreeMap::new(),
        }
    }

    /// Flattened parameter cotangents in checkpoint order (A, B, bias / W, bias).
    pub fn flat_weights(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.layers {
            match g {
                LayerGrad::Nsn { da, db, dbias } => {
                    out.extend_from_slice(da.data());
                    out.extend_from_slice(db.data());
                    out.extend_from_slice(dbias);
                }
                LayerGrad::Dense { dw, dbias } => {
                    out.extend_from_slice(dw.data());
                    out.extend_from_slice(dbias);
                }
            }
        }
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for g in &mut self.layers {
            match g {
                LayerGrad::Nsn { da, db, dbias } => {
                    out.push(da.data_mut());
                    out.push(db.data_mut());
                    out.push(dbias);
                }
                LayerGrad::Dense { dw, dbias } => {
                    out.push(dw.data_mut());
                    out.push(dbias);
                }
            }
        }
        out
    }

    fn is_finite(&self) -> bool {
        self.flat_weights().iter().all(|v| v.is_finite()) && self.ds.values().all(|v| v.is_finite())
    }
}

/// Mutable views of every weight buffer in checkpoint order.
pub fn parameter_slices_mut(model: &mut Model) -> Vec<&mut [f64]> {
    let mut out: Vec<&mut [f64]> = Vec::new();
    for b in model.blocks_mut() {
        match &mut b.layer {
            Layer::Nsn(l) => {
                out.push(l.a.data_mut());
                out.push(l.b.data_mut());
                out.push(&mut l.bias);
            }
            Layer::Dense(l) => {
                out.push(l.w.data_mut());
                out.push(&mut l.bias);
            }
        }
    }
    out
}

/// Backpropagates `d_output` (and optional per-hidden-layer cotangents) through `trace`.
fn backward(model: &Model, trace: &ForwardTrace, d_output: Matrix, d_hidden: Option<&[Matrix]>, grads: &mut GradientSet) -> Result<()> {
    let n = model.blocks().len();
    let mut carry = Some(d_output);
    for i in (0..n).rev() {
        let block = &model.blocks()[i];
        let mut g = carry.take().expect("cotangent flows to every layer");
        if i + 1 < n {
            if let Some(extra) = d_hidden {
                g = g.add(&extra[i])?;
            }
        }
        let dy = if block.activation == Activation::Identity {
            g
        } else {
            let pre = &trace.pre_activations[i];
            let mut dy = g;
            for (d, &p) in dy.data_mut().iter_mut().zip(pre.data()) {
                *d *= block.activation.derivative(p);
            }
            dy
        };
        let x = &trace.inputs[i];
        match (&block.layer, &mut grads.layers[i]) {
            (Layer::Nsn(l), LayerGrad::Nsn { da, db, dbias }) => {
                let r = trace.ranks[i].expect("nsn trace has a rank");
                let z = trace.projections[i].as_ref().expect("nsn trace has projection");
                let b_r = l.b.left_cols(r);
                let a_r = l.a.top_rows(r);
                let db_r = dy.t_matmul(z)?; // d_out × r
                for row in 0..db.rows() {
                    for (t, v) in db.row_mut(row)[..r].iter_mut().zip(db_r.row(row)) {
                        *t += v;
                    }
                }
                let dz = dy.matmul(&b_r)?; // batch × r
                let da_r = dz.t_matmul(x)?; // r × d_in
                for row in 0..r {
                    for (t, v) in da.row_mut(row).iter_mut().zip(da_r.row(row)) {
                        *t += v;
                    }
                }
                for (t, v) in dbias.iter_mut().zip(dy.column_sums()) {
                    *t += v;
                }
                if i > 0 {
                    carry = Some(dz.matmul(&a_r)?);
                }
            }
            (Layer::Dense(l), LayerGrad::Dense { dw, dbias }) => {
                let dw_new = dy.t_matmul(x)?;
                for (t, v) in dw.data_mut().iter_mut().zip(dw_new.data()) {
                    *t += v;
                }
                for (t, v) in dbias.iter_mut().zip(dy.column_sums()) {
                    *t += v;
                }
                if i > 0 {
                    carry = Some(dy.matmul(&l.w)?);
                }
            }
            _ => unreachable!("gradient set built from this model"),
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Objective
// ---------------------------------------------------------------------------

/// Anchor-side activations used as constant regularization targets.
#[derive(Debug, Clone)]
pub struct AnchorTargets {
    pub logits: Matrix,
    pub hidden: Vec<Matrix>,
}

pub fn anchor_targets(model: &Model, x: &Matrix, anchor: usize) -> Result<AnchorTargets> {
    let trace = model.forward_trace(x, RankSpec::Rank(anchor))?;
    Ok(AnchorTargets {
        hidden: trace.hidden().to_vec(),
        logits: trace.output,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    pub ce_anchor: f64,
    pub ce_variant: Option<f64>,
    pub regularizer: f64,
    pub accuracy_anchor: f64,
}

#[derive(Debug, Clone)]
pub struct Objective {
    pub loss: f64,
    pub grads: GradientSet,
    pub diagnostics: Diagnostics,
}

pub fn total_objective(model: &Model, x: &Matrix, labels: &[usize], spec: &ObjectiveSpec, u: &UncertaintyParams) -> Result<Objective> {
    objective_impl(model, x, labels, spec, u, None)
}

/// Same as [`total_objective`] with externally fixed anchor-side targets.
/// With `detach_anchor`, this is the function whose exact gradient
/// `total_objective` returns.
pub fn total_objective_with_targets(
    model: &Model,
    x: &Matrix,
    labels: &[usize],
    spec: &ObjectiveSpec,
    u: &UncertaintyParams,
    targets: &AnchorTargets,
) -> Result<Objective> {
    objective_impl(model, x, labels, spec, u, Some(targets))
}

fn objective_impl(
    model: &Model,
    x: &Matrix,
    labels: &[usize],
    spec: &ObjectiveSpec,
    u: &UncertaintyParams,
    frozen: Option<&AnchorTargets>,
) -> Result<Objective> {
    let mode = spec.mode;
    let anchor = spec.anchor;
    model.check_rank(RankSpec::Rank(anchor))?;
    let variant = if mode.kind.needs_variant() {
        let v = spec
            .variant
            .ok_or_else(|| NsnError::config("variant", format!("mode {} needs a variant rank", mode.kind)))?;
        if v >= anchor {
            return Err(NsnError::RankOrder { anchor, variant: v });
        }
        model.check_rank(RankSpec::Rank(v))?;
        Some(v)
    } else {
        None
    };

    let mut grads = GradientSet::zeros_like(model);
    let mut diagnostics = Diagnostics::default();
    let weigh = |ce: f64, rank: usize| {
        if spec.use_uncertainty {
            surrogate_term(ce, u.get(rank))
        } else {
            Surrogate {
                value: ce,
                loss_coeff: 1.0,
                ds: 0.0,
            }
        }
    };

    let trace_a = model.forward_trace(x, RankSpec::Rank(anchor))?;
    let (ce_a, dlogits_a) = cross_entropy(&trace_a.output, labels)?;
    let term_a = weigh(ce_a, anchor);
    diagnostics.ce_anchor = ce_a;
    diagnostics.accuracy_anchor = accuracy(&trace_a.output, labels);
    let mut loss = term_a.value;
    let mut d_out_a = dlogits_a.scale(term_a.loss_coeff);
    let mut d_hidden_a: Option<Vec<Matrix>> = None;
    if spec.use_uncertainty {
        grads.ds.insert(anchor, term_a.ds);
    }

    let mut regularizer = 0.0;
    let lambda = mode.lambda;
    let batch = x.rows() as f64;

    if let Some(v) = variant {
        let trace_v = model.forward_trace(x, RankSpec::Rank(v))?;
        let (ce_v, dlogits_v) = cross_entropy(&trace_v.output, labels)?;
        let term_v = weigh(ce_v, v);
        diagnostics.ce_variant = Some(ce_v);
        loss += term_v.value;
        if spec.use_uncertainty {
            grads.ds.insert(v, term_v.ds);
        }
        let mut d_out_v = dlogits_v.scale(term_v.loss_coeff);
        let mut d_hidden_v: Option<Vec<Matrix>> = None;

        let target_logits = match frozen {
            Some(t) => &t.logits,
            None => &trace_a.output,
        };
        let target_hidden: &[Matrix] = match frozen {
            Some(t) => &t.hidden,
            None => trace_a.hidden(),
        };

        match mode.kind {
            ModeKind::TwoCeLogitsReg => {
                // mean over batch and classes of (target − logits_v)²
                let diff = target_logits.sub(&trace_v.output)?;
                let n = batch * diff.cols() as f64;
                regularizer += lambda * diff.frobenius_norm_sq() / n;
                let g = diff.scale(2.0 * lambda / n);
                d_out_v = d_out_v.sub(&g)?;
                if !spec.detach_anchor {
                    d_out_a = d_out_a.add(&g)?;
                }
            }
            ModeKind::TwoCeHiddenReg => {
                let mut gv = Vec::new();
                let mut ga = Vec::new();
                for (ha, hv) in target_hidden.iter().zip(trace_v.hidden()) {
                    let diff = ha.sub(hv)?;
                    let n = batch * diff.cols() as f64;
                    regularizer += lambda * diff.frobenius_norm_sq() / n;
                    let g = diff.scale(2.0 * lambda / n);
                    gv.push(g.scale(-1.0));
                    ga.push(g);
                }
                if !gv.is_empty() {
                    d_hidden_v = Some(gv);
                    if !spec.detach_anchor {
                        d_hidden_a = Some(ga);
                    }
                }
            }
            ModeKind::TwoCeResidualOrtho => {
                regularizer += residual_ortho(model, anchor, v, lambda, &mut grads)?;
            }
            _ => {}
        }
        backward(model, &trace_v, d_out_v, d_hidden_v.as_deref(), &mut grads)?;
    }

    if mode.kind == ModeKind::CeHardOrtho {
        regularizer += hard_ortho(model, lambda, &mut grads)?;
    }

    backward(model, &trace_a, d_out_a, d_hidden_a.as_deref(), &mut grads)?;
    loss += regularizer;
    diagnostics.regularizer = regularizer;
    Ok(Objective {
        loss,
        grads,
        diagnostics,
    })
}

/// `λ Σ_layers ‖A Aᵀ − I‖²_F`; gradient `4λ (AAᵀ − I) A`.
fn hard_ortho(model: &Model, lambda: f64, grads: &mut GradientSet) -> Result<f64> {
    let mut value = 0.0;
    for (block, g) in model.blocks().iter().zip(&mut grads.layers) {
        if let (Layer::Nsn(l), LayerGrad::Nsn { da, .. }) = (&block.layer, g) {
            let gram = l.a.matmul_t(&l.a)?.sub(&Matrix::identity(l.max_rank()))?;
            value += lambda * gram.frobenius_norm_sq();
            let d = gram.matmul(&l.a)?.scale(4.0 * lambda);
            *da = da.add(&d)?;
        }
    }
    Ok(value)
}

/// `λ Σ_layers ‖A_r A_resᵀ‖²_F` with `A_res` = rows `r..anchor` (clamped per layer).
fn residual_ortho(model: &Model, anchor: usize, variant: usize, lambda: f64, grads: &mut GradientSet) -> Result<f64> {
    let mut value = 0.0;
    for (block, g) in model.blocks().iter().zip(&mut grads.layers) {
        if let (Layer::Nsn(l), LayerGrad::Nsn { da, .. }) = (&block.layer, g) {
            let r = variant.min(l.max_rank());
            let top = anchor.min(l.max_rank());
            if top <= r {
                continue;
            }
            let a_r = l.a.top_rows(r);
            let mut a_res = Matrix::zeros(top - r, l.d_in());
            for k in r..top {
                a_res.row_mut(k - r).copy_from_slice(l.a.row(k));
            }
            let m = a_r.matmul_t(&a_res)?; // r × (top−r)
            value += lambda * m.frobenius_norm_sq();
            let d_r = m.matmul(&a_res)?.scale(2.0 * lambda);
            let d_res = m.t_matmul(&a_r)?.scale(2.0 * lambda);
            for k in 0..r {
                for (t, v) in da.row_mut(k).iter_mut().zip(d_r.row(k)) {
                    *t += v;
                }
            }
            for k in r..top {
                for (t, v) in da.row_mut(k).iter_mut().zip(d_res.row(k - r)) {
                    *t += v;
                }
            }
        }
    }
    Ok(value)
}

// ---------------------------------------------------------------------------
// Curriculum sampling
// ---------------------------------------------------------------------------

/// Draws (anchor, variant) pairs. Variants unlock from the highest pool
/// rank downwards: at epoch `e` the top `h(e)` pool entries are admissible,
/// `h(e) = ceil(|pool| · min(1, (e + 1) / (0.5 · epochs)))`.
#[derive(Debug, Clone)]
pub struct CurriculumSampler {
    anchor: usize,
    pool: Vec<usize>,
    total_epochs: usize,
    curriculum: bool,
    rng: RandomStream,
}

impl CurriculumSampler {
    pub fn new(anchor: usize, pool: &[usize], total_epochs: usize, curriculum: bool, seed: u64) -> Result<Self> {
        let mut pool = pool.to_vec();
        pool.sort_unstable();
        pool.dedup();
        if let Some(&bad) = pool.iter().find(|&&r| r == 0 || r >= anchor) {
            return Err(NsnError::config(
                "rank_pool",
                format!("rank {bad} must satisfy 1 <= r < anchor ({anchor})"),
            ));
        }
        Ok(CurriculumSampler {
            anchor,
            pool,
            total_epochs,
            curriculum,
            rng: seeded_rng(seed),
        })
    }

    pub fn anchor(&self) -> usize {
        self.anchor
    }

    pub fn pool(&self) -> &[usize] {
        &self.pool
    }

    /// Number of admissible pool entries at `epoch`.
    pub fn horizon(&self, epoch: usize) -> usize {
        let n = self.pool.len();
        if !self.curriculum || self.total_epochs == 0 {
            return n;
        }
        let frac = ((epoch + 1) as f64 / (0.5 * self.total_epochs as f64)).min(1.0);
        ((n as f64 * frac).ceil() as usize).clamp(n.min(1), n)
    }

    pub fn admissible(&self, epoch: usize) -> &[usize] {
        &self.pool[self.pool.len() - self.horizon(epoch)..]
    }

    pub fn sample(&mut self, epoch: usize) -> Result<(usize, usize)> {
        let h = self.horizon(epoch);
        if h == 0 {
            return Err(NsnError::config("rank_pool", "no admissible variant rank"));
        }
        let pick = self.rng.below(h);
        Ok((self.anchor, self.pool[self.pool.len() - h + pick]))
    }
}

pub fn sample_ranks(sampler: &mut CurriculumSampler, epoch: usize) -> Result<(usize, usize)> {
    sampler.sample(epoch)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

fn default_epochs() -> usize {
    60
}
fn default_batch() -> usize {
    128
}
fn default_lr() -> f64 {
    0.02
}
fn default_s_lr() -> f64 {
    1e-5
}
fn default_momentum() -> f64 {
    0.9
}
fn default_lambda() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_mode() -> ModeKind {
    ModeKind::TwoCe
}
fn default_anchor() -> usize {
    32
}
fn default_pool() -> Vec<usize> {
    vec![1, 2, 4, 8, 16]
}
fn default_ood() -> Vec<usize> {
    vec![3, 6, 12, 24]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Learning rate for the log-variances. Kept small so that `s_k` orders
    /// the ranks without fully reweighting their losses by `1/CE_k`.
    #[serde(default = "default_s_lr")]
    pub s_learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: ModeKind,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_true")]
    pub use_uncertainty: bool,
    /// Stop gradients through the anchor side of the logits and hidden
    /// penalties. Off by default: the detached penalties drift without bound.
    #[serde(default)]
    pub detach_anchor: bool,
    #[serde(default = "default_true")]
    pub curriculum: bool,
    #[serde(default = "default_anchor")]
    pub anchor_rank: usize,
    #[serde(default = "default_pool")]
    pub rank_pool: Vec<usize>,
    /// In-distribution evaluation ranks; empty means the rank pool.
    #[serde(default)]
    pub eval_ranks: Vec<usize>,
    #[serde(default = "default_ood")]
    pub interpolated_eval_ranks: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            momentum: default_momentum(),
            s_learning_rate: default_s_lr(),
            seed: 0,
            mode: default_mode(),
            lambda: default_lambda(),
            use_uncertainty: true,
            detach_anchor: false,
            curriculum: true,
            anchor_rank: default_anchor(),
            rank_pool: default_pool(),
            eval_ranks: Vec::new(),
            interpolated_eval_ranks: default_ood(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |f: &str, m: String| Err(NsnError::config(f, m));
        if self.batch_size == 0 {
            return err("train.batch_size", "must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err("train.learning_rate", "must be positive".into());
        }
        if !(self.s_learning_rate >= 0.0 && self.s_learning_rate.is_finite()) {
            return err("train.s_learning_rate", "must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err("train.momentum", "must lie in [0, 1)".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return err("train.lambda", "must be non-negative".into());
        }
        if self.anchor_rank == 0 {
            return err("train.anchor_rank", "must be at least 1".into());
        }
        if let Some(&r) = self.rank_pool.iter().find(|&&r| r == 0 || r >= self.anchor_rank) {
            return err("train.rank_pool", format!("rank {r} must satisfy 1 <= r < anchor_rank"));
        }
        if self.mode.needs_variant() && self.rank_pool.is_empty() {
            return err("train.rank_pool", format!("mode {} needs a non-empty rank pool", self.mode));
        }
        if let Some(&r) = self.id_ranks().iter().find(|&&r| r == 0 || r > self.anchor_rank) {
            return err("train.eval_ranks", format!("rank {r} outside [1, anchor_rank]"));
        }
        if let Some(&r) = self
            .interpolated_eval_ranks
            .iter()
            .find(|&&r| r == 0 || r == self.anchor_rank || self.rank_pool.contains(&r))
        {
            return err(
                "train.interpolated_eval_ranks",
                format!("rank {r} must be positive and outside the rank pool and anchor"),
            );
        }
        Ok(())
    }

    pub fn ablation_mode(&self) -> AblationMode {
        AblationMode {
            kind: self.mode,
            lambda: self.lambda,
        }
    }

    /// Sorted in-distribution ranks (explicit list or the pool).
    pub fn id_ranks(&self) -> Vec<usize> {
        let mut r = if self.eval_ranks.is_empty() {
            self.rank_pool.clone()
        } else {
            self.eval_ranks.clone()
        };
        r.sort_unstable();
        r.dedup();
        r
    }

    pub fn ood_ranks(&self) -> Vec<usize> {
        let mut r = self.interpolated_eval_ranks.clone();
        r.sort_unstable();
        r.dedup();
        r
    }
}

/// Mean loss and accuracy of `model` at rank `r` over a whole dataset.
pub fn evaluate(model: &Model, data: &Dataset, r: RankSpec) -> Result<(f64, f64)> {
    const CHUNK: usize = 2048;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut loss = 0.0;
    let mut correct = 0.0;
    for chunk in idx.chunks(CHUNK) {
        let (x, y) = data.gather(chunk);
        let logits = model.forward(&x, r)?;
        let (l, _) = cross_entropy(&logits, &y)?;
        loss += l * chunk.len() as f64;
        correct += accuracy(&logits, &y) * chunk.len() as f64;
    }
    let n = data.len() as f64;
    Ok((loss / n, correct / n))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub uncertainty: UncertaintyParams,
    pub log: MetricsLog,
}

/// SGD with momentum on all weights and the per-rank log-variances.
///
/// Evaluates on `eval` (or the training data if `None`) after every epoch at
/// the anchor, the in-distribution ranks and the interpolated ranks.
pub fn train(model: &Model, data: &Dataset, eval: Option<&Dataset>, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_callback(model, data, eval, config, |_| Ok(()))
}

/// [`train`], invoking `on_epoch` with each epoch's records as they are produced.
pub fn train_with_callback(
    model: &Model,
    data: &Dataset,
    eval: Option<&Dataset>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&[RunRecord]) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.dim() != model.input_dim() {
        return Err(NsnError::Dimension {
            op: "train",
            left: format!("data dim {}", data.dim()),
            right: format!("model input dim {}", model.input_dim()),
        });
    }
    if data.num_classes > model.output_dim() {
        return Err(NsnError::Dimension {
            op: "train",
            left: format!("{} classes", data.num_classes),
            right: format!("model output dim {}", model.output_dim()),
        });
    }
    let max_rank = model.max_rank().unwrap_or(config.anchor_rank);
    if config.anchor_rank > max_rank {
        return Err(NsnError::config(
            "train.anchor_rank",
            format!("anchor {} exceeds the model's maximum rank {max_rank}", config.anchor_rank),
        ));
    }
    if let Some(&r) = config.ood_ranks().iter().find(|&&r| r > max_rank) {
        return Err(NsnError::config(
            "train.interpolated_eval_ranks",
            format!("rank {r} exceeds the model's maximum rank {max_rank}"),
        ));
    }

    let eval = eval.unwrap_or(data);
    let mut rng = seeded_rng(config.seed);
    let mut shuffle_rng = rng.fork();
    let mode = config.ablation_mode();
    let mut sampler = CurriculumSampler::new(
        config.anchor_rank,
        &config.rank_pool,
        config.epochs,
        config.curriculum,
        rng.next_u64(),
    )?;

    let mut model = model.clone();
    let mut u = UncertaintyParams::default();
    let mut velocity = GradientSet::zeros_like(&model);
    let mut s_velocity: BTreeMap<usize, f64> = BTreeMap::new();
    let s_lr = config.s_learning_rate;
    let mut log = MetricsLog::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut id_ranks = config.id_ranks();
    if !id_ranks.contains(&config.anchor_rank) {
        id_ranks.push(config.anchor_rank);
    }
    let ood_ranks = config.ood_ranks();

    let mut step = 0usize;
    for epoch in 0..config.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(config.batch_size) {
            let (x, y) = data.gather(batch);
            let variant = if mode.kind.needs_variant() {
                Some(sampler.sample(epoch)?.1)
            } else {
                None
            };
            let spec = ObjectiveSpec {
                anchor: config.anchor_rank,
                variant,
                mode,
                use_uncertainty: config.use_uncertainty,
                detach_anchor: config.detach_anchor,
            };
            if config.use_uncertainty {
                u.touch(config.anchor_rank);
                if let Some(v) = variant {
                    u.touch(v);
                }
            }
            let obj = total_objective(&model, &x, &y, &spec, &u)?;
            if !obj.loss.is_finite() || !obj.grads.is_finite() {
                return Err(NsnError::Divergence {
                    epoch,
                    step,
                    loss: obj.loss,
                });
            }
            let mut grads = obj.grads;
            for (v, g) in velocity.slices_mut().into_iter().zip(grads.slices_mut()) {
                for (vi, gi) in v.iter_mut().zip(g.iter()) {
                    *vi = config.momentum * *vi + gi;
                }
            }
            for (p, v) in parameter_slices_mut(&mut model).into_iter().zip(velocity.slices_mut()) {
                for (pi, vi) in p.iter_mut().zip(v.iter()) {
                    *pi -= config.learning_rate * vi;
                }
            }
            for (&rank, &g) in &grads.ds {
                let v = s_velocity.entry(rank).or_insert(0.0);
                *v = config.momentum * *v + g;
                u.set(rank, u.get(rank) - s_lr * *v);
            }
            loss_sum += obj.loss * batch.len() as f64;
            acc_sum += obj.diagnostics.accuracy_anchor * batch.len() as f64;
            seen += batch.len();
            step += 1;
        }

        let start = log.len();
        let s_snapshot = u.values().clone();
        log.push(RunRecord {
            epoch,
            phase: Phase::Train,
            rank: config.anchor_rank,
            loss: loss_sum / seen as f64,
            accuracy: acc_sum / seen as f64,
            s: s_snapshot.clone(),
        });
        for (phase, ranks) in [(Phase::IdEval, &id_ranks), (Phase::OodEval, &ood_ranks)] {
            for &r in ranks.iter() {
                let (loss, acc) = evaluate(&model, eval, RankSpec::Rank(r))?;
                if !loss.is_finite() {
                    return Err(NsnError::Divergence { epoch, step, loss });
                }
                log.push(RunRecord {
                    epoch,
                    phase,
                    rank: r,
                    loss,
                    accuracy: acc,
                    s: s_snapshot.clone(),
                });
            }
        }
        on_epoch(&log[start..])?;
    }
    Ok(TrainOutcome {
        model,
        uncertainty: u,
        log,
    })
}

/// Accuracy at `rank` in the last epoch's records of `phase`.
pub fn final_accuracy(log: &[RunRecord], phase: Phase, rank: usize) -> Option<f64> {
    let last = log.iter().map(|r| r.epoch).max()?;
    log.iter()
        .find(|r| r.epoch == last && r.phase == phase && r.rank == rank)
        .map(|r| r.accuracy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_clusters;
    use crate::nn::Activation;

    fn toy(seed: u64, act: Activation) -> (Model, Matrix, Vec<usize>) {
        let mut rng = seeded_rng(seed);
        let model = Model::mlp(&[5, 7, 4], Some(4), act, &mut rng).unwrap();
        let mut model = model;
        for p in parameter_slices_mut(&mut model) {
            for v in p.iter_mut() {
                *v += 0.1 * rng.gaussian();
            }
        }
        let x = Matrix::random_gaussian(6, 5, 1.0, &mut rng);
        let y = (0..6).map(|i| i % 4).collect();
        (model, x, y)
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let (l, _) = cross_entropy(&Matrix::zeros(3, 10), &[0, 4, 9]).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        let mut logits = Matrix::zeros(1, 3);
        logits[(0, 1)] = 1000.0;
        let (l, _) = cross_entropy(&logits, &[1]).unwrap();
        assert!(l < 1e-6);
        assert!(matches!(cross_entropy(&logits, &[3]), Err(NsnError::Label { .. })));
    }

    #[test]
    fn cross_entropy_gradient_finite_difference() {
        let mut rng = seeded_rng(2);
        let logits = Matrix::random_gaussian(4, 5, 2.0, &mut rng);
        let labels = [0, 3, 4, 1];
        let (_, g) = cross_entropy(&logits, &labels).unwrap();
        let h = 1e-5;
        for k in 0..logits.data().len() {
            let mut p = logits.clone();
            p.data_mut()[k] += h;
            let mut m = logits.clone();
            m.data_mut()[k] -= h;
            let fd = (cross_entropy(&p, &labels).unwrap().0 - cross_entropy(&m, &labels).unwrap().0) / (2.0 * h);
            let an = g.data()[k];
            assert!((fd - an).abs() <= 1e-6 * fd.abs().max(an.abs()) + 1e-10, "{fd} vs {an}");
        }
    }

    #[test]
    fn surrogate_values() {
        let t = surrogate_term(0.7, 0.0);
        assert_eq!((t.value, t.loss_coeff), (0.7, 1.0));
        let t = surrogate_term(1.0, 0.0);
        assert_eq!(t.ds, 0.0);
        assert!(surrogate_term(1.0, 50.0).loss_coeff < 1e-20);
    }

    #[test]
    fn ce_only_equals_anchor_cross_entropy() {
        let (model, x, y) = toy(1, Activation::Relu);
        let spec = ObjectiveSpec {
            anchor: 4,
            variant: None,
            mode: AblationMode::plain(ModeKind::CeOnly),
            use_uncertainty: false,
            detach_anchor: true,
        };
        let obj = total_objective(&model, &x, &y, &spec, &UncertaintyParams::default()).unwrap();
        let (ce, _) = cross_entropy(&model.forward(&x, RankSpec::Rank(4)).unwrap(), &y).unwrap();
        assert_eq!(obj.loss, ce);
    }

    #[test]
    fn two_ce_is_sum_of_cross_entropies() {
        let (model, x, y) = toy(2, Activation::Relu);
        let spec = ObjectiveSpec {
            anchor: 4,
            variant: Some(2),
            mode: AblationMode::plain(ModeKind::TwoCe),
            use_uncertainty: true,
            detach_anchor: false,
        };
        let obj = total_objective(&model, &x, &y, &spec, &UncertaintyParams::default()).unwrap();
        let ce = |r| cross_entropy(&model.forward(&x, RankSpec::Rank(r)).unwrap(), &y).unwrap().0;
        assert!((obj.loss - (ce(4) + ce(2))).abs() < 1e-14);
    }

    #[test]
    fn variant_ordering_enforced() {
        let (model, x, y) = toy(3, Activation::Relu);
        let mut spec = ObjectiveSpec {
            anchor: 2,
            variant: Some(2),
            mode: AblationMode::plain(ModeKind::TwoCe),
            use_uncertainty: true,
            detach_anchor: false,
        };
        let u = UncertaintyParams::default();
        assert!(matches!(
            total_objective(&model, &x, &y, &spec, &u),
            Err(NsnError::RankOrder { .. })
        ));
        spec.variant = None;
        assert!(total_objective(&model, &x, &y, &spec, &u).is_err());
    }

    #[test]
    fn gradients_vanish_above_rank() {
        let (model, x, y) = toy(4, Activation::Gelu);
        let spec = ObjectiveSpec {
            anchor: 3,
            variant: Some(1),
            mode: AblationMode::plain(ModeKind::TwoCe),
            use_uncertainty: true,
            detach_anchor: false,
        };
        let obj = total_objective(&model, &x, &y, &spec, &UncertaintyParams::default()).unwrap();
        for g in &obj.grads.layers {
            if let LayerGrad::Nsn { da, db, .. } = g {
                assert!(da.row(3).iter().all(|&v| v == 0.0));
                assert!(db.column(3).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn relu_gradient_matches_finite_difference() {
        let (model, x, y) = toy(5, Activation::Relu);
        let spec = ObjectiveSpec {
            anchor: 4,
            variant: Some(2),
            mode: AblationMode::plain(ModeKind::TwoCeHiddenReg),
            use_uncertainty: true,
            detach_anchor: false,
        };
        let mut u = UncertaintyParams::default();
        u.set(4, -0.3);
        u.set(2, 0.4);
        let obj = total_objective(&model, &x, &y, &spec, &u).unwrap();
        let analytic = obj.grads.flat_weights();
        let h = 1e-5;
        let mut k = 0;
        let n_slices = parameter_slices_mut(&mut model.clone()).len();
        for s in 0..n_slices {
            let len = parameter_slices_mut(&mut model.clone())[s].len();
            for j in 0..len {
                let mut p = model.clone();
                parameter_slices_mut(&mut p)[s][j] += h;
                let mut m = model.clone();
                parameter_slices_mut(&mut m)[s][j] -= h;
                let lp = total_objective(&p, &x, &y, &spec, &u).unwrap().loss;
                let lm = total_objective(&m, &x, &y, &spec, &u).unwrap().loss;
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    (fd - analytic[k]).abs() <= 1e-5 * fd.abs().max(analytic[k].abs()) + 1e-8,
                    "param {k}: fd {fd} analytic {}",
                    analytic[k]
                );
                k += 1;
            }
        }
    }

    #[test]
    fn sampler_curriculum() {
        let mut s = CurriculumSampler::new(32, &[16, 1, 4, 2, 8], 30, true, 0).unwrap();
        for _ in 0..50 {
            assert_eq!(s.sample(0).unwrap(), (32, 16));
        }
        assert_eq!(s.horizon(14), 5);
        assert!((0..30).map(|e| s.horizon(e)).collect::<Vec<_>>().windows(2).all(|w| w[0] <= w[1]));
        assert!(CurriculumSampler::new(8, &[8], 10, true, 0).is_err());
        let mut empty = CurriculumSampler::new(8, &[], 10, true, 0).unwrap();
        assert!(empty.sample(3).is_err());
    }

    #[test]
    fn sampler_is_deterministic() {
        let mut a = CurriculumSampler::new(32, &[1, 2, 4, 8, 16], 10, true, 7).unwrap();
        let mut b = CurriculumSampler::new(32, &[1, 2, 4, 8, 16], 10, true, 7).unwrap();
        for e in 0..10 {
            assert_eq!(a.sample(e).unwrap(), b.sample(e).unwrap());
        }
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let data = synth_clusters(0, 2, 4, 10, 3.0).unwrap();
        let mut rng = seeded_rng(0);
        let model = Model::mlp(&[4, 2], Some(2), Activation::Relu, &mut rng).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            anchor_rank: 2,
            rank_pool: vec![1],
            interpolated_eval_ranks: vec![],
            ..TrainConfig::default()
        };
        let out = train(&model, &data, None, &cfg).unwrap();
        assert_eq!(out.model, model);
        assert!(out.log.is_empty());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.interpolated_eval_ranks = vec![4];
        assert!(c.validate().is_err());
        let c = TrainConfig {
            rank_pool: vec![32],
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            eval_ranks: vec![33],
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let data = synth_clusters(0, 2, 4, 20, 3.0).unwrap();
        let mut rng = seeded_rng(0);
        let model = Model::mlp(&[4, 8, 2], Some(4), Activation::Relu, &mut rng).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 1e200,
            momentum: 0.0,
            anchor_rank: 4,
            rank_pool: vec![1, 2],
            interpolated_eval_ranks: vec![3],
            use_uncertainty: false,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&model, &data, None, &cfg), Err(NsnError::Divergence { .. })));
    }
}
