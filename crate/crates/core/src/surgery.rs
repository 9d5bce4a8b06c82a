//! Replacing pre-trained dense layers with NSN layers initialized from the
//! top singular components of their weights.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::Checkpoint;
use crate::error::{NsnError, Result};
use crate::linalg::{svd, Matrix};
use crate::nn::{flops_linear, Block, Layer, Model, NsnLayer, RankSpec};

/// Singular values below this fraction of σ₁ are reported as negligible.
pub const NEGLIGIBLE_SINGULAR_VALUE: f64 = 1e-12;

/// `B = U_R √Σ_R`, `A = √Σ_R Vᵀ_R` from the top `max_rank` singular triplets of `w`.
pub fn svd_init(w: &Matrix, max_rank: usize) -> Result<(Matrix, Matrix)> {
    let limit = w.rows().min(w.cols());
    if max_rank == 0 || max_rank > limit {
        return Err(NsnError::Rank {
            rank: max_rank,
            max_rank: limit,
        });
    }
    let dec = svd(w)?;
    let mut a = dec.vt.top_rows(max_rank);
    let mut b = dec.u.left_cols(max_rank);
    for i in 0..max_rank {
        let root = dec.singular_values[i].sqrt();
        for v in a.row_mut(i) {
            *v *= root;
        }
        for row in 0..b.rows() {
            b[(row, i)] *= root;
        }
    }
    Ok((a, b))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanEntry {
    pub index: usize,
    /// Defaults to `min(d_in, d_out)`, which is lossless.
    #[serde(default)]
    pub max_rank: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurgeryPlan {
    #[serde(default)]
    pub layers: Vec<PlanEntry>,
}

impl SurgeryPlan {
    /// Every dense layer of `model` at its lossless rank.
    pub fn all_dense(model: &Model) -> Self {
        SurgeryPlan {
            layers: model
                .blocks()
                .iter()
                .enumerate()
                .filter(|(_, b)| !b.layer.is_nsn())
                .map(|(index, _)| PlanEntry { index, max_rank: None })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurgeryRecord {
    pub index: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub max_rank: usize,
    /// `‖W − BA‖_F / ‖W‖_F` at `max_rank`.
    pub relative_truncation_error: f64,
    pub flops_dense: u64,
    pub flops_at_max_rank: u64,
    pub flops_at_half_rank: u64,
    /// Kept singular values below `1e-12·σ₁`.
    pub negligible_components: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SurgeryReport {
    pub layers: Vec<SurgeryRecord>,
}

pub fn surgical_replace(ckpt: &Checkpoint, plan: &SurgeryPlan) -> Result<(Checkpoint, SurgeryReport)> {
    let n = ckpt.model.blocks().len();
    let mut seen = BTreeSet::new();
    for entry in &plan.layers {
        if entry.index >= n {
            return Err(NsnError::Plan(format!("layer index {} out of range (model has {n} layers)", entry.index)));
        }
        if !seen.insert(entry.index) {
            return Err(NsnError::Plan(format!("layer index {} listed twice", entry.index)));
        }
        if ckpt.model.blocks()[entry.index].layer.is_nsn() {
            return Err(NsnError::Plan(format!("layer {} is already an NSN layer", entry.index)));
        }
    }

    let mut blocks: Vec<Block> = ckpt.model.blocks().to_vec();
    let mut report = SurgeryReport::default();
    for entry in &plan.layers {
        let block = &mut blocks[entry.index];
        let Layer::Dense(dense) = &block.layer else {
            unreachable!("checked above")
        };
        let (d_out, d_in) = dense.w.shape();
        let max_rank = entry.max_rank.unwrap_or(d_in.min(d_out));
        if max_rank == 0 || max_rank > d_in.min(d_out) {
            return Err(NsnError::Plan(format!(
                "layer {}: max_rank {max_rank} outside 1..={}",
                entry.index,
                d_in.min(d_out)
            )));
        }
        let dec = svd(&dense.w)?;
        let (a, b) = svd_init(&dense.w, max_rank)?;
        let approx = b.matmul(&a)?;
        let norm = dense.w.frobenius_norm();
        let err = dense.w.sub(&approx)?.frobenius_norm();
        let sigma1 = dec.singular_values.first().copied().unwrap_or(0.0);
        report.layers.push(SurgeryRecord {
            index: entry.index,
            d_in,
            d_out,
            max_rank,
            relative_truncation_error: if norm > 0.0 { err / norm } else { 0.0 },
            flops_dense: flops_linear(d_in, d_out, RankSpec::Full),
            flops_at_max_rank: flops_linear(d_in, d_out, RankSpec::Rank(max_rank)),
            flops_at_half_rank: flops_linear(d_in, d_out, RankSpec::Rank((max_rank / 2).max(1))),
            negligible_components: dec.singular_values[..max_rank]
                .iter()
                .filter(|&&s| s <= NEGLIGIBLE_SINGULAR_VALUE * sigma1)
                .count(),
        });
        block.layer = Layer::Nsn(NsnLayer::new(a, b, dense.bias.clone())?);
    }
    let mut meta = ckpt.meta.clone();
    if !plan.layers.is_empty() {
        let idx: Vec<String> = plan.layers.iter().map(|e| e.index.to_string()).collect();
        meta.notes.insert("surgery_layers".into(), idx.join(","));
    }
    Ok((
        Checkpoint {
            model: Model::new(blocks)?,
            uncertainty: ckpt.uncertainty.clone(),
            meta,
        },
        report,
    ))
}
