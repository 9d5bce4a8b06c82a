//! Oracles shared by the integration tests.
#![allow(dead_code)]

use nsn_core::training::{
    anchor_targets, parameter_slices_mut, total_objective, total_objective_with_targets, AblationMode, ModeKind, ObjectiveSpec,
    UncertaintyParams,
};
use nsn_core::{seeded_rng, Activation, Matrix, Model, Result};

/// Denominator floor for relative gradient errors. Entries whose analytic and
/// numeric values are both below it are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-6;

pub struct GradCheck {
    pub max_relative_error: f64,
    pub parameters: usize,
}

/// Fourth-order central difference of `f` at `x0`.
fn central_difference(h: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    Ok((-f(2.0 * h)? + 8.0 * f(h)? - 8.0 * f(-h)? + f(-2.0 * h)?) / (12.0 * h))
}

/// Compares the analytic gradient of one mode against central differences
/// over every weight and every log-variance, on a `width → width → 5` GELU
/// network with maximum rank `max_rank`.
pub fn gradient_check(kind: ModeKind, detach: bool, width: usize, max_rank: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = seeded_rng(seed);
    let model = Model::mlp(&[width, width, 5], Some(max_rank), Activation::Gelu, &mut rng)?;
    let x = Matrix::random_gaussian(12, width, 1.0, &mut rng);
    let labels: Vec<usize> = (0..12).map(|_| rng.below(5)).collect();
    let anchor = max_rank;
    let variant = kind.needs_variant().then_some(3.min(anchor - 1));
    let spec = ObjectiveSpec {
        anchor,
        variant,
        mode: AblationMode::new(kind, 0.7)?,
        use_uncertainty: true,
        detach_anchor: detach,
    };
    let mut u = UncertaintyParams::default();
    u.set(anchor, rng.uniform() - 0.5);
    if let Some(v) = variant {
        u.set(v, rng.uniform() - 0.5);
    }

    let targets = anchor_targets(&model, &x, anchor)?;
    let loss = |m: &Model, u: &UncertaintyParams| -> Result<f64> {
        if detach {
            Ok(total_objective_with_targets(m, &x, &labels, &spec, u, &targets)?.loss)
        } else {
            Ok(total_objective(m, &x, &labels, &spec, u)?.loss)
        }
    };

    let analytic = total_objective(&model, &x, &labels, &spec, &u)?.grads;
    let flat = analytic.flat_weights();
    let mut worst: f64 = 0.0;
    let compare = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR);

    let h = 1e-3;
    let mut scratch = model.clone();
    let sizes: Vec<usize> = parameter_slices_mut(&mut scratch).iter().map(|s| s.len()).collect();
    let mut offset = 0;
    for (si, &len) in sizes.iter().enumerate() {
        for k in 0..len {
            let numeric = central_difference(h, |dx| {
                let mut m = model.clone();
                parameter_slices_mut(&mut m)[si][k] += dx;
                loss(&m, &u)
            })?;
            worst = worst.max(compare(flat[offset + k], numeric));
        }
        offset += len;
    }
    let mut count = offset;
    for (&rank, &ds) in &analytic.ds {
        let numeric = central_difference(h, |dx| {
            let mut v = u.clone();
            v.set(rank, u.get(rank) + dx);
            loss(&model, &v)
        })?;
        worst = worst.max(compare(ds, numeric));
        count += 1;
    }
    Ok(GradCheck {
        max_relative_error: worst,
        parameters: count,
    })
}

/// Eigenvalues of a symmetric matrix by cyclic two-sided Jacobi rotations,
/// sorted in descending order.
pub fn symmetric_eigenvalues(m: &Matrix) -> Vec<f64> {
    let n = m.rows();
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| m.row(i).to_vec()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in a.iter_mut() {
                    let (akp, akq) = (row[p], row[q]);
                    row[p] = c * akp - s * akq;
                    row[q] = s * akp + c * akq;
                }
                let (rp, rq) = (a[p].clone(), a[q].clone());
                for k in 0..n {
                    a[p][k] = c * rp[k] - s * rq[k];
                    a[q][k] = s * rp[k] + c * rq[k];
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.partial_cmp(x).unwrap());
    ev
}

/// Naive triple-loop product.
pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0;
            for k in 0..a.cols() {
                acc += a.row(i)[k] * b.row(k)[j];
            }
            out.row_mut(i)[j] = acc;
        }
    }
    out
}
