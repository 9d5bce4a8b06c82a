//! Rank-parameterized layers and models.
//!
//! An [`NsnLayer`] stores factors `A` (R×d_in) and `B` (d_out×R). At rank
//! `r` it computes `B_r (A_r x) + bias` where `A_r` is the first `r` rows of
//! `A` and `B_r` the first `r` columns of `B`, so the image at rank `r` is
//! always contained in the image at rank `r + 1`.

use serde::{Deserialize, Serialize};

use crate::error::{NsnError, Result};
use crate::linalg::{Matrix, RandomStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Identity,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            // tanh approximation
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Activation::Identity => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let inner = GELU_C * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Requested evaluation rank. `Full` resolves to each layer's own maximum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RankSpec {
    Rank(usize),
    Full,
}

impl RankSpec {
    /// Rank used by a layer with maximum rank `max_rank`; larger requests clamp.
    pub fn resolve(self, max_rank: usize) -> usize {
        match self {
            RankSpec::Rank(r) => r.min(max_rank),
            RankSpec::Full => max_rank,
        }
    }
}

impl From<usize> for RankSpec {
    fn from(r: usize) -> Self {
        RankSpec::Rank(r)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NsnLayer {
    /// R×d_in; row i is the input-side factor of component i.
    pub a: Matrix,
    /// d_out×R; column i is the output-side factor of component i.
    pub b: Matrix,
    pub bias: Vec<f64>,
}

impl NsnLayer {
    pub fn new(a: Matrix, b: Matrix, bias: Vec<f64>) -> Result<Self> {
        let layer = NsnLayer { a, b, bias };
        layer.validate()?;
        Ok(layer)
    }

    /// Gaussian factors: rows of `A` scaled by 1/sqrt(d_in), columns of `B` by 1/sqrt(R).
    pub fn random(d_in: usize, d_out: usize, max_rank: usize, rng: &mut RandomStream) -> Self {
        assert!(max_rank >= 1);
        let a = Matrix::random_gaussian(max_rank, d_in, 1.0 / (d_in as f64).sqrt(), rng);
        let b = Matrix::random_gaussian(d_out, max_rank, 1.0 / (max_rank as f64).sqrt(), rng);
        NsnLayer {
            a,
            b,
            bias: vec![0.0; d_out],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.a.rows() != self.b.cols() || self.b.rows() != self.bias.len() {
            return Err(NsnError::Dimension {
                op: "NsnLayer",
                left: format!("A {}x{}", self.a.rows(), self.a.cols()),
                right: format!("B {}x{}, bias {}", self.b.rows(), self.b.cols(), self.bias.len()),
            });
        }
        Ok(())
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    pub fn max_rank(&self) -> usize {
        self.a.rows()
    }

    pub fn check_rank(&self, r: usize) -> Result<()> {
        if r == 0 || r > self.max_rank() {
            return Err(NsnError::Rank {
                rank: r,
                max_rank: self.max_rank(),
            });
        }
        Ok(())
    }

    /// Row `i` of `A` (0-based).
    pub fn a_vec(&self, i: usize) -> &[f64] {
        self.a.row(i)
    }

    /// Column `i` of `B` (0-based).
    pub fn b_vec(&self, i: usize) -> Vec<f64> {
        self.b.column(i)
    }

    /// `W_r = B_r A_r = Σ_{i<r} b_i a_i`.
    pub fn effective_weight(&self, r: RankSpec) -> Result<Matrix> {
        let r = match r {
            RankSpec::Full => self.max_rank(),
            RankSpec::Rank(r) => r,
        };
        self.check_rank(r)?;
        self.b.left_cols(r).matmul(&self.a.top_rows(r))
    }

    /// Linear part at rank `r` (already resolved), without bias.
    fn apply_linear(&self, x: &Matrix, r: usize) -> Result<(Matrix, Matrix)> {
        let z = x.matmul_t(&self.a.top_rows(r))?;
        let y = z.matmul_t(&self.b.left_cols(r))?;
        Ok((z, y))
    }

    pub fn truncate(&self, r: usize) -> Result<NsnLayer> {
        self.check_rank(r)?;
        Ok(NsnLayer {
            a: self.a.top_rows(r),
            b: self.b.left_cols(r),
            bias: self.bias.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// d_out×d_in.
    pub w: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn new(w: Matrix, bias: Vec<f64>) -> Result<Self> {
        let layer = DenseLayer { w, bias };
        layer.validate()?;
        Ok(layer)
    }

    pub fn random(d_in: usize, d_out: usize, rng: &mut RandomStream) -> Self {
        DenseLayer {
            w: Matrix::random_gaussian(d_out, d_in, 1.0 / (d_in as f64).sqrt(), rng),
            bias: vec![0.0; d_out],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.w.rows() != self.bias.len() {
            return Err(NsnError::Dimension {
                op: "DenseLayer",
                left: format!("W {}x{}", self.w.rows(), self.w.cols()),
                right: format!("bias {}", self.bias.len()),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Nsn(NsnLayer),
    Dense(DenseLayer),
}

impl Layer {
    pub fn d_in(&self) -> usize {
        match self {
            Layer::Nsn(l) => l.d_in(),
            Layer::Dense(l) => l.w.cols(),
        }
    }

    pub fn d_out(&self) -> usize {
        match self {
            Layer::Nsn(l) => l.d_out(),
            Layer::Dense(l) => l.w.rows(),
        }
    }

    pub fn bias(&self) -> &[f64] {
        match self {
            Layer::Nsn(l) => &l.bias,
            Layer::Dense(l) => &l.bias,
        }
    }

    pub fn max_rank(&self) -> Option<usize> {
        match self {
            Layer::Nsn(l) => Some(l.max_rank()),
            Layer::Dense(_) => None,
        }
    }

    /// Effective weight; dense layers ignore the rank, NSN layers clamp it.
    pub fn weight_at(&self, r: RankSpec) -> Result<Matrix> {
        match self {
            Layer::Nsn(l) => l.effective_weight(RankSpec::Rank(r.resolve(l.max_rank()))),
            Layer::Dense(l) => Ok(l.w.clone()),
        }
    }

    pub fn flops(&self, r: RankSpec) -> u64 {
        match self {
            Layer::Nsn(l) => flops_linear(l.d_in(), l.d_out(), RankSpec::Rank(r.resolve(l.max_rank()))),
            Layer::Dense(l) => flops_linear(l.w.cols(), l.w.rows(), RankSpec::Full),
        }
    }

    pub fn is_nsn(&self) -> bool {
        matches!(self, Layer::Nsn(_))
    }

    fn validate(&self) -> Result<()> {
        match self {
            Layer::Nsn(l) => l.validate(),
            Layer::Dense(l) => l.validate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub layer: Layer,
    pub activation: Activation,
}

/// Ordered stack of layers. The final activation is always identity (logits).
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    blocks: Vec<Block>,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input to each block.
    pub inputs: Vec<Matrix>,
    /// `A_r x` for NSN blocks.
    pub projections: Vec<Option<Matrix>>,
    /// Pre-activation outputs.
    pub pre_activations: Vec<Matrix>,
    /// Ranks actually used per block (None for dense).
    pub ranks: Vec<Option<usize>>,
    pub output: Matrix,
}

impl ForwardTrace {
    /// Post-activation outputs of every block except the last.
    pub fn hidden(&self) -> &[Matrix] {
        &self.inputs[1..]
    }
}

impl Model {
    pub fn new(blocks: Vec<Block>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(NsnError::config("layers", "model needs at least one layer"));
        }
        for (i, block) in blocks.iter().enumerate() {
            block.layer.validate()?;
            if let Some(next) = blocks.get(i + 1) {
                if block.layer.d_out() != next.layer.d_in() {
                    return Err(NsnError::Dimension {
                        op: "Model::new",
                        left: format!("layer {i} d_out {}", block.layer.d_out()),
                        right: format!("layer {} d_in {}", i + 1, next.layer.d_in()),
                    });
                }
            }
        }
        if blocks.last().map(|b| b.activation) != Some(Activation::Identity) {
            return Err(NsnError::config("layers", "last activation must be identity"));
        }
        Ok(Model { blocks })
    }

    /// MLP over `dims` (input, hidden..., output). NSN layers when `max_rank` is set.
    pub fn mlp(dims: &[usize], max_rank: Option<usize>, activation: Activation, rng: &mut RandomStream) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(NsnError::config("dims", "need at least input and output dimensions, all positive"));
        }
        if max_rank == Some(0) {
            return Err(NsnError::config("max_rank", "must be at least 1"));
        }
        let n = dims.len() - 1;
        let blocks = (0..n)
            .map(|i| {
                let layer = match max_rank {
                    Some(r) => Layer::Nsn(NsnLayer::random(dims[i], dims[i + 1], r, rng)),
                    None => Layer::Dense(DenseLayer::random(dims[i], dims[i + 1], rng)),
                };
                Block {
                    layer,
                    activation: if i + 1 == n { Activation::Identity } else { activation },
                }
            })
            .collect();
        Model::new(blocks)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    pub fn input_dim(&self) -> usize {
        self.blocks[0].layer.d_in()
    }

    pub fn output_dim(&self) -> usize {
        self.blocks[self.blocks.len() - 1].layer.d_out()
    }

    /// Largest maximum rank among NSN layers.
    pub fn max_rank(&self) -> Option<usize> {
        self.blocks.iter().filter_map(|b| b.layer.max_rank()).max()
    }

    pub fn nsn_layer_count(&self) -> usize {
        self.blocks.iter().filter(|b| b.layer.is_nsn()).count()
    }

    /// Rejects r = 0 and ranks above every layer's maximum.
    pub fn check_rank(&self, r: RankSpec) -> Result<()> {
        if let RankSpec::Rank(rank) = r {
            match self.max_rank() {
                Some(max_rank) if rank == 0 || rank > max_rank => {
                    return Err(NsnError::Rank { rank, max_rank });
                }
                None if rank == 0 => return Err(NsnError::Rank { rank, max_rank: 0 }),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix, r: RankSpec) -> Result<Matrix> {
        self.check_rank(r)?;
        self.check_input(x)?;
        let mut h = x.clone();
        for block in &self.blocks {
            let mut y = match &block.layer {
                Layer::Nsn(l) => l.apply_linear(&h, r.resolve(l.max_rank()))?.1,
                Layer::Dense(l) => h.matmul_t(&l.w)?,
            };
            y.add_row_broadcast(block.layer.bias());
            h = if block.activation == Activation::Identity {
                y
            } else {
                y.map(|v| block.activation.apply(v))
            };
        }
        Ok(h)
    }

    pub fn forward_trace(&self, x: &Matrix, r: RankSpec) -> Result<ForwardTrace> {
        self.check_rank(r)?;
        self.check_input(x)?;
        let n = self.blocks.len();
        let mut inputs = Vec::with_capacity(n);
        let mut projections = Vec::with_capacity(n);
        let mut pre_activations = Vec::with_capacity(n);
        let mut ranks = Vec::with_capacity(n);
        let mut h = x.clone();
        for block in &self.blocks {
            let (proj, mut y, rank) = match &block.layer {
                Layer::Nsn(l) => {
                    let rank = r.resolve(l.max_rank());
                    let (z, y) = l.apply_linear(&h, rank)?;
                    (Some(z), y, Some(rank))
                }
                Layer::Dense(l) => (None, h.matmul_t(&l.w)?, None),
            };
            y.add_row_broadcast(block.layer.bias());
            let out = y.map(|v| block.activation.apply(v));
            inputs.push(h);
            projections.push(proj);
            pre_activations.push(y);
            ranks.push(rank);
            h = out;
        }
        Ok(ForwardTrace {
            inputs,
            projections,
            pre_activations,
            ranks,
            output: h,
        })
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(NsnError::Dimension {
                op: "forward",
                left: format!("input {}x{}", x.rows(), x.cols()),
                right: format!("model input dim {}", self.input_dim()),
            });
        }
        Ok(())
    }

    /// Total linear-layer FLOPs per example at rank `r`.
    pub fn flops(&self, r: RankSpec) -> u64 {
        model_flops(self, r)
    }

    /// Every NSN layer truncated to `min(r, R)`.
    pub fn truncate(&self, r: usize) -> Result<Model> {
        self.check_rank(RankSpec::Rank(r))?;
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let layer = match &b.layer {
                    Layer::Nsn(l) => Layer::Nsn(l.truncate(r.min(l.max_rank()))?),
                    Layer::Dense(l) => Layer::Dense(l.clone()),
                };
                Ok(Block {
                    layer,
                    activation: b.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Model::new(blocks)
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| match &b.layer {
                Layer::Nsn(l) => l.a.data().len() + l.b.data().len() + l.bias.len(),
                Layer::Dense(l) => l.w.data().len() + l.bias.len(),
            })
            .sum()
    }
}

/// FLOPs of one linear map: `2r(d_in + d_out)` factored, `2·d_in·d_out` dense (`Full`).
pub fn flops_linear(d_in: usize, d_out: usize, r: RankSpec) -> u64 {
    match r {
        RankSpec::Rank(r) => 2 * r as u64 * (d_in + d_out) as u64,
        RankSpec::Full => 2 * d_in as u64 * d_out as u64,
    }
}

/// Largest rank whose factored cost does not exceed the dense cost.
pub fn break_even_rank(d_in: usize, d_out: usize) -> usize {
    d_in * d_out / (d_in + d_out)
}

/// Sum of [`flops_linear`] over layers; activations and biases are not counted.
pub fn model_flops(model: &Model, r: RankSpec) -> u64 {
    model.blocks.iter().map(|b| b.layer.flops(r)).sum()
}

pub fn effective_weight(layer: &NsnLayer, r: RankSpec) -> Result<Matrix> {
    layer.effective_weight(r)
}

pub fn truncate(layer: &NsnLayer, r: usize) -> Result<NsnLayer> {
    layer.truncate(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::seeded_rng;

    fn single(layer: Layer) -> Model {
        Model::new(vec![Block {
            layer,
            activation: Activation::Identity,
        }])
        .unwrap()
    }

    #[test]
    fn effective_weight_full_is_product() {
        let mut rng = seeded_rng(1);
        let l = NsnLayer::random(5, 4, 3, &mut rng);
        assert_eq!(l.effective_weight(RankSpec::Full).unwrap(), l.b.matmul(&l.a).unwrap());
    }

    #[test]
    fn effective_weight_rank_one_is_outer_product() {
        let a = Matrix::identity(2);
        let b = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let l = NsnLayer::new(a, b, vec![0.0; 2]).unwrap();
        let w1 = l.effective_weight(RankSpec::Rank(1)).unwrap();
        assert_eq!(w1.data(), &[1.0, 0.0, 0.0, 0.0]);

        let mut rng = seeded_rng(2);
        let l = NsnLayer::random(3, 4, 2, &mut rng);
        let outer = Matrix::column_vector(&l.b_vec(0))
            .unwrap()
            .matmul(&Matrix::new(1, 3, l.a_vec(0).to_vec()).unwrap())
            .unwrap();
        assert_eq!(l.effective_weight(RankSpec::Rank(1)).unwrap(), outer);
    }

    #[test]
    fn rank_errors() {
        let mut rng = seeded_rng(1);
        let l = NsnLayer::random(3, 3, 2, &mut rng);
        assert!(matches!(
            l.effective_weight(RankSpec::Rank(3)),
            Err(NsnError::Rank { rank: 3, max_rank: 2 })
        ));
        assert!(l.effective_weight(RankSpec::Rank(0)).is_err());
        let m = single(Layer::Nsn(l));
        let x = Matrix::zeros(1, 3);
        assert!(m.forward(&x, RankSpec::Rank(0)).is_err());
        assert!(m.forward(&x, RankSpec::Rank(3)).is_err());
        assert!(m.forward(&Matrix::zeros(1, 4), RankSpec::Full).is_err());
    }

    #[test]
    fn dense_model_ignores_rank() {
        let mut rng = seeded_rng(4);
        let m = Model::mlp(&[4, 6, 3], None, Activation::Relu, &mut rng).unwrap();
        let x = Matrix::random_gaussian(5, 4, 1.0, &mut rng);
        assert_eq!(m.forward(&x, RankSpec::Rank(1)).unwrap(), m.forward(&x, RankSpec::Full).unwrap());
        assert_eq!(m.flops(RankSpec::Rank(1)), m.flops(RankSpec::Full));
    }

    #[test]
    fn single_layer_matches_dense_equivalent() {
        let mut rng = seeded_rng(5);
        let l = NsnLayer::random(6, 5, 4, &mut rng);
        let dense = DenseLayer::new(l.b.matmul(&l.a).unwrap(), l.bias.clone()).unwrap();
        let x = Matrix::random_gaussian(7, 6, 1.0, &mut rng);
        let y1 = single(Layer::Nsn(l)).forward(&x, RankSpec::Full).unwrap();
        let y2 = single(Layer::Dense(dense)).forward(&x, RankSpec::Full).unwrap();
        assert!(y1.sub(&y2).unwrap().frobenius_norm() / y2.frobenius_norm() < 1e-10);
    }

    #[test]
    fn zero_input_gives_bias() {
        let mut rng = seeded_rng(6);
        let mut l = NsnLayer::random(3, 2, 2, &mut rng);
        l.bias = vec![0.5, -1.5];
        let y = single(Layer::Nsn(l)).forward(&Matrix::zeros(4, 3), RankSpec::Rank(1)).unwrap();
        for i in 0..4 {
            assert_eq!(y.row(i), &[0.5, -1.5]);
        }
    }

    #[test]
    fn flops_values() {
        assert_eq!(flops_linear(4, 4, RankSpec::Rank(1)), 16);
        assert_eq!(flops_linear(4, 4, RankSpec::Full), 32);
        for d in [2, 4, 8, 64] {
            assert_eq!(flops_linear(d, d, RankSpec::Rank(d / 2)), flops_linear(d, d, RankSpec::Full));
        }
        assert_eq!(break_even_rank(4, 4), 2);
        assert_eq!(break_even_rank(3, 6), 2);
        assert_eq!(break_even_rank(7, 7), 3);
    }

    #[test]
    fn model_flops_additivity_and_linearity() {
        let mut rng = seeded_rng(7);
        let l = NsnLayer::random(8, 8, 4, &mut rng);
        let one = single(Layer::Nsn(l.clone()));
        let two = Model::new(vec![
            Block {
                layer: Layer::Nsn(l.clone()),
                activation: Activation::Relu,
            },
            Block {
                layer: Layer::Nsn(l),
                activation: Activation::Identity,
            },
        ])
        .unwrap();
        assert_eq!(two.flops(RankSpec::Rank(3)), 2 * one.flops(RankSpec::Rank(3)));
        assert_eq!(two.flops(RankSpec::Rank(2)), 2 * two.flops(RankSpec::Rank(1)));
    }

    #[test]
    fn truncate_properties() {
        let mut rng = seeded_rng(8);
        let l = NsnLayer::random(10, 9, 8, &mut rng);
        assert_eq!(l.truncate(8).unwrap(), l);
        assert_eq!(l.truncate(8).unwrap().truncate(4).unwrap(), l.truncate(4).unwrap());
        assert!(l.truncate(9).is_err());
        let x = Matrix::random_gaussian(3, 10, 1.0, &mut rng);
        let full = single(Layer::Nsn(l.clone()));
        let cut = single(Layer::Nsn(l.truncate(5).unwrap()));
        assert_eq!(
            full.forward(&x, RankSpec::Rank(5)).unwrap(),
            cut.forward(&x, RankSpec::Rank(5)).unwrap()
        );
    }

    #[test]
    fn model_rejects_bad_topology() {
        let mut rng = seeded_rng(9);
        let a = Block {
            layer: Layer::Dense(DenseLayer::random(3, 4, &mut rng)),
            activation: Activation::Relu,
        };
        let b = Block {
            layer: Layer::Dense(DenseLayer::random(5, 2, &mut rng)),
            activation: Activation::Identity,
        };
        assert!(Model::new(vec![a.clone(), b]).is_err());
        assert!(Model::new(vec![a]).is_err());
    }

    #[test]
    fn clamping_across_heterogeneous_layers() {
        let mut rng = seeded_rng(10);
        let big = NsnLayer::random(6, 6, 6, &mut rng);
        let small = NsnLayer::random(6, 2, 2, &mut rng);
        let m = Model::new(vec![
            Block {
                layer: Layer::Nsn(big),
                activation: Activation::Gelu,
            },
            Block {
                layer: Layer::Nsn(small),
                activation: Activation::Identity,
            },
        ])
        .unwrap();
        let x = Matrix::random_gaussian(2, 6, 1.0, &mut rng);
        assert!(m.forward(&x, RankSpec::Rank(5)).is_ok());
        assert_eq!(m.forward(&x, RankSpec::Rank(6)).unwrap(), m.forward(&x, RankSpec::Full).unwrap());
        assert!(m.forward(&x, RankSpec::Rank(7)).is_err());
        assert_eq!(m.flops(RankSpec::Rank(5)), 2 * 5 * 12 + 2 * 2 * 8);
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (Activation::Gelu.apply(x + h) - Activation::Gelu.apply(x - h)) / (2.0 * h);
            assert!((fd - Activation::Gelu.derivative(x)).abs() < 1e-8);
        }
    }
}
