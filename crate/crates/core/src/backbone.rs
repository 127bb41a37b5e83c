//! Binary feature extractor.
//!
//! Each [`BinaryBlock`] computes `y = scale ⊙ (sign(W) · sign(x)) + shift`,
//! where the matrix product runs on packed bits. Blocks are chained with
//! `sign` in between; the last block's real-valued `y` is the feature vector
//! handed to the classification head.
//!
//! Training keeps a real-valued shadow copy of every weight matrix. Gradients
//! cross each `sign` with the clipped straight-through estimator, and the
//! packed copy is re-derived from the shadow after every update.

use alloc::vec::Vec;

use rand::Rng;

use crate::bitcore::{binarize, binarize_vec, bitlinear_forward, ste_backward, BitTensor};
use crate::fixedpoint::{calibrate, quantize, Bits, QTensor};
use crate::Error;

/// Lower bound kept on every per-unit scale after an update.
pub const MIN_SCALE: f32 = 1e-4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackboneError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("backbone is frozen")]
    Frozen,
    #[error("a backbone needs at least one block")]
    NoBlocks,
    #[error("block {index} input width does not match the previous block output")]
    BrokenChain { index: usize },
    #[error("block {index} packed weights disagree with its shadow weights")]
    InconsistentPacking { index: usize },
    #[error("block {index} has a non-positive scale")]
    NonPositiveScale { index: usize },
    #[error("empty mini-batch")]
    EmptyBatch,
}

/// One binary linear layer with a real per-unit affine.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryBlock {
    in_dim: usize,
    out_dim: usize,
    shadow: Vec<f32>,
    packed: BitTensor,
    scale: Vec<f32>,
    shift: Vec<f32>,
}

impl BinaryBlock {
    /// Shadow weights uniform in `[-1, 1]`, `scale = 1/sqrt(in_dim)`, `shift = 0`.
    pub fn random<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let shadow: Vec<f32> = (0..in_dim * out_dim).map(|_| rng.random_range(-1.0f32..=1.0)).collect();
        let scale = alloc::vec![1.0 / libm::sqrtf(in_dim as f32); out_dim];
        Self::from_parts(in_dim, out_dim, shadow, scale, alloc::vec![0.0; out_dim]).expect("consistent dims")
    }

    /// Builds a block and derives the packed weights from `shadow`.
    pub fn from_parts(
        in_dim: usize,
        out_dim: usize,
        shadow: Vec<f32>,
        scale: Vec<f32>,
        shift: Vec<f32>,
    ) -> Result<Self, BackboneError> {
        if shadow.len() != in_dim * out_dim {
            return Err(BackboneError::DimensionMismatch { expected: in_dim * out_dim, found: shadow.len() });
        }
        let packed = binarize(&shadow, &[out_dim, in_dim]).expect("length checked");
        Self::from_raw_parts(in_dim, out_dim, shadow, packed, scale, shift)
    }

    /// Builds a block from every stored field, verifying that `packed`
    /// is the sign pattern of `shadow`.
    pub fn from_raw_parts(
        in_dim: usize,
        out_dim: usize,
        shadow: Vec<f32>,
        packed: BitTensor,
        scale: Vec<f32>,
        shift: Vec<f32>,
    ) -> Result<Self, BackboneError> {
        if shadow.len() != in_dim * out_dim {
            return Err(BackboneError::DimensionMismatch { expected: in_dim * out_dim, found: shadow.len() });
        }
        for v in [&scale, &shift] {
            if v.len() != out_dim {
                return Err(BackboneError::DimensionMismatch { expected: out_dim, found: v.len() });
            }
        }
        if scale.iter().any(|&s| !(s > 0.0)) {
            return Err(BackboneError::NonPositiveScale { index: 0 });
        }
        let expected = binarize(&shadow, &[out_dim, in_dim]).expect("length checked");
        if expected != packed {
            return Err(BackboneError::InconsistentPacking { index: 0 });
        }
        Ok(BinaryBlock { in_dim, out_dim, shadow, packed, scale, shift })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn shadow_weights(&self) -> &[f32] {
        &self.shadow
    }

    pub fn packed_weights(&self) -> &BitTensor {
        &self.packed
    }

    pub fn scale(&self) -> &[f32] {
        &self.scale
    }

    pub fn shift(&self) -> &[f32] {
        &self.shift
    }

    fn forward(&self, x: &[f64]) -> (BitTensor, Vec<i64>, Vec<f64>) {
        let xb = binarize_vec(x);
        let z = bitlinear_forward(&self.packed, &xb).expect("dims checked by the model");
        let y = self.affine(&z, &self.scale, &self.shift);
        (xb, z, y)
    }

    fn affine(&self, z: &[i64], scale: &[f32], shift: &[f32]) -> Vec<f64> {
        z.iter()
            .zip(scale.iter().zip(shift))
            .map(|(&z, (&s, &b))| s as f64 * z as f64 + b as f64)
            .collect()
    }
}

/// Per-block scale and shift folded to 16-bit fixed point at freeze time.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedAffine {
    pub scale: QTensor,
    pub shift: QTensor,
}

impl FoldedAffine {
    fn fold(block: &BinaryBlock) -> Self {
        let fold = |v: &[f32]| {
            let v: Vec<f64> = v.iter().map(|&x| x as f64).collect();
            quantize(&v, calibrate(&v, Bits::B16).expect("block parameters are finite"))
        };
        FoldedAffine { scale: fold(&block.scale), shift: fold(&block.shift) }
    }
}

/// Per-sample training interface of whatever sits on top of the backbone.
pub trait FeatureHead {
    /// Takes one SGD step on a mini-batch of features and returns the mean
    /// loss with the gradient of that mean with respect to each feature
    /// vector, computed before the head's own update.
    fn train_features(&mut self, features: &[Vec<f64>], labels: &[u32]) -> Result<HeadStep, Error>;
}

/// Gradients of one block's trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGradient {
    pub weights: Vec<f64>,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadStep {
    pub loss: f64,
    pub feature_grads: Vec<Vec<f64>>,
}

/// Stack of binary blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneModel {
    blocks: Vec<BinaryBlock>,
    frozen: bool,
    folded: Option<Vec<FoldedAffine>>,
}

struct Trace {
    inputs: Vec<Vec<f64>>,
    binarized: Vec<BitTensor>,
    z: Vec<Vec<i64>>,
    features: Vec<f64>,
}

impl BackboneModel {
    pub fn new(blocks: Vec<BinaryBlock>) -> Result<Self, BackboneError> {
        if blocks.is_empty() {
            return Err(BackboneError::NoBlocks);
        }
        for (index, pair) in blocks.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(BackboneError::BrokenChain { index: index + 1 });
            }
        }
        Ok(BackboneModel { blocks, frozen: false, folded: None })
    }

    /// Random model with layer widths `dims` (`dims[0]` is the input width).
    pub fn random<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self, BackboneError> {
        if dims.len() < 2 {
            return Err(BackboneError::NoBlocks);
        }
        let blocks = dims.windows(2).map(|d| BinaryBlock::random(d[0], d[1], rng)).collect();
        Self::new(blocks)
    }

    pub fn blocks(&self) -> &[BinaryBlock] {
        &self.blocks
    }

    pub fn input_dim(&self) -> usize {
        self.blocks[0].in_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.blocks[self.blocks.len() - 1].out_dim
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Latches the model read-only and folds every affine to 16 bits.
    pub fn freeze(&mut self) {
        if !self.frozen {
            self.frozen = true;
            self.folded = Some(self.blocks.iter().map(FoldedAffine::fold).collect());
        }
    }

    pub fn folded_affine(&self) -> Option<&[FoldedAffine]> {
        self.folded.as_deref()
    }

    fn check_input(&self, input: &[f64]) -> Result<(), BackboneError> {
        if input.len() != self.input_dim() {
            return Err(BackboneError::DimensionMismatch { expected: self.input_dim(), found: input.len() });
        }
        Ok(())
    }

    pub fn forward_features(&self, input: &[f64]) -> Result<Vec<f64>, BackboneError> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        for block in &self.blocks {
            x = block.forward(&x).2;
        }
        Ok(x)
    }

    /// Forward pass through the 16-bit folded affines of a frozen model.
    pub fn forward_features_folded(&self, input: &[f64]) -> Result<Vec<f64>, BackboneError> {
        self.check_input(input)?;
        let folded = self.folded.as_ref().ok_or(BackboneError::Frozen)?;
        let mut x = input.to_vec();
        for (block, f) in self.blocks.iter().zip(folded) {
            let z = bitlinear_forward(&block.packed, &binarize_vec(&x)).expect("dims checked");
            let scale = f.scale.dequantize();
            let shift = f.shift.dequantize();
            x = z.iter().zip(scale.iter().zip(&shift)).map(|(&z, (&s, &b))| s * z as f64 + b).collect();
        }
        Ok(x)
    }

    fn trace(&self, input: &[f64]) -> Trace {
        let mut inputs = Vec::with_capacity(self.blocks.len());
        let mut binarized = Vec::with_capacity(self.blocks.len());
        let mut zs = Vec::with_capacity(self.blocks.len());
        let mut x = input.to_vec();
        for block in &self.blocks {
            let (xb, z, y) = block.forward(&x);
            inputs.push(x);
            binarized.push(xb);
            zs.push(z);
            x = y;
        }
        Trace { inputs, binarized, z: zs, features: x }
    }

    /// One SGD step over a mini-batch, jointly with `head`.
    ///
    /// `batch` pairs each raw input with its class id. Returns the head's
    /// mean loss for the batch.
    pub fn train_backbone_step<H: FeatureHead + ?Sized>(
        &mut self,
        batch: &[(&[f64], u32)],
        head: &mut H,
        learning_rate: f64,
    ) -> Result<f64, Error> {
        if self.frozen {
            return Err(BackboneError::Frozen.into());
        }
        let (loss, grads) = self.gradients(batch, head)?;
        self.apply_gradients(&grads, learning_rate)?;
        Ok(loss)
    }

    /// Mean-loss gradients of every block parameter for `batch`. The head
    /// supplies the feature gradients (and takes its own step).
    pub fn gradients<H: FeatureHead + ?Sized>(
        &self,
        batch: &[(&[f64], u32)],
        head: &mut H,
    ) -> Result<(f64, Vec<BlockGradient>), Error> {
        if batch.is_empty() {
            return Err(BackboneError::EmptyBatch.into());
        }
        for (input, _) in batch {
            self.check_input(input)?;
        }
        let traces: Vec<Trace> = batch.iter().map(|(x, _)| self.trace(x)).collect();
        let features: Vec<Vec<f64>> = traces.iter().map(|t| t.features.clone()).collect();
        let labels: Vec<u32> = batch.iter().map(|&(_, y)| y).collect();
        let step = head.train_features(&features, &labels)?;
        if step.feature_grads.len() != batch.len() {
            return Err(BackboneError::DimensionMismatch { expected: batch.len(), found: step.feature_grads.len() }
                .into());
        }

        let dense: Vec<Vec<f64>> = self
            .blocks
            .iter()
            .map(|b| b.packed.signs().map(|s| if s { 1.0 } else { -1.0 }).collect())
            .collect();
        let mut grads: Vec<BlockGradient> = self
            .blocks
            .iter()
            .map(|b| BlockGradient {
                weights: alloc::vec![0.0; b.shadow.len()],
                scale: alloc::vec![0.0; b.out_dim],
                shift: alloc::vec![0.0; b.out_dim],
            })
            .collect();

        for (trace, upstream) in traces.iter().zip(&step.feature_grads) {
            if upstream.len() != self.feature_dim() {
                return Err(
                    BackboneError::DimensionMismatch { expected: self.feature_dim(), found: upstream.len() }.into()
                );
            }
            let mut dy = upstream.clone();
            for l in (0..self.blocks.len()).rev() {
                let block = &self.blocks[l];
                let g = &mut grads[l];
                let (n_in, n_out) = (block.in_dim, block.out_dim);
                let xb = trace.binarized[l].to_pm1();
                let z = &trace.z[l];
                let mut dz = alloc::vec![0.0; n_out];
                for j in 0..n_out {
                    g.scale[j] += dy[j] * z[j] as f64;
                    g.shift[j] += dy[j];
                    dz[j] = dy[j] * block.scale[j] as f64;
                }
                for j in 0..n_out {
                    if dz[j] == 0.0 {
                        continue;
                    }
                    let row = &mut g.weights[j * n_in..(j + 1) * n_in];
                    for (gw, &s) in row.iter_mut().zip(&xb) {
                        *gw += dz[j] * s as f64;
                    }
                }
                if l == 0 {
                    break;
                }
                let mut dxb = alloc::vec![0.0; n_in];
                for j in 0..n_out {
                    if dz[j] == 0.0 {
                        continue;
                    }
                    let row = &dense[l][j * n_in..(j + 1) * n_in];
                    for (d, &w) in dxb.iter_mut().zip(row) {
                        *d += dz[j] * w;
                    }
                }
                dy = ste_backward(&dxb, &trace.inputs[l])?;
            }
        }
        Ok((step.loss, grads))
    }

    /// Plain SGD on the shadow weights, scales and shifts, then re-packs.
    pub fn apply_gradients(&mut self, grads: &[BlockGradient], learning_rate: f64) -> Result<(), BackboneError> {
        if self.frozen {
            return Err(BackboneError::Frozen);
        }
        if grads.len() != self.blocks.len() {
            return Err(BackboneError::DimensionMismatch { expected: self.blocks.len(), found: grads.len() });
        }
        for (block, g) in self.blocks.iter().zip(grads) {
            if g.weights.len() != block.shadow.len() || g.scale.len() != block.out_dim || g.shift.len() != block.out_dim
            {
                return Err(BackboneError::DimensionMismatch { expected: block.shadow.len(), found: g.weights.len() });
            }
        }
        for (block, g) in self.blocks.iter_mut().zip(grads) {
            // Clipped STE on the weight sign: shadow weights stay in [-1, 1],
            // so every weight gradient passes.
            for (w, &d) in block.shadow.iter_mut().zip(&g.weights) {
                *w = ((*w as f64 - learning_rate * d) as f32).clamp(-1.0, 1.0);
            }
            for (s, &d) in block.scale.iter_mut().zip(&g.scale) {
                *s = ((*s as f64 - learning_rate * d) as f32).max(MIN_SCALE);
            }
            for (b, &d) in block.shift.iter_mut().zip(&g.shift) {
                *b = (*b as f64 - learning_rate * d) as f32;
            }
            block.packed = binarize(&block.shadow, &[block.out_dim, block.in_dim]).expect("dims fixed");
        }
        Ok(())
    }

    /// Reassembles a model from stored blocks (checkpoint loading).
    pub fn from_blocks(blocks: Vec<BinaryBlock>, frozen: bool) -> Result<Self, BackboneError> {
        let mut model = Self::new(blocks)?;
        if frozen {
            model.freeze();
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct ZeroHead;

    impl FeatureHead for ZeroHead {
        fn train_features(&mut self, features: &[Vec<f64>], _labels: &[u32]) -> Result<HeadStep, Error> {
            Ok(HeadStep { loss: 0.0, feature_grads: features.iter().map(|f| alloc::vec![0.0; f.len()]).collect() })
        }
    }

    #[test]
    fn broken_chain_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = BinaryBlock::random(4, 5, &mut rng);
        let b = BinaryBlock::random(6, 2, &mut rng);
        assert_eq!(BackboneModel::new(alloc::vec![a, b]), Err(BackboneError::BrokenChain { index: 1 }));
        assert_eq!(BackboneModel::new(alloc::vec![]), Err(BackboneError::NoBlocks));
    }

    #[test]
    fn forward_dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = BackboneModel::random(&[8, 4], &mut rng).unwrap();
        assert!(matches!(m.forward_features(&[0.0; 7]), Err(BackboneError::DimensionMismatch { .. })));
    }

    #[test]
    fn single_block_identity_weights() {
        // Row j has +1 only at column j: output j is the bitdot of that row with sign(x).
        let n = 4;
        let shadow: Vec<f32> = (0..n * n).map(|i| if i / n == i % n { 1.0 } else { -1.0 }).collect();
        let block = BinaryBlock::from_parts(n, n, shadow, alloc::vec![1.0; n], alloc::vec![0.0; n]).unwrap();
        let model = BackboneModel::new(alloc::vec![block]).unwrap();
        let out = model.forward_features(&[0.5, -2.0, 0.0, -0.1]).unwrap();
        // x signs: + - + -. Row 0 = (+,-,-,-): 1+1-1+1 = 2.
        assert_eq!(out, alloc::vec![2.0, -2.0, 2.0, -2.0]);
    }

    #[test]
    fn freeze_is_a_latch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = BackboneModel::random(&[16, 8, 4], &mut rng).unwrap();
        let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).sin()).collect();
        let before = m.forward_features(&x).unwrap();
        m.freeze();
        let once = m.clone();
        m.freeze();
        assert_eq!(m, once);
        assert_eq!(m.forward_features(&x).unwrap(), before);
        assert_eq!(m.forward_features(&x).unwrap(), m.forward_features(&x).unwrap());
        let err = m.train_backbone_step(&[(&x, 0)], &mut ZeroHead, 0.1);
        assert_eq!(err, Err(Error::Backbone(BackboneError::Frozen)));
    }

    #[test]
    fn folded_forward_is_close() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = BackboneModel::random(&[32, 16, 8], &mut rng).unwrap();
        let x: Vec<f64> = (0..32).map(|i| (i as f64 * 1.3).cos()).collect();
        assert!(m.forward_features_folded(&x).is_err());
        m.freeze();
        let real = m.forward_features(&x).unwrap();
        let folded = m.forward_features_folded(&x).unwrap();
        for (a, b) in real.iter().zip(&folded) {
            assert!((a - b).abs() < 1e-2, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_gradient_leaves_model_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = BackboneModel::random(&[12, 10, 6], &mut rng).unwrap();
        let before = m.clone();
        let x = [0.3; 12];
        m.train_backbone_step(&[(&x[..], 0), (&x[..], 1)], &mut ZeroHead, 0.5).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn empty_batch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut m = BackboneModel::random(&[4, 2], &mut rng).unwrap();
        assert_eq!(m.train_backbone_step(&[], &mut ZeroHead, 0.1), Err(Error::Backbone(BackboneError::EmptyBatch)));
    }

    #[test]
    fn raw_parts_must_agree() {
        let shadow = alloc::vec![0.5f32, -0.5];
        let wrong = binarize(&[-1.0f32, 1.0], &[1, 2]).unwrap();
        let err = BinaryBlock::from_raw_parts(2, 1, shadow, wrong, alloc::vec![1.0], alloc::vec![0.0]);
        assert!(matches!(err, Err(BackboneError::InconsistentPacking { .. })));
    }
}
