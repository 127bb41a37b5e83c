use bnncl_core::backbone::{BackboneModel, BinaryBlock, FeatureHead, HeadStep};
use bnncl_core::bitcore::binarize;
use bnncl_core::cwr::{CwrState, Precision, QuantConfig};
use bnncl_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense ±1 reference: signs taken straight from the shadow weights.
fn dense_forward(model: &BackboneModel, input: &[f64]) -> Vec<f64> {
    let mut x = input.to_vec();
    for block in model.blocks() {
        let n_in = block.in_dim();
        let xs: Vec<f64> = x.iter().map(|&v| if v >= 0.0 { 1.0 } else { -1.0 }).collect();
        x = (0..block.out_dim())
            .map(|j| {
                let z: f64 = (0..n_in)
                    .map(|i| if block.shadow_weights()[j * n_in + i] >= 0.0 { xs[i] } else { -xs[i] })
                    .sum();
                block.scale()[j] as f64 * z + block.shift()[j] as f64
            })
            .collect();
    }
    x
}

/// Fixed softmax head that never updates itself.
struct FrozenSoftmax {
    w: Vec<f64>,
    classes: usize,
    dim: usize,
}

impl FrozenSoftmax {
    fn probs(&self, a: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> =
            (0..self.classes).map(|c| (0..self.dim).map(|j| self.w[c * self.dim + j] * a[j]).sum()).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    fn mean_loss(&self, feats: &[Vec<f64>], labels: &[u32]) -> f64 {
        feats.iter().zip(labels).map(|(a, &y)| -self.probs(a)[y as usize].ln()).sum::<f64>() / feats.len() as f64
    }
}

impl FeatureHead for FrozenSoftmax {
    fn train_features(&mut self, features: &[Vec<f64>], labels: &[u32]) -> Result<HeadStep, Error> {
        let n = features.len() as f64;
        let grads = features
            .iter()
            .zip(labels)
            .map(|(a, &y)| {
                let mut p = self.probs(a);
                p[y as usize] -= 1.0;
                (0..self.dim).map(|j| (0..self.classes).map(|c| p[c] * self.w[c * self.dim + j]).sum::<f64>() / n).collect()
            })
            .collect();
        Ok(HeadStep { loss: self.mean_loss(features, labels), feature_grads: grads })
    }
}

#[test]
fn packed_forward_matches_dense_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for trial in 0..40 {
        let dims = if trial % 2 == 0 { vec![64, 256, 128] } else { vec![37, 70, 65, 9] };
        let mut model = BackboneModel::random(&dims, &mut rng).unwrap();
        // Non-trivial shifts so the affine path is exercised.
        let blocks: Vec<BinaryBlock> = model
            .blocks()
            .iter()
            .map(|b| {
                let shift: Vec<f32> = (0..b.out_dim()).map(|_| rng.random_range(-0.5..0.5)).collect();
                BinaryBlock::from_parts(b.in_dim(), b.out_dim(), b.shadow_weights().to_vec(), b.scale().to_vec(), shift)
                    .unwrap()
            })
            .collect();
        model = BackboneModel::new(blocks).unwrap();
        for _ in 0..5 {
            let x: Vec<f64> = (0..dims[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
            let fast = model.forward_features(&x).unwrap();
            let slow = dense_forward(&model, &x);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
            }
        }
    }
}

fn with_last_affine(model: &BackboneModel, scale: Vec<f32>, shift: Vec<f32>) -> BackboneModel {
    let mut blocks = model.blocks().to_vec();
    let last = blocks.pop().unwrap();
    blocks.push(BinaryBlock::from_parts(last.in_dim(), last.out_dim(), last.shadow_weights().to_vec(), scale, shift).unwrap());
    BackboneModel::new(blocks).unwrap()
}

#[test]
fn scale_and_shift_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let dims = [20, 16, 6];
    let base = BackboneModel::random(&dims, &mut rng).unwrap();
    // Exactly representable affine values so `value ± h` is exact in f32.
    let scale0: Vec<f32> = (0..6).map(|j| 0.125 + j as f32 / 1024.0).collect();
    let shift0: Vec<f32> = (0..6).map(|j| (j as f32 - 3.0) / 64.0).collect();
    let model = with_last_affine(&base, scale0.clone(), shift0.clone());

    let inputs: Vec<Vec<f64>> = (0..8).map(|_| (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let labels: Vec<u32> = (0..8).map(|i| i % 3).collect();
    let batch: Vec<(&[f64], u32)> = inputs.iter().map(|x| x.as_slice()).zip(labels.iter().copied()).collect();
    let mut head = FrozenSoftmax { w: (0..3 * 6).map(|_| rng.random_range(-0.5..0.5)).collect(), classes: 3, dim: 6 };

    let (_, grads) = model.gradients(&batch, &mut head).unwrap();
    let last = grads.last().unwrap();

    let loss = |m: &BackboneModel| {
        let feats: Vec<Vec<f64>> = inputs.iter().map(|x| m.forward_features(x).unwrap()).collect();
        head.mean_loss(&feats, &labels)
    };
    let h = 1.0f32 / 4096.0;
    for j in 0..6 {
        let mut up = scale0.clone();
        let mut down = scale0.clone();
        up[j] += h;
        down[j] -= h;
        let fd = (loss(&with_last_affine(&base, up, shift0.clone())) - loss(&with_last_affine(&base, down, shift0.clone())))
            / (2.0 * h as f64);
        let rel = (fd - last.scale[j]).abs() / fd.abs().max(last.scale[j].abs()).max(1e-8);
        assert!(rel <= 1e-4, "scale[{j}]: analytic {} fd {fd}", last.scale[j]);

        let mut up = shift0.clone();
        let mut down = shift0.clone();
        up[j] += h;
        down[j] -= h;
        let fd = (loss(&with_last_affine(&base, scale0.clone(), up)) - loss(&with_last_affine(&base, scale0.clone(), down)))
            / (2.0 * h as f64);
        let rel = (fd - last.shift[j]).abs() / fd.abs().max(last.shift[j].abs()).max(1e-8);
        assert!(rel <= 1e-4, "shift[{j}]: analytic {} fd {fd}", last.shift[j]);
    }
}

#[test]
fn training_reduces_loss_on_separable_toy_set() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let dim = 24;
    let center: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut data = Vec::new();
    for i in 0..256 {
        let label = (i % 2) as u32;
        let sign = if label == 0 { 1.0 } else { -1.0 };
        let x: Vec<f64> = center.iter().map(|c| sign * c + rng.random_range(-0.3..0.3)).collect();
        data.push((x, label));
    }
    let mut model = BackboneModel::random(&[dim, 16], &mut rng).unwrap();
    let mut head = CwrState::new(16, QuantConfig::uniform(Precision::Float, 0.05).unwrap());
    head.expand_head(&[0, 1]);
    head.preload_tw_float(&[0, 1]).unwrap();

    let mut losses = Vec::new();
    for step in 0..50 {
        let batch: Vec<(&[f64], u32)> =
            (0..16).map(|k| &data[(step * 16 + k) % data.len()]).map(|(x, y)| (x.as_slice(), *y)).collect();
        losses.push(model.train_backbone_step(&batch, &mut head, 0.05).unwrap());
        for block in model.blocks() {
            let expect = binarize(block.shadow_weights(), &[block.out_dim(), block.in_dim()]).unwrap();
            assert_eq!(&expect, block.packed_weights());
        }
    }
    let early: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let late: f64 = losses[40..].iter().sum::<f64>() / 10.0;
    assert!(late < early, "early {early} late {late}");
}

#[test]
fn shadow_and_packed_stay_consistent_in_deep_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let mut model = BackboneModel::random(&[30, 40, 20, 10], &mut rng).unwrap();
    let mut head = CwrState::new(10, QuantConfig::uniform(Precision::Float, 0.1).unwrap());
    head.expand_head(&[0, 1, 2]);
    head.preload_tw_float(&[0, 1, 2]).unwrap();
    for _ in 0..20 {
        let xs: Vec<Vec<f64>> = (0..8).map(|_| (0..30).map(|_| rng.random_range(-1.5..1.5)).collect()).collect();
        let batch: Vec<(&[f64], u32)> = xs.iter().enumerate().map(|(i, x)| (x.as_slice(), (i % 3) as u32)).collect();
        model.train_backbone_step(&batch, &mut head, 0.2).unwrap();
        for block in model.blocks() {
            let expect = binarize(block.shadow_weights(), &[block.out_dim(), block.in_dim()]).unwrap();
            assert_eq!(&expect, block.packed_weights());
            assert!(block.scale().iter().all(|&s| s > 0.0));
            assert!(block.shadow_weights().iter().all(|w| w.abs() <= 1.0));
        }
    }
}
