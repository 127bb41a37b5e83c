//! Self-checks run by the `gradcheck` command.

use bnncl_core::backbone::{BackboneModel, BinaryBlock, FeatureHead, HeadStep};
use bnncl_core::bitcore::{binarize, binarize_vec, bitdot, bitlinear_forward};
use bnncl_core::cwr::{cross_entropy, head_gradients, softmax};
use bnncl_core::fixedpoint::{dequantize, quantize, Bits, QParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub fn run_all(seed: u64) -> Vec<CheckResult> {
    vec![head_gradient(seed), backbone_affine_gradient(seed), bit_kernels(seed), quantizer_bounds(seed)]
}

fn logits(w: &[f64], b: &[f64], a: &[f64]) -> Vec<f64> {
    b.iter().enumerate().map(|(i, bi)| bi + w[i * a.len()..(i + 1) * a.len()].iter().zip(a).map(|(x, y)| x * y).sum::<f64>()).collect()
}

fn relative(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Softmax cross-entropy gradients against central differences.
pub fn head_gradient(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let m = if trial % 2 == 0 { 2 } else { 10 };
        let d = rng.random_range(1..=64);
        let w: Vec<f64> = (0..m * d).map(|_| rng.random_range(-0.5..0.5)).collect();
        let b: Vec<f64> = (0..m).map(|_| rng.random_range(-0.5..0.5)).collect();
        let a: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = rng.random_range(0..m);
        let loss = |w: &[f64], b: &[f64]| cross_entropy(&softmax(&logits(w, b, &a)), t);
        let (dw, db) = head_gradients(&a, &softmax(&logits(&w, &b, &a)), t).expect("consistent sizes");
        for k in 0..m * d {
            let (mut up, mut down) = (w.clone(), w.clone());
            up[k] += h;
            down[k] -= h;
            worst = worst.max(relative(dw[k], (loss(&up, &b) - loss(&down, &b)) / (2.0 * h), 1e-3));
        }
        for k in 0..m {
            let (mut up, mut down) = (b.clone(), b.clone());
            up[k] += h;
            down[k] -= h;
            worst = worst.max(relative(db[k], (loss(&w, &up) - loss(&w, &down)) / (2.0 * h), 1e-3));
        }
    }
    CheckResult { name: "head gradient", passed: worst <= 1e-5, detail: format!("max relative error {worst:.2e}") }
}

struct FixedHead {
    w: Vec<f64>,
    classes: usize,
}

impl FixedHead {
    fn loss(&self, features: &[Vec<f64>], labels: &[u32]) -> f64 {
        let b = vec![0.0; self.classes];
        features.iter().zip(labels).map(|(a, &y)| cross_entropy(&softmax(&logits(&self.w, &b, a)), y as usize)).sum::<f64>()
            / features.len() as f64
    }
}

impl FeatureHead for FixedHead {
    fn train_features(&mut self, features: &[Vec<f64>], labels: &[u32]) -> Result<HeadStep, bnncl_core::Error> {
        let d = features[0].len();
        let b = vec![0.0; self.classes];
        let n = features.len() as f64;
        let grads = features
            .iter()
            .zip(labels)
            .map(|(a, &y)| {
                let mut e = softmax(&logits(&self.w, &b, a));
                e[y as usize] -= 1.0;
                (0..d).map(|j| (0..self.classes).map(|c| e[c] * self.w[c * d + j]).sum::<f64>() / n).collect()
            })
            .collect();
        Ok(HeadStep { loss: self.loss(features, labels), feature_grads: grads })
    }
}

/// Backbone gradients for the last block's scale and shift against
/// central differences of the head loss.
pub fn backbone_affine_gradient(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb10c);
    let base = BackboneModel::random(&[20, 16, 6], &mut rng).expect("valid dims");
    let scale: Vec<f32> = (0..6).map(|j| 0.125 + j as f32 / 1024.0).collect();
    let shift: Vec<f32> = (0..6).map(|j| (j as f32 - 3.0) / 64.0).collect();
    let with = |scale: &[f32], shift: &[f32]| {
        let mut blocks = base.blocks().to_vec();
        let last = blocks.pop().expect("two blocks");
        blocks.push(
            BinaryBlock::from_parts(last.in_dim(), last.out_dim(), last.shadow_weights().to_vec(), scale.to_vec(), shift.to_vec())
                .expect("valid block"),
        );
        BackboneModel::new(blocks).expect("valid chain")
    };
    let inputs: Vec<Vec<f64>> = (0..8).map(|_| (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let labels: Vec<u32> = (0..8).map(|i| i % 3).collect();
    let batch: Vec<(&[f64], u32)> = inputs.iter().map(Vec::as_slice).zip(labels.iter().copied()).collect();
    let mut head = FixedHead { w: (0..18).map(|_| rng.random_range(-0.5..0.5)).collect(), classes: 3 };
    let model = with(&scale, &shift);
    let (_, grads) = model.gradients(&batch, &mut head).expect("valid batch");
    let g = grads.last().expect("blocks");
    let loss = |m: &BackboneModel| {
        let f: Vec<Vec<f64>> = inputs.iter().map(|x| m.forward_features(x).expect("dims")).collect();
        head.loss(&f, &labels)
    };
    // A power-of-two step keeps the perturbed f32 values exact.
    let h = 1.0f32 / 4096.0;
    let mut worst = 0.0f64;
    for j in 0..6 {
        for which in 0..2 {
            let (mut up, mut down) = if which == 0 { (scale.clone(), scale.clone()) } else { (shift.clone(), shift.clone()) };
            up[j] += h;
            down[j] -= h;
            let (mu, md) = if which == 0 { (with(&up, &shift), with(&down, &shift)) } else { (with(&scale, &up), with(&scale, &down)) };
            let fd = (loss(&mu) - loss(&md)) / (2.0 * h as f64);
            let analytic = if which == 0 { g.scale[j] } else { g.shift[j] };
            worst = worst.max(relative(analytic, fd, 1e-8));
        }
    }
    CheckResult { name: "backbone affine gradient", passed: worst <= 1e-4, detail: format!("max relative error {worst:.2e}") }
}

/// Packed kernels against dense ±1 integer products.
pub fn bit_kernels(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb17);
    let mut failures = 0;
    for _ in 0..1000 {
        let (rows, cols) = (rng.random_range(1..8), rng.random_range(1..300));
        let w: Vec<i64> = (0..rows * cols).map(|_| if rng.random_bool(0.5) { 1 } else { -1 }).collect();
        let a: Vec<i64> = (0..cols).map(|_| if rng.random_bool(0.5) { 1 } else { -1 }).collect();
        let wb = binarize(&w, &[rows, cols]).expect("shape");
        let ab = binarize_vec(&a);
        let out = bitlinear_forward(&wb, &ab).expect("shape");
        for r in 0..rows {
            let dense: i64 = (0..cols).map(|c| w[r * cols + c] * a[c]).sum();
            let row = binarize_vec(&w[r * cols..(r + 1) * cols]);
            failures += (out[r] != dense || bitdot(&row, &ab).expect("length") != dense) as usize;
        }
    }
    CheckResult { name: "bit kernels", passed: failures == 0, detail: format!("{failures} mismatches in 1000 cases") }
}

/// Round-trip error and monotonicity of the quantizer at every width.
pub fn quantizer_bounds(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9a);
    let mut failures = 0;
    for bits in Bits::ALL {
        let p = QParams::new(rng.random_range(1e-4..1e-1), bits).expect("positive scale");
        let limit = p.scale() * bits.max_code() as f64;
        let mut values: Vec<f64> = (0..100_000).map(|_| rng.random_range(-limit..=limit)).collect();
        let back = dequantize(&quantize(&values, p));
        failures += values.iter().zip(&back).filter(|(v, b)| (*v - *b).abs() > p.scale() / 2.0).count();
        values.sort_by(f64::total_cmp);
        let codes = quantize(&values, p);
        failures += codes.data().windows(2).filter(|c| c[0] > c[1]).count();
    }
    CheckResult { name: "quantizer bounds", passed: failures == 0, detail: format!("{failures} violations over 3 x 1e5 values") }
}
