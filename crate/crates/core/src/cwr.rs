//! CWR* classification head with dual-precision temporary weights.
//!
//! The head keeps real-valued consolidated weights `cw` (used for inference)
//! and, during an experience, temporary weights `tw` in two precisions:
//!
//! * `tw_hp`, at `hp` bits, is the copy SGD updates;
//! * `tw_lp`, at `lp` bits, serves the forward pass and is re-derived from
//!   `tw_hp` after every mutation, never updated on its own.
//!
//! Per experience: [`CwrState::expand_head`] → [`CwrState::preload_tw`] →
//! repeated [`CwrState::train_minibatch`] → [`CwrState::consolidate`].
//!
//! The weight-gradient of softmax cross-entropy is `(p - y) ⊗ a` and the bias
//! gradient is `p - y`; mini-batch gradients are means over samples. When
//! `hp` is fixed point the gradient is formed from integer codes of `p - y`
//! and `a` and the learning rate is folded into the requantization multiplier
//! that maps it onto the `tw_hp` scale.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::backbone::{FeatureHead, HeadStep};
use crate::fixedpoint::{
    calibrate, calibrate_range, qlinear_accumulate, quantize, quantize_counting, requantize_accumulators, Bits,
    QAccum, QParams, QTensor, QuantError, RequantMultiplier,
};
use crate::Error;

/// `tw_hp` covers `HP_HEADROOM × max|cw|` so weights can grow during an
/// experience without saturating.
pub const HP_HEADROOM: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CwrError {
    #[error("unknown class {0}")]
    UnknownClass(u32),
    #[error("class {0} has zero samples in the batch")]
    ZeroCount(u32),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("the head has no classes")]
    NoClasses,
    #[error("high-precision copy ({hp}) is less precise than the low-precision copy ({lp})")]
    PrecisionOrder { lp: Precision, hp: Precision },
    #[error("learning rate must be positive and finite, got {0}")]
    InvalidLearningRate(f64),
    #[error("empty mini-batch")]
    EmptyBatch,
}

/// Numeric format of one weight copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    Fixed(Bits),
    Float,
}

impl Precision {
    pub const SWEEP: [Precision; 4] =
        [Precision::Fixed(Bits::B8), Precision::Fixed(Bits::B16), Precision::Fixed(Bits::B32), Precision::Float];

    fn rank(self) -> u32 {
        match self {
            Precision::Fixed(b) => b.width(),
            Precision::Float => u32::MAX,
        }
    }

    /// Parses `8`, `16`, `32` or `float`.
    pub fn parse(s: &str) -> Option<Precision> {
        match s.trim().to_ascii_lowercase().as_str() {
            "float" | "f32" | "f64" | "fp" => Some(Precision::Float),
            other => other.parse().ok().and_then(Bits::from_width).map(Precision::Fixed),
        }
    }
}

impl core::fmt::Display for Precision {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Precision::Fixed(b) => write!(f, "{b}"),
            Precision::Float => f.write_str("float"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantConfig {
    lp: Precision,
    hp: Precision,
    learning_rate: f64,
}

impl QuantConfig {
    pub const DEFAULT_LEARNING_RATE: f64 = 0.01;

    pub fn new(lp: Precision, hp: Precision, learning_rate: f64) -> Result<Self, CwrError> {
        if hp.rank() < lp.rank() {
            return Err(CwrError::PrecisionOrder { lp, hp });
        }
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(CwrError::InvalidLearningRate(learning_rate));
        }
        Ok(QuantConfig { lp, hp, learning_rate })
    }

    /// `lp = hp = p`.
    pub fn uniform(p: Precision, learning_rate: f64) -> Result<Self, CwrError> {
        Self::new(p, p, learning_rate)
    }

    pub fn lp(&self) -> Precision {
        self.lp
    }

    pub fn hp(&self) -> Precision {
        self.hp
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WeightBuf {
    Float(Vec<f64>),
    Fixed(QTensor),
}

impl WeightBuf {
    pub fn to_real(&self) -> Vec<f64> {
        match self {
            WeightBuf::Float(v) => v.clone(),
            WeightBuf::Fixed(q) => q.dequantize(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            WeightBuf::Float(v) => v.len(),
            WeightBuf::Fixed(q) => q.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A `rows × cols` linear layer plus bias. In fixed point, weights and bias
/// share one [`QParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadLayer {
    rows: usize,
    cols: usize,
    weights: WeightBuf,
    bias: WeightBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl HeadLayer {
    pub fn float(rows: usize, cols: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self, CwrError> {
        check_len(weights.len(), rows * cols)?;
        check_len(bias.len(), rows)?;
        Ok(HeadLayer { rows, cols, weights: WeightBuf::Float(weights), bias: WeightBuf::Float(bias) })
    }

    /// Quantizes real weights and bias under shared `params`. Returns the
    /// layer and the number of saturated elements.
    pub fn fixed(rows: usize, cols: usize, weights: &[f64], bias: &[f64], params: QParams) -> Result<(Self, usize), CwrError> {
        check_len(weights.len(), rows * cols)?;
        check_len(bias.len(), rows)?;
        let (w, sw) = quantize_counting(weights, params);
        let (b, sb) = quantize_counting(bias, params);
        let w = w.with_shape(&[rows, cols]).expect("length checked");
        Ok((HeadLayer { rows, cols, weights: WeightBuf::Fixed(w), bias: WeightBuf::Fixed(b) }, sw + sb))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn weights(&self) -> &WeightBuf {
        &self.weights
    }

    pub fn bias(&self) -> &WeightBuf {
        &self.bias
    }

    pub fn params(&self) -> Option<QParams> {
        match &self.weights {
            WeightBuf::Fixed(q) => Some(q.params()),
            WeightBuf::Float(_) => None,
        }
    }

    /// Logits and softmax probabilities for one feature vector.
    ///
    /// Fixed point: `a` is quantized at the layer's width, the bias is moved
    /// to the accumulator scale, and the accumulators are requantized to the
    /// same width with a scale chosen from their magnitude. Softmax always
    /// runs in real arithmetic on the dequantized logits.
    pub fn forward(&self, a: &[f64]) -> Result<HeadOutput, Error> {
        if self.rows == 0 {
            return Err(CwrError::NoClasses.into());
        }
        check_len(a.len(), self.cols)?;
        let logits = match (&self.weights, &self.bias) {
            (WeightBuf::Float(w), WeightBuf::Float(b)) => (0..self.rows)
                .map(|r| {
                    let row = &w[r * self.cols..(r + 1) * self.cols];
                    row.iter().zip(a).map(|(x, y)| x * y).sum::<f64>() + b[r]
                })
                .collect(),
            (WeightBuf::Fixed(w), WeightBuf::Fixed(b)) => {
                let bits = w.params().bits();
                let aq = quantize(a, calibrate(a, bits)?);
                let acc_scale = w.params().scale() * aq.params().scale();
                let bias = QAccum::from_real(&b.dequantize(), acc_scale)?;
                let acc = qlinear_accumulate(w, &aq, Some(&bias))?;
                let peak = acc.iter().map(|x| x.unsigned_abs()).max().unwrap_or(0);
                let out_scale = if peak == 0 { acc_scale } else { peak as f64 * acc_scale / bits.max_code() as f64 };
                let out = QParams::new(out_scale, bits)?;
                let m = RequantMultiplier::new(acc_scale / out_scale)?;
                requantize_accumulators(&acc, m, out).dequantize()
            }
            _ => unreachable!("weights and bias share a representation"),
        };
        let probs = softmax(&logits);
        Ok(HeadOutput { logits, probs })
    }

    fn append_zero_rows(&mut self, n: usize) {
        let cols = self.cols;
        let grow = |buf: &mut WeightBuf, per_row: usize, rows: usize| match buf {
            WeightBuf::Float(v) => v.resize(v.len() + n * per_row, 0.0),
            WeightBuf::Fixed(q) => {
                let mut data = q.data().to_vec();
                data.resize(data.len() + n * per_row, 0);
                let shape: Vec<usize> = if q.shape().len() == 2 { alloc::vec![rows + n, per_row] } else { alloc::vec![rows + n] };
                *q = QTensor::from_codes(data, &shape, q.params()).expect("zero codes are in range");
            }
        };
        grow(&mut self.weights, cols, self.rows);
        grow(&mut self.bias, 1, self.rows);
        self.rows += n;
    }
}

fn check_len(found: usize, expected: usize) -> Result<(), CwrError> {
    if found != expected {
        return Err(CwrError::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| libm::exp(z - max)).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-log p[target]`.
pub fn cross_entropy(probs: &[f64], target: usize) -> f64 {
    -libm::log(probs[target].max(f64::MIN_POSITIVE))
}

/// Per-sample gradients of cross-entropy through softmax:
/// `dW = (p - y) ⊗ a`, `db = p - y`, with `y` the one-hot of `target`.
pub fn head_gradients(a: &[f64], probs: &[f64], target: usize) -> Result<(Vec<f64>, Vec<f64>), CwrError> {
    if target >= probs.len() {
        return Err(CwrError::DimensionMismatch { expected: probs.len(), found: target + 1 });
    }
    let db: Vec<f64> = probs.iter().enumerate().map(|(i, &p)| if i == target { p - 1.0 } else { p }).collect();
    let mut dw = Vec::with_capacity(probs.len() * a.len());
    for &e in &db {
        dw.extend(a.iter().map(|&x| e * x));
    }
    Ok((dw, db))
}

/// Integer mini-batch gradient: real value of element `i` is `dw[i] × dw_scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedGradient {
    pub dw: Vec<i128>,
    pub dw_scale: f64,
    pub db: Vec<i128>,
    pub db_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Gradient {
    Real { dw: Vec<f64>, db: Vec<f64> },
    Fixed(FixedGradient),
}

impl Gradient {
    pub fn weights_real(&self) -> Vec<f64> {
        match self {
            Gradient::Real { dw, .. } => dw.clone(),
            Gradient::Fixed(g) => g.dw.iter().map(|&c| c as f64 * g.dw_scale).collect(),
        }
    }

    pub fn bias_real(&self) -> Vec<f64> {
        match self {
            Gradient::Real { db, .. } => db.clone(),
            Gradient::Fixed(g) => g.db.iter().map(|&c| c as f64 * g.db_scale).collect(),
        }
    }

    fn lens(&self) -> (usize, usize) {
        match self {
            Gradient::Real { dw, db } => (dw.len(), db.len()),
            Gradient::Fixed(g) => (g.dw.len(), g.db.len()),
        }
    }
}

/// `100 × mean|g_float − g_quant| / mean|g_float|`, or 0 when the float
/// gradient is identically zero.
pub fn mae_percent(float_grad: &[f64], quant_grad: &[f64]) -> f64 {
    let denom: f64 = float_grad.iter().map(|g| g.abs()).sum();
    if denom == 0.0 {
        return 0.0;
    }
    let num: f64 = float_grad.iter().zip(quant_grad).map(|(f, q)| (f - q).abs()).sum();
    100.0 * num / denom
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinibatchReport {
    pub loss: f64,
    pub mae_percent: Option<f64>,
    pub saturated: usize,
}

/// Inference view of the consolidated weights at the configured `lp`.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluator {
    layer: HeadLayer,
    classes: Vec<u32>,
}

impl Evaluator {
    pub fn predict(&self, a: &[f64]) -> Result<u32, Error> {
        let out = self.layer.forward(a)?;
        Ok(self.classes[argmax(&out.logits)])
    }

    pub fn layer(&self) -> &HeadLayer {
        &self.layer
    }
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct CwrState {
    config: QuantConfig,
    feature_dim: usize,
    classes: Vec<u32>,
    index: BTreeMap<u32, usize>,
    cw: Vec<f64>,
    cw_bias: Vec<f64>,
    past: Vec<u64>,
    active: (Precision, Precision),
    lp_params: Option<QParams>,
    tw_hp: HeadLayer,
    tw_lp: HeadLayer,
    saturations: u64,
}

impl CwrState {
    pub fn new(feature_dim: usize, config: QuantConfig) -> Self {
        let empty = HeadLayer::float(0, feature_dim, Vec::new(), Vec::new()).expect("empty layer");
        CwrState {
            config,
            feature_dim,
            classes: Vec::new(),
            index: BTreeMap::new(),
            cw: Vec::new(),
            cw_bias: Vec::new(),
            past: Vec::new(),
            active: (Precision::Float, Precision::Float),
            lp_params: None,
            tw_hp: empty.clone(),
            tw_lp: empty,
            saturations: 0,
        }
    }

    /// Restores a consolidated snapshot. Temporary weights start empty until
    /// the next [`CwrState::preload_tw`].
    pub fn from_consolidated(
        feature_dim: usize,
        config: QuantConfig,
        classes: Vec<u32>,
        cw: Vec<f64>,
        cw_bias: Vec<f64>,
        past: Vec<u64>,
    ) -> Result<Self, CwrError> {
        let m = classes.len();
        check_len(cw.len(), m * feature_dim)?;
        check_len(cw_bias.len(), m)?;
        check_len(past.len(), m)?;
        let mut state = CwrState::new(feature_dim, config);
        state.expand_head(&classes);
        check_len(state.classes.len(), m)?;
        state.cw = cw;
        state.cw_bias = cw_bias;
        state.past = past;
        Ok(state)
    }

    pub fn config(&self) -> QuantConfig {
        self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    pub fn class_index(&self, class: u32) -> Option<usize> {
        self.index.get(&class).copied()
    }

    pub fn cw(&self) -> &[f64] {
        &self.cw
    }

    pub fn cw_bias(&self) -> &[f64] {
        &self.cw_bias
    }

    pub fn past(&self) -> &[u64] {
        &self.past
    }

    pub fn tw_hp(&self) -> &HeadLayer {
        &self.tw_hp
    }

    pub fn tw_lp(&self) -> &HeadLayer {
        &self.tw_lp
    }

    /// Total elements clamped while writing `tw_hp` so far.
    pub fn saturations(&self) -> u64 {
        self.saturations
    }

    /// Precisions of the current experience's `(lp, hp)` copies.
    pub fn active_precisions(&self) -> (Precision, Precision) {
        self.active
    }

    /// Registers classes never seen before, with zero consolidated weights
    /// and zero `past` counters. Known classes are ignored.
    pub fn expand_head(&mut self, new_classes: &[u32]) {
        let mut added = 0;
        for &c in new_classes {
            if self.index.contains_key(&c) {
                continue;
            }
            self.index.insert(c, self.classes.len());
            self.classes.push(c);
            self.cw.extend(core::iter::repeat_n(0.0, self.feature_dim));
            self.cw_bias.push(0.0);
            self.past.push(0);
            added += 1;
        }
        if added > 0 {
            self.tw_hp.append_zero_rows(added);
            self.tw_lp.append_zero_rows(added);
        }
    }

    fn masked_cw(&self, batch_classes: &[u32]) -> Result<(Vec<f64>, Vec<f64>), CwrError> {
        let mut keep = alloc::vec![false; self.classes.len()];
        for &c in batch_classes {
            keep[self.class_index(c).ok_or(CwrError::UnknownClass(c))?] = true;
        }
        let d = self.feature_dim;
        let mut w = alloc::vec![0.0; self.cw.len()];
        let mut b = alloc::vec![0.0; self.cw_bias.len()];
        for (i, &k) in keep.iter().enumerate() {
            if k {
                w[i * d..(i + 1) * d].copy_from_slice(&self.cw[i * d..(i + 1) * d]);
                b[i] = self.cw_bias[i];
            }
        }
        Ok((w, b))
    }

    /// Loads `tw` from `cw` for classes in the batch and zero elsewhere, at
    /// the configured precisions. Fixed-point scales are fixed here for the
    /// whole experience.
    pub fn preload_tw(&mut self, batch_classes: &[u32]) -> Result<(), Error> {
        self.preload_with(batch_classes, self.config.lp, self.config.hp)
    }

    /// As [`CwrState::preload_tw`] but with both copies in floating point, as
    /// used while the backbone is still being trained.
    pub fn preload_tw_float(&mut self, batch_classes: &[u32]) -> Result<(), Error> {
        self.preload_with(batch_classes, Precision::Float, Precision::Float)
    }

    fn preload_with(&mut self, batch_classes: &[u32], lp: Precision, hp: Precision) -> Result<(), Error> {
        let (w, b) = self.masked_cw(batch_classes)?;
        let rows = self.classes.len();
        let d = self.feature_dim;
        let peak = self.cw.iter().chain(&self.cw_bias).fold(0.0f64, |m, v| m.max(v.abs()));
        let range = HP_HEADROOM * if peak > 0.0 { peak } else { 1.0 };
        self.active = (lp, hp);
        self.tw_hp = match hp {
            Precision::Float => HeadLayer::float(rows, d, w, b)?,
            Precision::Fixed(bits) => {
                let (layer, sat) = HeadLayer::fixed(rows, d, &w, &b, calibrate_range(range, bits)?)?;
                self.saturations += sat as u64;
                layer
            }
        };
        self.lp_params = match (lp, hp) {
            (Precision::Fixed(l), Precision::Fixed(h)) if l == h => self.tw_hp.params(),
            (Precision::Fixed(bits), _) => Some(calibrate_range(range, bits)?),
            (Precision::Float, _) => None,
        };
        self.tw_lp = self.derive_lp()?;
        Ok(())
    }

    /// The low-precision copy implied by the current `tw_hp`.
    pub fn derive_lp(&self) -> Result<HeadLayer, QuantError> {
        let hp = &self.tw_hp;
        let derive = |buf: &WeightBuf, shape: &[usize]| -> Result<WeightBuf, QuantError> {
            Ok(match (buf, self.lp_params) {
                (WeightBuf::Float(v), None) => WeightBuf::Float(v.clone()),
                (WeightBuf::Fixed(q), None) => WeightBuf::Float(q.dequantize()),
                (WeightBuf::Float(v), Some(p)) => WeightBuf::Fixed(quantize(v, p).with_shape(shape)?),
                (WeightBuf::Fixed(q), Some(p)) => WeightBuf::Fixed(q.requantize(p)?),
            })
        };
        Ok(HeadLayer {
            rows: hp.rows,
            cols: hp.cols,
            weights: derive(&hp.weights, &[hp.rows, hp.cols])?,
            bias: derive(&hp.bias, &[hp.rows])?,
        })
    }

    /// Forward pass through the low-precision copy.
    pub fn head_forward(&self, a: &[f64]) -> Result<HeadOutput, Error> {
        self.tw_lp.forward(a)
    }

    fn targets(&self, labels: &[u32]) -> Result<Vec<usize>, CwrError> {
        labels.iter().map(|&c| self.class_index(c).ok_or(CwrError::UnknownClass(c))).collect()
    }

    fn check_batch(&self, features: &[Vec<f64>], labels: &[u32]) -> Result<(), CwrError> {
        if features.is_empty() {
            return Err(CwrError::EmptyBatch);
        }
        check_len(labels.len(), features.len())?;
        for f in features {
            check_len(f.len(), self.feature_dim)?;
        }
        Ok(())
    }

    /// Gradient as the training path computes it: forward on `tw_lp`, then a
    /// real or integer product depending on `hp`. Also returns per-sample
    /// `p - y` and the mean loss.
    fn training_gradient(
        &self,
        features: &[Vec<f64>],
        targets: &[usize],
    ) -> Result<(Gradient, Vec<Vec<f64>>, f64), Error> {
        let mut errs = Vec::with_capacity(features.len());
        let mut loss = 0.0;
        for (a, &t) in features.iter().zip(targets) {
            let out = self.tw_lp.forward(a)?;
            loss += cross_entropy(&out.probs, t);
            errs.push(output_error(&out.probs, t));
        }
        let n = features.len();
        loss /= n as f64;
        let grad = match self.active.1 {
            Precision::Float => real_batch_gradient(features, &errs),
            Precision::Fixed(bits) => {
                let e_params = QParams::new(1.0 / bits.max_code() as f64, bits)?;
                let flat: Vec<f64> = features.iter().flatten().copied().collect();
                let a_params = calibrate(&flat, bits)?;
                let (rows, cols) = (self.classes.len(), self.feature_dim);
                let mut dw = alloc::vec![0i128; rows * cols];
                let mut db = alloc::vec![0i128; rows];
                for (a, e) in features.iter().zip(&errs) {
                    let aq = quantize(a, a_params);
                    let eq = quantize(e, e_params);
                    for (i, &ec) in eq.data().iter().enumerate() {
                        db[i] += ec as i128;
                        if ec == 0 {
                            continue;
                        }
                        let row = &mut dw[i * cols..(i + 1) * cols];
                        for (g, &ac) in row.iter_mut().zip(aq.data()) {
                            *g += ec as i128 * ac as i128;
                        }
                    }
                }
                Gradient::Fixed(FixedGradient {
                    dw,
                    dw_scale: e_params.scale() * a_params.scale() / n as f64,
                    db,
                    db_scale: e_params.scale() / n as f64,
                })
            }
        };
        Ok((grad, errs, loss))
    }

    /// Reference weight-gradient: float forward from the real values of
    /// `tw_hp`, float product.
    fn float_weight_gradient(&self, features: &[Vec<f64>], targets: &[usize]) -> Result<Vec<f64>, Error> {
        let layer = HeadLayer::float(self.tw_hp.rows, self.tw_hp.cols, self.tw_hp.weights.to_real(), self.tw_hp.bias.to_real())?;
        let mut errs = Vec::with_capacity(features.len());
        for (a, &t) in features.iter().zip(targets) {
            errs.push(output_error(&layer.forward(a)?.probs, t));
        }
        Ok(real_batch_gradient(features, &errs).weights_real())
    }

    /// Mean-absolute-error percentage between the quantized weight-gradient
    /// and the float one, both computed from the same current weights.
    pub fn gradient_mae(&self, features: &[Vec<f64>], labels: &[u32]) -> Result<f64, Error> {
        self.check_batch(features, labels)?;
        let targets = self.targets(labels)?;
        let (grad, _, _) = self.training_gradient(features, &targets)?;
        let reference = self.float_weight_gradient(features, &targets)?;
        Ok(mae_percent(&reference, &grad.weights_real()))
    }

    /// `tw_hp ← tw_hp − η·grad`, then re-derives `tw_lp`. Returns the number
    /// of elements that saturated.
    pub fn sgd_update(&mut self, grad: &Gradient) -> Result<usize, Error> {
        let (lw, lb) = grad.lens();
        check_len(lw, self.tw_hp.weights.len())?;
        check_len(lb, self.tw_hp.bias.len())?;
        let eta = self.config.learning_rate;
        let mut saturated = 0;
        match (&mut self.tw_hp.weights, &mut self.tw_hp.bias) {
            (WeightBuf::Float(w), WeightBuf::Float(b)) => {
                for (x, g) in w.iter_mut().zip(grad.weights_real()) {
                    *x -= eta * g;
                }
                for (x, g) in b.iter_mut().zip(grad.bias_real()) {
                    *x -= eta * g;
                }
            }
            (WeightBuf::Fixed(w), WeightBuf::Fixed(b)) => {
                let fixed = match grad {
                    Gradient::Fixed(g) => g.clone(),
                    Gradient::Real { dw, db } => quantize_gradient(dw, db, w.params().bits())?,
                };
                let hp_scale = w.params().scale();
                let mw = RequantMultiplier::new(eta * fixed.dw_scale / hp_scale)?;
                let mb = RequantMultiplier::new(eta * fixed.db_scale / hp_scale)?;
                for (i, &g) in fixed.dw.iter().enumerate() {
                    saturated += w.sub_saturating(i, mw.apply(g)) as usize;
                }
                for (i, &g) in fixed.db.iter().enumerate() {
                    saturated += b.sub_saturating(i, mb.apply(g)) as usize;
                }
            }
            _ => unreachable!("weights and bias share a representation"),
        }
        self.saturations += saturated as u64;
        self.tw_lp = self.derive_lp()?;
        Ok(saturated)
    }

    /// One SGD step on a mini-batch. With `instrument`, also reports the
    /// gradient MAE% measured before the update.
    pub fn train_minibatch(&mut self, features: &[Vec<f64>], labels: &[u32], instrument: bool) -> Result<MinibatchReport, Error> {
        self.check_batch(features, labels)?;
        let targets = self.targets(labels)?;
        let (grad, _, loss) = self.training_gradient(features, &targets)?;
        let mae_percent = if instrument {
            let reference = self.float_weight_gradient(features, &targets)?;
            Some(mae_percent(&reference, &grad.weights_real()))
        } else {
            None
        };
        let saturated = self.sgd_update(&grad)?;
        Ok(MinibatchReport { loss, mae_percent, saturated })
    }

    /// Folds `tw` into `cw` for every class in `batch_class_counts`
    /// (class → samples in this experience):
    ///
    /// `wpast = sqrt(past / cur)`,
    /// `cw = (cw·wpast + tw − avg(tw)) / (wpast + 1)`, `past += cur`,
    ///
    /// where `avg(tw)` is the mean `tw` row over the classes in the batch.
    pub fn consolidate(&mut self, batch_class_counts: &BTreeMap<u32, u64>) -> Result<(), Error> {
        if batch_class_counts.is_empty() {
            return Ok(());
        }
        let mut rows = Vec::with_capacity(batch_class_counts.len());
        for (&c, &cur) in batch_class_counts {
            let i = self.class_index(c).ok_or(CwrError::UnknownClass(c))?;
            if cur == 0 {
                return Err(CwrError::ZeroCount(c).into());
            }
            rows.push((i, cur));
        }
        let d = self.feature_dim;
        let tw = self.tw_hp.weights.to_real();
        let tb = self.tw_hp.bias.to_real();
        let k = rows.len() as f64;
        let mut avg_w = alloc::vec![0.0; d];
        let mut avg_b = 0.0;
        for &(i, _) in &rows {
            for (a, &t) in avg_w.iter_mut().zip(&tw[i * d..(i + 1) * d]) {
                *a += t;
            }
            avg_b += tb[i];
        }
        for a in &mut avg_w {
            *a /= k;
        }
        avg_b /= k;
        for &(i, cur) in &rows {
            let wpast = libm::sqrt(self.past[i] as f64 / cur as f64);
            for j in 0..d {
                let c = &mut self.cw[i * d + j];
                *c = (*c * wpast + (tw[i * d + j] - avg_w[j])) / (wpast + 1.0);
            }
            self.cw_bias[i] = (self.cw_bias[i] * wpast + (tb[i] - avg_b)) / (wpast + 1.0);
            self.past[i] += cur;
        }
        Ok(())
    }

    /// Inference head over `cw` at the configured `lp` precision.
    pub fn evaluator(&self) -> Result<Evaluator, Error> {
        let rows = self.classes.len();
        if rows == 0 {
            return Err(CwrError::NoClasses.into());
        }
        let layer = match self.config.lp {
            Precision::Float => HeadLayer::float(rows, self.feature_dim, self.cw.clone(), self.cw_bias.clone())?,
            Precision::Fixed(bits) => {
                let all: Vec<f64> = self.cw.iter().chain(&self.cw_bias).copied().collect();
                HeadLayer::fixed(rows, self.feature_dim, &self.cw, &self.cw_bias, calibrate(&all, bits)?)?.0
            }
        };
        Ok(Evaluator { layer, classes: self.classes.clone() })
    }
}

fn output_error(probs: &[f64], target: usize) -> Vec<f64> {
    probs.iter().enumerate().map(|(i, &p)| if i == target { p - 1.0 } else { p }).collect()
}

fn real_batch_gradient(features: &[Vec<f64>], errs: &[Vec<f64>]) -> Gradient {
    let rows = errs[0].len();
    let cols = features[0].len();
    let mut dw = alloc::vec![0.0; rows * cols];
    let mut db = alloc::vec![0.0; rows];
    for (a, e) in features.iter().zip(errs) {
        for (i, &ei) in e.iter().enumerate() {
            db[i] += ei;
            for (g, &x) in dw[i * cols..(i + 1) * cols].iter_mut().zip(a) {
                *g += ei * x;
            }
        }
    }
    let inv = 1.0 / features.len() as f64;
    dw.iter_mut().for_each(|g| *g *= inv);
    db.iter_mut().for_each(|g| *g *= inv);
    Gradient::Real { dw, db }
}

fn quantize_gradient(dw: &[f64], db: &[f64], bits: Bits) -> Result<FixedGradient, QuantError> {
    let pw = calibrate(dw, bits)?;
    let pb = calibrate(db, bits)?;
    Ok(FixedGradient {
        dw: quantize(dw, pw).data().iter().map(|&c| c as i128).collect(),
        dw_scale: pw.scale(),
        db: quantize(db, pb).data().iter().map(|&c| c as i128).collect(),
        db_scale: pb.scale(),
    })
}

impl FeatureHead for CwrState {
    fn train_features(&mut self, features: &[Vec<f64>], labels: &[u32]) -> Result<HeadStep, Error> {
        self.check_batch(features, labels)?;
        let targets = self.targets(labels)?;
        let (grad, errs, loss) = self.training_gradient(features, &targets)?;
        let w = self.tw_lp.weights.to_real();
        let (rows, cols) = (self.tw_lp.rows, self.tw_lp.cols);
        let inv = 1.0 / features.len() as f64;
        let feature_grads = errs
            .iter()
            .map(|e| {
                let mut g = alloc::vec![0.0; cols];
                for i in 0..rows {
                    let ei = e[i] * inv;
                    for (gj, &wij) in g.iter_mut().zip(&w[i * cols..(i + 1) * cols]) {
                        *gj += ei * wij;
                    }
                }
                g
            })
            .collect();
        self.sgd_update(&grad)?;
        Ok(HeadStep { loss, feature_grads })
    }
}
