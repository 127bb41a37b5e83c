//! Symmetric per-tensor fixed-point quantization.
//!
//! A real value `v` is stored as an integer code `c` with `v ≈ c × scale`.
//! Codes live in the symmetric range `[-(2^(q-1) - 1), 2^(q-1) - 1]`; the most
//! negative two's-complement code is never produced, so negation is closed.
//! The zero point is always 0.
//!
//! Rescaling between integer domains goes through a [`RequantMultiplier`], a
//! 32-bit fixed-point mantissa plus a power-of-two shift, applied with
//! round-half-to-even. Linear layers accumulate in `i128`, which is wide enough
//! for 32-bit operands at any dimension this crate deals with.

use alloc::vec::Vec;

/// Width of a fixed-point code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Bits {
    B8,
    B16,
    B32,
}

impl Bits {
    pub const ALL: [Bits; 3] = [Bits::B8, Bits::B16, Bits::B32];

    pub const fn width(self) -> u32 {
        match self {
            Bits::B8 => 8,
            Bits::B16 => 16,
            Bits::B32 => 32,
        }
    }

    pub fn from_width(width: u32) -> Option<Bits> {
        match width {
            8 => Some(Bits::B8),
            16 => Some(Bits::B16),
            32 => Some(Bits::B32),
            _ => None,
        }
    }

    /// Largest representable code, `2^(q-1) - 1`.
    pub const fn max_code(self) -> i32 {
        ((1i64 << (self.width() - 1)) - 1) as i32
    }
}

impl core::fmt::Display for Bits {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}", self.width())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QuantError {
    #[error("cannot calibrate an empty tensor")]
    EmptyInput,
    #[error("corrupt tensor: non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("invalid scale {0}: must be positive and finite")]
    InvalidScale(f64),
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("code {code} at index {index} is outside the {bits}-bit symmetric range")]
    CodeOutOfRange { index: usize, code: i64, bits: Bits },
    #[error("bias scale {bias} does not match the accumulator scale {accumulator}")]
    ScaleMismatch { bias: f64, accumulator: f64 },
}

/// Quantization parameters shared by every element of a tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QParams {
    scale: f64,
    bits: Bits,
}

impl QParams {
    pub fn new(scale: f64, bits: Bits) -> Result<Self, QuantError> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(QuantError::InvalidScale(scale));
        }
        Ok(QParams { scale, bits })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn bits(&self) -> Bits {
        self.bits
    }

    pub fn max_code(&self) -> i32 {
        self.bits.max_code()
    }

    /// Round-half-to-even, then saturate to the symmetric range.
    pub fn quantize_value(&self, value: f64) -> i32 {
        let max = self.bits.max_code() as f64;
        let code = libm::rint(value / self.scale);
        // NaN falls through both comparisons and casts to 0.
        if code > max {
            max as i32
        } else if code < -max {
            -max as i32
        } else {
            code as i32
        }
    }

    pub fn dequantize_value(&self, code: i32) -> f64 {
        code as f64 * self.scale
    }

    fn saturate(&self, code: i128) -> (i32, bool) {
        let max = self.bits.max_code() as i128;
        if code > max {
            (max as i32, true)
        } else if code < -max {
            (-max as i32, true)
        } else {
            (code as i32, false)
        }
    }
}

/// Max-abs calibration: `scale = max|v| / (2^(q-1) - 1)`; an all-zero tensor
/// gets scale 1.
pub fn calibrate(values: &[f64], bits: Bits) -> Result<QParams, QuantError> {
    if values.is_empty() {
        return Err(QuantError::EmptyInput);
    }
    let mut max_abs = 0.0f64;
    for (index, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(QuantError::NonFinite { index });
        }
        max_abs = max_abs.max(v.abs());
    }
    calibrate_range(max_abs, bits)
}

/// Calibration from a known magnitude bound.
pub fn calibrate_range(max_abs: f64, bits: Bits) -> Result<QParams, QuantError> {
    if !max_abs.is_finite() || max_abs < 0.0 {
        return Err(QuantError::InvalidScale(max_abs));
    }
    if max_abs == 0.0 {
        return QParams::new(1.0, bits);
    }
    QParams::new(max_abs / bits.max_code() as f64, bits)
}

/// Integer tensor carrying its quantization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    data: Vec<i32>,
    shape: Vec<usize>,
    params: QParams,
}

impl QTensor {
    pub fn zeros(shape: &[usize], params: QParams) -> Self {
        QTensor {
            data: alloc::vec![0; shape.iter().product()],
            shape: shape.to_vec(),
            params,
        }
    }

    /// Wraps existing codes, checking the range invariant.
    pub fn from_codes(data: Vec<i32>, shape: &[usize], params: QParams) -> Result<Self, QuantError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(QuantError::ShapeMismatch { expected, found: data.len() });
        }
        let max = params.max_code();
        if let Some((index, &code)) = data.iter().enumerate().find(|(_, c)| c.abs() > max || **c == i32::MIN) {
            return Err(QuantError::CodeOutOfRange { index, code: code as i64, bits: params.bits });
        }
        Ok(QTensor { data, shape: shape.to_vec(), params })
    }

    pub fn with_shape(mut self, shape: &[usize]) -> Result<Self, QuantError> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(QuantError::ShapeMismatch { expected, found: self.data.len() });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn params(&self) -> QParams {
        self.params
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dequantize(&self) -> Vec<f64> {
        dequantize(self)
    }

    /// Overwrites one element with the saturated code of `value`.
    pub fn set_value(&mut self, index: usize, value: f64) {
        self.data[index] = self.params.quantize_value(value);
    }

    /// Subtracts `delta` codes from element `index`, saturating. Returns true
    /// when the result had to be clamped.
    pub fn sub_saturating(&mut self, index: usize, delta: i128) -> bool {
        let (code, clamped) = self.params.saturate(self.data[index] as i128 - delta);
        self.data[index] = code;
        clamped
    }

    /// Re-expresses the tensor under `target` using integer arithmetic only:
    /// each code is multiplied by the fixed-point ratio of the two scales.
    pub fn requantize(&self, target: QParams) -> Result<QTensor, QuantError> {
        let m = RequantMultiplier::new(self.params.scale / target.scale)?;
        let data = self
            .data
            .iter()
            .map(|&c| target.saturate(m.apply(c as i128)).0)
            .collect();
        Ok(QTensor { data, shape: self.shape.clone(), params: target })
    }
}

/// Quantizes a flat tensor; the result is 1-D.
pub fn quantize(values: &[f64], params: QParams) -> QTensor {
    quantize_counting(values, params).0
}

/// As [`quantize`], also reporting how many elements saturated.
pub fn quantize_counting(values: &[f64], params: QParams) -> (QTensor, usize) {
    let max = params.max_code() as f64;
    let mut saturated = 0;
    let data = values
        .iter()
        .map(|&v| {
            if libm::fabs(libm::rint(v / params.scale)) > max {
                saturated += 1;
            }
            params.quantize_value(v)
        })
        .collect();
    (QTensor { data, shape: alloc::vec![values.len()], params }, saturated)
}

pub fn dequantize(t: &QTensor) -> Vec<f64> {
    t.data.iter().map(|&c| t.params.dequantize_value(c)).collect()
}

/// `effective_scale ≈ mantissa × 2^-31 × 2^-right_shift`.
///
/// `right_shift` is signed: scales of 1 or more need a left shift. A mantissa
/// of 0 marks a scale too small to matter for any `i128` accumulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RequantMultiplier {
    mantissa: i32,
    right_shift: i32,
}

const MANTISSA_BITS: i32 = 31;
const MAX_TOTAL_SHIFT: i32 = 120;
const MAX_LEFT_SHIFT: i32 = 64;

impl RequantMultiplier {
    pub fn new(effective_scale: f64) -> Result<Self, QuantError> {
        if !(effective_scale.is_finite() && effective_scale > 0.0) {
            return Err(QuantError::InvalidScale(effective_scale));
        }
        let (fraction, exponent) = libm::frexp(effective_scale);
        let mut mantissa = libm::rint(fraction * (1u64 << MANTISSA_BITS) as f64) as i64;
        let mut exponent = exponent;
        if mantissa == 1i64 << MANTISSA_BITS {
            mantissa >>= 1;
            exponent += 1;
        }
        let right_shift = -exponent;
        if right_shift + MANTISSA_BITS > MAX_TOTAL_SHIFT {
            return Ok(RequantMultiplier { mantissa: 0, right_shift: 0 });
        }
        if -right_shift > MAX_LEFT_SHIFT {
            return Err(QuantError::InvalidScale(effective_scale));
        }
        Ok(RequantMultiplier { mantissa: mantissa as i32, right_shift })
    }

    pub fn mantissa(&self) -> i32 {
        self.mantissa
    }

    pub fn right_shift(&self) -> i32 {
        self.right_shift
    }

    /// The scale this multiplier actually applies.
    pub fn effective_scale(&self) -> f64 {
        self.mantissa as f64 * libm::exp2(-(MANTISSA_BITS + self.right_shift) as f64)
    }

    /// `round_half_even(acc × effective_scale)`, saturating at the `i128` bounds.
    pub fn apply(&self, acc: i128) -> i128 {
        let product = acc.saturating_mul(self.mantissa as i128);
        let total = MANTISSA_BITS + self.right_shift;
        if total >= 0 {
            round_shift_half_even(product, total as u32)
        } else {
            product.saturating_mul(1i128 << (-total) as u32)
        }
    }
}

/// `x / 2^shift` rounded half to even.
fn round_shift_half_even(x: i128, shift: u32) -> i128 {
    if shift == 0 {
        return x;
    }
    if shift >= 127 {
        return 0;
    }
    let floor = x >> shift;
    let remainder = x - (floor << shift);
    let half = 1i128 << (shift - 1);
    if remainder > half || (remainder == half && floor & 1 == 1) {
        floor + 1
    } else {
        floor
    }
}

/// Integer bias vector stored at an accumulator scale (`scale_W × scale_a`).
///
/// Bias codes can exceed the operand bit-width, so they are kept as `i64`.
#[derive(Debug, Clone, PartialEq)]
pub struct QAccum {
    data: Vec<i64>,
    scale: f64,
}

impl QAccum {
    pub fn new(data: Vec<i64>, scale: f64) -> Result<Self, QuantError> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(QuantError::InvalidScale(scale));
        }
        Ok(QAccum { data, scale })
    }

    pub fn zeros(len: usize, scale: f64) -> Result<Self, QuantError> {
        Self::new(alloc::vec![0; len], scale)
    }

    /// Round-half-to-even quantization of real values at `scale`.
    pub fn from_real(values: &[f64], scale: f64) -> Result<Self, QuantError> {
        let data = values
            .iter()
            .map(|&v| libm::rint(v / scale).clamp(i64::MIN as f64, i64::MAX as f64) as i64)
            .collect();
        Self::new(data, scale)
    }

    pub fn data(&self) -> &[i64] {
        &self.data
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

fn check_linear_shapes(w: &QTensor, a: &QTensor, bias_len: Option<usize>) -> Result<(usize, usize), QuantError> {
    let (rows, cols) = match *w.shape() {
        [rows, cols] => (rows, cols),
        _ => return Err(QuantError::ShapeMismatch { expected: 2, found: w.shape().len() }),
    };
    if a.len() != cols {
        return Err(QuantError::ShapeMismatch { expected: cols, found: a.len() });
    }
    if let Some(len) = bias_len {
        if len != rows {
            return Err(QuantError::ShapeMismatch { expected: rows, found: len });
        }
    }
    Ok((rows, cols))
}

/// `W·a + b` in the integer domain at scale `scale_W × scale_a`.
pub fn qlinear_accumulate(w: &QTensor, a: &QTensor, bias: Option<&QAccum>) -> Result<Vec<i128>, QuantError> {
    let (rows, cols) = check_linear_shapes(w, a, bias.map(|b| b.data.len()))?;
    let acc_scale = w.params.scale * a.params.scale;
    if let Some(b) = bias {
        if (b.scale - acc_scale).abs() > 1e-9 * acc_scale {
            return Err(QuantError::ScaleMismatch { bias: b.scale, accumulator: acc_scale });
        }
    }
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &w.data[r * cols..(r + 1) * cols];
        let mut acc: i128 = row
            .iter()
            .zip(&a.data)
            .map(|(&x, &y)| x as i64 as i128 * y as i128)
            .sum();
        if let Some(b) = bias {
            acc += b.data[r] as i128;
        }
        out.push(acc);
    }
    Ok(out)
}

/// Rescales accumulators into `out` codes with saturation.
pub fn requantize_accumulators(acc: &[i128], m: RequantMultiplier, out: QParams) -> QTensor {
    let data = acc.iter().map(|&x| out.saturate(m.apply(x)).0).collect();
    QTensor { data, shape: alloc::vec![acc.len()], params: out }
}

/// Quantized linear layer:
/// `out = saturate_q(round_half_even(m × (W·a + b)))`.
///
/// The output scale is `scale_W × scale_a / m`.
pub fn qlinear_forward(
    w: &QTensor,
    a: &QTensor,
    bias: &QAccum,
    m: RequantMultiplier,
    out_bits: Bits,
) -> Result<QTensor, QuantError> {
    let acc = qlinear_accumulate(w, a, Some(bias))?;
    let out_scale = w.params.scale * a.params.scale / m.effective_scale();
    let out = QParams::new(out_scale, out_bits)?;
    Ok(requantize_accumulators(&acc, m, out))
}
