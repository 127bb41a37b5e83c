//! Bit-packed ±1 tensors.
//!
//! Bit `1` encodes `+1` and bit `0` encodes `-1`. The last dimension is the
//! row; every row starts on a fresh `u64` word and its padding bits are kept
//! at zero, so two rows of equal length can be XORed word by word without
//! masking.

use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BitError {
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("expected a {expected}-D tensor, found {found}-D")]
    Rank { expected: usize, found: usize },
    #[error("padding bits set in row {row}")]
    DirtyPadding { row: usize },
}

pub const WORD_BITS: usize = 64;

pub const fn words_for(len: usize) -> usize {
    len.div_ceil(WORD_BITS)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitTensor {
    words: Vec<u64>,
    shape: Vec<usize>,
}

impl BitTensor {
    fn row_len_of(shape: &[usize]) -> usize {
        shape.last().copied().unwrap_or(1)
    }

    fn rows_of(shape: &[usize]) -> usize {
        match shape.split_last() {
            Some((_, outer)) => outer.iter().product(),
            None => 1,
        }
    }

    /// Packs a sign pattern (`true` ↦ +1).
    pub fn from_signs<I: IntoIterator<Item = bool>>(signs: I, shape: &[usize]) -> Result<Self, BitError> {
        let row_len = Self::row_len_of(shape);
        let rows = Self::rows_of(shape);
        let wpr = words_for(row_len);
        let mut words = alloc::vec![0u64; rows * wpr];
        let mut count = 0usize;
        for (i, positive) in signs.into_iter().enumerate() {
            if i < rows * row_len && positive {
                let (r, c) = (i / row_len, i % row_len);
                words[r * wpr + c / WORD_BITS] |= 1u64 << (c % WORD_BITS);
            }
            count = i + 1;
        }
        if count != rows * row_len {
            return Err(BitError::LengthMismatch { expected: rows * row_len, found: count });
        }
        Ok(BitTensor { words, shape: shape.to_vec() })
    }

    /// Wraps raw words, rejecting tensors whose padding bits are set.
    pub fn from_words(words: Vec<u64>, shape: &[usize]) -> Result<Self, BitError> {
        let row_len = Self::row_len_of(shape);
        let rows = Self::rows_of(shape);
        let wpr = words_for(row_len);
        if words.len() != rows * wpr {
            return Err(BitError::LengthMismatch { expected: rows * wpr, found: words.len() });
        }
        let tail = row_len % WORD_BITS;
        if tail != 0 {
            let mask = !((1u64 << tail) - 1);
            for r in 0..rows {
                if words[r * wpr + wpr - 1] & mask != 0 {
                    return Err(BitError::DirtyPadding { row: r });
                }
            }
        }
        Ok(BitTensor { words, shape: shape.to_vec() })
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn row_len(&self) -> usize {
        Self::row_len_of(&self.shape)
    }

    pub fn rows(&self) -> usize {
        Self::rows_of(&self.shape)
    }

    pub fn words_per_row(&self) -> usize {
        words_for(self.row_len())
    }

    pub fn len(&self) -> usize {
        self.rows() * self.row_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row_words(&self, row: usize) -> &[u64] {
        let wpr = self.words_per_row();
        &self.words[row * wpr..(row + 1) * wpr]
    }

    /// Bit `i` in row-major logical order.
    pub fn get(&self, index: usize) -> bool {
        let row_len = self.row_len();
        let (r, c) = (index / row_len, index % row_len);
        self.words[r * self.words_per_row() + c / WORD_BITS] >> (c % WORD_BITS) & 1 == 1
    }

    pub fn signs(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    /// Expands to ±1 values.
    pub fn to_pm1(&self) -> Vec<i8> {
        self.signs().map(|b| if b { 1 } else { -1 }).collect()
    }
}

/// `sign(v)` with `sign(0) = +1`.
pub fn binarize<T: Copy + PartialOrd + Default>(values: &[T], shape: &[usize]) -> Result<BitTensor, BitError> {
    let zero = T::default();
    BitTensor::from_signs(values.iter().map(|&v| v >= zero), shape)
}

/// 1-D convenience form of [`binarize`].
pub fn binarize_vec<T: Copy + PartialOrd + Default>(values: &[T]) -> BitTensor {
    let zero = T::default();
    BitTensor::from_signs(values.iter().map(|&v| v >= zero), &[values.len()]).expect("shape matches length")
}

#[inline]
fn row_dot(u: &[u64], v: &[u64], len: usize) -> i64 {
    let differing: u32 = u.iter().zip(v).map(|(a, b)| (a ^ b).count_ones()).sum();
    len as i64 - 2 * differing as i64
}

/// Σ u_i·v_i over the ±1 expansions, as `N - 2·popcount(u XOR v)`.
pub fn bitdot(u: &BitTensor, v: &BitTensor) -> Result<i64, BitError> {
    if u.shape.len() != 1 {
        return Err(BitError::Rank { expected: 1, found: u.shape.len() });
    }
    if v.shape.len() != 1 {
        return Err(BitError::Rank { expected: 1, found: v.shape.len() });
    }
    if u.len() != v.len() {
        return Err(BitError::LengthMismatch { expected: u.len(), found: v.len() });
    }
    Ok(row_dot(&u.words, &v.words, u.len()))
}

/// Row-wise [`bitdot`] of a packed matrix against a packed vector.
pub fn bitlinear_forward(w: &BitTensor, a: &BitTensor) -> Result<Vec<i64>, BitError> {
    if w.shape.len() != 2 {
        return Err(BitError::Rank { expected: 2, found: w.shape.len() });
    }
    if a.shape.len() != 1 {
        return Err(BitError::Rank { expected: 1, found: a.shape.len() });
    }
    let n = w.row_len();
    if a.len() != n {
        return Err(BitError::LengthMismatch { expected: n, found: a.len() });
    }
    Ok((0..w.rows()).map(|r| row_dot(w.row_words(r), &a.words, n)).collect())
}

/// Clipped straight-through estimator for `sign`: the upstream gradient passes
/// where `|x| <= 1` and is zeroed elsewhere.
pub fn ste_backward(upstream_grad: &[f64], pre_activation: &[f64]) -> Result<Vec<f64>, BitError> {
    if upstream_grad.len() != pre_activation.len() {
        return Err(BitError::LengthMismatch { expected: pre_activation.len(), found: upstream_grad.len() });
    }
    Ok(upstream_grad
        .iter()
        .zip(pre_activation)
        .map(|(&g, &x)| if libm::fabs(x) <= 1.0 { g } else { 0.0 })
        .collect())
}
