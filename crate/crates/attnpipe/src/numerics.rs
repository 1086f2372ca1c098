//! Fixed-point quantization and LUT-backed low-bit integer products.
//!
//! Floating point matrices are mapped onto a symmetric signed integer range
//! by a per-tensor scaling factor, and quantized score matrices are computed
//! with every scalar product read from a precomputed lookup table. Rounding
//! is half-away-from-zero, and 1-bit quantization is the sign function with
//! `sign(0) = +1`.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Bit widths accepted by every quantization entry point.
pub const SUPPORTED_BITS: [u8; 4] = [1, 2, 4, 8];

fn check_bits(bits: u8) -> Result<()> {
    if SUPPORTED_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(Error::UnsupportedBits(bits))
    }
}

/// Per-tensor quantization parameters: bit width and scaling factor.
///
/// `scale` is the max-abs value of the source tensor. For `bits >= 2` the
/// codomain is the symmetric range `[-(2^(b-1)-1), 2^(b-1)-1]`; for
/// `bits == 1` it is `{-1, +1}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantScheme {
    bits: u8,
    scale: f64,
}

impl QuantScheme {
    pub fn new(bits: u8, scale: f64) -> Result<Self> {
        check_bits(bits)?;
        if !scale.is_finite() || scale < 0.0 {
            return Err(Error::NonFinite { row: 0, col: 0 });
        }
        Ok(Self { bits, scale })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Largest magnitude in the codomain: `2^(b-1) - 1`, and 1 for 1-bit.
    pub fn level_max(&self) -> i32 {
        if self.bits == 1 {
            1
        } else {
            (1 << (self.bits - 1)) - 1
        }
    }

    /// Quantize one value under this scheme.
    pub fn quantize_value(&self, x: f64) -> i32 {
        if self.bits == 1 {
            // sign function; sign(0) = +1
            return if x < 0.0 { -1 } else { 1 };
        }
        if self.scale == 0.0 {
            return 0;
        }
        // f64::round is round-half-away-from-zero
        (f64::from(self.level_max()) / self.scale * x).round() as i32
    }

    /// Map a level back to the value domain.
    pub fn dequantize_value(&self, level: i32) -> f64 {
        if self.bits == 1 {
            return f64::from(level) * self.scale;
        }
        self.scale / f64::from(self.level_max()) * f64::from(level)
    }

    pub fn codomain_contains(&self, level: i32) -> bool {
        if self.bits == 1 {
            level == -1 || level == 1
        } else {
            level.abs() <= self.level_max()
        }
    }

    /// Half-step reconstruction error bound: `M / (2 * (2^(b-1) - 1))`.
    ///
    /// For any `|x| <= M` and `bits >= 2`,
    /// `|x - M/(2^(b-1)-1) * quantize(x)| <= M / (2 * (2^(b-1)-1))`.
    pub fn roundtrip_bound(&self) -> f64 {
        if self.bits == 1 {
            // sign quantization reconstructs to +/-M; worst case error is M
            return self.scale;
        }
        self.scale / (2.0 * f64::from(self.level_max()))
    }
}

/// An integer matrix together with the scheme that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    values: Array2<i32>,
    scheme: QuantScheme,
}

impl QuantizedMatrix {
    pub fn values(&self) -> &Array2<i32> {
        &self.values
    }

    pub fn scheme(&self) -> &QuantScheme {
        &self.scheme
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.values.nrows(), self.values.ncols())
    }
}

/// Scaling factor of a tensor: the maximum absolute entry.
pub fn compute_scale(matrix: &Array2<f64>) -> Result<f64> {
    if matrix.nrows() == 0 || matrix.ncols() == 0 {
        return Err(Error::EmptyMatrix);
    }
    let mut scale = 0.0f64;
    for ((row, col), &x) in matrix.indexed_iter() {
        if !x.is_finite() {
            return Err(Error::NonFinite { row, col });
        }
        scale = scale.max(x.abs());
    }
    Ok(scale)
}

/// Quantize a matrix at the given bit width.
///
/// The scaling factor is the matrix's own max-abs value; an all-zero matrix
/// quantizes to all zeros.
pub fn quantize(matrix: &Array2<f64>, bits: u8) -> Result<QuantizedMatrix> {
    check_bits(bits)?;
    let scale = compute_scale(matrix)?;
    let scheme = QuantScheme::new(bits, scale)?;
    let values = matrix.map(|&x| scheme.quantize_value(x));
    Ok(QuantizedMatrix { values, scheme })
}

/// Exhaustive product table over a bit width's level range.
///
/// For `bits >= 2` the table is indexed over the full signed range
/// `[-2^(b-1), 2^(b-1)-1]` (256 entries at 4 bits, 65536 at 8 bits); for
/// `bits == 1` it covers `{-1, +1}` (4 entries).
#[derive(Debug, Clone)]
pub struct ProductLut {
    bits: u8,
    min_level: i32,
    side: usize,
    table: Vec<i32>,
}

impl ProductLut {
    pub fn bits(&self) -> u8 {
        self.bits
    }

    /// Number of entries in the table.
    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Index range covered by the table, inclusive on both ends. For 1-bit
    /// tables the range is `(-1, 1)` but 0 is not a valid operand.
    pub fn level_range(&self) -> (i32, i32) {
        if self.bits == 1 {
            (-1, 1)
        } else {
            (self.min_level, self.min_level + self.side as i32 - 1)
        }
    }

    /// Table lookup; `None` when either operand is outside the indexed range.
    pub fn product(&self, a: i32, c: i32) -> Option<i32> {
        let (lo, hi) = self.level_range();
        if a < lo || a > hi || c < lo || c > hi {
            return None;
        }
        if self.bits == 1 && (a == 0 || c == 0) {
            return None;
        }
        Some(self.table[self.slot(a, c)])
    }

    fn slot(&self, a: i32, c: i32) -> usize {
        let (row, col) = if self.bits == 1 {
            // {-1, +1} -> {0, 1}
            (((a + 1) / 2) as usize, ((c + 1) / 2) as usize)
        } else {
            ((a - self.min_level) as usize, (c - self.min_level) as usize)
        };
        row * self.side + col
    }
}

/// Build the product table for a bit width.
pub fn build_product_lut(bits: u8) -> Result<ProductLut> {
    check_bits(bits)?;
    if bits == 1 {
        let mut table = vec![0; 4];
        let mut lut = ProductLut {
            bits,
            min_level: -1,
            side: 2,
            table: Vec::new(),
        };
        for &a in &[-1i32, 1] {
            for &c in &[-1i32, 1] {
                table[lut.slot(a, c)] = a * c;
            }
        }
        lut.table = table;
        return Ok(lut);
    }
    let min_level = -(1i32 << (bits - 1));
    let side = 1usize << bits;
    let mut table = vec![0; side * side];
    for (i, row) in table.chunks_mut(side).enumerate() {
        let a = min_level + i as i32;
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = a * (min_level + j as i32);
        }
    }
    Ok(ProductLut {
        bits,
        min_level,
        side,
        table,
    })
}

/// Approximate score matrix `S' = Q' * K'^T` with LUT scalar products.
///
/// Accumulation is exact 64-bit integer arithmetic, so the result is
/// bit-identical to a direct integer matrix multiply.
pub fn approx_scores(
    q: &QuantizedMatrix,
    k: &QuantizedMatrix,
    lut: &ProductLut,
) -> Result<Array2<i64>> {
    if q.values.ncols() != k.values.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "Q' is {:?}, K' is {:?}: inner dimensions differ",
            q.shape(),
            k.shape()
        )));
    }
    if q.scheme.bits() != lut.bits() || k.scheme.bits() != lut.bits() {
        return Err(Error::SchemeMismatch(format!(
            "Q' has {} bits, K' has {} bits, LUT has {} bits",
            q.scheme.bits(),
            k.scheme.bits(),
            lut.bits()
        )));
    }
    let n = q.values.nrows();
    let m = k.values.nrows();
    let mut scores = Array2::<i64>::zeros((n, m));
    for (i, q_row) in q.values.rows().into_iter().enumerate() {
        for (j, k_row) in k.values.rows().into_iter().enumerate() {
            let mut acc = 0i64;
            for (&a, &c) in q_row.iter().zip(k_row.iter()) {
                // every operand is in the scheme codomain, so the lookup
                // cannot miss
                acc += i64::from(lut.product(a, c).expect("operand outside LUT range"));
            }
            scores[[i, j]] = acc;
        }
    }
    Ok(scores)
}
