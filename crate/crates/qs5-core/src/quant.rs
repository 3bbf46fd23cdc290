//! Dynamic symmetric per-tensor quantization.
//!
//! A tensor `x` is mapped to integers by `round(s_x * x)` with
//! `s_x = (2^(n-1) - 1) / max|x|`, so the representable range is the
//! symmetric `[-(2^(n-1)-1), 2^(n-1)-1]` and zero is always exact.
//! Rounding is half-away-from-zero, which keeps the map odd.
//!
//! Integer dot products accumulate in 32-bit integers with overflow
//! checked; wraparound is never silent.

use ndarray::{Array, Array1, Array2, Dimension, Ix1, Ix2};
use num_complex::Complex64;

use crate::error::{QssmError, Result};

/// Intended use of a quantizer. Metadata only; both modes share the same
/// symmetric per-tensor scheme, weights get a static scale at quantization
/// time while activation scales are recomputed per batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    Weight,
    Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantSpec {
    pub bits: u32,
    pub mode: QuantMode,
}

impl QuantSpec {
    pub fn new(bits: u32, mode: QuantMode) -> Result<Self> {
        check_bits(bits)?;
        Ok(Self { bits, mode })
    }
}

/// Largest representable magnitude for an `n`-bit symmetric quantizer.
/// Note that for n = 1 this is 0: the symmetric scheme has no non-zero
/// levels at a single bit.
pub fn qmax(bits: u32) -> i32 {
    (1i32 << (bits - 1)) - 1
}

pub(crate) fn check_bits(bits: u32) -> Result<()> {
    if !(1..=16).contains(&bits) {
        return Err(QssmError::InvalidBits(bits));
    }
    Ok(())
}

/// Integer payload plus its per-tensor scale.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor<D: Dimension> {
    pub values: Array<i32, D>,
    pub scale: f64,
    pub bits: u32,
}

impl<D: Dimension> QTensor<D> {
    pub fn dequantize(&self) -> Array<f64, D> {
        self.values.mapv(|v| v as f64 / self.scale)
    }
}

/// Complex payload with one scale shared by the real and imaginary parts,
/// preserving per-tensor semantics for complex-valued parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QComplexTensor<D: Dimension> {
    pub re: QTensor<D>,
    pub im: QTensor<D>,
}

impl<D: Dimension> QComplexTensor<D> {
    pub fn shared_scale(&self) -> f64 {
        self.re.scale
    }

    pub fn dequantize(&self) -> Array<Complex64, D> {
        let re = self.re.dequantize();
        let im = self.im.dequantize();
        let mut out = Array::from_elem(re.raw_dim(), Complex64::new(0.0, 0.0));
        ndarray::Zip::from(&mut out)
            .and(&re)
            .and(&im)
            .for_each(|o, &r, &i| *o = Complex64::new(r, i));
        out
    }
}

/// `s_x = (2^(n-1) - 1) / max|x|`; a dead all-zero tensor gets scale 1.
pub fn compute_scale<D: Dimension>(x: &Array<f64, D>, bits: u32) -> Result<f64> {
    check_bits(bits)?;
    let mut max_abs = 0.0f64;
    for &v in x.iter() {
        if !v.is_finite() {
            return Err(QssmError::NonFiniteInput);
        }
        max_abs = max_abs.max(v.abs());
    }
    // 1-bit symmetric range is {0}: keep the scale finite so dequantize
    // maps everything to zero instead of dividing by zero
    if max_abs == 0.0 || qmax(bits) == 0 {
        return Ok(1.0);
    }
    Ok(qmax(bits) as f64 / max_abs)
}

fn round_away(v: f64) -> i32 {
    // f64::round is round-half-away-from-zero
    v.round() as i32
}

pub fn quantize<D: Dimension>(x: &Array<f64, D>, bits: u32) -> Result<QTensor<D>> {
    let scale = compute_scale(x, bits)?;
    Ok(quantize_with_scale(x, bits, scale))
}

/// Quantize with a caller-supplied scale, saturating at the symmetric range.
pub fn quantize_with_scale<D: Dimension>(x: &Array<f64, D>, bits: u32, scale: f64) -> QTensor<D> {
    let m = qmax(bits);
    let values = x.mapv(|v| round_away(scale * v).clamp(-m, m));
    QTensor {
        values,
        scale,
        bits,
    }
}

pub fn dequantize<D: Dimension>(q: &QTensor<D>) -> Array<f64, D> {
    q.dequantize()
}

/// Quantize-then-dequantize in real arithmetic. During training the
/// backward pass treats this node as the identity (straight-through
/// estimator, d round(x) / dx = 1).
pub fn fake_quant<D: Dimension>(x: &Array<f64, D>, bits: u32) -> Result<Array<f64, D>> {
    Ok(quantize(x, bits)?.dequantize())
}

/// Fake quantization at a fixed scale (saturating). Used for per-sequence
/// activation scales inside the scan.
pub fn fake_quant_with_scale<D: Dimension>(x: &Array<f64, D>, bits: u32, scale: f64) -> Array<f64, D> {
    quantize_with_scale(x, bits, scale).dequantize()
}

/// Quantize a complex tensor with a single scale taken over both the real
/// and imaginary parts.
pub fn quantize_complex<D: Dimension>(x: &Array<Complex64, D>, bits: u32) -> Result<QComplexTensor<D>> {
    check_bits(bits)?;
    let mut max_abs = 0.0f64;
    for v in x.iter() {
        if !v.re.is_finite() || !v.im.is_finite() {
            return Err(QssmError::NonFiniteInput);
        }
        max_abs = max_abs.max(v.re.abs()).max(v.im.abs());
    }
    let scale = if max_abs == 0.0 || qmax(bits) == 0 {
        1.0
    } else {
        qmax(bits) as f64 / max_abs
    };
    let m = qmax(bits);
    let re = x.mapv(|v| round_away(scale * v.re).clamp(-m, m));
    let im = x.mapv(|v| round_away(scale * v.im).clamp(-m, m));
    Ok(QComplexTensor {
        re: QTensor {
            values: re,
            scale,
            bits,
        },
        im: QTensor {
            values: im,
            scale,
            bits,
        },
    })
}

pub fn fake_quant_complex<D: Dimension>(x: &Array<Complex64, D>, bits: u32) -> Result<Array<Complex64, D>> {
    Ok(quantize_complex(x, bits)?.dequantize())
}

/// Checked i32 accumulation over integer payload slices.
pub(crate) fn accumulate_i32(a: &[i32], b: &[i32]) -> Result<i32> {
    debug_assert_eq!(a.len(), b.len());
    let mut acc: i32 = 0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let prod = (x as i64) * (y as i64);
        let sum = acc as i64 + prod;
        if sum > i32::MAX as i64 || sum < i32::MIN as i64 {
            return Err(QssmError::AccumulatorOverflow);
        }
        acc = sum as i32;
    }
    Ok(acc)
}

/// Integer dot product. The dequantized result `acc / combined_scale` is
/// exactly the dot product of the dequantized operands.
pub fn qdot(a: &QTensor<Ix1>, b: &QTensor<Ix1>) -> Result<(i32, f64)> {
    if a.values.len() != b.values.len() {
        return Err(QssmError::ShapeMismatch(format!(
            "qdot: {} vs {}",
            a.values.len(),
            b.values.len()
        )));
    }
    let acc = accumulate_i32(
        a.values.as_slice().unwrap(),
        b.values.as_slice().unwrap(),
    )?;
    Ok((acc, a.scale * b.scale))
}

/// Row-wise integer matvec with 32-bit accumulators.
pub fn int_matvec(w: &QTensor<Ix2>, x: &QTensor<Ix1>) -> Result<(Array1<i32>, f64)> {
    let (rows, cols) = w.values.dim();
    if cols != x.values.len() {
        return Err(QssmError::ShapeMismatch(format!(
            "int_matvec: {}x{} vs {}",
            rows,
            cols,
            x.values.len()
        )));
    }
    let xs = x.values.as_slice().unwrap();
    let mut out = Array1::zeros(rows);
    for (r, mut o) in w.values.outer_iter().zip(out.iter_mut()) {
        *o = accumulate_i32(r.as_slice().unwrap(), xs)?;
        let _ = &mut o;
    }
    Ok((out, w.scale * x.scale))
}

/// Simulated quantized matvec: quantize both operands per tensor,
/// accumulate in i32, dequantize by the combined scale. The integer
/// inference path reuses the same kernel, so the two agree bit-exactly.
pub fn qmatvec(w: &Array2<f64>, wbits: u32, x: &Array1<f64>, xbits: u32) -> Result<Array1<f64>> {
    let wq = quantize(w, wbits)?;
    let xq = quantize(x, xbits)?;
    let (acc, cs) = int_matvec(&wq, &xq)?;
    Ok(acc.mapv(|v| v as f64 / cs))
}
