//! Explicit integer inference path.
//!
//! Weights are quantized once up front; activations are quantized per
//! tensor and every matrix-vector product and the qGELU nonlinearity run
//! on integer payloads with 32-bit accumulation. Floating point is used
//! only for scale bookkeeping, the recurrence state, the hard sigmoid,
//! and residual adds — the same split the simulated quantized forward
//! uses, so the two paths agree bit for bit.

use ndarray::{Array1, Array2, Ix2};
use num_complex::Complex64;

use crate::error::{QssmError, Result};
use crate::model::{quantize_discrete, Dense, ModelBundle, TaskKind};
use crate::qops;
use crate::quant::{self, QTensor};
use crate::ssm;

/// A dense layer with its weight payload frozen to the integer grid.
struct IntDense<'a> {
    wq: QTensor<Ix2>,
    b: &'a Array1<f64>,
}

impl<'a> IntDense<'a> {
    fn new(d: &'a Dense, wbits: u32) -> Result<Self> {
        Ok(Self {
            wq: quant::quantize(&d.w, wbits)?,
            b: &d.b,
        })
    }

    /// Quantize the activations, run integer matvecs, dequantize the
    /// 32-bit accumulators and add the bias.
    fn forward(&self, x: &Array2<f64>, abits: u32) -> Result<Array2<f64>> {
        let xq = quant::quantize(x, abits)?;
        let out_dim = self.wq.values.nrows();
        let mut y = Array2::zeros((x.nrows(), out_dim));
        for t in 0..x.nrows() {
            let row = QTensor {
                values: xq.values.row(t).to_owned(),
                scale: xq.scale,
                bits: xq.bits,
            };
            let (acc, cs) = quant::int_matvec(&self.wq, &row)?;
            for j in 0..out_dim {
                y[[t, j]] = acc[j] as f64 / cs + self.b[j];
            }
        }
        Ok(y)
    }
}

/// Run inference on the integer path. Requires a config with both weight
/// and activation bit widths set.
pub fn forward_int(m: &ModelBundle, input: &Array2<f64>) -> Result<Array2<f64>> {
    let (wbits, abits) = match (m.qcfg.w_bits, m.qcfg.a_bits) {
        (Some(w), Some(a)) => (w, a),
        _ => {
            return Err(QssmError::InvalidConfig(
                "integer path needs both weight and activation bits".into(),
            ))
        }
    };
    if input.ncols() != m.meta.h_in {
        return Err(QssmError::ShapeMismatch(format!(
            "forward_int: input width {} vs H_in {}",
            input.ncols(),
            m.meta.h_in
        )));
    }

    let encoder = IntDense::new(&m.encoder, wbits)?;
    let decoder = IntDense::new(&m.decoder, wbits)?;
    let mut h = encoder.forward(input, abits)?;
    let x0 = Array1::from_elem(m.meta.p, Complex64::new(0.0, 0.0));

    for blk in &m.blocks {
        let ln_out = qops::quant_layer_norm(&h, &blk.norm.gamma, &blk.norm.beta, wbits, abits)?;
        let disc = ssm::discretize_zoh(&blk.s5)?;
        let disc_q = quantize_discrete(&disc, &m.qcfg)?;
        let scan = ssm::s5_scan_sequential(
            &disc_q,
            &ln_out,
            &x0,
            m.qcfg.effective_ssm_a_bits(),
            m.meta.readout,
        )?;
        let yq = quant::quantize(&scan.y, abits)?;
        let act = qops::qgelu(&yq)?.dequantize();
        let gate = IntDense::new(&blk.gate, wbits)?;
        let pre = gate.forward(&act, abits)?;
        let sig = qops::hard_sigmoid(&pre);
        let gated = quant::fake_quant(&(&act * &sig), abits)?;
        h = &h + &gated;
    }

    match m.meta.task {
        TaskKind::Regression => decoder.forward(&h, abits),
        TaskKind::Classification => {
            let l = h.nrows() as f64;
            let pooled = (h.sum_axis(ndarray::Axis(0)) / l).insert_axis(ndarray::Axis(0));
            decoder.forward(&pooled, abits)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_seq, ModelMeta, QuantConfig};
    use crate::ssm::Readout;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn meta(task: TaskKind) -> ModelMeta {
        ModelMeta {
            task,
            h_in: 3,
            h: 5,
            p: 4,
            depth: 2,
            h_out: 3,
            seed: 9,
            readout: Readout::Current,
        }
    }

    #[test]
    fn rejects_fp_config() {
        let m = ModelBundle::new(meta(TaskKind::Regression), QuantConfig::fp());
        let input = Array2::zeros((4, 3));
        assert!(forward_int(&m, &input).is_err());
    }

    #[test]
    fn matches_simulated_path_bit_for_bit() {
        for cfg in ["W8A8", "W4A8", "W8A8SSM4", "W8A8Abar4"] {
            let m = ModelBundle::new(meta(TaskKind::Regression), QuantConfig::parse(cfg).unwrap());
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            for _ in 0..20 {
                let input = Array2::from_shape_fn((6, 3), |_| rng.gen_range(-1.0..1.0));
                let (sim, _) = forward_seq(&m, &input).unwrap();
                let int = forward_int(&m, &input).unwrap();
                assert_eq!(sim, int, "paths disagree under {cfg}");
            }
        }
    }

    #[test]
    fn matches_simulated_path_classification() {
        let m = ModelBundle::new(
            meta(TaskKind::Classification),
            QuantConfig::parse("W8A8").unwrap(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let input = Array2::from_shape_fn((6, 3), |_| rng.gen_range(-1.0..1.0));
        let (sim, _) = forward_seq(&m, &input).unwrap();
        let int = forward_int(&m, &input).unwrap();
        assert_eq!(sim, int);
    }
}
