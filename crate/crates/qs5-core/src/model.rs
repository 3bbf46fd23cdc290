//! Model assembly: encoder -> stacked [norm -> S5 -> qGELU -> gate ->
//! residual] blocks -> decoder, the quantization-configuration grammar,
//! and post-training quantization.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{QssmError, Result};
use crate::qops::{self, LayerNormCache};
use crate::quant;
use crate::ssm::{self, DiscreteS5, Readout, S5Params, ScanOut};

/// Per-component bit widths. `None` means full precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QuantConfig {
    /// Non-SSM weights.
    pub w_bits: Option<u32>,
    /// Non-SSM activations.
    pub a_bits: Option<u32>,
    /// Bbar, Cbar, Dbar, and Abar unless overridden.
    pub ssm_w_bits: Option<u32>,
    /// Abar override.
    pub abar_bits: Option<u32>,
    /// Hidden-state/activation override inside the SSM.
    pub ssm_a_bits: Option<u32>,
}

impl QuantConfig {
    pub fn fp() -> Self {
        Self::default()
    }

    pub fn is_fp(&self) -> bool {
        *self == Self::default()
    }

    /// Resolution order: Abar override > SSM weight override > global W.
    pub fn effective_abar_bits(&self) -> Option<u32> {
        self.abar_bits.or(self.ssm_w_bits).or(self.w_bits)
    }

    pub fn effective_ssm_w_bits(&self) -> Option<u32> {
        self.ssm_w_bits.or(self.w_bits)
    }

    pub fn effective_ssm_a_bits(&self) -> Option<u32> {
        self.ssm_a_bits.or(self.a_bits)
    }

    /// True when some component resolves to a 1-bit quantizer, whose
    /// symmetric range contains only zero.
    pub fn has_degenerate_component(&self) -> bool {
        [
            self.w_bits,
            self.a_bits,
            self.effective_abar_bits(),
            self.effective_ssm_w_bits(),
            self.effective_ssm_a_bits(),
        ]
        .iter()
        .any(|b| *b == Some(1))
    }

    /// Parse names like `FP`, `W8A8`, `W4A8SSM8`, `W2A8Abar8`, `W8A4SSMA8`.
    pub fn parse(name: &str) -> Result<Self> {
        let bad = |reason: &str| QssmError::BadQuantConfig {
            name: name.to_string(),
            reason: reason.to_string(),
        };
        if name == "FP" {
            return Ok(Self::fp());
        }
        let rest = name.strip_prefix('W').ok_or_else(|| bad("expected 'W<bits>A<bits>' or 'FP'"))?;
        let (w, rest) = take_bits(rest).ok_or_else(|| bad("missing W bit width"))?;
        let rest = rest.strip_prefix('A').ok_or_else(|| bad("expected 'A<bits>' after W"))?;
        let (a, rest) = take_bits(rest).ok_or_else(|| bad("missing A bit width"))?;
        let mut cfg = Self {
            w_bits: Some(w),
            a_bits: Some(a),
            ..Self::default()
        };
        if !rest.is_empty() {
            if let Some(r) = rest.strip_prefix("SSMA") {
                let (b, r) = take_bits(r).ok_or_else(|| bad("missing SSMA bit width"))?;
                if !r.is_empty() {
                    return Err(bad("trailing characters"));
                }
                cfg.ssm_a_bits = Some(b);
            } else if let Some(r) = rest.strip_prefix("SSM") {
                let (b, r) = take_bits(r).ok_or_else(|| bad("missing SSM bit width"))?;
                if !r.is_empty() {
                    return Err(bad("trailing characters"));
                }
                cfg.ssm_w_bits = Some(b);
            } else if let Some(r) = rest.strip_prefix("Abar") {
                let (b, r) = take_bits(r).ok_or_else(|| bad("missing Abar bit width"))?;
                if !r.is_empty() {
                    return Err(bad("trailing characters"));
                }
                cfg.abar_bits = Some(b);
            } else {
                return Err(bad("expected SSM<bits>, Abar<bits>, or SSMA<bits> suffix"));
            }
        }
        for b in [cfg.w_bits, cfg.a_bits, cfg.ssm_w_bits, cfg.abar_bits, cfg.ssm_a_bits]
            .into_iter()
            .flatten()
        {
            if !(1..=16).contains(&b) {
                return Err(bad("bit widths must be in 1..=16"));
            }
        }
        Ok(cfg)
    }

    /// Canonical name; inverse of `parse` on canonical inputs.
    pub fn render_name(&self) -> String {
        if self.is_fp() {
            return "FP".to_string();
        }
        let mut s = String::new();
        if let Some(w) = self.w_bits {
            s.push_str(&format!("W{w}"));
        }
        if let Some(a) = self.a_bits {
            s.push_str(&format!("A{a}"));
        }
        if let Some(b) = self.ssm_w_bits {
            s.push_str(&format!("SSM{b}"));
        } else if let Some(b) = self.abar_bits {
            s.push_str(&format!("Abar{b}"));
        } else if let Some(b) = self.ssm_a_bits {
            s.push_str(&format!("SSMA{b}"));
        }
        s
    }
}

fn take_bits(s: &str) -> Option<(u32, &str)> {
    let end = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    if end == 0 {
        return None;
    }
    let bits: u32 = s[..end].parse().ok()?;
    Some((bits, &s[end..]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Classification,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// out x in.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    fn init(out: usize, inp: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = 1.0 / (inp as f64).sqrt();
        Dense {
            w: Array2::from_shape_fn((out, inp), |_| rng.sample::<f64, _>(StandardNormal) * s),
            b: Array1::zeros(out),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm: Norm,
    pub s5: S5Params,
    pub gate: Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub task: TaskKind,
    pub h_in: usize,
    pub h: usize,
    pub p: usize,
    pub depth: usize,
    pub h_out: usize,
    pub seed: u64,
    pub readout: Readout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub encoder: Dense,
    pub blocks: Vec<Block>,
    pub decoder: Dense,
    pub qcfg: QuantConfig,
    pub meta: ModelMeta,
}

impl ModelBundle {
    pub fn new(meta: ModelMeta, qcfg: QuantConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(meta.seed);
        let encoder = Dense::init(meta.h, meta.h_in, &mut rng);
        let blocks = (0..meta.depth)
            .map(|i| Block {
                norm: Norm {
                    gamma: Array1::ones(meta.h),
                    beta: Array1::zeros(meta.h),
                },
                s5: ssm::init_s5(meta.p, meta.h, meta.seed.wrapping_add(1 + i as u64)),
                gate: Dense::init(meta.h, meta.h, &mut rng),
            })
            .collect();
        let decoder = Dense::init(meta.h_out, meta.h, &mut rng);
        ModelBundle {
            encoder,
            blocks,
            decoder,
            qcfg,
            meta,
        }
    }

    /// Closed-form trainable scalar count.
    pub fn param_count_formula(meta: &ModelMeta) -> usize {
        let enc = meta.h * meta.h_in + meta.h;
        let dec = meta.h_out * meta.h + meta.h_out;
        let block = 2 * meta.h + ssm::s5_param_count(meta.p, meta.h) + meta.h * meta.h + meta.h;
        enc + meta.depth * block + dec
    }

    pub fn pack_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::param_count_formula(&self.meta));
        self.visit_params(|_, v| out.extend_from_slice(v));
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.visit_params_mut(|_, v| {
            v.copy_from_slice(&flat[off..off + v.len()]);
            off += v.len();
        });
        assert_eq!(off, flat.len(), "parameter vector length mismatch");
    }

    /// A same-shaped bundle with all parameter arrays zeroed; used as a
    /// gradient accumulator.
    pub fn zeros_like(&self) -> ModelBundle {
        let mut g = self.clone();
        g.visit_params_mut(|_, v| v.iter_mut().for_each(|x| *x = 0.0));
        g
    }

    /// Enumerate parameter arrays in canonical order as f64 slices
    /// (complex arrays appear as interleaved re/im).
    pub fn visit_params<F: FnMut(&str, &[f64])>(&self, mut f: F) {
        f("encoder.w", self.encoder.w.as_slice().unwrap());
        f("encoder.b", self.encoder.b.as_slice().unwrap());
        for (i, blk) in self.blocks.iter().enumerate() {
            let p = |name: &str| format!("block{i}.{name}");
            f(&p("norm.gamma"), blk.norm.gamma.as_slice().unwrap());
            f(&p("norm.beta"), blk.norm.beta.as_slice().unwrap());
            f(&p("s5.lambda"), complex_as_f64(&blk.s5.lambda));
            f(&p("s5.b"), complex_as_f64_2(&blk.s5.b));
            f(&p("s5.c"), complex_as_f64_2(&blk.s5.c));
            f(&p("s5.d"), blk.s5.d.as_slice().unwrap());
            f(&p("s5.log_delta"), blk.s5.log_delta.as_slice().unwrap());
            f(&p("gate.w"), blk.gate.w.as_slice().unwrap());
            f(&p("gate.b"), blk.gate.b.as_slice().unwrap());
        }
        f("decoder.w", self.decoder.w.as_slice().unwrap());
        f("decoder.b", self.decoder.b.as_slice().unwrap());
    }

    pub fn visit_params_mut<F: FnMut(&str, &mut [f64])>(&mut self, mut f: F) {
        f("encoder.w", self.encoder.w.as_slice_mut().unwrap());
        f("encoder.b", self.encoder.b.as_slice_mut().unwrap());
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            let p = |name: &str| format!("block{i}.{name}");
            f(&p("norm.gamma"), blk.norm.gamma.as_slice_mut().unwrap());
            f(&p("norm.beta"), blk.norm.beta.as_slice_mut().unwrap());
            f(&p("s5.lambda"), complex_as_f64_mut(&mut blk.s5.lambda));
            f(&p("s5.b"), complex_as_f64_2_mut(&mut blk.s5.b));
            f(&p("s5.c"), complex_as_f64_2_mut(&mut blk.s5.c));
            f(&p("s5.d"), blk.s5.d.as_slice_mut().unwrap());
            f(&p("s5.log_delta"), blk.s5.log_delta.as_slice_mut().unwrap());
            f(&p("gate.w"), blk.gate.w.as_slice_mut().unwrap());
            f(&p("gate.b"), blk.gate.b.as_slice_mut().unwrap());
        }
        f("decoder.w", self.decoder.w.as_slice_mut().unwrap());
        f("decoder.b", self.decoder.b.as_slice_mut().unwrap());
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, v| n += v.len());
        n
    }
}

fn complex_as_f64(a: &Array1<Complex64>) -> &[f64] {
    let s = a.as_slice().unwrap();
    unsafe { std::slice::from_raw_parts(s.as_ptr() as *const f64, s.len() * 2) }
}

fn complex_as_f64_mut(a: &mut Array1<Complex64>) -> &mut [f64] {
    let s = a.as_slice_mut().unwrap();
    unsafe { std::slice::from_raw_parts_mut(s.as_mut_ptr() as *mut f64, s.len() * 2) }
}

fn complex_as_f64_2(a: &Array2<Complex64>) -> &[f64] {
    let s = a.as_slice().unwrap();
    unsafe { std::slice::from_raw_parts(s.as_ptr() as *const f64, s.len() * 2) }
}

fn complex_as_f64_2_mut(a: &mut Array2<Complex64>) -> &mut [f64] {
    let s = a.as_slice_mut().unwrap();
    unsafe { std::slice::from_raw_parts_mut(s.as_mut_ptr() as *mut f64, s.len() * 2) }
}

/// Dense layer forward over an `L x in` sequence with optional weight and
/// input-activation quantization. When both widths are set the matmul
/// runs on integer payloads with 32-bit accumulation.
pub fn dense_forward(
    d: &Dense,
    x: &Array2<f64>,
    wbits: Option<u32>,
    abits: Option<u32>,
) -> Result<(Array2<f64>, DenseCache)> {
    let (l, _inp) = x.dim();
    let out_dim = d.w.nrows();
    if d.w.ncols() != x.ncols() {
        return Err(QssmError::ShapeMismatch(format!(
            "dense: weight {:?} vs input {:?}",
            d.w.dim(),
            x.dim()
        )));
    }
    let mut y = Array2::zeros((l, out_dim));
    let (xhat, what) = match (wbits, abits) {
        (Some(wb), Some(ab)) => {
            let wq = quant::quantize(&d.w, wb)?;
            let xq = quant::quantize(x, ab)?;
            for t in 0..l {
                let row = crate::quant::QTensor {
                    values: xq.values.row(t).to_owned(),
                    scale: xq.scale,
                    bits: xq.bits,
                };
                let (acc, cs) = quant::int_matvec(&wq, &row)?;
                for j in 0..out_dim {
                    y[[t, j]] = acc[j] as f64 / cs + d.b[j];
                }
            }
            (xq.dequantize(), wq.dequantize())
        }
        (wb, ab) => {
            let what = match wb {
                Some(b) => quant::fake_quant(&d.w, b)?,
                None => d.w.clone(),
            };
            let xhat = match ab {
                Some(b) => quant::fake_quant(x, b)?,
                None => x.clone(),
            };
            for t in 0..l {
                for j in 0..out_dim {
                    let mut acc = d.b[j];
                    for i in 0..x.ncols() {
                        acc += what[[j, i]] * xhat[[t, i]];
                    }
                    y[[t, j]] = acc;
                }
            }
            (xhat, what)
        }
    };
    Ok((y, DenseCache { xhat, what }))
}

#[derive(Debug, Clone)]
pub struct DenseCache {
    /// Input as consumed by the matmul (post fake-quantization).
    pub xhat: Array2<f64>,
    /// Weights as consumed (post fake-quantization).
    pub what: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    pub input: Array2<f64>,
    pub ln: LayerNormCache,
    pub ln_out: Array2<f64>,
    /// Unquantized discretization, for the chain rule through ZOH.
    pub disc: DiscreteS5,
    /// Discretization as used in the scan (post fake-quantization).
    pub disc_q: DiscreteS5,
    pub scan: ScanOut,
    /// qGELU output (input to the gate).
    pub act_out: Array2<f64>,
    pub gate: DenseCache,
    pub gate_pre: Array2<f64>,
    pub gate_sig: Array2<f64>,
    pub gated: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub encoder: DenseCache,
    pub enc_out: Array2<f64>,
    pub blocks: Vec<BlockCache>,
    pub backbone_out: Array2<f64>,
    pub decoder: DenseCache,
    /// Mean-pooled features (classification only).
    pub pooled: Option<Array1<f64>>,
}

/// Quantize the discretized SSM operators per the config.
pub fn quantize_discrete(disc: &DiscreteS5, qcfg: &QuantConfig) -> Result<DiscreteS5> {
    let mut dq = disc.clone();
    if let Some(b) = qcfg.effective_abar_bits() {
        dq.abar = quant::fake_quant_complex(&disc.abar, b)?;
    }
    if let Some(b) = qcfg.effective_ssm_w_bits() {
        dq.bbar = quant::fake_quant_complex(&disc.bbar, b)?;
        dq.c = quant::fake_quant_complex(&disc.c, b)?;
        dq.d = quant::fake_quant(&disc.d, b)?;
    }
    Ok(dq)
}

/// Forward pass over one `L x H_in` sequence, keeping every intermediate
/// needed for backpropagation. Regression decodes every step; for
/// classification call `pool_and_decode` on the result.
pub fn forward_seq(m: &ModelBundle, input: &Array2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
    if input.ncols() != m.meta.h_in {
        return Err(QssmError::ShapeMismatch(format!(
            "forward: input width {} vs H_in {}",
            input.ncols(),
            m.meta.h_in
        )));
    }
    let q = &m.qcfg;
    let (enc_out, enc_cache) = dense_forward(&m.encoder, input, q.w_bits, q.a_bits)?;

    let mut h = enc_out.clone();
    let mut blocks = Vec::with_capacity(m.blocks.len());
    let x0 = Array1::from_elem(m.meta.p, Complex64::new(0.0, 0.0));
    for blk in &m.blocks {
        let block_input = h.clone();
        let (ln_out, ln_cache) =
            qops::layer_norm(&h, &blk.norm.gamma, &blk.norm.beta, q.w_bits, q.a_bits)?;
        let disc = ssm::discretize_zoh(&blk.s5)?;
        let disc_q = quantize_discrete(&disc, q)?;
        let scan = ssm::s5_scan_sequential(
            &disc_q,
            &ln_out,
            &x0,
            q.effective_ssm_a_bits(),
            m.meta.readout,
        )?;
        let act_out = match q.a_bits {
            Some(b) => qops::qgelu_sim(&scan.y, b)?,
            None => qops::qgelu_ref(&scan.y),
        };
        let (gate_pre, gate_cache) = dense_forward(&blk.gate, &act_out, q.w_bits, q.a_bits)?;
        let gate_sig = qops::hard_sigmoid(&gate_pre);
        let gated_raw = &act_out * &gate_sig;
        let gated = match q.a_bits {
            Some(b) => quant::fake_quant(&gated_raw, b)?,
            None => gated_raw,
        };
        h = &block_input + &gated;
        blocks.push(BlockCache {
            input: block_input,
            ln: ln_cache,
            ln_out,
            disc,
            disc_q,
            scan,
            act_out,
            gate: gate_cache,
            gate_pre,
            gate_sig,
            gated,
        });
    }

    let backbone_out = h.clone();
    let (output, dec_cache, pooled) = match m.meta.task {
        TaskKind::Regression => {
            let (y, c) = dense_forward(&m.decoder, &h, q.w_bits, q.a_bits)?;
            (y, c, None)
        }
        TaskKind::Classification => {
            let l = h.nrows() as f64;
            let pooled = h.sum_axis(ndarray::Axis(0)) / l;
            let pooled_mat = pooled.clone().insert_axis(ndarray::Axis(0));
            let (y, c) = dense_forward(&m.decoder, &pooled_mat, q.w_bits, q.a_bits)?;
            (y, c, Some(pooled))
        }
    };
    Ok((
        output,
        ForwardCache {
            encoder: enc_cache,
            enc_out,
            blocks,
            backbone_out,
            decoder: dec_cache,
            pooled,
        },
    ))
}

/// Batched forward: one output per input sequence.
pub fn model_forward(m: &ModelBundle, batch: &[Array2<f64>]) -> Result<Vec<Array2<f64>>> {
    batch.iter().map(|seq| Ok(forward_seq(m, seq)?.0)).collect()
}

/// Install a quantization config on a trained full-precision model.
/// Dense weights and norm parameters are snapped to their grid once;
/// activation scales stay dynamic at inference time. SSM operators are
/// quantized by the forward pass after discretization, which is already
/// static for fixed weights.
pub fn apply_ptq(m: &ModelBundle, qcfg: QuantConfig) -> Result<ModelBundle> {
    let mut out = m.clone();
    out.qcfg = qcfg;
    if let Some(b) = qcfg.w_bits {
        out.encoder.w = quant::fake_quant(&m.encoder.w, b)?;
        out.decoder.w = quant::fake_quant(&m.decoder.w, b)?;
        for blk in out.blocks.iter_mut() {
            blk.gate.w = quant::fake_quant(&blk.gate.w, b)?;
            blk.norm.gamma = quant::fake_quant(&blk.norm.gamma, b)?;
            blk.norm.beta = quant::fake_quant(&blk.norm.beta, b)?;
        }
    }
    Ok(out)
}
