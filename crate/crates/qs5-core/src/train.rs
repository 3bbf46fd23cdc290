//! Training: losses, reverse-mode differentiation through the quantized
//! model (BPTT with straight-through estimators), Adam, and the QAT /
//! PTQ-evaluation / QAFT pipelines.
//!
//! Every fake-quantization node contributes an identity Jacobian, so the
//! backward pass runs on the quantized forward values but propagates
//! gradients as if the rounding were absent. Complex parameters receive
//! gradients through their real and imaginary components, packed as
//! `dL/dRe + i dL/dIm`.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynsys;
use crate::error::{QssmError, Result};
use crate::model::{
    forward_seq, DenseCache, ForwardCache, ModelBundle, ModelMeta, QuantConfig, TaskKind,
};
use crate::qops;
use crate::ssm::{DiscreteS5, Readout};
use crate::tasks::TaskData;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QaftConfig {
    pub enabled: bool,
    pub lr_fraction: f64,
    pub epoch_fraction: f64,
}

impl Default for QaftConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            lr_fraction: 0.01,
            epoch_fraction: 0.10,
        }
    }
}

/// Checkpoint selection: best eval metric over the run (the reporting
/// convention used here) or the honest final epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointMode {
    BestEval,
    FinalEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub qcfg_name: String,
    pub lr_schedule: LrSchedule,
    pub qaft: QaftConfig,
    pub checkpoint: CheckpointMode,
    /// Global-norm gradient clip, applied to quantized runs.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            lr: 5e-3,
            weight_decay: 0.0,
            seed: 0,
            qcfg_name: "FP".to_string(),
            lr_schedule: LrSchedule::Cosine,
            qaft: QaftConfig::default(),
            checkpoint: CheckpointMode::BestEval,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(QssmError::InvalidConfig("lr must be positive".into()));
        }
        for f in [self.qaft.lr_fraction, self.qaft.epoch_fraction] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(QssmError::InvalidConfig(
                    "qaft fractions must be in (0, 1]".into(),
                ));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(QssmError::InvalidConfig(
                "epochs and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Regression or classification target for one sequence.
#[derive(Debug, Clone)]
pub enum Target {
    Values(Array2<f64>),
    Label(usize),
}

/// MSE for regression, cross-entropy over logits for classification.
pub fn compute_loss(task: TaskKind, pred: &Array2<f64>, target: &Target) -> Result<f64> {
    Ok(loss_and_grad(task, pred, target)?.0)
}

fn loss_and_grad(task: TaskKind, pred: &Array2<f64>, target: &Target) -> Result<(f64, Array2<f64>)> {
    match (task, target) {
        (TaskKind::Regression, Target::Values(t)) => {
            if pred.dim() != t.dim() {
                return Err(QssmError::ShapeMismatch(format!(
                    "loss: pred {:?} vs target {:?}",
                    pred.dim(),
                    t.dim()
                )));
            }
            let n = pred.len() as f64;
            let diff = pred - t;
            let loss = diff.iter().map(|v| v * v).sum::<f64>() / n;
            let grad = diff.mapv(|v| 2.0 * v / n);
            Ok((loss, grad))
        }
        (TaskKind::Classification, Target::Label(label)) => {
            if pred.nrows() != 1 || *label >= pred.ncols() {
                return Err(QssmError::ShapeMismatch(format!(
                    "loss: logits {:?} vs label {label}",
                    pred.dim()
                )));
            }
            let logits = pred.row(0);
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let loss = z.ln() + max - logits[*label];
            let mut grad = Array2::zeros(pred.raw_dim());
            for (j, e) in exps.iter().enumerate() {
                grad[[0, j]] = e / z - if j == *label { 1.0 } else { 0.0 };
            }
            Ok((loss, grad))
        }
        _ => Err(QssmError::ShapeMismatch(
            "task and target kinds disagree".into(),
        )),
    }
}

/// grads for a dense layer given upstream `dy` (L x out):
/// returns (dW, db, dx).
fn dense_backward(cache: &DenseCache, dy: &Array2<f64>) -> (Array2<f64>, Array1<f64>, Array2<f64>) {
    let dw = dy.t().dot(&cache.xhat);
    let db = dy.sum_axis(ndarray::Axis(0));
    let dx = dy.dot(&cache.what);
    (dw, db, dx)
}

struct ScanGrads {
    abar: Array1<Complex64>,
    bbar: Array2<Complex64>,
    c: Array2<Complex64>,
    d: Array1<f64>,
    du: Array2<f64>,
}

/// BPTT through the linear recurrence using the quantized operators and
/// the stored (quantized) state trajectory.
fn scan_backward(
    dq: &DiscreteS5,
    states: &[Array1<Complex64>],
    u: &Array2<f64>,
    dy: &Array2<f64>,
    readout: Readout,
) -> ScanGrads {
    let l = u.nrows();
    let p = dq.abar.len();
    let h = dq.d.len();
    let mut g = Array1::from_elem(p, Complex64::new(0.0, 0.0));
    let mut out = ScanGrads {
        abar: Array1::from_elem(p, Complex64::new(0.0, 0.0)),
        bbar: Array2::from_elem((p, h), Complex64::new(0.0, 0.0)),
        c: Array2::from_elem((h, p), Complex64::new(0.0, 0.0)),
        d: Array1::zeros(h),
        du: Array2::zeros((l, h)),
    };
    for k in (0..l).rev() {
        let x_k = &states[k + 1];
        let x_km1 = &states[k];
        let dy_k = dy.row(k);
        let u_k = u.row(k);

        if readout == Readout::Current {
            // y_k reads x_k
            for pi in 0..p {
                let mut acc = Complex64::new(0.0, 0.0);
                for hj in 0..h {
                    acc += dq.c[[hj, pi]].conj() * dy_k[hj];
                }
                g[pi] += acc;
            }
            for hj in 0..h {
                for pi in 0..p {
                    out.c[[hj, pi]] += dy_k[hj] * x_k[pi].conj();
                }
                out.d[hj] += dy_k[hj] * u_k[hj];
                out.du[[k, hj]] += dy_k[hj] * dq.d[hj];
            }
        }
        // recurrence x_k = Abar x_{k-1} + Bbar u_k
        for pi in 0..p {
            out.abar[pi] += g[pi] * x_km1[pi].conj();
            for hj in 0..h {
                out.bbar[[pi, hj]] += g[pi] * u_k[hj];
            }
        }
        for hj in 0..h {
            let mut acc = 0.0;
            for pi in 0..p {
                acc += (g[pi].conj() * dq.bbar[[pi, hj]]).re;
            }
            out.du[[k, hj]] += acc;
        }
        for pi in 0..p {
            g[pi] = dq.abar[pi].conj() * g[pi];
        }
        if readout == Readout::Previous {
            // y_k reads x_{k-1}
            for pi in 0..p {
                let mut acc = Complex64::new(0.0, 0.0);
                for hj in 0..h {
                    acc += dq.c[[hj, pi]].conj() * dy_k[hj];
                }
                g[pi] += acc;
            }
            for hj in 0..h {
                for pi in 0..p {
                    out.c[[hj, pi]] += dy_k[hj] * x_km1[pi].conj();
                }
                out.d[hj] += dy_k[hj] * u_k[hj];
                out.du[[k, hj]] += dy_k[hj] * dq.d[hj];
            }
        }
    }
    out
}

/// Reverse-mode gradients for one sequence. `dout` is the loss gradient
/// with respect to the model output.
pub fn backward_seq(
    m: &ModelBundle,
    dout: &Array2<f64>,
    cache: &ForwardCache,
) -> Result<ModelBundle> {
    let mut grad = m.zeros_like();
    let l = cache.enc_out.nrows();

    // decoder
    let mut dh: Array2<f64> = match m.meta.task {
        TaskKind::Regression => {
            let (dw, db, dx) = dense_backward(&cache.decoder, dout);
            grad.decoder.w += &dw;
            grad.decoder.b += &db;
            dx
        }
        TaskKind::Classification => {
            let (dw, db, dx) = dense_backward(&cache.decoder, dout);
            grad.decoder.w += &dw;
            grad.decoder.b += &db;
            // mean pooling: spread over time
            let mut dh = Array2::zeros((l, m.meta.h));
            for t in 0..l {
                for j in 0..m.meta.h {
                    dh[[t, j]] = dx[[0, j]] / l as f64;
                }
            }
            dh
        }
    };

    for (bi, bc) in cache.blocks.iter().enumerate().rev() {
        let blk = &m.blocks[bi];
        let gblk = &mut grad.blocks[bi];

        // residual: out = input + gated (STE through the final fake-quant)
        let d_gated = dh.clone();
        let mut d_input = dh;

        // gate: gated = act ⊙ hard_sigmoid(pre)
        let d_act_direct = &d_gated * &bc.gate_sig;
        let d_sig = &d_gated * &bc.act_out;
        let d_pre = ndarray::Zip::from(&d_sig)
            .and(&bc.gate_pre)
            .map_collect(|&ds, &pre| ds * qops::hard_sigmoid_grad_scalar(pre));
        let (dw, db, dx_gate) = dense_backward(&bc.gate, &d_pre);
        gblk.gate.w += &dw;
        gblk.gate.b += &db;
        let d_act = &d_act_direct + &dx_gate;

        // qGELU (straight-through on the requantization, reference slope)
        let d_scan_y = ndarray::Zip::from(&d_act)
            .and(&bc.scan.y)
            .map_collect(|&da, &y| da * qops::qgelu_ref_grad_scalar(y));

        // scan BPTT on the quantized operators
        let sg = scan_backward(&bc.disc_q, &bc.scan.states, &bc.ln_out, &d_scan_y, m.meta.readout);
        gblk.s5.c += &sg.c;
        gblk.s5.d += &sg.d;

        // chain through the ZOH discretization (on the unquantized values;
        // the fake-quant of Abar/Bbar is identity to the gradient)
        let delta = blk.s5.delta();
        for pi in 0..m.meta.p {
            let lam = blk.s5.lambda[pi];
            let abar = bc.disc.abar[pi];
            let dt = delta[pi];
            let phi = (abar - 1.0) / lam;
            let mut g_phi = Complex64::new(0.0, 0.0);
            for hj in 0..m.meta.h {
                let gb = sg.bbar[[pi, hj]];
                g_phi += blk.s5.b[[pi, hj]].conj() * gb;
                gblk.s5.b[[pi, hj]] += phi.conj() * gb;
            }
            let dphi_dlam = (dt * abar * lam - (abar - 1.0)) / (lam * lam);
            gblk.s5.lambda[pi] +=
                (dt * abar).conj() * sg.abar[pi] + dphi_dlam.conj() * g_phi;
            let d_delta = (sg.abar[pi].conj() * lam * abar).re + (g_phi.conj() * abar).re;
            gblk.s5.log_delta[pi] += d_delta * dt;
        }

        // layer norm backward
        let d_ln_out = sg.du;
        let h_dim = m.meta.h as f64;
        let mut dx_norm = Array2::zeros((l, m.meta.h));
        for t in 0..l {
            let dy_row = d_ln_out.row(t);
            let normed = bc.ln.normed.row(t);
            let istd = bc.ln.inv_std[t];
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for j in 0..m.meta.h {
                let dn = dy_row[j] * bc.ln.gamma_hat[j];
                gblk.norm.gamma[j] += dy_row[j] * normed[j];
                gblk.norm.beta[j] += dy_row[j];
                m1 += dn;
                m2 += dn * normed[j];
            }
            m1 /= h_dim;
            m2 /= h_dim;
            for j in 0..m.meta.h {
                let dn = dy_row[j] * bc.ln.gamma_hat[j];
                dx_norm[[t, j]] = istd * (dn - m1 - normed[j] * m2);
            }
        }
        d_input += &dx_norm;
        dh = d_input;
    }

    // encoder
    let (dw, db, _) = dense_backward(&cache.encoder, &dh);
    grad.encoder.w += &dw;
    grad.encoder.b += &db;

    // non-finite gradients are an error, named
    let mut bad: Option<String> = None;
    grad.visit_params(|name, vals| {
        if bad.is_none() && vals.iter().any(|v| !v.is_finite()) {
            bad = Some(name.to_string());
        }
    });
    if let Some(name) = bad {
        return Err(QssmError::NonFiniteGradient(name));
    }
    Ok(grad)
}

/// Forward + loss + backward for a single (input, target) pair.
pub fn loss_and_backward(
    m: &ModelBundle,
    input: &Array2<f64>,
    target: &Target,
) -> Result<(f64, ModelBundle)> {
    let (pred, cache) = forward_seq(m, input)?;
    let (loss, dout) = loss_and_grad(m.meta.task, &pred, target)?;
    let grad = backward_seq(m, &dout, &cache)?;
    Ok((loss, grad))
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct OptState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// Standard Adam with bias correction and decoupled weight decay.
pub fn adam_step(params: &mut [f64], grads: &[f64], opt: &mut OptState, lr: f64, weight_decay: f64) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), opt.m.len());
    opt.step += 1;
    let t = opt.step as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);
    for i in 0..params.len() {
        let g = grads[i];
        opt.m[i] = ADAM_BETA1 * opt.m[i] + (1.0 - ADAM_BETA1) * g;
        opt.v[i] = ADAM_BETA2 * opt.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let mhat = opt.m[i] / bc1;
        let vhat = opt.v[i] / bc2;
        params[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        params[i] -= lr * weight_decay * params[i];
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_metric: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Selected checkpoint (per the config's checkpoint mode).
    pub model: ModelBundle,
    pub final_model: ModelBundle,
    /// Snapshot after the first epoch (for fine-tuning comparisons).
    pub epoch1_model: Option<ModelBundle>,
    pub history: Vec<EpochLog>,
    pub converged: bool,
    pub best_epoch: usize,
    pub best_metric: f64,
    /// Learning rate and epoch count actually used (for budget audits).
    pub lr_used: f64,
    pub epochs_used: usize,
}

/// True when larger metric values are better for the task.
pub fn metric_higher_is_better(task: TaskKind) -> bool {
    matches!(task, TaskKind::Classification)
}

fn metric_improves(task: TaskKind, new: f64, old: f64) -> bool {
    if metric_higher_is_better(task) {
        new > old
    } else {
        new < old
    }
}

/// Deterministic evaluation: classification accuracy or forecasting sMAPE
/// over the test split.
pub fn evaluate(m: &ModelBundle, data: &TaskData) -> Result<f64> {
    match data {
        TaskData::Classify(ds) => {
            let mut correct = 0usize;
            for (input, label) in &ds.test {
                let (logits, _) = forward_seq(m, input)?;
                let row = logits.row(0);
                let argmax = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                if argmax == *label {
                    correct += 1;
                }
            }
            Ok(correct as f64 / ds.test.len() as f64)
        }
        TaskData::Forecast(ds) => {
            let mut y = Vec::new();
            let mut yhat = Vec::new();
            for (input, target) in &ds.test {
                let (pred, _) = forward_seq(m, input)?;
                y.extend(target.iter().copied());
                yhat.extend(pred.iter().copied());
            }
            dynsys::smape_slices(&y, &yhat)
        }
    }
}

fn train_examples(data: &TaskData) -> usize {
    match data {
        TaskData::Forecast(ds) => ds.train.len(),
        TaskData::Classify(ds) => ds.train.len(),
    }
}

fn example_target(data: &TaskData, i: usize) -> (&Array2<f64>, Target) {
    match data {
        TaskData::Forecast(ds) => (&ds.train[i].0, Target::Values(ds.train[i].1.clone())),
        TaskData::Classify(ds) => (&ds.train[i].0, Target::Label(ds.train[i].1)),
    }
}

fn scheduled_lr(base: f64, schedule: LrSchedule, epoch: usize, epochs: usize) -> f64 {
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::Cosine => {
            base * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())
        }
    }
}

/// Core training loop shared by QAT and QAFT.
fn train_loop(
    mut model: ModelBundle,
    cfg: &TrainConfig,
    data: &TaskData,
    epochs: usize,
    base_lr: f64,
) -> Result<TrainResult> {
    cfg.validate()?;
    let n = train_examples(data);
    if n == 0 {
        return Err(QssmError::InvalidConfig("empty training set".into()));
    }
    let mut params = model.pack_params();
    let mut opt = OptState::new(params.len());
    let mut history = Vec::with_capacity(epochs);
    let mut best_metric = if metric_higher_is_better(model.meta.task) {
        f64::NEG_INFINITY
    } else {
        f64::INFINITY
    };
    let mut best_epoch = 0;
    let mut best_model = model.clone();
    let mut epoch1_model = None;
    let mut initial_loss = None;
    let mut over_budget_epochs = 0usize;
    let mut diverged = false;
    let start = std::time::Instant::now();

    for epoch in 0..epochs {
        let lr = scheduled_lr(base_lr, cfg.lr_schedule, epoch, epochs);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut grad_acc = vec![0.0; params.len()];
            let mut batch_loss = 0.0;
            for &i in chunk {
                let (input, target) = example_target(data, i);
                let (loss, grad) = loss_and_backward(&model, input, &target)?;
                batch_loss += loss;
                let gflat = grad.pack_params();
                for (a, g) in grad_acc.iter_mut().zip(gflat.iter()) {
                    *a += g / chunk.len() as f64;
                }
            }
            batch_loss /= chunk.len() as f64;
            if !batch_loss.is_finite() {
                return Err(QssmError::Diverged {
                    epoch,
                    reason: "non-finite training loss".into(),
                });
            }
            // clip uniformly: quantized runs need it to survive rounding
            // noise, and an unclipped full-precision baseline would differ
            // by more than just the quantizer
            let norm: f64 = grad_acc.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > cfg.clip_norm {
                let s = cfg.clip_norm / norm;
                grad_acc.iter_mut().for_each(|g| *g *= s);
            }
            adam_step(&mut params, &grad_acc, &mut opt, lr, cfg.weight_decay);
            model.set_params(&params);
            epoch_loss += batch_loss;
            batches += 1;
        }
        epoch_loss /= batches as f64;
        if initial_loss.is_none() {
            initial_loss = Some(epoch_loss);
        }
        if epoch_loss > 1e3 * initial_loss.unwrap() {
            over_budget_epochs += 1;
            if over_budget_epochs >= 3 {
                diverged = true;
            }
        } else {
            over_budget_epochs = 0;
        }

        let metric = evaluate(&model, data)?;
        history.push(EpochLog {
            epoch,
            train_loss: epoch_loss,
            eval_metric: metric,
            wall_secs: start.elapsed().as_secs_f64(),
        });
        if metric_improves(model.meta.task, metric, best_metric) {
            best_metric = metric;
            best_epoch = epoch;
            best_model = model.clone();
        }
        if epoch == 0 {
            epoch1_model = Some(model.clone());
        }
        if diverged {
            break;
        }
    }

    // a 1-bit component quantizes everything it touches to zero; such a
    // run carries no information through that component and is flagged
    let degenerate = model.qcfg.has_degenerate_component();
    let converged = !diverged && !degenerate;
    let selected = match cfg.checkpoint {
        CheckpointMode::BestEval => best_model,
        CheckpointMode::FinalEpoch => model.clone(),
    };
    Ok(TrainResult {
        model: selected,
        final_model: model,
        epoch1_model,
        history,
        converged,
        best_epoch,
        best_metric,
        lr_used: base_lr,
        epochs_used: epochs,
    })
}

/// Quantization-aware training from scratch.
pub fn train_qat(meta: ModelMeta, cfg: &TrainConfig, data: &TaskData) -> Result<TrainResult> {
    let qcfg = QuantConfig::parse(&cfg.qcfg_name)?;
    let model = ModelBundle::new(meta, qcfg);
    train_loop(model, cfg, data, cfg.epochs, cfg.lr)
}

/// Continue training an existing model (same quant config and budget).
pub fn train_from(model: ModelBundle, cfg: &TrainConfig, data: &TaskData) -> Result<TrainResult> {
    train_loop(model, cfg, data, cfg.epochs, cfg.lr)
}

/// Quantization-aware fine-tuning: resume from a full-precision model at
/// 1% of the learning rate for 10% of the epochs (configurable fractions).
pub fn finetune_qaft(base: &ModelBundle, cfg: &TrainConfig, data: &TaskData) -> Result<TrainResult> {
    let qcfg = QuantConfig::parse(&cfg.qcfg_name)?;
    let mut model = base.clone();
    model.qcfg = qcfg;
    let epochs = (cfg.qaft.epoch_fraction * cfg.epochs as f64).ceil() as usize;
    let lr = cfg.lr * cfg.qaft.lr_fraction;
    train_loop(model, cfg, data, epochs.max(1), lr)
}
