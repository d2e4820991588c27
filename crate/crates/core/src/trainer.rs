//! Training loops: offline BPTT, online forward-only RFP, and gradient
//! descent on the linear testbed. All updates are plain SGD with weight
//! decay, `W ← W − lr·(grad + η·W)`.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::covariance_spectrum;
use crate::cells::{rgc_step, RgcState};
use crate::data::SequenceDataset;
use crate::error::{Error, Result};
use crate::jepa::{
    balance_residual, encode_sequence, loss_term_backward, rollout_lower, rollout_top,
    sequence_losses, testbed_closed_form_grads, lagged_third_moment, testbed_loss, testbed_moments, testbed_top_grad,
    JepaGrads, JepaModel, LinearTestbed, LossKind, Predictor,
};
use crate::numerics::{Matrix, Rng};
use crate::oracles::bptt_grad;
use crate::rfp::{accumulate_gradient, rfp_init};

/// Per-term wrapper `ψ(t, L)` of the objective `E = Σ_t ψ(t, L(t))`, with
/// `t = 1..=count` numbering the loss terms of one sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Psi {
    /// `L / count`
    #[default]
    Mean,
    /// `L` on the last term, 0 elsewhere.
    FinalOnly,
    /// `t · L`
    TimeWeighted,
}

impl Psi {
    pub fn value(self, t: usize, loss: f64, count: usize) -> f64 {
        self.deriv(t, loss, count) * loss
    }

    /// `∂ψ/∂L`
    pub fn deriv(self, t: usize, _loss: f64, count: usize) -> f64 {
        match self {
            Psi::Mean => 1.0 / count.max(1) as f64,
            Psi::FinalOnly => {
                if t == count {
                    1.0
                } else {
                    0.0
                }
            }
            Psi::TimeWeighted => t as f64,
        }
    }
}

/// `E = Σ ψ(t, L(t))` and the chain factors `∂ψ/∂L(t)`.
pub fn aggregate_loss(per_step: &[f64], psi: Psi) -> (f64, Vec<f64>) {
    let count = per_step.len();
    let e = per_step
        .iter()
        .enumerate()
        .map(|(i, &l)| psi.value(i + 1, l, count))
        .sum();
    let d = per_step
        .iter()
        .enumerate()
        .map(|(i, &l)| psi.deriv(i + 1, l, count))
        .collect();
    (e, d)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    #[default]
    Bptt,
    Rfp,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cadence {
    PerStep,
    #[default]
    PerSequence,
}

pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Sequences per update for per-sequence cadence.
    pub batch_size: usize,
    pub cadence: Cadence,
    pub loss: LossKind,
    pub stop_gradient: bool,
    pub psi: Psi,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Bptt,
            lr: 0.01,
            weight_decay: 0.0,
            epochs: 6,
            batch_size: 1,
            cadence: Cadence::PerSequence,
            loss: LossKind::Squared,
            stop_gradient: true,
            psi: Psi::Mean,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Validation(format!("learning rate {} must be ≥ 0", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Validation("epochs and batch_size must be ≥ 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Validation("weight decay must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Epoch index 0 is the evaluation before any update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainMetrics {
    /// Mean training objective per epoch (entry 0 is the untrained value).
    pub epoch_loss: Vec<f64>,
    /// `curves[e][i]`: test loss predicting step `i + 2` from step `i + 1`.
    pub curves: Vec<Vec<f64>>,
    pub balance_residual: Vec<f64>,
    pub participation_ratio: Vec<f64>,
    pub wall_ms: Vec<f64>,
    /// Largest number of reals held for gradient computation at once.
    pub peak_state_reals: usize,
    /// True when RFP ran on dense gates.
    pub approximate: bool,
}

impl TrainMetrics {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,t,mean_loss,balance_residual,participation_ratio,wall_ms\n");
        for (e, curve) in self.curves.iter().enumerate() {
            for (i, l) in curve.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{e},{},{l:e},{:e},{:.6},{:.3}",
                    i + 2,
                    self.balance_residual[e],
                    self.participation_ratio[e],
                    self.wall_ms[e]
                );
            }
        }
        out
    }
}

/// Test-set evaluation: mean curve over sequences, `HHᵀ` participation ratio
/// and balance residual of a linear predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub curve: Vec<f64>,
    pub participation_ratio: f64,
    pub balance_residual: f64,
    pub h: Matrix,
}

pub fn evaluate(model: &JepaModel, data: &SequenceDataset) -> Result<Evaluation> {
    let seqs = data.sequences();
    let encs: Vec<_> = seqs
        .par_iter()
        .map(|s| encode_sequence(model, s))
        .collect::<Result<Vec<_>>>()?;
    let terms = data.t.saturating_sub(1);
    let mut curve = vec![0.0; terms];
    for enc in &encs {
        for (c, l) in curve.iter_mut().zip(sequence_losses(model, enc)?) {
            *c += l;
        }
    }
    curve.iter_mut().for_each(|c| *c /= encs.len().max(1) as f64);
    let cols: usize = encs.iter().map(|e| e.h.len()).sum();
    let d = model.d_h();
    let scale = 1.0 / (cols.max(1) as f64).sqrt();
    let mut h = Matrix::zeros(d, cols);
    let mut j = 0;
    for enc in &encs {
        for v in &enc.h {
            for i in 0..d {
                h[(i, j)] = v[i] * scale;
            }
            j += 1;
        }
    }
    let (pr, bal) = if cols >= 2 {
        let spec = covariance_spectrum(&h)?;
        let bal = match &model.predictor {
            Predictor::Linear { g } => balance_residual(g, &spec.hht, model.lambda1)?,
            Predictor::Mlp { .. } => f64::NAN,
        };
        (spec.participation_ratio, bal)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(Evaluation {
        curve,
        participation_ratio: pr,
        balance_residual: bal,
        h,
    })
}

/// Forward-only gradient of one sequence: RFP for the gates, spatial
/// backprop for embedding and predictor. Returns the gradient, the
/// objective, and the reals held for sensitivities.
pub fn rfp_sequence_grad(model: &JepaModel, patches: &[Vec<f64>], psi: Psi) -> Result<(JepaGrads, f64, usize)> {
    let mut grads = JepaGrads::zeros_like(model);
    let mut objective = 0.0;
    let held = run_online(model, patches, psi, &mut |term_grads, e| {
        grads.axpy(1.0, term_grads)?;
        objective += e;
        Ok(None)
    })?;
    Ok((grads, objective, held))
}

/// Online pass over one sequence. After each step the gradient of the
/// terms completed at that step is handed to `on_step`, which may return
/// replacement parameters (per-step updates).
fn run_online(
    model: &JepaModel,
    patches: &[Vec<f64>],
    psi: Psi,
    on_step: &mut dyn FnMut(&JepaGrads, f64) -> Result<Option<JepaModel>>,
) -> Result<usize> {
    let n = model.n();
    let count = patches.len().saturating_sub(1);
    let mut current = model.clone();
    let mut sens = rfp_init(n);
    let mut state = RgcState::zeros(n);
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    for (t, patch) in patches.iter().enumerate() {
        let mut step_grads = JepaGrads::zeros_like(&current);
        let x = current.featurize(patch)?;
        let (next, gates) = rgc_step(&state, &x, &current.rgc)?;
        let h = current.embed.matvec(&next.s)?;
        let mut e = 0.0;
        let pending = if let Some((s_ctx, h_ctx)) = &prev {
            let term = loss_term_backward(
                &current,
                s_ctx,
                &next.s,
                h_ctx,
                &h,
                |l| psi.deriv(t, l, count),
                &mut step_grads,
            )?;
            e = psi.value(t, term.loss, count);
            accumulate_gradient(&mut step_grads.gates, 1.0, &term.ds_context, &sens)?;
            term.ds_target
        } else {
            None
        };
        sens.propagate(t + 1, &state, &x, &current.rgc, &gates)?;
        if let Some(dt) = pending {
            accumulate_gradient(&mut step_grads.gates, 1.0, &dt, &sens)?;
        }
        if let Some(updated) = on_step(&step_grads, e)? {
            current = updated;
        }
        prev = Some((next.s.clone(), h));
        state = next;
    }
    Ok(sens.stored_reals())
}

/// `W ← W − lr·(grad + η·W)` over all trainable blocks. Off-diagonal gate
/// gradients are dropped when the model has diagonal gates.
pub fn sgd_step(model: &mut JepaModel, grads: &JepaGrads, lr: f64, eta: f64) -> Result<()> {
    let mut g = grads.clone();
    if model.rgc.diagonal_gates() {
        g.mask_offdiagonal_gates();
    }
    for (w, gw) in model.trainable_blocks_mut().into_iter().zip(g.blocks()) {
        if eta != 0.0 {
            w.scale_in_place(1.0 - lr * eta);
        }
        w.axpy(-lr, gw)?;
    }
    Ok(())
}

fn check_divergence(epoch: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
        return Err(Error::Divergence { epoch, loss });
    }
    Ok(())
}

/// Offline training: each batch is a forward pass storing the trajectory
/// and a reverse adjoint sweep per sequence.
pub fn train_bptt(
    model: &JepaModel,
    train: &SequenceDataset,
    test: &SequenceDataset,
    cfg: &TrainConfig,
) -> Result<(JepaModel, TrainMetrics)> {
    train_jepa(model, train, test, &TrainConfig { mode: TrainMode::Bptt, ..cfg.clone() })
}

/// Online training with forward sensitivities; no trajectory is stored.
pub fn train_rfp(
    model: &JepaModel,
    train: &SequenceDataset,
    test: &SequenceDataset,
    cfg: &TrainConfig,
) -> Result<(JepaModel, TrainMetrics)> {
    train_jepa(model, train, test, &TrainConfig { mode: TrainMode::Rfp, ..cfg.clone() })
}

fn train_jepa(
    model: &JepaModel,
    train: &SequenceDataset,
    test: &SequenceDataset,
    cfg: &TrainConfig,
) -> Result<(JepaModel, TrainMetrics)> {
    cfg.validate()?;
    if train.t < 2 {
        return Err(Error::Validation(format!("sequences of length {} cannot be predicted", train.t)));
    }
    let mut model = model.clone();
    model.loss = cfg.loss;
    model.stop_gradient = cfg.stop_gradient;
    model.validate()?;
    let mut metrics = TrainMetrics {
        approximate: cfg.mode == TrainMode::Rfp && !model.rgc.diagonal_gates(),
        ..TrainMetrics::default()
    };
    let started = Instant::now();
    let record = |m: &JepaModel, metrics: &mut TrainMetrics, loss: f64| -> Result<()> {
        let ev = evaluate(m, test)?;
        metrics.epoch_loss.push(loss);
        metrics.curves.push(ev.curve);
        metrics.participation_ratio.push(ev.participation_ratio);
        metrics.balance_residual.push(ev.balance_residual);
        metrics.wall_ms.push(started.elapsed().as_secs_f64() * 1e3);
        Ok(())
    };
    let seqs = train.sequences();
    let initial = seqs
        .par_iter()
        .map(|s| {
            let enc = encode_sequence(&model, s)?;
            Ok(crate::trainer::aggregate_loss(&sequence_losses(&model, &enc)?, cfg.psi).0)
        })
        .collect::<Result<Vec<f64>>>()?;
    record(&model, &mut metrics, mean(&initial))?;

    let base = Rng::new(cfg.seed);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        shuffle(&mut order, &mut base.split(epoch as u64));
        let mut losses = Vec::with_capacity(seqs.len());
        if cfg.mode == TrainMode::Rfp && cfg.cadence == Cadence::PerStep {
            for &i in &order {
                let mut total = 0.0;
                let mut working = model.clone();
                let held = run_online(&model, &seqs[i], cfg.psi, &mut |g, e| {
                    total += e;
                    sgd_step(&mut working, g, cfg.lr, cfg.weight_decay)?;
                    Ok(Some(working.clone()))
                })?;
                model = working;
                metrics.peak_state_reals = metrics.peak_state_reals.max(held);
                check_divergence(epoch, total)?;
                losses.push(total);
            }
        } else {
            for batch in order.chunks(cfg.batch_size) {
                let results = batch
                    .par_iter()
                    .map(|&i| -> Result<(JepaGrads, f64, usize)> {
                        match cfg.mode {
                            TrainMode::Bptt => {
                                let (g, held) = bptt_grad(&model, &seqs[i], cfg.psi)?;
                                let enc = encode_sequence(&model, &seqs[i])?;
                                let e = aggregate_loss(&sequence_losses(&model, &enc)?, cfg.psi).0;
                                Ok((g, e, held))
                            }
                            TrainMode::Rfp => rfp_sequence_grad(&model, &seqs[i], cfg.psi),
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut total = JepaGrads::zeros_like(&model);
                for (g, e, held) in &results {
                    total.axpy(1.0 / results.len() as f64, g)?;
                    metrics.peak_state_reals = metrics.peak_state_reals.max(*held);
                    check_divergence(epoch, *e)?;
                    losses.push(*e);
                }
                sgd_step(&mut model, &total, cfg.lr, cfg.weight_decay)?;
            }
        }
        let epoch_mean = mean(&losses);
        check_divergence(epoch, epoch_mean)?;
        record(&model, &mut metrics, epoch_mean)?;
    }
    Ok((model, metrics))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn shuffle(v: &mut [usize], rng: &mut Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.below(i + 1);
        v.swap(i, j);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TestbedTrainConfig {
    pub lr: f64,
    pub iterations: usize,
    /// Also train the embedding layer's input map.
    pub train_encoder: bool,
}

impl Default for TestbedTrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            iterations: 4000,
            train_encoder: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TestbedTrace {
    pub residual: Vec<f64>,
    pub loss: Vec<f64>,
    /// [`lagged_third_moment`] of the final embeddings.
    pub y_proxy: f64,
}

impl TestbedTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss,balance_residual\n");
        for (i, (l, r)) in self.loss.iter().zip(&self.residual).enumerate() {
            let _ = writeln!(out, "{i},{l:e},{r:e}");
        }
        out
    }
}

/// Gradient descent with weight decay `η = tb.eta` on the testbed. Trace
/// entry `i` is measured before update `i`; the last entry after the final
/// update.
pub fn train_testbed(
    tb: &LinearTestbed,
    sequences: &[Vec<Vec<f64>>],
    cfg: &TestbedTrainConfig,
) -> Result<(LinearTestbed, TestbedTrace)> {
    if !(cfg.lr > 0.0) {
        return Err(Error::Validation(format!("learning rate {} must be > 0", cfg.lr)));
    }
    let mut tb = tb.clone();
    let lower = rollout_lower(&tb, sequences)?;
    let mut trace = TestbedTrace::default();
    let eta = tb.eta;
    for it in 0..=cfg.iterations {
        let h = rollout_top(&tb, &lower)?;
        let mo = testbed_moments(&h, &lower.c_low)?;
        let loss = testbed_loss(&tb, &h, &lower.c_low)?;
        check_divergence(it, loss)?;
        trace.loss.push(loss);
        trace.residual.push(balance_residual(&tb.w_gh, &mo.r0, tb.lambda1)?);
        if it == cfg.iterations {
            trace.y_proxy = lagged_third_moment(&h);
            break;
        }
        let (dgh, dga) = testbed_closed_form_grads(&tb, &mo)?;
        let dp = if cfg.train_encoder {
            Some(testbed_top_grad(&tb, &lower, &h)?)
        } else {
            None
        };
        let decay = 1.0 - cfg.lr * eta;
        tb.w_gh.scale_in_place(decay);
        tb.w_gh.axpy(-cfg.lr, &dgh)?;
        tb.w_ga.scale_in_place(decay);
        tb.w_ga.axpy(-cfg.lr, &dga)?;
        if let Some(dp) = dp {
            let top = tb.top_mut();
            top.scale_in_place(decay);
            top.axpy(-cfg.lr, &dp)?;
        }
    }
    Ok((tb, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_latent_sequences;
    use crate::data::LatentProcessParams;
    use crate::jepa::{JepaConfig, TestbedConfig};
    use crate::numerics::rel_err;

    fn tiny_data(seed: u64, count: usize, t: usize) -> SequenceDataset {
        let mut rng = Rng::new(seed);
        let p = LatentProcessParams {
            u: Matrix::diag(&[0.9, 0.7, 0.5]),
            sigma: Matrix::identity(3).scale(0.3),
            emission: Matrix::random_normal(6, 3, 0.5, &mut rng),
        };
        gen_latent_sequences(&p, count, t, (2, 3, 1), seed).unwrap()
    }

    fn tiny_model(seed: u64) -> JepaModel {
        let cfg = JepaConfig {
            patch_dim: 6,
            n: 4,
            d_h: 3,
            ..JepaConfig::default()
        };
        let mut rng = Rng::new(seed);
        let mut m = JepaModel::init(&cfg, &mut rng).unwrap();
        for w in m.rgc.matrices_mut() {
            for i in 0..4 {
                w[(i, i)] = 0.5 * rng.normal();
            }
        }
        m
    }

    #[test]
    fn psi_examples() {
        let l = [1.0, 2.0, 3.0, 6.0];
        let (e, d) = aggregate_loss(&l, Psi::Mean);
        assert_eq!(e, 3.0);
        assert_eq!(d, vec![0.25; 4]);
        let (e, d) = aggregate_loss(&l, Psi::FinalOnly);
        assert_eq!((e, d), (6.0, vec![0.0, 0.0, 0.0, 1.0]));
        let (e, d) = aggregate_loss(&l, Psi::TimeWeighted);
        assert_eq!(e, 1.0 + 4.0 + 9.0 + 24.0);
        assert_eq!(d, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn rfp_per_sequence_equals_bptt() {
        let data = tiny_data(1, 3, 10);
        let model = tiny_model(2);
        for psi in [Psi::Mean, Psi::FinalOnly, Psi::TimeWeighted] {
            for s in data.sequences() {
                let (bp, _) = bptt_grad(&model, &s, psi).unwrap();
                let (rf, e, _) = rfp_sequence_grad(&model, &s, psi).unwrap();
                assert!(rel_err(&rf.flatten(), &bp.flatten()) < 1e-10);
                let enc = encode_sequence(&model, &s).unwrap();
                let want = aggregate_loss(&sequence_losses(&model, &enc).unwrap(), psi).0;
                assert!((e - want).abs() < 1e-12 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = tiny_data(3, 4, 8);
        let model = tiny_model(4);
        for mode in [TrainMode::Bptt, TrainMode::Rfp] {
            for cadence in [Cadence::PerSequence, Cadence::PerStep] {
                let cfg = TrainConfig {
                    mode,
                    cadence,
                    lr: 0.0,
                    epochs: 2,
                    ..TrainConfig::default()
                };
                let (m2, metrics) = train_jepa(&model, &data, &data, &cfg).unwrap();
                assert_eq!(m2, model);
                assert_eq!(metrics.curves.len(), 3);
                assert_eq!(metrics.curves[0], metrics.curves[2]);
                assert_eq!(metrics.curves[0], evaluate(&model, &data).unwrap().curve);
            }
        }
    }

    #[test]
    fn zero_rgc_epoch_zero_curve_equals_adjacent_distance() {
        let data = tiny_data(5, 2, 6);
        let cfg = JepaConfig {
            patch_dim: 6,
            n: 4,
            d_h: 3,
            ..JepaConfig::default()
        };
        let model = JepaModel::init(&cfg, &mut Rng::new(6)).unwrap();
        let ev = evaluate(&model, &data).unwrap();
        let mut want = vec![0.0; 5];
        for s in data.sequences() {
            let h: Vec<Vec<f64>> = s
                .iter()
                .map(|p| model.embed.matvec(&model.featurize(p).unwrap()).unwrap())
                .collect();
            for t in 1..6 {
                want[t - 1] += 0.25 * h[t].iter().zip(&h[t - 1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            }
        }
        assert!(rel_err(&ev.curve, &want) < 1e-12);
    }

    #[test]
    fn weight_decay_is_a_multiplicative_shrink() {
        let data = tiny_data(7, 1, 8);
        let model = tiny_model(8);
        let s = data.sequence(0);
        let (g, _) = bptt_grad(&model, &s, Psi::Mean).unwrap();
        let (lr, eta) = (0.1, 0.3);
        let mut a = model.clone();
        sgd_step(&mut a, &g, lr, eta).unwrap();
        let mut b = model.clone();
        // shrink first, then the plain step
        for w in b.trainable_blocks_mut() {
            w.scale_in_place(1.0 - lr * eta);
        }
        sgd_step(&mut b, &g, lr, 0.0).unwrap();
        for ((_, x), (_, y)) in a.trainable_blocks().iter().zip(b.trainable_blocks()) {
            assert!(x.sub(y).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn training_is_deterministic_and_thread_independent() {
        let data = tiny_data(9, 6, 8);
        let model = tiny_model(10);
        let cfg = TrainConfig {
            lr: 0.05,
            epochs: 2,
            batch_size: 3,
            seed: 4,
            ..TrainConfig::default()
        };
        let (a, _) = train_bptt(&model, &data, &data, &cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let (b, _) = pool.install(|| train_bptt(&model, &data, &data, &cfg)).unwrap();
        assert_eq!(a, b);
        let (c, _) = train_rfp(&model, &data, &data, &cfg).unwrap();
        let (d, _) = train_rfp(&model, &data, &data, &cfg).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn memory_contract() {
        let model = tiny_model(11);
        let cfg = TrainConfig {
            lr: 0.01,
            epochs: 1,
            ..TrainConfig::default()
        };
        let peak = |mode, t| {
            let d = tiny_data(12, 2, t);
            let c = TrainConfig { mode, ..cfg.clone() };
            train_jepa(&model, &d, &d, &c).unwrap().1.peak_state_reals
        };
        assert_eq!(peak(TrainMode::Rfp, 10), peak(TrainMode::Rfp, 40));
        assert_eq!(peak(TrainMode::Rfp, 10), 8 * 16);
        let (b10, b20, b40) = (peak(TrainMode::Bptt, 10), peak(TrainMode::Bptt, 20), peak(TrainMode::Bptt, 40));
        assert_eq!(b40 - b20, 2 * (b20 - b10));
    }

    #[test]
    fn divergence_is_reported() {
        let data = tiny_data(13, 2, 10);
        let mut model = tiny_model(14);
        model.predictor = Predictor::Linear {
            g: Matrix::identity(3).scale(1e5),
        };
        let cfg = TrainConfig {
            lr: 1.0,
            epochs: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(train_bptt(&model, &data, &data, &cfg), Err(Error::Divergence { .. })));
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            lr: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let data = tiny_data(1, 1, 1);
        assert!(train_bptt(&tiny_model(1), &data, &data, &TrainConfig::default()).is_err());
    }

    fn testbed_sequences(seed: u64, count: usize, t: usize) -> Vec<Vec<Vec<f64>>> {
        tiny_data(seed, count, t)
            .sequences()
            .into_iter()
            .map(|s| s.into_iter().map(|p| p.into_iter().chain([0.0, 0.0]).collect()).collect())
            .collect()
    }

    #[test]
    fn testbed_strong_decay_drives_weights_to_zero() {
        let mut rng = Rng::new(15);
        let cfg = TestbedConfig {
            eta: 500.0,
            ..TestbedConfig::default()
        };
        let tb = LinearTestbed::init(&cfg, &mut rng).unwrap();
        let seqs = testbed_sequences(16, 4, 30);
        let (out, trace) = train_testbed(
            &tb,
            &seqs,
            &TestbedTrainConfig {
                lr: 0.001,
                iterations: 40,
                train_encoder: false,
            },
        )
        .unwrap();
        assert!(out.w_gh.max_abs() < tb.w_gh.max_abs() * 1e-3);
        assert!((trace.residual.last().unwrap() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn testbed_zero_data_degenerate_residual() {
        let mut rng = Rng::new(17);
        let cfg = TestbedConfig {
            eta: 1.0,
            ..TestbedConfig::default()
        };
        let tb = LinearTestbed::init(&cfg, &mut rng).unwrap();
        let seqs = vec![vec![vec![0.0; 8]; 20]; 3];
        let (out, trace) = train_testbed(
            &tb,
            &seqs,
            &TestbedTrainConfig {
                lr: 0.5,
                iterations: 200,
                train_encoder: true,
            },
        )
        .unwrap();
        assert!(out.w_gh.max_abs() < 1e-12);
        assert_eq!(*trace.residual.last().unwrap(), 0.0);
    }
}
