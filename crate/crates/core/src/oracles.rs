//! Independent gradient references: central finite differences, full RTRL
//! with the unreduced `2n × 4n²` sensitivity tensor, and a hand-derived
//! reverse sweep (BPTT).

use std::fmt::Write as _;
use std::time::Instant;

use crate::cells::{rgc_state_jacobian, RgcGates, RgcState, RgcWeights};
use crate::error::{Error, Result};
use crate::jepa::{
    dense_view, encode_sequence, loss_term_backward, testbed_loss, JepaConfig, JepaGrads, JepaModel, LinearTestbed,
    LowerRollout, Predictor,
};
use crate::numerics::{Matrix, Rng};
use crate::trainer::Psi;

/// Largest `n` accepted by [`full_rtrl_grad`].
pub const RTRL_MAX_N: usize = 64;

pub const FD_EPS: f64 = 1e-5;

/// Central differences of `f` at `params`, stepping each coordinate by
/// `eps · max(1, |w|)`.
pub fn finite_diff_grad<F>(f: F, params: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::Validation(format!("finite-difference step {eps} must be positive")));
    }
    let mut w = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let h = eps * params[i].abs().max(1.0);
        w[i] = params[i] + h;
        let up = f(&w)?;
        w[i] = params[i] - h;
        let down = f(&w)?;
        w[i] = params[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!("finite differences at coordinate {i}")));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Gradient-check instance: gate entries drawn `N(0, scale²)` (diagonal
/// only when `cfg.diagonal_gates`), linear predictor perturbed off identity.
pub fn random_instance(cfg: &JepaConfig, scale: f64, rng: &mut Rng) -> Result<JepaModel> {
    let mut m = JepaModel::init(cfg, rng)?;
    let n = cfg.n;
    for w in m.rgc.matrices_mut() {
        for i in 0..n {
            for j in 0..n {
                if !cfg.diagonal_gates || i == j {
                    w[(i, j)] = scale * rng.normal();
                }
            }
        }
    }
    if let Predictor::Linear { g } = &mut m.predictor {
        *g = g.add(&Matrix::random_normal(cfg.d_h, cfg.d_h, 0.3, rng))?;
    }
    Ok(m)
}

/// Central differences of the explicit testbed loss in `W_Gh` and `W_Ga`
/// with the rollout held fixed.
pub fn finite_diff_testbed_grads(
    tb: &LinearTestbed,
    h: &[Vec<Vec<f64>>],
    c_low: &[Vec<Vec<f64>>],
    eps: f64,
) -> Result<(Matrix, Matrix)> {
    let (r, c) = tb.w_gh.shape();
    let gh = finite_diff_grad(
        |w| {
            let mut t = tb.clone();
            t.w_gh = Matrix::new(r, c, w.to_vec())?;
            testbed_loss(&t, h, c_low)
        },
        tb.w_gh.data(),
        eps,
    )?;
    let (ra, ca) = tb.w_ga.shape();
    let ga = finite_diff_grad(
        |w| {
            let mut t = tb.clone();
            t.w_ga = Matrix::new(ra, ca, w.to_vec())?;
            testbed_loss(&t, h, c_low)
        },
        tb.w_ga.data(),
        eps,
    )?;
    Ok((Matrix::new(r, c, gh)?, Matrix::new(ra, ca, ga)?))
}

/// Objective `E = Σ_t ψ(t, L(t))` over one sequence. With `targets` given,
/// those vectors replace the model's own `h(t)` on the target side.
pub fn sequence_objective(
    model: &JepaModel,
    patches: &[Vec<f64>],
    psi: Psi,
    targets: Option<&[Vec<f64>]>,
) -> Result<f64> {
    let enc = encode_sequence(model, patches)?;
    let tgt = targets.unwrap_or(&enc.h);
    let count = enc.h.len().saturating_sub(1);
    let mut total = 0.0;
    for i in 0..count {
        let loss = model.step_loss(&enc.h[i], &tgt[i + 1])?.0.loss;
        total += psi.value(i + 1, loss, count);
    }
    Ok(total)
}

fn set_flat(model: &mut JepaModel, flat: &[f64]) {
    let mut off = 0;
    for m in model.trainable_blocks_mut() {
        let len = m.data().len();
        m.data_mut().copy_from_slice(&flat[off..off + len]);
        off += len;
    }
}

fn flat_params(model: &JepaModel) -> Vec<f64> {
    model
        .trainable_blocks()
        .iter()
        .flat_map(|(_, m)| m.data().iter().copied())
        .collect()
}

fn grads_from_flat(model: &JepaModel, flat: &[f64]) -> Result<JepaGrads> {
    let mut g = JepaGrads::zeros_like(model);
    let mut off = 0;
    for m in g.blocks_mut() {
        let len = m.data().len();
        m.data_mut().copy_from_slice(&flat[off..off + len]);
        off += len;
    }
    Ok(g)
}

/// Finite-difference gradient of [`sequence_objective`] for every trainable
/// entry, gates treated as dense. Under stop-gradient the targets are frozen
/// at the unperturbed rollout.
pub fn finite_diff_model_grad(model: &JepaModel, patches: &[Vec<f64>], psi: Psi, eps: f64) -> Result<JepaGrads> {
    let base = dense_view(model);
    let frozen = if model.stop_gradient {
        Some(encode_sequence(&base, patches)?.h)
    } else {
        None
    };
    let flat = flat_params(&base);
    let g = finite_diff_grad(
        |w| {
            let mut m = base.clone();
            set_flat(&mut m, w);
            sequence_objective(&m, patches, psi, frozen.as_deref())
        },
        &flat,
        eps,
    )?;
    grads_from_flat(&base, &g)
}

/// Reverse-sweep gradient of [`sequence_objective`] along with the number
/// of reals stored for the sweep.
pub fn bptt_grad(model: &JepaModel, patches: &[Vec<f64>], psi: Psi) -> Result<(JepaGrads, usize)> {
    let enc = encode_sequence(model, patches)?;
    let n = model.n();
    let steps = enc.h.len();
    let count = steps.saturating_sub(1);
    let mut grads = JepaGrads::zeros_like(model);
    // ds[t] is the direct loss adjoint on s at step t (1-based), index t−1
    let mut ds = vec![vec![0.0; n]; steps];
    for i in 0..count {
        let term = loss_term_backward(
            model,
            &enc.states[i + 1].s,
            &enc.states[i + 2].s,
            &enc.h[i],
            &enc.h[i + 1],
            |l| psi.deriv(i + 1, l, count),
            &mut grads,
        )?;
        axpy(&mut ds[i], &term.ds_context);
        if let Some(dt) = term.ds_target {
            axpy(&mut ds[i + 1], &dt);
        }
    }
    grads.gates = rgc_reverse_sweep(&model.rgc, &enc.states, &enc.gates, &enc.xs, &ds)?;
    Ok((grads, enc.stored_reals()))
}

/// Adjoint sweep of the RGC alone: `ds[t − 1]` is the direct loss adjoint on
/// `s(t)`; returns the gate gradients (dense).
pub fn rgc_reverse_sweep(
    w: &RgcWeights,
    states: &[RgcState],
    gates: &[RgcGates],
    xs: &[Vec<f64>],
    ds: &[Vec<f64>],
) -> Result<[Matrix; 4]> {
    let n = w.n();
    let f = w.activation();
    let wm = w.matrices();
    let mut out: [Matrix; 4] = std::array::from_fn(|_| Matrix::zeros(n, n));
    let mut adj = [vec![0.0; n], vec![0.0; n]];
    for t in (0..gates.len()).rev() {
        axpy(&mut adj[0], &ds[t]);
        let prev = &states[t];
        let g_t = &gates[t];
        let x = &xs[t];
        let mut next = [vec![0.0; n], vec![0.0; n]];
        for nu in 0..2 {
            let c = prev.branch(nu);
            let other = prev.branch(1 - nu);
            let g = &adj[nu];
            let dz_a: Vec<f64> = (0..n)
                .map(|i| -g[i] * x[i] * f.deriv_from_output(g_t.a[nu][i]))
                .collect();
            let dz_b: Vec<f64> = (0..n)
                .map(|i| g[i] * c[i] * f.deriv_from_output(g_t.b[nu][i]))
                .collect();
            out[2 * nu + 1].add_outer(1.0, &dz_a, other)?;
            out[2 * nu].add_outer(1.0, &dz_b, c)?;
            axpy(&mut next[1 - nu], &wm[2 * nu + 1].matvec_t(&dz_a)?);
            axpy(&mut next[nu], &wm[2 * nu].matvec_t(&dz_b)?);
            for i in 0..n {
                next[nu][i] += g[i] * g_t.b[nu][i];
            }
        }
        adj = next;
    }
    Ok(out)
}

/// One step of `γ(t) = J(t) γ(t−1) + R(t)`; `prev` is the state before the
/// step.
pub fn rtrl_step(gamma: &Matrix, prev: &RgcState, x: &[f64], w: &RgcWeights, gates: &RgcGates) -> Result<Matrix> {
    let n = w.n();
    let n2 = n * n;
    let f = w.activation();
    let jac = rgc_state_jacobian(prev, x, w, gates);
    let mut out = jac.matmul(gamma)?;
    for nu in 0..2 {
        let c = prev.branch(nu);
        let other = prev.branch(1 - nu);
        for p in 0..n {
            let row = out.row_mut(nu * n + p);
            let rb = f.deriv_from_output(gates.b[nu][p]) * c[p];
            let ra = -f.deriv_from_output(gates.a[nu][p]) * x[p];
            let (kb, ka) = (2 * nu, 2 * nu + 1);
            for q in 0..n {
                row[kb * n2 + p * n + q] += rb * c[q];
                row[ka * n2 + p * n + q] += ra * other[q];
            }
        }
    }
    Ok(out)
}

fn axpy(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Result of a full-RTRL run.
#[derive(Clone, Debug)]
pub struct RtrlOutput {
    pub grads: JepaGrads,
    /// Final `γ`, rows `[s; m]`, column `k·n² + p·n + q` for `W[k]_pq`.
    pub gamma: Matrix,
    /// The `i = p` slice `Γ^{ν,k}_pq(t)` after each step.
    pub slices: Vec<[[Matrix; 4]; 2]>,
    /// Largest `|γ_{(ν,i),(k,p,q)}|` with `i ≠ p` seen at any step.
    pub max_off_slice: f64,
    pub stored_reals: usize,
}

/// Forward-mode gradient through the unreduced recursion
/// `γ(t) = J(t) γ(t−1) + R(t)` with the dense one-step Jacobian.
pub fn full_rtrl_grad(model: &JepaModel, patches: &[Vec<f64>], psi: Psi) -> Result<RtrlOutput> {
    let n = model.n();
    if n > RTRL_MAX_N {
        return Err(Error::Capacity {
            what: "full RTRL width n",
            limit: RTRL_MAX_N,
            got: n,
        });
    }
    let model = &dense_view(model);
    let n2 = n * n;
    let mut gamma = Matrix::zeros(2 * n, 4 * n2);
    let mut grads = JepaGrads::zeros_like(model);
    let mut slices = Vec::with_capacity(patches.len());
    let mut max_off: f64 = 0.0;
    let count = patches.len().saturating_sub(1);

    let mut state = RgcState::zeros(n);
    let mut prev_h: Option<Vec<f64>> = None;
    let mut prev_s = state.s.clone();
    for (t, patch) in patches.iter().enumerate() {
        let x = model.featurize(patch)?;
        let (next, gates) = crate::cells::rgc_step(&state, &x, &model.rgc)?;
        let h = model.embed.matvec(&next.s)?;

        // loss term with context t (γ still at t) and target t+1
        let pending = if let Some(hc) = &prev_h {
            let i = t - 1;
            let term = loss_term_backward(
                model,
                &prev_s,
                &next.s,
                hc,
                &h,
                |l| psi.deriv(i + 1, l, count),
                &mut grads,
            )?;
            add_gamma_grad(&mut grads, &gamma, &term.ds_context, n);
            term.ds_target
        } else {
            None
        };

        gamma = rtrl_step(&gamma, &state, &x, &model.rgc, &gates)?;

        let mut slice: [[Matrix; 4]; 2] =
            std::array::from_fn(|_| std::array::from_fn(|_| Matrix::zeros(n, n)));
        for nu in 0..2 {
            for i in 0..n {
                let row = gamma.row(nu * n + i);
                for k in 0..4 {
                    for p in 0..n {
                        for q in 0..n {
                            let v = row[k * n2 + p * n + q];
                            if p == i {
                                slice[nu][k][(p, q)] = v;
                            } else {
                                max_off = max_off.max(v.abs());
                            }
                        }
                    }
                }
            }
        }
        slices.push(slice);

        if let Some(dt) = pending {
            add_gamma_grad(&mut grads, &gamma, &dt, n);
        }
        prev_s = next.s.clone();
        prev_h = Some(h);
        state = next;
    }
    Ok(RtrlOutput {
        grads,
        stored_reals: gamma.data().len(),
        gamma,
        slices,
        max_off_slice: max_off,
    })
}

/// `grads.gates[k]_pq += Σ_i ds_i γ_{(0,i),(k,p,q)}`
fn add_gamma_grad(grads: &mut JepaGrads, gamma: &Matrix, ds: &[f64], n: usize) {
    let n2 = n * n;
    for (i, &d) in ds.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let row = gamma.row(i);
        for k in 0..4 {
            let g = grads.gates[k].data_mut();
            for (o, v) in g.iter_mut().zip(&row[k * n2..(k + 1) * n2]) {
                *o += d * v;
            }
        }
    }
}

/// Reverse sweep for the testbed's top time-decay layer under
/// stop-gradient; mirror of [`crate::jepa::testbed_top_grad`].
pub fn bptt_testbed_top_grad(tb: &LinearTestbed, lower: &LowerRollout, h: &[Vec<Vec<f64>>]) -> Result<Matrix> {
    let (p, tau) = tb.top();
    let k = tb.w_ga.matmul(&tb.w_a)?;
    let pairs: usize = h.iter().map(|s| s.len().saturating_sub(1)).sum();
    let scale = tb.lambda1 / pairs.max(1) as f64;
    let mut grad = Matrix::zeros(p.rows(), p.cols());
    for ((hs, us), cs) in h.iter().zip(&lower.top_input).zip(&lower.c_low) {
        let steps = hs.len();
        let mut direct = vec![vec![0.0; p.rows()]; steps];
        for t in 0..steps.saturating_sub(1) {
            let pred = tb.w_gh.matvec(&hs[t])?;
            let act = k.matvec(&cs[t])?;
            let err: Vec<f64> = hs[t + 1]
                .iter()
                .zip(pred.iter().zip(&act))
                .map(|(a, (b, c))| a - b - c)
                .collect();
            direct[t] = tb.w_gh.matvec_t(&err)?.iter().map(|v| -scale * v).collect();
        }
        let mut adj = vec![0.0; p.rows()];
        for t in (0..steps).rev() {
            adj = adj.iter().zip(&direct[t]).map(|(a, d)| tau * a + d).collect();
            grad.add_outer(1.0, &adj, &us[t])?;
        }
    }
    Ok(grad)
}

/// One row of a [`GradientReport`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method_a: String,
    pub method_b: String,
    pub block: String,
    pub rel_err_max: f64,
    pub rel_err_mean: f64,
    pub n: usize,
    pub t: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodCost {
    pub method: String,
    pub wall_ms: f64,
    pub memory_reals: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientReport {
    pub rows: Vec<ReportRow>,
    pub costs: Vec<MethodCost>,
}

/// `‖a − b‖_F / max(‖a‖_F, ‖b‖_F, 1e-30)`
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    diff / a.frobenius().max(b.frobenius()).max(1e-30)
}

impl GradientReport {
    /// Appends one row per block plus an `all` row, with max and mean taken
    /// over the paired instances.
    #[allow(clippy::too_many_arguments)]
    pub fn compare(
        &mut self,
        method_a: &str,
        a: &[JepaGrads],
        method_b: &str,
        b: &[JepaGrads],
        names: &[String],
        n: usize,
        t: usize,
        seed: u64,
    ) {
        let blocks = names.len();
        let mut per_block: Vec<Vec<f64>> = vec![Vec::new(); blocks + 1];
        for (ga, gb) in a.iter().zip(b) {
            for (idx, (ma, mb)) in ga.blocks().into_iter().zip(gb.blocks()).enumerate() {
                per_block[idx].push(relative_error(ma, mb));
            }
            let fa = Matrix::column(&ga.flatten());
            let fb = Matrix::column(&gb.flatten());
            per_block[blocks].push(relative_error(&fa, &fb));
        }
        for (idx, errs) in per_block.iter().enumerate() {
            let name = names.get(idx).map_or("all", String::as_str);
            let max = errs.iter().copied().fold(0.0, f64::max);
            let mean = errs.iter().sum::<f64>() / errs.len().max(1) as f64;
            self.rows.push(ReportRow {
                method_a: method_a.into(),
                method_b: method_b.into(),
                block: name.into(),
                rel_err_max: max,
                rel_err_mean: mean,
                n,
                t,
                seed,
            });
        }
    }

    pub fn record_cost(&mut self, method: &str, started: Instant, memory_reals: usize) {
        self.costs.push(MethodCost {
            method: method.into(),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            memory_reals,
        });
    }

    /// Largest `rel_err_max` over the `all` rows of a method pair.
    pub fn worst(&self, method_a: &str, method_b: &str) -> Option<f64> {
        self.rows
            .iter()
            .filter(|r| r.method_a == method_a && r.method_b == method_b && r.block == "all")
            .map(|r| r.rel_err_max)
            .reduce(f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method_a,method_b,block,rel_err_max,rel_err_mean,n,T,seed\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:e},{:e},{},{},{}",
                r.method_a, r.method_b, r.block, r.rel_err_max, r.rel_err_mean, r.n, r.t, r.seed
            );
        }
        out
    }

    pub fn costs_csv(&self) -> String {
        let mut out = String::from("method,wall_ms,memory_reals\n");
        for c in &self.costs {
            let _ = writeln!(out, "{},{:.3},{}", c.method, c.wall_ms, c.memory_reals);
        }
        out
    }
}
