//! Recurrent forward propagation: forward-in-time sensitivity matrices for
//! the RGC and for any [`TwoPointCell`], plus gradient assembly.
//!
//! For the RGC the full sensitivity tensor `∂c⁽ᵛ⁾_i(t)/∂W[k]_pq` starts at
//! zero and only its `i = p` slice is ever written, so eight n×n matrices
//! `Γ^{ν,k}` replace the 8n³ tensor:
//!
//! ```text
//! Γ^{ν,k}(t) = μ^{ν,0}(t) ⊙ Γ^{ν,k}(t−1) + μ^{ν,1}(t) ⊙ Γ^{1−ν,k}(t−1) + δ_{k/2,ν} J^{ν,k%2}(t)
//! ```
//!
//! `⊙` scales row `i` by `μ_i`. The recursion reads only `diag(W)`, so it is
//! exact when the gates are diagonal and an approximation otherwise.

use crate::cells::{GateFactors, RgcGates, RgcState, RgcWeights, SourceTerms, TwoPointCell};
use crate::error::{shape, Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityState {
    /// `gamma[ν][k]`
    gamma: [[Matrix; 4]; 2],
    t: usize,
    flops: u64,
}

pub fn rfp_init(n: usize) -> SensitivityState {
    SensitivityState {
        gamma: std::array::from_fn(|_| std::array::from_fn(|_| Matrix::zeros(n, n))),
        t: 0,
        flops: 0,
    }
}

impl SensitivityState {
    pub fn n(&self) -> usize {
        self.gamma[0][0].rows()
    }

    /// Step index of the sensitivities currently held.
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn gamma(&self, nu: usize, k: usize) -> &Matrix {
        &self.gamma[nu][k]
    }

    /// Reals held by the sensitivity matrices: exactly 8n².
    pub fn stored_reals(&self) -> usize {
        self.gamma.iter().flatten().map(|m| m.data().len()).sum()
    }

    /// Floating-point operations performed by all updates so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    /// Clears the sensitivities back to the `t = 0` condition.
    pub fn reset(&mut self) {
        self.gamma.iter_mut().flatten().for_each(|m| m.fill(0.0));
        self.t = 0;
    }

    /// Advances from `t − 1` to `t` with factors and sources computed for
    /// step `t`.
    pub fn update(&mut self, t: usize, factors: &GateFactors, sources: &SourceTerms) -> Result<()> {
        if t != self.t + 1 {
            return Err(Error::Sequencing {
                expected: self.t + 1,
                got: t,
            });
        }
        let n = self.n();
        for v in factors.mu0.iter().chain(&factors.mu1) {
            if v.len() != n {
                return Err(shape("rfp_update", format!("factor of {} for n={n}", v.len())));
            }
        }
        for src in sources.j.iter().flatten() {
            if src.shape() != (n, n) {
                return Err(shape("rfp_update", format!("source {:?}", src.shape())));
            }
        }
        self.mix(factors);
        for k in 0..4 {
            let nu = k / 2;
            self.gamma[nu][k].axpy(1.0, &sources.j[nu][k % 2])?;
        }
        self.flops += 4 * (n * n) as u64;
        self.t = t;
        Ok(())
    }

    /// Same arithmetic as [`SensitivityState::update`] with the rank-one
    /// sources formed on the fly from the cached gates.
    pub fn propagate(
        &mut self,
        t: usize,
        prev: &RgcState,
        x: &[f64],
        w: &RgcWeights,
        gates: &RgcGates,
    ) -> Result<()> {
        if t != self.t + 1 {
            return Err(Error::Sequencing {
                expected: self.t + 1,
                got: t,
            });
        }
        let n = self.n();
        if w.n() != n || x.len() != n || prev.n() != n {
            return Err(shape("rfp propagate", format!("dimension mismatch for n={n}")));
        }
        let factors = GateFactors::from_gates(prev, x, w, gates);
        self.mix(&factors);
        let f = w.activation();
        for nu in 0..2 {
            let c = prev.branch(nu);
            let other = prev.branch(1 - nu);
            for i in 0..n {
                let r0 = f.deriv_from_output(gates.b[nu][i]) * c[i];
                let r1 = -f.deriv_from_output(gates.a[nu][i]) * x[i];
                let g0 = self.gamma[nu][2 * nu].row_mut(i);
                for (g, cq) in g0.iter_mut().zip(c) {
                    *g += r0 * cq;
                }
                let g1 = self.gamma[nu][2 * nu + 1].row_mut(i);
                for (g, oq) in g1.iter_mut().zip(other) {
                    *g += r1 * oq;
                }
            }
        }
        self.flops += 4 * (n * n) as u64;
        self.t = t;
        Ok(())
    }

    fn mix(&mut self, factors: &GateFactors) {
        let n = self.n();
        let [g0, g1] = &mut self.gamma;
        for k in 0..4 {
            let (a, b) = (g0[k].data_mut(), g1[k].data_mut());
            for i in 0..n {
                let (m00, m01) = (factors.mu0[0][i], factors.mu1[0][i]);
                let (m10, m11) = (factors.mu0[1][i], factors.mu1[1][i]);
                let row = i * n..(i + 1) * n;
                for (x0, x1) in a[row.clone()].iter_mut().zip(&mut b[row]) {
                    let (old0, old1) = (*x0, *x1);
                    *x0 = m00 * old0 + m01 * old1;
                    *x1 = m10 * old1 + m11 * old0;
                }
            }
        }
        // 4 multiplies and 2 adds per entry pair
        self.flops += 4 * 6 * (n * n) as u64;
    }
}

/// `rfp_update` as a free function returning the advanced state.
pub fn rfp_update(
    mut sens: SensitivityState,
    t: usize,
    factors: &GateFactors,
    sources: &SourceTerms,
) -> Result<SensitivityState> {
    sens.update(t, factors, sources)?;
    Ok(sens)
}

/// `grad[k]_pq = dl_ds[p] · Γ^{0,k}_pq`, where `dl_ds` is the derivative of
/// an instantaneous loss with respect to the `s` state the sensitivities
/// were computed for.
pub fn assemble_gradient(dl_ds: &[f64], sens: &SensitivityState) -> Result<[Matrix; 4]> {
    let n = sens.n();
    let mut out: [Matrix; 4] = std::array::from_fn(|_| Matrix::zeros(n, n));
    accumulate_gradient(&mut out, 1.0, dl_ds, sens)?;
    Ok(out)
}

/// `grads[k] += scale · dl_ds ⊙ Γ^{0,k}`
pub fn accumulate_gradient(
    grads: &mut [Matrix; 4],
    scale: f64,
    dl_ds: &[f64],
    sens: &SensitivityState,
) -> Result<()> {
    let n = sens.n();
    if dl_ds.len() != n || grads.iter().any(|g| g.shape() != (n, n)) {
        return Err(shape(
            "assemble_gradient",
            format!("dl_ds of {} for n={n}", dl_ds.len()),
        ));
    }
    for (k, g) in grads.iter_mut().enumerate() {
        let gamma = &sens.gamma[0][k];
        for p in 0..n {
            let d = scale * dl_ds[p];
            if d == 0.0 {
                continue;
            }
            for (o, v) in g.row_mut(p).iter_mut().zip(gamma.row(p)) {
                *o += d * v;
            }
        }
    }
    Ok(())
}

/// Collapsed sensitivity `Γ_ij = ∂c_i/∂w_(i,j)` for a two-point cell.
#[derive(Clone, Debug, PartialEq)]
pub struct GenericSensitivity {
    pub gamma: Matrix,
    pub t: usize,
}

impl GenericSensitivity {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            gamma: Matrix::zeros(rows, cols),
            t: 0,
        }
    }
}

/// `Γ_ij(t) = J_ii(t) Γ_ij(t−1) + R̂_ij(t)`
pub fn generic_two_point_update(
    sens: &mut GenericSensitivity,
    j_diag: &[f64],
    r_hat: &Matrix,
) -> Result<()> {
    let (r, c) = sens.gamma.shape();
    if j_diag.len() != r || r_hat.shape() != (r, c) {
        return Err(shape(
            "generic_two_point_update",
            format!("Γ {r}x{c}, J of {}, R̂ {:?}", j_diag.len(), r_hat.shape()),
        ));
    }
    for i in 0..r {
        let jii = j_diag[i];
        for (g, src) in sens.gamma.row_mut(i).iter_mut().zip(r_hat.row(i)) {
            *g = jii * *g + src;
        }
    }
    sens.t += 1;
    Ok(())
}

/// Runs a two-point cell forward over `inputs`, returning the state
/// trajectory `c(1..=T)` and the sensitivity after each step.
pub fn run_two_point<C: TwoPointCell>(
    cell: &C,
    init: &[f64],
    inputs: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, Vec<GenericSensitivity>)> {
    let mut state = init.to_vec();
    let mut sens = GenericSensitivity::zeros(cell.state_dim(), cell.input_dim());
    let mut states = Vec::with_capacity(inputs.len());
    let mut history = Vec::with_capacity(inputs.len());
    for x in inputs {
        let jd = cell.diag_jacobian(&state, x);
        let rh = cell.local_sensitivity(&state, x);
        generic_two_point_update(&mut sens, &jd, &rh)?;
        state = cell.step(&state, x)?;
        states.push(state.clone());
        history.push(sens.clone());
    }
    Ok((states, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{rgc_gate_factors, rgc_source_terms, rgc_step, GateActivation, TimeDecayLayer};
    use crate::numerics::Rng;

    #[test]
    fn init_is_zero() {
        for n in [1, 3] {
            let s = rfp_init(n);
            for nu in 0..2 {
                for k in 0..4 {
                    assert_eq!(s.gamma(nu, k), &Matrix::zeros(n, n));
                }
            }
            assert_eq!(s.t(), 0);
            assert_eq!(s.stored_reals(), 8 * n * n);
            let g = assemble_gradient(&vec![1.0; n], &s).unwrap();
            assert!(g.iter().all(|m| m.max_abs() == 0.0));
        }
    }

    #[test]
    fn zero_weights_route_only_the_source() {
        let n = 3;
        let w = RgcWeights::zeros(n, true);
        let u = vec![0.4, -1.2, 0.7];
        let prev = RgcState {
            s: u.clone(),
            m: vec![0.1, 0.2, 0.3],
        };
        let x = vec![1.0, -1.0, 0.5];
        let f = rgc_gate_factors(&prev, &x, &w).unwrap();
        let j = rgc_source_terms(&prev, &x, &w).unwrap();
        let mut sens = rfp_init(n);
        // give Γ(t−1) arbitrary values to check μ = 0 erases them
        sens.gamma[0][2] = Matrix::from_fn(n, n, |i, j| (i + j) as f64);
        sens.t = 4;
        let sens = rfp_update(sens, 5, &f, &j).unwrap();
        assert_eq!(sens.gamma(0, 0), &Matrix::outer(&u, &u));
        assert_eq!(sens.gamma(0, 2).max_abs(), 0.0);
    }

    #[test]
    fn zero_input_keeps_zero_sensitivity() {
        let mut rng = Rng::new(3);
        let n = 4;
        let w = RgcWeights::new(
            std::array::from_fn(|_| Matrix::diag(&rng.normal_vec(n, 1.0))),
            true,
            GateActivation::Tanh,
        )
        .unwrap();
        let mut st = RgcState::zeros(n);
        let mut sens = rfp_init(n);
        let x = vec![0.0; n];
        for t in 1..=20 {
            let (next, gates) = rgc_step(&st, &x, &w).unwrap();
            sens.propagate(t, &st, &x, &w, &gates).unwrap();
            st = next;
        }
        assert!((0..2).all(|nu| (0..4).all(|k| sens.gamma(nu, k).max_abs() == 0.0)));
    }

    #[test]
    fn fused_and_explicit_updates_agree_bitwise() {
        let mut rng = Rng::new(17);
        let n = 5;
        for diagonal in [true, false] {
            let w = RgcWeights::new(
                std::array::from_fn(|_| {
                    if diagonal {
                        Matrix::diag(&rng.normal_vec(n, 0.8))
                    } else {
                        Matrix::random_normal(n, n, 0.5, &mut rng)
                    }
                }),
                diagonal,
                GateActivation::Tanh,
            )
            .unwrap();
            let mut st = RgcState::zeros(n);
            let mut a = rfp_init(n);
            let mut b = rfp_init(n);
            for t in 1..=8 {
                let x = rng.normal_vec(n, 1.0);
                let (next, gates) = rgc_step(&st, &x, &w).unwrap();
                let f = GateFactors::from_gates(&st, &x, &w, &gates);
                let j = SourceTerms::from_gates(&st, &x, &w, &gates);
                a.update(t, &f, &j).unwrap();
                b.propagate(t, &st, &x, &w, &gates).unwrap();
                st = next;
            }
            assert_eq!(a.gamma, b.gamma);
        }
    }

    #[test]
    fn sequencing_is_enforced() {
        let n = 2;
        let w = RgcWeights::zeros(n, true);
        let st = RgcState::zeros(n);
        let f = rgc_gate_factors(&st, &[1.0, 1.0], &w).unwrap();
        let j = rgc_source_terms(&st, &[1.0, 1.0], &w).unwrap();
        let mut s = rfp_init(n);
        assert!(matches!(
            s.update(2, &f, &j),
            Err(Error::Sequencing { expected: 1, got: 2 })
        ));
        s.update(1, &f, &j).unwrap();
        assert!(s.update(1, &f, &j).is_err());
    }

    #[test]
    fn assemble_selects_rows() {
        let n = 3;
        let mut s = rfp_init(n);
        for k in 0..4 {
            s.gamma[0][k] = Matrix::from_fn(n, n, |i, j| (1 + k * 9 + i * 3 + j) as f64);
        }
        let g = assemble_gradient(&[0.0, 0.0, 0.0], &s).unwrap();
        assert!(g.iter().all(|m| m.max_abs() == 0.0));
        let g = assemble_gradient(&[0.0, 1.0, 0.0], &s).unwrap();
        for k in 0..4 {
            for p in 0..n {
                for q in 0..n {
                    let want = if p == 1 { s.gamma(0, k)[(p, q)] } else { 0.0 };
                    assert_eq!(g[k][(p, q)], want);
                }
            }
        }
        assert!(assemble_gradient(&[1.0], &s).is_err());
    }

    #[test]
    fn flop_count_is_quadratic() {
        let count = |n: usize| {
            let mut rng = Rng::new(1);
            let w = RgcWeights::new(
                std::array::from_fn(|_| Matrix::diag(&rng.normal_vec(n, 0.5))),
                true,
                GateActivation::Tanh,
            )
            .unwrap();
            let st = RgcState {
                s: rng.normal_vec(n, 1.0),
                m: rng.normal_vec(n, 1.0),
            };
            let x = rng.normal_vec(n, 1.0);
            let (_, gates) = rgc_step(&st, &x, &w).unwrap();
            let mut sens = rfp_init(n);
            sens.propagate(1, &st, &x, &w, &gates).unwrap();
            sens.flops()
        };
        assert_eq!(count(16), 4 * count(8));
        assert_eq!(count(8), 28 * 64);
    }

    #[test]
    fn generic_memoryless_and_accumulating() {
        let r_hat = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let mut s = GenericSensitivity::zeros(2, 2);
        for _ in 0..3 {
            generic_two_point_update(&mut s, &[0.0, 0.0], &r_hat).unwrap();
            assert_eq!(s.gamma, r_hat);
        }
        let mut s = GenericSensitivity::zeros(2, 2);
        for t in 1..=5 {
            generic_two_point_update(&mut s, &[1.0, 1.0], &r_hat).unwrap();
            assert_eq!(s.gamma, r_hat.scale(t as f64));
        }
        assert!(generic_two_point_update(&mut s, &[1.0], &r_hat).is_err());
    }

    #[test]
    fn time_decay_sensitivity_matches_finite_differences() {
        let mut rng = Rng::new(6);
        let cell = TimeDecayLayer {
            tau: 0.7,
            p: Matrix::random_normal(3, 4, 1.0, &mut rng),
        };
        let inputs: Vec<Vec<f64>> = (0..15).map(|_| rng.normal_vec(4, 1.0)).collect();
        let target = rng.normal_vec(3, 1.0);
        // loss on the final state: ½‖c(T) − y‖²
        let loss = |cell: &TimeDecayLayer| -> f64 {
            let (states, _) = run_two_point(cell, &[0.0; 3], &inputs).unwrap();
            let last = states.last().unwrap();
            0.5 * last.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        };
        let (states, sens) = run_two_point(&cell, &[0.0; 3], &inputs).unwrap();
        let last = states.last().unwrap();
        let dl: Vec<f64> = last.iter().zip(&target).map(|(a, b)| a - b).collect();
        let gamma = &sens.last().unwrap().gamma;
        let grad = Matrix::from_fn(3, 4, |i, j| dl[i] * gamma[(i, j)]);

        let eps = 1e-5;
        let fd = Matrix::from_fn(3, 4, |i, j| {
            let h = eps * cell.p[(i, j)].abs().max(1.0);
            let mut plus = cell.clone();
            plus.p[(i, j)] += h;
            let mut minus = cell.clone();
            minus.p[(i, j)] -= h;
            (loss(&plus) - loss(&minus)) / (2.0 * h)
        });
        let err = crate::numerics::rel_err(grad.data(), fd.data());
        assert!(err < 1e-8, "relative error {err}");
    }
}
