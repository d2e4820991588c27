//! Recurrent cells: the reciprocal gated circuit (RGC), time-decay units,
//! and the two-point-interaction cell contract used by generic forward
//! sensitivity propagation.
//!
//! RGC state is the pair `c⁽⁰⁾ = s`, `c⁽¹⁾ = m`. Gate matrices are indexed
//! `k = 0..4` for the pairs `ss, ms, mm, sm`, so branch `ν` reads its
//! persistence gate from `W[2ν]` and its input gate from `W[2ν + 1]`:
//!
//! ```text
//! a⁽ᵛ⁾ = f(W[2ν+1] · c⁽¹⁻ᵛ⁾(t−1))
//! b⁽ᵛ⁾ = f(W[2ν]   · c⁽ᵛ⁾(t−1))
//! c⁽ᵛ⁾(t) = (1 − a⁽ᵛ⁾) ⊙ x(t) + b⁽ᵛ⁾ ⊙ c⁽ᵛ⁾(t−1)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateActivation {
    #[default]
    Tanh,
    Logistic,
}

impl GateActivation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            GateActivation::Tanh => z.tanh(),
            GateActivation::Logistic => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    pub fn deriv_from_output(self, y: f64) -> f64 {
        match self {
            GateActivation::Tanh => 1.0 - y * y,
            GateActivation::Logistic => y * (1.0 - y),
        }
    }
}

/// Gate-block names in storage order.
pub const GATE_NAMES: [&str; 4] = ["ss", "ms", "mm", "sm"];

#[derive(Clone, Debug, PartialEq)]
pub struct RgcWeights {
    w: [Matrix; 4],
    diagonal_gates: bool,
    activation: GateActivation,
}

impl RgcWeights {
    /// Validates shapes and, when `diagonal_gates` is set, rejects any
    /// nonzero off-diagonal entry.
    pub fn new(w: [Matrix; 4], diagonal_gates: bool, activation: GateActivation) -> Result<Self> {
        let n = w[0].rows();
        for (k, m) in w.iter().enumerate() {
            if m.shape() != (n, n) {
                return Err(shape(
                    "RgcWeights::new",
                    format!("W[{k}] is {:?}, expected {n}x{n}", m.shape()),
                ));
            }
            if diagonal_gates && !m.is_diagonal() {
                return Err(Error::Contract(format!(
                    "diagonal_gates set but W[{k}] ({}) has off-diagonal entries",
                    GATE_NAMES[k]
                )));
            }
        }
        Ok(Self {
            w,
            diagonal_gates,
            activation,
        })
    }

    pub fn zeros(n: usize, diagonal_gates: bool) -> Self {
        Self {
            w: std::array::from_fn(|_| Matrix::zeros(n, n)),
            diagonal_gates,
            activation: GateActivation::Tanh,
        }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.w[0].rows()
    }

    #[inline]
    pub fn w(&self, k: usize) -> &Matrix {
        &self.w[k]
    }

    pub fn matrices(&self) -> &[Matrix; 4] {
        &self.w
    }

    /// Mutable access for optimisers. Callers that keep `diagonal_gates`
    /// must only write diagonal entries; [`RgcWeights::check`] re-validates.
    pub fn matrices_mut(&mut self) -> &mut [Matrix; 4] {
        &mut self.w
    }

    pub fn diagonal_gates(&self) -> bool {
        self.diagonal_gates
    }

    pub fn activation(&self) -> GateActivation {
        self.activation
    }

    pub fn with_activation(mut self, activation: GateActivation) -> Self {
        self.activation = activation;
        self
    }

    pub fn check(&self) -> Result<()> {
        Self::new(self.w.clone(), self.diagonal_gates, self.activation).map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RgcState {
    pub s: Vec<f64>,
    pub m: Vec<f64>,
}

impl RgcState {
    pub fn zeros(n: usize) -> Self {
        Self {
            s: vec![0.0; n],
            m: vec![0.0; n],
        }
    }

    pub fn n(&self) -> usize {
        self.s.len()
    }

    /// `c⁽ᵛ⁾`
    #[inline]
    pub fn branch(&self, nu: usize) -> &[f64] {
        if nu == 0 {
            &self.s
        } else {
            &self.m
        }
    }
}

/// Gate values `a⁽ᵛ⁾, b⁽ᵛ⁾` produced by one step.
#[derive(Clone, Debug, PartialEq)]
pub struct RgcGates {
    pub a: [Vec<f64>; 2],
    pub b: [Vec<f64>; 2],
}

impl RgcGates {
    pub fn compute(prev: &RgcState, w: &RgcWeights) -> Result<Self> {
        let n = w.n();
        if prev.s.len() != n || prev.m.len() != n {
            return Err(shape(
                "rgc gates",
                format!("state of {} / {} for n={n}", prev.s.len(), prev.m.len()),
            ));
        }
        let f = w.activation;
        let gate = |k: usize, v: &[f64]| -> Vec<f64> {
            let wk = &w.w[k];
            if w.diagonal_gates {
                (0..n).map(|i| f.apply(wk[(i, i)] * v[i])).collect()
            } else {
                (0..n)
                    .map(|i| f.apply(crate::numerics::dot(wk.row(i), v)))
                    .collect()
            }
        };
        Ok(Self {
            a: [gate(1, &prev.m), gate(3, &prev.s)],
            b: [gate(0, &prev.s), gate(2, &prev.m)],
        })
    }
}

/// One RGC update; returns the new state along with the gates it used.
pub fn rgc_step(state: &RgcState, x: &[f64], w: &RgcWeights) -> Result<(RgcState, RgcGates)> {
    let n = w.n();
    if x.len() != n {
        return Err(shape("rgc_step", format!("input of {} for n={n}", x.len())));
    }
    let gates = RgcGates::compute(state, w)?;
    let next = |nu: usize| -> Vec<f64> {
        let c = state.branch(nu);
        (0..n)
            .map(|i| (1.0 - gates.a[nu][i]) * x[i] + gates.b[nu][i] * c[i])
            .collect()
    };
    let out = RgcState {
        s: next(0),
        m: next(1),
    };
    if !out.s.iter().chain(&out.m).all(|v| v.is_finite()) {
        return Err(Error::Numeric("rgc_step".into()));
    }
    Ok((out, gates))
}

/// Diagonal recursion factors `μ^{ν,0}` and `μ^{ν,1}` for step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateFactors {
    pub mu0: [Vec<f64>; 2],
    pub mu1: [Vec<f64>; 2],
}

impl GateFactors {
    /// ```text
    /// μ^{ν,0} = f'(b⁽ᵛ⁾) ⊙ c⁽ᵛ⁾(t−1) ⊙ diag(W[2ν]) + b⁽ᵛ⁾
    /// μ^{ν,1} = −f'(a⁽ᵛ⁾) ⊙ x(t) ⊙ diag(W[2ν+1])
    /// ```
    /// Only the diagonals of the gate matrices enter.
    pub fn from_gates(prev: &RgcState, x: &[f64], w: &RgcWeights, gates: &RgcGates) -> Self {
        let n = w.n();
        let f = w.activation;
        let mu0 = std::array::from_fn(|nu| {
            let c = prev.branch(nu);
            let wd = &w.w[2 * nu];
            (0..n)
                .map(|i| {
                    let b = gates.b[nu][i];
                    f.deriv_from_output(b) * c[i] * wd[(i, i)] + b
                })
                .collect()
        });
        let mu1 = std::array::from_fn(|nu| {
            let wd = &w.w[2 * nu + 1];
            (0..n)
                .map(|i| -f.deriv_from_output(gates.a[nu][i]) * x[i] * wd[(i, i)])
                .collect()
        });
        Self { mu0, mu1 }
    }
}

pub fn rgc_gate_factors(prev: &RgcState, x: &[f64], w: &RgcWeights) -> Result<GateFactors> {
    if x.len() != w.n() {
        return Err(shape("rgc_gate_factors", format!("input of {}", x.len())));
    }
    let gates = RgcGates::compute(prev, w)?;
    Ok(GateFactors::from_gates(prev, x, w, &gates))
}

/// Source matrices `J^{ν,0}`, `J^{ν,1}` indexed `j[ν][k % 2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceTerms {
    pub j: [[Matrix; 2]; 2],
}

impl SourceTerms {
    /// ```text
    /// J^{ν,0} = f'(b⁽ᵛ⁾) ⊙ c⁽ᵛ⁾(t−1) c⁽ᵛ⁾(t−1)ᵀ
    /// J^{ν,1} = −f'(a⁽ᵛ⁾) ⊙ x(t) c⁽¹⁻ᵛ⁾(t−1)ᵀ
    /// ```
    pub fn from_gates(prev: &RgcState, x: &[f64], w: &RgcWeights, gates: &RgcGates) -> Self {
        let f = w.activation;
        let j = std::array::from_fn(|nu| {
            let c = prev.branch(nu);
            let other = prev.branch(1 - nu);
            let rows0: Vec<f64> = c
                .iter()
                .zip(&gates.b[nu])
                .map(|(ci, b)| f.deriv_from_output(*b) * ci)
                .collect();
            let rows1: Vec<f64> = x
                .iter()
                .zip(&gates.a[nu])
                .map(|(xi, a)| -f.deriv_from_output(*a) * xi)
                .collect();
            [Matrix::outer(&rows0, c), Matrix::outer(&rows1, other)]
        });
        Self { j }
    }
}

pub fn rgc_source_terms(prev: &RgcState, x: &[f64], w: &RgcWeights) -> Result<SourceTerms> {
    if x.len() != w.n() {
        return Err(shape("rgc_source_terms", format!("input of {}", x.len())));
    }
    let gates = RgcGates::compute(prev, w)?;
    Ok(SourceTerms::from_gates(prev, x, w, &gates))
}

/// Exact dense Jacobian `∂c(t)/∂c(t−1)` of one RGC step, state ordered
/// `[s; m]` (size 2n × 2n). Includes every path: direct retention, through
/// the persistence gate and through the input gate.
pub fn rgc_state_jacobian(prev: &RgcState, x: &[f64], w: &RgcWeights, gates: &RgcGates) -> Matrix {
    let n = w.n();
    let f = w.activation;
    let mut jac = Matrix::zeros(2 * n, 2 * n);
    for nu in 0..2 {
        let c = prev.branch(nu);
        let own = &w.w[2 * nu];
        let cross = &w.w[2 * nu + 1];
        let row_off = nu * n;
        let own_off = nu * n;
        let cross_off = (1 - nu) * n;
        for i in 0..n {
            let db = f.deriv_from_output(gates.b[nu][i]) * c[i];
            let da = -f.deriv_from_output(gates.a[nu][i]) * x[i];
            for j in 0..n {
                jac[(row_off + i, own_off + j)] += db * own[(i, j)];
                jac[(row_off + i, cross_off + j)] += da * cross[(i, j)];
            }
            jac[(row_off + i, own_off + i)] += gates.b[nu][i];
        }
    }
    jac
}

/// Per-layer decay and input maps of a time-decay stack,
/// `c_l(t) = τ_l c_l(t−1) + P⁽ˡ⁾ c_{l−1}(t)` with `c_0 = x`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeDecayParams {
    pub tau: Vec<f64>,
    pub p: Vec<Matrix>,
}

impl TimeDecayParams {
    pub fn new(tau: Vec<f64>, p: Vec<Matrix>) -> Result<Self> {
        if tau.len() != p.len() || tau.is_empty() {
            return Err(Error::Validation(format!(
                "{} decays for {} input maps",
                tau.len(),
                p.len()
            )));
        }
        if let Some(t) = tau.iter().find(|t| !(t.abs() < 1.0)) {
            return Err(Error::Validation(format!("decay {t} outside (-1, 1)")));
        }
        for l in 1..p.len() {
            if p[l].cols() != p[l - 1].rows() {
                return Err(shape(
                    "TimeDecayParams::new",
                    format!(
                        "layer {l} expects {} inputs but layer {} has {} units",
                        p[l].cols(),
                        l - 1,
                        p[l - 1].rows()
                    ),
                ));
            }
        }
        Ok(Self { tau, p })
    }

    pub fn layers(&self) -> usize {
        self.tau.len()
    }

    pub fn input_dim(&self) -> usize {
        self.p[0].cols()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.p.iter().map(|m| m.rows()).collect()
    }

    pub fn zero_state(&self) -> Vec<Vec<f64>> {
        self.dims().into_iter().map(|d| vec![0.0; d]).collect()
    }
}

/// Updates every layer bottom-up within one time step; layer `l` sees the
/// already-updated `c_{l−1}(t)`.
pub fn time_decay_step(c_prev: &[Vec<f64>], x: &[f64], p: &TimeDecayParams) -> Result<Vec<Vec<f64>>> {
    if c_prev.len() != p.layers() {
        return Err(shape(
            "time_decay_step",
            format!("{} layer states for {} layers", c_prev.len(), p.layers()),
        ));
    }
    if x.len() != p.input_dim() {
        return Err(shape("time_decay_step", format!("input of {}", x.len())));
    }
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(p.layers());
    for l in 0..p.layers() {
        let below: &[f64] = if l == 0 { x } else { &out[l - 1] };
        let drive = p.p[l].matvec(below)?;
        if c_prev[l].len() != drive.len() {
            return Err(shape(
                "time_decay_step",
                format!("layer {l} state of {}", c_prev[l].len()),
            ));
        }
        let next = c_prev[l]
            .iter()
            .zip(&drive)
            .map(|(c, d)| p.tau[l] * c + d)
            .collect();
        out.push(next);
    }
    Ok(out)
}

/// A recurrent cell whose parameters each couple one source unit to one
/// target unit, and whose state-to-state Jacobian is diagonal. For such
/// cells the sensitivity `∂c_k/∂w_(i,j)` vanishes unless `k = i`, so an
/// n×m matrix carries all of it.
pub trait TwoPointCell {
    fn state_dim(&self) -> usize;

    fn input_dim(&self) -> usize;

    fn step(&self, state: &[f64], input: &[f64]) -> Result<Vec<f64>>;

    /// Diagonal `J_ii(t) = ∂c_i(t)/∂c_i(t−1)`.
    fn diag_jacobian(&self, state_prev: &[f64], input: &[f64]) -> Vec<f64>;

    /// `R̂_ij(t) = ∂c_i(t)/∂w_(i,j)` holding the state fixed.
    fn local_sensitivity(&self, state_prev: &[f64], input: &[f64]) -> Matrix;
}

/// One time-decay layer `c(t) = τ c(t−1) + P u(t)` viewed as a two-point
/// cell over the entries of `P`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeDecayLayer {
    pub tau: f64,
    pub p: Matrix,
}

impl TwoPointCell for TimeDecayLayer {
    fn state_dim(&self) -> usize {
        self.p.rows()
    }

    fn input_dim(&self) -> usize {
        self.p.cols()
    }

    fn step(&self, state: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        let drive = self.p.matvec(input)?;
        if state.len() != drive.len() {
            return Err(shape("TimeDecayLayer::step", format!("state of {}", state.len())));
        }
        Ok(state
            .iter()
            .zip(drive)
            .map(|(c, d)| self.tau * c + d)
            .collect())
    }

    fn diag_jacobian(&self, _state_prev: &[f64], _input: &[f64]) -> Vec<f64> {
        vec![self.tau; self.p.rows()]
    }

    fn local_sensitivity(&self, _state_prev: &[f64], input: &[f64]) -> Matrix {
        Matrix::from_fn(self.p.rows(), self.p.cols(), |_, j| input[j])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn random_weights(n: usize, diagonal: bool, scale: f64, rng: &mut Rng) -> RgcWeights {
        let w = std::array::from_fn(|_| {
            if diagonal {
                Matrix::diag(&rng.normal_vec(n, scale))
            } else {
                Matrix::random_normal(n, n, scale, rng)
            }
        });
        RgcWeights::new(w, diagonal, GateActivation::Tanh).unwrap()
    }

    #[test]
    fn passthrough_from_zero_state() {
        let mut rng = Rng::new(11);
        for _ in 0..100 {
            let n = 1 + rng.below(8);
            let w = random_weights(n, rng.below(2) == 0, 2.0, &mut rng);
            let x = rng.normal_vec(n, 1.0);
            let (next, _) = rgc_step(&RgcState::zeros(n), &x, &w).unwrap();
            assert_eq!(next.s, x);
            assert_eq!(next.m, x);
        }
    }

    #[test]
    fn zero_weights_track_input() {
        let w = RgcWeights::zeros(3, false);
        let mut st = RgcState::zeros(3);
        let mut rng = Rng::new(1);
        for _ in 0..5 {
            let x = rng.normal_vec(3, 1.0);
            st = rgc_step(&st, &x, &w).unwrap().0;
            assert_eq!(st.s, x);
            assert_eq!(st.m, x);
        }
    }

    #[test]
    fn scalar_step_matches_hand_value() {
        let one = Matrix::from_rows(&[&[1.0]]);
        let w = RgcWeights::new(
            std::array::from_fn(|_| one.clone()),
            true,
            GateActivation::Tanh,
        )
        .unwrap();
        let st = RgcState {
            s: vec![0.5],
            m: vec![0.5],
        };
        let (next, gates) = rgc_step(&st, &[1.0], &w).unwrap();
        assert!((gates.a[0][0] - 0.462117).abs() < 1e-6);
        assert!((gates.b[0][0] - 0.5f64.tanh()).abs() < 1e-15);
        assert!((next.s[0] - 0.768941).abs() < 1e-6);
        assert_eq!(next.s, next.m);
    }

    #[test]
    fn diagonal_flag_rejects_dense_entries() {
        let mut m = Matrix::identity(2);
        m[(0, 1)] = 0.1;
        let w = [m, Matrix::zeros(2, 2), Matrix::zeros(2, 2), Matrix::zeros(2, 2)];
        assert!(matches!(
            RgcWeights::new(w.clone(), true, GateActivation::Tanh),
            Err(Error::Contract(_))
        ));
        assert!(RgcWeights::new(w, false, GateActivation::Tanh).is_ok());
    }

    #[test]
    fn step_shape_errors() {
        let w = RgcWeights::zeros(3, false);
        assert!(matches!(
            rgc_step(&RgcState::zeros(3), &[1.0, 2.0], &w),
            Err(Error::Shape { .. })
        ));
        assert!(rgc_step(&RgcState::zeros(2), &[1.0, 2.0, 3.0], &w).is_err());
    }

    #[test]
    fn gate_factor_examples() {
        let mut rng = Rng::new(5);
        let n = 4;
        let st = RgcState {
            s: rng.normal_vec(n, 1.0),
            m: rng.normal_vec(n, 1.0),
        };
        let x = rng.normal_vec(n, 1.0);
        let f = rgc_gate_factors(&st, &x, &RgcWeights::zeros(n, true)).unwrap();
        for nu in 0..2 {
            assert!(f.mu0[nu].iter().all(|v| *v == 0.0));
            assert!(f.mu1[nu].iter().all(|v| *v == 0.0));
        }

        // W[0] = I: b⁽⁰⁾ = tanh(s), μ^{0,0} = (1 − tanh²s)s + tanh s
        let w = RgcWeights::new(
            [
                Matrix::identity(n),
                Matrix::zeros(n, n),
                Matrix::zeros(n, n),
                Matrix::zeros(n, n),
            ],
            true,
            GateActivation::Tanh,
        )
        .unwrap();
        let f = rgc_gate_factors(&st, &x, &w).unwrap();
        for i in 0..n {
            let c = st.s[i];
            let want = (1.0 - c.tanh().powi(2)) * c + c.tanh();
            assert!((f.mu0[0][i] - want).abs() < 1e-15);
        }

        let w = random_weights(n, false, 1.0, &mut rng);
        let f = rgc_gate_factors(&st, &vec![0.0; n], &w).unwrap();
        for nu in 0..2 {
            assert!(f.mu1[nu].iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn source_term_examples() {
        let n = 3;
        let u = vec![0.5, -1.0, 2.0];
        let st = RgcState {
            s: u.clone(),
            m: vec![0.3, 0.1, -0.2],
        };
        let x = vec![1.0, 2.0, 3.0];
        let src = rgc_source_terms(&st, &x, &RgcWeights::zeros(n, true)).unwrap();
        assert_eq!(src.j[0][0], Matrix::outer(&u, &u));

        let mut rng = Rng::new(8);
        let w = random_weights(n, false, 1.0, &mut rng);
        let src = rgc_source_terms(&st, &[0.0; 3], &w).unwrap();
        assert_eq!(src.j[0][1].max_abs(), 0.0);
        assert_eq!(src.j[1][1].max_abs(), 0.0);

        let st0 = RgcState {
            s: vec![0.0; 3],
            m: vec![1.0; 3],
        };
        let src = rgc_source_terms(&st0, &x, &w).unwrap();
        assert_eq!(src.j[0][0].max_abs(), 0.0);
    }

    #[test]
    fn cached_and_fresh_factors_agree_bitwise() {
        let mut rng = Rng::new(21);
        for diagonal in [true, false] {
            let n = 5;
            let w = random_weights(n, diagonal, 0.7, &mut rng);
            let st = RgcState {
                s: rng.normal_vec(n, 1.0),
                m: rng.normal_vec(n, 1.0),
            };
            let x = rng.normal_vec(n, 1.0);
            let (_, gates) = rgc_step(&st, &x, &w).unwrap();
            assert_eq!(
                GateFactors::from_gates(&st, &x, &w, &gates),
                rgc_gate_factors(&st, &x, &w).unwrap()
            );
            assert_eq!(
                SourceTerms::from_gates(&st, &x, &w, &gates),
                rgc_source_terms(&st, &x, &w).unwrap()
            );
        }
    }

    #[test]
    fn state_jacobian_matches_finite_differences() {
        let mut rng = Rng::new(31);
        let n = 4;
        let w = random_weights(n, false, 0.8, &mut rng);
        let st = RgcState {
            s: rng.normal_vec(n, 1.0),
            m: rng.normal_vec(n, 1.0),
        };
        let x = rng.normal_vec(n, 1.0);
        let (_, gates) = rgc_step(&st, &x, &w).unwrap();
        let jac = rgc_state_jacobian(&st, &x, &w, &gates);
        let eps = 1e-6;
        for col in 0..2 * n {
            let mut plus = st.clone();
            let mut minus = st.clone();
            if col < n {
                plus.s[col] += eps;
                minus.s[col] -= eps;
            } else {
                plus.m[col - n] += eps;
                minus.m[col - n] -= eps;
            }
            let fp = rgc_step(&plus, &x, &w).unwrap().0;
            let fm = rgc_step(&minus, &x, &w).unwrap().0;
            for row in 0..2 * n {
                let (p, m) = if row < n {
                    (fp.s[row], fm.s[row])
                } else {
                    (fp.m[row - n], fm.m[row - n])
                };
                let fd = (p - m) / (2.0 * eps);
                assert!((fd - jac[(row, col)]).abs() < 1e-8, "row {row} col {col}");
            }
        }
    }

    #[test]
    fn bounded_over_long_runs() {
        let mut rng = Rng::new(77);
        let n = 6;
        let w = random_weights(n, false, 1.5, &mut rng);
        let mut st = RgcState::zeros(n);
        for t in 1..=10_000usize {
            let x: Vec<f64> = (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            let xmax = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let prev_max = st.s.iter().chain(&st.m).fold(0.0f64, |m, v| m.max(v.abs()));
            st = rgc_step(&st, &x, &w).unwrap().0;
            for v in st.s.iter().chain(&st.m) {
                assert!(v.is_finite());
                assert!(v.abs() <= prev_max + 2.0 * xmax + 1e-12);
                assert!(v.abs() <= 2.0 * t as f64);
            }
        }
    }

    #[test]
    fn logistic_gates_available() {
        let w = RgcWeights::zeros(2, false).with_activation(GateActivation::Logistic);
        let (next, gates) = rgc_step(&RgcState::zeros(2), &[1.0, -1.0], &w).unwrap();
        assert_eq!(gates.a[0], vec![0.5, 0.5]);
        assert_eq!(next.s, vec![0.5, -0.5]);
    }

    #[test]
    fn time_decay_examples() {
        let p = TimeDecayParams::new(
            vec![0.0, 0.0],
            vec![
                Matrix::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]]),
                Matrix::from_rows(&[&[1.0, -1.0]]),
            ],
        )
        .unwrap();
        let out = time_decay_step(&p.zero_state(), &[1.0, 1.0], &p).unwrap();
        assert_eq!(out, vec![vec![3.0, 1.0], vec![2.0]]);

        let p = TimeDecayParams::new(vec![0.5], vec![Matrix::from_rows(&[&[1.0]])]).unwrap();
        let out = time_decay_step(&[vec![2.0]], &[3.0], &p).unwrap();
        assert_eq!(out, vec![vec![4.0]]);
        let out = time_decay_step(&[vec![0.0]], &[0.0], &p).unwrap();
        assert_eq!(out, vec![vec![0.0]]);

        assert!(TimeDecayParams::new(vec![1.0], vec![Matrix::identity(1)]).is_err());
        assert!(time_decay_step(&[vec![0.0]], &[0.0, 1.0], &p).is_err());
    }

    #[test]
    fn time_decay_is_linear() {
        let mut rng = Rng::new(4);
        let p = TimeDecayParams::new(
            vec![0.3, -0.6, 0.9],
            vec![
                Matrix::random_normal(4, 3, 1.0, &mut rng),
                Matrix::random_normal(5, 4, 1.0, &mut rng),
                Matrix::random_normal(2, 5, 1.0, &mut rng),
            ],
        )
        .unwrap();
        let rand_state = |rng: &mut Rng| -> Vec<Vec<f64>> {
            p.dims().into_iter().map(|d| rng.normal_vec(d, 1.0)).collect()
        };
        let (c1, c2) = (rand_state(&mut rng), rand_state(&mut rng));
        let (x1, x2) = (rng.normal_vec(3, 1.0), rng.normal_vec(3, 1.0));
        let (alpha, beta) = (0.7, -1.3);
        let mix = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<Vec<f64>> {
            a.iter()
                .zip(b)
                .map(|(u, v)| u.iter().zip(v).map(|(p, q)| alpha * p + beta * q).collect())
                .collect()
        };
        let xm: Vec<f64> = x1.iter().zip(&x2).map(|(p, q)| alpha * p + beta * q).collect();
        let lhs = time_decay_step(&mix(&c1, &c2), &xm, &p).unwrap();
        let rhs = mix(
            &time_decay_step(&c1, &x1, &p).unwrap(),
            &time_decay_step(&c2, &x2, &p).unwrap(),
        );
        for (a, b) in lhs.iter().flatten().zip(rhs.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
