//! Spectral collapse diagnostics, fourth-moment tensors of linear Gaussian
//! dynamics, τ-scaling fits, and the sensitivity scaling benchmark.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::cells::{rgc_step, RgcState, RgcWeights};
use crate::data::spectral_radius;
use crate::error::{Error, Result};
use crate::numerics::{kron, solve_linear, sym_eig, Matrix, Rng};
use crate::rfp::rfp_init;

/// Eigenvalues at or above this fraction of the largest are counted in
/// [`SpectrumReport::threshold_count`].
pub const THRESHOLD_FRACTION: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumReport {
    /// Descending eigenvalues of `HHᵀ`.
    pub eigenvalues: Vec<f64>,
    /// `(Σλ)² / Σλ²`, taken as 1 for an all-zero spectrum.
    pub participation_ratio: f64,
    pub threshold_count: usize,
    /// `(pc1, pc2)` of each `h(t)`.
    pub pca: Vec<[f64; 2]>,
    pub hht: Matrix,
}

impl SpectrumReport {
    pub fn eigen_csv(&self) -> String {
        let mut s = String::from("index,eigenvalue\n");
        for (i, v) in self.eigenvalues.iter().enumerate() {
            let _ = writeln!(s, "{i},{v:e}");
        }
        s
    }

    pub fn pca_csv(&self) -> String {
        let mut s = String::from("pc1,pc2\n");
        for [a, b] in &self.pca {
            let _ = writeln!(s, "{a:e},{b:e}");
        }
        s
    }
}

pub fn participation_ratio(eigenvalues: &[f64]) -> f64 {
    let clipped = eigenvalues.iter().map(|v| v.max(0.0));
    let sum: f64 = clipped.clone().sum();
    let sq: f64 = clipped.map(|v| v * v).sum();
    if sq == 0.0 {
        1.0
    } else {
        sum * sum / sq
    }
}

/// Spectrum of `HHᵀ` for `H` with columns `h(t)/√T`.
pub fn covariance_spectrum(h: &Matrix) -> Result<SpectrumReport> {
    if h.cols() < 2 {
        return Err(Error::Validation(format!("spectrum needs T ≥ 2, got {}", h.cols())));
    }
    let hht = h.matmul(&h.transpose())?;
    // symmetrise against rounding
    let hht = hht.add(&hht.transpose())?.scale(0.5);
    let (vals, vecs) = sym_eig(&hht)?;
    let pr = participation_ratio(&vals);
    let top = vals.first().copied().unwrap_or(0.0);
    let threshold_count = vals.iter().filter(|&&v| top > 0.0 && v >= THRESHOLD_FRACTION * top).count();
    let d = h.rows();
    let sqrt_t = (h.cols() as f64).sqrt();
    let pcs: Vec<Vec<f64>> = (0..2.min(d)).map(|k| vecs.col(k)).collect();
    let pca = (0..h.cols())
        .map(|j| {
            let mut out = [0.0; 2];
            for (k, v) in pcs.iter().enumerate() {
                out[k] = (0..d).map(|i| v[i] * h[(i, j)]).sum::<f64>() * sqrt_t;
            }
            out
        })
        .collect();
    Ok(SpectrumReport {
        eigenvalues: vals,
        participation_ratio: pr,
        threshold_count,
        pca,
        hht,
    })
}

/// Largest `n` for the `n⁴ × n⁴` Kronecker solves.
pub const MOMENT_MAX_N: usize = 4;

/// Lag patterns `(Δ₁, Δ₂, Δ₃)`; entry `ijmn` of pattern `(Δ₁, Δ₂, Δ₃)` is
/// `E[c_i(t) c_j(t−Δ₁) c_m(t−Δ₂) c_n(t−Δ₃)]`.
pub const LAGS: [[usize; 3]; 3] = [[0, 0, 0], [0, 1, 1], [1, 2, 2]];

/// Vectorised fourth-moment tensors for the three lag patterns, row-major
/// in `(i, j, m, n)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MomentTensors {
    pub n: usize,
    pub tensors: [Vec<f64>; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MonteCarloMoments {
    pub n: usize,
    pub samples: usize,
    pub mean: [Vec<f64>; 3],
    pub se: [Vec<f64>; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MomentReport {
    pub closed_form: MomentTensors,
    pub monte_carlo: Option<MonteCarloMoments>,
}

fn validate_process(u: &Matrix, sigma: &Matrix) -> Result<usize> {
    let n = u.rows();
    if n > MOMENT_MAX_N {
        return Err(Error::Capacity {
            what: "moment tensor width n",
            limit: MOMENT_MAX_N,
            got: n,
        });
    }
    if !u.is_square() || sigma.shape() != (n, n) {
        return Err(Error::Validation(format!(
            "U {:?} and Σ {:?} must be n×n",
            u.shape(),
            sigma.shape()
        )));
    }
    let rho = spectral_radius(u)?;
    if rho >= 1.0 {
        return Err(Error::Validation(format!("spectral radius {rho} is not below 1")));
    }
    if !sigma.is_symmetric(1e-9) {
        return Err(Error::Validation("Σ is not symmetric".into()));
    }
    sigma
        .cholesky()
        .map_err(|_| Error::Validation("Σ is not positive definite".into()))?;
    Ok(n)
}

/// `T^B_{ijmn} = Σ_ij Σ_mn + Σ_im Σ_jn + Σ_in Σ_jm`
pub fn gaussian_fourth_moment(sigma: &Matrix) -> Vec<f64> {
    let n = sigma.rows();
    let mut out = Vec::with_capacity(n.pow(4));
    for i in 0..n {
        for j in 0..n {
            for m in 0..n {
                for k in 0..n {
                    let s = |a: usize, b: usize| sigma[(a, b)];
                    out.push(s(i, j) * s(m, k) + s(i, m) * s(j, k) + s(i, k) * s(j, m));
                }
            }
        }
    }
    out
}

/// Closed form by Kronecker solves:
///
/// ```text
/// vec T(0,0,0) = [I − U⊗U⊗U⊗U]⁻¹ vec T^B
/// vec T(0,1,1) = [U⊗U⊗I⊗I] vec T(0,0,0)
/// vec T(1,2,2) = [U²⊗U⊗I⊗I] vec T(0,0,0)
/// ```
pub fn moment_closed_form(u: &Matrix, sigma: &Matrix) -> Result<MomentTensors> {
    let n = validate_process(u, sigma)?;
    let tb = gaussian_fourth_moment(sigma);
    let u2 = kron(u, u);
    let u4 = kron(&u2, &u2);
    let dim = n.pow(4);
    let a = Matrix::identity(dim).sub(&u4)?;
    let t000 = solve_linear(&a, &Matrix::column(&tb))?.into_data();
    let id2 = Matrix::identity(n * n);
    let op011 = kron(&u2, &id2);
    let op122 = kron(&kron(&u.matmul(u)?, u), &id2);
    let t011 = op011.matvec(&t000)?;
    let t122 = op122.matvec(&t000)?;
    Ok(MomentTensors {
        n,
        tensors: [t000, t011, t122],
    })
}

/// Exact moments of the stationary Gaussian process by pair expansion:
/// `S = U S Uᵀ + Σ`, `E[c(t) c(t−Δ)ᵀ] = U^Δ S`, and
/// `E[abcd] = E[ab]E[cd] + E[ac]E[bd] + E[ad]E[bc]`.
pub fn moment_gaussian_exact(u: &Matrix, sigma: &Matrix) -> Result<MomentTensors> {
    let n = validate_process(u, sigma)?;
    let a = Matrix::identity(n * n).sub(&kron(u, u))?;
    let s = Matrix::new(n, n, solve_linear(&a, &Matrix::column(sigma.data()))?.into_data())?;
    let mut pow = vec![Matrix::identity(n)];
    for k in 1..=2 {
        pow.push(u.matmul(&pow[k - 1])?);
    }
    // c_lag[d] = U^d S = E[c(t) c(t−d)ᵀ]
    let c_lag: Vec<Matrix> = pow.iter().map(|p| p.matmul(&s)).collect::<Result<_>>()?;
    let pair = |a: usize, ta: usize, b: usize, tb: usize| -> f64 {
        // ta, tb are lags behind t
        if ta <= tb {
            c_lag[tb - ta][(a, b)]
        } else {
            c_lag[ta - tb][(b, a)]
        }
    };
    let tensors = LAGS.map(|[d1, d2, d3]| {
        let mut out = Vec::with_capacity(n.pow(4));
        for i in 0..n {
            for j in 0..n {
                for m in 0..n {
                    for k in 0..n {
                        out.push(
                            pair(i, 0, j, d1) * pair(m, d2, k, d3)
                                + pair(i, 0, m, d2) * pair(j, d1, k, d3)
                                + pair(i, 0, k, d3) * pair(j, d1, m, d2),
                        );
                    }
                }
            }
        }
        out
    });
    Ok(MomentTensors { n, tensors })
}

pub const MIN_MC_SAMPLES: usize = 10_000;
pub const JACKKNIFE_BLOCKS: usize = 500;

/// Empirical moments from one chain of `samples` steps after `burn_in`,
/// with block-jackknife standard errors over [`JACKKNIFE_BLOCKS`] blocks.
pub fn moment_monte_carlo(
    u: &Matrix,
    sigma: &Matrix,
    samples: usize,
    burn_in: usize,
    seed: u64,
) -> Result<MonteCarloMoments> {
    let n = validate_process(u, sigma)?;
    if samples < MIN_MC_SAMPLES {
        return Err(Error::Validation(format!(
            "Monte Carlo needs at least {MIN_MC_SAMPLES} samples, got {samples}"
        )));
    }
    let chol = sigma.cholesky()?;
    let mut rng = Rng::new(seed);
    let mut c = vec![0.0; n];
    let step = |c: &mut Vec<f64>, rng: &mut Rng| -> Result<()> {
        let noise = chol.matvec(&rng.normal_vec(n, 1.0))?;
        *c = u.matvec(c)?.iter().zip(&noise).map(|(a, b)| a + b).collect();
        Ok(())
    };
    for _ in 0..burn_in.max(2) {
        step(&mut c, &mut rng)?;
    }
    let mut hist = [vec![0.0; n], vec![0.0; n], c.clone()];
    // seed the two lagged slots from the chain itself
    step(&mut c, &mut rng)?;
    hist = [hist[1].clone(), hist[2].clone(), c.clone()];
    step(&mut c, &mut rng)?;
    hist = [hist[1].clone(), hist[2].clone(), c.clone()];

    let dim = n.pow(4);
    let blocks = JACKKNIFE_BLOCKS.min(samples);
    let block_len = samples / blocks;
    let used = block_len * blocks;
    let mut block_sums = vec![[vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]]; blocks];
    for s in 0..used {
        if s > 0 {
            step(&mut c, &mut rng)?;
            hist = [hist[1].clone(), hist[2].clone(), c.clone()];
        }
        let at = |lag: usize| &hist[2 - lag];
        let b = &mut block_sums[s / block_len];
        for (li, [d1, d2, d3]) in LAGS.iter().enumerate() {
            let (x0, x1, x2, x3) = (at(0), at(*d1), at(*d2), at(*d3));
            let mut idx = 0;
            for i in 0..n {
                for j in 0..n {
                    let ij = x0[i] * x1[j];
                    for m in 0..n {
                        let ijm = ij * x2[m];
                        for k in 0..n {
                            b[li][idx] += ijm * x3[k];
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
    let mut mean: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; dim]);
    let mut se: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; dim]);
    for li in 0..3 {
        for e in 0..dim {
            let total: f64 = block_sums.iter().map(|b| b[li][e]).sum();
            let m = total / used as f64;
            let mut acc = 0.0;
            for b in &block_sums {
                let loo = (total - b[li][e]) / (used - block_len) as f64;
                acc += (loo - m).powi(2);
            }
            mean[li][e] = m;
            se[li][e] = ((blocks - 1) as f64 / blocks as f64 * acc).sqrt();
        }
    }
    Ok(MonteCarloMoments {
        n,
        samples: used,
        mean,
        se,
    })
}

/// Agreement of a reference with Monte Carlo: `(entries beyond k·SE,
/// entries compared, largest |z|)`.
pub fn moment_agreement(reference: &MomentTensors, mc: &MonteCarloMoments, k: f64) -> (usize, usize, f64) {
    let mut fails = 0;
    let mut total = 0;
    let mut worst: f64 = 0.0;
    for li in 0..3 {
        for ((r, m), s) in reference.tensors[li].iter().zip(&mc.mean[li]).zip(&mc.se[li]) {
            let z = (r - m).abs() / s.max(1e-300);
            worst = worst.max(z);
            if z > k {
                fails += 1;
            }
            total += 1;
        }
    }
    (fails, total, worst)
}

/// Tensor symmetry check used in tests: largest deviation of `T(0,0,0)`
/// under index permutations.
pub fn permutation_asymmetry(t: &[f64], n: usize) -> f64 {
    let idx = |a: [usize; 4]| ((a[0] * n + a[1]) * n + a[2]) * n + a[3];
    let perms = [[1, 0, 2, 3], [0, 2, 1, 3], [0, 1, 3, 2], [3, 2, 1, 0]];
    let mut worst: f64 = 0.0;
    for flat in 0..n.pow(4) {
        let a = [flat / n.pow(3), flat / (n * n) % n, flat / n % n, flat % n];
        for p in perms {
            let b = [a[p[0]], a[p[1]], a[p[2]], a[p[3]]];
            worst = worst.max((t[idx(a)] - t[idx(b)]).abs());
        }
    }
    worst
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TauScaling {
    pub taus: Vec<f64>,
    pub norm_011: Vec<f64>,
    pub norm_122: Vec<f64>,
    pub slope_011: f64,
    pub slope_122: f64,
}

pub const DEFAULT_TAU_GRID: [f64; 6] = [0.05, 0.1, 0.2, 0.3, 0.4, 0.5];

/// Log-log slopes of `‖T(0,1,1)‖` and `‖T(1,2,2)‖` against `τ` for
/// `U = τI`, from the closed form.
pub fn tau_scaling_check(sigma: &Matrix, tau_grid: &[f64]) -> Result<TauScaling> {
    if tau_grid.len() < 4 {
        return Err(Error::Validation(format!(
            "τ grid needs at least 4 points, got {}",
            tau_grid.len()
        )));
    }
    if tau_grid.iter().any(|&t| !(t > 0.0 && t <= 0.5)) {
        return Err(Error::Validation("τ grid must lie in (0, 0.5]".into()));
    }
    let n = sigma.rows();
    let mut norm_011 = Vec::new();
    let mut norm_122 = Vec::new();
    for &tau in tau_grid {
        let m = moment_closed_form(&Matrix::identity(n).scale(tau), sigma)?;
        norm_011.push(crate::numerics::norm(&m.tensors[1]));
        norm_122.push(crate::numerics::norm(&m.tensors[2]));
    }
    let lx: Vec<f64> = tau_grid.iter().map(|t| t.ln()).collect();
    let slope = |ys: &[f64]| loglog_slope_ln(&lx, &ys.iter().map(|v| v.ln()).collect::<Vec<_>>());
    Ok(TauScaling {
        taus: tau_grid.to_vec(),
        slope_011: slope(&norm_011),
        slope_122: slope(&norm_122),
        norm_011,
        norm_122,
    })
}

fn loglog_slope_ln(lx: &[f64], ly: &[f64]) -> f64 {
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    loglog_slope_ln(&lx, &ly)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    Rfp,
    FullRtrl,
    Bptt,
}

impl BenchMode {
    pub fn name(self) -> &'static str {
        match self {
            BenchMode::Rfp => "rfp",
            BenchMode::FullRtrl => "full_rtrl",
            BenchMode::Bptt => "bptt",
        }
    }

    /// Counted reals held for gradient computation over `t` steps.
    pub fn state_memory(self, n: usize, t: usize) -> usize {
        match self {
            BenchMode::Rfp => 8 * n * n,
            BenchMode::FullRtrl => 8 * n * n * n,
            // states (T+1)·2n, gates T·4n, inputs T·n
            BenchMode::Bptt => (t + 1) * 2 * n + t * 5 * n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub ms_per_step: f64,
    pub state_reals: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchTable {
    pub mode: BenchMode,
    pub t: usize,
    pub rows: Vec<BenchRow>,
    pub time_slope: f64,
    pub memory_slope: f64,
}

impl BenchTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,n,T,ms_per_step,state_reals\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{:.6},{}", self.mode.name(), r.n, self.t, r.ms_per_step, r.state_reals);
        }
        s
    }
}

/// Minimum measuring time per size.
const BENCH_BUDGET_MS: f64 = 40.0;

fn bench_weights(n: usize, rng: &mut Rng) -> Result<RgcWeights> {
    let w: [Matrix; 4] = std::array::from_fn(|_| Matrix::diag(&rng.normal_vec(n, 0.5)));
    RgcWeights::new(w, true, Default::default())
}

/// Times the gradient machinery of one mode per state size and counts its
/// memory.
pub fn scaling_bench(sizes: &[usize], t: usize, mode: BenchMode, seed: u64) -> Result<BenchTable> {
    if t == 0 || sizes.is_empty() {
        return Err(Error::Validation("bench needs T ≥ 1 and at least one size".into()));
    }
    if mode == BenchMode::FullRtrl {
        if let Some(&n) = sizes.iter().find(|&&n| n > crate::oracles::RTRL_MAX_N) {
            return Err(Error::Capacity {
                what: "full RTRL width n",
                limit: crate::oracles::RTRL_MAX_N,
                got: n,
            });
        }
    }
    let mut rng = Rng::new(seed);
    let mut rows = Vec::new();
    for &n in sizes {
        let w = bench_weights(n, &mut rng)?;
        let xs: Vec<Vec<f64>> = (0..t).map(|_| rng.normal_vec(n, 1.0)).collect();
        let mut best = f64::INFINITY;
        let mut spent = 0.0;
        let mut reps = 0;
        while spent < BENCH_BUDGET_MS || reps < 3 {
            let start = Instant::now();
            run_mode(mode, &w, &xs)?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            best = best.min(ms);
            spent += ms;
            reps += 1;
        }
        rows.push(BenchRow {
            n,
            ms_per_step: best / t as f64,
            state_reals: mode.state_memory(n, t),
        });
    }
    let ns: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let (time_slope, memory_slope) = if rows.len() >= 2 {
        (
            loglog_slope(&ns, &rows.iter().map(|r| r.ms_per_step).collect::<Vec<_>>()),
            loglog_slope(&ns, &rows.iter().map(|r| r.state_reals as f64).collect::<Vec<_>>()),
        )
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(BenchTable {
        mode,
        t,
        rows,
        time_slope,
        memory_slope,
    })
}

/// One pass of the mode's per-step work over `xs`.
pub fn run_mode(mode: BenchMode, w: &RgcWeights, xs: &[Vec<f64>]) -> Result<f64> {
    let n = w.n();
    let mut state = RgcState::zeros(n);
    let mut probe = 0.0;
    match mode {
        BenchMode::Rfp => {
            let mut sens = rfp_init(n);
            for (t, x) in xs.iter().enumerate() {
                let (next, gates) = rgc_step(&state, x, w)?;
                sens.propagate(t + 1, &state, x, w, &gates)?;
                state = next;
            }
            probe += sens.gamma(0, 0)[(0, 0)];
        }
        BenchMode::FullRtrl => {
            let mut gamma = Matrix::zeros(2 * n, 4 * n * n);
            for x in xs {
                let (next, gates) = rgc_step(&state, x, w)?;
                gamma = crate::oracles::rtrl_step(&gamma, &state, x, w, &gates)?;
                state = next;
            }
            probe += gamma[(0, 0)];
        }
        BenchMode::Bptt => {
            let mut states = vec![state.clone()];
            let mut gates = Vec::with_capacity(xs.len());
            for x in xs {
                let (next, g) = rgc_step(&state, x, w)?;
                states.push(next.clone());
                gates.push(g);
                state = next;
            }
            let ds = vec![vec![1.0; n]; xs.len()];
            let g = crate::oracles::rgc_reverse_sweep(w, &states, &gates, xs, &ds)?;
            probe += g[0][(0, 0)];
        }
    }
    Ok(probe)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectrum_examples() {
        let h = Matrix::from_fn(3, 5, |i, _| [1.0, 2.0, -0.5][i] / 5f64.sqrt());
        let r = covariance_spectrum(&h).unwrap();
        assert!((r.participation_ratio - 1.0).abs() < 1e-12);

        let d = 4;
        let h = Matrix::identity(d).scale(1.0 / (d as f64).sqrt());
        let r = covariance_spectrum(&h).unwrap();
        assert!((r.participation_ratio - d as f64).abs() < 1e-12);

        let s = 1.0 / 2f64.sqrt();
        let h = Matrix::from_rows(&[&[s, s], &[s, -s]]);
        let r = covariance_spectrum(&h).unwrap();
        assert!(r.hht.sub(&Matrix::identity(2)).unwrap().max_abs() < 1e-15);
        assert!((r.eigenvalues[0] - 1.0).abs() < 1e-12 && (r.eigenvalues[1] - 1.0).abs() < 1e-12);
        assert!((r.participation_ratio - 2.0).abs() < 1e-12);
        assert_eq!(r.pca.len(), 2);
        assert!(covariance_spectrum(&Matrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn participation_ratio_bounds() {
        let mut rng = Rng::new(1);
        for _ in 0..20 {
            let h = Matrix::random_normal(6, 9, 1.0, &mut rng);
            let r = covariance_spectrum(&h).unwrap();
            assert!(r.participation_ratio >= 1.0 - 1e-12 && r.participation_ratio <= 6.0 + 1e-12);
            assert!(r.eigenvalues.iter().all(|&v| v >= -1e-10));
        }
        assert_eq!(participation_ratio(&[0.0, 0.0]), 1.0);
    }

    #[test]
    fn closed_form_scalar_examples() {
        let one = Matrix::identity(1);
        let m = moment_closed_form(&Matrix::zeros(1, 1), &one).unwrap();
        assert_eq!(m.tensors, [vec![3.0], vec![0.0], vec![0.0]]);
        let m = moment_closed_form(&one.scale(0.5), &one).unwrap();
        assert!((m.tensors[0][0] - 3.2).abs() < 1e-12);
        assert!((m.tensors[1][0] - 0.8).abs() < 1e-12);
        assert!((m.tensors[2][0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn closed_form_guards_and_symmetry() {
        let mut rng = Rng::new(2);
        let a = Matrix::random_normal(3, 3, 1.0, &mut rng);
        let sigma = a.matmul(&a.transpose()).unwrap().add(&Matrix::identity(3)).unwrap();
        let u = Matrix::diag(&[0.3, -0.5, 0.7]);
        let m = moment_closed_form(&u, &sigma).unwrap();
        assert!(permutation_asymmetry(&m.tensors[0], 3) < 1e-10 * m.tensors[0][0].abs());
        assert!(matches!(
            moment_closed_form(&Matrix::identity(5).scale(0.1), &Matrix::identity(5)),
            Err(Error::Capacity { .. })
        ));
        assert!(moment_closed_form(&Matrix::identity(2).scale(1.1), &Matrix::identity(2)).is_err());
    }

    #[test]
    fn exact_gaussian_moments_reduce_to_closed_form_when_memoryless() {
        let sigma = Matrix::from_rows(&[&[2.0, 0.3], &[0.3, 1.0]]);
        let u = Matrix::zeros(2, 2);
        let a = moment_closed_form(&u, &sigma).unwrap();
        let b = moment_gaussian_exact(&u, &sigma).unwrap();
        for k in 0..3 {
            assert!(crate::numerics::rel_err(&a.tensors[k], &b.tensors[k]) < 1e-12 || a.tensors[k].iter().all(|v| *v == 0.0));
        }
        let scalar = moment_gaussian_exact(&Matrix::identity(1).scale(0.5), &Matrix::identity(1)).unwrap();
        let var: f64 = 1.0 / 0.75;
        assert!((scalar.tensors[0][0] - 3.0 * var * var).abs() < 1e-12);
    }

    #[test]
    fn monte_carlo_white_gaussian() {
        let one = Matrix::identity(1);
        let mc = moment_monte_carlo(&Matrix::zeros(1, 1), &one, 20_000, 100, 3).unwrap();
        assert!((mc.mean[0][0] - 3.0).abs() < 3.0 * mc.se[0][0]);
        assert!(moment_monte_carlo(&Matrix::zeros(1, 1), &one, 100, 10, 3).is_err());
    }

    #[test]
    fn monte_carlo_standard_error_rate() {
        let one = Matrix::identity(1);
        let u = one.scale(0.5);
        let a = moment_monte_carlo(&u, &one, 50_000, 100, 4).unwrap();
        let b = moment_monte_carlo(&u, &one, 100_000, 100, 5).unwrap();
        let ratio = b.se[0][0] / a.se[0][0];
        assert!((0.6..=0.82).contains(&ratio), "{ratio}");
    }

    #[test]
    fn monte_carlo_agrees_with_exact_gaussian_moments() {
        let u = Matrix::diag(&[0.5, -0.3]);
        let sigma = Matrix::from_rows(&[&[1.0, 0.4], &[0.4, 0.8]]);
        let exact = moment_gaussian_exact(&u, &sigma).unwrap();
        let mc = moment_monte_carlo(&u, &sigma, 200_000, 200, 6).unwrap();
        let (fails, total, worst) = moment_agreement(&exact, &mc, 4.0);
        assert!(fails == 0, "{fails}/{total}, worst z {worst}");
    }

    #[test]
    fn tau_scaling_examples() {
        let one = Matrix::identity(1);
        let r = tau_scaling_check(&one, &DEFAULT_TAU_GRID).unwrap();
        assert!((1.9..=2.15).contains(&r.slope_011), "{}", r.slope_011);
        assert!((2.9..=3.15).contains(&r.slope_122), "{}", r.slope_122);
        let r2 = tau_scaling_check(&one.scale(3.0), &DEFAULT_TAU_GRID).unwrap();
        assert!((r2.slope_011 - r.slope_011).abs() < 1e-10);
        assert!((r2.norm_011[0] / r.norm_011[0] - 9.0).abs() < 1e-9);
        assert!(tau_scaling_check(&one, &[0.3]).is_err());
    }

    #[test]
    fn bench_memory_counts() {
        let r = scaling_bench(&[4, 8], 5, BenchMode::Rfp, 1).unwrap();
        assert_eq!(r.rows[1].state_reals, 4 * r.rows[0].state_reals);
        let f = scaling_bench(&[4, 8], 5, BenchMode::FullRtrl, 1).unwrap();
        assert_eq!(f.rows[1].state_reals, 8 * f.rows[0].state_reals);
        assert!((f.memory_slope - 3.0).abs() < 1e-12);
        let b = scaling_bench(&[4, 8], 5, BenchMode::Bptt, 1).unwrap();
        assert!(b.to_csv().starts_with("mode,n,T,ms_per_step,state_reals\n"));
        assert!(scaling_bench(&[65], 2, BenchMode::FullRtrl, 1).is_err());
    }
}
