//! Gramian-type matrices: discrete Lyapunov solutions, expected Kronecker kernels for
//! random edge masks and node selection, and the fixed points that weight quantization noise.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graphs::{MaskModel, ShiftOperator};
use crate::linalg::{spectral_norm, spectral_radius, to_complex, unvec, vec_of, CMat, Mat};

/// Largest `N` for which `N² × N²` kernels are materialized.
pub const KRON_MAX_N: usize = 80;
/// Iteration cap for fixed-point solvers.
pub const MAX_FIXED_POINT_ITERS: usize = 10_000;
/// Relative Frobenius change at which a fixed-point iteration stops.
pub const FIXED_POINT_TOL: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    SmithDoubling,
    Vectorized,
    FixedPoint,
}

#[derive(Debug, Clone)]
pub struct LyapunovResult<T: nalgebra::Scalar = f64> {
    pub w: DMatrix<T>,
    /// Frobenius norm of the defining equation's residual.
    pub residual: f64,
    pub method: SolveMethod,
    pub iterations: usize,
}

/// Solves `W = Fᵀ W F + I` by doubling: `X ← X + AᵀXA`, `A ← A²`.
pub fn smith_doubling(f: &Mat) -> Result<LyapunovResult> {
    let n = f.nrows();
    let rho = spectral_radius(f);
    if rho >= 1.0 {
        return Err(Error::Unstable(format!("spectral radius {rho:.6} ≥ 1")));
    }
    let mut x = Mat::identity(n, n);
    let mut a = f.clone();
    let mut iterations = 0;
    for _ in 0..128 {
        iterations += 1;
        let add = a.transpose() * &x * &a;
        x += &add;
        a = &a * &a;
        if !a.iter().all(|v| v.is_finite()) || !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Unstable("doubling iterates overflowed".into()));
        }
        let an = a.norm();
        if an * an < 1e-18 {
            break;
        }
    }
    // Symmetrize and polish with two plain sweeps.
    x = (&x + x.transpose()) * 0.5;
    for _ in 0..2 {
        x = f.transpose() * &x * f + Mat::identity(n, n);
        x = (&x + x.transpose()) * 0.5;
    }
    let residual = lyapunov_residual(f, &x);
    Ok(LyapunovResult { w: x, residual, method: SolveMethod::SmithDoubling, iterations })
}

/// `‖W − FᵀWF − I‖_F`.
pub fn lyapunov_residual(f: &Mat, w: &Mat) -> f64 {
    let n = f.nrows();
    (w - f.transpose() * w * f - Mat::identity(n, n)).norm()
}

/// Solves `W = Fᵀ W F + I` through `(I − Fᵀ⊗Fᵀ) vec W = vec I`.
pub fn lyapunov_vectorized(f: &Mat) -> Result<LyapunovResult> {
    let n = f.nrows();
    check_kron_size(n)?;
    let ft = f.transpose();
    let k = Mat::identity(n * n, n * n) - ft.kronecker(&ft);
    let rhs = vec_of(&Mat::identity(n, n));
    let sol = k
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Unstable("singular vectorized Lyapunov system".into()))?;
    let w = unvec(&sol, n);
    let w = (&w + w.transpose()) * 0.5;
    let residual = lyapunov_residual(f, &w);
    Ok(LyapunovResult { w, residual, method: SolveMethod::Vectorized, iterations: 1 })
}

/// Plain iteration `W ← FᵀWF + I` for a fixed number of steps.
pub fn lyapunov_fixed_point(f: &Mat, steps: usize) -> LyapunovResult {
    let n = f.nrows();
    let mut w = Mat::identity(n, n);
    for _ in 0..steps {
        w = f.transpose() * &w * f + Mat::identity(n, n);
    }
    let residual = lyapunov_residual(f, &w);
    LyapunovResult { w, residual, method: SolveMethod::FixedPoint, iterations: steps }
}

fn check_kron_size(n: usize) -> Result<()> {
    if n > KRON_MAX_N {
        return Err(Error::TooLarge(format!("{n}² × {n}² kernel exceeds the N ≤ {KRON_MAX_N} limit")));
    }
    Ok(())
}

/// `W₀ = |ψ|² Sᵀ W₀ S + I` for one IIR branch on a fixed graph.
pub fn solve_lyapunov_deterministic(s: &Mat, psi: Complex64) -> Result<LyapunovResult> {
    let rho = spectral_radius(s);
    let g = psi.norm() * rho;
    if g >= 1.0 {
        return Err(Error::Unstable(format!("|ψ|·ρ = {g:.6} ≥ 1")));
    }
    let mut out = smith_doubling(&(s * psi.norm()))?;
    out.residual = lyapunov_residual(&(s * psi.norm()), &out.w);
    Ok(out)
}

/// Bernoulli(p) edge-mask model of a symmetric shift operator, with analytic moments.
#[derive(Debug, Clone)]
pub struct EdgeModel {
    mask: MaskModel,
    p: f64,
    s: Mat,
    rho: f64,
}

impl EdgeModel {
    /// `p = 1` is accepted and reproduces the fixed graph.
    pub fn new(op: &ShiftOperator, p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("edge probability {p} outside [0, 1]")));
        }
        let mask = op.mask_model()?;
        let s = mask.full();
        Ok(EdgeModel { mask, p, rho: op.spectral_radius, s })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn n(&self) -> usize {
        self.s.nrows()
    }

    pub fn mask(&self) -> &MaskModel {
        &self.mask
    }

    /// Spectral radius of the full operator; bounds every realization.
    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn base(&self) -> &Mat {
        &self.s
    }

    /// `S̄ = E[S_t]`.
    pub fn mean(&self) -> Mat {
        &self.s * self.p
    }

    /// `E[S_tᵀ M S_t] = p² S M S + (p − p²) Σ_e S_e M S_e`.
    pub fn conj(&self, m: &Mat) -> Mat {
        let p = self.p;
        let mut out = &self.s * m * &self.s * (p * p);
        let c = p - p * p;
        if c != 0.0 {
            self.mask.add_edge_conjugation(m, c, &mut out);
        }
        out
    }

    /// `E[S_t S_tᵀ]`.
    pub fn second_moment(&self) -> Mat {
        self.conj(&Mat::identity(self.n(), self.n()))
    }

    /// Materialized `E[S_t ⊗ S_t]` (equal to `E[S_tᵀ ⊗ S_tᵀ]` for symmetric masks).
    pub fn kron(&self) -> Result<ExpectedKron> {
        let n = self.n();
        check_kron_size(n)?;
        let p = self.p;
        let mut m = self.s.kronecker(&self.s) * (p * p);
        let c = p - p * p;
        if c != 0.0 {
            for e in 0..self.mask.n_edges() {
                let se = self.mask.edge_term(e);
                m += se.kronecker(&se) * c;
            }
        }
        Ok(ExpectedKron { m, n, model: KronModel::EdgeMask { p } })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KronModel {
    EdgeMask { p: f64 },
    NodeSelection { p: f64 },
}

/// An `N² × N²` expectation kernel acting on column-stacked matrices.
#[derive(Debug, Clone)]
pub struct ExpectedKron {
    pub m: Mat,
    pub n: usize,
    pub model: KronModel,
}

impl ExpectedKron {
    /// `unvec(K vec(M))`.
    pub fn apply(&self, m: &Mat) -> Result<Mat> {
        if m.nrows() != self.n || m.ncols() != self.n {
            return Err(Error::Dimension { expected: self.n, got: m.nrows() });
        }
        Ok(unvec(&(&self.m * vec_of(m)), self.n))
    }
}

/// `E[P ⊗ P]` for i.i.d. Bernoulli(p) node selection: diagonal with `p` on matching pairs
/// and `p²` elsewhere.
pub fn expected_kron_selection(n: usize, p: f64) -> Result<ExpectedKron> {
    check_kron_size(n)?;
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(format!("node probability {p} outside (0, 1]")));
    }
    let mut m = Mat::zeros(n * n, n * n);
    for j in 0..n {
        for i in 0..n {
            let idx = j * n + i;
            m[(idx, idx)] = if i == j { p } else { p * p };
        }
    }
    Ok(ExpectedKron { m, n, model: KronModel::NodeSelection { p } })
}

/// One conjugation step `M_l = E[Sᵀ M_{l−1} S]`.
pub fn expected_conjugation(model: &EdgeModel, m_prev: &Mat) -> Result<Mat> {
    if m_prev.nrows() != model.n() || m_prev.ncols() != model.n() {
        return Err(Error::Dimension { expected: model.n(), got: m_prev.nrows() });
    }
    Ok(model.conj(m_prev))
}

/// `E[Φ_{t:τ1−1}ᵀ Φ_{t:τ2−1}]` with `Φ_{t:τ−1} = S_{τ−1} ⋯ S_t` (identity when `τ = t`).
pub fn expected_cross_gram(model: &EdgeModel, t: usize, tau1: usize, tau2: usize) -> Result<Mat> {
    if tau1 < t || tau2 < t {
        return Err(Error::invalid(format!("τ1={tau1}, τ2={tau2} must be ≥ t={t}")));
    }
    let sbar = model.mean();
    let gap = tau1.abs_diff(tau2);
    let mut m = crate::linalg::mat_pow(&sbar, gap);
    if tau1 > tau2 {
        m = m.transpose();
    }
    for _ in 0..(tau1.min(tau2) - t) {
        m = model.conj(&m);
    }
    Ok(m)
}

/// `E[G_t]` for `t = 1..=T` (vector index `t − 1`) where `G_t = H_tᵀH_t` and
/// `H_t = Σ_{τ=t}^{T} φ_τ Φ_{t:τ−1}`. Backward recursion:
/// `E[G_t] = φ_t² I + φ_t (H̄_{t+1} S̄ + S̄ᵀ H̄_{t+1}ᵀ) + E[S_tᵀ E[G_{t+1}] S_t]`.
pub fn expected_fir_grams(model: &EdgeModel, coeffs: &[f64]) -> Vec<Mat> {
    let n = model.n();
    let t_max = coeffs.len().saturating_sub(1);
    if t_max == 0 {
        return Vec::new();
    }
    let sbar = model.mean();
    let id = Mat::identity(n, n);
    let mut grams = vec![Mat::zeros(n, n); t_max];
    let mut hbar = &id * coeffs[t_max];
    let mut g = &id * coeffs[t_max].powi(2);
    grams[t_max - 1] = g.clone();
    for t in (1..t_max).rev() {
        let phi = coeffs[t];
        let hs = &hbar * &sbar;
        g = &id * (phi * phi) + (&hs + hs.transpose()) * phi + model.conj(&g);
        hbar = &id * phi + hs;
        grams[t - 1] = g.clone();
    }
    grams
}

/// The same Grams assembled term by term from [`expected_cross_gram`].
pub fn expected_fir_grams_direct(model: &EdgeModel, coeffs: &[f64]) -> Result<Vec<Mat>> {
    let n = model.n();
    let t_max = coeffs.len().saturating_sub(1);
    let mut out = Vec::with_capacity(t_max);
    for t in 1..=t_max {
        let mut g = Mat::zeros(n, n);
        for tau1 in t..=t_max {
            for tau2 in t..=t_max {
                g += expected_cross_gram(model, t, tau1, tau2)? * (coeffs[tau1] * coeffs[tau2]);
            }
        }
        out.push(g);
    }
    Ok(out)
}

/// Grams `G_t = H_tᵀ H_t`, `H_t = Σ_{τ=t}^{T} φ_τ S^{τ−t}`, for a fixed operator.
pub fn fir_grams(s: &Mat, coeffs: &[f64]) -> Vec<Mat> {
    let n = s.nrows();
    let t_max = coeffs.len().saturating_sub(1);
    let id = Mat::identity(n, n);
    let mut grams = vec![Mat::zeros(n, n); t_max];
    let mut h = Mat::zeros(n, n);
    for t in (1..=t_max).rev() {
        h = &id * coeffs[t] + &h * s;
        grams[t - 1] = h.transpose() * &h;
    }
    grams
}

/// Spectral-norm bound `1/(1 − |ψ|²ρ²)` shared by the random-graph and asynchronous Gramians.
pub fn gramian_norm_bound(psi: Complex64, rho: f64) -> f64 {
    1.0 / (1.0 - psi.norm_sqr() * rho * rho)
}

/// `W_Φ = |ψ|² E[S_tᵀ W_Φ S_t] + I` by fixed-point iteration with analytic conjugation.
pub fn solve_w_phi(model: &EdgeModel, psi: Complex64) -> Result<LyapunovResult> {
    let g = psi.norm() * model.rho();
    if g >= 1.0 {
        return Err(Error::Unstable(format!("|ψ|·ρ = {g:.6} ≥ 1; the series does not contract")));
    }
    let n = model.n();
    let a = psi.norm_sqr();
    let id = Mat::identity(n, n);
    let mut w = id.clone();
    for it in 1..=MAX_FIXED_POINT_ITERS {
        let next = model.conj(&w) * a + &id;
        let change = (&next - &w).norm();
        w = next;
        if change <= FIXED_POINT_TOL * w.norm().max(1.0) {
            w = (&w + w.transpose()) * 0.5;
            let residual = (&w - model.conj(&w) * a - &id).norm();
            return Ok(LyapunovResult { w, residual, method: SolveMethod::FixedPoint, iterations: it });
        }
        if !change.is_finite() {
            return Err(Error::Unstable("W_Φ iteration diverged".into()));
        }
    }
    let change = (model.conj(&w) * a + &id - &w).norm();
    Err(Error::NoConvergence { iterations: MAX_FIXED_POINT_ITERS, change })
}

/// Gramian of the node-asynchronous recursion together with `E[P W_P P]`.
#[derive(Debug, Clone)]
pub struct AsyncGramian {
    pub w: LyapunovResult<Complex64>,
    pub pwp: CMat,
}

/// `E[P W P] = p² W + (p − p²) diag(W)`.
pub fn expected_selection_conj(w: &CMat, p: f64) -> CMat {
    let mut out = w * Complex64::new(p * p, 0.0);
    let c = p - p * p;
    for i in 0..w.nrows() {
        out[(i, i)] += w[(i, i)] * c;
    }
    out
}

/// `E[AᴴWA]` with `A = I + P C`, `C = ψS − I`.
fn async_conj(c: &CMat, ch: &CMat, w: &CMat, p: f64) -> CMat {
    let pc = Complex64::new(p, 0.0);
    let q = expected_selection_conj(w, p);
    w + (ch * w + w * c) * pc + ch * q * c
}

/// `W_P = E[(I + Cᴴ P) W_P (I + P C)] + I` for `C = ψS − I`.
pub fn solve_w_p(s: &Mat, psi: Complex64, p: f64) -> Result<AsyncGramian> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(format!("node probability {p} outside (0, 1]")));
    }
    let norm = psi.norm() * spectral_norm(s);
    if norm >= 1.0 {
        return Err(Error::Unstable(format!("‖ψS‖₂ = {norm:.6} ≥ 1")));
    }
    let eps = 1.0 - p + p * norm * norm;
    if eps >= 1.0 {
        return Err(Error::Unstable(format!("contraction factor {eps} ≥ 1")));
    }
    let n = s.nrows();
    let id = CMat::identity(n, n);
    let c = to_complex(s) * psi - &id;
    let ch = c.adjoint();
    let mut w = id.clone();
    for it in 1..=MAX_FIXED_POINT_ITERS {
        let next = async_conj(&c, &ch, &w, p) + &id;
        let change = (&next - &w).norm();
        w = next;
        if change <= FIXED_POINT_TOL * w.norm().max(1.0) {
            w = (&w + w.adjoint()) * Complex64::new(0.5, 0.0);
            let residual = (&w - async_conj(&c, &ch, &w, p) - &id).norm();
            let pwp = expected_selection_conj(&w, p);
            return Ok(AsyncGramian {
                w: LyapunovResult { w, residual, method: SolveMethod::FixedPoint, iterations: it },
                pwp,
            });
        }
        if !change.is_finite() {
            return Err(Error::Unstable("W_P iteration diverged".into()));
        }
    }
    let change = (async_conj(&c, &ch, &w, p) + &id - &w).norm();
    Err(Error::NoConvergence { iterations: MAX_FIXED_POINT_ITERS, change })
}

/// Vectorized route for `W_P` using `E[Aᵀ⊗Aᴴ] = I + p(Cᵀ⊗I + I⊗Cᴴ) + (Cᵀ⊗Cᴴ) E[P⊗P]`.
pub fn solve_w_p_vectorized(s: &Mat, psi: Complex64, p: f64) -> Result<CMat> {
    let n = s.nrows();
    let sel = expected_kron_selection(n, p)?;
    let id = CMat::identity(n, n);
    let c = to_complex(s) * psi - &id;
    let ct = c.transpose();
    let ch = c.adjoint();
    let ekp = to_complex(&sel.m);
    let kernel = CMat::identity(n * n, n * n)
        + (ct.kronecker(&id) + id.kronecker(&ch)) * Complex64::new(p, 0.0)
        + ct.kronecker(&ch) * ekp;
    let sys = CMat::identity(n * n, n * n) - kernel;
    let sol = sys
        .lu()
        .solve(&vec_of(&id))
        .ok_or_else(|| Error::Unstable("singular vectorized asynchronous system".into()))?;
    Ok(unvec(&sol, n))
}

/// `W_ξ = (𝔅𝒜)ᵀ W_ξ (𝔅𝒜) + I`.
pub fn solve_w_xi(a_script: &Mat, b_script: &Mat) -> Result<LyapunovResult> {
    if a_script.shape() != b_script.shape() || !a_script.is_square() {
        return Err(Error::Dimension { expected: a_script.nrows(), got: b_script.nrows() });
    }
    smith_doubling(&(b_script * a_script))
}
