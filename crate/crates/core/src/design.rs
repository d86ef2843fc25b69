//! Noise-gain regularizers and regularized low-pass filter design.

use nalgebra::SymmetricEigen;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{FirSpec, IirBranch, IirSpec};
use crate::graphs::ShiftOperator;
use crate::linalg::{Mat, Vector};

pub const PSI_MAG2_MAX: f64 = 0.95;
pub const PHI_MAG2_MAX: f64 = 2.0;
pub const MULTI_STARTS: usize = 8;

/// Sampled target response `h(λ_m)` with a mean-squared error tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignTarget {
    pub grid: Vec<f64>,
    pub response: Vec<f64>,
    pub cutoff: f64,
    pub tolerance: f64,
}

impl DesignTarget {
    /// Ideal low-pass `h(λ) = 1` for `λ < λ_c`, sampled uniformly on `[0, 1]`.
    pub fn lowpass(cutoff: f64, points: usize, tolerance: f64) -> Result<Self> {
        if points < 2 {
            return Err(Error::invalid("design grid needs at least two points"));
        }
        let grid: Vec<f64> = (0..points).map(|m| m as f64 / (points - 1) as f64).collect();
        let response = grid.iter().map(|&l| if l < cutoff { 1.0 } else { 0.0 }).collect();
        Self::new(grid, response, cutoff, tolerance)
    }

    pub fn new(grid: Vec<f64>, response: Vec<f64>, cutoff: f64, tolerance: f64) -> Result<Self> {
        if grid.len() != response.len() || grid.is_empty() {
            return Err(Error::invalid("grid and response must be nonempty and of equal length"));
        }
        if grid.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid("design grid must be sorted ascending"));
        }
        if !(tolerance >= 0.0) {
            return Err(Error::invalid("design tolerance must be nonnegative"));
        }
        Ok(DesignTarget { grid, response, cutoff, tolerance })
    }

    /// Mean squared deviation of `h` over the grid.
    pub fn error_of(&self, h: impl Fn(f64) -> f64) -> f64 {
        let s: f64 = self.grid.iter().zip(&self.response).map(|(&l, &r)| (h(l) - r).powi(2)).sum();
        s / self.grid.len() as f64
    }

    fn vandermonde(&self, order: usize) -> Mat {
        Mat::from_fn(self.grid.len(), order + 1, |m, t| self.grid[m].powi(t as i32))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    FirDeterministic,
    IirDeterministic,
    FirRandom,
    IirRandom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizerValue {
    pub value: f64,
    /// Gradient w.r.t. `φ` (FIR) or `[Re ψ_k, Im ψ_k]` per branch (IIR).
    pub gradient: Vec<f64>,
    pub kind: RegularizerKind,
}

/// `Σ_t V_{t−1}ᵀ V_{t−1}`, where column `τ ≥ t` of `V_{t−1}` is `vec(S^{τ−t+1})`.
pub fn fir_det_regularizer_matrix(s: &Mat, order: usize) -> Mat {
    let mut pows = Vec::with_capacity(order + 1);
    pows.push(Mat::identity(s.nrows(), s.ncols()));
    for k in 1..=order {
        pows.push(&pows[k - 1] * s);
    }
    let gram = Mat::from_fn(order + 1, order + 1, |a, b| pows[a].dot(&pows[b]));
    Mat::from_fn(order + 1, order + 1, |i, j| (1..=i.min(j)).map(|t| gram[(i - t + 1, j - t + 1)]).sum())
}

/// Quadratic regularizer summing the FIR noise gains `tr(G_{t−1} S Sᵀ)`.
pub fn reg_fir_det(s: &Mat, phi: &[f64]) -> Result<RegularizerValue> {
    if phi.len() < 2 {
        return Err(Error::invalid("regularizer needs T ≥ 1"));
    }
    let m = fir_det_regularizer_matrix(s, phi.len() - 1);
    Ok(quadratic_value(&m, phi, RegularizerKind::FirDeterministic))
}

fn quadratic_value(m: &Mat, phi: &[f64], kind: RegularizerKind) -> RegularizerValue {
    let v = Vector::from_column_slice(phi);
    let mv = m * &v;
    RegularizerValue { value: v.dot(&mv), gradient: (2.0 * mv).iter().copied().collect(), kind }
}

/// Entries `p^{|i−j|} ρ^{i+j−2t}` summed over `t` for `i, j ≥ t`.
pub fn fir_random_regularizer_matrix(p: f64, rho: f64, order: usize) -> Mat {
    Mat::from_fn(order + 1, order + 1, |i, j| {
        (1..=i.min(j))
            .map(|t| p.powi(i.abs_diff(j) as i32) * rho.powi((i + j - 2 * t) as i32))
            .sum()
    })
}

/// Bound regularizer on `|φ_t|` for Bernoulli edge sampling.
pub fn reg_fir_random(p: f64, rho: f64, phi: &[f64]) -> Result<RegularizerValue> {
    if !(0.0..=1.0).contains(&p) || !(rho > 0.0) {
        return Err(Error::invalid("need p ∈ [0, 1] and ρ > 0"));
    }
    if phi.len() < 2 {
        return Err(Error::invalid("regularizer needs T ≥ 1"));
    }
    let m = fir_random_regularizer_matrix(p, rho, phi.len() - 1);
    let abs: Vec<f64> = phi.iter().map(|v| v.abs()).collect();
    let mut r = quadratic_value(&m, &abs, RegularizerKind::FirRandom);
    for (g, v) in r.gradient.iter_mut().zip(phi) {
        *g *= v.signum();
    }
    Ok(r)
}

/// Spectral form of `Σ_k 1⃗ᵀ (I − |ψ_k|² S⊗S)⁻¹ 1⃗` with `1⃗ = vec(I)`.
#[derive(Debug, Clone)]
pub struct IirDetRegularizer {
    /// `(λ_a λ_b, weight)` with weight `[UᵀU]_ab [U⁻¹U⁻ᵀ]_ab`.
    terms: Vec<(Complex64, Complex64)>,
    rho: f64,
    n: usize,
}

impl IirDetRegularizer {
    pub fn new(op: &ShiftOperator) -> Result<Self> {
        let evd = op.evd()?;
        let n = op.n();
        let utu = evd.u.transpose() * &evd.u;
        let uiuit = &evd.u_inv * evd.u_inv.transpose();
        let mut terms = Vec::with_capacity(n * n);
        for a in 0..n {
            for b in 0..n {
                terms.push((evd.eigenvalues[a] * evd.eigenvalues[b], utu[(a, b)] * uiuit[(a, b)]));
            }
        }
        Ok(IirDetRegularizer { terms, rho: op.spectral_radius, n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// `Σ_ab w_ab / (1 − m λ_a λ_b)` and its derivative in `m = |ψ|²`.
    fn branch(&self, m: f64) -> (f64, f64) {
        let one = Complex64::new(1.0, 0.0);
        let (mut v, mut d) = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
        for &(ll, w) in &self.terms {
            let den = one - ll * m;
            v += w / den;
            d += w * ll / (den * den);
        }
        (v.re, d.re)
    }

    pub fn eval(&self, psis: &[Complex64]) -> Result<RegularizerValue> {
        let mut value = 0.0;
        let mut gradient = Vec::with_capacity(2 * psis.len());
        for psi in psis {
            if psi.norm() * self.rho >= 1.0 {
                return Err(Error::Unstable(format!("|ψ|·ρ ≥ 1 for ψ = {psi}")));
            }
            let (v, d) = self.branch(psi.norm_sqr());
            value += v;
            gradient.push(2.0 * psi.re * d);
            gradient.push(2.0 * psi.im * d);
        }
        Ok(RegularizerValue { value, gradient, kind: RegularizerKind::IirDeterministic })
    }
}

pub fn reg_iir_det(op: &ShiftOperator, psis: &[Complex64]) -> Result<RegularizerValue> {
    IirDetRegularizer::new(op)?.eval(psis)
}

/// Same quantity through the `N² × N²` inverse; for small `N` only.
pub fn reg_iir_det_kron(s: &Mat, psis: &[Complex64]) -> Result<f64> {
    let n = s.nrows();
    if n > crate::gramians::KRON_MAX_N.min(40) {
        return Err(Error::TooLarge(format!("Kronecker regularizer for N = {n}")));
    }
    let st = s.transpose();
    let kron = st.kronecker(&st);
    let one = crate::linalg::vec_of(&Mat::identity(n, n));
    let mut total = 0.0;
    for psi in psis {
        let a = Mat::identity(n * n, n * n) - &kron * psi.norm_sqr();
        let x = a.lu().solve(&one).ok_or_else(|| Error::Unstable("singular Kronecker system".into()))?;
        total += one.dot(&x);
    }
    Ok(total)
}

/// `Σ_k |ψ_k|² / (1 − |ψ_k|² ρ²)`.
pub fn reg_iir_random(psis: &[Complex64], rho: f64) -> Result<RegularizerValue> {
    let mut value = 0.0;
    let mut gradient = Vec::with_capacity(2 * psis.len());
    for psi in psis {
        let m = psi.norm_sqr();
        let den = 1.0 - m * rho * rho;
        if den <= 0.0 {
            return Err(Error::Unstable(format!("|ψ|·ρ ≥ 1 for ψ = {psi}")));
        }
        value += m / den;
        let d = 1.0 / (den * den);
        gradient.push(2.0 * psi.re * d);
        gradient.push(2.0 * psi.im * d);
    }
    Ok(RegularizerValue { value, gradient, kind: RegularizerKind::IirRandom })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DesignReport {
    pub error: f64,
    pub regularizer: f64,
    pub objective: f64,
    /// Tikhonov weight at the solution (FIR) or the supplied `γ` (IIR).
    pub gamma: f64,
    pub active_constraints: Vec<String>,
    pub iterations: usize,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, Copy)]
pub enum FirDesignMode<'a> {
    Deterministic(&'a Mat),
    /// Bernoulli edge sampling: the error is measured on `pᵗ φ_t`.
    Random { p: f64, rho: f64 },
}

struct FirProblem {
    /// `V / √M`, column-scaled by `pᵗ` in the random mode.
    a: Mat,
    b: Vector,
    reg: Mat,
    absolute: bool,
}

impl FirProblem {
    fn error(&self, phi: &Vector) -> f64 {
        (&self.a * phi - &self.b).norm_squared()
    }

    fn regularizer(&self, phi: &Vector) -> f64 {
        let v = if self.absolute { phi.abs() } else { phi.clone() };
        v.dot(&(&self.reg * &v))
    }

    /// `argmin ‖Aφ − b‖² + γ φᵀ R_s φ` with `R_s = diag(s) R diag(s)`, via the stacked system.
    fn ridge(&self, gamma: f64, signs: Option<&[f64]>) -> Result<Vector> {
        let k = self.reg.nrows();
        let mut r = self.reg.clone();
        if let Some(s) = signs {
            for i in 0..k {
                for j in 0..k {
                    r[(i, j)] *= s[i] * s[j];
                }
            }
        }
        let eig = SymmetricEigen::new(r);
        let mut root = Mat::zeros(k, k);
        for (c, &ev) in eig.eigenvalues.iter().enumerate() {
            let sq = (ev.max(0.0) * gamma).sqrt();
            for i in 0..k {
                root[(c, i)] = sq * eig.eigenvectors[(i, c)];
            }
        }
        let m = self.a.nrows();
        let mut stacked = Mat::zeros(m + k, k);
        stacked.rows_mut(0, m).copy_from(&self.a);
        stacked.rows_mut(m, k).copy_from(&root);
        let mut rhs = Vector::zeros(m + k);
        rhs.rows_mut(0, m).copy_from(&self.b);
        let svd = stacked.svd(true, true);
        let phi = svd.solve(&rhs, 1e-14).map_err(|e| Error::Eigen(format!("SVD solve: {e}")))?;
        Ok(phi)
    }

    fn solve(&self, gamma: f64) -> Result<Vector> {
        if !self.absolute {
            return self.ridge(gamma, None);
        }
        // Fixed point on the sign pattern of φ; keeps the best iterate.
        let mut phi = self.ridge(0.0, None)?;
        let mut best = (f64::INFINITY, phi.clone());
        for _ in 0..50 {
            let signs: Vec<f64> = phi.iter().map(|v| if *v < 0.0 { -1.0 } else { 1.0 }).collect();
            let next = self.ridge(gamma, Some(&signs))?;
            let obj = self.error(&next) + gamma * self.regularizer(&next);
            if obj < best.0 {
                best = (obj, next.clone());
            }
            let same = next.iter().zip(&signs).all(|(v, s)| *v == 0.0 || v.signum() == *s);
            phi = next;
            if same {
                break;
            }
        }
        Ok(best.1)
    }
}

fn fir_problem(target: &DesignTarget, order: usize, mode: FirDesignMode) -> Result<FirProblem> {
    let scale = 1.0 / (target.grid.len() as f64).sqrt();
    let mut a = target.vandermonde(order) * scale;
    let b = Vector::from_column_slice(&target.response) * scale;
    let (reg, absolute) = match mode {
        FirDesignMode::Deterministic(s) => (fir_det_regularizer_matrix(s, order), false),
        FirDesignMode::Random { p, rho } => {
            if !(0.0..=1.0).contains(&p) || !(rho > 0.0) {
                return Err(Error::invalid("need p ∈ [0, 1] and ρ > 0"));
            }
            for t in 0..=order {
                let f = p.powi(t as i32);
                a.column_mut(t).scale_mut(f);
            }
            (fir_random_regularizer_matrix(p, rho, order), true)
        }
    };
    Ok(FirProblem { a, b, reg, absolute })
}

const GAMMA_MAX: f64 = 1e12;

/// Minimizes the noise-gain regularizer subject to `mean (Vφ − h)² ≤ δ`.
///
/// The Lagrangian solution `φ(γ)` has error increasing in the Tikhonov weight `γ`, so the
/// active constraint is located by bisection on `log γ`.
pub fn design_fir(target: &DesignTarget, order: usize, mode: FirDesignMode) -> Result<(FirSpec, DesignReport)> {
    if order < 1 {
        return Err(Error::invalid("design needs T ≥ 1"));
    }
    let prob = fir_problem(target, order, mode)?;
    let delta = target.tolerance;
    let ls = prob.solve(0.0)?;
    let ls_err = prob.error(&ls);
    if ls_err > delta {
        return Err(Error::Infeasible(format!(
            "least-squares error {ls_err:.6e} exceeds tolerance {delta:.6e} at T = {order}"
        )));
    }
    let mut lo = (0.0, ls);
    let mut hi_gamma = None;
    let mut g = 1e-10;
    let mut iterations = 0;
    while g <= GAMMA_MAX {
        iterations += 1;
        let phi = prob.solve(g)?;
        if prob.error(&phi) > delta {
            hi_gamma = Some(g);
            break;
        }
        lo = (g, phi);
        g *= 10.0;
    }
    if let Some(mut hi) = hi_gamma {
        for _ in 0..200 {
            let mid = if lo.0 == 0.0 { hi / 10.0 } else { (lo.0 * hi).sqrt() };
            if lo.0 > 0.0 && hi / lo.0 - 1.0 < 1e-13 {
                break;
            }
            iterations += 1;
            let phi = prob.solve(mid)?;
            let err = prob.error(&phi);
            if err > delta {
                hi = mid;
            } else {
                lo = (mid, phi);
                if delta - err <= 1e-12 * delta.max(1e-300) {
                    break;
                }
            }
        }
    }
    let (gamma, phi) = lo;
    let error = prob.error(&phi);
    let regularizer = prob.regularizer(&phi);
    let mut active = Vec::new();
    if hi_gamma.is_some() && (delta - error) <= 1e-6 * delta.max(1e-12) {
        active.push("design_error".to_string());
    }
    let report = DesignReport {
        error,
        regularizer,
        objective: regularizer,
        gamma,
        active_constraints: active,
        iterations,
        warning: None,
    };
    Ok((FirSpec::new(phi.iter().copied().collect())?, report))
}

/// Constrained feasibility: error of `φ(γ)` for a given Tikhonov weight.
pub fn fir_tikhonov(target: &DesignTarget, order: usize, mode: FirDesignMode, gamma: f64) -> Result<(FirSpec, f64, f64)> {
    let prob = fir_problem(target, order, mode)?;
    let phi = prob.solve(gamma)?;
    let (e, r) = (prob.error(&phi), prob.regularizer(&phi));
    Ok((FirSpec::new(phi.iter().copied().collect())?, e, r))
}

/// Regularizer used by the IIR design objective `error + γ R`.
#[derive(Debug, Clone)]
pub enum IirDesignMode {
    /// Exact gain on a fixed shift operator, normalized per node.
    Deterministic(IirDetRegularizer),
    /// Bound for random graphs or asynchronous updates.
    Random { rho: f64 },
}

impl IirDesignMode {
    pub fn deterministic(op: &ShiftOperator) -> Result<Self> {
        Ok(IirDesignMode::Deterministic(IirDetRegularizer::new(op)?))
    }

    pub fn value(&self, psis: &[Complex64]) -> Result<f64> {
        match self {
            IirDesignMode::Deterministic(r) => Ok(r.eval(psis)?.value / r.n() as f64),
            IirDesignMode::Random { rho } => Ok(reg_iir_random(psis, *rho)?.value),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Slot {
    /// `ψ = 0`, free real `φ`.
    Pinned,
    Real,
    /// Conjugate pair represented by its upper member, in polar coordinates.
    Pair,
}

/// Maps branches to a box-constrained parameter vector. Pairs use `(|ψ|, arg ψ, |φ|, arg φ)` so
/// the magnitude limits become simple bounds.
struct IirLayout {
    slots: Vec<Slot>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl IirLayout {
    fn from_spec(spec: &IirSpec) -> (Self, Vec<f64>) {
        let (pmax, fmax) = (PSI_MAG2_MAX.sqrt(), PHI_MAG2_MAX.sqrt());
        let inf = f64::INFINITY;
        let mut layout = IirLayout { slots: Vec::new(), lo: Vec::new(), hi: Vec::new() };
        let mut x = Vec::new();
        let mut push = |l: &mut IirLayout, v: f64, lo: f64, hi: f64| {
            x.push(v);
            l.lo.push(lo);
            l.hi.push(hi);
        };
        for b in spec.branches() {
            let real = b.psi.im == 0.0 && b.phi.im == 0.0;
            if real && b.psi.re == 0.0 {
                layout.slots.push(Slot::Pinned);
                push(&mut layout, b.phi.re, -fmax, fmax);
            } else if real {
                layout.slots.push(Slot::Real);
                push(&mut layout, b.psi.re, -pmax, pmax);
                push(&mut layout, b.phi.re, -fmax, fmax);
            } else if b.psi.im > 0.0 || (b.psi.im == 0.0 && b.phi.im > 0.0) {
                layout.slots.push(Slot::Pair);
                push(&mut layout, b.psi.norm(), 0.0, pmax);
                push(&mut layout, b.psi.arg(), 0.0, std::f64::consts::PI);
                push(&mut layout, b.phi.norm(), 0.0, fmax);
                push(&mut layout, b.phi.arg(), -inf, inf);
            }
        }
        (layout, x)
    }

    fn branches(&self, x: &[f64]) -> Vec<IirBranch> {
        let mut out = Vec::new();
        let mut k = 0;
        for s in &self.slots {
            match s {
                Slot::Pinned => {
                    out.push(IirBranch { psi: Complex64::new(0.0, 0.0), phi: Complex64::new(x[k], 0.0) });
                    k += 1;
                }
                Slot::Real => {
                    out.push(IirBranch { psi: Complex64::new(x[k], 0.0), phi: Complex64::new(x[k + 1], 0.0) });
                    k += 2;
                }
                Slot::Pair => {
                    let psi = Complex64::from_polar(x[k], x[k + 1]);
                    let phi = Complex64::from_polar(x[k + 2], x[k + 3]);
                    out.push(IirBranch { psi, phi });
                    out.push(IirBranch { psi: psi.conj(), phi: phi.conj() });
                    k += 4;
                }
            }
        }
        out
    }

    fn project(&self, x: &mut [f64]) {
        for ((v, lo), hi) in x.iter_mut().zip(&self.lo).zip(&self.hi) {
            *v = v.clamp(*lo, *hi);
        }
    }

    /// Variables held at a bound by a gradient pointing outward.
    fn blocked(&self, x: &[f64], g: &[f64]) -> Vec<bool> {
        (0..x.len())
            .map(|i| (x[i] <= self.lo[i] && g[i] > 0.0) || (x[i] >= self.hi[i] && g[i] < 0.0))
            .collect()
    }

    fn active(&self, x: &[f64]) -> Vec<String> {
        let mut out = Vec::new();
        let tol = 1e-9;
        for b in self.branches(x) {
            if b.psi.im < 0.0 {
                continue;
            }
            if (b.psi.norm_sqr() - PSI_MAG2_MAX).abs() <= tol {
                out.push(format!("|psi|^2 <= {PSI_MAG2_MAX} at psi = {}", b.psi));
            }
            if (b.phi.norm_sqr() - PHI_MAG2_MAX).abs() <= tol {
                out.push(format!("|phi|^2 <= {PHI_MAG2_MAX} at psi = {}", b.psi));
            }
        }
        out
    }
}

fn iir_error(target: &DesignTarget, branches: &[IirBranch]) -> f64 {
    target.error_of(|l| {
        branches
            .iter()
            .map(|b| (b.phi / (Complex64::new(1.0, 0.0) - b.psi * l)).re)
            .sum()
    })
}

struct IirObjective<'a> {
    target: &'a DesignTarget,
    layout: &'a IirLayout,
    mode: &'a IirDesignMode,
    gamma: f64,
}

impl IirObjective<'_> {
    fn eval(&self, x: &[f64]) -> f64 {
        let br = self.layout.branches(x);
        let err = iir_error(self.target, &br);
        if self.gamma == 0.0 {
            return err;
        }
        let psis: Vec<Complex64> = br.iter().map(|b| b.psi).collect();
        match self.mode.value(&psis) {
            Ok(r) => err + self.gamma * r,
            Err(_) => f64::INFINITY,
        }
    }

    /// Second differences with a step large enough to keep round-off well below curvature.
    fn hessian(&self, x: &[f64]) -> Mat {
        let n = x.len();
        let h = 1e-4;
        let mut xp = x.to_vec();
        let mut at = |d: &[(usize, f64)]| {
            for &(i, v) in d {
                xp[i] += v;
            }
            let f = self.eval(&xp);
            for &(i, v) in d {
                xp[i] -= v;
            }
            f
        };
        let f0 = at(&[]);
        let mut hm = Mat::zeros(n, n);
        for i in 0..n {
            hm[(i, i)] = (at(&[(i, h)]) - 2.0 * f0 + at(&[(i, -h)])) / (h * h);
            for j in 0..i {
                let v = (at(&[(i, h), (j, h)]) - at(&[(i, h), (j, -h)]) - at(&[(i, -h), (j, h)])
                    + at(&[(i, -h), (j, -h)]))
                    / (4.0 * h * h);
                hm[(i, j)] = v;
                hm[(j, i)] = v;
            }
        }
        hm
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let h = 1e-7;
        let mut xp = x.to_vec();
        (0..x.len())
            .map(|i| {
                let v = x[i];
                xp[i] = v + h;
                let fp = self.eval(&xp);
                xp[i] = v - h;
                let fm = self.eval(&xp);
                xp[i] = v;
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }
}

/// Projected Newton on the box with a finite-difference Hessian and a steepest-descent fallback.
/// Blocked variables are frozen; every accepted step lowers the objective (Armijo backtracking
/// along the projected path).
fn projected_newton(obj: &IirObjective, mut x: Vec<f64>, max_iter: usize) -> (Vec<f64>, f64, usize) {
    obj.layout.project(&mut x);
    let mut f = obj.eval(&x);
    let mut g = obj.gradient(&x);
    let mut iters = 0;
    for _ in 0..max_iter {
        let blocked = obj.layout.blocked(&x, &g);
        let pg: f64 = g.iter().zip(&blocked).filter(|(_, b)| !**b).map(|(v, _)| v * v).sum::<f64>().sqrt();
        if pg < 1e-10 {
            break;
        }
        iters += 1;
        let mut accepted = None;
        for attempt in 0..2 {
            let dir: Vec<f64> = if attempt == 0 {
                newton_direction(&obj.hessian(&x), &g, &blocked)
            } else {
                g.iter().zip(&blocked).map(|(v, b)| if *b { 0.0 } else { -v }).collect()
            };
            let slope: f64 = dir.iter().zip(&g).map(|(d, gi)| d * gi).sum();
            if slope >= 0.0 {
                continue;
            }
            let mut step = 1.0;
            while step > 1e-16 {
                let mut xn: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
                obj.layout.project(&mut xn);
                let decrease: f64 = g.iter().zip(xn.iter().zip(&x)).map(|(gi, (a, b))| gi * (b - a)).sum();
                let fnew = obj.eval(&xn);
                if fnew < f && f - fnew >= 1e-4 * decrease.max(0.0) {
                    accepted = Some((xn, fnew));
                    break;
                }
                step *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
        }
        let Some((xn, fnew)) = accepted else { break };
        let gn = obj.gradient(&xn);
        let rel = (f - fnew) / f.abs().max(1e-300);
        x = xn;
        f = fnew;
        g = gn;
        if rel < 1e-15 {
            break;
        }
    }
    (x, f, iters)
}

/// `−H_F⁻¹ g_F` on the free variables with eigenvalues lifted to keep the step a descent.
fn newton_direction(hess: &Mat, g: &[f64], blocked: &[bool]) -> Vec<f64> {
    let free: Vec<usize> = (0..g.len()).filter(|&i| !blocked[i]).collect();
    let k = free.len();
    let mut out = vec![0.0; g.len()];
    if k == 0 {
        return out;
    }
    let hf = Mat::from_fn(k, k, |a, b| hess[(free[a], free[b])]);
    let eig = SymmetricEigen::new(hf);
    let scale = eig.eigenvalues.amax().max(1e-300);
    let gf = Vector::from_iterator(k, free.iter().map(|&i| g[i]));
    let coords = eig.eigenvectors.transpose() * gf;
    let mut step = Vector::zeros(k);
    for (c, &ev) in eig.eigenvalues.iter().enumerate() {
        let lifted = ev.abs().max(1e-10 * scale);
        step += eig.eigenvectors.column(c) * (coords[c] / lifted);
    }
    for (a, &i) in free.iter().enumerate() {
        out[i] = -step[a];
    }
    out
}

/// Options for [`design_iir`].
#[derive(Debug, Clone, Copy)]
pub struct IirDesignOptions {
    pub gamma: f64,
    pub starts: usize,
    pub seed: u64,
    pub jitter: f64,
    pub max_iter: usize,
}

impl Default for IirDesignOptions {
    fn default() -> Self {
        IirDesignOptions { gamma: 0.0, starts: MULTI_STARTS, seed: 0, jitter: 0.05, max_iter: 500 }
    }
}

/// Local minimization of `error + γ R(ψ)` from `init` and jittered copies of it.
pub fn design_iir(
    target: &DesignTarget,
    init: &IirSpec,
    mode: &IirDesignMode,
    opts: IirDesignOptions,
) -> Result<(IirSpec, DesignReport)> {
    if !(opts.gamma >= 0.0) {
        return Err(Error::invalid("γ must be nonnegative"));
    }
    let (layout, x0) = IirLayout::from_spec(init);
    let obj = IirObjective { target, layout: &layout, mode, gamma: opts.gamma };
    let mut x_init = x0.clone();
    layout.project(&mut x_init);
    let f_init = obj.eval(&x_init);
    let starts: Vec<Vec<f64>> = (0..opts.starts.max(1))
        .map(|k| {
            if k == 0 {
                return x0.clone();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(k as u64);
            x0.iter().map(|v| v + rng.random_range(-opts.jitter..=opts.jitter)).collect()
        })
        .collect();
    let runs: Vec<(Vec<f64>, f64, usize)> =
        starts.into_par_iter().map(|s| projected_newton(&obj, s, opts.max_iter)).collect();
    let iterations = runs.iter().map(|r| r.2).sum();
    let best = runs
        .into_iter()
        .filter(|r| r.1.is_finite())
        .min_by(|a, b| a.1.total_cmp(&b.1).then_with(|| lex_cmp(&a.0, &b.0)));
    let (x, f, warning) = match best {
        Some((x, f, _)) if f <= f_init => (x, f, None),
        _ if f_init.is_finite() => (x_init, f_init, Some("no feasible descent; returning initializer".to_string())),
        _ => return Err(Error::Infeasible("initializer violates stability".into())),
    };
    let branches = layout.branches(&x);
    let psis: Vec<Complex64> = branches.iter().map(|b| b.psi).collect();
    let error = iir_error(target, &branches);
    let report = DesignReport {
        error,
        regularizer: mode.value(&psis)?,
        objective: f,
        gamma: opts.gamma,
        active_constraints: layout.active(&x),
        iterations,
        warning,
    };
    Ok((IirSpec::new(branches)?, report))
}

/// Largest `γ ∈ [0, γ_max]` (by bisection) whose design still meets the target tolerance.
pub fn tune_iir_gamma(
    target: &DesignTarget,
    init: &IirSpec,
    mode: &IirDesignMode,
    opts: IirDesignOptions,
    gamma_max: f64,
    steps: usize,
) -> Result<(IirSpec, DesignReport)> {
    let run = |g: f64| design_iir(target, init, mode, IirDesignOptions { gamma: g, ..opts });
    let mut best = run(0.0)?;
    if best.1.error > target.tolerance {
        return Err(Error::Infeasible(format!(
            "unregularized design error {:.6e} exceeds tolerance {:.6e}",
            best.1.error, target.tolerance
        )));
    }
    let hi_run = run(gamma_max)?;
    if hi_run.1.error <= target.tolerance {
        return Ok(hi_run);
    }
    let (mut lo, mut hi) = (0.0, gamma_max);
    for _ in 0..steps {
        let mid = 0.5 * (lo + hi);
        let r = run(mid)?;
        if r.1.error <= target.tolerance {
            lo = mid;
            best = r;
        } else {
            hi = mid;
        }
    }
    Ok(best)
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// Published non-regularized `K = 3` parallel design.
pub fn nonreg_iir_init() -> IirSpec {
    IirSpec::from_arrays(&[
        [0.0, 0.0, 1.0, 0.0],
        [-0.974, 0.0, -1.414, 0.0],
        [0.342, -0.913, 0.748, -0.893],
        [0.342, 0.913, 0.748, 0.893],
    ])
    .expect("valid coefficients")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gramians::{expected_fir_grams, fir_grams, EdgeModel};
    use crate::graphs::{gen_sensor_graph, Graph, ShiftKind};
    use crate::linalg::trace_product;
    use proptest::prelude::*;
    use rand::Rng;

    fn sensor(n: usize, seed: u64) -> ShiftOperator {
        ShiftOperator::build(&gen_sensor_graph(n, 0.5, seed).unwrap(), ShiftKind::NormalizedLaplacian).unwrap()
    }

    #[test]
    fn fir_det_trivial_values() {
        let s = sensor(5, 1).matrix;
        let r = reg_fir_det(&s, &[0.0, 1.0]).unwrap();
        assert!((r.value - trace_product(&s, &s.transpose())).abs() < 1e-12);
        assert_eq!(reg_fir_det(&s, &[0.0; 4]).unwrap().value, 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn fir_det_matches_direct_gain(seed in 0u64..500, phi in prop::collection::vec(-2.0..2.0f64, 2..7)) {
            let s = sensor(4, seed).matrix;
            let sst = &s * s.transpose();
            let direct: f64 = fir_grams(&s, &phi).iter().map(|g| trace_product(g, &sst)).sum();
            let r = reg_fir_det(&s, &phi).unwrap().value;
            prop_assert!((r - direct).abs() <= 1e-9 * direct.max(1.0));
        }
    }

    #[test]
    fn iir_det_trivial_values() {
        let op = sensor(6, 2);
        let r = reg_iir_det(&op, &[Complex64::new(0.0, 0.0)]).unwrap();
        assert!((r.value - 6.0).abs() < 1e-9);
        let one = ShiftOperator::custom(Mat::from_element(1, 1, 0.8)).unwrap();
        let r = reg_iir_det(&one, &[Complex64::new(0.5, 0.0)]).unwrap();
        assert!((r.value - 1.0 / (1.0 - 0.25 * 0.64)).abs() < 1e-12);
    }

    #[test]
    fn iir_det_closed_form_matches_kronecker_inverse() {
        for seed in 0..6 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Mat::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            let s = (&a + a.transpose()) * 0.5;
            let op = ShiftOperator::custom(s.clone()).unwrap();
            let psis = [Complex64::new(0.4 / op.spectral_radius, 0.2 / op.spectral_radius), Complex64::new(-0.7 / op.spectral_radius, 0.0)];
            let closed = reg_iir_det(&op, &psis).unwrap().value;
            let kron = reg_iir_det_kron(&s, &psis).unwrap();
            assert!((closed - kron).abs() <= 1e-8 * kron.abs().max(1.0), "{closed} vs {kron}");
        }
        // Non-symmetric but diagonalizable shift.
        let s = Mat::from_row_slice(3, 3, &[0.2, 0.5, 0.0, 0.0, -0.3, 0.4, 0.1, 0.0, 0.6]);
        let op = ShiftOperator::custom(s.clone()).unwrap();
        let psis = [Complex64::new(0.8, 0.3)];
        let closed = reg_iir_det(&op, &psis).unwrap().value;
        assert!((closed - reg_iir_det_kron(&s, &psis).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn iir_det_gradient_matches_differences() {
        let op = sensor(7, 3);
        let reg = IirDetRegularizer::new(&op).unwrap();
        let psis = [Complex64::new(-0.5, 0.3)];
        let g = reg.eval(&psis).unwrap().gradient;
        let h = 1e-6;
        let f = |z: Complex64| reg.eval(&[z]).unwrap().value;
        let gr = (f(psis[0] + h) - f(psis[0] - h)) / (2.0 * h);
        let gi = (f(psis[0] + Complex64::new(0.0, h)) - f(psis[0] - Complex64::new(0.0, h))) / (2.0 * h);
        assert!((g[0] - gr).abs() < 1e-5 && (g[1] - gi).abs() < 1e-5);
    }

    #[test]
    fn fir_random_values_and_bound() {
        assert_eq!(reg_fir_random(0.5, 1.0, &[0.0, 0.0, 0.0]).unwrap().value, 0.0);
        assert!((reg_fir_random(0.5, 1.0, &[0.0, -1.0]).unwrap().value - 1.0).abs() < 1e-15);
        let op = ShiftOperator::build(&Graph::path(3), ShiftKind::Laplacian).unwrap();
        let model = EdgeModel::new(&op, 0.5).unwrap();
        let rho = op.spectral_radius;
        let second = model.second_moment();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let phi: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let exact: f64 = expected_fir_grams(&model, &phi).iter().map(|g| trace_product(g, &second)).sum();
            let r = reg_fir_random(0.5, rho, &phi).unwrap().value;
            assert!(r * 3.0 * rho * rho >= exact * (1.0 - 1e-12), "{r} vs {exact}");
        }
    }

    #[test]
    fn iir_random_values() {
        assert_eq!(reg_iir_random(&[Complex64::new(0.0, 0.0)], 1.0).unwrap().value, 0.0);
        assert!((reg_iir_random(&[Complex64::new(0.5, 0.0)], 1.0).unwrap().value - 1.0 / 3.0).abs() < 1e-15);
        assert!(reg_iir_random(&[Complex64::new(1.0, 0.0)], 1.0).is_err());
        let a = reg_iir_random(&[Complex64::new(0.3, 0.1)], 1.0).unwrap().value;
        let b = reg_iir_random(&[Complex64::new(0.3, 0.2)], 1.0).unwrap().value;
        assert!(b > a);
    }

    #[test]
    fn all_pass_target_gives_unit_impulse() {
        let target = DesignTarget::new((0..50).map(|m| m as f64 / 49.0).collect(), vec![1.0; 50], 1.0, 1e-3).unwrap();
        let s = sensor(6, 4).matrix;
        let (f, rep) = design_fir(&target, 4, FirDesignMode::Deterministic(&s)).unwrap();
        assert!((f.coeffs()[0] - 1.0).abs() < 1e-9);
        assert!(f.coeffs()[1..].iter().all(|c| c.abs() < 1e-9));
        assert!(rep.error < 1e-15);
    }

    #[test]
    fn fir_design_hits_tolerance() {
        let target = DesignTarget::lowpass(0.5, 1000, 0.03).unwrap();
        let s = sensor(20, 5).matrix;
        let (_, rep) = design_fir(&target, 6, FirDesignMode::Deterministic(&s)).unwrap();
        assert!((rep.error - 0.03).abs() < 1e-6, "{rep:?}");
        assert_eq!(rep.active_constraints, vec!["design_error".to_string()]);
        let tight = DesignTarget::lowpass(0.5, 1000, 1e-4).unwrap();
        assert!(matches!(design_fir(&tight, 6, FirDesignMode::Deterministic(&s)), Err(Error::Infeasible(_))));
    }

    #[test]
    fn fir_design_monotone_in_tikhonov_weight() {
        let target = DesignTarget::lowpass(0.5, 400, 0.03).unwrap();
        let s = sensor(10, 6).matrix;
        let mut prev = (0.0, f64::INFINITY);
        for k in -6..=3 {
            let g = 10f64.powi(k);
            let (_, e, r) = fir_tikhonov(&target, 7, FirDesignMode::Deterministic(&s), g).unwrap();
            assert!(e >= prev.0 - 1e-14 && r <= prev.1 + 1e-12);
            prev = (e, r);
        }
    }

    #[test]
    fn random_fir_design_is_feasible() {
        let target = DesignTarget::lowpass(0.5, 1000, 0.03).unwrap();
        let (f, rep) = design_fir(&target, 6, FirDesignMode::Random { p: 0.8, rho: 1.0 }).unwrap();
        let scaled = f.scaled(0.8);
        let e = target.error_of(|l| scaled.response(l));
        assert!((e - rep.error).abs() < 1e-12 && e <= 0.03 + 1e-12);
        let r = reg_fir_random(0.8, 1.0, f.coeffs()).unwrap().value;
        assert!((r - rep.regularizer).abs() < 1e-9 * r.max(1.0));
    }

    #[test]
    fn iir_design_stationary_point_is_kept() {
        let target = DesignTarget::lowpass(0.5, 200, 0.055).unwrap();
        let mode = IirDesignMode::Random { rho: 1.0 };
        let opts = IirDesignOptions { starts: 1, ..Default::default() };
        let (first, r1) = design_iir(&target, &nonreg_iir_init(), &mode, opts).unwrap();
        let (second, r2) = design_iir(&target, &first, &mode, opts).unwrap();
        assert!(r2.objective <= r1.objective);
        for (a, b) in first.to_arrays().iter().zip(second.to_arrays()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-4, "{first:?} {second:?} {r1:?} {r2:?}");
            }
        }
    }

    #[test]
    fn iir_pareto_trace_is_monotone() {
        let target = DesignTarget::lowpass(0.5, 400, 0.055).unwrap();
        let op = sensor(16, 8);
        let mode = IirDesignMode::deterministic(&op).unwrap();
        let mut prev = (0.0, f64::INFINITY);
        for gamma in [0.0, 0.05, 0.2, 0.5] {
            let (_, rep) = design_iir(&target, &nonreg_iir_init(), &mode, IirDesignOptions { gamma, ..Default::default() })
                .unwrap();
            assert!(rep.error >= prev.0 - 1e-9 && rep.regularizer <= prev.1 + 1e-9, "γ = {gamma}: {rep:?}");
            prev = (rep.error, rep.regularizer);
        }
    }

    #[test]
    fn tuned_gamma_meets_tolerance() {
        let target = DesignTarget::lowpass(0.5, 200, 0.055).unwrap();
        let mode = IirDesignMode::Random { rho: 1.0 };
        let opts = IirDesignOptions { starts: 2, ..Default::default() };
        let (_, rep) = tune_iir_gamma(&target, &nonreg_iir_init(), &mode, opts, 2.0, 12).unwrap();
        assert!(rep.error <= 0.055 && rep.gamma > 0.0, "{rep:?}");
    }

    #[test]
    fn regularization_shrinks_real_pole() {
        let target = DesignTarget::lowpass(0.5, 1000, 0.055).unwrap();
        let op = sensor(24, 7);
        let mode = IirDesignMode::deterministic(&op).unwrap();
        let opts = IirDesignOptions { gamma: 0.2, ..Default::default() };
        let (spec, rep) = design_iir(&target, &nonreg_iir_init(), &mode, opts).unwrap();
        let real = spec.branches().iter().find(|b| b.psi.im == 0.0 && b.psi.re != 0.0).unwrap();
        assert!(real.psi.norm() < 0.974, "{spec:?}");
        for b in spec.branches() {
            assert!(b.psi.norm_sqr() <= PSI_MAG2_MAX + 1e-12 && b.phi.norm_sqr() <= PHI_MAG2_MAX + 1e-12);
        }
        assert!(rep.warning.is_none());
    }
}
