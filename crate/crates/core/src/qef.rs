//! Closed-form error-feedback coefficients and analytic noise-power predictions.
//!
//! Every scenario reduces to the same separable quadratic in the diagonal feedback matrix `D`:
//!
//! ```text
//! ζ(D) = σ²/N · ( g + Σ_i q_i |d_i|² − 2 Re(conj(d_i) c_i) )
//! ```
//!
//! where `g` is the noise gain without feedback, `q_i` the diagonal of the weighting Gramian
//! and `c_i` the cross term. The optimum is `d_i = c_i / q_i` and lowers `ζ` by
//! `σ²/N · Σ_i |c_i|²/q_i`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{FirSpec, IirSpec};
use crate::gramians::{
    expected_fir_grams, fir_grams, solve_lyapunov_deterministic, solve_w_p, solve_w_phi, solve_w_xi, EdgeModel,
};
use crate::linalg::{spectral_radius, to_complex, CMat, Mat};

/// Coefficients whose imaginary part is below this (relative) level are snapped to real.
pub const REALIFY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    FirDet,
    IirDet,
    FirRandom,
    IirRandom,
    IirAsync,
    AtcRegression,
}

impl Scenario {
    pub fn is_fir(self) -> bool {
        matches!(self, Scenario::FirDet | Scenario::FirRandom)
    }

    pub fn is_iir(self) -> bool {
        matches!(self, Scenario::IirDet | Scenario::IirRandom | Scenario::IirAsync)
    }
}

/// Per-step (FIR) or per-branch (IIR) quantization noise variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseBudget {
    pub sigma2: Vec<f64>,
}

impl NoiseBudget {
    pub fn uniform(sigma2: f64, count: usize) -> Self {
        NoiseBudget { sigma2: vec![sigma2; count] }
    }

    fn for_columns(&self, count: usize) -> Result<Vec<f64>> {
        let v = match self.sigma2.len() {
            1 => vec![self.sigma2[0]; count],
            l if l == count => self.sigma2.clone(),
            l => return Err(Error::Dimension { expected: count, got: l }),
        };
        if v.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("noise variances must be positive and finite"));
        }
        Ok(v)
    }
}

/// The separable quadratic `ζ(D)` for one step or branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseQuadratic {
    pub sigma2: f64,
    /// Normalization (number of nodes, or node-components for the regression case).
    pub norm: usize,
    pub gain: f64,
    pub weight: Vec<f64>,
    pub cross: Vec<Complex64>,
}

impl NoiseQuadratic {
    pub fn zeta(&self, d: &[Complex64]) -> f64 {
        let mut acc = self.gain;
        for ((q, c), di) in self.weight.iter().zip(&self.cross).zip(d) {
            acc += q * di.norm_sqr() - 2.0 * (di.conj() * c).re;
        }
        self.sigma2 / self.norm as f64 * acc
    }

    pub fn baseline(&self) -> f64 {
        self.sigma2 / self.norm as f64 * self.gain
    }

    /// Minimizer, with zero at nodes whose weight vanishes.
    pub fn optimal(&self) -> Vec<Complex64> {
        self.weight
            .iter()
            .zip(&self.cross)
            .map(|(&q, &c)| if q > 0.0 { snap(c / q) } else { Complex64::new(0.0, 0.0) })
            .collect()
    }

    /// `σ²/N Σ |c_i|²/q_i`.
    pub fn reduction(&self) -> f64 {
        let s: f64 = self
            .weight
            .iter()
            .zip(&self.cross)
            .filter(|(q, _)| **q > 0.0)
            .map(|(q, c)| c.norm_sqr() / q)
            .sum();
        self.sigma2 / self.norm as f64 * s
    }

    /// Restricts `d` to be constant over each group; returns one value per group.
    pub fn pooled_optimal(&self, groups: &[Vec<usize>]) -> Vec<Complex64> {
        groups
            .iter()
            .map(|g| {
                let q: f64 = g.iter().map(|&i| self.weight[i]).sum();
                let c: Complex64 = g.iter().map(|&i| self.cross[i]).sum();
                if q > 0.0 {
                    snap(c / q)
                } else {
                    Complex64::new(0.0, 0.0)
                }
            })
            .collect()
    }

    /// Merges entries into groups, giving the quadratic over one shared value per group.
    pub fn pooled(&self, groups: &[Vec<usize>]) -> NoiseQuadratic {
        NoiseQuadratic {
            sigma2: self.sigma2,
            norm: self.norm,
            gain: self.gain,
            weight: groups.iter().map(|g| g.iter().map(|&i| self.weight[i]).sum()).collect(),
            cross: groups.iter().map(|g| g.iter().map(|&i| self.cross[i]).sum()).collect(),
        }
    }
}

fn snap(z: Complex64) -> Complex64 {
    if z.im.abs() <= REALIFY_TOL * z.norm().max(1.0) {
        Complex64::new(z.re, 0.0)
    } else {
        z
    }
}

/// Feedback coefficients with their predicted effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackPlan {
    pub scenario: Scenario,
    pub n_nodes: usize,
    /// One column per FIR step `t−1` or IIR branch `k`; a single column of per-node `α_i` for
    /// the regression case.
    pub theta: Vec<Vec<Complex64>>,
    /// Total decrease of the output noise power delivered by `theta` (nonnegative).
    pub predicted_reduction: f64,
    /// `ζ` per column with `theta` applied.
    pub predicted_power: Vec<f64>,
    /// `ζ` per column without feedback.
    pub baseline_power: Vec<f64>,
    pub quadratics: Vec<NoiseQuadratic>,
    /// `(column, node)` pairs where no feedback is possible.
    #[serde(default)]
    pub degenerate: Vec<(usize, usize)>,
}

/// Shared-coefficient variants for FIR feedback.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// `α_{i,t−1}`: independent per node and step.
    NodeStep,
    /// `α_{t−1}`: one value per step.
    Step,
    /// `α_i`: one value per node.
    Node,
}

impl FeedbackPlan {
    fn from_quadratics(scenario: Scenario, n_nodes: usize, quadratics: Vec<NoiseQuadratic>) -> Self {
        let theta: Vec<Vec<Complex64>> = quadratics.iter().map(|q| q.optimal()).collect();
        let mut degenerate = Vec::new();
        for (k, q) in quadratics.iter().enumerate() {
            for (i, w) in q.weight.iter().enumerate() {
                if *w <= 0.0 {
                    degenerate.push((k, i));
                }
            }
        }
        let mut plan = FeedbackPlan {
            scenario,
            n_nodes,
            theta,
            predicted_reduction: 0.0,
            predicted_power: Vec::new(),
            baseline_power: Vec::new(),
            quadratics,
            degenerate,
        };
        plan.refresh_predictions();
        plan
    }

    fn refresh_predictions(&mut self) {
        let p = predict_noise_power(self, &self.theta).expect("theta shaped by construction");
        self.baseline_power = self.quadratics.iter().map(|q| q.baseline()).collect();
        self.predicted_reduction = self.baseline_power.iter().sum::<f64>() - p.total;
        self.predicted_power = p.per_column;
    }

    /// Replaces `theta` with the pooled optimum (FIR plans only).
    pub fn pooled(&self, pooling: Pooling) -> Result<FeedbackPlan> {
        if !self.scenario.is_fir() {
            return Err(Error::invalid("pooling applies to FIR feedback plans"));
        }
        let mut plan = self.clone();
        let n = self.n_nodes;
        match pooling {
            Pooling::NodeStep => {}
            Pooling::Step => {
                let all: Vec<usize> = (0..n).collect();
                for (col, q) in plan.theta.iter_mut().zip(&self.quadratics) {
                    let v = q.pooled_optimal(std::slice::from_ref(&all))[0];
                    *col = vec![v; n];
                }
            }
            Pooling::Node => {
                // Σ_t σ_t² (q_{i,t} |α|² − 2 α c_{i,t}) per node: weights carry the step variance.
                for i in 0..n {
                    let q: f64 = self.quadratics.iter().map(|qd| qd.sigma2 * qd.weight[i]).sum();
                    let c: Complex64 = self.quadratics.iter().map(|qd| qd.cross[i] * qd.sigma2).sum();
                    let v = if q > 0.0 { snap(c / q) } else { Complex64::new(0.0, 0.0) };
                    for col in plan.theta.iter_mut() {
                        col[i] = v;
                    }
                }
            }
        }
        plan.refresh_predictions();
        Ok(plan)
    }

    /// Real parts of `theta` as an `N × columns` matrix.
    pub fn theta_real(&self) -> Mat {
        let cols = self.theta.len();
        let rows = self.theta.first().map_or(0, |c| c.len());
        Mat::from_fn(rows, cols, |i, k| self.theta[k][i].re)
    }

    pub fn zero_theta(&self) -> Vec<Vec<Complex64>> {
        self.theta.iter().map(|c| vec![Complex64::new(0.0, 0.0); c.len()]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoisePower {
    pub per_column: Vec<f64>,
    pub total: f64,
}

/// Analytic `ζ` for arbitrary coefficients. Columns are independent noise sources, so the
/// output power is their sum.
pub fn predict_noise_power(plan: &FeedbackPlan, theta: &[Vec<Complex64>]) -> Result<NoisePower> {
    if theta.len() != plan.quadratics.len() {
        return Err(Error::Dimension { expected: plan.quadratics.len(), got: theta.len() });
    }
    let mut per_column = Vec::with_capacity(theta.len());
    for (q, d) in plan.quadratics.iter().zip(theta) {
        if d.len() != q.weight.len() {
            return Err(Error::Dimension { expected: q.weight.len(), got: d.len() });
        }
        per_column.push(q.zeta(d));
    }
    let total = per_column.iter().sum();
    Ok(NoisePower { per_column, total })
}

fn real_quadratic(sigma2: f64, norm: usize, gain: f64, weight: &Mat, cross_mat: &Mat, scale: Complex64) -> NoiseQuadratic {
    let n = weight.nrows();
    NoiseQuadratic {
        sigma2,
        norm,
        gain,
        weight: (0..n).map(|i| weight[(i, i)]).collect(),
        cross: (0..n).map(|i| scale * cross_mat[(i, i)]).collect(),
    }
}

fn trace_of_product(a: &Mat, b: &Mat) -> f64 {
    crate::linalg::trace_product(a, b)
}

fn check_square(s: &Mat) -> Result<()> {
    if !s.is_square() || s.nrows() == 0 {
        return Err(Error::invalid("shift operator must be square and nonempty"));
    }
    Ok(())
}

fn check_fir(fir: &FirSpec) -> Result<()> {
    if fir.order() < 1 {
        return Err(Error::invalid("feedback needs a filter of order T ≥ 1"));
    }
    Ok(())
}

/// Deterministic FIR: `α_{i,t−1} = [G S]_ii / [G]_ii` with `G = HᵀH`, `H = Σ_{τ≥t} φ_τ S^{τ−t}`.
pub fn qef_fir_det(s: &Mat, fir: &FirSpec, budget: &NoiseBudget) -> Result<FeedbackPlan> {
    check_square(s)?;
    check_fir(fir)?;
    let n = s.nrows();
    let sigma2 = budget.for_columns(fir.order())?;
    let sst = s * s.transpose();
    let quads = fir_grams(s, fir.coeffs())
        .iter()
        .zip(&sigma2)
        .map(|(g, &s2)| real_quadratic(s2, n, trace_of_product(g, &sst), g, &(g * s), Complex64::new(1.0, 0.0)))
        .collect();
    Ok(FeedbackPlan::from_quadratics(Scenario::FirDet, n, quads))
}

/// FIR over Bernoulli edge masks: `α_{i,t−1} = [E[G] S̄]_ii / [E[G]]_ii`, with the gain term
/// `tr(E[G] E[S Sᵀ])` (the mask at step `t−1` is independent of the later propagation).
pub fn qef_fir_random(model: &EdgeModel, fir: &FirSpec, budget: &NoiseBudget) -> Result<FeedbackPlan> {
    check_fir(fir)?;
    let n = model.n();
    let sigma2 = budget.for_columns(fir.order())?;
    let sbar = model.mean();
    let second = model.second_moment();
    let quads = expected_fir_grams(model, fir.coeffs())
        .iter()
        .zip(&sigma2)
        .map(|(g, &s2)| real_quadratic(s2, n, trace_of_product(g, &second), g, &(g * &sbar), Complex64::new(1.0, 0.0)))
        .collect();
    Ok(FeedbackPlan::from_quadratics(Scenario::FirRandom, n, quads))
}

/// Deterministic IIR: `d_i = ψ [W₀ S]_ii / [W₀]_ii` per branch.
pub fn qef_iir_det(s: &Mat, iir: &IirSpec, budget: &NoiseBudget) -> Result<FeedbackPlan> {
    check_square(s)?;
    let n = s.nrows();
    iir.check_stable(spectral_radius(s))?;
    let sigma2 = budget.for_columns(iir.branches().len())?;
    let sst = s * s.transpose();
    let mut quads = Vec::new();
    for (b, &s2) in iir.branches().iter().zip(&sigma2) {
        let w = solve_lyapunov_deterministic(s, b.psi)?.w;
        let gain = b.psi.norm_sqr() * trace_of_product(&w, &sst);
        quads.push(real_quadratic(s2, n, gain, &w, &(&w * s), b.psi));
    }
    Ok(FeedbackPlan::from_quadratics(Scenario::IirDet, n, quads))
}

/// IIR over Bernoulli edge masks: `d_i = ψ [W_Φ S̄]_ii / [W_Φ]_ii`.
pub fn qef_iir_random(model: &EdgeModel, iir: &IirSpec, budget: &NoiseBudget) -> Result<FeedbackPlan> {
    let n = model.n();
    iir.check_stable(model.rho())?;
    let sigma2 = budget.for_columns(iir.branches().len())?;
    let sbar = model.mean();
    let second = model.second_moment();
    let mut quads = Vec::new();
    for (b, &s2) in iir.branches().iter().zip(&sigma2) {
        let w = solve_w_phi(model, b.psi)?.w;
        let gain = b.psi.norm_sqr() * trace_of_product(&w, &second);
        quads.push(real_quadratic(s2, n, gain, &w, &(&w * &sbar), b.psi));
    }
    Ok(FeedbackPlan::from_quadratics(Scenario::IirRandom, n, quads))
}

/// Node-asynchronous IIR: `d_i = ψ [E[PWP] S]_ii / [E[PWP]]_ii`.
pub fn qef_iir_async(s: &Mat, p: f64, iir: &IirSpec, budget: &NoiseBudget) -> Result<FeedbackPlan> {
    check_square(s)?;
    let n = s.nrows();
    let sigma2 = budget.for_columns(iir.branches().len())?;
    let sc = to_complex(s);
    let sst = to_complex(&(s * s.transpose()));
    let mut quads = Vec::new();
    for (b, &s2) in iir.branches().iter().zip(&sigma2) {
        let q: CMat = solve_w_p(s, b.psi, p)?.pwp;
        let qs = &q * &sc;
        let gain = b.psi.norm_sqr() * (&q * &sst).trace().re;
        quads.push(NoiseQuadratic {
            sigma2: s2,
            norm: n,
            gain,
            weight: (0..n).map(|i| q[(i, i)].re).collect(),
            cross: (0..n).map(|i| b.psi * qs[(i, i)]).collect(),
        });
    }
    Ok(FeedbackPlan::from_quadratics(Scenario::IirAsync, n, quads))
}

/// Regression corollary: per-node scalar `α_i` pooling `[𝔅ᵀW𝔅𝒜]_kk` and `[𝔅ᵀW𝔅]_kk` over the
/// node's `M` components; `ζ = σ²/(NM) tr((𝒜−𝒟)ᵀ𝔅ᵀW_ξ𝔅(𝒜−𝒟))`.
pub fn qef_atc(a_script: &Mat, b_script: &Mat, m: usize, sigma2: f64) -> Result<FeedbackPlan> {
    let dim = a_script.nrows();
    if m == 0 || dim % m != 0 {
        return Err(Error::invalid(format!("block size {m} does not divide dimension {dim}")));
    }
    let n = dim / m;
    let w = solve_w_xi(a_script, b_script)?.w;
    let k = b_script.transpose() * &w * b_script;
    let gain = trace_of_product(&(a_script.transpose() * &k), a_script);
    let full = real_quadratic(sigma2, dim, gain, &k, &(&k * a_script), Complex64::new(1.0, 0.0));
    let groups: Vec<Vec<usize>> = (0..n).map(|i| (i * m..(i + 1) * m).collect()).collect();
    let pooled = full.pooled(&groups);
    Ok(FeedbackPlan::from_quadratics(Scenario::AtcRegression, n, vec![pooled]))
}

/// `tr((𝒜−𝒟)ᵀ 𝔅ᵀ W 𝔅 (𝒜−𝒟))` for block-constant `𝒟 = diag(α_i) ⊗ I_M`.
pub fn atc_noise_gain(a_script: &Mat, b_script: &Mat, w: &Mat, alpha: &[f64], m: usize) -> f64 {
    let dim = a_script.nrows();
    let mut amd = a_script.clone();
    for k in 0..dim {
        amd[(k, k)] -= alpha[k / m];
    }
    let k = b_script.transpose() * w * b_script;
    trace_of_product(&(amd.transpose() * k), &amd)
}
