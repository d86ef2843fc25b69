//! Quantized decentralized least squares with adapt-then-combine diffusion.
//!
//! Each node `i` holds `f_i(x) = ½‖A_i x − b_i‖²`, takes a gradient step and then combines the
//! (quantized) intermediate states of its neighbours with weights `w_ij = [I − μηL]_ij`.

use std::time::Instant;

use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gramians::solve_w_xi;
use crate::graphs::{gen_sensor_graph, Graph};
use crate::linalg::{db, spectral_radius, Mat, Vector};
use crate::qef::{atc_noise_gain, qef_atc, FeedbackPlan};
use crate::quant::{symbol_cost, QuantMode, Quantizer, QuantizerConfig};
use crate::sim::DIVERGENCE_LIMIT;

/// Connection radius of the 50-node regression network.
pub const REGRESSION_RADIUS: f64 = 0.25;
pub const DEFAULT_ETA: f64 = 10.0;
pub const DEFAULT_MU: f64 = 0.01;
pub const DEF_DAMPING: f64 = 0.6;

/// Probabilistic quantizer with `Δ = 10μ = 0.1` (5 bits over `[−1.6, 1.6]`).
pub fn default_quantizer() -> QuantizerConfig {
    QuantizerConfig { bits: 5, range: 1.6, mode: QuantMode::Probabilistic, complex: false }
}

#[derive(Debug, Clone)]
pub struct RegressionProblem {
    pub graph: Graph,
    /// Per-node `L×M` regressors.
    pub a: Vec<Mat>,
    pub b: Vec<Vector>,
    /// Rows are the true vectors `x*_i`.
    pub x_star: Mat,
    pub eta: f64,
    pub mu: f64,
    /// Number of graph frequencies kept in `x*`.
    pub smooth_keep: usize,
    /// `I − μηL`.
    pub weights: Mat,
    /// `I − μA_iᵀA_i` and `μA_iᵀb_i`, cached for the adapt step.
    adapt_mat: Vec<Mat>,
    adapt_off: Vec<Vector>,
}

impl RegressionProblem {
    pub fn new(graph: Graph, a: Vec<Mat>, b: Vec<Vector>, x_star: Mat, eta: f64, mu: f64, smooth_keep: usize) -> Result<Self> {
        let n = graph.n_nodes;
        if a.len() != n || b.len() != n || x_star.nrows() != n {
            return Err(Error::Dimension { expected: n, got: a.len().min(b.len()).min(x_star.nrows()) });
        }
        let m = x_star.ncols();
        for (ai, bi) in a.iter().zip(&b) {
            if ai.ncols() != m || ai.nrows() != bi.len() {
                return Err(Error::invalid("regressor shapes disagree"));
            }
        }
        if !(eta > 0.0) || !(mu > 0.0) {
            return Err(Error::invalid("η and μ must be positive"));
        }
        let weights = Mat::identity(n, n) - graph.laplacian() * (mu * eta);
        let adapt_mat = a.iter().map(|ai| Mat::identity(m, m) - ai.transpose() * ai * mu).collect();
        let adapt_off = a.iter().zip(&b).map(|(ai, bi)| ai.transpose() * bi * mu).collect();
        let p = RegressionProblem { graph, a, b, x_star, eta, mu, smooth_keep, weights, adapt_mat, adapt_off };
        let rho = spectral_radius(&(p.b_script() * p.a_script()));
        if rho >= 1.0 {
            return Err(Error::Unstable(format!("ρ(𝔅𝒜) = {rho} ≥ 1")));
        }
        Ok(p)
    }

    pub fn n(&self) -> usize {
        self.graph.n_nodes
    }

    pub fn m(&self) -> usize {
        self.x_star.ncols()
    }

    /// `𝒜 = (I − μηL) ⊗ I_M`.
    pub fn a_script(&self) -> Mat {
        self.weights.kronecker(&Mat::identity(self.m(), self.m()))
    }

    /// `𝔅 = blkdiag(I − μA_iᵀA_i)`.
    pub fn b_script(&self) -> Mat {
        let m = self.m();
        let mut out = Mat::zeros(self.n() * m, self.n() * m);
        for (i, bi) in self.adapt_mat.iter().enumerate() {
            out.view_mut((i * m, i * m), (m, m)).copy_from(bi);
        }
        out
    }

    /// Adapt step `ξ_i = (I − μA_iᵀA_i) x_i + μA_iᵀb_i` on the row-stacked state.
    pub fn adapt(&self, x: &Mat) -> Mat {
        let mut xi = Mat::zeros(x.nrows(), x.ncols());
        for i in 0..self.n() {
            let xr = x.row(i).transpose();
            let v = &self.adapt_mat[i] * xr + &self.adapt_off[i];
            xi.set_row(i, &v.transpose());
        }
        xi
    }

    /// `ξ_i = x_i − μ∇f_i(x_i)` evaluated directly.
    pub fn gradient_step(&self, x: &Mat) -> Mat {
        let mut xi = Mat::zeros(x.nrows(), x.ncols());
        for i in 0..self.n() {
            let xr = x.row(i).transpose();
            let grad = self.a[i].transpose() * (&self.a[i] * &xr - &self.b[i]);
            xi.set_row(i, &(xr - grad * self.mu).transpose());
        }
        xi
    }

    /// Optimal per-node feedback scalars.
    pub fn qef_plan(&self) -> Result<FeedbackPlan> {
        qef_atc(&self.a_script(), &self.b_script(), self.m(), 1.0)
    }

    pub fn msd(&self, x: &Mat) -> f64 {
        (x - &self.x_star).norm_squared() / self.n() as f64
    }
}

/// Draws the regression benchmark: Gaussian `A_i` with `σ_A ~ U[0,1]`, noise with
/// `σ_v ~ U[0,0.1]`, and `x*` limited to the lowest `⌈N/4⌉` graph frequencies.
pub fn synth_problem(n: usize, l: usize, m: usize, seed: u64) -> Result<RegressionProblem> {
    let graph = gen_sensor_graph(n, REGRESSION_RADIUS, seed)?;
    synth_problem_on(graph, l, m, DEFAULT_ETA, DEFAULT_MU, seed)
}

pub fn synth_problem_on(graph: Graph, l: usize, m: usize, eta: f64, mu: f64, seed: u64) -> Result<RegressionProblem> {
    let n = graph.n_nodes;
    if n == 0 || l == 0 || m == 0 {
        return Err(Error::invalid("n, L and M must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let keep = n.div_ceil(4);
    let x_star = smooth_signal(&graph, m, keep, &mut rng)?;
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for i in 0..n {
        let sa: f64 = rng.random();
        let sv: f64 = rng.random_range(0.0..0.1);
        let ai = Mat::from_fn(l, m, |_, _| sa * rng.sample::<f64, _>(StandardNormal));
        let v = Vector::from_fn(l, |_, _| sv * rng.sample::<f64, _>(StandardNormal));
        b.push(&ai * x_star.row(i).transpose() + v);
        a.push(ai);
    }
    RegressionProblem::new(graph, a, b, x_star, eta, mu, keep)
}

/// Gaussian columns projected on the `keep` lowest Laplacian eigenvectors, scaled to unit
/// peak magnitude.
fn smooth_signal<R: Rng>(graph: &Graph, m: usize, keep: usize, rng: &mut R) -> Result<Mat> {
    let n = graph.n_nodes;
    let eig = SymmetricEigen::try_new(graph.laplacian(), 1e-14, 0)
        .ok_or_else(|| Error::Eigen("Laplacian eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let u = Mat::from_fn(n, keep, |r, c| eig.eigenvectors[(r, order[c])]);
    let raw = Mat::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
    let x = &u * (u.transpose() * raw);
    let peak = x.amax();
    if peak == 0.0 {
        return Err(Error::Generation("smoothed signal vanished".into()));
    }
    Ok(x / peak)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AtcVariant {
    Uncompressed,
    /// Full-state quantization, coded at a fixed `b` bits per component.
    FullState,
    /// Differential quantization with variable-rate coding.
    Differential,
    /// Differential quantization with the previous compression error re-injected with a damping
    /// factor.
    DifferentialErrorFeedback { damping: f64 },
    /// Differential quantization with per-node feedback `α_i` in the combine step.
    Qef { alpha: Vec<f64> },
}

impl AtcVariant {
    pub fn qef(problem: &RegressionProblem) -> Result<Self> {
        Ok(AtcVariant::Qef { alpha: problem.qef_plan()?.theta[0].iter().map(|c| c.re).collect() })
    }

    pub fn label(&self) -> &'static str {
        match self {
            AtcVariant::Uncompressed => "uncompressed",
            AtcVariant::FullState => "sq",
            AtcVariant::Differential => "dq",
            AtcVariant::DifferentialErrorFeedback { .. } => "def",
            AtcVariant::Qef { .. } => "qef",
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        match self {
            AtcVariant::DifferentialErrorFeedback { damping } if !(*damping > 0.0 && *damping <= 1.0) => {
                Err(Error::invalid(format!("damping {damping} outside (0, 1]")))
            }
            AtcVariant::Qef { alpha } if alpha.len() != n => Err(Error::Dimension { expected: n, got: alpha.len() }),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtcConfig {
    #[serde(default = "default_quantizer")]
    pub quantizer: QuantizerConfig,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_iterations() -> usize {
    1000
}

fn default_trials() -> usize {
    50
}

impl Default for AtcConfig {
    fn default() -> Self {
        AtcConfig { quantizer: default_quantizer(), iterations: default_iterations(), trials: default_trials(), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AtcResult {
    pub variant: String,
    pub msd: Vec<f64>,
    pub msd_db: Vec<f64>,
    /// Mean MSD over the last 10% of iterations.
    pub steady_msd: f64,
    pub steady_per_trial: Vec<f64>,
    /// Average coded bits per node per component; absent for the uncompressed run.
    pub rate: Option<f64>,
    pub overflows: u64,
    pub wall_time_s: f64,
}

impl AtcResult {
    pub fn steady_msd_db(&self) -> f64 {
        db(self.steady_msd)
    }
}

/// Mean and standard error of the per-trial steady-state difference `a − b`.
pub fn paired_difference(a: &AtcResult, b: &AtcResult) -> (f64, f64) {
    let d: Vec<f64> = a.steady_per_trial.iter().zip(&b.steady_per_trial).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    if d.len() < 2 {
        return (mean, 0.0);
    }
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

struct TrialRun {
    msd: Vec<f64>,
    bits: u64,
    messages: u64,
    overflows: u64,
}

/// Runs `cfg.trials` independent quantization-noise realizations on a fixed problem. Trials
/// share random streams across variants.
pub fn atc_run(problem: &RegressionProblem, variant: &AtcVariant, cfg: &AtcConfig) -> Result<AtcResult> {
    cfg.quantizer.validate()?;
    variant.validate(problem.n())?;
    if cfg.trials == 0 || cfg.iterations == 0 {
        return Err(Error::invalid("trials and iterations must be positive"));
    }
    let start = Instant::now();
    let runs: Vec<Result<TrialRun>> =
        (0..cfg.trials).into_par_iter().map(|t| run_trial(problem, variant, cfg, t as u64)).collect();
    let runs: Vec<TrialRun> = runs.into_iter().collect::<Result<_>>()?;
    let iters = cfg.iterations;
    let window = (iters / 10).max(1);
    let trials = runs.len() as f64;
    let mut msd = vec![0.0; iters];
    for r in &runs {
        for (acc, v) in msd.iter_mut().zip(&r.msd) {
            *acc += v;
        }
    }
    msd.iter_mut().for_each(|v| *v /= trials);
    let steady_per_trial: Vec<f64> =
        runs.iter().map(|r| r.msd[iters - window..].iter().sum::<f64>() / window as f64).collect();
    let (bits, messages) = runs.iter().fold((0u64, 0u64), |(b, m), r| (b + r.bits, m + r.messages));
    let rate = match variant {
        AtcVariant::Uncompressed => None,
        _ => Some(bits as f64 / (messages as f64 * problem.m() as f64)),
    };
    Ok(AtcResult {
        variant: variant.label().to_string(),
        msd_db: msd.iter().map(|&v| db(v)).collect(),
        steady_msd: msd[iters - window..].iter().sum::<f64>() / window as f64,
        msd,
        steady_per_trial,
        rate,
        overflows: runs.iter().map(|r| r.overflows).sum(),
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

fn run_trial(problem: &RegressionProblem, variant: &AtcVariant, cfg: &AtcConfig, trial: u64) -> Result<TrialRun> {
    let (n, m) = (problem.n(), problem.m());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(trial);
    let mut quant = Quantizer::new(cfg.quantizer.with_complex(false))?;
    let mut x = Mat::zeros(n, m);
    // Receiver-side reconstructions, last compression error, and last injected noise.
    let mut recon = Mat::zeros(n, m);
    let mut err = Mat::zeros(n, m);
    let mut msd = Vec::with_capacity(cfg.iterations);
    let (mut bits, mut messages) = (0u64, 0u64);
    for _ in 0..cfg.iterations {
        let xi = problem.adapt(&x);
        let shared = match variant {
            AtcVariant::Uncompressed => xi.clone(),
            AtcVariant::FullState => {
                let q = xi.map(|v| quant.quantize_value(v, &mut rng).0);
                bits += (n * m) as u64 * cfg.quantizer.bits as u64;
                messages += n as u64;
                q
            }
            AtcVariant::Differential | AtcVariant::Qef { .. } => {
                for i in 0..n {
                    for c in 0..m {
                        let (q, k) = quant.quantize_value(xi[(i, c)] - recon[(i, c)], &mut rng);
                        recon[(i, c)] += q;
                        bits += symbol_cost(k);
                    }
                }
                messages += n as u64;
                recon.clone()
            }
            AtcVariant::DifferentialErrorFeedback { damping } => {
                for i in 0..n {
                    for c in 0..m {
                        let u = xi[(i, c)] - recon[(i, c)] + damping * err[(i, c)];
                        let (q, k) = quant.quantize_value(u, &mut rng);
                        recon[(i, c)] += q;
                        err[(i, c)] = u - q;
                        bits += symbol_cost(k);
                    }
                }
                messages += n as u64;
                recon.clone()
            }
        };
        x = &problem.weights * &shared;
        if let AtcVariant::Qef { alpha } = variant {
            // Injected noise n = ξ̂ − ξ, fed back with the node's own coefficient.
            for i in 0..n {
                for c in 0..m {
                    x[(i, c)] -= alpha[i] * (shared[(i, c)] - xi[(i, c)]);
                }
            }
        }
        let norm = x.norm();
        if !norm.is_finite() || norm > DIVERGENCE_LIMIT {
            return Err(Error::Unstable(format!("ATC state norm {norm:e} exceeded {DIVERGENCE_LIMIT:e}")));
        }
        msd.push(problem.msd(&x));
    }
    Ok(TrialRun { msd, bits, messages, overflows: quant.overflows() })
}

/// Analytic noise gains without and with feedback.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoiseGains {
    pub without_feedback: f64,
    pub with_feedback: f64,
}

impl NoiseGains {
    pub fn ratio(&self) -> f64 {
        self.with_feedback / self.without_feedback
    }
}

/// `tr((𝒜−𝒟)ᵀ𝔅ᵀW_ξ𝔅(𝒜−𝒟))` for `𝒟 = diag(α) ⊗ I` and for `𝒟 = 0`.
pub fn noise_gain_trace(problem: &RegressionProblem, alpha: &[f64]) -> Result<NoiseGains> {
    if alpha.len() != problem.n() {
        return Err(Error::Dimension { expected: problem.n(), got: alpha.len() });
    }
    let a = problem.a_script();
    let b = problem.b_script();
    let w = solve_w_xi(&a, &b)?.w;
    let m = problem.m();
    Ok(NoiseGains {
        without_feedback: atc_noise_gain(&a, &b, &w, &vec![0.0; alpha.len()], m),
        with_feedback: atc_noise_gain(&a, &b, &w, alpha, m),
    })
}

/// Lower bound on the feedback gain over every block-scalar `𝒟`: since `W_ξ ⪰ I`,
/// `tr(EᵀKE) ≥ λ_min(𝔅ᵀ𝔅) ‖offdiag(𝒜)‖²_F` for any `E = 𝒜 − 𝒟` with diagonal `𝒟`.
pub fn feedback_gain_floor(problem: &RegressionProblem) -> f64 {
    let b = problem.b_script();
    let lam = crate::linalg::min_symmetric_eigenvalue(&(b.transpose() * &b)).max(0.0);
    let a = problem.a_script();
    let off: f64 = a
        .iter()
        .enumerate()
        .filter(|(k, _)| k % a.nrows() != k / a.nrows())
        .map(|(_, v)| v * v)
        .sum();
    lam * off
}
