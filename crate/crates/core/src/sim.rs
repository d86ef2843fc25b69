//! Seeded Monte-Carlo runs of quantized graph filtering with and without error feedback.

use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{design_fir, DesignTarget, FirDesignMode};
use crate::error::{Error, Result};
use crate::filters::{fir_apply, iir_branch_limit, mat_cvec, Filter, FirSpec, IirBranch, IirSpec};
use crate::gramians::EdgeModel;
use crate::graphs::{EdgeSampler, MaskModel, NodeSampler, ShiftOperator};
use crate::linalg::{CVector, Mat, Vector};
use crate::qef::{
    predict_noise_power, qef_fir_det, qef_fir_random, qef_iir_async, qef_iir_det, qef_iir_random, FeedbackPlan,
    NoiseBudget, Scenario,
};
use crate::quant::{QuantMode, Quantizer, QuantizerConfig};

/// States beyond this norm abort the run.
pub const DIVERGENCE_LIMIT: f64 = 1e6;
/// Trials per reduction block; fixed so results do not depend on the thread count.
const BLOCK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsdMode {
    /// Reference is the unquantized output of the same realization.
    Unbiased,
    /// Reference is the output on the expected graph.
    Biased,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalConfig {
    /// Entries are drawn uniformly from `[−a, a]`.
    #[serde(default = "one")]
    pub amplitude: f64,
    /// Redraw the input for every trial instead of once per run.
    #[serde(default)]
    pub per_trial: bool,
}

fn one() -> f64 {
    1.0
}

impl Default for SignalConfig {
    fn default() -> Self {
        SignalConfig { amplitude: 1.0, per_trial: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub scenario: Scenario,
    pub quantizer: QuantizerConfig,
    /// Edge (random graphs) or node (asynchronous) probability.
    #[serde(default)]
    pub p: Option<f64>,
    pub trials: usize,
    /// Recursion length for IIR scenarios.
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_msd")]
    pub msd_mode: MsdMode,
    #[serde(default)]
    pub signal: SignalConfig,
}

fn default_iterations() -> usize {
    100
}

fn default_msd() -> MsdMode {
    MsdMode::Unbiased
}

impl SimConfig {
    pub fn new(scenario: Scenario, quantizer: QuantizerConfig, trials: usize) -> Self {
        SimConfig {
            scenario,
            quantizer,
            p: None,
            trials,
            iterations: default_iterations(),
            seed: 0,
            msd_mode: MsdMode::Unbiased,
            signal: SignalConfig::default(),
        }
    }

    pub fn with_p(mut self, p: f64) -> Self {
        self.p = Some(p);
        self
    }

    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.iterations = iterations;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_msd(mut self, mode: MsdMode) -> Self {
        self.msd_mode = mode;
        self
    }

    pub fn validate(&self, filter: &Filter) -> Result<()> {
        self.quantizer.validate()?;
        if self.trials == 0 {
            return Err(Error::invalid("trials must be at least 1"));
        }
        match (self.scenario, filter) {
            (Scenario::FirDet | Scenario::FirRandom, Filter::Fir(f)) if f.order() >= 1 => {}
            (Scenario::IirDet | Scenario::IirRandom | Scenario::IirAsync, Filter::Iir(_)) => {
                if self.iterations == 0 {
                    return Err(Error::invalid("IIR scenarios need at least one iteration"));
                }
            }
            (Scenario::AtcRegression, _) => return Err(Error::invalid("regression runs live in the atc module")),
            (s, _) => return Err(Error::invalid(format!("filter type does not match scenario {s:?}"))),
        }
        match (self.scenario, self.p) {
            (Scenario::FirDet | Scenario::IirDet, Some(_)) => {
                Err(Error::invalid("p must be absent for deterministic scenarios"))
            }
            (Scenario::FirRandom | Scenario::IirRandom, Some(p)) if !(0.0..1.0).contains(&p) => {
                Err(Error::invalid(format!("edge probability {p} outside [0, 1)")))
            }
            (Scenario::IirAsync, Some(p)) if !(p > 0.0 && p <= 1.0) => {
                Err(Error::invalid(format!("node probability {p} outside (0, 1]")))
            }
            (Scenario::FirRandom | Scenario::IirRandom | Scenario::IirAsync, None) => {
                Err(Error::invalid("p is required for random scenarios"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario: Scenario,
    /// Curve index: partial-sum order (from 1) for FIR, iteration for IIR.
    pub index: Vec<usize>,
    pub msd: Vec<f64>,
    pub msd_db: Vec<f64>,
    pub stderr: Vec<f64>,
    pub stderr_db: Vec<f64>,
    /// Unbiased output noise power per index (equals `msd` in unbiased mode).
    pub noise_power: Vec<f64>,
    /// Terminal value (FIR) or mean of the last 10% of iterations (IIR).
    pub steady_msd: f64,
    pub steady_noise_power: f64,
    pub predicted_noise_power: Option<f64>,
    pub trials: usize,
    pub overflows: u64,
    pub wall_time_s: f64,
}

impl ScenarioResult {
    pub fn steady_msd_db(&self) -> f64 {
        crate::linalg::db(self.steady_msd)
    }
}

/// Feedback-on/off comparison over identical random draws.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairedResult {
    pub with_feedback: ScenarioResult,
    pub without_feedback: ScenarioResult,
    /// Mean over trials of the steady-window error energy without minus with feedback.
    pub diff_mean: f64,
    pub diff_stderr: f64,
}

impl PairedResult {
    pub fn improvement_db(&self) -> f64 {
        self.without_feedback.steady_msd_db() - self.with_feedback.steady_msd_db()
    }

    /// `diff_mean / diff_stderr`.
    pub fn z_score(&self) -> f64 {
        if self.diff_stderr == 0.0 {
            if self.diff_mean > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        } else {
            self.diff_mean / self.diff_stderr
        }
    }
}

/// A prepared run: operator, filter, configuration and the fixed input signal.
#[derive(Debug, Clone)]
pub struct Simulation<'a> {
    op: &'a ShiftOperator,
    filter: Filter,
    cfg: SimConfig,
    mask: Option<MaskModel>,
    x: Vector,
}

/// Per-trial squared errors.
struct TrialOutcome {
    msd: Vec<f64>,
    noise: Vec<f64>,
    overflows: u64,
}

impl<'a> Simulation<'a> {
    pub fn new(op: &'a ShiftOperator, filter: Filter, cfg: SimConfig) -> Result<Self> {
        cfg.validate(&filter)?;
        let mask = match cfg.scenario {
            Scenario::FirRandom | Scenario::IirRandom => Some(op.mask_model()?),
            _ => None,
        };
        if let Filter::Iir(spec) = &filter {
            let rho = match cfg.scenario {
                Scenario::IirAsync => crate::linalg::spectral_norm(&op.matrix),
                _ => op.spectral_radius,
            };
            spec.check_stable(rho)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let x = draw_signal(op.n(), cfg.signal.amplitude, &mut rng);
        Ok(Simulation { op, filter, cfg, mask, x })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn signal(&self) -> &Vector {
        &self.x
    }

    /// Noise variances per step (FIR) or per branch (IIR, doubled for complex branches).
    pub fn noise_budget(&self) -> NoiseBudget {
        let real = self.cfg.quantizer.with_complex(false).noise_variance();
        match &self.filter {
            Filter::Fir(_) => NoiseBudget { sigma2: vec![real] },
            Filter::Iir(spec) => NoiseBudget {
                sigma2: spec.branches().iter().map(|b| if is_real(b) { real } else { 2.0 * real }).collect(),
            },
        }
    }

    /// Optimal feedback for this scenario with the quantizer's noise budget.
    pub fn plan(&self) -> Result<FeedbackPlan> {
        let budget = self.noise_budget();
        let s = &self.op.matrix;
        match (&self.filter, self.cfg.scenario) {
            (Filter::Fir(f), Scenario::FirDet) => qef_fir_det(s, f, &budget),
            (Filter::Fir(f), Scenario::FirRandom) => {
                qef_fir_random(&EdgeModel::new(self.op, self.p())?, f, &budget)
            }
            (Filter::Iir(f), Scenario::IirDet) => qef_iir_det(s, f, &budget),
            (Filter::Iir(f), Scenario::IirRandom) => {
                qef_iir_random(&EdgeModel::new(self.op, self.p())?, f, &budget)
            }
            (Filter::Iir(f), Scenario::IirAsync) => qef_iir_async(s, self.p(), f, &budget),
            _ => Err(Error::invalid("filter type does not match scenario")),
        }
    }

    fn p(&self) -> f64 {
        self.cfg.p.unwrap_or(1.0)
    }

    fn check_theta(&self, theta: &[Vec<Complex64>]) -> Result<()> {
        let cols = match &self.filter {
            Filter::Fir(f) => f.order(),
            Filter::Iir(f) => f.branches().len(),
        };
        if theta.len() != cols {
            return Err(Error::Dimension { expected: cols, got: theta.len() });
        }
        for c in theta {
            if c.len() != self.op.n() {
                return Err(Error::Dimension { expected: self.op.n(), got: c.len() });
            }
        }
        Ok(())
    }

    /// Runs every trial, optionally with feedback coefficients `theta` (one column per FIR
    /// step or IIR branch).
    pub fn run(&self, theta: Option<&[Vec<Complex64>]>) -> Result<ScenarioResult> {
        let start = Instant::now();
        let (result, _) = self.run_collect(theta, false)?;
        let mut result = result;
        result.wall_time_s = start.elapsed().as_secs_f64();
        Ok(result)
    }

    /// Runs with and without `theta` on common random numbers.
    pub fn run_paired(&self, theta: &[Vec<Complex64>]) -> Result<PairedResult> {
        let start = Instant::now();
        let (mut with, e_with) = self.run_collect(Some(theta), true)?;
        let (mut without, e_without) = self.run_collect(None, true)?;
        let elapsed = start.elapsed().as_secs_f64();
        with.wall_time_s = elapsed;
        without.wall_time_s = elapsed;
        let diffs: Vec<f64> = e_without.iter().zip(&e_with).map(|(a, b)| a - b).collect();
        let (mean, se) = mean_stderr(&diffs);
        Ok(PairedResult { with_feedback: with, without_feedback: without, diff_mean: mean, diff_stderr: se })
    }

    fn run_collect(&self, theta: Option<&[Vec<Complex64>]>, keep_steady: bool) -> Result<(ScenarioResult, Vec<f64>)> {
        if let Some(t) = theta {
            self.check_theta(t)?;
        }
        let len = self.curve_len();
        let window = self.steady_window(len);
        let blocks: Vec<Result<(Accum, Vec<f64>)>> = (0..self.cfg.trials.div_ceil(BLOCK))
            .into_par_iter()
            .map(|b| {
                let mut acc = Accum::new(len);
                let mut steady = Vec::new();
                for trial in b * BLOCK..((b + 1) * BLOCK).min(self.cfg.trials) {
                    let out = self.trial(trial as u64, theta)?;
                    if keep_steady {
                        steady.push(window_mean(&out.msd, window));
                    }
                    acc.add(&out);
                }
                Ok((acc, steady))
            })
            .collect();
        let mut total = Accum::new(len);
        let mut steady = Vec::new();
        for b in blocks {
            let (acc, s) = b?;
            total.merge(&acc);
            steady.extend(s);
        }
        let n = self.cfg.trials as f64;
        let msd: Vec<f64> = total.msd.iter().map(|s| s / n).collect();
        let noise_power: Vec<f64> = total.noise.iter().map(|s| s / n).collect();
        let stderr: Vec<f64> = total
            .msd_sq
            .iter()
            .zip(&msd)
            .map(|(sq, m)| if n > 1.0 { ((sq / n - m * m).max(0.0) / (n - 1.0)).sqrt() } else { 0.0 })
            .collect();
        let msd_db = msd.iter().map(|&m| crate::linalg::db(m)).collect();
        let stderr_db = stderr
            .iter()
            .zip(&msd)
            .map(|(s, m)| if *m > 0.0 { 10.0 / std::f64::consts::LN_10 * s / m } else { 0.0 })
            .collect();
        let predicted = self.plan().ok().and_then(|plan| {
            let zero = plan.zero_theta();
            predict_noise_power(&plan, theta.unwrap_or(&zero)).ok().map(|p| p.total)
        });
        let result = ScenarioResult {
            scenario: self.cfg.scenario,
            index: self.curve_index(),
            steady_msd: window_mean(&msd, window),
            steady_noise_power: window_mean(&noise_power, window),
            msd,
            msd_db,
            stderr,
            stderr_db,
            noise_power,
            predicted_noise_power: predicted,
            trials: self.cfg.trials,
            overflows: total.overflows,
            wall_time_s: 0.0,
        };
        Ok((result, steady))
    }

    fn curve_len(&self) -> usize {
        match &self.filter {
            Filter::Fir(f) => f.order(),
            Filter::Iir(_) => self.cfg.iterations,
        }
    }

    fn curve_index(&self) -> Vec<usize> {
        match &self.filter {
            Filter::Fir(f) => (1..=f.order()).collect(),
            Filter::Iir(_) => (1..=self.cfg.iterations).collect(),
        }
    }

    fn steady_window(&self, len: usize) -> usize {
        match &self.filter {
            Filter::Fir(_) => 1,
            Filter::Iir(_) => (len / 10).max(1),
        }
    }

    fn trial_rngs(&self, trial: u64) -> (ChaCha8Rng, ChaCha8Rng) {
        let mut graph = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        graph.set_stream(2 * trial + 1);
        let mut quant = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        quant.set_stream(2 * trial + 2);
        (graph, quant)
    }

    fn trial(&self, trial: u64, theta: Option<&[Vec<Complex64>]>) -> Result<TrialOutcome> {
        let (mut grng, mut qrng) = self.trial_rngs(trial);
        let x = if self.cfg.signal.per_trial {
            draw_signal(self.op.n(), self.cfg.signal.amplitude, &mut grng)
        } else {
            self.x.clone()
        };
        let mut quant = Quantizer::new(self.cfg.quantizer.with_complex(false))?;
        let out = match &self.filter {
            Filter::Fir(f) => self.fir_trial(f, &x, theta, &mut grng, &mut qrng, &mut quant)?,
            Filter::Iir(f) => self.iir_trial(f, &x, theta, &mut grng, &mut qrng, &mut quant)?,
        };
        Ok(out)
    }

    fn fir_trial(
        &self,
        f: &FirSpec,
        x: &Vector,
        theta: Option<&[Vec<Complex64>]>,
        grng: &mut ChaCha8Rng,
        qrng: &mut ChaCha8Rng,
        quant: &mut Quantizer,
    ) -> Result<TrialOutcome> {
        let n = x.len() as f64;
        let phi = f.coeffs();
        let mut sampler = self.edge_sampler(grng)?;
        let biased_ref = self.biased_fir_reference(f, x)?;
        let mut w_hat = x.clone();
        let mut w = x.clone();
        let mut y_hat = x * phi[0];
        let mut y = x * phi[0];
        let mut msd = vec![0.0; f.order()];
        let mut noise = vec![0.0; f.order()];
        for t in 1..phi.len() {
            let sampled;
            let s_t = match sampler.as_mut() {
                Some(es) => {
                    sampled = es.sample();
                    &sampled
                }
                None => &self.op.matrix,
            };
            let (q, nse) = quant.quantize(&w_hat, qrng);
            let mut next = s_t * q;
            if let Some(th) = theta {
                for (i, d) in th[t - 1].iter().enumerate() {
                    next[i] -= d.re * nse[i];
                }
            }
            w_hat = next;
            w = s_t * w;
            guard(w_hat.norm())?;
            y_hat += &w_hat * phi[t];
            y += &w * phi[t];
            noise[t - 1] = (&y_hat - &y).norm_squared() / n;
            msd[t - 1] = match (&biased_ref, self.cfg.msd_mode) {
                (Some(r), MsdMode::Biased) => (&y_hat - &r[t]).norm_squared() / n,
                _ => noise[t - 1],
            };
        }
        Ok(TrialOutcome { msd, noise, overflows: quant.overflows() })
    }

    /// Partial sums `Σ_{τ≤t} φ_τ S̄^τ x` on the expected graph.
    fn biased_fir_reference(&self, f: &FirSpec, x: &Vector) -> Result<Option<Vec<Vector>>> {
        if self.cfg.msd_mode != MsdMode::Biased || self.mask.is_none() {
            return Ok(None);
        }
        let sbar = self.mask.as_ref().expect("checked").mean(self.p());
        let mut out = Vec::with_capacity(f.coeffs().len());
        let mut w = x.clone();
        let mut acc = x * f.coeffs()[0];
        out.push(acc.clone());
        for &c in &f.coeffs()[1..] {
            w = &sbar * w;
            acc += &w * c;
            out.push(acc.clone());
        }
        Ok(Some(out))
    }

    fn edge_sampler(&self, grng: &mut ChaCha8Rng) -> Result<Option<EdgeSampler>> {
        match &self.mask {
            Some(m) => {
                let rng = ChaCha8Rng::from_rng(grng);
                Ok(Some(EdgeSampler::from_model(m.clone(), self.p(), rng)?))
            }
            None => Ok(None),
        }
    }

    fn iir_trial(
        &self,
        f: &IirSpec,
        x: &Vector,
        theta: Option<&[Vec<Complex64>]>,
        grng: &mut ChaCha8Rng,
        qrng: &mut ChaCha8Rng,
        quant: &mut Quantizer,
    ) -> Result<TrialOutcome> {
        let n = x.len();
        let nf = n as f64;
        let iters = self.cfg.iterations;
        // One simulated branch per real branch or conjugate pair; pairs contribute 2 Re(w).
        let reps: Vec<(usize, IirBranch, f64)> = f
            .branches()
            .iter()
            .enumerate()
            .filter(|(_, b)| is_real(b) || b.psi.im > 0.0 || (b.psi.im == 0.0 && b.phi.im > 0.0))
            .map(|(k, b)| (k, *b, if is_real(b) { 1.0 } else { 2.0 }))
            .collect();
        let mut sampler = self.edge_sampler(grng)?;
        let mut nodes = match self.cfg.scenario {
            Scenario::IirAsync => Some(NodeSampler::from_rng(n, self.p(), ChaCha8Rng::from_rng(grng))?),
            _ => None,
        };
        let biased_ref = if self.cfg.msd_mode == MsdMode::Biased && self.mask.is_some() {
            let sbar = self.mask.as_ref().expect("checked").mean(self.p());
            let mut y = Vector::zeros(n);
            for b in f.branches() {
                y += iir_branch_limit(&sbar, b.psi, b.phi, x)?.map(|c| c.re);
            }
            Some(y)
        } else {
            None
        };
        let xc: CVector = x.map(|v| Complex64::new(v, 0.0));
        let mut w_hat: Vec<CVector> = vec![CVector::zeros(n); reps.len()];
        let mut w: Vec<CVector> = vec![CVector::zeros(n); reps.len()];
        let mut msd = vec![0.0; iters];
        let mut noise = vec![0.0; iters];
        for it in 0..iters {
            let sampled;
            let s_t = match sampler.as_mut() {
                Some(es) => {
                    sampled = es.sample();
                    &sampled
                }
                None => &self.op.matrix,
            };
            let selected = nodes.as_mut().map(|ns| ns.sample_set());
            let mut y_hat = Vector::zeros(n);
            let mut y = Vector::zeros(n);
            for (r, (k, b, weight)) in reps.iter().enumerate() {
                let (q, nse) = if *weight == 1.0 {
                    let (q, nse) = quant.quantize(&w_hat[r].map(|c| c.re), qrng);
                    (q.map(|v| Complex64::new(v, 0.0)), nse.map(|v| Complex64::new(v, 0.0)))
                } else {
                    quant.quantize_complex(&w_hat[r], qrng)
                };
                let mut upd = mat_cvec(s_t, &q) * b.psi + &xc * b.phi;
                if let Some(th) = theta {
                    for i in 0..n {
                        upd[i] -= th[*k][i] * nse[i];
                    }
                }
                let exact = mat_cvec(s_t, &w[r]) * b.psi + &xc * b.phi;
                match &selected {
                    Some(sel) => {
                        for i in 0..n {
                            if sel[i] {
                                w_hat[r][i] = upd[i];
                                w[r][i] = exact[i];
                            }
                        }
                    }
                    None => {
                        w_hat[r] = upd;
                        w[r] = exact;
                    }
                }
                guard(w_hat[r].norm())?;
                y_hat += w_hat[r].map(|c| c.re) * *weight;
                y += w[r].map(|c| c.re) * *weight;
            }
            noise[it] = (&y_hat - &y).norm_squared() / nf;
            msd[it] = match &biased_ref {
                Some(r) => (&y_hat - r).norm_squared() / nf,
                None => noise[it],
            };
        }
        Ok(TrialOutcome { msd, noise, overflows: quant.overflows() })
    }
}

fn is_real(b: &IirBranch) -> bool {
    b.psi.im == 0.0 && b.phi.im == 0.0
}

fn guard(norm: f64) -> Result<()> {
    if !norm.is_finite() || norm > DIVERGENCE_LIMIT {
        return Err(Error::Unstable(format!("state norm {norm:e} exceeded {DIVERGENCE_LIMIT:e}")));
    }
    Ok(())
}

fn draw_signal<R: Rng>(n: usize, amplitude: f64, rng: &mut R) -> Vector {
    Vector::from_iterator(n, (0..n).map(|_| rng.random_range(-amplitude..=amplitude)))
}

fn window_mean(v: &[f64], window: usize) -> f64 {
    let w = window.min(v.len()).max(1);
    v[v.len() - w..].iter().sum::<f64>() / w as f64
}

fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

struct Accum {
    msd: Vec<f64>,
    msd_sq: Vec<f64>,
    noise: Vec<f64>,
    overflows: u64,
}

impl Accum {
    fn new(len: usize) -> Self {
        Accum { msd: vec![0.0; len], msd_sq: vec![0.0; len], noise: vec![0.0; len], overflows: 0 }
    }

    fn add(&mut self, t: &TrialOutcome) {
        for i in 0..self.msd.len() {
            self.msd[i] += t.msd[i];
            self.msd_sq[i] += t.msd[i] * t.msd[i];
            self.noise[i] += t.noise[i];
        }
        self.overflows += t.overflows;
    }

    fn merge(&mut self, o: &Accum) {
        for i in 0..self.msd.len() {
            self.msd[i] += o.msd[i];
            self.msd_sq[i] += o.msd_sq[i];
            self.noise[i] += o.noise[i];
        }
        self.overflows += o.overflows;
    }
}

/// One row of an order sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderPoint {
    pub order: usize,
    pub filter: Vec<f64>,
    pub design_error: f64,
    pub paired: PairedResult,
}

/// Designs a regularized FIR filter per order and compares feedback on and off.
pub fn sweep_orders(
    op: &ShiftOperator,
    target: &DesignTarget,
    orders: &[usize],
    cfg: &SimConfig,
) -> Result<Vec<OrderPoint>> {
    let mut out = Vec::with_capacity(orders.len());
    for &order in orders {
        let mode = match cfg.scenario {
            Scenario::FirDet => FirDesignMode::Deterministic(&op.matrix),
            Scenario::FirRandom => FirDesignMode::Random { p: cfg.p.unwrap_or(1.0), rho: op.spectral_radius },
            s => return Err(Error::invalid(format!("order sweeps apply to FIR scenarios, not {s:?}"))),
        };
        let (fir, report) = design_fir(target, order, mode)?;
        let sim = Simulation::new(op, Filter::Fir(fir.clone()), cfg.clone())?;
        let plan = sim.plan()?;
        let paired = sim.run_paired(&plan.theta)?;
        out.push(OrderPoint { order, filter: fir.coeffs().to_vec(), design_error: report.error, paired });
    }
    Ok(out)
}

/// Monte-Carlo `Var[y]` per node of an unquantized filter on random graphs: the floor of the
/// biased MSD.
pub fn empirical_variance_floor(op: &ShiftOperator, filter: &Filter, p: f64, trials: usize, iterations: usize, seed: u64) -> Result<f64> {
    let scenario = match filter {
        Filter::Fir(_) => Scenario::FirRandom,
        Filter::Iir(_) => Scenario::IirRandom,
    };
    let q = QuantizerConfig::new(52, 1e3, QuantMode::DitheredUniform)?;
    let cfg = SimConfig::new(scenario, q, trials).with_p(p).with_iterations(iterations).with_seed(seed);
    if p >= 1.0 {
        return Ok(0.0);
    }
    let sim = Simulation::new(op, filter.clone(), cfg)?;
    let mask = sim.mask.as_ref().expect("random scenario");
    let sbar = mask.mean(p);
    let x = sim.x.clone();
    let ybar = match filter {
        Filter::Fir(f) => fir_apply(&sbar, f.coeffs(), &x)?,
        Filter::Iir(f) => {
            let mut y = Vector::zeros(x.len());
            for b in f.branches() {
                y += iir_branch_limit(&sbar, b.psi, b.phi, &x)?.map(|c| c.re);
            }
            y
        }
    };
    let n = x.len() as f64;
    let vals: Vec<Result<f64>> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let (mut grng, _) = sim.trial_rngs(trial as u64);
            let mut sampler = sim.edge_sampler(&mut grng)?.expect("random scenario");
            let y = match filter {
                Filter::Fir(f) => {
                    let mut w = x.clone();
                    let mut y = &x * f.coeffs()[0];
                    for &c in &f.coeffs()[1..] {
                        w = sampler.sample() * w;
                        y += &w * c;
                    }
                    y
                }
                Filter::Iir(f) => {
                    let xc: CVector = x.map(|v| Complex64::new(v, 0.0));
                    let mut ws = vec![CVector::zeros(x.len()); f.branches().len()];
                    for _ in 0..iterations {
                        let s = sampler.sample();
                        for (w, b) in ws.iter_mut().zip(f.branches()) {
                            *w = mat_cvec(&s, w) * b.psi + &xc * b.phi;
                        }
                    }
                    ws.iter().fold(Vector::zeros(x.len()), |acc, w| acc + w.map(|c| c.re))
                }
            };
            Ok((&y - &ybar).norm_squared() / n)
        })
        .collect();
    let mut total = 0.0;
    for v in vals {
        total += v?;
    }
    Ok(total / trials as f64)
}

/// `S_t` sequence used by a trial, exposed for cross-checks.
pub fn trial_shift(sim: &Simulation, trial: u64, steps: usize) -> Result<Vec<Mat>> {
    let (mut grng, _) = sim.trial_rngs(trial);
    let mut sampler = sim.edge_sampler(&mut grng)?;
    Ok((0..steps)
        .map(|_| match sampler.as_mut() {
            Some(es) => es.sample(),
            None => sim.op.matrix.clone(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::{gen_sensor_graph, Graph, ShiftKind};
    use crate::quant::QuantMode;

    fn q(bits: u32) -> QuantizerConfig {
        QuantizerConfig::new(bits, 4.0, QuantMode::DitheredUniform).unwrap()
    }

    fn sensor(n: usize, seed: u64) -> ShiftOperator {
        ShiftOperator::build(&gen_sensor_graph(n, 0.5, seed).unwrap(), ShiftKind::NormalizedLaplacian).unwrap()
    }

    fn fir() -> Filter {
        Filter::Fir(FirSpec::new(vec![0.9, -0.6, 0.4, 0.3, -0.2]).unwrap())
    }

    fn iir() -> Filter {
        Filter::Iir(
            IirSpec::from_arrays(&[[0.0, 0.0, 1.0, 0.0], [-0.52, 0.0, -1.414, 0.0], [0.221, -0.761, 0.784, -1.044], [0.221, 0.761, 0.784, 1.044]])
                .unwrap(),
        )
    }

    #[test]
    fn config_consistency() {
        let op = sensor(8, 1);
        assert!(Simulation::new(&op, fir(), SimConfig::new(Scenario::FirDet, q(6), 0)).is_err());
        assert!(Simulation::new(&op, fir(), SimConfig::new(Scenario::FirDet, q(6), 1).with_p(0.5)).is_err());
        assert!(Simulation::new(&op, fir(), SimConfig::new(Scenario::FirRandom, q(6), 1)).is_err());
        assert!(Simulation::new(&op, iir(), SimConfig::new(Scenario::FirDet, q(6), 1)).is_err());
        assert!(Simulation::new(&op, iir(), SimConfig::new(Scenario::IirAsync, q(6), 1).with_p(0.0)).is_err());
        let cfg: std::result::Result<SimConfig, _> =
            serde_json::from_str(r#"{"scenario":"fir_det","quantizer":{"bits":6,"range":1,"mode":"dithered_uniform"},"trials":3,"bogus":1}"#);
        assert!(cfg.is_err());
    }

    #[test]
    fn vanishing_step_gives_vanishing_msd() {
        let op = sensor(8, 2);
        let cases = [
            (fir(), SimConfig::new(Scenario::FirDet, q(52), 4)),
            (fir(), SimConfig::new(Scenario::FirRandom, q(52), 4).with_p(0.6)),
            (iir(), SimConfig::new(Scenario::IirDet, q(52), 4).with_iterations(40)),
            (iir(), SimConfig::new(Scenario::IirRandom, q(52), 4).with_p(0.6).with_iterations(40)),
            (iir(), SimConfig::new(Scenario::IirAsync, q(52), 4).with_p(0.5).with_iterations(40)),
        ];
        for (f, cfg) in cases {
            let sim = Simulation::new(&op, f, cfg).unwrap();
            let r = sim.run(None).unwrap();
            assert!(r.msd.iter().all(|m| *m < 1e-20), "{:?}: {:?}", r.scenario, r.msd);
        }
    }

    #[test]
    fn scalar_feedback_cancels_noise() {
        let op = ShiftOperator::custom(Mat::from_element(1, 1, 0.8)).unwrap();
        let f = Filter::Fir(FirSpec::new(vec![0.5, 1.0, -0.5, 0.7]).unwrap());
        let sim = Simulation::new(&op, f, SimConfig::new(Scenario::FirDet, q(4), 20)).unwrap();
        let plan = sim.plan().unwrap();
        let r = sim.run(Some(&plan.theta)).unwrap();
        assert!(r.msd.iter().all(|m| *m < 1e-28), "{:?}", r.msd);
        let r0 = sim.run(None).unwrap();
        assert!(r0.steady_msd > 1e-4);
    }

    #[test]
    fn reproducible_and_thread_independent() {
        let op = sensor(10, 3);
        let cfg = SimConfig::new(Scenario::IirRandom, q(3), 600).with_p(0.8).with_iterations(30).with_seed(9);
        let sim = Simulation::new(&op, iir(), cfg).unwrap();
        let plan = sim.plan().unwrap();
        let a = sim.run(Some(&plan.theta)).unwrap();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| sim.run(Some(&plan.theta)).unwrap());
        assert_eq!(a.msd, b.msd);
        assert_eq!(a.noise_power, b.noise_power);
    }

    #[test]
    fn fir_noise_power_matches_prediction() {
        let op = ShiftOperator::build(&Graph::ring(8), ShiftKind::NormalizedLaplacian).unwrap();
        let sim = Simulation::new(&op, fir(), SimConfig::new(Scenario::FirDet, q(6), 20_000).with_seed(4)).unwrap();
        let plan = sim.plan().unwrap();
        let r = sim.run(Some(&plan.theta)).unwrap();
        let pred = r.predicted_noise_power.unwrap();
        assert!((r.steady_noise_power / pred - 1.0).abs() < 0.05, "{} vs {pred}", r.steady_noise_power);
        assert_eq!(r.overflows, 0);
        let r0 = sim.run(None).unwrap();
        let pred0 = r0.predicted_noise_power.unwrap();
        assert!((r0.steady_noise_power / pred0 - 1.0).abs() < 0.05);
    }

    #[test]
    fn paired_runs_favor_feedback() {
        let op = sensor(10, 5);
        let cfg = SimConfig::new(Scenario::IirAsync, q(3), 400).with_p(0.5).with_iterations(60);
        let sim = Simulation::new(&op, iir(), cfg).unwrap();
        let plan = sim.plan().unwrap();
        let pr = sim.run_paired(&plan.theta).unwrap();
        assert!(pr.z_score() > 3.0, "{pr:?}");
        assert!(pr.improvement_db() > 0.0);
    }

    #[test]
    fn variance_floor_vanishes_at_full_connectivity() {
        let op = sensor(8, 6);
        let f = Filter::Iir(IirSpec::from_arrays(&[[-0.52, 0.0, -1.414, 0.0]]).unwrap());
        assert_eq!(empirical_variance_floor(&op, &f, 1.0, 10, 10, 0).unwrap(), 0.0);
        let a = empirical_variance_floor(&op, &f, 0.5, 400, 40, 0).unwrap();
        let b = empirical_variance_floor(&op, &f, 0.9, 400, 40, 0).unwrap();
        assert!(a > b && b > 0.0);
    }
}
