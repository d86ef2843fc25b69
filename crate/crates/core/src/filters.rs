//! FIR and IIR graph filters: specifications, exact outputs and single-step recursions.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphs::ShiftOperator;
use crate::linalg::{to_complex, to_complex_vec, CMat, CVector, Mat, Vector};

/// Tolerance on the imaginary part of a branch sum before it is discarded.
pub const IMAG_TOL: f64 = 1e-9;

/// Polynomial filter `y = Σ_t φ_t Sᵗ x`.
#[derive(Debug, Clone, PartialEq)]
pub struct FirSpec {
    coeffs: Vec<f64>,
}

impl FirSpec {
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::invalid("FIR filter needs at least one coefficient"));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("FIR coefficients must be finite"));
        }
        Ok(FirSpec { coeffs })
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Filter order `T` (number of shifts).
    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn response(&self, lambda: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * lambda + c)
    }

    /// Coefficients rescaled as `φ_t → pᵗ φ_t`.
    pub fn scaled(&self, p: f64) -> FirSpec {
        let coeffs = self.coeffs.iter().enumerate().map(|(t, c)| c * p.powi(t as i32)).collect();
        FirSpec { coeffs }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IirBranch {
    pub psi: Complex64,
    pub phi: Complex64,
}

/// Parallel first-order branches `y = Σ_k φ_k (I − ψ_k S)⁻¹ x`.
///
/// Branches are kept sorted by `(Re ψ, Im ψ)`; complex branches must come in conjugate pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct IirSpec {
    branches: Vec<IirBranch>,
}

impl IirSpec {
    pub fn new(mut branches: Vec<IirBranch>) -> Result<Self> {
        if branches.is_empty() {
            return Err(Error::invalid("IIR filter needs at least one branch"));
        }
        for b in &branches {
            if ![b.psi.re, b.psi.im, b.phi.re, b.phi.im].iter().all(|v| v.is_finite()) {
                return Err(Error::invalid("IIR coefficients must be finite"));
            }
        }
        branches.sort_by(|a, b| {
            (a.psi.re, a.psi.im, a.phi.re, a.phi.im)
                .partial_cmp(&(b.psi.re, b.psi.im, b.phi.re, b.phi.im))
                .expect("finite coefficients")
        });
        let spec = IirSpec { branches };
        spec.check_conjugate_pairs()?;
        Ok(spec)
    }

    /// Builds from `(ψ, φ)` pairs given as `[re ψ, im ψ, re φ, im φ]`.
    pub fn from_arrays(rows: &[[f64; 4]]) -> Result<Self> {
        Self::new(
            rows.iter()
                .map(|r| IirBranch { psi: Complex64::new(r[0], r[1]), phi: Complex64::new(r[2], r[3]) })
                .collect(),
        )
    }

    pub fn to_arrays(&self) -> Vec<[f64; 4]> {
        self.branches.iter().map(|b| [b.psi.re, b.psi.im, b.phi.re, b.phi.im]).collect()
    }

    fn check_conjugate_pairs(&self) -> Result<()> {
        let tol = 1e-12;
        let mut used = vec![false; self.branches.len()];
        for (k, b) in self.branches.iter().enumerate() {
            if used[k] {
                continue;
            }
            if b.psi.im.abs() <= tol && b.phi.im.abs() <= tol {
                used[k] = true;
                continue;
            }
            let partner = (0..self.branches.len()).find(|&m| {
                m != k
                    && !used[m]
                    && (self.branches[m].psi - b.psi.conj()).norm() <= tol
                    && (self.branches[m].phi - b.phi.conj()).norm() <= tol
            });
            match partner {
                Some(m) => {
                    used[k] = true;
                    used[m] = true;
                }
                None => {
                    return Err(Error::invalid(format!(
                        "branch (ψ={}, φ={}) has no conjugate partner",
                        b.psi, b.phi
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn branches(&self) -> &[IirBranch] {
        &self.branches
    }

    pub fn psis(&self) -> Vec<Complex64> {
        self.branches.iter().map(|b| b.psi).collect()
    }

    /// Errors unless `|ψ_k| ρ < 1` for every branch.
    pub fn check_stable(&self, rho: f64) -> Result<()> {
        for b in &self.branches {
            let g = b.psi.norm() * rho;
            if g >= 1.0 {
                return Err(Error::Unstable(format!("|ψ|·ρ = {g:.6} ≥ 1 for ψ = {}", b.psi)));
            }
        }
        Ok(())
    }

    pub fn response(&self, lambda: f64) -> f64 {
        self.branches
            .iter()
            .map(|b| (b.phi / (Complex64::new(1.0, 0.0) - b.psi * lambda)).re)
            .sum()
    }
}

/// File representation of a filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum FilterSpec {
    Fir { coeffs: Vec<f64> },
    Iir { branches: Vec<[f64; 4]> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Filter {
    Fir(FirSpec),
    Iir(IirSpec),
}

impl FilterSpec {
    pub fn build(&self) -> Result<Filter> {
        Ok(match self {
            FilterSpec::Fir { coeffs } => Filter::Fir(FirSpec::new(coeffs.clone())?),
            FilterSpec::Iir { branches } => Filter::Iir(IirSpec::from_arrays(branches)?),
        })
    }
}

impl From<&Filter> for FilterSpec {
    fn from(f: &Filter) -> Self {
        match f {
            Filter::Fir(s) => FilterSpec::Fir { coeffs: s.coeffs.clone() },
            Filter::Iir(s) => FilterSpec::Iir { branches: s.to_arrays() },
        }
    }
}

fn check_dim(s: &Mat, len: usize) -> Result<()> {
    if s.nrows() != len {
        return Err(Error::Dimension { expected: s.nrows(), got: len });
    }
    Ok(())
}

/// Horner evaluation of `Σ_t φ_t Sᵗ x`.
pub fn fir_exact(s: &ShiftOperator, f: &FirSpec, x: &Vector) -> Result<Vector> {
    fir_apply(&s.matrix, f.coeffs(), x)
}

pub fn fir_apply(s: &Mat, coeffs: &[f64], x: &Vector) -> Result<Vector> {
    check_dim(s, x.len())?;
    let mut y = Vector::zeros(x.len());
    for &c in coeffs.iter().rev() {
        y = s * y + x * c;
    }
    Ok(y)
}

/// Limit state `φ (I − ψ S)⁻¹ x` of one branch.
pub fn iir_branch_limit(s: &Mat, psi: Complex64, phi: Complex64, x: &Vector) -> Result<CVector> {
    check_dim(s, x.len())?;
    let n = s.nrows();
    let a: CMat = CMat::identity(n, n) - to_complex(s) * psi;
    let inv = a
        .clone()
        .try_inverse()
        .ok_or(Error::IllConditioned(f64::INFINITY))?;
    let cond = one_norm(&a) * one_norm(&inv);
    if !(cond < 1e12) {
        return Err(Error::IllConditioned(cond));
    }
    Ok(inv * to_complex_vec(x) * phi)
}

fn one_norm(m: &CMat) -> f64 {
    m.column_iter().map(|c| c.iter().map(|v| v.norm()).sum::<f64>()).fold(0.0, f64::max)
}

/// Drops the imaginary part after checking it is round-off.
pub fn realify(v: &CVector) -> Result<Vector> {
    let im = v.iter().fold(0.0f64, |a, c| a.max(c.im.abs()));
    if im > IMAG_TOL {
        return Err(Error::NonReal(im));
    }
    Ok(v.map(|c| c.re))
}

/// `Σ_k φ_k (I − ψ_k S)⁻¹ x`, summed in the sorted branch order.
pub fn iir_exact(s: &ShiftOperator, f: &IirSpec, x: &Vector) -> Result<Vector> {
    f.check_stable(s.spectral_radius)?;
    let mut y = CVector::zeros(x.len());
    for b in f.branches() {
        y += iir_branch_limit(&s.matrix, b.psi, b.phi, x)?;
    }
    realify(&y)
}

/// `w_t = S_{t−1} w_{t−1}`.
pub fn fir_recursion_step(s_t: &Mat, w: &Vector) -> Result<Vector> {
    check_dim(s_t, w.len())?;
    Ok(s_t * w)
}

/// `w_t = ψ S_{t−1} w_{t−1} + φ x`.
pub fn iir_recursion_step(s_t: &Mat, psi: Complex64, phi: Complex64, w: &CVector, x: &Vector) -> Result<CVector> {
    check_dim(s_t, w.len())?;
    check_dim(s_t, x.len())?;
    let sw = mat_cvec(s_t, w);
    Ok(sw * psi + to_complex_vec(x) * phi)
}

/// Node-asynchronous step: selected nodes apply the branch update, the rest keep their state.
pub fn iir_async_step(
    s: &Mat,
    psi: Complex64,
    phi: Complex64,
    w: &CVector,
    x: &Vector,
    selected: &[bool],
) -> Result<CVector> {
    check_dim(s, w.len())?;
    check_dim(s, x.len())?;
    if selected.len() != w.len() {
        return Err(Error::Dimension { expected: w.len(), got: selected.len() });
    }
    let mut out = w.clone();
    for (i, &sel) in selected.iter().enumerate() {
        if sel {
            let mut acc = Complex64::new(0.0, 0.0);
            for j in 0..w.len() {
                acc += w[j] * s[(i, j)];
            }
            out[i] = psi * acc + phi * x[i];
        }
    }
    Ok(out)
}

/// Real matrix times complex vector without promoting the matrix.
pub fn mat_cvec(s: &Mat, w: &CVector) -> CVector {
    let re = s * w.map(|c| c.re);
    let im = s * w.map(|c| c.im);
    CVector::from_iterator(w.len(), re.iter().zip(im.iter()).map(|(&a, &b)| Complex64::new(a, b)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::{gen_sensor_graph, EdgeSampler, Graph, NodeSampler, ShiftKind};
    use crate::linalg::mat_pow;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vector {
        Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
    }

    fn sensor(n: usize, kind: ShiftKind) -> ShiftOperator {
        ShiftOperator::build(&gen_sensor_graph(n, 0.45, 4).unwrap(), kind).unwrap()
    }

    #[test]
    fn fir_trivial_cases() {
        let s = ShiftOperator::build(&Graph::path(2), ShiftKind::Adjacency).unwrap();
        let x = Vector::from_vec(vec![1.0, 0.0]);
        assert_eq!(fir_exact(&s, &FirSpec::new(vec![1.0]).unwrap(), &x).unwrap(), x);
        let y = fir_exact(&s, &FirSpec::new(vec![0.0, 1.0]).unwrap(), &x).unwrap();
        assert_eq!(y, Vector::from_vec(vec![0.0, 1.0]));
        assert!(fir_exact(&s, &FirSpec::new(vec![1.0]).unwrap(), &Vector::zeros(3)).is_err());
    }

    #[test]
    fn fir_matches_naive_powers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sensor(10, ShiftKind::NormalizedLaplacian);
        let coeffs: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = rand_vec(&mut rng, 10);
        let y = fir_exact(&s, &FirSpec::new(coeffs.clone()).unwrap(), &x).unwrap();
        let mut naive = Vector::zeros(10);
        for (t, c) in coeffs.iter().enumerate() {
            naive += mat_pow(&s.matrix, t) * &x * *c;
        }
        assert!((y - naive).amax() < 1e-12);
    }

    #[test]
    fn fir_steps_telescope() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = sensor(8, ShiftKind::Adjacency);
        let coeffs = vec![0.5, -0.2, 0.3, 0.1];
        let x = rand_vec(&mut rng, 8);
        let mut w = x.clone();
        let mut y = &w * coeffs[0];
        for c in &coeffs[1..] {
            w = fir_recursion_step(&s.matrix, &w).unwrap();
            y += &w * *c;
        }
        let exact = fir_exact(&s, &FirSpec::new(coeffs).unwrap(), &x).unwrap();
        assert!((y - exact).amax() < 1e-12);
    }

    #[test]
    fn iir_trivial_cases() {
        let s = sensor(6, ShiftKind::NormalizedLaplacian);
        let x = Vector::from_vec(vec![1.0, -1.0, 0.5, 0.0, 2.0, 3.0]);
        let id = IirSpec::from_arrays(&[[0.0, 0.0, 1.0, 0.0]]).unwrap();
        assert!((iir_exact(&s, &id, &x).unwrap() - &x).amax() < 1e-14);
        let scalar = ShiftOperator::custom(Mat::from_element(1, 1, 0.8)).unwrap();
        let f = IirSpec::from_arrays(&[[0.5, 0.0, 2.0, 0.0]]).unwrap();
        let y = iir_exact(&scalar, &f, &Vector::from_element(1, 3.0)).unwrap();
        assert!((y[0] - 2.0 * 3.0 / (1.0 - 0.4)).abs() < 1e-14);
    }

    #[test]
    fn iir_rejects_unpaired_and_unstable() {
        assert!(IirSpec::from_arrays(&[[0.1, 0.2, 1.0, 0.0]]).is_err());
        let f = IirSpec::from_arrays(&[[1.2, 0.0, 1.0, 0.0]]).unwrap();
        let s = sensor(6, ShiftKind::NormalizedLaplacian);
        assert!(matches!(iir_exact(&s, &f, &Vector::zeros(6)), Err(Error::Unstable(_))));
    }

    #[test]
    fn iir_branches_are_sorted() {
        let f = IirSpec::from_arrays(&[[0.3, 0.5, 1.0, 0.2], [-0.5, 0.0, 1.0, 0.0], [0.3, -0.5, 1.0, -0.2]]).unwrap();
        let re: Vec<_> = f.branches().iter().map(|b| (b.psi.re, b.psi.im)).collect();
        assert_eq!(re, vec![(-0.5, 0.0), (0.3, -0.5), (0.3, 0.5)]);
    }

    fn mixed_iir() -> IirSpec {
        IirSpec::from_arrays(&[
            [0.0, 0.0, 1.0, 0.0],
            [-0.427, 0.0, -1.414, 0.0],
            [0.248, -0.795, 0.782, -0.923],
            [0.248, 0.795, 0.782, 0.923],
        ])
        .unwrap()
    }

    #[test]
    fn iir_recursion_converges_to_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = sensor(12, ShiftKind::NormalizedLaplacian);
        let mut f = mixed_iir();
        f.branches.push(IirBranch { psi: Complex64::new(0.95, 0.0), phi: Complex64::new(0.1, 0.0) });
        let f = IirSpec::new(f.branches).unwrap();
        let x = rand_vec(&mut rng, 12);
        let mut y = CVector::zeros(12);
        for b in f.branches() {
            let mut w = CVector::zeros(12);
            for _ in 0..500 {
                w = iir_recursion_step(&s.matrix, b.psi, b.phi, &w, &x).unwrap();
            }
            y += w;
        }
        let exact = iir_exact(&s, &f, &x).unwrap();
        assert!((realify(&y).unwrap() - exact).amax() < 1e-8);
    }

    #[test]
    fn async_step_selection_semantics() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = sensor(7, ShiftKind::NormalizedLaplacian);
        let x = rand_vec(&mut rng, 7);
        let w = rand_vec(&mut rng, 7).map(|v| Complex64::new(v, -v));
        let (psi, phi) = (Complex64::new(0.3, 0.4), Complex64::new(1.0, -0.5));
        let all = iir_async_step(&s.matrix, psi, phi, &w, &x, &[true; 7]).unwrap();
        let sync = iir_recursion_step(&s.matrix, psi, phi, &w, &x).unwrap();
        assert!((all - sync).camax() < 1e-15);
        let none = iir_async_step(&s.matrix, psi, phi, &w, &x, &[false; 7]).unwrap();
        assert_eq!(none, w);
        let sel = [true, false, true, false, false, true, false];
        let part = iir_async_step(&s.matrix, psi, phi, &w, &x, &sel).unwrap();
        for i in 0..7 {
            if !sel[i] {
                assert_eq!(part[i], w[i]);
            }
        }
    }

    #[test]
    fn async_fixed_point_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = sensor(9, ShiftKind::NormalizedLaplacian);
        let x = rand_vec(&mut rng, 9);
        for b in mixed_iir().branches() {
            let w = iir_branch_limit(&s.matrix, b.psi, b.phi, &x).unwrap();
            let sel: Vec<bool> = (0..9).map(|_| rng.random_bool(0.5)).collect();
            let next = iir_async_step(&s.matrix, b.psi, b.phi, &w, &x, &sel).unwrap();
            assert!((next - &w).camax() < 1e-12);
        }
    }

    #[test]
    fn async_runs_converge() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = sensor(10, ShiftKind::NormalizedLaplacian);
        let x = rand_vec(&mut rng, 10);
        let b = IirBranch { psi: Complex64::new(-0.5, 0.0), phi: Complex64::new(1.0, 0.0) };
        let target = iir_branch_limit(&s.matrix, b.psi, b.phi, &x).unwrap();
        let mut sync = CVector::zeros(10);
        let mut full = NodeSampler::new(10, 1.0, 0).unwrap();
        for _ in 0..200 {
            sync = iir_async_step(&s.matrix, b.psi, b.phi, &sync, &x, &full.sample_set()).unwrap();
        }
        assert!((sync - &target).camax() < 1e-8);

        let mut ns = NodeSampler::new(10, 0.25, 7).unwrap();
        let mut w = CVector::zeros(10);
        let mut msd = Vec::new();
        for _ in 0..800 {
            w = iir_async_step(&s.matrix, b.psi, b.phi, &w, &x, &ns.sample_set()).unwrap();
            msd.push((&w - &target).norm_squared() / 10.0);
        }
        assert!(msd[99] < msd[9] && msd[399] < msd[99]);
        assert!(*msd.last().unwrap() < 1e-6);
    }

    #[test]
    fn mean_output_over_random_edges_uses_expected_graph() {
        let g = Graph::ring(4);
        let s = ShiftOperator::build(&g, ShiftKind::Adjacency).unwrap();
        let p = 0.6;
        let coeffs = [0.4, 0.3, -0.2, 0.5];
        let x = Vector::from_vec(vec![1.0, -0.5, 0.25, 2.0]);
        let mut es = EdgeSampler::new(&s, p, 99).unwrap();
        let trials = 100_000;
        let mut sum = Vector::zeros(4);
        let mut sumsq = Vector::zeros(4);
        for _ in 0..trials {
            let mut w = x.clone();
            let mut y = &w * coeffs[0];
            for c in &coeffs[1..] {
                w = fir_recursion_step(&es.sample(), &w).unwrap();
                y += &w * *c;
            }
            sumsq += y.component_mul(&y);
            sum += y;
        }
        let mean = &sum / trials as f64;
        let sbar = &s.matrix * p;
        let expect = fir_apply(&sbar, &coeffs, &x).unwrap();
        for i in 0..4 {
            let var = sumsq[i] / trials as f64 - mean[i] * mean[i];
            let se = (var / trials as f64).sqrt();
            assert!((mean[i] - expect[i]).abs() < 3.0 * se, "node {i}");
        }
    }

    #[test]
    fn spectral_response_matches_gft() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = sensor(10, ShiftKind::NormalizedLaplacian);
        let f = FirSpec::new(vec![0.2, -0.4, 0.9, 0.1]).unwrap();
        let x = rand_vec(&mut rng, 10);
        let y = fir_exact(&s, &f, &x).unwrap();
        let (xh, yh) = (s.gft(&x).unwrap(), s.gft(&y).unwrap());
        let evd = s.evd().unwrap();
        for k in 0..10 {
            let h = f.response(evd.eigenvalues[k].re);
            assert!((yh[k] - xh[k] * h).norm() < 1e-9);
        }
    }

    #[test]
    fn filter_spec_json() {
        let fir: FilterSpec = serde_json::from_str(r#"{"type":"fir","coeffs":[1.0,0.5]}"#).unwrap();
        assert!(matches!(fir.build().unwrap(), Filter::Fir(_)));
        let iir: FilterSpec =
            serde_json::from_str(r#"{"type":"iir","branches":[[0.0,0.0,1.0,0.0],[-0.5,0.0,2.0,0.0]]}"#).unwrap();
        let built = iir.build().unwrap();
        assert_eq!(FilterSpec::from(&built), FilterSpec::Iir { branches: vec![[-0.5, 0.0, 2.0, 0.0], [0.0, 0.0, 1.0, 0.0]] });
        assert!(serde_json::from_str::<FilterSpec>(r#"{"type":"fir","coeffs":[1],"extra":1}"#).is_err());
    }

    proptest! {
        #[test]
        fn filters_are_linear(seed in 0u64..500, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = sensor(8, ShiftKind::NormalizedLaplacian);
            let x = rand_vec(&mut rng, 8);
            let z = rand_vec(&mut rng, 8);
            let mix = &x * a + &z * b;
            let f = FirSpec::new((0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let lhs = fir_exact(&s, &f, &mix).unwrap();
            let rhs = fir_exact(&s, &f, &x).unwrap() * a + fir_exact(&s, &f, &z).unwrap() * b;
            prop_assert!((lhs - rhs).amax() < 1e-12);
            let g = mixed_iir();
            let lhs = iir_exact(&s, &g, &mix).unwrap();
            let rhs = iir_exact(&s, &g, &x).unwrap() * a + iir_exact(&s, &g, &z).unwrap() * b;
            prop_assert!((lhs - rhs).amax() < 1e-12);
        }
    }
}
