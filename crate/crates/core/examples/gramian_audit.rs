//! Solves the noise Gramians for one pole and checks each against its defining equation and
//! the spectral-norm bound.

use gqef::gramians::{gramian_norm_bound, solve_lyapunov_deterministic, solve_w_p, solve_w_phi, EdgeModel};
use gqef::graphs::{benchmark_sensor_graph, ShiftKind, ShiftOperator};
use gqef::linalg::{spectral_norm, spectral_norm_c};
use num_complex::Complex64;

fn main() -> gqef::Result<()> {
    let op = ShiftOperator::build(&benchmark_sensor_graph(0)?, ShiftKind::NormalizedLaplacian)?;
    let rho = op.spectral_radius;

    for psi in [Complex64::new(-0.52, 0.0), Complex64::new(-0.974, 0.0), Complex64::new(0.248, 0.795)] {
        let bound = gramian_norm_bound(psi, rho);
        println!("ψ = {psi:.3}   bound 1/(1 − |ψ|²ρ²) = {bound:.3}");

        let w0 = solve_lyapunov_deterministic(&op.matrix, psi)?;
        println!("  fixed graph     ‖W‖ = {:8.3}  residual {:.1e}", spectral_norm(&w0.w), w0.residual);

        for p in [0.5, 0.9] {
            let wphi = solve_w_phi(&EdgeModel::new(&op, p)?, psi)?;
            println!(
                "  edges p = {p:<4}  ‖W‖ = {:8.3}  residual {:.1e}  ({} iterations)",
                spectral_norm(&wphi.w),
                wphi.residual,
                wphi.iterations
            );
        }
        for p in [0.25, 0.75] {
            let wp = solve_w_p(&op.matrix, psi, p)?;
            println!(
                "  nodes p = {p:<4}  ‖E[PWP]‖ = {:8.3}  residual {:.1e}",
                spectral_norm_c(&wp.pwp),
                wp.w.residual
            );
        }
    }
    Ok(())
}
