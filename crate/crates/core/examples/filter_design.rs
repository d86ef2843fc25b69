//! Noise-aware filter design: FIR order sweep at a fixed tolerance, then the IIR trade-off
//! between design error and noise gain as the regularization weight grows.

use gqef::design::{design_fir, design_iir, nonreg_iir_init, DesignTarget, FirDesignMode, IirDesignMode, IirDesignOptions};
use gqef::graphs::{benchmark_sensor_graph, ShiftKind, ShiftOperator};

fn main() -> gqef::Result<()> {
    let op = ShiftOperator::build(&benchmark_sensor_graph(0)?, ShiftKind::NormalizedLaplacian)?;
    let target = DesignTarget::lowpass(0.5, 1000, 0.03)?;

    println!("FIR, tolerance {}", target.tolerance);
    for order in 5..=11 {
        match design_fir(&target, order, FirDesignMode::Deterministic(&op.matrix)) {
            Ok((_, r)) => println!("  T = {order:<2} error {:.4}  noise gain {:8.3}", r.error, r.regularizer),
            Err(e) => println!("  T = {order:<2} {e}"),
        }
    }

    let iir_target = DesignTarget::lowpass(0.5, 1000, 0.06)?;
    let mode = IirDesignMode::deterministic(&op)?;
    let init = nonreg_iir_init();
    println!("IIR from the non-regularized initializer");
    for gamma in [0.0, 0.05, 0.2] {
        let opts = IirDesignOptions { gamma, starts: 2, ..Default::default() };
        let (spec, r) = design_iir(&iir_target, &init, &mode, opts)?;
        let poles: Vec<String> = spec.psis().iter().map(|p| format!("{:.3}", p.norm())).collect();
        println!("  γ = {gamma:<4} error {:.4}  noise gain {:8.3}  |ψ| = [{}]", r.error, r.regularizer, poles.join(", "));
    }
    Ok(())
}
