//! Low-pass FIR on a fixed graph, quantized to 6 bits, with and without error feedback.

use gqef::design::{design_fir, DesignTarget, FirDesignMode};
use gqef::filters::Filter;
use gqef::graphs::{benchmark_sensor_graph, ShiftKind, ShiftOperator};
use gqef::linalg::db;
use gqef::qef::Scenario;
use gqef::quant::{QuantMode, QuantizerConfig};
use gqef::sim::{SimConfig, Simulation};

fn main() -> gqef::Result<()> {
    let op = ShiftOperator::build(&benchmark_sensor_graph(0)?, ShiftKind::NormalizedLaplacian)?;
    let target = DesignTarget::lowpass(0.5, 1000, 0.03)?;
    let (fir, report) = design_fir(&target, 9, FirDesignMode::Deterministic(&op.matrix))?;
    println!("T = 9, design error {:.4}, noise gain {:.3}", report.error, report.regularizer);

    let quantizer = QuantizerConfig::new(6, 1.0, QuantMode::DitheredUniform)?;
    let sim = Simulation::new(&op, Filter::Fir(fir), SimConfig::new(Scenario::FirDet, quantizer, 500))?;
    let plan = sim.plan()?;
    let base: f64 = plan.baseline_power.iter().sum();
    let with: f64 = plan.predicted_power.iter().sum();
    println!("predicted noise power {:.2} dB → {:.2} dB", db(base), db(with));

    let run = sim.run_paired(&plan.theta)?;
    println!("order   no feedback   feedback");
    for k in 0..run.with_feedback.msd.len() {
        println!(
            "{:>5} {:>13.2} {:>10.2}",
            run.with_feedback.index[k], run.without_feedback.msd_db[k], run.with_feedback.msd_db[k]
        );
    }
    println!("improvement {:.2} dB (z = {:.0})", run.improvement_db(), run.z_score());
    Ok(())
}
