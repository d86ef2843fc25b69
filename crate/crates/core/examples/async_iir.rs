//! First-order IIR with node-asynchronous updates: each node wakes up with probability p.

use gqef::filters::{Filter, IirSpec};
use gqef::graphs::{benchmark_sensor_graph, ShiftKind, ShiftOperator};
use gqef::qef::Scenario;
use gqef::quant::{QuantMode, QuantizerConfig};
use gqef::sim::{SimConfig, Simulation};

fn main() -> gqef::Result<()> {
    let op = ShiftOperator::build(&benchmark_sensor_graph(0)?, ShiftKind::NormalizedLaplacian)?;
    let filter = Filter::Iir(IirSpec::from_arrays(&[[-0.52, 0.0, -1.414, 0.0]])?);
    let quantizer = QuantizerConfig::new(3, 4.0, QuantMode::DitheredUniform)?;

    for p in [0.25, 0.5, 0.75, 1.0] {
        let cfg = SimConfig::new(Scenario::IirAsync, quantizer, 1000).with_p(p).with_iterations(150);
        let sim = Simulation::new(&op, filter.clone(), cfg)?;
        let run = sim.run_paired(&sim.plan()?.theta)?;
        let curve = &run.with_feedback.msd_db;
        let steady = run.with_feedback.steady_msd_db();
        let settle = curve.iter().rposition(|v| (v - steady).abs() > 0.5).map_or(0, |i| i + 1);
        println!(
            "p = {p:<4}  {:7.2} → {:7.2} dB  ({:.2} dB), settles after {settle} iterations",
            run.without_feedback.steady_msd_db(),
            steady,
            run.improvement_db()
        );
    }
    Ok(())
}
