//! Decentralized least squares with quantized exchanges: compares full-state, differential,
//! damped error feedback and optimal feedback against the uncompressed baseline.

use gqef::atc::{atc_run, noise_gain_trace, paired_difference, synth_problem, AtcConfig, AtcVariant, DEF_DAMPING};

fn main() -> gqef::Result<()> {
    let problem = synth_problem(50, 40, 4, 0)?;
    println!("N = {}, M = {}, edges {}", problem.n(), problem.m(), problem.graph.n_edges());

    let qef = AtcVariant::qef(&problem)?;
    if let AtcVariant::Qef { alpha } = &qef {
        let gains = noise_gain_trace(&problem, alpha)?;
        println!("noise gain {:.2} → {:.2} (ratio {:.3})", gains.without_feedback, gains.with_feedback, gains.ratio());
    }

    let cfg = AtcConfig { trials: 10, ..Default::default() };
    let variants = [
        AtcVariant::Uncompressed,
        AtcVariant::FullState,
        AtcVariant::Differential,
        AtcVariant::DifferentialErrorFeedback { damping: DEF_DAMPING },
        qef,
    ];
    let mut runs = Vec::new();
    for v in &variants {
        let r = atc_run(&problem, v, &cfg)?;
        let rate = r.rate.map_or("-".to_string(), |b| format!("{b:.2}"));
        println!("{:<13} steady {:8.3} dB  bits/component {rate}", r.variant, r.steady_msd_db());
        runs.push(r);
    }
    let (mean, se) = paired_difference(&runs[4], &runs[3]);
    println!("qef − def steady MSD: {mean:.2e} ± {se:.1e}");
    Ok(())
}
