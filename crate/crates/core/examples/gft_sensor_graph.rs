//! Builds the 64-node sensor surrogate, inspects its spectrum and measures how much energy of
//! a smooth signal sits in the low graph frequencies.

use gqef::graphs::{benchmark_sensor_graph, ShiftKind, ShiftOperator};
use gqef::linalg::Vector;

fn main() -> gqef::Result<()> {
    let graph = benchmark_sensor_graph(0)?;
    let op = ShiftOperator::build(&graph, ShiftKind::NormalizedLaplacian)?;
    println!("nodes {}, edges {}, spectral radius {:.4}", op.n(), graph.n_edges(), op.spectral_radius);

    let evd = op.evd()?;
    let mut lambdas: Vec<f64> = evd.eigenvalues.iter().map(|l| l.re).collect();
    lambdas.sort_by(f64::total_cmp);
    println!("smallest eigenvalues {:.4?}", &lambdas[..4]);
    println!("largest eigenvalue   {:.4}", lambdas[lambdas.len() - 1]);

    // Node degree is smooth on a geometric graph, so most of its energy is at low λ.
    let x = Vector::from_vec(graph.degrees());
    let xhat = op.gft(&x)?;
    let mut spectrum: Vec<(f64, f64)> =
        evd.eigenvalues.iter().zip(xhat.iter()).map(|(l, c)| (l.re, c.norm_sqr())).collect();
    spectrum.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = spectrum.iter().map(|s| s.1).sum();
    for cut in [0.1, 0.25, 0.5] {
        let low: f64 = spectrum.iter().filter(|s| s.0 <= cut).map(|s| s.1).sum();
        println!("energy with λ ≤ {cut:<4}: {:5.1}%", 100.0 * low / total);
    }

    let back = op.inverse_gft(&xhat)?;
    let err = back.iter().zip(x.iter()).map(|(a, b)| (a.re - b).abs()).fold(0.0, f64::max);
    println!("round-trip error {err:.2e}");
    Ok(())
}
