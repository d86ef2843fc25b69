//! Empirical noise statistics of the two quantizer modes and the cost of coding their
//! symbols.

use gqef::linalg::Vector;
use gqef::quant::{symbol_cost, DifferentialQuantizer, QuantMode, Quantizer, QuantizerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> gqef::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples = 200_000;
    for mode in [QuantMode::DitheredUniform, QuantMode::Probabilistic] {
        let cfg = QuantizerConfig::new(5, 1.6, mode)?;
        let mut q = Quantizer::new(cfg)?;
        let (mut mean, mut power, mut corr, mut bits) = (0.0, 0.0, 0.0, 0u64);
        for _ in 0..samples {
            let v: f64 = rng.random_range(-1.0..1.0);
            let (r, k) = q.quantize_value(v, &mut rng);
            let n = r - v;
            mean += n;
            power += n * n;
            corr += n * v;
            bits += symbol_cost(k);
        }
        let s = samples as f64;
        println!(
            "{mode:?}: Δ = {:.3}, mean {:+.1e}, power {:.3e} (Δ²/12 = {:.3e}), corr with input {:+.1e}, {:.2} bits/symbol",
            cfg.step(),
            mean / s,
            power / s,
            cfg.noise_variance(),
            corr / s,
            bits as f64 / s
        );
    }

    // Coding the innovation of a slowly varying vector is far cheaper than coding the vector.
    let cfg = QuantizerConfig::new(5, 1.6, QuantMode::Probabilistic)?;
    let mut dq = DifferentialQuantizer::new(cfg, 8)?;
    let mut direct = Quantizer::new(cfg)?;
    let (mut dbits, mut fbits) = (0u64, 0u64);
    let steps = 2000;
    for t in 0..steps {
        let v = Vector::from_fn(8, |i, _| (0.01 * t as f64 + i as f64).sin());
        let (_, _, b, _) = dq.step(&v, &mut rng);
        dbits += b;
        for x in v.iter() {
            fbits += symbol_cost(direct.quantize_value(*x, &mut rng).1);
        }
    }
    let per = (steps * 8) as f64;
    println!("variable-rate symbols: direct {:.2} bits, differential {:.2} bits", fbits as f64 / per, dbits as f64 / per);
    Ok(())
}
