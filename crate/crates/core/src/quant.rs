//! Randomized uniform quantizers, differential quantization and bit accounting.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{CVector, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    /// Subtractive dither: noise is uniform on `[−Δ/2, Δ/2]` and independent of the input.
    DitheredUniform,
    /// Randomized rounding to one of the two neighbouring grid points.
    Probabilistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerConfig {
    pub bits: u32,
    pub range: f64,
    pub mode: QuantMode,
    #[serde(default)]
    pub complex: bool,
}

impl QuantizerConfig {
    pub fn new(bits: u32, range: f64, mode: QuantMode) -> Result<Self> {
        let cfg = QuantizerConfig { bits, range, mode, complex: false };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits == 0 || self.bits > 60 {
            return Err(Error::invalid(format!("bits must be in 1..=60, got {}", self.bits)));
        }
        if !(self.range > 0.0 && self.range.is_finite()) {
            return Err(Error::invalid("quantizer range must be positive and finite"));
        }
        Ok(())
    }

    pub fn with_complex(mut self, complex: bool) -> Self {
        self.complex = complex;
        self
    }

    /// `Δ = 2r / 2ᵇ`.
    pub fn step(&self) -> f64 {
        2.0 * self.range / 2f64.powi(self.bits as i32)
    }

    /// `Δ²/12` per real component, doubled for complex values.
    pub fn noise_variance(&self) -> f64 {
        let s = self.step();
        let base = s * s / 12.0;
        if self.complex {
            2.0 * base
        } else {
            base
        }
    }
}

/// Quantizer with an overflow counter. Inputs beyond `±r` are clamped and counted.
#[derive(Debug, Clone)]
pub struct Quantizer {
    cfg: QuantizerConfig,
    step: f64,
    overflows: u64,
}

impl Quantizer {
    pub fn new(cfg: QuantizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Quantizer { cfg, step: cfg.step(), overflows: 0 })
    }

    pub fn config(&self) -> &QuantizerConfig {
        &self.cfg
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn overflows(&self) -> u64 {
        self.overflows
    }

    pub fn reset_overflows(&mut self) {
        self.overflows = 0;
    }

    /// Quantizes one value, returning the reconstruction and the transmitted symbol index.
    pub fn quantize_value<R: Rng + ?Sized>(&mut self, v: f64, rng: &mut R) -> (f64, i64) {
        let r = self.cfg.range;
        let vc = if v.abs() > r {
            self.overflows += 1;
            v.clamp(-r, r)
        } else {
            v
        };
        let d = self.step;
        match self.cfg.mode {
            QuantMode::DitheredUniform => {
                let dither = (rng.random::<f64>() - 0.5) * d;
                let k = ((vc + dither) / d).round();
                (k * d - dither, k as i64)
            }
            QuantMode::Probabilistic => {
                let scaled = vc / d;
                let lo = scaled.floor();
                let frac = scaled - lo;
                // One draw per value keeps random streams aligned across runs.
                let u: f64 = rng.random();
                let k = if u < frac { lo + 1.0 } else { lo };
                (k * d, k as i64)
            }
        }
    }

    /// Returns `(Q[v], n)` with `n = Q[v] − v`.
    pub fn quantize<R: Rng + ?Sized>(&mut self, v: &Vector, rng: &mut R) -> (Vector, Vector) {
        let q = v.map(|x| self.quantize_value(x, rng).0);
        let n = &q - v;
        (q, n)
    }

    /// Real and imaginary parts are quantized independently.
    pub fn quantize_complex<R: Rng + ?Sized>(&mut self, v: &CVector, rng: &mut R) -> (CVector, CVector) {
        let q = v.map(|c| {
            let re = self.quantize_value(c.re, rng).0;
            let im = self.quantize_value(c.im, rng).0;
            Complex64::new(re, im)
        });
        let n = &q - v;
        (q, n)
    }
}

/// Bits spent on one symbol by the variable-rate coder: a zero flag, then sign and an
/// Elias-style magnitude field of `⌈log₂(|k|+2)⌉` bits for nonzero symbols.
pub fn symbol_cost(k: i64) -> u64 {
    if k == 0 {
        1
    } else {
        let m = k.unsigned_abs() + 2;
        // ceil(log2(m)) for m >= 2
        let ceil_log2 = 64 - (m - 1).leading_zeros() as u64;
        2 + ceil_log2
    }
}

/// Sender/receiver pair for differential quantization: `x̂_t = x̂_{t−1} + Q[x_t − x̂_{t−1}]`.
#[derive(Debug, Clone)]
pub struct DifferentialQuantizer {
    quantizer: Quantizer,
    state: Vector,
}

impl DifferentialQuantizer {
    pub fn new(cfg: QuantizerConfig, dim: usize) -> Result<Self> {
        Ok(DifferentialQuantizer { quantizer: Quantizer::new(cfg)?, state: Vector::zeros(dim) })
    }

    pub fn state(&self) -> &Vector {
        &self.state
    }

    pub fn overflows(&self) -> u64 {
        self.quantizer.overflows()
    }

    /// Returns `(reconstruction, noise, bits, symbols)` and advances the shared state.
    pub fn step<R: Rng + ?Sized>(&mut self, v: &Vector, rng: &mut R) -> (Vector, Vector, u64, Vec<i64>) {
        let mut bits = 0;
        let mut symbols = Vec::with_capacity(v.len());
        let mut recon = self.state.clone();
        for i in 0..v.len() {
            let (q, k) = self.quantizer.quantize_value(v[i] - self.state[i], rng);
            recon[i] += q;
            bits += symbol_cost(k);
            symbols.push(k);
        }
        let noise = &recon - v;
        self.state = recon.clone();
        (recon, noise, bits, symbols)
    }

    /// Overrides the shared state, e.g. when the innovation is formed from a modified input.
    pub fn set_state(&mut self, state: Vector) {
        self.state = state;
    }

    pub fn quantizer_mut(&mut self) -> &mut Quantizer {
        &mut self.quantizer
    }
}

/// Accumulates coded bits per message.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RateMeter {
    pub total_bits: u64,
    pub messages: u64,
    pub components_per_message: usize,
}

impl RateMeter {
    pub fn new(components_per_message: usize) -> Self {
        RateMeter { total_bits: 0, messages: 0, components_per_message }
    }

    pub fn record(&mut self, bits: u64) {
        self.total_bits += bits;
        self.messages += 1;
    }

    pub fn merge(&mut self, other: &RateMeter) {
        self.total_bits += other.total_bits;
        self.messages += other.messages;
    }

    pub fn reset(&mut self) {
        self.total_bits = 0;
        self.messages = 0;
    }

    /// Average bits per message per component.
    pub fn rate(&self) -> Result<f64> {
        if self.messages == 0 || self.components_per_message == 0 {
            return Err(Error::EmptyMeter);
        }
        Ok(self.total_bits as f64 / (self.messages as f64 * self.components_per_message as f64))
    }
}
