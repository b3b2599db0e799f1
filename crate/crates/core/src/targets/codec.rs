//! HL-Gauss histogram codec in `ψ(z) = log₂(−z)` space.
//!
//! A non-positive value `z` maps to the Gaussian `N(ψ(z), σ²)` integrated
//! over equal-width bins of `[psi_min, psi_max]`. Mass beyond either end is
//! added to the boundary bin. Decoding takes the expectation of `−2^ζ` over
//! the bin centers `ζ`.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("cannot encode positive value {0}")]
    PositiveValue(f64),
    #[error("malformed distribution: {0}")]
    Malformed(String),
    #[error("invalid codec: {0}")]
    InvalidConfig(String),
}

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramCodec {
    pub m_bins: usize,
    pub psi_min: f64,
    pub psi_max: f64,
    pub sigma: f64,
}

impl Default for HistogramCodec {
    fn default() -> Self {
        Self {
            m_bins: 18,
            psi_min: -1.0,
            psi_max: 16.0,
            sigma: 0.75,
        }
    }
}

impl HistogramCodec {
    pub fn validate(&self) -> Result<(), CodecError> {
        if self.m_bins == 0 {
            return Err(CodecError::InvalidConfig("no bins".into()));
        }
        if !(self.psi_min < self.psi_max) || !self.psi_min.is_finite() || !self.psi_max.is_finite() {
            return Err(CodecError::InvalidConfig("empty support".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(CodecError::InvalidConfig("sigma must be positive".into()));
        }
        Ok(())
    }

    pub fn bin_width(&self) -> f64 {
        (self.psi_max - self.psi_min) / self.m_bins as f64
    }

    pub fn edge(&self, i: usize) -> f64 {
        self.psi_min + i as f64 * self.bin_width()
    }

    pub fn bin_centers(&self) -> Vec<f64> {
        let w = self.bin_width();
        (0..self.m_bins)
            .map(|i| self.psi_min + (i as f64 + 0.5) * w)
            .collect()
    }

    /// `ψ(value)`, clamped to the support.
    pub fn psi(&self, value: f64) -> Result<f64, CodecError> {
        if value > 0.0 || value.is_nan() {
            return Err(CodecError::PositiveValue(value));
        }
        let magnitude = (-value).max(self.psi_min.exp2());
        Ok(magnitude.log2().clamp(self.psi_min, self.psi_max))
    }

    /// Gaussian mass of each bin for location `u`, before tail folding.
    pub fn interval_mass(&self, u: f64) -> Vec<f64> {
        let cdf: Vec<f64> = (0..=self.m_bins)
            .map(|i| std_normal_cdf((self.edge(i) - u) / self.sigma))
            .collect();
        cdf.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn encode(&self, value: f64) -> Result<Vec<f64>, CodecError> {
        let u = self.psi(value)?;
        let mut p = self.interval_mass(u);
        p[0] += std_normal_cdf((self.psi_min - u) / self.sigma);
        // Upper tail via the complementary side to avoid cancellation.
        p[self.m_bins - 1] += std_normal_cdf((u - self.psi_max) / self.sigma);
        Ok(p)
    }

    pub fn decode(&self, probs: &[f64]) -> Result<f64, CodecError> {
        if probs.len() != self.m_bins {
            return Err(CodecError::Malformed(format!(
                "expected {} bins, got {}",
                self.m_bins,
                probs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < -1e-12) {
            return Err(CodecError::Malformed("negative or non-finite mass".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(CodecError::Malformed(format!("mass sums to {total}")));
        }
        Ok(self.expectation(probs))
    }

    /// `Σ pᵢ·(−2^ζᵢ)` without validation.
    pub fn expectation(&self, probs: &[f64]) -> f64 {
        self.bin_centers()
            .iter()
            .zip(probs)
            .map(|(c, p)| p * -c.exp2())
            .sum()
    }

    /// Bin values `−2^ζᵢ`.
    pub fn support_values(&self) -> Vec<f64> {
        self.bin_centers().iter().map(|c| -c.exp2()).collect()
    }
}
