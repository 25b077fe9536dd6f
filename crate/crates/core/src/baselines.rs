//! Closed-form bounds and model-based detectors.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::mimo::index_to_symbols;
use crate::quantizer::HardQuantizer;

/// Exhaustive search is refused above this many users.
pub const MAX_ENUMERATED_USERS: usize = 24;

/// Per-factor floor applied to log cell probabilities.
pub const LOG_PROBABILITY_FLOOR: f64 = -745.0;

/// Per-component MMSE of channel estimation without quantization,
/// `1 / (2(1 + P·τ))`.
pub fn mmse_bound(snr: f64, pilot_len: f64) -> f64 {
    1.0 / (2.0 * (1.0 + snr * pilot_len))
}

/// Rate-distortion limit for quantized channel estimation:
/// `η̃ + P·τ / (2(1 + P·τ)) · 2^{−2ρR}`.
pub fn fundamental_limit(snr: f64, pilot_len: f64, ratio: f64, rate: f64) -> f64 {
    let signal = snr * pilot_len;
    mmse_bound(snr, pilot_len) + signal / (2.0 * (1.0 + signal)) * (-2.0 * ratio * rate).exp2()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundInputs {
    pub snr: f64,
    pub pilot_len: f64,
    pub ratio: f64,
    pub rate: f64,
}

impl BoundInputs {
    pub fn new(snr: f64, pilot_len: f64, ratio: f64, rate: f64) -> Result<Self> {
        if !(snr >= 0.0 && pilot_len >= 1.0 && ratio >= 1.0 && rate >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "bound inputs need P >= 0, τ >= 1, ρ >= 1, R >= 0; got P={snr}, τ={pilot_len}, ρ={ratio}, R={rate}"
            )));
        }
        Ok(Self {
            snr,
            pilot_len,
            ratio,
            rate,
        })
    }

    pub fn mmse(&self) -> f64 {
        mmse_bound(self.snr, self.pilot_len)
    }

    pub fn limit(&self) -> f64 {
        fundamental_limit(self.snr, self.pilot_len, self.ratio, self.rate)
    }
}

/// Standard normal CDF, accurate to ~1 ulp through `erfc`.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * std::f64::consts::FRAC_1_SQRT_2)
}

/// `P(a < Z ≤ b)` for standard normal `Z`, computed on whichever tail keeps
/// the subtraction well conditioned.
pub fn normal_interval(a: f64, b: f64) -> f64 {
    if a >= 0.0 {
        normal_cdf(-a) - normal_cdf(-b)
    } else if b <= 0.0 {
        normal_cdf(b) - normal_cdf(a)
    } else {
        1.0 - normal_cdf(a) - normal_cdf(-b)
    }
}

fn check_users(users: usize) -> Result<()> {
    if users > MAX_ENUMERATED_USERS {
        return Err(Error::InvalidParameter(format!(
            "{users} users exceeds the exhaustive-search limit of {MAX_ENUMERATED_USERS}"
        )));
    }
    Ok(())
}

/// Noiseless received points `H s'` for every candidate `s'` in
/// little-endian enumeration order.
fn codebook(channel: &Array2<f64>) -> Result<Vec<Array1<f64>>> {
    let users = channel.ncols();
    check_users(users)?;
    Ok((0..1usize << users)
        .map(|k| channel.dot(&Array1::from(index_to_symbols(k, users))))
        .collect())
}

/// MAP detector for BPSK over `x = Hs + w` with unquantized observations.
#[derive(Debug, Clone)]
pub struct MapDetector {
    codebook: Vec<Array1<f64>>,
    users: usize,
    inv_two_var: f64,
}

impl MapDetector {
    pub fn new(channel: &Array2<f64>, noise_std: f64) -> Result<Self> {
        if !(noise_std > 0.0) {
            return Err(Error::InvalidParameter("noise std must be positive".into()));
        }
        Ok(Self {
            codebook: codebook(channel)?,
            users: channel.ncols(),
            inv_two_var: 1.0 / (2.0 * noise_std * noise_std),
        })
    }

    /// Index maximizing the Gaussian log-likelihood; ties keep the lowest index.
    pub fn detect_index(&self, x: ArrayView1<f64>) -> Result<usize> {
        let antennas = self.codebook[0].len();
        if x.len() != antennas {
            return Err(Error::dim("observation", antennas, x.len()));
        }
        let mut best = (0, f64::NEG_INFINITY);
        for (k, point) in self.codebook.iter().enumerate() {
            let dist: f64 = x.iter().zip(point).map(|(a, b)| (a - b) * (a - b)).sum();
            let loglik = -dist * self.inv_two_var;
            if loglik > best.1 {
                best = (k, loglik);
            }
        }
        Ok(best.0)
    }

    pub fn detect(&self, x: ArrayView1<f64>) -> Result<Vec<f64>> {
        Ok(index_to_symbols(self.detect_index(x)?, self.users))
    }
}

pub fn map_detect(x: ArrayView1<f64>, channel: &Array2<f64>, noise_std: f64) -> Result<Vec<f64>> {
    MapDetector::new(channel, noise_std)?.detect(x)
}

/// Per-dimension cell `(lower, upper]` reported by an element-wise quantizer.
#[derive(Debug, Clone, PartialEq)]
pub struct CellObservation {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl CellObservation {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::dim("cell bounds", lower.len(), upper.len()));
        }
        if let Some(k) = (0..lower.len()).find(|&k| !(lower[k] < upper[k])) {
            return Err(Error::InvalidParameter(format!(
                "empty cell in dimension {k}: [{}, {}]",
                lower[k], upper[k]
            )));
        }
        Ok(Self { lower, upper })
    }

    /// Quantizes `x` element-wise with `q` and records each element's cell.
    pub fn observe(q: &HardQuantizer, x: ArrayView1<f64>) -> Self {
        let (lower, upper) = x.iter().map(|&v| q.cell(q.region(v))).unzip();
        Self { lower, upper }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }
}

/// MAP detector from element-wise quantized observations. Independent
/// Gaussian noise makes the likelihood a product of per-dimension cell
/// probabilities.
#[derive(Debug, Clone)]
pub struct QuantizedMapDetector {
    codebook: Vec<Array1<f64>>,
    users: usize,
    noise_std: f64,
}

impl QuantizedMapDetector {
    pub fn new(channel: &Array2<f64>, noise_std: f64) -> Result<Self> {
        if !(noise_std > 0.0) {
            return Err(Error::InvalidParameter("noise std must be positive".into()));
        }
        Ok(Self {
            codebook: codebook(channel)?,
            users: channel.ncols(),
            noise_std,
        })
    }

    /// Log-likelihood of the observed cells under candidate `index`.
    pub fn log_likelihood(&self, cells: &CellObservation, index: usize) -> f64 {
        let point = &self.codebook[index];
        let mut total = 0.0;
        for ((&l, &u), &mean) in cells.lower.iter().zip(&cells.upper).zip(point) {
            let p = normal_interval((l - mean) / self.noise_std, (u - mean) / self.noise_std);
            total += p.ln().max(LOG_PROBABILITY_FLOOR);
        }
        total
    }

    pub fn detect_index(&self, cells: &CellObservation) -> Result<usize> {
        let antennas = self.codebook[0].len();
        if cells.len() != antennas {
            return Err(Error::dim("cell observation", antennas, cells.len()));
        }
        let mut best = (0, f64::NEG_INFINITY);
        for k in 0..self.codebook.len() {
            let ll = self.log_likelihood(cells, k);
            if ll > best.1 {
                best = (k, ll);
            }
        }
        Ok(best.0)
    }

    pub fn detect(&self, cells: &CellObservation) -> Result<Vec<f64>> {
        Ok(index_to_symbols(self.detect_index(cells)?, self.users))
    }
}

pub fn quantized_map_detect(cells: &CellObservation, channel: &Array2<f64>, noise_std: f64) -> Result<Vec<f64>> {
    QuantizedMapDetector::new(channel, noise_std)?.detect(cells)
}
