//! Scalar Lloyd-Max quantization of codewords into packed bitstreams.

use std::fs;
use std::path::Path;

use log::warn;

use crate::error::{contract_err, Error, Result};
use crate::ndtensor::checkpoint::Reader;

pub const MAX_BITS: u8 = 8;
pub const BITSTREAM_MAGIC: &[u8; 4] = b"CLBQ";
pub const CODEBOOK_MAGIC: &[u8; 4] = b"CLCB";

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerCodebook {
    pub bits: u8,
    /// `2^bits` reconstruction values, ascending.
    pub levels: Vec<f64>,
    /// `2^bits - 1` midpoints between neighbouring levels.
    pub thresholds: Vec<f64>,
    /// False when fitting stopped at `max_iter` before the levels settled.
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub iterations: usize,
    /// Mean squared error after each assignment step.
    pub distortion: Vec<f64>,
}

fn midpoints(levels: &[f64]) -> Vec<f64> {
    levels.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
}

fn check_bits(bits: u8) -> Result<()> {
    if bits == 0 || bits > MAX_BITS {
        return Err(contract_err!("bits per scalar must lie in 1..={MAX_BITS}, got {bits}"));
    }
    Ok(())
}

/// Index of the nearest level; exact midpoints go to the lower index.
fn nearest(thresholds: &[f64], v: f64) -> usize {
    thresholds.partition_point(|&t| t < v)
}

/// Lloyd-Max codebook for `samples`, started from sample quantiles and
/// iterated until no level moves by `tol` or more.
pub fn fit_lloyd_max(
    samples: &[f64],
    bits: u8,
    max_iter: usize,
    tol: f64,
) -> Result<(QuantizerCodebook, FitReport)> {
    check_bits(bits)?;
    if samples.is_empty() {
        return Err(contract_err!("no samples to fit"));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite training sample".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = 1usize << bits;
    let quantile = |q: f64| sorted[((q * sorted.len() as f64) as usize).min(sorted.len() - 1)];
    let mut levels: Vec<f64> = (0..k).map(|i| quantile((i as f64 + 0.5) / k as f64)).collect();
    let mut report = FitReport {
        iterations: 0,
        distortion: Vec::new(),
    };
    let mut converged = false;
    let mut best = (f64::INFINITY, levels.clone());
    for _ in 0..max_iter {
        report.iterations += 1;
        let thresholds = midpoints(&levels);
        let mut sum = vec![0.0; k];
        let mut count = vec![0usize; k];
        let mut lo = vec![f64::INFINITY; k];
        let mut hi = vec![f64::NEG_INFINITY; k];
        let mut err = 0.0;
        for &v in &sorted {
            let i = nearest(&thresholds, v);
            sum[i] += v;
            count[i] += 1;
            lo[i] = lo[i].min(v);
            hi[i] = hi[i].max(v);
            err += (v - levels[i]).powi(2);
        }
        let distortion = err / sorted.len() as f64;
        report.distortion.push(distortion);
        if distortion < best.0 {
            best = (distortion, levels.clone());
        }
        let mut next: Vec<f64> = (0..k)
            .map(|i| if count[i] > 0 { sum[i] / count[i] as f64 } else { f64::NAN })
            .collect();
        for i in 0..k {
            if count[i] == 0 {
                let big = (0..k).max_by_key(|&j| count[j]).expect("k >= 2");
                next[i] = 0.5 * (lo[big] + hi[big]);
            }
        }
        next.sort_by(f64::total_cmp);
        let moved = next
            .iter()
            .zip(&levels)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        levels = next;
        if moved < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("Lloyd-Max did not settle within {max_iter} iterations; keeping the best iterate");
        levels = best.1;
    }
    let thresholds = midpoints(&levels);
    Ok((
        QuantizerCodebook {
            bits,
            levels,
            thresholds,
            converged,
        },
        report,
    ))
}

/// `M * B`.
pub fn feedback_bits(m: usize, bits: u8) -> usize {
    m * bits as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub indices: Vec<u32>,
    /// Indices packed big-endian, `bits` each, zero-padded to whole bytes.
    pub bitstream: Vec<u8>,
    pub dequantized: Vec<f64>,
}

impl QuantizerCodebook {
    pub fn index_of(&self, v: f64) -> u32 {
        nearest(&self.thresholds, v) as u32
    }

    pub fn quantize(&self, s: &[f64]) -> Quantized {
        let indices: Vec<u32> = s.iter().map(|&v| self.index_of(v)).collect();
        let dequantized = indices.iter().map(|&i| self.levels[i as usize]).collect();
        Quantized {
            bitstream: pack(&indices, self.bits),
            indices,
            dequantized,
        }
    }

    pub fn dequantize(&self, bitstream: &[u8], count: usize) -> Result<Vec<f64>> {
        Ok(unpack(bitstream, self.bits, count)?
            .into_iter()
            .map(|i| self.levels[i as usize])
            .collect())
    }

    /// Mean squared quantization error over `samples`.
    pub fn distortion(&self, samples: &[f64]) -> f64 {
        samples
            .iter()
            .map(|&v| (v - self.levels[self.index_of(v) as usize]).powi(2))
            .sum::<f64>()
            / samples.len().max(1) as f64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + 16 * self.levels.len());
        out.extend_from_slice(CODEBOOK_MAGIC);
        out.push(self.bits);
        for v in self.levels.iter().chain(&self.thresholds) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut rd = Reader::new(buf);
        rd.expect_magic(CODEBOOK_MAGIC)?;
        let bits = rd.u8()?;
        check_bits(bits).map_err(|e| Error::Format(e.to_string()))?;
        let k = 1usize << bits;
        let levels = rd.f64s(k)?;
        let thresholds = rd.f64s(k - 1)?;
        if !rd.is_at_end() {
            return Err(Error::Format("trailing bytes after codebook".into()));
        }
        Ok(Self {
            bits,
            levels,
            thresholds,
            converged: true,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn pack(indices: &[u32], bits: u8) -> Vec<u8> {
    let total = indices.len() * bits as usize;
    let mut out = vec![0u8; total.div_ceil(8)];
    let mut pos = 0;
    for &ix in indices {
        for b in (0..bits).rev() {
            if (ix >> b) & 1 == 1 {
                out[pos / 8] |= 0x80 >> (pos % 8);
            }
            pos += 1;
        }
    }
    out
}

pub fn unpack(bytes: &[u8], bits: u8, count: usize) -> Result<Vec<u32>> {
    check_bits(bits)?;
    let need = (count * bits as usize).div_ceil(8);
    if bytes.len() < need {
        return Err(Error::Format(format!(
            "bitstream has {} bytes, {count} indices of {bits} bits need {need}",
            bytes.len()
        )));
    }
    let mut pos = 0;
    Ok((0..count)
        .map(|_| {
            let mut ix = 0u32;
            for _ in 0..bits {
                let bit = (bytes[pos / 8] >> (7 - pos % 8)) & 1;
                ix = (ix << 1) | bit as u32;
                pos += 1;
            }
            ix
        })
        .collect())
}

/// `magic | bits u8 | M u32 LE | payload`.
pub fn encode_bitstream(q: &Quantized, bits: u8) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + q.bitstream.len());
    out.extend_from_slice(BITSTREAM_MAGIC);
    out.push(bits);
    out.extend_from_slice(&(q.indices.len() as u32).to_le_bytes());
    out.extend_from_slice(&q.bitstream);
    out
}

/// Returns `(bits, indices)`.
pub fn decode_bitstream(buf: &[u8]) -> Result<(u8, Vec<u32>)> {
    let mut rd = Reader::new(buf);
    rd.expect_magic(BITSTREAM_MAGIC)?;
    let bits = rd.u8()?;
    check_bits(bits).map_err(|e| Error::Format(e.to_string()))?;
    let m = rd.u32()? as usize;
    let payload = rd.bytes((m * bits as usize).div_ceil(8))?;
    if !rd.is_at_end() {
        return Err(Error::Format("trailing bytes after bitstream".into()));
    }
    Ok((bits, unpack(payload, bits, m)?))
}
