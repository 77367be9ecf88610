//! Synthetic multipath channels, angular-delay sparsification and the
//! `CLDS` dataset format.
//!
//! A channel is `H[m, k] = sum_l g_l * exp(j 2 pi m tau_l / Nc) * exp(-j pi k sin(phi_l))`
//! over `Nc` subcarriers and a half-wavelength ULA of `Nt` antennas, scaled
//! to unit Frobenius norm. With unitary DFTs, `H' = F_d H F_a` places a path
//! with delay `tau` in delay row `tau`, so the first `Na` rows carry the
//! channel whenever the delays stay below `Na`.
//!
//! Real stacking is `[real plane; imag plane]`, each plane row-major `Na x Nt`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{contract_err, dim_err, Error, Result};
use crate::ndtensor::checkpoint::Reader;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenConfig {
    /// Subcarriers.
    pub nc: usize,
    /// Base-station antennas.
    pub nt: usize,
    /// Delay rows kept after truncation.
    pub na: usize,
    pub n_paths: usize,
    /// Maximum delay as a fraction of `nc`, in `(0, 1]`.
    pub delay_spread: f64,
    /// Width of the angle-of-departure interval, centred on broadside.
    pub angle_spread: f64,
    pub seed: u64,
    /// Draw continuous delays instead of delays on the sampling grid.
    pub fractional_delays: bool,
}

impl GenConfig {
    /// 64 subcarriers, 8 antennas, 8 retained rows.
    pub fn desk() -> Self {
        Self {
            nc: 64,
            nt: 8,
            na: 8,
            n_paths: 4,
            delay_spread: 8.0 / 64.0,
            angle_spread: PI,
            seed: 0,
            fractional_delays: false,
        }
    }

    /// 1024 subcarriers, 32 antennas, 32 retained rows.
    pub fn full_scale() -> Self {
        Self {
            nc: 1024,
            nt: 32,
            na: 32,
            n_paths: 6,
            delay_spread: 32.0 / 1024.0,
            angle_spread: PI,
            seed: 0,
            fractional_delays: false,
        }
    }

    /// Length of the real vectorised truncated channel, `2 * na * nt`.
    pub fn h_len(&self) -> usize {
        2 * self.na * self.nt
    }

    pub fn validate(&self) -> Result<()> {
        if self.nc == 0 || self.nt == 0 || self.na == 0 {
            return Err(contract_err!("channel dimensions must be positive: {self:?}"));
        }
        if self.na > self.nc {
            return Err(dim_err!("na = {} exceeds nc = {}", self.na, self.nc));
        }
        if self.n_paths == 0 {
            return Err(contract_err!("at least one path is required"));
        }
        if !(self.delay_spread > 0.0 && self.delay_spread <= 1.0) {
            return Err(contract_err!(
                "delay_spread must lie in (0, 1], got {}",
                self.delay_spread
            ));
        }
        if !(self.angle_spread >= 0.0 && self.angle_spread.is_finite()) {
            return Err(contract_err!("angle_spread must be finite and non-negative"));
        }
        Ok(())
    }
}

/// One propagation path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSpec {
    pub gain: Complex64,
    /// Delay in samples.
    pub delay: f64,
    /// Angle of departure in radians.
    pub angle: f64,
}

/// A channel realisation. `spatial` is only present for freshly synthesised
/// samples; datasets store the truncated vector alone.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSample {
    pub spatial: Option<Array2<Complex64>>,
    pub h_vec: Vec<f64>,
    pub na: usize,
    pub nt: usize,
}

impl ChannelSample {
    pub fn from_h_vec(h_vec: Vec<f64>, na: usize, nt: usize) -> Result<Self> {
        if h_vec.len() != 2 * na * nt {
            return Err(dim_err!(
                "h_vec of length {} for na = {na}, nt = {nt}",
                h_vec.len()
            ));
        }
        Ok(Self {
            spatial: None,
            h_vec,
            na,
            nt,
        })
    }

    /// `2 x na x nt` real/imaginary planes.
    pub fn h_trunc(&self) -> Array3<f64> {
        unflatten(&self.h_vec, self.na, self.nt).expect("h_vec length checked on construction")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            _ => Err(Error::Format(format!("unknown split code {c}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<ChannelSample>,
    pub split: Split,
    pub config: GenConfig,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Spatial-frequency channel for explicit paths, without normalisation.
pub fn channel_from_paths(nc: usize, nt: usize, paths: &[PathSpec]) -> Array2<Complex64> {
    let mut h = Array2::<Complex64>::zeros((nc, nt));
    for p in paths {
        let sin = p.angle.sin();
        for m in 0..nc {
            let delay_phase = Complex64::from_polar(1.0, 2.0 * PI * m as f64 * p.delay / nc as f64);
            for k in 0..nt {
                let steer = Complex64::from_polar(1.0, -PI * k as f64 * sin);
                h[[m, k]] += p.gain * delay_phase * steer;
            }
        }
    }
    h
}

fn frobenius(h: &Array2<Complex64>) -> f64 {
    h.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn draw_paths(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Vec<PathSpec> {
    let max_delay = cfg.delay_spread * cfg.nc as f64;
    let grid_delays = (max_delay.floor() as usize).max(1);
    (0..cfg.n_paths)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            let delay = if cfg.fractional_delays {
                rng.random::<f64>() * max_delay
            } else {
                rng.random_range(0..grid_delays) as f64
            };
            let angle = (rng.random::<f64>() - 0.5) * cfg.angle_spread;
            PathSpec {
                gain: Complex64::new(re, im) / 2f64.sqrt(),
                delay,
                angle,
            }
        })
        .collect()
}

/// Builds a sample from explicit paths, normalised to unit Frobenius norm.
pub fn sample_from_paths(cfg: &GenConfig, paths: &[PathSpec]) -> Result<ChannelSample> {
    cfg.validate()?;
    let mut h = channel_from_paths(cfg.nc, cfg.nt, paths);
    let norm = frobenius(&h);
    if norm > 0.0 {
        h.mapv_inplace(|z| z / norm);
    }
    let trunc = sparsify_truncate(&h, cfg.na)?;
    Ok(ChannelSample {
        spatial: Some(h),
        h_vec: flatten(&trunc),
        na: cfg.na,
        nt: cfg.nt,
    })
}

/// Draws a random channel seeded by `cfg.seed`.
pub fn synthesize(cfg: &GenConfig) -> Result<ChannelSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let paths = draw_paths(cfg, &mut rng);
    sample_from_paths(cfg, &paths)
}

/// Sample `index` of a dataset, seeded with `cfg.seed + index`.
pub fn synthesize_indexed(cfg: &GenConfig, index: u64) -> Result<ChannelSample> {
    synthesize(&GenConfig {
        seed: cfg.seed.wrapping_add(index),
        ..*cfg
    })
}

pub fn generate(cfg: &GenConfig, count: usize, split: Split) -> Result<Dataset> {
    let samples = (0..count as u64)
        .map(|i| synthesize_indexed(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        split,
        config: *cfg,
    })
}

fn dft_2d(h: &Array2<Complex64>, direction: FftDirection) -> Array2<Complex64> {
    let (nc, nt) = h.dim();
    let mut planner = FftPlanner::<f64>::new();
    let col_fft = planner.plan_fft(nc, direction);
    let row_fft = planner.plan_fft(nt, direction);
    let scale = 1.0 / ((nc * nt) as f64).sqrt();
    let mut out = h.clone();
    let mut buf = vec![Complex64::default(); nc];
    for k in 0..nt {
        buf.iter_mut().zip(out.column(k)).for_each(|(b, z)| *b = *z);
        col_fft.process(&mut buf);
        out.column_mut(k).iter_mut().zip(&buf).for_each(|(z, b)| *z = *b);
    }
    let mut row = vec![Complex64::default(); nt];
    for m in 0..nc {
        row.iter_mut().zip(out.row(m)).for_each(|(b, z)| *b = *z);
        row_fft.process(&mut row);
        out.row_mut(m)
            .iter_mut()
            .zip(&row)
            .for_each(|(z, b)| *z = *b * scale);
    }
    out
}

/// `F_d H F_a` with unitary DFT matrices.
pub fn sparsify(h: &Array2<Complex64>) -> Array2<Complex64> {
    dft_2d(h, FftDirection::Forward)
}

/// Inverse of [`sparsify`].
pub fn desparsify(h_prime: &Array2<Complex64>) -> Array2<Complex64> {
    dft_2d(h_prime, FftDirection::Inverse)
}

/// Real/imaginary planes (`2 x na x nt`) of the first `na` delay rows of `F_d H F_a`.
pub fn sparsify_truncate(h: &Array2<Complex64>, na: usize) -> Result<Array3<f64>> {
    let (nc, nt) = h.dim();
    if na > nc {
        return Err(dim_err!("cannot keep {na} rows of a {nc}-row channel"));
    }
    let hp = sparsify(h);
    let mut out = Array3::<f64>::zeros((2, na, nt));
    for r in 0..na {
        for k in 0..nt {
            out[[0, r, k]] = hp[[r, k]].re;
            out[[1, r, k]] = hp[[r, k]].im;
        }
    }
    Ok(out)
}

/// Zero-pads a truncated matrix back to `nc` rows and returns to the
/// spatial-frequency domain.
pub fn reconstruct_spatial(trunc: &Array3<f64>, nc: usize) -> Result<Array2<Complex64>> {
    let (planes, na, nt) = trunc.dim();
    if planes != 2 || na > nc {
        return Err(dim_err!("truncated channel of shape {:?}", trunc.dim()));
    }
    let mut hp = Array2::<Complex64>::zeros((nc, nt));
    for r in 0..na {
        for k in 0..nt {
            hp[[r, k]] = Complex64::new(trunc[[0, r, k]], trunc[[1, r, k]]);
        }
    }
    Ok(desparsify(&hp))
}

pub fn flatten(trunc: &Array3<f64>) -> Vec<f64> {
    trunc.iter().copied().collect()
}

pub fn unflatten(h_vec: &[f64], na: usize, nt: usize) -> Result<Array3<f64>> {
    Array3::from_shape_vec((2, na, nt), h_vec.to_vec())
        .map_err(|e| dim_err!("cannot view {} values as 2x{na}x{nt}: {e}", h_vec.len()))
}

pub const DATASET_MAGIC: &[u8; 4] = b"CLDS";
pub const DATASET_VERSION: u32 = 1;

/// Serialises a dataset.
///
/// ```text
/// magic b"CLDS" | version u32 | nc u64 | nt u64 | na u64 | n_paths u64
/// | delay_spread f64 | angle_spread f64 | seed u64 | fractional_delays u8
/// | split u8 | count u64 | count x (2*na*nt) f64
/// ```
/// All little-endian.
pub fn encode_dataset(d: &Dataset) -> Result<Vec<u8>> {
    let c = &d.config;
    let n = c.h_len();
    let mut out = Vec::with_capacity(64 + d.samples.len() * n * 8);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    for v in [c.nc, c.nt, c.na, c.n_paths] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&c.delay_spread.to_le_bytes());
    out.extend_from_slice(&c.angle_spread.to_le_bytes());
    out.extend_from_slice(&c.seed.to_le_bytes());
    out.push(c.fractional_delays as u8);
    out.push(d.split.code());
    out.extend_from_slice(&(d.samples.len() as u64).to_le_bytes());
    for s in &d.samples {
        if s.h_vec.len() != n {
            return Err(dim_err!(
                "sample of length {} in a dataset of length-{n} vectors",
                s.h_vec.len()
            ));
        }
        for v in &s.h_vec {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_dataset(buf: &[u8]) -> Result<Dataset> {
    let mut rd = Reader::new(buf);
    rd.expect_magic(DATASET_MAGIC)?;
    let version = rd.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let nc = rd.u64()? as usize;
    let nt = rd.u64()? as usize;
    let na = rd.u64()? as usize;
    let n_paths = rd.u64()? as usize;
    let delay_spread = rd.f64()?;
    let angle_spread = rd.f64()?;
    let seed = rd.u64()?;
    let fractional_delays = match rd.u8()? {
        0 => false,
        1 => true,
        b => return Err(Error::Format(format!("bad fractional-delay flag {b}"))),
    };
    let split = Split::from_code(rd.u8()?)?;
    let config = GenConfig {
        nc,
        nt,
        na,
        n_paths,
        delay_spread,
        angle_spread,
        seed,
        fractional_delays,
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("invalid stored config: {e}")))?;
    let count = rd.u64()? as usize;
    let n = config.h_len();
    let mut samples = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        samples.push(ChannelSample::from_h_vec(rd.f64s(n)?, na, nt)?);
    }
    if !rd.is_at_end() {
        return Err(Error::Format("trailing bytes after dataset payload".into()));
    }
    Ok(Dataset {
        samples,
        split,
        config,
    })
}

pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_dataset(d)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn energy(h: &Array2<Complex64>) -> f64 {
        h.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Explicit unitary DFT matrix, independent of the FFT path.
    fn dft_matrix(n: usize) -> Array2<Complex64> {
        Array2::from_shape_fn((n, n), |(i, j)| {
            Complex64::from_polar(1.0 / (n as f64).sqrt(), -2.0 * PI * (i * j) as f64 / n as f64)
        })
    }

    fn cmatmul(a: &Array2<Complex64>, b: &Array2<Complex64>) -> Array2<Complex64> {
        let (n, k) = a.dim();
        let m = b.dim().1;
        Array2::from_shape_fn((n, m), |(i, j)| (0..k).map(|l| a[[i, l]] * b[[l, j]]).sum())
    }

    fn small_cfg() -> GenConfig {
        GenConfig {
            nc: 16,
            nt: 4,
            na: 4,
            n_paths: 3,
            delay_spread: 0.25,
            angle_spread: PI,
            seed: 1,
            fractional_delays: true,
        }
    }

    #[test]
    fn fft_path_matches_dft_matrices() {
        let s = synthesize(&small_cfg()).unwrap();
        let h = s.spatial.unwrap();
        let want = cmatmul(&cmatmul(&dft_matrix(16), &h), &dft_matrix(4));
        let got = sparsify(&h);
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn unit_norm_and_determinism() {
        let cfg = GenConfig::desk();
        let a = synthesize_indexed(&cfg, 3).unwrap();
        let b = synthesize_indexed(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert!((frobenius(a.spatial.as_ref().unwrap()) - 1.0).abs() < 1e-12);
        assert_ne!(a.h_vec, synthesize_indexed(&cfg, 4).unwrap().h_vec);
    }

    #[test]
    fn single_broadside_path_lands_in_first_row() {
        let cfg = GenConfig {
            n_paths: 1,
            ..GenConfig::desk()
        };
        let path = PathSpec {
            gain: Complex64::new(1.0, 0.0),
            delay: 0.0,
            angle: 0.0,
        };
        let s = sample_from_paths(&cfg, &[path]).unwrap();
        let hp = sparsify(s.spatial.as_ref().unwrap());
        let first: f64 = hp.row(0).iter().map(|z| z.norm_sqr()).sum();
        assert!(first / energy(&hp) >= 0.9);
    }

    #[test]
    fn grid_angle_gives_one_angular_column() {
        // (nt / 2) sin(phi) = 2 lands exactly on a DFT bin
        let nt = 8;
        let angle = (2.0 * 2.0 / nt as f64).asin();
        let h = channel_from_paths(
            16,
            nt,
            &[PathSpec {
                gain: Complex64::new(0.3, -0.7),
                delay: 2.0,
                angle,
            }],
        );
        let hp = sparsify(&h);
        let nonzero_cols: Vec<usize> = (0..nt)
            .filter(|&k| hp.column(k).iter().any(|z| z.norm() > 1e-10))
            .collect();
        assert_eq!(nonzero_cols.len(), 1);
    }

    #[test]
    fn zero_channel_and_bad_truncation() {
        let h = Array2::<Complex64>::zeros((8, 4));
        assert!(sparsify_truncate(&h, 4).unwrap().iter().all(|&v| v == 0.0));
        assert!(matches!(sparsify_truncate(&h, 9), Err(Error::Dimension(_))));
    }

    #[test]
    fn full_rows_inverse_recovers_channel() {
        let cfg = GenConfig {
            na: 16,
            ..small_cfg()
        };
        let s = synthesize(&cfg).unwrap();
        let back = reconstruct_spatial(&s.h_trunc(), 16).unwrap();
        let h = s.spatial.unwrap();
        for (a, b) in back.iter().zip(h.iter()) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn flatten_layout_is_real_then_imag() {
        let mut t = Array3::<f64>::zeros((2, 2, 3));
        t[[0, 1, 2]] = 5.0;
        t[[1, 0, 1]] = -1.0;
        let v = flatten(&t);
        assert_eq!(v[5], 5.0);
        assert_eq!(v[6 + 1], -1.0);
        assert_eq!(unflatten(&v, 2, 3).unwrap(), t);
    }

    #[test]
    fn invalid_configs() {
        let mut c = GenConfig::desk();
        c.na = 65;
        assert!(c.validate().is_err());
        let mut c = GenConfig::desk();
        c.n_paths = 0;
        assert!(c.validate().is_err());
        let mut c = GenConfig::desk();
        c.delay_spread = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn dataset_round_trip_and_corruption() {
        let cfg = GenConfig {
            seed: 42,
            ..GenConfig::desk()
        };
        let d = generate(&cfg, 100, Split::Val).unwrap();
        let bytes = encode_dataset(&d).unwrap();
        let back = decode_dataset(&bytes).unwrap();
        assert_eq!(back.config, cfg);
        assert_eq!(back.split, Split::Val);
        assert_eq!(back.len(), 100);
        for (a, b) in back.samples.iter().zip(&d.samples) {
            assert!(a.h_vec.iter().zip(&b.h_vec).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(Error::Format(_))));
        assert!(matches!(
            decode_dataset(&bytes[..bytes.len() - 1]),
            Err(Error::Format(_))
        ));
        let mut badver = bytes;
        badver[4] = 9;
        assert!(matches!(decode_dataset(&badver), Err(Error::Format(_))));
    }
}
