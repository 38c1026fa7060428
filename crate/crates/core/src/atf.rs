//! Array transfer function (ATF) sets and the isotropic noise covariance.
//!
//! An [`AtfSet`] holds the far-field response of every array channel for a
//! discrete set of source directions on the sphere. The diffuse-field
//! covariance is approximated by the unweighted mean of the per-direction
//! outer products, so sets used for that purpose should sample the sphere
//! near-uniformly (see [`crate::simscene::fibonacci_directions`]).

use std::f64::consts::{PI, TAU};
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Array3, ArrayView1, ArrayView2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A far-field direction in the device frame.
///
/// The device frame is +x forward (boresight), +y left, +z up. Azimuth is
/// measured counter-clockwise from +x in the horizontal plane, inclination
/// from the +z zenith.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    pub azimuth_rad: f64,
    pub inclination_rad: f64,
}

impl Direction {
    /// Builds a direction, wrapping azimuth into [-pi, pi) and clamping
    /// inclination into [0, pi]. At the poles azimuth is set to 0.
    pub fn new(azimuth_rad: f64, inclination_rad: f64) -> Self {
        let inclination_rad = inclination_rad.clamp(0.0, PI);
        let mut azimuth_rad = (azimuth_rad + PI).rem_euclid(TAU) - PI;
        if azimuth_rad >= PI {
            azimuth_rad = -PI;
        }
        if inclination_rad.sin() < 1e-9 {
            azimuth_rad = 0.0;
        }
        Self {
            azimuth_rad,
            inclination_rad,
        }
    }

    pub fn from_degrees(azimuth_deg: f64, inclination_deg: f64) -> Self {
        Self::new(azimuth_deg.to_radians(), inclination_deg.to_radians())
    }

    /// Direction of a nonzero vector. Returns `None` for (near-)zero input.
    pub fn from_vector(v: [f64; 3]) -> Option<Self> {
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return None;
        }
        let inclination = (v[2] / norm).clamp(-1.0, 1.0).acos();
        Some(Self::new(v[1].atan2(v[0]), inclination))
    }

    pub fn unit_vector(&self) -> [f64; 3] {
        let (st, ct) = self.inclination_rad.sin_cos();
        let (sp, cp) = self.azimuth_rad.sin_cos();
        [st * cp, st * sp, ct]
    }

    /// Great-circle angle to `other`, in radians.
    pub fn angle_to(&self, other: &Direction) -> f64 {
        let a = self.unit_vector();
        let b = other.unit_vector();
        // atan2 form stays accurate for nearly coincident directions.
        let cross = [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ];
        let sin = (cross[0].powi(2) + cross[1].powi(2) + cross[2].powi(2)).sqrt();
        let cos = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        sin.atan2(cos)
    }
}

/// Measured or synthetic array transfer functions.
///
/// `responses` is indexed `[direction][bin][channel]`; bins are the one-sided
/// bins of an FFT of length `2 * (n_bins - 1)` at `sample_rate`.
#[derive(Debug, Clone, PartialEq)]
pub struct AtfSet {
    sample_rate: f64,
    directions: Vec<Direction>,
    responses: Array3<Complex64>,
    unit_vectors: Vec<[f64; 3]>,
}

impl AtfSet {
    pub fn new(
        sample_rate: f64,
        directions: Vec<Direction>,
        responses: Array3<Complex64>,
    ) -> Result<Self> {
        let (n_dir, n_bins, n_ch) = responses.dim();
        if n_ch == 0 {
            return Err(Error::invalid("ATF set", "n_channels must be >= 1"));
        }
        if directions.is_empty() {
            return Err(Error::invalid("ATF set", "n_directions must be >= 1"));
        }
        if n_bins == 0 {
            return Err(Error::invalid("ATF set", "n_bins must be >= 1"));
        }
        if !(sample_rate > 0.0) || !sample_rate.is_finite() {
            return Err(Error::invalid(
                "ATF set",
                format!("sample_rate {sample_rate}"),
            ));
        }
        if n_dir != directions.len() {
            return Err(Error::dim("ATF responses", directions.len(), n_dir));
        }
        if let Some(((d, b, c), _)) = responses
            .indexed_iter()
            .find(|(_, v)| !(v.re.is_finite() && v.im.is_finite()))
        {
            return Err(Error::invalid(
                "ATF set",
                format!("non-finite response at [{d}][{b}][{c}]"),
            ));
        }
        let directions: Vec<Direction> = directions
            .into_iter()
            .map(|d| Direction::new(d.azimuth_rad, d.inclination_rad))
            .collect();
        let unit_vectors = directions.iter().map(Direction::unit_vector).collect();
        Ok(Self {
            sample_rate,
            directions,
            responses,
            unit_vectors,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.responses.dim().2
    }

    pub fn n_bins(&self) -> usize {
        self.responses.dim().1
    }

    pub fn n_directions(&self) -> usize {
        self.directions.len()
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn directions(&self) -> &[Direction] {
        &self.directions
    }

    pub fn responses(&self) -> &Array3<Complex64> {
        &self.responses
    }

    /// Responses of one direction, `[bin][channel]`.
    pub fn steering(&self, dir_index: usize) -> ArrayView2<'_, Complex64> {
        self.responses.index_axis(ndarray::Axis(0), dir_index)
    }

    /// Center frequency of a bin in Hz.
    pub fn bin_frequency(&self, bin: usize) -> f64 {
        let fft_len = 2 * (self.n_bins().max(2) - 1);
        bin as f64 * self.sample_rate / fft_len as f64
    }

    /// Index of the grid direction closest to `query` by great-circle
    /// angle. Ties (within 1e-12 in cosine) go to the lowest index.
    pub fn nearest_direction(&self, query: &Direction) -> usize {
        let q = query.unit_vector();
        let mut best = 0;
        let mut best_cos = f64::NEG_INFINITY;
        for (k, u) in self.unit_vectors.iter().enumerate() {
            let cos = u[0] * q[0] + u[1] * q[1] + u[2] * q[2];
            if cos > best_cos + 1e-12 {
                best = k;
                best_cos = cos;
            }
        }
        best
    }

    /// Unweighted mean of the per-direction outer products `d d^H`.
    pub fn isotropic_covariance(&self) -> IsotropicCovariance {
        let (n_dir, n_bins, n_ch) = self.responses.dim();
        let mut matrices = Array3::<Complex64>::zeros((n_bins, n_ch, n_ch));
        for bin in 0..n_bins {
            let mut acc = matrices.index_axis_mut(ndarray::Axis(0), bin);
            for dir in 0..n_dir {
                let d = self.responses.slice(ndarray::s![dir, bin, ..]);
                for i in 0..n_ch {
                    for j in i..n_ch {
                        acc[[i, j]] += d[i] * d[j].conj();
                    }
                }
            }
            let scale = 1.0 / n_dir as f64;
            for i in 0..n_ch {
                for j in i..n_ch {
                    let v = acc[[i, j]] * scale;
                    acc[[i, j]] = v;
                    acc[[j, i]] = v.conj();
                }
                acc[[i, i]].im = 0.0;
            }
        }
        IsotropicCovariance { matrices }
    }

    /// Reads the binary ATF format: a JSON header, one NUL byte, then
    /// little-endian float32 `(re, im)` pairs in `[direction][bin][channel]`
    /// order.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nul = bytes
            .iter()
            .position(|&b| b == 0)
            .ok_or_else(|| atf_err("header", "missing NUL separator"))?;
        let header: AtfHeader =
            serde_json::from_slice(&bytes[..nul]).map_err(|e| atf_err("header", e.to_string()))?;
        if header.n_channels == 0 {
            return Err(atf_err("n_channels", "must be >= 1"));
        }
        if header.n_directions == 0 {
            return Err(atf_err("n_directions", "must be >= 1"));
        }
        if header.n_bins == 0 {
            return Err(atf_err("n_bins", "must be >= 1"));
        }
        if !(header.sample_rate > 0.0) || !header.sample_rate.is_finite() {
            return Err(atf_err("sample_rate", "must be positive and finite"));
        }
        if header.directions.len() != header.n_directions {
            return Err(atf_err(
                "n_directions",
                format!(
                    "dimension mismatch: declared {}, directions list has {}",
                    header.n_directions,
                    header.directions.len()
                ),
            ));
        }
        for (k, d) in header.directions.iter().enumerate() {
            if !(d.azimuth_rad.is_finite() && d.inclination_rad.is_finite()) {
                return Err(atf_err(format!("directions[{k}]"), "non-finite angle"));
            }
        }
        let shape = (header.n_directions, header.n_bins, header.n_channels);
        let expected = shape
            .0
            .checked_mul(shape.1)
            .and_then(|v| v.checked_mul(shape.2))
            .and_then(|v| v.checked_mul(8))
            .ok_or_else(|| atf_err("header", "dimensions overflow"))?;
        let blob = &bytes[nul + 1..];
        if blob.len() != expected {
            return Err(atf_err(
                "payload",
                format!(
                    "dimension mismatch: expected {expected} bytes for {shape:?}, found {}",
                    blob.len()
                ),
            ));
        }
        let mut values = Vec::with_capacity(expected / 8);
        for (k, chunk) in blob.chunks_exact(8).enumerate() {
            let re = f32::from_le_bytes(chunk[..4].try_into().unwrap());
            let im = f32::from_le_bytes(chunk[4..].try_into().unwrap());
            if !(re.is_finite() && im.is_finite()) {
                let per_dir = shape.1 * shape.2;
                return Err(atf_err(
                    format!(
                        "payload[{}][{}][{}]",
                        k / per_dir,
                        (k % per_dir) / shape.2,
                        k % shape.2
                    ),
                    "non-finite value",
                ));
            }
            values.push(Complex64::new(re as f64, im as f64));
        }
        let responses =
            Array3::from_shape_vec(shape, values).map_err(|e| atf_err("payload", e.to_string()))?;
        Self::new(header.sample_rate, header.directions, responses)
    }

    /// Serializes to the binary ATF format. Responses are narrowed to f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = AtfHeader {
            n_channels: self.n_channels(),
            sample_rate: self.sample_rate,
            n_bins: self.n_bins(),
            n_directions: self.n_directions(),
            directions: self.directions.clone(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(0);
        out.reserve(self.responses.len() * 8);
        for v in self.responses.iter() {
            out.extend_from_slice(&(v.re as f32).to_le_bytes());
            out.extend_from_slice(&(v.im as f32).to_le_bytes());
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::harness::write_atomically(path.as_ref(), |w| w.write_all(&self.to_bytes()))
    }
}

fn atf_err(field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::AtfFormat {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AtfHeader {
    n_channels: usize,
    sample_rate: f64,
    n_bins: usize,
    n_directions: usize,
    directions: Vec<Direction>,
}

/// Per-bin approximation of the spherically isotropic noise covariance,
/// indexed `[bin][row][col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IsotropicCovariance {
    matrices: Array3<Complex64>,
}

impl IsotropicCovariance {
    /// Wraps explicit per-bin matrices, checking the Hermitian and PSD
    /// invariants.
    pub fn from_matrices(matrices: Array3<Complex64>) -> Result<Self> {
        let (_, r, c) = matrices.dim();
        if r != c || r == 0 {
            return Err(Error::dim(
                "covariance matrix",
                "square N x N, N >= 1",
                format!("{r} x {c}"),
            ));
        }
        let cov = Self { matrices };
        cov.check_invariants()?;
        Ok(cov)
    }

    pub fn n_bins(&self) -> usize {
        self.matrices.dim().0
    }

    pub fn n_channels(&self) -> usize {
        self.matrices.dim().1
    }

    pub fn matrices(&self) -> &Array3<Complex64> {
        &self.matrices
    }

    pub fn bin(&self, bin: usize) -> ArrayView2<'_, Complex64> {
        self.matrices.index_axis(ndarray::Axis(0), bin)
    }

    /// `x^H R x` at one bin.
    pub fn quadratic_form(&self, bin: usize, x: ArrayView1<'_, Complex64>) -> Complex64 {
        let r = self.bin(bin);
        let n = r.dim().0;
        let mut acc = Complex64::new(0.0, 0.0);
        for i in 0..n {
            let mut row = Complex64::new(0.0, 0.0);
            for j in 0..n {
                row += r[[i, j]] * x[j];
            }
            acc += x[i].conj() * row;
        }
        acc
    }

    /// Normalized cross-coherence `R_ij / sqrt(R_ii R_jj)` per bin.
    pub fn coherence(&self, i: usize, j: usize) -> Vec<Complex64> {
        (0..self.n_bins())
            .map(|b| {
                let r = self.bin(b);
                r[[i, j]] / (r[[i, i]].re * r[[j, j]].re).sqrt()
            })
            .collect()
    }

    /// Ascending eigenvalues of one bin's matrix.
    pub fn eigenvalues(&self, bin: usize) -> Vec<f64> {
        let m = to_dmatrix(self.bin(bin));
        let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// Checks Hermitian symmetry (1e-12 relative) and positive
    /// semi-definiteness (min eigenvalue >= -1e-9 * max eigenvalue).
    pub fn check_invariants(&self) -> Result<()> {
        for b in 0..self.n_bins() {
            let r = self.bin(b);
            let n = r.dim().0;
            let scale = r.iter().map(|v| v.norm()).fold(0.0, f64::max);
            if !scale.is_finite() {
                return Err(Error::invalid(
                    "covariance",
                    format!("non-finite entry at bin {b}"),
                ));
            }
            for i in 0..n {
                for j in 0..n {
                    if (r[[i, j]] - r[[j, i]].conj()).norm() > 1e-12 * scale {
                        return Err(Error::invalid(
                            "covariance",
                            format!("not Hermitian at bin {b} ({i},{j})"),
                        ));
                    }
                }
            }
            let ev = self.eigenvalues(b);
            let (min, max) = (ev[0], ev[ev.len() - 1]);
            if min < -1e-9 * max.abs().max(f64::MIN_POSITIVE) {
                return Err(Error::invalid(
                    "covariance",
                    format!("not PSD at bin {b}: eigenvalues [{min:e}, {max:e}]"),
                ));
            }
        }
        Ok(())
    }

    pub(crate) fn to_dmatrix(&self, bin: usize) -> DMatrix<Complex64> {
        to_dmatrix(self.bin(bin))
    }
}

fn to_dmatrix(r: ArrayView2<'_, Complex64>) -> DMatrix<Complex64> {
    let (n, m) = r.dim();
    DMatrix::from_fn(n, m, |i, j| r[[i, j]])
}

/// Builds a `[bin][channel]` array from a closure, for tests and tools.
pub fn steering_from_fn(
    n_bins: usize,
    n_channels: usize,
    f: impl FnMut((usize, usize)) -> Complex64,
) -> Array2<Complex64> {
    Array2::from_shape_fn((n_bins, n_channels), f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ring_set() -> AtfSet {
        let dirs = [0.0, 90.0, 180.0, 270.0]
            .iter()
            .map(|&a| Direction::from_degrees(a, 90.0))
            .collect();
        AtfSet::new(
            16_000.0,
            dirs,
            Array3::from_elem((4, 3, 1), Complex64::new(1.0, 0.0)),
        )
        .unwrap()
    }

    #[test]
    fn direction_normalization() {
        let d = Direction::new(3.0 * PI, 0.5);
        assert!((d.azimuth_rad + PI).abs() < 1e-12);
        let d = Direction::new(1.0, -0.2);
        assert_eq!(d.inclination_rad, 0.0);
        assert_eq!(d.azimuth_rad, 0.0);
        let d = Direction::new(1.0, PI + 1.0);
        assert_eq!(d.inclination_rad, PI);
        assert_eq!(d.azimuth_rad, 0.0);
        let d = Direction::new(PI, 1.0);
        assert_eq!(d.azimuth_rad, -PI);
    }

    #[test]
    fn nearest_on_ring() {
        let set = ring_set();
        assert_eq!(
            set.nearest_direction(&Direction::from_degrees(10.0, 90.0)),
            0
        );
        assert_eq!(
            set.nearest_direction(&Direction::from_degrees(100.0, 90.0)),
            1
        );
        assert_eq!(
            set.nearest_direction(&Direction::from_degrees(45.0, 90.0)),
            0
        );
        assert_eq!(
            set.nearest_direction(&Direction::from_degrees(-100.0, 90.0)),
            3
        );
        for k in 0..4 {
            assert_eq!(set.nearest_direction(&set.directions()[k]), k);
        }
    }

    #[test]
    fn nearest_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let random_dir = |rng: &mut ChaCha8Rng| {
            let z: f64 = rng.random_range(-1.0..1.0);
            Direction::new(rng.random_range(-PI..PI), z.acos())
        };
        let dirs: Vec<Direction> = (0..100).map(|_| random_dir(&mut rng)).collect();
        let set = AtfSet::new(
            8_000.0,
            dirs.clone(),
            Array3::from_elem((100, 2, 1), Complex64::new(1.0, 0.0)),
        )
        .unwrap();
        for _ in 0..500 {
            let q = random_dir(&mut rng);
            let oracle = dirs
                .iter()
                .enumerate()
                .map(|(k, d)| (k, q.angle_to(d)))
                .fold(
                    (0, f64::INFINITY),
                    |acc, (k, a)| if a < acc.1 { (k, a) } else { acc },
                )
                .0;
            assert_eq!(set.nearest_direction(&q), oracle);
        }
        for k in 0..100 {
            assert_eq!(set.nearest_direction(&dirs[k]), k);
        }
    }

    #[test]
    fn covariance_single_outer_product() {
        let set = AtfSet::new(
            8_000.0,
            vec![Direction::new(0.0, 1.0)],
            Array3::from_elem((1, 4, 2), Complex64::new(1.0, 0.0)),
        )
        .unwrap();
        let cov = set.isotropic_covariance();
        for b in 0..4 {
            for v in cov.bin(b).iter() {
                assert_eq!(*v, Complex64::new(1.0, 0.0));
            }
        }
        cov.check_invariants().unwrap();
    }

    #[test]
    fn covariance_single_channel_unit_magnitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let resp = Array3::from_shape_fn((5, 6, 1), |_| {
            Complex64::from_polar(1.0, rng.random_range(-PI..PI))
        });
        let dirs = (0..5).map(|k| Direction::new(k as f64, 1.0)).collect();
        let cov = AtfSet::new(8_000.0, dirs, resp)
            .unwrap()
            .isotropic_covariance();
        for b in 0..6 {
            assert!((cov.bin(b)[[0, 0]] - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn covariance_scales_with_norm_squared() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let resp = Array3::from_shape_fn((20, 4, 3), |_| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        let dirs: Vec<Direction> = (0..20).map(|k| Direction::new(k as f64, 1.0)).collect();
        let c = Complex64::new(0.7, -1.3);
        let a = AtfSet::new(8_000.0, dirs.clone(), resp.clone())
            .unwrap()
            .isotropic_covariance();
        let b = AtfSet::new(8_000.0, dirs, resp.mapv(|v| v * c))
            .unwrap()
            .isotropic_covariance();
        for (x, y) in a.matrices().iter().zip(b.matrices().iter()) {
            let expect = *x * c.norm_sqr();
            assert!((expect - y).norm() <= 1e-12 * expect.norm().max(1e-300));
        }
        a.check_invariants().unwrap();
    }

    #[test]
    fn load_minimal_file() {
        let header = r#"{"n_channels":1,"sample_rate":16000.0,"n_bins":2,"n_directions":1,"directions":[{"azimuth_rad":0.0,"inclination_rad":1.5}]}"#;
        let mut bytes = header.as_bytes().to_vec();
        bytes.push(0);
        for _ in 0..2 {
            bytes.extend_from_slice(&1.0f32.to_le_bytes());
            bytes.extend_from_slice(&0.0f32.to_le_bytes());
        }
        let set = AtfSet::from_bytes(&bytes).unwrap();
        assert_eq!(set.n_channels(), 1);
        assert_eq!(set.n_bins(), 2);
        for b in 0..2 {
            assert_eq!(set.responses()[[0, b, 0]], Complex64::new(1.0, 0.0));
        }
    }

    #[test]
    fn load_rejects_count_mismatch() {
        let header = r#"{"n_channels":1,"sample_rate":16000.0,"n_bins":1,"n_directions":2,"directions":[{"azimuth_rad":0.0,"inclination_rad":1.5}]}"#;
        let mut bytes = header.as_bytes().to_vec();
        bytes.push(0);
        bytes.extend_from_slice(&[0u8; 16]);
        let err = AtfSet::from_bytes(&bytes).unwrap_err();
        assert!(
            matches!(err, Error::AtfFormat { ref field, .. } if field == "n_directions"),
            "{err}"
        );
    }

    #[test]
    fn load_rejects_bad_payload() {
        let header = r#"{"n_channels":1,"sample_rate":16000.0,"n_bins":1,"n_directions":1,"directions":[{"azimuth_rad":0.0,"inclination_rad":1.5}]}"#;
        let mut bytes = header.as_bytes().to_vec();
        bytes.push(0);
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        bytes.extend_from_slice(&0f32.to_le_bytes());
        let err = AtfSet::from_bytes(&bytes).unwrap_err();
        assert!(
            matches!(err, Error::AtfFormat { ref field, .. } if field == "payload[0][0][0]"),
            "{err}"
        );

        bytes.truncate(bytes.len() - 1);
        let err = AtfSet::from_bytes(&bytes).unwrap_err();
        assert!(
            matches!(err, Error::AtfFormat { ref field, .. } if field == "payload"),
            "{err}"
        );

        let err = AtfSet::from_bytes(header.as_bytes()).unwrap_err();
        assert!(
            matches!(err, Error::AtfFormat { ref field, .. } if field == "header"),
            "{err}"
        );

        let extra = r#"{"n_channels":1,"sample_rate":16000.0,"n_bins":1,"n_directions":1,"directions":[],"comment":"x"}"#;
        let mut bytes = extra.as_bytes().to_vec();
        bytes.push(0);
        assert!(AtfSet::from_bytes(&bytes).is_err());
    }
}
