//! Maximum directivity index (max-DI) beamforming.
//!
//! Per frequency bin the weights minimize the diffuse-noise output power
//! `h^H R h` subject to the distortionless constraint `h^H d = g`, giving
//!
//! ```text
//! h = g* R^-1 d / (d^H R^-1 d)
//! ```
//!
//! `R` is the isotropic covariance with trace-normalized diagonal loading.
//! The denominator is evaluated as the complex inner product `d^H x` of the
//! computed solve `x = R^-1 d`, which keeps `h^H d = g` exact up to rounding
//! even when the solve itself is ill-conditioned.

use nalgebra::{Cholesky, DVector};
use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use num_complex::Complex64;

use crate::atf::{AtfSet, IsotropicCovariance};
use crate::error::{Error, Result};

/// Default diagonal loading, relative to `trace(R) / N`.
pub const DEFAULT_LOADING: f64 = 1e-3;

/// Steering vector and constraint gain for every bin.
#[derive(Debug, Clone, PartialEq)]
pub struct DistortionlessTarget {
    steering: Array2<Complex64>,
    gain: Vec<Complex64>,
}

impl DistortionlessTarget {
    pub fn new(steering: Array2<Complex64>, gain: Vec<Complex64>) -> Result<Self> {
        let (n_bins, n_ch) = steering.dim();
        if n_ch == 0 {
            return Err(Error::invalid("target", "no channels"));
        }
        if gain.len() != n_bins {
            return Err(Error::dim("target gain", n_bins, gain.len()));
        }
        let zero_norm: Vec<usize> = (0..n_bins)
            .filter(|&b| steering.row(b).iter().map(|v| v.norm_sqr()).sum::<f64>() <= 0.0)
            .collect();
        if !zero_norm.is_empty() {
            return Err(Error::invalid(
                "target",
                format!("zero steering vector at bins {zero_norm:?}"),
            ));
        }
        let degenerate: Vec<usize> = gain
            .iter()
            .enumerate()
            .filter(|(_, g)| !(g.norm() >= 1e-12 && g.re.is_finite() && g.im.is_finite()))
            .map(|(b, _)| b)
            .collect();
        if !degenerate.is_empty() {
            return Err(Error::DegenerateTarget { bins: degenerate });
        }
        Ok(Self { steering, gain })
    }

    pub fn steering(&self) -> &Array2<Complex64> {
        &self.steering
    }

    pub fn gain(&self) -> &[Complex64] {
        &self.gain
    }

    pub fn n_bins(&self) -> usize {
        self.steering.dim().0
    }

    pub fn n_channels(&self) -> usize {
        self.steering.dim().1
    }

    /// Same steering with every gain multiplied by `c`.
    pub fn scaled_gain(&self, c: Complex64) -> Result<Self> {
        Self::new(
            self.steering.clone(),
            self.gain.iter().map(|g| g * c).collect(),
        )
    }
}

/// Target toward grid direction `dir_index`, with the constraint gain taken
/// from the response of `ref_channel`: the beamformer then reproduces the
/// target as captured by that microphone.
pub fn make_target(
    set: &AtfSet,
    dir_index: usize,
    ref_channel: usize,
) -> Result<DistortionlessTarget> {
    check_indices(set, dir_index, ref_channel)?;
    let steering = set.steering(dir_index).to_owned();
    let gain = steering.column(ref_channel).to_vec();
    DistortionlessTarget::new(steering, gain)
}

/// Target toward grid direction `dir_index` with the same gain at every bin.
pub fn make_target_flat(
    set: &AtfSet,
    dir_index: usize,
    gain: Complex64,
) -> Result<DistortionlessTarget> {
    if dir_index >= set.n_directions() {
        return Err(Error::OutOfRange {
            what: "direction",
            index: dir_index,
            len: set.n_directions(),
        });
    }
    DistortionlessTarget::new(set.steering(dir_index).to_owned(), vec![gain; set.n_bins()])
}

fn check_indices(set: &AtfSet, dir_index: usize, ref_channel: usize) -> Result<()> {
    if dir_index >= set.n_directions() {
        return Err(Error::OutOfRange {
            what: "direction",
            index: dir_index,
            len: set.n_directions(),
        });
    }
    if ref_channel >= set.n_channels() {
        return Err(Error::OutOfRange {
            what: "reference channel",
            index: ref_channel,
            len: set.n_channels(),
        });
    }
    Ok(())
}

/// Complex filter coefficients, `[bin][channel]`. The filtered output of a
/// frame is `y = h^H x` per bin.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformerWeights {
    weights: Array2<Complex64>,
}

impl BeamformerWeights {
    pub fn new(weights: Array2<Complex64>) -> Result<Self> {
        if let Some(((b, c), _)) = weights
            .indexed_iter()
            .find(|(_, v)| !(v.re.is_finite() && v.im.is_finite()))
        {
            return Err(Error::invalid(
                "weights",
                format!("non-finite at [{b}][{c}]"),
            ));
        }
        Ok(Self { weights })
    }

    /// Passes channel `channel` through unchanged.
    pub fn selector(n_bins: usize, n_channels: usize, channel: usize) -> Self {
        let mut weights = Array2::zeros((n_bins, n_channels));
        weights.column_mut(channel).fill(Complex64::new(1.0, 0.0));
        Self { weights }
    }

    pub fn zeros(n_bins: usize, n_channels: usize) -> Self {
        Self {
            weights: Array2::zeros((n_bins, n_channels)),
        }
    }

    pub fn n_bins(&self) -> usize {
        self.weights.dim().0
    }

    pub fn n_channels(&self) -> usize {
        self.weights.dim().1
    }

    pub fn weights(&self) -> &Array2<Complex64> {
        &self.weights
    }

    pub fn bin(&self, bin: usize) -> ArrayView1<'_, Complex64> {
        self.weights.row(bin)
    }

    /// Applies the weights to one multichannel spectral frame `[bin][channel]`.
    pub fn apply(&self, frame: ArrayView2<'_, Complex64>) -> Result<Vec<Complex64>> {
        apply_weights(self, frame)
    }
}

/// Computes max-DI weights with loading `loading * trace(R) / N` added to
/// the diagonal of every bin's covariance.
pub fn max_di_weights(
    cov: &IsotropicCovariance,
    target: &DistortionlessTarget,
    loading: f64,
) -> Result<BeamformerWeights> {
    if !(loading >= 0.0) || !loading.is_finite() {
        return Err(Error::invalid(
            "loading",
            format!("{loading} (must be >= 0)"),
        ));
    }
    if cov.n_bins() != target.n_bins() || cov.n_channels() != target.n_channels() {
        return Err(Error::dim(
            "covariance vs target",
            format!("({}, {})", cov.n_bins(), cov.n_channels()),
            format!("({}, {})", target.n_bins(), target.n_channels()),
        ));
    }
    let n = cov.n_channels();
    let mut weights = Array2::<Complex64>::zeros((target.n_bins(), n));
    let mut failed = Vec::new();
    for bin in 0..target.n_bins() {
        let mut r = cov.to_dmatrix(bin);
        let trace: f64 = (0..n).map(|i| r[(i, i)].re).sum();
        let load = loading * trace / n as f64;
        for i in 0..n {
            r[(i, i)] += load;
        }
        let d = DVector::from_iterator(n, target.steering().row(bin).iter().copied());
        let Some(chol) = Cholesky::new(r) else {
            failed.push(bin);
            continue;
        };
        let x = chol.solve(&d);
        let denom: Complex64 = d.iter().zip(x.iter()).map(|(di, xi)| di.conj() * xi).sum();
        if !(denom.norm() > 0.0) || !denom.re.is_finite() || !denom.im.is_finite() {
            failed.push(bin);
            continue;
        }
        let scale = target.gain()[bin].conj() / denom;
        let mut row = weights.row_mut(bin);
        for (w, xi) in row.iter_mut().zip(x.iter()) {
            *w = xi * scale;
        }
        if row.iter().any(|w| !(w.re.is_finite() && w.im.is_finite())) {
            failed.push(bin);
        }
    }
    if !failed.is_empty() {
        return Err(Error::SingularCovariance { bins: failed });
    }
    Ok(BeamformerWeights { weights })
}

/// Delay-and-sum (matched filter) weights `h = g* d / ||d||^2`.
pub fn delay_and_sum_weights(target: &DistortionlessTarget) -> BeamformerWeights {
    let mut weights = target.steering().clone();
    for (bin, mut row) in weights.axis_iter_mut(Axis(0)).enumerate() {
        let norm2: f64 = row.iter().map(|v| v.norm_sqr()).sum();
        let scale = target.gain()[bin].conj() / norm2;
        row.mapv_inplace(|v| v * scale);
    }
    BeamformerWeights { weights }
}

/// Directivity index per bin: `10 log10(|h^H d|^2 / (h^H R h))`.
pub fn directivity_index_db(
    weights: &BeamformerWeights,
    target: &DistortionlessTarget,
    cov: &IsotropicCovariance,
) -> Result<Vec<f64>> {
    let dims = (weights.n_bins(), weights.n_channels());
    if dims != (target.n_bins(), target.n_channels()) || dims != (cov.n_bins(), cov.n_channels()) {
        return Err(Error::dim(
            "directivity index operands",
            format!("{dims:?}"),
            format!(
                "target ({}, {}), covariance ({}, {})",
                target.n_bins(),
                target.n_channels(),
                cov.n_bins(),
                cov.n_channels()
            ),
        ));
    }
    let mut out = Vec::with_capacity(dims.0);
    let mut bad = Vec::new();
    for bin in 0..dims.0 {
        let h = weights.bin(bin);
        let response: Complex64 = h
            .iter()
            .zip(target.steering().row(bin).iter())
            .map(|(hi, di)| hi.conj() * di)
            .sum();
        let noise = cov.quadratic_form(bin, h).re;
        if !(noise > 0.0) {
            bad.push(bin);
            out.push(f64::NAN);
            continue;
        }
        out.push(10.0 * (response.norm_sqr() / noise).log10());
    }
    if !bad.is_empty() {
        return Err(Error::NonpositiveDenominator { bins: bad });
    }
    Ok(out)
}

/// Per-bin `y = sum_c conj(h_c) x_c` over a `[bin][channel]` frame.
pub fn apply_weights(
    weights: &BeamformerWeights,
    frame: ArrayView2<'_, Complex64>,
) -> Result<Vec<Complex64>> {
    if frame.dim() != weights.weights.dim() {
        return Err(Error::dim(
            "spectral frame",
            format!("{:?}", weights.weights.dim()),
            format!("{:?}", frame.dim()),
        ));
    }
    Ok(weights
        .weights
        .outer_iter()
        .zip(frame.outer_iter())
        .map(|(h, x)| h.iter().zip(x.iter()).map(|(hi, xi)| hi.conj() * xi).sum())
        .collect())
}
