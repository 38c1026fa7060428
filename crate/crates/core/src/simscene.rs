//! Free-field scene simulation.
//!
//! Everything here is anechoic: a source in direction `u` reaches the mic at
//! `r` with delay `-(r . u) / c` relative to the array origin, so the ATF is
//! a pure unit-magnitude phase term. Diffuse noise is a sum of independent
//! white plane waves arriving from a near-uniform (Fibonacci) set of
//! directions; its inter-channel coherence therefore follows `sin(x)/x`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};

use crate::atf::{AtfSet, Direction};
use crate::error::{Error, Result};
use crate::wola::{FrameFft, StftConfig};

/// Microphone positions in meters, device frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub mic_positions: Vec<[f64; 3]>,
}

impl ArrayGeometry {
    pub fn new(mic_positions: Vec<[f64; 3]>) -> Result<Self> {
        let g = Self { mic_positions };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mic_positions.is_empty() {
            return Err(Error::invalid(
                "array geometry",
                "needs at least one microphone",
            ));
        }
        if self.mic_positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("array geometry", "non-finite position"));
        }
        for (i, a) in self.mic_positions.iter().enumerate() {
            for (j, b) in self.mic_positions.iter().enumerate().skip(i + 1) {
                if a == b {
                    return Err(Error::invalid(
                        "array geometry",
                        format!("mics {i} and {j} coincide"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn n_channels(&self) -> usize {
        self.mic_positions.len()
    }

    /// Six microphones spread over a glasses frame: two on the front rim,
    /// two at the hinges, two on the temple arms. About 17 cm wide.
    pub fn glasses() -> Self {
        Self {
            mic_positions: vec![
                [0.080, 0.070, 0.020],
                [0.080, -0.070, 0.020],
                [0.060, 0.085, -0.005],
                [0.060, -0.085, -0.005],
                [-0.030, 0.085, 0.000],
                [-0.030, -0.085, 0.000],
            ],
        }
    }

    /// Delay of each mic relative to the origin for a plane wave from `dir`.
    pub fn delays(&self, dir: &Direction, speed_of_sound: f64) -> Vec<f64> {
        let u = dir.unit_vector();
        self.mic_positions
            .iter()
            .map(|r| -(r[0] * u[0] + r[1] * u[1] + r[2] * u[2]) / speed_of_sound)
            .collect()
    }
}

/// `n` near-uniform directions on the sphere (Fibonacci lattice).
pub fn fibonacci_directions(n: usize) -> Vec<Direction> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            Direction::new(golden * i as f64, z.clamp(-1.0, 1.0).acos())
        })
        .collect()
}

/// Free-field ATFs on a Fibonacci grid: `exp(-j w tau)` per mic.
pub fn free_field_atf_set(
    geometry: &ArrayGeometry,
    n_directions: usize,
    n_bins: usize,
    sample_rate: f64,
    speed_of_sound: f64,
) -> Result<AtfSet> {
    if n_directions < 4 {
        return Err(Error::invalid(
            "free-field ATF set",
            format!("{n_directions} directions (need >= 4)"),
        ));
    }
    if n_bins < 2 {
        return Err(Error::invalid("free-field ATF set", "need at least 2 bins"));
    }
    geometry.validate()?;
    let dirs = fibonacci_directions(n_directions);
    let fft_len = 2 * (n_bins - 1);
    let n_ch = geometry.n_channels();
    let mut resp = Array3::zeros((n_directions, n_bins, n_ch));
    for (d, dir) in dirs.iter().enumerate() {
        let tau = geometry.delays(dir, speed_of_sound);
        for b in 0..n_bins {
            let w = 2.0 * PI * b as f64 * sample_rate / fft_len as f64;
            for (c, t) in tau.iter().enumerate() {
                resp[[d, b, c]] = Complex64::from_polar(1.0, -w * t);
            }
        }
    }
    AtfSet::new(sample_rate, dirs, resp)
}

/// Spherically isotropic noise from `n_plane_waves` independent white plane
/// waves. All channels share one scale factor chosen so the mean channel
/// power is exactly 1. Deterministic for a given seed.
pub fn diffuse_noise(
    geometry: &ArrayGeometry,
    duration_s: f64,
    sample_rate: f64,
    n_plane_waves: usize,
    seed: u64,
    speed_of_sound: f64,
) -> Result<Array2<f64>> {
    if n_plane_waves < 64 {
        return Err(Error::invalid(
            "diffuse noise",
            format!("{n_plane_waves} plane waves (need >= 64)"),
        ));
    }
    geometry.validate()?;
    let len = (duration_s * sample_rate).round() as usize;
    let n_ch = geometry.n_channels();
    if len < 2 {
        return Ok(Array2::zeros((n_ch, len)));
    }
    let n_bins = len / 2 + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![vec![Complex64::new(0.0, 0.0); n_bins]; n_ch];
    let dirs = fibonacci_directions(n_plane_waves);
    let bin_w = 2.0 * PI * sample_rate / len as f64;
    const RESYNC: usize = 4096;
    for dir in &dirs {
        let tau = geometry.delays(dir, speed_of_sound);
        let step: Vec<Complex64> = tau
            .iter()
            .map(|t| Complex64::from_polar(1.0, -bin_w * t))
            .collect();
        let mut rot = vec![Complex64::new(1.0, 0.0); n_ch];
        for k in 1..n_bins {
            if k % RESYNC == 0 {
                for (r, t) in rot.iter_mut().zip(&tau) {
                    *r = Complex64::from_polar(1.0, -bin_w * k as f64 * t);
                }
            } else {
                for (r, s) in rot.iter_mut().zip(&step) {
                    *r *= s;
                }
            }
            let w = Complex64::new(
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            );
            for (a, r) in acc.iter_mut().zip(&rot) {
                a[k] += w * r;
            }
        }
    }
    let mut planner = RealFftPlanner::<f64>::new();
    let inv = planner.plan_fft_inverse(len);
    let mut out = Array2::zeros((n_ch, len));
    let mut time = inv.make_output_vec();
    for (c, spec) in acc.iter_mut().enumerate() {
        spec[0] = Complex64::new(0.0, 0.0);
        let last = n_bins - 1;
        spec[last].im = 0.0;
        if len.is_multiple_of(2) {
            // a real Nyquist bin would carry no inter-channel phase; drop it
            spec[last] = Complex64::new(0.0, 0.0);
        }
        inv.process(spec, &mut time).expect("plan sizes");
        out.row_mut(c)
            .iter_mut()
            .zip(&time)
            .for_each(|(o, t)| *o = *t);
    }
    let mean_power = out.iter().map(|v| v * v).sum::<f64>() / (n_ch * len) as f64;
    if mean_power > 0.0 {
        out.mapv_inplace(|v| v / mean_power.sqrt());
    }
    Ok(out)
}

/// Renders a mono source through the free-field ATFs of a time-varying
/// direction. Each WOLA frame uses the direction held at its center time;
/// consecutive frames crossfade through the synthesis window. The output
/// has the source's length (samples past the last full frame are zero).
pub fn render_moving_source(
    source: &[f64],
    direction_track: &[(f64, Direction)],
    geometry: &ArrayGeometry,
    config: &StftConfig,
    speed_of_sound: f64,
) -> Result<Array2<f64>> {
    geometry.validate()?;
    if direction_track.is_empty() {
        return Err(Error::invalid("direction track", "empty"));
    }
    if let Some(w) = direction_track.windows(2).find(|w| !(w[1].0 > w[0].0)) {
        return Err(Error::invalid(
            "direction track",
            format!("timestamps not increasing at {}", w[1].0),
        ));
    }
    let n_ch = geometry.n_channels();
    let len = source.len();
    let count = config.frame_count(len);
    if count > 0 && direction_track[0].0 > config.frame_center_time(0) {
        return Err(Error::invalid(
            "direction track",
            format!(
                "starts at {}s, after the first frame center {}s",
                direction_track[0].0,
                config.frame_center_time(0)
            ),
        ));
    }
    let mut out = Array2::zeros((n_ch, len));
    let mut fft = FrameFft::new(config.frame_len());
    let n_bins = config.n_bins();
    let mut spec = vec![Complex64::new(0.0, 0.0); n_bins];
    let mut filtered = vec![Complex64::new(0.0, 0.0); n_bins];
    let gain = 1.0 / config.cola_gain();
    for t in 0..count {
        let start = t * config.hop();
        let tc = config.frame_center_time(t);
        let k = direction_track.partition_point(|(time, _)| *time <= tc);
        let dir = direction_track[k - 1].1;
        let tau = geometry.delays(&dir, speed_of_sound);
        spec.copy_from_slice(fft.forward(
            source[start..start + config.frame_len()].iter().copied(),
            config.window(),
        ));
        for (c, tc) in tau.iter().enumerate() {
            for (b, (f, s)) in filtered.iter_mut().zip(&spec).enumerate() {
                let w = 2.0 * PI * config.bin_frequency(b);
                *f = s * Complex64::from_polar(1.0, -w * tc);
            }
            let frame = fft.inverse(&filtered);
            let mut row = out.row_mut(c);
            for (n, (s, w)) in frame.iter().zip(config.window()).enumerate() {
                row[start + n] += s * w * gain;
            }
        }
    }
    Ok(out)
}

/// Random talk-spurt layout: bursts of 0.6-2.5 s separated by 0.2-1.0 s
/// pauses, starting after a short lead-in.
pub fn random_activity(duration_s: f64, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut t = rng.random_range(0.1..0.5);
    while t < duration_s {
        let end = (t + rng.random_range(0.6..2.5)).min(duration_s);
        if end - t > 0.1 {
            out.push((t, end));
        }
        t = end + rng.random_range(0.2..1.0);
    }
    out
}

/// Speech-shaped noise: white Gaussian noise through a one-pole low-pass
/// (about -6 dB/octave above 400 Hz), gated on during `activity` with
/// 10 ms raised-cosine ramps and scaled to unit active power.
pub fn speech_shaped_source(
    duration_s: f64,
    sample_rate: f64,
    activity: &[(f64, f64)],
    seed: u64,
) -> Vec<f64> {
    let len = (duration_s * sample_rate).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pole = (-2.0 * PI * 400.0 / sample_rate).exp();
    let mut state = 0.0;
    let mut x: Vec<f64> = (0..len)
        .map(|_| {
            let w: f64 = StandardNormal.sample(&mut rng);
            state = pole * state + (1.0 - pole) * w;
            state
        })
        .collect();
    let ramp = (0.010 * sample_rate).max(1.0);
    let mut gate = vec![0.0; len];
    for &(a, b) in activity {
        let s0 = ((a * sample_rate).round().max(0.0) as usize).min(len);
        let s1 = ((b * sample_rate).round().max(0.0) as usize).min(len);
        for n in s0..s1 {
            let edge = ((n - s0) as f64).min((s1 - 1 - n) as f64);
            gate[n] = if edge >= ramp {
                1.0
            } else {
                0.5 - 0.5 * (PI * edge / ramp).cos()
            };
        }
    }
    x.iter_mut().zip(&gate).for_each(|(v, g)| *v *= g);
    let active: usize = gate.iter().filter(|g| **g > 0.0).count();
    let power = x.iter().map(|v| v * v).sum::<f64>() / active.max(1) as f64;
    if power > 0.0 {
        x.iter_mut().for_each(|v| *v /= power.sqrt());
    }
    x
}

/// One rendered point source.
#[derive(Debug, Clone)]
pub struct SourceSpec<'a> {
    pub signal: &'a [f64],
    pub direction_track: &'a [(f64, Direction)],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub n_plane_waves: usize,
    pub seed: u64,
}

/// Mixture plus the components it was summed from.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRender {
    pub sample_rate: f64,
    pub geometry: ArrayGeometry,
    pub mixture: Array2<f64>,
    /// `"target"`, `"noise"`, and `"interferer"` when present.
    pub stems: BTreeMap<String, Array2<f64>>,
}

impl SceneRender {
    pub fn stem(&self, name: &str) -> Option<&Array2<f64>> {
        self.stems.get(name)
    }
}

#[derive(Debug, Clone)]
pub struct SceneParams {
    pub snr_db_target_to_noise: f64,
    /// Target-to-interferer power ratio at channel 0.
    pub snr_db_target_to_interferer: f64,
    pub noise: NoiseSpec,
    pub speed_of_sound: f64,
}

fn channel0_energy(x: &Array2<f64>) -> f64 {
    x.row(0).iter().map(|v| v * v).sum()
}

/// Renders target, optional interferer and diffuse noise, scaling noise and
/// interferer against the target's power at channel 0.
pub fn build_scene(
    target: &SourceSpec<'_>,
    interferer: Option<&SourceSpec<'_>>,
    geometry: &ArrayGeometry,
    params: &SceneParams,
    config: &StftConfig,
) -> Result<SceneRender> {
    let fs = config.sample_rate();
    let len = target.signal.len();
    let c = params.speed_of_sound;
    let target_stem =
        render_moving_source(target.signal, target.direction_track, geometry, config, c)?;
    let e_target = channel0_energy(&target_stem);
    if !(e_target > 0.0) {
        return Err(Error::Degenerate(
            "target has no energy at channel 0".into(),
        ));
    }
    let mut stems = BTreeMap::new();
    if let Some(spec) = interferer {
        if spec.signal.len() != len {
            return Err(Error::dim("interferer length", len, spec.signal.len()));
        }
        let mut stem =
            render_moving_source(spec.signal, spec.direction_track, geometry, config, c)?;
        let e = channel0_energy(&stem);
        if e > 0.0 {
            let scale =
                (e_target / e / 10f64.powf(params.snr_db_target_to_interferer / 10.0)).sqrt();
            stem.mapv_inplace(|v| v * scale);
        }
        stems.insert("interferer".to_string(), stem);
    }
    let mut noise = diffuse_noise(
        geometry,
        len as f64 / fs,
        fs,
        params.noise.n_plane_waves,
        params.noise.seed,
        c,
    )?;
    let scale =
        (e_target / channel0_energy(&noise) / 10f64.powf(params.snr_db_target_to_noise / 10.0))
            .sqrt();
    noise.mapv_inplace(|v| v * scale);
    stems.insert("noise".to_string(), noise);
    stems.insert("target".to_string(), target_stem);
    let mut mixture = Array2::zeros((geometry.n_channels(), len));
    for stem in stems.values() {
        mixture += stem;
    }
    Ok(SceneRender {
        sample_rate: fs,
        geometry: geometry.clone(),
        mixture,
        stems,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::gcc_phat_delay;

    #[test]
    fn fibonacci_is_near_uniform() {
        let dirs = fibonacci_directions(642);
        let mean: [f64; 3] = dirs
            .iter()
            .map(|d| d.unit_vector())
            .fold([0.0; 3], |a, u| [a[0] + u[0], a[1] + u[1], a[2] + u[2]]);
        assert!(mean.iter().all(|m| (m / 642.0).abs() < 1e-2));
        // worst-case distance to the grid stays under 8 degrees
        let set = AtfSet::new(
            1.0,
            dirs.clone(),
            Array3::from_elem((642, 2, 1), Complex64::new(1.0, 0.0)),
        )
        .unwrap();
        for q in fibonacci_directions(5000) {
            let k = set.nearest_direction(&q);
            assert!(q.angle_to(&dirs[k]).to_degrees() < 8.0);
        }
    }

    #[test]
    fn single_mic_atfs_are_one() {
        let g = ArrayGeometry::new(vec![[0.0; 3]]).unwrap();
        let set = free_field_atf_set(&g, 20, 9, 16_000.0, 343.0).unwrap();
        assert!(set
            .responses()
            .iter()
            .all(|v| (v - Complex64::new(1.0, 0.0)).norm() < 1e-15));
        assert!(free_field_atf_set(&g, 3, 9, 16_000.0, 343.0).is_err());
    }

    #[test]
    fn atf_phase_matches_geometric_delay() {
        let g = ArrayGeometry::new(vec![[0.085, 0.0, 0.0], [-0.085, 0.0, 0.0]]).unwrap();
        let set = free_field_atf_set(&g, 100, 257, 48_000.0, 343.0).unwrap();
        for (d, dir) in set.directions().iter().enumerate() {
            let u = dir.unit_vector();
            // mic 0 leads mic 1 by 0.17 * u_x / c
            let lead = 0.17 * u[0] / 343.0;
            for b in [1usize, 10, 100, 256] {
                let w = 2.0 * PI * set.bin_frequency(b);
                let r = set.responses()[[d, b, 0]] * set.responses()[[d, b, 1]].conj();
                let expect = Complex64::from_polar(1.0, w * lead);
                assert!((r - expect).norm() < 1e-9);
            }
        }
        assert!(set
            .responses()
            .iter()
            .all(|v| (v.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn single_mic_noise_is_unit_white() {
        let g = ArrayGeometry::new(vec![[0.0; 3]]).unwrap();
        let x = diffuse_noise(&g, 2.0, 16_000.0, 64, 1, 343.0).unwrap();
        let p = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        assert!((p - 1.0).abs() < 0.05);
        // whiteness: lag-1 autocorrelation near zero
        let r1 = x
            .row(0)
            .windows(2)
            .into_iter()
            .map(|w| w[0] * w[1])
            .sum::<f64>()
            / x.len() as f64;
        assert!(r1.abs() < 0.02);
        assert!(diffuse_noise(&g, 1.0, 16_000.0, 63, 1, 343.0).is_err());
    }

    #[test]
    fn noise_is_deterministic() {
        let g = ArrayGeometry::glasses();
        let a = diffuse_noise(&g, 0.25, 16_000.0, 64, 42, 343.0).unwrap();
        let b = diffuse_noise(&g, 0.25, 16_000.0, 64, 42, 343.0).unwrap();
        let c = diffuse_noise(&g, 0.25, 16_000.0, 64, 43, 343.0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for row in a.rows() {
            let p = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            assert!((p - 1.0).abs() < 0.05, "{p}");
        }
    }

    #[test]
    fn symmetric_boresight_channels_identical() {
        let g = ArrayGeometry::new(vec![[0.0, 0.05, 0.0], [0.0, -0.05, 0.0]]).unwrap();
        let cfg = StftConfig::default();
        let src = speech_shaped_source(1.0, 48_000.0, &[(0.0, 1.0)], 3);
        let out = render_moving_source(
            &src,
            &[(0.0, Direction::new(0.0, PI / 2.0))],
            &g,
            &cfg,
            343.0,
        )
        .unwrap();
        let diff: f64 = out
            .row(0)
            .iter()
            .zip(out.row(1))
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        let e: f64 = out.row(0).iter().map(|a| a * a).sum();
        assert!(diff <= 1e-6 * e);
    }

    #[test]
    fn off_axis_delay_matches_geometry() {
        let g = ArrayGeometry::new(vec![[0.0, 0.085, 0.0], [0.0, -0.085, 0.0]]).unwrap();
        let cfg = StftConfig::default();
        let src = speech_shaped_source(2.0, 48_000.0, &[(0.0, 2.0)], 4);
        for az in [30.0f64, -60.0, 90.0] {
            let dir = Direction::from_degrees(az, 90.0);
            let out = render_moving_source(&src, &[(0.0, dir)], &g, &cfg, 343.0).unwrap();
            let tau = g.delays(&dir, 343.0);
            let expect = ((tau[1] - tau[0]) * 48_000.0).round() as i64;
            let got = gcc_phat_delay(&out.row(0).to_vec(), &out.row(1).to_vec(), 100).unwrap();
            assert_eq!(got, expect, "azimuth {az}");
        }
    }

    #[test]
    fn direction_switch_changes_delay_per_half() {
        let g = ArrayGeometry::new(vec![[0.0, 0.085, 0.0], [0.0, -0.085, 0.0]]).unwrap();
        let cfg = StftConfig::default();
        let src = speech_shaped_source(4.0, 48_000.0, &[(0.0, 4.0)], 5);
        let a = Direction::from_degrees(60.0, 90.0);
        let b = Direction::from_degrees(-45.0, 90.0);
        let out = render_moving_source(&src, &[(0.0, a), (2.0, b)], &g, &cfg, 343.0).unwrap();
        for (dir, range) in [(a, 4800..91_200), (b, 100_800..187_000)] {
            let tau = g.delays(&dir, 343.0);
            let expect = ((tau[1] - tau[0]) * 48_000.0).round() as i64;
            let x0 = out.row(0).slice(ndarray::s![range.clone()]).to_vec();
            let x1 = out.row(1).slice(ndarray::s![range]).to_vec();
            assert_eq!(gcc_phat_delay(&x0, &x1, 100).unwrap(), expect);
        }
        assert!(render_moving_source(&src, &[(0.5, a)], &g, &cfg, 343.0).is_err());
    }

    #[test]
    fn scene_contract() {
        let g = ArrayGeometry::glasses();
        let cfg = StftConfig::default();
        let act = random_activity(3.0, 9);
        let src = speech_shaped_source(3.0, 48_000.0, &act, 10);
        let track = [(0.0, Direction::from_degrees(10.0, 90.0))];
        let params = SceneParams {
            snr_db_target_to_noise: 0.0,
            snr_db_target_to_interferer: 0.0,
            noise: NoiseSpec {
                n_plane_waves: 64,
                seed: 3,
            },
            speed_of_sound: 343.0,
        };
        let scene = build_scene(
            &SourceSpec {
                signal: &src,
                direction_track: &track,
            },
            None,
            &g,
            &params,
            &cfg,
        )
        .unwrap();
        assert_eq!(
            scene.stems.keys().collect::<Vec<_>>(),
            vec!["noise", "target"]
        );
        let snr = 10.0
            * (channel0_energy(&scene.stems["target"]) / channel0_energy(&scene.stems["noise"]))
                .log10();
        assert!(snr.abs() < 0.1, "{snr}");
        let sum = &scene.stems["target"] + &scene.stems["noise"];
        for (a, b) in sum.iter().zip(scene.mixture.iter()) {
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1e-12));
        }
        let other = speech_shaped_source(3.0, 48_000.0, &random_activity(3.0, 11), 12);
        let itrack = [(0.0, Direction::from_degrees(120.0, 80.0))];
        let with = build_scene(
            &SourceSpec {
                signal: &src,
                direction_track: &track,
            },
            Some(&SourceSpec {
                signal: &other,
                direction_track: &itrack,
            }),
            &g,
            &params,
            &cfg,
        )
        .unwrap();
        assert!(with.stems.contains_key("interferer"));
        let tir = 10.0
            * (channel0_energy(&with.stems["target"]) / channel0_energy(&with.stems["interferer"]))
                .log10();
        assert!(tir.abs() < 1e-9);
    }

    #[test]
    fn activity_layout_is_sorted_and_bounded() {
        let act = random_activity(30.0, 1);
        assert!(!act.is_empty());
        assert!(act.windows(2).all(|w| w[0].1 < w[1].0));
        assert!(act.iter().all(|(a, b)| a < b && *b <= 30.0));
    }
}
