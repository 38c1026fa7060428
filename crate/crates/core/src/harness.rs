//! File formats and the command workflows behind the CLI.
//!
//! Every command writes its outputs through [`write_atomically`]: data goes
//! to a temporary file in the destination directory which is renamed into
//! place only after a successful write, so a failed run leaves nothing
//! partial behind.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Array3, ArrayView2};
use num_complex::Complex64;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atf::{AtfSet, Direction, IsotropicCovariance};
use crate::audio::{read_wav, write_mono, write_wav};
use crate::beamformer::{make_target, max_di_weights, BeamformerWeights, DEFAULT_LOADING};
use crate::error::{Error, Result};
use crate::metrics::{
    align_to_reference, gather_segments, read_va_json, seg_snr_db, select_segments, si_sdr_db,
    snr_db, va_to_json, TestCase, VaSegments, SEG_SNR_FRAME_S,
};
use crate::simscene::{
    build_scene, free_field_atf_set, random_activity, speech_shaped_source, ArrayGeometry,
    NoiseSpec, SceneParams, SceneRender, SourceSpec,
};
use crate::steering::{
    read_pose_csv, relative_direction_with_offset, write_pose_csv, Pose, PoseTrack,
};
use crate::tracker::{
    finalize, read_detections, read_face_boxes, read_motions, track_all, LabeledTrack,
    TrackerConfig,
};
use crate::wola::{process_stream, StftConfig, DEFAULT_FRAME_LEN, DEFAULT_HOP};
use crate::SPEED_OF_SOUND;

/// Writes `path` via a temporary sibling file renamed into place on success.
pub fn write_atomically(
    path: &Path,
    f: impl FnOnce(&mut File) -> std::io::Result<()>,
) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    f(tmp.as_file_mut()).map_err(|e| Error::io(path, e))?;
    tmp.as_file_mut().flush().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_atomically(path, |w| {
        w.write_all(text.as_bytes())?;
        w.write_all(b"\n")
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn default_frame_len() -> usize {
    DEFAULT_FRAME_LEN
}
fn default_hop() -> usize {
    DEFAULT_HOP
}
fn default_loading() -> f64 {
    DEFAULT_LOADING
}
fn default_c() -> f64 {
    SPEED_OF_SOUND
}

/// Flat configuration for `enhance` and `evaluate`. Relative paths are
/// resolved against `data_root` when it is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub data_root: Option<PathBuf>,
    #[serde(default)]
    pub atf_path: Option<PathBuf>,
    #[serde(default = "default_frame_len")]
    pub frame_len: usize,
    #[serde(default = "default_hop")]
    pub hop: usize,
    #[serde(default = "default_loading")]
    pub loading: f64,
    #[serde(default)]
    pub ref_channel: usize,
    #[serde(default)]
    pub target_id: Option<String>,
    #[serde(default)]
    pub wearer_id: Option<String>,
    #[serde(default)]
    pub pose_path: Option<PathBuf>,
    #[serde(default)]
    pub va_path: Option<PathBuf>,
    #[serde(default)]
    pub input_path: Option<PathBuf>,
    #[serde(default)]
    pub output_path: Option<PathBuf>,
    #[serde(default = "default_c")]
    pub speed_of_sound: f64,
    /// Device origin relative to the tracked marker, device frame, meters.
    #[serde(default)]
    pub marker_offset: [f64; 3],
    /// Skip the beamformer and pass `ref_channel` through the filterbank.
    #[serde(default)]
    pub bypass: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.loading >= 0.0) || !self.loading.is_finite() {
            return Err(Error::invalid(
                "loading",
                format!("{} (must be >= 0)", self.loading),
            ));
        }
        if !(self.speed_of_sound > 0.0) {
            return Err(Error::invalid(
                "speed_of_sound",
                self.speed_of_sound.to_string(),
            ));
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        match &self.data_root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn required(&self, value: &Option<PathBuf>, what: &'static str) -> Result<PathBuf> {
        value
            .as_deref()
            .map(|p| self.resolve(p))
            .ok_or_else(|| Error::invalid(what, "not set"))
    }

    fn required_id(value: &Option<String>, what: &'static str) -> Result<String> {
        value.clone().ok_or_else(|| Error::invalid(what, "not set"))
    }
}

/// Grid index of the target direction at every frame center.
pub fn steering_schedule(
    atf: &AtfSet,
    wearer: &PoseTrack,
    target: &PoseTrack,
    stft: &StftConfig,
    n_frames: usize,
    marker_offset: [f64; 3],
) -> Result<Vec<usize>> {
    (0..n_frames)
        .map(|t| {
            let tc = stft.frame_center_time(t);
            let w = wearer.pose_at(tc)?;
            let p = target.pose_at(tc)?;
            let dir = relative_direction_with_offset(w, p.position, marker_offset)?;
            Ok(atf.nearest_direction(&dir))
        })
        .collect()
}

/// Weight cache keyed by ATF index. Weights are computed at most once per
/// distinct index.
pub struct WeightCache<'a> {
    atf: &'a AtfSet,
    cov: &'a IsotropicCovariance,
    loading: f64,
    ref_channel: usize,
    cached: BTreeMap<usize, BeamformerWeights>,
}

impl<'a> WeightCache<'a> {
    pub fn new(
        atf: &'a AtfSet,
        cov: &'a IsotropicCovariance,
        loading: f64,
        ref_channel: usize,
    ) -> Self {
        Self {
            atf,
            cov,
            loading,
            ref_channel,
            cached: BTreeMap::new(),
        }
    }

    pub fn compute(&self, dir_index: usize) -> Result<BeamformerWeights> {
        max_di_weights(
            self.cov,
            &make_target(self.atf, dir_index, self.ref_channel)?,
            self.loading,
        )
    }

    pub fn get(&mut self, dir_index: usize) -> Result<&BeamformerWeights> {
        if !self.cached.contains_key(&dir_index) {
            let w = self.compute(dir_index)?;
            self.cached.insert(dir_index, w);
        }
        Ok(&self.cached[&dir_index])
    }

    pub fn computations(&self) -> usize {
        self.cached.len()
    }
}

/// Beamforms `signal` with the frame-wise direction `schedule`. With
/// `cache` off the weights are recomputed every frame. Returns the output
/// (padded to the input length) and the number of weight computations.
pub fn beamform_scheduled(
    atf: &AtfSet,
    signal: ArrayView2<'_, f64>,
    stft: &StftConfig,
    loading: f64,
    ref_channel: usize,
    schedule: &[usize],
    cache: bool,
) -> Result<(Vec<f64>, usize)> {
    let cov = atf.isotropic_covariance();
    let mut weights = WeightCache::new(atf, &cov, loading, ref_channel);
    let lookup = |t: usize| {
        schedule.get(t).copied().ok_or_else(|| Error::Frame {
            frame: t,
            reason: format!("no steering entry ({} scheduled)", schedule.len()),
        })
    };
    let (mut out, computations) = if cache {
        for &k in schedule {
            weights.get(k)?;
        }
        let cached = &weights.cached;
        let out = process_stream(signal, stft, |t, _| Ok(&cached[&lookup(t)?]))?;
        (out, weights.computations())
    } else {
        let mut count = 0;
        let out = process_stream(signal, stft, |t, _| {
            count += 1;
            weights.compute(lookup(t)?)
        })?;
        (out, count)
    };
    out.resize(signal.dim().1, 0.0);
    Ok((out, computations))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhanceReport {
    pub input: PathBuf,
    pub output: PathBuf,
    pub sample_rate: f64,
    pub n_channels: usize,
    pub n_samples: usize,
    pub n_frames: usize,
    pub bypass: bool,
    pub loading: f64,
    pub ref_channel: usize,
    /// Selected ATF index per frame; empty in bypass mode.
    pub direction_indices: Vec<usize>,
    pub weight_computations: usize,
    pub elapsed_s: f64,
    pub realtime_factor: f64,
}

/// Load, steer per frame, beamform, write the mono result.
pub fn enhance(cfg: &PipelineConfig) -> Result<EnhanceReport> {
    let started = Instant::now();
    cfg.validate()?;
    let input = cfg.required(&cfg.input_path, "input_path")?;
    let output = cfg.required(&cfg.output_path, "output_path")?;
    let audio = read_wav(&input)?;
    let fs = audio.sample_rate as f64;
    let stft = StftConfig::sqrt_hann(cfg.frame_len, cfg.hop, fs)?;
    let n_ch = audio.n_channels();
    if cfg.ref_channel >= n_ch {
        return Err(Error::OutOfRange {
            what: "ref_channel",
            index: cfg.ref_channel,
            len: n_ch,
        });
    }
    let n_frames = stft.frame_count(audio.len());
    let (samples, schedule, computations) = if cfg.bypass {
        let sel = BeamformerWeights::selector(stft.n_bins(), n_ch, cfg.ref_channel);
        let mut out = process_stream(audio.samples.view(), &stft, |_, _| Ok(&sel))?;
        out.resize(audio.len(), 0.0);
        (out, Vec::new(), 0)
    } else {
        let atf = AtfSet::load(cfg.required(&cfg.atf_path, "atf_path")?)?;
        if atf.n_channels() != n_ch {
            return Err(Error::dim(
                "input channels vs ATF set",
                atf.n_channels(),
                n_ch,
            ));
        }
        if atf.n_bins() != stft.n_bins() {
            return Err(Error::dim(
                "ATF bins vs frame length",
                atf.n_bins(),
                stft.n_bins(),
            ));
        }
        if (atf.sample_rate() - fs).abs() > 1e-6 {
            return Err(Error::invalid(
                "sample rate",
                format!("input is {fs} Hz, ATF set is {} Hz", atf.sample_rate()),
            ));
        }
        let poses = read_pose_csv(cfg.required(&cfg.pose_path, "pose_path")?)?;
        let track = |id: &str| {
            poses
                .get(id)
                .ok_or_else(|| Error::UnknownParticipant(id.to_string()))
        };
        let wearer = track(&PipelineConfig::required_id(&cfg.wearer_id, "wearer_id")?)?;
        let target = track(&PipelineConfig::required_id(&cfg.target_id, "target_id")?)?;
        let schedule = steering_schedule(&atf, wearer, target, &stft, n_frames, cfg.marker_offset)?;
        let (out, n) = beamform_scheduled(
            &atf,
            audio.samples.view(),
            &stft,
            cfg.loading,
            cfg.ref_channel,
            &schedule,
            true,
        )?;
        (out, schedule, n)
    };
    write_mono(&output, audio.sample_rate, &samples)?;
    let elapsed_s = started.elapsed().as_secs_f64();
    Ok(EnhanceReport {
        input,
        output,
        sample_rate: fs,
        n_channels: n_ch,
        n_samples: audio.len(),
        n_frames,
        bypass: cfg.bypass,
        loading: cfg.loading,
        ref_channel: cfg.ref_channel,
        direction_indices: schedule,
        weight_computations: computations,
        elapsed_s,
        realtime_factor: elapsed_s / (audio.len() as f64 / fs).max(f64::MIN_POSITIVE),
    })
}

/// One row of the metric table. A `None` metric has its reason in
/// `undefined`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub snr_db: Option<f64>,
    pub seg_snr_db: Option<f64>,
    pub si_sdr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub undefined: BTreeMap<String, String>,
}

impl MetricRow {
    /// Metrics of `estimate` against the aligned `reference` over `active`.
    pub fn compute(
        estimate: &[f64],
        reference: &[f64],
        active: &VaSegments,
        sample_rate: f64,
    ) -> Result<Self> {
        let mut undefined = BTreeMap::new();
        let mut keep = |name: &str, r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedMetric(reason)) => {
                undefined.insert(name.to_string(), reason);
                Ok(None)
            }
            Err(e) => Err(e),
        };
        let residual: Vec<f64> = estimate.iter().zip(reference).map(|(e, r)| e - r).collect();
        let (snr, si_sdr) = if active.is_empty() {
            let none = || Err(Error::UndefinedMetric("no selected segments".into()));
            (none(), none())
        } else {
            let s = gather_segments(reference, active, sample_rate);
            let r = gather_segments(&residual, active, sample_rate);
            let e = gather_segments(estimate, active, sample_rate);
            (snr_db(&s, &r), si_sdr_db(&e, &s))
        };
        Ok(MetricRow {
            snr_db: keep("snr_db", snr)?,
            seg_snr_db: keep(
                "seg_snr_db",
                seg_snr_db(reference, &residual, active, SEG_SNR_FRAME_S, sample_rate),
            )?,
            si_sdr_db: keep("si_sdr_db", si_sdr)?,
            undefined,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateArgs {
    pub enhanced: PathBuf,
    /// Close-talk recording or a clean target stem.
    pub reference: PathBuf,
    #[serde(default)]
    pub reference_channel: usize,
    /// Multichannel array recording; `ref_channel` is the raw baseline.
    pub mixture: PathBuf,
    #[serde(default)]
    pub ref_channel: usize,
    pub va_path: PathBuf,
    pub target_id: String,
    pub wearer_id: String,
    pub case: TestCase,
    /// Coarse delay of the reference relative to the mixture, samples.
    #[serde(default)]
    pub coarse_offset: i64,
    #[serde(default = "default_max_lag")]
    pub max_lag: usize,
}

fn default_max_lag() -> usize {
    2400
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateReport {
    pub test_case: TestCase,
    pub target_id: String,
    pub wearer_id: String,
    pub sample_rate: f64,
    pub n_samples: usize,
    pub alignment_shift: i64,
    pub selected_segments: Vec<(f64, f64)>,
    pub selected_duration_s: f64,
    /// Beamformer output.
    pub enhanced: MetricRow,
    /// Unprocessed reference microphone.
    pub reference_mic: MetricRow,
    /// Slot for third-party perceptual scores, filled by external tools.
    pub external: BTreeMap<String, f64>,
}

fn channel_of(path: &Path, ch: usize) -> Result<(u32, Vec<f64>)> {
    let a = read_wav(path)?;
    if ch >= a.n_channels() {
        return Err(Error::OutOfRange {
            what: "channel",
            index: ch,
            len: a.n_channels(),
        });
    }
    Ok((a.sample_rate, a.channel(ch)))
}

pub fn evaluate(args: &EvaluateArgs) -> Result<EvaluateReport> {
    let (fs_e, enhanced) = channel_of(&args.enhanced, 0)?;
    let (fs_r, reference) = channel_of(&args.reference, args.reference_channel)?;
    let (fs_m, mixture) = channel_of(&args.mixture, args.ref_channel)?;
    if fs_e != fs_r || fs_e != fs_m {
        return Err(Error::invalid(
            "sample rate",
            format!("enhanced {fs_e} Hz, reference {fs_r} Hz, mixture {fs_m} Hz"),
        ));
    }
    let fs = fs_e as f64;
    let len = enhanced.len().min(mixture.len());
    let mixture = &mixture[..len];
    let enhanced = &enhanced[..len];
    let aligned = align_to_reference(&reference, mixture, args.coarse_offset, args.max_lag)?;
    let va = read_va_json(&args.va_path)?;
    let active = select_segments(&va, &args.target_id, &args.wearer_id, args.case)?;
    Ok(EvaluateReport {
        test_case: args.case,
        target_id: args.target_id.clone(),
        wearer_id: args.wearer_id.clone(),
        sample_rate: fs,
        n_samples: len,
        alignment_shift: aligned.shift,
        selected_segments: active.segments().to_vec(),
        selected_duration_s: active.total_duration(),
        enhanced: MetricRow::compute(enhanced, &aligned.samples, &active, fs)?,
        reference_mic: MetricRow::compute(mixture, &aligned.samples, &active, fs)?,
        external: BTreeMap::new(),
    })
}

/// A point on a source's path, relative to a wearer standing at the
/// origin facing +x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub time_s: f64,
    pub azimuth_deg: f64,
    pub inclination_deg: f64,
    #[serde(default = "default_distance")]
    pub distance_m: f64,
}

fn default_distance() -> f64 {
    1.0
}

impl Waypoint {
    pub fn direction(&self) -> Direction {
        Direction::from_degrees(self.azimuth_deg, self.inclination_deg)
    }

    pub fn position(&self) -> [f64; 3] {
        self.direction().unit_vector().map(|u| u * self.distance_m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceManifest {
    pub participant_id: String,
    /// Held from each waypoint to the next.
    pub waypoints: Vec<Waypoint>,
    /// Talk spurts in seconds; random when absent.
    #[serde(default)]
    pub activity: Option<Vec<(f64, f64)>>,
    /// Mono WAV to use instead of speech-shaped noise.
    #[serde(default)]
    pub audio_path: Option<PathBuf>,
}

fn default_fs() -> f64 {
    48_000.0
}
fn default_waves() -> usize {
    256
}
fn default_dirs() -> usize {
    2562
}
fn default_wearer() -> String {
    "wearer".into()
}

/// Everything needed to reproduce a simulated scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    #[serde(default = "default_fs")]
    pub sample_rate: f64,
    pub duration_s: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "ArrayGeometry::glasses")]
    pub geometry: ArrayGeometry,
    #[serde(default = "default_frame_len")]
    pub frame_len: usize,
    #[serde(default = "default_hop")]
    pub hop: usize,
    #[serde(default = "default_dirs")]
    pub n_directions: usize,
    #[serde(default = "default_waves")]
    pub n_plane_waves: usize,
    pub snr_db: f64,
    /// Target-to-interferer ratio at channel 0.
    #[serde(default)]
    pub interferer_snr_db: f64,
    #[serde(default = "default_c")]
    pub speed_of_sound: f64,
    #[serde(default = "default_wearer")]
    pub wearer_id: String,
    pub target: SourceManifest,
    #[serde(default)]
    pub interferer: Option<SourceManifest>,
}

impl SceneManifest {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0) || !(self.duration_s > 0.0) {
            return Err(Error::invalid(
                "scene manifest",
                "sample_rate and duration_s must be positive",
            ));
        }
        self.geometry.validate()?;
        for src in std::iter::once(&self.target).chain(&self.interferer) {
            let wp = &src.waypoints;
            if wp.is_empty() {
                return Err(Error::invalid(
                    "scene manifest",
                    format!("{}: no waypoints", src.participant_id),
                ));
            }
            if wp.windows(2).any(|w| !(w[1].time_s > w[0].time_s)) {
                return Err(Error::invalid(
                    "scene manifest",
                    format!("{}: waypoint times must increase", src.participant_id),
                ));
            }
            if wp.iter().any(|w| !(w.distance_m > 0.0)) {
                return Err(Error::invalid(
                    "scene manifest",
                    format!("{}: distance must be positive", src.participant_id),
                ));
            }
            if src.participant_id == self.wearer_id {
                return Err(Error::invalid(
                    "scene manifest",
                    "source id equals wearer id",
                ));
            }
        }
        if self
            .interferer
            .as_ref()
            .is_some_and(|i| i.participant_id == self.target.participant_id)
        {
            return Err(Error::invalid(
                "scene manifest",
                "target and interferer share an id",
            ));
        }
        Ok(())
    }
}

/// In-memory result of rendering a manifest.
pub struct SimulatedScene {
    pub render: SceneRender,
    pub atf: AtfSet,
    pub poses: Vec<PoseTrack>,
    pub va: BTreeMap<String, VaSegments>,
}

fn source_signal(
    src: &SourceManifest,
    m: &SceneManifest,
    seeds: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, Vec<(f64, f64)>)> {
    let activity_seed: u64 = seeds.random();
    let signal_seed: u64 = seeds.random();
    let len = (m.duration_s * m.sample_rate).round() as usize;
    let activity = src
        .activity
        .clone()
        .unwrap_or_else(|| random_activity(m.duration_s, activity_seed));
    let signal = match &src.audio_path {
        Some(p) => {
            let a = read_wav(p)?;
            if (a.sample_rate as f64 - m.sample_rate).abs() > 1e-6 {
                return Err(Error::invalid(
                    "source audio",
                    format!("{} is {} Hz", p.display(), a.sample_rate),
                ));
            }
            let mut x = a.channel(0);
            x.resize(len, 0.0);
            x
        }
        None => speech_shaped_source(m.duration_s, m.sample_rate, &activity, signal_seed),
    };
    Ok((signal, activity))
}

fn pose_track(src: &SourceManifest) -> Result<PoseTrack> {
    let samples = src
        .waypoints
        .iter()
        .map(|w| Pose::identity(w.time_s, w.position()))
        .collect();
    PoseTrack::new(src.participant_id.clone(), samples)
}

/// Renders a manifest deterministically.
pub fn render_manifest(m: &SceneManifest) -> Result<SimulatedScene> {
    m.validate()?;
    let stft = StftConfig::sqrt_hann(m.frame_len, m.hop, m.sample_rate)?;
    let mut seeds = ChaCha8Rng::seed_from_u64(m.seed);
    let noise_seed: u64 = seeds.random();
    let (target_sig, target_act) = source_signal(&m.target, m, &mut seeds)?;
    let target_track: Vec<(f64, Direction)> = m
        .target
        .waypoints
        .iter()
        .map(|w| (w.time_s, w.direction()))
        .collect();
    let interferer = match &m.interferer {
        Some(src) => {
            let (sig, act) = source_signal(src, m, &mut seeds)?;
            let track: Vec<(f64, Direction)> = src
                .waypoints
                .iter()
                .map(|w| (w.time_s, w.direction()))
                .collect();
            Some((src, sig, act, track))
        }
        None => None,
    };
    let params = SceneParams {
        snr_db_target_to_noise: m.snr_db,
        snr_db_target_to_interferer: m.interferer_snr_db,
        noise: NoiseSpec {
            n_plane_waves: m.n_plane_waves,
            seed: noise_seed,
        },
        speed_of_sound: m.speed_of_sound,
    };
    let interferer_spec = interferer.as_ref().map(|(_, sig, _, track)| SourceSpec {
        signal: sig,
        direction_track: track,
    });
    let render = build_scene(
        &SourceSpec {
            signal: &target_sig,
            direction_track: &target_track,
        },
        interferer_spec.as_ref(),
        &m.geometry,
        &params,
        &stft,
    )?;
    let atf = free_field_atf_set(
        &m.geometry,
        m.n_directions,
        stft.n_bins(),
        m.sample_rate,
        m.speed_of_sound,
    )?;
    let mut poses = vec![
        PoseTrack::new(m.wearer_id.clone(), vec![Pose::identity(0.0, [0.0; 3])])?,
        pose_track(&m.target)?,
    ];
    let mut va = BTreeMap::new();
    va.insert(
        m.target.participant_id.clone(),
        VaSegments::new(&m.target.participant_id, target_act)?,
    );
    va.insert(m.wearer_id.clone(), VaSegments::empty(&m.wearer_id));
    if let Some((src, _, act, _)) = interferer {
        poses.push(pose_track(src)?);
        va.insert(
            src.participant_id.clone(),
            VaSegments::new(&src.participant_id, act)?,
        );
    }
    Ok(SimulatedScene {
        render,
        atf,
        poses,
        va,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateReport {
    pub out_dir: PathBuf,
    pub files: Vec<String>,
    pub channel0_snr_db: f64,
}

/// Renders a manifest and writes `mixture.wav`, one WAV per stem,
/// `atf.bin`, `poses.csv`, `va.json` and `manifest.json` into `out_dir`.
pub fn simulate(m: &SceneManifest, out_dir: &Path) -> Result<SimulateReport> {
    let scene = render_manifest(m)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let fs = m.sample_rate.round() as u32;
    let mut files = vec!["mixture.wav".to_string()];
    write_wav(out_dir.join("mixture.wav"), fs, scene.render.mixture.view())?;
    for (name, stem) in &scene.render.stems {
        let file = format!("{name}.wav");
        write_wav(out_dir.join(&file), fs, stem.view())?;
        files.push(file);
    }
    scene.atf.write(out_dir.join("atf.bin"))?;
    write_pose_csv(
        out_dir.join("poses.csv"),
        &scene.poses.iter().collect::<Vec<_>>(),
    )?;
    let va = va_to_json(&scene.va);
    write_atomically(&out_dir.join("va.json"), |w| w.write_all(va.as_bytes()))?;
    write_json(&out_dir.join("manifest.json"), m)?;
    files.extend(["atf.bin", "poses.csv", "va.json", "manifest.json"].map(String::from));
    let e = |name: &str| {
        scene.render.stems[name]
            .row(0)
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
    };
    Ok(SimulateReport {
        out_dir: out_dir.to_path_buf(),
        files,
        channel0_snr_db: 10.0 * (e("target") / e("noise")).log10(),
    })
}

/// Detections in, labeled tracks out.
pub fn track(
    detections: &Path,
    face_boxes: Option<&Path>,
    motions: Option<&Path>,
    config: &TrackerConfig,
) -> Result<Vec<LabeledTrack>> {
    config.validate()?;
    let name = |p: &Path| p.display().to_string();
    let dets = read_detections(open(detections)?, &name(detections))?;
    let faces = match face_boxes {
        Some(p) => read_face_boxes(open(p)?, &name(p))?,
        None => BTreeMap::new(),
    };
    let motions = match motions {
        Some(p) => read_motions(open(p)?, &name(p))?,
        None => BTreeMap::new(),
    };
    let trajectories = track_all(&dets, &motions, *config)?;
    Ok(finalize(&trajectories, &faces, config))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtfInfo {
    pub sample_rate: f64,
    pub n_channels: usize,
    pub n_bins: usize,
    pub n_directions: usize,
    pub min_inclination_deg: f64,
    pub max_inclination_deg: f64,
    /// Largest angle from any direction in a dense probe set to the grid.
    pub max_grid_gap_deg: f64,
    pub max_abs_response: f64,
}

pub fn atf_info(set: &AtfSet) -> AtfInfo {
    let incl = set
        .directions()
        .iter()
        .map(|d| d.inclination_rad.to_degrees());
    let probes = crate::simscene::fibonacci_directions(4 * set.n_directions().max(500));
    let gap = probes
        .iter()
        .map(|q| q.angle_to(&set.directions()[set.nearest_direction(q)]))
        .fold(0.0, f64::max);
    AtfInfo {
        sample_rate: set.sample_rate(),
        n_channels: set.n_channels(),
        n_bins: set.n_bins(),
        n_directions: set.n_directions(),
        min_inclination_deg: incl.clone().fold(f64::INFINITY, f64::min),
        max_inclination_deg: incl.fold(f64::NEG_INFINITY, f64::max),
        max_grid_gap_deg: gap.to_degrees(),
        max_abs_response: set.responses().iter().map(|v| v.norm()).fold(0.0, f64::max),
    }
}

/// Human-readable JSON form of an ATF set. `responses[d][b][c] = [re, im]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtfJson {
    pub sample_rate: f64,
    pub directions: Vec<Direction>,
    pub responses: Vec<Vec<Vec<[f64; 2]>>>,
}

impl AtfJson {
    pub fn from_set(set: &AtfSet) -> Self {
        let r = set.responses();
        let (nd, nb, nc) = r.dim();
        Self {
            sample_rate: set.sample_rate(),
            directions: set.directions().to_vec(),
            responses: (0..nd)
                .map(|d| {
                    (0..nb)
                        .map(|b| {
                            (0..nc)
                                .map(|c| [r[[d, b, c]].re, r[[d, b, c]].im])
                                .collect()
                        })
                        .collect()
                })
                .collect(),
        }
    }

    pub fn into_set(self) -> Result<AtfSet> {
        let nd = self.responses.len();
        let nb = self.responses.first().map_or(0, Vec::len);
        let nc = self
            .responses
            .first()
            .and_then(|b| b.first())
            .map_or(0, Vec::len);
        let mut arr = Array3::zeros((nd, nb, nc));
        for (d, bins) in self.responses.iter().enumerate() {
            if bins.len() != nb {
                return Err(Error::dim("ATF JSON bins", nb, bins.len()));
            }
            for (b, chans) in bins.iter().enumerate() {
                if chans.len() != nc {
                    return Err(Error::dim("ATF JSON channels", nc, chans.len()));
                }
                for (c, v) in chans.iter().enumerate() {
                    arr[[d, b, c]] = Complex64::new(v[0], v[1]);
                }
            }
        }
        AtfSet::new(self.sample_rate, self.directions, arr)
    }
}

fn is_json(p: &Path) -> bool {
    p.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// Reads an ATF set from the binary format or, for `.json`, the JSON form.
pub fn load_atf_any(path: &Path) -> Result<AtfSet> {
    if is_json(path) {
        read_json::<AtfJson>(path)?.into_set()
    } else {
        AtfSet::load(path)
    }
}

/// Converts between the binary and JSON forms, chosen by file extension.
pub fn atf_convert(input: &Path, output: &Path) -> Result<AtfInfo> {
    let set = load_atf_any(input)?;
    if is_json(output) {
        write_json(output, &AtfJson::from_set(&set))?;
    } else {
        set.write(output)?;
    }
    Ok(atf_info(&set))
}

/// Steered directions whose indices differ between adjacent frames.
pub fn direction_changes(schedule: &[usize]) -> BTreeSet<usize> {
    schedule
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[0] != w[1])
        .map(|(t, _)| t + 1)
        .collect()
}

/// Reads a multichannel WAV into `[channel][sample]`.
pub fn read_samples(path: &Path) -> Result<(u32, Array2<f64>)> {
    let a = read_wav(path)?;
    Ok((a.sample_rate, a.samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_manifest(seed: u64, interferer: bool) -> SceneManifest {
        let mut m: SceneManifest = serde_json::from_value(serde_json::json!({
            "sample_rate": 16000.0,
            "duration_s": 2.0,
            "seed": seed,
            "frame_len": 512,
            "hop": 256,
            "n_directions": 200,
            "n_plane_waves": 64,
            "snr_db": 0.0,
            "target": {"participant_id": "p1", "waypoints": [{"time_s": 0.0, "azimuth_deg": 10.0, "inclination_deg": 90.0}]}
        }))
        .unwrap();
        if interferer {
            m.interferer = Some(SourceManifest {
                participant_id: "p2".into(),
                waypoints: vec![Waypoint {
                    time_s: 0.0,
                    azimuth_deg: 100.0,
                    inclination_deg: 90.0,
                    distance_m: 2.0,
                }],
                activity: None,
                audio_path: None,
            });
        }
        m
    }

    #[test]
    fn atomic_write_leaves_nothing_on_failure() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        let err = write_atomically(&p, |w| {
            w.write_all(b"partial")?;
            Err(std::io::Error::other("boom"))
        });
        assert!(err.is_err());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
        write_atomically(&p, |w| w.write_all(b"ok")).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"ok");
    }

    #[test]
    fn config_defaults_and_resolution() {
        let cfg = PipelineConfig::default();
        assert_eq!(
            (cfg.frame_len, cfg.hop, cfg.loading, cfg.ref_channel),
            (1024, 512, 1e-3, 0)
        );
        let cfg: PipelineConfig =
            serde_json::from_str(r#"{"data_root": "/data", "input_path": "a.wav"}"#).unwrap();
        assert_eq!(
            cfg.resolve(Path::new("a.wav")),
            PathBuf::from("/data/a.wav")
        );
        assert_eq!(
            cfg.resolve(Path::new("/x/a.wav")),
            PathBuf::from("/x/a.wav")
        );
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"bogus": 1}"#).is_err());
        let bad = PipelineConfig {
            loading: -1.0,
            ..PipelineConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn simulate_is_deterministic_and_omits_missing_interferer() {
        let dir = tempfile::tempdir().unwrap();
        let m = small_manifest(7, false);
        let a = simulate(&m, &dir.path().join("a")).unwrap();
        simulate(&m, &dir.path().join("b")).unwrap();
        assert!(!a.files.iter().any(|f| f == "interferer.wav"));
        assert!(a.channel0_snr_db.abs() < 0.1);
        for f in &a.files {
            let x = std::fs::read(dir.path().join("a").join(f)).unwrap();
            let y = std::fs::read(dir.path().join("b").join(f)).unwrap();
            assert!(x == y, "{f} differs");
        }
        let with = simulate(&small_manifest(7, true), &dir.path().join("c")).unwrap();
        assert!(with.files.iter().any(|f| f == "interferer.wav"));
    }

    #[test]
    fn bypass_and_cache_transparency() {
        let dir = tempfile::tempdir().unwrap();
        let scene_dir = dir.path().join("scene");
        simulate(&small_manifest(3, true), &scene_dir).unwrap();
        let mut cfg = PipelineConfig {
            data_root: Some(scene_dir.clone()),
            atf_path: Some("atf.bin".into()),
            frame_len: 512,
            hop: 256,
            target_id: Some("p1".into()),
            wearer_id: Some("wearer".into()),
            pose_path: Some("poses.csv".into()),
            input_path: Some("mixture.wav".into()),
            output_path: Some(dir.path().join("bypass.wav")),
            bypass: true,
            ..PipelineConfig::default()
        };
        enhance(&cfg).unwrap();
        let (_, mix) = read_samples(&scene_dir.join("mixture.wav")).unwrap();
        let (_, out) = read_samples(&dir.path().join("bypass.wav")).unwrap();
        let interior = 512..mix.dim().1 - 512;
        for n in interior {
            assert!((out[[0, n]] - mix[[0, n]]).abs() < 1e-5, "sample {n}");
        }

        cfg.bypass = false;
        cfg.output_path = Some(dir.path().join("enh.wav"));
        let report = enhance(&cfg).unwrap();
        assert_eq!(report.direction_indices.len(), report.n_frames);
        assert!(report
            .direction_indices
            .iter()
            .all(|&k| k == report.direction_indices[0]));
        assert_eq!(report.weight_computations, 1);

        let atf = AtfSet::load(scene_dir.join("atf.bin")).unwrap();
        let stft = StftConfig::sqrt_hann(512, 256, 16_000.0).unwrap();
        let cached = beamform_scheduled(
            &atf,
            mix.view(),
            &stft,
            1e-3,
            0,
            &report.direction_indices,
            true,
        )
        .unwrap();
        let fresh = beamform_scheduled(
            &atf,
            mix.view(),
            &stft,
            1e-3,
            0,
            &report.direction_indices,
            false,
        )
        .unwrap();
        assert_eq!(cached.0, fresh.0);
        assert_eq!(fresh.1, report.n_frames);

        // same run twice gives the same file
        cfg.output_path = Some(dir.path().join("enh2.wav"));
        enhance(&cfg).unwrap();
        assert_eq!(
            std::fs::read(dir.path().join("enh.wav")).unwrap(),
            std::fs::read(dir.path().join("enh2.wav")).unwrap()
        );
    }

    #[test]
    fn enhance_errors_write_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let scene_dir = dir.path().join("scene");
        simulate(&small_manifest(5, false), &scene_dir).unwrap();
        let out = dir.path().join("out.wav");
        let base = PipelineConfig {
            data_root: Some(scene_dir.clone()),
            atf_path: Some("atf.bin".into()),
            frame_len: 512,
            hop: 256,
            target_id: Some("p1".into()),
            wearer_id: Some("wearer".into()),
            pose_path: Some("missing.csv".into()),
            input_path: Some("mixture.wav".into()),
            output_path: Some(out.clone()),
            ..PipelineConfig::default()
        };
        assert!(matches!(enhance(&base), Err(Error::Io { .. })));
        let mono = PipelineConfig {
            input_path: Some("target.wav".into()),
            pose_path: Some("poses.csv".into()),
            ..base.clone()
        };
        assert!(enhance(&mono).is_ok());
        std::fs::remove_file(&out).unwrap();
        // a one-channel file against the six-channel set
        write_mono(dir.path().join("one.wav"), 16_000, &[0.0; 4096]).unwrap();
        let wrong = PipelineConfig {
            input_path: Some(dir.path().join("one.wav")),
            pose_path: Some("poses.csv".into()),
            ..base.clone()
        };
        assert!(matches!(enhance(&wrong), Err(Error::Dimension { .. })));
        // target pose starting after the first frame center
        let late = PoseTrack::new("p1", vec![Pose::identity(0.5, [1.0, 0.0, 0.0])]).unwrap();
        let wearer = PoseTrack::new("wearer", vec![Pose::identity(0.0, [0.0; 3])]).unwrap();
        write_pose_csv(dir.path().join("late.csv"), &[&late, &wearer]).unwrap();
        let gap = PipelineConfig {
            pose_path: Some(dir.path().join("late.csv")),
            ..base
        };
        assert!(matches!(enhance(&gap), Err(Error::NoPoseYet { .. })));
        assert!(!out.exists());
    }

    #[test]
    fn evaluate_identity_rows_and_undefined_markers() {
        let dir = tempfile::tempdir().unwrap();
        let scene_dir = dir.path().join("scene");
        simulate(&small_manifest(11, true), &scene_dir).unwrap();
        let mix = read_wav(scene_dir.join("mixture.wav")).unwrap();
        write_mono(dir.path().join("ch0.wav"), 16_000, &mix.channel(0)).unwrap();
        let mut args = EvaluateArgs {
            enhanced: dir.path().join("ch0.wav"),
            reference: scene_dir.join("target.wav"),
            reference_channel: 0,
            mixture: scene_dir.join("mixture.wav"),
            ref_channel: 0,
            va_path: scene_dir.join("va.json"),
            target_id: "p1".into(),
            wearer_id: "wearer".into(),
            case: TestCase::NoiseAndInterferer,
            coarse_offset: 0,
            max_lag: 400,
        };
        let r = evaluate(&args).unwrap();
        assert_eq!(r.alignment_shift, 0);
        assert_eq!(r.enhanced, r.reference_mic);
        assert!(r.enhanced.snr_db.is_some());

        // target fully overlapped by the other talker
        let va = r#"[{"participant_id":"p1","start_s":0.1,"end_s":1.5},
                     {"participant_id":"p2","start_s":0.0,"end_s":2.0}]"#;
        std::fs::write(dir.path().join("va.json"), va).unwrap();
        args.va_path = dir.path().join("va.json");
        args.case = TestCase::Noise;
        let r = evaluate(&args).unwrap();
        assert!(r.selected_segments.is_empty());
        assert_eq!(r.enhanced.snr_db, None);
        assert_eq!(r.enhanced.seg_snr_db, None);
        assert_eq!(r.enhanced.si_sdr_db, None);
        assert_eq!(r.enhanced.undefined.len(), 3);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["enhanced"]["snr_db"].is_null());
    }

    #[test]
    fn atf_json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let g = ArrayGeometry::new(vec![[0.0, 0.05, 0.0], [0.0, -0.05, 0.0]]).unwrap();
        let set = free_field_atf_set(&g, 12, 5, 16_000.0, 343.0).unwrap();
        set.write(dir.path().join("a.bin")).unwrap();
        let info = atf_convert(&dir.path().join("a.bin"), &dir.path().join("a.json")).unwrap();
        assert_eq!(
            (info.n_channels, info.n_bins, info.n_directions),
            (2, 5, 12)
        );
        atf_convert(&dir.path().join("a.json"), &dir.path().join("b.bin")).unwrap();
        assert_eq!(
            std::fs::read(dir.path().join("a.bin")).unwrap(),
            std::fs::read(dir.path().join("b.bin")).unwrap()
        );
    }

    #[test]
    fn direction_change_frames() {
        assert_eq!(
            direction_changes(&[1, 1, 2, 2, 2, 5]),
            BTreeSet::from([2, 5])
        );
        assert!(direction_changes(&[3]).is_empty());
    }
}
