use convfocus::harness::{
    evaluate, read_samples, simulate, EvaluateArgs, SceneManifest, SourceManifest, Waypoint,
};
use convfocus::metrics::TestCase;
use convfocus::simscene::{diffuse_noise, ArrayGeometry};
use realfft::RealFftPlanner;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        x.sin() / x
    }
}

// Band-averaged cross spectrum of a long two-channel take against the
// closed-form diffuse-field coherence.
#[test]
fn diffuse_noise_coherence_follows_sinc() {
    let fs = 16_000.0;
    let d = 0.17;
    let c = 343.0;
    let geom = ArrayGeometry::new(vec![[0.0, 0.0, 0.0], [d, 0.0, 0.0]]).unwrap();
    let x = diffuse_noise(&geom, 30.0, fs, 1024, 11, c).unwrap();
    let n = x.ncols();
    let fft = RealFftPlanner::<f64>::new().plan_fft_forward(n);
    let spec = |ch: usize| {
        let mut buf = x.row(ch).to_vec();
        let mut out = fft.make_output_vec();
        fft.process(&mut buf, &mut out).unwrap();
        out
    };
    let (a, b) = (spec(0), spec(1));
    let band = 8000;
    let hz_per_bin = fs / n as f64;
    let mut worst: f64 = 0.0;
    let mut k0 = 1;
    while (k0 + band) as f64 * hz_per_bin <= 8000.0 {
        let (mut sab, mut saa, mut sbb, mut expect) = (0.0, 0.0, 0.0, 0.0);
        for k in k0..k0 + band {
            sab += (a[k] * b[k].conj()).re;
            saa += a[k].norm_sqr();
            sbb += b[k].norm_sqr();
            expect += sinc(2.0 * std::f64::consts::PI * k as f64 * hz_per_bin * d / c);
        }
        let got = sab / (saa * sbb).sqrt();
        worst = worst.max((got - expect / band as f64).abs());
        k0 += band;
    }
    assert!(worst < 0.05, "coherence deviation {worst}");
}

#[test]
fn evaluate_matches_stem_energies() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = SceneManifest {
        sample_rate: 16_000.0,
        duration_s: 6.0,
        seed: 5,
        geometry: ArrayGeometry::glasses(),
        frame_len: 512,
        hop: 256,
        n_directions: 162,
        n_plane_waves: 128,
        snr_db: 3.0,
        interferer_snr_db: 0.0,
        speed_of_sound: 343.0,
        wearer_id: "wearer".into(),
        target: SourceManifest {
            participant_id: "talker".into(),
            waypoints: vec![Waypoint {
                time_s: 0.0,
                azimuth_deg: 30.0,
                inclination_deg: 90.0,
                distance_m: 1.5,
            }],
            activity: Some(vec![(0.5, 2.5), (3.0, 5.5)]),
            audio_path: None,
        },
        interferer: None,
    };
    let rep = simulate(&manifest, dir.path()).unwrap();
    assert!(
        (rep.channel0_snr_db - 3.0).abs() < 0.1,
        "{}",
        rep.channel0_snr_db
    );

    let p = |f: &str| dir.path().join(f);
    let eval = evaluate(&EvaluateArgs {
        enhanced: p("mixture.wav"),
        reference: p("target.wav"),
        reference_channel: 0,
        mixture: p("mixture.wav"),
        ref_channel: 0,
        va_path: p("va.json"),
        target_id: "talker".into(),
        wearer_id: "wearer".into(),
        case: TestCase::Noise,
        coarse_offset: 0,
        max_lag: 400,
    })
    .unwrap();
    assert_eq!(eval.alignment_shift, 0);
    assert!((eval.selected_duration_s - 4.5).abs() < 1e-9);

    // independent oracle: stem energies over the active samples
    let (_, mix) = read_samples(&p("mixture.wav")).unwrap();
    let (_, tgt) = read_samples(&p("target.wav")).unwrap();
    let (mut s, mut r) = (0.0, 0.0);
    for &(a, b) in &[(0.5, 2.5), (3.0, 5.5)] {
        for i in (a * 16_000.0) as usize..(b * 16_000.0) as usize {
            s += tgt[[0, i]] * tgt[[0, i]];
            r += (mix[[0, i]] - tgt[[0, i]]).powi(2);
        }
    }
    let oracle = 10.0 * (s / r).log10();
    let got = eval.reference_mic.snr_db.unwrap();
    assert!((got - oracle).abs() < 0.1, "{got} vs {oracle}");
    // target energy sits in 4.5 of 6 s while noise is stationary
    let expect = 3.0 + 10.0 * (6.0f64 / 4.5).log10();
    assert!((got - expect).abs() < 0.3, "{got} vs {expect}");
    assert_eq!(eval.enhanced, eval.reference_mic);
}
