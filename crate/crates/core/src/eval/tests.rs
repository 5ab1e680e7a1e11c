use std::f64::consts::PI;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::signal::wav::write_wav;
use crate::signal::{MEL_BINS, SAMPLE_RATE};
use crate::testutil::fixture;
use crate::training::{Checkpoint, TrainConfig};

/// Harmonic tone following `contour(t)` Hz, phase-accumulated.
fn contour_tone(secs: f64, gain: f64, contour: impl Fn(f64) -> f64) -> Waveform {
    let n = (secs * SAMPLE_RATE as f64) as usize;
    let mut phase = 0.0;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            phase += 2.0 * PI * contour(t) / SAMPLE_RATE as f64;
            gain * (phase.sin() + 0.5 * (2.0 * phase).sin() + 0.25 * (3.0 * phase).sin())
        })
        .collect();
    Waveform::new(samples, SAMPLE_RATE).unwrap()
}

fn wobble(t: f64) -> f64 {
    180.0 + 40.0 * (2.0 * PI * 1.5 * t).sin()
}

fn random_mel(frames: usize, seed: u64) -> MelSpectrogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MelSpectrogram::new(Array2::from_shape_fn((frames, MEL_BINS), |_| {
        rng.random_range(-10.0..0.0)
    }))
    .unwrap()
}

#[test]
fn f0_pcc_self_and_shifted() {
    let src = contour_tone(1.0, 0.3, wobble);
    assert_eq!(f0_pcc(&src, &src).unwrap(), 1.0);
    let shifted = contour_tone(1.0, 0.3, |t| wobble(t) + 20.0);
    let r = f0_pcc(&src, &shifted).unwrap();
    assert!((r - 1.0).abs() <= 0.05, "{r}");
}

#[test]
fn f0_pcc_rising_vs_falling() {
    let up = contour_tone(1.0, 0.3, |t| 150.0 + 100.0 * t);
    let down = contour_tone(1.0, 0.3, |t| 250.0 - 100.0 * t);
    let r = f0_pcc(&up, &down).unwrap();
    assert!((r + 1.0).abs() <= 0.05, "{r}");
}

#[test]
fn f0_pcc_undefined_cases() {
    let silence = Waveform::new(vec![0.0; 16_000], SAMPLE_RATE).unwrap();
    let tone = contour_tone(1.0, 0.3, wobble);
    assert!(matches!(f0_pcc(&silence, &tone), Err(Error::UndefinedMetric(_))));
    let flat = contour_tone(1.0, 0.3, |_| 200.0);
    // a steady tone can still wobble by a fraction of a hertz in the estimate,
    // so only check that the call does not panic and stays in range
    if let Ok(r) = f0_pcc(&flat, &flat) {
        assert!((-1.0..=1.0).contains(&r));
    }
}

#[test]
fn ssim_self_is_exactly_one() {
    let a = random_mel(30, 1);
    assert_eq!(ssim_mel(&a, &a).unwrap(), 1.0);
}

#[test]
fn ssim_constant_images_match_closed_form() {
    let (x, d) = (-4.0, 3.0);
    let a = MelSpectrogram::new(Array2::from_elem((20, MEL_BINS), x)).unwrap();
    let b = MelSpectrogram::new(Array2::from_elem((20, MEL_BINS), x + d)).unwrap();
    // joint range is d; variances and covariance vanish so only luminance remains
    let c1 = (0.01 * d) * (0.01 * d);
    let expected = (2.0 * x * (x + d) + c1) / (x * x + (x + d) * (x + d) + c1);
    let got = ssim_mel(&a, &b).unwrap();
    assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
}

#[test]
fn ssim_of_independent_noise_is_small() {
    for seed in 0..100 {
        let a = random_mel(24, 2 * seed);
        let b = random_mel(24, 2 * seed + 1);
        let v = ssim_mel(&a, &b).unwrap();
        assert!(v.abs() < 0.1, "seed {seed}: {v}");
    }
}

#[test]
fn ssim_crops_to_common_frames_and_handles_short_inputs() {
    let a = random_mel(12, 3);
    let b = MelSpectrogram::new(a.values.slice(ndarray::s![..9, ..]).to_owned()).unwrap();
    assert_eq!(ssim_mel(&a, &b).unwrap(), 1.0);
    let short = random_mel(3, 4);
    assert_eq!(ssim_mel(&short, &short).unwrap(), 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ssim_symmetric_and_affine_invariant(seed in 0u64..1000, k in 0.2f64..5.0, c in -5.0f64..5.0) {
        let a = random_mel(10, seed);
        let b = random_mel(10, seed + 7777);
        let ab = ssim_mel(&a, &b).unwrap();
        prop_assert!((ab - ssim_mel(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(ab <= 1.0);
        let t = |m: &MelSpectrogram| MelSpectrogram::new(m.values.mapv(|v| k * v + c)).unwrap();
        // luminance terms depend on absolute level, so compare zero-offset scaling
        let scaled = ssim_mel(&MelSpectrogram::new(a.values.mapv(|v| k * v)).unwrap(),
            &MelSpectrogram::new(b.values.mapv(|v| k * v)).unwrap()).unwrap();
        prop_assert!((scaled - ab).abs() < 1e-9, "{} vs {}", scaled, ab);
        prop_assert!(ssim_mel(&t(&a), &t(&a)).unwrap() == 1.0);
    }
}

fn gaussian_set(m: usize, mean: &[f64], scale: &[f64], seed: u64) -> EmbeddingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = mean.len();
    let v = Array2::from_shape_fn((m, d), |(_, j)| {
        let z: f64 = StandardNormal.sample(&mut rng);
        mean[j] + scale[j] * z
    });
    EmbeddingSet::new(v, format!("g{seed}"))
}

#[test]
fn frechet_identical_sets_is_zero() {
    let a = gaussian_set(200, &[0.0, 1.0, -2.0], &[1.0, 0.5, 2.0], 1);
    assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
}

#[test]
fn frechet_one_dimensional_shift() {
    let a = gaussian_set(100_000, &[0.0], &[1.0], 2);
    let b = gaussian_set(100_000, &[1.0], &[1.0], 3);
    let d = frechet_distance(&a, &b).unwrap();
    assert!((d - 1.0).abs() <= 0.02, "{d}");
}

/// Independent route: Tr (Σa Σb)^½ as the sum of square roots of the
/// (real, non-negative) eigenvalues of the non-symmetric product.
fn frechet_oracle(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let moments = |x: &Array2<f64>| {
        let m = x.nrows() as f64;
        let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
        let c = x - &mean;
        let mut cov = c.t().dot(&c) / (m - 1.0);
        for j in 0..cov.nrows() {
            cov[[j, j]] += FRECHET_RIDGE;
        }
        (mean, cov)
    };
    let (ma, ca) = moments(a);
    let (mb, cb) = moments(b);
    let prod = ca.dot(&cb);
    let d = prod.nrows();
    let pm = DMatrix::from_fn(d, d, |i, j| prod[[i, j]]);
    let tr_sqrt: f64 = pm.complex_eigenvalues().iter().map(|z| z.re.max(0.0).sqrt()).sum();
    let dm = &ma - &mb;
    dm.dot(&dm) + ca.diag().sum() + cb.diag().sum() - 2.0 * tr_sqrt
}

#[test]
fn frechet_matches_eigenvalue_oracle_in_3d() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        // correlated data: mix independent normals through a random matrix
        let mix = |rng: &mut ChaCha8Rng| Array2::from_shape_fn((3, 3), |_| rng.random_range(-1.0..1.0));
        let (ma, mb) = (mix(&mut rng), mix(&mut rng));
        let raw = |rng: &mut ChaCha8Rng, n| {
            Array2::from_shape_fn((n, 3), |_| {
                let z: f64 = StandardNormal.sample(rng);
                z
            })
        };
        let a = raw(&mut rng, 50).dot(&ma);
        let b = raw(&mut rng, 60).dot(&mb) + 0.5;
        let got = frechet_distance(&EmbeddingSet::new(a.clone(), "a"), &EmbeddingSet::new(b.clone(), "b")).unwrap();
        let want = frechet_oracle(&a, &b);
        assert!((got - want).abs() < 1e-8, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn frechet_rejects_small_or_mismatched_sets() {
    let a = gaussian_set(3, &[0.0, 0.0, 0.0], &[1.0; 3], 4);
    let b = gaussian_set(10, &[0.0, 0.0, 0.0], &[1.0; 3], 5);
    assert!(matches!(frechet_distance(&a, &b), Err(Error::Input(_))));
    let c = gaussian_set(10, &[0.0, 0.0], &[1.0; 2], 6);
    assert!(matches!(frechet_distance(&b, &c), Err(Error::Input(_))));
    let mut nan = b.clone();
    nan.vectors[[0, 0]] = f64::NAN;
    assert!(matches!(frechet_distance(&nan, &b), Err(Error::Numeric(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn frechet_symmetric_nonnegative(s1 in 0u64..10_000, s2 in 0u64..10_000, shift in -2.0f64..2.0) {
        let a = gaussian_set(20, &[0.0, 0.0], &[1.0, 2.0], s1);
        let b = gaussian_set(25, &[shift, 0.0], &[0.5, 1.0], s2.wrapping_add(50_000));
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-9 * (1.0 + ab));
    }
}

#[test]
fn edit_distance_examples() {
    assert_eq!(word_error_rate("a b c", "a b c").unwrap(), 0.0);
    assert_eq!(word_error_rate("a b c", "a x c").unwrap(), 1.0 / 3.0);
    assert_eq!(word_error_rate("a b c", "").unwrap(), 1.0);
    assert_eq!(char_error_rate("abcd", "abd").unwrap(), 0.25);
    assert!(matches!(word_error_rate("", "a"), Err(Error::Input(_))));
}

fn naive_levenshtein(a: &[u8], b: &[u8]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ar)), Some((y, br))) => {
            let sub = naive_levenshtein(ar, br) + usize::from(x != y);
            sub.min(naive_levenshtein(ar, b) + 1).min(naive_levenshtein(a, br) + 1)
        }
    }
}

proptest! {
    #[test]
    fn edit_distance_matches_recursive_definition(
        r in proptest::collection::vec(0u8..4, 1..7),
        h in proptest::collection::vec(0u8..4, 0..7),
    ) {
        let rate = edit_distance_rate(&r, &h).unwrap();
        prop_assert_eq!(rate, naive_levenshtein(&r, &h) as f64 / r.len() as f64);
        prop_assert_eq!(edit_distance_rate(&r, &r).unwrap(), 0.0);
    }
}

fn trials(src: &[Waveform], conv: &[Waveform], factor: PromptFactor) -> Vec<PromptTrial> {
    src.iter()
        .zip(conv)
        .map(|(s, c)| PromptTrial {
            source: s.clone(),
            converted: c.clone(),
            factor,
        })
        .collect()
}

#[test]
fn prompt_accuracy_unchanged_is_zero() {
    let src: Vec<Waveform> = (0..4)
        .map(|k| contour_tone(0.6, 0.2, move |t| 150.0 + 20.0 * k as f64 + 10.0 * t))
        .collect();
    for f in PromptFactor::ALL {
        let acc = prompt_accuracy(&trials(&src, &src, f)).unwrap();
        assert_eq!(acc.percent, 0.0, "{f:?}");
        assert_eq!(acc.counted, 4);
    }
}

#[test]
fn prompt_accuracy_constructed_shifts() {
    let base = |k: usize| move |t: f64| 140.0 + 15.0 * k as f64 + 20.0 * (3.0 * t).sin();
    let src: Vec<Waveform> = (0..5).map(|k| contour_tone(0.6, 0.2, base(k))).collect();
    let up: Vec<Waveform> = (0..5)
        .map(|k| contour_tone(0.6, 0.2, move |t| 1.2 * base(k)(t)))
        .collect();
    let hp = prompt_accuracy(&trials(&src, &up, PromptFactor::HigherPitch)).unwrap();
    assert_eq!((hp.percent, hp.counted, hp.excluded), (100.0, 5, 0));
    assert_eq!(
        prompt_accuracy(&trials(&src, &up, PromptFactor::LowerPitch))
            .unwrap()
            .percent,
        0.0
    );
    let loud: Vec<Waveform> = src.iter().map(|w| w.scaled(2.0)).collect();
    assert_eq!(
        prompt_accuracy(&trials(&src, &loud, PromptFactor::HigherVolume))
            .unwrap()
            .percent,
        100.0
    );
    assert_eq!(
        prompt_accuracy(&trials(&loud, &src, PromptFactor::LowerVolume))
            .unwrap()
            .percent,
        100.0
    );
}

#[test]
fn prompt_accuracy_excludes_unvoiced_pitch_trials() {
    let tone = contour_tone(0.6, 0.2, |_| 180.0);
    let silence = Waveform::new(vec![0.0; 9600], SAMPLE_RATE).unwrap();
    let t = vec![
        PromptTrial {
            source: silence.clone(),
            converted: tone.clone(),
            factor: PromptFactor::HigherPitch,
        },
        PromptTrial {
            source: tone.clone(),
            converted: tone.scaled(0.5),
            factor: PromptFactor::LowerVolume,
        },
    ];
    let acc = prompt_accuracy(&t).unwrap();
    assert_eq!((acc.percent, acc.counted, acc.excluded), (100.0, 1, 1));
    assert!(matches!(prompt_accuracy(&[]), Err(Error::Input(_))));
}

#[test]
fn factor_names_round_trip() {
    for f in PromptFactor::ALL {
        assert_eq!(f.name().parse::<PromptFactor>().unwrap(), f);
    }
    assert!("sideways".parse::<PromptFactor>().is_err());
}

#[test]
fn embedding_cosine_cases() {
    let g = Array1::from(vec![0.3, -1.0, 2.0]);
    assert!((embedding_cosine(g.view(), g.view()).unwrap() - 1.0).abs() < 1e-15);
    let x = Array1::from(vec![1.0, 0.0, 0.0]);
    let y = Array1::from(vec![0.0, 5.0, 0.0]);
    assert_eq!(embedding_cosine(x.view(), y.view()).unwrap(), 0.0);
    let z = Array1::zeros(3);
    assert!(matches!(embedding_cosine(x.view(), z.view()), Err(Error::Input(_))));
}

#[test]
fn cos_consistency_is_a_cosine() {
    let f = fixture();
    let ck = Checkpoint::new(f.speaker.clone(), f.backbone.clone(), TrainConfig::default()).unwrap();
    let w = f.corpus.load_wave(&f.corpus.utterances[0]).unwrap();
    let c = cos_consistency("a woman speaks with high pitch", &w, &ck.model).unwrap();
    assert!((-1.0..=1.0).contains(&c));
    assert!(matches!(cos_consistency("", &w, &ck.model), Err(Error::Input(_))));
}

#[test]
fn batch_report_from_pairs_file() {
    let dir = tempfile::tempdir().unwrap();
    let src = contour_tone(0.8, 0.2, wobble);
    let conv = contour_tone(0.8, 0.3, |t| 1.1 * wobble(t));
    write_wav(dir.path().join("s.wav"), &src).unwrap();
    write_wav(dir.path().join("c.wav"), &conv).unwrap();
    std::fs::write(
        dir.path().join("pairs.csv"),
        "source_path,converted_path,prompt_text,factor,ref_transcript,hyp_transcript\n\
         s.wav,c.wav,higher pitch,higher_pitch,a b c,a x c\n\
         s.wav,s.wav\n\
         c.wav,s.wav,,lower_volume\n",
    )
    .unwrap();
    let pairs = read_pairs(&dir.path().join("pairs.csv")).unwrap();
    assert_eq!(pairs.len(), 3);
    assert_eq!(pairs[1].prompt_text, None);
    let report = evaluate_pairs(&pairs, None).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert_eq!(report.rows[0].wer, Some(1.0 / 3.0));
    assert_eq!(report.rows[0].moved, Some(true));
    assert_eq!(report.rows[1].ssim, 1.0);
    assert_eq!(report.rows[2].moved, Some(true));
    assert_eq!(report.summary, Summary::from_rows(&report.rows, None));
    let hp = report.summary.prompt_accuracy[&PromptFactor::HigherPitch];
    assert_eq!((hp.percent, hp.counted), (100.0, 1));
    assert!(report.summary.frechet.is_none());

    let (c, j) = (dir.path().join("r.csv"), dir.path().join("r.json"));
    report.write(&c, &j).unwrap();
    assert_eq!(std::fs::read_to_string(&c).unwrap().lines().count(), 4);
    let back: MetricReport = serde_json::from_str(&std::fs::read_to_string(&j).unwrap()).unwrap();
    assert_eq!(back.rows.len(), 3);
}

#[test]
fn pairs_file_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.csv");
    std::fs::write(&p, "only_one_field\n").unwrap();
    assert!(matches!(read_pairs(&p), Err(Error::Input(_))));
    std::fs::write(&p, "a.wav,b.wav,x,sideways\n").unwrap();
    assert!(matches!(read_pairs(&p), Err(Error::Input(_))));
    std::fs::write(&p, "a.wav,b.wav\n").unwrap();
    let pairs = read_pairs(&p).unwrap();
    assert!(evaluate_pairs(&pairs, None).is_err());
}
