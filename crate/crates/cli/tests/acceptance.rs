//! Acceptance suite: one test per release criterion, each printing a
//! `ACCEPTANCE <n> PASS` line (visible with `--nocapture`). Oracles are
//! written inline against the definitions, independent of the library
//! paths they verify.
//!
//! Run with: `cargo test -p audiofault-cli --test acceptance`

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use audiofault_cli::commands::{run_eval, run_prepare, run_synth, run_train};
use audiofault_cli::config::RunConfig;
use audiofault_core::audio::{rms, AudioClip};
use audiofault_core::augment::{
    apply, mix_at_snr, pitch_shift, sample_spec, speed_change, time_shift, AugmentKind,
    AugmentRanges, ShiftMode,
};
use audiofault_core::dataset::synth::SynthConfig;
use audiofault_core::dataset::{
    balance_by_augmentation, scan_mimii, split, verify_hygiene, Label, Machine, Provenance, Split,
};
use audiofault_core::features::{hz_to_mel, mel_filterbank, mel_spectrogram, SpectrogramParams};
use audiofault_core::metrics::{metric_suite, ConfusionMatrix};
use audiofault_core::model::gradcheck::{grad_check, micro_config};
use audiofault_core::model::{DenseBlockSpec, ModelConfig, TrainConfig};
use audiofault_core::{write_wav, ChannelPolicy};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};

/// The end-to-end and reproducibility tests saturate the machine; they
/// must not time each other.
static HEAVY: Mutex<()> = Mutex::new(());

fn heavy_guard() -> std::sync::MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|p| p.into_inner())
}

fn tone(freq: f64, rate: u32, secs: f64) -> AudioClip {
    let n = (secs * f64::from(rate)).round() as usize;
    AudioClip::mono(
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / f64::from(rate)).sin() * 0.5)
            .collect(),
        rate,
    )
    .unwrap()
}

/// Dominant frequency via zero-padded windowed FFT with parabolic
/// interpolation; the independent measurement for the pitch/speed laws.
fn spectral_peak_hz(samples: &[f64], sample_rate: f64) -> f64 {
    let n = samples.len();
    let size = (4 * n).next_power_of_two();
    let mut buf = vec![Complex::new(0.0, 0.0); size];
    for (i, &s) in samples.iter().enumerate() {
        let w = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos());
        buf[i] = Complex::new(s * w, 0.0);
    }
    FftPlanner::new().plan_fft_forward(size).process(&mut buf);
    let bin_hz = sample_rate / size as f64;
    let lo = (20.0 / bin_hz).ceil() as usize;
    let (mut peak, mut peak_mag) = (lo, 0.0);
    for (k, v) in buf.iter().enumerate().take(size / 2).skip(lo) {
        let m = v.norm_sqr();
        if m > peak_mag {
            peak_mag = m;
            peak = k;
        }
    }
    let mag = |k: usize| buf[k].norm_sqr().max(1e-300).ln();
    let (y0, y1, y2) = (mag(peak - 1), mag(peak), mag(peak + 1));
    let denom = y0 - 2.0 * y1 + y2;
    let delta = if denom.abs() > 1e-12 { 0.5 * (y0 - y2) / denom } else { 0.0 };
    (peak as f64 + delta) * bin_hz
}

// ---------------------------------------------------------------- 1 ----

/// Brute-force metric evaluator on different algebraic routes.
fn brute(tp: f64, tn: f64, fp: f64, fnn: f64) -> [Option<f64>; 6] {
    let n = tp + tn + fp + fnn;
    let acc = Some((tp + tn) / n);
    let prec = if tp + fp > 0.0 { Some(tp / (tp + fp)) } else { None };
    let rec = if tp + fnn > 0.0 { Some(tp / (tp + fnn)) } else { None };
    let f1 = match (prec, rec) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * tp / (2.0 * tp + fp + fnn)),
        _ => None,
    };
    let po = (tp + tn) / n;
    let pe = ((tp + fp) * (tp + fnn) + (fnn + tn) * (fp + tn)) / (n * n);
    let kappa = if (1.0 - pe) != 0.0 { Some((po - pe) / (1.0 - pe)) } else { None };
    let s = (tp + fnn) / n;
    let p_rate = (tp + fp) / n;
    let den = (p_rate * s * (1.0 - s) * (1.0 - p_rate)).sqrt();
    let mcc = if den > 0.0 { Some((tp / n - s * p_rate) / den) } else { None };
    [acc, prec, rec, f1, kappa, mcc]
}

#[test]
fn criterion_1_metric_oracle_equivalence() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    for i in 0..1000 {
        let max = [3u64, 10, 100, 1_000_000][i % 4];
        let (tp, tn, fp, fnn) = (
            rng.random_range(0..=max),
            rng.random_range(0..=max),
            rng.random_range(0..=max),
            rng.random_range(0..=max),
        );
        if tp + tn + fp + fnn == 0 {
            continue;
        }
        let suite = metric_suite(&ConfusionMatrix::new(tp, tn, fp, fnn));
        let want = brute(tp as f64, tn as f64, fp as f64, fnn as f64);
        let got = [
            suite.accuracy,
            suite.precision,
            suite.recall,
            suite.f1,
            suite.kappa,
            suite.mcc,
        ];
        for (g, w) in got.iter().zip(&want) {
            match (g, w) {
                (None, None) => {}
                (Some(a), Some(b)) => assert!(
                    (a - b).abs() <= 1e-12,
                    "cm ({tp},{tn},{fp},{fnn}): {a} vs {b}"
                ),
                other => panic!("definedness mismatch on ({tp},{tn},{fp},{fnn}): {other:?}"),
            }
        }
        checked += 1;
    }
    assert!(checked >= 990);

    // hand-worked case
    let s = metric_suite(&ConfusionMatrix::new(45, 40, 10, 5));
    assert!((s.accuracy.unwrap() - 0.85).abs() < 1e-12);
    assert!((s.kappa.unwrap() - 0.7).abs() < 1e-12);
    assert!((s.mcc.unwrap() - 0.70353).abs() < 1e-5);

    let elapsed = t0.elapsed();
    assert!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    println!("ACCEPTANCE 1 PASS: {checked} random matrices match the brute-force oracle to 1e-12 in {elapsed:?}");
}

// ---------------------------------------------------------------- 2 ----

#[test]
fn criterion_2_gradient_verification() {
    let t0 = Instant::now();
    let report = grad_check(&micro_config(), 42, 1e-4).unwrap();
    let elapsed = t0.elapsed();
    assert!(
        report.passed(1e-4),
        "max rel err {} at {}",
        report.max_rel_err,
        report.worst_layer
    );
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    // the checked layers cover every op family in the network
    let names: Vec<&str> = report.per_layer.iter().map(|l| l.layer.as_str()).collect();
    for needle in [
        "stem.conv.weight",      // conv into the concat stem
        "block1.layer1.bn.gamma", // batch norm
        "block1.layer2.conv.weight", // dense-layer conv reached through concatenation
        "block2.layer2.conv.weight",
        "transition1.conv.weight", // 1x1 conv + avg pool path
        "fc.weight",             // GAP -> FC -> sigmoid+BCE head
    ] {
        assert!(names.contains(&needle), "no {needle} in per-layer table");
    }
    println!(
        "ACCEPTANCE 2 PASS: {} coordinates, max rel err {:.2e} ({} skipped at kinks) in {elapsed:?}",
        report.checked, report.max_rel_err, report.skipped
    );
}

// ---------------------------------------------------------------- 3 ----

#[test]
fn criterion_3_mel_front_end() {
    let params = SpectrogramParams::default();
    let rate = 16000u32;

    // mel(700) = 2595*log10(2)
    assert!((hz_to_mel(700.0) - 781.17).abs() < 0.01);

    // partition of unity between the first and last filter centers
    let fb = mel_filterbank(&params, rate).unwrap();
    let bin_hz = f64::from(rate) / params.n_fft as f64;
    let (first, last) = (fb.centers_hz[0], *fb.centers_hz.last().unwrap());
    let mut checked_bins = 0;
    for b in 0..params.bins() {
        let f = b as f64 * bin_hz;
        if f > first && f < last {
            let sum: f64 = (0..params.n_mels).map(|i| fb.weights[[i, b]]).sum();
            assert!((sum - 1.0).abs() <= 0.02, "bin {b}: sum {sum}");
            checked_bins += 1;
        }
    }
    assert!(checked_bins > 400);

    // ten random tones at filter centers light their own band everywhere
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..10 {
        let band = rng.random_range(4..params.n_mels - 2);
        let clip = tone(fb.centers_hz[band], rate, 0.5);
        let mel = mel_spectrogram(&clip, &params).unwrap();
        for t in 0..mel.values.dim().1 {
            let col = mel.values.column(t);
            let argmax = col
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, band, "band {band} frame {t}");
        }
    }

    // 10 s at 16 kHz with n_fft 1024 / hop 512 -> 311 frames
    let clip = AudioClip::mono(vec![0.01; 160_000], rate).unwrap();
    let mel = mel_spectrogram(&clip, &params).unwrap();
    assert_eq!(mel.values.dim(), (64, 311));

    println!("ACCEPTANCE 3 PASS: partition of unity on {checked_bins} bins, mel(700)={:.2}, 10 tone bands, 311 frames", hz_to_mel(700.0));
}

// ---------------------------------------------------------------- 4 ----

#[test]
fn criterion_4_snr_mixing_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(3000..20000);
        let signal = AudioClip::mono(
            (0..n)
                .map(|i| 0.25 * (0.05 * i as f64).sin() + 0.1 * (0.011 * i as f64 + 0.3).sin())
                .collect(),
            16000,
        )
        .unwrap();
        let noise = AudioClip::mono(
            (0..n + rng.random_range(0..1000))
                .map(|_| rng.random_range(-0.4..0.4))
                .collect(),
            16000,
        )
        .unwrap();
        for snr in [-6.0, 0.0, 6.0] {
            let mixed = mix_at_snr(&signal, &noise, snr).unwrap();
            let added: Vec<f64> = mixed
                .samples()
                .iter()
                .zip(signal.samples())
                .map(|(m, s)| m - s)
                .collect();
            let added_rms = (added.iter().map(|v| v * v).sum::<f64>() / added.len() as f64).sqrt();
            let achieved = 20.0 * (rms(&signal).unwrap() / added_rms).log10();
            let err = (achieved - snr).abs();
            worst = worst.max(err);
            assert!(err <= 0.01, "requested {snr} dB, achieved {achieved} dB");
        }
    }
    println!("ACCEPTANCE 4 PASS: 100 pairs x 3 levels, worst SNR error {worst:.2e} dB");
}

// ---------------------------------------------------------------- 5 ----

#[test]
fn criterion_5_augmentation_laws() {
    // pitch +12 semitones doubles the dominant frequency within 1%
    let clip = tone(440.0, 16000, 1.0);
    let up = pitch_shift(&clip, 12.0).unwrap();
    let peak = spectral_peak_hz(up.samples(), 16000.0);
    assert!((peak - 880.0).abs() / 880.0 < 0.01, "peak {peak}");

    // speed factor f scales duration by 1/f exactly in sample counts
    for f in [0.5, 0.8, 1.0, 1.25, 2.0] {
        let out = speed_change(&clip, f).unwrap();
        let want = (clip.frames() as f64 / f).round() as usize;
        assert_eq!(out.frames(), want, "factor {f}");
    }

    // circular full-length shift is the identity
    let full = time_shift(&clip, clip.duration_secs(), ShiftMode::Circular).unwrap();
    assert_eq!(full, clip);

    // all four transforms are deterministic per seed
    let ranges = AugmentRanges::default();
    for kind in AugmentKind::ALL {
        let spec = sample_spec(kind, &ranges, clip.duration_secs(), 99);
        let a = apply(&clip, &spec).unwrap();
        let b = apply(&clip, &spec).unwrap();
        assert_eq!(a, b, "{kind:?}");
    }
    println!("ACCEPTANCE 5 PASS: pitch doubling at {peak:.1} Hz, exact speed length law, shift identity, deterministic transforms");
}

// ---------------------------------------------------------------- 6 ----

fn split_counts(
    manifest: &audiofault_core::Manifest,
    machine: Machine,
    label: Label,
) -> (usize, usize, usize) {
    let count = |s: Split| {
        manifest
            .entries
            .iter()
            .filter(|e| {
                e.machine == machine
                    && e.label == label
                    && e.split == Some(s)
                    && e.provenance == Provenance::Original
            })
            .count()
    };
    (count(Split::Train), count(Split::Val), count(Split::Test))
}

#[test]
fn criterion_6_dataset_hygiene() {
    let _guard = heavy_guard();
    let dir = tempfile::tempdir().unwrap();

    // (a) synthetic tree, with augmentation in play
    let root = dir.path().join("synth");
    let cfg = SynthConfig {
        normal_count: 20,
        abnormal_count: 10,
        duration_secs: 0.4,
        snr_levels_db: vec![0],
        seed: 6,
        ..SynthConfig::default()
    };
    let manifest = audiofault_core::synth_dataset(&cfg, &root).unwrap();
    let manifest = split(manifest, (0.8, 0.1, 0.1), 6).unwrap();
    let manifest = balance_by_augmentation(
        manifest,
        &AugmentRanges::default(),
        ChannelPolicy::SelectChannel(0),
        dir.path().join("aug"),
        6,
    )
    .unwrap();
    verify_hygiene(&manifest, (0.8, 0.1, 0.1)).unwrap();
    let mut augmented = 0;
    for machine in Machine::ALL {
        assert_eq!(split_counts(&manifest, machine, Label::Normal), (16, 2, 2));
        assert_eq!(split_counts(&manifest, machine, Label::Abnormal), (8, 1, 1));
        let train_normal = manifest
            .entries
            .iter()
            .filter(|e| e.machine == machine && e.label == Label::Normal && e.split == Some(Split::Train))
            .count();
        let train_abnormal = manifest
            .entries
            .iter()
            .filter(|e| e.machine == machine && e.label == Label::Abnormal && e.split == Some(Split::Train))
            .count();
        assert_eq!(train_normal, train_abnormal, "{machine} train not balanced");
    }
    for e in &manifest.entries {
        if let Provenance::Augmented { source, .. } = &e.provenance {
            augmented += 1;
            assert_eq!(e.split, Some(Split::Train));
            let src = manifest.entries.iter().find(|o| &o.path == source).unwrap();
            assert_eq!(src.split, Some(Split::Train));
        }
    }
    assert_eq!(augmented, 4 * 8);

    // (b) mocked MIMII-layout tree with the published fan and pump counts
    let mock = dir.path().join("mimii");
    for (machine, label, count) in [
        ("fan", "normal", 4075),
        ("fan", "abnormal", 1475),
        ("pump", "normal", 3749),
        ("pump", "abnormal", 456),
    ] {
        let d = mock.join("0_dB").join(machine).join("id_00").join(label);
        fs::create_dir_all(&d).unwrap();
        for i in 0..count {
            fs::write(d.join(format!("{i:08}.wav")), b"").unwrap();
        }
    }
    let scanned = scan_mimii(&mock).unwrap();
    let count_of = |machine: Machine, label: Label| {
        scanned
            .entries
            .iter()
            .filter(|e| e.machine == machine && e.label == label)
            .count()
    };
    assert_eq!(count_of(Machine::Fan, Label::Normal), 4075);
    assert_eq!(count_of(Machine::Fan, Label::Abnormal), 1475);
    assert_eq!(count_of(Machine::Pump, Label::Normal), 3749);
    assert_eq!(count_of(Machine::Pump, Label::Abnormal), 456);

    let scanned = split(scanned, (0.8, 0.1, 0.1), 13).unwrap();
    verify_hygiene(&scanned, (0.8, 0.1, 0.1)).unwrap();
    // The named fan counts land within one entry on all three splits; in
    // general flooring val and test can push train up to two over target
    // (pump normal: 3749 -> 3001/374/374 vs 2999.2/374.9/374.9).
    for (machine, label, n, train_slack) in [
        (Machine::Fan, Label::Normal, 4075usize, 1.0),
        (Machine::Fan, Label::Abnormal, 1475, 1.0),
        (Machine::Pump, Label::Normal, 3749, 2.0),
        (Machine::Pump, Label::Abnormal, 456, 2.0),
    ] {
        let (tr, va, te) = split_counts(&scanned, machine, label);
        assert_eq!(tr + va + te, n);
        for (got, want, slack) in [
            (tr as f64, n as f64 * 0.8, train_slack),
            (va as f64, n as f64 * 0.1, 1.0),
            (te as f64, n as f64 * 0.1, 1.0),
        ] {
            assert!(
                (got - want).abs() <= slack + 1e-9,
                "{machine}/{}: {got} vs {want}",
                label.as_str()
            );
        }
    }
    println!("ACCEPTANCE 6 PASS: hygiene holds on the synthetic tree ({augmented} augmented, all in train) and the 4075/1475 + 3749/456 mocked tree");
}

// ---------------------------------------------------------------- 7 ----

#[test]
fn criterion_7_end_to_end_snr_trend() {
    let _guard = heavy_guard();
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default(); // seed 42, 25 epochs, 64x64 images
    cfg.synth.normal_count = 80;
    cfg.synth.abnormal_count = 80;

    let root = dir.path().join("data");
    run_synth(&cfg, &root, &dir.path().join("s")).unwrap();
    run_prepare(&cfg, &dir.path().join("s/manifest.json"), &dir.path().join("p")).unwrap();
    let summary = run_train(
        &cfg,
        &dir.path().join("p/prepared_manifest.json"),
        &dir.path().join("t"),
        None,
        None,
    )
    .unwrap();
    assert!(!summary.any_diverged(), "a cell diverged");
    assert_eq!(summary.outcomes.len(), 12);
    let eval = run_eval(
        &cfg,
        &dir.path().join("p/prepared_manifest.json"),
        &dir.path().join("t"),
        &dir.path().join("e"),
        None,
        None,
    )
    .unwrap();
    let elapsed = t0.elapsed();

    assert_eq!(eval.reports.len(), 12, "expected 4 machines x 3 SNRs");
    let acc = |machine: Machine, snr: i32| -> f64 {
        eval.reports
            .iter()
            .find(|r| r.machine == machine && r.snr_db == snr)
            .unwrap_or_else(|| panic!("no report for {machine} at {snr}"))
            .accuracy
            .unwrap_or_else(|| panic!("undefined accuracy for {machine} at {snr}"))
    };
    for machine in Machine::ALL {
        println!(
            "criterion 7: {machine} accuracy by SNR: -6 dB {:.4}, 0 dB {:.4}, +6 dB {:.4}",
            acc(machine, -6),
            acc(machine, 0),
            acc(machine, 6)
        );
    }
    for machine in Machine::ALL {
        let high = acc(machine, 6);
        let low = acc(machine, -6);
        assert!(high >= 0.95, "{machine}: accuracy at +6 dB is {high}");
        assert!(
            high >= low,
            "{machine}: accuracy at +6 dB ({high}) below -6 dB ({low})"
        );
    }
    assert!(
        elapsed < Duration::from_secs(20 * 60),
        "pipeline took {elapsed:?}"
    );
    let trend: Vec<String> = Machine::ALL
        .iter()
        .map(|&m| format!("{m}: {:.3}->{:.3}", acc(m, -6), acc(m, 6)))
        .collect();
    println!(
        "ACCEPTANCE 7 PASS: accuracy(-6 dB)->accuracy(+6 dB) per machine [{}] in {elapsed:?}",
        trend.join(", ")
    );
}

// ---------------------------------------------------------------- 8 ----

/// A MIMII-layout subtree with real audio across several id directories.
fn write_mimii_like_tree(root: &Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    for id in ["id_00", "id_02"] {
        for (label, count, base_freq) in [("normal", 7, 200.0), ("abnormal", 5, 320.0)] {
            let d = root.join("-6_dB").join("slider").join(id).join(label);
            fs::create_dir_all(&d).unwrap();
            for i in 0..count {
                let freq = base_freq + 10.0 * i as f64;
                let mut clip = tone(freq, 16000, 1.0);
                if label == "abnormal" {
                    let samples: Vec<f64> = clip
                        .samples()
                        .iter()
                        .enumerate()
                        .map(|(j, s)| {
                            s + if j % 2000 < 40 { 0.3 * rng.random_range(-1.0..1.0) } else { 0.0 }
                        })
                        .collect();
                    clip = AudioClip::mono(samples, 16000).unwrap();
                }
                write_wav(&clip, d.join(format!("{i:08}.wav"))).unwrap();
            }
        }
    }
}

#[test]
fn criterion_8_runs_on_a_mimii_subtree_without_accuracy_claims() {
    let _guard = heavy_guard();
    let dir = tempfile::tempdir().unwrap();

    // a provided real subtree takes precedence; otherwise a mocked one
    let root = match std::env::var_os("MIMII_ROOT") {
        Some(path) => PathBuf::from(path),
        None => {
            let root = dir.path().join("mimii");
            write_mimii_like_tree(&root);
            root
        }
    };

    let mut cfg = RunConfig::default();
    cfg.set_global_seed(8);
    cfg.spectrogram.image_size = (32, 32);
    cfg.model = ModelConfig {
        input: (1, 32, 32),
        stem_channels: 4,
        blocks: vec![
            DenseBlockSpec { layers: 2, growth: 3 },
            DenseBlockSpec { layers: 2, growth: 3 },
        ],
    };
    cfg.train = TrainConfig {
        epochs: 3,
        batch_size: 8,
        seed: 8,
        ..TrainConfig::default()
    };

    let manifest = scan_mimii(&root).unwrap();
    assert!(!manifest.entries.is_empty(), "subtree {root:?} scanned empty");
    manifest.save(dir.path().join("manifest.json")).unwrap();

    run_prepare(&cfg, &dir.path().join("manifest.json"), &dir.path().join("p")).unwrap();
    let trained = run_train(
        &cfg,
        &dir.path().join("p/prepared_manifest.json"),
        &dir.path().join("t"),
        None,
        None,
    )
    .unwrap();
    assert!(!trained.any_diverged());
    let eval = run_eval(
        &cfg,
        &dir.path().join("p/prepared_manifest.json"),
        &dir.path().join("t"),
        &dir.path().join("e"),
        None,
        None,
    )
    .unwrap();
    // deliberately no accuracy threshold here: published full-corpus
    // numbers need the real dataset and capacity far beyond desk scale
    assert!(!eval.reports.is_empty());
    assert!(dir.path().join("e/metrics.csv").is_file());
    println!(
        "ACCEPTANCE 8 PASS: pipeline ran end-to-end on a MIMII-layout subtree ({} cells evaluated, no accuracy asserted)",
        eval.reports.len()
    );
}

// ---------------------------------------------------------------- 9 ----

fn run_cli(work_dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_audiofault"))
        .args(args)
        .current_dir(work_dir)
        .output()
        .expect("binary runs");
    let code = out.status.code();
    assert!(
        matches!(code, Some(0) | Some(6)),
        "exit {code:?} for {args:?}\nstderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn full_cli_pipeline(base: &Path) {
    fs::create_dir_all(base).unwrap();
    let overrides: Vec<String> = [
        "synth.normal_count=12",
        "synth.abnormal_count=10",
        "synth.duration_secs=1.0",
        "synth.snr_levels_db=[0]",
        "spectrogram.image_size=[32,32]",
        "model.input=[1,32,32]",
        "train.epochs=3",
        "train.batch_size=8",
    ]
    .iter()
    .flat_map(|s| ["--set".to_string(), s.to_string()])
    .collect();
    let with = |mut head: Vec<&str>, overrides: &[String]| -> Vec<String> {
        head.extend(["--seed", "7", "--machines", "fan,valve"]);
        let mut v: Vec<String> = head.into_iter().map(String::from).collect();
        v.extend(overrides.iter().cloned());
        v
    };
    let args = with(vec!["synth", "--root", "data", "--out", "s"], &overrides);
    run_cli(base, &args.iter().map(String::as_str).collect::<Vec<_>>());
    // prepare/train/eval take cell filters instead of synth machine filters
    let mut args: Vec<String> = vec!["prepare", "--manifest", "s/manifest.json", "--out", "p", "--seed", "7"]
        .into_iter()
        .map(String::from)
        .collect();
    args.extend(overrides.iter().cloned());
    run_cli(base, &args.iter().map(String::as_str).collect::<Vec<_>>());
    let mut args: Vec<String> = vec![
        "train",
        "--manifest",
        "p/prepared_manifest.json",
        "--out",
        "t",
        "--seed",
        "7",
    ]
    .into_iter()
    .map(String::from)
    .collect();
    args.extend(overrides.iter().cloned());
    run_cli(base, &args.iter().map(String::as_str).collect::<Vec<_>>());
    let mut args: Vec<String> = vec![
        "eval",
        "--manifest",
        "p/prepared_manifest.json",
        "--checkpoints",
        "t",
        "--out",
        "e",
        "--seed",
        "7",
    ]
    .into_iter()
    .map(String::from)
    .collect();
    args.extend(overrides.iter().cloned());
    run_cli(base, &args.iter().map(String::as_str).collect::<Vec<_>>());
}

#[test]
fn criterion_9_identical_seeds_reproduce_artifacts() {
    let _guard = heavy_guard();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    full_cli_pipeline(&a);
    full_cli_pipeline(&b);

    let mut compared = 0;
    for rel in [
        "s/manifest.json",
        "p/prepared_manifest.json",
        "t/history_fan_0dB.csv",
        "t/history_valve_0dB.csv",
        "t/model_fan_0dB.ckpt",
        "e/metrics.csv",
        "e/metrics.json",
    ] {
        let fa = fs::read(a.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"));
        let fb = fs::read(b.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"));
        assert_eq!(fa, fb, "{rel} differs between identical runs");
        compared += 1;
    }
    // the generated audio itself is part of the contract
    let wav = "data/0_dB/fan/id_00/normal/00000000.wav";
    assert_eq!(fs::read(a.join(wav)).unwrap(), fs::read(b.join(wav)).unwrap());
    println!("ACCEPTANCE 9 PASS: {compared} artifacts byte-identical across two seeded CLI runs");
}
