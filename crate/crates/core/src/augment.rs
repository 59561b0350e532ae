//! The four balancing transforms (noise injection, time shift, pitch
//! change, speed change) plus SNR-controlled mixing.
//!
//! Every transform is a pure function of (input, spec): the seed inside an
//! [`AugmentSpec`] fully determines the output, so augmented files can be
//! regenerated bit-identically from manifest provenance alone.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::audio::{resample_ratio, rms, AudioClip, DEFAULT_SINC_TAPS};
use crate::error::{Error, Result};

/// Which of the four balancing transforms to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentKind {
    NoiseInjection,
    TimeShift,
    PitchChange,
    SpeedChange,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 4] = [
        AugmentKind::NoiseInjection,
        AugmentKind::TimeShift,
        AugmentKind::PitchChange,
        AugmentKind::SpeedChange,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentKind::NoiseInjection => "noise-injection",
            AugmentKind::TimeShift => "time-shift",
            AugmentKind::PitchChange => "pitch-change",
            AugmentKind::SpeedChange => "speed-change",
        }
    }
}

/// A fully-specified transform: kind, kind-specific magnitude (noise SNR in
/// dB, shift in seconds, semitones, or speed factor) and the PRNG seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub kind: AugmentKind,
    pub magnitude: f64,
    pub seed: u64,
}

/// Magnitude ranges the balancing pass samples from, per transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentRanges {
    /// Injected-noise SNR, dB (higher = milder).
    pub noise_snr_db: (f64, f64),
    /// Circular time shift, seconds.
    pub shift_seconds: (f64, f64),
    /// Pitch offset, semitones.
    pub pitch_semitones: (f64, f64),
    /// Playback speed factor.
    pub speed_factor: (f64, f64),
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            noise_snr_db: (10.0, 30.0),
            shift_seconds: (-1.0, 1.0),
            pitch_semitones: (-2.0, 2.0),
            speed_factor: (0.9, 1.1),
        }
    }
}

/// Draw a spec for `kind` with a magnitude sampled uniformly from `ranges`.
/// Time shifts are clamped to the clip duration so the spec is always
/// applicable to its source.
pub fn sample_spec(
    kind: AugmentKind,
    ranges: &AugmentRanges,
    clip_duration_secs: f64,
    seed: u64,
) -> AugmentSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = match kind {
        AugmentKind::NoiseInjection => ranges.noise_snr_db,
        AugmentKind::TimeShift => ranges.shift_seconds,
        AugmentKind::PitchChange => ranges.pitch_semitones,
        AugmentKind::SpeedChange => ranges.speed_factor,
    };
    let mut magnitude = Uniform::new_inclusive(lo, hi)
        .expect("augment range bounds must be ordered and finite")
        .sample(&mut rng);
    if kind == AugmentKind::TimeShift {
        magnitude = magnitude.clamp(-clip_duration_secs, clip_duration_secs);
    }
    AugmentSpec {
        kind,
        magnitude,
        seed,
    }
}

/// Apply a spec. Time shifts use circular mode.
pub fn apply(clip: &AudioClip, spec: &AugmentSpec) -> Result<AudioClip> {
    match spec.kind {
        AugmentKind::NoiseInjection => inject_noise(clip, spec.magnitude, spec.seed),
        AugmentKind::TimeShift => time_shift(clip, spec.magnitude, ShiftMode::Circular),
        AugmentKind::PitchChange => pitch_shift(clip, spec.magnitude),
        AugmentKind::SpeedChange => speed_change(clip, spec.magnitude),
    }
}

/// Add seeded white Gaussian noise at a controlled SNR.
///
/// The gain is set against the measured RMS of the generated realization,
/// so the achieved SNR equals the request to floating-point precision. A
/// `noise_snr_db` of `+inf` is the documented no-op sentinel.
pub fn inject_noise(clip: &AudioClip, noise_snr_db: f64, seed: u64) -> Result<AudioClip> {
    let signal_rms = rms(clip)?;
    if signal_rms == 0.0 {
        return Err(Error::CannotSetSnr);
    }
    if noise_snr_db == f64::INFINITY {
        return Ok(clip.clone());
    }
    if !noise_snr_db.is_finite() {
        return Err(Error::Range(format!(
            "noise snr must be finite or +inf, got {noise_snr_db}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let noise: Vec<f64> = (0..clip.samples().len())
        .map(|_| normal.sample(&mut rng))
        .collect();
    let noise_rms = (noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64).sqrt();
    let gain = signal_rms / (noise_rms * 10f64.powf(noise_snr_db / 20.0));
    let out: Vec<f64> = clip
        .samples()
        .iter()
        .zip(&noise)
        .map(|(s, n)| s + gain * n)
        .collect();
    AudioClip::new(out, clip.sample_rate(), clip.channels())
}

/// How [`time_shift`] treats samples pushed past the clip boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftMode {
    /// Rotate: samples wrap around.
    Circular,
    /// Drop the overhang and fill the vacated region with zeros.
    ZeroPad,
}

/// Shift a clip in time by `shift_seconds` (positive = right). Length is
/// preserved; shifts beyond the clip duration are rejected.
pub fn time_shift(clip: &AudioClip, shift_seconds: f64, mode: ShiftMode) -> Result<AudioClip> {
    if !shift_seconds.is_finite() {
        return Err(Error::Range("shift must be finite".into()));
    }
    if shift_seconds.abs() > clip.duration_secs() {
        return Err(Error::Range(format!(
            "shift of {shift_seconds} s exceeds clip duration {} s",
            clip.duration_secs()
        )));
    }
    let frames = clip.frames() as i64;
    let ch = clip.channels();
    let shift = (shift_seconds * clip.sample_rate() as f64).round() as i64;
    if frames == 0 || shift == 0 {
        return Ok(clip.clone());
    }
    let src = clip.samples();
    let mut out = vec![0.0; src.len()];
    match mode {
        ShiftMode::Circular => {
            for f in 0..frames {
                let from = (f - shift).rem_euclid(frames);
                for c in 0..ch {
                    out[(f as usize) * ch + c] = src[(from as usize) * ch + c];
                }
            }
        }
        ShiftMode::ZeroPad => {
            for f in 0..frames {
                let from = f - shift;
                if (0..frames).contains(&from) {
                    for c in 0..ch {
                        out[(f as usize) * ch + c] = src[(from as usize) * ch + c];
                    }
                }
            }
        }
    }
    AudioClip::new(out, clip.sample_rate(), ch)
}

/// Shift pitch by a number of semitones while preserving duration.
///
/// Implemented as band-limited resampling by 2^(semitones/12) followed by a
/// waveform-similarity overlap-add stretch (Hann windows, 75% overlap) back
/// to the original length. Tonal content that the shift would push past
/// Nyquist is not detected; the resampler simply band-limits it.
pub fn pitch_shift(clip: &AudioClip, semitones: f64) -> Result<AudioClip> {
    let x = clip.mono_samples()?;
    if !semitones.is_finite() {
        return Err(Error::Range("semitones must be finite".into()));
    }
    if semitones == 0.0 || x.is_empty() {
        return Ok(clip.clone());
    }
    let factor = 2f64.powf(semitones / 12.0);
    let shifted = resample_ratio(x, 1.0 / factor, DEFAULT_SINC_TAPS);
    let stretched = wsola_stretch(&shifted, x.len());
    AudioClip::mono(stretched, clip.sample_rate())
}

/// Change playback speed: duration scales by 1/factor, pitch scales by
/// factor (plain resampled playback). Factor is config-bounded to [0.25, 4].
pub fn speed_change(clip: &AudioClip, factor: f64) -> Result<AudioClip> {
    let x = clip.mono_samples()?;
    if !factor.is_finite() || !(0.25..=4.0).contains(&factor) {
        return Err(Error::Range(format!(
            "speed factor {factor} outside [0.25, 4]"
        )));
    }
    let out = resample_ratio(x, 1.0 / factor, DEFAULT_SINC_TAPS);
    AudioClip::mono(out, clip.sample_rate())
}

/// Mix `noise` into `signal` so that 20*log10(rms(signal)/rms(g*noise))
/// equals `snr_db`. The noise must be at least as long as the signal; the
/// excess is truncated, and the gain is computed against the truncated
/// segment so the achieved SNR is exact.
pub fn mix_at_snr(signal: &AudioClip, noise: &AudioClip, snr_db: f64) -> Result<AudioClip> {
    if signal.sample_rate() != noise.sample_rate() {
        return Err(Error::RateMismatch {
            a: signal.sample_rate(),
            b: noise.sample_rate(),
        });
    }
    if signal.channels() != noise.channels() {
        return Err(Error::InvalidAudio(format!(
            "channel counts differ: {} vs {}",
            signal.channels(),
            noise.channels()
        )));
    }
    if !snr_db.is_finite() {
        return Err(Error::Range("snr must be finite".into()));
    }
    if noise.frames() < signal.frames() {
        return Err(Error::Range(format!(
            "noise ({} frames) shorter than signal ({} frames)",
            noise.frames(),
            signal.frames()
        )));
    }
    let n = signal.samples().len();
    let gain = mix_gain(signal, noise, snr_db)?;
    let out: Vec<f64> = signal
        .samples()
        .iter()
        .zip(&noise.samples()[..n])
        .map(|(s, v)| s + gain * v)
        .collect();
    AudioClip::new(out, signal.sample_rate(), signal.channels())
}

/// The gain applied to the (truncated) noise by [`mix_at_snr`]:
/// `rms(signal) / (rms(noise) * 10^(snr_db/20))`.
pub fn mix_gain(signal: &AudioClip, noise: &AudioClip, snr_db: f64) -> Result<f64> {
    let n = signal.samples().len();
    let signal_rms = rms(signal)?;
    let trunc = &noise.samples()[..n.min(noise.samples().len())];
    if trunc.is_empty() {
        return Err(Error::EmptyClip);
    }
    let noise_rms = (trunc.iter().map(|v| v * v).sum::<f64>() / trunc.len() as f64).sqrt();
    if signal_rms == 0.0 || noise_rms == 0.0 {
        return Err(Error::CannotSetSnr);
    }
    Ok(signal_rms / (noise_rms * 10f64.powf(snr_db / 20.0)))
}

/// Time-stretch `x` to `n_out` samples with waveform-similarity overlap-add.
///
/// Grains are Hann-windowed at 75% overlap; each grain's read position is
/// refined within +/- one hop to maximize correlation with the natural
/// continuation of the previous grain, which keeps periodic content
/// phase-coherent. The window is sampled at half-sample offsets so it is
/// strictly positive and sums to an exact constant at this overlap, making
/// the alpha = 1 case an exact identity.
fn wsola_stretch(x: &[f64], n_out: usize) -> Vec<f64> {
    let n_in = x.len();
    if n_out == 0 {
        return Vec::new();
    }
    if n_in == 0 {
        return vec![0.0; n_out];
    }
    if n_in == n_out {
        return x.to_vec();
    }
    let mut win = 1024usize;
    while win > 64 && (win * 2 > n_in || win * 2 > n_out) {
        win /= 2;
    }
    if win * 2 > n_in || win * 2 > n_out {
        // Too short for grain synthesis; degrade to plain resampling.
        return resample_ratio(x, n_out as f64 / n_in as f64, DEFAULT_SINC_TAPS);
    }
    let hop = win / 4;
    let search = hop as isize;
    let cmp_len = win / 2;
    let window: Vec<f64> = (0..win)
        .map(|i| 0.5 * (1.0 - (2.0 * PI * (i as f64 + 0.5) / win as f64).cos()))
        .collect();

    let read_span = (n_in - win) as f64;
    let out_span = (n_out.saturating_sub(win)).max(1) as f64;
    let scale = read_span / out_span;

    let mut out = vec![0.0; n_out + win];
    let mut wsum = vec![0.0; n_out + win];
    let mut prev_read = 0usize;
    let mut k = 0usize;
    let max_read = (n_in - win) as isize;
    while k * hop < n_out {
        let s = k * hop;
        let nominal = (((s as f64) * scale).round() as isize).clamp(0, max_read);
        let lo = (nominal - search).max(0);
        let hi = (nominal + search).min(max_read);
        let read = if k == 0 {
            nominal as usize
        } else {
            let target = (prev_read + hop).min(n_in - cmp_len);
            best_alignment(x, target, lo, hi, cmp_len)
        };
        for i in 0..win {
            out[s + i] += window[i] * x[read + i];
            wsum[s + i] += window[i];
        }
        prev_read = read;
        k += 1;
    }
    out.truncate(n_out);
    for (o, &ws) in out.iter_mut().zip(&wsum) {
        if ws > 0.0 {
            *o /= ws;
        }
    }
    out
}

/// Pick the candidate offset in [lo, hi] whose segment best correlates with
/// the reference at `target` (normalized cross-correlation, ties broken
/// toward the reference position).
fn best_alignment(x: &[f64], target: usize, lo: isize, hi: isize, len: usize) -> usize {
    let reference = &x[target..target + len];
    let ref_energy: f64 = reference.iter().map(|v| v * v).sum();
    let mut best = lo.max(0) as usize;
    let mut best_score = f64::NEG_INFINITY;
    let mut best_dist = usize::MAX;
    for c in lo..=hi {
        let c = c as usize;
        let cand = &x[c..c + len];
        let mut dot = 0.0;
        let mut energy = 0.0;
        for (a, b) in cand.iter().zip(reference) {
            dot += a * b;
            energy += a * a;
        }
        let score = dot / ((energy * ref_energy).sqrt() + 1e-12);
        let dist = c.abs_diff(target);
        if score > best_score || (score == best_score && dist < best_dist) {
            best_score = score;
            best_dist = dist;
            best = c;
        }
    }
    best
}
