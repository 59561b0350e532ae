//! Independent oracles shared by the integration tests. Everything here is
//! written against the definitions, not the library code paths it checks:
//! the DFT is the O(n^2) sum, metrics use different algebraic routes, the
//! bilinear reference is a second implementation.

#![allow(dead_code)]

use std::f64::consts::PI;

use audiofault_core::AudioClip;
use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};

pub fn tone(freq: f64, rate: u32, secs: f64) -> AudioClip {
    let n = (secs * f64::from(rate)).round() as usize;
    AudioClip::mono(
        (0..n)
            .map(|i| (2.0 * PI * freq * i as f64 / f64::from(rate)).sin() * 0.5)
            .collect(),
        rate,
    )
    .unwrap()
}

/// Dominant frequency by windowed, zero-padded FFT with parabolic
/// interpolation of the log-magnitude peak. Good to well under 0.1% for
/// clean tones.
pub fn spectral_peak_hz(samples: &[f64], sample_rate: f64) -> f64 {
    let n = samples.len();
    assert!(n >= 64, "clip too short for a peak measurement");
    let size = (4 * n).next_power_of_two();
    let mut buf = vec![Complex::new(0.0, 0.0); size];
    for (i, &s) in samples.iter().enumerate() {
        let w = 0.5 * (1.0 - (2.0 * PI * i as f64 / n as f64).cos());
        buf[i] = Complex::new(s * w, 0.0);
    }
    FftPlanner::new().plan_fft_forward(size).process(&mut buf);
    let bin_hz = sample_rate / size as f64;
    let lo = (20.0 / bin_hz).ceil() as usize; // skip DC leakage
    let hi = size / 2;
    let mut peak = lo;
    let mut peak_mag = 0.0;
    for (k, v) in buf.iter().enumerate().take(hi).skip(lo) {
        let m = v.norm_sqr();
        if m > peak_mag {
            peak_mag = m;
            peak = k;
        }
    }
    // parabolic refinement in log magnitude
    let mag = |k: usize| buf[k].norm_sqr().max(1e-300).ln();
    let (y0, y1, y2) = (mag(peak - 1), mag(peak), mag(peak + 1));
    let denom = y0 - 2.0 * y1 + y2;
    let delta = if denom.abs() > 1e-12 {
        0.5 * (y0 - y2) / denom
    } else {
        0.0
    };
    (peak as f64 + delta) * bin_hz
}

/// Direct O(n^2) DFT power spectrum (bins 0..=n/2) of one frame.
pub fn naive_dft_power(frame: &[f64]) -> Vec<f64> {
    let n = frame.len();
    (0..=n / 2)
        .map(|k| {
            let mut re = 0.0;
            let mut im = 0.0;
            for (i, &x) in frame.iter().enumerate() {
                let ang = -2.0 * PI * (k * i) as f64 / n as f64;
                re += x * ang.cos();
                im += x * ang.sin();
            }
            re * re + im * im
        })
        .collect()
}

/// Independent corner-aligned bilinear resize, written as explicit
/// neighbor gathering rather than the library's lerp chain.
pub fn bilinear_ref(src: &Array2<f64>, h_out: usize, w_out: usize) -> Array2<f64> {
    let (h_in, w_in) = src.dim();
    let map = |i: usize, n_out: usize, n_in: usize| -> f64 {
        if n_out <= 1 || n_in <= 1 {
            0.0
        } else {
            i as f64 * (n_in as f64 - 1.0) / (n_out as f64 - 1.0)
        }
    };
    Array2::from_shape_fn((h_out, w_out), |(r, c)| {
        let sy = map(r, h_out, h_in);
        let sx = map(c, w_out, w_in);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        let y1 = (y0 + 1).min(h_in - 1);
        let x1 = (x0 + 1).min(w_in - 1);
        src[[y0, x0]] * (1.0 - fy) * (1.0 - fx)
            + src[[y0, x1]] * (1.0 - fy) * fx
            + src[[y1, x0]] * fy * (1.0 - fx)
            + src[[y1, x1]] * fy * fx
    })
}

#[derive(Debug, Clone, Copy)]
pub struct BruteMetrics {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub kappa: Option<f64>,
    pub mcc: Option<f64>,
}

/// Brute-force metric evaluator on different algebraic routes: kappa via
/// (po - pe)/(1 - pe), MCC via prevalence/selection rates, F1 via
/// 2tp/(2tp + fp + fn).
pub fn brute_metrics(tp: u64, tn: u64, fp: u64, fnn: u64) -> BruteMetrics {
    let (tpf, tnf, fpf, fnf) = (tp as f64, tn as f64, fp as f64, fnn as f64);
    let n = tpf + tnf + fpf + fnf;
    let accuracy = if n > 0.0 { Some((tpf + tnf) / n) } else { None };
    let precision = if tpf + fpf > 0.0 {
        Some(tpf / (tpf + fpf))
    } else {
        None
    };
    let recall = if tpf + fnf > 0.0 {
        Some(tpf / (tpf + fnf))
    } else {
        None
    };
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * tpf / (2.0 * tpf + fpf + fnf)),
        _ => None,
    };
    let po = (tpf + tnf) / n;
    let pe = ((tpf + fpf) * (tpf + fnf) + (fnf + tnf) * (fpf + tnf)) / (n * n);
    let kappa = if (1.0 - pe).abs() > 0.0 {
        Some((po - pe) / (1.0 - pe))
    } else {
        None
    };
    let s = (tpf + fnf) / n; // prevalence
    let p_rate = (tpf + fpf) / n; // selection rate
    let mcc_den = (p_rate * s * (1.0 - s) * (1.0 - p_rate)).sqrt();
    let mcc = if mcc_den > 0.0 {
        Some((tpf / n - s * p_rate) / mcc_den)
    } else {
        None
    };
    BruteMetrics {
        accuracy,
        precision,
        recall,
        f1,
        kappa,
        mcc,
    }
}

/// Pairwise Mann-Whitney AUC by full enumeration, ties as one half.
pub fn pairwise_auc(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0u64;
    for (i, &pi) in positives.iter().enumerate() {
        if !pi {
            continue;
        }
        for (j, &pj) in positives.iter().enumerate() {
            if pj {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    if pairs == 0 {
        None
    } else {
        Some(wins / pairs as f64)
    }
}

/// Plain logistic regression on flattened features by gradient descent.
/// Returns final training accuracy; used to certify that a synthetic set
/// is linearly separable before asking the CNN to fit it.
pub fn logistic_train_accuracy(features: &[Vec<f64>], labels: &[f64], steps: usize) -> f64 {
    let n = features.len();
    let d = features[0].len();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let lr = 0.5;
    for _ in 0..steps {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, &y) in features.iter().zip(labels) {
            let z: f64 = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let p = 1.0 / (1.0 + (-z).exp());
            let g = (p - y) / n as f64;
            gb += g;
            for (gi, &xi) in gw.iter_mut().zip(x) {
                *gi += g * xi;
            }
        }
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi -= lr * gi;
        }
        b -= lr * gb;
    }
    let mut correct = 0;
    for (x, &y) in features.iter().zip(labels) {
        let z: f64 = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
        let p = 1.0 / (1.0 + (-z).exp());
        if (p >= 0.5) == (y >= 0.5) {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}
