//! Desk-scale synthetic machine sounds in the MIMII directory layout.
//!
//! Normal clips are a harmonic stack with slow amplitude modulation over a
//! pink-noise floor. Abnormal clips add the recipe's fault artifacts:
//! a periodic impulse train, amplitude-modulation sidebands on the upper
//! harmonics, or a random-walk wobble of the fundamental. Every file mixes
//! a clean clip against a seeded factory-noise bed at its SNR tag, so the
//! clean and noise components can be regenerated exactly for verification.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, AudioClip};
use crate::augment::{mix_at_snr, mix_gain};
use crate::error::{Error, Result};
use crate::seed;

use super::{snr_dir_name, Label, Machine, Manifest, ManifestEntry, Provenance};

/// Fault artifact parameters; a zero value disables that artifact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultRecipe {
    /// Impulse bursts per second.
    pub impulse_rate_hz: f64,
    /// Sideband spacing applied to harmonics 2 and up, Hz.
    pub sideband_offset_hz: f64,
    /// Relative wobble of the fundamental (0.1 = +/-10% excursions).
    pub jitter_amount: f64,
}

impl FaultRecipe {
    pub const NONE: FaultRecipe = FaultRecipe {
        impulse_rate_hz: 0.0,
        sideband_offset_hz: 0.0,
        jitter_amount: 0.0,
    };
}

/// Spectral recipe for one machine type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MachineRecipe {
    pub machine: Machine,
    pub fundamental_hz: f64,
    pub harmonics: usize,
    pub modulation_rate_hz: f64,
    pub fault: FaultRecipe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub machines: Vec<MachineRecipe>,
    pub normal_count: usize,
    pub abnormal_count: usize,
    pub duration_secs: f64,
    pub sample_rate: u32,
    pub snr_levels_db: Vec<i32>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            machines: vec![
                MachineRecipe {
                    machine: Machine::Fan,
                    fundamental_hz: 120.0,
                    harmonics: 6,
                    modulation_rate_hz: 0.7,
                    fault: FaultRecipe {
                        impulse_rate_hz: 0.0,
                        sideband_offset_hz: 0.0,
                        jitter_amount: 0.10,
                    },
                },
                MachineRecipe {
                    machine: Machine::Pump,
                    fundamental_hz: 180.0,
                    harmonics: 5,
                    modulation_rate_hz: 1.3,
                    fault: FaultRecipe {
                        impulse_rate_hz: 0.0,
                        sideband_offset_hz: 35.0,
                        jitter_amount: 0.0,
                    },
                },
                MachineRecipe {
                    machine: Machine::Slider,
                    fundamental_hz: 90.0,
                    harmonics: 4,
                    modulation_rate_hz: 0.5,
                    fault: FaultRecipe {
                        impulse_rate_hz: 8.0,
                        sideband_offset_hz: 0.0,
                        jitter_amount: 0.0,
                    },
                },
                MachineRecipe {
                    machine: Machine::Valve,
                    fundamental_hz: 150.0,
                    harmonics: 5,
                    modulation_rate_hz: 0.9,
                    fault: FaultRecipe {
                        impulse_rate_hz: 4.0,
                        sideband_offset_hz: 25.0,
                        jitter_amount: 0.0,
                    },
                },
            ],
            normal_count: 60,
            abnormal_count: 20,
            duration_secs: 2.0,
            sample_rate: 16000,
            snr_levels_db: vec![-6, 0, 6],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.machines.is_empty() {
            return Err(Error::Config("synth config needs at least one machine".into()));
        }
        if self.normal_count == 0 || self.abnormal_count == 0 {
            return Err(Error::Config("per-class counts must be positive".into()));
        }
        if !self.duration_secs.is_finite() || self.duration_secs <= 0.0 {
            return Err(Error::Config("duration must be positive".into()));
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if self.snr_levels_db.is_empty() {
            return Err(Error::Config("need at least one snr level".into()));
        }
        for r in &self.machines {
            if !r.fundamental_hz.is_finite() || r.fundamental_hz <= 0.0 || r.harmonics == 0 {
                return Err(Error::Config(format!(
                    "recipe for {} needs a positive fundamental and at least one harmonic",
                    r.machine
                )));
            }
        }
        Ok(())
    }

    pub fn total_files(&self) -> usize {
        self.machines.len() * (self.normal_count + self.abnormal_count) * self.snr_levels_db.len()
    }
}

/// Target RMS for clean clips; leaves headroom for the -6 dB noise bed.
const CLEAN_RMS: f64 = 0.08;

/// Economy pink-noise filter (Kellet) over a seeded white source.
fn pink_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    (0..n)
        .map(|_| {
            let white: f64 = normal.sample(rng);
            b0 = 0.99765 * b0 + white * 0.0990460;
            b1 = 0.96300 * b1 + white * 0.2965164;
            b2 = 0.57000 * b2 + white * 1.0526913;
            b0 + b1 + b2 + white * 0.1848
        })
        .collect()
}

fn normalize_rms(samples: &mut [f64], target: f64) {
    let r = (samples.iter().map(|v| v * v).sum::<f64>() / samples.len() as f64).sqrt();
    if r > 0.0 {
        let g = target / r;
        for s in samples.iter_mut() {
            *s *= g;
        }
    }
}

/// Synthesize one clean machine clip, deterministically per seed.
pub fn synth_clip(
    recipe: &MachineRecipe,
    condition: Label,
    clip_seed: u64,
    duration_secs: f64,
    sample_rate: u32,
) -> Result<AudioClip> {
    if !duration_secs.is_finite() || duration_secs <= 0.0 || sample_rate == 0 {
        return Err(Error::Config("synth clip needs positive duration and rate".into()));
    }
    let n = (duration_secs * f64::from(sample_rate)).round() as usize;
    let sr = f64::from(sample_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(clip_seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let harmonic_phases: Vec<f64> = (0..recipe.harmonics)
        .map(|_| rng.random_range(0.0..2.0 * PI))
        .collect();
    let mod_phase: f64 = rng.random_range(0.0..2.0 * PI);
    let sideband_phase: f64 = rng.random_range(0.0..2.0 * PI);

    let fault = &recipe.fault;
    let jitter_on = condition == Label::Abnormal && fault.jitter_amount > 0.0;
    let sidebands_on = condition == Label::Abnormal && fault.sideband_offset_hz > 0.0;
    let impulses_on = condition == Label::Abnormal && fault.impulse_rate_hz > 0.0;

    // Fundamental phase track; a smoothed random walk wobbles it when the
    // jitter fault is active.
    let mut phase = vec![0.0; n];
    let mut acc = 0.0;
    let mut walk = 0.0;
    for (i, p) in phase.iter_mut().enumerate() {
        if jitter_on {
            walk = 0.995 * walk + 0.07 * normal.sample(&mut rng);
        }
        let inst = recipe.fundamental_hz * (1.0 + fault.jitter_amount * walk);
        if i > 0 {
            acc += 2.0 * PI * inst / sr;
        }
        *p = acc;
    }

    let mut samples = vec![0.0; n];
    for (h, &ph0) in harmonic_phases.iter().enumerate() {
        let order = (h + 1) as f64;
        let amp = 1.0 / order;
        for (i, s) in samples.iter_mut().enumerate() {
            let t = i as f64 / sr;
            let am = 1.0 + 0.25 * (2.0 * PI * recipe.modulation_rate_hz * t + mod_phase).sin();
            let sb = if sidebands_on && h >= 1 {
                1.0 + 0.9 * (2.0 * PI * fault.sideband_offset_hz * t + sideband_phase).sin()
            } else {
                1.0
            };
            *s += amp * am * sb * (order * phase[i] + ph0).sin();
        }
    }

    let stack_rms = (samples.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();

    // Pink floor well under the stack.
    let mut floor = pink_noise(&mut rng, n);
    normalize_rms(&mut floor, 0.08 * stack_rms);
    for (s, f) in samples.iter_mut().zip(&floor) {
        *s += f;
    }

    if impulses_on {
        let period = sr / fault.impulse_rate_hz;
        let offset: f64 = rng.random_range(0.0..period);
        let burst_len = ((0.004 * sr) as usize).max(8);
        let mut start = offset;
        while (start as usize) < n {
            let begin = start as usize;
            let amp = (8.0 + 1.0 * rng.random_range(0.0..1.0)) * stack_rms;
            let burst_hz: f64 = 3400.0 + rng.random_range(-200.0..200.0);
            let burst_phase: f64 = rng.random_range(0.0..2.0 * PI);
            for j in 0..burst_len.min(n - begin) {
                let t = j as f64 / sr;
                samples[begin + j] +=
                    amp * (-t / 0.0015).exp() * (2.0 * PI * burst_hz * t + burst_phase).sin();
            }
            start += period;
        }
    }

    normalize_rms(&mut samples, CLEAN_RMS);
    AudioClip::mono(samples, sample_rate)
}

/// Seeded factory-noise bed: filtered pink noise at unit-ish level.
pub fn factory_noise(noise_seed: u64, n: usize, sample_rate: u32) -> Result<AudioClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut samples = pink_noise(&mut rng, n);
    normalize_rms(&mut samples, 0.1);
    AudioClip::mono(samples, sample_rate)
}

/// Deterministic seeds for one dataset entry.
fn entry_seeds(config_seed: u64, snr_db: i32, machine_idx: usize, label: Label, index: usize) -> (u64, u64) {
    let ctx = [
        snr_db as i64 as u64,
        machine_idx as u64,
        label as u64,
        index as u64,
    ];
    (
        seed::mix(config_seed, &[ctx[0], ctx[1], ctx[2], ctx[3], 0]),
        seed::mix(config_seed, &[ctx[0], ctx[1], ctx[2], ctx[3], 1]),
    )
}

/// Regenerate the clean clip and noise bed behind one dataset entry, plus
/// the gain the mixer applied. Lets tests measure the achieved SNR of any
/// file without trusting the mixer.
pub fn synth_components(
    config: &SynthConfig,
    snr_db: i32,
    machine_idx: usize,
    label: Label,
    index: usize,
) -> Result<(AudioClip, AudioClip, f64)> {
    let recipe = config
        .machines
        .get(machine_idx)
        .ok_or_else(|| Error::Config(format!("no machine recipe at index {machine_idx}")))?;
    let (clip_seed, noise_seed) = entry_seeds(config.seed, snr_db, machine_idx, label, index);
    let clean = synth_clip(recipe, label, clip_seed, config.duration_secs, config.sample_rate)?;
    let noise = factory_noise(noise_seed, clean.samples().len(), config.sample_rate)?;
    let gain = mix_gain(&clean, &noise, f64::from(snr_db))?;
    Ok((clean, noise, gain))
}

/// Generate the full tree under `root` in MIMII layout and return its
/// manifest (splits unassigned). Same config and seed produce a
/// byte-identical tree.
pub fn synth_dataset(config: &SynthConfig, root: impl AsRef<Path>) -> Result<Manifest> {
    config.validate()?;
    let root = root.as_ref();

    struct Job {
        snr_db: i32,
        machine_idx: usize,
        label: Label,
        index: usize,
        out: std::path::PathBuf,
    }

    let mut jobs = Vec::with_capacity(config.total_files());
    for &snr_db in &config.snr_levels_db {
        for (machine_idx, recipe) in config.machines.iter().enumerate() {
            for (label, count) in [
                (Label::Normal, config.normal_count),
                (Label::Abnormal, config.abnormal_count),
            ] {
                let dir = root
                    .join(snr_dir_name(snr_db))
                    .join(recipe.machine.as_str())
                    .join("id_00")
                    .join(label.as_str());
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                for index in 0..count {
                    jobs.push(Job {
                        snr_db,
                        machine_idx,
                        label,
                        index,
                        out: dir.join(format!("{index:08}.wav")),
                    });
                }
            }
        }
    }

    let entries: Vec<ManifestEntry> = jobs
        .par_iter()
        .map(|job| -> Result<ManifestEntry> {
            let recipe = &config.machines[job.machine_idx];
            let (clip_seed, noise_seed) =
                entry_seeds(config.seed, job.snr_db, job.machine_idx, job.label, job.index);
            let clean = synth_clip(
                recipe,
                job.label,
                clip_seed,
                config.duration_secs,
                config.sample_rate,
            )?;
            let noise = factory_noise(noise_seed, clean.samples().len(), config.sample_rate)?;
            let mixed = mix_at_snr(&clean, &noise, f64::from(job.snr_db))?;
            write_wav(&mixed, &job.out)?;
            Ok(ManifestEntry {
                path: job.out.to_string_lossy().into_owned(),
                machine: recipe.machine,
                label: job.label,
                snr_db: job.snr_db,
                split: None,
                provenance: Provenance::Original,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Manifest {
        seed: config.seed,
        entries,
    })
}
