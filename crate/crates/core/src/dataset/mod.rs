//! Manifest construction, stratified splitting, and train-split balancing.
//!
//! The on-disk layout mirrors MIMII: `root/<snr>/<machine>/<id>/{normal,
//! abnormal}/*.wav`, where the SNR directory is e.g. `-6_dB`. A manifest is
//! a JSON catalog of clips with machine, label, SNR tag, split assignment
//! and augmentation provenance; paths are stored exactly as constructed
//! from the root argument, so relative roots yield relocatable manifests.

pub mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, to_mono, write_wav, ChannelPolicy};
use crate::augment::{apply, sample_spec, AugmentKind, AugmentRanges};
use crate::augment::AugmentSpec;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Machine {
    Fan,
    Pump,
    Slider,
    Valve,
}

impl Machine {
    pub const ALL: [Machine; 4] = [Machine::Fan, Machine::Pump, Machine::Slider, Machine::Valve];

    pub fn as_str(self) -> &'static str {
        match self {
            Machine::Fan => "fan",
            Machine::Pump => "pump",
            Machine::Slider => "slider",
            Machine::Valve => "valve",
        }
    }

    /// Capitalized form used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Machine::Fan => "Fan",
            Machine::Pump => "Pump",
            Machine::Slider => "Slider",
            Machine::Valve => "Valve",
        }
    }

    pub fn from_dir(name: &str) -> Option<Machine> {
        match name {
            "fan" => Some(Machine::Fan),
            "pump" => Some(Machine::Pump),
            "slider" => Some(Machine::Slider),
            "valve" => Some(Machine::Valve),
            _ => None,
        }
    }
}

impl std::fmt::Display for Machine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Machine {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Machine::from_dir(&s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown machine {s:?}")))
    }
}

/// Binary condition; `Abnormal` is the positive class throughout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Abnormal,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Abnormal => "abnormal",
        }
    }

    pub fn is_abnormal(self) -> bool {
        self == Label::Abnormal
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Where an entry came from: scanned off disk, or generated from a train
/// clip by a recorded transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Augmented { spec: AugmentSpec, source: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub machine: Machine,
    pub label: Label,
    pub snr_db: i32,
    pub split: Option<Split>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(json: &str) -> Result<Manifest> {
        serde_json::from_str(json).map_err(|e| Error::Data(format!("manifest parse: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), self.to_json()).map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Manifest::from_json(&text)
    }

    /// Entries belonging to one training cell.
    pub fn cell(&self, machine: Machine, snr_db: i32, split: Split) -> Vec<&ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| e.machine == machine && e.snr_db == snr_db && e.split == Some(split))
            .collect()
    }

    /// Distinct (machine, snr) pairs present, sorted.
    pub fn cells(&self) -> Vec<(Machine, i32)> {
        let set: BTreeSet<(Machine, i32)> =
            self.entries.iter().map(|e| (e.machine, e.snr_db)).collect();
        set.into_iter().collect()
    }
}

/// SNR directory name used by the MIMII layout, e.g. `-6_dB`.
pub fn snr_dir_name(snr_db: i32) -> String {
    format!("{snr_db}_dB")
}

fn parse_snr_dir(name: &str) -> Option<i32> {
    let stripped = name
        .strip_suffix("_dB")
        .or_else(|| name.strip_suffix("_db"))
        .or_else(|| name.strip_suffix("dB"))
        .or_else(|| name.strip_suffix("db"))
        .unwrap_or(name);
    stripped.parse::<i32>().ok()
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if path.is_dir() && !name.starts_with('.') {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

fn sorted_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file()
            && path
                .extension()
                .is_some_and(|ext| ext.eq_ignore_ascii_case("wav"))
        {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn dir_name(path: &Path) -> String {
    path.file_name().unwrap_or_default().to_string_lossy().into_owned()
}

/// Walk a MIMII-layout tree (`snr/machine/id/{normal,abnormal}/*.wav`) into
/// a manifest with splits unassigned. Stray files are ignored; a directory
/// that does not fit the layout fails with its path.
pub fn scan_mimii(root: impl AsRef<Path>) -> Result<Manifest> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", root.display())));
    }
    let mut entries = Vec::new();
    for snr_dir in sorted_subdirs(root)? {
        let snr_db = parse_snr_dir(&dir_name(&snr_dir)).ok_or_else(|| Error::Layout {
            path: snr_dir.clone(),
        })?;
        for machine_dir in sorted_subdirs(&snr_dir)? {
            let machine = Machine::from_dir(&dir_name(&machine_dir)).ok_or_else(|| {
                Error::Layout {
                    path: machine_dir.clone(),
                }
            })?;
            for id_dir in sorted_subdirs(&machine_dir)? {
                for label_dir in sorted_subdirs(&id_dir)? {
                    let label = match dir_name(&label_dir).as_str() {
                        "normal" => Label::Normal,
                        "abnormal" => Label::Abnormal,
                        _ => {
                            return Err(Error::Layout {
                                path: label_dir.clone(),
                            })
                        }
                    };
                    for wav in sorted_wavs(&label_dir)? {
                        entries.push(ManifestEntry {
                            path: wav.to_string_lossy().into_owned(),
                            machine,
                            label,
                            snr_db,
                            split: None,
                            provenance: Provenance::Original,
                        });
                    }
                }
            }
        }
    }
    Ok(Manifest { seed: 0, entries })
}

/// Stratified split with a seeded shuffle per (machine, label, snr) stratum
/// and contiguous assignment. Val and test sizes are floored; the remainder
/// goes to train. Strata smaller than 3 go entirely to train with a
/// warning.
pub fn split(mut manifest: Manifest, fractions: (f64, f64, f64), split_seed: u64) -> Result<Manifest> {
    let (ft, fv, fe) = fractions;
    if !(ft >= 0.0 && fv >= 0.0 && fe >= 0.0) || (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be non-negative and sum to 1, got ({ft}, {fv}, {fe})"
        )));
    }
    let mut strata: BTreeMap<(Machine, Label, i32), Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        strata.entry((e.machine, e.label, e.snr_db)).or_default().push(i);
    }
    for ((machine, label, snr_db), mut idxs) in strata {
        let stratum_seed = seed::mix(
            split_seed,
            &[machine as u64, label as u64, snr_db as i64 as u64],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(stratum_seed);
        idxs.shuffle(&mut rng);
        let n = idxs.len();
        if n < 3 {
            log::warn!(
                "stratum ({machine}, {}, {snr_db} dB) has only {n} entries; assigning all to train",
                label.as_str()
            );
            for &i in &idxs {
                manifest.entries[i].split = Some(Split::Train);
            }
            continue;
        }
        let n_val = (n as f64 * fv + 1e-9).floor() as usize;
        let n_test = (n as f64 * fe + 1e-9).floor() as usize;
        let n_train = n - n_val - n_test;
        for (pos, &i) in idxs.iter().enumerate() {
            manifest.entries[i].split = Some(if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            });
        }
    }
    manifest.seed = split_seed;
    Ok(manifest)
}

/// Bring the train-split minority class of every (machine, snr) cell to
/// parity with its majority by generating augmented copies, cycling the
/// four transforms over the minority clips with per-clip seeded magnitudes.
/// Generated WAVs land under `aug_dir`; provenance records the spec and the
/// source path.
pub fn balance_by_augmentation(
    mut manifest: Manifest,
    ranges: &AugmentRanges,
    policy: ChannelPolicy,
    aug_dir: impl AsRef<Path>,
    balance_seed: u64,
) -> Result<Manifest> {
    let aug_dir = aug_dir.as_ref();
    if manifest.entries.iter().any(|e| e.split.is_none()) {
        return Err(Error::Data(
            "balance_by_augmentation requires split assignments".into(),
        ));
    }

    struct Job {
        source: ManifestEntry,
        kind: AugmentKind,
        job_seed: u64,
        out_path: PathBuf,
    }

    let mut jobs: Vec<Job> = Vec::new();
    let mut cells: BTreeMap<(Machine, i32), (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        if e.split == Some(Split::Train) {
            let slot = cells.entry((e.machine, e.snr_db)).or_default();
            match e.label {
                Label::Normal => slot.0.push(i),
                Label::Abnormal => slot.1.push(i),
            }
        }
    }
    for ((machine, snr_db), (normal, abnormal)) in &cells {
        let (minority, majority) = if normal.len() <= abnormal.len() {
            (normal, abnormal)
        } else {
            (abnormal, normal)
        };
        if minority.len() == majority.len() {
            continue;
        }
        if minority.is_empty() {
            return Err(Error::Data(format!(
                "cannot balance {machine} at {snr_db} dB: minority train stratum is empty"
            )));
        }
        let mut sources: Vec<usize> = minority.clone();
        sources.sort_by(|&a, &b| manifest.entries[a].path.cmp(&manifest.entries[b].path));
        let needed = majority.len() - minority.len();
        let dir = aug_dir.join(machine.as_str()).join(snr_dir_name(*snr_db));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..needed {
            let kind = AugmentKind::ALL[i % AugmentKind::ALL.len()];
            let source = manifest.entries[sources[i % sources.len()]].clone();
            let job_seed = seed::mix(
                balance_seed,
                &[*machine as u64, *snr_db as i64 as u64, i as u64],
            );
            let out_path = dir.join(format!("aug_{i:05}_{}.wav", kind.name()));
            jobs.push(Job {
                source,
                kind,
                job_seed,
                out_path,
            });
        }
    }

    let new_entries: Vec<ManifestEntry> = jobs
        .par_iter()
        .map(|job| -> Result<ManifestEntry> {
            let clip = read_wav(&job.source.path)?;
            let mono = to_mono(&clip, policy)?;
            let spec = sample_spec(job.kind, ranges, mono.duration_secs(), job.job_seed);
            let out = apply(&mono, &spec)?;
            write_wav(&out, &job.out_path)?;
            Ok(ManifestEntry {
                path: job.out_path.to_string_lossy().into_owned(),
                machine: job.source.machine,
                label: job.source.label,
                snr_db: job.source.snr_db,
                split: Some(Split::Train),
                provenance: Provenance::Augmented {
                    spec,
                    source: job.source.path.clone(),
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;

    manifest.entries.extend(new_entries);
    Ok(manifest)
}

/// Dataset hygiene: unique paths, augmented entries confined to train with
/// train sources, and per-stratum original proportions within one entry of
/// the requested val/test fractions (train within two: flooring val and
/// test can hand it both remainders). Strata below the 3-entry splitting
/// threshold are exempt from the proportion check.
pub fn verify_hygiene(manifest: &Manifest, fractions: (f64, f64, f64)) -> Result<()> {
    let mut seen = BTreeSet::new();
    for e in &manifest.entries {
        if !seen.insert(e.path.as_str()) {
            return Err(Error::Data(format!("duplicate manifest path {}", e.path)));
        }
    }
    let split_of: BTreeMap<&str, Option<Split>> = manifest
        .entries
        .iter()
        .map(|e| (e.path.as_str(), e.split))
        .collect();
    for e in &manifest.entries {
        if let Provenance::Augmented { source, .. } = &e.provenance {
            if e.split != Some(Split::Train) {
                return Err(Error::Data(format!(
                    "augmented entry {} is outside the train split",
                    e.path
                )));
            }
            match split_of.get(source.as_str()) {
                Some(Some(Split::Train)) => {}
                _ => {
                    return Err(Error::Data(format!(
                        "augmented entry {} has non-train source {source}",
                        e.path
                    )))
                }
            }
        }
    }
    let mut strata: BTreeMap<(Machine, Label, i32), [usize; 3]> = BTreeMap::new();
    for e in &manifest.entries {
        if e.provenance != Provenance::Original {
            continue;
        }
        let counts = strata.entry((e.machine, e.label, e.snr_db)).or_default();
        match e.split {
            Some(Split::Train) => counts[0] += 1,
            Some(Split::Val) => counts[1] += 1,
            Some(Split::Test) => counts[2] += 1,
            None => {
                return Err(Error::Data(format!("entry {} has no split", e.path)));
            }
        }
    }
    for ((machine, label, snr_db), counts) in strata {
        let n = counts.iter().sum::<usize>();
        if n < 3 {
            continue;
        }
        let targets = [
            n as f64 * fractions.0,
            n as f64 * fractions.1,
            n as f64 * fractions.2,
        ];
        let slack = [2.0, 1.0, 1.0];
        for ((got, want), allow) in counts.iter().zip(targets).zip(slack) {
            if (*got as f64 - want).abs() > allow + 1e-9 {
                return Err(Error::Data(format!(
                    "stratum ({machine}, {}, {snr_db} dB) counts {counts:?} deviate from {targets:?}",
                    label.as_str()
                )));
            }
        }
    }
    Ok(())
}
