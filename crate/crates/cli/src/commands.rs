//! The pipeline stages behind each subcommand. Every command writes its
//! RunConfig echo into the output directory first, so any artifact tree
//! identifies the exact configuration that produced it.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use audiofault_core::audio::{read_wav, to_mono};
use audiofault_core::dataset::synth::synth_dataset;
use audiofault_core::dataset::{
    balance_by_augmentation, split, verify_hygiene, Machine, Manifest, Split,
};
use audiofault_core::error::{Error, Result};
use audiofault_core::features::{
    export_png, read_feature_image, write_feature_image, Featurizer,
};
use audiofault_core::metrics::{evaluate, ConfusionMatrix, MetricsReport, REPORT_CSV_HEADER};
use audiofault_core::model::gradcheck::{grad_check_with, micro_config, GradCheckReport};
use audiofault_core::model::{
    build_model, load_checkpoint, save_checkpoint, train, LabeledSet, TrainConfig, TrainHistory,
};
use audiofault_core::seed;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::figures;

/// File-name stem for one (machine, snr) training cell, e.g. `fan_-6dB`.
pub fn cell_name(machine: Machine, snr_db: i32) -> String {
    format!("{machine}_{snr_db}dB")
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn echo_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    cfg.save(&out.join("run_config.json"))
}

/// The model consumes the feature images; their sizes have to agree.
pub fn validate_consistency(cfg: &RunConfig) -> Result<()> {
    let (h, w) = cfg.spectrogram.image_size;
    if cfg.model.input != (1, h, w) {
        return Err(Error::Config(format!(
            "model.input {:?} does not match spectrogram.image_size ({h}, {w})",
            cfg.model.input
        )));
    }
    Ok(())
}

/// Generate the synthetic dataset tree and its manifest.
pub fn run_synth(cfg: &RunConfig, root: &Path, out: &Path) -> Result<Manifest> {
    echo_config(cfg, out)?;
    let manifest = synth_dataset(&cfg.synth, root)?;
    manifest.save(out.join("manifest.json"))?;
    println!(
        "synth: {} files under {} ({} machines x {} SNR levels), manifest at {}",
        manifest.entries.len(),
        root.display(),
        cfg.synth.machines.len(),
        cfg.synth.snr_levels_db.len(),
        out.join("manifest.json").display()
    );
    Ok(manifest)
}

/// Split, balance the train split by augmentation, featurize everything
/// into the on-disk cache, and emit PNG samples of the first few images.
pub fn run_prepare(cfg: &RunConfig, manifest_path: &Path, out: &Path) -> Result<Manifest> {
    validate_consistency(cfg)?;
    echo_config(cfg, out)?;
    let manifest = Manifest::load(manifest_path)?;
    let manifest = split(manifest, cfg.split_fractions, cfg.seed)?;
    let manifest = balance_by_augmentation(
        manifest,
        &cfg.augment,
        cfg.channel_policy,
        out.join("augmented"),
        seed::mix_str(cfg.seed, "balance"),
    )?;
    verify_hygiene(&manifest, cfg.split_fractions)?;

    let features_dir = out.join("features");
    ensure_dir(&features_dir)?;
    let featurizers: Mutex<HashMap<u32, Arc<Featurizer>>> = Mutex::new(HashMap::new());
    manifest
        .entries
        .par_iter()
        .enumerate()
        .map(|(i, entry)| -> Result<()> {
            let clip = read_wav(&entry.path)?;
            let mono = to_mono(&clip, cfg.channel_policy)?;
            let featurizer = {
                let mut map = featurizers.lock().expect("featurizer cache lock");
                match map.get(&mono.sample_rate()) {
                    Some(f) => f.clone(),
                    None => {
                        let f = Arc::new(Featurizer::new(cfg.spectrogram, mono.sample_rate())?);
                        map.insert(mono.sample_rate(), f.clone());
                        f
                    }
                }
            };
            let image = featurizer.image(&mono)?;
            write_feature_image(&image, features_dir.join(feature_file(i)))
        })
        .collect::<Result<Vec<()>>>()?;

    let samples_dir = out.join("samples");
    ensure_dir(&samples_dir)?;
    for i in 0..cfg.sample_png_count.min(manifest.entries.len()) {
        let image = read_feature_image(features_dir.join(feature_file(i)))?;
        export_png(&image, samples_dir.join(format!("{i:03}.png")))?;
    }

    manifest.save(out.join("prepared_manifest.json"))?;
    println!(
        "prepare: {} entries ({} augmented), feature cache + {} sample PNGs under {}",
        manifest.entries.len(),
        manifest
            .entries
            .iter()
            .filter(|e| matches!(e.provenance, audiofault_core::dataset::Provenance::Augmented { .. }))
            .count(),
        cfg.sample_png_count.min(manifest.entries.len()),
        out.display()
    );
    Ok(manifest)
}

fn feature_file(index: usize) -> String {
    format!("{index:06}.fimg")
}

/// The feature cache lives next to the prepared manifest.
fn features_dir_for(manifest_path: &Path) -> Result<PathBuf> {
    let dir = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join("features");
    if !dir.is_dir() {
        return Err(Error::Data(format!(
            "feature cache {} not found; run prepare first",
            dir.display()
        )));
    }
    Ok(dir)
}

fn load_split_set(
    manifest: &Manifest,
    features_dir: &Path,
    machine: Machine,
    snr_db: i32,
    which: Split,
) -> Result<LabeledSet> {
    let mut set = LabeledSet::new();
    for (i, entry) in manifest.entries.iter().enumerate() {
        if entry.machine == machine && entry.snr_db == snr_db && entry.split == Some(which) {
            let image = read_feature_image(features_dir.join(feature_file(i)))?;
            set.push(image.into_pixels(), entry.label);
        }
    }
    Ok(set)
}

fn selected_cells(
    manifest: &Manifest,
    machines: Option<&[Machine]>,
    snrs: Option<&[i32]>,
) -> Vec<(Machine, i32)> {
    manifest
        .cells()
        .into_iter()
        .filter(|(m, s)| {
            machines.is_none_or(|ms| ms.contains(m)) && snrs.is_none_or(|ss| ss.contains(s))
        })
        .collect()
}

#[derive(Debug)]
pub struct CellOutcome {
    pub machine: Machine,
    pub snr_db: i32,
    pub history: Option<TrainHistory>,
    pub error: Option<String>,
}

#[derive(Debug, Default)]
pub struct TrainSummary {
    pub outcomes: Vec<CellOutcome>,
}

impl TrainSummary {
    pub fn any_diverged(&self) -> bool {
        self.outcomes.iter().any(|o| o.error.is_some())
    }
}

/// Train one model per (machine, snr) cell. Divergence is recorded per
/// cell without aborting the batch; any other failure aborts.
pub fn run_train(
    cfg: &RunConfig,
    manifest_path: &Path,
    out: &Path,
    machines: Option<&[Machine]>,
    snrs: Option<&[i32]>,
) -> Result<TrainSummary> {
    validate_consistency(cfg)?;
    echo_config(cfg, out)?;
    let manifest = Manifest::load(manifest_path)?;
    let features_dir = features_dir_for(manifest_path)?;
    let cells = selected_cells(&manifest, machines, snrs);
    if cells.is_empty() {
        return Err(Error::Data("no (machine, snr) cells selected".into()));
    }

    let mut summary = TrainSummary::default();
    for (machine, snr_db) in cells {
        let name = cell_name(machine, snr_db);
        let train_set = load_split_set(&manifest, &features_dir, machine, snr_db, Split::Train)?;
        let val_set = load_split_set(&manifest, &features_dir, machine, snr_db, Split::Val)?;
        let cell_seed = seed::mix(
            cfg.train.seed,
            &[machine as u64, snr_db as i64 as u64],
        );
        let mut model = build_model(&cfg.model, seed::mix(cell_seed, &[1]))?;
        let cell_cfg = TrainConfig {
            seed: cell_seed,
            ..cfg.train.clone()
        };
        match train(&mut model, &train_set, &val_set, &cell_cfg) {
            Ok(history) => {
                save_checkpoint(&model, out.join(format!("model_{name}.ckpt")))?;
                write_text(&out.join(format!("history_{name}.csv")), &history.to_csv())?;
                write_text(
                    &out.join(format!("curves_{name}.svg")),
                    &figures::training_curves_svg(&name.replace('_', " "), &history),
                )?;
                let best = history.best_val_epoch().unwrap_or(0);
                println!(
                    "train {name}: {} train / {} val clips, best val acc {:.4} (epoch {})",
                    train_set.len(),
                    val_set.len(),
                    history.epochs[best].val_acc,
                    best + 1
                );
                summary.outcomes.push(CellOutcome {
                    machine,
                    snr_db,
                    history: Some(history),
                    error: None,
                });
            }
            Err(e @ Error::Divergence { .. }) => {
                eprintln!("train {name}: DIVERGED: {e}");
                summary.outcomes.push(CellOutcome {
                    machine,
                    snr_db,
                    history: None,
                    error: Some(e.to_string()),
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(summary)
}

#[derive(Debug, Default)]
pub struct EvalSummary {
    pub reports: Vec<MetricsReport>,
    pub confusions: Vec<ConfusionMatrix>,
}

impl EvalSummary {
    pub fn any_undefined(&self) -> bool {
        self.reports.iter().any(|r| r.has_undefined())
    }
}

fn confusion_text(cm: &ConfusionMatrix) -> String {
    format!(
        "             pred abnormal  pred normal\n\
         actual abnormal  {:>10}  {:>11}\n\
         actual normal    {:>10}  {:>11}\n",
        cm.tpc, cm.fnc, cm.fpc, cm.tnc
    )
}

/// Evaluate every selected cell's checkpoint on its test split; write the
/// report table as CSV and JSON plus confusion matrices as text and SVG.
pub fn run_eval(
    cfg: &RunConfig,
    manifest_path: &Path,
    checkpoints: &Path,
    out: &Path,
    machines: Option<&[Machine]>,
    snrs: Option<&[i32]>,
) -> Result<EvalSummary> {
    echo_config(cfg, out)?;
    let manifest = Manifest::load(manifest_path)?;
    let features_dir = features_dir_for(manifest_path)?;
    let cells = selected_cells(&manifest, machines, snrs);
    if cells.is_empty() {
        return Err(Error::Data("no (machine, snr) cells selected".into()));
    }

    let mut summary = EvalSummary::default();
    for (machine, snr_db) in cells {
        let name = cell_name(machine, snr_db);
        let ckpt = checkpoints.join(format!("model_{name}.ckpt"));
        if !ckpt.is_file() {
            return Err(Error::Data(format!(
                "missing checkpoint {}",
                ckpt.display()
            )));
        }
        let model = load_checkpoint(&ckpt)?;
        let test_set = load_split_set(&manifest, &features_dir, machine, snr_db, Split::Test)?;
        let (report, cm) = evaluate(&model, &test_set, machine, snr_db)?;
        write_text(&out.join(format!("confusion_{name}.txt")), &confusion_text(&cm))?;
        write_text(
            &out.join(format!("confusion_{name}.svg")),
            &figures::confusion_heatmap_svg(&name.replace('_', " "), &cm),
        )?;
        summary.reports.push(report);
        summary.confusions.push(cm);
    }

    // Table rows grouped by SNR, machines in fixed order within a group.
    let mut order: Vec<usize> = (0..summary.reports.len()).collect();
    order.sort_by_key(|&i| (summary.reports[i].snr_db, summary.reports[i].machine));
    let mut csv = String::from(REPORT_CSV_HEADER);
    csv.push('\n');
    for &i in &order {
        csv.push_str(&summary.reports[i].csv_row());
        csv.push('\n');
    }
    write_text(&out.join("metrics.csv"), &csv)?;
    let ordered: Vec<&MetricsReport> = order.iter().map(|&i| &summary.reports[i]).collect();
    write_text(
        &out.join("metrics.json"),
        &serde_json::to_string_pretty(&ordered).expect("reports serialize"),
    )?;
    print!("{csv}");
    Ok(summary)
}

/// Finite-difference verification on the seeded micro model; prints the
/// per-layer worst-error table.
pub fn run_gradcheck(gc_seed: u64, corrupt_backward: bool) -> Result<GradCheckReport> {
    let report = grad_check_with(&micro_config(), gc_seed, 1e-4, corrupt_backward)?;
    println!("gradient check: {} coordinates, {} skipped at ReLU kinks", report.checked, report.skipped);
    println!("{:<24} {:>12}", "layer", "max rel err");
    for l in &report.per_layer {
        println!("{:<24} {:>12.3e}", l.layer, l.max_rel_err);
    }
    println!(
        "max relative error {:.3e} at {} [{}] (analytic {:.6e}, numeric {:.6e})",
        report.max_rel_err,
        report.worst_layer,
        report.worst_index,
        report.worst_analytic,
        report.worst_numeric
    );
    Ok(report)
}
