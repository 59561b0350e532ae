//! Acoustic fault-detection pipeline for industrial machine sounds.
//!
//! The crate turns WAV recordings (or a synthetic stand-in generated in the
//! same MIMII-style layout) into log-mel spectrogram images, trains a small
//! densely-connected CNN from scratch to separate normal from abnormal
//! sounds, and evaluates it with a full confusion-matrix metric suite plus
//! ROC-AUC, per machine type and per SNR level.
//!
//! Modules follow the pipeline order:
//!
//! - [`audio`]: WAV I/O, channel reduction, band-limited resampling, RMS
//! - [`augment`]: noise injection, time shift, pitch change, speed change,
//!   SNR-controlled mixing
//! - [`features`]: STFT -> mel filterbank -> log compression -> normalized
//!   image, plus PNG export and a binary feature cache
//! - [`dataset`]: manifests over MIMII-layout trees, stratified splitting,
//!   train-split balancing, synthetic data generation
//! - [`model`]: the dense-connectivity CNN with exact backward passes, SGD
//!   with momentum, training loop, checkpoints, gradient verification
//! - [`metrics`]: confusion matrix, accuracy/precision/recall/F1/kappa/MCC
//!   and ROC-AUC reports
//!
//! Everything downstream of a seed is deterministic: same inputs, same
//! seed, same bytes.

pub mod audio;
pub mod augment;
pub mod dataset;
pub mod error;
pub mod features;
pub mod metrics;
pub mod model;
pub mod seed;

pub use audio::{read_wav, rms, to_mono, write_wav, AudioClip, ChannelPolicy};
pub use augment::{
    inject_noise, mix_at_snr, pitch_shift, speed_change, time_shift, AugmentKind, AugmentRanges,
    AugmentSpec, ShiftMode,
};
pub use dataset::synth::{synth_clip, synth_dataset, SynthConfig};
pub use dataset::{
    balance_by_augmentation, scan_mimii, split, verify_hygiene, Label, Machine, Manifest,
    ManifestEntry, Provenance, Split,
};
pub use error::{Error, Result};
pub use features::{
    mel_filterbank, mel_spectrogram, stft_power, to_feature_image, FeatureImage, Featurizer,
    MelSpectrogram, SpectrogramParams,
};
pub use metrics::{
    confusion, evaluate, metric_suite, roc_auc, ConfusionMatrix, MetricsReport,
    REPORT_CSV_HEADER,
};
pub use model::{
    build_model, load_checkpoint, loss_bce, save_checkpoint, train, LabeledSet, Model,
    ModelConfig, TrainConfig, TrainHistory,
};
