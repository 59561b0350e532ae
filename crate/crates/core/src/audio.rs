//! Sample-accurate audio I/O and the signal primitives everything else
//! builds on.
//!
//! A clip is a buffer of `f64` samples in nominal range [-1, 1], stored
//! interleaved (frame-major), with its sample rate and channel count. WAV
//! support is deliberately narrow: RIFF/WAVE, 16-bit PCM, little-endian, any
//! rate and channel count. Extra chunks are skipped; anything else is
//! rejected with an error naming the encoding found.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Full-scale divisor for 16-bit PCM.
const PCM_SCALE: f64 = 32768.0;

/// Default tap count for the windowed-sinc resampler.
pub const DEFAULT_SINC_TAPS: usize = 64;

/// Kaiser window shape parameter (~80 dB stopband).
const KAISER_BETA: f64 = 8.6;

/// How a multi-channel recording is reduced to the mono form the feature
/// path works on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelPolicy {
    /// Keep a single channel by index.
    SelectChannel(usize),
    /// Arithmetic mean across channels, per frame.
    Average,
}

impl Default for ChannelPolicy {
    fn default() -> Self {
        ChannelPolicy::SelectChannel(0)
    }
}

/// A buffer of audio samples plus the metadata needed to interpret it.
///
/// Samples are interleaved: frame f, channel c lives at `f * channels + c`.
/// Invariants (enforced on construction): sample count is a multiple of the
/// channel count, the rate is positive, and every sample is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
    channels: usize,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32, channels: usize) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidAudio("sample rate must be positive".into()));
        }
        if channels == 0 {
            return Err(Error::InvalidAudio("channel count must be >= 1".into()));
        }
        if !samples.len().is_multiple_of(channels) {
            return Err(Error::InvalidAudio(format!(
                "{} samples is not a whole number of {}-channel frames",
                samples.len(),
                channels
            )));
        }
        if let Some(bad) = samples.iter().find(|s| !s.is_finite()) {
            return Err(Error::InvalidAudio(format!("non-finite sample {bad}")));
        }
        Ok(AudioClip {
            samples,
            sample_rate,
            channels,
        })
    }

    /// Single-channel constructor.
    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        AudioClip::new(samples, sample_rate, 1)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of frames (samples per channel).
    pub fn frames(&self) -> usize {
        self.samples.len() / self.channels
    }

    pub fn duration_secs(&self) -> f64 {
        self.frames() as f64 / self.sample_rate as f64
    }

    pub fn is_mono(&self) -> bool {
        self.channels == 1
    }

    /// Borrow the sample buffer of a mono clip; errors on multi-channel
    /// input so DSP stages cannot silently misread interleaved data.
    pub fn mono_samples(&self) -> Result<&[f64]> {
        if self.channels == 1 {
            Ok(&self.samples)
        } else {
            Err(Error::NotMono {
                channels: self.channels,
            })
        }
    }

    /// A copy of this clip with every sample multiplied by `gain`.
    pub fn scaled(&self, gain: f64) -> Result<AudioClip> {
        AudioClip::new(
            self.samples.iter().map(|s| s * gain).collect(),
            self.sample_rate,
            self.channels,
        )
    }
}

/// Read a RIFF/WAVE 16-bit PCM file into a clip scaled to [-1, 1].
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes, path)
}

fn u16_le(bytes: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([bytes[at], bytes[at + 1]])
}

fn u32_le(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn format_name(tag: u16, bits: u16) -> String {
    match tag {
        1 => format!("{bits}-bit PCM"),
        3 => format!("IEEE float (format 3, {bits}-bit)"),
        6 => "A-law (format 6)".into(),
        7 => "mu-law (format 7)".into(),
        0xFFFE => "extensible with non-PCM subformat".into(),
        other => format!("format tag {other:#06x}"),
    }
}

fn parse_wav(bytes: &[u8], path: &Path) -> Result<AudioClip> {
    let corrupt = |detail: &str| Error::CorruptFile {
        path: path.to_path_buf(),
        detail: detail.into(),
    };
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::NotWave {
            path: path.to_path_buf(),
        });
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // tag, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    let mut pos = 12usize;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_le(bytes, pos + 4) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if body + 16 > bytes.len() || size < 16 {
                    return Err(corrupt("fmt chunk too small"));
                }
                let mut tag = u16_le(bytes, body);
                let channels = u16_le(bytes, body + 2);
                let rate = u32_le(bytes, body + 4);
                let bits = u16_le(bytes, body + 14);
                // WAVE_FORMAT_EXTENSIBLE wraps the real format in a GUID; the
                // first two GUID bytes are the classic tag.
                if tag == 0xFFFE && size >= 40 && body + 26 <= bytes.len() {
                    let sub = u16_le(bytes, body + 24);
                    if sub == 1 {
                        tag = 1;
                    }
                }
                fmt = Some((tag, channels, rate, bits));
            }
            b"data" => {
                let end = body.checked_add(size).ok_or_else(|| corrupt("data chunk size overflow"))?;
                if end > bytes.len() {
                    return Err(corrupt("data chunk truncated"));
                }
                data = Some(&bytes[body..end]);
            }
            _ => {} // unknown chunks are skipped
        }
        // Chunks are word-aligned; odd sizes carry a pad byte.
        pos = body + size + (size & 1);
    }

    let (tag, channels, rate, bits) = fmt.ok_or_else(|| corrupt("missing fmt chunk"))?;
    if tag != 1 || bits != 16 {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            found: format_name(tag, bits),
        });
    }
    if channels == 0 {
        return Err(corrupt("zero channel count"));
    }
    if rate == 0 {
        return Err(corrupt("zero sample rate"));
    }
    let data = data.ok_or_else(|| corrupt("missing data chunk"))?;
    if data.len() % 2 != 0 {
        return Err(corrupt("odd data chunk length"));
    }
    let n = data.len() / 2;
    if n % channels as usize != 0 {
        return Err(corrupt("data chunk ends mid-frame"));
    }
    let samples: Vec<f64> = data
        .chunks_exact(2)
        .map(|b| f64::from(i16::from_le_bytes([b[0], b[1]])) / PCM_SCALE)
        .collect();
    AudioClip::new(samples, rate, channels as usize)
}

/// Write a clip as canonical 44-byte-header RIFF/WAVE 16-bit PCM.
///
/// Samples are clamped to [-1, 1] before quantization, so a round trip
/// through disk moves each sample by at most one quantization step
/// (1/32768).
pub fn write_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let data_len = clip.samples.len() * 2;
    let mut buf = Vec::with_capacity(44 + data_len);
    buf.extend_from_slice(b"RIFF");
    buf.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    buf.extend_from_slice(b"WAVE");
    buf.extend_from_slice(b"fmt ");
    buf.extend_from_slice(&16u32.to_le_bytes());
    buf.extend_from_slice(&1u16.to_le_bytes()); // PCM
    buf.extend_from_slice(&(clip.channels as u16).to_le_bytes());
    buf.extend_from_slice(&clip.sample_rate.to_le_bytes());
    let byte_rate = clip.sample_rate * clip.channels as u32 * 2;
    buf.extend_from_slice(&byte_rate.to_le_bytes());
    buf.extend_from_slice(&(clip.channels as u16 * 2).to_le_bytes());
    buf.extend_from_slice(&16u16.to_le_bytes());
    buf.extend_from_slice(b"data");
    buf.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &clip.samples {
        let q = (s.clamp(-1.0, 1.0) * PCM_SCALE).round().clamp(-32768.0, 32767.0) as i16;
        buf.extend_from_slice(&q.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reduce a clip to one channel. Frame count is preserved.
pub fn to_mono(clip: &AudioClip, policy: ChannelPolicy) -> Result<AudioClip> {
    let ch = clip.channels;
    let out = match policy {
        ChannelPolicy::SelectChannel(k) => {
            if k >= ch {
                return Err(Error::ChannelOutOfRange {
                    index: k,
                    channels: ch,
                });
            }
            clip.samples.iter().skip(k).step_by(ch).copied().collect()
        }
        ChannelPolicy::Average => clip
            .samples
            .chunks_exact(ch)
            .map(|frame| frame.iter().sum::<f64>() / ch as f64)
            .collect(),
    };
    AudioClip::mono(out, clip.sample_rate)
}

/// Root-mean-square over all samples.
pub fn rms(clip: &AudioClip) -> Result<f64> {
    if clip.samples.is_empty() {
        return Err(Error::EmptyClip);
    }
    let sum_sq: f64 = clip.samples.iter().map(|s| s * s).sum();
    Ok((sum_sq / clip.samples.len() as f64).sqrt())
}

/// Band-limited resampling with the default tap count.
pub fn resample(clip: &AudioClip, new_rate: u32) -> Result<AudioClip> {
    resample_with_taps(clip, new_rate, DEFAULT_SINC_TAPS)
}

/// Band-limited (Kaiser-windowed sinc) resampling of a mono clip.
///
/// Output length is `round(len * new_rate / old_rate)`. When downsampling,
/// the kernel cutoff follows the new Nyquist so the analysis band cannot
/// alias.
pub fn resample_with_taps(clip: &AudioClip, new_rate: u32, taps: usize) -> Result<AudioClip> {
    let x = clip.mono_samples()?;
    if new_rate == 0 {
        return Err(Error::Range("resample target rate must be positive".into()));
    }
    if new_rate == clip.sample_rate {
        return Ok(clip.clone());
    }
    let ratio = f64::from(new_rate) / f64::from(clip.sample_rate);
    AudioClip::mono(resample_ratio(x, ratio, taps), new_rate)
}

/// Core interpolator: sample the band-limited reconstruction of `x` at
/// stride `1/ratio`, producing `round(len * ratio)` samples. Used both for
/// rate conversion and for speed change (where the nominal rate is kept).
pub(crate) fn resample_ratio(x: &[f64], ratio: f64, taps: usize) -> Vec<f64> {
    debug_assert!(ratio.is_finite() && ratio > 0.0);
    let n_in = x.len();
    let n_out = (n_in as f64 * ratio).round() as usize;
    if n_in == 0 || n_out == 0 {
        return Vec::new();
    }
    let cutoff = ratio.min(1.0); // relative to the input Nyquist
    let half = taps as f64 / 2.0 / cutoff;
    let i0_beta = bessel_i0(KAISER_BETA);
    let mut out = Vec::with_capacity(n_out);
    for j in 0..n_out {
        let t = j as f64 / ratio;
        let k0 = (t - half).ceil().max(0.0) as usize;
        let k1 = ((t + half).floor() as isize).min(n_in as isize - 1);
        let mut acc = 0.0;
        let mut ksum = 0.0;
        if k1 >= 0 {
            for (k, &xv) in x.iter().enumerate().take(k1 as usize + 1).skip(k0) {
                let d = k as f64 - t;
                let h = cutoff * sinc(cutoff * d) * kaiser(d / half, i0_beta);
                acc += xv * h;
                ksum += h;
            }
        }
        // Normalizing by the kernel sum removes passband ripple at
        // fractional phases and compensates edge-truncated kernels.
        out.push(if ksum.abs() > 1e-3 { acc / ksum } else { acc });
    }
    out
}

fn sinc(u: f64) -> f64 {
    if u.abs() < 1e-12 {
        1.0
    } else {
        let pu = std::f64::consts::PI * u;
        pu.sin() / pu
    }
}

/// Kaiser window on [-1, 1], zero outside.
fn kaiser(u: f64, i0_beta: f64) -> f64 {
    if u.abs() >= 1.0 {
        0.0
    } else {
        bessel_i0(KAISER_BETA * (1.0 - u * u).sqrt()) / i0_beta
    }
}

/// Modified Bessel function of the first kind, order zero (power series).
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for m in 1..64 {
        let f = half / m as f64;
        term *= f * f;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn pcm_scaling_definition() {
        // A file holding the single 16-bit value 32767 reads as ~0.99997.
        let dir = tmp();
        let p = dir.path().join("one.wav");
        let clip = AudioClip::mono(vec![32767.0 / PCM_SCALE], 16000).unwrap();
        write_wav(&clip, &p).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.samples().len(), 1);
        assert!((back.samples()[0] - 0.99997).abs() < 1e-4);
    }

    #[test]
    fn write_then_read_is_identity_on_quantized_values() {
        let dir = tmp();
        let p = dir.path().join("rt.wav");
        let clip = AudioClip::new(
            (0..480).map(|i| ((i as f64) / 240.0 - 1.0) * 0.9).collect(),
            8000,
            2,
        )
        .unwrap();
        write_wav(&clip, &p).unwrap();
        let once = read_wav(&p).unwrap();
        write_wav(&once, &p).unwrap();
        let twice = read_wav(&p).unwrap();
        assert_eq!(once, twice);
        // and the first pass is within one quantization step
        for (a, b) in clip.samples().iter().zip(once.samples()) {
            assert!((a - b).abs() <= 1.0 / PCM_SCALE);
        }
    }

    #[test]
    fn eight_channel_ten_second_file_shape() {
        let dir = tmp();
        let p = dir.path().join("8ch.wav");
        let frames = 160_000;
        let clip = AudioClip::new(vec![0.01; frames * 8], 16000, 8).unwrap();
        write_wav(&clip, &p).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.frames(), frames);
        assert_eq!(back.channels(), 8);
        assert!((back.duration_secs() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn header_declares_duration() {
        let dir = tmp();
        let p = dir.path().join("1s.wav");
        let clip = AudioClip::mono(vec![0.0; 16000], 16000).unwrap();
        write_wav(&clip, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        let rate = u32_le(&bytes, 24);
        let byte_rate = u32_le(&bytes, 28);
        let data_len = u32_le(&bytes, 40);
        assert_eq!(rate, 16000);
        assert_eq!(data_len, 32000);
        assert_eq!(data_len / byte_rate, 1); // one second
    }

    #[test]
    fn out_of_range_samples_clamp_to_full_scale() {
        let dir = tmp();
        let p = dir.path().join("clip.wav");
        let clip = AudioClip::mono(vec![1.5, -1.5], 16000).unwrap();
        write_wav(&clip, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        let a = i16::from_le_bytes([bytes[44], bytes[45]]);
        let b = i16::from_le_bytes([bytes[46], bytes[47]]);
        assert_eq!(a, 32767);
        assert_eq!(b, -32768);
    }

    #[test]
    fn empty_clip_round_trips() {
        let dir = tmp();
        let p = dir.path().join("empty.wav");
        let clip = AudioClip::mono(vec![], 22050).unwrap();
        write_wav(&clip, &p).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.frames(), 0);
        assert_eq!(back.sample_rate(), 22050);
    }

    #[test]
    fn extra_chunks_are_skipped() {
        let dir = tmp();
        let p = dir.path().join("extra.wav");
        let clip = AudioClip::mono(vec![0.25, -0.25], 16000).unwrap();
        write_wav(&clip, &p).unwrap();
        // splice a LIST chunk between fmt and data
        let bytes = fs::read(&p).unwrap();
        let mut spliced = bytes[..36].to_vec();
        spliced.extend_from_slice(b"LIST");
        spliced.extend_from_slice(&4u32.to_le_bytes());
        spliced.extend_from_slice(b"INFO");
        spliced.extend_from_slice(&bytes[36..]);
        let riff_len = (spliced.len() - 8) as u32;
        spliced[4..8].copy_from_slice(&riff_len.to_le_bytes());
        fs::write(&p, spliced).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.frames(), 2);
    }

    #[test]
    fn non_pcm_encoding_is_named() {
        let dir = tmp();
        let p = dir.path().join("f32.wav");
        let clip = AudioClip::mono(vec![0.0; 4], 16000).unwrap();
        write_wav(&clip, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[20..22].copy_from_slice(&3u16.to_le_bytes()); // IEEE float
        bytes[34..36].copy_from_slice(&32u16.to_le_bytes());
        fs::write(&p, bytes).unwrap();
        match read_wav(&p) {
            Err(Error::UnsupportedFormat { found, .. }) => {
                assert!(found.contains("IEEE float"), "got: {found}")
            }
            other => panic!("expected UnsupportedFormat, got {other:?}"),
        }
    }

    #[test]
    fn truncated_data_chunk_is_corrupt() {
        let dir = tmp();
        let p = dir.path().join("trunc.wav");
        let clip = AudioClip::mono(vec![0.1; 100], 16000).unwrap();
        write_wav(&clip, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
        match read_wav(&p) {
            Err(Error::CorruptFile { detail, .. }) => {
                assert!(detail.contains("truncated"), "got: {detail}")
            }
            other => panic!("expected CorruptFile, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        match read_wav("/nonexistent/nope.wav") {
            Err(Error::Io { .. }) => {}
            other => panic!("expected Io, got {other:?}"),
        }
    }

    #[test]
    fn mono_average_of_symmetric_frame_is_zero() {
        let clip = AudioClip::new(vec![0.5, -0.5, 0.25, -0.25], 16000, 2).unwrap();
        let mono = to_mono(&clip, ChannelPolicy::Average).unwrap();
        assert_eq!(mono.samples(), &[0.0, 0.0]);
    }

    #[test]
    fn select_channel_zero_on_mono_is_identity() {
        let clip = AudioClip::mono(vec![0.1, 0.2, 0.3], 16000).unwrap();
        let out = to_mono(&clip, ChannelPolicy::SelectChannel(0)).unwrap();
        assert_eq!(out, clip);
    }

    #[test]
    fn select_channel_out_of_range() {
        let clip = AudioClip::mono(vec![0.1], 16000).unwrap();
        match to_mono(&clip, ChannelPolicy::SelectChannel(1)) {
            Err(Error::ChannelOutOfRange { index: 1, channels: 1 }) => {}
            other => panic!("expected ChannelOutOfRange, got {other:?}"),
        }
    }

    #[test]
    fn select_channel_matches_direct_extraction() {
        // 8-channel frames where channel c of frame f holds f + c/10.
        let frames = 64;
        let mut samples = Vec::new();
        for f in 0..frames {
            for c in 0..8 {
                samples.push(f as f64 / 100.0 + c as f64 / 1000.0);
            }
        }
        let clip = AudioClip::new(samples.clone(), 16000, 8).unwrap();
        let mono = to_mono(&clip, ChannelPolicy::SelectChannel(3)).unwrap();
        for f in 0..frames {
            assert_eq!(mono.samples()[f], samples[f * 8 + 3]);
        }
    }

    #[test]
    fn resample_same_rate_is_identity() {
        let clip = AudioClip::mono(vec![0.1, -0.2, 0.3], 16000).unwrap();
        assert_eq!(resample(&clip, 16000).unwrap(), clip);
    }

    #[test]
    fn resample_length_formula() {
        let clip = AudioClip::mono(vec![0.0; 16000], 16000).unwrap();
        assert_eq!(resample(&clip, 8000).unwrap().frames(), 8000);
        assert_eq!(resample(&clip, 8000).unwrap().sample_rate(), 8000);
    }

    #[test]
    fn resample_zero_rate_errors() {
        let clip = AudioClip::mono(vec![0.0; 100], 16000).unwrap();
        assert!(matches!(resample(&clip, 0), Err(Error::Range(_))));
    }

    #[test]
    fn rms_trivial_cases() {
        let zeros = AudioClip::mono(vec![0.0; 123], 16000).unwrap();
        assert_eq!(rms(&zeros).unwrap(), 0.0);
        let half = AudioClip::mono(vec![0.5; 7], 16000).unwrap();
        assert_eq!(rms(&half).unwrap(), 0.5);
        let empty = AudioClip::mono(vec![], 16000).unwrap();
        assert!(matches!(rms(&empty), Err(Error::EmptyClip)));
    }

    #[test]
    fn rms_of_whole_period_sine_is_inverse_sqrt_two() {
        let n = 16000;
        let cycles = 40.0;
        let samples: Vec<f64> = (0..n)
            .map(|i| (2.0 * PI * cycles * i as f64 / n as f64).sin())
            .collect();
        let clip = AudioClip::mono(samples, 16000).unwrap();
        assert!((rms(&clip).unwrap() - 1.0 / 2f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn power_of_two_gain_scales_rms_exactly() {
        // Power-of-two gains are exact in binary floating point, so the
        // scaling law holds with zero tolerance.
        let samples: Vec<f64> = (0..512).map(|i| ((i * 37) % 101) as f64 / 101.0 - 0.5).collect();
        let clip = AudioClip::mono(samples, 16000).unwrap();
        for gain in [0.25, 0.5, 2.0, 4.0] {
            let scaled = clip.scaled(gain).unwrap();
            assert_eq!(rms(&scaled).unwrap(), gain.abs() * rms(&clip).unwrap());
        }
    }

    #[test]
    fn non_finite_samples_rejected() {
        assert!(AudioClip::mono(vec![f64::NAN], 16000).is_err());
        assert!(AudioClip::mono(vec![f64::INFINITY], 16000).is_err());
        assert!(AudioClip::new(vec![0.0; 3], 16000, 2).is_err());
        assert!(AudioClip::mono(vec![], 0).is_err());
    }
}
