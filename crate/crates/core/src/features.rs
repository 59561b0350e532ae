//! Feature path: STFT power -> mel filterbank -> log compression -> fixed
//! size normalized image.
//!
//! The mel scale uses the HTK convention, mel(f) = 2595*log10(1 + f/700),
//! with unnormalized triangular filters (peak 1) whose breakpoints are
//! equally spaced in mel. Images are single-channel grayscale in [0, 1];
//! a colormapped rendering would add size without information.

use std::fs;
use std::io::BufWriter;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};

/// Analysis window shape. Only Hann is supported; the field exists so the
/// choice is recorded in serialized configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WindowKind {
    #[default]
    Hann,
}

/// Everything that parameterizes the clip -> image transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrogramParams {
    pub n_fft: usize,
    pub hop: usize,
    pub window: WindowKind,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// Log floor in dB; also sets the epsilon inside the log.
    pub log_floor_db: f64,
    /// (height, width) of the image fed to the classifier.
    pub image_size: (usize, usize),
}

impl Default for SpectrogramParams {
    fn default() -> Self {
        SpectrogramParams {
            n_fft: 1024,
            hop: 512,
            window: WindowKind::Hann,
            n_mels: 64,
            f_min: 0.0,
            f_max: 8000.0,
            log_floor_db: -80.0,
            image_size: (64, 64),
        }
    }
}

impl SpectrogramParams {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if self.hop == 0 || self.hop > self.n_fft {
            return Err(Error::Config(format!(
                "hop {} must be in (0, n_fft={}]",
                self.hop, self.n_fft
            )));
        }
        if self.n_mels < 2 {
            return Err(Error::Config("n_mels must be >= 2".into()));
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max) {
            return Err(Error::Config(format!(
                "need 0 <= f_min < f_max, got [{}, {}]",
                self.f_min, self.f_max
            )));
        }
        let nyquist = f64::from(sample_rate) / 2.0;
        if self.f_max > nyquist {
            return Err(Error::Config(format!(
                "f_max {} exceeds Nyquist {nyquist}",
                self.f_max
            )));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::Config("image size must be nonzero".into()));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank: `n_mels` rows over `n_fft/2 + 1` FFT bins.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    /// Row i is filter i's weight on each FFT bin.
    pub weights: Array2<f64>,
    /// Peak frequency of each filter, Hz.
    pub centers_hz: Vec<f64>,
}

/// Build the filterbank: n_mels + 2 breakpoints equally spaced in mel
/// between f_min and f_max; filter i ramps linearly in Hz from breakpoint i
/// up to 1 at breakpoint i+1 and back to 0 at breakpoint i+2.
pub fn mel_filterbank(params: &SpectrogramParams, sample_rate: u32) -> Result<MelFilterbank> {
    params.validate(sample_rate)?;
    let bins = params.bins();
    let mel_lo = hz_to_mel(params.f_min);
    let mel_hi = hz_to_mel(params.f_max);
    let n = params.n_mels;
    let points: Vec<f64> = (0..n + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n + 1) as f64))
        .collect();
    let bin_hz = f64::from(sample_rate) / params.n_fft as f64;
    let mut weights = Array2::zeros((n, bins));
    for i in 0..n {
        let (left, center, right) = (points[i], points[i + 1], points[i + 2]);
        for b in 0..bins {
            let f = b as f64 * bin_hz;
            let w = if f <= left || f >= right {
                0.0
            } else if f <= center {
                if center > left { (f - left) / (center - left) } else { 0.0 }
            } else if right > center {
                (right - f) / (right - center)
            } else {
                0.0
            };
            weights[[i, b]] = w;
        }
    }
    Ok(MelFilterbank {
        weights,
        centers_hz: points[1..=n].to_vec(),
    })
}

fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

/// Number of analysis frames for a clip of `len` samples.
pub fn frame_count(len: usize, n_fft: usize, hop: usize) -> usize {
    if len < n_fft {
        0
    } else {
        1 + (len - n_fft) / hop
    }
}

/// Windowed STFT power: entry (k, t) is |DFT of Hann-windowed frame t at
/// bin k|^2, for bins 0..=n_fft/2.
pub fn stft_power(clip: &AudioClip, params: &SpectrogramParams) -> Result<Array2<f64>> {
    let fft = FftPlanner::new().plan_fft_forward(params.n_fft);
    stft_power_with(clip, params, &fft)
}

fn stft_power_with(
    clip: &AudioClip,
    params: &SpectrogramParams,
    fft: &Arc<dyn Fft<f64>>,
) -> Result<Array2<f64>> {
    let x = clip.mono_samples()?;
    if params.hop == 0 || params.hop > params.n_fft {
        return Err(Error::Config("hop must be in (0, n_fft]".into()));
    }
    if x.len() < params.n_fft {
        return Err(Error::TooShort {
            len: x.len(),
            n_fft: params.n_fft,
        });
    }
    let frames = frame_count(x.len(), params.n_fft, params.hop);
    let bins = params.bins();
    let window = hann_periodic(params.n_fft);
    let mut out = Array2::zeros((bins, frames));
    let mut buf = vec![Complex::new(0.0, 0.0); params.n_fft];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for t in 0..frames {
        let start = t * params.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(x[start + i] * window[i], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for k in 0..bins {
            out[[k, t]] = buf[k].norm_sqr();
        }
    }
    Ok(out)
}

/// Log-compressed mel spectrogram, dB, floored at `log_floor_db`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    /// n_mels x frames.
    pub values: Array2<f64>,
    pub params: SpectrogramParams,
}

pub fn mel_spectrogram(clip: &AudioClip, params: &SpectrogramParams) -> Result<MelSpectrogram> {
    let fb = mel_filterbank(params, clip.sample_rate())?;
    let fft = FftPlanner::new().plan_fft_forward(params.n_fft);
    mel_spectrogram_with(clip, params, &fb, &fft)
}

fn mel_spectrogram_with(
    clip: &AudioClip,
    params: &SpectrogramParams,
    fb: &MelFilterbank,
    fft: &Arc<dyn Fft<f64>>,
) -> Result<MelSpectrogram> {
    let power = stft_power_with(clip, params, fft)?;
    let mut values = fb.weights.dot(&power);
    let floor = params.log_floor_db;
    let eps = 10f64.powf(floor / 10.0);
    values.mapv_inplace(|p| (10.0 * (p + eps).log10()).max(floor));
    Ok(MelSpectrogram {
        values,
        params: *params,
    })
}

/// A normalized single-channel image in [0, 1], ready for the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImage {
    pixels: Array2<f64>,
}

impl FeatureImage {
    pub fn new(pixels: Array2<f64>) -> Result<Self> {
        if pixels.is_empty() {
            return Err(Error::Data("empty feature image".into()));
        }
        if pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Data("feature image values must lie in [0, 1]".into()));
        }
        Ok(FeatureImage { pixels })
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array2<f64> {
        self.pixels
    }

    pub fn dims(&self) -> (usize, usize) {
        self.pixels.dim()
    }
}

/// Bilinear resize (corner-aligned) followed by min-max normalization to
/// [0, 1]. A constant input maps to the all-zero image.
pub fn to_feature_image(mel: &MelSpectrogram, image_size: (usize, usize)) -> Result<FeatureImage> {
    if mel.values.is_empty() {
        return Err(Error::Data("empty mel spectrogram".into()));
    }
    if image_size.0 == 0 || image_size.1 == 0 {
        return Err(Error::Config("image size must be nonzero".into()));
    }
    let resized = bilinear_resize(&mel.values, image_size.0, image_size.1);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in resized.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    let pixels = if span > 0.0 {
        resized.mapv(|v| ((v - lo) / span).clamp(0.0, 1.0))
    } else {
        Array2::zeros(image_size)
    };
    FeatureImage::new(pixels)
}

/// Corner-aligned bilinear interpolation: output corners sample input
/// corners exactly.
fn bilinear_resize(src: &Array2<f64>, h_out: usize, w_out: usize) -> Array2<f64> {
    let (h_in, w_in) = src.dim();
    let fy = if h_out > 1 && h_in > 1 {
        (h_in - 1) as f64 / (h_out - 1) as f64
    } else {
        0.0
    };
    let fx = if w_out > 1 && w_in > 1 {
        (w_in - 1) as f64 / (w_out - 1) as f64
    } else {
        0.0
    };
    let mut out = Array2::zeros((h_out, w_out));
    for r in 0..h_out {
        let sy = r as f64 * fy;
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h_in - 1);
        let ty = sy - y0 as f64;
        for c in 0..w_out {
            let sx = c as f64 * fx;
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w_in - 1);
            let tx = sx - x0 as f64;
            let top = src[[y0, x0]] * (1.0 - tx) + src[[y0, x1]] * tx;
            let bot = src[[y1, x0]] * (1.0 - tx) + src[[y1, x1]] * tx;
            out[[r, c]] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Write an image as 8-bit grayscale PNG, pixel = round(255 * value).
pub fn export_png(image: &FeatureImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = image.dims();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Data(format!("png encode: {e}")))?;
    let data: Vec<u8> = image
        .pixels
        .iter()
        .map(|&v| (255.0 * v).round() as u8)
        .collect();
    writer
        .write_image_data(&data)
        .map_err(|e| Error::Data(format!("png encode: {e}")))?;
    Ok(())
}

/// Read back an 8-bit grayscale PNG written by [`export_png`].
pub fn read_png(path: impl AsRef<Path>) -> Result<FeatureImage> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Data(format!("png decode: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| Error::Data("png too large".into()))?];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Data(format!("png decode: {e}")))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Data(format!(
            "expected 8-bit grayscale png, got {:?}/{:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let pixels = Array2::from_shape_vec(
        (h, w),
        buf[..w * h].iter().map(|&b| f64::from(b) / 255.0).collect(),
    )
    .map_err(|e| Error::Data(format!("png shape: {e}")))?;
    FeatureImage::new(pixels)
}

/// Magic bytes of the on-disk feature tensor cache.
pub const FEATURE_MAGIC: [u8; 4] = *b"FIMG";

/// Cache format: magic, height and width as little-endian u32, then
/// row-major little-endian f32 values.
pub fn write_feature_image(image: &FeatureImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = image.dims();
    let mut buf = Vec::with_capacity(12 + 4 * h * w);
    buf.extend_from_slice(&FEATURE_MAGIC);
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for &v in image.pixels.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_feature_image(path: impl AsRef<Path>) -> Result<FeatureImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || bytes[0..4] != FEATURE_MAGIC {
        return Err(Error::Data(format!(
            "{} is not a feature cache file",
            path.display()
        )));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + 4 * h * w {
        return Err(Error::Data(format!(
            "{}: feature cache length mismatch",
            path.display()
        )));
    }
    let values: Vec<f64> = bytes[12..]
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    let pixels = Array2::from_shape_vec((h, w), values)
        .map_err(|e| Error::Data(format!("feature cache shape: {e}")))?;
    FeatureImage::new(pixels)
}

/// Shared, read-only featurizer: filterbank and FFT plan are built once and
/// reused across worker threads.
pub struct Featurizer {
    params: SpectrogramParams,
    sample_rate: u32,
    filterbank: MelFilterbank,
    fft: Arc<dyn Fft<f64>>,
}

impl Featurizer {
    pub fn new(params: SpectrogramParams, sample_rate: u32) -> Result<Self> {
        let filterbank = mel_filterbank(&params, sample_rate)?;
        let fft = FftPlanner::new().plan_fft_forward(params.n_fft);
        Ok(Featurizer {
            params,
            sample_rate,
            filterbank,
            fft,
        })
    }

    pub fn params(&self) -> &SpectrogramParams {
        &self.params
    }

    pub fn mel(&self, clip: &AudioClip) -> Result<MelSpectrogram> {
        if clip.sample_rate() != self.sample_rate {
            return Err(Error::RateMismatch {
                a: clip.sample_rate(),
                b: self.sample_rate,
            });
        }
        mel_spectrogram_with(clip, &self.params, &self.filterbank, &self.fft)
    }

    /// Clip -> normalized image at the configured size.
    pub fn image(&self, clip: &AudioClip) -> Result<FeatureImage> {
        to_feature_image(&self.mel(clip)?, self.params.image_size)
    }
}
