//! Feature extraction: STFT power spectra, HTK mel filterbanks, and fusion of
//! three analysis-window lengths into one RGB spectrogram image per clip.
//!
//! All transforms are pure and deterministic; identical clips and parameters
//! produce bit-identical images.

use std::f64::consts::PI;
use std::path::Path;

use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ingest::Clip;

/// Errors raised by feature extraction and image IO.
#[derive(Debug, Error)]
pub enum FeatureError {
    /// The signal is shorter than one analysis window.
    #[error("signal shorter than one analysis window")]
    EmptyFeature,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("image io failed: {0}")]
    Io(String),
}

/// Pixel encoding of an [`RgbSpectrogramImage`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    /// Real values in `[0, 1]`.
    Unit,
    /// Integers in `[0, 255]`.
    Byte,
}

/// Mel-spectrogram extraction parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureParams {
    /// Analysis window lengths in milliseconds, strictly increasing; one RGB
    /// channel per entry.
    pub window_lengths_ms: [f64; 3],
    /// Hop shared by all three windows, in milliseconds.
    pub hop_ms: f64,
    pub n_mels: usize,
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    /// Additive floor inside the log to keep silent input finite.
    pub log_floor: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            window_lengths_ms: [25.0, 100.0, 175.0],
            hop_ms: 10.0,
            n_mels: 128,
            f_min_hz: 0.0,
            f_max_hz: 8000.0,
            log_floor: 1e-10,
        }
    }
}

impl FeatureParams {
    /// Validates the parameter set against a clip's sample rate.
    pub fn validate(&self, sample_rate: u32) -> Result<(), FeatureError> {
        if self.n_mels == 0 {
            return Err(FeatureError::InvalidParameter("n_mels must be >= 1".into()));
        }
        if !(self.f_min_hz < self.f_max_hz) {
            return Err(FeatureError::InvalidParameter(format!(
                "f_min ({}) must be below f_max ({})",
                self.f_min_hz, self.f_max_hz
            )));
        }
        if self.f_max_hz > sample_rate as f64 / 2.0 {
            return Err(FeatureError::InvalidParameter(format!(
                "f_max ({}) exceeds Nyquist ({})",
                self.f_max_hz,
                sample_rate as f64 / 2.0
            )));
        }
        let w = &self.window_lengths_ms;
        if !(w[0] > 0.0 && w[0] < w[1] && w[1] < w[2]) {
            return Err(FeatureError::InvalidParameter(
                "window lengths must be positive and strictly increasing".into(),
            ));
        }
        if self.hop_ms <= 0.0 {
            return Err(FeatureError::InvalidParameter("hop must be positive".into()));
        }
        if self.log_floor <= 0.0 {
            return Err(FeatureError::InvalidParameter(
                "log floor must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One-sided STFT power spectra, frame-major.
#[derive(Debug, Clone)]
pub struct StftPower {
    /// `values[frame * n_bins + bin]` = squared magnitude.
    pub values: Vec<f64>,
    pub n_frames: usize,
    pub n_bins: usize,
}

/// Log-power mel spectrogram for one analysis-window length.
#[derive(Debug, Clone)]
pub struct MelSpectrogram {
    /// `values[frame * n_mels + mel]` = log power, frame-major.
    pub values: Vec<f64>,
    pub n_frames: usize,
    pub n_mels: usize,
    pub params: FeatureParams,
    pub channel_window_ms: f64,
}

/// Pixels of an [`RgbSpectrogramImage`], matching its encoding.
#[derive(Debug, Clone, PartialEq)]
pub enum PixelData {
    Unit(Vec<f32>),
    Byte(Vec<u8>),
}

/// Three-channel spectrogram image; channels 0/1/2 come from the short,
/// medium, and long analysis windows respectively.
///
/// Pixels are interleaved `[H × W × 3]` with row 0 holding the LOWEST mel
/// band; the vertical flip to conventional image orientation (high
/// frequencies at the top) happens only in [`write_image`]/[`read_image`].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbSpectrogramImage {
    /// Rows: number of mel bands.
    pub height: usize,
    /// Columns: number of frames.
    pub width: usize,
    pub pixels: PixelData,
}

impl RgbSpectrogramImage {
    pub fn encoding(&self) -> Encoding {
        match self.pixels {
            PixelData::Unit(_) => Encoding::Unit,
            PixelData::Byte(_) => Encoding::Byte,
        }
    }

    /// Pixel value on the unit scale (byte pixels are divided by 255).
    pub fn value(&self, row: usize, col: usize, channel: usize) -> f64 {
        let idx = (row * self.width + col) * 3 + channel;
        match &self.pixels {
            PixelData::Unit(v) => v[idx] as f64,
            PixelData::Byte(v) => v[idx] as f64 / 255.0,
        }
    }

    /// Content digest over dimensions, encoding, and raw pixels (hex).
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.height as u64).to_le_bytes());
        h.update((self.width as u64).to_le_bytes());
        match &self.pixels {
            PixelData::Unit(v) => {
                h.update([0u8]);
                for x in v {
                    h.update(x.to_le_bytes());
                }
            }
            PixelData::Byte(v) => {
                h.update([1u8]);
                h.update(v);
            }
        }
        let digest = h.finalize();
        let mut s = String::with_capacity(64);
        for b in digest {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }
}

/// Supported image file formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFileFormat {
    Png,
    Tiff,
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Computes Hann-windowed one-sided power spectra.
///
/// The FFT length is the next power of two at or above the window length;
/// frames are hops of `hop_ms` while a full window fits.
pub fn stft_power(
    samples: &[f32],
    sample_rate: u32,
    window_ms: f64,
    hop_ms: f64,
) -> Result<StftPower, FeatureError> {
    if window_ms <= 0.0 || hop_ms <= 0.0 {
        return Err(FeatureError::InvalidParameter(
            "window and hop must be positive".into(),
        ));
    }
    let win = (window_ms * sample_rate as f64 / 1000.0).round() as usize;
    let hop = (hop_ms * sample_rate as f64 / 1000.0).round() as usize;
    if win == 0 || hop == 0 {
        return Err(FeatureError::InvalidParameter(
            "window and hop must span at least one sample".into(),
        ));
    }
    if samples.len() < win {
        return Err(FeatureError::EmptyFeature);
    }

    let n_fft = win.next_power_of_two();
    let n_bins = n_fft / 2 + 1;
    let n_frames = (samples.len() - win) / hop + 1;

    // Periodic Hann window.
    let window: Vec<f64> = (0..win)
        .map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / win as f64).cos()))
        .collect();

    let mut planner = rustfft::FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];

    let mut values = vec![0.0f64; n_frames * n_bins];
    for t in 0..n_frames {
        let start = t * hop;
        for i in 0..n_fft {
            let s = if i < win {
                samples[start + i] as f64 * window[i]
            } else {
                0.0
            };
            buf[i] = Complex::new(s, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        let row = &mut values[t * n_bins..(t + 1) * n_bins];
        for (k, out) in row.iter_mut().enumerate() {
            *out = buf[k].norm_sqr();
        }
    }

    Ok(StftPower {
        values,
        n_frames,
        n_bins,
    })
}

/// One triangular mel filter stored as its contiguous nonzero band.
#[derive(Debug, Clone)]
pub struct MelFilter {
    pub start_bin: usize,
    pub weights: Vec<f64>,
}

/// Bank of triangular filters on the HTK mel scale.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    pub filters: Vec<MelFilter>,
    pub n_bins: usize,
    pub centers_hz: Vec<f64>,
}

impl MelFilterbank {
    /// Dense `[n_mels × n_bins]` weight matrix (test/debug aid).
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        self.filters
            .iter()
            .map(|f| {
                let mut row = vec![0.0; self.n_bins];
                row[f.start_bin..f.start_bin + f.weights.len()].copy_from_slice(&f.weights);
                row
            })
            .collect()
    }

    /// Applies the bank to one power frame.
    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        debug_assert_eq!(power.len(), self.n_bins);
        debug_assert_eq!(out.len(), self.filters.len());
        for (o, f) in out.iter_mut().zip(&self.filters) {
            let mut acc = 0.0;
            for (w, p) in f.weights.iter().zip(&power[f.start_bin..]) {
                acc += w * p;
            }
            *o = acc;
        }
    }
}

/// Builds `n_mels` triangular filters with mel-spaced centers over
/// `[f_min, f_max]`, point-sampled at FFT bin frequencies.
///
/// Errors only when the FFT grid cannot host `n_mels` filters at all
/// (fewer in-range bins than filters); narrow low-frequency filters that
/// happen to contain no bin center are left empty rather than rejected, since
/// the default 25 ms window (512-point FFT) produces a handful of them.
pub fn mel_filterbank(
    n_fft_bins: usize,
    n_mels: usize,
    f_min: f64,
    f_max: f64,
    sample_rate: u32,
) -> Result<MelFilterbank, FeatureError> {
    if n_mels == 0 {
        return Err(FeatureError::InvalidParameter("n_mels must be >= 1".into()));
    }
    if n_fft_bins < 2 {
        return Err(FeatureError::InvalidParameter(
            "need at least two FFT bins".into(),
        ));
    }
    if !(f_min < f_max) || f_max > sample_rate as f64 / 2.0 {
        return Err(FeatureError::InvalidParameter(format!(
            "frequency range [{f_min}, {f_max}] invalid for rate {sample_rate}"
        )));
    }

    let n_fft = 2 * (n_fft_bins - 1);
    let bin_hz = sample_rate as f64 / n_fft as f64;
    let in_range = (0..n_fft_bins)
        .filter(|&k| {
            let f = k as f64 * bin_hz;
            f >= f_min && f <= f_max
        })
        .count();
    if n_mels > in_range {
        return Err(FeatureError::InvalidParameter(format!(
            "n_mels ({n_mels}) exceeds the {in_range} FFT bins inside [{f_min}, {f_max}] Hz"
        )));
    }

    let mel_lo = hz_to_mel(f_min);
    let mel_hi = hz_to_mel(f_max);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();

    let mut filters = Vec::with_capacity(n_mels);
    for m in 1..=n_mels {
        let (lo, center, hi) = (edges[m - 1], edges[m], edges[m + 1]);
        let k_first = (lo / bin_hz).ceil().max(0.0) as usize;
        let mut start_bin = 0usize;
        let mut weights = Vec::new();
        for k in k_first..n_fft_bins {
            let f = k as f64 * bin_hz;
            if f >= hi {
                break;
            }
            let w = if f <= center {
                (f - lo) / (center - lo)
            } else {
                (hi - f) / (hi - center)
            };
            if w > 0.0 {
                if weights.is_empty() {
                    start_bin = k;
                }
                weights.push(w);
            } else if !weights.is_empty() {
                break;
            }
        }
        filters.push(MelFilter { start_bin, weights });
    }

    Ok(MelFilterbank {
        filters,
        n_bins: n_fft_bins,
        centers_hz: edges[1..=n_mels].to_vec(),
    })
}

/// Computes the log-power mel spectrogram of a clip for one window length.
pub fn mel_spectrogram(
    clip: &Clip,
    params: &FeatureParams,
    window_ms: f64,
) -> Result<MelSpectrogram, FeatureError> {
    params.validate(clip.sample_rate)?;
    let stft = stft_power(&clip.samples, clip.sample_rate, window_ms, params.hop_ms)?;
    let fb = mel_filterbank(
        stft.n_bins,
        params.n_mels,
        params.f_min_hz,
        params.f_max_hz,
        clip.sample_rate,
    )?;

    let mut values = vec![0.0f64; stft.n_frames * params.n_mels];
    for t in 0..stft.n_frames {
        let power = &stft.values[t * stft.n_bins..(t + 1) * stft.n_bins];
        let out = &mut values[t * params.n_mels..(t + 1) * params.n_mels];
        fb.apply(power, out);
        for v in out.iter_mut() {
            *v = (*v + params.log_floor).ln();
        }
    }

    Ok(MelSpectrogram {
        values,
        n_frames: stft.n_frames,
        n_mels: params.n_mels,
        params: params.clone(),
        channel_window_ms: window_ms,
    })
}

/// Fuses the three window lengths into one RGB image.
///
/// The three mel spectrograms share the hop, are truncated to the minimum
/// common frame count, and are min-max normalized independently per channel.
/// A constant channel maps to all zeros.
pub fn multiwindow_rgb(
    clip: &Clip,
    params: &FeatureParams,
    encoding: Encoding,
) -> Result<RgbSpectrogramImage, FeatureError> {
    params.validate(clip.sample_rate)?;
    let channels: Vec<MelSpectrogram> = params
        .window_lengths_ms
        .iter()
        .map(|&w| mel_spectrogram(clip, params, w))
        .collect::<Result<_, _>>()?;

    let width = channels.iter().map(|c| c.n_frames).min().unwrap();
    let height = params.n_mels;

    // Per-channel min/max over the common frame range.
    let mut ranges = Vec::with_capacity(3);
    for ch in &channels {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in &ch.values[..width * height] {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
        ranges.push((lo, hi));
    }

    let norm = |c: usize, v: f64| -> f64 {
        let (lo, hi) = ranges[c];
        if hi > lo {
            (v - lo) / (hi - lo)
        } else {
            0.0
        }
    };

    let n = height * width * 3;
    let pixels = match encoding {
        Encoding::Unit => {
            let mut px = vec![0.0f32; n];
            for (c, ch) in channels.iter().enumerate() {
                for t in 0..width {
                    for m in 0..height {
                        px[(m * width + t) * 3 + c] = norm(c, ch.values[t * height + m]) as f32;
                    }
                }
            }
            PixelData::Unit(px)
        }
        Encoding::Byte => {
            let mut px = vec![0u8; n];
            for (c, ch) in channels.iter().enumerate() {
                for t in 0..width {
                    for m in 0..height {
                        // Quantize the same f32 the unit encoding stores, so
                        // byte == round(unit * 255) holds exactly.
                        px[(m * width + t) * 3 + c] =
                            ((norm(c, ch.values[t * height + m]) as f32) * 255.0).round() as u8;
                    }
                }
            }
            PixelData::Byte(px)
        }
    };

    Ok(RgbSpectrogramImage {
        height,
        width,
        pixels,
    })
}

/// Writes a byte-encoded image as PNG or uncompressed 8-bit TIFF, flipping
/// rows so the highest mel band is at the top.
pub fn write_image(
    img: &RgbSpectrogramImage,
    path: &Path,
    format: ImageFileFormat,
) -> Result<(), FeatureError> {
    let bytes = match &img.pixels {
        PixelData::Byte(b) => b,
        PixelData::Unit(_) => {
            return Err(FeatureError::InvalidParameter(
                "file output requires byte encoding".into(),
            ))
        }
    };
    let (w, h) = (img.width, img.height);
    let mut raw = vec![0u8; w * h * 3];
    for y in 0..h {
        let src = h - 1 - y;
        raw[y * w * 3..(y + 1) * w * 3].copy_from_slice(&bytes[src * w * 3..(src + 1) * w * 3]);
    }
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw)
        .expect("pixel buffer matches dimensions");
    let fmt = match format {
        ImageFileFormat::Png => image::ImageFormat::Png,
        ImageFileFormat::Tiff => image::ImageFormat::Tiff,
    };
    image::DynamicImage::ImageRgb8(buf)
        .save_with_format(path, fmt)
        .map_err(|e| FeatureError::Io(e.to_string()))
}

/// Reads an image written by [`write_image`], restoring mel-ascending row
/// order. The inverse of `write_image` on byte-encoded images.
pub fn read_image(path: &Path) -> Result<RgbSpectrogramImage, FeatureError> {
    let img = image::open(path)
        .map_err(|e| FeatureError::Io(e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let flat = img.into_raw();
    let mut bytes = vec![0u8; w * h * 3];
    for y in 0..h {
        let src = h - 1 - y;
        bytes[y * w * 3..(y + 1) * w * 3].copy_from_slice(&flat[src * w * 3..(src + 1) * w * 3]);
    }
    Ok(RgbSpectrogramImage {
        height: h,
        width: w,
        pixels: PixelData::Byte(bytes),
    })
}
