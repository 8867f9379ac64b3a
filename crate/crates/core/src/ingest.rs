//! Audio ingestion: WAV decoding, sample-rate harmonization, quality control,
//! trimming/normalization, and segmentation into fixed-length clips.
//!
//! All operations are pure transformations of immutable inputs and can run
//! concurrently across distinct recordings.

use std::f64::consts::PI;
use std::io::Cursor;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by the ingestion stage.
#[derive(Debug, Error)]
pub enum IngestError {
    /// The byte stream is not a decodable WAV file.
    #[error("wav decode failed: {0}")]
    Decode(String),
    /// A parameter violates an operation's precondition.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Decoded mono waveform with its sample rate and source metadata.
#[derive(Debug, Clone)]
pub struct AudioRecording {
    /// Mono samples in `[-1, 1]`.
    pub samples: Vec<f32>,
    /// Sample rate in Hz.
    pub sample_rate: u32,
    /// Opaque identifier of the source recording.
    pub source_id: String,
}

impl AudioRecording {
    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Quality-control flags for one recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcReport {
    pub duration_s: f64,
    /// Fraction of samples at or beyond the clipping level.
    pub clip_fraction: f64,
    /// Recording too short or undecodable.
    pub technical_defect: bool,
    /// Excessive clipping.
    pub amplitude_defect: bool,
    pub decode_error: bool,
}

/// Thresholds for [`assess_quality`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QcParams {
    /// Recordings shorter than this are technically defective.
    pub min_duration_s: f64,
    /// Clip fractions strictly above this are amplitude defects.
    pub clip_threshold: f64,
    /// Samples with `|x| >= clip_level` count as clipped.
    pub clip_level: f32,
}

impl Default for QcParams {
    fn default() -> Self {
        Self {
            min_duration_s: 14.0,
            clip_threshold: 0.02,
            clip_level: 0.999,
        }
    }
}

/// Fixed-length slice of a recording.
#[derive(Debug, Clone)]
pub struct Clip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    /// `source_id` of the recording this clip was cut from.
    pub parent_id: String,
    /// Offset of the clip start within the parent, in seconds.
    pub start_offset_s: f64,
}

impl Clip {
    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Decodes a WAV byte stream into a mono recording.
///
/// Accepts 16-bit integer PCM and 32-bit float payloads. Multi-channel input
/// is downmixed to mono by averaging; samples are scaled (and floats clamped)
/// to `[-1, 1]`.
pub fn decode_wav(bytes: &[u8], source_id: &str) -> Result<AudioRecording, IngestError> {
    let mut reader =
        hound::WavReader::new(Cursor::new(bytes)).map_err(|e| IngestError::Decode(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels == 0 {
        return Err(IngestError::Decode("zero channels".into()));
    }
    let channels = spec.channels as usize;

    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(|e| IngestError::Decode(e.to_string()))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v.clamp(-1.0, 1.0)))
            .collect::<Result<_, _>>()
            .map_err(|e| IngestError::Decode(e.to_string()))?,
        (fmt, bits) => {
            return Err(IngestError::Decode(format!(
                "unsupported sample format: {fmt:?} {bits}-bit"
            )))
        }
    };

    // hound tolerates a data chunk shorter than its declared size; treat the
    // mismatch as truncation.
    let declared = reader.duration() as usize;
    let frames = interleaved.len() / channels;
    if frames < declared || interleaved.len() % channels != 0 {
        return Err(IngestError::Decode(format!(
            "truncated data chunk: {frames} of {declared} frames"
        )));
    }

    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect()
    };

    Ok(AudioRecording {
        samples,
        sample_rate: spec.sample_rate,
        source_id: source_id.to_string(),
    })
}

/// Resamples a recording to `target_hz` with band-limited polyphase
/// interpolation (Hann-windowed sinc kernel, one filter phase per output
/// position within the rational upsampling lattice).
///
/// The output length is `round(n * target / source)`, which keeps the
/// duration within one sample of the input duration.
pub fn resample(rec: &AudioRecording, target_hz: u32) -> Result<AudioRecording, IngestError> {
    if target_hz == 0 {
        return Err(IngestError::InvalidParameter(
            "target sample rate must be positive".into(),
        ));
    }
    if target_hz == rec.sample_rate {
        return Ok(rec.clone());
    }

    let src = rec.sample_rate as f64;
    let dst = target_hz as f64;
    let out_len = ((rec.samples.len() as f64) * dst / src).round() as usize;

    // Kernel half-width in input samples; cutoff slightly below the narrower
    // Nyquist band for anti-aliasing when downsampling.
    const HALF_WIDTH: usize = 32;
    let cutoff = 0.95 * (dst / src).min(1.0);

    let g = gcd(rec.sample_rate as u64, target_hz as u64);
    let phases = (target_hz as u64 / g) as usize;
    let step = (rec.sample_rate as u64 / g) as usize;

    // Tap table: one row per output phase. Phase p corresponds to a fractional
    // input offset of p*step/phases mod 1.
    let taps = 2 * HALF_WIDTH;
    let mut table = vec![0.0f64; phases * taps];
    for p in 0..phases {
        let frac = (p * step % phases) as f64 / phases as f64;
        let row = &mut table[p * taps..(p + 1) * taps];
        for (t, w) in row.iter_mut().enumerate() {
            // Input index offset relative to floor(position): t - (HALF_WIDTH - 1)
            let k = t as f64 - (HALF_WIDTH - 1) as f64;
            let x = k - frac;
            *w = cutoff * sinc(cutoff * x) * hann_tap(x / HALF_WIDTH as f64);
        }
    }

    let n = rec.samples.len() as isize;
    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len {
        let pos_num = j * step;
        let base = (pos_num / phases) as isize;
        let phase = pos_num % phases;
        let row = &table[phase * taps..(phase + 1) * taps];
        let mut acc = 0.0f64;
        for (t, &w) in row.iter().enumerate() {
            let idx = base + t as isize - (HALF_WIDTH as isize - 1);
            if idx >= 0 && idx < n {
                acc += rec.samples[idx as usize] as f64 * w;
            }
        }
        out.push(acc as f32);
    }

    Ok(AudioRecording {
        samples: out,
        sample_rate: target_hz,
        source_id: rec.source_id.clone(),
    })
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Hann window over `[-1, 1]`, zero outside.
fn hann_tap(x: f64) -> f64 {
    if x.abs() >= 1.0 {
        0.0
    } else {
        0.5 * (1.0 + (PI * x).cos())
    }
}

/// Computes QC flags for a decoded recording.
///
/// `technical_defect` is set when the duration is strictly below the minimum;
/// `amplitude_defect` when the clipped fraction is strictly above the
/// threshold. Boundary values are not defects.
pub fn assess_quality(rec: &AudioRecording, params: &QcParams) -> QcReport {
    let duration_s = rec.duration_seconds();
    let clip_fraction = if rec.samples.is_empty() {
        0.0
    } else {
        let clipped = rec
            .samples
            .iter()
            .filter(|s| s.abs() >= params.clip_level)
            .count();
        clipped as f64 / rec.samples.len() as f64
    };
    QcReport {
        duration_s,
        clip_fraction,
        technical_defect: duration_s < params.min_duration_s,
        amplitude_defect: clip_fraction > params.clip_threshold,
        decode_error: false,
    }
}

/// QC report for a recording that failed to decode.
pub fn decode_failure_report() -> QcReport {
    QcReport {
        duration_s: 0.0,
        clip_fraction: 0.0,
        technical_defect: true,
        amplitude_defect: false,
        decode_error: true,
    }
}

/// Removes `head_trim_s`/`tail_trim_s` from the ends and rescales the peak to
/// `peak_target`. An all-zero signal is left unscaled.
pub fn trim_and_normalize(
    rec: &AudioRecording,
    head_trim_s: f64,
    tail_trim_s: f64,
    peak_target: f32,
) -> Result<AudioRecording, IngestError> {
    if head_trim_s < 0.0 || tail_trim_s < 0.0 {
        return Err(IngestError::InvalidParameter(
            "trim durations must be nonnegative".into(),
        ));
    }
    let head = (head_trim_s * rec.sample_rate as f64).round() as usize;
    let tail = (tail_trim_s * rec.sample_rate as f64).round() as usize;
    if head + tail >= rec.samples.len() {
        return Err(IngestError::InvalidParameter(format!(
            "trim ({} + {} samples) exceeds recording length {}",
            head,
            tail,
            rec.samples.len()
        )));
    }
    let kept = &rec.samples[head..rec.samples.len() - tail];
    let peak = kept.iter().fold(0.0f32, |m, s| m.max(s.abs()));
    let samples = if peak == 0.0 {
        kept.to_vec()
    } else {
        let scale = peak_target / peak;
        kept.iter().map(|s| s * scale).collect()
    };
    Ok(AudioRecording {
        samples,
        sample_rate: rec.sample_rate,
        source_id: rec.source_id.clone(),
    })
}

/// Cuts clips of `clip_len_s` starting at offsets `0, hop_s, 2*hop_s, ...`
/// while a full clip fits. A recording shorter than one clip yields an empty
/// sequence.
pub fn segment_clips(
    rec: &AudioRecording,
    clip_len_s: f64,
    hop_s: f64,
) -> Result<Vec<Clip>, IngestError> {
    if clip_len_s <= 0.0 || hop_s <= 0.0 {
        return Err(IngestError::InvalidParameter(
            "clip length and hop must be positive".into(),
        ));
    }
    let clip_len = (clip_len_s * rec.sample_rate as f64).round() as usize;
    let hop = (hop_s * rec.sample_rate as f64).round() as usize;
    if clip_len == 0 || hop == 0 {
        return Err(IngestError::InvalidParameter(
            "clip length and hop must be at least one sample".into(),
        ));
    }

    let mut clips = Vec::new();
    let mut start = 0usize;
    while start + clip_len <= rec.samples.len() {
        clips.push(Clip {
            samples: rec.samples[start..start + clip_len].to_vec(),
            sample_rate: rec.sample_rate,
            parent_id: rec.source_id.clone(),
            start_offset_s: start as f64 / rec.sample_rate as f64,
        });
        start += hop;
    }
    Ok(clips)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(samples: Vec<f32>, rate: u32) -> AudioRecording {
        AudioRecording {
            samples,
            sample_rate: rate,
            source_id: "test".into(),
        }
    }

    fn wav_bytes(spec: hound::WavSpec, frames: &[Vec<f32>]) -> Vec<u8> {
        let mut buf = Cursor::new(Vec::new());
        {
            let mut writer = hound::WavWriter::new(&mut buf, spec).unwrap();
            for frame in frames {
                for &s in frame {
                    match spec.sample_format {
                        hound::SampleFormat::Int => {
                            writer.write_sample((s * 32767.0) as i16).unwrap()
                        }
                        hound::SampleFormat::Float => writer.write_sample(s).unwrap(),
                    }
                }
            }
            writer.finalize().unwrap();
        }
        buf.into_inner()
    }

    #[test]
    fn decode_pcm16_silence() {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let frames: Vec<Vec<f32>> = (0..16000).map(|_| vec![0.0]).collect();
        let rec = decode_wav(&wav_bytes(spec, &frames), "sil").unwrap();
        assert_eq!(rec.samples.len(), 16000);
        assert_eq!(rec.sample_rate, 16000);
        assert!(rec.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn decode_stereo_downmix() {
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let frames: Vec<Vec<f32>> = (0..100).map(|_| vec![0.5, -0.5]).collect();
        let rec = decode_wav(&wav_bytes(spec, &frames), "st").unwrap();
        assert_eq!(rec.samples.len(), 100);
        assert!(rec.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn decode_truncated_chunk_errors() {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let frames: Vec<Vec<f32>> = (0..1000).map(|_| vec![0.25]).collect();
        let mut bytes = wav_bytes(spec, &frames);
        bytes.truncate(bytes.len() - 400);
        assert!(matches!(
            decode_wav(&bytes, "tr"),
            Err(IngestError::Decode(_))
        ));
    }

    #[test]
    fn decode_garbage_errors() {
        assert!(matches!(
            decode_wav(b"not a wav file at all", "g"),
            Err(IngestError::Decode(_))
        ));
    }

    #[test]
    fn resample_identity() {
        let r = rec(vec![0.1, -0.2, 0.3], 16000);
        let out = resample(&r, 16000).unwrap();
        assert_eq!(out.samples, r.samples);
    }

    #[test]
    fn resample_length_is_duration_preserving() {
        let r = rec(vec![0.0; 22050], 22050);
        let out = resample(&r, 16000).unwrap();
        assert_eq!(out.samples.len(), 16000);
    }

    #[test]
    fn resample_rejects_zero_rate() {
        let r = rec(vec![0.0; 100], 16000);
        assert!(matches!(
            resample(&r, 0),
            Err(IngestError::InvalidParameter(_))
        ));
    }

    /// FFT oracle: the dominant bin of a 440 Hz sine must stay at 440 Hz
    /// after 44100 -> 16000 resampling.
    #[test]
    fn resample_preserves_sine_frequency() {
        let src_rate = 44100u32;
        let n = src_rate as usize; // 1 second
        let samples: Vec<f32> = (0..n)
            .map(|i| (2.0 * PI * 440.0 * i as f64 / src_rate as f64).sin() as f32 * 0.5)
            .collect();
        let out = resample(&rec(samples, src_rate), 16000).unwrap();

        let fft_len = 16384usize;
        let mut planner = rustfft::FftPlanner::<f64>::new();
        let fft = planner.plan_fft_forward(fft_len);
        let mut buf: Vec<rustfft::num_complex::Complex<f64>> = (0..fft_len)
            .map(|i| {
                let s = if i < out.samples.len() {
                    out.samples[i] as f64
                } else {
                    0.0
                };
                rustfft::num_complex::Complex::new(s, 0.0)
            })
            .collect();
        fft.process(&mut buf);
        let peak_bin = (0..fft_len / 2)
            .max_by(|&a, &b| buf[a].norm().partial_cmp(&buf[b].norm()).unwrap())
            .unwrap();
        let bin_hz = 16000.0 / fft_len as f64;
        let peak_hz = peak_bin as f64 * bin_hz;
        assert!(
            (peak_hz - 440.0).abs() <= bin_hz,
            "peak at {peak_hz} Hz, expected 440 Hz"
        );
    }

    #[test]
    fn qc_short_recording_is_technical_defect() {
        let r = rec(vec![0.1; (13.9 * 16000.0) as usize], 16000);
        let q = assess_quality(&r, &QcParams::default());
        assert!(q.technical_defect);
        assert!(!q.amplitude_defect);
    }

    #[test]
    fn qc_clean_recording_has_no_flags() {
        let r = rec(vec![0.3; 25 * 16000], 16000);
        let q = assess_quality(&r, &QcParams::default());
        assert!(!q.technical_defect);
        assert!(!q.amplitude_defect);
        assert!(!q.decode_error);
    }

    #[test]
    fn qc_clipped_recording_is_amplitude_defect() {
        let n = 20 * 16000;
        let clipped = (n as f64 * 0.03) as usize;
        let mut samples = vec![0.2f32; n];
        for s in samples.iter_mut().take(clipped) {
            *s = 1.0;
        }
        let q = assess_quality(&rec(samples, 16000), &QcParams::default());
        assert!(q.amplitude_defect);
        assert!(!q.technical_defect);
    }

    #[test]
    fn qc_boundaries_are_not_defects() {
        // Exactly 14 s.
        let r = rec(vec![0.1; 14 * 16000], 16000);
        assert!(!assess_quality(&r, &QcParams::default()).technical_defect);

        // Clip fraction exactly at the threshold: 20 of 1000 samples.
        let mut samples = vec![0.1f32; 1000];
        for s in samples.iter_mut().take(20) {
            *s = -1.0;
        }
        let r = rec(samples, 50); // 20 s, no technical defect
        let q = assess_quality(&r, &QcParams::default());
        assert_eq!(q.clip_fraction, 0.02);
        assert!(!q.amplitude_defect);
    }

    #[test]
    fn qc_empty_recording() {
        let q = assess_quality(&rec(vec![], 16000), &QcParams::default());
        assert!(q.technical_defect);
        assert_eq!(q.duration_s, 0.0);
    }

    #[test]
    fn trim_reduces_duration() {
        let r = rec(vec![0.5; 20 * 16000], 16000);
        let out = trim_and_normalize(&r, 0.5, 0.5, 0.99).unwrap();
        assert_eq!(out.samples.len(), 19 * 16000);
    }

    #[test]
    fn normalize_hits_peak_target() {
        let mut samples = vec![0.1f32; 16000];
        samples[500] = 0.5;
        let out = trim_and_normalize(&rec(samples, 16000), 0.0, 0.0, 0.99).unwrap();
        let peak = out.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()));
        assert!((peak - 0.99).abs() < 1e-6);
    }

    #[test]
    fn normalize_leaves_silence_alone() {
        let out = trim_and_normalize(&rec(vec![0.0; 1000], 16000), 0.0, 0.0, 0.99).unwrap();
        assert!(out.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn trim_beyond_duration_errors() {
        let r = rec(vec![0.1; 16000], 16000);
        assert!(matches!(
            trim_and_normalize(&r, 0.6, 0.5, 0.99),
            Err(IngestError::InvalidParameter(_))
        ));
    }

    #[test]
    fn segment_counts() {
        let r25 = rec(vec![0.1; 25 * 16000], 16000);
        assert_eq!(segment_clips(&r25, 5.0, 5.0).unwrap().len(), 5);

        let r16 = rec(vec![0.1; 16 * 16000], 16000);
        assert_eq!(segment_clips(&r16, 5.0, 5.0).unwrap().len(), 3);

        assert_eq!(segment_clips(&r25, 5.0, 2.5).unwrap().len(), 9);
    }

    #[test]
    fn segment_short_recording_is_empty() {
        let r = rec(vec![0.1; 16000], 16000);
        assert!(segment_clips(&r, 5.0, 5.0).unwrap().is_empty());
    }

    #[test]
    fn segment_clip_lengths_are_exact() {
        let r = rec(vec![0.1; 25 * 16000], 16000);
        for clip in segment_clips(&r, 5.0, 5.0).unwrap() {
            assert_eq!(clip.samples.len(), 5 * 16000);
        }
    }

    proptest! {
        /// QC flags must equal a brute-force recomputation from definitions.
        #[test]
        fn qc_flags_match_brute_force(
            len in 0usize..40_000,
            rate in prop::sample::select(vec![1000u32, 2000, 4000]),
            clip_count in 0usize..2_000,
        ) {
            let clip_count = clip_count.min(len);
            let mut samples = vec![0.2f32; len];
            for s in samples.iter_mut().take(clip_count) {
                *s = 1.0;
            }
            let params = QcParams::default();
            let q = assess_quality(&rec(samples.clone(), rate), &params);

            let duration = len as f64 / rate as f64;
            let fraction = if len == 0 {
                0.0
            } else {
                samples.iter().filter(|s| s.abs() >= params.clip_level).count() as f64 / len as f64
            };
            prop_assert_eq!(q.technical_defect, duration < params.min_duration_s);
            prop_assert_eq!(q.amplitude_defect, fraction > params.clip_threshold);
            prop_assert_eq!(q.clip_fraction, fraction);
        }

        /// Clip count formula, non-overlap, and containment.
        #[test]
        fn segment_properties(
            dur_samples in 0usize..200_000,
            clip_s in 1u32..8,
            hop_s in 1u32..8,
        ) {
            let rate = 1000u32;
            let r = rec(vec![0.1; dur_samples], rate);
            let clips = segment_clips(&r, clip_s as f64, hop_s as f64).unwrap();

            let clip_len = clip_s as usize * rate as usize;
            let hop = hop_s as usize * rate as usize;
            let expected = if dur_samples >= clip_len {
                (dur_samples - clip_len) / hop + 1
            } else {
                0
            };
            prop_assert_eq!(clips.len(), expected);

            for (i, c) in clips.iter().enumerate() {
                let start = (c.start_offset_s * rate as f64).round() as usize;
                prop_assert_eq!(start, i * hop);
                prop_assert!(start + clip_len <= dur_samples);
            }
            if hop >= clip_len {
                for pair in clips.windows(2) {
                    let a_end = pair[0].start_offset_s + clip_s as f64;
                    prop_assert!(a_end <= pair[1].start_offset_s + 1e-9);
                }
            }
        }

        /// Re-normalizing with zero trim leaves the amplitude scale fixed.
        #[test]
        fn trim_normalize_idempotent(peak in 0.01f32..1.0) {
            let mut samples = vec![0.0f32; 1000];
            samples[123] = peak;
            samples[456] = -peak * 0.5;
            let r = rec(samples, 1000);
            let once = trim_and_normalize(&r, 0.0, 0.0, 0.99).unwrap();
            let twice = trim_and_normalize(&once, 0.0, 0.0, 0.99).unwrap();
            for (a, b) in once.samples.iter().zip(&twice.samples) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
