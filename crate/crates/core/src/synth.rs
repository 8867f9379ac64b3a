//! Deterministic synthetic respiratory-audio corpus.
//!
//! Negative-class recordings are breath-shaped band-limited noise; positives
//! add a frequency-modulated wheeze tone (plus its second harmonic at half
//! amplitude) inside the configured wheeze band. Every record draws from its
//! own RNG stream derived from `(seed, record index)`, so generation order
//! and parallelism can never change the output.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{
    save_manifest, Diagnosis, RecordEntry, RecordQuality, RecordingPoint, Sex, SourceDevice,
};

/// Errors raised by corpus generation.
#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("synth io failed: {0}")]
    Io(String),
}

/// Synthetic corpus parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_subjects_per_class: usize,
    pub recordings_per_subject: usize,
    /// Recording length in seconds (dataset minimum is 16).
    pub duration_s: f64,
    pub sample_rate: u32,
    /// Wheeze fundamental band in Hz.
    pub wheeze_freq_range: (f64, f64),
    /// Tone-over-noise ratio within an 11.7 Hz reference band, in dB.
    pub wheeze_snr_db: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_subjects_per_class: 100,
            recordings_per_subject: 1,
            duration_s: 25.0,
            sample_rate: 16000,
            wheeze_freq_range: (100.0, 1000.0),
            wheeze_snr_db: 10.0,
            seed: 42,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_subjects_per_class == 0 || self.recordings_per_subject == 0 {
            return Err(SynthError::InvalidParameter(
                "subject and recording counts must be positive".into(),
            ));
        }
        if self.duration_s < 16.0 {
            return Err(SynthError::InvalidParameter(format!(
                "duration {} below the 16 s dataset minimum",
                self.duration_s
            )));
        }
        let (lo, hi) = self.wheeze_freq_range;
        if !(0.0 < lo && lo < hi) || hi >= self.sample_rate as f64 / 2.0 {
            return Err(SynthError::InvalidParameter(format!(
                "wheeze band [{lo}, {hi}] invalid for rate {}",
                self.sample_rate
            )));
        }
        if self.sample_rate < 8000 {
            return Err(SynthError::InvalidParameter(
                "sample rate must be at least 8000 Hz".into(),
            ));
        }
        Ok(())
    }
}

/// Breath-noise band (matches the validated device band).
const NOISE_BAND_HZ: (f64, f64) = (100.0, 3000.0);
/// Base noise standard deviation during a full breath.
const NOISE_SIGMA: f64 = 0.05;
/// Envelope floor between breaths.
const ENVELOPE_FLOOR: f64 = 0.25;
/// Sensor noise floor standard deviation.
const SENSOR_SIGMA: f64 = 0.002;
/// FFT length defining the SNR reference bandwidth (3 bins at 16 kHz).
const SNR_REF_FFT: f64 = 4096.0;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Independent RNG stream for one (seed, index) pair.
fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(stream)))
}

/// Unit-variance Gaussian noise band-limited to `[f_lo, f_hi]`, synthesized
/// in the frequency domain (flat power inside the band).
fn band_noise(rng: &mut ChaCha8Rng, n: usize, rate: u32, f_lo: f64, f_hi: f64) -> Vec<f64> {
    let mut spectrum = vec![Complex::new(0.0, 0.0); n];
    let bin_hz = rate as f64 / n as f64;
    for k in 1..n / 2 {
        let f = k as f64 * bin_hz;
        if f >= f_lo && f <= f_hi {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            spectrum[k] = Complex::new(re, im);
            spectrum[n - k] = Complex::new(re, -im);
        }
    }

    let mut planner = rustfft::FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(n);
    ifft.process(&mut spectrum);

    let mut out: Vec<f64> = spectrum.iter().map(|c| c.re).collect();
    let var = out.iter().map(|x| x * x).sum::<f64>() / n as f64;
    let scale = 1.0 / var.sqrt().max(1e-30);
    for x in &mut out {
        *x *= scale;
    }
    out
}

/// Synthesizes one recording; `wheeze` adds the FM tonal component.
fn synthesize_recording(rng: &mut ChaCha8Rng, spec: &SynthSpec, wheeze: bool) -> Vec<f32> {
    let rate = spec.sample_rate;
    let n = (spec.duration_s * rate as f64).round() as usize;
    let dt = 1.0 / rate as f64;

    let breath_rate: f64 = rng.gen_range(0.2..0.4);
    let breath_phase: f64 = rng.gen_range(0.0..1.0);
    let envelope: Vec<f64> = (0..n)
        .map(|i| {
            let s = (PI * (breath_rate * i as f64 * dt + breath_phase)).sin();
            ENVELOPE_FLOOR + (1.0 - ENVELOPE_FLOOR) * s * s
        })
        .collect();

    let noise = band_noise(rng, n, rate, NOISE_BAND_HZ.0, NOISE_BAND_HZ.1);
    let mut samples: Vec<f64> = (0..n)
        .map(|i| {
            let sensor: f64 = StandardNormal.sample(rng);
            NOISE_SIGMA * envelope[i] * noise[i] + SENSOR_SIGMA * sensor
        })
        .collect();

    if wheeze {
        let (lo, hi) = spec.wheeze_freq_range;
        let margin = ((hi - lo) * 0.05).min(20.0);
        let f0: f64 = rng.gen_range(lo + margin..hi - margin);
        let deviation: f64 = rng.gen_range(2.0..6.0);
        let mod_rate: f64 = rng.gen_range(0.25..1.0);
        let mod_phase: f64 = rng.gen_range(0.0..2.0 * PI);

        // Tone power over noise power within the reference bandwidth
        // (3 FFT bins of a 4096-point transform): A² = 2·snr·σ²·B_ref/B_noise.
        let b_ref = 3.0 * rate as f64 / SNR_REF_FFT;
        let b_noise = NOISE_BAND_HZ.1 - NOISE_BAND_HZ.0;
        let snr_lin = 10f64.powf(spec.wheeze_snr_db / 10.0);
        let amp = (2.0 * snr_lin * NOISE_SIGMA * NOISE_SIGMA * b_ref / b_noise).sqrt();

        let mut phase = rng.gen_range(0.0..2.0 * PI);
        for i in 0..n {
            let t = i as f64 * dt;
            let inst = f0 + deviation * (2.0 * PI * mod_rate * t + mod_phase).sin();
            phase += 2.0 * PI * inst * dt;
            let tone = phase.sin() + 0.5 * (2.0 * phase).sin();
            samples[i] += amp * envelope[i] * tone;
        }
    }

    samples.iter().map(|&s| s.clamp(-1.0, 1.0) as f32).collect()
}

fn write_wav(path: &Path, samples: &[f32], rate: u32) -> Result<(), SynthError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer =
        hound::WavWriter::create(path, spec).map_err(|e| SynthError::Io(e.to_string()))?;
    for &s in samples {
        let v = (s as f64 * 32767.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(|e| SynthError::Io(e.to_string()))?;
    }
    writer.finalize().map_err(|e| SynthError::Io(e.to_string()))
}

/// Deterministic metadata for one subject.
fn subject_metadata(rng: &mut ChaCha8Rng) -> (Sex, u32) {
    let sex = if rng.gen_bool(0.5) { Sex::Female } else { Sex::Male };
    let age = rng.gen_range(6..=85);
    (sex, age)
}

/// Generates the corpus into `out_dir`: WAV files under `audio/` plus a
/// `manifest.jsonl` with paths relative to the manifest. Returns the entries.
pub fn generate(spec: &SynthSpec, out_dir: &Path) -> Result<Vec<RecordEntry>, SynthError> {
    spec.validate()?;
    let audio_dir = out_dir.join("audio");
    std::fs::create_dir_all(&audio_dir).map_err(|e| SynthError::Io(e.to_string()))?;

    let points = [
        RecordingPoint::Mouth,
        RecordingPoint::Trachea,
        RecordingPoint::Chest,
        RecordingPoint::Back,
    ];
    let devices = [
        SourceDevice::Specialized,
        SourceDevice::Mobile,
        SourceDevice::Web,
        SourceDevice::Computer,
        SourceDevice::Unknown,
    ];

    let mut entries = Vec::new();
    for (class_idx, class_tag) in ["a", "h"].iter().enumerate() {
        let positive = class_idx == 0;
        for subj in 0..spec.n_subjects_per_class {
            let subject_global = (class_idx * spec.n_subjects_per_class + subj) as u64;
            let mut subj_rng = derived_rng(spec.seed, 1_000_000 + subject_global);
            let (sex, age_years) = subject_metadata(&mut subj_rng);
            let subject_id = format!("subj-{class_tag}-{subj:04}");

            for rec in 0..spec.recordings_per_subject {
                let record_global = subject_global * spec.recordings_per_subject as u64 + rec as u64;
                let mut rng = derived_rng(spec.seed, record_global);

                let record_id = format!("rec-{class_tag}{subj:04}-{rec}");
                let samples = synthesize_recording(&mut rng, spec, positive);
                let rel_path = format!("audio/{record_id}.wav");
                write_wav(&out_dir.join(&rel_path), &samples, spec.sample_rate)?;

                let diagnosis = if positive {
                    Diagnosis::Asthma
                } else if rng.gen_bool(0.75) {
                    Diagnosis::Healthy
                } else {
                    Diagnosis::OtherPathology
                };
                entries.push(RecordEntry {
                    record_id,
                    subject_id: subject_id.clone(),
                    sex,
                    age_years,
                    recording_point: points[rng.gen_range(0..points.len())],
                    diagnosis,
                    record_date: format!(
                        "2024-{:02}-{:02}",
                        rng.gen_range(1..=12),
                        rng.gen_range(1..=28)
                    ),
                    record_quality: if rng.gen_bool(0.7) {
                        RecordQuality::Good
                    } else {
                        RecordQuality::Average
                    },
                    source_device: devices[rng.gen_range(0..devices.len())],
                    audio_path: rel_path,
                });
            }
        }
    }

    save_manifest(&entries, &out_dir.join("manifest.jsonl"))
        .map_err(|e| SynthError::Io(e.to_string()))?;
    Ok(entries)
}
