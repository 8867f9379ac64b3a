//! Structured prompt construction, diagnosis parsing, and pluggable
//! inference backends for vision-language screening experiments.
//!
//! Prompts are deterministic JSON documents with optional technical and
//! patient blocks; replies are free text from which the first JSON object
//! carrying a `diagnosis` key is extracted. Backends are pluggable: a real
//! HTTP endpoint, or deterministic mocks for offline experiments.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::features::FeatureParams;
use crate::manifest::{RecordingPoint, Sex};
use crate::metrics::{self, MetricsReport};

#[derive(Debug, Error)]
pub enum VlmError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("backend error: {0}")]
    Backend(String),
}

/// Patient context attached to a prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientMetadata {
    pub sex: Sex,
    pub age_years: u32,
    pub recording_point: RecordingPoint,
}

impl PatientMetadata {
    pub fn validate(&self) -> Result<(), VlmError> {
        if self.age_years > 120 {
            return Err(VlmError::InvalidParameter(format!(
                "age {} outside [0, 120]",
                self.age_years
            )));
        }
        Ok(())
    }
}

pub const DEFAULT_INSTRUCTION: &str = "Assess the respiratory sound shown in the attached \
spectrogram. Respond with exactly one JSON object: {\"diagnosis\": \"asthma\"} or \
{\"diagnosis\": \"not asthma\"}.";

/// What goes into a prompt; toggles support ablation experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub include_demographics: bool,
    pub include_technical: bool,
    pub technical_params: FeatureParams,
    pub instruction_text: String,
}

impl Default for PromptSpec {
    fn default() -> Self {
        Self {
            include_demographics: true,
            include_technical: true,
            technical_params: FeatureParams::default(),
            instruction_text: DEFAULT_INSTRUCTION.to_string(),
        }
    }
}

// Serialization order of these structs fixes the key order in the prompt.
#[derive(Serialize)]
struct SpectrogramBlock {
    window_lengths_ms: [f64; 3],
    hop_ms: f64,
    mel_bands: usize,
    frequency_range_hz: [f64; 2],
}

#[derive(Serialize)]
struct PatientBlock<'a> {
    sex: &'a str,
    age: u32,
    recording_point: &'a str,
}

#[derive(Serialize)]
struct PromptJson<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    spectrogram_parameters: Option<SpectrogramBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    patient: Option<PatientBlock<'a>>,
    instruction: &'a str,
}

/// Renders the prompt as pretty-printed JSON with a fixed key order:
/// `spectrogram_parameters` (optional), `patient` (optional), `instruction`.
/// Byte-stable for identical inputs.
pub fn build_prompt(spec: &PromptSpec, patient: &PatientMetadata) -> Result<String, VlmError> {
    if spec.instruction_text.trim().is_empty() {
        return Err(VlmError::InvalidParameter(
            "instruction text must be non-empty".into(),
        ));
    }
    patient.validate()?;

    let doc = PromptJson {
        spectrogram_parameters: spec.include_technical.then(|| SpectrogramBlock {
            window_lengths_ms: spec.technical_params.window_lengths_ms,
            hop_ms: spec.technical_params.hop_ms,
            mel_bands: spec.technical_params.n_mels,
            frequency_range_hz: [
                spec.technical_params.f_min_hz,
                spec.technical_params.f_max_hz,
            ],
        }),
        patient: spec.include_demographics.then(|| PatientBlock {
            sex: patient.sex.as_str(),
            age: patient.age_years,
            recording_point: patient.recording_point.as_str(),
        }),
        instruction: &spec.instruction_text,
    };
    serde_json::to_string_pretty(&doc).map_err(|e| VlmError::InvalidParameter(e.to_string()))
}

pub fn prompt_hash(prompt: &str) -> String {
    let mut h = Sha256::new();
    h.update(prompt.as_bytes());
    format!("{:x}", h.finalize())
}

/// Parsed diagnosis decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosisLabel {
    Asthma,
    NotAsthma,
    /// The reply carried no usable diagnosis; never silently dropped.
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosisOutput {
    pub label: DiagnosisLabel,
    pub raw_text: String,
}

/// Canonical reply text for a label (the format requested by the default
/// instruction). Only the two concrete diagnoses render.
pub fn render_diagnosis(label: DiagnosisLabel) -> Result<String, VlmError> {
    match label {
        DiagnosisLabel::Asthma => Ok("{\"diagnosis\": \"asthma\"}".to_string()),
        DiagnosisLabel::NotAsthma => Ok("{\"diagnosis\": \"not asthma\"}".to_string()),
        DiagnosisLabel::Invalid => Err(VlmError::InvalidParameter(
            "invalid label has no canonical rendering".into(),
        )),
    }
}

/// Extracts the diagnosis from free-form reply text.
///
/// The text is scanned for balanced `{…}` spans (brace counting skips braces
/// inside JSON strings); the first span that parses as a JSON object with a
/// `diagnosis` key decides. Recognized values (case-insensitive, trimmed):
/// `asthma` -> Asthma; `not asthma`, `not_asthma`, `no asthma`, `healthy`
/// -> NotAsthma. Anything else yields `Invalid` — a value, not an error.
pub fn parse_diagnosis(text: &str) -> DiagnosisOutput {
    let invalid = || DiagnosisOutput {
        label: DiagnosisLabel::Invalid,
        raw_text: text.to_string(),
    };

    // Collect balanced object spans, ordered by start position.
    let bytes = text.as_bytes();
    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            // Quotes only matter inside a candidate object; outside braces
            // they are prose.
            b'"' if !stack.is_empty() => in_string = true,
            b'{' => stack.push(i),
            b'}' => {
                if let Some(start) = stack.pop() {
                    spans.push((start, i + 1));
                }
            }
            _ => {}
        }
    }
    spans.sort_by_key(|&(start, _)| start);

    for (start, end) in spans {
        let candidate = &text[start..end];
        let value: serde_json::Value = match serde_json::from_str(candidate) {
            Ok(v) => v,
            Err(_) => continue,
        };
        let obj = match value.as_object() {
            Some(o) => o,
            None => continue,
        };
        let diagnosis = match obj.get("diagnosis") {
            Some(d) => d,
            None => continue,
        };
        // First object with the key decides, even if its value is unusable.
        let label = match diagnosis.as_str() {
            Some(s) => match s.trim().to_lowercase().as_str() {
                "asthma" => DiagnosisLabel::Asthma,
                "not asthma" | "not_asthma" | "no asthma" | "healthy" => DiagnosisLabel::NotAsthma,
                _ => DiagnosisLabel::Invalid,
            },
            None => DiagnosisLabel::Invalid,
        };
        return DiagnosisOutput {
            label,
            raw_text: text.to_string(),
        };
    }
    invalid()
}

/// A model endpoint that turns (prompt, PNG image) into reply text.
pub trait InferenceBackend {
    fn infer(&self, prompt: &str, image_png: &[u8]) -> Result<String, VlmError>;
}

/// Environment variable holding the bearer token for [`HttpBackend`].
pub const API_TOKEN_ENV: &str = "RESPSCREEN_API_TOKEN";

/// Minimal HTTP backend: POSTs `{"prompt", "image_png_base64"}` as JSON and
/// treats the response body as the model's reply text. Transport errors are
/// retried; HTTP error statuses are not.
pub struct HttpBackend {
    endpoint: String,
    client: reqwest::blocking::Client,
    retries: u32,
}

impl HttpBackend {
    pub fn new(endpoint: &str, timeout_s: f64, retries: u32) -> Result<Self, VlmError> {
        if timeout_s <= 0.0 {
            return Err(VlmError::InvalidParameter(
                "timeout must be positive".into(),
            ));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs_f64(timeout_s))
            .build()
            .map_err(|e| VlmError::Backend(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.to_string(),
            client,
            retries,
        })
    }
}

impl InferenceBackend for HttpBackend {
    fn infer(&self, prompt: &str, image_png: &[u8]) -> Result<String, VlmError> {
        use base64::Engine;
        let body = serde_json::json!({
            "prompt": prompt,
            "image_png_base64": base64::engine::general_purpose::STANDARD.encode(image_png),
        });

        let mut last_err = String::new();
        for _ in 0..=self.retries {
            let mut req = self.client.post(&self.endpoint).json(&body);
            if let Ok(token) = std::env::var(API_TOKEN_ENV) {
                req = req.header("Authorization", format!("Bearer {token}"));
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp
                        .text()
                        .map_err(|e| VlmError::Backend(format!("reading reply: {e}")))?;
                    if !status.is_success() {
                        return Err(VlmError::Backend(format!(
                            "endpoint returned {status}: {text}"
                        )));
                    }
                    return Ok(text);
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(VlmError::Backend(format!(
            "transport failed after {} attempts: {last_err}",
            self.retries + 1
        )))
    }
}

/// Mock that replies with the same text for every query.
pub struct FixedReplyMock {
    pub reply: String,
}

impl InferenceBackend for FixedReplyMock {
    fn infer(&self, _prompt: &str, _image_png: &[u8]) -> Result<String, VlmError> {
        Ok(self.reply.clone())
    }
}

/// Deterministic mock modeling a reader that diagnoses correctly only when
/// patient context is present: prompts without a patient block always get
/// "not asthma"; prompts with one get the ground truth for the image.
pub struct DemographicsGatedMock {
    truth_by_image: BTreeMap<String, bool>,
}

impl DemographicsGatedMock {
    pub fn new() -> Self {
        Self {
            truth_by_image: BTreeMap::new(),
        }
    }

    pub fn set_truth(&mut self, image_png: &[u8], asthma: bool) {
        self.truth_by_image.insert(png_key(image_png), asthma);
    }
}

impl Default for DemographicsGatedMock {
    fn default() -> Self {
        Self::new()
    }
}

fn png_key(image_png: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(image_png);
    format!("{:x}", h.finalize())
}

impl InferenceBackend for DemographicsGatedMock {
    fn infer(&self, prompt: &str, image_png: &[u8]) -> Result<String, VlmError> {
        if !prompt.contains("\"sex\"") {
            return render_diagnosis(DiagnosisLabel::NotAsthma);
        }
        match self.truth_by_image.get(&png_key(image_png)) {
            Some(true) => render_diagnosis(DiagnosisLabel::Asthma),
            Some(false) => render_diagnosis(DiagnosisLabel::NotAsthma),
            None => Err(VlmError::Backend("image not in truth table".into())),
        }
    }
}

/// One screening item for an ablation run.
#[derive(Debug, Clone)]
pub struct AblationItem {
    pub item_id: String,
    pub patient: PatientMetadata,
    pub image_png: Vec<u8>,
    /// Ground truth: true = asthma.
    pub asthma: bool,
}

/// A named prompt variant to evaluate.
#[derive(Debug, Clone)]
pub struct AblationSpec {
    pub name: String,
    pub prompt: PromptSpec,
}

/// Per-item record of what was asked and what came back.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunLogEntry {
    pub item_id: String,
    pub prompt_sha256: String,
    pub raw_output: String,
    pub parsed_label: DiagnosisLabel,
}

/// Outcome of one prompt variant over all items.
#[derive(Debug, Serialize)]
pub struct AblationResult {
    pub name: String,
    pub metrics: MetricsReport,
    pub n_items: usize,
    pub n_invalid: usize,
    pub n_backend_errors: usize,
    #[serde(skip)]
    pub log: Vec<RunLogEntry>,
}

/// Runs every prompt variant over every item (in the given order) against
/// the backend.
///
/// Invalid or errored replies are never dropped: they are tallied and scored
/// as incorrect predictions. Backend errors are recorded per item and do not
/// abort the run.
pub fn run_ablation(
    items: &[AblationItem],
    specs: &[AblationSpec],
    backend: &dyn InferenceBackend,
) -> Result<Vec<AblationResult>, VlmError> {
    if items.is_empty() || specs.is_empty() {
        return Err(VlmError::InvalidParameter(
            "need at least one item and one prompt variant".into(),
        ));
    }

    let mut results = Vec::with_capacity(specs.len());
    for spec in specs {
        let mut log = Vec::with_capacity(items.len());
        let mut truths = Vec::with_capacity(items.len());
        let mut preds = Vec::with_capacity(items.len());
        let mut n_invalid = 0usize;
        let mut n_backend_errors = 0usize;

        for item in items {
            let prompt = build_prompt(&spec.prompt, &item.patient)?;
            let (raw, parsed) = match backend.infer(&prompt, &item.image_png) {
                Ok(raw) => {
                    let out = parse_diagnosis(&raw);
                    (raw, out.label)
                }
                Err(e) => {
                    n_backend_errors += 1;
                    (format!("<backend error: {e}>"), DiagnosisLabel::Invalid)
                }
            };
            if parsed == DiagnosisLabel::Invalid {
                n_invalid += 1;
            }
            truths.push(item.asthma);
            // An unusable reply scores as an incorrect prediction.
            preds.push(match parsed {
                DiagnosisLabel::Asthma => true,
                DiagnosisLabel::NotAsthma => false,
                DiagnosisLabel::Invalid => !item.asthma,
            });
            log.push(RunLogEntry {
                item_id: item.item_id.clone(),
                prompt_sha256: prompt_hash(&prompt),
                raw_output: raw,
                parsed_label: parsed,
            });
        }

        let counts = metrics::confusion(&truths, &preds)
            .map_err(|e| VlmError::InvalidParameter(e.to_string()))?;
        let report = metrics::summarize(counts)
            .map_err(|e| VlmError::InvalidParameter(e.to_string()))?;
        results.push(AblationResult {
            name: spec.name.clone(),
            metrics: report,
            n_items: items.len(),
            n_invalid,
            n_backend_errors,
            log,
        });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patient() -> PatientMetadata {
        PatientMetadata {
            sex: Sex::Female,
            age_years: 34,
            recording_point: RecordingPoint::Mouth,
        }
    }

    #[test]
    fn full_prompt_has_all_blocks_in_order() {
        let prompt = build_prompt(&PromptSpec::default(), &patient()).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&prompt).unwrap();
        assert_eq!(parsed["spectrogram_parameters"]["mel_bands"], 128);
        assert_eq!(
            parsed["spectrogram_parameters"]["window_lengths_ms"],
            serde_json::json!([25.0, 100.0, 175.0])
        );
        assert_eq!(parsed["spectrogram_parameters"]["hop_ms"], 10.0);
        assert_eq!(
            parsed["spectrogram_parameters"]["frequency_range_hz"],
            serde_json::json!([0.0, 8000.0])
        );
        assert_eq!(parsed["patient"]["sex"], "female");
        assert_eq!(parsed["patient"]["age"], 34);
        assert_eq!(parsed["patient"]["recording_point"], "mouth");
        assert_eq!(parsed["instruction"], DEFAULT_INSTRUCTION);

        let i_tech = prompt.find("spectrogram_parameters").unwrap();
        let i_patient = prompt.find("\"patient\"").unwrap();
        let i_instr = prompt.find("\"instruction\"").unwrap();
        assert!(i_tech < i_patient && i_patient < i_instr);
    }

    #[test]
    fn prompt_is_byte_stable() {
        let spec = PromptSpec::default();
        let a = build_prompt(&spec, &patient()).unwrap();
        let b = build_prompt(&spec, &patient()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ablated_prompts_omit_keys() {
        let no_demo = PromptSpec {
            include_demographics: false,
            ..PromptSpec::default()
        };
        let p = build_prompt(&no_demo, &patient()).unwrap();
        assert!(!p.contains("sex"));
        assert!(!p.contains("age"));
        assert!(!p.contains("recording_point"));
        assert!(p.contains("spectrogram_parameters"));

        let no_tech = PromptSpec {
            include_technical: false,
            ..PromptSpec::default()
        };
        let p = build_prompt(&no_tech, &patient()).unwrap();
        assert!(!p.contains("window"));
        assert!(!p.contains("mel"));
        assert!(!p.contains("spectrogram_parameters"));
        assert!(p.contains("\"patient\""));

        let bare = PromptSpec {
            include_demographics: false,
            include_technical: false,
            ..PromptSpec::default()
        };
        let p = build_prompt(&bare, &patient()).unwrap();
        assert!(!p.chars().any(|c| c.is_ascii_digit()), "{p}");
        assert!(p.contains("\"instruction\""));
    }

    #[test]
    fn distinct_specs_produce_distinct_prompts() {
        let mut prompts = std::collections::BTreeSet::new();
        for demo in [false, true] {
            for tech in [false, true] {
                let spec = PromptSpec {
                    include_demographics: demo,
                    include_technical: tech,
                    ..PromptSpec::default()
                };
                prompts.insert(build_prompt(&spec, &patient()).unwrap());
            }
        }
        assert_eq!(prompts.len(), 4);

        let other = PatientMetadata {
            age_years: 35,
            ..patient()
        };
        assert_ne!(
            build_prompt(&PromptSpec::default(), &patient()).unwrap(),
            build_prompt(&PromptSpec::default(), &other).unwrap()
        );
    }

    #[test]
    fn invalid_prompt_inputs_rejected() {
        let empty = PromptSpec {
            instruction_text: "   ".into(),
            ..PromptSpec::default()
        };
        assert!(matches!(
            build_prompt(&empty, &patient()),
            Err(VlmError::InvalidParameter(_))
        ));
        let ancient = PatientMetadata {
            age_years: 121,
            ..patient()
        };
        assert!(matches!(
            build_prompt(&PromptSpec::default(), &ancient),
            Err(VlmError::InvalidParameter(_))
        ));
    }

    #[test]
    fn parse_plain_object() {
        let out = parse_diagnosis("{\"diagnosis\": \"asthma\"}");
        assert_eq!(out.label, DiagnosisLabel::Asthma);
    }

    #[test]
    fn parse_noisy_and_case_insensitive() {
        let out = parse_diagnosis("Answer: {\"diagnosis\":\"NOT ASTHMA\"} thank you");
        assert_eq!(out.label, DiagnosisLabel::NotAsthma);
        assert_eq!(out.raw_text, "Answer: {\"diagnosis\":\"NOT ASTHMA\"} thank you");
    }

    #[test]
    fn parse_prose_is_invalid() {
        let out = parse_diagnosis("the patient seems fine");
        assert_eq!(out.label, DiagnosisLabel::Invalid);
    }

    #[test]
    fn parse_synonyms_and_whitespace() {
        for text in [
            "{\"diagnosis\": \"not_asthma\"}",
            "{\"diagnosis\": \"no asthma\"}",
            "{\"diagnosis\": \"healthy\"}",
            "{ \"diagnosis\" : \"  Not Asthma  \" }",
        ] {
            assert_eq!(parse_diagnosis(text).label, DiagnosisLabel::NotAsthma, "{text}");
        }
        assert_eq!(
            parse_diagnosis("{ \"diagnosis\" : \" Asthma \" }").label,
            DiagnosisLabel::Asthma
        );
    }

    #[test]
    fn parse_nested_object_decides() {
        let out = parse_diagnosis("{\"result\": {\"diagnosis\": \"asthma\"}, \"note\": \"x\"}");
        assert_eq!(out.label, DiagnosisLabel::Asthma);
    }

    #[test]
    fn parse_first_object_wins() {
        let out = parse_diagnosis("{\"diagnosis\":\"asthma\"} later {\"diagnosis\":\"healthy\"}");
        assert_eq!(out.label, DiagnosisLabel::Asthma);
    }

    #[test]
    fn parse_braces_inside_strings_are_skipped() {
        let out = parse_diagnosis("{\"note\": \"use } and { carefully\", \"diagnosis\": \"not_asthma\"}");
        assert_eq!(out.label, DiagnosisLabel::NotAsthma);
    }

    #[test]
    fn parse_unusable_values_are_invalid() {
        assert_eq!(parse_diagnosis("{\"diagnosis\": \"maybe\"}").label, DiagnosisLabel::Invalid);
        assert_eq!(parse_diagnosis("{\"diagnosis\": 3}").label, DiagnosisLabel::Invalid);
        assert_eq!(parse_diagnosis("{\"other\": \"asthma\"}").label, DiagnosisLabel::Invalid);
        assert_eq!(parse_diagnosis("{broken \"diagnosis\"").label, DiagnosisLabel::Invalid);
    }

    #[test]
    fn parse_render_round_trip() {
        for label in [DiagnosisLabel::Asthma, DiagnosisLabel::NotAsthma] {
            let rendered = render_diagnosis(label).unwrap();
            assert_eq!(parse_diagnosis(&rendered).label, label);
        }
        assert!(render_diagnosis(DiagnosisLabel::Invalid).is_err());
    }

    fn ablation_items(n_pos: usize, n_neg: usize) -> Vec<AblationItem> {
        let mut items = Vec::new();
        for i in 0..n_pos + n_neg {
            items.push(AblationItem {
                item_id: format!("item-{i:03}"),
                patient: PatientMetadata {
                    sex: if i % 2 == 0 { Sex::Female } else { Sex::Male },
                    age_years: 20 + i as u32,
                    recording_point: RecordingPoint::Mouth,
                },
                image_png: format!("fake-png-bytes-{i}").into_bytes(),
                asthma: i < n_pos,
            });
        }
        items
    }

    #[test]
    fn ablation_collapse_without_demographics() {
        let items = ablation_items(4, 4);
        let mut mock = DemographicsGatedMock::new();
        for item in &items {
            mock.set_truth(&item.image_png, item.asthma);
        }
        let specs = vec![
            AblationSpec {
                name: "full".into(),
                prompt: PromptSpec::default(),
            },
            AblationSpec {
                name: "no_demographics".into(),
                prompt: PromptSpec {
                    include_demographics: false,
                    ..PromptSpec::default()
                },
            },
        ];
        let results = run_ablation(&items, &specs, &mock).unwrap();
        assert_eq!(results.len(), 2);

        let full = &results[0];
        assert_eq!(full.metrics.accuracy, 1.0);
        assert_eq!(full.n_invalid, 0);
        assert_eq!(full.log.len(), 8);

        let ablated = &results[1];
        assert_eq!(ablated.metrics.counts.fn_, 4); // every positive missed
        assert_eq!(ablated.metrics.counts.tp, 0);
        assert_eq!(ablated.metrics.counts.tn, 4);
        assert_eq!(ablated.metrics.accuracy, 0.5);
        // Items appear in input order in the log.
        for (entry, item) in ablated.log.iter().zip(&items) {
            assert_eq!(entry.item_id, item.item_id);
        }
    }

    #[test]
    fn ablation_counts_invalid_replies_as_incorrect() {
        let items = ablation_items(2, 2);
        let backend = FixedReplyMock {
            reply: "cannot tell".into(),
        };
        let specs = vec![AblationSpec {
            name: "full".into(),
            prompt: PromptSpec::default(),
        }];
        let results = run_ablation(&items, &specs, &backend).unwrap();
        assert_eq!(results[0].n_invalid, 4);
        assert_eq!(results[0].metrics.accuracy, 0.0);
        assert_eq!(results[0].n_backend_errors, 0);
    }

    #[test]
    fn ablation_survives_backend_errors() {
        // Gated mock with an empty truth table errors on every demographic
        // query; the run must still complete and score those as incorrect.
        let items = ablation_items(1, 1);
        let mock = DemographicsGatedMock::new();
        let specs = vec![AblationSpec {
            name: "full".into(),
            prompt: PromptSpec::default(),
        }];
        let results = run_ablation(&items, &specs, &mock).unwrap();
        assert_eq!(results[0].n_backend_errors, 2);
        assert_eq!(results[0].n_invalid, 2);
        assert_eq!(results[0].metrics.accuracy, 0.0);
        assert!(results[0].log[0].raw_output.contains("backend error"));
    }

    #[test]
    fn http_backend_round_trip_and_auth_header() {
        use std::io::{Read, Write};
        std::env::set_var(API_TOKEN_ENV, "test-token-123");

        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (mut conn, _) = listener.accept().unwrap();
            let mut buf = Vec::new();
            let mut chunk = [0u8; 4096];
            loop {
                let n = conn.read(&mut chunk).unwrap();
                buf.extend_from_slice(&chunk[..n]);
                let text = String::from_utf8_lossy(&buf);
                if let Some(header_end) = text.find("\r\n\r\n") {
                    let content_len = text
                        .lines()
                        .find_map(|l| l.to_lowercase().strip_prefix("content-length:").map(str::trim).map(String::from))
                        .and_then(|v| v.parse::<usize>().ok())
                        .unwrap_or(0);
                    if buf.len() >= header_end + 4 + content_len {
                        break;
                    }
                }
            }
            let request = String::from_utf8_lossy(&buf).to_string();
            let reply = "{\"diagnosis\": \"asthma\"}";
            let response = format!(
                "HTTP/1.1 200 OK\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                reply.len(),
                reply
            );
            conn.write_all(response.as_bytes()).unwrap();
            request
        });

        let backend = HttpBackend::new(&format!("http://{addr}/infer"), 5.0, 0).unwrap();
        let reply = backend.infer("prompt text", b"png-bytes").unwrap();
        assert_eq!(parse_diagnosis(&reply).label, DiagnosisLabel::Asthma);

        let request = server.join().unwrap();
        assert!(request.contains("Bearer test-token-123"), "{request}");
        assert!(request.contains("image_png_base64"));
        std::env::remove_var(API_TOKEN_ENV);
    }

    #[test]
    fn http_backend_unreachable_reports_backend_error() {
        // Bind then drop to get a port that refuses connections.
        let port = {
            let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap().port()
        };
        let backend = HttpBackend::new(&format!("http://127.0.0.1:{port}/infer"), 0.5, 1).unwrap();
        match backend.infer("p", b"img") {
            Err(VlmError::Backend(msg)) => assert!(msg.contains("2 attempts"), "{msg}"),
            other => panic!("expected backend error, got {other:?}"),
        }
    }

    #[test]
    fn http_backend_error_status_not_retried() {
        use std::io::{Read, Write};
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            // Serve exactly one 500; a retry would hang the client instead.
            let (mut conn, _) = listener.accept().unwrap();
            let mut chunk = [0u8; 4096];
            let _ = conn.read(&mut chunk);
            conn.write_all(b"HTTP/1.1 500 Internal Server Error\r\nContent-Length: 4\r\n\r\noops")
                .unwrap();
        });
        let backend = HttpBackend::new(&format!("http://{addr}/infer"), 5.0, 3).unwrap();
        match backend.infer("p", b"img") {
            Err(VlmError::Backend(msg)) => assert!(msg.contains("500"), "{msg}"),
            other => panic!("expected backend error, got {other:?}"),
        }
        server.join().unwrap();
    }

    #[test]
    fn empty_ablation_inputs_rejected() {
        let backend = FixedReplyMock { reply: "x".into() };
        assert!(run_ablation(&[], &[], &backend).is_err());
    }
}
