//! Dataset manifest: JSON-lines schema, validation, summary counts, and
//! leakage-free subject-level stratified splitting.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by manifest loading and splitting.
#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest io failed: {0}")]
    Io(String),
    /// One message per offending row, each prefixed with its line number.
    #[error("manifest validation failed:\n{}", errors.join("\n"))]
    Validation { errors: Vec<String> },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub fn as_str(&self) -> &'static str {
        match self {
            Sex::Female => "female",
            Sex::Male => "male",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordingPoint {
    Mouth,
    Trachea,
    Chest,
    Back,
}

impl RecordingPoint {
    pub fn as_str(&self) -> &'static str {
        match self {
            RecordingPoint::Mouth => "mouth",
            RecordingPoint::Trachea => "trachea",
            RecordingPoint::Chest => "chest",
            RecordingPoint::Back => "back",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diagnosis {
    Asthma,
    Healthy,
    OtherPathology,
}

impl Diagnosis {
    pub fn as_str(&self) -> &'static str {
        match self {
            Diagnosis::Asthma => "asthma",
            Diagnosis::Healthy => "healthy",
            Diagnosis::OtherPathology => "other_pathology",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordQuality {
    Good,
    Average,
    Poor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceDevice {
    Specialized,
    Mobile,
    Web,
    Computer,
    Unknown,
}

impl SourceDevice {
    pub fn as_str(&self) -> &'static str {
        match self {
            SourceDevice::Specialized => "specialized",
            SourceDevice::Mobile => "mobile",
            SourceDevice::Web => "web",
            SourceDevice::Computer => "computer",
            SourceDevice::Unknown => "unknown",
        }
    }
}

/// One manifest row describing a recording and its subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub record_id: String,
    pub subject_id: String,
    pub sex: Sex,
    pub age_years: u32,
    pub recording_point: RecordingPoint,
    pub diagnosis: Diagnosis,
    /// ISO date `YYYY-MM-DD`.
    pub record_date: String,
    pub record_quality: RecordQuality,
    pub source_device: SourceDevice,
    /// Audio file path, relative to the manifest's directory.
    pub audio_path: String,
}

/// Train/test split parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    /// Subsample to equal class sizes before splitting.
    pub balance: bool,
    /// Subjects kept per class when balancing (defaults to the smaller class).
    pub pool_size_per_class: Option<usize>,
}

/// Per-dimension entry counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSummary {
    pub total: usize,
    pub by_sex: BTreeMap<String, usize>,
    pub by_diagnosis: BTreeMap<String, usize>,
    pub by_recording_point: BTreeMap<String, usize>,
    pub by_source_device: BTreeMap<String, usize>,
}

/// Parses and validates a JSON-lines manifest.
///
/// Every row is checked; all row-level problems (parse failures, duplicate
/// record ids) are aggregated into one `Validation` error listing line
/// numbers. Blank lines are ignored.
pub fn load_manifest(path: &Path) -> Result<Vec<RecordEntry>, ManifestError> {
    let text = std::fs::read_to_string(path).map_err(|e| ManifestError::Io(e.to_string()))?;
    parse_manifest(&text)
}

/// [`load_manifest`] on in-memory text.
pub fn parse_manifest(text: &str) -> Result<Vec<RecordEntry>, ManifestError> {
    let mut entries = Vec::new();
    let mut errors = Vec::new();
    let mut seen_ids: HashMap<String, usize> = HashMap::new();

    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RecordEntry>(line) {
            Ok(entry) => {
                if let Some(first) = seen_ids.get(&entry.record_id) {
                    errors.push(format!(
                        "line {line_no}: duplicate record_id `{}` (first seen on line {first})",
                        entry.record_id
                    ));
                } else {
                    seen_ids.insert(entry.record_id.clone(), line_no);
                }
                entries.push(entry);
            }
            Err(e) => errors.push(format!("line {line_no}: {e}")),
        }
    }

    if errors.is_empty() {
        Ok(entries)
    } else {
        Err(ManifestError::Validation { errors })
    }
}

/// Serializes entries as one JSON object per line.
pub fn save_manifest(entries: &[RecordEntry], path: &Path) -> Result<(), ManifestError> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("RecordEntry serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| ManifestError::Io(e.to_string()))
}

/// Counts entries along each categorical dimension.
pub fn summarize(entries: &[RecordEntry]) -> ManifestSummary {
    let mut s = ManifestSummary {
        total: entries.len(),
        by_sex: BTreeMap::new(),
        by_diagnosis: BTreeMap::new(),
        by_recording_point: BTreeMap::new(),
        by_source_device: BTreeMap::new(),
    };
    for e in entries {
        *s.by_sex.entry(e.sex.as_str().into()).or_insert(0) += 1;
        *s.by_diagnosis.entry(e.diagnosis.as_str().into()).or_insert(0) += 1;
        *s.by_recording_point
            .entry(e.recording_point.as_str().into())
            .or_insert(0) += 1;
        *s.by_source_device
            .entry(e.source_device.as_str().into())
            .or_insert(0) += 1;
    }
    s
}

/// Splits subjects (not recordings) into train and test sets, stratified by
/// class. A subject is positive when any of their recordings is asthma.
///
/// Subjects are sorted by id before the seeded shuffle, so the split does not
/// depend on manifest row order. With `balance` (or an explicit
/// `pool_size_per_class`) each class is first subsampled to the pool size.
/// Returns sorted (train, test) subject-id lists.
pub fn stratified_subject_split(
    entries: &[RecordEntry],
    spec: &SplitSpec,
) -> Result<(Vec<String>, Vec<String>), ManifestError> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(ManifestError::InvalidParameter(format!(
            "train_fraction {} outside (0, 1)",
            spec.train_fraction
        )));
    }

    let mut subject_class: BTreeMap<&str, bool> = BTreeMap::new();
    for e in entries {
        let positive = subject_class.entry(&e.subject_id).or_insert(false);
        *positive |= e.diagnosis == Diagnosis::Asthma;
    }

    let mut positives: Vec<&str> = Vec::new();
    let mut negatives: Vec<&str> = Vec::new();
    for (subject, &is_pos) in &subject_class {
        if is_pos {
            positives.push(subject);
        } else {
            negatives.push(subject);
        }
    }
    if positives.len() < 2 || negatives.len() < 2 {
        return Err(ManifestError::InvalidParameter(format!(
            "need at least 2 subjects per class, got {} positive / {} negative",
            positives.len(),
            negatives.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    positives.shuffle(&mut rng);
    negatives.shuffle(&mut rng);

    if spec.balance || spec.pool_size_per_class.is_some() {
        let pool = spec
            .pool_size_per_class
            .unwrap_or_else(|| positives.len().min(negatives.len()));
        if pool < 2 {
            return Err(ManifestError::InvalidParameter(
                "pool size must be at least 2 per class".into(),
            ));
        }
        if positives.len() < pool || negatives.len() < pool {
            return Err(ManifestError::InvalidParameter(format!(
                "pool of {pool} per class exceeds available subjects ({} positive / {} negative)",
                positives.len(),
                negatives.len()
            )));
        }
        positives.truncate(pool);
        negatives.truncate(pool);
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in [&positives, &negatives] {
        let n = class.len();
        let n_train = ((spec.train_fraction * n as f64).round() as usize).clamp(1, n - 1);
        train.extend(class[..n_train].iter().map(|s| s.to_string()));
        test.extend(class[n_train..].iter().map(|s| s.to_string()));
    }
    train.sort();
    test.sort();
    Ok((train, test))
}

/// Filters entries to the given subject set, preserving order.
pub fn filter_by_subjects(entries: &[RecordEntry], subjects: &[String]) -> Vec<RecordEntry> {
    let set: BTreeSet<&str> = subjects.iter().map(|s| s.as_str()).collect();
    entries
        .iter()
        .filter(|e| set.contains(e.subject_id.as_str()))
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(record: &str, subject: &str, diagnosis: Diagnosis) -> RecordEntry {
        RecordEntry {
            record_id: record.into(),
            subject_id: subject.into(),
            sex: Sex::Female,
            age_years: 34,
            recording_point: RecordingPoint::Mouth,
            diagnosis,
            record_date: "2024-03-15".into(),
            record_quality: RecordQuality::Good,
            source_device: SourceDevice::Specialized,
            audio_path: format!("audio/{record}.wav"),
        }
    }

    #[test]
    fn empty_manifest_is_empty() {
        assert!(parse_manifest("").unwrap().is_empty());
        assert!(parse_manifest("\n\n").unwrap().is_empty());
    }

    #[test]
    fn unknown_diagnosis_is_rejected_with_line_number() {
        let good = serde_json::to_string(&entry("r1", "s1", Diagnosis::Asthma)).unwrap();
        let bad = good.replace("asthma", "flu");
        let text = format!("{good}\n{bad}\n");
        match parse_manifest(&text) {
            Err(ManifestError::Validation { errors }) => {
                assert_eq!(errors.len(), 1);
                assert!(errors[0].starts_with("line 2:"), "{}", errors[0]);
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_record_id_is_rejected() {
        let line = serde_json::to_string(&entry("r1", "s1", Diagnosis::Healthy)).unwrap();
        let text = format!("{line}\n{line}\n");
        match parse_manifest(&text) {
            Err(ManifestError::Validation { errors }) => {
                assert!(errors[0].contains("duplicate record_id"));
                assert!(errors[0].contains("line 2"));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn three_row_fixture_round_trips() {
        let rows = vec![
            entry("r1", "s1", Diagnosis::Asthma),
            entry("r2", "s1", Diagnosis::Asthma),
            entry("r3", "s2", Diagnosis::Healthy),
        ];
        let text: String = rows
            .iter()
            .map(|e| serde_json::to_string(e).unwrap() + "\n")
            .collect();
        let parsed = parse_manifest(&text).unwrap();
        assert_eq!(parsed, rows);
        for (line, e) in text.lines().zip(&parsed) {
            let original: serde_json::Value = serde_json::from_str(line).unwrap();
            let reserialized: serde_json::Value =
                serde_json::from_str(&serde_json::to_string(e).unwrap()).unwrap();
            assert_eq!(original, reserialized);
        }
    }

    #[test]
    fn save_then_load_round_trips() {
        let rows = vec![
            entry("r1", "s1", Diagnosis::Asthma),
            entry("r2", "s2", Diagnosis::OtherPathology),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        save_manifest(&rows, &path).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), rows);
    }

    /// Fixture mirroring the reference dataset's published summary table.
    fn summary_fixture() -> Vec<RecordEntry> {
        let points = [
            RecordingPoint::Mouth,
            RecordingPoint::Trachea,
            RecordingPoint::Chest,
            RecordingPoint::Back,
        ];
        (0..1613)
            .map(|i| {
                let diagnosis = if i < 1113 {
                    Diagnosis::Asthma
                } else if i < 1113 + 133 {
                    Diagnosis::Healthy
                } else {
                    Diagnosis::OtherPathology
                };
                let sex = if i < 542 { Sex::Female } else { Sex::Male };
                let source_device = if i < 878 {
                    SourceDevice::Specialized
                } else if i < 878 + 345 {
                    SourceDevice::Mobile
                } else if i < 878 + 345 + 85 {
                    SourceDevice::Web
                } else if i < 878 + 345 + 85 + 63 {
                    SourceDevice::Computer
                } else {
                    SourceDevice::Unknown
                };
                RecordEntry {
                    record_id: format!("r{i:04}"),
                    subject_id: format!("s{i:04}"),
                    sex,
                    age_years: 20 + (i % 60) as u32,
                    recording_point: points[i % 4],
                    diagnosis,
                    record_date: "2023-06-01".into(),
                    record_quality: RecordQuality::Good,
                    source_device,
                    audio_path: format!("audio/r{i:04}.wav"),
                }
            })
            .collect()
    }

    #[test]
    fn summary_counts_match_reference_table() {
        let s = summarize(&summary_fixture());
        assert_eq!(s.total, 1613);
        assert_eq!(s.by_diagnosis["asthma"], 1113);
        assert_eq!(s.by_diagnosis["healthy"], 133);
        assert_eq!(s.by_diagnosis["other_pathology"], 367);
        assert_eq!(s.by_sex["female"], 542);
        assert_eq!(s.by_sex["male"], 1071);
        assert_eq!(s.by_source_device["specialized"], 878);
        assert_eq!(s.by_source_device["mobile"], 345);
        assert_eq!(s.by_source_device["web"], 85);
        assert_eq!(s.by_source_device["computer"], 63);
        assert_eq!(s.by_source_device["unknown"], 242);
        for map in [
            &s.by_sex,
            &s.by_diagnosis,
            &s.by_recording_point,
            &s.by_source_device,
        ] {
            assert_eq!(map.values().sum::<usize>(), s.total);
        }
    }

    #[test]
    fn summary_of_singleton() {
        let s = summarize(&[entry("r1", "s1", Diagnosis::Asthma)]);
        assert_eq!(s.total, 1);
        for map in [
            &s.by_sex,
            &s.by_diagnosis,
            &s.by_recording_point,
            &s.by_source_device,
        ] {
            assert_eq!(map.len(), 1);
            assert_eq!(map.values().sum::<usize>(), 1);
        }
    }

    /// `n_subjects` subjects per class, 2 recordings each.
    fn split_fixture(n_subjects: usize) -> Vec<RecordEntry> {
        let mut rows = Vec::new();
        for i in 0..n_subjects {
            for (class, diagnosis) in [("pos", Diagnosis::Asthma), ("neg", Diagnosis::Healthy)] {
                for r in 0..2 {
                    rows.push(entry(
                        &format!("r-{class}-{i:03}-{r}"),
                        &format!("s-{class}-{i:03}"),
                        diagnosis,
                    ));
                }
            }
        }
        rows
    }

    fn spec(frac: f64, seed: u64) -> SplitSpec {
        SplitSpec {
            train_fraction: frac,
            seed,
            balance: false,
            pool_size_per_class: None,
        }
    }

    #[test]
    fn split_partitions_subjects() {
        let rows = split_fixture(25);
        let (train, test) = stratified_subject_split(&rows, &spec(0.8, 7)).unwrap();
        let train_set: BTreeSet<_> = train.iter().collect();
        let test_set: BTreeSet<_> = test.iter().collect();
        assert!(train_set.is_disjoint(&test_set));
        assert_eq!(train.len() + test.len(), 50);
        // 80% of 25 per class.
        assert_eq!(train.iter().filter(|s| s.contains("pos")).count(), 20);
        assert_eq!(train.iter().filter(|s| s.contains("neg")).count(), 20);
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let rows = split_fixture(50);
        let a = stratified_subject_split(&rows, &spec(0.8, 11)).unwrap();
        let b = stratified_subject_split(&rows, &spec(0.8, 11)).unwrap();
        let c = stratified_subject_split(&rows, &spec(0.8, 12)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn split_ignores_input_order() {
        let mut rows = split_fixture(30);
        let forward = stratified_subject_split(&rows, &spec(0.7, 3)).unwrap();
        rows.reverse();
        let reversed = stratified_subject_split(&rows, &spec(0.7, 3)).unwrap();
        assert_eq!(forward, reversed);
    }

    #[test]
    fn balanced_pool_selects_exactly_100_per_class() {
        let mut rows = split_fixture(140); // 140 per class
        rows.truncate(rows.len() - 80); // drop 20 negative subjects -> 140 pos / 120 neg
        let spec = SplitSpec {
            train_fraction: 0.8,
            seed: 5,
            balance: true,
            pool_size_per_class: Some(100),
        };
        let (train, test) = stratified_subject_split(&rows, &spec).unwrap();
        assert_eq!(train.len() + test.len(), 200);
        let pos = |v: &[String]| v.iter().filter(|s| s.contains("pos")).count();
        assert_eq!(pos(&train) + pos(&test), 100);
        assert_eq!(train.len() + test.len() - pos(&train) - pos(&test), 100);
    }

    #[test]
    fn split_rejects_insufficient_subjects() {
        let rows = vec![
            entry("r1", "s1", Diagnosis::Asthma),
            entry("r2", "s2", Diagnosis::Healthy),
            entry("r3", "s3", Diagnosis::Healthy),
        ];
        assert!(matches!(
            stratified_subject_split(&rows, &spec(0.8, 1)),
            Err(ManifestError::InvalidParameter(_))
        ));
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let rows = split_fixture(10);
        for frac in [0.0, 1.0, -0.2, 1.5] {
            assert!(matches!(
                stratified_subject_split(&rows, &spec(frac, 1)),
                Err(ManifestError::InvalidParameter(_))
            ));
        }
    }

    #[test]
    fn subject_with_any_asthma_recording_is_positive() {
        // One subject with mixed diagnoses counts as positive once.
        let rows = vec![
            entry("r1", "mixed", Diagnosis::Healthy),
            entry("r2", "mixed", Diagnosis::Asthma),
            entry("r3", "p2", Diagnosis::Asthma),
            entry("r4", "n1", Diagnosis::Healthy),
            entry("r5", "n2", Diagnosis::OtherPathology),
        ];
        let (train, test) = stratified_subject_split(&rows, &spec(0.5, 2)).unwrap();
        let all: Vec<String> = train.iter().chain(test.iter()).cloned().collect();
        assert_eq!(all.len(), 4);
        // Both positive subjects (mixed, p2) split 1/1 between sides.
        let pos_train = train.iter().filter(|s| *s == "mixed" || *s == "p2").count();
        let pos_test = test.iter().filter(|s| *s == "mixed" || *s == "p2").count();
        assert_eq!(pos_train + pos_test, 2);
        assert_eq!(pos_train, 1);
    }

    #[test]
    fn filter_by_subjects_keeps_matching_rows() {
        let rows = split_fixture(3);
        let kept = filter_by_subjects(&rows, &["s-pos-001".to_string()]);
        assert_eq!(kept.len(), 2);
        assert!(kept.iter().all(|e| e.subject_id == "s-pos-001"));
    }
}
