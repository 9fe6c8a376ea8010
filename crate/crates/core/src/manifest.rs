//! Dataset manifests: which image belongs to which subject, spectrum and mask state.
//!
//! Two on-disk forms are accepted. CSV with the header `path,subject_id,spectrum,mask_state`
//! (class count defaults to [`DEFAULT_CLASS_COUNT`]), and JSON of the shape
//! `{"class_count": N, "entries": [{"path": .., "subject_id": .., "spectrum": .., "mask_state": ..}]}`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Masked and unmasked faces.
pub const DEFAULT_CLASS_COUNT: usize = 2;

const CSV_HEADER: [&str; 4] = ["path", "subject_id", "spectrum", "mask_state"];

#[derive(Error, Debug)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("unknown {field} value {value:?} at {location}")]
    UnknownValue {
        location: String,
        field: &'static str,
        value: String,
    },
    #[error("empty subject_id at {location}")]
    EmptySubject { location: String },
    #[error("duplicate image path {path:?} at {location} (first seen at {first})")]
    DuplicatePath {
        path: String,
        location: String,
        first: String,
    },
    #[error("class_count must be positive")]
    ZeroClassCount,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spectrum {
    Visual,
    Thermal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskState {
    Unmasked,
    Masked,
}

impl Spectrum {
    pub const ALL: [Spectrum; 2] = [Spectrum::Visual, Spectrum::Thermal];

    pub fn as_str(&self) -> &'static str {
        match self {
            Spectrum::Visual => "visual",
            Spectrum::Thermal => "thermal",
        }
    }
}

impl MaskState {
    pub const ALL: [MaskState; 2] = [MaskState::Unmasked, MaskState::Masked];

    pub fn as_str(&self) -> &'static str {
        match self {
            MaskState::Unmasked => "unmasked",
            MaskState::Masked => "masked",
        }
    }
}

impl fmt::Display for Spectrum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for MaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Spectrum {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "visual" => Ok(Spectrum::Visual),
            "thermal" => Ok(Spectrum::Thermal),
            _ => Err(()),
        }
    }
}

impl FromStr for MaskState {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "unmasked" => Ok(MaskState::Unmasked),
            "masked" => Ok(MaskState::Masked),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub subject_id: String,
    pub spectrum: Spectrum,
    pub mask_state: MaskState,
}

impl ManifestEntry {
    pub fn new(
        path: impl Into<String>,
        subject_id: impl Into<String>,
        spectrum: Spectrum,
        mask_state: MaskState,
    ) -> Self {
        Self {
            path: path.into(),
            subject_id: subject_id.into(),
            spectrum,
            mask_state,
        }
    }
}

/// A validated list of images. Entry order is preserved and serves as the canonical
/// ordering for every downstream reduction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    entries: Vec<ManifestEntry>,
    class_count: usize,
}

#[derive(Serialize, Deserialize)]
struct RawEntry {
    path: String,
    subject_id: String,
    spectrum: String,
    mask_state: String,
}

#[derive(Serialize, Deserialize)]
struct JsonManifest {
    class_count: usize,
    entries: Vec<RawEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>, class_count: usize) -> Result<Self, ManifestError> {
        if class_count == 0 {
            return Err(ManifestError::ZeroClassCount);
        }
        let mut seen: HashMap<&str, usize> = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.subject_id.is_empty() {
                return Err(ManifestError::EmptySubject {
                    location: format!("entry {}", i + 1),
                });
            }
            if let Some(first) = seen.insert(&e.path, i) {
                return Err(ManifestError::DuplicatePath {
                    path: e.path.clone(),
                    location: format!("entry {}", i + 1),
                    first: format!("entry {}", first + 1),
                });
            }
        }
        Ok(Self {
            entries,
            class_count,
        })
    }

    /// Loads a manifest; `.json` files use the JSON schema, anything else is read as CSV.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let is_json = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("json"));
        if is_json {
            Self::from_json_str(&text)
        } else {
            Self::from_csv_str(&text)
        }
    }

    pub fn from_csv_str(text: &str) -> Result<Self, ManifestError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| csv_parse_error(&e, 1))?.clone();
        if headers.iter().collect::<Vec<_>>() != CSV_HEADER {
            return Err(ManifestError::Parse {
                location: "line 1".into(),
                message: format!(
                    "expected header {:?}, got {:?}",
                    CSV_HEADER.join(","),
                    headers.iter().collect::<Vec<_>>().join(",")
                ),
            });
        }

        let mut entries = Vec::new();
        let mut seen: HashMap<String, String> = HashMap::new();
        for record in reader.records() {
            let record = record.map_err(|e| csv_parse_error(&e, entries.len() + 2))?;
            let line = record.position().map_or(entries.len() + 2, |p| p.line() as usize);
            let location = format!("line {line}");
            if record.len() != 4 {
                return Err(ManifestError::Parse {
                    location,
                    message: format!("expected 4 fields, got {}", record.len()),
                });
            }
            let raw = RawEntry {
                path: record[0].to_string(),
                subject_id: record[1].to_string(),
                spectrum: record[2].to_string(),
                mask_state: record[3].to_string(),
            };
            let entry = validate_raw(raw, &location)?;
            if let Some(first) = seen.insert(entry.path.clone(), location.clone()) {
                return Err(ManifestError::DuplicatePath {
                    path: entry.path,
                    location,
                    first,
                });
            }
            entries.push(entry);
        }
        Ok(Self {
            entries,
            class_count: DEFAULT_CLASS_COUNT,
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self, ManifestError> {
        let raw: JsonManifest = serde_json::from_str(text).map_err(|e| ManifestError::Parse {
            location: format!("line {}", e.line()),
            message: e.to_string(),
        })?;
        let entries = raw
            .entries
            .into_iter()
            .enumerate()
            .map(|(i, r)| validate_raw(r, &format!("entry {}", i + 1)))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(entries, raw.class_count)
    }

    pub fn to_csv_string(&self) -> String {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(CSV_HEADER).expect("in-memory write");
        for e in &self.entries {
            writer
                .write_record([
                    e.path.as_str(),
                    e.subject_id.as_str(),
                    e.spectrum.as_str(),
                    e.mask_state.as_str(),
                ])
                .expect("in-memory write");
        }
        String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8 input")
    }

    pub fn to_json_string(&self) -> String {
        let raw = JsonManifest {
            class_count: self.class_count,
            entries: self
                .entries
                .iter()
                .map(|e| RawEntry {
                    path: e.path.clone(),
                    subject_id: e.subject_id.clone(),
                    spectrum: e.spectrum.to_string(),
                    mask_state: e.mask_state.to_string(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&raw).expect("manifest serializes")
    }

    /// Writes the manifest in the format implied by the file extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ManifestError> {
        let path = path.as_ref();
        let is_json = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let text = if is_json {
            self.to_json_string()
        } else {
            self.to_csv_string()
        };
        std::fs::write(path, text).map_err(|source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Distinct subject ids in sorted order.
    pub fn subjects(&self) -> Vec<&str> {
        self.entries
            .iter()
            .map(|e| e.subject_id.as_str())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn count(&self, spectrum: Spectrum, mask_state: MaskState) -> usize {
        self.entries
            .iter()
            .filter(|e| e.spectrum == spectrum && e.mask_state == mask_state)
            .count()
    }

    pub fn counts_by_condition(&self) -> BTreeMap<(Spectrum, MaskState), usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry((e.spectrum, e.mask_state)).or_insert(0) += 1;
        }
        out
    }

    pub fn filter(&self, spectrum: Spectrum, mask_state: MaskState) -> impl Iterator<Item = &ManifestEntry> {
        self.entries
            .iter()
            .filter(move |e| e.spectrum == spectrum && e.mask_state == mask_state)
    }
}

fn validate_raw(raw: RawEntry, location: &str) -> Result<ManifestEntry, ManifestError> {
    if raw.path.is_empty() {
        return Err(ManifestError::Parse {
            location: location.to_string(),
            message: "empty path".into(),
        });
    }
    if raw.subject_id.is_empty() {
        return Err(ManifestError::EmptySubject {
            location: location.to_string(),
        });
    }
    let spectrum = raw
        .spectrum
        .parse::<Spectrum>()
        .map_err(|()| ManifestError::UnknownValue {
            location: location.to_string(),
            field: "spectrum",
            value: raw.spectrum.clone(),
        })?;
    let mask_state = raw
        .mask_state
        .parse::<MaskState>()
        .map_err(|()| ManifestError::UnknownValue {
            location: location.to_string(),
            field: "mask_state",
            value: raw.mask_state.clone(),
        })?;
    Ok(ManifestEntry {
        path: raw.path,
        subject_id: raw.subject_id,
        spectrum,
        mask_state,
    })
}

fn csv_parse_error(e: &csv::Error, fallback_line: usize) -> ManifestError {
    let line = e
        .position()
        .map_or(fallback_line, |p| p.line() as usize);
    ManifestError::Parse {
        location: format!("line {line}"),
        message: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const FOUR_ROWS: &str = "path,subject_id,spectrum,mask_state
a/1.png,s1,visual,unmasked
a/2.png,s1,thermal,masked
b/1.png,s2,visual,masked
b/2.png,s2,thermal,unmasked
";

    #[test]
    fn loads_four_rows() {
        let m = Manifest::from_csv_str(FOUR_ROWS).unwrap();
        assert_eq!(m.len(), 4);
        assert_eq!(m.subjects(), vec!["s1", "s2"]);
        assert_eq!(m.class_count(), DEFAULT_CLASS_COUNT);
        assert_eq!(m.count(Spectrum::Visual, MaskState::Unmasked), 1);
        assert_eq!(m.count(Spectrum::Thermal, MaskState::Masked), 1);
        assert_eq!(m.counts_by_condition().values().sum::<usize>(), 4);
    }

    #[test]
    fn unknown_spectrum_names_row() {
        let text = "path,subject_id,spectrum,mask_state\na.png,s1,visual,masked\nb.png,s1,xray,masked\n";
        let err = Manifest::from_csv_str(text).unwrap_err();
        match &err {
            ManifestError::UnknownValue {
                location,
                field,
                value,
            } => {
                assert_eq!(location, "line 3");
                assert_eq!(*field, "spectrum");
                assert_eq!(value, "xray");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("line 3"));
    }

    #[test]
    fn unknown_mask_state() {
        let text = "path,subject_id,spectrum,mask_state\na.png,s1,visual,half\n";
        assert!(matches!(
            Manifest::from_csv_str(text),
            Err(ManifestError::UnknownValue { field: "mask_state", .. })
        ));
    }

    #[test]
    fn duplicate_path_rejected() {
        let text = "path,subject_id,spectrum,mask_state\na.png,s1,visual,masked\na.png,s2,thermal,masked\n";
        match Manifest::from_csv_str(text).unwrap_err() {
            ManifestError::DuplicatePath { path, location, first } => {
                assert_eq!(path, "a.png");
                assert_eq!(location, "line 3");
                assert_eq!(first, "line 2");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_rows_report_line() {
        let text = "path,subject_id,spectrum,mask_state\na.png,s1,visual\n";
        let err = Manifest::from_csv_str(text).unwrap_err();
        assert!(matches!(err, ManifestError::Parse { .. }), "{err:?}");
        assert!(err.to_string().contains("line 2"), "{err}");

        let bad_header = "file,subject,spectrum,mask\n";
        assert!(matches!(
            Manifest::from_csv_str(bad_header),
            Err(ManifestError::Parse { .. })
        ));
        let empty_subject = "path,subject_id,spectrum,mask_state\na.png,,visual,masked\n";
        assert!(matches!(
            Manifest::from_csv_str(empty_subject),
            Err(ManifestError::EmptySubject { .. })
        ));
    }

    #[test]
    fn json_form() {
        let text = r#"{"class_count": 3, "entries": [
            {"path": "x.png", "subject_id": "7", "spectrum": "thermal", "mask_state": "masked"}
        ]}"#;
        let m = Manifest::from_json_str(text).unwrap();
        assert_eq!(m.class_count(), 3);
        assert_eq!(m.entries()[0].spectrum, Spectrum::Thermal);

        let bad = r#"{"class_count": 2, "entries": [
            {"path": "x.png", "subject_id": "7", "spectrum": "uv", "mask_state": "masked"}
        ]}"#;
        assert!(matches!(
            Manifest::from_json_str(bad),
            Err(ManifestError::UnknownValue { .. })
        ));
        assert!(matches!(
            Manifest::from_json_str("{not json"),
            Err(ManifestError::Parse { .. })
        ));
    }

    #[test]
    fn files_dispatch_on_extension() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::from_csv_str(FOUR_ROWS).unwrap();
        let csv_path = dir.path().join("m.csv");
        let json_path = dir.path().join("m.json");
        m.save(&csv_path).unwrap();
        m.save(&json_path).unwrap();
        assert_eq!(Manifest::load(&csv_path).unwrap(), m);
        assert_eq!(Manifest::load(&json_path).unwrap(), m);
        assert!(matches!(
            Manifest::load(dir.path().join("missing.csv")),
            Err(ManifestError::Io { .. })
        ));
    }

    fn entry_strategy() -> impl Strategy<Value = (String, Spectrum, MaskState)> {
        (
            "[a-z0-9 ,\"]{1,6}",
            prop_oneof![Just(Spectrum::Visual), Just(Spectrum::Thermal)],
            prop_oneof![Just(MaskState::Unmasked), Just(MaskState::Masked)],
        )
    }

    proptest! {
        #[test]
        fn serialization_round_trips(
            rows in proptest::collection::vec(entry_strategy(), 0..20),
            class_count in 1usize..5,
        ) {
            let entries: Vec<_> = rows
                .into_iter()
                .enumerate()
                .map(|(i, (subject, s, m))| {
                    ManifestEntry::new(format!("img/{i}.png"), subject.trim().to_string() + "x", s, m)
                })
                .collect();
            let m = Manifest::new(entries, class_count).unwrap();
            prop_assert_eq!(&Manifest::from_json_str(&m.to_json_string()).unwrap(), &m);
            let via_csv = Manifest::from_csv_str(&m.to_csv_string()).unwrap();
            prop_assert_eq!(via_csv.entries(), m.entries());
        }
    }
}
