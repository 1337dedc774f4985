//! JSON-Lines dataset index.
//!
//! One object per line with fields `path`, `technology`
//! (`"ASV" | "FoR" | "Codec" | null`), `model` (`"F01".."F06" | null`),
//! `authenticity` (`"real" | "fake"`) and `split` (`"train" | "val" | "test"`).

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Generation technology (level-1 vocabulary).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Technology {
    #[serde(rename = "ASV")]
    Asv,
    #[serde(rename = "FoR")]
    FoR,
    Codec,
}

impl Technology {
    pub const ALL: [Technology; 3] = [Technology::Asv, Technology::FoR, Technology::Codec];

    pub fn as_str(self) -> &'static str {
        match self {
            Technology::Asv => "ASV",
            Technology::FoR => "FoR",
            Technology::Codec => "Codec",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Technology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Technology {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ASV" => Ok(Technology::Asv),
            "FoR" => Ok(Technology::FoR),
            "Codec" => Ok(Technology::Codec),
            _ => Err(format!("unknown technology `{s}`")),
        }
    }
}

/// Codec generator (level-2 vocabulary).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CodecModel {
    F01,
    F02,
    F03,
    F04,
    F05,
    F06,
}

impl CodecModel {
    pub const ALL: [CodecModel; 6] = [
        CodecModel::F01,
        CodecModel::F02,
        CodecModel::F03,
        CodecModel::F04,
        CodecModel::F05,
        CodecModel::F06,
    ];

    pub fn as_str(self) -> &'static str {
        ["F01", "F02", "F03", "F04", "F05", "F06"][self as usize]
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for CodecModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CodecModel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        CodecModel::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown model `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Authenticity {
    Real,
    Fake,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub technology: Option<Technology>,
    pub model: Option<CodecModel>,
    pub authenticity: Authenticity,
    pub split: Split,
}

impl ManifestEntry {
    pub fn fake(path: impl Into<PathBuf>, technology: Technology, model: Option<CodecModel>, split: Split) -> Self {
        Self {
            path: path.into(),
            technology: Some(technology),
            model,
            authenticity: Authenticity::Fake,
            split,
        }
    }

    pub fn real(path: impl Into<PathBuf>, split: Split) -> Self {
        Self {
            path: path.into(),
            technology: None,
            model: None,
            authenticity: Authenticity::Real,
            split,
        }
    }

    /// Checks `model => Codec` and `real => unlabeled`; returns the
    /// offending field name.
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.model.is_some() && self.technology != Some(Technology::Codec) {
            return Err(("model", "a model label requires technology Codec".into()));
        }
        if self.authenticity == Authenticity::Real {
            if self.technology.is_some() {
                return Err(("technology", "real audio cannot carry a technology".into()));
            }
            if self.model.is_some() {
                return Err(("model", "real audio cannot carry a model".into()));
            }
        }
        Ok(())
    }

    pub fn is_fake(&self) -> bool {
        self.authenticity == Authenticity::Fake
    }
}

pub type Manifest = Vec<ManifestEntry>;

fn field_err(line: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Manifest {
        line,
        field: field.to_owned(),
        message: message.into(),
    }
}

fn optional_enum<T: FromStr<Err = String>>(obj: &Map<String, Value>, line: usize, field: &str) -> Result<Option<T>> {
    match obj.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => s.parse().map(Some).map_err(|e| field_err(line, field, e)),
        Some(other) => Err(field_err(line, field, format!("expected string or null, got {other}"))),
    }
}

fn required_str<'a>(obj: &'a Map<String, Value>, line: usize, field: &str) -> Result<&'a str> {
    match obj.get(field) {
        Some(Value::String(s)) => Ok(s),
        Some(other) => Err(field_err(line, field, format!("expected string, got {other}"))),
        None => Err(field_err(line, field, "missing")),
    }
}

fn parse_line(text: &str, line: usize) -> Result<ManifestEntry> {
    let value: Value = serde_json::from_str(text).map_err(|e| field_err(line, "<line>", e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| field_err(line, "<line>", "expected a JSON object"))?;
    let path = PathBuf::from(required_str(obj, line, "path")?);
    let technology = optional_enum::<Technology>(obj, line, "technology")?;
    let model = optional_enum::<CodecModel>(obj, line, "model")?;
    let authenticity = match required_str(obj, line, "authenticity")? {
        "real" => Authenticity::Real,
        "fake" => Authenticity::Fake,
        other => return Err(field_err(line, "authenticity", format!("unknown value `{other}`"))),
    };
    let split = required_str(obj, line, "split")?
        .parse()
        .map_err(|e| field_err(line, "split", e))?;
    let entry = ManifestEntry {
        path,
        technology,
        model,
        authenticity,
        split,
    };
    entry.check().map_err(|(field, msg)| field_err(line, field, msg))?;
    Ok(entry)
}

/// Parses manifest text; blank lines are skipped, line numbers are 1-based.
pub fn parse_manifest(text: &str) -> Result<Manifest> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, i + 1))
        .collect()
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub fn write_manifest(entries: &[ManifestEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        e.check().map_err(|(field, msg)| field_err(i + 1, field, msg))?;
        serde_json::to_writer(&mut buf, e)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry_strategy() -> impl Strategy<Value = ManifestEntry> {
        (0usize..3, 0usize..7, any::<bool>(), 0usize..3, "[a-z0-9_/]{1,20}").prop_map(
            |(t, m, real, s, p)| {
                let split = [Split::Train, Split::Val, Split::Test][s];
                if real {
                    ManifestEntry::real(format!("{p}.wav"), split)
                } else if t == 2 && m < 6 {
                    ManifestEntry::fake(format!("{p}.wav"), Technology::Codec, Some(CodecModel::ALL[m]), split)
                } else {
                    ManifestEntry::fake(format!("{p}.wav"), Technology::ALL[t], None, split)
                }
            },
        )
    }

    proptest! {
        #[test]
        fn write_then_read_roundtrips(entries in prop::collection::vec(entry_strategy(), 0..100)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("m.jsonl");
            write_manifest(&entries, &p).unwrap();
            prop_assert_eq!(read_manifest(&p).unwrap(), entries);
        }
    }

    #[test]
    fn model_requires_codec() {
        let text = r#"{"path":"a.wav","technology":"ASV","model":"F03","authenticity":"fake","split":"train"}"#;
        match parse_manifest(text) {
            Err(Error::Manifest { line, field, .. }) => {
                assert_eq!(line, 1);
                assert_eq!(field, "model");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn real_must_be_unlabeled() {
        let text = "\n{\"path\":\"a.wav\",\"technology\":\"FoR\",\"model\":null,\"authenticity\":\"real\",\"split\":\"test\"}";
        match parse_manifest(text) {
            Err(Error::Manifest { line, field, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "technology");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_enum_value_names_field() {
        let text = r#"{"path":"a.wav","technology":"Codec","model":"F09","authenticity":"fake","split":"train"}"#;
        assert!(matches!(parse_manifest(text), Err(Error::Manifest { field, .. }) if field == "model"));
        let text = r#"{"path":"a.wav","technology":null,"model":null,"authenticity":"real","split":"dev"}"#;
        assert!(matches!(parse_manifest(text), Err(Error::Manifest { field, .. }) if field == "split"));
    }

    #[test]
    fn empty_file_is_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        fs::write(&p, "").unwrap();
        assert!(read_manifest(&p).unwrap().is_empty());
    }

    #[test]
    fn serialized_field_spelling() {
        let e = ManifestEntry::fake("x.wav", Technology::Asv, None, Split::Val);
        let s = serde_json::to_string(&e).unwrap();
        assert_eq!(
            s,
            r#"{"path":"x.wav","technology":"ASV","model":null,"authenticity":"fake","split":"val"}"#
        );
    }
}
