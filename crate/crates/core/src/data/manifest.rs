//! JSON-lines dataset manifests: one record per line with keys
//! `image`, `caption`, `domain`, `split`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ppm::is_readable_ppm;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    General,
    Medical,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::General => "general",
            Domain::Medical => "medical",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CaptionSample {
    #[serde(rename = "image")]
    pub image_ref: String,
    pub caption: String,
    pub domain: Domain,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub source_name: String,
    /// Directory manifest-relative image refs resolve against.
    pub base_dir: PathBuf,
    pub samples: Vec<CaptionSample>,
}

impl Manifest {
    pub fn counts(&self) -> BTreeMap<(Domain, Split), usize> {
        let mut c = BTreeMap::new();
        for s in &self.samples {
            *c.entry((s.domain, s.split)).or_insert(0) += 1;
        }
        c
    }

    pub fn split(&self, split: Split) -> Vec<CaptionSample> {
        self.samples
            .iter()
            .filter(|s| s.split == split)
            .cloned()
            .collect()
    }

    pub fn resolve_image(&self, sample: &CaptionSample) -> PathBuf {
        self.base_dir.join(&sample.image_ref)
    }
}

/// Raw line shape used so enum violations can name the offending line.
#[derive(Deserialize)]
struct RawRecord {
    image: String,
    caption: String,
    domain: String,
    split: String,
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let source_name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "manifest".to_string());

    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let k = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| {
            Error::Data(format!("{}: malformed line {k}: {e}", path.display()))
        })?;
        let domain = match raw.domain.as_str() {
            "general" => Domain::General,
            "medical" => Domain::Medical,
            other => {
                return Err(Error::Data(format!(
                    "{}: unknown domain \"{other}\" at line {k}",
                    path.display()
                )))
            }
        };
        let split = match raw.split.as_str() {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(Error::Data(format!(
                    "{}: unknown split \"{other}\" at line {k}",
                    path.display()
                )))
            }
        };
        if raw.caption.split_whitespace().next().is_none() {
            return Err(Error::Data(format!(
                "{}: empty caption at line {k}",
                path.display()
            )));
        }
        let image_path = base_dir.join(&raw.image);
        if !is_readable_ppm(&image_path) {
            return Err(Error::Data(format!(
                "{}: image \"{}\" at line {k} is not a readable ppm",
                path.display(),
                raw.image
            )));
        }
        samples.push(CaptionSample {
            image_ref: raw.image,
            caption: raw.caption,
            domain,
            split,
        });
    }
    Ok(Manifest {
        source_name,
        base_dir,
        samples,
    })
}

pub fn write_manifest(path: &Path, samples: &[CaptionSample]) -> Result<()> {
    let mut buf = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut buf, s).expect("caption sample serializes");
        buf.write_all(b"\n").expect("in-memory write cannot fail");
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ppm::Image;

    fn write_image(dir: &Path, name: &str) {
        Image::filled(4, 4, [9, 9, 9])
            .write_ppm(&dir.join(name))
            .unwrap();
    }

    #[test]
    fn parses_records_in_order_with_counts() {
        let dir = tempfile::tempdir().unwrap();
        for n in ["a.ppm", "b.ppm", "c.ppm"] {
            write_image(dir.path(), n);
        }
        let lines = [
            r#"{"image":"a.ppm","caption":"a red circle","domain":"general","split":"train"}"#,
            r#"{"image":"b.ppm","caption":"a blue square","domain":"general","split":"train"}"#,
            r#"{"image":"c.ppm","caption":"tiny cross mark","domain":"medical","split":"test"}"#,
        ];
        let path = dir.path().join("m.jsonl");
        fs::write(&path, lines.join("\n")).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.samples.len(), 3);
        assert_eq!(m.samples[0].image_ref, "a.ppm");
        let counts = m.counts();
        assert_eq!(counts[&(Domain::General, Split::Train)], 2);
        assert_eq!(counts[&(Domain::Medical, Split::Test)], 1);
    }

    #[test]
    fn empty_file_is_valid_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        fs::write(&path, "").unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.samples.len(), 0);
    }

    #[test]
    fn unknown_domain_names_line() {
        let dir = tempfile::tempdir().unwrap();
        write_image(dir.path(), "a.ppm");
        let path = dir.path().join("m.jsonl");
        fs::write(
            &path,
            r#"{"image":"a.ppm","caption":"x y","domain":"xray","split":"train"}"#,
        )
        .unwrap();
        let err = load_manifest(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("unknown domain"), "{msg}");
        assert!(msg.contains("line 1"), "{msg}");
    }

    #[test]
    fn malformed_json_names_line() {
        let dir = tempfile::tempdir().unwrap();
        write_image(dir.path(), "a.ppm");
        let path = dir.path().join("m.jsonl");
        let good = r#"{"image":"a.ppm","caption":"x","domain":"general","split":"train"}"#;
        fs::write(&path, format!("{good}\nnot json\n")).unwrap();
        let msg = load_manifest(&path).unwrap_err().to_string();
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn missing_image_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(
            &path,
            r#"{"image":"nope.ppm","caption":"x y","domain":"general","split":"train"}"#,
        )
        .unwrap();
        assert!(load_manifest(&path).is_err());
    }

    #[test]
    fn round_trips_through_write() {
        let dir = tempfile::tempdir().unwrap();
        write_image(dir.path(), "a.ppm");
        let samples = vec![CaptionSample {
            image_ref: "a.ppm".into(),
            caption: "a red circle".into(),
            domain: Domain::General,
            split: Split::Train,
        }];
        let path = dir.path().join("m.jsonl");
        write_manifest(&path, &samples).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.samples, samples);
    }
}
