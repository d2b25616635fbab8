use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::image::{load_image, GrayImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnswerType {
    #[serde(rename = "OPEN")]
    Open,
    #[serde(rename = "CLOSED")]
    Closed,
}

/// The eleven question categories of the VQA-RAD annotation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    Abnormality,
    Attribute,
    Color,
    Count,
    Modality,
    Organ,
    Other,
    Plane,
    #[serde(rename = "Positional reasoning")]
    PositionalReasoning,
    #[serde(rename = "Object/Condition Presence")]
    ObjectConditionPresence,
    Size,
}

impl Category {
    pub const ALL: [Category; 11] = [
        Category::Abnormality,
        Category::Attribute,
        Category::Color,
        Category::Count,
        Category::Modality,
        Category::Organ,
        Category::Other,
        Category::Plane,
        Category::PositionalReasoning,
        Category::ObjectConditionPresence,
        Category::Size,
    ];
}

/// One question about one image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqaSample {
    pub question_id: String,
    pub image_id: String,
    pub question: String,
    pub answer: String,
    pub answer_type: AnswerType,
    pub category: Category,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BodyPart {
    Head,
    Chest,
    Abdomen,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    Normal,
    AbnormalPresent,
    AbnormalOrgan,
}

impl BodyPart {
    pub const ALL: [BodyPart; 3] = [BodyPart::Head, BodyPart::Chest, BodyPart::Abdomen];

    fn label(self) -> &'static str {
        match self {
            BodyPart::Head => "head",
            BodyPart::Chest => "chest",
            BodyPart::Abdomen => "abdominal",
        }
    }
}

impl Condition {
    pub const ALL: [Condition; 3] = [
        Condition::Normal,
        Condition::AbnormalPresent,
        Condition::AbnormalOrgan,
    ];

    fn label(self) -> &'static str {
        match self {
            Condition::Normal => "normal",
            Condition::AbnormalPresent => "abnormal present",
            Condition::AbnormalOrgan => "abnormal organ",
        }
    }
}

/// One of the nine meta-learning classes: body part × finding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MamlClass {
    pub part: BodyPart,
    pub condition: Condition,
}

impl MamlClass {
    pub fn all() -> Vec<MamlClass> {
        BodyPart::ALL
            .iter()
            .flat_map(|&part| {
                Condition::ALL
                    .iter()
                    .map(move |&condition| MamlClass { part, condition })
            })
            .collect()
    }

    /// Position in [`MamlClass::all`].
    pub fn index(self) -> usize {
        self.part as usize * 3 + self.condition as usize
    }
}

impl fmt::Display for MamlClass {
    /// E.g. `head normal`, `chest abnormal organ`, `abdominal abnormal present`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.part.label(), self.condition.label())
    }
}

impl FromStr for MamlClass {
    type Err = Error;

    /// Accepts the display form, with underscores allowed in place of spaces.
    fn from_str(s: &str) -> Result<Self> {
        let wanted = s.trim().replace('_', " ").to_lowercase();
        MamlClass::all()
            .into_iter()
            .find(|c| c.to_string() == wanted)
            .ok_or_else(|| Error::Data(format!("unknown class `{s}`")))
    }
}

impl Serialize for MamlClass {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for MamlClass {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A line of the meta-learning label file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MamlLabel {
    pub image_id: String,
    pub class: MamlClass,
}

/// A record the loader refused, with its 1-based line number.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecordReject {
    pub line: usize,
    pub message: String,
}

/// Result of reading a dataset: every input line ends up either in
/// `samples` or in `rejects`.
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub path: PathBuf,
    pub samples: Vec<VqaSample>,
    pub images: BTreeMap<String, GrayImage>,
    pub rejects: Vec<RecordReject>,
}

impl LoadedDataset {
    /// Turns the first reject, if any, into an error.
    pub fn strict(self) -> Result<Self> {
        match self.rejects.first() {
            Some(r) => Err(Error::Record {
                path: self.path.clone(),
                line: r.line,
                message: r.message.clone(),
            }),
            None => Ok(self),
        }
    }
}

/// Parses one JSON object per non-blank line.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(
    path: &Path,
) -> Result<Vec<(usize, std::result::Result<T, String>)>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push((
            i + 1,
            serde_json::from_str::<T>(&line).map_err(|e| e.to_string()),
        ));
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut file, r)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

/// Locates `image_id` in `dir`, trying the id as given and then with
/// `.png` / `.pgm` appended.
pub fn resolve_image(dir: &Path, image_id: &str) -> Option<PathBuf> {
    [
        image_id.to_string(),
        format!("{image_id}.png"),
        format!("{image_id}.pgm"),
    ]
    .into_iter()
    .map(|name| dir.join(name))
    .find(|p| p.is_file())
}

/// Loads (and caches) the image for `image_id`, resized to `resolution`.
pub(crate) fn load_cached(
    cache: &mut BTreeMap<String, GrayImage>,
    dir: &Path,
    image_id: &str,
    resolution: usize,
) -> Result<()> {
    if cache.contains_key(image_id) {
        return Ok(());
    }
    let path = resolve_image(dir, image_id).ok_or_else(|| {
        Error::Data(format!(
            "missing image file for `{image_id}` in {}",
            dir.display()
        ))
    })?;
    cache.insert(image_id.to_owned(), load_image(&path)?.resized(resolution));
    Ok(())
}

/// Reads a JSON-lines VQA file and every image it references.
///
/// Malformed records (bad JSON, unknown keys, invalid `answer_type` or
/// `category`) are reported in [`LoadedDataset::rejects`]; a referenced
/// image that cannot be found is an error.
pub fn load_vqa_dataset(
    metadata: &Path,
    image_dir: &Path,
    resolution: usize,
) -> Result<LoadedDataset> {
    let mut samples = Vec::new();
    let mut rejects = Vec::new();
    let mut images = BTreeMap::new();
    for (line, record) in read_jsonl::<VqaSample>(metadata)? {
        match record {
            Ok(sample) => {
                load_cached(&mut images, image_dir, &sample.image_id, resolution)?;
                samples.push(sample);
            }
            Err(message) => rejects.push(RecordReject { line, message }),
        }
    }
    Ok(LoadedDataset {
        path: metadata.to_owned(),
        samples,
        images,
        rejects,
    })
}

/// Reads the meta-learning label file; any bad line is an error.
pub fn load_maml_labels(path: &Path) -> Result<Vec<MamlLabel>> {
    read_jsonl::<MamlLabel>(path)?
        .into_iter()
        .map(|(line, r)| {
            r.map_err(|message| Error::Record {
                path: path.to_owned(),
                line,
                message,
            })
        })
        .collect()
}

/// Loads every PNG/PGM in `dir` (sorted by file name) at `resolution`.
pub fn load_image_dir(dir: &Path, resolution: usize) -> Result<Vec<(String, GrayImage)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("png" | "pgm")))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let id = p
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_owned();
            Ok((id, load_image(&p)?.resized(resolution)))
        })
        .collect()
}

/// Train/test split of an unlabelled corpus at a rounded 80/20 ratio
/// (11,779 images → 9,423 / 2,356).
pub fn split_train_test<T: Clone>(items: &[T]) -> (Vec<T>, Vec<T>) {
    let n_train = ((items.len() as f64) * 0.8).round() as usize;
    (items[..n_train].to_vec(), items[n_train..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_fixture(dir: &Path, lines: &[&str]) -> PathBuf {
        for id in ["img1", "img2"] {
            GrayImage::filled(4, 0.5)
                .save_png(&dir.join(format!("{id}.png")))
                .unwrap();
        }
        let path = dir.join("meta.jsonl");
        fs::write(&path, lines.join("\n")).unwrap();
        path
    }

    const GOOD: &str = r#"{"question_id":"q1","image_id":"img1","question":"is there a fracture?","answer":"no","answer_type":"CLOSED","category":"Abnormality"}"#;

    #[test]
    fn loads_three_records_sharing_images() {
        let dir = tempfile::tempdir().unwrap();
        let second = GOOD.replace("q1", "q2").replace("\"img1\"", "\"img2\"");
        let third = GOOD
            .replace("q1", "q3")
            .replace("CLOSED", "OPEN")
            .replace("Abnormality", "Positional reasoning");
        let meta = write_fixture(dir.path(), &[GOOD, &second, &third]);
        let ds = load_vqa_dataset(&meta, dir.path(), 8).unwrap();
        assert_eq!(ds.samples.len(), 3);
        assert_eq!(ds.images.len(), 2);
        assert!(ds.rejects.is_empty());
        assert_eq!(ds.samples[2].category, Category::PositionalReasoning);
        assert_eq!(ds.images["img1"].width, 8);
    }

    #[test]
    fn invalid_answer_type_is_rejected_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let bad = GOOD.replace("CLOSED", "MAYBE").replace("q1", "q2");
        let meta = write_fixture(dir.path(), &[GOOD, &bad]);
        let ds = load_vqa_dataset(&meta, dir.path(), 4).unwrap();
        assert_eq!(ds.samples.len() + ds.rejects.len(), 2);
        assert_eq!(ds.rejects[0].line, 2);
        match ds.strict() {
            Err(Error::Record { line: 2, .. }) => {}
            other => panic!("expected line-2 record error, got {other:?}"),
        }
    }

    #[test]
    fn missing_image_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let missing = GOOD.replace("img1", "nowhere");
        let meta = write_fixture(dir.path(), &[&missing]);
        assert!(matches!(
            load_vqa_dataset(&meta, dir.path(), 4),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn class_names_roundtrip() {
        let names: Vec<String> = MamlClass::all().iter().map(|c| c.to_string()).collect();
        assert_eq!(
            names,
            [
                "head normal",
                "head abnormal present",
                "head abnormal organ",
                "chest normal",
                "chest abnormal present",
                "chest abnormal organ",
                "abdominal normal",
                "abdominal abnormal present",
                "abdominal abnormal organ",
            ]
        );
        for c in MamlClass::all() {
            assert_eq!(c.to_string().parse::<MamlClass>().unwrap(), c);
            assert_eq!(
                c.to_string()
                    .replace(' ', "_")
                    .parse::<MamlClass>()
                    .unwrap(),
                c
            );
        }
        assert!("head fine".parse::<MamlClass>().is_err());
        let label: MamlLabel =
            serde_json::from_str(r#"{"image_id":"a","class":"chest abnormal organ"}"#).unwrap();
        assert_eq!(label.class.index(), 5);
    }

    #[test]
    fn split_matches_corpus_ratio() {
        let items: Vec<usize> = (0..11_779).collect();
        let (train, test) = split_train_test(&items);
        assert_eq!((train.len(), test.len()), (9_423, 2_356));
    }
}
