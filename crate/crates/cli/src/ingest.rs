//! JSONL news ingestion.
//!
//! One JSON object per line:
//!
//! ```json
//! {"id": "n1", "text": "words ...", "image": "img/n1.png", "label": 1}
//! ```
//!
//! `image` is a path (relative to the JSONL file) to a PGM or PNG raster,
//! an inline grid `{"height", "width", "dtype", "pixels"}` whose `pixels`
//! are base64 bytes (`u8` scaled by 1/255, or little-endian `f32`/`f64`),
//! or `null` for a zero grid. `label` is 0 (real), 1 (fake) or `null`.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use bmr_core::encoders::{FIRST_WORD_ID, PLACEHOLDER_IDS, PLACEHOLDER_WORDS, UNK_ID};
use bmr_core::{clean, CleanRules, Grid, RawNews};
use image::imageops::FilterType;
use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Largest inline grid side accepted, so a hostile header cannot request
/// a huge allocation.
pub const MAX_GRID_SIDE: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelType {
    U8,
    F32,
    F64,
}

impl PixelType {
    fn width(self) -> usize {
        match self {
            PixelType::U8 => 1,
            PixelType::F32 => 4,
            PixelType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineGrid {
    pub height: usize,
    pub width: usize,
    pub dtype: PixelType,
    pub pixels: String,
}

impl InlineGrid {
    /// Exact `f64` encoding of `grid`.
    pub fn encode(grid: &Grid) -> Self {
        let bytes: Vec<u8> = grid.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            height: grid.height,
            width: grid.width,
            dtype: PixelType::F64,
            pixels: B64.encode(bytes),
        }
    }

    pub fn decode(&self) -> std::result::Result<Grid, String> {
        if self.height == 0 || self.width == 0 || self.height > MAX_GRID_SIDE || self.width > MAX_GRID_SIDE {
            return Err(format!(
                "grid {}x{} outside 1..={MAX_GRID_SIDE} per side",
                self.height, self.width
            ));
        }
        let bytes = B64
            .decode(self.pixels.as_bytes())
            .map_err(|e| format!("pixels are not base64: {e}"))?;
        let n = self.height * self.width;
        let w = self.dtype.width();
        if bytes.len() != n * w {
            return Err(format!(
                "grid {}x{} of {:?} needs {} bytes, got {}",
                self.height,
                self.width,
                self.dtype,
                n * w,
                bytes.len()
            ));
        }
        let data: Vec<f64> = match self.dtype {
            PixelType::U8 => bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
            PixelType::F32 => bytes
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect(),
            PixelType::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(format!("non-finite pixel {bad}"));
        }
        Ok(Grid::new(self.height, self.width, data).expect("length checked"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageField {
    Path(String),
    Inline(InlineGrid),
}

/// One line of a news file, before tokenization and image loading.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewsRecord {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub image: Option<ImageField>,
    #[serde(default)]
    pub label: Option<u8>,
}

/// Parses one JSONL line.
pub fn parse_line(line: &str) -> std::result::Result<NewsRecord, String> {
    let r: NewsRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if r.id.is_empty() {
        return Err("empty id".into());
    }
    if let Some(l) = r.label {
        if l > 1 {
            return Err(format!("label must be 0, 1 or null, got {l}"));
        }
    }
    Ok(r)
}

/// Parses a whole JSONL stream. Blank lines are skipped; errors carry the
/// 1-based line number.
pub fn parse_jsonl(reader: impl BufRead) -> Result<Vec<NewsRecord>> {
    let mut out = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CliError::Line {
            line: line_no,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let r = parse_line(&line).map_err(|msg| CliError::Line { line: line_no, msg })?;
        if let Some(first) = seen.insert(r.id.clone(), line_no) {
            return Err(CliError::Line {
                line: line_no,
                msg: format!("duplicate id `{}` (first seen on line {first})", r.id),
            });
        }
        out.push(r);
    }
    Ok(out)
}

pub fn tokenize(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}

/// Word list indexed by token id. Ids 0 to 4 are reserved (padding,
/// unknown and the three placeholder words); ordinary words start at 5
/// and are never mapped onto a reserved id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vocabulary {
    words: Vec<String>,
}

pub const PAD_WORD: &str = "<pad>";
pub const UNK_WORD: &str = "<unk>";

impl Vocabulary {
    fn reserved() -> Vec<String> {
        let mut w = vec![PAD_WORD.to_string(), UNK_WORD.to_string()];
        w.extend(PLACEHOLDER_WORDS.iter().map(|s| s.to_string()));
        w
    }

    /// Reserved ids followed by `words` in order.
    pub fn from_words(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut all = Self::reserved();
        let mut seen = HashSet::new();
        for w in words {
            if w.is_empty() || w.split_whitespace().count() != 1 {
                return Err(CliError::Invalid(format!(
                    "vocabulary word {w:?} is not a single token"
                )));
            }
            if !seen.insert(w.clone()) {
                return Err(CliError::Invalid(format!("vocabulary word {w:?} is repeated")));
            }
            all.push(w);
        }
        Ok(Self { words: all })
    }

    /// Frequency-ranked vocabulary of at most `size` ids, reserved ones
    /// included. Ties are broken alphabetically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, size: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in texts {
            for w in tokenize(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let room = size.saturating_sub(FIRST_WORD_ID as usize);
        Self::from_words(ranked.into_iter().take(room).map(|(w, _)| w.to_string())).expect("distinct single tokens")
    }

    /// Validates a vocabulary read from disk.
    pub fn checked(self) -> Result<Self> {
        if self.words.len() < FIRST_WORD_ID as usize || self.words[..FIRST_WORD_ID as usize] != Self::reserved()[..] {
            return Err(CliError::Invalid(
                "vocabulary must start with the five reserved words".into(),
            ));
        }
        Self::from_words(self.words.into_iter().skip(FIRST_WORD_ID as usize))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    fn index(&self) -> HashMap<&str, u32> {
        self.words[FIRST_WORD_ID as usize..]
            .iter()
            .enumerate()
            .map(|(i, w)| (w.as_str(), FIRST_WORD_ID + i as u32))
            .collect()
    }

    /// Word ids of `text`. The exact placeholder sentence maps back onto
    /// its reserved ids so cleaned items survive a write/read cycle.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        if tokenize(text).eq(PLACEHOLDER_WORDS) {
            return PLACEHOLDER_IDS.to_vec();
        }
        let index = self.index();
        tokenize(text)
            .map(|w| index.get(w).copied().unwrap_or(UNK_ID))
            .collect()
    }

    /// Space-joined words of `ids`; inverse of [`Vocabulary::encode`] for
    /// ids inside the vocabulary.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.word(id).unwrap_or(UNK_WORD))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Knobs for turning records into model inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IngestOptions {
    /// Model image size; loaded images are resized to it.
    pub image_h: usize,
    pub image_w: usize,
    pub rules: CleanRules,
    /// Fail on records without a label.
    pub require_labels: bool,
}

/// News items with their record ids, in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub news: Vec<RawNews>,
}

fn load_raster(path: &Path) -> std::result::Result<Grid, String> {
    let img = image::open(path).map_err(|e| format!("cannot read image {}: {e}", path.display()))?;
    let luma = img.to_luma32f();
    let (w, h) = luma.dimensions();
    Ok(Grid::new(
        h as usize,
        w as usize,
        luma.into_raw().into_iter().map(f64::from).collect(),
    )
    .expect("raster size"))
}

/// Bilinear resize; grids already at the target size pass through
/// unchanged.
pub fn resize(grid: &Grid, h: usize, w: usize) -> Grid {
    if grid.height == h && grid.width == w {
        return grid.clone();
    }
    let src: ImageBuffer<Luma<f32>, Vec<f32>> = ImageBuffer::from_raw(
        grid.width as u32,
        grid.height as u32,
        grid.data.iter().map(|&v| v as f32).collect(),
    )
    .expect("grid length matches its size");
    let out = image::imageops::resize(&src, w as u32, h as u32, FilterType::Triangle);
    Grid::new(h, w, out.into_raw().into_iter().map(f64::from).collect()).expect("resized size")
}

fn image_of(record: &NewsRecord, base: &Path, opts: &IngestOptions) -> Result<Grid> {
    let fail = |msg: String| CliError::Record {
        id: record.id.clone(),
        msg,
    };
    match &record.image {
        None => Ok(Grid::zeros(opts.image_h, opts.image_w)),
        Some(ImageField::Inline(g)) => g.decode().map_err(fail),
        Some(ImageField::Path(p)) => load_raster(&base.join(p)).map_err(fail),
    }
}

/// Loads images, tokenizes with `vocab`, applies the cleaning rules and
/// resizes to the model size. `base` resolves relative image paths.
pub fn encode_records(
    records: &[NewsRecord],
    vocab: &Vocabulary,
    base: &Path,
    opts: &IngestOptions,
) -> Result<Dataset> {
    let mut out = Dataset::default();
    for r in records {
        if opts.require_labels && r.label.is_none() {
            return Err(CliError::Record {
                id: r.id.clone(),
                msg: "label is required here".into(),
            });
        }
        let raw = RawNews {
            image: image_of(r, base, opts)?,
            text: vocab.encode(&r.text),
            label: r.label,
        };
        let mut news = clean(&raw, &opts.rules);
        news.image = resize(&news.image, opts.image_h, opts.image_w);
        out.ids.push(r.id.clone());
        out.news.push(news);
    }
    Ok(out)
}

/// Reads a JSONL file and returns its records plus the directory that
/// relative image paths are resolved against.
pub fn read_records(path: &Path) -> Result<(Vec<NewsRecord>, PathBuf)> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let records = parse_jsonl(std::io::BufReader::new(file)).map_err(|e| e.in_file(path))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((records, base))
}

/// `read_records` then `encode_records`.
pub fn ingest(path: &Path, vocab: &Vocabulary, opts: &IngestOptions) -> Result<Dataset> {
    let (records, base) = read_records(path)?;
    encode_records(&records, vocab, &base, opts)
}

/// Record form of an ingested item: exact inline `f64` image and the
/// decoded word sequence.
pub fn to_record(id: &str, news: &RawNews, vocab: &Vocabulary) -> NewsRecord {
    NewsRecord {
        id: id.to_string(),
        text: vocab.decode(&news.text),
        image: Some(ImageField::Inline(InlineGrid::encode(&news.image))),
        label: news.label,
    }
}

/// Writes `dataset` as JSONL that ingests back to the same items under
/// `vocab`.
pub fn write_jsonl(dataset: &Dataset, vocab: &Vocabulary, mut out: impl Write) -> Result<()> {
    for (id, news) in dataset.ids.iter().zip(&dataset.news) {
        let line = serde_json::to_string(&to_record(id, news, vocab)).map_err(|e| CliError::Invalid(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| CliError::io(Path::new("<output>"), e))?;
    }
    Ok(())
}

/// Reserved ids, then `w5`, `w6`, ... up to `size` ids: the vocabulary of
/// synthetic corpora, whose token ids are already assigned.
pub fn synthetic_vocabulary(size: usize) -> Vocabulary {
    Vocabulary::from_words((FIRST_WORD_ID as usize..size).map(|i| format!("w{i}"))).expect("distinct words")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(min_side: usize) -> IngestOptions {
        IngestOptions {
            image_h: 4,
            image_w: 4,
            rules: CleanRules {
                min_side,
                min_words: 5,
                canvas_h: 4,
                canvas_w: 4,
            },
            require_labels: false,
        }
    }

    #[test]
    fn vocabulary_ranks_by_frequency() {
        let v = Vocabulary::build(["b a a c", "a b d"], 8);
        assert_eq!(v.len(), 8);
        assert_eq!(v.word(5), Some("a"));
        assert_eq!(v.word(6), Some("b"));
        assert_eq!(v.word(7), Some("c"));
        assert_eq!(v.encode("a d zzz"), vec![5, UNK_ID, UNK_ID]);
        // reserved words in ordinary text do not collide with the placeholder ids
        let v = Vocabulary::build(["No text here"], 10);
        assert!(v.encode("No text").iter().all(|&id| id >= FIRST_WORD_ID));
    }

    #[test]
    fn null_image_and_short_text() {
        let r = parse_line(r#"{"id":"x","text":"only three words","image":null,"label":1}"#).unwrap();
        let d = encode_records(&[r], &Vocabulary::build(["only"], 10), Path::new("."), &opts(2)).unwrap();
        assert_eq!(d.news[0].image, Grid::zeros(4, 4));
        assert_eq!(d.news[0].text, PLACEHOLDER_IDS.to_vec());
        assert_eq!(d.news[0].label, Some(1));
    }

    #[test]
    fn inline_grids_decode() {
        let g = InlineGrid {
            height: 1,
            width: 2,
            dtype: PixelType::U8,
            pixels: B64.encode([0u8, 255]),
        };
        assert_eq!(g.decode().unwrap().data, vec![0.0, 1.0]);
        let exact = Grid::new(1, 2, vec![0.1, -3.5]).unwrap();
        assert_eq!(InlineGrid::encode(&exact).decode().unwrap(), exact);
        let short = InlineGrid {
            pixels: B64.encode([1u8]),
            ..g.clone()
        };
        assert!(short.decode().is_err());
        let huge = InlineGrid {
            height: MAX_GRID_SIDE + 1,
            ..g
        };
        assert!(huge.decode().is_err());
    }

    #[test]
    fn small_images_are_cleaned_before_resize() {
        let grid = InlineGrid::encode(&Grid::new(2, 2, vec![1.0; 4]).unwrap());
        let r = NewsRecord {
            id: "a".into(),
            text: "one two three four five".into(),
            image: Some(ImageField::Inline(grid)),
            label: None,
        };
        let v = Vocabulary::build(["one"], 6);
        let kept = encode_records(std::slice::from_ref(&r), &v, Path::new("."), &opts(2)).unwrap();
        assert!(kept.news[0].image.data.iter().all(|&p| (p - 1.0).abs() < 1e-6));
        assert_eq!(kept.news[0].image.height, 4);
        let dropped = encode_records(&[r], &v, Path::new("."), &opts(3)).unwrap();
        assert_eq!(dropped.news[0].image, Grid::zeros(4, 4));
    }

    #[test]
    fn line_errors_carry_numbers() {
        let text = "{\"id\":\"a\",\"text\":\"x\"}\n\n{\"id\":\"b\",\"text\":\"y\"}\n{\"id\":\"a\",\"text\":\"z\"}\n";
        let err = parse_jsonl(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("line 4") && err.contains("duplicate"), "{err}");
        let err = parse_jsonl("{\"id\":\"a\",\"text\":\"x\"}\nnot json\n".as_bytes())
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(parse_line(r#"{"id":"a","text":"x","label":2}"#).is_err());
        assert!(parse_line(r#"{"id":"a","text":"x","extra":1}"#).is_err());
    }

    #[test]
    fn vocabulary_file_checks() {
        let v = synthetic_vocabulary(8);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back.checked().unwrap(), v);
        let bad: Vocabulary = serde_json::from_str(r#"["a","b"]"#).unwrap();
        assert!(bad.checked().is_err());
    }
}
