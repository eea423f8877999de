//! JSON-lines dataset files: one header record, then one record per sample.
//! Pixels are hex-encoded RGB bytes in row-major order.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use glimpse_core::backbone::Image;
use glimpse_core::training::{GroundedSample, PatchBox};
use glimpse_core::vocab::{TokenId, SYMBOLS};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const DATASET_FORMAT: &str = "glimpse-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub grid_h: usize,
    pub grid_w: usize,
    pub count: usize,
    pub seed: u64,
    pub vocab: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: usize,
    pixels: String,
    question_ids: Vec<TokenId>,
    answer_ids: Vec<TokenId>,
    boxes: Vec<PatchBox>,
    mask: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<GroundedSample>,
}

impl Dataset {
    pub fn new(seed: u64, grid_h: usize, grid_w: usize, samples: Vec<GroundedSample>) -> Self {
        Self {
            header: DatasetHeader {
                format: DATASET_FORMAT.to_string(),
                version: DATASET_VERSION,
                grid_h,
                grid_w,
                count: samples.len(),
                seed,
                vocab: SYMBOLS.iter().map(|s| s.to_string()).collect(),
            },
            samples,
        }
    }

    pub fn write_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        serde_json::to_writer(&mut *out, &self.header)?;
        out.write_all(b"\n")?;
        for (id, s) in self.samples.iter().enumerate() {
            let rec = Record {
                id,
                pixels: hex::encode(&s.image.pixels),
                question_ids: s.question_ids.clone(),
                answer_ids: s.answer_ids.clone(),
                boxes: s.boxes.clone(),
                mask: s.mask.iter().map(|&m| u8::from(m > 0.5)).collect(),
            };
            serde_json::to_writer(&mut *out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
        Self::read_from(BufReader::new(file)).map_err(|e| match e {
            CliError::Format(m) => CliError::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn read_from(reader: impl BufRead) -> CliResult<Self> {
        let bad = |line: usize, m: String| CliError::Format(format!("line {line}: {m}"));
        let mut lines = reader.lines();
        let first = lines
            .next()
            .ok_or_else(|| bad(1, "empty dataset file".into()))?
            .map_err(|e| bad(1, e.to_string()))?;
        let header: DatasetHeader = serde_json::from_str(&first).map_err(|e| bad(1, format!("header: {e}")))?;
        if header.format != DATASET_FORMAT {
            return Err(bad(1, format!("format {:?} is not {DATASET_FORMAT:?}", header.format)));
        }
        if header.version != DATASET_VERSION {
            return Err(bad(1, format!("dataset version {} unsupported (expected {DATASET_VERSION})", header.version)));
        }
        if header.vocab.iter().map(String::as_str).ne(SYMBOLS.iter().copied()) {
            return Err(bad(1, "vocabulary differs from this build's symbol table".into()));
        }
        let n = header.grid_h * header.grid_w;
        let mut samples = Vec::with_capacity(header.count);
        for (i, line) in lines.enumerate() {
            let ln = i + 2;
            let line = line.map_err(|e| bad(ln, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| bad(ln, e.to_string()))?;
            if rec.id != samples.len() {
                return Err(bad(ln, format!("record id {} out of order", rec.id)));
            }
            let pixels = hex::decode(&rec.pixels).map_err(|e| bad(ln, format!("pixels: {e}")))?;
            let image = Image::new(header.grid_h, header.grid_w, pixels).map_err(|e| bad(ln, e.to_string()))?;
            if rec.mask.len() != n || rec.mask.iter().any(|&m| m > 1) {
                return Err(bad(ln, format!("mask must hold {n} entries of 0 or 1")));
            }
            let vocab = header.vocab.len() as TokenId;
            if rec.question_ids.iter().chain(&rec.answer_ids).any(|&t| t >= vocab) {
                return Err(bad(ln, "token id outside the vocabulary".into()));
            }
            samples.push(GroundedSample {
                image,
                question_ids: rec.question_ids,
                answer_ids: rec.answer_ids,
                boxes: rec.boxes,
                mask: rec.mask.into_iter().map(f64::from).collect(),
            });
        }
        if samples.len() != header.count {
            return Err(CliError::Format(format!("header promises {} samples, file holds {}", header.count, samples.len())));
        }
        Ok(Self { header, samples })
    }
}
