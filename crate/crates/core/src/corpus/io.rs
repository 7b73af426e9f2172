use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusError, EmbeddingCorpus, EmbeddingRecord, Role};
use crate::emb1::{sidecar_path, Emb1Error, Emb1Matrix};

const META_SUFFIX: &str = ".meta.jsonl";
const FIXED_COLUMNS: [&str; 4] = ["image_id", "identity_id", "role", "dataset"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Csv,
    Bin,
}

impl CorpusFormat {
    /// `.csv` files are CSV; anything else is treated as EMB1.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => CorpusFormat::Csv,
            _ => CorpusFormat::Bin,
        }
    }
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<EmbeddingCorpus, CorpusError> {
    match format {
        CorpusFormat::Csv => load_csv(path),
        CorpusFormat::Bin => load_bin(path),
    }
}

pub fn write_corpus(corpus: &EmbeddingCorpus, path: &Path, format: CorpusFormat) -> Result<(), CorpusError> {
    match format {
        CorpusFormat::Csv => write_csv(corpus, path),
        CorpusFormat::Bin => write_bin(corpus, path),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    image_id: String,
    identity_id: String,
    role: String,
    dataset: String,
    #[serde(default)]
    attributes: BTreeMap<String, String>,
}

fn load_bin(path: &Path) -> Result<EmbeddingCorpus, CorpusError> {
    let matrix = Emb1Matrix::read(path).map_err(|e| match e {
        Emb1Error::Io { source, .. } => CorpusError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => CorpusError::Format(other.to_string()),
    })?;
    if matrix.rows == 0 {
        return Err(CorpusError::Empty);
    }
    let meta_path = sidecar_path(path, META_SUFFIX);
    let reader = BufReader::new(File::open(&meta_path).map_err(io_err(&meta_path))?);
    let mut records = Vec::with_capacity(matrix.rows);
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(&meta_path))?;
        let row = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if records.len() == matrix.rows {
            return Err(CorpusError::Metadata {
                row,
                message: format!("metadata has more lines than the {} embedding rows", matrix.rows),
            });
        }
        let meta: MetaLine = serde_json::from_str(&line).map_err(|e| CorpusError::Metadata {
            row,
            message: e.to_string(),
        })?;
        let role = meta
            .role
            .parse::<Role>()
            .map_err(|value| CorpusError::UnknownRole { row, value })?;
        records.push(EmbeddingRecord {
            image_id: meta.image_id,
            identity_id: meta.identity_id,
            role,
            dataset: meta.dataset,
            attributes: meta.attributes,
            vector: matrix.row(records.len()).to_vec(),
        });
    }
    if records.len() != matrix.rows {
        return Err(CorpusError::Metadata {
            row: records.len() + 1,
            message: format!("metadata has {} lines, embedding file has {} rows", records.len(), matrix.rows),
        });
    }
    EmbeddingCorpus::new(records)
}

fn write_bin(corpus: &EmbeddingCorpus, path: &Path) -> Result<(), CorpusError> {
    let data = corpus.records().iter().flat_map(|r| r.vector.iter().copied()).collect();
    let matrix = Emb1Matrix::new(corpus.len(), corpus.dimension(), data)
        .map_err(|e| CorpusError::Format(e.to_string()))?;
    fs::write(path, matrix.encode()).map_err(io_err(path))?;

    let meta_path = sidecar_path(path, META_SUFFIX);
    let mut out = BufWriter::new(File::create(&meta_path).map_err(io_err(&meta_path))?);
    for r in corpus.records() {
        let line = MetaLine {
            image_id: r.image_id.clone(),
            identity_id: r.identity_id.clone(),
            role: r.role.as_str().to_string(),
            dataset: r.dataset.clone(),
            attributes: r.attributes.clone(),
        };
        serde_json::to_writer(&mut out, &line).map_err(|e| CorpusError::Format(e.to_string()))?;
        out.write_all(b"\n").map_err(io_err(&meta_path))?;
    }
    out.flush().map_err(io_err(&meta_path))
}

fn load_csv(path: &Path) -> Result<EmbeddingCorpus, CorpusError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.starts_with(crate::emb1::MAGIC) {
        return Err(CorpusError::Header("file is EMB1 binary, not CSV".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(bytes.as_slice());
    let header = reader
        .headers()
        .map_err(|e| CorpusError::Header(e.to_string()))?
        .clone();
    let columns: Vec<&str> = header.iter().collect();
    if columns.len() < FIXED_COLUMNS.len() || columns[..4] != FIXED_COLUMNS {
        return Err(CorpusError::Header(format!(
            "expected leading columns {}",
            FIXED_COLUMNS.join(",")
        )));
    }
    let mut attrs = Vec::new();
    let mut pos = FIXED_COLUMNS.len();
    while pos < columns.len() {
        match columns[pos].strip_prefix("attr:") {
            Some(name) if !name.is_empty() => attrs.push(name.to_string()),
            Some(_) => return Err(CorpusError::Header("empty attribute name".into())),
            None => break,
        }
        pos += 1;
    }
    let dim = columns.len() - pos;
    if dim == 0 {
        return Err(CorpusError::Header("no embedding columns".into()));
    }
    for (j, name) in columns[pos..].iter().enumerate() {
        if *name != format!("e{j}") {
            return Err(CorpusError::Header(format!(
                "column {} is {name:?}, expected \"e{j}\"",
                pos + j + 1
            )));
        }
    }

    let mut records = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| CorpusError::Metadata {
            row,
            message: e.to_string(),
        })?;
        if rec.len() < pos {
            return Err(CorpusError::Metadata {
                row,
                message: format!("expected at least {pos} metadata fields, found {}", rec.len()),
            });
        }
        if rec.len() != columns.len() {
            return Err(CorpusError::DimensionMismatch {
                row,
                expected: dim,
                found: rec.len() - pos,
            });
        }
        let role = rec[2]
            .parse::<Role>()
            .map_err(|value| CorpusError::UnknownRole { row, value })?;
        let attributes = attrs
            .iter()
            .enumerate()
            .filter(|(k, _)| !rec[FIXED_COLUMNS.len() + k].is_empty())
            .map(|(k, name)| (name.clone(), rec[FIXED_COLUMNS.len() + k].to_string()))
            .collect();
        let vector = (0..dim)
            .map(|j| {
                let text = &rec[pos + j];
                text.trim()
                    .parse::<f32>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| CorpusError::MalformedFloat {
                        row,
                        column: format!("e{j}"),
                        value: text.to_string(),
                    })
            })
            .collect::<Result<Vec<f32>, _>>()?;
        records.push(EmbeddingRecord {
            image_id: rec[0].to_string(),
            identity_id: rec[1].to_string(),
            role,
            dataset: rec[3].to_string(),
            attributes,
            vector,
        });
    }
    EmbeddingCorpus::new(records)
}

fn write_csv(corpus: &EmbeddingCorpus, path: &Path) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut writer = csv::Writer::from_writer(BufWriter::new(file));
    let attrs = corpus.attribute_names();
    let csv_err = |e: csv::Error| CorpusError::Format(e.to_string());

    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(attrs.iter().map(|a| format!("attr:{a}")));
    header.extend((0..corpus.dimension()).map(|j| format!("e{j}")));
    writer.write_record(&header).map_err(csv_err)?;

    let mut fields: Vec<String> = Vec::with_capacity(header.len());
    for r in corpus.records() {
        fields.clear();
        fields.push(r.image_id.clone());
        fields.push(r.identity_id.clone());
        fields.push(r.role.as_str().to_string());
        fields.push(r.dataset.clone());
        for a in &attrs {
            fields.push(r.attributes.get(a).cloned().unwrap_or_default());
        }
        // Display for f32 prints the shortest string that parses back to the same value.
        fields.extend(r.vector.iter().map(|v| v.to_string()));
        writer.write_record(&fields).map_err(csv_err)?;
    }
    writer.flush().map_err(io_err(path))
}
