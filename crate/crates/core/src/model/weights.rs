//! Text manifest + flat little-endian `f32` blob.
//!
//! The manifest has one line per tensor, `name dim0 dim1 ... byte_offset`.
//! Lines starting with `#` are header comments; the toy transformer keeps its
//! hyperparameters there. The blob sits next to the manifest with the `.bin`
//! extension.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{FormatError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightFile {
    /// Header comment lines, without the leading `#`.
    pub header: Vec<String>,
    pub tensors: Vec<NamedTensor>,
}

impl WeightFile {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Blob path paired with a manifest path.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Renders the manifest text and blob bytes, tensors packed in order.
pub fn encode(file: &WeightFile) -> Result<(String, Vec<u8>)> {
    let mut seen = HashSet::new();
    let mut manifest = String::new();
    let mut blob = Vec::new();
    for line in &file.header {
        manifest.push_str(&format!("# {line}\n"));
    }
    for t in &file.tensors {
        if !seen.insert(t.name.as_str()) {
            return Err(FormatError::DuplicateTensor(t.name.clone()).into());
        }
        if t.data.len() != t.numel() {
            return Err(FormatError::ShapeMismatch {
                name: t.name.clone(),
                expected: t.numel(),
                found: t.data.len(),
            }
            .into());
        }
        let dims: Vec<String> = t.shape.iter().map(usize::to_string).collect();
        manifest.push_str(&format!("{} {} {}\n", t.name, dims.join(" "), blob.len()));
        for v in &t.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok((manifest, blob))
}

/// Parses manifest text against blob bytes.
pub fn decode(manifest: &str, blob: &[u8]) -> Result<WeightFile> {
    struct Entry {
        name: String,
        shape: Vec<usize>,
        offset: usize,
    }

    let mut header = Vec::new();
    let mut entries: Vec<Entry> = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in manifest.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            header.push(comment.trim().to_string());
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 3 {
            return Err(FormatError::MalformedLine {
                line: line_no,
                reason: "expected `name dims... byte_offset`".into(),
            }
            .into());
        }
        let numbers = fields[1..]
            .iter()
            .map(|f| f.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| FormatError::MalformedLine {
                line: line_no,
                reason: e.to_string(),
            })?;
        let (offset, shape) = numbers.split_last().expect("at least two numbers");
        if shape.contains(&0) {
            return Err(FormatError::MalformedLine {
                line: line_no,
                reason: "zero-sized dimension".into(),
            }
            .into());
        }
        if offset % 4 != 0 {
            return Err(FormatError::MalformedLine {
                line: line_no,
                reason: format!("offset {offset} is not 4-byte aligned"),
            }
            .into());
        }
        let name = fields[0].to_string();
        if !seen.insert(name.clone()) {
            return Err(FormatError::DuplicateTensor(name).into());
        }
        entries.push(Entry {
            name,
            shape: shape.to_vec(),
            offset: *offset,
        });
    }

    // Each tensor owns the bytes up to the next offset; the last one owns the
    // rest of the blob.
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by_key(|&i| entries[i].offset);
    for (pos, &i) in order.iter().enumerate() {
        let e = &entries[i];
        let numel: usize = e.shape.iter().product();
        let needed = e.offset + numel * 4;
        match order.get(pos + 1) {
            Some(&next) => {
                let extent = entries[next].offset - e.offset;
                if extent != numel * 4 {
                    return Err(FormatError::ShapeMismatch {
                        name: e.name.clone(),
                        expected: numel,
                        found: extent / 4,
                    }
                    .into());
                }
            }
            None => {
                if blob.len() < needed {
                    return Err(FormatError::TruncatedBlob {
                        name: e.name.clone(),
                        needed,
                        available: blob.len(),
                    }
                    .into());
                }
                if blob.len() > needed {
                    return Err(FormatError::ShapeMismatch {
                        name: e.name.clone(),
                        expected: numel,
                        found: (blob.len() - e.offset) / 4,
                    }
                    .into());
                }
            }
        }
    }

    let tensors = entries
        .into_iter()
        .map(|e| {
            let numel: usize = e.shape.iter().product();
            let data = blob[e.offset..e.offset + numel * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            NamedTensor {
                name: e.name,
                shape: e.shape,
                data,
            }
        })
        .collect();
    Ok(WeightFile { header, tensors })
}

pub fn save(file: &WeightFile, manifest_path: &Path) -> Result<()> {
    let (manifest, blob) = encode(file)?;
    fs::write(manifest_path, manifest)?;
    fs::write(blob_path(manifest_path), blob)?;
    Ok(())
}

pub fn load(manifest_path: &Path) -> Result<WeightFile> {
    let manifest = fs::read_to_string(manifest_path)?;
    let blob = fs::read(blob_path(manifest_path))?;
    decode(&manifest, &blob)
}
