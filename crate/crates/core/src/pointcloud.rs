//! Point cloud container and the on-disk formats it is exchanged in.
//!
//! Supported formats:
//!
//! - `kitti-bin`: packed records of four little-endian `f32` values
//!   (`x, y, z, intensity`), 16 bytes per point, no header.
//! - `ascii-xyz`: one point per line, whitespace separated
//!   `x y z [intensity [label]]`. Blank lines and lines starting with `#`
//!   are skipped.
//! - label files: one little-endian `u32` per point; the semantic class is
//!   the low 16 bits (the high half carries instance ids and is dropped).

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub type Label = u16;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    positions: Vec<[f64; 3]>,
    intensity: Vec<f64>,
    labels: Option<Vec<Label>>,
}

impl PointCloud {
    /// Builds a cloud, rejecting non-finite coordinates and length
    /// mismatches. Intensities outside `[0, 1]` are clamped.
    pub fn new(
        positions: Vec<[f64; 3]>,
        intensity: Vec<f64>,
        labels: Option<Vec<Label>>,
    ) -> Result<Self> {
        if positions.len() != intensity.len() {
            return Err(Error::shape(format!(
                "{} positions but {} intensities",
                positions.len(),
                intensity.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != positions.len() {
                return Err(Error::shape(format!(
                    "{} positions but {} labels",
                    positions.len(),
                    l.len()
                )));
            }
        }
        if let Some(i) = positions.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::format(format!("non-finite coordinate at point {i}")));
        }
        let mut intensity = intensity;
        let mut clamped = 0usize;
        for v in intensity.iter_mut() {
            if !v.is_finite() {
                return Err(Error::format("non-finite intensity"));
            }
            if *v < 0.0 || *v > 1.0 {
                *v = v.clamp(0.0, 1.0);
                clamped += 1;
            }
        }
        if clamped > 0 {
            log::warn!("clamped {clamped} intensity values into [0, 1]");
        }
        Ok(Self { positions, intensity, labels })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn intensity(&self) -> &[f64] {
        &self.intensity
    }

    pub fn labels(&self) -> Option<&[Label]> {
        self.labels.as_deref()
    }

    pub fn with_labels(mut self, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::shape(format!(
                "{} points but {} labels",
                self.len(),
                labels.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// Checks that every label is a valid class id.
    pub fn validate_labels(&self, num_classes: usize) -> Result<()> {
        if let Some(labels) = &self.labels {
            if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
                return Err(Error::format(format!(
                    "label {bad} out of range for {num_classes} classes"
                )));
            }
        }
        Ok(())
    }

    /// Keeps the points whose index satisfies `keep`, in order.
    pub fn retain_indices(&self, keep: impl Fn(usize) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        Self {
            positions: idx.iter().map(|&i| self.positions[i]).collect(),
            intensity: idx.iter().map(|&i| self.intensity[i]).collect(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    pub(crate) fn positions_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.positions
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointFormat {
    KittiBin,
    AsciiXyz,
}

impl FromStr for PointFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kitti-bin" | "bin" => Ok(PointFormat::KittiBin),
            "ascii-xyz" | "xyz" => Ok(PointFormat::AsciiXyz),
            other => Err(Error::config(format!("unknown point format '{other}'"))),
        }
    }
}

impl fmt::Display for PointFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PointFormat::KittiBin => "kitti-bin",
            PointFormat::AsciiXyz => "ascii-xyz",
        })
    }
}

const KITTI_RECORD: usize = 16;

pub fn decode_kitti_bin(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() % KITTI_RECORD != 0 {
        return Err(Error::format(format!(
            "kitti-bin length {} is not a multiple of {KITTI_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / KITTI_RECORD;
    let mut positions = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(KITTI_RECORD).enumerate() {
        let mut vals = [0f32; 4];
        for (v, b) in vals.iter_mut().zip(rec.chunks_exact(4)) {
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
        if vals.iter().any(|v| v.is_nan()) {
            return Err(Error::format(format!("NaN in record {i}")));
        }
        positions.push([vals[0] as f64, vals[1] as f64, vals[2] as f64]);
        intensity.push(vals[3] as f64);
    }
    PointCloud::new(positions, intensity, None)
}

pub fn encode_kitti_bin(pc: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(pc.len() * KITTI_RECORD);
    for (p, &i) in pc.positions.iter().zip(&pc.intensity) {
        for v in [p[0], p[1], p[2], i] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_ascii_xyz(text: &str) -> Result<PointCloud> {
    let mut positions = Vec::new();
    let mut intensity = Vec::new();
    let mut labels: Vec<Label> = Vec::new();
    let mut labelled: Option<bool> = None;

    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if !(3..=5).contains(&fields.len()) {
            return Err(Error::format(format!(
                "line {}: expected 3 to 5 fields, found {}",
                lineno + 1,
                fields.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::format(format!("line {}: '{s}': {e}", lineno + 1)))
        };
        positions.push([num(fields[0])?, num(fields[1])?, num(fields[2])?]);
        intensity.push(if fields.len() >= 4 { num(fields[3])? } else { 0.0 });

        let has_label = fields.len() == 5;
        match labelled {
            None => labelled = Some(has_label),
            Some(prev) if prev != has_label => {
                return Err(Error::format(format!(
                    "line {}: label column present on some lines only",
                    lineno + 1
                )))
            }
            _ => {}
        }
        if has_label {
            let l = fields[4].parse::<Label>().map_err(|e| {
                Error::format(format!("line {}: label '{}': {e}", lineno + 1, fields[4]))
            })?;
            labels.push(l);
        }
    }
    let labels = (labelled == Some(true)).then_some(labels);
    PointCloud::new(positions, intensity, labels)
}

pub fn encode_ascii_xyz(pc: &PointCloud) -> String {
    let mut out = String::new();
    for i in 0..pc.len() {
        let p = pc.positions[i];
        out.push_str(&format!("{} {} {} {}", p[0], p[1], p[2], pc.intensity[i]));
        if let Some(l) = &pc.labels {
            out.push_str(&format!(" {}", l[i]));
        }
        out.push('\n');
    }
    out
}

pub fn read_point_cloud(path: impl AsRef<Path>, format: PointFormat) -> Result<PointCloud> {
    match format {
        PointFormat::KittiBin => decode_kitti_bin(&fs::read(path)?),
        PointFormat::AsciiXyz => decode_ascii_xyz(&fs::read_to_string(path)?),
    }
}

pub fn write_point_cloud(pc: &PointCloud, path: impl AsRef<Path>, format: PointFormat) -> Result<()> {
    match format {
        PointFormat::KittiBin => fs::write(path, encode_kitti_bin(pc))?,
        PointFormat::AsciiXyz => fs::write(path, encode_ascii_xyz(pc))?,
    }
    Ok(())
}

/// Decodes a label file. When `expected` is given the entry count must match it.
pub fn decode_labels(bytes: &[u8], expected: Option<usize>) -> Result<Vec<Label>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::format(format!(
            "label file length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    let n = bytes.len() / 4;
    if let Some(e) = expected {
        if e != n {
            return Err(Error::shape(format!("expected {e} labels, file holds {n}")));
        }
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| (u32::from_le_bytes([b[0], b[1], b[2], b[3]]) & 0xFFFF) as Label)
        .collect())
}

pub fn encode_labels(labels: &[Label]) -> Vec<u8> {
    labels.iter().flat_map(|&l| (l as u32).to_le_bytes()).collect()
}

pub fn read_labels(path: impl AsRef<Path>, expected: Option<usize>) -> Result<Vec<Label>> {
    decode_labels(&fs::read(path)?, expected)
}

pub fn write_labels(labels: &[Label], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_labels(labels))?;
    Ok(())
}

/// User-supplied mapping from raw dataset ids to training class ids.
///
/// Text form: one `raw target` pair per line (an optional `:` between them
/// is accepted), `#` comments allowed. Unmapped raw ids go to `fallback`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRemap {
    table: HashMap<Label, Label>,
    pub fallback: Label,
}

impl LabelRemap {
    pub fn parse(text: &str, fallback: Label) -> Result<Self> {
        let mut table = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let line = line.replace(':', " ");
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 2 {
                return Err(Error::format(format!(
                    "remap line {}: expected 'raw target'",
                    lineno + 1
                )));
            }
            let parse = |s: &str| {
                s.parse::<Label>()
                    .map_err(|e| Error::format(format!("remap line {}: {e}", lineno + 1)))
            };
            let (raw, target) = (parse(fields[0])?, parse(fields[1])?);
            if table.insert(raw, target).is_some() {
                return Err(Error::format(format!(
                    "remap line {}: raw id {raw} mapped twice",
                    lineno + 1
                )));
            }
        }
        Ok(Self { table, fallback })
    }

    pub fn map(&self, raw: Label) -> Label {
        self.table.get(&raw).copied().unwrap_or(self.fallback)
    }

    pub fn apply(&self, labels: &mut [Label]) {
        for l in labels {
            *l = self.map(*l);
        }
    }
}
