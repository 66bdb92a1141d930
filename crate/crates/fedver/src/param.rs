//! Flat parameter vectors with named-layout metadata.
//!
//! A [`ParamVector`] is the unit exchanged between devices and aggregators:
//! a flat `f64` vector plus an ordered list of (name, shape) records whose
//! total element count equals the vector length. All cross-device arithmetic
//! (add, scale, average) requires identical layouts.

use crate::error::{FedverError, Result};
use sha2::{Digest, Sha256};

/// One named tensor inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl LayoutEntry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        LayoutEntry {
            name: name.into(),
            shape,
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered layout of a parameter vector.
pub type Layout = Vec<LayoutEntry>;

pub fn layout_len(layout: &Layout) -> usize {
    layout.iter().map(LayoutEntry::len).sum()
}

/// Flat real-valued model parameters with layout metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layout: Layout,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(layout: Layout, values: Vec<f64>) -> Result<Self> {
        let expected = layout_len(&layout);
        if values.len() != expected {
            return Err(FedverError::LayoutMismatch(format!(
                "layout describes {expected} elements but vector holds {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FedverError::invalid("parameter vector has non-finite entry"));
        }
        Ok(ParamVector { layout, values })
    }

    pub fn zeros(layout: Layout) -> Self {
        let n = layout_len(&layout);
        ParamVector {
            layout,
            values: vec![0.0; n],
        }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Slice of the values belonging to the layout entry at `index`.
    pub fn entry_values(&self, index: usize) -> &[f64] {
        let start: usize = self.layout[..index].iter().map(LayoutEntry::len).sum();
        &self.values[start..start + self.layout[index].len()]
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.layout == other.layout
    }

    fn check_layout(&self, other: &ParamVector) -> Result<()> {
        if !self.same_layout(other) {
            return Err(FedverError::LayoutMismatch(
                "parameter vectors have different layouts".into(),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_layout(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        Ok(ParamVector {
            layout: self.layout.clone(),
            values,
        })
    }

    pub fn scale(&self, factor: f64) -> ParamVector {
        ParamVector {
            layout: self.layout.clone(),
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    /// Replaces the stored values, keeping the layout. Lengths must agree.
    pub fn with_values(&self, values: Vec<f64>) -> Result<ParamVector> {
        ParamVector::new(self.layout.clone(), values)
    }

    /// Versioned binary record: layout then IEEE-754 doubles in layout order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"FVPV");
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&(self.layout.len() as u32).to_le_bytes());
        for entry in &self.layout {
            let name = entry.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.extend_from_slice(&(entry.shape.len() as u8).to_le_bytes());
            for &dim in &entry.shape {
                out.extend_from_slice(&(dim as u32).to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ParamVector> {
        let mut r = Reader::new(bytes);
        let magic = r.take(4)?;
        if magic != b"FVPV" {
            return Err(FedverError::invalid("bad parameter record magic"));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != 1 {
            return Err(FedverError::invalid(format!(
                "unsupported parameter record version {version}"
            )));
        }
        let n_entries = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let mut layout = Vec::with_capacity(n_entries);
        for _ in 0..n_entries {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| FedverError::invalid("layout entry name is not utf-8"))?;
            let ndims = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndims);
            for _ in 0..ndims {
                shape.push(u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize);
            }
            layout.push(LayoutEntry::new(name, shape));
        }
        let n_values = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
        let mut values = Vec::with_capacity(n_values);
        for _ in 0..n_values {
            values.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        if !r.done() {
            return Err(FedverError::invalid("trailing bytes in parameter record"));
        }
        ParamVector::new(layout, values)
    }

    /// Hex SHA-256 of the serialized record; used in round transcripts.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(FedverError::invalid("truncated parameter record"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Weighted coordinatewise average of parameter vectors with identical
/// layouts. Weights must be the caller's responsibility to normalize.
pub fn weighted_sum(models: &[(ParamVector, f64)]) -> Result<ParamVector> {
    let (first, _) = models
        .first()
        .ok_or_else(|| FedverError::invalid("weighted_sum of empty model list"))?;
    let mut acc = vec![0.0; first.len()];
    for (model, weight) in models {
        first.check_layout(model)?;
        for (a, v) in acc.iter_mut().zip(model.values()) {
            *a += weight * v;
        }
    }
    first.with_values(acc)
}
