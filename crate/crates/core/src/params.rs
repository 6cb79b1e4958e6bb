//! Flat parameter storage with named layer segments.
//!
//! A [`ParamVector`] is one contiguous `Vec<f64>` plus a layout that cuts it
//! into named segments. Each segment is one "layer" for the purpose of the
//! layer-wise EMA weight: one per weight matrix and one per bias vector.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"DPVC";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Read-only view of one layer segment.
#[derive(Debug, Clone, Copy)]
pub struct LayerView<'a> {
    pub name: &'a str,
    pub values: &'a [f64],
}

impl LayerView<'_> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn l1_norm(&self) -> f64 {
        l1_norm(self.values)
    }
}

/// Sum of absolute values. Zero for an empty slice.
pub fn l1_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v.abs()).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<[Segment]>,
}

impl ParamVector {
    /// Builds a vector from `(name, len)` pairs laid out back to back.
    pub fn new<S: Into<String>>(
        segments: impl IntoIterator<Item = (S, usize)>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let mut offset = 0;
        let mut names = HashSet::new();
        let mut layout = Vec::new();
        for (name, len) in segments {
            let name = name.into();
            if !names.insert(name.clone()) {
                return Err(Error::InvalidLayout(format!(
                    "duplicate layer name {name:?}"
                )));
            }
            layout.push(Segment { name, offset, len });
            offset += len;
        }
        if offset != values.len() {
            return Err(Error::InvalidLayout(format!(
                "segments cover {offset} values but {} were given",
                values.len()
            )));
        }
        Ok(Self {
            values,
            layout: layout.into(),
        })
    }

    pub fn zeros<S: Into<String>>(segments: impl IntoIterator<Item = (S, usize)>) -> Result<Self> {
        let segments: Vec<(String, usize)> =
            segments.into_iter().map(|(n, l)| (n.into(), l)).collect();
        let total = segments.iter().map(|(_, l)| l).sum();
        Self::new(segments, vec![0.0; total])
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::LengthMismatch {
                expected: self.values.len(),
                actual: values.len(),
            });
        }
        Ok(Self {
            values,
            layout: Arc::clone(&self.layout),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            layout: Arc::clone(&self.layout),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn segments(&self) -> &[Segment] {
        &self.layout
    }

    pub fn num_layers(&self) -> usize {
        self.layout.len()
    }

    pub fn layer(&self, index: usize) -> LayerView<'_> {
        let seg = &self.layout[index];
        LayerView {
            name: &seg.name,
            values: &self.values[seg.offset..seg.offset + seg.len],
        }
    }

    pub fn layer_by_name(&self, name: &str) -> Option<LayerView<'_>> {
        self.layout
            .iter()
            .position(|s| s.name == name)
            .map(|i| self.layer(i))
    }

    pub fn layer_mut(&mut self, index: usize) -> &mut [f64] {
        let seg = &self.layout[index];
        &mut self.values[seg.offset..seg.offset + seg.len]
    }

    pub fn layers(&self) -> impl Iterator<Item = LayerView<'_>> {
        (0..self.layout.len()).map(move |i| self.layer(i))
    }

    pub fn is_compatible(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.is_compatible(other) {
            Ok(())
        } else {
            Err(Error::IncompatibleLayout(format!(
                "{} values / {} layers vs {} values / {} layers",
                self.len(),
                self.num_layers(),
                other.len(),
                other.num_layers()
            )))
        }
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_compatible(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self {
            values,
            layout: Arc::clone(&self.layout),
        })
    }

    /// `beta * self + (1 - beta) * other`, elementwise.
    pub fn blend(&self, other: &Self, beta: f64) -> Result<Self> {
        self.zip_with(other, |a, b| beta * a + (1.0 - beta) * b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
            layout: Arc::clone(&self.layout),
        }
    }

    /// `self += factor * other`, in place.
    pub fn axpy_in_place(&mut self, factor: f64, other: &Self) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += factor * b;
        }
        Ok(())
    }

    /// Blends one layer of `self` toward the same layer of `other`:
    /// `self[layer] = beta * self[layer] + (1 - beta) * other[layer]`.
    pub fn blend_layer_in_place(&mut self, index: usize, other: &Self, beta: f64) -> Result<()> {
        self.check_compatible(other)?;
        let seg = &self.layout[index];
        let range = seg.offset..seg.offset + seg.len;
        for (a, b) in self.values[range.clone()]
            .iter_mut()
            .zip(&other.values[range])
        {
            *a = beta * *a + (1.0 - beta) * b;
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.layout.len() as u64).to_le_bytes())?;
        for seg in self.layout.iter() {
            let name = seg.name.as_bytes();
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(seg.len as u64).to_le_bytes())?;
        }
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        fn bad(msg: &str) -> Error {
            Error::Malformed {
                row: 0,
                msg: format!("checkpoint: {msg}"),
            }
        }
        fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            Ok(u64::from_le_bytes(buf))
        }

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut version = [0u8; 4];
        r.read_exact(&mut version)?;
        if u32::from_le_bytes(version) != CHECKPOINT_VERSION {
            return Err(bad("unsupported version"));
        }
        let n_segments = read_u64(&mut r)? as usize;
        let mut segments = Vec::with_capacity(n_segments.min(1 << 16));
        for _ in 0..n_segments {
            let name_len = read_u64(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("layer name is not utf-8"))?;
            let len = read_u64(&mut r)? as usize;
            segments.push((name, len));
        }
        let n_values = read_u64(&mut r)? as usize;
        let mut values = Vec::with_capacity(n_values.min(1 << 24));
        for _ in 0..n_values {
            values.push(f64::from_bits(read_u64(&mut r)?));
        }
        Self::new(segments, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
