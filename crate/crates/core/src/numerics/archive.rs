//! Named-tensor archive.
//!
//! Layout: one UTF-8 JSON header line
//! `{"entries":[{"name":..,"dtype":"f32","shape":[..]},..]}` terminated by
//! `\n`, then every payload as little-endian f32 in header order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    entries: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

/// Ordered collection of named f32 tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    entries: Vec<(String, Tensor<f32>)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces `name`, converting to f32 on the way in.
    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let name = name.into();
        let t = t.cast::<f32>().with_requires_grad(false);
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = t,
            None => self.entries.push((name, t)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_as<T: Scalar>(&self, name: &str) -> Option<Tensor<T>> {
        self.get(name).map(|t| t.cast())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            entries: self
                .entries
                .iter()
                .map(|(name, t)| Entry {
                    name: name.clone(),
                    dtype: "f32".into(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for (_, t) in &self.entries {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line)?;
        if line.last() != Some(&b'\n') {
            bail!(Format, "archive header is not newline-terminated");
        }
        let header: Header = serde_json::from_slice(&line[..line.len() - 1])?;
        let mut entries = Vec::with_capacity(header.entries.len());
        for e in header.entries {
            if e.dtype != "f32" {
                bail!(Format, "entry {:?} has unsupported dtype {:?}", e.name, e.dtype);
            }
            let n: usize = e.shape.iter().product();
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf).map_err(|err| {
                crate::Error::Format(format!("payload of {:?} truncated: {err}", e.name))
            })?;
            let data = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            entries.push((e.name, Tensor::new(e.shape, data)?));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            bail!(Format, "trailing bytes after last payload");
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    /// Entries of `other` override same-named entries here.
    pub fn merge(&mut self, other: &Archive) {
        for (name, t) in &other.entries {
            self.insert(name.clone(), t);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_json_line_then_le_payloads() {
        let mut a = Archive::new();
        a.insert("x", &Tensor::<f32>::new([2], vec![1.0, -2.5]).unwrap());
        let mut bytes = Vec::new();
        a.write_to(&mut bytes).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
        assert_eq!(header["entries"][0]["name"], "x");
        assert_eq!(header["entries"][0]["dtype"], "f32");
        assert_eq!(header["entries"][0]["shape"], serde_json::json!([2]));
        assert_eq!(&bytes[nl + 1..nl + 5], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[nl + 5..], &(-2.5f32).to_le_bytes());
    }

    #[test]
    fn truncated_and_trailing_rejected() {
        let mut a = Archive::new();
        a.insert("x", &Tensor::<f32>::zeros([3]));
        let mut bytes = Vec::new();
        a.write_to(&mut bytes).unwrap();
        assert!(Archive::read_from(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Archive::read_from(&extra[..]).is_err());
        assert!(Archive::read_from(&b"{\"entries\":[]}"[..]).is_err());
    }

    #[test]
    fn merge_overrides() {
        let mut a = Archive::new();
        a.insert("w", &Tensor::<f32>::zeros([1]));
        let mut b = Archive::new();
        b.insert("w", &Tensor::<f32>::full([1], 2.0));
        b.insert("v", &Tensor::<f32>::zeros([1]));
        a.merge(&b);
        assert_eq!(a.get("w").unwrap().data(), &[2.0]);
        assert_eq!(a.len(), 2);
    }

    proptest! {
        #[test]
        fn round_trip(shapes in prop::collection::vec(prop::collection::vec(0usize..4, 0..3), 0..5), seed in any::<u32>()) {
            let mut a = Archive::new();
            for (i, s) in shapes.iter().enumerate() {
                let t = Tensor::<f32>::from_fn(s.clone(), |k| (k as f32 + seed as f32) * 0.37 - i as f32);
                a.insert(format!("t{i}"), &t);
            }
            let mut bytes = Vec::new();
            a.write_to(&mut bytes).unwrap();
            let b = Archive::read_from(&bytes[..]).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
