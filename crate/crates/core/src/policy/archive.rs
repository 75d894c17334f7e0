//! Flat binary container of named `f64` tensors.
//!
//! Layout:
//!
//! ```text
//! ALPTENSORS 1
//! <count>
//! <name> <dims joined by 'x'> <byte offset> <byte length>
//! ...
//! END
//! <little-endian f64 payload>
//! ```
//!
//! Offsets are relative to the first payload byte and tensors are stored
//! contiguously in header order, so the encoding of a given archive is unique
//! and `encode(decode(bytes)) == bytes`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

const MAGIC: &str = "ALPTENSORS 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    entries: Vec<(String, Tensor)>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.chars().any(|c| c.is_whitespace()) {
            return Err(Error::Format(format!("invalid tensor name {name:?}")));
        }
        if self.get(&name).is_some() {
            return Err(Error::Format(format!("duplicate tensor name {name}")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC}\n{}\n", self.entries.len());
        let mut offset = 0usize;
        for (name, t) in &self.entries {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let bytes = t.len() * 8;
            header.push_str(&format!("{name} {} {offset} {bytes}\n", dims.join("x")));
            offset += bytes;
        }
        header.push_str("END\n");
        let mut out = header.into_bytes();
        out.reserve(offset);
        for (_, t) in &self.entries {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(m.to_string());
        let mut pos = 0usize;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header"))?;
            let line = std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header is not utf-8"))?;
            pos += nl + 1;
            Ok(line)
        };
        if next_line()? != MAGIC {
            return Err(bad("bad magic line"));
        }
        let count: usize = next_line()?.parse().map_err(|_| bad("bad tensor count"))?;
        let mut specs = Vec::with_capacity(count);
        let mut expected_offset = 0usize;
        for _ in 0..count {
            let line = next_line()?;
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() != 4 {
                return Err(bad("bad header entry"));
            }
            let shape: Vec<usize> = parts[1]
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("bad shape"))?;
            let offset: usize = parts[2].parse().map_err(|_| bad("bad offset"))?;
            let len: usize = parts[3].parse().map_err(|_| bad("bad length"))?;
            if offset != expected_offset || len != shape.iter().product::<usize>() * 8 {
                return Err(bad("non-canonical offsets"));
            }
            expected_offset += len;
            specs.push((parts[0].to_string(), shape, offset, len));
        }
        if next_line()? != "END" {
            return Err(bad("missing END marker"));
        }
        let payload = &bytes[pos..];
        if payload.len() != expected_offset {
            return Err(bad("payload length does not match header"));
        }
        let mut archive = Self::new();
        for (name, shape, offset, len) in specs {
            let data = payload[offset..offset + len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            archive.push(name, Tensor::new(shape, data)?)?;
        }
        Ok(archive)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn encoding_round_trips_bytewise(
            tensors in proptest::collection::vec(
                (1usize..4, 1usize..5).prop_flat_map(|(r, c)| {
                    proptest::collection::vec(any::<f64>(), r * c).prop_map(move |d| (r, c, d))
                }),
                0..5,
            )
        ) {
            let mut a = TensorArchive::new();
            for (i, (r, c, d)) in tensors.into_iter().enumerate() {
                a.push(format!("t{i}.w"), Tensor::new(vec![r, c], d).unwrap()).unwrap();
            }
            let bytes = a.encode();
            let back = TensorArchive::decode(&bytes).unwrap();
            prop_assert_eq!(back.encode(), bytes);
        }
    }

    #[test]
    fn rejects_truncated_payload() {
        let mut a = TensorArchive::new();
        a.push("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut bytes = a.encode();
        bytes.pop();
        assert!(TensorArchive::decode(&bytes).is_err());
    }

    #[test]
    fn rejects_names_with_spaces() {
        let mut a = TensorArchive::new();
        assert!(a.push("a b", Tensor::scalar(1.0)).is_err());
    }
}
