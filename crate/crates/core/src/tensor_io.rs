//! Binary tensor files and model checkpoints.
//!
//! A DSC1 file is the magic `DSC1`, a `u32` tensor count, then per tensor a
//! `u32` rank, `rank` `u32` dimensions and the `f32` data in row-major order.
//! All integers and floats are little-endian.
//!
//! A checkpoint is the magic `DSCK`, a `u32` format version, a `u32` byte
//! length followed by that many bytes of JSON metadata, then a DSC1 block
//! holding the parameters in the order listed under the metadata's `params`
//! key.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DSC1_MAGIC: &[u8; 4] = b"DSC1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// A rank-2 tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("rows have different lengths"));
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        })
    }

    /// Splits a rank-2 tensor back into rows.
    pub fn rows(&self) -> Result<Vec<Vec<f32>>> {
        match self.shape.as_slice() {
            [_, c] if *c > 0 => Ok(self.data.chunks(*c).map(<[f32]>::to_vec).collect()),
            [n, 0] => Ok(vec![Vec::new(); *n]),
            other => Err(Error::shape(format!("expected a matrix, got shape {other:?}"))),
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_dsc1(tensors: &[Tensor]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + tensors.iter().map(|t| 8 + 4 * t.data.len()).sum::<usize>());
    out.extend_from_slice(DSC1_MAGIC);
    put_u32(&mut out, tensors.len())?;
    for t in tensors {
        put_u32(&mut out, t.shape.len())?;
        for &d in &t.shape {
            put_u32(&mut out, d)?;
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<usize> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

fn decode_block(cur: &mut Cursor<'_>, path: &Path) -> Result<Vec<Tensor>> {
    let bad = |m: &str| Error::format(path, m.to_string());
    if cur.take(4) != Some(DSC1_MAGIC.as_slice()) {
        return Err(bad("missing DSC1 magic"));
    }
    let count = cur.u32().ok_or_else(|| bad("truncated tensor count"))?;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let rank = cur.u32().ok_or_else(|| bad(&format!("tensor {i}: truncated rank")))?;
        let shape = (0..rank)
            .map(|_| cur.u32())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad(&format!("tensor {i}: truncated shape")))?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4).map(|_| n))
            .ok_or_else(|| bad(&format!("tensor {i}: shape overflows")))?;
        let raw = cur
            .take(n * 4)
            .ok_or_else(|| bad(&format!("tensor {i}: truncated data")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(Tensor { shape, data });
    }
    Ok(tensors)
}

pub fn decode_dsc1(bytes: &[u8], path: &Path) -> Result<Vec<Tensor>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let tensors = decode_block(&mut cur, path)?;
    if cur.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last tensor"));
    }
    Ok(tensors)
}

pub fn write_dsc1(path: impl AsRef<Path>, tensors: &[Tensor]) -> Result<()> {
    let bytes = encode_dsc1(tensors)?;
    let mut f = fs::File::create(path.as_ref())?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_dsc1(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_dsc1(&bytes, path)
}

/// Checkpoint contents: JSON metadata plus named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = self.metadata.clone();
        let names: Vec<&str> = self.params.iter().map(|(n, _)| n.as_str()).collect();
        match &mut meta {
            serde_json::Value::Object(map) => {
                map.insert("params".into(), serde_json::to_value(&names)?);
            }
            _ => return Err(Error::invalid("checkpoint metadata must be a JSON object")),
        }
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION as usize)?;
        put_u32(&mut out, json.len())?;
        out.extend_from_slice(&json);
        let tensors: Vec<Tensor> = self.params.iter().map(|(_, t)| t.clone()).collect();
        out.extend_from_slice(&encode_dsc1(&tensors)?);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: String| Error::format(path, m);
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4) != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(bad("missing checkpoint magic".into()));
        }
        let version = cur.u32().ok_or_else(|| bad("truncated header".into()))?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let len = cur.u32().ok_or_else(|| bad("truncated header".into()))?;
        let json = cur.take(len).ok_or_else(|| bad("truncated metadata".into()))?;
        let mut metadata: serde_json::Value =
            serde_json::from_slice(json).map_err(|e| bad(format!("metadata: {e}")))?;
        let names: Vec<String> = metadata
            .as_object_mut()
            .and_then(|m| m.remove("params"))
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| bad(format!("metadata params: {e}")))?
            .ok_or_else(|| bad("metadata lacks the params list".into()))?;
        let tensors = decode_block(&mut cur, path)?;
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes after parameters".into()));
        }
        if names.len() != tensors.len() {
            return Err(bad(format!(
                "{} parameter names for {} tensors",
                names.len(),
                tensors.len()
            )));
        }
        Ok(Self {
            metadata,
            params: names.into_iter().zip(tensors).collect(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dsc1_layout_is_exact() {
        let t = Tensor::new(vec![2], vec![1.0, -2.5]).unwrap();
        let bytes = encode_dsc1(&[t.clone()]).unwrap();
        let mut expected = b"DSC1".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(decode_dsc1(&bytes, Path::new("x")).unwrap(), vec![t]);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let t = Tensor::new(vec![3, 2], vec![0.5; 6]).unwrap();
        let bytes = encode_dsc1(&[t]).unwrap();
        for cut in [0, 3, 7, 12, bytes.len() - 1] {
            assert!(matches!(
                decode_dsc1(&bytes[..cut], Path::new("x")),
                Err(Error::Format { .. })
            ));
        }
    }

    #[test]
    fn scalar_and_empty_tensors_round_trip() {
        let ts = vec![
            Tensor::new(vec![], vec![4.0]).unwrap(),
            Tensor::new(vec![0, 3], vec![]).unwrap(),
        ];
        let bytes = encode_dsc1(&ts).unwrap();
        assert_eq!(decode_dsc1(&bytes, Path::new("x")).unwrap(), ts);
    }

    #[test]
    fn checkpoint_round_trip() {
        let ck = Checkpoint {
            metadata: serde_json::json!({"kind": "frame", "d_f": 4}),
            params: vec![
                ("a.weight".into(), Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()),
                ("a.bias".into(), Tensor::new(vec![2], vec![0.0, -1.0]).unwrap()),
            ],
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.get("a.bias").unwrap().data, vec![0.0, -1.0]);
    }

    #[test]
    fn rows_round_trip() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        assert_eq!(Tensor::from_rows(&rows).unwrap().rows().unwrap(), rows);
    }
}
