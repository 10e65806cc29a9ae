//! Binary container for named parameter layers.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "MLCK" | version u32 | count u32
//! count × { name_len u32 | name utf-8 | out u32 | in u32 }
//! count × { weight out·in f64, row-major | bias out f64 }
//! ```
//!
//! The header lists every shape up front, so a header that disagrees with
//! the payload is caught before any value is read.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::linalg::Matrix;
use crate::merge::TrainedLayers;
use crate::nn::{LayerParams, LayerSlot, ParamSet, TaskId};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MLCK";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_layers<'a>(entries: impl IntoIterator<Item = (String, &'a LayerParams)>) -> Vec<u8> {
    let entries: Vec<(String, &LayerParams)> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, layer) in &entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(layer.out_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(layer.in_dim() as u32).to_le_bytes());
    }
    for (_, layer) in &entries {
        for v in layer.weight.as_slice().iter().chain(&layer.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_layers(bytes: &[u8]) -> Result<Vec<(String, LayerParams)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)
        .map_err(|_| Error::Format("not a checkpoint".into()))?
        != MAGIC
    {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, this build reads version {FORMAT_VERSION}"
        )));
    }
    let count = r.u32()? as usize;
    let mut header = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("layer name is not utf-8".into()))?
            .to_string();
        let out = r.u32()? as usize;
        let inp = r.u32()? as usize;
        header.push((name, out, inp));
    }
    let expected: usize = header.iter().map(|(_, o, i)| (o * i + o) * 8).sum();
    let found = bytes.len() - r.pos;
    if expected != found {
        return Err(Error::Shape(format!(
            "header shapes need {expected} payload bytes, file has {found}"
        )));
    }
    let mut values = bytes[r.pos..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    header
        .into_iter()
        .map(|(name, out, inp)| {
            let w: Vec<f64> = values.by_ref().take(out * inp).collect();
            let b: Vec<f64> = values.by_ref().take(out).collect();
            Ok((name, LayerParams::new(Matrix::from_vec(out, inp, w)?, b)?))
        })
        .collect()
}

fn head_name(t: TaskId) -> String {
    format!("head.{t}")
}

pub fn encode_checkpoint(params: &ParamSet) -> Vec<u8> {
    let enc = params
        .encoder
        .iter()
        .enumerate()
        .map(|(i, l)| (LayerSlot::Encoder(i).to_string(), l));
    let heads = params.heads.iter().map(|(&t, h)| (head_name(t), h));
    encode_layers(enc.chain(heads))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamSet> {
    let mut encoder = Vec::new();
    let mut heads = BTreeMap::new();
    for (name, layer) in decode_layers(bytes)? {
        if let Some(i) = name.strip_prefix("encoder.") {
            let i: usize = i
                .parse()
                .map_err(|_| Error::Format(format!("bad layer name {name}")))?;
            if i != encoder.len() {
                return Err(Error::Format(format!("encoder layer {i} out of order")));
            }
            encoder.push(layer);
        } else if let Some(t) = name.strip_prefix("head.") {
            let t: u32 = t
                .parse()
                .map_err(|_| Error::Format(format!("bad layer name {name}")))?;
            heads.insert(TaskId(t), layer);
        } else {
            return Err(Error::Format(format!("unexpected layer {name}")));
        }
    }
    ParamSet::new(encoder, heads)
}

pub fn save_checkpoint(params: &ParamSet, path: &Path) -> Result<()> {
    Ok(fs::write(path, encode_checkpoint(params))?)
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet> {
    decode_checkpoint(&fs::read(path)?)
}

/// Per-task trained layers, named `task.<id>.<slot>`.
pub fn encode_trained_layers(layers: &BTreeMap<TaskId, TrainedLayers>) -> Vec<u8> {
    encode_layers(layers.iter().flat_map(|(t, m)| {
        m.iter()
            .map(move |(slot, l)| (format!("task.{t}.{slot}"), l))
    }))
}

pub fn decode_trained_layers(bytes: &[u8]) -> Result<BTreeMap<TaskId, TrainedLayers>> {
    let mut out: BTreeMap<TaskId, TrainedLayers> = BTreeMap::new();
    for (name, layer) in decode_layers(bytes)? {
        let bad = || Error::Format(format!("bad layer name {name}"));
        let rest = name.strip_prefix("task.").ok_or_else(bad)?;
        let (t, slot) = rest.split_once('.').ok_or_else(bad)?;
        let t = TaskId(t.parse().map_err(|_| bad())?);
        let slot = if slot == "head" {
            LayerSlot::Head
        } else {
            let i = slot.strip_prefix("encoder.").ok_or_else(bad)?;
            LayerSlot::Encoder(i.parse().map_err(|_| bad())?)
        };
        out.entry(t).or_default().insert(slot, layer);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn sample() -> ParamSet {
        ParamSet::random(
            &[3, 4, 2],
            &[(TaskId(0), 3), (TaskId(7), 2)],
            &mut seed::rng(5),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = sample();
        let bytes = encode_checkpoint(&p);
        let q = decode_checkpoint(&bytes).unwrap();
        assert_eq!(
            p.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            q.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(p, q);
        assert_eq!(bytes, encode_checkpoint(&q));
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let bytes = encode_checkpoint(&sample());
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            decode_checkpoint(&bytes[..10]),
            Err(Error::Format(_))
        ));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(decode_checkpoint(&v), Err(Error::Format(_))));
        let mut v = bytes.clone();
        v[0] = b'X';
        assert!(matches!(decode_checkpoint(&v), Err(Error::Format(_))));
        // First entry is "encoder.0" (4 + 9 bytes of name), then its out dim.
        let mut v = bytes;
        v[12 + 4 + 9] += 1;
        assert!(matches!(decode_checkpoint(&v), Err(Error::Shape(_))));
    }

    #[test]
    fn trained_layers_round_trip() {
        let p = sample();
        let mut m: BTreeMap<TaskId, TrainedLayers> = BTreeMap::new();
        m.entry(TaskId(0))
            .or_default()
            .insert(LayerSlot::Head, p.heads[&TaskId(0)].clone());
        m.entry(TaskId(7))
            .or_default()
            .insert(LayerSlot::Encoder(1), p.encoder[1].clone());
        assert_eq!(
            decode_trained_layers(&encode_trained_layers(&m)).unwrap(),
            m
        );
    }
}
