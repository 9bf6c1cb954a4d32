//! Weight files.
//!
//! Layout (little-endian): magic `EDYW`, `u16` version 1, `u32` tensor count,
//! then per tensor: `u32` name length, UTF-8 name, `u8` ndim, `ndim × u32`
//! dims, `f32` payload. Network tensors come first in the network's fixed
//! enumeration order (parameters, then batch-norm running statistics),
//! followed by `meta.*` tensors describing the input pipeline.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::net::{Network, NetworkSpec};
use crate::tensor::Tensor4;

pub const MAGIC: [u8; 4] = *b"EDYW";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

pub fn encode(entries: &[TensorEntry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.dims.len() as u8);
        for d in &e.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &e.data {
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
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            needed: self.pos.saturating_add(n),
            available: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<TensorEntry>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("tensor name is not UTF-8: {e}")))?
            .to_owned();
        let ndim = r.take(1)?[0] as usize;
        let dims = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<u32>>>()?;
        let n: usize = dims.iter().map(|&d| d as usize).product();
        let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(TensorEntry { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(entries)
}

/// How raw samples are turned into network input: which channels, and the
/// normalisation applied to each selected channel.
#[derive(Clone, Debug, PartialEq)]
pub struct InputPipeline {
    /// Indices into the sample's channel order.
    pub channels: Vec<usize>,
    pub stats: NormStats,
}

fn meta(name: &str, data: Vec<f32>) -> TensorEntry {
    TensorEntry {
        name: format!("meta.{name}"),
        dims: vec![data.len() as u32],
        data,
    }
}

pub fn to_entries(net: &Network<f32>, input: &InputPipeline) -> Vec<TensorEntry> {
    let mut entries: Vec<TensorEntry> = net
        .named_tensors()
        .map(|t| TensorEntry {
            name: t.name.clone(),
            dims: t.tensor.dims().iter().map(|&d| d as u32).collect(),
            data: t.tensor.data().to_vec(),
        })
        .collect();
    let spec = net.spec();
    entries.push(meta("channels", input.channels.iter().map(|&c| c as f32).collect()));
    entries.push(meta("norm_mean", input.stats.mean.iter().map(|&v| v as f32).collect()));
    entries.push(meta("norm_std", input.stats.std.iter().map(|&v| v as f32).collect()));
    entries.push(meta("dilation", vec![spec.dilation as f32]));
    entries.push(meta(
        "dropout",
        vec![spec.down_dropout as f32, spec.transition_dropout as f32],
    ));
    entries
}

pub fn to_bytes(net: &Network<f32>, input: &InputPipeline) -> Vec<u8> {
    encode(&to_entries(net, input))
}

/// Widen through the shortest decimal that round-trips the f32, so a stored
/// 0.3 reads back as 0.3 rather than 0.30000001192092896.
fn widen(v: f32) -> f64 {
    v.to_string().parse().unwrap_or(v as f64)
}

fn find<'a>(entries: &'a [TensorEntry], name: &str) -> Result<&'a TensorEntry> {
    entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Network<f32>, InputPipeline)> {
    let entries = decode(bytes)?;
    let channels: Vec<usize> = find(&entries, "meta.channels")?.data.iter().map(|&c| c as usize).collect();
    let mean = &find(&entries, "meta.norm_mean")?.data;
    let std = &find(&entries, "meta.norm_std")?.data;
    let dilation = find(&entries, "meta.dilation")?.data.first().copied().unwrap_or(0.0) as usize;
    let dropout = &find(&entries, "meta.dropout")?.data;
    let first = find(&entries, "down1.conv1.w")?;
    if mean.len() != 4 || std.len() != 4 || dropout.len() != 2 || first.dims.len() != 4 {
        return Err(Error::Checkpoint("malformed metadata".into()));
    }
    let spec = NetworkSpec {
        in_channels: channels.len(),
        base_channels: first.dims[0] as usize,
        dilation,
        down_dropout: widen(dropout[0]),
        transition_dropout: widen(dropout[1]),
    };
    let mut net = Network::<f32>::build(spec, &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| Error::Checkpoint(format!("bad spec: {e}")))?;

    let n_params = net.params().len();
    let n_total = n_params + net.buffers().len();
    let network_entries: Vec<&TensorEntry> = entries.iter().filter(|e| !e.name.starts_with("meta.")).collect();
    if network_entries.len() != n_total {
        return Err(Error::Checkpoint(format!(
            "{} network tensors, architecture has {n_total}",
            network_entries.len()
        )));
    }
    for (i, e) in network_entries.into_iter().enumerate() {
        let slot = if i < n_params {
            &mut net.params_mut()[i]
        } else {
            &mut net.buffers_mut()[i - n_params]
        };
        let dims: Vec<u32> = slot.tensor.dims().iter().map(|&d| d as u32).collect();
        if slot.name != e.name || dims != e.dims {
            return Err(Error::Checkpoint(format!(
                "tensor {i}: expected {} {:?}, found {} {:?}",
                slot.name, dims, e.name, e.dims
            )));
        }
        slot.tensor = Tensor4::from_vec(slot.tensor.dims(), e.data.clone())?;
    }
    let stats = NormStats {
        mean: std::array::from_fn(|c| widen(mean[c])),
        std: std::array::from_fn(|c| widen(std[c])),
    };
    Ok((net, InputPipeline { channels, stats }))
}

pub fn save(path: impl AsRef<Path>, net: &Network<f32>, input: &InputPipeline) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(net, input)).map_err(|e| Error::file(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(Network<f32>, InputPipeline)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pipeline() -> InputPipeline {
        InputPipeline {
            channels: vec![0, 2, 3],
            stats: NormStats {
                mean: [0.5, 20.0, 0.0, 0.1],
                std: [0.25, 1.0, 0.5, 0.5],
            },
        }
    }

    fn network(dilation: usize) -> Network<f32> {
        let spec = NetworkSpec {
            in_channels: 3,
            dilation,
            ..NetworkSpec::default()
        };
        let mut net = Network::build(spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for (i, b) in net.buffers_mut().iter_mut().enumerate() {
            b.tensor.data_mut()[0] = i as f32 * 0.5;
        }
        net
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&[TensorEntry {
            name: "ab".into(),
            dims: vec![2],
            data: vec![1.0, -2.0],
        }]);
        let mut want = b"EDYW".to_vec();
        want.extend_from_slice(&1u16.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.push(1);
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn network_round_trip_is_bitwise() {
        for dilation in [1, 4] {
            let net = network(dilation);
            let bytes = to_bytes(&net, &pipeline());
            let (back, input) = from_bytes(&bytes).unwrap();
            assert_eq!(input, pipeline());
            assert_eq!(back.spec(), net.spec());
            assert_eq!(back.params(), net.params());
            assert_eq!(back.buffers(), net.buffers());
            assert_eq!(to_bytes(&back, &input), bytes);
        }
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = to_bytes(&network(4), &pipeline());
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(matches!(from_bytes(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(from_bytes(&bad), Err(Error::UnsupportedVersion(2))));
        let mut extra = bytes;
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }

    #[test]
    fn mismatched_tensor_rejected() {
        let mut entries = to_entries(&network(4), &pipeline());
        entries[1].name = "down1.bn1.beta".into();
        assert!(matches!(from_bytes(&encode(&entries)), Err(Error::Checkpoint(_))));
    }
}
