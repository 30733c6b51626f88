//! `IBAW` tensor container: magic, u32 version, u32 count, then per tensor
//! a u32-prefixed UTF-8 name, u32 rank, u64 dims and little-endian f32 data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

use super::model::{Downsample, LayerKind, LayerParams, Model, ModelSpec, DEFAULT_CHANNELS};

pub const MAGIC: &[u8; 4] = b"IBAW";
pub const VERSION: u32 = 1;

pub fn write_archive<W: Write>(mut w: W, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_archive<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported archive version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(format!("tensor name: {e}")))?;
        let rank = read_u32(&mut r)? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::Format(format!("tensor `{name}` has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
        let mut bytes = vec![0u8; numel * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::from_vec(shape, data).map_err(|e| Error::Format(e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save_tensors(path: impl AsRef<Path>, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    write_archive(BufWriter::new(File::create(path)?), tensors)
}

pub fn load_tensors(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<f32>)>> {
    read_archive(BufReader::new(File::open(path)?))
}

fn take(tensors: &mut Vec<(String, Tensor<f32>)>, name: &str) -> Result<Tensor<f32>> {
    let i = tensors
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::Format(format!("archive has no tensor `{name}`")))?;
    Ok(tensors.swap_remove(i).1)
}

impl<T: Real> Model<T> {
    /// Parameters as `layer.weight` / `layer.bias` entries (stored as f32).
    pub fn to_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        for (l, p) in self.spec().layers().iter().zip(self.params()) {
            if let Some(p) = p {
                out.push((format!("{}.weight", l.name), p.weight.cast()));
                out.push((format!("{}.bias", l.name), p.bias.cast()));
            }
        }
        out
    }

    pub fn from_tensors(spec: ModelSpec, mut tensors: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        let mut params = Vec::new();
        for l in spec.layers() {
            params.push(match l.kind {
                LayerKind::Conv { .. } | LayerKind::Dense { .. } => Some(LayerParams {
                    weight: take(&mut tensors, &format!("{}.weight", l.name))?.cast(),
                    bias: take(&mut tensors, &format!("{}.bias", l.name))?.cast(),
                }),
                _ => None,
            });
        }
        if let Some((extra, _)) = tensors.first() {
            return Err(Error::Format(format!("unexpected tensor `{extra}` in archive")));
        }
        Model::from_params(spec, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut tensors = self.to_tensors();
        let strided = self
            .spec()
            .layers()
            .iter()
            .any(|l| matches!(l.kind, LayerKind::Conv { stride: 2, .. }));
        if strided {
            tensors.push((STRIDED_MARKER.into(), Tensor::from_vec(vec![1], vec![1.0f32])?));
        }
        save_tensors(path, &tensors)
    }

    /// Load weights for an explicit architecture.
    pub fn load_with_spec(path: impl AsRef<Path>, spec: ModelSpec) -> Result<Self> {
        let mut tensors = load_tensors(path)?;
        tensors.retain(|(n, _)| n != STRIDED_MARKER);
        Self::from_tensors(spec, tensors)
    }

    /// Load weights of a default-layout conv net, inferring channel widths,
    /// class count and (square) input size from the stored shapes.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut tensors = load_tensors(path)?;
        let downsample = match tensors.iter().position(|(n, _)| n == STRIDED_MARKER) {
            Some(i) => {
                tensors.swap_remove(i);
                Downsample::StridedConv
            }
            None => Downsample::MaxPool,
        };
        let spec = infer_spec(&tensors, downsample)?;
        Self::from_tensors(spec, tensors)
    }
}

const STRIDED_MARKER: &str = "meta.strided";

fn infer_spec(tensors: &[(String, Tensor<f32>)], downsample: Downsample) -> Result<ModelSpec> {
    let shape_of = |name: &str| {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.shape().to_vec())
            .ok_or_else(|| Error::Format(format!("archive has no tensor `{name}`")))
    };
    let mut channels = DEFAULT_CHANNELS;
    let mut in_ch = 0;
    for (i, c) in channels.iter_mut().enumerate() {
        let s = shape_of(&format!("conv{}.weight", i + 1))?;
        if s.len() != 4 {
            return Err(Error::Format(format!("conv{} weight has shape {s:?}", i + 1)));
        }
        *c = s[0];
        if i == 0 {
            in_ch = s[1];
        }
    }
    let fc = shape_of("fc.weight")?;
    if fc.len() != 2 {
        return Err(Error::Format(format!("fc weight has shape {fc:?}")));
    }
    let cells = fc[1] / channels[3];
    let side = (cells as f64).sqrt().round() as usize;
    if side * side * channels[3] != fc[1] {
        return Err(Error::Format(format!("cannot infer input size from fc weight {fc:?}")));
    }
    ModelSpec::conv_net(fc[0], (in_ch, side * 4, side * 4), channels, downsample)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(read_archive(&b"XXXX\x01\0\0\0\0\0\0\0"[..]), Err(Error::Format(_))));
        let t = Tensor::from_vec(vec![2], vec![1.0f32, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_archive(&mut buf, &[("a".into(), t)]).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(read_archive(&buf[..]).is_err());
    }
}
