//! Reader for the IDX format used by common handwritten-digit datasets.

use std::io::Read;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn header<R: Read>(r: &mut R, kind: u8, rank: u8) -> Result<Vec<usize>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic[0] != 0 || magic[1] != 0 || magic[2] != kind || magic[3] != rank {
        return Err(Error::Format(format!("unexpected IDX magic {magic:?}")));
    }
    (0..rank)
        .map(|_| {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_be_bytes(b) as usize)
        })
        .collect()
}

/// Unsigned-byte images `[N, rows, cols]` as `[N, 1, rows, cols]` scaled to
/// `[0, 1]`.
pub fn read_idx_images<R: Read>(mut r: R) -> Result<Tensor<f32>> {
    let dims = header(&mut r, 0x08, 3)?;
    let mut bytes = vec![0u8; dims.iter().product()];
    r.read_exact(&mut bytes)?;
    let data = bytes.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::from_vec(vec![dims[0], 1, dims[1], dims[2]], data)
}

pub fn read_idx_labels<R: Read>(mut r: R) -> Result<Vec<usize>> {
    let dims = header(&mut r, 0x08, 1)?;
    let mut bytes = vec![0u8; dims[0]];
    r.read_exact(&mut bytes)?;
    Ok(bytes.into_iter().map(usize::from).collect())
}
