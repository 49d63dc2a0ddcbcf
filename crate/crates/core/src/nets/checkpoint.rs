//! Model checkpoint file.
//!
//! Layout (little endian): magic `OTNN`, version `u32 = 1`, number of layer
//! sizes `u32`, the sizes as `u32`, then all parameters as `f64` (per layer:
//! weights row-major `out x in`, then biases). A `u32` flag follows; when it is
//! 1 the memory bank is appended as `C u32`, `D u32`, `C x D f64` keys,
//! temperature `f64`, momentum `f64`.

use std::fs;
use std::path::Path;

use crate::error::{OtocError, Result};
use crate::mat::Mat;
use crate::nets::mlp::Mlp;
use crate::nets::relation::MemoryBank;
use crate::scene::{read_exact, read_u32};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OTNN";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn checkpoint_bytes(model: &Mlp, bank: Option<&MemoryBank>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.sizes().len() as u32).to_le_bytes());
    for &s in model.sizes() {
        out.extend_from_slice(&(s as u32).to_le_bytes());
    }
    for p in model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    match bank {
        None => out.extend_from_slice(&0u32.to_le_bytes()),
        Some(b) => {
            out.extend_from_slice(&1u32.to_le_bytes());
            out.extend_from_slice(&(b.num_categories() as u32).to_le_bytes());
            out.extend_from_slice(&(b.dim() as u32).to_le_bytes());
            for v in b.keys().data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&b.temperature().to_le_bytes());
            out.extend_from_slice(&b.momentum().to_le_bytes());
        }
    }
    out
}

fn read_f64s(r: &mut &[u8], n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n.checked_mul(8).ok_or_else(|| OtocError::format("size overflow"))?];
    read_exact(r, &mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(Mlp, Option<MemoryBank>)> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(OtocError::format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(OtocError::format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    if count < 2 || count > 64 {
        return Err(OtocError::format(format!("implausible layer count {count}")));
    }
    let sizes: Vec<usize> = (0..count).map(|_| read_u32(&mut r).map(|s| s as usize)).collect::<Result<_>>()?;
    let n: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    let params = read_f64s(&mut r, n)?;
    let model = Mlp::from_params(&sizes, &params)?;
    let bank = match read_u32(&mut r)? {
        0 => None,
        1 => {
            let c = read_u32(&mut r)? as usize;
            let d = read_u32(&mut r)? as usize;
            let keys = read_f64s(&mut r, c * d)?;
            let tail = read_f64s(&mut r, 2)?;
            Some(MemoryBank::from_keys(Mat::from_vec(c, d, keys)?, tail[0], tail[1])?)
        }
        f => return Err(OtocError::format(format!("bad memory-bank flag {f}"))),
    };
    if !r.is_empty() {
        return Err(OtocError::format("trailing bytes after checkpoint"));
    }
    Ok((model, bank))
}

pub fn save_checkpoint(model: &Mlp, bank: Option<&MemoryBank>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, checkpoint_bytes(model, bank))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Mlp, Option<MemoryBank>)> {
    parse_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn round_trip_with_and_without_bank() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let m = Mlp::random(&[14, 8, 5], &mut rng).unwrap();
        let b = MemoryBank::random(3, 5, 0.07, 0.9, &mut rng).unwrap();
        let (m2, b2) = parse_checkpoint(&checkpoint_bytes(&m, Some(&b))).unwrap();
        assert_eq!(m2, m);
        assert_eq!(b2.unwrap(), b);
        let bytes = checkpoint_bytes(&m, None);
        assert_eq!(bytes.len(), 4 + 4 + 4 + 3 * 4 + 8 * m.num_params() + 4);
        assert!(parse_checkpoint(&bytes).unwrap().1.is_none());
        assert!(parse_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    }
}
