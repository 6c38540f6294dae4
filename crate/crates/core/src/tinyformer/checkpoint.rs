//! Checkpoint byte layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic b"EXSEQTF\0"
//! 8       4     u32 format version (1)
//! 12      8     u64 header length H
//! 20      H     UTF-8 JSON header {"config": …, "params": [{"name", "shape"}, …]}
//! 20+H    8     u64 scalar count N (sum of all shape products)
//! 28+H    8·N   f64 parameters, tensors in header order, each row-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{TransformerConfig, TransformerWeights};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"EXSEQTF\0";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TransformerConfig,
    params: Vec<ParamEntry>,
}

pub fn write_checkpoint<W: Write>(weights: &TransformerWeights, mut out: W) -> Result<()> {
    let header = Header {
        config: weights.config().clone(),
        params: weights
            .names()
            .iter()
            .zip(weights.params())
            .map(|(n, p)| ParamEntry {
                name: n.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    out.write_all(&(weights.num_scalars() as u64).to_le_bytes())?;
    let mut blob = Vec::with_capacity(weights.num_scalars() * 8);
    for p in weights.params() {
        for v in &p.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&blob)?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<TransformerWeights> {
    let bad = |m: String| Error::Checkpoint(m);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let mut vb = [0u8; 4];
    input.read_exact(&mut vb)?;
    let version = u32::from_le_bytes(vb);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = read_u64(&mut input)?;
    if hlen > 1 << 24 {
        return Err(bad(format!("header length {hlen} too large")));
    }
    let mut json = vec![0u8; hlen as usize];
    input.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    let n = read_u64(&mut input)? as usize;
    let expected: usize = header
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum();
    if n != expected {
        return Err(bad(format!(
            "blob holds {n} scalars, header describes {expected}"
        )));
    }
    let mut blob = vec![0u8; n * 8];
    input.read_exact(&mut blob)?;
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(bad("trailing bytes".into()));
    }
    let mut vals = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let params = header
        .params
        .iter()
        .map(|e| Tensor {
            shape: e.shape.clone(),
            data: vals.by_ref().take(e.shape.iter().product()).collect(),
        })
        .collect();
    let w = TransformerWeights::from_params(header.config, params)?;
    if w.names()
        .iter()
        .zip(&header.params)
        .any(|(a, e)| *a != e.name)
    {
        return Err(bad("parameter names do not match the config".into()));
    }
    Ok(w)
}

pub fn save(weights: &TransformerWeights, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(weights, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TransformerWeights> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use crate::tinyformer::mask::{MaskKind, MaskScheme};
    use crate::tinyformer::model::{forward, SeqInput};

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = TransformerConfig {
            d_model: 8,
            d_ff: 16,
            n_heads: 2,
            n_layers: 1,
            embed_hidden: vec![8],
            ..Default::default()
        };
        let w = TransformerWeights::init(cfg, &mut RngStream::new(11)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&w, &mut buf).unwrap();
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, w);
        let seq = SeqInput::new(
            &[(vec![0.3], 1.0)],
            &[vec![0.1]],
            MaskScheme::inference(MaskKind::Causal),
        )
        .unwrap();
        let a = forward(&w, &seq.tokens, &seq.mask).unwrap();
        let b = forward(&back, &seq.tokens, &seq.mask).unwrap();
        assert_eq!(a[0].mean.to_bits(), b[0].mean.to_bits());
        assert_eq!(a[0].std.to_bits(), b[0].std.to_bits());

        let mut corrupt = buf.clone();
        corrupt[0] = b'X';
        assert!(read_checkpoint(&corrupt[..]).is_err());
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(read_checkpoint(&long[..]).is_err());
    }
}
