//! `PYRM` checkpoint files.
//!
//! ```text
//! "PYRM"                magic
//! u32                   version (= 1)
//! u32 n, u32 × n        layer dims, input first
//! u32                   field kind (0 = point, 1 = pixel neighbourhood)
//! u32                   activation (0 = SiLU, 1 = tanh)
//! u32                   embedding frequencies
//! u32                   embedding stages
//! u32 × 3               sample height, width, channels
//! f64                   gamma of the stage schedule
//! f64 × params          parameters in declaration order
//! ```
//!
//! All integers and floats are little-endian.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::grid::Shape;
use crate::model::mlp::{param_count, Activation, MlpNet, TimeEmbedding};

pub const MODEL_MAGIC: &[u8; 4] = b"PYRM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Point,
    Pixel,
}

impl FieldKind {
    fn code(self) -> u32 {
        match self {
            FieldKind::Point => 0,
            FieldKind::Pixel => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: MlpNet,
    pub kind: FieldKind,
    /// Full-resolution shape of generated samples.
    pub sample_shape: Shape,
    pub gamma: f64,
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

impl Checkpoint {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        put_u32(&mut w, self.net.dims().len())?;
        for &d in self.net.dims() {
            put_u32(&mut w, d)?;
        }
        w.write_all(&self.kind.code().to_le_bytes())?;
        w.write_all(&self.net.activation().code().to_le_bytes())?;
        let emb = self.net.embedding();
        put_u32(&mut w, emb.frequencies)?;
        put_u32(&mut w, emb.stages)?;
        put_u32(&mut w, self.sample_shape.height)?;
        put_u32(&mut w, self.sample_shape.width)?;
        put_u32(&mut w, self.sample_shape.channels)?;
        w.write_all(&self.gamma.to_le_bytes())?;
        for p in self.net.params() {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(mut r: impl Read) -> Result<Checkpoint> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = get_u32(&mut r)?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let n = get_u32(&mut r)? as usize;
        if !(2..=64).contains(&n) {
            return Err(Error::Format(format!("implausible layer count {n}")));
        }
        let dims = (0..n)
            .map(|_| get_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let kind = match get_u32(&mut r)? {
            0 => FieldKind::Point,
            1 => FieldKind::Pixel,
            k => return Err(Error::Format(format!("unknown field kind {k}"))),
        };
        let act_code = get_u32(&mut r)?;
        let activation = Activation::from_code(act_code)
            .ok_or_else(|| Error::Format(format!("unknown activation {act_code}")))?;
        let embedding = TimeEmbedding {
            frequencies: get_u32(&mut r)? as usize,
            stages: get_u32(&mut r)? as usize,
        };
        let sample_shape = Shape::new(
            get_u32(&mut r)? as usize,
            get_u32(&mut r)? as usize,
            get_u32(&mut r)? as usize,
        );
        let gamma = get_f64(&mut r)?;
        let count = param_count(&dims);
        let params = (0..count)
            .map(|_| get_f64(&mut r))
            .collect::<Result<Vec<_>>>()?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after parameters".into()));
        }
        let net = MlpNet::from_params(dims, embedding, activation, params)?;
        Ok(Checkpoint {
            net,
            kind,
            sample_shape,
            gamma,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_header() {
        let emb = TimeEmbedding {
            frequencies: 3,
            stages: 2,
        };
        let net = MlpNet::new(2, &[5], 2, emb, Activation::Silu, 4).unwrap();
        let ck = Checkpoint {
            net,
            kind: FieldKind::Point,
            sample_shape: Shape::new(1, 1, 2),
            gamma: -1.0 / 3.0,
        };
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"PYRM");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(Checkpoint::read_from(&bytes[..]).unwrap(), ck);
        assert!(Checkpoint::read_from(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::read_from(&extra[..]).is_err());
    }
}
