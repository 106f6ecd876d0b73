//! Flat binary checkpoint format.
//!
//! ```text
//! magic        4 bytes  "EDLN"
//! version      u32 LE   (1)
//! layer count  u32 LE
//! bias flag    u8       (0 or 1)
//! per layer:
//!   in_dim     u32 LE
//!   out_dim    u32 LE
//!   activation u8       (0 identity, 1 relu, 2 tanh)
//!   weights    (in_dim + bias) * out_dim f64 LE, row-major
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

use super::{ActivationKind, Layer, LayerSpec, NetworkError, NetworkParams};
use crate::linalg::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EDLN";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("unknown activation code {0}")]
    Activation(u8),
    #[error("invalid network: {0}")]
    Network(#[from] NetworkError),
}

pub fn write_checkpoint<W: Write>(params: &NetworkParams, mut out: W) -> Result<(), CheckpointError> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(params.depth() as u32).to_le_bytes())?;
    out.write_all(&[u8::from(params.has_bias())])?;
    for layer in params.layers() {
        out.write_all(&(layer.spec.in_dim as u32).to_le_bytes())?;
        out.write_all(&(layer.spec.out_dim as u32).to_le_bytes())?;
        out.write_all(&[layer.spec.activation.code()])?;
        for w in layer.weights.data() {
            out.write_all(&w.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u8<R: Read>(r: &mut R) -> io::Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<NetworkParams, CheckpointError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = read_u32(&mut input)? as usize;
    let bias = read_u8(&mut input)? != 0;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let in_dim = read_u32(&mut input)? as usize;
        let out_dim = read_u32(&mut input)? as usize;
        let code = read_u8(&mut input)?;
        let activation = ActivationKind::from_code(code).ok_or(CheckpointError::Activation(code))?;
        let rows = in_dim + usize::from(bias);
        let mut data = Vec::with_capacity(rows * out_dim);
        let mut b = [0u8; 8];
        for _ in 0..rows * out_dim {
            input.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        let weights = Matrix::new(rows, out_dim, data).map_err(NetworkError::from)?;
        layers.push(Layer {
            spec: LayerSpec::new(in_dim, out_dim, activation),
            weights,
        });
    }
    Ok(NetworkParams::from_layers(layers, bias)?)
}
