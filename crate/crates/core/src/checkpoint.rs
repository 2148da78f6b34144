//! Flat binary checkpoints for groups of MLPs.
//!
//! Layout (little-endian): the 9-byte magic, a `u32` layer count, then per
//! layer four `u32`s `(net index, input, output, activation code)`, then every
//! network's parameters as `f64` in declaration order, then trailing `f64`
//! scalars owned by the model (temperature, loss coefficient, ...).

use std::path::Path;

use crate::error::{DuetError, Result};
use crate::kernel::{Activation, LayerSpec, Mlp};

pub const MAGIC_LEN: usize = 9;

pub fn encode(magic: &[u8; MAGIC_LEN], nets: &[&Mlp], trailer: &[f64]) -> Vec<u8> {
    let n_layers: usize = nets.iter().map(|n| n.layers().len()).sum();
    let n_params: usize = nets.iter().map(|n| n.n_params()).sum();
    let mut out = Vec::with_capacity(MAGIC_LEN + 4 + 16 * n_layers + 8 * (n_params + trailer.len()));
    out.extend_from_slice(magic);
    out.extend_from_slice(&(n_layers as u32).to_le_bytes());
    for (i, net) in nets.iter().enumerate() {
        for l in net.layers() {
            for v in [i as u32, l.input as u32, l.output as u32, l.activation.code()] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    for net in nets {
        for p in net.params() {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    for t in trailer {
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(DuetError::input(format!(
                "checkpoint truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Inverse of [`encode`]; `n_nets` and `n_trailer` must match the writer.
pub fn decode(bytes: &[u8], magic: &[u8; MAGIC_LEN], n_nets: usize, n_trailer: usize) -> Result<(Vec<Mlp>, Vec<f64>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC_LEN)? != magic {
        return Err(DuetError::input(format!(
            "not a {} checkpoint",
            String::from_utf8_lossy(magic)
        )));
    }
    let n_layers = r.u32()? as usize;
    let mut specs: Vec<Vec<LayerSpec>> = vec![Vec::new(); n_nets];
    for _ in 0..n_layers {
        let net = r.u32()? as usize;
        let input = r.u32()? as usize;
        let output = r.u32()? as usize;
        let code = r.u32()?;
        let activation =
            Activation::from_code(code).ok_or_else(|| DuetError::input(format!("unknown activation code {code}")))?;
        if net >= n_nets {
            return Err(DuetError::input(format!(
                "layer belongs to network {net}, expected fewer than {n_nets}"
            )));
        }
        specs[net].push(LayerSpec {
            input,
            output,
            activation,
        });
    }
    let mut nets = Vec::with_capacity(n_nets);
    for layers in specs {
        let n: usize = layers.iter().map(|l| l.input * l.output + l.output).sum();
        let params = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        nets.push(Mlp::from_params(layers, params)?);
    }
    let trailer = (0..n_trailer).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(DuetError::input(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((nets, trailer))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| DuetError::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| DuetError::io(path, e))
}
