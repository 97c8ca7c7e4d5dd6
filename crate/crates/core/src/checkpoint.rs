//! Flat binary network checkpoints.
//!
//! Layout, all integers `u32` little-endian and all parameters `f64`
//! little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "LCUT"
//! 4       4     format version (1 or 2)
//! 8       4     input_dim
//! 12      4     width
//! 16      4     n_blocks
//! 20      4     num_classes
//! 24      4*n   hidden width of each block        (version 2 only)
//! ...           parameters in declaration order:
//!               stem W [width x input_dim], stem b [width],
//!               per block: W1 [hidden x width], b1 [hidden],
//!                          W2 [width x hidden], b2 [width],
//!               classifier W [num_classes x width], classifier b [num_classes]
//! ```
//!
//! Version 1 is written whenever every block is square (`hidden == width`);
//! version 2 carries per-block hidden widths. Trailing bytes are rejected.

use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Architecture, ResidualNetwork};

pub const MAGIC: &[u8; 4] = b"LCUT";
pub const VERSION_SQUARE: u32 = 1;
pub const VERSION_HIDDEN: u32 = 2;

pub fn encode(net: &ResidualNetwork) -> Vec<u8> {
    let arch = net.architecture();
    let square = arch.hidden.iter().all(|&h| h == arch.width);
    let n_params = net.parameter_count(&Default::default());
    let mut out = Vec::with_capacity(24 + 4 * arch.hidden.len() + 8 * n_params);
    out.extend_from_slice(MAGIC);
    let version = if square { VERSION_SQUARE } else { VERSION_HIDDEN };
    for v in [
        version,
        arch.input_dim as u32,
        arch.width as u32,
        arch.hidden.len() as u32,
        arch.num_classes as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if !square {
        for &h in &arch.hidden {
            out.extend_from_slice(&(h as u32).to_le_bytes());
        }
    }
    for t in net.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Reader { bytes, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                self.what,
                format!("truncated at byte {} (need {n} more)", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::format(self.what, "bad magic"));
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.what, "size overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::format(
                self.what,
                format!("{} trailing bytes", self.remaining()),
            ));
        }
        Ok(())
    }
}

pub fn decode(bytes: &[u8]) -> Result<ResidualNetwork> {
    let mut r = Reader::new(bytes, "checkpoint");
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION_SQUARE && version != VERSION_HIDDEN {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let input_dim = r.u32()? as usize;
    let width = r.u32()? as usize;
    let n_blocks = r.u32()? as usize;
    let num_classes = r.u32()? as usize;
    let hidden = if version == VERSION_HIDDEN {
        // each hidden width needs 4 bytes; bound before allocating
        if n_blocks > r.remaining() / 4 {
            return Err(Error::format("checkpoint", "block count exceeds file size"));
        }
        (0..n_blocks).map(|_| r.u32().map(|h| h as usize)).collect::<Result<Vec<_>>>()?
    } else {
        if n_blocks > r.remaining() {
            return Err(Error::format("checkpoint", "block count exceeds file size"));
        }
        vec![width; n_blocks]
    };
    let arch = Architecture {
        input_dim,
        width,
        hidden,
        num_classes,
    };
    arch.validate()
        .map_err(|e| Error::format("checkpoint", e.to_string()))?;

    let expected = expected_params(&arch)
        .ok_or_else(|| Error::format("checkpoint", "parameter count overflow"))?;
    if expected.checked_mul(8) != Some(r.remaining()) {
        return Err(Error::format(
            "checkpoint",
            format!("expected {expected} parameters, found {} bytes", r.remaining()),
        ));
    }
    let mut net = ResidualNetwork::zeros(&arch)?;
    for t in net.tensors_mut() {
        let vals = r.f64s(t.len())?;
        t.data_mut().copy_from_slice(&vals);
    }
    r.finish()?;
    Ok(net)
}

fn expected_params(arch: &Architecture) -> Option<usize> {
    let w = arch.width;
    let mut n = arch.input_dim.checked_mul(w)?.checked_add(w)?;
    for &h in &arch.hidden {
        let block = h.checked_mul(w)?.checked_mul(2)?.checked_add(h)?.checked_add(w)?;
        n = n.checked_add(block)?;
    }
    n.checked_add(w.checked_mul(arch.num_classes)?)?
        .checked_add(arch.num_classes)
}

pub fn save(net: &ResidualNetwork, path: &Path) -> Result<()> {
    std::fs::write(path, encode(net))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ResidualNetwork> {
    decode(&std::fs::read(path)?)
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

/// Fingerprint of a network: FNV-1a over its checkpoint bytes.
pub fn fingerprint(net: &ResidualNetwork) -> u64 {
    fnv1a64(&encode(net))
}
