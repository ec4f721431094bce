//! Compact binary ensemble dump.
//!
//! All integers are `u64` and all reals `f64`, little-endian:
//!
//! ```text
//! magic        8 bytes   "MFLQENS" followed by the format version byte 0x01
//! mode         1 byte    0 open loop, 1 feedback; then 7 zero bytes
//! n0 n m0 m population paths stored_len
//! horizon
//! times        stored_len reals
//! block_count
//! per block    name_len, name (UTF-8), width
//! per path     path index, follower_terminal, leader_terminal,
//!              then per block width * stored_len reals, time-major
//! ```

use mflq_core::simulator::{Ensemble, Mode};
use thiserror::Error;

use crate::export::record_blocks;

pub const MAGIC: [u8; 8] = *b"MFLQENS\x01";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DumpError {
    #[error("not an ensemble dump (bad magic)")]
    Magic,
    #[error("dump is truncated")]
    Truncated,
    #[error("dump is malformed: {0}")]
    Malformed(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DumpedPath {
    pub path: usize,
    pub follower_terminal: f64,
    pub leader_terminal: f64,
    /// in block order
    pub blocks: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleDump {
    pub mode: Mode,
    /// n0, n, m0, m
    pub dims: [usize; 4],
    pub population: usize,
    pub horizon: f64,
    pub times: Vec<f64>,
    /// name and width per stored step
    pub blocks: Vec<(String, usize)>,
    pub paths: Vec<DumpedPath>,
}

pub fn write_dump(ens: &Ensemble) -> Vec<u8> {
    let mut out = Vec::new();
    let u = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u64).to_le_bytes());
    let f = |out: &mut Vec<u8>, v: f64| out.extend_from_slice(&v.to_le_bytes());
    out.extend_from_slice(&MAGIC);
    out.push(match ens.mode {
        Mode::OpenLoop => 0,
        Mode::Feedback => 1,
    });
    out.extend_from_slice(&[0; 7]);
    let d = ens.dims;
    let len = ens.stored_len();
    for v in [d.n0, d.n, d.m0, d.m, ens.config.population, ens.paths.len(), len] {
        u(&mut out, v);
    }
    f(&mut out, ens.horizon);
    ens.times.iter().for_each(|t| f(&mut out, *t));
    let layout: Vec<(&str, usize)> = ens
        .paths
        .first()
        .map(|r| record_blocks(r).into_iter().map(|(n, v)| (n, v.len() / len.max(1))).collect())
        .unwrap_or_default();
    u(&mut out, layout.len());
    for (name, width) in &layout {
        u(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        u(&mut out, *width);
    }
    for rec in &ens.paths {
        u(&mut out, rec.path);
        f(&mut out, rec.follower_terminal);
        f(&mut out, rec.leader_terminal);
        for (_, data) in record_blocks(rec) {
            data.iter().for_each(|v| f(&mut out, *v));
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], DumpError> {
        if self.bytes.len() < n {
            return Err(DumpError::Truncated);
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u(&mut self) -> Result<usize, DumpError> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| DumpError::Malformed("count exceeds address space"))
    }

    fn f(&mut self) -> Result<f64, DumpError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn reals(&mut self, n: usize) -> Result<Vec<f64>, DumpError> {
        let bytes = self.take(n.checked_mul(8).ok_or(DumpError::Truncated)?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn read_dump(bytes: &[u8]) -> Result<EnsembleDump, DumpError> {
    let mut c = Cursor { bytes };
    if c.take(8).map_err(|_| DumpError::Magic)? != MAGIC {
        return Err(DumpError::Magic);
    }
    let mode = match c.take(8)?[0] {
        0 => Mode::OpenLoop,
        1 => Mode::Feedback,
        _ => return Err(DumpError::Malformed("unknown mode")),
    };
    let dims = [c.u()?, c.u()?, c.u()?, c.u()?];
    let (population, paths, len) = (c.u()?, c.u()?, c.u()?);
    let horizon = c.f()?;
    let times = c.reals(len)?;
    let count = c.u()?;
    let mut blocks = Vec::new();
    for _ in 0..count {
        let n = c.u()?;
        let name = std::str::from_utf8(c.take(n)?).map_err(|_| DumpError::Malformed("block name is not UTF-8"))?;
        blocks.push((name.to_string(), c.u()?));
    }
    let mut records = Vec::new();
    for _ in 0..paths {
        let path = c.u()?;
        let follower_terminal = c.f()?;
        let leader_terminal = c.f()?;
        let data = blocks.iter().map(|(_, w)| c.reals(w * len)).collect::<Result<_, _>>()?;
        records.push(DumpedPath { path, follower_terminal, leader_terminal, blocks: data });
    }
    if !c.bytes.is_empty() {
        return Err(DumpError::Malformed("trailing bytes"));
    }
    Ok(EnsembleDump { mode, dims, population, horizon, times, blocks, paths: records })
}
