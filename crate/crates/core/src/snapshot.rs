//! Binary trajectory snapshots (`MFL1`).
//!
//! Layout, all little-endian:
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `b"MFL1"`                |
//! | 4      | 4    | `d` as u32                     |
//! | 8      | 8    | `N` as u64                     |
//! | 16     | 8    | `dt` as f64                    |
//! | 24     | 8    | `count` as u64                 |
//! | 32     | ...  | `count` frames                 |
//!
//! Each frame holds `2 N d` f64 values: the `N x d` positions row-major, then
//! the `N x d` velocities. Frame `k` is at time `k * dt`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::particles::ParticleState;

pub const MAGIC: &[u8; 4] = b"MFL1";
pub const HEADER_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SnapshotHeader {
    pub dim: u32,
    pub n: u64,
    pub dt: f64,
    pub count: u64,
}

pub fn write_snapshot<W: Write>(mut w: W, dt: f64, states: &[ParticleState]) -> Result<()> {
    let first = states
        .first()
        .ok_or_else(|| Error::Format("cannot write an empty snapshot".into()))?;
    let (dim, n) = (first.dim, first.n());
    if states.iter().any(|s| s.dim != dim || s.n() != n) {
        return Err(Error::Format("frames differ in particle count or dimension".into()));
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + states.len() * 16 * n * dim);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.extend_from_slice(&dt.to_le_bytes());
    buf.extend_from_slice(&(states.len() as u64).to_le_bytes());
    for s in states {
        for v in s.positions.iter().chain(&s.velocities) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_header(bytes: &[u8]) -> Result<SnapshotHeader> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("file has {} bytes, header needs {HEADER_LEN}", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, expected MFL1".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    Ok(SnapshotHeader {
        dim: u32_at(4),
        n: u64_at(8),
        dt: f64::from_le_bytes(bytes[16..24].try_into().unwrap()),
        count: u64_at(24),
    })
}

pub fn read_snapshot<R: Read>(mut r: R) -> Result<(SnapshotHeader, Vec<ParticleState>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let h = read_header(&bytes)?;
    if h.dim == 0 || h.n == 0 {
        return Err(Error::Format("dimension and particle count must be positive".into()));
    }
    let per_frame = (h.n as usize)
        .checked_mul(h.dim as usize)
        .and_then(|x| x.checked_mul(16))
        .ok_or_else(|| Error::Format("frame size overflows".into()))?;
    let expected = per_frame
        .checked_mul(h.count as usize)
        .and_then(|x| x.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Format("file size overflows".into()))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let nd = h.n as usize * h.dim as usize;
    let mut states = Vec::with_capacity(h.count as usize);
    for (k, frame) in bytes[HEADER_LEN..].chunks_exact(per_frame).enumerate() {
        let vals: Vec<f64> = frame
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let (x, v) = vals.split_at(nd);
        let state = ParticleState::new(h.dim as usize, x.to_vec(), v.to_vec(), k as f64 * h.dt)
            .map_err(|e| Error::Format(format!("frame {k}: {e}")))?;
        states.push(state);
    }
    Ok((h, states))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_layout() {
        let a = ParticleState::new(2, vec![1.0, 2.0, 3.0, 4.0], vec![-1.0, 0.5, 0.25, 8.0], 0.0).unwrap();
        let mut b = a.clone();
        b.positions[0] = 9.0;
        b.time = 0.5;
        let mut buf = Vec::new();
        write_snapshot(&mut buf, 0.5, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(buf.len(), HEADER_LEN + 2 * 8 * 8);
        assert_eq!(&buf[..4], b"MFL1");
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[32..40], &1.0f64.to_le_bytes());
        // velocities follow positions inside a frame
        assert_eq!(&buf[64..72], &(-1.0f64).to_le_bytes());
        let (h, states) = read_snapshot(&buf[..]).unwrap();
        assert_eq!(h, SnapshotHeader { dim: 2, n: 2, dt: 0.5, count: 2 });
        assert_eq!(states, vec![a, b]);
    }

    #[test]
    fn rejects_malformed() {
        assert!(read_snapshot(&b"MFL2"[..]).is_err());
        let a = ParticleState::new(1, vec![1.0], vec![2.0], 0.0).unwrap();
        let mut buf = Vec::new();
        write_snapshot(&mut buf, 1.0, &[a]).unwrap();
        buf.pop();
        assert!(read_snapshot(&buf[..]).is_err());
        buf[0] = b'X';
        assert!(read_snapshot(&buf[..]).is_err());
    }
}
