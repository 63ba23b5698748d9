//! Mask encodings: run-length (row-major, alternating off/on runs, starting
//! with off) and 1-bit PBM rasters (`P4`, on = 1).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BitMask;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub width: u32,
    pub height: u32,
    pub counts: Vec<u32>,
}

impl Rle {
    pub fn encode(mask: &BitMask) -> Rle {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &bit in mask.bits() {
            if bit == current {
                run += 1;
            } else {
                counts.push(run);
                current = bit;
                run = 1;
            }
        }
        counts.push(run);
        Rle {
            width: mask.width(),
            height: mask.height(),
            counts,
        }
    }

    pub fn decode(&self, label: &str) -> Result<BitMask> {
        let total = self.width as u64 * self.height as u64;
        let sum: u64 = self.counts.iter().map(|&c| c as u64).sum();
        if sum != total {
            return Err(Error::Corrupt(format!(
                "run lengths sum to {sum}, expected {total} for {}x{}",
                self.width, self.height
            )));
        }
        let mut bits = Vec::with_capacity(total as usize);
        for (i, &c) in self.counts.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, c as usize));
        }
        BitMask::from_bits(self.width, self.height, bits, label)
    }
}

pub fn encode_pbm(mask: &BitMask) -> Vec<u8> {
    let (w, h) = mask.dims();
    let mut out = format!("P4\n{w} {h}\n").into_bytes();
    let row_bytes = (w as usize).div_ceil(8);
    for y in 0..h {
        let mut row = vec![0u8; row_bytes];
        for x in 0..w {
            if mask.get(x, y) {
                row[x as usize / 8] |= 0x80 >> (x % 8);
            }
        }
        out.extend_from_slice(&row);
    }
    out
}

pub fn decode_pbm(bytes: &[u8], label: &str) -> Result<BitMask> {
    let mut pos = 0usize;
    let mut tokens = Vec::with_capacity(3);
    while tokens.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Corrupt("truncated PBM header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the payload.
    pos += 1;
    if tokens[0] != "P4" {
        return Err(Error::Corrupt(format!("unsupported PBM magic {:?}", tokens[0])));
    }
    let parse = |s: &str| s.parse::<u32>().map_err(|_| Error::Corrupt(format!("bad PBM dimension {s:?}")));
    let (w, h) = (parse(&tokens[1])?, parse(&tokens[2])?);
    let row_bytes = (w as usize).div_ceil(8);
    let payload = bytes.get(pos..).unwrap_or_default();
    if payload.len() < row_bytes * h as usize {
        return Err(Error::Corrupt(format!(
            "PBM payload has {} bytes, need {}",
            payload.len(),
            row_bytes * h as usize
        )));
    }
    Ok(BitMask::from_fn(w, h, label, |x, y| {
        payload[y as usize * row_bytes + x as usize / 8] & (0x80 >> (x % 8)) != 0
    }))
}

pub fn read_pbm(path: &Path, label: &str) -> Result<BitMask> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pbm(&bytes, label)
}
