//! Uplink frame layout (little-endian):
//!
//! ```text
//! "FDQ1" | N: u8 | count: u64 | vmin: f64 | vmax: f64 (iff N >= 1)
//!        | indices: count·N bits, LSB-first, zero-padded | crc32: u32
//! ```
//!
//! The CRC covers every byte before it.

use thiserror::Error;

use super::{QuantizedPayload, MAX_BITS};

pub const MAGIC: [u8; 4] = *b"FDQ1";

const CRC_LEN: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("frame truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("bit width {0} exceeds the 16-bit index limit")]
    IndexOverflow(u8),
    #[error("invalid range: vmin {vmin} > vmax {vmax} or non-finite")]
    InvalidRange { vmin: f64, vmax: f64 },
    #[error("checksum mismatch: frame says {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("{0} unexpected bytes after the frame")]
    TrailingBytes(usize),
    #[error("non-zero padding bits in the final index byte")]
    Padding,
    #[error("payload is not encodable: {0}")]
    Invalid(#[from] super::QuantizeError),
}

/// Header bytes before the packed indices.
pub fn header_len(bit_width: u8) -> usize {
    4 + 1 + 8 + 8 + if bit_width >= 1 { 8 } else { 0 }
}

fn body_len(bit_width: u8, count: u64) -> Option<usize> {
    let bits = (count as u128) * bit_width as u128;
    usize::try_from(bits.div_ceil(8)).ok()
}

/// Total frame size for a payload with `count` indices of `bit_width` bits.
pub fn frame_len(bit_width: u8, count: u64) -> usize {
    header_len(bit_width) + body_len(bit_width, count).expect("frame fits in memory") + CRC_LEN
}

pub fn encode(p: &QuantizedPayload) -> Result<Vec<u8>, CodecError> {
    p.validate()?;
    let mut out = Vec::with_capacity(frame_len(p.bit_width, p.count));
    out.extend_from_slice(&MAGIC);
    out.push(p.bit_width);
    out.extend_from_slice(&p.count.to_le_bytes());
    out.extend_from_slice(&p.vmin.to_le_bytes());
    if p.bit_width >= 1 {
        out.extend_from_slice(&p.vmax.to_le_bytes());
        pack(&p.indices, p.bit_width, &mut out);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn pack(indices: &[u16], bits: u8, out: &mut Vec<u8>) {
    let start = out.len();
    out.resize(start + body_len(bits, indices.len() as u64).unwrap(), 0);
    let body = &mut out[start..];
    let mut acc: u32 = 0;
    let mut filled: u32 = 0;
    let mut pos = 0;
    for &idx in indices {
        acc |= (idx as u32) << filled;
        filled += bits as u32;
        while filled >= 8 {
            body[pos] = acc as u8;
            pos += 1;
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        body[pos] = acc as u8;
    }
}

fn unpack(body: &[u8], bits: u8, count: usize) -> Result<Vec<u16>, CodecError> {
    let mask = (1u32 << bits) - 1;
    let mut out = Vec::with_capacity(count);
    let mut acc: u32 = 0;
    let mut avail: u32 = 0;
    let mut bytes = body.iter();
    for _ in 0..count {
        while avail < bits as u32 {
            acc |= (*bytes.next().expect("body length checked") as u32) << avail;
            avail += 8;
        }
        out.push((acc & mask) as u16);
        acc >>= bits;
        avail -= bits as u32;
    }
    if acc != 0 {
        return Err(CodecError::Padding);
    }
    Ok(out)
}

fn need(bytes: &[u8], needed: usize) -> Result<(), CodecError> {
    if bytes.len() < needed {
        Err(CodecError::Truncated {
            needed,
            have: bytes.len(),
        })
    } else {
        Ok(())
    }
}

fn f64_at(bytes: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap())
}

pub fn decode(bytes: &[u8]) -> Result<QuantizedPayload, CodecError> {
    need(bytes, 4)?;
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(CodecError::BadMagic(magic));
    }
    need(bytes, 5)?;
    let bit_width = bytes[4];
    if bit_width > MAX_BITS {
        return Err(CodecError::IndexOverflow(bit_width));
    }
    let header = header_len(bit_width);
    need(bytes, header)?;
    let count = u64::from_le_bytes(bytes[5..13].try_into().unwrap());
    let body = body_len(bit_width, count).ok_or(CodecError::Truncated {
        needed: usize::MAX,
        have: bytes.len(),
    })?;
    let total = header
        .checked_add(body)
        .and_then(|n| n.checked_add(CRC_LEN))
        .ok_or(CodecError::Truncated {
            needed: usize::MAX,
            have: bytes.len(),
        })?;
    need(bytes, total)?;
    if bytes.len() > total {
        return Err(CodecError::TrailingBytes(bytes.len() - total));
    }
    let stored = u32::from_le_bytes(bytes[total - CRC_LEN..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..total - CRC_LEN]);
    if stored != computed {
        return Err(CodecError::Checksum { stored, computed });
    }
    let vmin = f64_at(bytes, 13);
    let vmax = if bit_width >= 1 { f64_at(bytes, 21) } else { vmin };
    if !(vmin.is_finite() && vmax.is_finite() && vmin <= vmax && (vmax - vmin).is_finite()) {
        return Err(CodecError::InvalidRange { vmin, vmax });
    }
    let indices = if bit_width >= 1 {
        unpack(&bytes[header..header + body], bit_width, count as usize)?
    } else {
        Vec::new()
    };
    let p = QuantizedPayload {
        bit_width,
        vmin,
        vmax,
        count,
        indices,
    };
    p.validate()?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn payload(bits: u8, indices: Vec<u16>) -> QuantizedPayload {
        QuantizedPayload {
            bit_width: bits,
            vmin: -1.0,
            vmax: 2.5,
            count: indices.len() as u64,
            indices,
        }
    }

    /// Recompute the trailing CRC after tampering with a frame.
    fn reseal(frame: &mut [u8]) {
        let n = frame.len() - CRC_LEN;
        let crc = crc32fast::hash(&frame[..n]);
        frame[n..].copy_from_slice(&crc.to_le_bytes());
    }

    #[test]
    fn degenerate_frame_is_header_only() {
        let p = QuantizedPayload {
            bit_width: 0,
            vmin: 1.5,
            vmax: 1.5,
            count: 3,
            indices: vec![],
        };
        let f = encode(&p).unwrap();
        assert_eq!(f.len(), 25);
        assert_eq!(decode(&f).unwrap(), p);
    }

    #[test]
    fn three_bit_body_is_two_bytes() {
        let p = payload(3, vec![7, 0, 5, 1, 6]);
        let f = encode(&p).unwrap();
        assert_eq!(f.len(), header_len(3) + 2 + CRC_LEN);
        assert_eq!(decode(&f).unwrap(), p);
    }

    #[test]
    fn lsb_first_layout() {
        // 3, 1 as two 2-bit fields -> 0b0111
        let f = encode(&payload(2, vec![3, 1])).unwrap();
        assert_eq!(f[header_len(2)], 0b0000_0111);
        let f = encode(&payload(16, vec![0xABCD])).unwrap();
        assert_eq!(&f[header_len(16)..header_len(16) + 2], &[0xCD, 0xAB]);
    }

    #[test]
    fn malformed_frames_have_distinct_errors() {
        let good = encode(&payload(4, vec![1, 2, 3, 15, 0])).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode(&bad_magic), Err(CodecError::BadMagic(_))));

        assert!(matches!(decode(&good[..good.len() - 1]), Err(CodecError::Truncated { .. })));
        assert!(matches!(decode(&good[..3]), Err(CodecError::Truncated { .. })));

        let mut wide = good.clone();
        wide[4] = 17;
        assert!(matches!(decode(&wide), Err(CodecError::IndexOverflow(17))));

        let mut inverted = good.clone();
        inverted[13..21].copy_from_slice(&3.0f64.to_le_bytes());
        reseal(&mut inverted);
        assert!(matches!(decode(&inverted), Err(CodecError::InvalidRange { .. })));

        let mut flipped = good.clone();
        flipped[header_len(4)] ^= 0x10;
        assert!(matches!(decode(&flipped), Err(CodecError::Checksum { .. })));

        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(CodecError::TrailingBytes(1))));

        let mut padded = good.clone();
        let last = good.len() - CRC_LEN - 1;
        padded[last] |= 0xF0;
        reseal(&mut padded);
        assert!(matches!(decode(&padded), Err(CodecError::Padding)));
    }

    #[test]
    fn invalid_payload_not_encoded() {
        let p = payload(2, vec![0, 4]);
        assert!(matches!(encode(&p), Err(CodecError::Invalid(_))));
    }
}
