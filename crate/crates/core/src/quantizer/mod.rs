//! Stochastic uniform quantization of model updates.
//!
//! An update `v` with range `[vmin, vmax]` is cut into `s = 2^N − 1` equal
//! sections. A coordinate inside section `[h', h'']` is sent as `h''` with
//! probability `(x − h') / (h'' − h')` and as `h'` otherwise, so the
//! reconstruction is unbiased. Constant updates carry no index bits at all.

mod codec;

pub use codec::{decode, encode, frame_len, header_len, CodecError, MAGIC};

use thiserror::Error;

use crate::numerics::ParamVector;
use crate::rng::RandomStream;

/// Largest supported index width.
pub const MAX_BITS: u8 = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantizeError {
    #[error("cannot quantize an empty vector")]
    Empty,
    #[error("non-finite value at coordinate {0}")]
    NonFinite(usize),
    #[error("range of the vector overflows f64")]
    RangeOverflow,
    #[error("bit width {0} outside 1..=16")]
    BitWidth(u8),
    #[error("index {index} at position {position} exceeds 2^{bits} - 1")]
    IndexOverflow { position: usize, index: u16, bits: u8 },
    #[error("invalid payload range: vmin {vmin}, vmax {vmax}")]
    InvalidRange { vmin: f64, vmax: f64 },
    #[error("payload holds {indices} indices for count {count}")]
    CountMismatch { count: u64, indices: usize },
}

/// Minimum, maximum and their difference for one vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeStat {
    pub vmin: f64,
    pub vmax: f64,
    pub range: f64,
}

pub fn compute_range(v: &[f64]) -> Result<RangeStat, QuantizeError> {
    let first = *v.first().ok_or(QuantizeError::Empty)?;
    let (mut vmin, mut vmax) = (first, first);
    for (j, &x) in v.iter().enumerate() {
        if !x.is_finite() {
            return Err(QuantizeError::NonFinite(j));
        }
        if x < vmin {
            vmin = x;
        }
        if x > vmax {
            vmax = x;
        }
    }
    Ok(RangeStat {
        vmin,
        vmax,
        range: vmax - vmin,
    })
}

/// A quantized update as it travels on the uplink.
///
/// `indices` holds one entry per coordinate when `bit_width >= 1` and is
/// empty when `bit_width == 0` (constant update, `vmin == vmax`).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedPayload {
    pub bit_width: u8,
    pub vmin: f64,
    pub vmax: f64,
    pub count: u64,
    pub indices: Vec<u16>,
}

impl QuantizedPayload {
    /// Quantization level `s = 2^N − 1`.
    pub fn levels(&self) -> u32 {
        levels(self.bit_width)
    }

    /// Grid spacing `(vmax − vmin) / s`; zero for constant payloads.
    pub fn bin_width(&self) -> f64 {
        if self.bit_width == 0 {
            0.0
        } else {
            (self.vmax - self.vmin) / self.levels() as f64
        }
    }

    pub fn validate(&self) -> Result<(), QuantizeError> {
        let range_ok = self.vmin.is_finite() && self.vmax.is_finite() && self.vmin <= self.vmax && (self.vmax - self.vmin).is_finite();
        if !range_ok {
            return Err(QuantizeError::InvalidRange {
                vmin: self.vmin,
                vmax: self.vmax,
            });
        }
        if self.bit_width > MAX_BITS {
            return Err(QuantizeError::BitWidth(self.bit_width));
        }
        if self.bit_width == 0 {
            if self.vmin != self.vmax {
                return Err(QuantizeError::InvalidRange {
                    vmin: self.vmin,
                    vmax: self.vmax,
                });
            }
            if !self.indices.is_empty() {
                return Err(QuantizeError::CountMismatch {
                    count: 0,
                    indices: self.indices.len(),
                });
            }
            return Ok(());
        }
        if self.indices.len() as u64 != self.count {
            return Err(QuantizeError::CountMismatch {
                count: self.count,
                indices: self.indices.len(),
            });
        }
        let s = self.levels();
        if let Some((position, &index)) = self.indices.iter().enumerate().find(|(_, &i)| i as u32 > s) {
            return Err(QuantizeError::IndexOverflow {
                position,
                index,
                bits: self.bit_width,
            });
        }
        Ok(())
    }

    /// Value of grid point `k`. The top point is `vmax` exactly.
    fn grid(&self, k: u32) -> f64 {
        grid_point(self.vmin, self.vmax, self.levels(), k)
    }

    /// Bits under the `d·⌈log₂(s+1)⌉ + 32` accounting model.
    pub fn paper_bits(&self) -> u64 {
        self.count * self.bit_width as u64 + HEADER_MODEL_BITS
    }

    /// Bits actually on the wire, framing and checksum included.
    pub fn wire_bits(&self) -> u64 {
        8 * frame_len(self.bit_width, self.count) as u64
    }
}

/// Fixed per-message overhead in the accounting model.
pub const HEADER_MODEL_BITS: u64 = 32;

fn levels(bit_width: u8) -> u32 {
    (1u32 << bit_width) - 1
}

fn grid_point(vmin: f64, vmax: f64, s: u32, k: u32) -> f64 {
    if k >= s {
        vmax
    } else {
        let w = (vmax - vmin) / s as f64;
        (vmin + k as f64 * w).min(vmax)
    }
}

/// Stochastically round every coordinate of `v` onto an `N`-bit grid.
///
/// Exactly one uniform draw is taken from `rng` per coordinate, whatever the
/// coordinate's position, so payloads depend only on `(v, N, stream id)`.
/// A constant `v` yields an `N = 0` payload and consumes nothing.
pub fn quantize(v: &[f64], bit_width: u8, rng: &mut RandomStream) -> Result<QuantizedPayload, QuantizeError> {
    if bit_width == 0 || bit_width > MAX_BITS {
        return Err(QuantizeError::BitWidth(bit_width));
    }
    let stat = compute_range(v)?;
    if !stat.range.is_finite() {
        return Err(QuantizeError::RangeOverflow);
    }
    if stat.range == 0.0 {
        return Ok(QuantizedPayload {
            bit_width: 0,
            vmin: stat.vmin,
            vmax: stat.vmax,
            count: v.len() as u64,
            indices: Vec::new(),
        });
    }
    let s = levels(bit_width);
    let w = stat.range / s as f64;
    let at = |k: u32| grid_point(stat.vmin, stat.vmax, s, k);
    let indices = v
        .iter()
        .map(|&x| {
            let u = rng.next_unit();
            if x >= stat.vmax {
                return s as u16;
            }
            let mut lo = (((x - stat.vmin) / w).floor().max(0.0) as u32).min(s - 1);
            // settle rounding so that grid(lo) <= x < grid(lo + 1)
            while lo > 0 && at(lo) > x {
                lo -= 1;
            }
            while lo + 1 < s && at(lo + 1) <= x {
                lo += 1;
            }
            let (h_lo, h_hi) = (at(lo), at(lo + 1));
            let p_up = (x - h_lo) / (h_hi - h_lo);
            if u < p_up {
                (lo + 1) as u16
            } else {
                lo as u16
            }
        })
        .collect();
    Ok(QuantizedPayload {
        bit_width,
        vmin: stat.vmin,
        vmax: stat.vmax,
        count: v.len() as u64,
        indices,
    })
}

/// Reconstruct `vmin + index · (range / s)` per coordinate.
pub fn dequantize(p: &QuantizedPayload) -> Result<ParamVector, QuantizeError> {
    p.validate()?;
    if p.bit_width == 0 {
        return Ok(ParamVector::new(vec![p.vmin; p.count as usize]));
    }
    Ok(ParamVector::new(p.indices.iter().map(|&k| p.grid(k as u32)).collect()))
}

/// `⌈log₂(s + 1)⌉` for `s >= 0`, in exact integer arithmetic.
pub fn bits_for_levels(s: u64) -> u32 {
    let n = s + 1;
    if n <= 1 {
        0
    } else {
        64 - (n - 1).leading_zeros()
    }
}

/// Accounting-model cost of one message: `d·⌈log₂(s+1)⌉ + 32`.
pub fn paper_bit_cost(d: u64, s: u64) -> u64 {
    d * bits_for_levels(s) as u64 + HEADER_MODEL_BITS
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Purpose;

    fn rng(k: u64) -> RandomStream {
        RandomStream::keyed(0, 0, k, Purpose::Quantize)
    }

    #[test]
    fn range_examples() {
        let r = compute_range(&[-0.2, 0.0, 0.3]).unwrap();
        assert_eq!((r.vmin, r.vmax, r.range), (-0.2, 0.3, 0.3 - -0.2));
        let c = compute_range(&[1.25; 4]).unwrap();
        assert_eq!((c.vmin, c.vmax, c.range), (1.25, 1.25, 0.0));
        assert_eq!(compute_range(&[]), Err(QuantizeError::Empty));
        assert_eq!(compute_range(&[0.0, f64::INFINITY]), Err(QuantizeError::NonFinite(1)));
    }

    #[test]
    fn endpoints_are_grid_points() {
        for k in 0..50 {
            let p = quantize(&[0.0, 1.0], 1, &mut rng(k)).unwrap();
            assert_eq!(p.indices, vec![0, 1]);
            assert_eq!(dequantize(&p).unwrap().as_ref(), &[0.0, 1.0]);
        }
    }

    #[test]
    fn single_section_round_up_frequency() {
        let mut s = rng(99);
        let trials = 100_000;
        let ups = (0..trials)
            .filter(|_| quantize(&[0.0, 0.25, 1.0], 1, &mut s).unwrap().indices[1] == 1)
            .count();
        let freq = ups as f64 / trials as f64;
        assert!((freq - 0.25).abs() <= 0.005, "{freq}");
    }

    #[test]
    fn constant_vector_is_degenerate() {
        let p = quantize(&[0.7; 5], 8, &mut rng(0)).unwrap();
        assert_eq!(p.bit_width, 0);
        assert!(p.indices.is_empty());
        assert_eq!(dequantize(&p).unwrap().as_ref(), &[0.7; 5]);
        assert_eq!(p.paper_bits(), 32);
    }

    #[test]
    fn unit_bins_dequantize() {
        let p = QuantizedPayload {
            bit_width: 2,
            vmin: 0.0,
            vmax: 3.0,
            count: 4,
            indices: vec![0, 1, 2, 3],
        };
        assert_eq!(dequantize(&p).unwrap().as_ref(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn degenerate_payload_dequantizes() {
        let p = QuantizedPayload {
            bit_width: 0,
            vmin: 0.7,
            vmax: 0.7,
            count: 5,
            indices: vec![],
        };
        assert_eq!(dequantize(&p).unwrap().as_ref(), &[0.7; 5]);
    }

    #[test]
    fn corrupt_payloads_rejected() {
        let mut p = QuantizedPayload {
            bit_width: 2,
            vmin: 0.0,
            vmax: 3.0,
            count: 2,
            indices: vec![0, 4],
        };
        assert!(matches!(dequantize(&p), Err(QuantizeError::IndexOverflow { position: 1, index: 4, bits: 2 })));
        p.indices = vec![0];
        assert!(matches!(dequantize(&p), Err(QuantizeError::CountMismatch { .. })));
        p.indices = vec![0, 1];
        p.vmin = 4.0;
        assert!(matches!(dequantize(&p), Err(QuantizeError::InvalidRange { .. })));
    }

    #[test]
    fn interior_grid_points_are_deterministic() {
        // 0, 1, 2, 3 on a 2-bit grid over [0, 3]
        let v = [0.0, 1.0, 2.0, 3.0];
        for k in 0..100 {
            assert_eq!(quantize(&v, 2, &mut rng(k)).unwrap().indices, vec![0, 1, 2, 3]);
        }
        // awkward bin width: every grid value maps back to its own index
        let v: Vec<f64> = (0..=7).map(|k| grid_point(-0.3, 0.4, 7, k)).collect();
        for k in 0..20 {
            let p = quantize(&v, 3, &mut rng(k)).unwrap();
            assert_eq!(p.indices, (0..=7).collect::<Vec<u16>>());
        }
    }

    #[test]
    fn bad_bit_widths() {
        assert_eq!(quantize(&[0.0, 1.0], 0, &mut rng(0)), Err(QuantizeError::BitWidth(0)));
        assert_eq!(quantize(&[0.0, 1.0], 17, &mut rng(0)), Err(QuantizeError::BitWidth(17)));
        assert_eq!(quantize(&[0.0, f64::NAN], 4, &mut rng(0)), Err(QuantizeError::NonFinite(1)));
        assert_eq!(quantize(&[-f64::MAX, f64::MAX], 4, &mut rng(0)), Err(QuantizeError::RangeOverflow));
    }

    #[test]
    fn bit_cost_examples() {
        assert_eq!(paper_bit_cost(100, 3), 232);
        assert_eq!(paper_bit_cost(1, 1), 33);
        assert_eq!(paper_bit_cost(10_000, 255), 80_032);
        assert_eq!(bits_for_levels(0), 0);
        assert_eq!(bits_for_levels(4), 3);
    }
}
