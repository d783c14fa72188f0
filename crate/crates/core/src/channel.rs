//! RF channel data and its `RCCD` binary container.
//!
//! Layout (little-endian): magic `RCCD`, `u32` version (1), `u32` n_events,
//! `u32` n_rx, `u32` n_samples, `f64` fs_hz, `f64` t0_s, `f64` sound_speed,
//! then `f32` samples in `[event][rx][sample]` order.

use std::io::{Read, Write};

use crate::error::{check_shape, Error, Result};

const MAGIC: &[u8; 4] = b"RCCD";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 4 + 3 * 8;

/// RF record `[event][receive channel][time sample]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelData {
    pub n_events: usize,
    pub n_rx: usize,
    pub n_samples: usize,
    pub fs_hz: f64,
    /// Time of sample 0 relative to the (zero-referenced) transmit trigger.
    pub t0_s: f64,
    pub sound_speed: f64,
    pub data: Vec<f64>,
}

impl ChannelData {
    pub fn zeros(
        n_events: usize,
        n_rx: usize,
        n_samples: usize,
        fs_hz: f64,
        t0_s: f64,
        sound_speed: f64,
    ) -> Self {
        Self {
            n_events,
            n_rx,
            n_samples,
            fs_hz,
            t0_s,
            sound_speed,
            data: vec![0.0; n_events * n_rx * n_samples],
        }
    }

    #[inline]
    pub fn trace(&self, event: usize, rx: usize) -> &[f64] {
        let start = (event * self.n_rx + rx) * self.n_samples;
        &self.data[start..start + self.n_samples]
    }

    #[inline]
    pub fn trace_mut(&mut self, event: usize, rx: usize) -> &mut [f64] {
        let start = (event * self.n_rx + rx) * self.n_samples;
        &mut self.data[start..start + self.n_samples]
    }

    /// All traces of one event, contiguous.
    #[inline]
    pub fn event(&self, event: usize) -> &[f64] {
        let len = self.n_rx * self.n_samples;
        &self.data[event * len..(event + 1) * len]
    }

    pub fn event_mut(&mut self, event: usize) -> &mut [f64] {
        let len = self.n_rx * self.n_samples;
        &mut self.data[event * len..(event + 1) * len]
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.n_events == other.n_events
            && self.n_rx == other.n_rx
            && self.n_samples == other.n_samples
            && self.fs_hz == other.fs_hz
            && self.t0_s == other.t0_s
    }

    /// Largest absolute sample.
    pub fn peak_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Rounds every sample through `f32`, matching what a saved record holds.
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = *v as f32 as f64;
        }
        out
    }

    pub fn write_rccd<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = Vec::with_capacity(HEADER_LEN);
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&VERSION.to_le_bytes());
        for dim in [self.n_events, self.n_rx, self.n_samples] {
            let dim = u32::try_from(dim)
                .map_err(|_| Error::Format(format!("dimension {dim} exceeds u32")))?;
            header.extend_from_slice(&dim.to_le_bytes());
        }
        for v in [self.fs_hz, self.t0_s, self.sound_speed] {
            header.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&header)?;
        let mut body = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            body.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&body)?;
        Ok(())
    }

    pub fn to_rccd_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_rccd(&mut buf)?;
        Ok(buf)
    }

    pub fn read_rccd<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; HEADER_LEN];
        r.read_exact(&mut header)
            .map_err(|e| Error::Format(format!("truncated RCCD header: {e}")))?;
        if &header[0..4] != MAGIC {
            return Err(Error::Format("bad RCCD magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(header[o..o + 8].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported RCCD version {version}")));
        }
        let n_events = u32_at(8) as usize;
        let n_rx = u32_at(12) as usize;
        let n_samples = u32_at(16) as usize;
        let fs_hz = f64_at(20);
        let t0_s = f64_at(28);
        let sound_speed = f64_at(36);
        let count = n_events
            .checked_mul(n_rx)
            .and_then(|v| v.checked_mul(n_samples))
            .ok_or_else(|| Error::Format("RCCD dimensions overflow".into()))?;
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        check_shape("RCCD payload bytes", count * 4, body.len())
            .map_err(|e| Error::Format(e.to_string()))?;
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Self {
            n_events,
            n_rx,
            n_samples,
            fs_hz,
            t0_s,
            sound_speed,
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let cd = ChannelData::zeros(2, 3, 4, 20e6, 1e-6, 1540.0);
        let bytes = cd.to_rccd_bytes().unwrap();
        assert_eq!(&bytes[0..4], b"RCCD");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 4);
        assert_eq!(f64::from_le_bytes(bytes[20..28].try_into().unwrap()), 20e6);
        assert_eq!(bytes.len(), HEADER_LEN + 2 * 3 * 4 * 4);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let cd = ChannelData::zeros(1, 1, 8, 20e6, 0.0, 1540.0);
        let mut bytes = cd.to_rccd_bytes().unwrap();
        assert!(ChannelData::read_rccd(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(ChannelData::read_rccd(&bytes[..]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_f32_quantization(samples in proptest::collection::vec(-1e3f64..1e3, 12)) {
            let mut cd = ChannelData::zeros(2, 2, 3, 20e6, 2.5e-6, 1540.0);
            cd.data.copy_from_slice(&samples);
            let back = ChannelData::read_rccd(&cd.to_rccd_bytes().unwrap()[..]).unwrap();
            prop_assert_eq!(back, cd.quantized());
        }
    }
}
