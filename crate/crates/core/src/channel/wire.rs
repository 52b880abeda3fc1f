use thiserror::Error;

use crate::nnkit::FeatureGrid;

pub const MAGIC: u16 = 0xDE1A;
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 28;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("bad magic {0:#06x}")]
    BadMagic(u16),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated message: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("payload length {got} does not match dims (expected {expected})")]
    PayloadLengthMismatch { expected: usize, got: usize },
    #[error("malformed aux field {0:#06x} for FEAT")]
    BadAux(u16),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Frame = 1,
    Feat = 2,
}

impl MsgType {
    pub fn element_size(self) -> usize {
        match self {
            MsgType::Frame => 1,
            MsgType::Feat => 4,
        }
    }
}

/// One protocol message. `aux` holds the client's delay estimate in ms for
/// FRAME and the delay input used (low byte) for FEAT.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub msg_type: MsgType,
    pub seq: u32,
    pub capture_ts_us: u64,
    pub aux: u16,
    /// `(w, h, c)`
    pub dims: (u16, u16, u16),
    pub payload: Vec<u8>,
}

impl WireMessage {
    pub fn frame(seq: u32, capture_ts_us: u64, delay_est_ms: u16, width: u16, height: u16, pixels: Vec<u8>) -> Self {
        Self {
            msg_type: MsgType::Frame,
            seq,
            capture_ts_us,
            aux: delay_est_ms,
            dims: (width, height, 1),
            payload: pixels,
        }
    }

    pub fn feat(seq: u32, capture_ts_us: u64, delay_used_frames: u8, grid: &FeatureGrid<f32>) -> Self {
        let payload = grid.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            msg_type: MsgType::Feat,
            seq,
            capture_ts_us,
            aux: delay_used_frames as u16,
            dims: (grid.width as u16, grid.height as u16, grid.channels as u16),
            payload,
        }
    }

    pub fn delay_est_ms(&self) -> u16 {
        self.aux
    }

    pub fn delay_used_frames(&self) -> u8 {
        (self.aux & 0xff) as u8
    }

    pub fn expected_payload_len(&self) -> usize {
        let (w, h, c) = self.dims;
        w as usize * h as usize * c as usize * self.msg_type.element_size()
    }

    /// Decode a FEAT payload back into a feature grid.
    pub fn to_grid(&self) -> Option<FeatureGrid<f32>> {
        if self.msg_type != MsgType::Feat || self.payload.len() != self.expected_payload_len() {
            return None;
        }
        let (w, h, c) = self.dims;
        let data = self
            .payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        FeatureGrid::from_vec(c as usize, h as usize, w as usize, data).ok()
    }
}

pub fn encode(msg: &WireMessage) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + msg.payload.len());
    out.extend_from_slice(&MAGIC.to_le_bytes());
    out.push(VERSION);
    out.push(msg.msg_type as u8);
    out.extend_from_slice(&msg.seq.to_le_bytes());
    out.extend_from_slice(&msg.capture_ts_us.to_le_bytes());
    out.extend_from_slice(&msg.aux.to_le_bytes());
    out.extend_from_slice(&msg.dims.0.to_le_bytes());
    out.extend_from_slice(&msg.dims.1.to_le_bytes());
    out.extend_from_slice(&msg.dims.2.to_le_bytes());
    out.extend_from_slice(&(msg.payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&msg.payload);
    out
}

fn u16_at(b: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([b[i], b[i + 1]])
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes(b[i..i + 4].try_into().expect("4 bytes"))
}

pub fn decode(bytes: &[u8]) -> Result<WireMessage, WireError> {
    if bytes.len() < HEADER_LEN {
        return Err(WireError::Truncated {
            need: HEADER_LEN,
            have: bytes.len(),
        });
    }
    let magic = u16_at(bytes, 0);
    if magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    if bytes[2] != VERSION {
        return Err(WireError::UnsupportedVersion(bytes[2]));
    }
    let msg_type = match bytes[3] {
        1 => MsgType::Frame,
        2 => MsgType::Feat,
        t => return Err(WireError::UnknownType(t)),
    };
    let aux = u16_at(bytes, 16);
    if msg_type == MsgType::Feat && aux > 0xff {
        return Err(WireError::BadAux(aux));
    }
    let payload_len = u32_at(bytes, 24) as usize;
    let need = HEADER_LEN + payload_len;
    if bytes.len() < need {
        return Err(WireError::Truncated {
            need,
            have: bytes.len(),
        });
    }
    let msg = WireMessage {
        msg_type,
        seq: u32_at(bytes, 4),
        capture_ts_us: u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")),
        aux,
        dims: (u16_at(bytes, 18), u16_at(bytes, 20), u16_at(bytes, 22)),
        payload: bytes[HEADER_LEN..need].to_vec(),
    };
    let expected = msg.expected_payload_len();
    if expected != payload_len || bytes.len() != need {
        return Err(WireError::PayloadLengthMismatch {
            expected,
            got: bytes.len() - HEADER_LEN,
        });
    }
    Ok(msg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn golden_frame() -> WireMessage {
        WireMessage::frame(7, 233_333, 100, 2, 2, vec![0, 64, 128, 255])
    }

    #[test]
    fn golden_frame_bytes() {
        let hex: String = encode(&golden_frame()).iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(
            hex,
            "1ade010107000000758f030000000000640002000200010004000000004080ff"
        );
    }

    #[test]
    fn truncation_is_an_error_at_every_length() {
        let bytes = encode(&golden_frame());
        for n in 0..bytes.len() {
            assert!(matches!(decode(&bytes[..n]), Err(WireError::Truncated { .. })), "len {n}");
        }
    }

    #[test]
    fn distinct_header_errors() {
        let good = encode(&golden_frame());
        let mut b = good.clone();
        b[0] = 0;
        assert!(matches!(decode(&b), Err(WireError::BadMagic(_))));
        let mut b = good.clone();
        b[2] = 2;
        assert_eq!(decode(&b), Err(WireError::UnsupportedVersion(2)));
        let mut b = good.clone();
        b[3] = 9;
        assert_eq!(decode(&b), Err(WireError::UnknownType(9)));
        let mut b = good.clone();
        b.push(0);
        assert!(matches!(decode(&b), Err(WireError::PayloadLengthMismatch { .. })));
    }

    #[test]
    fn feat_grid_round_trip() {
        let grid = FeatureGrid::from_vec(2, 1, 2, vec![1.5f32, -0.0, f32::MIN_POSITIVE, 3.25]).unwrap();
        let msg = WireMessage::feat(1, 10, 3, &grid);
        let back = decode(&encode(&msg)).unwrap();
        assert_eq!(back.delay_used_frames(), 3);
        assert_eq!(back.to_grid().unwrap(), grid);
    }

    fn arb_message() -> impl Strategy<Value = WireMessage> {
        (any::<bool>(), any::<u32>(), any::<u64>(), 0u16..6, 0u16..6, 1u16..4).prop_flat_map(
            |(is_frame, seq, ts, w, h, c)| {
                let (t, c) = if is_frame { (MsgType::Frame, 1) } else { (MsgType::Feat, c) };
                let len = w as usize * h as usize * c as usize * t.element_size();
                let aux = if is_frame { any::<u16>().boxed() } else { (0u16..256).boxed() };
                (aux, proptest::collection::vec(any::<u8>(), len)).prop_map(move |(aux, payload)| WireMessage {
                    msg_type: t,
                    seq,
                    capture_ts_us: ts,
                    aux,
                    dims: (w, h, c),
                    payload,
                })
            },
        )
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(m in arb_message()) {
            prop_assert_eq!(decode(&encode(&m)).unwrap(), m);
        }

        #[test]
        fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode(&bytes);
        }
    }
}
