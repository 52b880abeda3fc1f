//! Length-prefixed framing of wire messages over a reliable byte stream.

use std::io::{self, Read, Write};

use super::{decode, encode, WireError, WireMessage};

/// Frames larger than this are rejected as corrupt.
pub const MAX_FRAME: usize = 16 << 20;

#[derive(Debug, thiserror::Error)]
pub enum SocketError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("frame of {0} bytes exceeds limit")]
    TooLarge(usize),
}

pub fn write_message(w: &mut impl Write, msg: &WireMessage) -> Result<(), SocketError> {
    let bytes = encode(msg);
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Read one message; `Ok(None)` on a clean end of stream.
pub fn read_message(r: &mut impl Read) -> Result<Option<WireMessage>, SocketError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(SocketError::TooLarge(len));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(Some(decode(&buf)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn framing_round_trip() {
        let a = WireMessage::frame(1, 2, 3, 2, 1, vec![9, 8]);
        let b = WireMessage::frame(2, 5, 3, 1, 1, vec![7]);
        let mut buf = Vec::new();
        write_message(&mut buf, &a).unwrap();
        write_message(&mut buf, &b).unwrap();
        let mut cur = io::Cursor::new(buf);
        assert_eq!(read_message(&mut cur).unwrap(), Some(a));
        assert_eq!(read_message(&mut cur).unwrap(), Some(b));
        assert_eq!(read_message(&mut cur).unwrap(), None);
    }

    #[test]
    fn oversized_prefix_rejected() {
        let mut cur = io::Cursor::new(u32::MAX.to_le_bytes().to_vec());
        assert!(matches!(read_message(&mut cur), Err(SocketError::TooLarge(_))));
    }
}
