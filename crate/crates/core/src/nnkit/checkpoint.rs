use std::io::{Read, Write};

use super::NnError;

const MAGIC: &[u8; 4] = b"DDNN";
const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub values: Vec<f32>,
}

/// Ordered collection of named `f32` tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, dims: &[usize], values: Vec<f32>) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            dims: dims.iter().map(|&d| d as u32).collect(),
            values,
        });
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_checkpoint(&mut out, self).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut cursor = bytes;
        let ckpt = read_checkpoint(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(NnError::Checkpoint(format!("{} trailing bytes", cursor.len())));
        }
        Ok(ckpt)
    }
}

/// Layout: magic `DDNN`, version u8, tensor count u32, then per tensor
/// name length u16, name, rank u8, dims u32 x rank, f32 values; all little-endian.
pub fn write_checkpoint(w: &mut impl Write, ckpt: &Checkpoint) -> Result<(), NnError> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(ckpt.tensors.len() as u32).to_le_bytes())?;
    for t in &ckpt.tensors {
        let n: usize = t.dims.iter().map(|&d| d as usize).product();
        if n != t.values.len() || t.name.len() > u16::MAX as usize || t.dims.len() > u8::MAX as usize {
            return Err(NnError::Checkpoint(format!("tensor {} is malformed", t.name)));
        }
        w.write_all(&(t.name.len() as u16).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&[t.dims.len() as u8])?;
        for d in &t.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        for v in &t.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N], NnError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| NnError::Checkpoint(format!("truncated: {e}")))?;
    Ok(b)
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint, NnError> {
    if &take::<4>(r)? != MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let version = take::<1>(r)?[0];
    if version != VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take::<4>(r)?);
    let mut ckpt = Checkpoint::default();
    for _ in 0..count {
        let len = u16::from_le_bytes(take::<2>(r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| NnError::Checkpoint(format!("truncated: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| NnError::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = take::<1>(r)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(take::<4>(r)?));
        }
        let n: usize = dims.iter().map(|&d| d as usize).product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(f32::from_le_bytes(take::<4>(r)?));
        }
        ckpt.tensors.push(NamedTensor { name, dims, values });
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_as_documented() {
        let mut c = Checkpoint::default();
        c.push("ab", &[2], vec![1.0, -0.5]);
        let b = c.to_bytes();
        let mut expect = b"DDNN".to_vec();
        expect.push(1);
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u16.to_le_bytes());
        expect.extend_from_slice(b"ab");
        expect.push(1);
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-0.5f32).to_le_bytes());
        assert_eq!(b, expect);
    }

    #[test]
    fn truncated_and_bad_magic() {
        let mut c = Checkpoint::default();
        c.push("w", &[3], vec![1.0, 2.0, 3.0]);
        let b = c.to_bytes();
        for cut in 0..b.len() {
            assert!(Checkpoint::from_bytes(&b[..cut]).is_err());
        }
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut ver = b;
        ver[4] = 9;
        assert!(Checkpoint::from_bytes(&ver).is_err());
    }

    proptest! {
        #[test]
        fn bit_exact_round_trip(
            tensors in prop::collection::vec(
                ("[a-z.]{1,12}", prop::collection::vec(1u32..4, 0..3), any::<u32>()),
                0..5,
            )
        ) {
            let mut c = Checkpoint::default();
            for (name, dims, seed) in tensors {
                let n: usize = dims.iter().map(|&d| d as usize).product();
                // Arbitrary bit patterns, including NaN payloads and signed zeros.
                let values = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32))).collect();
                c.tensors.push(NamedTensor { name, dims, values });
            }
            let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(back.to_bytes(), c.to_bytes());
            prop_assert_eq!(back.tensors.len(), c.tensors.len());
            for (a, b) in back.tensors.iter().zip(&c.tensors) {
                let ab: Vec<u32> = a.values.iter().map(|v| v.to_bits()).collect();
                let bb: Vec<u32> = b.values.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(ab, bb);
            }
        }
    }
}
