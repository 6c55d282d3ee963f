//! Binary policy checkpoints.
//!
//! Layout (all integers and reals little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SPPC"
//! 4       2     format version (u16, currently 1)
//! 6       1     mode (0 = positionwise, 1 = bigram)
//! 7       1     reserved, 0
//! 8       4     horizon H (u32)
//! 12      4     vocabulary V (u32)
//! 16      4     eos token id (u32)
//! 20      8     logit count N (u64) = rows * V
//! 28      8*N   logits, row-major f64
//! ```

use std::io::{Read, Write};

use super::{PolicyMode, PolicyParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPPC";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn write_checkpoint<W: Write>(params: &PolicyParams, mut w: W) -> Result<()> {
    let mode: u8 = match params.mode() {
        PolicyMode::Positionwise => 0,
        PolicyMode::Bigram => 1,
    };
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&[mode, 0])?;
    w.write_all(&(params.horizon() as u32).to_le_bytes())?;
    w.write_all(&(params.vocab() as u32).to_le_bytes())?;
    w.write_all(&params.eos().to_le_bytes())?;
    w.write_all(&(params.logits().len() as u64).to_le_bytes())?;
    for x in params.logits() {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| Error::Parse(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<PolicyParams> {
    let magic: [u8; 4] = read_array(&mut r)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Parse("not a policy checkpoint (bad magic)".into()));
    }
    let version = u16::from_le_bytes(read_array(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
    }
    let [mode, _reserved] = read_array::<2, _>(&mut r)?;
    let mode = match mode {
        0 => PolicyMode::Positionwise,
        1 => PolicyMode::Bigram,
        m => return Err(Error::Parse(format!("unknown policy mode byte {m}"))),
    };
    let horizon = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let vocab = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let eos = u32::from_le_bytes(read_array(&mut r)?);
    let count = u64::from_le_bytes(read_array(&mut r)?);
    // bound the allocation before trusting the header
    let expected = match mode {
        PolicyMode::Positionwise => horizon as u64 * vocab as u64,
        PolicyMode::Bigram => vocab as u64 * vocab as u64,
    };
    if count != expected {
        return Err(Error::Parse(format!("checkpoint declares {count} logits, header shape implies {expected}")));
    }
    let mut logits = Vec::with_capacity(count as usize);
    for _ in 0..count {
        logits.push(f64::from_le_bytes(read_array(&mut r)?));
    }
    PolicyParams::new(mode, horizon, vocab, eos, logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let logits: Vec<f64> = (0..12).map(|i| (i as f64).sqrt() - 1.7).collect();
        let p = PolicyParams::new(PolicyMode::Positionwise, 3, 4, 3, logits).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        assert_eq!(buf.len(), 28 + 12 * 8);
        assert_eq!(&buf[..4], b"SPPC");
        assert_eq!(read_checkpoint(&buf[..]).unwrap(), p);
    }

    #[test]
    fn corrupt_headers_rejected() {
        let p = PolicyParams::uniform(PolicyMode::Bigram, 5, 3, 2).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&bad[..]).is_err());

        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(read_checkpoint(&bad[..]).is_err());

        let mut bad = buf.clone();
        bad[20] = 200;
        assert!(read_checkpoint(&bad[..]).is_err());

        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
    }
}
