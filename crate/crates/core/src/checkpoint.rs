//! Versioned, checksummed binary container for models and worlds.
//!
//! Layout (little endian):
//!
//! ```text
//! magic    8 bytes  "CSIMCKPT"
//! version  u32
//! kind     u32 length + UTF-8 tag ("model", "world", ...)
//! length   u64 payload length
//! sha256   32 bytes over the payload
//! payload  bincode encoding of the value
//! ```
//!
//! Floats are stored as raw IEEE-754 bits, so a round trip is bit-exact.

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CSIMCKPT";
pub const VERSION: u32 = 1;

pub fn encode<T: Serialize>(kind: &str, value: &T) -> Result<Vec<u8>> {
    let payload = bincode::serialize(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let digest: [u8; 32] = Sha256::digest(&payload).into();
    let mut out = Vec::with_capacity(payload.len() + 64 + kind.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(kind.len() as u32).to_le_bytes());
    out.extend_from_slice(kind.as_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&digest);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

pub fn decode<T: DeserializeOwned>(kind: &str, mut bytes: &[u8]) -> Result<T> {
    if take(&mut bytes, 8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let kind_len = u32::from_le_bytes(take(&mut bytes, 4)?.try_into().unwrap()) as usize;
    let found = take(&mut bytes, kind_len)?;
    if found != kind.as_bytes() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds a '{}', expected a '{kind}'",
            String::from_utf8_lossy(found)
        )));
    }
    let len = u64::from_le_bytes(take(&mut bytes, 8)?.try_into().unwrap()) as usize;
    let digest = take(&mut bytes, 32)?;
    let payload = take(&mut bytes, len)?;
    if !bytes.is_empty() {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    if Sha256::digest(payload).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch (corrupted checkpoint)".into()));
    }
    bincode::deserialize(payload).map_err(|e| Error::Checkpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ppo::PolicyModel;
    use crate::rng::derive_stream;

    #[test]
    fn model_round_trip_is_bit_exact() {
        let model = PolicyModel::new(6, 7, &mut derive_stream(1, "ckpt"));
        let bytes = encode("model", &model).unwrap();
        let back: PolicyModel = decode("model", &bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(encode("model", &back).unwrap(), bytes);
    }

    #[test]
    fn corruption_and_mismatch_are_detected() {
        let bytes = encode("model", &vec![1.5f64, -0.25]).unwrap();
        let mut bad = bytes.clone();
        *bad.last_mut().unwrap() ^= 1;
        assert!(decode::<Vec<f64>>("model", &bad).unwrap_err().to_string().contains("checksum"));
        assert!(decode::<Vec<f64>>("world", &bytes).is_err());
        let mut old = bytes.clone();
        old[8] = 9;
        assert!(decode::<Vec<f64>>("model", &old).unwrap_err().to_string().contains("version"));
        assert!(decode::<Vec<f64>>("model", &bytes[..20]).is_err());
    }
}
