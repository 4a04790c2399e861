//! Binary checkpoint: magic, format version, spec digest, optimizer counters,
//! then length-prefixed little-endian `f64` arrays for every parameter (in
//! [`Network::params`] order) followed by every momentum buffer.

use std::path::Path;

use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::Tensor;

use super::OptimizerState;

const MAGIC: &[u8; 8] = b"DTRMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_arrays<'a>(out: &mut Vec<u8>, arrays: impl ExactSizeIterator<Item = &'a Tensor>) {
    out.extend_from_slice(&(arrays.len() as u64).to_le_bytes());
    for t in arrays {
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode_checkpoint(net: &Network, state: &OptimizerState) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 16 * net.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&net.spec().digest());
    out.extend_from_slice(&state.epoch.to_le_bytes());
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&state.lr.to_le_bytes());
    put_arrays(&mut out, net.params().into_iter());
    put_arrays(&mut out, state.buffers.iter());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Reads a group of arrays whose lengths must equal `shapes`.
    fn arrays(&mut self, shapes: &[Vec<usize>], what: &str) -> Result<Vec<Tensor>> {
        let count = self.u64()?;
        if count != shapes.len() as u64 {
            return Err(Error::Checkpoint(format!(
                "{count} {what} arrays, network has {}",
                shapes.len()
            )));
        }
        shapes
            .iter()
            .enumerate()
            .map(|(i, shape)| {
                let len = self.u64()?;
                let want: usize = shape.iter().product();
                if len != want as u64 {
                    return Err(Error::Checkpoint(format!("{what} {i}: {len} values, expected {want}")));
                }
                let data = (0..want).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
                Tensor::from_vec(shape, data)
            })
            .collect()
    }
}

/// Restores parameters into `net` (whose spec must match the stored digest)
/// and returns the optimizer state.
pub fn decode_checkpoint(net: &mut Network, bytes: &[u8]) -> Result<OptimizerState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(Error::CheckpointMagic);
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if r.take(32)? != net.spec().digest() {
        return Err(Error::Checkpoint(format!(
            "spec digest does not match network `{}`",
            net.spec().name
        )));
    }
    let epoch = r.u64()?;
    let step = r.u64()?;
    let lr = r.f64()?;
    let shapes: Vec<Vec<usize>> = net.params().iter().map(|p| p.shape().to_vec()).collect();
    let params = r.arrays(&shapes, "parameter")?;
    let buffers = r.arrays(&shapes, "momentum")?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if params.iter().chain(&buffers).any(|t| !t.all_finite()) {
        return Err(Error::Checkpoint("non-finite values".into()));
    }
    for (dst, src) in net.params_mut().into_iter().zip(params) {
        *dst = src;
    }
    Ok(OptimizerState {
        buffers,
        step,
        epoch,
        lr,
    })
}

pub fn save_checkpoint(net: &Network, state: &OptimizerState, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(net, state))?;
    Ok(())
}

pub fn load_checkpoint(net: &mut Network, path: &Path) -> Result<OptimizerState> {
    decode_checkpoint(net, &std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_plainnet_with, PlainNetOptions};
    use crate::tensor::Rng;
    use crate::train::init_params;

    fn net(seed: u64) -> Network {
        let spec = build_plainnet_with(
            3,
            4,
            Some(2),
            PlainNetOptions {
                width: 3,
                image: 8,
                ..PlainNetOptions::default()
            },
        )
        .unwrap();
        let mut n = Network::zeroed(&spec).unwrap();
        init_params(&mut n, &mut Rng::new(seed));
        n
    }

    fn state(n: &Network) -> OptimizerState {
        let mut s = OptimizerState::new(n);
        let mut rng = Rng::new(9);
        s.buffers.iter_mut().for_each(|b| *b = rng.normal_tensor(b.shape(), 0.0, 1.0));
        s.epoch = 3;
        s.step = 41;
        s.lr = 0.02;
        s
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let src = net(1);
        let st = state(&src);
        save_checkpoint(&src, &st, &a).unwrap();
        let mut dst = net(2);
        let restored = load_checkpoint(&mut dst, &a).unwrap();
        assert_eq!(restored, st);
        for (p, q) in src.params().iter().zip(dst.params()) {
            assert_eq!(p.data(), q.data());
        }
        save_checkpoint(&dst, &restored, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn error_paths() {
        let n = net(1);
        let bytes = encode_checkpoint(&n, &state(&n));

        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        assert!(matches!(decode_checkpoint(&mut net(1), &bad), Err(Error::CheckpointMagic)));

        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(
            decode_checkpoint(&mut net(1), &bad),
            Err(Error::CheckpointVersion { found: 9, expected: 1 })
        ));

        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(matches!(decode_checkpoint(&mut net(1), &bad), Err(Error::Checkpoint(m)) if m.contains("digest")));

        let short = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_checkpoint(&mut net(1), short), Err(Error::Checkpoint(m)) if m.contains("truncated")));
    }
}
