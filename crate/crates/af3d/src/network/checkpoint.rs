//! Binary checkpoint format.
//!
//! Layout: magic `AF3D`, version u32 LE, length-prefixed JSON metadata,
//! then length-delimited named tensor records until end of file. Records
//! hold every parameter in visit order followed by one `opt.`-prefixed
//! momentum record per parameter, so the byte stream is a pure function
//! of the model state.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::Sgd;
use super::{build_network, Network, NetworkConfig};
use crate::error::{Error, Result};
use crate::Real;

pub const CKPT_MAGIC: [u8; 4] = *b"AF3D";
pub const CKPT_VERSION: u32 = 1;

const OPT_PREFIX: &str = "opt.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub mode: String,
    pub network: NetworkConfig,
}

pub fn k_for_mode(mode: &str) -> Result<usize> {
    match mode {
        "anchor_free" => Ok(1),
        "anchor_based" => Ok(3),
        other => Err(Error::Checkpoint(format!("unknown mode {other:?}"))),
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_record(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, shape.len() as u32);
    for &d in shape {
        put_u32(buf, d as u32);
    }
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn checkpoint_bytes<T: Real>(net: &Network<T>, opt: &Sgd<T>, step: u64, mode: &str) -> Result<Vec<u8>> {
    k_for_mode(mode)?;
    let meta = CheckpointMeta {
        step,
        mode: mode.to_string(),
        network: net.cfg,
    };
    let meta_json = serde_json::to_string(&meta)
        .map_err(|e| Error::Checkpoint(format!("metadata encoding failed: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(&CKPT_MAGIC);
    put_u32(&mut buf, CKPT_VERSION);
    put_u32(&mut buf, meta_json.len() as u32);
    buf.extend_from_slice(meta_json.as_bytes());
    let mut matched = 0usize;
    net.visit_params_ref(&mut |p| {
        let data: Vec<f32> = p.data.iter().map(|v| v.as_f64() as f32).collect();
        put_record(&mut buf, &p.name, &p.shape, &data);
    });
    net.visit_params_ref(&mut |p| {
        let vel: Vec<f32> = match opt.velocity.get(&p.name) {
            Some(v) => {
                matched += 1;
                v.iter().map(|x| x.as_f64() as f32).collect()
            }
            None => vec![0.0; p.data.len()],
        };
        put_record(&mut buf, &format!("{OPT_PREFIX}{}", p.name), &p.shape, &vel);
    });
    if matched != opt.velocity.len() {
        return Err(Error::Checkpoint(
            "optimizer state refers to parameters the network does not have".into(),
        ));
    }
    Ok(buf)
}

pub fn save_checkpoint<T: Real>(
    net: &Network<T>,
    opt: &Sgd<T>,
    step: u64,
    mode: &str,
    path: &Path,
) -> Result<()> {
    let buf = checkpoint_bytes(net, opt, step, mode)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Malformed {
                path: self.path.to_path_buf(),
                detail: format!(
                    "truncated checkpoint: needed {} bytes at offset {}, file has {}",
                    n,
                    self.pos,
                    self.buf.len()
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn read_record(cur: &mut Cursor) -> Result<(String, Vec<usize>, Vec<f32>)> {
    let name_len = cur.u32()? as usize;
    let name = String::from_utf8(cur.take(name_len)?.to_vec()).map_err(|_| Error::Malformed {
        path: cur.path.to_path_buf(),
        detail: "record name is not valid UTF-8".into(),
    })?;
    let rank = cur.u32()? as usize;
    if rank > 8 {
        return Err(Error::Malformed {
            path: cur.path.to_path_buf(),
            detail: format!("record {name:?} has implausible rank {rank}"),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    let mut len = 1usize;
    for _ in 0..rank {
        let d = cur.u32()? as usize;
        len = len.checked_mul(d).ok_or_else(|| Error::Malformed {
            path: cur.path.to_path_buf(),
            detail: format!("record {name:?} shape overflows"),
        })?;
        shape.push(d);
    }
    let raw = cur.take(len * 4)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((name, shape, data))
}

/// Rebuilds the network and optimizer state recorded at `path`.
pub fn load_checkpoint<T: Real>(
    path: &Path,
) -> Result<(Network<T>, CheckpointMeta, BTreeMap<String, Vec<T>>)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        buf: &buf,
        pos: 0,
        path,
    };
    let magic = cur.take(4)?;
    if magic != CKPT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: String::from_utf8_lossy(&CKPT_MAGIC).into_owned(),
            found: format!("{magic:?}"),
        });
    }
    let version = cur.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::BadVersion {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let meta_len = cur.u32()? as usize;
    let meta_bytes = cur.take(meta_len)?;
    let mut meta: CheckpointMeta =
        serde_json::from_slice(meta_bytes).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            detail: format!("metadata JSON: {e}"),
        })?;
    meta.network.k_per_point = k_for_mode(&meta.mode)?;
    let mut records: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    while !cur.at_end() {
        let (name, shape, data) = read_record(&mut cur)?;
        if records.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate record {name:?}")));
        }
    }
    let mut net = build_network::<T>(&meta.network, 0)?;
    let mut missing: Vec<String> = Vec::new();
    let mut shape_err: Option<String> = None;
    net.visit_params(&mut |p| match records.remove(&p.name) {
        Some((shape, data)) => {
            if shape != p.shape {
                shape_err.get_or_insert_with(|| {
                    format!(
                        "parameter {:?}: checkpoint shape {:?} does not match model shape {:?}",
                        p.name, shape, p.shape
                    )
                });
                return;
            }
            for (dst, src) in p.data.iter_mut().zip(data.iter()) {
                *dst = T::cast(*src as f64);
            }
        }
        None => missing.push(p.name.clone()),
    });
    if let Some(msg) = shape_err {
        return Err(Error::Checkpoint(msg));
    }
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "checkpoint is missing parameters: {missing:?}"
        )));
    }
    let mut velocity = BTreeMap::new();
    let mut leftover = Vec::new();
    for (name, (shape, data)) in records {
        match name.strip_prefix(OPT_PREFIX) {
            Some(pname) => {
                let mut ok = false;
                net.visit_params(&mut |p| {
                    if p.name == pname {
                        ok = p.shape == shape;
                    }
                });
                if !ok {
                    return Err(Error::Checkpoint(format!(
                        "momentum record {name:?} does not match any parameter shape"
                    )));
                }
                velocity.insert(
                    pname.to_string(),
                    data.iter().map(|&v| T::cast(v as f64)).collect(),
                );
            }
            None => leftover.push(name),
        }
    }
    if !leftover.is_empty() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has records for unknown parameters: {leftover:?}"
        )));
    }
    Ok((net, meta, velocity))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::optim::OptimConfig;
    use crate::network::Tensor5;

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            base_channels: 2,
            blocks_per_stage: 1,
            growth: 2,
            head_channels: 2,
            k_per_point: 1,
        }
    }

    fn trained_pair() -> (Network<f32>, Sgd<f32>) {
        let mut net = build_network::<f32>(&tiny(), 11).unwrap();
        let mut x = Tensor5::zeros([1, 1, 16, 16, 16]);
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = ((i % 11) as f32 - 5.0) * 0.1;
        }
        let heads = net.forward(&x).unwrap();
        let grads: Vec<_> = heads
            .iter()
            .map(|h| {
                let mut g = Tensor5::zeros(h.shape);
                for (i, v) in g.data.iter_mut().enumerate() {
                    *v = ((i % 7) as f32 - 3.0) * 0.05;
                }
                g
            })
            .collect();
        net.backward(&grads).unwrap();
        let mut opt = Sgd::new(OptimConfig::default());
        opt.step(&mut net).unwrap();
        (net, opt)
    }

    #[test]
    fn roundtrip_restores_everything() {
        let (net, opt) = trained_pair();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&net, &opt, 7, "anchor_free", &path).unwrap();
        let (net2, meta, vel) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(meta.step, 7);
        assert_eq!(meta.mode, "anchor_free");
        assert_eq!(meta.network, net.cfg);
        let dump = |n: &Network<f32>| {
            let mut v = Vec::new();
            n.visit_params_ref(&mut |p| v.extend_from_slice(&p.data));
            v
        };
        assert_eq!(dump(&net), dump(&net2));
        assert_eq!(opt.velocity, vel);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (net, opt) = trained_pair();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&net, &opt, 3, "anchor_free", &path).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();
        let (net2, meta, vel) = load_checkpoint::<f32>(&path).unwrap();
        let opt2 = Sgd::with_velocity(opt.cfg, vel);
        let bytes2 = checkpoint_bytes(&net2, &opt2, meta.step, &meta.mode).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn bad_magic_is_distinct_error() {
        let (net, opt) = trained_pair();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&net, &opt, 0, "anchor_free", &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint::<f32>(&path) {
            Err(Error::BadMagic { .. }) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn bad_version_is_distinct_error() {
        let (net, opt) = trained_pair();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ckpt");
        save_checkpoint(&net, &opt, 0, "anchor_free", &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99;
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint::<f32>(&path) {
            Err(Error::BadVersion { found: 99, .. }) => {}
            other => panic!("expected BadVersion, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_malformed() {
        let (net, opt) = trained_pair();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        save_checkpoint(&net, &opt, 0, "anchor_free", &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match load_checkpoint::<f32>(&path) {
            Err(Error::Malformed { .. }) => {}
            other => panic!("expected Malformed, got {other:?}"),
        }
    }

    #[test]
    fn anchor_based_mode_restores_k3() {
        let mut cfg = tiny();
        cfg.k_per_point = 3;
        let net = build_network::<f32>(&cfg, 2).unwrap();
        let opt = Sgd::new(OptimConfig::default());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k3.ckpt");
        save_checkpoint(&net, &opt, 1, "anchor_based", &path).unwrap();
        let (net2, meta, _) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(meta.network.k_per_point, 3);
        assert_eq!(net2.cfg.head_out_channels(), 15);
    }
}
