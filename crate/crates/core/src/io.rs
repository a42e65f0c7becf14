//! HSC1 cube container and the sectioned checkpoint container.
//!
//! HSC1 layout (little-endian):
//!
//! ```text
//! "HSC1" | version u16 = 1 | dtype u16 = 0 (f32) | W u32 | H u32 | L u32 | reserved u64 | f32 × W·H·L
//! ```
//!
//! The payload is band-major, then row-major, i.e. the `[L, H, W]` tensor order.
//!
//! Checkpoint layout:
//!
//! ```text
//! "HCK1" | version u16 = 1 | dtype u16 = 0 | sections u32 | reserved u64
//! per section: name_len u16 | name | kind u8 (0 f32 tensor, 1 JSON) | rank u8 | dims u32 × rank | offset u64 | bytes u64
//! payloads at the recorded absolute offsets
//! ```

use std::fs;
use std::path::Path;

use hsi_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HSC1_MAGIC: &[u8; 4] = b"HSC1";
pub const CKPT_MAGIC: &[u8; 4] = b"HCK1";
pub const VERSION: u16 = 1;
const HSC1_HEADER: usize = 28;

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| fmt_err("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn f32_payload(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()
}

/// Encodes an `[L, H, W]` cube (masks and measurements use `L = 1`).
pub fn encode_hsc1(cube: &Tensor<f32>) -> Result<Vec<u8>> {
    let [l, h, w] = match cube.shape() {
        &[l, h, w] => [l, h, w],
        s => return Err(fmt_err(format!("HSC1 holds [L, H, W] cubes, got {s:?}"))),
    };
    let mut out = Vec::with_capacity(HSC1_HEADER + 4 * cube.numel());
    out.extend_from_slice(HSC1_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    for d in [w, h, l] {
        let d = u32::try_from(d).map_err(|_| fmt_err("extent exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&0u64.to_le_bytes());
    for v in cube.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_hsc1(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| fmt_err("file shorter than the HSC1 header"))? != HSC1_MAGIC {
        return Err(fmt_err("bad magic: not an HSC1 file"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(fmt_err(format!("unsupported HSC1 version {version}")));
    }
    let dtype = r.u16()?;
    if dtype != 0 {
        return Err(fmt_err(format!("unsupported HSC1 dtype {dtype}")));
    }
    let (w, h, l) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    r.u64()?;
    let n = w
        .checked_mul(h)
        .and_then(|v| v.checked_mul(l))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| fmt_err("extents overflow"))?;
    if n == 0 {
        return Err(fmt_err("zero extent in HSC1 header"));
    }
    let payload = &bytes[HSC1_HEADER..];
    if payload.len() != n {
        return Err(fmt_err(format!("payload is {} bytes, header implies {n}", payload.len())));
    }
    Ok(Tensor::from_vec(&[l, h, w], f32_payload(payload))?)
}

pub fn write_hsc1(path: &Path, cube: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_hsc1(cube)?)?;
    Ok(())
}

pub fn read_hsc1(path: &Path) -> Result<Tensor<f32>> {
    decode_hsc1(&fs::read(path)?)
}

/// One row of the per-epoch metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub l_rec: f64,
    pub l_diff: f64,
    pub val_psnr: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,L_rec,L_diff,val_psnr";

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{:e},{:.9},{:.9},{:.6}\n", r.epoch, r.lr, r.l_rec, r.l_diff, r.val_psnr));
    }
    s
}

/// Held-out averages; `l_diff` is 0 when no prior is sampled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub psnr: f64,
    pub ssim: f64,
    pub l_diff: f64,
}

/// Non-tensor checkpoint contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub phase: u8,
    pub epoch: usize,
    pub seed: u64,
    pub step: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub history: Vec<EpochLog>,
    /// Held-out metrics before the first update of this phase.
    #[serde(default)]
    pub initial_eval: Option<EvalSummary>,
    #[serde(default)]
    pub final_eval: Option<EvalSummary>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    /// Named tensors, written in this order.
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| fmt_err(e.to_string()))?;
        let mut sections: Vec<(&str, u8, Vec<u32>, Vec<u8>)> = vec![("meta", 1, vec![], meta)];
        for (name, t) in &self.tensors {
            if name == "meta" {
                return Err(fmt_err("tensor name 'meta' is reserved"));
            }
            let dims = t
                .shape()
                .iter()
                .map(|&d| u32::try_from(d).map_err(|_| fmt_err("extent exceeds u32")))
                .collect::<Result<Vec<_>>>()?;
            let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            sections.push((name, 0, dims, bytes));
        }
        let mut table_len = 0usize;
        for (name, _, dims, _) in &sections {
            if name.len() > u16::MAX as usize || dims.len() > u8::MAX as usize {
                return Err(fmt_err(format!("section '{name}' header too large")));
            }
            table_len += 2 + name.len() + 1 + 1 + 4 * dims.len() + 16;
        }
        let mut offset = (20 + table_len) as u64;
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        out.extend_from_slice(&0u64.to_le_bytes());
        for (name, kind, dims, bytes) in &sections {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(*kind);
            out.push(dims.len() as u8);
            for d in dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            offset += bytes.len() as u64;
        }
        for (_, _, _, bytes) in &sections {
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != CKPT_MAGIC {
            return Err(fmt_err("bad magic: not a checkpoint file"));
        }
        if r.u16()? != VERSION {
            return Err(fmt_err("unsupported checkpoint version"));
        }
        if r.u16()? != 0 {
            return Err(fmt_err("unsupported checkpoint dtype"));
        }
        let count = r.u32()? as usize;
        r.u64()?;
        let mut meta = None;
        let mut tensors = Vec::new();
        let mut first_offset = None;
        let mut expected_offset = None;
        let mut end = 20u64;
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?).map_err(|_| fmt_err("section name is not UTF-8"))?.to_string();
            let kind = r.u8()?;
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()?;
            let len = r.u64()?;
            first_offset.get_or_insert(offset);
            if *expected_offset.get_or_insert(offset) != offset {
                return Err(fmt_err(format!("section '{name}' is not contiguous")));
            }
            expected_offset = Some(offset + len);
            end = offset + len;
            let start = usize::try_from(offset).map_err(|_| fmt_err("offset overflow"))?;
            let stop = usize::try_from(offset + len).map_err(|_| fmt_err("offset overflow"))?;
            let payload = bytes.get(start..stop).ok_or_else(|| fmt_err(format!("section '{name}' is truncated")))?;
            match kind {
                1 if name == "meta" => {
                    meta = Some(serde_json::from_slice(payload).map_err(|e| fmt_err(format!("bad metadata: {e}")))?);
                }
                0 => {
                    let n: usize = dims.iter().product();
                    if payload.len() != 4 * n {
                        return Err(fmt_err(format!("section '{name}' holds {} bytes, dims imply {}", payload.len(), 4 * n)));
                    }
                    tensors.push((name, Tensor::from_vec(&dims, f32_payload(payload))?));
                }
                k => return Err(fmt_err(format!("section '{name}' has unknown kind {k}"))),
            }
        }
        if count > 0 && first_offset != Some(r.pos as u64) {
            return Err(fmt_err("section table and payload do not line up"));
        }
        if end as usize != bytes.len() {
            return Err(fmt_err("trailing bytes after the last section"));
        }
        let meta = meta.ok_or_else(|| fmt_err("checkpoint has no metadata section"))?;
        Ok(Checkpoint { meta, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsc1_header_layout() {
        let cube = Tensor::from_fn(&[2, 3, 4], |i| i as f32 * 0.5);
        let b = encode_hsc1(&cube).unwrap();
        assert_eq!(&b[..4], b"HSC1");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(b[16..20].try_into().unwrap()), 2);
        assert_eq!(b.len(), 28 + 4 * 24);
        assert_eq!(decode_hsc1(&b).unwrap(), cube);
    }

    #[test]
    fn hsc1_rejects_corruption() {
        let b = encode_hsc1(&Tensor::ones(&[1, 2, 2])).unwrap();
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode_hsc1(&bad).is_err());
        assert!(decode_hsc1(&b[..b.len() - 1]).is_err());
        assert!(decode_hsc1(&b[..10]).is_err());
        let mut long = b.clone();
        long.push(0);
        assert!(decode_hsc1(&long).is_err());
        let mut dtype = b;
        dtype[6] = 1;
        assert!(decode_hsc1(&dtype).is_err());
    }

    fn sample_checkpoint() -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                phase: 1,
                epoch: 3,
                seed: 9,
                step: 12,
                config_hash: "abc".into(),
                config: serde_json::json!({"k": 1}),
                history: vec![EpochLog {
                    epoch: 0,
                    lr: 4e-4,
                    l_rec: 0.123456789,
                    l_diff: 0.0,
                    val_psnr: 21.5,
                }],
                initial_eval: None,
                final_eval: Some(EvalSummary { psnr: 30.0, ssim: 0.9, l_diff: 0.25 }),
            },
            tensors: vec![
                ("a.weight".into(), Tensor::from_fn(&[2, 3], |i| (i as f32).sin())),
                ("b".into(), Tensor::scalar(f32::MIN_POSITIVE)),
            ],
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let c = sample_checkpoint();
        let b = c.encode().unwrap();
        let d = Checkpoint::decode(&b).unwrap();
        assert_eq!(d, c);
        assert_eq!(d.encode().unwrap(), b);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let b = sample_checkpoint().encode().unwrap();
        assert!(Checkpoint::decode(&b[..b.len() - 2]).is_err());
        let mut bad = b.clone();
        bad[1] = 0;
        assert!(Checkpoint::decode(&bad).is_err());
        let mut extra = b;
        extra.push(1);
        assert!(Checkpoint::decode(&extra).is_err());
    }

    #[test]
    fn csv_has_fixed_columns() {
        let s = log_csv(&sample_checkpoint().meta.history);
        assert!(s.starts_with("epoch,lr,L_rec,L_diff,val_psnr\n0,"));
    }
}
