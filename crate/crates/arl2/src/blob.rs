//! Versioned little-endian tensor container.
//!
//! ```text
//! magic    8 bytes  "ARL2BLOB"
//! version  u32      1
//! kind     u32      1 = hybrid layer parameters, 2 = frame dump,
//!                   3 = other named tensors
//! count    u32      number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8)
//!   rank u32, dims u64 × rank
//!   width u8        8 = f64, 4 = f32
//!   payload         row-major scalars of that width
//! ```

use std::io::{Read, Write};

use arl2_core::attention::ProjectionSet;
use arl2_core::gdn::{GatePredictors, RecurrentState};
use arl2_core::hybrid::{FeatureMaps, GateGranularity, GateParams, HybridLayer};
use arl2_core::{Precision, Tensor};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"ARL2BLOB";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum BlobKind {
    HybridLayer = 1,
    Frames = 2,
    Tensors = 3,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Blob(msg.into())
}

pub fn write_blob<W: Write>(mut w: W, kind: BlobKind, tensors: &[(&str, &Tensor)]) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(kind as u32).to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        match t.precision() {
            Precision::Double => {
                w.write_all(&[8])?;
                for v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            Precision::Single => {
                w.write_all(&[4])?;
                for v in t.data() {
                    w.write_all(&(*v as f32).to_le_bytes())?;
                }
            }
        }
    }
    w.flush()
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| bad("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_blob<R: Read>(mut r: R) -> Result<(BlobKind, Vec<(String, Tensor)>)> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| bad(e.to_string()))?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let kind = match c.u32()? {
        1 => BlobKind::HybridLayer,
        2 => BlobKind::Frames,
        3 => BlobKind::Tensors,
        k => return Err(bad(format!("unknown kind {k}"))),
    };
    let count = c.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| bad("shape overflow"))?;
        let width = c.take(1)?[0];
        let (data, precision) = match width {
            8 => {
                let raw = c.take(n.checked_mul(8).ok_or_else(|| bad("shape overflow"))?)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                (data, Precision::Double)
            }
            4 => {
                let raw = c.take(n.checked_mul(4).ok_or_else(|| bad("shape overflow"))?)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                    .collect();
                (data, Precision::Single)
            }
            w => return Err(bad(format!("tensor {name}: scalar width {w}"))),
        };
        let t = Tensor::new(shape, data)?.with_precision(precision);
        out.push((name, t));
    }
    if c.pos != buf.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((kind, out))
}

fn granularity_code(g: GateGranularity) -> f64 {
    match g {
        GateGranularity::Scalar => 0.0,
        GateGranularity::Headwise => 1.0,
        GateGranularity::Elementwise => 2.0,
    }
}

/// Every tensor of a hybrid layer, including its state and bookkeeping.
pub fn write_hybrid_layer<W: Write>(w: W, layer: &HybridLayer) -> std::io::Result<()> {
    let p = layer.proj();
    let meta = Tensor::new(
        [4],
        vec![
            granularity_code(layer.gates.granularity),
            layer.state.last_clean_frame as f64,
            layer.state.write_count as f64,
            layer.chunk_size as f64,
        ],
    )
    .expect("four entries");
    write_blob(
        w,
        BlobKind::HybridLayer,
        &[
            ("meta", &meta),
            ("w_q", &p.wq),
            ("w_k", &p.wk),
            ("w_v", &p.wv),
            ("w_o", &p.wo),
            ("phi_q", &layer.fmaps.phi_q),
            ("phi_k", &layer.fmaps.phi_k),
            ("phi_v", &layer.fmaps.phi_v),
            ("w_g", &layer.gates.w_g),
            ("b_g", &layer.gates.b_g),
            ("w_alpha", &layer.gp.w_alpha),
            ("b_alpha", &layer.gp.b_alpha),
            ("w_beta", &layer.gp.w_beta),
            ("b_beta", &layer.gp.b_beta),
            ("state", layer.state.matrices()),
        ],
    )
}

pub fn read_hybrid_layer<R: Read>(r: R) -> Result<HybridLayer> {
    let (kind, tensors) = read_blob(r)?;
    if kind != BlobKind::HybridLayer {
        return Err(bad("not a hybrid layer blob"));
    }
    let get = |name: &str| {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| bad(format!("missing tensor {name}")))
    };
    let meta = get("meta")?;
    if meta.len() != 4 {
        return Err(bad("meta must hold 4 values"));
    }
    let m = meta.data();
    let granularity = match m[0] as i64 {
        0 => GateGranularity::Scalar,
        1 => GateGranularity::Headwise,
        2 => GateGranularity::Elementwise,
        g => return Err(bad(format!("unknown gate granularity {g}"))),
    };
    let state_t = get("state")?;
    if state_t.shape().len() != 3 {
        return Err(bad("state must be [H, D, D]"));
    }
    let (heads, hd) = (state_t.shape()[0], state_t.shape()[1]);
    let proj = ProjectionSet::new(get("w_q")?, get("w_k")?, get("w_v")?, get("w_o")?, heads, hd)?;
    let fmaps = FeatureMaps {
        phi_q: get("phi_q")?,
        phi_k: get("phi_k")?,
        phi_v: get("phi_v")?,
    };
    let gates = GateParams {
        w_g: get("w_g")?,
        b_g: get("b_g")?,
        granularity,
    };
    let gp = GatePredictors {
        w_alpha: get("w_alpha")?,
        b_alpha: get("b_alpha")?,
        w_beta: get("w_beta")?,
        b_beta: get("b_beta")?,
    };
    let mut state = RecurrentState::from_matrices(state_t)?;
    state.last_clean_frame = m[1] as i64;
    state.write_count = m[2] as u64;
    let mut layer = HybridLayer::from_parts(proj, fmaps, gates, gp, state)?;
    layer.chunk_size = (m[3] as usize).max(1);
    Ok(layer)
}

/// Frames as tensors `frame0`, `frame1`, ...
pub fn write_frames<W: Write>(w: W, frames: &[Tensor]) -> std::io::Result<()> {
    let names: Vec<String> = (0..frames.len()).map(|i| format!("frame{i}")).collect();
    let pairs: Vec<(&str, &Tensor)> = names.iter().map(String::as_str).zip(frames).collect();
    write_blob(w, BlobKind::Frames, &pairs)
}

pub fn read_frames<R: Read>(r: R) -> Result<Vec<Tensor>> {
    let (kind, tensors) = read_blob(r)?;
    if kind != BlobKind::Frames {
        return Err(bad("not a frame dump"));
    }
    Ok(tensors.into_iter().map(|(_, t)| t).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use arl2_core::Rng;

    fn trained_looking_layer(precision: Precision) -> HybridLayer {
        let mut rng = Rng::new(3);
        let proj = ProjectionSet::random(&mut rng, 2, 4, 1.0);
        let mut layer = HybridLayer::with_granularity(proj, precision, GateGranularity::Elementwise);
        layer.fmaps.phi_k = rng.normal_tensor([2, 4, 4], 1.0);
        layer.gp.b_beta = rng.normal_tensor([2], 1.0);
        layer.absorb_clean_frame(&rng.normal_tensor([3, 8], 1.0), 0).unwrap();
        layer.chunk_size = 5;
        layer
    }

    #[test]
    fn hybrid_layer_round_trips() {
        let layer = trained_looking_layer(Precision::Double);
        let mut buf = Vec::new();
        write_hybrid_layer(&mut buf, &layer).unwrap();
        assert_eq!(read_hybrid_layer(&buf[..]).unwrap(), layer);
    }

    #[test]
    fn single_precision_payload_is_four_bytes() {
        let t = Rng::new(1).normal_tensor([3, 5], 1.0).with_precision(Precision::Single);
        let (mut a, mut b) = (Vec::new(), Vec::new());
        write_frames(&mut a, std::slice::from_ref(&t)).unwrap();
        write_frames(&mut b, &[t.clone().with_precision(Precision::Double)]).unwrap();
        assert_eq!(b.len() - a.len(), 15 * 4);
        assert_eq!(read_frames(&a[..]).unwrap(), vec![t]);
    }

    #[test]
    fn corrupt_blobs_are_rejected() {
        let mut buf = Vec::new();
        write_frames(&mut buf, &[Tensor::zeros([2, 2])]).unwrap();
        assert!(read_frames(&buf[..buf.len() - 1]).is_err());
        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(read_frames(&bad_magic[..]).is_err());
        let mut bad_version = buf.clone();
        bad_version[8] = 9;
        assert!(read_frames(&bad_version[..]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_frames(&extra[..]).is_err());
        assert!(read_hybrid_layer(&buf[..]).is_err());
    }
}
