//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! container:  "ATLS" | version u32 | layer_count u32 | record*
//! record:     tag u8 | body
//!   tag 0  digital linear   rows u32 | cols u32 | weights f32* | bias f32*
//!   tag 1  analog linear    rows u32 | cols u32 | out_scale f64 | tile | bias f32*
//!   tag 2  activation       kind u8 (0 relu, 1 tanh)
//!   tag 3  attention        heads u32 | seq u32 | sublinear*4 (q,k,v,proj)
//!   tag 4  softmax head     sublinear
//!   tag 5  mean pool        groups u32
//! sublinear:  analog u8 | rows u32 | cols u32 | (weights f32* | out_scale f64 tile) | bias f32*
//! tile:       "ATLSTILE" | rows u32 | cols u32 | weights f32*
//! ```
//!
//! Weights are stored as f32: compact, and more precision than any modeled
//! device justifies. Tile blocks hold device-unit values (what physically
//! sits on the crossbar); the record's f64 `out_scale` restores the digital
//! output factor exactly. Loading an analog record samples a fresh tile from
//! the caller's device config and programs the stored weights onto it, i.e.
//! the checkpoint redeploys onto new hardware; values outside a sampled
//! element's bounds clip. A second save-load cycle is byte-stable.

use std::path::Path;

use crate::error::{AtlsError, Result};
use crate::matrix::Matrix;
use crate::network::{ActKind, AttentionBlock, Backing, Layer, LinearLayer, ModelGraph};
use crate::rng::derive_key;
use crate::tile::{AnalogTile, TileConfig};

const MAGIC: &[u8; 4] = b"ATLS";
const TILE_MAGIC: &[u8; 8] = b"ATLSTILE";
const VERSION: u32 = 1;

pub fn save_model(model: &ModelGraph, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, VERSION);
    push_u32(&mut out, model.layers().len() as u32);
    for layer in model.layers() {
        match layer {
            Layer::Linear(l) => {
                out.push(if l.is_analog() { 1 } else { 0 });
                push_linear_body(&mut out, l);
            }
            Layer::Activation(a) => {
                out.push(2);
                out.push(match a {
                    ActKind::Relu => 0,
                    ActKind::Tanh => 1,
                });
            }
            Layer::Attention(b) => {
                out.push(3);
                push_u32(&mut out, b.head_count() as u32);
                push_u32(&mut out, b.seq_len() as u32);
                for sub in b.projections() {
                    out.push(if sub.is_analog() { 1 } else { 0 });
                    push_linear_body(&mut out, sub);
                }
            }
            Layer::SoftmaxHead(l) => {
                out.push(4);
                out.push(if l.is_analog() { 1 } else { 0 });
                push_linear_body(&mut out, l);
            }
            Layer::MeanPool { groups } => {
                out.push(5);
                push_u32(&mut out, *groups as u32);
            }
        }
    }
    std::fs::write(path, &out).map_err(|e| AtlsError::io(path.display().to_string(), e))
}

/// Rebuild a model from a checkpoint. Analog records sample a fresh tile
/// from `tile_cfg` (seeded per layer from `seed`) and program the stored
/// weights onto it.
pub fn load_model(path: &Path, tile_cfg: &TileConfig, seed: u64) -> Result<ModelGraph> {
    let buf = std::fs::read(path).map_err(|e| AtlsError::io(path.display().to_string(), e))?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path: path.display().to_string(),
    };
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(AtlsError::invalid(format!(
            "{}: unsupported checkpoint version {version} (expected {VERSION})",
            r.path
        )));
    }
    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count);
    for idx in 0..count {
        let tag = r.u8()?;
        let layer = match tag {
            0 | 1 => {
                let l = read_linear_body(&mut r, tag == 1, tile_cfg, derive_key(&[seed, idx as u64, 0]))?;
                Layer::Linear(l)
            }
            2 => {
                let kind = match r.u8()? {
                    0 => ActKind::Relu,
                    1 => ActKind::Tanh,
                    k => {
                        return Err(AtlsError::invalid(format!(
                            "{}: unknown activation kind {k}",
                            r.path
                        )))
                    }
                };
                Layer::Activation(kind)
            }
            3 => {
                let heads = r.u32()? as usize;
                let seq = r.u32()? as usize;
                let mut subs = Vec::with_capacity(4);
                for slot in 0..4u64 {
                    let analog = r.u8()? == 1;
                    subs.push(read_linear_body(
                        &mut r,
                        analog,
                        tile_cfg,
                        derive_key(&[seed, idx as u64, slot]),
                    )?);
                }
                let proj = subs.pop().expect("four sublinears");
                let v = subs.pop().expect("four sublinears");
                let k = subs.pop().expect("four sublinears");
                let q = subs.pop().expect("four sublinears");
                Layer::Attention(AttentionBlock::new(q, k, v, proj, heads, seq)?)
            }
            4 => {
                let analog = r.u8()? == 1;
                let l = read_linear_body(&mut r, analog, tile_cfg, derive_key(&[seed, idx as u64, 0]))?;
                Layer::SoftmaxHead(l)
            }
            5 => Layer::MeanPool {
                groups: r.u32()? as usize,
            },
            t => {
                return Err(AtlsError::invalid(format!(
                    "{}: unknown layer tag {t}",
                    r.path
                )))
            }
        };
        layers.push(layer);
    }
    if r.pos != buf.len() {
        return Err(AtlsError::invalid(format!(
            "{}: {} trailing bytes after the last layer",
            r.path,
            buf.len() - r.pos
        )));
    }
    ModelGraph::new(layers)
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_weights(out: &mut Vec<u8>, w: &Matrix) {
    for &v in w.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn push_linear_body(out: &mut Vec<u8>, l: &LinearLayer) {
    match l.backing() {
        Backing::Digital(w) => {
            push_u32(out, w.rows() as u32);
            push_u32(out, w.cols() as u32);
            push_weights(out, w);
        }
        Backing::Analog(t) => {
            let w = t.clean_weights();
            push_u32(out, w.rows() as u32);
            push_u32(out, w.cols() as u32);
            out.extend_from_slice(&l.out_scale().to_le_bytes());
            out.extend_from_slice(TILE_MAGIC);
            push_u32(out, w.rows() as u32);
            push_u32(out, w.cols() as u32);
            push_weights(out, &w);
        }
    }
    for &b in l.bias() {
        out.extend_from_slice(&(b as f32).to_le_bytes());
    }
}

fn read_linear_body(
    r: &mut Reader,
    analog: bool,
    tile_cfg: &TileConfig,
    tile_seed: u64,
) -> Result<LinearLayer> {
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    if rows == 0 || cols == 0 {
        return Err(AtlsError::invalid(format!(
            "{}: zero-sized linear layer {rows}x{cols}",
            r.path
        )));
    }
    let (weights, out_scale) = if analog {
        let scale = r.f64()?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(AtlsError::invalid(format!(
                "{}: analog output scale must be positive, got {scale}",
                r.path
            )));
        }
        r.magic(TILE_MAGIC)?;
        let trows = r.u32()? as usize;
        let tcols = r.u32()? as usize;
        if (trows, tcols) != (rows, cols) {
            return Err(AtlsError::invalid(format!(
                "{}: tile block is {trows}x{tcols}, layer is {rows}x{cols}",
                r.path
            )));
        }
        (r.weights(rows, cols)?, scale)
    } else {
        (r.weights(rows, cols)?, 1.0)
    };
    let mut bias = Vec::with_capacity(rows);
    for _ in 0..rows {
        bias.push(r.f32()? as f64);
    }
    if analog {
        let mut tile = AnalogTile::sample(tile_cfg, rows, cols, tile_seed)?;
        tile.program_weights(&weights, 0.0)?;
        let mut l = LinearLayer::analog(tile, bias)?;
        l.set_out_scale(out_scale);
        Ok(l)
    } else {
        Ok(LinearLayer::digital(weights, bias))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(AtlsError::invalid(format!(
                "{}: truncated at byte {} (wanted {n} more)",
                self.path, self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expect: &[u8]) -> Result<()> {
        let pos = self.pos;
        let got = self.take(expect.len())?;
        if got != expect {
            return Err(AtlsError::invalid(format!(
                "{}: bad magic at byte {pos}; not a checkpoint of this format",
                self.path
            )));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("take returned 8 bytes")))
    }

    fn weights(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.set(i, j, self.f32()? as f64);
            }
        }
        Ok(m)
    }
}
