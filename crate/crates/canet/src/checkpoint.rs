//! Binary checkpoint format.
//!
//! Layout, all little-endian:
//!   magic "CANT", version u16, iteration u64,
//!   config echo: u32 length + UTF-8 bytes,
//!   parameters: u32 count, then per record
//!     name (u32 length + bytes), shape (4 x u32), flags u8
//!     (bit 0 trainable, bit 1 weight-decay exempt), values (numel x f64),
//!   momentum buffers: u32 count, same record layout without flags.
//!
//! Records follow graph insertion order, so save -> load -> save is
//! byte-identical.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::optim::SgdOptimizer;
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 4] = b"CANT";
const VERSION: u16 = 1;

#[derive(Debug)]
pub struct Checkpoint {
    pub iteration: u64,
    pub config_text: String,
    pub params: Vec<ParamRecord>,
    pub momentum: Vec<BufferRecord>,
}

#[derive(Debug)]
pub struct ParamRecord {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    pub weight_decay_exempt: bool,
}

#[derive(Debug)]
pub struct BufferRecord {
    pub name: String,
    pub value: Tensor,
}

impl Checkpoint {
    pub fn capture(graph: &ModelGraph, optimizer: Option<&SgdOptimizer>, iteration: u64, config_text: &str) -> Self {
        let params = graph
            .iter()
            .map(|(_, p)| ParamRecord {
                name: p.name.clone(),
                value: p.value.clone(),
                trainable: p.trainable,
                weight_decay_exempt: p.weight_decay_exempt,
            })
            .collect();
        let momentum = match optimizer {
            Some(opt) => graph
                .iter()
                .filter_map(|(id, p)| {
                    opt.velocity_of(id).map(|v| BufferRecord { name: p.name.clone(), value: v.clone() })
                })
                .collect(),
            None => Vec::new(),
        };
        Checkpoint { iteration, config_text: config_text.to_string(), params, momentum }
    }

    /// Writes parameter values (and momentum, when an optimizer is given)
    /// into an already-built graph. Every record must match an existing
    /// parameter in name and shape.
    pub fn restore(&self, graph: &mut ModelGraph, optimizer: Option<&mut SgdOptimizer>) -> Result<()> {
        for rec in &self.params {
            let id = graph.lookup(&rec.name).ok_or_else(|| {
                Error::invalid("checkpoint", format!("parameter {} not present in the model", rec.name))
            })?;
            let p = graph.get_mut(id);
            if p.value.shape() != rec.value.shape() {
                return Err(Error::shape(
                    "checkpoint",
                    format!("{}: stored {} vs model {}", rec.name, rec.value.shape(), p.value.shape()),
                ));
            }
            p.value = rec.value.clone();
        }
        if let Some(opt) = optimizer {
            for rec in &self.momentum {
                let id = graph.lookup(&rec.name).ok_or_else(|| {
                    Error::invalid("checkpoint", format!("momentum buffer {} has no parameter", rec.name))
                })?;
                opt.set_velocity(id, rec.value.clone());
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        write_str(&mut out, &self.config_text);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for rec in &self.params {
            write_str(&mut out, &rec.name);
            write_shape(&mut out, rec.value.shape());
            let flags = (rec.trainable as u8) | ((rec.weight_decay_exempt as u8) << 1);
            out.push(flags);
            write_values(&mut out, &rec.value);
        }
        out.extend_from_slice(&(self.momentum.len() as u32).to_le_bytes());
        for rec in &self.momentum {
            write_str(&mut out, &rec.name);
            write_shape(&mut out, rec.value.shape());
            write_values(&mut out, &rec.value);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(r.err("bad magic, not a checkpoint file"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(r.err(format!("unsupported checkpoint version {version}")));
        }
        let iteration = r.u64()?;
        let config_text = r.string()?;
        let n_params = r.u32()? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name = r.string()?;
            let shape = r.shape()?;
            let flags = r.u8()?;
            let value = r.values(shape)?;
            params.push(ParamRecord {
                name,
                value,
                trainable: flags & 1 != 0,
                weight_decay_exempt: flags & 2 != 0,
            });
        }
        let n_momentum = r.u32()? as usize;
        let mut momentum = Vec::with_capacity(n_momentum);
        for _ in 0..n_momentum {
            let name = r.string()?;
            let shape = r.shape()?;
            momentum.push(BufferRecord { name, value: r.values(shape)? });
        }
        Ok(Checkpoint { iteration, config_text, params, momentum })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn write_shape(out: &mut Vec<u8>, s: Shape) {
    for d in [s.n, s.c, s.h, s.w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

fn write_values(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { offset: self.pos, msg: msg.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err(format!(
                "truncated checkpoint: wanted {n} bytes, {} remain",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.err("invalid UTF-8 string"))
    }

    fn shape(&mut self) -> Result<Shape> {
        let n = self.u32()? as usize;
        let c = self.u32()? as usize;
        let h = self.u32()? as usize;
        let w = self.u32()? as usize;
        Ok(Shape::new(n, c, h, w))
    }

    fn values(&mut self, shape: Shape) -> Result<Tensor> {
        let n = shape.numel();
        let bytes = self.take(n * 8)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Tensor::from_vec(shape, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ModelGraph;

    fn sample_graph() -> ModelGraph {
        let mut g = ModelGraph::new();
        g.add("a.weight", Tensor::from_vec(Shape::new(2, 1, 1, 1), vec![1.5, -0.25]), true, false);
        g.add("a.norm.scale", Tensor::scalar(1.0), true, true);
        g.add("a.norm.running_mean", Tensor::scalar(0.125), false, true);
        g
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let g = sample_graph();
        let opt = SgdOptimizer::new(&g, 0.9, 1e-4);
        let ckpt = Checkpoint::capture(&g, Some(&opt), 42, "total_iters = 42\n");
        let bytes = ckpt.encode();
        let loaded = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(loaded.encode(), bytes);
        assert_eq!(loaded.iteration, 42);
        assert_eq!(loaded.config_text, "total_iters = 42\n");
    }

    #[test]
    fn restore_puts_values_back() {
        let g = sample_graph();
        let ckpt = Checkpoint::capture(&g, None, 7, "");
        let mut g2 = sample_graph();
        let id = g2.lookup("a.weight").unwrap();
        g2.get_mut(id).value = Tensor::from_vec(Shape::new(2, 1, 1, 1), vec![9.0, 9.0]);
        ckpt.restore(&mut g2, None).unwrap();
        assert_eq!(g2.get(id).value.data(), &[1.5, -0.25]);
    }

    #[test]
    fn decode_rejects_garbage() {
        assert!(Checkpoint::decode(b"NOPE").is_err());
        let g = sample_graph();
        let mut bytes = Checkpoint::capture(&g, None, 0, "").encode();
        bytes.truncate(bytes.len() - 3);
        let err = Checkpoint::decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn restore_rejects_shape_mismatch() {
        let g = sample_graph();
        let ckpt = Checkpoint::capture(&g, None, 0, "");
        let mut g2 = ModelGraph::new();
        g2.add("a.weight", Tensor::scalar(0.0), true, false);
        g2.add("a.norm.scale", Tensor::scalar(1.0), true, true);
        g2.add("a.norm.running_mean", Tensor::scalar(0.0), false, true);
        assert!(ckpt.restore(&mut g2, None).is_err());
    }
}
