//! Versioned little-endian binary checkpoints.
//!
//! Layout (all integers `u64` unless noted, floats as raw `f64` bits):
//!
//! ```text
//! magic  b"FHCK"      version u32
//! round  gamma(f64)   learnable u8
//! param vector "model"
//! flag u8, then param vector "classifier" if the flag is 1
//! queue length, then that many param vectors, most recent first
//! prototype count, then per class: class, count, dim, coords
//! ```
//!
//! A param vector is `sample_count`, the number of segments and, per
//! segment, the name (length + UTF-8), the rank, the dims and the values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::hypgeom::Curvature;
use crate::model::ParamVector;
use crate::prototype::{Geometry, PrototypeSet};

pub const MAGIC: &[u8; 4] = b"FHCK";
pub const VERSION: u32 = 2;

/// Global model plus what a client needs to join a round.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub round: usize,
    pub model: ParamVector,
    pub classifier: Option<ParamVector>,
    /// Server model queue, most recent first. Empty means "seed it with `model`".
    pub queue: Vec<ParamVector>,
    pub protos: PrototypeSet,
    pub gamma: Curvature,
}

struct Enc(Vec<u8>);

impl Enc {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn params(&mut self, p: &ParamVector) {
        self.u64(p.sample_count);
        self.u64(p.segments().len() as u64);
        for seg in p.segments() {
            self.str(&seg.name);
            self.u64(seg.shape.len() as u64);
            for &d in &seg.shape {
                self.u64(d as u64);
            }
            for &v in &seg.data {
                self.f64(v);
            }
        }
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Dec<'_> {
    fn bad(detail: impl Into<String>) -> Error {
        Error::Format {
            what: "checkpoint",
            detail: detail.into(),
        }
    }
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Self::bad("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        let v = usize::try_from(v).map_err(|_| Self::bad("length overflow"))?;
        if v > self.buf.len() {
            return Err(Self::bad(format!("implausible length {v}")));
        }
        Ok(v)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Self::bad("segment name is not UTF-8"))
    }
    fn params(&mut self) -> Result<ParamVector> {
        let mut p = ParamVector::new();
        p.sample_count = self.u64()?;
        let n = self.len()?;
        for _ in 0..n {
            let name = self.str()?;
            let rank = self.len()?;
            let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
            let size = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let size = size.filter(|&s| s <= self.buf.len()).ok_or_else(|| Self::bad("segment too large"))?;
            let data = (0..size).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
            p.push(name, shape, data)?;
        }
        Ok(p)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Enc(Vec::new());
        e.0.extend_from_slice(MAGIC);
        e.0.extend_from_slice(&VERSION.to_le_bytes());
        e.u64(self.round as u64);
        e.f64(self.gamma.gamma());
        e.0.push(self.gamma.is_learnable() as u8);
        e.params(&self.model);
        match &self.classifier {
            Some(c) => {
                e.0.push(1);
                e.params(c);
            }
            None => e.0.push(0),
        }
        e.u64(self.queue.len() as u64);
        for m in &self.queue {
            e.params(m);
        }
        e.u64(self.protos.len() as u64);
        for (class, coords) in self.protos.iter() {
            e.u64(class as u64);
            e.u64(self.protos.count(class));
            e.u64(coords.len() as u64);
            for &v in coords {
                e.f64(v);
            }
        }
        e.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
        let mut d = Dec { buf, pos: 0 };
        if d.take(4)? != MAGIC {
            return Err(Dec::bad("bad magic"));
        }
        let version = u32::from_le_bytes(d.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Dec::bad(format!("unsupported version {version}")));
        }
        let round = d.len()?;
        let g = d.f64()?;
        let learnable = d.u8()? == 1;
        let gamma = Curvature::new(g).map_err(|e| Dec::bad(e.to_string()))?.with_learnable(learnable);
        let model = d.params()?;
        let classifier = match d.u8()? {
            0 => None,
            1 => Some(d.params()?),
            f => return Err(Dec::bad(format!("bad classifier flag {f}"))),
        };
        let queue = (0..d.len()?).map(|_| d.params()).collect::<Result<Vec<_>>>()?;
        if queue.iter().any(|m| !m.same_layout(&model)) {
            return Err(Dec::bad("queued model does not match the model layout"));
        }
        let mut protos = PrototypeSet::new();
        for _ in 0..d.len()? {
            let class = d.len()?;
            let count = d.u64()?;
            let dim = d.len()?;
            let coords = (0..dim).map(|_| d.f64()).collect::<Result<Vec<_>>>()?;
            // stored prototypes are already in-ball; the Euclidean insert keeps the bits untouched
            protos.insert(class, coords, Geometry::Euclidean, gamma);
            protos.set_count(class, count);
        }
        if d.pos != buf.len() {
            return Err(Dec::bad("trailing bytes"));
        }
        protos.round = round;
        Ok(Checkpoint {
            round,
            model,
            classifier,
            queue,
            protos,
            gamma,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&buf)
    }
}
