//! Binary model container.
//!
//! Layout, little-endian:
//!
//! ```text
//! magic      4 bytes  "TDPT"
//! version    u32      1
//! encoder    7 × u32  steps, bands, d_model, n_layers, n_heads, d_inner, input_hidden (0 = none)
//! heads      3 × u32  hidden, classes, has_domain_head
//! blocks     u32      block count
//! per block:
//!   name     u32 length, then UTF-8 bytes
//!   rank     u32
//!   dims     rank × u64
//!   data     f64 × product(dims)
//! ```
//!
//! Block names: `encoder/…`, `label/…`, `domain/…`, `norm/mean`,
//! `norm/std`, plus optional `optim/…` and `train/…` blocks that only
//! matter for resuming.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::dann::{DannParams, HeadConfig, HeadParams};
use crate::data::Normalizer;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::params::ParamTree;

pub const MAGIC: [u8; 4] = *b"TDPT";
pub const VERSION: u32 = 1;

/// Everything needed to run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub params: DannParams,
    pub normalizer: Normalizer,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        kind: "checkpoint",
        reason: reason.into(),
    }
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| bad(format!("{what} does not fit in u32")))
}

pub fn encode(model: &Model, extra: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let e = &model.encoder;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let ints = [
        e.steps,
        e.bands,
        e.d_model,
        e.n_layers,
        e.n_heads,
        e.d_inner,
        e.input_hidden.unwrap_or(0),
        model.head.hidden,
        model.head.classes,
        model.params.domain.is_some() as usize,
    ];
    for v in ints {
        out.extend_from_slice(&u32_of(v, "config value")?.to_le_bytes());
    }

    let mut blocks: Vec<(String, &Tensor)> = Vec::new();
    model.params.visit_blocks(&mut |n, t| blocks.push((n, t)));
    let mean = Tensor::vector(&model.normalizer.mean);
    let std = Tensor::vector(&model.normalizer.std);
    blocks.push(("norm/mean".into(), &mean));
    blocks.push(("norm/std".into(), &std));
    blocks.extend(extra.iter().map(|(n, t)| (n.clone(), t)));

    out.extend_from_slice(&u32_of(blocks.len(), "block count")?.to_le_bytes());
    for (name, t) in blocks {
        out.extend_from_slice(&u32_of(name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32_of(t.rank(), "rank")?.to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| bad(format!("truncated at byte {}", self.at)))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses a container into the model and the remaining (`optim/`,
/// `train/`) blocks.
pub fn decode(buf: &[u8]) -> Result<(Model, HashMap<String, Tensor>)> {
    let mut r = Reader { buf, at: 0 };
    if r.bytes(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut ints = [0usize; 10];
    for v in &mut ints {
        *v = r.u32()? as usize;
    }
    let encoder = EncoderConfig {
        steps: ints[0],
        bands: ints[1],
        d_model: ints[2],
        n_layers: ints[3],
        n_heads: ints[4],
        d_inner: ints[5],
        input_hidden: (ints[6] != 0).then_some(ints[6]),
    };
    encoder.validate()?;
    let head = HeadConfig {
        hidden: ints[7],
        classes: ints[8],
    };
    head.validate()?;

    let count = r.u32()?;
    let mut blocks = HashMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(len)?.to_vec()).map_err(|_| bad("block name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.bytes(n.checked_mul(8).ok_or_else(|| bad("block too large"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if blocks.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(bad(format!("duplicate block {name}")));
        }
    }
    if r.at != buf.len() {
        return Err(bad(format!("{} trailing bytes", buf.len() - r.at)));
    }

    let mut params = DannParams {
        encoder: EncoderParams::zeros(&encoder)?,
        label: zero_head(encoder.d_model, &head)?,
        domain: if ints[9] != 0 {
            Some(zero_head(encoder.d_model, &head.domain())?)
        } else {
            None
        },
    };
    let mut failure = None;
    params.visit_blocks_mut(&mut |name, t| {
        if failure.is_some() {
            return;
        }
        match blocks.remove(&name) {
            None => failure = Some(bad(format!("missing block {name}"))),
            Some(b) if b.shape() != t.shape() => {
                failure = Some(bad(format!("block {name} has shape {:?}, expected {:?}", b.shape(), t.shape())))
            }
            Some(b) => *t = b,
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let mut norm = |key: &str| -> Result<Vec<f64>> {
        let t = blocks.remove(key).ok_or_else(|| bad(format!("missing block {key}")))?;
        if t.len() != encoder.bands {
            return Err(bad(format!("{key} has {} values for {} bands", t.len(), encoder.bands)));
        }
        Ok(t.into_data())
    };
    let normalizer = Normalizer {
        mean: norm("norm/mean")?,
        std: norm("norm/std")?,
    };
    if let Some(k) = blocks.keys().find(|k| !(k.starts_with("optim/") || k.starts_with("train/"))) {
        return Err(bad(format!("unexpected block {k}")));
    }
    Ok((
        Model {
            encoder,
            head,
            params,
            normalizer,
        },
        blocks,
    ))
}

fn zero_head(d_model: usize, head: &HeadConfig) -> Result<HeadParams> {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut h = HeadParams::init(d_model, head, &mut rng)?;
    h.visit_named_mut("", &mut |_, t| t.data_mut().fill(0.0));
    Ok(h)
}

/// Writes atomically: a sibling temporary file is renamed over `path`.
pub fn save(path: impl AsRef<Path>, model: &Model, extra: &[(String, Tensor)]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(model, extra)?;
    let tmp = path.with_extension("tdpt.partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(Model, HashMap<String, Tensor>)> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}
