//! Binary dataset container and CSV interchange.
//!
//! Binary layout, all integers and floats little-endian:
//!
//! ```text
//! magic     4 bytes   "TDDS"
//! version   u32       1
//! t         u32
//! b         u32
//! k         u32       class count
//! domain    u32
//! count     u64       number of samples
//! then `count` times:
//!   id      u64
//!   class   i16       -1 = unlabeled
//!   values  t·b × f32 timestep-major
//! ```
//!
//! CSV rows are `id,domain,class,v0,…,v{t·b−1}` in the same value order, with
//! an optional header row whose first field is `id`. An empty class field or
//! `-1` marks an unlabeled sample.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Dataset, SequenceSample, UNLABELED};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"TDDS";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 32;

/// Bytes used by one sample of a `t×b` dataset.
pub fn sample_bytes(steps: usize, bands: usize) -> usize {
    8 + 2 + 4 * steps * bands
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        kind: "dataset",
        reason: reason.into(),
    }
}

pub fn encode(data: &Dataset) -> Result<Vec<u8>> {
    data.validate()?;
    let mut out = Vec::with_capacity(HEADER_BYTES + data.len() * sample_bytes(data.steps, data.bands));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [data.steps, data.bands, data.classes] {
        let v = u32::try_from(v).map_err(|_| bad("header value exceeds u32"))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&data.domain.to_le_bytes());
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for s in &data.samples {
        out.extend_from_slice(&s.id.to_le_bytes());
        let class = match s.class {
            Some(c) => i16::try_from(c).map_err(|_| bad("class id exceeds i16"))?,
            None => UNLABELED,
        };
        out.extend_from_slice(&class.to_le_bytes());
        for v in &s.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Option<[u8; N]> {
        let bytes = self.buf.get(self.at..self.at + N)?;
        self.at += N;
        bytes.try_into().ok()
    }
}

pub fn decode(buf: &[u8]) -> Result<Dataset> {
    let mut r = Reader { buf, at: 0 };
    let magic: [u8; 4] = r.take().ok_or_else(|| bad("file shorter than header"))?;
    if magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let mut u32_field = |name: &str| -> Result<u32> {
        r.take()
            .map(u32::from_le_bytes)
            .ok_or_else(|| bad(format!("file shorter than header ({name})")))
    };
    let version = u32_field("version")?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let steps = u32_field("t")? as usize;
    let bands = u32_field("b")? as usize;
    let classes = u32_field("k")? as usize;
    let domain = u32_field("domain")?;
    let count = r
        .take()
        .map(u64::from_le_bytes)
        .ok_or_else(|| bad("file shorter than header (count)"))?;
    if steps == 0 || bands == 0 {
        return Err(bad(format!("t={steps} b={bands} must both be positive")));
    }

    let per = sample_bytes(steps, bands);
    let body = buf.len() - HEADER_BYTES;
    let present = body / per;
    if present as u64 != count || !body.is_multiple_of(per) {
        return Err(bad(format!(
            "count mismatch: header declares {count} samples, file holds {} bytes ({present} whole samples)",
            body
        )));
    }

    let mut data = Dataset::new(steps, bands, classes, domain);
    data.samples.reserve(present);
    for _ in 0..present {
        let id = u64::from_le_bytes(r.take().expect("sized"));
        let class = i16::from_le_bytes(r.take().expect("sized"));
        let class = match class {
            UNLABELED => None,
            c if c >= 0 => Some(c as usize),
            c => {
                return Err(Error::Sample {
                    sample: id,
                    field: "class",
                    reason: format!("negative class {c}"),
                })
            }
        };
        let values = (0..steps * bands)
            .map(|_| f32::from_le_bytes(r.take().expect("sized")))
            .collect();
        data.samples.push(SequenceSample {
            id,
            domain,
            class,
            values,
        });
    }
    data.validate()?;
    Ok(data)
}

pub fn save(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(data)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}

/// Loads either format; CSV files need `t`, `b` and `k` from elsewhere.
pub fn load_with_shape(path: impl AsRef<Path>, steps: usize, bands: usize, classes: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        load_csv(path, steps, bands, classes)
    } else {
        load(path)
    }
}

pub fn save_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    data.validate()?;
    let mut out = String::from("id,domain,class");
    for k in 0..data.steps * data.bands {
        out.push_str(&format!(",v{k}"));
    }
    out.push('\n');
    for s in &data.samples {
        let class = s.class.map_or(UNLABELED as i64, |c| c as i64);
        out.push_str(&format!("{},{},{}", s.id, s.domain, class));
        for v in &s.values {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_csv(path: impl AsRef<Path>, steps: usize, bands: usize, classes: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let csv_err = |line: usize, reason: String| Error::Format {
        kind: "csv dataset",
        reason: format!("line {line}: {reason}"),
    };
    let width = steps * bands;
    let mut data: Option<Dataset> = None;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (ln == 0 && line.starts_with("id")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 + width {
            return Err(csv_err(ln + 1, format!("expected {} fields, found {}", 3 + width, fields.len())));
        }
        let id: u64 = fields[0]
            .parse()
            .map_err(|_| csv_err(ln + 1, format!("bad id {:?}", fields[0])))?;
        let domain: u32 = fields[1].parse().map_err(|_| Error::Sample {
            sample: id,
            field: "domain",
            reason: format!("unparseable {:?}", fields[1]),
        })?;
        let class = match fields[2] {
            "" | "-1" => None,
            c => Some(c.parse::<usize>().map_err(|_| Error::Sample {
                sample: id,
                field: "class",
                reason: format!("unparseable {c:?}"),
            })?),
        };
        let values = fields[3..]
            .iter()
            .map(|v| {
                v.parse::<f32>().map_err(|_| Error::Sample {
                    sample: id,
                    field: "values",
                    reason: format!("unparseable {v:?}"),
                })
            })
            .collect::<Result<Vec<f32>>>()?;
        let d = data.get_or_insert_with(|| Dataset::new(steps, bands, classes, domain));
        d.samples.push(SequenceSample {
            id,
            domain,
            class,
            values,
        });
    }
    let data = data.unwrap_or_else(|| Dataset::new(steps, bands, classes, 0));
    data.validate()?;
    Ok(data)
}
