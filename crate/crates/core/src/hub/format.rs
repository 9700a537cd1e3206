//! `.moma` module file format. All integers little-endian.
//!
//! ```text
//! magic        4 bytes  "MOMA"
//! version      u16      FORMAT_VERSION
//! kind         u8       0 = full, 1 = adapter
//! fingerprint  32 bytes encoder config + flattening order hash
//! metadata     u32 pair count, then per pair: u32 key len, key bytes,
//!              u32 value len, value bytes (UTF-8)
//! params       u64 count, then count × f64
//! head         u64 width (0 = no head), then width × f64 weights and one
//!              f64 bias when width > 0
//! checksum     u32 CRC32 of every preceding byte
//! ```
//!
//! Metadata keys written: `id`, `task_name`, `created_from_seed`,
//! `train_mae`, `notes`, `config` (the encoder config as JSON).

use std::collections::BTreeMap;

use crate::encoder::{EncoderConfig, Fingerprint, Head, Module, ModuleKind, ModuleMeta};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MOMA";
pub const FORMAT_VERSION: u16 = 1;

pub fn encode(module: &Module, head: Option<&Head>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(64 + 8 * module.params().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(match module.kind() {
        ModuleKind::Full => 0,
        ModuleKind::Adapter => 1,
    });
    out.extend_from_slice(&module.fingerprint().0);

    let meta = &module.meta;
    let pairs = [
        ("id", meta.id.clone()),
        ("task_name", meta.task_name.clone()),
        ("created_from_seed", meta.created_from_seed.to_string()),
        ("train_mae", format!("{:?}", meta.train_mae)),
        ("notes", meta.notes.clone()),
        ("config", serde_json::to_string(module.config())?),
    ];
    out.extend_from_slice(&(pairs.len() as u32).to_le_bytes());
    for (k, v) in &pairs {
        put_str(&mut out, k);
        put_str(&mut out, v);
    }

    out.extend_from_slice(&(module.params().len() as u64).to_le_bytes());
    for p in module.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }

    match head {
        None => out.extend_from_slice(&0u64.to_le_bytes()),
        Some(h) => {
            if h.weights.is_empty() {
                return Err(Error::InvalidModule("head has no weights".into()));
            }
            out.extend_from_slice(&(h.weights.len() as u64).to_le_bytes());
            for w in &h.weights {
                out.extend_from_slice(&w.to_le_bytes());
            }
            out.extend_from_slice(&h.bias.to_le_bytes());
        }
    }

    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Corrupt("metadata is not UTF-8".into()))
    }

    fn f64s(&mut self, count: u64) -> Result<Vec<f64>> {
        let count = usize::try_from(count).map_err(|_| Error::Corrupt("count overflow".into()))?;
        let bytes = self.take(count.checked_mul(8).ok_or_else(|| Error::Corrupt("count overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<(Module, Option<Head>)> {
    if bytes.len() < 4 + 2 + 1 + 32 + 4 {
        return Err(Error::Corrupt("file too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::Corrupt("checksum mismatch".into()));
    }

    let mut cur = Cursor { bytes: body, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Corrupt("bad magic".into()));
    }
    let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Corrupt(format!("unsupported format version {version}")));
    }
    let kind = match cur.take(1)?[0] {
        0 => ModuleKind::Full,
        1 => ModuleKind::Adapter,
        k => return Err(Error::Corrupt(format!("unknown module kind byte {k}"))),
    };
    let fingerprint = Fingerprint(cur.take(32)?.try_into().unwrap());

    let mut meta: BTreeMap<String, String> = BTreeMap::new();
    for _ in 0..cur.u32()? {
        let k = cur.string()?;
        let v = cur.string()?;
        meta.insert(k, v);
    }
    let field = |key: &str| -> Result<&String> {
        meta.get(key)
            .ok_or_else(|| Error::Corrupt(format!("missing metadata key `{key}`")))
    };
    let config: EncoderConfig = serde_json::from_str(field("config")?)
        .map_err(|e| Error::Corrupt(format!("config: {e}")))?;
    let module_meta = ModuleMeta {
        id: field("id")?.clone(),
        task_name: field("task_name")?.clone(),
        created_from_seed: field("created_from_seed")?
            .parse()
            .map_err(|_| Error::Corrupt("created_from_seed".into()))?,
        train_mae: field("train_mae")?
            .parse()
            .map_err(|_| Error::Corrupt("train_mae".into()))?,
        notes: field("notes")?.clone(),
    };

    let n_params = cur.u64()?;
    let params = cur.f64s(n_params)?;
    let head_width = cur.u64()?;
    let head = if head_width == 0 {
        None
    } else {
        let weights = cur.f64s(head_width)?;
        Some(Head {
            weights,
            bias: cur.f64()?,
        })
    };
    if cur.pos != body.len() {
        return Err(Error::Corrupt("trailing bytes before checksum".into()));
    }

    let module = Module::new(kind, config, params, module_meta)
        .map_err(|e| Error::Corrupt(format!("inconsistent module: {e}")))?;
    if module.fingerprint() != fingerprint {
        return Err(Error::Corrupt("fingerprint does not match stored config".into()));
    }
    if let Some(h) = &head {
        if h.weights.len() != module.config().embed_dim {
            return Err(Error::Corrupt("head width does not match embed_dim".into()));
        }
    }
    Ok((module, head))
}
