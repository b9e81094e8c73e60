//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CGAN"  u32 version  u64 step
//! u32 n   n × (u16 len, name, u64 value)        random-state block
//! records: u16 len, name, u8 rank, rank × u32 dim, f32 payload
//! u32 CRC-32 of every preceding byte
//! ```
//!
//! The random-state block holds the run seed and both optimizer step
//! counters; every random stream is keyed by `(seed, step)`, so nothing else
//! is needed to resume. Records hold `gen/…` and `disc/…` parameters and the
//! optimizer moments as `opt_g.m/<name>`, `opt_g.v/<name>`, `opt_d.m/…`,
//! `opt_d.v/…`.

use std::fs;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::ndtensor::{ParamStore, Shape, Tensor4};

use super::adam::AdamState;
use super::step::Models;

pub const MAGIC: &[u8; 4] = b"CGAN";
pub const VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub seed: u64,
    pub models: Models,
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    let len = u16::try_from(name.len()).expect("parameter names are short");
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor4) {
    put_name(out, name);
    out.push(4);
    for d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_adam(out: &mut Vec<u8>, prefix: &str, state: &AdamState) {
    for (n, m) in state.names().iter().zip(state.first_moments()) {
        put_tensor(out, &format!("{prefix}.m/{n}"), m);
    }
    for (n, v) in state.names().iter().zip(state.second_moments()) {
        put_tensor(out, &format!("{prefix}.v/{n}"), v);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn name(&mut self) -> Result<String, CheckpointError> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| CheckpointError::Malformed("name is not UTF-8".into()))
    }

    fn tensor(&mut self) -> Result<Tensor4, CheckpointError> {
        let rank = self.u8()?;
        if rank != 4 {
            return Err(CheckpointError::Malformed(format!("rank {rank}, expected 4")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = self.u32()? as usize;
        }
        let shape = Shape::from_dims(dims);
        let bytes = shape.len().checked_mul(4).ok_or(CheckpointError::Truncated)?;
        let data = self
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Tensor4::from_vec(shape, data).expect("length matches shape"))
    }
}

fn adam_from(
    records: &mut Vec<(String, Tensor4)>,
    prefix: &str,
    store: &ParamStore,
    t: u64,
) -> Result<AdamState, CheckpointError> {
    let mut take = |kind: &str, name: &str| {
        let key = format!("{prefix}.{kind}/{name}");
        let i = records
            .iter()
            .position(|(n, _)| *n == key)
            .ok_or_else(|| CheckpointError::Malformed(format!("missing record `{key}`")))?;
        Ok::<_, CheckpointError>(records.swap_remove(i).1)
    };
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let m = names.iter().map(|n| take("m", n)).collect::<Result<Vec<_>, _>>()?;
    let v = names.iter().map(|n| take("v", n)).collect::<Result<Vec<_>, _>>()?;
    let state = AdamState::from_parts(names, m, v, t).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    if !state.matches(store) {
        return Err(CheckpointError::Malformed(format!(
            "{prefix} moments do not match parameter shapes"
        )));
    }
    Ok(state)
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let m = &self.models;
        let state = [
            ("seed", self.seed),
            ("adam_g.t", m.adam_g.t()),
            ("adam_d.t", m.adam_d.t()),
        ];
        out.extend_from_slice(&(state.len() as u32).to_le_bytes());
        for (name, v) in state {
            put_name(&mut out, name);
            out.extend_from_slice(&v.to_le_bytes());
        }
        for store in [&m.generator, &m.discriminator] {
            for p in store.iter() {
                put_tensor(&mut out, p.name(), p.value());
            }
        }
        put_adam(&mut out, "opt_g", &m.adam_g);
        put_adam(&mut out, "opt_d", &m.adam_d);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses a checkpoint, returning nothing unless every check passes.
    ///
    /// Files too short for a header are `Truncated`; otherwise the magic, the
    /// checksum and the version are checked in that order, so a damaged byte
    /// anywhere past the magic surfaces as `Checksum`.
    pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        if bytes.len() < HEADER + 4 + 4 {
            return Err(CheckpointError::Truncated);
        }
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion {
                found: version,
                supported: VERSION,
            });
        }
        let step = r.u64()?;
        let mut state = Vec::new();
        for _ in 0..r.u32()? {
            state.push((r.name()?, r.u64()?));
        }
        let entry = |key: &str| {
            state
                .iter()
                .find(|(n, _)| n == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| CheckpointError::Malformed(format!("missing state entry `{key}`")))
        };
        let (seed, tg, td) = (entry("seed")?, entry("adam_g.t")?, entry("adam_d.t")?);

        let (mut generator, mut discriminator) = (ParamStore::new(), ParamStore::new());
        let mut moments = Vec::new();
        while r.pos < body.len() {
            let name = r.name()?;
            let t = r.tensor()?;
            let target = if name.starts_with("gen/") {
                &mut generator
            } else if name.starts_with("disc/") {
                &mut discriminator
            } else if name.starts_with("opt_g.") || name.starts_with("opt_d.") {
                moments.push((name, t));
                continue;
            } else {
                return Err(CheckpointError::Malformed(format!("unexpected record `{name}`")));
            };
            target
                .insert(name, t)
                .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        }
        let adam_g = adam_from(&mut moments, "opt_g", &generator, tg)?;
        let adam_d = adam_from(&mut moments, "opt_d", &discriminator, td)?;
        if let Some((n, _)) = moments.first() {
            return Err(CheckpointError::Malformed(format!("unexpected record `{n}`")));
        }
        Ok(Checkpoint {
            step,
            seed,
            models: Models {
                generator,
                discriminator,
                adam_g,
                adam_d,
            },
        })
    }

    /// Writes via a sibling temporary file and a rename, so a crash never
    /// leaves a half-written checkpoint under `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes).map_err(|kind| Error::Checkpoint {
            path: path.into(),
            kind,
        })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    checkpoint.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::KeyedRng;
    use crate::trainer::{init_models, TrainConfig};

    fn sample() -> Checkpoint {
        let cfg = TrainConfig::desk(16);
        let mut models = init_models(&cfg, &KeyedRng::new(9)).unwrap();
        // Non-trivial moments and counters.
        for i in 0..models.generator.len() {
            models
                .generator
                .grad_mut(i)
                .data_mut()
                .iter_mut()
                .for_each(|g| *g = 0.25);
        }
        super::super::adam::adam_step(&mut models.generator, &mut models.adam_g, &cfg.adam()).unwrap();
        Checkpoint {
            step: 17,
            seed: 9,
            models,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let bytes = c.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode(), bytes);
        assert_eq!(back.models.adam_g.t(), 1);
        assert_eq!(&bytes[..4], b"CGAN");
    }

    #[test]
    fn distinct_failures() {
        let bytes = sample().encode();
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 0x10;
        assert!(matches!(
            Checkpoint::decode(&flipped),
            Err(CheckpointError::Checksum { .. })
        ));

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert_eq!(Checkpoint::decode(&magic), Err(CheckpointError::BadMagic));

        assert_eq!(Checkpoint::decode(&bytes[..10]), Err(CheckpointError::Truncated));
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 100]).is_err());

        // An intact file written by a different format version.
        let mut old = bytes[..bytes.len() - 4].to_vec();
        old[4..8].copy_from_slice(&0u32.to_le_bytes());
        let crc = crc32fast::hash(&old);
        old.extend_from_slice(&crc.to_le_bytes());
        assert_eq!(
            Checkpoint::decode(&old),
            Err(CheckpointError::UnsupportedVersion { found: 0, supported: 1 })
        );
    }
}
