//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "MMERCKPT" | u32 version | u32 len + config JSON | 32-byte SHA-256 of the JSON
//! u64 epoch | rng: 32-byte seed, u64 stream, u128 word position | u64 Adam step
//! u32 tensor count, then per tensor:
//!   u32 len + name | u32 rank | u64 extents | f32 values | f32 first moments | f32 second moments
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{build_params, Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 8] = b"MMERCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub train_config: TrainConfig,
    pub model: Model,
    pub optimizer: AdamState,
    pub epoch: usize,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigBlock {
    train: TrainConfig,
    model: ModelConfig,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("extent overflows".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = serde_json::to_vec(&ConfigBlock {
            train: self.train_config.clone(),
            model: self.model.config.clone(),
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, config.len() as u32);
        out.extend_from_slice(&config);
        out.extend_from_slice(&Sha256::digest(&config));
        put_u64(&mut out, self.epoch as u64);
        out.extend_from_slice(&self.rng.seed);
        put_u64(&mut out, self.rng.stream);
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        put_u64(&mut out, self.optimizer.step);
        put_u32(&mut out, self.model.params.len() as u32);
        for (idx, (name, t)) in self.model.params.iter().enumerate() {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len() as u32);
            for &e in t.shape() {
                put_u64(&mut out, e as u64);
            }
            put_f32s(&mut out, t.data());
            put_f32s(&mut out, &self.optimizer.m[idx]);
            put_f32s(&mut out, &self.optimizer.v[idx]);
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let config = r.take(len)?;
        let digest: [u8; 32] = r.array()?;
        if Sha256::digest(config)[..] != digest[..] {
            return Err(Error::Format("config digest mismatch".into()));
        }
        let block: ConfigBlock = serde_json::from_slice(config)?;
        let epoch = r.len()?;
        let rng = RngState { seed: r.array()?, stream: r.u64()?, word_pos: u128::from_le_bytes(r.array()?) };
        let step = r.u64()?;

        // expected layout, used to reject files that disagree with their config
        let template = build_params::<f32>(&block.model, 0)?;
        let count = r.u32()? as usize;
        if count != template.len() {
            return Err(Error::Format(format!("{count} tensors, config implies {}", template.len())));
        }
        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
        for (expected_name, expected) in template.iter() {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            if name != expected_name || shape != expected.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} {shape:?}, expected {expected_name} {:?}",
                    expected.shape()
                )));
            }
            let n = expected.len();
            params.insert(name, Tensor::new(shape, r.f32s(n)?)?)?;
            m.push(r.f32s(n)?);
            v.push(r.f32s(n)?);
        }
        if r.pos != buf.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            train_config: block.train,
            model: Model { config: block.model, params },
            optimizer: AdamState { step, m, v },
            epoch,
            rng,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use rand::{RngCore, SeedableRng};

    use super::*;
    use crate::model::ModelConfig;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig::small([5, 4, 3], 3, 2, 8);
        let model = Model::new(cfg, 7).unwrap();
        let mut optimizer = AdamState::new(&model.params);
        optimizer.step = 3;
        optimizer.m[0][0] = 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        rng.set_stream(1);
        rng.next_u64();
        Checkpoint {
            train_config: TrainConfig { d: 8, lr: 3.0e-3, ..Default::default() },
            model,
            optimizer,
            epoch: 4,
            rng: RngState::capture(&rng),
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.optimizer, c.optimizer);
        assert_eq!(back.train_config, c.train_config);
        assert_eq!(back.epoch, 4);
    }

    #[test]
    fn rng_resumes_in_place() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rng.set_stream(1);
        rng.next_u64();
        let state = RngState::capture(&rng);
        let expected = rng.next_u64();
        assert_eq!(state.restore().next_u64(), expected);
    }

    #[test]
    fn corruption_detected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[20] ^= 1; // inside the config JSON
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}
