//! Versioned little-endian binary container:
//!
//! ```text
//! magic "MERCCKPT" | version u32
//! config text (u64 length + UTF-8)
//! shape: dim_t, dim_a, dim_v, classes, speakers (u64 each)
//! step u64 | rng seed [u8; 32] | rng stream u64 | rng word position u128
//! tensor count u64, then per tensor: name (u64 length + UTF-8),
//!   rank u64, dims u64 × rank, values f64 × product(dims)
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::data::ModalityDims;
use crate::error::{Error, Result};
use crate::math::{ParamStore, Tensor};
use crate::model::{Model, ModelShape};

const MAGIC: &[u8; 8] = b"MERCCKPT";
const VERSION: u32 = 1;

/// Seed, stream and word position of the run generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub shape: ModelShape,
    pub step: u64,
    pub rng: RngState,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn of(model: &Model, step: u64, rng: &ChaCha8Rng) -> Self {
        Self {
            config: model.config.clone(),
            shape: model.shape,
            step,
            rng: RngState::capture(rng),
            params: model.params.clone(),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        Model::from_parts(self.config, self.shape, self.params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.config.to_text());
        let d = self.shape.dims;
        for v in [d.text, d.audio, d.visual, self.shape.num_classes, self.shape.num_speakers] {
            put_u64(&mut out, v as u64);
        }
        put_u64(&mut out, self.step);
        out.extend_from_slice(&self.rng.seed);
        put_u64(&mut out, self.rng.stream);
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        put_u64(&mut out, self.params.len() as u64);
        for (name, t) in self.params.iter() {
            put_str(&mut out, name);
            put_u64(&mut out, t.shape().len() as u64);
            for &s in t.shape() {
                put_u64(&mut out, s as u64);
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config = Config::parse(&r.string()?)?;
        let text = r.usize()?;
        let audio = r.usize()?;
        let visual = r.usize()?;
        let shape = ModelShape {
            dims: ModalityDims::new(text, audio, visual),
            num_classes: r.usize()?,
            num_speakers: r.usize()?,
        };
        let step = r.u64()?;
        let rng = RngState {
            seed: r.array()?,
            stream: r.u64()?,
            word_pos: u128::from_le_bytes(r.array()?),
        };
        let count = r.usize()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.usize()?;
            let dims = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let len = dims
                .iter()
                .try_fold(1usize, |a, &b| a.checked_mul(b))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
            if len.checked_mul(8).is_none_or(|b| b > r.remaining()) {
                return Err(Error::Checkpoint(format!("tensor {name} is truncated")));
            }
            let data = (0..len)
                .map(|_| Ok(f64::from_le_bytes(r.array()?)))
                .collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(dims, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            if params.get(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
            params.insert(name, t);
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self {
            config,
            shape,
            step,
            rng,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint(format!("unexpected end of file at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N)?);
        Ok(a)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} does not fit in usize")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.usize()?;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("a.w", Tensor::from_rows(&[&[1.5, -0.0], &[f64::MIN_POSITIVE, 3.0]]));
        params.insert("a.b", Tensor::from_rows(&[&[0.1, 0.2]]));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(1);
        let _: u64 = rng.random();
        Checkpoint {
            config: Config::default(),
            shape: ModelShape {
                dims: ModalityDims::new(4, 3, 2),
                num_classes: 4,
                num_speakers: 2,
            },
            step: 17,
            rng: RngState::capture(&rng),
            params,
        }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rng_state_resumes_the_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let _: [u64; 3] = rng.random();
        let state = RngState::capture(&rng);
        let a: u64 = rng.random();
        let b: u64 = state.restore().random();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}
