//! Versioned training checkpoint: config snapshot, epoch counter, every
//! parameter with its momentum buffer, batch-norm running statistics,
//! and the data-order RNG state, so a resumed run continues bit-exactly.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Model, Slot};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wire::{Reader, Writer};

pub const MAGIC: [u8; 4] = *b"ADCK";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_text: String,
    /// Number of completed epochs.
    pub epoch: usize,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    /// name -> (value, momentum), in stable visit order.
    pub params: BTreeMap<String, (Tensor, Tensor)>,
    pub buffers: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Capture the full training state.
    pub fn capture(config: &RunConfig, epoch: usize, model: &mut Model, rng: &ChaCha8Rng) -> Self {
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        model.visit(&mut |name, slot| match slot {
            Slot::Param(p) => {
                params.insert(name, (p.value.clone(), p.momentum.clone()));
            }
            Slot::Buffer(b) => {
                buffers.insert(name, b.clone());
            }
        });
        Checkpoint {
            config_text: config.snapshot(),
            epoch,
            rng_seed: rng.get_seed(),
            rng_word_pos: rng.get_word_pos(),
            params,
            buffers,
        }
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::from_str_cfg(&self.config_text)
    }

    pub fn rng(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }

    /// Write the saved state back into a freshly built model. Every slot
    /// must match by name and shape, in both directions.
    pub fn restore_into(&self, model: &mut Model) -> Result<()> {
        let mut missing: Vec<String> = Vec::new();
        let mut seen = 0usize;
        let mut fail: Option<Error> = None;
        model.visit(&mut |name, slot| {
            if fail.is_some() {
                return;
            }
            match slot {
                Slot::Param(p) => match self.params.get(&name) {
                    Some((v, m)) => {
                        seen += 1;
                        if v.shape() != p.value.shape() {
                            fail = Some(Error::shapes(p.value.shape(), v.shape(), name.clone()));
                            return;
                        }
                        p.value = v.clone();
                        p.momentum = m.clone();
                    }
                    None => missing.push(name),
                },
                Slot::Buffer(b) => match self.buffers.get(&name) {
                    Some(v) => {
                        if v.shape() != b.shape() {
                            fail = Some(Error::shapes(b.shape(), v.shape(), name.clone()));
                            return;
                        }
                        *b = v.clone();
                    }
                    None => missing.push(name),
                },
            }
        });
        if let Some(e) = fail {
            return Err(e);
        }
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "checkpoint is missing slots: {}",
                missing.join(", ")
            )));
        }
        if seen != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} parameters, model has {seen}",
                self.params.len()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.buf.extend_from_slice(&MAGIC);
        w.u16(VERSION);
        w.str(&self.config_text);
        w.u32(self.epoch as u32);
        w.buf.extend_from_slice(&self.rng_seed);
        w.u128(self.rng_word_pos);
        w.u32(self.params.len() as u32);
        for (name, (value, momentum)) in &self.params {
            w.str(name);
            write_tensor(&mut w, value);
            write_tensor(&mut w, momentum);
        }
        w.u32(self.buffers.len() as u32);
        for (name, value) in &self.buffers {
            w.str(name);
            write_tensor(&mut w, value);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader::new(bytes, "checkpoint");
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(r.err(format!("bad magic {magic:02x?}, expected {MAGIC:02x?}")));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(r.err(format!("unsupported version {version}")));
        }
        let config_text = r.str()?;
        let epoch = r.u32()? as usize;
        let rng_seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let rng_word_pos = r.u128()?;
        let mut params = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let value = read_tensor(&mut r)?;
            let momentum = read_tensor(&mut r)?;
            params.insert(name, (value, momentum));
        }
        let mut buffers = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            buffers.insert(name, read_tensor(&mut r)?);
        }
        if r.pos != bytes.len() {
            return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config_text, epoch, rng_seed, rng_word_pos, params, buffers })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}

fn write_tensor(w: &mut Writer, t: &Tensor) {
    w.u8(t.shape().len() as u8);
    for &d in t.shape() {
        w.usize32(d);
    }
    w.f32s(t.data());
}

fn read_tensor(r: &mut Reader) -> Result<Tensor> {
    let ndim = r.u8()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.usize32()?);
    }
    let data = r.f32s()?;
    if data.len() != shape.iter().product::<usize>() {
        return Err(r.err(format!("tensor data length {} does not match shape {shape:?}", data.len())));
    }
    Tensor::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::build_model;
    use rand::{Rng, SeedableRng};

    fn cfg() -> RunConfig {
        let mut c = RunConfig::default();
        c.set("arch", "smallcnn-adabin").unwrap();
        c.set("width", "0.25").unwrap();
        c
    }

    #[test]
    fn round_trip_preserves_everything() {
        let c = cfg();
        let mut model = build_model(&c.model_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let _: f64 = rng.random(); // advance the stream
        let ck = Checkpoint::capture(&c, 3, &mut model, &rng);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.epoch, 3);
        assert_eq!(back.config_text, ck.config_text);
        assert_eq!(back.rng_seed, ck.rng_seed);
        assert_eq!(back.rng_word_pos, ck.rng_word_pos);
        assert_eq!(back.params.len(), ck.params.len());
        for (name, (v, m)) in &ck.params {
            let (bv, bm) = &back.params[name];
            assert_eq!(v.data(), bv.data());
            assert_eq!(m.data(), bm.data());
        }
        // restored rng continues identically
        let mut a = ck.rng();
        let mut b = rng.clone();
        assert_eq!(a.random::<u64>(), b.random::<u64>());
    }

    #[test]
    fn restore_reproduces_forward_outputs() {
        let c = cfg();
        let mut model = build_model(&c.model_config()).unwrap();
        // perturb away from init so restore actually does something
        model.visit(&mut |_, slot| {
            if let Slot::Param(p) = slot {
                for v in p.value.data_mut() {
                    *v += 0.01;
                }
            }
        });
        let rng = ChaCha8Rng::seed_from_u64(0);
        let ck = Checkpoint::capture(&c, 1, &mut model, &rng);
        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[2, 3, 16, 16], 1.0, &mut rng2);
        let y1 = model.forward_logits(&x, false).unwrap();
        let mut fresh = build_model(&c.model_config()).unwrap();
        ck.restore_into(&mut fresh).unwrap();
        let y2 = fresh.forward_logits(&x, false).unwrap();
        assert_eq!(y1.data(), y2.data());
    }

    #[test]
    fn shape_mismatch_and_corruption_detected() {
        let c = cfg();
        let mut model = build_model(&c.model_config()).unwrap();
        let rng = ChaCha8Rng::seed_from_u64(0);
        let ck = Checkpoint::capture(&c, 0, &mut model, &rng);
        // different width -> shape mismatch on restore
        let mut other_cfg = cfg();
        other_cfg.set("width", "0.5").unwrap();
        let mut other = build_model(&other_cfg.model_config()).unwrap();
        assert!(ck.restore_into(&mut other).is_err());
        // corrupt byte -> format error with offset
        let mut bytes = ck.to_bytes();
        bytes[0] = b'Z';
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
