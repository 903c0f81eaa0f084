//! Binary training checkpoints.
//!
//! Little-endian layout: magic `MALC`, version `u32`, config length `u32` and
//! that many bytes of JSON, step `u64`, entry count `u32`, then per entry a
//! name (`u32` length + UTF-8), rank `u32`, `rank` dims `u32` and the values as
//! binary64. Optimizer moments are stored as `adam.m.<param>` / `adam.v.<param>`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::config::RunConfig;
use crate::datagen::ConceptVocabulary;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Adam, ParamStore, Tensor};
use crate::scalar::Scalar;
use crate::train::Trainer;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MALC";
pub const CHECKPOINT_VERSION: u32 = 1;

const FIRST_PREFIX: &str = "adam.m.";
const SECOND_PREFIX: &str = "adam.v.";

/// Everything needed to resume training or run evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub config: RunConfig,
    pub step: u64,
    pub params: ParamStore<S>,
    /// Adam moments aligned with `params`.
    pub first: Vec<Tensor<S>>,
    pub second: Vec<Tensor<S>>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn capture(config: &RunConfig, trainer: &Trainer<'_, S>) -> Self {
        Self {
            config: config.clone(),
            step: trainer.adam.step_count(),
            params: trainer.model.params().clone(),
            first: trainer.adam.first_moments().to_vec(),
            second: trainer.adam.second_moments().to_vec(),
        }
    }

    pub fn model(&self) -> Result<Model<S>> {
        Model::from_params(self.config.model(), self.params.clone())
    }

    /// Rebuilds a trainer positioned at the saved step.
    pub fn into_trainer<'v>(self, config: &RunConfig, vocab: &'v ConceptVocabulary<S>) -> Result<Trainer<'v, S>> {
        config.check_resume(&self.config)?;
        let model = self.model()?;
        let mut trainer = Trainer::new(model, config.adam(), vocab, config.schedule())?;
        trainer.adam = Adam::from_parts(config.adam(), self.step, self.first, self.second)?;
        Ok(trainer)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config).expect("plain data serializes");
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&self.step.to_le_bytes());
        let count = self.params.len() * 3;
        out.extend_from_slice(&(count as u32).to_le_bytes());
        let mut entry = |name: &str, t: &Tensor<S>| {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.as_f64().to_le_bytes());
            }
        };
        for (name, t) in self.params.iter() {
            entry(name, t);
        }
        for (slot, m) in self.first.iter().enumerate() {
            entry(&format!("{FIRST_PREFIX}{}", self.params.name(slot)), m);
        }
        for (slot, v) in self.second.iter().enumerate() {
            entry(&format!("{SECOND_PREFIX}{}", self.params.name(slot)), v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Magic {
                path: path.to_path_buf(),
                expected: CHECKPOINT_MAGIC,
                found: magic.try_into().expect("4 bytes"),
            });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let cfg_len = r.u32("config length")? as usize;
        let config: RunConfig = serde_json::from_slice(r.take(cfg_len, "config")?)?;
        let step = r.u64("step")?;
        let count = r.u32("entry count")? as usize;
        let mut params = ParamStore::new();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|e| r.truncated(format!("entry name is not UTF-8: {e}")))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dims")? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 8, "payload")?;
            let data = raw
                .chunks_exact(8)
                .map(|b| S::of(f64::from_le_bytes(b.try_into().expect("8-byte chunk"))))
                .collect();
            let tensor = Tensor::new(shape, data)?;
            if let Some(p) = name.strip_prefix(FIRST_PREFIX) {
                first.push((p.to_string(), tensor));
            } else if let Some(p) = name.strip_prefix(SECOND_PREFIX) {
                second.push((p.to_string(), tensor));
            } else {
                params.insert(name, tensor.with_grad(true))?;
            }
        }
        if r.pos != bytes.len() {
            return Err(r.truncated(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let align = |list: Vec<(String, Tensor<S>)>, what: &str| -> Result<Vec<Tensor<S>>> {
            if list.len() != params.len() {
                return Err(Error::Config(format!("{what}: {} buffers for {} parameters", list.len(), params.len())));
            }
            list.into_iter()
                .enumerate()
                .map(|(slot, (name, t))| {
                    if name != params.name(slot) {
                        return Err(Error::Config(format!("{what}: buffer {name} out of order")));
                    }
                    Ok(t)
                })
                .collect()
        };
        let first = align(first, "first moments")?;
        let second = align(second, "second moments")?;
        Ok(Self {
            config,
            step,
            params,
            first,
            second,
        })
    }

    /// Writes to a sibling temp file and renames it over `path`, so an
    /// interrupted write never clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn truncated(&self, detail: String) -> Error {
        Error::Truncated {
            path: self.path.to_path_buf(),
            detail,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.truncated(format!("{what} at byte {} needs {n} bytes", self.pos)));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::AdamConfig;

    fn trained() -> (RunConfig, ConceptVocabulary<f64>, Checkpoint<f64>) {
        let config = RunConfig {
            feature_dim: 8,
            model_dim: 8,
            heads: 2,
            head_dim: 4,
            num_queries: 4,
            te_rows: 8,
            ffn_hidden: 16,
            enc_layers: 1,
            dec_layers: 1,
            ..RunConfig::default()
        };
        let vocab = ConceptVocabulary::generate(4, 8, 0).unwrap();
        let model = Model::new(config.model(), 1).unwrap();
        let mut trainer = Trainer::new(model, AdamConfig::default(), &vocab, config.schedule()).unwrap();
        // give the moments non-trivial contents
        let grads: Vec<_> = trainer
            .model
            .params()
            .iter()
            .map(|(_, t)| Some(t.map(|x| 0.1 * x + 0.01)))
            .collect();
        trainer.adam.step(trainer.model.params_mut(), &grads).unwrap();
        let ck = Checkpoint::capture(&config, &trainer);
        (config, vocab.clone(), ck)
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let (_, _, ck) = trained();
        let back = Checkpoint::<f64>::from_bytes(&ck.to_bytes(), Path::new("x")).unwrap();
        assert_eq!(back, ck);
        for ((_, a), (_, b)) in back.params.iter().zip(ck.params.iter()) {
            let bits = |t: &Tensor<f64>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.step, 1);
    }

    #[test]
    fn save_and_load_through_a_file() {
        let (config, vocab, ck) = trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.malc");
        ck.save(&path).unwrap();
        let back = Checkpoint::<f64>::load(&path).unwrap();
        assert_eq!(back, ck);
        let trainer = back.into_trainer(&config, &vocab).unwrap();
        assert_eq!(trainer.step_count(), 1);
        assert_eq!(trainer.model.params(), &ck.params);
    }

    #[test]
    fn damaged_files_give_distinct_errors() {
        let (_, _, ck) = trained();
        let good = ck.to_bytes();
        let p = Path::new("ck");
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::<f64>::from_bytes(&bad, p), Err(Error::Magic { .. })));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::<f64>::from_bytes(&bad, p), Err(Error::Version { .. })));
        let cut = &good[..good.len() - 3];
        assert!(matches!(Checkpoint::<f64>::from_bytes(cut, p), Err(Error::Truncated { .. })));
    }

    #[test]
    fn resume_with_changed_config_fails() {
        let (mut config, vocab, ck) = trained();
        config.seed += 1;
        let err = ck.into_trainer(&config, &vocab).unwrap_err();
        assert_eq!(err.category(), "config");
    }
}
