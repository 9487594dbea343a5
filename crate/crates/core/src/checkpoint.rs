//! Binary checkpoints: versioned header, config echo, named float64 blobs.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "ORCHCKPT" | version u32 | config_len u64 | config JSON
//! seed u64 | step u64 | n_params u32
//! n_params × ( name_len u32 | name | ndim u32 | dims u64… | data f64… )
//! ```

use std::path::Path;

use crate::autodiff::Tensor;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;

pub const MAGIC: &[u8; 8] = b"ORCHCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// RNG stream state: every stream is a pure function of `(seed, step)`.
    pub seed: u64,
    pub step: u64,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(config: &RunConfig, model: &Model, step: usize) -> Self {
        Self {
            config: config.clone(),
            seed: config.seed,
            step: step as u64,
            params: model
                .named_params()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = serde_json::to_string(&self.config).expect("config serializes");
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(fail(0, "bad magic"));
        }
        let at = r.pos;
        let version = r.u32()?;
        if version != VERSION {
            return Err(fail(at, format!("unsupported version {version}")));
        }
        let len = r.len_u64()?;
        let at = r.pos;
        let text = std::str::from_utf8(r.take(len)?).map_err(|e| fail(at, format!("config echo: {e}")))?;
        let config = RunConfig::from_json(text).map_err(|e| fail(at, format!("config echo: {e}")))?;
        let seed = r.u64()?;
        let step = r.u64()?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = r.u32()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| fail(at, format!("parameter name: {e}")))?
                .to_string();
            let ndim = r.u32()? as usize;
            let at = r.pos;
            let shape = (0..ndim).map(|_| r.len_u64()).collect::<Result<Vec<_>>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|c| c.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| fail(at, format!("shape {shape:?} of {name} exceeds the file")))?;
            let data = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| fail(at, format!("{name}: {e}")))?;
            params.push((name, t));
        }
        if r.remaining() != 0 {
            return Err(fail(r.pos, format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self {
            config,
            seed,
            step,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model described by the config echo and fills in every tensor.
    pub fn to_model(&self) -> Result<Model> {
        let spec = self.config.model_spec();
        let base: Vec<Tensor> = (0..spec.depth)
            .map(|l| {
                let name = format!("layer{l}.w0");
                self.params
                    .iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, t)| t.clone())
                    .ok_or_else(|| Error::Format {
                        offset: 0,
                        msg: format!("checkpoint lacks {name}"),
                    })
            })
            .collect::<Result<_>>()?;
        let mut model = Model::init(spec, &base, self.seed)?;
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        if names.len() != self.params.len() {
            return Err(Error::Format {
                offset: 0,
                msg: format!("expected {} tensors, found {}", names.len(), self.params.len()),
            });
        }
        for ((slot, name), (stored_name, stored)) in model.tensors_mut().into_iter().zip(&names).zip(&self.params) {
            if name != stored_name || slot.shape() != stored.shape() {
                return Err(Error::Format {
                    offset: 0,
                    msg: format!("expected {name} {:?}, found {stored_name} {:?}", slot.shape(), stored.shape()),
                });
            }
            *slot = stored.clone();
        }
        Ok(model)
    }
}

fn fail(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset,
        msg: msg.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if n > self.remaining() {
            return Err(fail(self.pos, format!("needed {n} bytes, {} left", self.remaining())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len_u64(&mut self) -> Result<usize> {
        let at = self.pos;
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| fail(at, format!("length {v} exceeds the file")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::suite::generate_suite;

    fn small() -> (RunConfig, Model) {
        let mut c = RunConfig::desk_default();
        c.model.d = 8;
        c.router.rank = 2;
        let suite = generate_suite(c.suite_params()).unwrap();
        let m = Model::init(c.model_spec(), &suite.base, 5).unwrap();
        (c, m)
    }

    #[test]
    fn bytes_round_trip() {
        let (c, m) = small();
        let ck = Checkpoint::from_model(&c, &m, 17);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_model().unwrap(), m);
    }

    #[test]
    fn corruption_reports_offset() {
        let (c, m) = small();
        let mut bytes = Checkpoint::from_model(&c, &m, 0).to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
        let full = Checkpoint::from_model(&c, &m, 0).to_bytes();
        let cut = &full[..full.len() - 3];
        match Checkpoint::from_bytes(cut) {
            Err(Error::Format { offset, .. }) => assert!(offset > 8 && offset < full.len()),
            other => panic!("{other:?}"),
        }
        let mut v = full.clone();
        v[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&v), Err(Error::Format { offset: 8, .. })));
    }
}
