//! Binary checkpoint format.
//!
//! ```text
//! magic        b"RDN1"
//! version      u32 LE
//! metadata     u32 LE byte length + UTF-8 `key = value` text
//! parameters   u32 LE count, then one record per parameter
//! optimizer    u8 present flag; if 1: u32 LE count, then an `adam.m.<name>`
//!              and an `adam.v.<name>` record per parameter
//!
//! record       u32 LE name length, name bytes, u8 dtype (1 = f32),
//!              u8 rank, rank x u32 LE dims, little-endian f32 values
//! ```

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::adam::{AdamState, Moments};
use super::TrainConfig;
use crate::config::{write_kv, KvDoc};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, RdnModel};
use crate::tensor::{Shape, Tensor4};

pub const MAGIC: &[u8; 4] = b"RDN1";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    pub params: Vec<(String, Tensor4)>,
    pub adam: Option<AdamState>,
    pub epoch: u64,
    pub iteration: u64,
    pub rng: Option<RngState>,
    pub running_loss: f64,
    pub best_val_psnr: Option<f64>,
}

impl Checkpoint {
    /// A weights-only checkpoint.
    pub fn from_model(model: &RdnModel) -> Self {
        Checkpoint {
            model_config: *model.config(),
            train_config: None,
            params: model
                .named_params()
                .into_iter()
                .map(|(n, t)| (n, t.detached()))
                .collect(),
            adam: None,
            epoch: 0,
            iteration: 0,
            rng: None,
            running_loss: 0.0,
            best_val_psnr: None,
        }
    }

    /// Rebuilds the model; the stored names must be exactly the canonical
    /// set for the stored configuration, with matching shapes.
    pub fn to_model(&self) -> Result<RdnModel> {
        let mut model = RdnModel::zeros(self.model_config)?;
        let mut slots = model.named_params_mut();
        if slots.len() != self.params.len() {
            let expected: Vec<&str> = slots.iter().map(|(n, _)| n.as_str()).collect();
            let missing: Vec<&str> = expected
                .iter()
                .copied()
                .filter(|n| !self.params.iter().any(|(p, _)| p == n))
                .collect();
            let unknown: Vec<&str> = self
                .params
                .iter()
                .map(|(n, _)| n.as_str())
                .filter(|n| !expected.contains(n))
                .collect();
            return Err(Error::Checkpoint(format!(
                "parameter set mismatch; missing {missing:?}, unknown {unknown:?}"
            )));
        }
        for ((want, slot), (name, t)) in slots.iter_mut().zip(&self.params) {
            if want != name {
                return Err(Error::Checkpoint(format!("unexpected parameter `{name}` where `{want}` belongs")));
            }
            if slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {}, expected {}",
                    t.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        Ok(model)
    }

    fn metadata(&self) -> String {
        let mut kv = Vec::new();
        self.model_config.write_kv("model.", &mut kv);
        if let Some(tc) = &self.train_config {
            tc.write_kv("train.", &mut kv);
            tc.degradation.write_kv("degrade.", &mut kv);
        }
        kv.push(("progress.epoch".into(), self.epoch.to_string()));
        kv.push(("progress.iteration".into(), self.iteration.to_string()));
        kv.push(("progress.running_loss".into(), self.running_loss.to_string()));
        if let Some(best) = self.best_val_psnr {
            kv.push(("progress.best_val_psnr".into(), best.to_string()));
        }
        if let Some(rng) = &self.rng {
            let hex: String = rng.seed.iter().map(|b| format!("{b:02x}")).collect();
            kv.push(("rng.seed".into(), hex));
            kv.push(("rng.stream".into(), rng.stream.to_string()));
            kv.push(("rng.word_pos".into(), rng.word_pos.to_string()));
        }
        if let Some(adam) = &self.adam {
            kv.push(("adam.beta1".into(), adam.beta1.to_string()));
            kv.push(("adam.beta2".into(), adam.beta2.to_string()));
            kv.push(("adam.eps".into(), adam.eps.to_string()));
            kv.push(("adam.step".into(), adam.step.to_string()));
        }
        write_kv(&kv)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = self.metadata();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            write_record(&mut out, name, &t.shape().dims(), t.data());
        }
        match &self.adam {
            None => out.push(0),
            Some(adam) => {
                out.push(1);
                out.extend_from_slice(&(adam.moments.len() as u32).to_le_bytes());
                for ((name, t), mom) in self.params.iter().zip(&adam.moments) {
                    let dims = t.shape().dims();
                    write_record(&mut out, &format!("adam.m.{name}"), &dims, &mom.m);
                    write_record(&mut out, &format!("adam.v.{name}"), &dims, &mom.v);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let doc = KvDoc::parse(meta).map_err(|e| Error::Checkpoint(e.join("; ")))?;

        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let (name, shape, data) = r.record()?;
            params.push((name, Tensor4::from_vec(shape, data)?));
        }

        let mut ckpt = Checkpoint::parse_metadata(&doc, params)?;
        match r.u8()? {
            0 => {}
            1 => {
                let count = r.u32()? as usize;
                if count != ckpt.params.len() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer has {count} entries for {} parameters",
                        ckpt.params.len()
                    )));
                }
                let mut moments = Vec::with_capacity(count);
                for (name, t) in &ckpt.params {
                    let mut read = |kind: &str| -> Result<Vec<f32>> {
                        let (rn, shape, data) = r.record()?;
                        if rn != format!("adam.{kind}.{name}") || shape != t.shape() {
                            return Err(Error::Checkpoint(format!(
                                "optimizer record `{rn}` does not match parameter `{name}`"
                            )));
                        }
                        Ok(data)
                    };
                    let m = read("m")?;
                    let v = read("v")?;
                    moments.push(Moments { m, v });
                }
                let adam = ckpt.adam.as_mut().ok_or_else(|| {
                    Error::Checkpoint("optimizer records without optimizer metadata".into())
                })?;
                adam.moments = moments;
            }
            flag => return Err(Error::Checkpoint(format!("bad optimizer flag {flag}"))),
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        // Name validation against the canonical schema.
        ckpt.to_model()?;
        Ok(ckpt)
    }

    fn parse_metadata(doc: &KvDoc, params: Vec<(String, Tensor4)>) -> Result<Self> {
        let mut r = doc.reader();
        let mut model_config = ModelConfig::default();
        model_config.read_kv("model.", &mut r);
        let train_config = if doc.get("train.batch").is_some() {
            let mut tc = TrainConfig::default();
            tc.read_kv("train.", &mut r);
            tc.degradation.read_kv("degrade.", &mut r);
            Some(tc)
        } else {
            None
        };
        let (mut epoch, mut iteration, mut running_loss) = (0u64, 0u64, 0f64);
        let mut best_val_psnr = None;
        r.read("progress.epoch", &mut epoch);
        r.read("progress.iteration", &mut iteration);
        r.read("progress.running_loss", &mut running_loss);
        r.read_opt("progress.best_val_psnr", &mut best_val_psnr);

        let rng = match doc.get("rng.seed") {
            None => None,
            Some(hex) => {
                let mut seed_hex = String::new();
                r.read("rng.seed", &mut seed_hex);
                let mut seed = [0u8; 32];
                let ok = hex.len() == 64
                    && seed.iter_mut().enumerate().all(|(i, b)| {
                        u8::from_str_radix(&hex[2 * i..2 * i + 2], 16)
                            .map(|v| *b = v)
                            .is_ok()
                    });
                if !ok {
                    r.error("rng.seed: expected 64 hex digits");
                }
                let (mut stream, mut word_pos) = (0u64, 0u128);
                r.read("rng.stream", &mut stream);
                r.read("rng.word_pos", &mut word_pos);
                Some(RngState { seed, stream, word_pos })
            }
        };
        let adam = if doc.get("adam.step").is_some() {
            let mut a = AdamState::new(std::iter::empty());
            r.read("adam.beta1", &mut a.beta1);
            r.read("adam.beta2", &mut a.beta2);
            r.read("adam.eps", &mut a.eps);
            r.read("adam.step", &mut a.step);
            Some(a)
        } else {
            None
        };
        let problems = r.finish();
        if !problems.is_empty() {
            return Err(Error::Checkpoint(problems.join("; ")));
        }
        Ok(Checkpoint {
            model_config,
            train_config,
            params,
            adam,
            epoch,
            iteration,
            rng,
            running_loss,
            best_val_psnr,
        })
    }

    /// Writes to a temporary sibling and renames it into place, so an
    /// existing file is only replaced by a complete one.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref())?;
        Self::from_bytes(&bytes)
    }
}

fn write_record(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F32);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn record(&mut self) -> Result<(String, Shape, Vec<f32>)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
        let dtype = self.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Checkpoint(format!("`{name}`: unsupported dtype tag {dtype}")));
        }
        let rank = self.u8()? as usize;
        if rank != 4 {
            return Err(Error::Checkpoint(format!("`{name}`: expected rank 4, got {rank}")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = self.u32()? as usize;
        }
        let shape = Shape::from(dims);
        let raw = self.take(shape.numel() * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((name, shape, data))
    }
}
