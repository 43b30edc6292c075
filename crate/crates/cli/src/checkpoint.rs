//! Binary checkpoints: `"MRFD"`, a little-endian `u32` version, then records of
//! `(u32 name length, name, u32 rank, u32 dims…, f32 data…)` until end of file.
//!
//! Besides `param.*` and `momentum.*` tensors, `meta.*` records carry the
//! experiment config text (one byte per value), the step and epoch counters
//! and the data-order RNG state (16-bit words), all exact in `f32`.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use mrfdet_core::net::build_network;
use mrfdet_core::Tensor;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::config::ExperimentConfig;
use crate::train::{Sgd, TrainState};

pub const MAGIC: &[u8; 4] = b"MRFD";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    /// Records in file order.
    pub records: Vec<(String, Tensor)>,
}

fn words16(mut v: u128, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let w = (v & 0xffff) as f64;
            v >>= 16;
            w
        })
        .collect()
}

fn from_words16(ws: &[f64]) -> Result<u128> {
    let mut v = 0u128;
    for &w in ws.iter().rev() {
        if !(0.0..65536.0).contains(&w) || w.fract() != 0.0 {
            bail!("corrupt counter word {w}");
        }
        v = (v << 16) | w as u128;
    }
    Ok(v)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| anyhow!("checkpoint truncated at byte {}", self.pos))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn take_like(map: &mut BTreeMap<String, Tensor>, key: String, like: &Tensor) -> Result<Tensor> {
    let t = map.remove(&key).ok_or_else(|| anyhow!("checkpoint lacks {key}"))?;
    if t.shape() != like.shape() {
        bail!("{key} has shape {:?}, this network expects {:?}", t.shape(), like.shape());
    }
    Ok(t)
}

fn vector(values: Vec<f64>) -> Tensor {
    let n = values.len();
    Tensor::new(vec![n], values).expect("rank-1 shape matches")
}

impl Checkpoint {
    pub fn from_state(state: &TrainState) -> Self {
        let mut records = Vec::new();
        let text = state.config.to_string();
        records.push(("meta.config".to_string(), vector(text.bytes().map(f64::from).collect())));
        records.push(("meta.step".to_string(), vector(words16(state.step as u128, 4))));
        records.push(("meta.epoch".to_string(), vector(words16(state.epoch as u128, 4))));
        let mut rng = state.rng.get_seed().iter().map(|&b| f64::from(b)).collect::<Vec<_>>();
        rng.extend(words16(state.rng.get_stream() as u128, 4));
        rng.extend(words16(state.rng.get_word_pos(), 8));
        records.push(("meta.rng".to_string(), vector(rng)));
        for c in state.net.convs() {
            records.push((format!("param.{}.weight", c.name), c.weight.clone()));
            records.push((format!("param.{}.bias", c.name), c.bias.clone()));
        }
        for (name, (w, b)) in &state.optimizer.velocity {
            records.push((format!("momentum.{name}.weight"), w.clone()));
            records.push((format!("momentum.{name}.bias"), b.clone()));
        }
        Self { version: VERSION, records }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&self.version.to_le_bytes());
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            bail!("not a checkpoint (bad magic)");
        }
        let version = r.u32()?;
        if version != VERSION {
            bail!("checkpoint format version {version}, this build reads version {VERSION}");
        }
        let mut records = Vec::new();
        while r.pos < bytes.len() {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).context("record name is not UTF-8")?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = dims.iter().product();
            let data = r
                .take(count * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            let t = Tensor::new(dims, data).map_err(|e| anyhow!("record {name}: {e}"))?;
            records.push((name, t));
        }
        Ok(Self { version, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write-then-rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()).with_context(|| format!("writing {}", tmp.display()))?;
        std::fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::decode(&bytes).with_context(|| format!("decoding {}", path.display()))
    }

    /// Rebuilds the training state, rejecting any mismatch between the stored
    /// tensors and the network the stored config describes.
    pub fn into_state(self) -> Result<TrainState> {
        let mut map: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, t) in self.records {
            if map.insert(name.clone(), t).is_some() {
                bail!("duplicate record {name}");
            }
        }
        let mut meta = |key: &str| map.remove(key).ok_or_else(|| anyhow!("missing record {key}"));
        let text: String = meta("meta.config")?.data().iter().map(|&b| b as u8 as char).collect();
        let config: ExperimentConfig = text.parse().context("stored config")?;
        let step = from_words16(meta("meta.step")?.data())? as u64;
        let epoch = from_words16(meta("meta.epoch")?.data())? as usize;
        let rng_rec = meta("meta.rng")?;
        let r = rng_rec.data();
        if r.len() != 44 {
            bail!("meta.rng holds {} values, expected 44", r.len());
        }
        let mut seed = [0u8; 32];
        for (s, &v) in seed.iter_mut().zip(&r[..32]) {
            *s = v as u8;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(from_words16(&r[32..36])? as u64);
        rng.set_word_pos(from_words16(&r[36..44])?);

        let mut net = build_network(&config.net(), 0).map_err(|e| anyhow!("stored config: {e}"))?;
        for c in net.convs_mut() {
            c.weight = take_like(&mut map, format!("param.{}.weight", c.name), &c.weight)?;
            c.bias = take_like(&mut map, format!("param.{}.bias", c.name), &c.bias)?;
        }
        let mut optimizer = Sgd::default();
        for c in net.convs() {
            let wk = format!("momentum.{}.weight", c.name);
            if map.contains_key(&wk) {
                let w = take_like(&mut map, wk, &c.weight)?;
                let b = take_like(&mut map, format!("momentum.{}.bias", c.name), &c.bias)?;
                optimizer.velocity.insert(c.name.clone(), (w, b));
            }
        }
        if let Some(extra) = map.keys().next() {
            bail!("checkpoint record {extra} does not belong to this network");
        }
        Ok(TrainState {
            config,
            net,
            optimizer,
            rng,
            step,
            epoch,
        })
    }
}

pub fn load_state(path: &Path) -> Result<TrainState> {
    Checkpoint::load(path)?.into_state().with_context(|| format!("in {}", path.display()))
}
