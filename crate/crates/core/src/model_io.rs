//! Binary model files: config echo, input signature, parameter tensors and
//! (optionally) the normalisation statistics the model was trained with.
//!
//! Loading rebuilds the architecture from the embedded config and then
//! overwrites every parameter value, so a loaded model is structurally
//! identical to the saved one.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::{model_config_from_kv, model_config_to_kv, KvConfig};
use crate::data::NormalizationStats;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::params::ParamId;

const MAGIC: &[u8; 8] = b"STMPO01\n";

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    put_u32(out, bytes.len() as u32);
    out.extend_from_slice(bytes);
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Config("model file truncated".into()));
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
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

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

/// Serialise `model` (and optionally its fitted normaliser) to `path`.
pub fn save_model(model: &Model, stats: Option<&NormalizationStats>, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let config_text = model_config_to_kv(model.config()).to_text();
    put_bytes(&mut out, config_text.as_bytes());
    let (t, c) = model.input_signature();
    put_u32(&mut out, t as u32);
    put_u32(&mut out, c as u32);
    put_u32(&mut out, model.n_classes() as u32);
    put_u64(&mut out, model.seed());

    put_u32(&mut out, model.params().len() as u32);
    for (_, p) in model.params().iter() {
        put_bytes(&mut out, p.name.as_bytes());
        out.push(u8::from(p.trainable));
        put_u32(&mut out, p.value.rank() as u32);
        for &d in p.value.shape() {
            put_u64(&mut out, d as u64);
        }
        for &v in p.value.data() {
            put_f64(&mut out, v);
        }
    }

    match stats {
        None => out.push(0),
        Some(s) => {
            out.push(1);
            put_u32(&mut out, s.timesteps() as u32);
            put_u32(&mut out, s.channels() as u32);
            put_f64(&mut out, s.low_percentile);
            put_f64(&mut out, s.high_percentile);
            for t in 0..s.timesteps() {
                for c in 0..s.channels() {
                    put_f64(&mut out, s.low(t, c));
                    put_f64(&mut out, s.high(t, c));
                }
            }
        }
    }

    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// Load a model file written by [`save_model`].
pub fn load_model(path: &Path) -> Result<(Model, Option<NormalizationStats>)> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    let mut rd = Reader { data: &data, pos: 0 };
    if rd.take(MAGIC.len())? != MAGIC {
        return Err(Error::Config(format!(
            "{} is not a model file",
            path.display()
        )));
    }
    let config_text = String::from_utf8(rd.bytes()?.to_vec())
        .map_err(|_| Error::Config("model file config block is not UTF-8".into()))?;
    let config = model_config_from_kv(&KvConfig::parse(&config_text)?)?;
    let t = rd.u32()? as usize;
    let c = rd.u32()? as usize;
    let n = rd.u32()? as usize;
    let seed = rd.u64()?;

    let mut model = Model::build(&config, t, c, n, seed)?;
    let count = rd.u32()? as usize;
    if count != model.params().len() {
        return Err(Error::Config(format!(
            "model file holds {count} parameters, architecture expects {}",
            model.params().len()
        )));
    }
    for i in 0..count {
        let name = String::from_utf8(rd.bytes()?.to_vec())
            .map_err(|_| Error::Config("parameter name is not UTF-8".into()))?;
        let _trainable = rd.take(1)?[0];
        let rank = rd.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(rd.u64()? as usize);
        }
        let id = ParamId(i);
        {
            let p = model.params().get(id);
            if p.name != name || p.value.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {i} mismatch: file has '{name}' {shape:?}, architecture has '{}' {:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        let numel: usize = shape.iter().product();
        let values = model.params_mut().value_mut(id).data_mut();
        for j in 0..numel {
            values[j] = rd.f64()?;
        }
    }

    let stats = match rd.take(1)?[0] {
        0 => None,
        _ => {
            let st = rd.u32()? as usize;
            let sc = rd.u32()? as usize;
            let low_p = rd.f64()?;
            let high_p = rd.f64()?;
            let mut low = Vec::with_capacity(st * sc);
            let mut high = Vec::with_capacity(st * sc);
            for _ in 0..st * sc {
                low.push(rd.f64()?);
                high.push(rd.f64()?);
            }
            Some(NormalizationStats::from_parts(st, sc, low, high, low_p, high_p))
        }
    };
    Ok((model, stats))
}
