//! Checkpoint container and its on-disk format.
//!
//! ```text
//! lmaug-checkpoint 1
//! n_blocks=4
//! ...                      config keys, one per line
//! rng_seed=<u64>
//! step=<u64>
//! tensors=<count>
//!                          (blank line ends the header)
//! <records>
//! ```
//!
//! Each record is `u32 name length, name bytes, u8 dtype (0 = f32, 1 = f64),
//! u32 rank, rank × u64 dims, data`, all little-endian. Parameters are f32;
//! the Adam moments are f64 records named `adam.m/<tensor>` and `adam.v/<tensor>`.

use std::path::Path;

use super::config::TransformerConfig;
use super::params::Params;
use crate::error::{Error, Result};

const MAGIC: &str = "lmaug-checkpoint 1";

/// Adam moment estimates, one entry per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralLmCheckpoint {
    pub params: Params<f32>,
    pub optimizer: AdamState,
    pub rng_seed: u64,
}

impl NeuralLmCheckpoint {
    pub fn init(config: &TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Params::init(config, seed);
        let optimizer = AdamState::zeros(params.data.len());
        Ok(Self {
            params,
            optimizer,
            rng_seed: seed,
        })
    }

    pub fn from_params(params: Params<f32>, rng_seed: u64) -> Self {
        let optimizer = AdamState::zeros(params.data.len());
        Self {
            params,
            optimizer,
            rng_seed,
        }
    }

    pub fn config(&self) -> &TransformerConfig {
        self.params.config()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let layout = &self.params.layout;
        let mut out = Vec::new();
        let mut header = format!("{MAGIC}\n");
        for (k, v) in self.config().to_kv() {
            header.push_str(&format!("{k}={v}\n"));
        }
        header.push_str(&format!("rng_seed={}\n", self.rng_seed));
        header.push_str(&format!("step={}\n", self.optimizer.step));
        header.push_str(&format!("tensors={}\n\n", 3 * layout.tensors.len()));
        out.extend_from_slice(header.as_bytes());

        fn record_header(out: &mut Vec<u8>, name: &str, dtype: u8, shape: &[usize]) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(dtype);
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for (i, spec) in layout.tensors.iter().enumerate() {
            record_header(&mut out, &spec.name, 0, &spec.shape);
            for x in self.params.get(i) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        for (prefix, moments) in [("adam.m/", &self.optimizer.m), ("adam.v/", &self.optimizer.v)] {
            for spec in &layout.tensors {
                record_header(&mut out, &format!("{prefix}{}", spec.name), 1, &spec.shape);
                for x in &moments[spec.offset..spec.offset + spec.len] {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], source: &str) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::parse(source, line, msg);
        let mut pos = 0;
        let mut lines = Vec::new();
        loop {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| perr(lines.len() + 1, "unterminated header".into()))?;
            let line = std::str::from_utf8(&bytes[pos..pos + end])
                .map_err(|_| perr(lines.len() + 1, "header is not UTF-8".into()))?;
            pos += end + 1;
            if line.is_empty() {
                break;
            }
            lines.push(line.to_string());
        }
        if lines.first().map(String::as_str) != Some(MAGIC) {
            return Err(perr(1, format!("expected '{MAGIC}'")));
        }
        let mut config = TransformerConfig::default();
        let mut rng_seed = None;
        let mut step = None;
        let mut count = None;
        for (n, line) in lines.iter().enumerate().skip(1) {
            let lineno = n + 1;
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| perr(lineno, format!("expected key=value, got '{line}'")))?;
            let bad = || perr(lineno, format!("bad value for {k}: '{v}'"));
            match k {
                "n_blocks" => config.n_blocks = v.parse().map_err(|_| bad())?,
                "n_heads" => config.n_heads = v.parse().map_err(|_| bad())?,
                "d_model" => config.d_model = v.parse().map_err(|_| bad())?,
                "d_ff" => config.d_ff = v.parse().map_err(|_| bad())?,
                "max_seq_len" => config.max_seq_len = v.parse().map_err(|_| bad())?,
                "vocab_size" => config.vocab_size = v.parse().map_err(|_| bad())?,
                "dropout_rate" => config.dropout_rate = v.parse().map_err(|_| bad())?,
                "tie_embeddings" => config.tie_embeddings = v.parse().map_err(|_| bad())?,
                "rng_seed" => rng_seed = Some(v.parse().map_err(|_| bad())?),
                "step" => step = Some(v.parse().map_err(|_| bad())?),
                "tensors" => count = Some(v.parse::<usize>().map_err(|_| bad())?),
                _ => return Err(perr(lineno, format!("unknown key '{k}'"))),
            }
        }
        config.validate()?;
        let mut params = Params::<f32>::zeros(&config);
        let layout = std::sync::Arc::clone(&params.layout);
        let mut optimizer = AdamState::zeros(layout.total);
        optimizer.step = step.ok_or_else(|| perr(0, "missing step".into()))?;
        let rng_seed = rng_seed.ok_or_else(|| perr(0, "missing rng_seed".into()))?;
        let count = count.ok_or_else(|| perr(0, "missing tensors".into()))?;
        if count != 3 * layout.tensors.len() {
            return Err(perr(0, format!("expected {} tensors, header says {count}", 3 * layout.tensors.len())));
        }

        let mut reader = ByteReader { bytes, pos, source };
        for kind in 0..3 {
            for (i, spec) in layout.tensors.iter().enumerate() {
                let name = reader.string()?;
                let dtype = reader.take(1)?[0];
                let rank = reader.u32()? as usize;
                let mut shape = Vec::with_capacity(rank);
                for _ in 0..rank {
                    shape.push(reader.u64()? as usize);
                }
                let (want_name, want_dtype) = match kind {
                    0 => (spec.name.clone(), 0),
                    1 => (format!("adam.m/{}", spec.name), 1),
                    _ => (format!("adam.v/{}", spec.name), 1),
                };
                if name != want_name || dtype != want_dtype || shape != spec.shape {
                    return Err(reader.error(format!(
                        "record '{name}' (dtype {dtype}, shape {shape:?}) does not match expected '{want_name}' {:?}",
                        spec.shape
                    )));
                }
                match kind {
                    0 => {
                        for x in params.get_mut(i) {
                            *x = f32::from_le_bytes(reader.take(4)?.try_into().expect("4 bytes"));
                        }
                    }
                    _ => {
                        let dst = if kind == 1 { &mut optimizer.m } else { &mut optimizer.v };
                        for x in &mut dst[spec.offset..spec.offset + spec.len] {
                            *x = f64::from_le_bytes(reader.take(8)?.try_into().expect("8 bytes"));
                        }
                    }
                }
            }
        }
        if reader.pos != bytes.len() {
            return Err(reader.error("trailing bytes after last tensor".into()));
        }
        Ok(Self {
            params,
            optimizer,
            rng_seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl<'a> ByteReader<'a> {
    fn error(&self, msg: String) -> Error {
        Error::parse(self.source, 0, format!("byte {}: {msg}", self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.error("unexpected end of file".into()));
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

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.error("tensor name is not UTF-8".into()))
    }
}
