//! Binary checkpoints.
//!
//! Layout (little-endian): `b"GUIM"`, `u32` version, `u64` header length, the
//! header as `key=value` lines, the item vocabulary (`u64` count then ids),
//! then one section per parameter set (weights, Adam first moments, Adam second
//! moments, optionally best-validation weights). Each array inside a section
//! is a `u64` length followed by raw `f64` values in block order.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Adam, RunState, TrainConfig};
use crate::embedder::ItemVocab;
use crate::error::{GuimError, Result};
use crate::model::{build_model, Model, ModelConfig, ModelParams};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"GUIM";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: ItemVocab,
    pub train: TrainConfig,
    pub optimizer: Adam,
    pub state: RunState,
    pub best: Option<ModelParams>,
    pub rng: ChaCha8Rng,
}

impl PartialEq for Checkpoint {
    fn eq(&self, other: &Self) -> bool {
        self.model == other.model
            && self.vocab == other.vocab
            && self.train == other.train
            && self.optimizer == other.optimizer
            && bits_eq(&self.state, &other.state)
            && self.best == other.best
            && self.rng == other.rng
    }
}

fn bits_eq(a: &RunState, b: &RunState) -> bool {
    a.step == b.step
        && a.epoch == b.epoch
        && a.cursor == b.cursor
        && a.initial_validation.to_bits() == b.initial_validation.to_bits()
        && a.best_validation.to_bits() == b.best_validation.to_bits()
        && a.bad_epochs == b.bad_epochs
        && a.stopped == b.stopped
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    if s.len() != 64 {
        return Err(GuimError::Checkpoint(format!("bad rng seed `{s}`")));
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
            .map_err(|_| GuimError::Checkpoint(format!("bad rng seed `{s}`")))?;
    }
    Ok(out)
}

fn header_text(ck: &Checkpoint) -> String {
    let mut lines = Vec::new();
    for (k, v) in ck.model.config.to_pairs() {
        lines.push(format!("model.{k}={v}"));
    }
    for (k, v) in ck.train.to_pairs() {
        lines.push(format!("train.{k}={v}"));
    }
    let s = &ck.state;
    lines.push(format!("state.step={}", s.step));
    lines.push(format!("state.epoch={}", s.epoch));
    lines.push(format!("state.cursor={}", s.cursor));
    lines.push(format!("state.initial_validation={:016x}", s.initial_validation.to_bits()));
    lines.push(format!("state.best_validation={:016x}", s.best_validation.to_bits()));
    lines.push(format!("state.bad_epochs={}", s.bad_epochs));
    lines.push(format!("state.stopped={}", s.stopped));
    lines.push(format!("rng.seed={}", hex(&ck.rng.get_seed())));
    lines.push(format!("rng.stream={}", ck.rng.get_stream()));
    lines.push(format!("rng.word_pos={}", ck.rng.get_word_pos()));
    lines.push(format!("adam.t={}", ck.optimizer.t));
    lines.push(format!("vocab.top_x={}", ck.vocab.top_x()));
    lines.push(format!("has_best={}", ck.best.is_some()));
    let mut text = lines.join("\n");
    text.push('\n');
    text
}

fn write_params<W: Write>(w: &mut W, p: &ModelParams) -> Result<()> {
    for b in p.blocks() {
        let data = b.matrix.as_slice();
        w.write_all(&(data.len() as u64).to_le_bytes())?;
        for x in data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(mut w: W, ck: &Checkpoint) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let header = header_text(ck);
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    let ids = ck.vocab.ids();
    w.write_all(&(ids.len() as u64).to_le_bytes())?;
    for id in ids {
        w.write_all(&id.to_le_bytes())?;
    }
    write_params(&mut w, &ck.model.params)?;
    write_params(&mut w, &ck.optimizer.m)?;
    write_params(&mut w, &ck.optimizer.v)?;
    if let Some(best) = &ck.best {
        write_params(&mut w, best)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => GuimError::Checkpoint(format!("truncated file while reading {what}")),
        _ => GuimError::Io(e),
    })
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn read_params<R: Read>(r: &mut R, p: &mut ModelParams, what: &str) -> Result<()> {
    for m in p.blocks_mut() {
        let n = read_u64(r, what)? as usize;
        if n != m.len() {
            return Err(GuimError::Checkpoint(format!("{what}: array of {n} values where {} expected", m.len())));
        }
        let mut buf = vec![0u8; n * 8];
        read_exact(r, &mut buf, what)?;
        for (x, c) in m.as_mut_slice().iter_mut().zip(buf.chunks_exact(8)) {
            *x = f64::from_le_bytes(c.try_into().expect("8-byte chunk"));
        }
    }
    Ok(())
}

struct Header(HashMap<String, String>);

impl Header {
    fn get(&self, key: &str) -> Result<&str> {
        self.0
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| GuimError::Checkpoint(format!("header lacks `{key}`")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| GuimError::Checkpoint(format!("header value `{v}` for `{key}` is invalid")))
    }

    fn bits(&self, key: &str) -> Result<f64> {
        let v = self.get(key)?;
        u64::from_str_radix(v, 16)
            .map(f64::from_bits)
            .map_err(|_| GuimError::Checkpoint(format!("header value `{v}` for `{key}` is invalid")))
    }

    fn section<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a str)> + 'a {
        self.0
            .iter()
            .filter_map(move |(k, v)| k.strip_prefix(prefix).map(|k| (k, v.as_str())))
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(GuimError::Checkpoint(format!("bad magic bytes {magic:?}")));
    }
    let mut v = [0u8; 4];
    read_exact(&mut r, &mut v, "version")?;
    let version = u32::from_le_bytes(v);
    if version != CHECKPOINT_VERSION {
        return Err(GuimError::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = read_u64(&mut r, "header length")? as usize;
    if hlen > 1 << 20 {
        return Err(GuimError::Checkpoint(format!("header length {hlen} is implausible")));
    }
    let mut hbuf = vec![0u8; hlen];
    read_exact(&mut r, &mut hbuf, "header")?;
    let text = String::from_utf8(hbuf).map_err(|_| GuimError::Checkpoint("header is not UTF-8".into()))?;
    let mut map = HashMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| GuimError::Checkpoint(format!("malformed header line `{line}`")))?;
        map.insert(k.to_string(), v.to_string());
    }
    let h = Header(map);

    let config = ModelConfig::from_pairs(h.section("model."))?;
    let train = TrainConfig::default().apply_pairs(h.section("train."))?;
    let state = RunState {
        step: h.parse("state.step")?,
        epoch: h.parse("state.epoch")?,
        cursor: h.parse("state.cursor")?,
        initial_validation: h.bits("state.initial_validation")?,
        best_validation: h.bits("state.best_validation")?,
        bad_epochs: h.parse("state.bad_epochs")?,
        stopped: h.parse("state.stopped")?,
    };
    let mut rng = ChaCha8Rng::from_seed(unhex(h.get("rng.seed")?)?);
    rng.set_stream(h.parse("rng.stream")?);
    rng.set_word_pos(h.parse("rng.word_pos")?);

    let n_ids = read_u64(&mut r, "vocabulary")? as usize;
    let top_x: usize = h.parse("vocab.top_x")?;
    if n_ids > top_x {
        return Err(GuimError::Checkpoint(format!("{n_ids} vocabulary ids exceed top_x {top_x}")));
    }
    let ids = (0..n_ids)
        .map(|_| read_u64(&mut r, "vocabulary"))
        .collect::<Result<Vec<_>>>()?;
    let vocab = ItemVocab::from_ids(&ids, top_x)?;

    let mut model = build_model(&config)?;
    read_params(&mut r, &mut model.params, "parameters")?;
    let mut optimizer = Adam::new(&model.params, train.beta1, train.beta2, train.eps, train.weight_decay);
    optimizer.t = h.parse("adam.t")?;
    read_params(&mut r, &mut optimizer.m, "first moments")?;
    read_params(&mut r, &mut optimizer.v, "second moments")?;
    let best = if h.parse::<bool>("has_best")? {
        let mut b = model.params.clone();
        read_params(&mut r, &mut b, "best parameters")?;
        Some(b)
    } else {
        None
    };
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(GuimError::Checkpoint("trailing bytes after the last array".into()));
    }
    Ok(Checkpoint {
        model,
        vocab,
        train,
        optimizer,
        state,
        best,
        rng,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| GuimError::file(path, e))?;
    write_checkpoint(BufWriter::new(f), ck)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| GuimError::file(path, e))?;
    read_checkpoint(BufReader::new(f))
}
