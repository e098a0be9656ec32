//! Checkpoint files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "VSCK" | u32 version | u64 model hash | u32 len | model description (UTF-8)
//! u32 section count
//! per section: u32 len | name (UTF-8) | u64 rows | u64 cols | rows*cols f64
//! ```
//!
//! Sections hold parameters (`param/<block>`), Adam moments
//! (`adam.m/<block>`, `adam.v/<block>`), the Adam step and hyperparameters,
//! per-video baselines and the number of finished epochs. Values are stored
//! as f64 so a round trip is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState};
use crate::numerics::layers::ParamSet;
use crate::numerics::Matrix;
use crate::rng::SeedRng;

use super::model::{Model, ModelSpec};
use super::{Optimizer, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_section(out: &mut Vec<u8>, name: &str, m: &Matrix) {
    put_str(out, name);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut sections: Vec<(String, Matrix)> = Vec::new();
    state
        .model
        .visit(&mut |name, m| sections.push((format!("param/{name}"), m.clone())));
    let mut names = Vec::new();
    state.model.visit(&mut |name, _| names.push(name.to_string()));
    for (name, s) in names.iter().zip(&state.optimizer.states) {
        sections.push((format!("adam.m/{name}"), s.m.clone()));
        sections.push((format!("adam.v/{name}"), s.v.clone()));
    }
    let c = state.optimizer.config;
    sections.push((
        "adam.config".into(),
        Matrix::row_vector(&[c.lr, c.beta1, c.beta2, c.eps]),
    ));
    sections.push((
        "adam.step".into(),
        Matrix::row_vector(&[state.optimizer.step() as f64]),
    ));
    sections.push(("baselines".into(), Matrix::row_vector(&state.baselines)));
    sections.push((
        "epochs_done".into(),
        Matrix::row_vector(&[state.epochs_done as f64]),
    ));

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&state.spec.hash().to_le_bytes());
    put_str(&mut out, &state.spec.canonical());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (name, m) in &sections {
        put_section(&mut out, name, m);
    }
    out
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
            .ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("section name is not UTF-8".into()))
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let count = rows
            .checked_mul(cols)
            .filter(|c| c.checked_mul(8).is_some())
            .ok_or_else(|| Error::Checkpoint("section size overflows".into()))?;
        let raw = self.take(count * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }
}

/// Decodes a checkpoint. With `expected` set, the stored model description
/// must hash to the same value.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&ModelSpec>) -> Result<TrainState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let hash = r.u64()?;
    let spec = ModelSpec::parse_canonical(&r.string()?)?;
    if spec.hash() != hash {
        return Err(Error::Checkpoint("model description does not match its hash".into()));
    }
    if let Some(want) = expected {
        if want.hash() != hash {
            return Err(Error::Checkpoint(format!(
                "checkpoint was built for `{}`, expected `{}`",
                spec.canonical(),
                want.canonical()
            )));
        }
    }
    let count = r.u32()?;
    let mut sections = BTreeMap::new();
    for _ in 0..count {
        let name = r.string()?;
        let m = r.matrix()?;
        sections.insert(name, m);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after the last section".into()));
    }

    let mut take = |name: &str| {
        sections
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing section `{name}`")))
    };
    let scalar = |m: Matrix, name: &str| -> Result<f64> {
        match m.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Checkpoint(format!("section `{name}` is not a scalar"))),
        }
    };

    let mut model = Model::init(&spec, &mut SeedRng::new(0))?;
    let config = match take("adam.config")?.as_slice() {
        &[lr, beta1, beta2, eps] => AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        },
        _ => return Err(Error::Checkpoint("section `adam.config` has the wrong size".into())),
    };
    let step = scalar(take("adam.step")?, "adam.step")? as u64;
    let mut states = Vec::new();
    let mut failure = None;
    model.visit_mut(&mut |name, param| {
        if failure.is_some() {
            return;
        }
        let mut load = || -> Result<AdamState> {
            let shape_ok = |m: &Matrix| m.shape() == param.shape();
            let p = take(&format!("param/{name}"))?;
            let m = take(&format!("adam.m/{name}"))?;
            let v = take(&format!("adam.v/{name}"))?;
            if !(shape_ok(&p) && shape_ok(&m) && shape_ok(&v)) {
                return Err(Error::Checkpoint(format!("block `{name}` has the wrong shape")));
            }
            *param = p;
            Ok(AdamState { config, m, v, step })
        };
        match load() {
            Ok(s) => states.push(s),
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let baselines = take("baselines")?.into_vec();
    let epochs_done = scalar(take("epochs_done")?, "epochs_done")? as usize;
    if let Some(extra) = sections.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected section `{extra}`")));
    }
    Ok(TrainState {
        spec,
        model,
        optimizer: Optimizer { config, states },
        baselines,
        epochs_done,
    })
}

/// Writes through a temporary file so a crash never leaves half a checkpoint.
pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(state)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&ModelSpec>) -> Result<TrainState> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected)
}
