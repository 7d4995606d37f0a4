//! Plain-text parameter checkpoints.
//!
//! ```text
//! tensorformer-checkpoint 1
//! meta <key> <value>
//! param <name> <rank> <extent>...
//! <row-major values, space separated, on one line>
//! end
//! ```
//!
//! Values are written in shortest round-trip exponent notation, so a
//! save/load cycle reproduces every parameter bit for bit. Readers reject any
//! version other than the one in the header.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "tensorformer-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    /// Free-form key/value metadata (network configuration etc.). Keys and
    /// values must not contain newlines; keys must not contain spaces.
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(params: ParamStore) -> Self {
        Self {
            meta: BTreeMap::new(),
            params,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n");
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {k} {v}");
        }
        for (_, name, t) in self.params.iter() {
            let _ = write!(out, "param {name} {}", t.ndim());
            for s in t.shape() {
                let _ = write!(out, " {s}");
            }
            out.push('\n');
            let values: Vec<String> = t.data().iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&values.join(" "));
            out.push('\n');
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str, source: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::parse(source, line, msg);
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty checkpoint".into()))?;
        let mut head = header.split_whitespace();
        if head.next() != Some(CHECKPOINT_MAGIC) {
            return Err(err(1, "missing checkpoint header".into()));
        }
        match head.next().map(str::parse::<u32>) {
            Some(Ok(CHECKPOINT_VERSION)) => {}
            other => return Err(err(1, format!("unsupported checkpoint version {other:?}"))),
        }

        let mut ckpt = Checkpoint::default();
        let mut ended = false;
        while let Some((no, line)) = lines.next() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let (tag, rest) = line.split_once(' ').unwrap_or((line, ""));
            match tag {
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    ckpt.meta.insert(k.to_string(), v.to_string());
                }
                "param" => {
                    let fields: Vec<&str> = rest.split_whitespace().collect();
                    if fields.len() < 2 {
                        return Err(err(no, "param line needs a name and a rank".into()));
                    }
                    let name = fields[0];
                    let rank: usize = fields[1].parse().map_err(|_| err(no, "bad rank".into()))?;
                    if fields.len() != 2 + rank {
                        return Err(err(no, format!("expected {rank} extents")));
                    }
                    let shape = fields[2..]
                        .iter()
                        .map(|s| s.parse::<usize>().map_err(|_| err(no, format!("bad extent {s}"))))
                        .collect::<Result<Vec<_>>>()?;
                    let (vno, values) = lines.next().ok_or_else(|| err(no, "missing values".into()))?;
                    let data = values
                        .split_whitespace()
                        .map(|s| s.parse::<f64>().map_err(|_| err(vno, format!("bad value {s}"))))
                        .collect::<Result<Vec<_>>>()?;
                    let t = Tensor::new(shape, data).map_err(|e| err(vno, e.to_string()))?;
                    if ckpt.params.by_name(name).is_some() {
                        return Err(err(no, format!("duplicate parameter {name}")));
                    }
                    ckpt.params.add(name, t);
                }
                "end" => {
                    ended = true;
                    break;
                }
                other => return Err(err(no, format!("unknown record {other}"))),
            }
        }
        if !ended {
            return Err(err(text.lines().count(), "truncated checkpoint (no end marker)".into()));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }
}
