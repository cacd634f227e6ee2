//! Versioned text checkpoints of named parameter arrays.
//!
//! ```text
//! cdla-checkpoint 1
//! kind listwise
//! arch layers 2
//! arch heads 4
//! param projection.weight 14x64
//! 0.1 -0.2 ...
//! ```

use std::fmt::Write as _;
use std::path::Path;

use super::{ListwiseRanker, Model, PointwiseRanker, PropensityModel};
use crate::autodiff::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::util::write_atomic;

const MAGIC: &str = "cdla-checkpoint";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub kind: String,
    pub arch: Vec<(String, usize)>,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn arch_value(&self, key: &str) -> Option<usize> {
        self.arch.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::InvalidArgument(format!(
                "checkpoint holds a `{}` model, expected `{kind}`",
                self.kind
            )));
        }
        Ok(())
    }
}

pub fn format_checkpoint<T: Scalar, M: Model<T>>(model: &M, header: &str) -> String {
    let mut out = String::new();
    for line in header.lines() {
        let _ = writeln!(out, "# {line}");
    }
    let _ = writeln!(out, "{MAGIC} {FORMAT_VERSION}");
    let _ = writeln!(out, "kind {}", M::KIND);
    for (k, v) in model.arch() {
        let _ = writeln!(out, "arch {k} {v}");
    }
    for p in model.params().iter() {
        let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "param {} {}", p.name, dims.join("x"));
        let vals: Vec<String> = p.value.data().iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", vals.join(" "));
    }
    out
}

/// Writes a checkpoint atomically.
pub fn save_checkpoint<T: Scalar, M: Model<T>>(model: &M, path: impl AsRef<Path>, header: &str) -> Result<()> {
    write_atomic(path.as_ref(), format_checkpoint(model, header).as_bytes())
}

pub fn parse_checkpoint<T: Scalar>(text: &str, src: &str) -> Result<Checkpoint<T>> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
    let bad = |line: usize, msg: String| Error::parse(src, line, msg);

    let (ln, magic) = lines.next().ok_or_else(|| bad(0, "empty checkpoint".into()))?;
    match magic.split_whitespace().collect::<Vec<_>>().as_slice() {
        [m, v] if *m == MAGIC => {
            if v.parse::<u32>().ok() != Some(FORMAT_VERSION) {
                return Err(bad(ln + 1, format!("unsupported checkpoint version `{v}`")));
            }
        }
        _ => return Err(bad(ln + 1, "missing checkpoint magic".into())),
    }

    let mut kind = None;
    let mut arch = Vec::new();
    let mut params = ParamStore::new();
    while let Some((ln, line)) = lines.next() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["kind", k] => kind = Some(k.to_string()),
            ["arch", k, v] => {
                let v = v
                    .parse()
                    .map_err(|_| bad(ln + 1, format!("bad arch value `{v}`")))?;
                arch.push((k.to_string(), v));
            }
            ["param", name, dims] => {
                let shape = dims
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad(ln + 1, format!("bad shape `{dims}`")))?;
                let (vl, values) = lines
                    .next()
                    .ok_or_else(|| bad(ln + 1, format!("missing values for `{name}`")))?;
                let data = values
                    .split_whitespace()
                    .map(|v| v.parse::<f64>().map(T::lit))
                    .collect::<std::result::Result<Vec<T>, _>>()
                    .map_err(|e| bad(vl + 1, e.to_string()))?;
                let t = Tensor::new(shape, data).map_err(|e| bad(vl + 1, e.to_string()))?;
                if !t.all_finite() {
                    return Err(bad(vl + 1, format!("non-finite value in `{name}`")));
                }
                params.add(*name, t);
            }
            _ => return Err(bad(ln + 1, format!("unexpected line `{line}`"))),
        }
    }
    let kind = kind.ok_or_else(|| bad(0, "missing `kind` line".into()))?;
    Ok(Checkpoint { kind, arch, params })
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text, &path.display().to_string())
}

fn restore<T: Scalar, M: Model<T>>(mut model: M, ckpt: &Checkpoint<T>) -> Result<M> {
    ckpt.expect_kind(M::KIND)?;
    model.params_mut().load_from(&ckpt.params)?;
    Ok(model)
}

fn placeholder_rng() -> rand_chacha::ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(0)
}

impl<T: Scalar> PointwiseRanker<T> {
    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        restore(Self::new(&mut placeholder_rng()), ckpt)
    }
}

impl<T: Scalar> ListwiseRanker<T> {
    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        ckpt.expect_kind(Self::KIND)?;
        let layers = ckpt
            .arch_value("layers")
            .ok_or_else(|| Error::InvalidArgument("listwise checkpoint lacks `layers`".into()))?;
        let heads = ckpt
            .arch_value("heads")
            .ok_or_else(|| Error::InvalidArgument("listwise checkpoint lacks `heads`".into()))?;
        restore(Self::new(layers, heads, &mut placeholder_rng())?, ckpt)
    }
}

impl<T: Scalar> PropensityModel<T> {
    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        restore(Self::new(), ckpt)
    }
}
