//! Plain-text network checkpoints.
//!
//! ```text
//! prefdiff-checkpoint 1
//! data_dim 2
//! hidden 64
//! depth 2
//! time_embed_dim 16
//! n_conditions 4
//! steps 1000
//! params 6
//! shape 22 64
//! <row-major values, space separated>
//! shape 64
//! ...
//! ```
//!
//! Values are written in shortest round-trip exponent form, so a save/load
//! cycle reproduces every parameter bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use crate::diffusion::net::{DenoiserNet, NetConfig};
use crate::error::{Error, Result};
use crate::numerics::DenseArray;

pub const CHECKPOINT_MAGIC: &str = "prefdiff-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn to_checkpoint_string(net: &DenoiserNet) -> String {
    let c = net.config();
    let mut s = String::new();
    let _ = writeln!(s, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
    let _ = writeln!(s, "data_dim {}", c.data_dim);
    let _ = writeln!(s, "hidden {}", c.hidden);
    let _ = writeln!(s, "depth {}", c.depth);
    let _ = writeln!(s, "time_embed_dim {}", c.time_embed_dim);
    let _ = writeln!(s, "n_conditions {}", c.n_conditions);
    let _ = writeln!(s, "steps {}", c.steps);
    let _ = writeln!(s, "params {}", net.params().len());
    for p in net.params() {
        let dims: Vec<String> = p.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(s, "shape {}", dims.join(" "));
        let vals: Vec<String> = p.data().iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(s, "{}", vals.join(" "));
    }
    s
}

pub fn from_checkpoint_str(text: &str) -> Result<DenoiserNet> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| Error::Parse(format!("checkpoint ended before {what}")))
    };

    let (_, header) = next("header")?;
    let mut head = header.split_whitespace();
    if head.next() != Some(CHECKPOINT_MAGIC) {
        return Err(Error::Parse("not a prefdiff checkpoint".into()));
    }
    let version: u32 = parse_num(head.next().unwrap_or(""), 1)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
    }

    let mut field = |name: &str| -> Result<usize> {
        let (no, line) = next(name)?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(name) {
            return Err(Error::Parse(format!("line {}: expected `{name}`", no + 1)));
        }
        parse_num(parts.next().unwrap_or(""), no + 1)
    };
    let config = NetConfig {
        data_dim: field("data_dim")?,
        hidden: field("hidden")?,
        depth: field("depth")?,
        time_embed_dim: field("time_embed_dim")?,
        n_conditions: field("n_conditions")?,
        steps: field("steps")?,
    };
    let count = field("params")?;

    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let (no, line) = next("shape")?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some("shape") {
            return Err(Error::Parse(format!("line {}: expected `shape`", no + 1)));
        }
        let shape = parts
            .map(|p| parse_num::<usize>(p, no + 1))
            .collect::<Result<Vec<_>>>()?;
        let (no, line) = next("values")?;
        let data = line
            .split_whitespace()
            .map(|p| parse_num::<f64>(p, no + 1))
            .collect::<Result<Vec<_>>>()?;
        params.push(DenseArray::new(shape, data).map_err(|e| Error::Parse(format!("line {}: {e}", no + 1)))?);
    }
    DenoiserNet::from_params(config, params)
}

fn parse_num<T: std::str::FromStr>(s: &str, line: usize) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Parse(format!("line {line}: cannot parse `{s}`")))
}

pub fn save_checkpoint(net: &DenoiserNet, path: &Path) -> Result<()> {
    std::fs::write(path, to_checkpoint_string(net))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<DenoiserNet> {
    from_checkpoint_str(&std::fs::read_to_string(path)?)
}
