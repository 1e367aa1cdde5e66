//! Line-oriented text checkpoints.
//!
//! ```text
//! prior-attn-checkpoint v1
//! config <key> <value>            one line per model setting
//! param <name> <group> <trainable> <d1,d2,...>
//! <values separated by single spaces>
//! ...
//! end
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, so loading a saved
//! model reproduces every parameter bit for bit.

use std::fmt::Write as _;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::config::ModelConfig;
use super::params::{Param, ParamGroup, ParamSet};
use super::world::WorldModel;

pub const CHECKPOINT_HEADER: &str = "prior-attn-checkpoint v1";

pub fn checkpoint_to_string(model: &WorldModel) -> String {
    let mut out = String::new();
    out.push_str(CHECKPOINT_HEADER);
    out.push('\n');
    for (k, v) in model.config().to_pairs() {
        let _ = writeln!(out, "config {k} {v}");
    }
    for p in model.params().iter() {
        let dims: Vec<String> = p.tensor.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(
            out,
            "param {} {} {} {}",
            p.name,
            p.group.token(),
            u8::from(p.trainable),
            dims.join(",")
        );
        let vals: Vec<String> = p.tensor.data().iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&vals.join(" "));
        out.push('\n');
    }
    out.push_str("end\n");
    out
}

fn perr(line: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        line,
        detail: detail.into(),
    }
}

pub fn checkpoint_from_str(text: &str) -> Result<WorldModel> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, CHECKPOINT_HEADER)) => {}
        Some((n, other)) => return Err(perr(n, format!("unexpected header `{other}`"))),
        None => return Err(perr(1, "empty checkpoint")),
    }
    let mut config = ModelConfig::default();
    let mut params = ParamSet::new();
    let mut finished = false;
    while let Some((n, line)) = lines.next() {
        let mut parts = line.split(' ');
        match parts.next() {
            Some("config") => {
                let key = parts.next().ok_or_else(|| perr(n, "missing config key"))?;
                let value = parts.next().ok_or_else(|| perr(n, "missing config value"))?;
                if !config.set(key, value)? {
                    return Err(perr(n, format!("unknown config key `{key}`")));
                }
            }
            Some("param") => {
                let fields: Vec<&str> = parts.collect();
                let [name, group, trainable, dims] = fields[..] else {
                    return Err(perr(n, "param line needs name, group, trainable flag and shape"));
                };
                let group = ParamGroup::from_token(group).ok_or_else(|| perr(n, format!("unknown group `{group}`")))?;
                let trainable = match trainable {
                    "1" => true,
                    "0" => false,
                    other => return Err(perr(n, format!("bad trainable flag `{other}`"))),
                };
                let shape = dims
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<usize>().map_err(|_| perr(n, format!("bad dimension `{s}`"))))
                    .collect::<Result<Vec<_>>>()?;
                let (vn, values) = lines.next().ok_or_else(|| perr(n + 1, "missing values"))?;
                let data = if values.is_empty() {
                    Vec::new()
                } else {
                    values
                        .split(' ')
                        .map(|s| s.parse::<f64>().map_err(|_| perr(vn, format!("bad value `{s}`"))))
                        .collect::<Result<Vec<_>>>()?
                };
                let tensor = Tensor::new(shape, data).map_err(|e| perr(vn, e.to_string()))?;
                let id = params.add(name, tensor, group);
                params.get_mut(id).trainable = trainable;
            }
            Some("end") => {
                finished = true;
                break;
            }
            _ => return Err(perr(n, format!("unexpected line `{line}`"))),
        }
    }
    if !finished {
        return Err(perr(text.lines().count(), "missing `end`"));
    }
    let mut model = WorldModel::new(config, 0)?;
    check_groups(model.params(), &params)?;
    model.set_params(params)?;
    Ok(model)
}

fn check_groups(expected: &ParamSet, got: &ParamSet) -> Result<()> {
    for (a, b) in expected.iter().zip(got.iter()) {
        let Param { name, group, .. } = a;
        if *group != b.group {
            return Err(Error::Contract(format!(
                "parameter {name} has group {:?}, expected {group:?}",
                b.group
            )));
        }
    }
    Ok(())
}
