//! Checkpoint file: a text manifest followed by a little-endian `f64` payload.
//!
//! ```text
//! advtts-checkpoint 1
//! vocab_size=12            model config, shape keys then architecture keys
//! ...
//! adam_step=3000           only when optimizer moments follow the parameters
//! arrays=16
//! text_embedding 12 32     one line per array, canonical order
//! ...
//! end
//! <params> [<first moments> <second moments>]
//! ```

use std::fs;
use std::path::Path;

use super::AdamState;
use crate::error::{at, Error, Result};
use crate::kv::{render, KvMap};
use crate::model::{ModelConfig, ModelParams};

pub const CHECKPOINT_MAGIC: &str = "advtts-checkpoint 1";
const END: &str = "end";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub state: Option<AdamState>,
}

pub fn manifest_text(params: &ModelParams, state: Option<&AdamState>) -> String {
    let cfg = params.config();
    let mut s = format!("{CHECKPOINT_MAGIC}\n");
    s += &render(cfg.shape_pairs().into_iter().chain(cfg.arch_pairs()));
    if let Some(st) = state {
        s += &format!("adam_step={}\n", st.step);
    }
    s += &format!("arrays={}\n", params.layout().len());
    for spec in params.layout() {
        let dims: Vec<String> = spec.shape.iter().map(usize::to_string).collect();
        s += &format!("{} {}\n", spec.name, dims.join(" "));
    }
    s + END + "\n"
}

pub fn encode_checkpoint(params: &ModelParams, state: Option<&AdamState>) -> Vec<u8> {
    let mut out = manifest_text(params, state).into_bytes();
    let mut put = |xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
    put(params.data());
    if let Some(st) = state {
        put(&st.first_moment);
        put(&st.second_moment);
    }
    out
}

/// Byte length of the manifest, including the `end` line.
pub fn manifest_len(bytes: &[u8]) -> Option<usize> {
    let needle = format!("\n{END}\n");
    bytes
        .windows(needle.len())
        .position(|w| w == needle.as_bytes())
        .map(|p| p + needle.len())
}

/// Parses a checkpoint; `path` only labels errors.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let parse_err = |line, msg: String| Error::Parse { line, msg };
    let mlen = manifest_len(bytes).ok_or_else(|| parse_err(1, "manifest has no `end` line".into()))?;
    let text = std::str::from_utf8(&bytes[..mlen]).map_err(|_| parse_err(1, "manifest is not UTF-8".into()))?;
    let lines: Vec<&str> = text.lines().collect();
    if lines.first() != Some(&CHECKPOINT_MAGIC) {
        return Err(parse_err(1, format!("expected `{CHECKPOINT_MAGIC}`")));
    }

    // Key lines are parsed in place (other lines blanked) so errors keep line numbers.
    let arrays_at = lines
        .iter()
        .position(|l| l.starts_with("arrays="))
        .ok_or_else(|| Error::MissingKey("arrays".into()))?;
    let kv_text: String = lines
        .iter()
        .enumerate()
        .map(|(i, l)| {
            if i == 0 || i > arrays_at {
                "\n".to_string()
            } else {
                format!("{l}\n")
            }
        })
        .collect();
    let map = KvMap::parse(&kv_text)?;
    let mut allowed: Vec<&str> = ModelConfig::SHAPE_KEYS.to_vec();
    allowed.extend(ModelConfig::ARCH_KEYS);
    allowed.extend(["adam_step", "arrays"]);
    map.reject_unknown(&allowed)?;
    let cfg = ModelConfig::from_map(&map)?;
    let adam_step: Option<usize> = map.get("adam_step")?;
    let count: usize = map.require("arrays")?;

    let layout = cfg.layout();
    if count != layout.len() {
        return Err(parse_err(
            arrays_at + 1,
            format!("config implies {} arrays, manifest lists {count}", layout.len()),
        ));
    }
    for (k, spec) in layout.iter().enumerate() {
        let line = arrays_at + 2 + k;
        let got = lines.get(line - 1).copied().unwrap_or("");
        let mut parts = got.split_whitespace();
        let name = parts.next().unwrap_or("");
        let dims: Vec<usize> = parts.map(|d| d.parse().unwrap_or(0)).collect();
        if name != spec.name || dims != spec.shape {
            return Err(parse_err(
                line,
                format!("expected array `{}` {:?}, found `{got}`", spec.name, spec.shape),
            ));
        }
    }
    if lines.len() != arrays_at + 2 + count {
        return Err(parse_err(
            arrays_at + 2 + count,
            "unexpected manifest lines before `end`".into(),
        ));
    }

    let n = cfg.param_count();
    let copies = if adam_step.is_some() { 3 } else { 1 };
    let payload = &bytes[mlen..];
    let expected = (8 * n * copies) as u64;
    if payload.len() as u64 != expected {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            expected,
            actual: payload.len() as u64,
        });
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
    let mut take = || values.by_ref().take(n).collect::<Vec<f64>>();
    let params = ModelParams::from_flat(cfg, take())?;
    let state = adam_step.map(|step| AdamState {
        step,
        first_moment: take(),
        second_moment: take(),
    });
    Ok(Checkpoint { params, state })
}

pub fn save_checkpoint(params: &ModelParams, state: Option<&AdamState>, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(params, state)).map_err(at(path))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path).map_err(at(path))?, path)
}
