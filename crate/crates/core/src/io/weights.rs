//! Text weight files.
//!
//! ```text
//! GOBOED-W1
//! model siqr
//! family lognormal
//! dims <input> <hidden> <theta>
//! head <delta_max> <sigma_min> <sigma_max> <mu0...>
//! y_mean <...>
//! y_std <...>
//! w1 <rows> <cols>
//! <one value per line>
//! ...
//! checksum <16 hex digits>
//! ```
//!
//! Values are written at 17 significant digits so every `f64` round-trips.
//! The checksum is 64-bit FNV-1a over every byte before the checksum line.

use std::path::Path;

use crate::amortizer::{EncoderWeights, HeadBounds, HIDDEN, PARAM_NAMES};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::{default_model, ModelKind};
use crate::prob::FamilyKind;

const MAGIC: &str = "GOBOED-W1";

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(|&x| fmt17(x)).collect::<Vec<_>>().join(" ")
}

fn family_name(f: FamilyKind) -> &'static str {
    match f {
        FamilyKind::LogNormal => "lognormal",
        FamilyKind::Normal => "normal",
    }
}

pub fn weights_to_string(phi: &EncoderWeights) -> String {
    let mut s = String::new();
    let mut line = |l: String| {
        s.push_str(&l);
        s.push('\n');
    };
    line(MAGIC.to_string());
    line(format!("model {}", phi.model));
    line(format!("family {}", family_name(phi.family)));
    line(format!("dims {} {} {}", phi.input_dim(), HIDDEN, phi.theta_dim()));
    let b = &phi.bounds;
    line(format!("head {} {} {} {}", fmt17(b.delta_max), fmt17(b.sigma_min), fmt17(b.sigma_max), join(&b.mu0)));
    line(format!("y_mean {}", join(&phi.y_mean)));
    line(format!("y_std {}", join(&phi.y_std)));
    for (name, t) in PARAM_NAMES.iter().zip(&phi.params) {
        line(format!("{name} {} {}", t.rows, t.cols));
        for &v in &t.data {
            line(fmt17(v));
        }
    }
    let sum = fnv1a64(s.as_bytes());
    s.push_str(&format!("checksum {sum:016x}\n"));
    s
}

pub fn save_weights(phi: &EncoderWeights, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, weights_to_string(phi))?;
    Ok(())
}

fn schema(msg: impl Into<String>) -> Error {
    Error::Schema(msg.into())
}

fn floats<'a>(it: impl Iterator<Item = &'a str>) -> Result<Vec<f64>> {
    it.map(|t| t.parse::<f64>().map_err(|_| schema(format!("bad number `{t}`")))).collect()
}

/// Parses a weight file and checks it against the architecture of `expected`.
pub fn weights_from_str(text: &str, expected: ModelKind) -> Result<EncoderWeights> {
    let body_end = text.rfind("checksum ").ok_or_else(|| schema("missing checksum line"))?;
    let (payload, tail) = text.split_at(body_end);
    let stored = u64::from_str_radix(tail["checksum ".len()..].trim(), 16).map_err(|_| schema("unreadable checksum"))?;
    if fnv1a64(payload.as_bytes()) != stored {
        return Err(Error::Checksum);
    }
    let mut lines = payload.lines();
    let mut next = |what: &str| lines.next().ok_or_else(|| schema(format!("truncated before {what}")));
    if next("magic")? != MAGIC {
        return Err(schema("bad magic line"));
    }
    let tagged = |l: &str, tag: &str| -> Result<String> {
        l.strip_prefix(tag)
            .and_then(|r| r.strip_prefix(' ').or(if r.is_empty() { Some("") } else { None }))
            .map(str::to_string)
            .ok_or_else(|| schema(format!("expected `{tag}` line")))
    };
    let model: ModelKind = tagged(next("model")?, "model")?.parse().map_err(|_| schema("unknown model selector"))?;
    if model != expected {
        return Err(schema(format!("file holds {model} weights, expected {expected}")));
    }
    let family = match tagged(next("family")?, "family")?.as_str() {
        "lognormal" => FamilyKind::LogNormal,
        "normal" => FamilyKind::Normal,
        other => return Err(schema(format!("unknown family `{other}`"))),
    };
    let reference = default_model(model)?;
    let dims: Vec<usize> = tagged(next("dims")?, "dims")?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| schema("bad dims")))
        .collect::<Result<_>>()?;
    let (input, d) = (reference.design_dim() + reference.obs_dim(), reference.theta_dim());
    if dims != [input, HIDDEN, d] {
        return Err(schema(format!("dims {dims:?} do not match architecture [{input}, {HIDDEN}, {d}]")));
    }
    if family != reference.prior().kind() {
        return Err(schema("family does not match the model prior"));
    }
    let head = floats(tagged(next("head")?, "head")?.split_whitespace())?;
    if head.len() != 3 + d {
        return Err(schema("head line has the wrong length"));
    }
    let bounds = HeadBounds { delta_max: head[0], sigma_min: head[1], sigma_max: head[2], mu0: head[3..].to_vec() };
    let y_mean = floats(tagged(next("y_mean")?, "y_mean")?.split_whitespace())?;
    let y_std = floats(tagged(next("y_std")?, "y_std")?.split_whitespace())?;
    if y_mean.len() != reference.obs_dim() || y_std.len() != reference.obs_dim() {
        return Err(schema("standardizer length does not match the observation dimension"));
    }
    let shapes = [(input, HIDDEN), (1, HIDDEN), (HIDDEN, HIDDEN), (1, HIDDEN), (HIDDEN, d), (1, d), (HIDDEN, d), (1, d)];
    let mut params = Vec::with_capacity(PARAM_NAMES.len());
    for (name, &(r, c)) in PARAM_NAMES.iter().zip(&shapes) {
        let hdr = tagged(next(name)?, name)?;
        if hdr.split_whitespace().map(|t| t.parse::<usize>().ok()).collect::<Vec<_>>() != [Some(r), Some(c)] {
            return Err(schema(format!("`{name}` must be {r}×{c}")));
        }
        let mut data = Vec::with_capacity(r * c);
        for _ in 0..r * c {
            data.push(floats(std::iter::once(next(name)?.trim()))?[0]);
        }
        params.push(Tensor::new(r, c, data)?);
    }
    if next("end").is_ok() {
        return Err(schema("trailing data before checksum"));
    }
    bounds.validate().map_err(|e| schema(e.to_string()))?;
    Ok(EncoderWeights { model, family, params, bounds, y_mean, y_std })
}

pub fn load_weights(path: &Path, expected: ModelKind) -> Result<EncoderWeights> {
    let text = std::fs::read_to_string(path)?;
    weights_from_str(&text, expected)
}
