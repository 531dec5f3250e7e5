//! SKEL1: a line-oriented text format for skeleton sequences.
//!
//! ```text
//! SKEL1 M=2 D=3 FPS=25 T=2
//! BONES 0-1
//! 0.0 0.0 0.0 0.0 100.0 0.0
//! 0.0 0.0 0.0 0.0 100.0 1.0
//! ```
//!
//! Joint indices in `BONES` are 0-based. Each frame line holds `M * D`
//! values, joint-major.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A recorded or synthesized motion, `frames: [T, M, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub fps: f64,
    pub frames: Tensor,
    pub bones: Vec<(usize, usize)>,
}

impl MotionSequence {
    pub fn new(fps: f64, frames: Tensor, bones: Vec<(usize, usize)>) -> Result<Self> {
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::Config(format!("fps must be positive, got {fps}")));
        }
        if frames.rank() != 3 || frames.shape()[0] < 2 {
            return Err(Error::Dimension(format!(
                "a sequence needs [T >= 2, M, D] frames, got {:?}",
                frames.shape()
            )));
        }
        let m = frames.shape()[1];
        if let Some(&(a, b)) = bones.iter().find(|&&(a, b)| a >= m || b >= m) {
            return Err(Error::Topology(format!("bone {a}-{b} outside 0..{m}")));
        }
        Ok(Self { fps, frames, bones })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn joints(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn dims(&self) -> usize {
        self.frames.shape()[2]
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn header_field<T: std::str::FromStr>(tokens: &[&str], key: &str) -> Result<T> {
    let prefix = format!("{key}=");
    let raw = tokens
        .iter()
        .find_map(|t| t.strip_prefix(prefix.as_str()))
        .ok_or_else(|| parse_err(1, format!("header lacks {key}=")))?;
    raw.parse()
        .map_err(|_| parse_err(1, format!("bad value for {key}: `{raw}`")))
}

pub fn parse_skel(text: &str) -> Result<MotionSequence> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty input"))?;
    let tokens: Vec<&str> = header.split_whitespace().collect();
    if tokens.first() != Some(&"SKEL1") {
        return Err(parse_err(1, "missing SKEL1 magic"));
    }
    let m: usize = header_field(&tokens, "M")?;
    let d: usize = header_field(&tokens, "D")?;
    let fps: f64 = header_field(&tokens, "FPS")?;
    let t: usize = header_field(&tokens, "T")?;
    if m == 0 || d == 0 || t < 2 || !(fps > 0.0 && fps.is_finite()) {
        return Err(parse_err(1, "need M, D >= 1, T >= 2 and FPS > 0"));
    }

    let (bl, bones_line) = lines.next().ok_or_else(|| parse_err(2, "missing BONES line"))?;
    let mut parts = bones_line.split_whitespace();
    if parts.next() != Some("BONES") {
        return Err(parse_err(bl, "expected BONES line"));
    }
    let mut bones = Vec::new();
    for pair in parts {
        let bone = pair
            .split_once('-')
            .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
            .ok_or_else(|| parse_err(bl, format!("bad bone `{pair}`")))?;
        if bone.0 >= m || bone.1 >= m {
            return Err(parse_err(bl, format!("bone `{pair}` outside 0..{m}")));
        }
        bones.push(bone);
    }

    let mut data = Vec::with_capacity(t * m * d);
    let mut seen = 0;
    let mut last_line = bl;
    for (ln, line) in lines {
        if line.is_empty() {
            continue;
        }
        last_line = ln;
        if seen == t {
            return Err(parse_err(ln, format!("more than the declared {t} frames")));
        }
        let before = data.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| parse_err(ln, format!("bad number `{tok}`")))?;
            if !v.is_finite() {
                return Err(parse_err(ln, format!("non-finite value `{tok}`")));
            }
            data.push(v);
        }
        if data.len() - before != m * d {
            return Err(parse_err(
                ln,
                format!("expected {} values, found {}", m * d, data.len() - before),
            ));
        }
        seen += 1;
    }
    // a truncated file is reported at its last line
    if seen < t {
        return Err(parse_err(
            last_line,
            format!("declared {t} frames, found {seen}"),
        ));
    }
    MotionSequence::new(fps, Tensor::new(&[t, m, d], data)?, bones)
}

/// Writes at 17 significant digits, so parsing restores every value exactly.
pub fn write_skel(seq: &MotionSequence) -> String {
    let (t, m, d) = (seq.len(), seq.joints(), seq.dims());
    let mut out = format!("SKEL1 M={m} D={d} FPS={} T={t}\nBONES", seq.fps);
    for (a, b) in &seq.bones {
        out.push_str(&format!(" {a}-{b}"));
    }
    out.push('\n');
    for frame in seq.frames.data().chunks_exact(m * d) {
        let line: Vec<String> = frame.iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}
