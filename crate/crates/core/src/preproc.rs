//! Turns records into prompted model inputs and patch targets, and splices
//! generated patches back into the function.

use serde::{Deserialize, Serialize};

use crate::corpus::SampleRecord;
use crate::error::{Error, Result};

pub const START_LOC: &str = "<StartLoc>";
pub const END_LOC: &str = "<EndLoc>";
/// Target for a fix that deletes the vulnerable span outright.
pub const EMPTY_PATCH: &str = "<Empty>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptedExample {
    pub input_text: String,
    pub target_text: String,
}

/// Whether the CWE tag and location markers are inserted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    #[default]
    Full,
    Stripped,
}

/// Removes C-family comments and collapses whitespace runs to one space.
pub fn serialize(code: &str) -> Result<String> {
    serialize_with_map(code).map(|(s, _)| s)
}

/// Like [`serialize`], also returning `map[i]`: the output character position
/// corresponding to input character `i` (`map.len() == chars + 1`).
///
/// Comments act as whitespace. Comment markers inside string and character
/// literals are not comments.
pub fn serialize_with_map(code: &str) -> Result<(String, Vec<usize>)> {
    let chars: Vec<char> = code.chars().collect();
    let n = chars.len();
    let mut out: Vec<char> = Vec::with_capacity(n);
    let mut map = vec![0; n + 1];
    let mut pending_space = false;
    let mut i = 0;
    while i < n {
        let c = chars[i];
        let next = chars.get(i + 1).copied();
        if c == '/' && next == Some('/') {
            let end = (i..n).find(|&j| chars[j] == '\n').unwrap_or(n);
            map[i..end].fill(out.len());
            pending_space = true;
            i = end;
        } else if c == '/' && next == Some('*') {
            let close = (i + 2..n.saturating_sub(1))
                .find(|&j| chars[j] == '*' && chars[j + 1] == '/')
                .ok_or_else(|| Error::data(format!("unterminated block comment at character {i}")))?;
            map[i..close + 2].fill(out.len());
            pending_space = true;
            i = close + 2;
        } else if c.is_whitespace() {
            map[i] = out.len();
            pending_space = true;
            i += 1;
        } else {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            map[i] = out.len();
            out.push(c);
            i += 1;
            if c == '"' || c == '\'' {
                // Literal body is copied verbatim up to the closing quote.
                while i < n {
                    let d = chars[i];
                    map[i] = out.len();
                    out.push(d);
                    i += 1;
                    if d == '\\' && i < n {
                        map[i] = out.len();
                        out.push(chars[i]);
                        i += 1;
                    } else if d == c {
                        break;
                    }
                }
            }
        }
    }
    map[n] = out.len();
    Ok((out.into_iter().collect(), map))
}

/// Serialized vulnerable code cut at the span boundaries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    pub prefix: String,
    pub span: String,
    pub suffix: String,
    /// No whitespace separates the prefix from the span.
    pub left_tight: bool,
    /// No whitespace separates the span from the suffix.
    pub right_tight: bool,
}

pub fn segment(record: &SampleRecord) -> Result<Segments> {
    let (ser, map) = serialize_with_map(&record.vulnerable_code)?;
    let chars: Vec<char> = ser.chars().collect();
    if record.vuln_end >= map.len() || record.vuln_start > record.vuln_end {
        return Err(Error::data(format!("{}: span out of bounds", record.id)));
    }
    let (s, e) = (map[record.vuln_start], map[record.vuln_end]);
    let text = |a: usize, b: usize| chars[a..b].iter().collect::<String>().trim().to_string();
    Ok(Segments {
        prefix: text(0, s),
        span: text(s, e),
        suffix: text(e, chars.len()),
        left_tight: s > 0 && s <= chars.len() && chars[s - 1] != ' ' && e > s && chars[s] != ' ',
        right_tight: e < chars.len() && chars[e] != ' ' && e > 0 && chars[e - 1] != ' ',
    })
}

impl Segments {
    /// Joins prefix, replacement and suffix with the original boundary spacing.
    pub fn splice(&self, replacement: &str) -> String {
        let replacement = replacement.trim();
        let mut out = self.prefix.clone();
        let push = |out: &mut String, part: &str, tight: bool| {
            if part.is_empty() {
                return;
            }
            if !out.is_empty() && !tight {
                out.push(' ');
            }
            out.push_str(part);
        };
        if replacement.is_empty() {
            push(&mut out, &self.suffix, self.left_tight && self.right_tight);
        } else {
            push(&mut out, replacement, self.left_tight);
            push(&mut out, &self.suffix, self.right_tight);
        }
        out
    }
}

/// Prompted input for `mode`, and the patch target.
pub fn prepare(record: &SampleRecord, mode: PromptMode) -> Result<PromptedExample> {
    let seg = segment(record)?;
    Ok(PromptedExample {
        input_text: input_from_segments(record, &seg, mode)?,
        target_text: target_from_segments(record, &seg)?,
    })
}

/// Model input alone; `fixed_code` is not consulted.
pub fn prompt_input(record: &SampleRecord, mode: PromptMode) -> Result<String> {
    input_from_segments(record, &segment(record)?, mode)
}

fn input_from_segments(record: &SampleRecord, seg: &Segments, mode: PromptMode) -> Result<String> {
    if seg.span.is_empty() {
        return Err(Error::data(format!("{}: empty vulnerable span", record.id)));
    }
    match mode {
        PromptMode::Full => Ok([
            record.cwe_id.as_str(),
            &seg.prefix,
            START_LOC,
            &seg.span,
            END_LOC,
            &seg.suffix,
        ]
        .iter()
        .filter(|p| !p.is_empty())
        .copied()
        .collect::<Vec<_>>()
        .join(" ")),
        PromptMode::Stripped => serialize(&record.vulnerable_code),
    }
}

/// `cwe_id <prefix> <StartLoc> <span> <EndLoc> <suffix>` plus the target.
pub fn insert_prompts(record: &SampleRecord) -> Result<PromptedExample> {
    prepare(record, PromptMode::Full)
}

/// Serialized text that `fixed_code` has where `vulnerable_code` has the span,
/// or [`EMPTY_PATCH`] when the fix deletes it.
pub fn build_target(record: &SampleRecord) -> Result<String> {
    target_from_segments(record, &segment(record)?)
}

fn target_from_segments(record: &SampleRecord, seg: &Segments) -> Result<String> {
    let fixed = serialize(&record.fixed_code)?;
    let misaligned = || Error::data(format!("{}: fixed code does not align with the vulnerable span", record.id));
    if fixed.len() < seg.prefix.len() + seg.suffix.len()
        || !fixed.starts_with(&seg.prefix)
        || !fixed.ends_with(&seg.suffix)
    {
        return Err(misaligned());
    }
    let middle = fixed[seg.prefix.len()..fixed.len() - seg.suffix.len()].trim();
    if seg.splice(middle) != fixed {
        return Err(misaligned());
    }
    Ok(if middle.is_empty() {
        EMPTY_PATCH.to_string()
    } else {
        middle.to_string()
    })
}

/// The serialized vulnerable function with its span replaced by `patch`.
pub fn extract_patch(patch: &str, record: &SampleRecord) -> Result<String> {
    let seg = segment(record)?;
    let patch = if patch.trim() == EMPTY_PATCH { "" } else { patch };
    Ok(seg.splice(patch))
}
