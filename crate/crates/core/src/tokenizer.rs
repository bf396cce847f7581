//! Character-level byte-pair encoding with atomic reserved tokens.
//!
//! Text is first cut at reserved-token occurrences, then into pieces: an
//! optional single leading space followed by a run of alphanumerics or a run
//! of punctuation, a lone `_`, or a lone whitespace character. Merges never
//! cross piece boundaries.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::preproc::{EMPTY_PATCH, END_LOC, START_LOC};

pub const PAD: &str = "<Pad>";
pub const BOS: &str = "<Bos>";
pub const EOS: &str = "<Eos>";
pub const UNK: &str = "<Unk>";

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const EMPTY_ID: usize = 4;

/// Reserved tokens every vocabulary starts with, in id order.
pub const BASE_SPECIALS: [&str; 7] = [PAD, BOS, EOS, UNK, EMPTY_PATCH, START_LOC, END_LOC];

const FILE_HEADER: &str = "crepair-bpe 1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeVocab {
    /// Merge rules in learned order.
    pub merges: Vec<(String, String)>,
    pub token_to_id: HashMap<String, usize>,
    pub id_to_token: Vec<String>,
    /// Reserved tokens in id order; ids `0..specials.len()`.
    pub specials: Vec<String>,
    alphabet: Vec<char>,
    ranks: HashMap<(usize, usize), (usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        let mask = vec![true; ids.len()];
        TokenSequence { ids, mask }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of real (unpadded) tokens.
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Pads with `<Pad>` up to `len`; never shortens.
    pub fn padded(mut self, len: usize) -> Self {
        while self.ids.len() < len {
            self.ids.push(PAD_ID);
            self.mask.push(false);
        }
        self
    }

    /// Keeps at most `max_len` tokens, ending on `<Eos>` if one was cut.
    pub fn truncated(mut self, max_len: usize) -> Self {
        if self.ids.len() > max_len && max_len > 0 {
            self.ids.truncate(max_len);
            self.mask.truncate(max_len);
            self.ids[max_len - 1] = EOS_ID;
        }
        self
    }
}

/// Reserved tokens: the base set followed by the extra ones, sorted.
pub fn special_tokens<S: AsRef<str>>(extra: &[S]) -> Vec<String> {
    let extra: BTreeSet<&str> = extra
        .iter()
        .map(|s| s.as_ref())
        .filter(|s| !BASE_SPECIALS.contains(s))
        .collect();
    BASE_SPECIALS.iter().copied().chain(extra).map(str::to_string).collect()
}

enum Piece<'a> {
    Special(usize),
    Text(&'a str),
}

/// Splits at reserved tokens (longest match first), then into pieces.
fn pretokenize<'a>(text: &'a str, specials_by_len: &[(usize, &str)]) -> Vec<Piece<'a>> {
    let mut pieces = Vec::new();
    let mut plain_start = 0;
    let mut i = 0;
    let bytes = text.as_bytes();
    while i < text.len() {
        let rest = &text[i..];
        if let Some(&(id, s)) = specials_by_len.iter().find(|(_, s)| rest.starts_with(s)) {
            split_plain(&text[plain_start..i], &mut pieces);
            pieces.push(Piece::Special(id));
            i += s.len();
            plain_start = i;
            continue;
        }
        i += 1;
        while i < text.len() && (bytes[i] & 0xC0) == 0x80 {
            i += 1;
        }
    }
    split_plain(&text[plain_start..], &mut pieces);
    pieces
}

#[derive(PartialEq, Eq, Clone, Copy)]
enum Class {
    Alnum,
    Punct,
    Underscore,
    Space,
}

fn class(c: char) -> Class {
    if c == '_' {
        Class::Underscore
    } else if c.is_alphanumeric() {
        Class::Alnum
    } else if c.is_whitespace() {
        Class::Space
    } else {
        Class::Punct
    }
}

fn split_plain<'a>(text: &'a str, out: &mut Vec<Piece<'a>>) {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let start = chars[i].0;
        let mut cls = class(chars[i].1);
        if chars[i].1 == ' ' && i + 1 < chars.len() && class(chars[i + 1].1) != Class::Space {
            i += 1;
            cls = class(chars[i].1);
        }
        i += 1;
        if matches!(cls, Class::Alnum | Class::Punct) {
            while i < chars.len() && class(chars[i].1) == cls {
                i += 1;
            }
        }
        let end = chars.get(i).map_or(text.len(), |c| c.0);
        out.push(Piece::Text(&text[start..end]));
    }
}

fn by_length(specials: &[String]) -> Vec<(usize, &str)> {
    let mut v: Vec<(usize, &str)> = specials.iter().map(|s| s.as_str()).enumerate().collect();
    v.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.1.cmp(b.1)));
    v
}

/// Learns merges on `texts` until `vocab_size` tokens exist or no adjacent
/// pair occurs at least twice. Ties go to the lexicographically smaller pair.
pub fn train_bpe<S: AsRef<str>>(texts: &[S], vocab_size: usize, specials: &[String]) -> Result<BpeVocab> {
    let specials = special_tokens(specials);
    let ordered = by_length(&specials);
    let mut piece_counts: HashMap<&str, usize> = HashMap::new();
    for text in texts {
        for piece in pretokenize(text.as_ref(), &ordered) {
            if let Piece::Text(p) = piece {
                *piece_counts.entry(p).or_default() += 1;
            }
        }
    }
    if piece_counts.is_empty() {
        return Err(Error::data("cannot train a tokenizer on an empty corpus"));
    }
    let alphabet: Vec<char> = piece_counts
        .keys()
        .flat_map(|p| p.chars())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if vocab_size <= alphabet.len() + specials.len() {
        return Err(Error::invalid(format!(
            "vocab size {vocab_size} must exceed alphabet ({}) plus reserved tokens ({})",
            alphabet.len(),
            specials.len()
        )));
    }
    let mut vocab = BpeVocab::from_parts(specials, alphabet, Vec::new())?;

    // Unique pieces in a fixed order so counting is deterministic.
    let mut words: Vec<(Vec<usize>, usize)> = {
        let mut sorted: Vec<(&str, usize)> = piece_counts.into_iter().collect();
        sorted.sort_unstable();
        sorted
            .into_iter()
            .map(|(p, n)| (p.chars().map(|c| vocab.token_to_id[&c.to_string()]).collect(), n))
            .collect()
    };

    while vocab.id_to_token.len() < vocab_size {
        let mut pair_counts: HashMap<(usize, usize), usize> = HashMap::new();
        for (word, n) in &words {
            for w in word.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_default() += n;
            }
        }
        let best = pair_counts.into_iter().max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb).then_with(|| {
                let ka = (&vocab.id_to_token[pa.0], &vocab.id_to_token[pa.1]);
                let kb = (&vocab.id_to_token[pb.0], &vocab.id_to_token[pb.1]);
                kb.cmp(&ka)
            })
        });
        let Some(((a, b), count)) = best else { break };
        if count < 2 {
            break;
        }
        let merged = vocab.push_merge(a, b);
        for (word, _) in &mut words {
            merge_in_place(word, a, b, merged);
        }
    }
    Ok(vocab)
}

fn merge_in_place(word: &mut Vec<usize>, a: usize, b: usize, merged: usize) {
    if word.len() < 2 {
        return;
    }
    let mut out = 0;
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && word[i] == a && word[i + 1] == b {
            word[out] = merged;
            i += 2;
        } else {
            word[out] = word[i];
            i += 1;
        }
        out += 1;
    }
    word.truncate(out);
}

impl BpeVocab {
    fn from_parts(specials: Vec<String>, alphabet: Vec<char>, merges: Vec<(String, String)>) -> Result<Self> {
        for (i, s) in BASE_SPECIALS.iter().enumerate() {
            if specials.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::data(format!("reserved token {s} missing or out of order")));
            }
        }
        let mut vocab = BpeVocab {
            merges: Vec::new(),
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
            specials: specials.clone(),
            alphabet: alphabet.clone(),
            ranks: HashMap::new(),
        };
        for s in specials {
            vocab.intern(s)?;
        }
        for c in alphabet {
            vocab.intern(c.to_string())?;
        }
        for (a, b) in merges {
            let (Some(&ia), Some(&ib)) = (vocab.token_to_id.get(&a), vocab.token_to_id.get(&b)) else {
                return Err(Error::data(format!("merge ({a:?}, {b:?}) uses an unknown token")));
            };
            if ia < vocab.specials.len() || ib < vocab.specials.len() {
                return Err(Error::data("merge rule touches a reserved token"));
            }
            vocab.push_merge(ia, ib);
        }
        Ok(vocab)
    }

    fn intern(&mut self, token: String) -> Result<usize> {
        if self.token_to_id.contains_key(&token) {
            return Err(Error::data(format!("duplicate token {token:?}")));
        }
        let id = self.id_to_token.len();
        self.token_to_id.insert(token.clone(), id);
        self.id_to_token.push(token);
        Ok(id)
    }

    fn push_merge(&mut self, a: usize, b: usize) -> usize {
        let joined = format!("{}{}", self.id_to_token[a], self.id_to_token[b]);
        let id = match self.token_to_id.get(&joined) {
            Some(&id) => id,
            None => {
                let id = self.id_to_token.len();
                self.token_to_id.insert(joined.clone(), id);
                self.id_to_token.push(joined);
                id
            }
        };
        self.ranks.insert((a, b), (self.merges.len(), id));
        self.merges
            .push((self.id_to_token[a].clone(), self.id_to_token[b].clone()));
        id
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < self.specials.len()
    }

    /// `<Bos>`, the merged pieces of `text`, `<Eos>`.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let ordered = by_length(&self.specials);
        let mut ids = vec![BOS_ID];
        for piece in pretokenize(text, &ordered) {
            match piece {
                Piece::Special(id) => ids.push(id),
                Piece::Text(p) => self.encode_piece(p, &mut ids),
            }
        }
        ids.push(EOS_ID);
        TokenSequence::new(ids)
    }

    fn encode_piece(&self, piece: &str, out: &mut Vec<usize>) {
        let mut word: Vec<usize> = piece
            .chars()
            .map(|c| {
                let mut buf = [0u8; 4];
                self.id(c.encode_utf8(&mut buf)).unwrap_or(UNK_ID)
            })
            .collect();
        loop {
            let best = word
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&(rank, id)| (rank, w[0], w[1], id)))
                .min();
            let Some((_, a, b, merged)) = best else { break };
            merge_in_place(&mut word, a, b, merged);
        }
        out.extend(word);
    }

    /// Concatenated surface forms; padding, `<Bos>` and `<Eos>` are dropped
    /// and `<Empty>` decodes to nothing.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let token = self
                .id_to_token
                .get(id)
                .ok_or_else(|| Error::invalid(format!("token id {id} outside vocabulary of {}", self.len())))?;
            match id {
                PAD_ID | BOS_ID | EOS_ID | EMPTY_ID => {}
                _ => out.push_str(token),
            }
        }
        Ok(out)
    }

    pub fn decode_sequence(&self, seq: &TokenSequence) -> Result<String> {
        let ids: Vec<usize> = seq.ids.iter().zip(&seq.mask).filter(|(_, &m)| m).map(|(&i, _)| i).collect();
        self.decode(&ids)
    }

    /// Line-oriented text form. Tokens are escaped (`\\`, `\s` for space,
    /// `\t`, `\n`, `\r`) so every field is free of whitespace.
    ///
    /// ```text
    /// crepair-bpe 1
    /// alphabet <n>
    /// <char>            (n lines)
    /// merges <m>
    /// <left> <right>    (m lines, in learned order)
    /// specials <k>
    /// <token>           (k lines, in id order)
    /// ```
    ///
    /// Ids follow from the file: reserved tokens, then the alphabet, then each
    /// merge result that is not already present.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{FILE_HEADER}");
        let _ = writeln!(s, "alphabet {}", self.alphabet.len());
        for c in &self.alphabet {
            let _ = writeln!(s, "{}", escape(&c.to_string()));
        }
        let _ = writeln!(s, "merges {}", self.merges.len());
        for (a, b) in &self.merges {
            let _ = writeln!(s, "{} {}", escape(a), escape(b));
        }
        let _ = writeln!(s, "specials {}", self.specials.len());
        for t in &self.specials {
            let _ = writeln!(s, "{}", escape(t));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut next = |what: &str| lines.next().ok_or_else(|| Error::data(format!("vocabulary file ends before {what}")));
        if next("header")? != FILE_HEADER {
            return Err(Error::data("not a vocabulary file (bad header)"));
        }
        let count = |line: &str, key: &str| -> Result<usize> {
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .and_then(|r| r.parse().ok())
                .ok_or_else(|| Error::data(format!("expected `{key} <count>`, got {line:?}")))
        };
        let n = count(next("alphabet")?, "alphabet")?;
        let mut alphabet = Vec::with_capacity(n);
        for _ in 0..n {
            let tok = unescape(next("alphabet entry")?)?;
            let mut chars = tok.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => alphabet.push(c),
                _ => return Err(Error::data(format!("alphabet entry {tok:?} is not one character"))),
            }
        }
        let m = count(next("merges")?, "merges")?;
        let mut merges = Vec::with_capacity(m);
        for _ in 0..m {
            let line = next("merge rule")?;
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| Error::data(format!("malformed merge rule {line:?}")))?;
            merges.push((unescape(a)?, unescape(b)?));
        }
        let k = count(next("specials")?, "specials")?;
        let mut specials = Vec::with_capacity(k);
        for _ in 0..k {
            specials.push(unescape(next("reserved token")?)?);
        }
        BpeVocab::from_parts(specials, alphabet, merges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn escape(token: &str) -> String {
    let mut s = String::with_capacity(token.len());
    for c in token.chars() {
        match c {
            '\\' => s.push_str("\\\\"),
            ' ' => s.push_str("\\s"),
            '\t' => s.push_str("\\t"),
            '\n' => s.push_str("\\n"),
            '\r' => s.push_str("\\r"),
            c => s.push(c),
        }
    }
    s
}

fn unescape(field: &str) -> Result<String> {
    let mut s = String::with_capacity(field.len());
    let mut chars = field.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            s.push(c);
            continue;
        }
        s.push(match chars.next() {
            Some('\\') => '\\',
            Some('s') => ' ',
            Some('t') => '\t',
            Some('n') => '\n',
            Some('r') => '\r',
            other => return Err(Error::data(format!("bad escape \\{other:?} in {field:?}"))),
        });
    }
    if s.is_empty() {
        return Err(Error::data("empty token in vocabulary file"));
    }
    Ok(s)
}
