//! Token inventory, dialect tags and per-utterance targets.
//!
//! Ids are 0-based over `V'`: base tokens first, then the three tags. The
//! shared start/end symbol takes id `|V'|`, so decoder and LM outputs have
//! `|V'| + 1` classes. CTC classes shift every id up by one to make room for
//! the blank at 0.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Dialect {
    #[serde(rename = "UL")]
    Ul,
    #[serde(rename = "CO")]
    Co,
    #[serde(rename = "MU")]
    Mu,
}

impl Dialect {
    pub const ALL: [Dialect; 3] = [Dialect::Ul, Dialect::Co, Dialect::Mu];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> &'static str {
        match self {
            Dialect::Ul => "UL",
            Dialect::Co => "CO",
            Dialect::Mu => "MU",
        }
    }

    pub fn tag(self) -> String {
        format!("[{}]", self.code())
    }

    pub fn from_tag(tag: &str) -> Option<Dialect> {
        tag.strip_prefix('[')?.strip_suffix(']')?.parse().ok()
    }
}

impl fmt::Display for Dialect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Dialect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "UL" | "D1" => Ok(Dialect::Ul),
            "CO" | "D2" => Ok(Dialect::Co),
            "MU" | "D3" => Ok(Dialect::Mu),
            _ => Err(Error::Label(format!("unknown dialect {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    base: usize,
    tagged: bool,
}

impl Vocabulary {
    pub fn new<S: AsRef<str>>(tokens: &[S]) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            let t = t.as_ref();
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Vocabulary(format!("invalid token {t:?}")));
            }
            if t.starts_with('[') && t.ends_with(']') {
                return Err(Error::Vocabulary(format!("base token {t:?} looks like a tag")));
            }
            if index.insert(t.to_string(), i).is_some() {
                return Err(Error::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self {
            tokens: tokens.iter().map(|t| t.as_ref().to_string()).collect(),
            index,
            base: tokens.len(),
            tagged: false,
        })
    }

    /// Appends the three dialect tags after the base tokens.
    pub fn extend_with_tags(&self) -> Result<Self> {
        if self.tagged {
            return Err(Error::Vocabulary("vocabulary already contains dialect tags".into()));
        }
        let mut out = self.clone();
        for d in Dialect::ALL {
            out.index.insert(d.tag(), out.tokens.len());
            out.tokens.push(d.tag());
        }
        out.tagged = true;
        Ok(out)
    }

    /// `|V'|` (or `|V|` before extension).
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn base_len(&self) -> usize {
        self.base
    }

    pub fn has_tags(&self) -> bool {
        self.tagged
    }

    /// The shared start/end-of-sequence id.
    pub fn eos(&self) -> usize {
        self.tokens.len()
    }

    pub fn sos(&self) -> usize {
        self.eos()
    }

    /// Decoder / LM output size.
    pub fn output_classes(&self) -> usize {
        self.tokens.len() + 1
    }

    /// CTC output size including the blank.
    pub fn ctc_classes(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn tag_id(&self, d: Dialect) -> Result<usize> {
        if !self.tagged {
            return Err(Error::Vocabulary("vocabulary has no dialect tags".into()));
        }
        Ok(self.base + d.index())
    }

    pub fn dialect_of(&self, id: usize) -> Option<Dialect> {
        if self.tagged && id >= self.base && id < self.base + 3 {
            Some(Dialect::ALL[id - self.base])
        } else {
            None
        }
    }

    pub fn is_tag(&self, id: usize) -> bool {
        self.dialect_of(id).is_some()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::Vocabulary(format!("unknown token {token:?}")))
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        if id == self.eos() {
            return Ok("<eos>");
        }
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Vocabulary(format!("token id {id} outside {}", self.tokens.len())))
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter().map(|&i| self.token(i).map(str::to_string)).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; tags keep their brackets.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let base: Vec<&str> = lines.iter().copied().take_while(|l| Dialect::from_tag(l).is_none()).collect();
        let v = Self::new(&base)?;
        let rest = &lines[base.len()..];
        if rest.is_empty() {
            return Ok(v);
        }
        let expect: Vec<String> = Dialect::ALL.iter().map(|d| d.tag()).collect();
        if rest != expect.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("expected tags {expect:?} after base tokens, found {rest:?}"),
            });
        }
        v.extend_with_tags()
    }
}

/// Training targets of one utterance, as `V'` ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceTargets {
    /// `[sos, tag, tokens…, eos]`.
    pub decoder: Vec<usize>,
    /// `[tag, tokens…]`; also the ASR intermediate target.
    pub ctc: Vec<usize>,
    /// `[tag]`.
    pub did: Vec<usize>,
    pub dialect: Dialect,
}

impl UtteranceTargets {
    pub fn ctc_classes(&self) -> Vec<usize> {
        self.ctc.iter().map(|&i| i + 1).collect()
    }

    pub fn did_classes(&self) -> Vec<usize> {
        self.did.iter().map(|&i| i + 1).collect()
    }

    /// Decoder input (`[sos, …]`) and output (`[…, eos]`) sequences.
    pub fn teacher_forcing(&self) -> (&[usize], &[usize]) {
        (&self.decoder[..self.decoder.len() - 1], &self.decoder[1..])
    }
}

/// With `tagged = false` the dialect tag is left out of the decoder and CTC
/// targets; the DID target keeps it.
pub fn build_targets(vocab: &Vocabulary, text: &[usize], dialect: Dialect, tagged: bool) -> Result<UtteranceTargets> {
    let tag = vocab.tag_id(dialect)?;
    if let Some(&bad) = text.iter().find(|&&t| t >= vocab.base_len()) {
        return Err(Error::Vocabulary(format!("text id {bad} is not a base token")));
    }
    let mut ctc = Vec::with_capacity(text.len() + 1);
    if tagged {
        ctc.push(tag);
    }
    ctc.extend_from_slice(text);
    let mut decoder = Vec::with_capacity(ctc.len() + 2);
    decoder.push(vocab.sos());
    decoder.extend_from_slice(&ctc);
    decoder.push(vocab.eos());
    Ok(UtteranceTargets {
        decoder,
        ctc,
        did: vec![tag],
        dialect,
    })
}

/// A decoded sequence split into its leading dialect tag and text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stripped {
    pub dialect: Option<Dialect>,
    pub text: Vec<usize>,
    /// A tag appeared after the first position.
    pub malformed: bool,
}

/// Splits off a leading tag (after an optional sos) and drops sos/eos and any
/// later tags.
pub fn strip_tag(vocab: &Vocabulary, ids: &[usize]) -> Stripped {
    let body: Vec<usize> = ids.iter().copied().filter(|&i| i != vocab.eos()).collect();
    let dialect = body.first().and_then(|&i| vocab.dialect_of(i));
    let rest = if dialect.is_some() { &body[1..] } else { &body[..] };
    let malformed = rest.iter().any(|&i| vocab.is_tag(i));
    Stripped {
        dialect,
        text: rest.iter().copied().filter(|&i| !vocab.is_tag(i)).collect(),
        malformed,
    }
}
