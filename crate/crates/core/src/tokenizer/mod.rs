//! Byte-string vocabularies with optional BPE merges, plus embedding remap
//! across vocabularies.
//!
//! On-disk vocabulary: one base64-encoded token per line, the line number is
//! the id. Merges: one `left right` pair per line (each side base64), in
//! priority order.

mod remap;

pub use remap::{remap_embeddings, Remapped};

use std::collections::HashMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpecialIds {
    pub bos: usize,
    pub eos: usize,
    pub pad: usize,
}

/// Token strings looked up to find the special ids of a loaded vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpecialTokens {
    pub bos: Vec<u8>,
    pub eos: Vec<u8>,
    /// Falls back to `eos` when absent from the vocabulary.
    pub pad: Vec<u8>,
}

impl Default for SpecialTokens {
    fn default() -> Self {
        Self {
            bos: b"<s>".to_vec(),
            eos: b"</s>".to_vec(),
            pad: b"<pad>".to_vec(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Vocab {
    id_to_token: Vec<Vec<u8>>,
    token_to_id: HashMap<Vec<u8>, usize>,
    /// `(left id, right id) → (rank, merged id)`
    merges: HashMap<(usize, usize), (usize, usize)>,
    special: SpecialIds,
}

pub const BYTE_BOS: &[u8] = b"<|bos|>";
pub const BYTE_EOS: &[u8] = b"<|eos|>";
pub const BYTE_PAD: &[u8] = b"<|pad|>";

impl Vocab {
    /// 256 single-byte tokens (id = byte value) followed by bos, eos, pad.
    pub fn byte_level() -> Self {
        let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        tokens.extend([BYTE_BOS.to_vec(), BYTE_EOS.to_vec(), BYTE_PAD.to_vec()]);
        Self::from_tokens(
            tokens,
            &[],
            SpecialIds {
                bos: 256,
                eos: 257,
                pad: 258,
            },
        )
        .expect("byte vocab")
    }

    /// Builds a vocabulary from token strings and merge pairs (by token string).
    pub fn from_tokens(
        tokens: Vec<Vec<u8>>,
        merges: &[(Vec<u8>, Vec<u8>)],
        special: SpecialIds,
    ) -> Result<Self> {
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), id).is_some() {
                return Err(Error::Vocab(format!(
                    "duplicate token {:?} at id {id}",
                    String::from_utf8_lossy(t)
                )));
            }
        }
        for (name, id) in [
            ("bos", special.bos),
            ("eos", special.eos),
            ("pad", special.pad),
        ] {
            if id >= tokens.len() {
                return Err(Error::Vocab(format!(
                    "{name} id {id} outside vocabulary of {}",
                    tokens.len()
                )));
            }
        }
        let mut merge_map = HashMap::with_capacity(merges.len());
        for (rank, (l, r)) in merges.iter().enumerate() {
            let lookup = |t: &[u8]| {
                token_to_id.get(t).copied().ok_or_else(|| {
                    Error::Vocab(format!(
                        "merge {rank} uses unknown token {:?}",
                        String::from_utf8_lossy(t)
                    ))
                })
            };
            let (li, ri) = (lookup(l)?, lookup(r)?);
            let joined = [l.as_slice(), r.as_slice()].concat();
            let mi = lookup(&joined)?;
            merge_map.entry((li, ri)).or_insert((rank, mi));
        }
        Ok(Self {
            id_to_token: tokens,
            token_to_id,
            merges: merge_map,
            special,
        })
    }

    pub fn load(
        vocab_path: &Path,
        merges_path: Option<&Path>,
        special: &SpecialTokens,
    ) -> Result<Self> {
        let text = std::fs::read_to_string(vocab_path)?;
        let tokens = text
            .lines()
            .enumerate()
            .map(|(i, line)| {
                B64.decode(line.trim_end_matches('\r'))
                    .map_err(|e| Error::Vocab(format!("{}:{}: {e}", vocab_path.display(), i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        let merges = match merges_path {
            Some(p) => parse_merges(&std::fs::read_to_string(p)?)?,
            None => Vec::new(),
        };
        let find = |t: &[u8]| tokens.iter().position(|x| x == t);
        let bos = find(&special.bos).ok_or_else(|| {
            Error::Vocab(format!(
                "bos token {:?} not found",
                String::from_utf8_lossy(&special.bos)
            ))
        })?;
        let eos = find(&special.eos).ok_or_else(|| {
            Error::Vocab(format!(
                "eos token {:?} not found",
                String::from_utf8_lossy(&special.eos)
            ))
        })?;
        let pad = find(&special.pad).unwrap_or(eos);
        Self::from_tokens(tokens, &merges, SpecialIds { bos, eos, pad })
    }

    /// Writes the vocabulary (and merges, when present) in the on-disk format.
    pub fn save(&self, vocab_path: &Path, merges_path: Option<&Path>) -> Result<()> {
        let mut out = String::new();
        for t in &self.id_to_token {
            out.push_str(&B64.encode(t));
            out.push('\n');
        }
        std::fs::write(vocab_path, out)?;
        if let Some(p) = merges_path {
            let mut ranked: Vec<_> = self
                .merges
                .iter()
                .map(|(&(l, r), &(rank, _))| (rank, l, r))
                .collect();
            ranked.sort_unstable();
            let mut out = String::new();
            for (_, l, r) in ranked {
                out.push_str(&format!(
                    "{} {}\n",
                    B64.encode(&self.id_to_token[l]),
                    B64.encode(&self.id_to_token[r])
                ));
            }
            std::fs::write(p, out)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn special(&self) -> &SpecialIds {
        &self.special
    }

    pub fn bos(&self) -> usize {
        self.special.bos
    }

    pub fn eos(&self) -> usize {
        self.special.eos
    }

    pub fn pad(&self) -> usize {
        self.special.pad
    }

    pub fn token(&self, id: usize) -> Option<&[u8]> {
        self.id_to_token.get(id).map(Vec::as_slice)
    }

    pub fn id(&self, token: &[u8]) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn tokens(&self) -> &[Vec<u8>] {
        &self.id_to_token
    }

    /// Splits into single-byte tokens, then repeatedly applies the
    /// highest-priority merge present, merging all its non-overlapping
    /// occurrences left to right.
    pub fn encode(&self, text: &[u8]) -> Result<Vec<usize>> {
        let mut ids = text
            .iter()
            .map(|&b| {
                self.token_to_id
                    .get([b].as_slice())
                    .copied()
                    .ok_or(Error::UnknownByte(b))
            })
            .collect::<Result<Vec<_>>>()?;
        if self.merges.is_empty() {
            return Ok(ids);
        }
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| {
                    self.merges
                        .get(&(w[0], w[1]))
                        .map(|&(rank, _)| (rank, (w[0], w[1])))
                })
                .min();
            let Some((_, pair)) = best else { break };
            let merged = self.merges[&pair].1;
            let mut out = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(ids[i]);
                    i += 1;
                }
            }
            ids = out;
        }
        Ok(ids)
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let t = self.token(id).ok_or(Error::TokenRange {
                id,
                size: self.len(),
            })?;
            out.extend_from_slice(t);
        }
        Ok(out)
    }

    pub fn encode_str(&self, text: &str) -> Result<Vec<usize>> {
        self.encode(text.as_bytes())
    }

    pub fn decode_lossy(&self, ids: &[usize]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode(ids)?).into_owned())
    }
}

fn parse_merges(text: &str) -> Result<Vec<(Vec<u8>, Vec<u8>)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = |m: String| Error::Vocab(format!("merges line {}: {m}", i + 1));
            let (l, r) = line
                .trim_end_matches('\r')
                .split_once(' ')
                .ok_or_else(|| bad("expected `left right`".into()))?;
            Ok((
                B64.decode(l).map_err(|e| bad(e.to_string()))?,
                B64.decode(r).map_err(|e| bad(e.to_string()))?,
            ))
        })
        .collect()
}
