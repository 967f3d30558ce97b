use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::Vocab;

pub const END: &str = "<|end|>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn marker(self) -> &'static str {
        match self {
            Role::System => "<|system|>",
            Role::User => "<|user|>",
            Role::Assistant => "<|assistant|>",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

impl Turn {
    pub fn new(role: Role, text: impl Into<String>) -> Self {
        Turn {
            role,
            text: text.into(),
        }
    }
}

/// One line of an SFT data file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conversation {
    pub turns: Vec<Turn>,
}

/// Optional leading system turn, then strictly alternating user/assistant
/// turns starting with user.
pub fn check_roles(turns: &[Turn]) -> Result<()> {
    let body = match turns.first() {
        Some(t) if t.role == Role::System => &turns[1..],
        _ => turns,
    };
    if body.is_empty() {
        return Err(Error::Input("conversation has no user turn".into()));
    }
    for (i, t) in body.iter().enumerate() {
        let want = if i % 2 == 0 {
            Role::User
        } else {
            Role::Assistant
        };
        if t.role != want {
            return Err(Error::Input(format!(
                "turn {} has role {:?}, expected {want:?}",
                i + turns.len() - body.len(),
                t.role
            )));
        }
    }
    Ok(())
}

fn push(
    vocab: &Vocab,
    text: &str,
    on: bool,
    ids: &mut Vec<usize>,
    mask: &mut Vec<bool>,
) -> Result<()> {
    let enc = vocab.encode_str(text)?;
    mask.extend(std::iter::repeat_n(on, enc.len()));
    ids.extend(enc);
    Ok(())
}

/// Renders `<|role|>text<|end|>` per turn after a leading bos. Marker, text
/// and end are tokenized separately so token boundaries never straddle them.
/// The mask is set on assistant text and the tokens of its end marker.
pub fn render_chat(conv: &Conversation, vocab: &Vocab) -> Result<(Vec<usize>, Vec<bool>)> {
    check_roles(&conv.turns)?;
    let mut ids = vec![vocab.bos()];
    let mut mask = vec![false];
    for t in &conv.turns {
        let on = t.role == Role::Assistant;
        push(vocab, t.role.marker(), false, &mut ids, &mut mask)?;
        push(vocab, &t.text, on, &mut ids, &mut mask)?;
        push(vocab, END, on, &mut ids, &mut mask)?;
    }
    Ok((ids, mask))
}

/// Prompt for generation or preference scoring: the rendered turns (which
/// must end with a user turn) followed by the assistant marker.
pub fn render_prompt(turns: &[Turn], vocab: &Vocab) -> Result<Vec<usize>> {
    check_roles(turns)?;
    if turns.last().map(|t| t.role) != Some(Role::User) {
        return Err(Error::Input("a prompt must end with a user turn".into()));
    }
    let (mut ids, _) = render_chat(
        &Conversation {
            turns: turns.to_vec(),
        },
        vocab,
    )?;
    ids.extend(vocab.encode_str(Role::Assistant.marker())?);
    Ok(ids)
}

/// Assistant text followed by the end marker.
pub fn render_response(text: &str, vocab: &Vocab) -> Result<Vec<usize>> {
    let mut ids = vocab.encode_str(text)?;
    ids.extend(vocab.encode_str(END)?);
    Ok(ids)
}
