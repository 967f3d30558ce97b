//! Chat fine-tuning and preference alignment.

pub mod chat;
pub mod dpo;
pub mod lora;
pub mod prefs;
pub mod sft;

pub use chat::{render_chat, render_prompt, render_response, Conversation, Role, Turn};
pub use dpo::{dpo_loss, dpo_pair_loss, dpo_stages, dpo_train, DpoHyper, DpoRecord, EncodedPair};
pub use lora::{lora_forward, lora_merge, LoraAdapter, LoraConfig, LoraSet};
pub use prefs::{build_preference_pairs, PreferencePair, RankedAnswer, RankedRecord};
pub use sft::{sft_loss, sft_train, SftExample, SftPlan, SftRecord};
