use serde::{Deserialize, Serialize};

use super::chat::Turn;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankedAnswer {
    pub text: String,
    /// Lower is better.
    pub rank: i64,
}

/// One line of a preference data file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankedRecord {
    pub prompt_turns: Vec<Turn>,
    pub answers: Vec<RankedAnswer>,
    pub lang: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt_turns: Vec<Turn>,
    pub chosen: String,
    pub rejected: String,
}

/// One pair per usable record: the first answer with the lowest rank is
/// chosen, the first with the highest rank is rejected. Records in another
/// language, with fewer than two answers, with all ranks equal, or whose
/// extreme answers share the same text are skipped.
pub fn build_preference_pairs(records: &[RankedRecord], lang: &str) -> Vec<PreferencePair> {
    records
        .iter()
        .filter(|r| r.lang == lang && r.answers.len() >= 2)
        .filter_map(|r| {
            let mut best = &r.answers[0];
            let mut worst = &r.answers[0];
            for a in &r.answers[1..] {
                if a.rank < best.rank {
                    best = a;
                }
                if a.rank > worst.rank {
                    worst = a;
                }
            }
            (best.rank != worst.rank && best.text != worst.text).then(|| PreferencePair {
                prompt_turns: r.prompt_turns.clone(),
                chosen: best.text.clone(),
                rejected: worst.text.clone(),
            })
        })
        .collect()
}
