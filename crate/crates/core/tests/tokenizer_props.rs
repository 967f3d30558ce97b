//! Encode/decode round trips and statistical checks of remapped rows.

mod oracle;

use danube::model::{ForwardOptions, Model, ModelConfig, ModelParams};
use danube::tokenizer::{remap_embeddings, SpecialIds, Vocab};
use proptest::prelude::*;

fn small_bpe() -> Vocab {
    let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    let merges: Vec<(&str, &str)> = vec![
        ("t", "h"),
        ("th", "e"),
        ("i", "n"),
        ("in", "g"),
        (" ", "the"),
        ("e", "r"),
    ];
    for (l, r) in &merges {
        tokens.push(format!("{l}{r}").into_bytes());
    }
    let n = tokens.len();
    tokens.extend([b"<s>".to_vec(), b"</s>".to_vec(), b"<pad>".to_vec()]);
    let merges: Vec<(Vec<u8>, Vec<u8>)> = merges
        .iter()
        .map(|(l, r)| (l.as_bytes().to_vec(), r.as_bytes().to_vec()))
        .collect();
    Vocab::from_tokens(
        tokens,
        &merges,
        SpecialIds {
            bos: n,
            eos: n + 1,
            pad: n + 2,
        },
    )
    .unwrap()
}

proptest! {
    #[test]
    fn byte_level_round_trips_arbitrary_bytes(bytes in prop::collection::vec(any::<u8>(), 0..300)) {
        let v = Vocab::byte_level();
        let ids = v.encode(&bytes).unwrap();
        prop_assert_eq!(ids.len(), bytes.len());
        prop_assert_eq!(v.decode(&ids).unwrap(), bytes);
    }

    #[test]
    fn merges_round_trip_arbitrary_bytes(
        bytes in prop::collection::vec(prop::sample::select(b"the ring thing er \x00\xff".to_vec()), 0..200),
    ) {
        let v = small_bpe();
        let ids = v.encode(&bytes).unwrap();
        prop_assert!(ids.len() <= bytes.len());
        prop_assert_eq!(v.decode(&ids).unwrap(), bytes);
    }
}

#[test]
fn merges_shorten_common_words() {
    let v = small_bpe();
    let ids = v.encode(b"the thing").unwrap();
    assert!(ids.len() < 9, "{ids:?}");
    assert_eq!(v.decode(&ids).unwrap(), b"the thing");
}

#[test]
fn new_rows_follow_the_init_distribution() {
    let old = Vocab::byte_level();
    let new = small_bpe();
    let cfg = ModelConfig::tiny(old.len());
    let model = Model::<f64>::init(cfg, 2).unwrap();
    let std = 0.02;
    let r = remap_embeddings(
        &old,
        &new,
        &model.params.embed,
        &model.params.lm_head,
        std,
        3,
    )
    .unwrap();
    let h = model.config.hidden_size;
    let n = new.len();
    let mut fresh = Vec::new();
    for (id, tok) in new.tokens().iter().enumerate() {
        if old.id(tok).is_none() {
            fresh.extend_from_slice(r.embedding.row(id));
            fresh.extend((0..h).map(|k| r.head.data()[k * n + id]));
        }
    }
    // 6 merged tokens and 3 renamed specials are new.
    assert_eq!(fresh.len(), 9 * 2 * h);
    let m = fresh.len() as f64;
    let mean = fresh.iter().sum::<f64>() / m;
    let var = fresh.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
    // Mean: 4 standard errors. Variance of a normal sample: sd ≈ σ²·sqrt(2/(m-1)).
    assert!(mean.abs() <= 4.0 * std / m.sqrt(), "mean {mean}");
    assert!(
        (var - std * std).abs() <= 4.0 * std * std * (2.0 / (m - 1.0)).sqrt(),
        "var {var}"
    );
}

#[test]
fn remapped_model_loads_and_produces_finite_logits() {
    let old = Vocab::byte_level();
    let new = small_bpe();
    let model = Model::<f64>::init(ModelConfig::tiny(old.len()), 4).unwrap();
    let r = remap_embeddings(
        &old,
        &new,
        &model.params.embed,
        &model.params.lm_head,
        0.02,
        5,
    )
    .unwrap();
    let mut cfg = model.config.clone();
    cfg.vocab_size = new.len();
    let mut tensors = model.params.into_tensors();
    let last = tensors.len() - 1;
    tensors[0] = r.embedding;
    tensors[last] = r.head;
    let remapped = Model::new(
        cfg.clone(),
        ModelParams::from_tensors(&cfg, tensors).unwrap(),
    )
    .unwrap();
    let ids = new.encode(b"the ring").unwrap();
    let logits = remapped.forward(&ids, &ForwardOptions::default()).unwrap();
    assert_eq!(logits.shape(), [ids.len(), new.len()]);
    assert!(logits.data().iter().all(|x| x.is_finite()));
}
