use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Vocab;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Remapped<S> {
    /// `[new_vocab × hidden]`
    pub embedding: Tensor<S>,
    /// `[hidden × new_vocab]`
    pub head: Tensor<S>,
    pub matched: usize,
}

/// Carries embedding rows and head columns over to a new vocabulary.
///
/// Tokens whose byte string exists in both vocabularies are copied bit for
/// bit; the rest are drawn from `normal(0, init_std)`. For each unmatched id
/// in increasing order, the embedding row is drawn first, then the head
/// column.
pub fn remap_embeddings<S: Scalar>(
    old_vocab: &Vocab,
    new_vocab: &Vocab,
    old_embedding: &Tensor<S>,
    old_head: &Tensor<S>,
    init_std: f64,
    seed: u64,
) -> Result<Remapped<S>> {
    let (rows, hidden) = old_embedding.dims2()?;
    if rows != old_vocab.len() {
        return Err(Error::shape(
            "remap_embeddings",
            old_embedding.shape(),
            &[old_vocab.len(), hidden],
        ));
    }
    if old_head.shape() != [hidden, rows] {
        return Err(Error::shape(
            "remap_embeddings",
            old_head.shape(),
            &[hidden, rows],
        ));
    }
    let normal = Normal::new(0.0, init_std).map_err(|e| Error::Config(vec![e.to_string()]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = new_vocab.len();
    let mut emb = vec![S::zero(); n * hidden];
    let mut head = vec![S::zero(); hidden * n];
    let old_h = old_head.data();
    let mut matched = 0;
    for (new_id, token) in new_vocab.tokens().iter().enumerate() {
        let row = &mut emb[new_id * hidden..(new_id + 1) * hidden];
        match old_vocab.id(token) {
            Some(old_id) => {
                matched += 1;
                row.copy_from_slice(old_embedding.row(old_id));
                for k in 0..hidden {
                    head[k * n + new_id] = old_h[k * rows + old_id];
                }
            }
            None => {
                row.iter_mut()
                    .for_each(|x| *x = S::cast(normal.sample(&mut rng)));
                for k in 0..hidden {
                    head[k * n + new_id] = S::cast(normal.sample(&mut rng));
                }
            }
        }
    }
    Ok(Remapped {
        embedding: Tensor::new([n, hidden], emb)?,
        head: Tensor::new([hidden, n], head)?,
        matched,
    })
}
