use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::text::dataset::EncodedExample;
use crate::text::vocab::PAD;

/// A padded group of examples. Padding is per batch; content is
/// left-aligned and every mask row is a run of `true` followed by `false`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Positions of the batch rows in the source example slice.
    pub indices: Vec<usize>,
    pub text_ids: Vec<Vec<usize>>,
    pub text_mask: Vec<Vec<bool>>,
    /// `[row][context][position]`, contexts padded to the batch's longest.
    pub context_ids: Vec<Vec<Vec<usize>>>,
    pub context_mask: Vec<Vec<Vec<bool>>>,
    pub labels: Vec<usize>,
}

/// Borrowed view of one example: the unpadded text and each context with
/// its mask.
#[derive(Clone, Debug)]
pub struct ExampleView<'a> {
    pub text: &'a [usize],
    pub contexts: Vec<(&'a [usize], &'a [bool])>,
    pub label: usize,
}

impl<'a> ExampleView<'a> {
    /// View of an unpadded example: every context position is unmasked.
    pub fn unpadded(ex: &'a EncodedExample, masks: &'a [Vec<bool>]) -> Self {
        ExampleView {
            text: &ex.text,
            contexts: ex
                .contexts
                .iter()
                .zip(masks)
                .map(|(c, m)| (c.as_slice(), m.as_slice()))
                .collect(),
            label: ex.label,
        }
    }
}

/// All-true masks matching each context of `ex`.
pub fn full_masks(ex: &EncodedExample) -> Vec<Vec<bool>> {
    ex.contexts.iter().map(|c| vec![true; c.len()]).collect()
}

fn pad(ids: &[usize], len: usize) -> (Vec<usize>, Vec<bool>) {
    let mut out = ids.to_vec();
    out.resize(len, PAD);
    let mask = (0..len).map(|i| i < ids.len()).collect();
    (out, mask)
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn from_examples(examples: &[EncodedExample], indices: &[usize]) -> Batch {
        let text_len = indices.iter().map(|&i| examples[i].text.len()).max().unwrap_or(0);
        let ctx_len = indices
            .iter()
            .flat_map(|&i| examples[i].contexts.iter().map(Vec::len))
            .max()
            .unwrap_or(0);
        let mut b = Batch {
            indices: indices.to_vec(),
            text_ids: Vec::new(),
            text_mask: Vec::new(),
            context_ids: Vec::new(),
            context_mask: Vec::new(),
            labels: Vec::new(),
        };
        for &i in indices {
            let ex = &examples[i];
            let (t, m) = pad(&ex.text, text_len);
            b.text_ids.push(t);
            b.text_mask.push(m);
            let (cs, cms): (Vec<_>, Vec<_>) = ex.contexts.iter().map(|c| pad(c, ctx_len)).unzip();
            b.context_ids.push(cs);
            b.context_mask.push(cms);
            b.labels.push(ex.label);
        }
        b
    }

    /// Row `r` with the text trimmed to its true length and contexts kept
    /// padded alongside their masks.
    pub fn example(&self, r: usize) -> ExampleView<'_> {
        let len = self.text_mask[r].iter().filter(|&&m| m).count();
        ExampleView {
            text: &self.text_ids[r][..len],
            contexts: self.context_ids[r]
                .iter()
                .zip(&self.context_mask[r])
                .map(|(c, m)| (c.as_slice(), m.as_slice()))
                .collect(),
            label: self.labels[r],
        }
    }
}

/// Shuffles under `seed` and cuts into batches of `batch_size` (the last
/// one may be short).
pub fn make_batches(examples: &[EncodedExample], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order
        .chunks(batch_size)
        .map(|chunk| Batch::from_examples(examples, chunk))
        .collect())
}
