//! Seeded synthetic tasks for desk-scale experiments.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::text::dataset::{Dataset, Example};

/// Filler token of the nonlocal task. It may repeat; content tokens never
/// repeat except for a matching marker/probe pair.
pub const FILLER: &str = "_";

fn content_token(i: usize) -> String {
    format!("w{i}")
}

/// Marker/probe matching over a distance no width-3 window spans.
///
/// Position 0 holds a marker token and the last position a probe token;
/// label `match` (id 1) iff they are equal. Each intervening position is,
/// with probability 1/2, a content token not used elsewhere in the sequence,
/// otherwise the filler `_`. So the only repeated content token in a
/// sequence is a matching marker/probe pair. `vocab_size` counts the filler.
pub fn gen_nonlocal_match(n: usize, seq_len: usize, vocab_size: usize, seed: u64) -> Result<Dataset> {
    if seq_len < 8 {
        return Err(Error::Contract(format!("seq_len must be >= 8, got {seq_len}")));
    }
    if vocab_size < 10 {
        return Err(Error::Contract(format!("vocab_size must be >= 10, got {vocab_size}")));
    }
    let content: Vec<usize> = (1..vocab_size).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(n);
    for _ in 0..n {
        let positive = rng.gen_bool(0.5);
        let marker = *content.choose(&mut rng).expect("non-empty");
        let probe = if positive {
            marker
        } else {
            loop {
                let p = *content.choose(&mut rng).expect("non-empty");
                if p != marker {
                    break p;
                }
            }
        };
        let mut unused: Vec<usize> = content.iter().copied().filter(|&t| t != marker && t != probe).collect();
        let mut text = Vec::with_capacity(seq_len);
        text.push(content_token(marker));
        for _ in 0..seq_len - 2 {
            if rng.gen_bool(0.5) && !unused.is_empty() {
                let k = rng.gen_range(0..unused.len());
                text.push(content_token(unused.swap_remove(k)));
            } else {
                text.push(FILLER.to_string());
            }
        }
        text.push(content_token(probe));
        examples.push(Example {
            text,
            contexts: vec![],
            label: usize::from(positive),
        });
    }
    Ok(Dataset {
        examples,
        labels: vec!["mismatch".into(), "match".into()],
    })
}

/// Single-context lookup over ten content tokens: text `find <q>`,
/// context six distinct content tokens; label `present` (id 1) iff `q`
/// occurs in the context. Labels alternate so the classes are balanced, and
/// the text alone carries no label information.
pub fn gen_context_lookup(n: usize, seed: u64) -> Result<Dataset> {
    const CONTENT: usize = 10;
    const CONTEXT_LEN: usize = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens: Vec<String> = (0..CONTENT).map(|i| format!("c{i}")).collect();
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let present = i % 2 == 1;
        let q = rng.gen_range(0..CONTENT);
        let mut others: Vec<usize> = (0..CONTENT).filter(|&t| t != q).collect();
        others.shuffle(&mut rng);
        let mut ctx: Vec<usize> = others[..CONTEXT_LEN].to_vec();
        if present {
            let slot = rng.gen_range(0..CONTEXT_LEN);
            ctx[slot] = q;
        }
        examples.push(Example {
            text: vec!["find".into(), tokens[q].clone()],
            contexts: vec![ctx.iter().map(|&t| tokens[t].clone()).collect()],
            label: usize::from(present),
        });
    }
    Ok(Dataset {
        examples,
        labels: vec!["absent".into(), "present".into()],
    })
}

/// Two-class bag-of-words toy: class 0 texts use only `p*` tokens, class 1
/// only `n*` tokens.
pub fn gen_separable(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..n)
        .map(|i| {
            let label = i % 2;
            let prefix = if label == 0 { "p" } else { "n" };
            let len = rng.gen_range(3..=6);
            let text = (0..len).map(|_| format!("{prefix}{}", rng.gen_range(0..5))).collect();
            Example {
                text,
                contexts: vec![],
                label,
            }
        })
        .collect();
    Dataset {
        examples,
        labels: vec!["pos".into(), "neg".into()],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nonlocal_is_seeded() {
        let a = gen_nonlocal_match(200, 20, 30, 7).unwrap();
        let b = gen_nonlocal_match(200, 20, 30, 7).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        a.write_jsonl(&mut ba).unwrap();
        b.write_jsonl(&mut bb).unwrap();
        assert_eq!(ba, bb);
    }

    #[test]
    fn nonlocal_balance() {
        let ds = gen_nonlocal_match(10_000, 20, 30, 7).unwrap();
        let pos = ds.examples.iter().filter(|e| e.label == 1).count() as f64 / 1e4;
        assert!((0.48..=0.52).contains(&pos), "{pos}");
    }

    #[test]
    fn nonlocal_structure() {
        let ds = gen_nonlocal_match(500, 20, 30, 3).unwrap();
        for ex in &ds.examples {
            assert_eq!(ex.text.len(), 20);
            let (m, p) = (&ex.text[0], &ex.text[19]);
            assert_ne!(m, FILLER);
            assert_ne!(p, FILLER);
            assert_eq!(ex.label == 1, m == p);
            // marker and probe are 19 apart, so no width-3 window sees both
            let middle = &ex.text[1..19];
            for t in middle.iter().filter(|t| *t != FILLER) {
                assert_eq!(ex.text.iter().filter(|u| *u == t).count(), 1);
            }
        }
    }

    #[test]
    fn nonlocal_small_vocab_still_valid() {
        let ds = gen_nonlocal_match(50, 20, 10, 1).unwrap();
        assert!(ds.examples.iter().all(|e| e.text.len() == 20));
        assert!(gen_nonlocal_match(5, 7, 30, 1).is_err());
        assert!(gen_nonlocal_match(5, 8, 9, 1).is_err());
    }

    #[test]
    fn lookup_labels_follow_context() {
        let ds = gen_context_lookup(100, 2).unwrap();
        for ex in &ds.examples {
            let q = &ex.text[1];
            assert_eq!(ex.label == 1, ex.contexts[0].contains(q));
            assert_eq!(ex.contexts[0].len(), 6);
        }
    }
}
