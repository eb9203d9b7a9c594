use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::vocab::{Vocabulary, PAD};

/// Half-width of the uniform range for tokens without a pretrained vector.
pub const OOV_RANGE: f64 = 0.25;

/// `V x d` table; row `i` is the vector of vocabulary id `i`. The PAD row is
/// zero.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub table: Tensor,
    pub trainable: bool,
}

impl EmbeddingMatrix {
    pub fn zeros(vocab_size: usize, dim: usize) -> Self {
        EmbeddingMatrix {
            table: Tensor::zeros(&[vocab_size, dim]),
            trainable: true,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn row(&self, id: usize) -> &[f64] {
        self.table.row(id)
    }
}

fn parse_header(line: &str) -> bool {
    let mut parts = line.split_whitespace();
    matches!(
        (parts.next(), parts.next(), parts.next()),
        (Some(a), Some(b), None) if a.parse::<usize>().is_ok() && b.parse::<usize>().is_ok()
    )
}

/// Reads a textual word-vector file (`token v1 ... vd` per line, optional
/// `V d` header). Returns the file vocabulary plus PAD/UNK and a table whose
/// UNK row is drawn uniformly under `seed`.
pub fn load_pretrained(
    path: impl AsRef<Path>,
    expected_dim: usize,
    seed: u64,
) -> Result<(Vocabulary, EmbeddingMatrix)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut vocab = Vocabulary::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() || (lineno == 1 && parse_header(&line)) {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().expect("non-empty line");
        let values = parts
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("bad vector value: {e}"),
            })?;
        if values.len() != expected_dim {
            return Err(Error::Format {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("expected {expected_dim} values, found {}", values.len()),
            });
        }
        if vocab.contains(token) {
            continue;
        }
        let before = vocab.len();
        if vocab.insert(token) == before {
            rows.push(values);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = Tensor::zeros(&[vocab.len(), expected_dim]);
    for c in 0..expected_dim {
        table.set(1, c, rng.gen_range(-OOV_RANGE..=OOV_RANGE));
    }
    for (r, values) in rows.iter().enumerate() {
        for (c, &v) in values.iter().enumerate() {
            table.set(r + 2, c, v);
        }
    }
    Ok((vocab, EmbeddingMatrix { table, trainable: true }))
}

/// Table for `vocab`: pretrained rows copied bit-for-bit where available,
/// every other non-PAD row uniform in `[-0.25, 0.25]` drawn in id order
/// under `seed`.
pub fn build_embeddings(
    vocab: &Vocabulary,
    pretrained: Option<(&Vocabulary, &EmbeddingMatrix)>,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingMatrix> {
    if dim == 0 {
        return Err(Error::Contract("embedding dimension must be positive".into()));
    }
    if let Some((_, m)) = pretrained {
        if m.dim() != dim {
            return Err(Error::dim(
                "build_embeddings",
                format!("pretrained dim {} but model dim {dim}", m.dim()),
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = Tensor::zeros(&[vocab.len(), dim]);
    for id in 0..vocab.len() {
        let draws: Vec<f64> = (0..dim).map(|_| rng.gen_range(-OOV_RANGE..=OOV_RANGE)).collect();
        if id == PAD {
            continue;
        }
        let token = vocab.token(id).expect("id in range");
        let known = pretrained.and_then(|(pv, pm)| {
            if pv.contains(token) || id < 2 {
                Some(pm.row(if id < 2 { id } else { pv.id(token) }).to_vec())
            } else {
                None
            }
        });
        let row = known.unwrap_or(draws);
        for (c, v) in row.into_iter().enumerate() {
            table.set(id, c, v);
        }
    }
    Ok(EmbeddingMatrix { table, trainable: true })
}
