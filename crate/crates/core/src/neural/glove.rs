//! GloVe text-format ingestion (`token v1 v2 ... vD` per line).

use std::io::{BufRead, BufReader};
use std::path::Path;

use super::params::{ParamId, ParameterSet};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};

/// Overwrite embedding rows for vocabulary tokens found in the GloVe file.
/// Returns the number of rows initialized.
pub fn apply_glove(path: impl AsRef<Path>, vocab: &Vocabulary, params: &mut ParameterSet, embed: ParamId) -> Result<usize> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    apply_glove_reader(BufReader::new(f), vocab, params, embed)
}

pub fn apply_glove_reader(r: impl BufRead, vocab: &Vocabulary, params: &mut ParameterSet, embed: ParamId) -> Result<usize> {
    let dim = params.get(embed).cols;
    let mut hits = 0;
    for (lineno, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::Config(format!("glove line {}: {e}", lineno + 1)))?;
        let mut parts = line.split_whitespace();
        let Some(tok) = parts.next() else { continue };
        let Some(id) = vocab.get(tok) else { continue };
        let vals: Vec<f64> = parts
            .map(|x| x.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("glove line {}: {e}", lineno + 1)))?;
        if vals.len() != dim {
            return Err(Error::Config(format!(
                "glove line {}: {} values, embedding width is {dim}",
                lineno + 1,
                vals.len()
            )));
        }
        let p = params.get_mut(embed);
        let row = id as usize;
        p.data[row * dim..(row + 1) * dim].copy_from_slice(&vals);
        hits += 1;
    }
    Ok(hits)
}
