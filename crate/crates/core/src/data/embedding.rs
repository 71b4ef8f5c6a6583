//! Plain-text word vectors: one `name v_1 ... v_d` line per word.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::diff::Matrix;
use crate::error::{Error, Result};

/// Vectors for `states` and `objects`, looked up by name. Words not in the
/// lists are ignored; a missing word is an error.
pub fn load_embeddings(
    path: impl AsRef<Path>,
    states: &[String],
    objects: &[String],
) -> Result<(Matrix, Matrix)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut table: HashMap<&str, Vec<f64>> = HashMap::new();
    let mut dim = None;
    for (i, raw) in text.lines().enumerate() {
        let mut parts = raw.split_whitespace();
        let Some(name) = parts.next() else { continue };
        let values = parts
            .map(|t| t.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| err(i + 1, "non-numeric or non-finite component".into()))?;
        match dim {
            None if values.is_empty() => return Err(err(i + 1, "word without components".into())),
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(err(
                    i + 1,
                    format!("{} components, expected {d}", values.len()),
                ))
            }
            _ => {}
        }
        if table.insert(name, values).is_some() {
            return Err(err(i + 1, format!("duplicate word {name:?}")));
        }
    }
    let dim = dim.ok_or_else(|| err(0, "empty embedding file".into()))?;
    let gather = |names: &[String]| -> Result<Matrix> {
        let mut data = Vec::with_capacity(names.len() * dim);
        for n in names {
            let v = table.get(n.as_str()).ok_or_else(|| {
                Error::Manifest(format!("{}: no vector for {n:?}", path.display()))
            })?;
            data.extend_from_slice(v);
        }
        Matrix::from_vec(names.len(), dim, data)
    };
    Ok((gather(states)?, gather(objects)?))
}
