//! Checkpoint directories: one binary file per tensor plus `meta.json`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::corpus::hex;
use crate::error::{Error, Result};
use crate::numkit::Matrix;

pub const META_FILE: &str = "meta.json";

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))
}

pub fn create_file(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::file(path, e))
}

pub fn open_file(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::file(path, e))
}

pub fn write_tensor(dir: &Path, name: &str, m: &Matrix) -> Result<()> {
    let path = dir.join(format!("{name}.bin"));
    let mut w = create_file(&path)?;
    m.write_binary(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor(dir: &Path, name: &str) -> Result<Matrix> {
    Matrix::read_binary(open_file(&dir.join(format!("{name}.bin")))?)
}

/// A vector stored as a single-row matrix.
pub fn write_vector(dir: &Path, name: &str, v: &[f64]) -> Result<()> {
    write_tensor(dir, name, &Matrix::from_vec(1, v.len(), v.to_vec())?)
}

pub fn read_vector(dir: &Path, name: &str) -> Result<Vec<f64>> {
    Ok(read_tensor(dir, name)?.into_vec())
}

pub fn write_meta<T: Serialize>(dir: &Path, meta: &T) -> Result<()> {
    let path = dir.join(META_FILE);
    let mut w = create_file(&path)?;
    serde_json::to_writer_pretty(&mut w, meta)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_meta<T: DeserializeOwned>(dir: &Path) -> Result<T> {
    Ok(serde_json::from_reader(open_file(&dir.join(META_FILE))?)?)
}

/// Embedding export readable by word2vec-style tooling: a `rows dim` header,
/// then `token v1 ... vD` per row.
pub fn write_embedding_text<W: Write, S: AsRef<str>>(
    mut w: W,
    tokens: &[S],
    m: &Matrix,
) -> Result<()> {
    if tokens.len() != m.rows() {
        return Err(Error::dim(format!(
            "{} tokens for {} embedding rows",
            tokens.len(),
            m.rows()
        )));
    }
    writeln!(w, "{} {}", m.rows(), m.cols())?;
    for (t, row) in tokens.iter().zip(m.iter_rows()) {
        writeln!(w, "{} {}", t.as_ref(), crate::numkit::join_floats(row))?;
    }
    Ok(())
}

/// Inverse of [`write_embedding_text`].
pub fn read_embedding_text<R: std::io::BufRead>(r: R) -> Result<(Vec<String>, Matrix)> {
    let mut lines = r.lines();
    let header = lines.next().ok_or(Error::Empty("embedding file"))??;
    let mut parts = header.split_whitespace().map(str::parse::<usize>);
    let (Some(Ok(n)), Some(Ok(d))) = (parts.next(), parts.next()) else {
        return Err(Error::Parse {
            line: 1,
            msg: "expected `rows dim` header".to_string(),
        });
    };
    let mut tokens = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * d);
    for (i, line) in lines.enumerate() {
        let line = line?;
        let (tok, rest) = line.split_once(' ').unwrap_or((line.as_str(), ""));
        let vals = crate::numkit::parse_floats(rest, i + 2)?;
        if vals.len() != d {
            return Err(Error::Parse {
                line: i + 2,
                msg: format!("expected {d} values, found {}", vals.len()),
            });
        }
        tokens.push(tok.to_string());
        data.extend(vals);
    }
    let m = Matrix::from_vec(tokens.len(), d, data)?;
    if m.rows() != n {
        return Err(Error::Parse {
            line: 1,
            msg: format!("header promises {n} rows, found {}", m.rows()),
        });
    }
    Ok((tokens, m))
}

/// SHA-256 (hex) of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}
