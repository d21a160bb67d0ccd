//! Response CSV files and versioned JSON documents.

use crate::error::{Error, Result};
use crate::grm::ResponseMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

/// Reads responses with header `item_1..item_M`; an empty cell is missing.
/// Category counts default to one more than the largest observed code per
/// item (at least 2).
pub fn read_responses(reader: impl Read, categories: Option<&[usize]>) -> Result<ResponseMatrix> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let m = headers.len();
    if m == 0 {
        return Err(Error::Data("responses file has no columns".into()));
    }
    for (j, h) in headers.iter().enumerate() {
        if h.trim() != format!("item_{}", j + 1) {
            return Err(Error::Data(format!("column {} is `{h}`, expected `item_{}`", j + 1, j + 1)));
        }
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != m {
            return Err(Error::Data(format!("row {} has {} fields, expected {m}", i + 1, rec.len())));
        }
        let row = rec
            .iter()
            .enumerate()
            .map(|(j, cell)| {
                let cell = cell.trim();
                if cell.is_empty() {
                    return Ok(None);
                }
                cell.parse::<usize>().map(Some).map_err(|_| {
                    Error::Data(format!("row {}, item_{}: `{cell}` is not a category code", i + 1, j + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data("responses file has no rows".into()));
    }
    let cats = match categories {
        Some(c) => {
            if c.len() != m {
                return Err(Error::Data(format!("{} category counts for {m} items", c.len())));
            }
            c.to_vec()
        }
        None => (0..m)
            .map(|j| rows.iter().filter_map(|r| r[j]).max().map_or(2, |k| (k + 1).max(2)))
            .collect(),
    };
    ResponseMatrix::from_rows(&rows, cats)
}

pub fn read_responses_path(path: &Path, categories: Option<&[usize]>) -> Result<ResponseMatrix> {
    let f = std::fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    read_responses(std::io::BufReader::new(f), categories)
}

pub fn write_responses(writer: impl Write, x: &ResponseMatrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record((1..=x.n_items()).map(|j| format!("item_{j}")))?;
    for i in 0..x.n_respondents() {
        w.write_record((0..x.n_items()).map(|j| x.get(i, j).map_or(String::new(), |k| k.to_string())))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_responses_path(path: &Path, x: &ResponseMatrix) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_responses(std::io::BufWriter::new(f), x)
}

/// A JSON document tagged with the schema version.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Versioned<T> {
    pub schema_version: u32,
    #[serde(flatten)]
    pub body: T,
}

impl<T> Versioned<T> {
    pub fn new(body: T) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            body,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, body: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&Versioned::new(body))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let doc: Versioned<T> = serde_json::from_str(&text)?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(Error::Data(format!(
            "{}: schema version {} is not supported (expected {SCHEMA_VERSION})",
            path.display(),
            doc.schema_version
        )));
    }
    Ok(doc.body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_with_missing_cells() {
        let x = ResponseMatrix::from_rows(&[vec![Some(0), None, Some(2)], vec![Some(1), Some(1), None]], vec![2, 3, 4]).unwrap();
        let mut buf = Vec::new();
        write_responses(&mut buf, &x).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, "item_1,item_2,item_3\n0,,2\n1,1,\n");
        let back = read_responses(buf.as_slice(), Some(&[2, 3, 4])).unwrap();
        assert_eq!(back, x);
        let inferred = read_responses(buf.as_slice(), None).unwrap();
        assert_eq!(inferred.categories(), &[2, 2, 3]);
    }

    #[test]
    fn csv_errors_name_the_cell() {
        let bad = "item_1,item_2\n0,x\n";
        let err = read_responses(bad.as_bytes(), None).unwrap_err().to_string();
        assert!(err.contains("item_2") && err.contains("row 1"), "{err}");
        assert!(read_responses("a,b\n0,1\n".as_bytes(), None).is_err());
        assert!(read_responses("item_1\n".as_bytes(), None).is_err());
        assert!(read_responses("item_1\n5\n".as_bytes(), Some(&[3])).is_err());
    }

    #[test]
    fn versioned_json() {
        let dir = std::env::temp_dir().join(format!("iwavb-io-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("doc.json");
        #[derive(Serialize, Deserialize, PartialEq, Debug)]
        struct Doc {
            a: f64,
        }
        write_json(&path, &Doc { a: 0.1 }).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"schema_version\": 1"));
        assert_eq!(read_json::<Doc>(&path).unwrap(), Doc { a: 0.1 });
        std::fs::write(&path, "{\"schema_version\": 9, \"a\": 1}").unwrap();
        assert!(read_json::<Doc>(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
