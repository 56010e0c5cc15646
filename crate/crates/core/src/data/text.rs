use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use super::{AnnotationSet, FeatureMatrix, Vocabulary, WordVectorTable};
use crate::error::{Error, Result};

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_owned(),
        line,
        msg: msg.into(),
    }
}

/// One label per line; the line number is the label index.
pub fn load_vocabulary(path: &Path) -> Result<Vocabulary> {
    let text = read_to_string(path)?;
    let labels: Vec<&str> = text.lines().map(str::trim_end).collect();
    for (i, l) in labels.iter().enumerate() {
        if l.is_empty() {
            return Err(parse_err(path, i + 1, "empty label"));
        }
    }
    Vocabulary::new(labels)
}

pub fn save_vocabulary(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let mut out = vocab.labels().join("\n");
    out.push('\n');
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads `id<TAB>label1,label2,...` lines into a binary annotation set.
///
/// Out-of-vocabulary labels are dropped; the returned count says how many.
pub fn load_annotations(path: &Path, vocab: &Vocabulary) -> Result<(AnnotationSet, usize)> {
    let text = read_to_string(path)?;
    let mut ids = Vec::new();
    let mut sets = Vec::new();
    let mut seen = HashSet::new();
    let mut dropped = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let (id, labels) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(path, lineno + 1, "expected `id<TAB>labels`"))?;
        if id.is_empty() {
            return Err(parse_err(path, lineno + 1, "empty image id"));
        }
        if !seen.insert(id.to_owned()) {
            return Err(parse_err(
                path,
                lineno + 1,
                format!("duplicate image id `{id}`"),
            ));
        }
        let mut set = Vec::new();
        for label in labels.split(',').map(str::trim).filter(|l| !l.is_empty()) {
            match vocab.index_of(label) {
                Some(k) => set.push(k),
                None => {
                    dropped += 1;
                    log::warn!(
                        "{}:{}: unknown label `{label}` dropped",
                        path.display(),
                        lineno + 1
                    );
                }
            }
        }
        ids.push(id.to_owned());
        sets.push(set);
    }
    let set = AnnotationSet::from_label_sets(vocab.clone(), sets, ids)?;
    Ok((set, dropped))
}

/// Writes the labels of each image (weight > 0) in the annotation text format.
pub fn save_annotations(path: &Path, set: &AnnotationSet) -> Result<()> {
    let mut out = Vec::new();
    for i in 0..set.len() {
        let labels: Vec<&str> = set
            .labels_of(i)
            .map(|k| set.vocabulary().label(k))
            .collect();
        writeln!(out, "{}\t{}", set.row_ids()[i], labels.join(",")).expect("write to vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// `label v1 v2 ... vP` per line.
pub fn load_word_vectors(path: &Path) -> Result<WordVectorTable> {
    let text = read_to_string(path)?;
    let mut entries = HashMap::new();
    let mut dim = None;
    for (lineno, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(label) = parts.next() else { continue };
        let v: Vec<f64> = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(path, lineno + 1, format!("bad number: {e}")))?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(parse_err(path, lineno + 1, "non-finite value"));
        }
        match dim {
            None => dim = Some(v.len()),
            Some(d) if d != v.len() => {
                return Err(parse_err(
                    path,
                    lineno + 1,
                    format!("expected {d} values, got {}", v.len()),
                ))
            }
            _ => {}
        }
        if entries.insert(label.to_owned(), v).is_some() {
            return Err(parse_err(
                path,
                lineno + 1,
                format!("duplicate label `{label}`"),
            ));
        }
    }
    WordVectorTable::new(entries)
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn parse_cell(path: &Path, line: usize, col: usize, cell: &str) -> Result<f64> {
    let v: f64 = cell.parse().map_err(|_| {
        parse_err(
            path,
            line,
            format!("column {col}: `{cell}` is not a number"),
        )
    })?;
    if !v.is_finite() {
        return Err(parse_err(
            path,
            line,
            format!("column {col}: non-finite value"),
        ));
    }
    Ok(v)
}

/// First column is the image id, remaining columns are features.
pub fn load_feature_csv(path: &Path) -> Result<FeatureMatrix> {
    let mut ids = Vec::new();
    let mut flat = Vec::new();
    let mut cols = None;
    for (lineno, rec) in csv_reader(path)?.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(path, lineno + 1, e.to_string()))?;
        if rec.len() < 2 {
            return Err(parse_err(
                path,
                lineno + 1,
                "expected an id and at least one value",
            ));
        }
        let n = rec.len() - 1;
        match cols {
            None => cols = Some(n),
            Some(c) if c != n => {
                return Err(parse_err(
                    path,
                    lineno + 1,
                    format!("expected {c} values, got {n}"),
                ))
            }
            _ => {}
        }
        ids.push(rec[0].to_owned());
        for (j, cell) in rec.iter().skip(1).enumerate() {
            flat.push(parse_cell(path, lineno + 1, j + 1, cell)?);
        }
    }
    let cols = cols.ok_or_else(|| Error::Data(format!("{}: empty matrix", path.display())))?;
    FeatureMatrix::new(DMatrix::from_row_slice(ids.len(), cols, &flat), ids)
}

/// Headerless CSV of floats, no id column.
pub fn load_plain_csv(path: &Path) -> Result<DMatrix<f64>> {
    let mut flat = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for (lineno, rec) in csv_reader(path)?.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(path, lineno + 1, e.to_string()))?;
        match cols {
            None => cols = Some(rec.len()),
            Some(c) if c != rec.len() => {
                return Err(parse_err(
                    path,
                    lineno + 1,
                    format!("expected {c} values, got {}", rec.len()),
                ))
            }
            _ => {}
        }
        for (j, cell) in rec.iter().enumerate() {
            flat.push(parse_cell(path, lineno + 1, j, cell)?);
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::Data(format!("{}: empty matrix", path.display())))?;
    Ok(DMatrix::from_row_slice(rows, cols, &flat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::MatrixFormat;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn csv_features() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "f.csv", "a,1,2,3\nb,4,5,6");
        let m = FeatureMatrix::load(&p, MatrixFormat::Csv).unwrap();
        assert_eq!((m.n_rows(), m.n_cols()), (2, 3));
        assert_eq!(m.row_ids(), &["a", "b"]);
        assert_eq!(m.values()[(1, 2)], 6.0);

        let p = write(&dir, "g.csv", "a,1,2\nb,4");
        assert!(matches!(
            FeatureMatrix::load(&p, MatrixFormat::Csv),
            Err(Error::Parse { line: 2, .. })
        ));
        let p = write(&dir, "h.csv", "a,1,nan");
        assert!(FeatureMatrix::load(&p, MatrixFormat::Csv).is_err());
    }

    #[test]
    fn annotations_parse_and_drop_unknown() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::new(["sea", "sky", "man"]).unwrap();
        let p = write(
            &dir,
            "a.txt",
            "img1\tsky,sea\nimg2\t\nimg3\tsky,unknownlabel\n",
        );
        let (set, dropped) = load_annotations(&p, &vocab).unwrap();
        assert_eq!(dropped, 1);
        assert!(set.is_binary());
        assert_eq!(set.row(0), &[(0, 1.0), (1, 1.0)]);
        assert!(set.row(1).is_empty());
        assert_eq!(set.row(2), &[(1, 1.0)]);
    }

    #[test]
    fn annotation_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::new(["sea"]).unwrap();
        let p = write(&dir, "dup.txt", "a\tsea\na\tsea\n");
        assert!(matches!(
            load_annotations(&p, &vocab),
            Err(Error::Parse { line: 2, .. })
        ));
        let p = write(&dir, "bad.txt", "a\tsea\nno-tab-here\n");
        assert!(matches!(
            load_annotations(&p, &vocab),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn annotation_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::new(["sea", "sky", "man"]).unwrap();
        let set = AnnotationSet::from_label_sets(
            vocab.clone(),
            vec![vec![2, 0], vec![]],
            vec!["x".into(), "y".into()],
        )
        .unwrap();
        let p = dir.path().join("out.txt");
        save_annotations(&p, &set).unwrap();
        let (back, dropped) = load_annotations(&p, &vocab).unwrap();
        assert_eq!(dropped, 0);
        assert_eq!(back, set);
    }

    #[test]
    fn vocabulary_and_word_vectors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "v.txt", "sea\nsky\n");
        let v = load_vocabulary(&p).unwrap();
        assert_eq!(v.index_of("sky"), Some(1));
        let p = write(&dir, "w.txt", "sea 1 2\nsky 3 4\n");
        let w = load_word_vectors(&p).unwrap();
        assert_eq!(w.dim(), 2);
        assert_eq!(w.get("sky"), Some(&[3.0, 4.0][..]));
        let p = write(&dir, "w2.txt", "sea 1 2\nsky 3\n");
        assert!(load_word_vectors(&p).is_err());
    }
}
