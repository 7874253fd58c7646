//! CSV schemas: item vectors, categories, interactions, semantic IDs and
//! decode outputs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::decoding::ScoredList;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tokenizer::{ItemVectors, SemanticIdTable};

fn parse_field<T: std::str::FromStr>(field: &str, line: usize, what: &str) -> Result<T> {
    field.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("cannot parse {what} from {field:?}"),
    })
}

/// `item_id,v0,v1,...,vD` with items in id order.
pub fn write_item_vectors<F: Scalar>(path: &Path, items: &ItemVectors<F>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "item_id")?;
    for d in 0..items.dim() {
        write!(w, ",v{d}")?;
    }
    writeln!(w)?;
    for i in 0..items.count() {
        write!(w, "{i}")?;
        for &v in items.vector(i) {
            write!(w, ",{}", v.to_double())?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_item_vectors<F: Scalar>(path: &Path) -> Result<ItemVectors<F>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut rows: Vec<(usize, Vec<F>)> = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let line = idx + 2; // header is line 1
        let record = record.map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        if record.len() < 2 {
            return Err(Error::Parse {
                line,
                msg: "expected item_id and at least one coordinate".into(),
            });
        }
        let id: usize = parse_field(&record[0], line, "item_id")?;
        let mut vals = Vec::with_capacity(record.len() - 1);
        for f in record.iter().skip(1) {
            vals.push(F::of(parse_field::<f64>(f, line, "coordinate")?));
        }
        rows.push((id, vals));
    }
    if rows.is_empty() {
        return Err(Error::invalid("item vector file has no rows"));
    }
    rows.sort_by_key(|(id, _)| *id);
    let dim = rows[0].1.len();
    for (i, (id, vals)) in rows.iter().enumerate() {
        if *id != i {
            return Err(Error::invalid(format!(
                "item ids must be dense 0..n (missing or duplicate id near {id})"
            )));
        }
        if vals.len() != dim {
            return Err(Error::invalid(format!("ragged row for item {id}")));
        }
    }
    let count = rows.len();
    let flat: Vec<F> = rows.into_iter().flat_map(|(_, v)| v).collect();
    ItemVectors::new(count, dim, flat)
}

/// `item_id,category`
pub fn write_categories(path: &Path, categories: &[usize]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "item_id,category")?;
    for (i, c) in categories.iter().enumerate() {
        writeln!(w, "{i},{c}")?;
    }
    Ok(())
}

pub fn read_categories(path: &Path) -> Result<Vec<usize>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut rows: Vec<(usize, usize)> = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        rows.push((
            parse_field(&record[0], line, "item_id")?,
            parse_field(&record[1], line, "category")?,
        ));
    }
    rows.sort_by_key(|(id, _)| *id);
    Ok(rows.into_iter().map(|(_, c)| c).collect())
}

/// `user_id,item_id,timestamp`; rows may arrive in any order. Output is
/// per-user chronological sequences (file order breaks timestamp ties),
/// users sorted by id.
pub fn read_interactions(path: &Path) -> Result<(Vec<u64>, Vec<Vec<usize>>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut rows: Vec<(u64, usize, i64)> = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        if record.len() != 3 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 3 fields, got {}", record.len()),
            });
        }
        rows.push((
            parse_field(&record[0], line, "user_id")?,
            parse_field(&record[1], line, "item_id")?,
            parse_field(&record[2], line, "timestamp")?,
        ));
    }
    let mut users: std::collections::BTreeMap<u64, Vec<(i64, usize, usize)>> =
        std::collections::BTreeMap::new();
    for (order, (u, i, t)) in rows.into_iter().enumerate() {
        users.entry(u).or_default().push((t, order, i));
    }
    let mut ids = Vec::with_capacity(users.len());
    let mut sequences = Vec::with_capacity(users.len());
    for (u, mut events) in users {
        events.sort_by_key(|&(t, order, _)| (t, order));
        ids.push(u);
        sequences.push(events.into_iter().map(|(_, _, i)| i).collect());
    }
    Ok((ids, sequences))
}

pub fn write_interactions(path: &Path, interactions: &[Vec<usize>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "user_id,item_id,timestamp")?;
    for (u, seq) in interactions.iter().enumerate() {
        for (t, &item) in seq.iter().enumerate() {
            writeln!(w, "{u},{item},{t}")?;
        }
    }
    Ok(())
}

/// `item_id,t1,...,tL,tdedup` with items in id order.
pub fn write_semantic_ids(path: &Path, table: &SemanticIdTable) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "item_id")?;
    for l in 1..table.depth() {
        write!(w, ",t{l}")?;
    }
    writeln!(w, ",tdedup")?;
    for (item, seq) in table.sequences() {
        write!(w, "{item}")?;
        for &t in seq {
            write!(w, ",{t}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Raw sequences in item-id order; the caller supplies vocabulary sizes
/// when reconstructing a [`SemanticIdTable`].
pub fn read_semantic_ids(path: &Path) -> Result<Vec<Vec<u32>>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut rows: Vec<(usize, Vec<u32>)> = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        let id: usize = parse_field(&record[0], line, "item_id")?;
        let mut seq = Vec::with_capacity(record.len() - 1);
        for f in record.iter().skip(1) {
            seq.push(parse_field(f, line, "token")?);
        }
        rows.push((id, seq));
    }
    rows.sort_by_key(|(id, _)| *id);
    for (i, (id, _)) in rows.iter().enumerate() {
        if *id != i {
            return Err(Error::invalid("item ids must be dense 0..n"));
        }
    }
    Ok(rows.into_iter().map(|(_, s)| s).collect())
}

/// `user_id,rank,item_id,log_score`, ranks 1-based.
pub fn write_decode_csv<F: Scalar>(path: &Path, lists: &[(u64, ScoredList<F>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "user_id,rank,item_id,log_score")?;
    for (user, list) in lists {
        for (rank, (item, score)) in list.entries().iter().enumerate() {
            writeln!(w, "{user},{},{item},{}", rank + 1, score.to_double())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn item_vector_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("items.csv");
        let items =
            ItemVectors::new(3, 2, vec![0.5, -1.25, 2.0, 3.5, -0.125, 7.0]).unwrap();
        write_item_vectors(&path, &items).unwrap();
        let back = read_item_vectors::<f64>(&path).unwrap();
        assert_eq!(items.mat().data(), back.mat().data());
    }

    #[test]
    fn interactions_sorted_by_timestamp_with_stable_ties() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("inter.csv");
        std::fs::write(
            &path,
            "user_id,item_id,timestamp\n7,4,30\n7,1,10\n7,9,30\n2,5,100\n",
        )
        .unwrap();
        let (ids, seqs) = read_interactions(&path).unwrap();
        assert_eq!(ids, vec![2, 7]);
        assert_eq!(seqs[0], vec![5]);
        // timestamp 10 first, then the two ties in file order (4 before 9)
        assert_eq!(seqs[1], vec![1, 4, 9]);

        // independent sort oracle
        let mut oracle = vec![(30i64, 0usize, 4usize), (10, 1, 1), (30, 2, 9)];
        oracle.sort_by_key(|&(t, o, _)| (t, o));
        let expect: Vec<usize> = oracle.into_iter().map(|(_, _, i)| i).collect();
        assert_eq!(seqs[1], expect);
    }

    #[test]
    fn three_row_fixture_single_user() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("inter.csv");
        std::fs::write(
            &path,
            "user_id,item_id,timestamp\n1,10,1\n1,11,2\n1,12,3\n",
        )
        .unwrap();
        let (ids, seqs) = read_interactions(&path).unwrap();
        assert_eq!(ids, vec![1]);
        assert_eq!(seqs, vec![vec![10, 11, 12]]);
    }

    #[test]
    fn header_only_file_is_empty_not_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("inter.csv");
        std::fs::write(&path, "user_id,item_id,timestamp\n").unwrap();
        let (ids, seqs) = read_interactions(&path).unwrap();
        assert!(ids.is_empty());
        assert!(seqs.is_empty());
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("inter.csv");
        std::fs::write(
            &path,
            "user_id,item_id,timestamp\n1,10,1\n1,notanumber,2\n",
        )
        .unwrap();
        match read_interactions(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn semantic_id_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ids.csv");
        let table = SemanticIdTable::new(
            vec![vec![0, 1, 0], vec![1, 0, 0]],
            vec![2, 2, 1],
        )
        .unwrap();
        write_semantic_ids(&path, &table).unwrap();
        let raw = read_semantic_ids(&path).unwrap();
        assert_eq!(raw, vec![vec![0, 1, 0], vec![1, 0, 0]]);
    }

    #[test]
    fn decode_csv_format() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("decode.csv");
        let list = ScoredList::new(vec![(3usize, -0.5f64), (1, -1.5)]).unwrap();
        write_decode_csv(&path, &[(9u64, list)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "user_id,rank,item_id,log_score\n9,1,3,-0.5\n9,2,1,-1.5\n"
        );
    }
}
