use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{Error, Result};

/// One observed user–item interaction (implicit feedback).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct InteractionRecord {
    pub user: String,
    pub item: String,
}

impl InteractionRecord {
    pub fn new(user: impl Into<String>, item: impl Into<String>) -> Self {
        InteractionRecord {
            user: user.into(),
            item: item.into(),
        }
    }
}

/// Reads a tab-separated `user<TAB>item[<TAB>...]` file. Extra columns are
/// ignored, blank lines skipped and duplicate pairs kept once, in order of
/// first appearance.
pub fn load_interactions(path: impl AsRef<Path>) -> Result<Vec<InteractionRecord>> {
    let path = path.as_ref();
    let file = File::open(path)?;
    parse_interactions(BufReader::new(file), path)
}

pub fn parse_interactions(reader: impl BufRead, path: &Path) -> Result<Vec<InteractionRecord>> {
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let user = cols.next().unwrap_or("").trim();
        let item = cols.next().map(str::trim);
        let parse_err = |message: &str| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: message.to_string(),
        };
        let Some(item) = item else {
            return Err(parse_err("expected two tab-separated columns"));
        };
        if user.is_empty() || item.is_empty() {
            return Err(parse_err("empty user or item id"));
        }
        let rec = InteractionRecord::new(user, item);
        if seen.insert(rec.clone()) {
            records.push(rec);
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyInput(path.to_path_buf()));
    }
    Ok(records)
}

/// Writes records in the format [`load_interactions`] reads.
pub fn write_interactions(path: impl AsRef<Path>, records: &[InteractionRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.user);
        out.push('\t');
        out.push_str(&r.item);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Vec<InteractionRecord>> {
        parse_interactions(text.as_bytes(), Path::new("mem.tsv"))
    }

    #[test]
    fn single_line() {
        let recs = parse("u1\ti1\n").unwrap();
        assert_eq!(recs, vec![InteractionRecord::new("u1", "i1")]);
    }

    #[test]
    fn duplicates_are_dropped() {
        assert_eq!(parse("u1\ti1\nu1\ti1\n").unwrap().len(), 1);
    }

    #[test]
    fn extra_columns_ignored() {
        let recs = parse("u1\ti1\t5.0\t1234\nu2\ti1\n").unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].item, "i1");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        match parse("u1\ti1\nbroken\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(parse("u1\t\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn empty_input() {
        assert!(matches!(parse(""), Err(Error::EmptyInput(_))));
        assert!(matches!(parse("\n\n"), Err(Error::EmptyInput(_))));
    }
}
