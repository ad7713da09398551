use std::fs::File;
use std::io::Read;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use super::{RawSeries, WINDOW};
use crate::error::{Error, Result};

/// Electrode columns of the EEG Eye State export, in file order.
pub const EYE_STATE_CHANNELS: [&str; 14] =
    ["AF3", "F7", "F3", "FC5", "T7", "P7", "O1", "O2", "P8", "T8", "FC6", "F4", "F8", "AF4"];
pub const EYE_STATE_LABEL: &str = "eyeDetection";

/// Which columns of a CSV file hold the series.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub value_columns: Vec<String>,
    #[serde(default)]
    pub label_column: Option<String>,
}

impl CsvSchema {
    pub fn univariate(column: &str) -> Self {
        Self { value_columns: vec![column.to_string()], label_column: None }
    }

    pub fn eye_state() -> Self {
        Self {
            value_columns: EYE_STATE_CHANNELS.iter().map(|s| s.to_string()).collect(),
            label_column: Some(EYE_STATE_LABEL.to_string()),
        }
    }
}

fn parse_cell(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Read a headed CSV file. Rows with a missing, non-numeric or non-finite
/// value, or a label other than 0/1, are dropped and counted.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<RawSeries> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let series = read_csv(file, &name, schema).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        e => e,
    })?;
    if series.rejected > 0 {
        warn!("{}: rejected {} rows", path.display(), series.rejected);
    }
    if series.len() < WINDOW {
        return Err(Error::Data(format!(
            "{}: fewer than {WINDOW} usable rows ({} usable, {} rejected)",
            path.display(),
            series.len(),
            series.rejected
        )));
    }
    Ok(series)
}

/// [`load_csv`] over any reader, without the minimum length check.
pub fn read_csv<R: Read>(input: R, name: &str, schema: &CsvSchema) -> Result<RawSeries> {
    if schema.value_columns.is_empty() {
        return Err(Error::Data("schema names no value columns".into()));
    }
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let headers = reader.headers()?.clone();
    if headers.iter().all(|h| h.trim().is_empty()) {
        return Err(Error::Data(format!("fewer than {WINDOW} usable rows (file is empty)")));
    }
    let find = |name: &str| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Data(format!("missing column {name:?}")))
    };
    let value_idx = schema.value_columns.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let label_idx = schema.label_column.as_deref().map(find).transpose()?;

    let mut values = Vec::new();
    let mut labels = label_idx.map(|_| Vec::new());
    let mut rejected = 0;
    for record in reader.records() {
        let record = record?;
        let row: Option<Vec<f64>> = value_idx.iter().map(|&i| record.get(i).and_then(parse_cell)).collect();
        let label = match label_idx {
            Some(i) => match record.get(i).and_then(parse_cell) {
                Some(l) if l == 0.0 || l == 1.0 => Some(Some(l)),
                _ => None,
            },
            None => Some(None),
        };
        match (row, label) {
            (Some(row), Some(label)) => {
                values.extend(row);
                if let (Some(ls), Some(l)) = (labels.as_mut(), label) {
                    ls.push(l);
                }
            }
            _ => rejected += 1,
        }
    }
    Ok(RawSeries { name: name.to_string(), channels: value_idx.len(), values, labels, rejected })
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn rows(n: usize, bad: &[usize]) -> String {
        let mut s = String::from("time,temp\n");
        for i in 0..n {
            if bad.contains(&i) {
                s.push_str(&format!("{i},n/a\n"));
            } else {
                s.push_str(&format!("{i},{}.5\n", i * 2));
            }
        }
        s
    }

    #[test]
    fn drops_non_numeric_rows() {
        let f = write(&rows(30, &[4]));
        let s = load_csv(f.path(), &CsvSchema::univariate("temp")).unwrap();
        assert_eq!((s.len(), s.rejected, s.channels), (29, 1, 1));
        assert_eq!(s.values[3], 6.5);
        assert_eq!(s.values[4], 10.5);
    }

    #[test]
    fn three_rows_with_one_bad_cell() {
        let s = read_csv("temp\n1\nx\n3\n".as_bytes(), "t", &CsvSchema::univariate("temp")).unwrap();
        assert_eq!((s.len(), s.rejected), (2, 1));
        assert_eq!(s.values, [1.0, 3.0]);
        let f = write("temp\n1\nx\n3\n");
        let err = load_csv(f.path(), &CsvSchema::univariate("temp")).unwrap_err().to_string();
        assert!(err.contains("fewer than 24 usable rows (2 usable, 1 rejected)"), "{err}");
    }

    #[test]
    fn empty_file_is_too_short() {
        let f = write("");
        let err = load_csv(f.path(), &CsvSchema::univariate("temp")).unwrap_err();
        assert!(err.to_string().contains("fewer than 24 usable rows"), "{err}");
    }

    #[test]
    fn missing_column_and_file() {
        let f = write(&rows(30, &[]));
        assert!(load_csv(f.path(), &CsvSchema::univariate("pressure")).unwrap_err().to_string().contains("pressure"));
        assert!(matches!(load_csv(Path::new("/nonexistent.csv"), &CsvSchema::univariate("t")), Err(Error::Io { .. })));
    }

    #[test]
    fn eye_state_schema() {
        let mut s = format!("{},{}\n", EYE_STATE_CHANNELS.join(","), EYE_STATE_LABEL);
        for i in 0..30 {
            let vals: Vec<String> = (0..14).map(|c| format!("{}", 4000 + c * 10 + i)).collect();
            s.push_str(&format!("{},{}\n", vals.join(","), i % 2));
        }
        s.push_str(&format!("{},2\n", vec!["1"; 14].join(",")));
        let f = write(&s);
        let series = load_csv(f.path(), &CsvSchema::eye_state()).unwrap();
        assert_eq!(series.channels, 14);
        assert_eq!(series.len(), 30);
        assert_eq!(series.rejected, 1);
        assert_eq!(series.labels.as_ref().unwrap()[..3], [0.0, 1.0, 0.0]);
        assert_eq!(series.row(1)[13], 4131.0);
    }
}
