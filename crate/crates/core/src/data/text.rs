//! Tab-separated columnar dump: one header line, one sample per line.
//! Sequence values are `|`-joined; an absent timestamp is an empty field.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::data::{CountChannel, Dataset, FeatureValue, Sample, Split};
use crate::error::{Error, Result};
use crate::schema::FeatureSchema;

const FIXED: [&str; 5] = ["label", "user", "item", "timestamp", "comment"];

pub fn write_columnar(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let mut header: Vec<String> = FIXED.iter().map(|s| s.to_string()).collect();
    header.extend(dataset.schema.names());
    writeln!(w, "{}", header.join("\t")).map_err(io)?;
    for s in &dataset.samples {
        let mut fields = vec![
            s.label.to_string(),
            s.user.to_string(),
            s.item.to_string(),
            s.timestamp.map(|t| t.to_string()).unwrap_or_default(),
            u8::from(s.comment).to_string(),
        ];
        for v in &s.features {
            fields.push(match v {
                FeatureValue::Id(x) => x.to_string(),
                FeatureValue::Seq(xs) => xs.iter().map(u32::to_string).collect::<Vec<_>>().join("|"),
            });
        }
        writeln!(w, "{}", fields.join("\t")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_columnar(path: &Path, schema: &FeatureSchema, channels: Vec<CountChannel>) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let bad = |line: usize, msg: String| Error::Data {
        path: path.to_path_buf(),
        message: format!("line {line}: {msg}"),
    };
    let header = lines
        .next()
        .ok_or_else(|| bad(1, "missing header".into()))?
        .map_err(|e| Error::io(path, e))?;
    let mut expected: Vec<String> = FIXED.iter().map(|s| s.to_string()).collect();
    expected.extend(schema.names());
    if header.split('\t').collect::<Vec<_>>() != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(bad(1, "header does not match the schema".into()));
    }
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let no = i + 2;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != expected.len() {
            return Err(bad(no, format!("expected {} fields, found {}", expected.len(), cols.len())));
        }
        let num = |s: &str| s.parse::<u32>().map_err(|e| bad(no, format!("`{s}`: {e}")));
        let timestamp = if cols[3].is_empty() {
            None
        } else {
            Some(cols[3].parse::<i64>().map_err(|e| bad(no, e.to_string()))?)
        };
        let mut features = Vec::with_capacity(schema.len());
        for (f, raw) in schema.features().iter().zip(&cols[5..]) {
            features.push(if f.sequence {
                let vals = if raw.is_empty() {
                    Vec::new()
                } else {
                    raw.split('|').map(num).collect::<Result<Vec<_>>>()?
                };
                FeatureValue::Seq(vals)
            } else {
                FeatureValue::Id(num(raw)?)
            });
        }
        samples.push(Sample {
            features,
            label: num(cols[0])? as u8,
            user: num(cols[1])?,
            item: num(cols[2])?,
            timestamp,
            comment: cols[4] == "1",
        });
    }
    Dataset::new(schema.clone(), samples, Split::All, channels)
}
