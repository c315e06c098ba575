//! Line-delimited JSON cue files.
//!
//! The first line is a header `{"dim": d, "version": 1}`; every following
//! line is one `(sample_id, option_id)` record.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CueSet, CueTable};
use crate::error::{Error, Result};
use crate::numerics::Vector;

pub const CUE_FILE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dim: usize,
    version: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    sample_id: String,
    option_id: usize,
    positive: Vec<f64>,
    negative: Vec<f64>,
    variants: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    agreement: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    variance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    uncertainty: Option<f64>,
}

pub fn save_cue_table(table: &CueTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = Header {
        dim: table.dim(),
        version: CUE_FILE_VERSION,
    };
    write_json_line(&mut out, &header, path)?;
    for (sample_id, option_id, cues) in table.iter() {
        let record = Record {
            sample_id: sample_id.to_string(),
            option_id,
            positive: cues.positive.to_vec(),
            negative: cues.negative.to_vec(),
            variants: cues.variants.iter().map(|v| v.to_vec()).collect(),
            agreement: cues.agreement,
            variance: cues.variance,
            uncertainty: cues.uncertainty,
        };
        write_json_line(&mut out, &record, path)?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_cue_table(path: impl AsRef<Path>) -> Result<CueTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut lines = BufReader::new(file).lines().enumerate();
    let header: Header = loop {
        match lines.next() {
            None => return Err(parse_err(1, "missing header record".into())),
            Some((i, line)) => {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| parse_err(i + 1, format!("header: {e}")))?;
            }
        }
    };
    if header.version != CUE_FILE_VERSION {
        return Err(parse_err(
            1,
            format!("unsupported cue file version {}", header.version),
        ));
    }

    let mut table = CueTable::new(header.dim);
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record =
            serde_json::from_str(&line).map_err(|e| parse_err(line_no, e.to_string()))?;
        let vector = |field: &str, values: Vec<f64>| -> Result<Vector> {
            if values.len() != header.dim {
                return Err(Error::Consistency(format!(
                    "line {line_no}: field `{field}` has dim {}, header declares {}",
                    values.len(),
                    header.dim
                )));
            }
            Vector::new(values).map_err(|e| parse_err(line_no, format!("field `{field}`: {e}")))
        };
        let positive = vector("positive", record.positive)?;
        let negative = vector("negative", record.negative)?;
        let variants = record
            .variants
            .into_iter()
            .map(|v| vector("variants", v))
            .collect::<Result<Vec<_>>>()?;
        let mut cues = CueSet::new(positive, negative, variants)?;
        cues.agreement = record.agreement;
        cues.variance = record.variance;
        cues.uncertainty = record.uncertainty;
        table.insert(record.sample_id, record.option_id, cues)?;
    }
    Ok(table)
}

fn write_json_line<T: Serialize>(out: &mut impl Write, value: &T, path: &Path) -> Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n").map_err(|e| Error::io(path, e))
}
