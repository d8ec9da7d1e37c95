//! JSON-lines token traces.
//!
//! One [`TokenRecord`] per line with a fixed key order. Reals are written
//! with 17 significant digits so a read/write cycle reproduces the file
//! byte for byte. Each top-k list costs roughly 30 bytes per entry, so a
//! trace with `k = 20` on both sides carries about 1.2 kB per token.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde_json::{Map, Value};

use crate::categorical::SparseTopK;
use crate::correction::{TokenRecord, LOGP_TOL};
use crate::error::{Error, Result};

/// Keys of a trace line, in the order they are written.
pub const TRACE_KEYS: [&str; 10] = [
    "token_id",
    "logp_inf",
    "logp_ref",
    "logp_new",
    "advantage",
    "group_id",
    "trajectory_id",
    "position",
    "topk_inf",
    "topk_new",
];

fn push_real(out: &mut String, x: f64) {
    write!(out, "{x:.16e}").expect("writing to a String cannot fail");
}

fn push_topk(out: &mut String, list: &SparseTopK) {
    out.push('[');
    for (i, &(id, lp)) in list.entries().iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(out, "[{id},").expect("writing to a String cannot fail");
        push_real(out, lp);
        out.push(']');
    }
    out.push(']');
}

/// Canonical single-line form of `rec`, without the trailing newline.
pub fn format_record(rec: &TokenRecord) -> String {
    let mut out = String::with_capacity(256 + 32 * (rec.topk_inf.k() + rec.topk_new.k()));
    write!(out, "{{\"token_id\":{},\"logp_inf\":", rec.token_id).expect("infallible");
    push_real(&mut out, rec.logp_inf);
    out.push_str(",\"logp_ref\":");
    push_real(&mut out, rec.logp_ref);
    out.push_str(",\"logp_new\":");
    push_real(&mut out, rec.logp_new);
    out.push_str(",\"advantage\":");
    push_real(&mut out, rec.advantage);
    write!(
        out,
        ",\"group_id\":{},\"trajectory_id\":{},\"position\":{},\"topk_inf\":",
        rec.group_id, rec.trajectory_id, rec.position
    )
    .expect("infallible");
    push_topk(&mut out, &rec.topk_inf);
    out.push_str(",\"topk_new\":");
    push_topk(&mut out, &rec.topk_new);
    out.push('}');
    out
}

pub fn write_trace<W: Write>(mut out: W, records: &[TokenRecord]) -> Result<()> {
    for rec in records {
        out.write_all(format_record(rec).as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Writes `records` to `path` through a temporary file and a rename.
pub fn write_trace_file(path: &Path, records: &[TokenRecord]) -> Result<()> {
    let mut buf = Vec::new();
    write_trace(&mut buf, records)?;
    crate::output::write_atomic(path, &buf)
}

fn parse_error(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn field<'a>(obj: &'a Map<String, Value>, key: &str, line: usize) -> Result<&'a Value> {
    obj.get(key)
        .ok_or_else(|| parse_error(line, format!("missing key `{key}`")))
}

fn real(obj: &Map<String, Value>, key: &str, line: usize) -> Result<f64> {
    field(obj, key, line)?
        .as_f64()
        .ok_or_else(|| parse_error(line, format!("`{key}` must be a number")))
}

fn integer(obj: &Map<String, Value>, key: &str, line: usize) -> Result<u64> {
    field(obj, key, line)?
        .as_u64()
        .ok_or_else(|| parse_error(line, format!("`{key}` must be a non-negative integer")))
}

fn topk(obj: &Map<String, Value>, key: &str, line: usize) -> Result<SparseTopK> {
    let bad = || parse_error(line, format!("`{key}` must be a list of [id, logp] pairs"));
    let items = field(obj, key, line)?.as_array().ok_or_else(bad)?;
    let mut entries = Vec::with_capacity(items.len());
    for item in items {
        match item.as_array().map(Vec::as_slice) {
            Some([id, lp]) => {
                let id = id.as_u64().ok_or_else(bad)?;
                let lp = lp.as_f64().ok_or_else(bad)?;
                entries.push((id as usize, lp));
            }
            _ => return Err(bad()),
        }
    }
    SparseTopK::with_mass_tolerance(entries, LOGP_TOL).map_err(|e| parse_error(line, format!("`{key}`: {e}")))
}

/// Parses one trace line; `line` is the 1-based line number used in errors.
pub fn parse_record(text: &str, line: usize) -> Result<TokenRecord> {
    let value: Value = serde_json::from_str(text).map_err(|e| parse_error(line, e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| parse_error(line, "expected a JSON object"))?;
    if let Some(key) = obj.keys().find(|k| !TRACE_KEYS.contains(&k.as_str())) {
        return Err(parse_error(line, format!("unknown key `{key}`")));
    }
    let rec = TokenRecord {
        token_id: integer(obj, "token_id", line)? as usize,
        logp_inf: real(obj, "logp_inf", line)?,
        logp_ref: real(obj, "logp_ref", line)?,
        logp_new: real(obj, "logp_new", line)?,
        advantage: real(obj, "advantage", line)?,
        group_id: integer(obj, "group_id", line)?,
        trajectory_id: integer(obj, "trajectory_id", line)?,
        position: integer(obj, "position", line)?,
        topk_inf: topk(obj, "topk_inf", line)?,
        topk_new: topk(obj, "topk_new", line)?,
    };
    rec.validate(line).map_err(|e| match e {
        Error::InvalidRecord { message, .. } => parse_error(line, message),
        other => parse_error(line, other.to_string()),
    })?;
    Ok(rec)
}

/// Reads every record; blank lines are skipped.
pub fn read_trace<R: BufRead>(input: R) -> Result<Vec<TokenRecord>> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_record(&line, i + 1)?);
    }
    Ok(records)
}

pub fn read_trace_file(path: &Path) -> Result<Vec<TokenRecord>> {
    read_trace(BufReader::new(File::open(path).map_err(crate::error::file_error(path))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::categorical::Categorical;
    use crate::correction::tests::record_from;

    fn cat(p: &[f64]) -> Categorical {
        Categorical::from_probs(p).unwrap()
    }

    fn sample() -> Vec<TokenRecord> {
        let mut a = record_from(0, &cat(&[0.5, 0.3, 0.2]), &cat(&[0.6, 0.3, 0.1]), &cat(&[0.7, 0.2, 0.1]), 2);
        a.advantage = -0.25;
        a.trajectory_id = 3;
        a.position = 7;
        let mut b = record_from(2, &cat(&[0.1, 0.1, 0.8]), &cat(&[0.2, 0.2, 0.6]), &cat(&[0.3, 0.3, 0.4]), 3);
        b.group_id = 1;
        vec![a, b]
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let mut first = Vec::new();
        write_trace(&mut first, &sample()).unwrap();
        let parsed = read_trace(first.as_slice()).unwrap();
        assert_eq!(parsed, sample());
        let mut second = Vec::new();
        write_trace(&mut second, &parsed).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn keys_are_written_in_order() {
        let line = format_record(&sample()[0]);
        let positions: Vec<usize> = TRACE_KEYS
            .iter()
            .map(|k| line.find(&format!("\"{k}\"")).unwrap())
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn missing_key_names_key_and_line() {
        let recs = sample();
        let second = format_record(&recs[1]).replace(",\"advantage\":1.0000000000000000e0", "");
        let text = format!("{}\n{second}\n", format_record(&recs[0]));
        let err = read_trace(text.as_bytes()).unwrap_err().to_string();
        assert_eq!(err, "line 2: missing key `advantage`");
    }

    #[test]
    fn rejects_positive_log_probs_and_bad_lists() {
        let line = format_record(&sample()[0]);
        let text = line.replacen("\"logp_ref\":-5", "\"logp_ref\":5", 1);
        assert!(parse_record(&text, 1).unwrap_err().to_string().contains("logp_ref"));
        let unsorted = r#"{"token_id":0,"logp_inf":-1.0,"logp_ref":-1.0,"logp_new":-1.0,"advantage":0.0,"group_id":0,"trajectory_id":0,"position":0,"topk_inf":[[1,-2.0],[0,-1.0]],"topk_new":[[0,-1.0]]}"#;
        assert!(parse_record(unsorted, 4).unwrap_err().to_string().contains("topk_inf"));
        assert!(parse_record("[1, 2]", 1).is_err());
        assert!(parse_record("{not json", 1).is_err());
    }

    #[test]
    fn serving_engine_rounding_is_tolerated() {
        let line = r#"{"token_id":0,"logp_inf":5e-7,"logp_ref":-1.0,"logp_new":-1.0,"advantage":0.0,"group_id":0,"trajectory_id":0,"position":0,"topk_inf":[[0,5e-7]],"topk_new":[[0,-1.0]]}"#;
        assert!(parse_record(line, 1).is_ok());
    }
}
