//! CSV ingestion with whole-file type inference, and CSV emission.
//!
//! Fields may be double-quoted with embedded quotes doubled; records end at
//! LF or CRLF. A field equal to the null token is null under every type.

use std::io::{Read, Write};

use crate::columnar::{ColumnBuilder, DataType, Field, Schema, Table, Value};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CsvOptions {
    pub delimiter: u8,
    pub has_header: bool,
    pub null_token: String,
    pub explicit_schema: Option<Schema>,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions { delimiter: b',', has_header: true, null_token: String::new(), explicit_schema: None }
    }
}

impl CsvOptions {
    pub fn with_schema(schema: Schema) -> Self {
        CsvOptions { explicit_schema: Some(schema), ..Default::default() }
    }

    fn validate(&self) -> Result<()> {
        let d = self.delimiter;
        if !(0x20..=0x7E).contains(&d) || d == b'"' {
            return Err(Error::InvalidOptions(format!("delimiter byte 0x{d:02x} not allowed")));
        }
        Ok(())
    }
}

/// Splits raw CSV bytes into records of unquoted field strings.
fn tokenize(input: &[u8], delim: u8) -> Result<Vec<Vec<String>>> {
    let mut records = Vec::new();
    let mut record: Vec<String> = Vec::new();
    let mut field: Vec<u8> = Vec::new();
    let mut line = 1usize;
    let mut i = 0usize;
    let n = input.len();
    let to_string = |f: &mut Vec<u8>, line: usize| -> Result<String> {
        String::from_utf8(std::mem::take(f))
            .map_err(|e| Error::Decode(format!("invalid utf-8 on line {line}: {e}")))
    };

    while i < n {
        // start of a field
        if input[i] == b'"' {
            let start_line = line;
            i += 1;
            loop {
                if i >= n {
                    return Err(Error::UnclosedQuote { line: start_line });
                }
                let b = input[i];
                if b == b'"' {
                    if i + 1 < n && input[i + 1] == b'"' {
                        field.push(b'"');
                        i += 2;
                        continue;
                    }
                    i += 1;
                    break;
                }
                if b == b'\n' {
                    line += 1;
                }
                field.push(b);
                i += 1;
            }
            // text between the closing quote and the next separator is kept verbatim
            while i < n && input[i] != delim && input[i] != b'\n' && input[i] != b'\r' {
                field.push(input[i]);
                i += 1;
            }
        } else {
            while i < n && input[i] != delim && input[i] != b'\n' {
                if input[i] == b'\r' && i + 1 < n && input[i + 1] == b'\n' {
                    break;
                }
                field.push(input[i]);
                i += 1;
            }
        }
        record.push(to_string(&mut field, line)?);
        if i >= n {
            break;
        }
        match input[i] {
            b if b == delim => {
                i += 1;
                if i == n {
                    record.push(String::new());
                }
            }
            b'\r' => {
                // CRLF
                i += 2;
                line += 1;
                records.push(std::mem::take(&mut record));
            }
            _ => {
                i += 1;
                line += 1;
                records.push(std::mem::take(&mut record));
            }
        }
    }
    if !record.is_empty() {
        records.push(record);
    }
    Ok(records)
}

fn parse_bool(s: &str) -> Option<bool> {
    if s.eq_ignore_ascii_case("true") {
        Some(true)
    } else if s.eq_ignore_ascii_case("false") {
        Some(false)
    } else {
        None
    }
}

fn infer_type<'a>(cells: impl Iterator<Item = &'a str> + Clone) -> DataType {
    if cells.clone().all(|s| s.parse::<i64>().is_ok()) {
        DataType::Int64
    } else if cells.clone().all(|s| s.parse::<f64>().is_ok()) {
        DataType::Float64
    } else if cells.clone().all(|s| parse_bool(s).is_some()) {
        DataType::Bool
    } else {
        DataType::Utf8
    }
}

/// Reads a whole CSV stream into a table.
///
/// Without an explicit schema each column takes the first type in the order
/// Int64, Float64, Bool, Utf8 that parses every non-null field. A column with
/// no non-null fields is Int64.
pub fn read_csv<R: Read>(mut source: R, opts: &CsvOptions) -> Result<Table> {
    opts.validate()?;
    let mut buf = Vec::new();
    source.read_to_end(&mut buf)?;
    let mut records = tokenize(&buf, opts.delimiter)?.into_iter();

    let header = if opts.has_header { records.next() } else { None };
    let rows: Vec<Vec<String>> = records.collect();

    let ncols = match (&opts.explicit_schema, &header, rows.first()) {
        (Some(s), _, _) => s.len(),
        (None, Some(h), _) => h.len(),
        (None, None, Some(r)) => r.len(),
        (None, None, None) => 0,
    };
    if let Some(h) = &header {
        if h.len() != ncols {
            return Err(Error::RaggedRow { row: 0, expected: ncols, found: h.len() });
        }
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != ncols {
            return Err(Error::RaggedRow { row: i, expected: ncols, found: r.len() });
        }
    }

    let fields: Vec<Field> = match &opts.explicit_schema {
        Some(s) => s.fields().to_vec(),
        None => (0..ncols)
            .map(|c| {
                let name = match &header {
                    Some(h) => h[c].clone(),
                    None => format!("c{c}"),
                };
                let cells = rows
                    .iter()
                    .map(move |r| r[c].as_str())
                    .filter(|s| *s != opts.null_token);
                Field::new(name, infer_type(cells))
            })
            .collect(),
    };

    let mut columns = Vec::with_capacity(ncols);
    for (c, f) in fields.iter().enumerate() {
        let mut b = ColumnBuilder::new(f.dtype, rows.len());
        for (r, row) in rows.iter().enumerate() {
            let s = row[c].as_str();
            if s == opts.null_token {
                b.push_null();
                continue;
            }
            let fail = || Error::CastFailure { column: f.name.clone(), row: r, text: s.to_string() };
            match f.dtype {
                DataType::Int64 => b.push_i64(s.parse().map_err(|_| fail())?),
                DataType::Float64 => b.push_f64(s.parse().map_err(|_| fail())?),
                DataType::Bool => b.push_bool(parse_bool(s).ok_or_else(fail)?),
                DataType::Utf8 => b.push_str(s),
            }
        }
        columns.push(b.finish());
    }
    Table::new(Schema::new(fields)?, columns)
}

/// Shortest decimal that parses back to the same bits.
pub fn render_f64(x: f64) -> String {
    format!("{x:?}")
}

/// Text form of a cell as written to CSV and produced by Utf8 casts;
/// `None` for null.
pub fn render_value(v: Value<'_>) -> Option<String> {
    match v {
        Value::Null => None,
        Value::Int64(x) => Some(x.to_string()),
        Value::Float64(x) => Some(render_f64(x)),
        Value::Bool(x) => Some(x.to_string()),
        Value::Utf8(s) => Some(s.to_string()),
    }
}

fn write_field(out: &mut Vec<u8>, s: &str, delim: u8) {
    let needs_quotes = s.bytes().any(|b| b == delim || b == b'"' || b == b'\n' || b == b'\r');
    if needs_quotes {
        out.push(b'"');
        for b in s.bytes() {
            if b == b'"' {
                out.push(b'"');
            }
            out.push(b);
        }
        out.push(b'"');
    } else {
        out.extend_from_slice(s.as_bytes());
    }
}

/// Writes `t` as CSV and returns the number of data rows written.
pub fn write_csv<W: Write>(t: &Table, mut sink: W, opts: &CsvOptions) -> Result<usize> {
    opts.validate()?;
    let d = opts.delimiter;
    let mut out = Vec::with_capacity(64 * (t.nrows() + 1));
    if opts.has_header {
        for (i, name) in t.schema().names().enumerate() {
            if i > 0 {
                out.push(d);
            }
            write_field(&mut out, name, d);
        }
        out.push(b'\n');
    }
    for r in 0..t.nrows() {
        for c in 0..t.ncols() {
            if c > 0 {
                out.push(d);
            }
            match render_value(t.value(c, r)) {
                None => out.extend_from_slice(opts.null_token.as_bytes()),
                Some(s) if t.schema().field(c).dtype == DataType::Utf8 => write_field(&mut out, &s, d),
                Some(s) => out.extend_from_slice(s.as_bytes()),
            }
        }
        out.push(b'\n');
        if out.len() > 1 << 20 {
            sink.write_all(&out).map_err(Error::SinkFailure)?;
            out.clear();
        }
    }
    sink.write_all(&out).map_err(Error::SinkFailure)?;
    sink.flush().map_err(Error::SinkFailure)?;
    Ok(t.nrows())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::columnar::{canonical_compare, Column, Equality};

    fn read(s: &str) -> Result<Table> {
        read_csv(s.as_bytes(), &CsvOptions::default())
    }

    fn write(t: &Table) -> String {
        let mut out = Vec::new();
        write_csv(t, &mut out, &CsvOptions::default()).unwrap();
        String::from_utf8(out).unwrap()
    }

    #[test]
    fn infers_int_and_utf8() {
        let t = read("a,b\n1,x\n2,y").unwrap();
        let expected = Table::from_columns(vec![
            ("a", Column::int64(vec![1, 2])),
            ("b", Column::utf8(["x", "y"])),
        ])
        .unwrap();
        assert_eq!(t, expected);
    }

    #[test]
    fn int_falls_back_to_float() {
        let t = read("a\n1\n2.5").unwrap();
        assert_eq!(t.column(0), &Column::float64(vec![1.0, 2.5]));
    }

    #[test]
    fn bool_is_case_insensitive() {
        let t = read("a\nTrue\nFALSE\n").unwrap();
        assert_eq!(t.column(0), &Column::boolean(vec![true, false]));
    }

    #[test]
    fn null_token_does_not_block_inference() {
        let t = read("a,b\n,1\n3,\n").unwrap();
        assert_eq!(t.column(0), &Column::from_opt_i64([None, Some(3)]));
        assert_eq!(t.column(1), &Column::from_opt_i64([Some(1), None]));
    }

    #[test]
    fn headerless_names() {
        let opts = CsvOptions { has_header: false, ..Default::default() };
        let t = read_csv("1,x\n".as_bytes(), &opts).unwrap();
        assert_eq!(t.schema().names().collect::<Vec<_>>(), vec!["c0", "c1"]);
    }

    #[test]
    fn quoted_fields_and_crlf() {
        let t = read("s,n\r\n\"x,y\",1\r\n\"he said \"\"hi\"\"\",2\r\n\"multi\nline\",3\r\n").unwrap();
        assert_eq!(t.column(0), &Column::utf8(["x,y", "he said \"hi\"", "multi\nline"]));
        assert_eq!(t.column(1), &Column::int64(vec![1, 2, 3]));
    }

    #[test]
    fn error_paths() {
        assert!(matches!(read("a,b\n1\n"), Err(Error::RaggedRow { row: 0, expected: 2, found: 1 })));
        assert!(matches!(read("a\n\"open\n"), Err(Error::UnclosedQuote { line: 2 })));
        let schema = Schema::new(vec![Field::new("a", DataType::Int64)]).unwrap();
        let r = read_csv("a\n1\nx\n".as_bytes(), &CsvOptions::with_schema(schema));
        assert!(matches!(r, Err(Error::CastFailure { row: 1, .. })));
        let bad = CsvOptions { delimiter: b'"', ..Default::default() };
        assert!(matches!(read_csv("".as_bytes(), &bad), Err(Error::InvalidOptions(_))));
    }

    #[test]
    fn null_written_as_token() {
        let t = Table::from_columns(vec![("a", Column::from_opt_i64([Some(1), None]))]).unwrap();
        assert_eq!(write(&t), "a\n1\n\n");
        assert_eq!(canonical_compare(&read(&write(&t)).unwrap(), &t), Equality::Equal);
    }

    #[test]
    fn quoting_rule() {
        let t = Table::from_columns(vec![("s", Column::utf8(["x,y", "plain", "q\"", "l\nf"]))])
            .unwrap();
        assert_eq!(write(&t), "s\n\"x,y\"\nplain\n\"q\"\"\"\n\"l\nf\"\n");
    }

    #[test]
    fn floats_keep_their_type_and_bits() {
        let vals = vec![1.0, -0.0, 0.1, 1e300, 5e-324, f64::INFINITY, f64::NEG_INFINITY];
        let t = Table::from_columns(vec![("f", Column::float64(vals.clone()))]).unwrap();
        let back = read(&write(&t)).unwrap();
        assert_eq!(back.schema().field(0).dtype, DataType::Float64);
        for (i, v) in vals.iter().enumerate() {
            assert_eq!(back.column(0).f64_at(i).to_bits(), v.to_bits());
        }
    }

    #[test]
    fn custom_delimiter_and_null_token() {
        let opts = CsvOptions { delimiter: b';', null_token: "NA".into(), ..Default::default() };
        let t = read_csv("a;b\nNA;x;y\n".as_bytes(), &opts);
        assert!(matches!(t, Err(Error::RaggedRow { .. })));
        let t = read_csv("a;b\nNA;\"x;y\"\n".as_bytes(), &opts).unwrap();
        assert_eq!(t.column(0).null_count(), 1);
        assert_eq!(t.column(1), &Column::utf8(["x;y"]));
    }

    #[test]
    fn trailing_delimiter_yields_empty_field() {
        let t = read("a,b\n1,\n").unwrap();
        assert_eq!(t.column(1).null_count(), 1);
    }
}
