//! Binary table format.
//!
//! ```text
//! "TMT1" | ncols u32 | nrows u64
//! per column:
//!   name_len u32 | name | dtype u8 | validity (ceil(nrows/8), LSB-first) | payload
//! payload:
//!   Int64 / Float64: nrows x 8 bytes
//!   Bool:            nrows bytes
//!   Utf8:            (nrows + 1) u32 offsets, then data bytes
//! ```
//!
//! All integers are little-endian. Null cells carry a zero payload.

use super::{fnv1a64, Bitmap, Column, ColumnData, DataType, Field, Schema, Table};
use crate::error::{Error, Result};

pub const TABLE_MAGIC: &[u8; 4] = b"TMT1";

pub fn serialize_table(t: &Table) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + t.nrows() * t.ncols() * 9);
    out.extend_from_slice(TABLE_MAGIC);
    out.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
    out.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
    for (f, c) in t.schema().fields().iter().zip(t.columns()) {
        out.extend_from_slice(&(f.name.len() as u32).to_le_bytes());
        out.extend_from_slice(f.name.as_bytes());
        out.push(f.dtype.code());
        out.extend_from_slice(c.validity().as_bytes());
        match c.data() {
            ColumnData::Int64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ColumnData::Float64(v) => {
                v.iter().for_each(|x| out.extend_from_slice(&x.to_bits().to_le_bytes()))
            }
            ColumnData::Bool(v) => out.extend(v.iter().map(|&b| u8::from(b))),
            ColumnData::Utf8(v) => {
                let mut off = 0u32;
                out.extend_from_slice(&off.to_le_bytes());
                for s in v {
                    off += s.len() as u32;
                    out.extend_from_slice(&off.to_le_bytes());
                }
                for s in v {
                    out.extend_from_slice(s.as_bytes());
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Decode(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn deserialize_table(bytes: &[u8]) -> Result<Table> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != TABLE_MAGIC {
        return Err(Error::Decode("bad table magic".into()));
    }
    let ncols = r.u32()? as usize;
    let nrows = usize::try_from(r.u64()?).map_err(|_| Error::Decode("row count".into()))?;
    let mut fields = Vec::with_capacity(ncols);
    let mut columns = Vec::with_capacity(ncols);
    for _ in 0..ncols {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Decode(format!("column name: {e}")))?
            .to_string();
        let dtype = DataType::from_code(r.u8()?)
            .ok_or_else(|| Error::Decode(format!("bad dtype code for `{name}`")))?;
        let validity = Bitmap::from_bytes(r.take(nrows.div_ceil(8))?.to_vec(), nrows)
            .ok_or_else(|| Error::Decode("validity length".into()))?;
        let data = match dtype {
            DataType::Int64 => ColumnData::Int64(
                r.take(nrows * 8)?
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DataType::Float64 => ColumnData::Float64(
                r.take(nrows * 8)?
                    .chunks_exact(8)
                    .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
                    .collect(),
            ),
            DataType::Bool => ColumnData::Bool(r.take(nrows)?.iter().map(|&b| b != 0).collect()),
            DataType::Utf8 => {
                let offsets: Vec<usize> = r
                    .take((nrows + 1) * 4)?
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
                    .collect();
                if offsets[0] != 0 || offsets.windows(2).any(|w| w[0] > w[1]) {
                    return Err(Error::Decode(format!("non-monotone offsets in `{name}`")));
                }
                let data = r.take(offsets[nrows])?;
                let mut strings = Vec::with_capacity(nrows);
                for w in offsets.windows(2) {
                    let s = std::str::from_utf8(&data[w[0]..w[1]])
                        .map_err(|e| Error::Decode(format!("utf8 in `{name}`: {e}")))?;
                    strings.push(s.to_string());
                }
                ColumnData::Utf8(strings)
            }
        };
        fields.push(Field::new(name, dtype));
        columns.push(Column::new(data, Some(validity))?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Decode(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Table::new(Schema::new(fields)?, columns)
}

/// Hash of the schema's names and types, used to check agreement across
/// workers before exchanging rows.
pub fn schema_digest(schema: &Schema) -> u64 {
    let mut buf = Vec::new();
    for f in schema.fields() {
        buf.extend_from_slice(&(f.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(f.name.as_bytes());
        buf.push(f.dtype.code());
    }
    fnv1a64(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_layout_of_small_table() {
        let t = Table::from_columns(vec![
            ("a", Column::from_opt_i64([Some(1), None])),
            ("s", Column::from_opt_str([Some("hi"), None])),
        ])
        .unwrap();
        let bytes = serialize_table(&t);
        let mut expected = b"TMT1".to_vec();
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(b'a');
        expected.push(1);
        expected.push(0b01);
        expected.extend_from_slice(&1i64.to_le_bytes());
        expected.extend_from_slice(&0i64.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(b's');
        expected.push(4);
        expected.push(0b01);
        for off in [0u32, 2, 2] {
            expected.extend_from_slice(&off.to_le_bytes());
        }
        expected.extend_from_slice(b"hi");
        assert_eq!(bytes, expected);
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let t = Table::from_columns(vec![("a", Column::int64(vec![1, 2, 3]))]).unwrap();
        let bytes = serialize_table(&t);
        assert!(deserialize_table(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(deserialize_table(&bad).is_err());
    }

    fn arb_table() -> impl Strategy<Value = Table> {
        (0usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(prop::option::of(any::<i64>()), n),
                prop::collection::vec(prop::option::of(any::<f64>()), n),
                prop::collection::vec(prop::option::of(any::<bool>()), n),
                prop::collection::vec(prop::option::of(".{0,6}"), n),
            )
                .prop_map(|(a, b, c, d)| {
                    Table::from_columns(vec![
                        ("i", Column::from_opt_i64(a)),
                        ("f", Column::from_opt_f64(b)),
                        ("b", Column::from_opt_bool(c)),
                        ("s", Column::from_opt_str(d)),
                    ])
                    .unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_identical(t in arb_table()) {
            let bytes = serialize_table(&t);
            let back = deserialize_table(&bytes).unwrap();
            prop_assert_eq!(serialize_table(&back), bytes);
        }
    }
}
