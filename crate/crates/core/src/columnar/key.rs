//! Canonical key bytes, the partition hash, and the total order on cells.

use std::cmp::Ordering;

use super::{Column, ColumnData, Table, Value};

/// Type tag written for a null key cell.
pub const TAG_NULL: u8 = 0x00;

/// Bit pattern every NaN is folded to before encoding or comparison.
pub const CANONICAL_NAN_BITS: u64 = 0x7FF8_0000_0000_0000;

const FNV_OFFSET: u64 = 14_695_981_039_346_656_037;
const FNV_PRIME: u64 = 1_099_511_628_211;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Folds every NaN to the quiet NaN and −0.0 to +0.0.
#[inline]
pub fn canonical_f64(x: f64) -> f64 {
    if x.is_nan() {
        f64::from_bits(CANONICAL_NAN_BITS)
    } else if x == 0.0 {
        0.0
    } else {
        x
    }
}

/// Encoded key of one row restricted to a set of key columns.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyBytes(Vec<u8>);

impl KeyBytes {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.0
    }

    pub fn hash64(&self) -> u64 {
        fnv1a64(&self.0)
    }
}

#[inline]
fn encode_cell(col: &Column, row: usize, out: &mut Vec<u8>) {
    if !col.is_valid(row) {
        out.push(TAG_NULL);
        return;
    }
    out.push(col.dtype().code());
    match col.data() {
        ColumnData::Int64(v) => out.extend_from_slice(&v[row].to_le_bytes()),
        ColumnData::Float64(v) => {
            out.extend_from_slice(&canonical_f64(v[row]).to_bits().to_le_bytes())
        }
        ColumnData::Bool(v) => out.push(u8::from(v[row])),
        ColumnData::Utf8(v) => {
            let s = v[row].as_bytes();
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s);
        }
    }
}

/// Encodes `row` of `t` over `key_cols` and hashes the bytes with FNV-1a.
pub fn encode_and_hash_key(t: &Table, key_cols: &[usize], row: usize) -> (KeyBytes, u64) {
    let enc = KeyEncoder::new(t, key_cols);
    let mut buf = Vec::new();
    enc.encode(row, &mut buf);
    let h = fnv1a64(&buf);
    (KeyBytes(buf), h)
}

/// Reusable row-key encoder over a fixed set of columns.
pub struct KeyEncoder<'a> {
    cols: Vec<&'a Column>,
}

impl<'a> KeyEncoder<'a> {
    pub fn new(t: &'a Table, key_cols: &[usize]) -> Self {
        KeyEncoder { cols: key_cols.iter().map(|&c| t.column(c)).collect() }
    }

    /// Appends the key bytes of `row` to `out` (which is cleared first).
    #[inline]
    pub fn encode(&self, row: usize, out: &mut Vec<u8>) {
        out.clear();
        for c in &self.cols {
            encode_cell(c, row, out);
        }
    }

    pub fn key(&self, row: usize) -> KeyBytes {
        let mut buf = Vec::new();
        self.encode(row, &mut buf);
        KeyBytes(buf)
    }

    pub fn hash(&self, row: usize, scratch: &mut Vec<u8>) -> u64 {
        self.encode(row, scratch);
        fnv1a64(scratch)
    }

    pub fn has_null(&self, row: usize) -> bool {
        self.cols.iter().any(|c| !c.is_valid(row))
    }
}

/// Total order on cells: nulls first; Float64 ordered −∞ < finite < +∞ < NaN
/// with −0.0 equal to +0.0; strings by bytes.
pub fn cmp_values(a: Value<'_>, b: Value<'_>) -> Ordering {
    match (a, b) {
        (Value::Null, Value::Null) => Ordering::Equal,
        (Value::Null, _) => Ordering::Less,
        (_, Value::Null) => Ordering::Greater,
        (Value::Int64(x), Value::Int64(y)) => x.cmp(&y),
        (Value::Float64(x), Value::Float64(y)) => canonical_f64(x).total_cmp(&canonical_f64(y)),
        (Value::Bool(x), Value::Bool(y)) => x.cmp(&y),
        (Value::Utf8(x), Value::Utf8(y)) => x.as_bytes().cmp(y.as_bytes()),
        (x, y) => type_rank(x).cmp(&type_rank(y)),
    }
}

fn type_rank(v: Value<'_>) -> u8 {
    match v {
        Value::Null => 0,
        Value::Int64(_) => 1,
        Value::Float64(_) => 2,
        Value::Bool(_) => 3,
        Value::Utf8(_) => 4,
    }
}

#[inline]
fn cmp_cells(a: &Column, i: usize, b: &Column, j: usize) -> Ordering {
    match (a.is_valid(i), b.is_valid(j)) {
        (false, false) => return Ordering::Equal,
        (false, true) => return Ordering::Less,
        (true, false) => return Ordering::Greater,
        _ => {}
    }
    match (a.data(), b.data()) {
        (ColumnData::Int64(x), ColumnData::Int64(y)) => x[i].cmp(&y[j]),
        (ColumnData::Float64(x), ColumnData::Float64(y)) => {
            canonical_f64(x[i]).total_cmp(&canonical_f64(y[j]))
        }
        (ColumnData::Bool(x), ColumnData::Bool(y)) => x[i].cmp(&y[j]),
        (ColumnData::Utf8(x), ColumnData::Utf8(y)) => x[i].as_bytes().cmp(y[j].as_bytes()),
        _ => cmp_values(a.value(i), b.value(j)),
    }
}

/// Lexicographic comparison of row `i` of `a` with row `j` of `b` over paired
/// column lists; `ascending[k] == false` reverses column `k`.
pub fn cmp_rows(
    a: &Table,
    a_cols: &[usize],
    i: usize,
    b: &Table,
    b_cols: &[usize],
    j: usize,
    ascending: &[bool],
) -> Ordering {
    for (k, (&ca, &cb)) in a_cols.iter().zip(b_cols).enumerate() {
        let ord = cmp_cells(a.column(ca), i, b.column(cb), j);
        let ord = if ascending.get(k).copied().unwrap_or(true) { ord } else { ord.reverse() };
        if ord != Ordering::Equal {
            return ord;
        }
    }
    Ordering::Equal
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::columnar::Column;

    /// Straight-line FNV-1a 64 from the published constants.
    fn reference_fnv(bytes: &[u8]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in bytes {
            h = (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    #[test]
    fn fnv_known_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn int64_zero_key() {
        let t = Table::from_columns(vec![("k", Column::int64(vec![0]))]).unwrap();
        let (key, h) = encode_and_hash_key(&t, &[0], 0);
        let expected = [0x01u8, 0, 0, 0, 0, 0, 0, 0, 0];
        assert_eq!(key.as_bytes(), &expected);
        assert_eq!(h, reference_fnv(&expected));
        assert_eq!(h, 0x529a_2cdc_8ff5_33ac);
    }

    #[test]
    fn nan_and_negative_zero_canonicalize() {
        let weird_nan = f64::from_bits(0xFFF0_0000_0000_0001);
        let t = Table::from_columns(vec![(
            "f",
            Column::float64(vec![f64::NAN, -f64::NAN, weird_nan, -0.0, 0.0]),
        )])
        .unwrap();
        let keys: Vec<KeyBytes> = (0..5).map(|r| encode_and_hash_key(&t, &[0], r).0).collect();
        assert_eq!(keys[0], keys[1]);
        assert_eq!(keys[0], keys[2]);
        assert_eq!(keys[3], keys[4]);
        let mut nan = vec![0x02u8];
        nan.extend_from_slice(&CANONICAL_NAN_BITS.to_le_bytes());
        assert_eq!(keys[0].as_bytes(), &nan[..]);
    }

    #[test]
    fn layout_of_mixed_key() {
        let t = Table::from_columns(vec![
            ("s", Column::from_opt_str([Some("ab")])),
            ("b", Column::boolean(vec![true])),
            ("n", Column::from_opt_i64([None])),
        ])
        .unwrap();
        let (key, _) = encode_and_hash_key(&t, &[0, 1, 2], 0);
        assert_eq!(key.as_bytes(), &[0x04, 2, 0, 0, 0, b'a', b'b', 0x03, 1, 0x00]);
    }

    #[test]
    fn equal_keys_on_separate_tables_hash_equal() {
        let mk = |pad: &str| {
            Table::from_columns(vec![
                ("pad", Column::utf8([pad])),
                ("s", Column::utf8(["drug"])),
                ("i", Column::int64(vec![42])),
            ])
            .unwrap()
        };
        let a = encode_and_hash_key(&mk("x"), &[1, 2], 0);
        let b = encode_and_hash_key(&mk("yyy"), &[1, 2], 0);
        assert_eq!(a, b);
    }

    #[test]
    fn float_total_order() {
        let vals = [f64::NEG_INFINITY, -1.0, -0.0, 0.0, 2.5, f64::INFINITY, f64::NAN];
        for (i, &a) in vals.iter().enumerate() {
            for (j, &b) in vals.iter().enumerate() {
                let ord = cmp_values(Value::Float64(a), Value::Float64(b));
                let zeros = (2..=3).contains(&i) && (2..=3).contains(&j);
                let expected = if zeros { Ordering::Equal } else { i.cmp(&j) };
                assert_eq!(ord, expected, "{a} vs {b}");
            }
        }
        assert_eq!(cmp_values(Value::Null, Value::Float64(f64::NEG_INFINITY)), Ordering::Less);
    }
}
