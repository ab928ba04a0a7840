//! Order-insensitive table equality.

use super::{canonical_f64, cmp_rows, DataType, Table, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Equality {
    Equal,
    NotEqual,
}

/// Row permutation sorting `t` by every column under the total order.
///
/// Float64 columns come last in the sort key.
pub fn sort_indices_all_columns(t: &Table) -> Vec<usize> {
    let mut cols: Vec<usize> =
        (0..t.ncols()).filter(|&c| t.schema().field(c).dtype != DataType::Float64).collect();
    cols.extend((0..t.ncols()).filter(|&c| t.schema().field(c).dtype == DataType::Float64));
    let mut idx: Vec<usize> = (0..t.nrows()).collect();
    idx.sort_by(|&i, &j| cmp_rows(t, &cols, i, t, &cols, j, &[]));
    idx
}

/// Multiset equality of rows, Float64 compared bit-exactly after NaN and
/// signed-zero canonicalization.
pub fn canonical_compare(a: &Table, b: &Table) -> Equality {
    match canonical_diff(a, b, 0.0) {
        None => Equality::Equal,
        Some(_) => Equality::NotEqual,
    }
}

/// Like [`canonical_compare`] but Float64 cells may differ by `rel_tol`
/// relative to the larger magnitude. Returns a description of the first
/// difference, or `None` when the tables are equal.
pub fn canonical_diff(a: &Table, b: &Table, rel_tol: f64) -> Option<String> {
    canonical_diff_floor(a, b, rel_tol, 0.0)
}

/// Like [`canonical_diff`] with the tolerance scale bounded below by
/// `floor`, so cells near zero are compared absolutely.
pub fn canonical_diff_floor(a: &Table, b: &Table, rel_tol: f64, floor: f64) -> Option<String> {
    if a.schema() != b.schema() {
        return Some(format!("schema {} vs {}", a.schema(), b.schema()));
    }
    if a.nrows() != b.nrows() {
        return Some(format!("{} rows vs {} rows", a.nrows(), b.nrows()));
    }
    let ia = sort_indices_all_columns(a);
    let ib = sort_indices_all_columns(b);
    for (k, (&i, &j)) in ia.iter().zip(&ib).enumerate() {
        for c in 0..a.ncols() {
            let (x, y) = (a.value(c, i), b.value(c, j));
            if !cells_match(x, y, rel_tol, floor) {
                return Some(format!(
                    "sorted row {k}, column `{}`: {x:?} vs {y:?}",
                    a.schema().field(c).name
                ));
            }
        }
    }
    None
}

fn cells_match(x: Value<'_>, y: Value<'_>, rel_tol: f64, floor: f64) -> bool {
    match (x, y) {
        (Value::Float64(p), Value::Float64(q)) => {
            let (p, q) = (canonical_f64(p), canonical_f64(q));
            if p.to_bits() == q.to_bits() {
                return true;
            }
            if rel_tol == 0.0 || !p.is_finite() || !q.is_finite() {
                return false;
            }
            (p - q).abs() <= rel_tol * p.abs().max(q.abs()).max(floor)
        }
        (x, y) => x == y,
    }
}
