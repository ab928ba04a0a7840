use std::collections::HashSet;

use crate::columnar::{KeyEncoder, Table};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SetOpKind {
    Union,
    Intersect,
    Difference,
}

impl std::str::FromStr for SetOpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "union" => Ok(SetOpKind::Union),
            "intersect" => Ok(SetOpKind::Intersect),
            "difference" => Ok(SetOpKind::Difference),
            _ => Err(Error::InvalidConfig(format!("unknown set operation {s:?}"))),
        }
    }
}

/// Set operation over whole rows. Null cells compare equal to each other
/// here, unlike join keys.
pub fn set_op(a: &Table, b: &Table, kind: SetOpKind) -> Result<Table> {
    if a.schema() != b.schema() {
        return Err(Error::SchemaMismatch(format!("{} vs {}", a.schema(), b.schema())));
    }
    let all: Vec<usize> = (0..a.ncols()).collect();
    let (aenc, benc) = (KeyEncoder::new(a, &all), KeyEncoder::new(b, &all));
    let mut seen: HashSet<Vec<u8>> = HashSet::new();
    let mut buf = Vec::new();
    let mut keep_a = Vec::new();
    match kind {
        SetOpKind::Union => {
            let mut keep_b = Vec::new();
            for r in 0..a.nrows() {
                aenc.encode(r, &mut buf);
                if seen.insert(buf.clone()) {
                    keep_a.push(r);
                }
            }
            for r in 0..b.nrows() {
                benc.encode(r, &mut buf);
                if seen.insert(buf.clone()) {
                    keep_b.push(r);
                }
            }
            crate::columnar::concat(a.schema(), [&a.take_unchecked(&keep_a), &b.take_unchecked(&keep_b)])
        }
        SetOpKind::Intersect | SetOpKind::Difference => {
            let in_b: HashSet<Vec<u8>> = (0..b.nrows()).map(|r| benc.key(r).into_vec()).collect();
            let want = kind == SetOpKind::Intersect;
            for r in 0..a.nrows() {
                aenc.encode(r, &mut buf);
                if in_b.contains(&buf) == want && seen.insert(buf.clone()) {
                    keep_a.push(r);
                }
            }
            Ok(a.take_unchecked(&keep_a))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::columnar::Column;
    use crate::localops::unique;

    fn x(v: Vec<i64>) -> Table {
        Table::from_columns(vec![("x", Column::int64(v))]).unwrap()
    }

    #[test]
    fn definitions() {
        let (a, b) = (x(vec![1, 2]), x(vec![2, 3]));
        assert_eq!(set_op(&a, &b, SetOpKind::Union).unwrap(), x(vec![1, 2, 3]));
        assert_eq!(set_op(&a, &b, SetOpKind::Intersect).unwrap(), x(vec![2]));
        assert_eq!(set_op(&a, &b, SetOpKind::Difference).unwrap(), x(vec![1]));
    }

    #[test]
    fn union_self_is_unique() {
        let a = x(vec![3, 1, 3, 2, 1]);
        assert_eq!(set_op(&a, &a, SetOpKind::Union).unwrap(), unique::<&str>(&a, None).unwrap());
    }

    #[test]
    fn distinct_results_and_nulls_equal() {
        let a = Table::from_columns(vec![("x", Column::from_opt_i64([None, None, Some(1), Some(1)]))]).unwrap();
        let b = Table::from_columns(vec![("x", Column::from_opt_i64([None]))]).unwrap();
        let i = set_op(&a, &b, SetOpKind::Intersect).unwrap();
        assert_eq!(i.nrows(), 1);
        assert!(!i.column(0).is_valid(0));
        assert_eq!(set_op(&a, &b, SetOpKind::Difference).unwrap().column(0), &Column::int64(vec![1]));
    }

    #[test]
    fn schema_mismatch() {
        let b = Table::from_columns(vec![("y", Column::int64(vec![1]))]).unwrap();
        assert!(matches!(set_op(&x(vec![1]), &b, SetOpKind::Union), Err(Error::SchemaMismatch(_))));
    }
}
