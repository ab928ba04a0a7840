use std::collections::HashMap;

use crate::columnar::{Field, KeyEncoder, Schema, Table};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum JoinKind {
    Inner,
    Left,
    Right,
    FullOuter,
}

impl std::str::FromStr for JoinKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "inner" => Ok(JoinKind::Inner),
            "left" => Ok(JoinKind::Left),
            "right" => Ok(JoinKind::Right),
            "full" | "fullouter" | "full_outer" | "outer" => Ok(JoinKind::FullOuter),
            _ => Err(Error::InvalidConfig(format!("unknown join kind {s:?}"))),
        }
    }
}

/// All of `l`'s fields, then `r`'s, with `r_` prepended to every `r` name
/// that also occurs in `l`.
pub fn join_output_schema(l: &Schema, r: &Schema) -> Result<Schema> {
    let mut fields: Vec<Field> = l.fields().to_vec();
    for f in r.fields() {
        let name = if l.index_of(&f.name).is_ok() { format!("r_{}", f.name) } else { f.name.clone() };
        if fields.iter().any(|g| g.name == name) {
            return Err(Error::DuplicateResultName(name));
        }
        fields.push(Field::new(name, f.dtype));
    }
    Schema::new(fields)
}

pub(crate) fn check_keys(l: &Table, on_l: &[usize], r: &Table, on_r: &[usize]) -> Result<()> {
    if on_l.len() != on_r.len() || on_l.is_empty() {
        return Err(Error::KeyArityMismatch { left: on_l.len(), right: on_r.len() });
    }
    for (&a, &b) in on_l.iter().zip(on_r) {
        let (ta, tb) = (l.schema().field(a).dtype, r.schema().field(b).dtype);
        if ta != tb {
            return Err(Error::KeyTypeMismatch { left: ta, right: tb });
        }
    }
    Ok(())
}

/// Row index pairs of the join. Matched pairs come first, in `l`'s row order
/// and, within one `l` row, `r`'s row order. Unmatched `l` rows (Left,
/// FullOuter) follow, then unmatched `r` rows (Right, FullOuter), each in
/// source order. Keys containing a null never match.
pub(crate) fn join_indices(
    l: &Table,
    on_l: &[usize],
    r: &Table,
    on_r: &[usize],
    kind: JoinKind,
) -> (Vec<Option<usize>>, Vec<Option<usize>>) {
    let renc = KeyEncoder::new(r, on_r);
    let mut index: HashMap<Vec<u8>, Vec<usize>> = HashMap::with_capacity(r.nrows());
    for j in 0..r.nrows() {
        if !renc.has_null(j) {
            index.entry(renc.key(j).into_vec()).or_default().push(j);
        }
    }
    let keep_l = matches!(kind, JoinKind::Left | JoinKind::FullOuter);
    let keep_r = matches!(kind, JoinKind::Right | JoinKind::FullOuter);
    let mut r_matched = vec![false; if keep_r { r.nrows() } else { 0 }];
    let mut l_unmatched = Vec::new();
    let (mut li, mut ri) = (Vec::new(), Vec::new());
    let lenc = KeyEncoder::new(l, on_l);
    let mut buf = Vec::new();
    for i in 0..l.nrows() {
        let hits = if lenc.has_null(i) {
            None
        } else {
            lenc.encode(i, &mut buf);
            index.get(&buf)
        };
        match hits {
            Some(js) => {
                for &j in js {
                    li.push(Some(i));
                    ri.push(Some(j));
                    if keep_r {
                        r_matched[j] = true;
                    }
                }
            }
            None if keep_l => l_unmatched.push(i),
            None => {}
        }
    }
    for i in l_unmatched {
        li.push(Some(i));
        ri.push(None);
    }
    if keep_r {
        for (j, m) in r_matched.iter().enumerate() {
            if !m {
                li.push(None);
                ri.push(Some(j));
            }
        }
    }
    (li, ri)
}

/// Equi-join of `l` and `r` on paired key columns.
///
/// ```
/// use bsptab::{Column, Table};
/// use bsptab::localops::{local_join, JoinKind};
/// let l = Table::from_columns(vec![("k", Column::int64(vec![1, 2]))]).unwrap();
/// let r = Table::from_columns(vec![
///     ("k", Column::int64(vec![2, 3])),
///     ("v", Column::utf8(["b", "c"])),
/// ]).unwrap();
/// let j = local_join(&l, &r, &["k"], &["k"], JoinKind::Inner).unwrap();
/// assert_eq!(j.schema().names().collect::<Vec<_>>(), ["k", "r_k", "v"]);
/// assert_eq!(j.nrows(), 1);
/// ```
pub fn local_join<S: AsRef<str>>(
    l: &Table,
    r: &Table,
    on_l: &[S],
    on_r: &[S],
    kind: JoinKind,
) -> Result<Table> {
    let on_l = l.schema().indices_of(on_l)?;
    let on_r = r.schema().indices_of(on_r)?;
    check_keys(l, &on_l, r, &on_r)?;
    let schema = join_output_schema(l.schema(), r.schema())?;
    let (li, ri) = join_indices(l, &on_l, r, &on_r, kind);
    Ok(assemble(schema, l, &li, r, &ri))
}

pub(crate) fn assemble(
    schema: Schema,
    l: &Table,
    li: &[Option<usize>],
    r: &Table,
    ri: &[Option<usize>],
) -> Table {
    let mut columns: Vec<_> = l.columns().iter().map(|c| c.take_opt(li)).collect();
    columns.extend(r.columns().iter().map(|c| c.take_opt(ri)));
    Table::with_columns(schema, columns, li.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::columnar::{Column, DataType};

    fn left() -> Table {
        Table::from_columns(vec![
            ("k", Column::from_opt_i64([Some(1), Some(2), None, Some(2)])),
            ("a", Column::utf8(["x", "y", "z", "w"])),
        ])
        .unwrap()
    }

    fn right() -> Table {
        Table::from_columns(vec![
            ("k", Column::from_opt_i64([Some(2), Some(3), None, Some(2)])),
            ("b", Column::int64(vec![20, 30, 0, 21])),
        ])
        .unwrap()
    }

    #[test]
    fn inner_orders_by_left_then_right() {
        let j = local_join(&left(), &right(), &["k"], &["k"], JoinKind::Inner).unwrap();
        assert_eq!(j.schema().names().collect::<Vec<_>>(), ["k", "a", "r_k", "b"]);
        assert_eq!(j.column(1), &Column::utf8(["y", "y", "w", "w"]));
        assert_eq!(j.column(3), &Column::int64(vec![20, 21, 20, 21]));
    }

    #[test]
    fn left_appends_unmatched_after_matches() {
        let j = local_join(&left(), &right(), &["k"], &["k"], JoinKind::Left).unwrap();
        assert_eq!(j.column(1), &Column::utf8(["y", "y", "w", "w", "x", "z"]));
        assert_eq!(
            j.column(3),
            &Column::from_opt_i64([Some(20), Some(21), Some(20), Some(21), None, None])
        );
    }

    #[test]
    fn right_appends_unmatched_right_rows() {
        let j = local_join(&left(), &right(), &["k"], &["k"], JoinKind::Right).unwrap();
        assert_eq!(j.column(3), &Column::int64(vec![20, 21, 20, 21, 30, 0]));
        assert_eq!(j.column(1).null_count(), 2);
    }

    #[test]
    fn full_outer_has_both_sides() {
        let j = local_join(&left(), &right(), &["k"], &["k"], JoinKind::FullOuter).unwrap();
        assert_eq!(j.nrows(), 8);
        assert_eq!(j.column(0).null_count(), 3);
        assert_eq!(j.column(1), &Column::from_opt_str([
            Some("y"), Some("y"), Some("w"), Some("w"), Some("x"), Some("z"), None, None,
        ]));
    }

    #[test]
    fn empty_side() {
        let empty = Table::empty(right().schema().clone());
        let j = local_join(&left(), &empty, &["k"], &["k"], JoinKind::Inner).unwrap();
        assert_eq!(j.nrows(), 0);
        assert_eq!(j.ncols(), 4);
        let j = local_join(&left(), &empty, &["k"], &["k"], JoinKind::Left).unwrap();
        assert_eq!(j.nrows(), 4);
    }

    #[test]
    fn key_validation() {
        let l = left();
        let r = right();
        assert!(matches!(
            local_join(&l, &r, &["k", "a"], &["k"], JoinKind::Inner),
            Err(Error::KeyArityMismatch { left: 2, right: 1 })
        ));
        assert!(matches!(
            local_join(&l, &r, &["a"], &["k"], JoinKind::Inner),
            Err(Error::KeyTypeMismatch { left: DataType::Utf8, right: DataType::Int64 })
        ));
        let clash = Table::from_columns(vec![
            ("k", Column::int64(vec![1])),
            ("r_k", Column::int64(vec![1])),
        ])
        .unwrap();
        assert!(matches!(
            local_join(&clash, &r, &["k"], &["k"], JoinKind::Inner),
            Err(Error::DuplicateResultName(_))
        ));
    }

    #[test]
    fn float_keys_canonical() {
        let l = Table::from_columns(vec![("f", Column::float64(vec![0.0, f64::NAN]))]).unwrap();
        let r = Table::from_columns(vec![("g", Column::float64(vec![-0.0, -f64::NAN]))]).unwrap();
        let j = local_join(&l, &r, &["f"], &["g"], JoinKind::Inner).unwrap();
        assert_eq!(j.nrows(), 2);
    }

    #[test]
    fn parse_kind() {
        assert_eq!("INNER".parse::<JoinKind>().unwrap(), JoinKind::Inner);
        assert_eq!("full_outer".parse::<JoinKind>().unwrap(), JoinKind::FullOuter);
        assert!("semi".parse::<JoinKind>().is_err());
    }
}
