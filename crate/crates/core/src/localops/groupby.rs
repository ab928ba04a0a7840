use std::cmp::Ordering;
use std::collections::HashMap;

use crate::columnar::{cmp_values, Column, ColumnBuilder, DataType, Field, KeyEncoder, Schema, Table};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AggKind {
    Sum,
    Prod,
    Count,
    Mean,
    Min,
    Max,
}

impl AggKind {
    pub const ALL: [AggKind; 6] =
        [AggKind::Sum, AggKind::Prod, AggKind::Count, AggKind::Mean, AggKind::Min, AggKind::Max];

    pub fn name(self) -> &'static str {
        match self {
            AggKind::Sum => "sum",
            AggKind::Prod => "prod",
            AggKind::Count => "count",
            AggKind::Mean => "mean",
            AggKind::Min => "min",
            AggKind::Max => "max",
        }
    }

    /// Output type for an input column of `dtype`.
    pub fn output_type(self, column: &str, dtype: DataType) -> Result<DataType> {
        match (self, dtype) {
            (AggKind::Count, _) => Ok(DataType::Int64),
            (AggKind::Mean, DataType::Int64 | DataType::Float64) => Ok(DataType::Float64),
            (_, DataType::Int64 | DataType::Float64) => Ok(dtype),
            _ => Err(Error::NonNumericAggregate {
                column: column.to_string(),
                agg: self.name(),
                dtype,
            }),
        }
    }
}

impl std::str::FromStr for AggKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AggKind::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown aggregation {s:?}")))
    }
}

/// Dense group ids in order of first appearance.
#[derive(Debug, Clone)]
pub(crate) struct Grouping {
    pub first_rows: Vec<usize>,
    pub group_of: Vec<usize>,
}

impl Grouping {
    pub fn ngroups(&self) -> usize {
        self.first_rows.len()
    }
}

pub(crate) fn group_rows(t: &Table, key_idx: &[usize]) -> Grouping {
    let enc = KeyEncoder::new(t, key_idx);
    let mut ids: HashMap<Vec<u8>, usize> = HashMap::new();
    let mut first_rows = Vec::new();
    let mut group_of = Vec::with_capacity(t.nrows());
    let mut buf = Vec::new();
    for r in 0..t.nrows() {
        enc.encode(r, &mut buf);
        let g = match ids.get(&buf) {
            Some(&g) => g,
            None => {
                let g = first_rows.len();
                ids.insert(buf.clone(), g);
                first_rows.push(r);
                g
            }
        };
        group_of.push(g);
    }
    Grouping { first_rows, group_of }
}

/// Folds `c` per group with `kind`, skipping null cells.
pub(crate) fn aggregate_column(c: &Column, name: &str, kind: AggKind, g: &Grouping) -> Result<Column> {
    let out_type = kind.output_type(name, c.dtype())?;
    let n = g.ngroups();
    if kind == AggKind::Count {
        let mut counts = vec![0i64; n];
        for (r, &gi) in g.group_of.iter().enumerate() {
            if c.is_valid(r) {
                counts[gi] += 1;
            }
        }
        return Ok(Column::int64(counts));
    }
    match (kind, c.dtype()) {
        (AggKind::Sum | AggKind::Prod, DataType::Int64) => {
            let mut acc: Vec<Option<i64>> = vec![None; n];
            for (r, &gi) in g.group_of.iter().enumerate() {
                if !c.is_valid(r) {
                    continue;
                }
                let x = c.i64_at(r);
                acc[gi] = Some(match (acc[gi], kind) {
                    (None, _) => x,
                    (Some(a), AggKind::Sum) => a.checked_add(x).ok_or(Error::Overflow("int64 sum"))?,
                    (Some(a), _) => a.checked_mul(x).ok_or(Error::Overflow("int64 product"))?,
                });
            }
            Ok(Column::from_opt_i64(acc))
        }
        (AggKind::Sum | AggKind::Prod, _) => {
            let mut acc: Vec<Option<f64>> = vec![None; n];
            for (r, &gi) in g.group_of.iter().enumerate() {
                if !c.is_valid(r) {
                    continue;
                }
                let x = c.f64_at(r);
                acc[gi] = Some(match (acc[gi], kind) {
                    (None, _) => x,
                    (Some(a), AggKind::Sum) => a + x,
                    (Some(a), _) => a * x,
                });
            }
            Ok(Column::from_opt_f64(acc))
        }
        (AggKind::Mean, DataType::Int64) => {
            let mut acc = vec![(0i128, 0u64); n];
            for (r, &gi) in g.group_of.iter().enumerate() {
                if c.is_valid(r) {
                    acc[gi].0 += c.i64_at(r) as i128;
                    acc[gi].1 += 1;
                }
            }
            Ok(Column::from_opt_f64(
                acc.into_iter().map(|(s, k)| (k > 0).then(|| s as f64 / k as f64)),
            ))
        }
        (AggKind::Mean, _) => {
            let mut acc: Vec<(Option<f64>, u64)> = vec![(None, 0); n];
            for (r, &gi) in g.group_of.iter().enumerate() {
                if c.is_valid(r) {
                    let x = c.f64_at(r);
                    acc[gi].0 = Some(acc[gi].0.map_or(x, |s| s + x));
                    acc[gi].1 += 1;
                }
            }
            Ok(Column::from_opt_f64(acc.into_iter().map(|(s, k)| s.map(|s| s / k as f64))))
        }
        (AggKind::Min | AggKind::Max, _) => {
            let want = if kind == AggKind::Min { Ordering::Less } else { Ordering::Greater };
            let mut best: Vec<Option<usize>> = vec![None; n];
            for (r, &gi) in g.group_of.iter().enumerate() {
                if !c.is_valid(r) {
                    continue;
                }
                match best[gi] {
                    Some(b) if cmp_values(c.value(r), c.value(b)) != want => {}
                    _ => best[gi] = Some(r),
                }
            }
            let mut b = ColumnBuilder::new(out_type, n);
            for row in best {
                match row {
                    Some(r) => b.push_from(c, r),
                    None => b.push_null(),
                }
            }
            Ok(b.finish())
        }
        (AggKind::Count, _) => unreachable!("handled above"),
    }
}

/// Output name of an aggregate column.
pub fn agg_column_name(col: &str, kind: AggKind) -> String {
    format!("{col}_{}", kind.name())
}

pub(crate) fn output_schema(t: &Table, key_idx: &[usize], aggs: &[(usize, AggKind)]) -> Result<Schema> {
    let mut fields: Vec<Field> = key_idx.iter().map(|&i| t.schema().field(i).clone()).collect();
    for &(ci, kind) in aggs {
        let f = t.schema().field(ci);
        let name = agg_column_name(&f.name, kind);
        if fields.iter().any(|g| g.name == name) {
            return Err(Error::DuplicateResultName(name));
        }
        fields.push(Field::new(name, kind.output_type(&f.name, f.dtype)?));
    }
    Schema::new(fields)
}

/// One row per distinct key (null keys group together), keys first, then one
/// column per aggregate named `<col>_<agg>`. Groups appear in order of first
/// occurrence.
///
/// ```
/// use bsptab::{Column, Table};
/// use bsptab::localops::{groupby_aggregate, AggKind};
/// let t = Table::from_columns(vec![
///     ("k", Column::int64(vec![1, 1, 2])),
///     ("v", Column::int64(vec![10, 20, 5])),
/// ]).unwrap();
/// let g = groupby_aggregate(&t, &["k"], &[("v", AggKind::Sum)]).unwrap();
/// assert_eq!(g.column(1), &Column::int64(vec![30, 5]));
/// ```
pub fn groupby_aggregate<S: AsRef<str>>(t: &Table, keys: &[S], aggs: &[(S, AggKind)]) -> Result<Table> {
    let key_idx = t.schema().indices_of(keys)?;
    let agg_idx = aggs
        .iter()
        .map(|(c, k)| Ok((t.schema().index_of(c.as_ref())?, *k)))
        .collect::<Result<Vec<_>>>()?;
    let schema = output_schema(t, &key_idx, &agg_idx)?;
    let g = group_rows(t, &key_idx);
    let mut columns: Vec<Column> = key_idx.iter().map(|&i| t.column(i).take(&g.first_rows)).collect();
    for &(ci, kind) in &agg_idx {
        columns.push(aggregate_column(t.column(ci), &t.schema().field(ci).name, kind, &g)?);
    }
    Table::new(schema, columns)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(k: Vec<Option<i64>>, v: Vec<Option<f64>>) -> Table {
        Table::from_columns(vec![("k", Column::from_opt_i64(k)), ("v", Column::from_opt_f64(v))]).unwrap()
    }

    #[test]
    fn sum_by_key() {
        let t = Table::from_columns(vec![
            ("k", Column::int64(vec![1, 1, 2])),
            ("v", Column::int64(vec![10, 20, 5])),
        ])
        .unwrap();
        let g = groupby_aggregate(&t, &["k"], &[("v", AggKind::Sum)]).unwrap();
        assert_eq!(g.schema().names().collect::<Vec<_>>(), ["k", "v_sum"]);
        assert_eq!(g.column(0), &Column::int64(vec![1, 2]));
        assert_eq!(g.column(1), &Column::int64(vec![30, 5]));
    }

    #[test]
    fn all_null_group() {
        let t = kv(vec![Some(1)], vec![None]);
        let g = groupby_aggregate(
            &t,
            &["k"],
            &[("v", AggKind::Mean), ("v", AggKind::Count), ("v", AggKind::Min), ("v", AggKind::Prod)],
        )
        .unwrap();
        assert_eq!(g.column(1), &Column::from_opt_f64([None]));
        assert_eq!(g.column(2), &Column::int64(vec![0]));
        assert_eq!(g.column(3), &Column::from_opt_f64([None]));
        assert_eq!(g.column(4), &Column::from_opt_f64([None]));
    }

    #[test]
    fn null_keys_group_together_and_nulls_skipped() {
        let t = kv(vec![None, Some(1), None], vec![Some(1.0), None, Some(2.5)]);
        let g = groupby_aggregate(&t, &["k"], &[("v", AggKind::Sum), ("v", AggKind::Max)]).unwrap();
        assert_eq!(g.column(0), &Column::from_opt_i64([None, Some(1)]));
        assert_eq!(g.column(1), &Column::from_opt_f64([Some(3.5), None]));
        assert_eq!(g.column(2), &Column::from_opt_f64([Some(2.5), None]));
    }

    #[test]
    fn int_mean_and_minmax() {
        let t = Table::from_columns(vec![
            ("k", Column::utf8(["a", "a", "a"])),
            ("v", Column::int64(vec![3, -1, 5])),
        ])
        .unwrap();
        let aggs: Vec<(&str, AggKind)> = AggKind::ALL.iter().map(|&a| ("v", a)).collect();
        let g = groupby_aggregate(&t, &["k"], &aggs).unwrap();
        assert_eq!(g.column(1), &Column::int64(vec![7]));
        assert_eq!(g.column(2), &Column::int64(vec![-15]));
        assert_eq!(g.column(3), &Column::int64(vec![3]));
        assert_eq!(g.column(4), &Column::float64(vec![7.0 / 3.0]));
        assert_eq!(g.column(5), &Column::int64(vec![-1]));
        assert_eq!(g.column(6), &Column::int64(vec![5]));
    }

    #[test]
    fn errors() {
        let t = Table::from_columns(vec![
            ("k", Column::int64(vec![1, 1])),
            ("s", Column::utf8(["a", "b"])),
            ("v", Column::int64(vec![i64::MAX, 1])),
        ])
        .unwrap();
        assert!(matches!(
            groupby_aggregate(&t, &["k"], &[("s", AggKind::Sum)]),
            Err(Error::NonNumericAggregate { agg: "sum", .. })
        ));
        assert!(groupby_aggregate(&t, &["k"], &[("s", AggKind::Count)]).is_ok());
        assert!(matches!(
            groupby_aggregate(&t, &["k"], &[("v", AggKind::Sum)]),
            Err(Error::Overflow(_))
        ));
        assert!(matches!(
            groupby_aggregate(&t, &["k"], &[("v", AggKind::Sum), ("v", AggKind::Sum)]),
            Err(Error::DuplicateResultName(_))
        ));
    }

    #[test]
    fn nan_is_max_under_total_order() {
        let t = kv(vec![Some(1), Some(1)], vec![Some(f64::NAN), Some(1.0)]);
        let g = groupby_aggregate(&t, &["k"], &[("v", AggKind::Max), ("v", AggKind::Min)]).unwrap();
        assert!(g.column(1).f64_at(0).is_nan());
        assert_eq!(g.column(2).f64_at(0), 1.0);
    }

    #[test]
    fn parse_agg() {
        assert_eq!("MEAN".parse::<AggKind>().unwrap(), AggKind::Mean);
        assert!("median".parse::<AggKind>().is_err());
    }
}
