//! Single-worker relational operators over [`Table`].
//!
//! Every operator is pure. Output row orders are fully determined: source
//! order for filters, first appearance for distinct/grouping operators, and
//! the join ordering documented on [`local_join`].

mod groupby;
mod join;
mod setops;

use std::collections::HashSet;

pub use groupby::{groupby_aggregate, AggKind};
pub use groupby::agg_column_name;
pub(crate) use groupby::{aggregate_column, group_rows, output_schema as groupby_schema};
pub use join::{join_output_schema, local_join, JoinKind};
pub(crate) use join::{assemble as assemble_join, check_keys, join_indices};
pub use setops::{set_op, SetOpKind};

use crate::columnar::{
    cmp_rows, cmp_values, Column, ColumnBuilder, ColumnData, DataType, Field, KeyEncoder, Scalar,
    Schema, Table, Value,
};
use crate::error::{Error, Result};
use crate::io::render_f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

/// Row predicate. Any comparison involving a null cell is false.
#[derive(Debug, Clone, PartialEq)]
pub enum Predicate {
    Compare { column: String, op: CmpOp, value: Scalar },
    IsNull(String),
    NotNull(String),
    And(Box<Predicate>, Box<Predicate>),
    Or(Box<Predicate>, Box<Predicate>),
    Not(Box<Predicate>),
}

impl Predicate {
    pub fn cmp(column: &str, op: CmpOp, value: impl Into<Scalar>) -> Self {
        Predicate::Compare { column: column.to_string(), op, value: value.into() }
    }

    pub fn and(self, other: Predicate) -> Self {
        Predicate::And(Box::new(self), Box::new(other))
    }

    pub fn or(self, other: Predicate) -> Self {
        Predicate::Or(Box::new(self), Box::new(other))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(self) -> Self {
        Predicate::Not(Box::new(self))
    }

    /// Evaluates the predicate on every row of `t`.
    pub fn evaluate(&self, t: &Table) -> Result<Vec<bool>> {
        let n = t.nrows();
        Ok(match self {
            Predicate::Compare { column, op, value } => {
                let c = t.column_by_name(column)?;
                let lit = value.as_value();
                if !lit.is_null() && !comparable(c.dtype(), lit) {
                    return Err(Error::WrongType {
                        column: column.clone(),
                        actual: c.dtype(),
                        expected: "a type comparable with the literal",
                    });
                }
                (0..n).map(|r| compare_cell(c.value(r), *op, lit)).collect()
            }
            Predicate::IsNull(column) => {
                let c = t.column_by_name(column)?;
                (0..n).map(|r| !c.is_valid(r)).collect()
            }
            Predicate::NotNull(column) => {
                let c = t.column_by_name(column)?;
                (0..n).map(|r| c.is_valid(r)).collect()
            }
            Predicate::And(a, b) => {
                let (a, b) = (a.evaluate(t)?, b.evaluate(t)?);
                a.iter().zip(b).map(|(x, y)| *x && y).collect()
            }
            Predicate::Or(a, b) => {
                let (a, b) = (a.evaluate(t)?, b.evaluate(t)?);
                a.iter().zip(b).map(|(x, y)| *x || y).collect()
            }
            Predicate::Not(a) => a.evaluate(t)?.into_iter().map(|x| !x).collect(),
        })
    }
}

fn comparable(dtype: DataType, lit: Value<'_>) -> bool {
    matches!(
        (dtype, lit),
        (DataType::Int64 | DataType::Float64, Value::Int64(_) | Value::Float64(_))
            | (DataType::Bool, Value::Bool(_))
            | (DataType::Utf8, Value::Utf8(_))
    )
}

fn compare_cell(cell: Value<'_>, op: CmpOp, lit: Value<'_>) -> bool {
    if cell.is_null() || lit.is_null() {
        return false;
    }
    let ord = match (cell, lit) {
        (Value::Int64(a), Value::Float64(b)) => cmp_values(Value::Float64(a as f64), Value::Float64(b)),
        (Value::Float64(a), Value::Int64(b)) => cmp_values(Value::Float64(a), Value::Float64(b as f64)),
        (a, b) => cmp_values(a, b),
    };
    match op {
        CmpOp::Eq => ord.is_eq(),
        CmpOp::Ne => ord.is_ne(),
        CmpOp::Lt => ord.is_lt(),
        CmpOp::Le => ord.is_le(),
        CmpOp::Gt => ord.is_gt(),
        CmpOp::Ge => ord.is_ge(),
    }
}

/// Rows where `mask` is true, in order.
pub fn filter(t: &Table, mask: &[bool]) -> Result<Table> {
    if mask.len() != t.nrows() {
        return Err(Error::LengthMismatch(format!("mask of {} for {} rows", mask.len(), t.nrows())));
    }
    let idx: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    Ok(t.take_unchecked(&idx))
}

pub fn select(t: &Table, pred: &Predicate) -> Result<Table> {
    filter(t, &pred.evaluate(t)?)
}

/// Rows for which `keep(t, row)` holds.
pub fn select_by(t: &Table, mut keep: impl FnMut(&Table, usize) -> bool) -> Table {
    let idx: Vec<usize> = (0..t.nrows()).filter(|&r| keep(t, r)).collect();
    t.take_unchecked(&idx)
}

/// Keeps `cols` in the given order, optionally renaming them and then
/// prefixing every resulting name.
pub fn project<S: AsRef<str>>(
    t: &Table,
    cols: &[S],
    rename_to: Option<&[S]>,
    prefix: Option<&str>,
) -> Result<Table> {
    let idx = t.schema().indices_of(cols)?;
    if let Some(r) = rename_to {
        if r.len() != cols.len() {
            return Err(Error::LengthMismatch(format!(
                "{} new names for {} columns",
                r.len(),
                cols.len()
            )));
        }
    }
    let mut fields = Vec::with_capacity(idx.len());
    for (k, &i) in idx.iter().enumerate() {
        let base = match rename_to {
            Some(r) => r[k].as_ref().to_string(),
            None => t.schema().field(i).name.clone(),
        };
        let name = format!("{}{base}", prefix.unwrap_or(""));
        if fields.iter().any(|f: &Field| f.name == name) {
            return Err(Error::DuplicateResultName(name));
        }
        fields.push(Field::new(name, t.schema().field(i).dtype));
    }
    let columns = idx.iter().map(|&i| t.column(i).clone()).collect();
    Table::new(Schema::new(fields)?, columns)
}

/// Renames columns by `(old, new)` pairs, keeping positions.
pub fn rename(t: &Table, pairs: &[(&str, &str)]) -> Result<Table> {
    let mut fields = t.schema().fields().to_vec();
    for (old, new) in pairs {
        let i = t.schema().index_of(old)?;
        fields[i].name = new.to_string();
    }
    let schema = Schema::new(fields).map_err(|e| match e {
        Error::DuplicateColumn(n) => Error::DuplicateResultName(n),
        e => e,
    })?;
    Table::new(schema, t.columns().to_vec())
}

/// Column-wise transformation for [`transform_column`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Cast(DataType),
    /// Keep only ASCII alphanumeric characters of Utf8 cells.
    StripSymbols,
}

pub fn strip_symbols(s: &str) -> String {
    s.chars().filter(char::is_ascii_alphanumeric).collect()
}

/// Converts one column cell by cell. Nulls stay null.
///
/// Supported casts: Int64 to Float64; Float64 to Int64 (integral values in
/// range only); Int64, Float64 and Bool to Utf8; Utf8 to Int64 or Float64 by
/// parsing. Casting to the column's own type is the identity.
pub fn cast_column(c: &Column, name: &str, to: DataType) -> Result<Column> {
    let from = c.dtype();
    if from == to {
        return Ok(c.clone());
    }
    let mut b = ColumnBuilder::new(to, c.len());
    let fail = |row: usize, text: String| Error::CastFailure { column: name.to_string(), row, text };
    for r in 0..c.len() {
        let v = c.value(r);
        if v.is_null() {
            b.push_null();
            continue;
        }
        match (v, to) {
            (Value::Int64(x), DataType::Float64) => b.push_f64(x as f64),
            (Value::Float64(x), DataType::Int64) => {
                // 2^63 is the first double above i64::MAX
                if x.is_finite() && x.fract() == 0.0 && (-9.223_372_036_854_776e18..9.223_372_036_854_776e18).contains(&x) {
                    b.push_i64(x as i64);
                } else {
                    return Err(fail(r, render_f64(x)));
                }
            }
            (Value::Int64(x), DataType::Utf8) => b.push_str(&x.to_string()),
            (Value::Float64(x), DataType::Utf8) => b.push_str(&render_f64(x)),
            (Value::Bool(x), DataType::Utf8) => b.push_str(if x { "true" } else { "false" }),
            (Value::Utf8(s), DataType::Int64) => {
                b.push_i64(s.trim().parse().map_err(|_| fail(r, s.to_string()))?)
            }
            (Value::Utf8(s), DataType::Float64) => {
                b.push_f64(s.trim().parse().map_err(|_| fail(r, s.to_string()))?)
            }
            _ => return Err(Error::UnsupportedCast { from, to }),
        }
    }
    Ok(b.finish())
}

pub fn transform_column(t: &Table, col: &str, kind: Transform) -> Result<Table> {
    let i = t.schema().index_of(col)?;
    let src = t.column(i);
    let new_col = match kind {
        Transform::Cast(to) => {
            let supported = matches!(
                (src.dtype(), to),
                (a, b) if a == b
            ) || matches!(
                (src.dtype(), to),
                (DataType::Int64, DataType::Float64)
                    | (DataType::Float64, DataType::Int64)
                    | (DataType::Int64 | DataType::Float64 | DataType::Bool, DataType::Utf8)
                    | (DataType::Utf8, DataType::Int64 | DataType::Float64)
            );
            if !supported {
                return Err(Error::UnsupportedCast { from: src.dtype(), to });
            }
            cast_column(src, col, to)?
        }
        Transform::StripSymbols => match src.data() {
            ColumnData::Utf8(v) => {
                let stripped: Vec<String> = v.iter().map(|s| strip_symbols(s)).collect();
                Column::new(ColumnData::Utf8(stripped), Some(src.validity().clone()))?
            }
            _ => {
                return Err(Error::WrongType {
                    column: col.to_string(),
                    actual: src.dtype(),
                    expected: "utf8",
                })
            }
        },
    };
    let mut fields = t.schema().fields().to_vec();
    fields[i].dtype = new_col.dtype();
    let mut columns = t.columns().to_vec();
    columns[i] = new_col;
    Table::new(Schema::new(fields)?, columns)
}

fn subset_indices<S: AsRef<str>>(t: &Table, subset: Option<&[S]>) -> Result<Vec<usize>> {
    match subset {
        Some(cols) => t.schema().indices_of(cols),
        None => Ok((0..t.ncols()).collect()),
    }
}

/// Stable sort by `cols` under the total order (nulls first when
/// ascending). `ascending` has one flag per column.
pub fn orderby<S: AsRef<str>>(t: &Table, cols: &[S], ascending: &[bool]) -> Result<Table> {
    let idx = t.schema().indices_of(cols)?;
    if ascending.len() != idx.len() {
        return Err(Error::LengthMismatch(format!(
            "{} sort flags for {} columns",
            ascending.len(),
            idx.len()
        )));
    }
    Ok(t.take_unchecked(&sort_permutation(t, &idx, ascending)))
}

pub(crate) fn sort_permutation(t: &Table, idx: &[usize], ascending: &[bool]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..t.nrows()).collect();
    perm.sort_by(|&i, &j| cmp_rows(t, idx, i, t, idx, j, ascending));
    perm
}

/// First occurrence of each distinct key over `subset` (all columns when
/// `None`), in source order.
pub fn unique<S: AsRef<str>>(t: &Table, subset: Option<&[S]>) -> Result<Table> {
    let idx = subset_indices(t, subset)?;
    Ok(t.take_unchecked(&unique_rows(t, &idx)))
}

pub(crate) fn unique_rows(t: &Table, key_idx: &[usize]) -> Vec<usize> {
    let enc = KeyEncoder::new(t, key_idx);
    let mut seen: HashSet<Vec<u8>> = HashSet::with_capacity(t.nrows());
    let mut buf = Vec::new();
    let mut keep = Vec::new();
    for r in 0..t.nrows() {
        enc.encode(r, &mut buf);
        if !seen.contains(&buf) {
            seen.insert(buf.clone());
            keep.push(r);
        }
    }
    keep
}

/// Rows of `t` whose `col` value occurs among the non-null `probe_col` values.
pub fn isin(t: &Table, col: &str, probe: &Table, probe_col: &str) -> Result<Table> {
    let ci = t.schema().index_of(col)?;
    let pi = probe.schema().index_of(probe_col)?;
    let (lt, pt) = (t.schema().field(ci).dtype, probe.schema().field(pi).dtype);
    if lt != pt {
        return Err(Error::KeyTypeMismatch { left: lt, right: pt });
    }
    let penc = KeyEncoder::new(probe, &[pi]);
    let mut keys: HashSet<Vec<u8>> = HashSet::new();
    for r in 0..probe.nrows() {
        if probe.column(pi).is_valid(r) {
            keys.insert(penc.key(r).into_vec());
        }
    }
    let enc = KeyEncoder::new(t, &[ci]);
    let mut buf = Vec::new();
    Ok(select_by(t, |t, r| {
        if !t.column(ci).is_valid(r) {
            return false;
        }
        enc.encode(r, &mut buf);
        keys.contains(&buf)
    }))
}

/// Drops rows with a null in any of `subset` (all columns when `None`).
pub fn drop_nulls<S: AsRef<str>>(t: &Table, subset: Option<&[S]>) -> Result<Table> {
    let idx = subset_indices(t, subset)?;
    Ok(select_by(t, |t, r| idx.iter().all(|&c| t.column(c).is_valid(r))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NullMode {
    IsNull,
    NotNull,
}

/// Non-null Bool column flagging null (or present) cells of `col`.
pub fn null_mask(t: &Table, col: &str, mode: NullMode) -> Result<Column> {
    let c = t.column_by_name(col)?;
    Ok(Column::boolean(
        (0..t.nrows())
            .map(|r| match mode {
                NullMode::IsNull => !c.is_valid(r),
                NullMode::NotNull => c.is_valid(r),
            })
            .collect(),
    ))
}

/// Appends a column.
pub fn with_column(t: &Table, name: &str, col: Column) -> Result<Table> {
    if col.len() != t.nrows() {
        return Err(Error::LengthMismatch(format!("{} cells for {} rows", col.len(), t.nrows())));
    }
    let mut fields = t.schema().fields().to_vec();
    fields.push(Field::new(name, col.dtype()));
    let mut columns = t.columns().to_vec();
    columns.push(col);
    Table::new(Schema::new(fields)?, columns)
}

/// Every pair of rows, `a`-major. `b`'s column names colliding with `a`'s
/// get the `r_` prefix.
pub fn cross_product(a: &Table, b: &Table) -> Result<Table> {
    let schema = join_output_schema(a.schema(), b.schema())?;
    let (n, m) = (a.nrows(), b.nrows());
    let li: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, m)).collect();
    let ri: Vec<usize> = (0..n).flat_map(|_| 0..m).collect();
    let mut columns: Vec<Column> = a.columns().iter().map(|c| c.take(&li)).collect();
    columns.extend(b.columns().iter().map(|c| c.take(&ri)));
    Table::new(schema, columns)
}
