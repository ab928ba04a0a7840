//! Brute-force reference implementations of the local operators, written
//! over owned rows for clarity rather than speed.

use std::cmp::Ordering;
use std::collections::HashSet;

use crate::columnar::{canonical_f64, cmp_values, ColumnBuilder, DataType, Field, Scalar, Schema, Table, Value};
use crate::error::Result;
use crate::localops::{agg_column_name, join_output_schema, AggKind, JoinKind, SetOpKind};

pub type Row = Vec<Scalar>;

pub fn rows(t: &Table) -> Vec<Row> {
    (0..t.nrows()).map(|r| t.row(r).iter().map(Value::to_scalar).collect()).collect()
}

pub fn from_rows(schema: &Schema, rows: &[Row]) -> Result<Table> {
    let columns = (0..schema.len())
        .map(|c| {
            let mut b = ColumnBuilder::new(schema.field(c).dtype, rows.len());
            for row in rows {
                b.push_value(row[c].as_value())?;
            }
            Ok(b.finish())
        })
        .collect::<Result<Vec<_>>>()?;
    Table::new(schema.clone(), columns)
}

/// Hashable identity of a cell list; floats compare after canonicalization.
fn identity(cells: &[&Scalar]) -> String {
    let mut s = String::new();
    for c in cells {
        match c {
            Scalar::Float64(x) => s.push_str(&format!("F{:x}|", canonical_f64(*x).to_bits())),
            other => s.push_str(&format!("{other:?}|")),
        }
    }
    s
}

fn pick<'a>(row: &'a Row, idx: &[usize]) -> Vec<&'a Scalar> {
    idx.iter().map(|&i| &row[i]).collect()
}

fn keys_match(a: &Row, ai: &[usize], b: &Row, bi: &[usize]) -> bool {
    ai.iter().zip(bi).all(|(&i, &j)| {
        !matches!(a[i], Scalar::Null) && identity(&[&a[i]]) == identity(&[&b[j]])
    })
}

/// Nested-loop equi-join: matched pairs in left order, then unmatched left
/// rows, then unmatched right rows. Null keys never match.
pub fn nested_loop_join(l: &Table, r: &Table, on_l: &[&str], on_r: &[&str], kind: JoinKind) -> Result<Table> {
    let (li, ri) = (l.schema().indices_of(on_l)?, r.schema().indices_of(on_r)?);
    let schema = join_output_schema(l.schema(), r.schema())?;
    let (lrows, rrows) = (rows(l), rows(r));
    let nulls = |n: usize| vec![Scalar::Null; n];
    let mut out = Vec::new();
    let mut l_hit = vec![false; lrows.len()];
    let mut r_hit = vec![false; rrows.len()];
    for (a, lr) in lrows.iter().enumerate() {
        for (b, rr) in rrows.iter().enumerate() {
            if keys_match(lr, &li, rr, &ri) {
                l_hit[a] = true;
                r_hit[b] = true;
                out.push([lr.clone(), rr.clone()].concat());
            }
        }
    }
    if matches!(kind, JoinKind::Left | JoinKind::FullOuter) {
        for (_, lr) in lrows.iter().enumerate().filter(|(a, _)| !l_hit[*a]) {
            out.push([lr.clone(), nulls(r.ncols())].concat());
        }
    }
    if matches!(kind, JoinKind::Right | JoinKind::FullOuter) {
        for (_, rr) in rrows.iter().enumerate().filter(|(b, _)| !r_hit[*b]) {
            out.push([nulls(l.ncols()), rr.clone()].concat());
        }
    }
    from_rows(&schema, &out)
}

/// Rows for which `keep` holds, in order.
pub fn scan_select(t: &Table, keep: impl Fn(&Row) -> bool) -> Result<Table> {
    let kept: Vec<Row> = rows(t).into_iter().filter(|r| keep(r)).collect();
    from_rows(t.schema(), &kept)
}

fn aggregate(values: &[&Scalar], kind: AggKind, dtype: DataType) -> Scalar {
    let valid: Vec<&Scalar> = values.iter().copied().filter(|v| !matches!(v, Scalar::Null)).collect();
    if kind == AggKind::Count {
        return Scalar::Int64(valid.len() as i64);
    }
    if valid.is_empty() {
        return Scalar::Null;
    }
    let ints = || valid.iter().map(|v| match v {
        Scalar::Int64(x) => *x,
        other => panic!("expected int, got {other:?}"),
    });
    let floats = || valid.iter().map(|v| match v {
        Scalar::Float64(x) => *x,
        other => panic!("expected float, got {other:?}"),
    });
    match (kind, dtype) {
        (AggKind::Sum, DataType::Int64) => Scalar::Int64(ints().sum()),
        (AggKind::Prod, DataType::Int64) => Scalar::Int64(ints().product()),
        (AggKind::Sum, _) => Scalar::Float64(floats().reduce(|a, b| a + b).expect("non-empty")),
        (AggKind::Prod, _) => Scalar::Float64(floats().reduce(|a, b| a * b).expect("non-empty")),
        (AggKind::Mean, DataType::Int64) => {
            Scalar::Float64(ints().map(i128::from).sum::<i128>() as f64 / valid.len() as f64)
        }
        (AggKind::Mean, _) => {
            Scalar::Float64(floats().reduce(|a, b| a + b).expect("non-empty") / valid.len() as f64)
        }
        (AggKind::Min | AggKind::Max, _) => {
            let want = if kind == AggKind::Min { Ordering::Less } else { Ordering::Greater };
            let mut best = valid[0];
            for v in &valid[1..] {
                if cmp_values(v.as_value(), best.as_value()) == want {
                    best = v;
                }
            }
            best.clone()
        }
        (AggKind::Count, _) => unreachable!("handled above"),
    }
}

/// Groups in order of first appearance, each aggregate accumulated over the
/// group's rows in order. Null keys form their own group.
pub fn accumulate_groupby(t: &Table, keys: &[&str], aggs: &[(&str, AggKind)]) -> Result<Table> {
    let ki = t.schema().indices_of(keys)?;
    let all = rows(t);
    let mut ids: Vec<String> = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (r, row) in all.iter().enumerate() {
        let id = identity(&pick(row, &ki));
        match ids.iter().position(|x| *x == id) {
            Some(g) => members[g].push(r),
            None => {
                ids.push(id);
                members.push(vec![r]);
            }
        }
    }
    let mut fields: Vec<Field> = ki.iter().map(|&i| t.schema().field(i).clone()).collect();
    let mut agg_idx = Vec::new();
    for &(c, kind) in aggs {
        let ci = t.schema().index_of(c)?;
        let dtype = kind.output_type(c, t.schema().field(ci).dtype)?;
        fields.push(Field::new(agg_column_name(c, kind), dtype));
        agg_idx.push((ci, kind));
    }
    let out: Vec<Row> = members
        .iter()
        .map(|m| {
            let mut row: Row = ki.iter().map(|&i| all[m[0]][i].clone()).collect();
            for &(ci, kind) in &agg_idx {
                let vals: Vec<&Scalar> = m.iter().map(|&r| &all[r][ci]).collect();
                row.push(aggregate(&vals, kind, t.schema().field(ci).dtype));
            }
            row
        })
        .collect();
    from_rows(&Schema::new(fields)?, &out)
}

/// Set operations over whole rows with hash sets; distinct results in order
/// of first appearance.
pub fn hashset_set_op(a: &Table, b: &Table, kind: SetOpKind) -> Result<Table> {
    let all: Vec<usize> = (0..a.ncols()).collect();
    let (ar, br) = (rows(a), rows(b));
    let in_b: HashSet<String> = br.iter().map(|r| identity(&pick(r, &all))).collect();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let candidates: Box<dyn Iterator<Item = &Row>> = match kind {
        SetOpKind::Union => Box::new(ar.iter().chain(br.iter())),
        _ => Box::new(ar.iter()),
    };
    for row in candidates {
        let id = identity(&pick(row, &all));
        let keep = match kind {
            SetOpKind::Union => true,
            SetOpKind::Intersect => in_b.contains(&id),
            SetOpKind::Difference => !in_b.contains(&id),
        };
        if keep && seen.insert(id) {
            out.push(row.clone());
        }
    }
    from_rows(a.schema(), &out)
}

/// Stable insertion sort under the engine's total order.
pub fn reference_sort(t: &Table, cols: &[&str], ascending: &[bool]) -> Result<Table> {
    let ci = t.schema().indices_of(cols)?;
    let cmp = |a: &Row, b: &Row| {
        for (k, &c) in ci.iter().enumerate() {
            let o = cmp_values(a[c].as_value(), b[c].as_value());
            let o = if ascending[k] { o } else { o.reverse() };
            if o != Ordering::Equal {
                return o;
            }
        }
        Ordering::Equal
    };
    let mut sorted: Vec<Row> = Vec::new();
    for row in rows(t) {
        let at = sorted.iter().rposition(|s| cmp(s, &row) != Ordering::Greater).map_or(0, |p| p + 1);
        sorted.insert(at, row);
    }
    from_rows(t.schema(), &sorted)
}

/// First row of each distinct key over `subset`.
pub fn hashset_unique(t: &Table, subset: &[&str]) -> Result<Table> {
    let ki = t.schema().indices_of(subset)?;
    let mut seen = HashSet::new();
    let kept: Vec<Row> = rows(t).into_iter().filter(|r| seen.insert(identity(&pick(r, &ki)))).collect();
    from_rows(t.schema(), &kept)
}

/// Rows of `t` whose non-null `col` occurs among the non-null `probe_col`
/// values.
pub fn hashset_isin(t: &Table, col: &str, probe: &Table, probe_col: &str) -> Result<Table> {
    let pi = probe.schema().index_of(probe_col)?;
    let set: HashSet<String> = rows(probe)
        .iter()
        .filter(|r| !matches!(r[pi], Scalar::Null))
        .map(|r| identity(&[&r[pi]]))
        .collect();
    let ci = t.schema().index_of(col)?;
    scan_select(t, |r| !matches!(r[ci], Scalar::Null) && set.contains(&identity(&[&r[ci]])))
}

/// Description of the first cell where `a` and `b` differ, row order
/// included; floats compare bit-exactly.
pub fn ordered_diff(a: &Table, b: &Table) -> Option<String> {
    if a.schema() != b.schema() {
        return Some(format!("schema {} vs {}", a.schema(), b.schema()));
    }
    if a.nrows() != b.nrows() {
        return Some(format!("{} rows vs {} rows", a.nrows(), b.nrows()));
    }
    for r in 0..a.nrows() {
        for c in 0..a.ncols() {
            let (x, y) = (a.value(c, r), b.value(c, r));
            let same = match (x, y) {
                (Value::Float64(p), Value::Float64(q)) => p.to_bits() == q.to_bits(),
                _ => x == y,
            };
            if !same {
                return Some(format!("row {r}, column `{}`: {x:?} vs {y:?}", a.schema().field(c).name));
            }
        }
    }
    None
}
