//! Distributed operators: a communication primitive composed with a local
//! operator, entered collectively by every rank.
//!
//! Each worker holds one partition of every table. Results are partitions of
//! the global result; gathering them gives (up to row order) what the local
//! operator returns on the gathered inputs.

use std::collections::HashSet;

use crate::columnar::{concat, Column, ColumnBuilder, DataType, KeyEncoder, Schema, Table};
use crate::comm::{Communicator, ReduceOp};
use crate::error::{Error, Result};
use crate::localops::{
    self, aggregate_column, assemble_join, check_keys, group_rows, groupby_schema, join_indices,
    join_output_schema, sort_permutation, unique_rows, AggKind, JoinKind, SetOpKind,
};
use crate::rng::Rng;

/// Sample rows drawn per rank by [`dist_sort`].
pub const SORT_SAMPLES_PER_RANK: usize = 32;
/// Default bound on global distinct probe keys in [`dist_isin`].
pub const DEFAULT_PROBE_LIMIT: usize = 1_000_000;
const SORT_SEED: u64 = 0x5eed_5a3b_1e00_0000;

/// A worker's handle for distributed operators.
#[derive(Debug)]
pub struct DistContext {
    comm: Communicator,
    probe_limit: usize,
}

impl DistContext {
    pub fn new(comm: Communicator) -> Self {
        DistContext { comm, probe_limit: DEFAULT_PROBE_LIMIT }
    }

    pub fn with_probe_limit(mut self, limit: usize) -> Self {
        self.probe_limit = limit;
        self
    }

    pub fn rank(&self) -> usize {
        self.comm.rank()
    }

    pub fn world_size(&self) -> usize {
        self.comm.world_size()
    }

    pub fn comm(&self) -> &Communicator {
        &self.comm
    }

    pub fn comm_mut(&mut self) -> &mut Communicator {
        &mut self.comm
    }

    pub fn into_comm(self) -> Communicator {
        self.comm
    }
}

/// Destination rank of every row: key hash modulo world size.
pub fn hash_destinations(t: &Table, key_idx: &[usize], world: usize) -> Vec<usize> {
    let enc = KeyEncoder::new(t, key_idx);
    let mut buf = Vec::new();
    (0..t.nrows()).map(|r| (enc.hash(r, &mut buf) % world as u64) as usize).collect()
}

fn shuffle_by_key(ctx: &DistContext, t: &Table, key_idx: &[usize]) -> Result<Table> {
    let dest = hash_destinations(t, key_idx, ctx.world_size());
    ctx.comm.shuffle_table(t, &dest)
}

fn all_columns(t: &Table) -> Vec<usize> {
    (0..t.ncols()).collect()
}

/// Hash-partitioned equi-join. Rows with null keys hash like any other key,
/// so outer rows survive exactly once.
pub fn dist_join<S: AsRef<str>>(
    ctx: &DistContext,
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
    let l = shuffle_by_key(ctx, l, &on_l)?;
    let r = shuffle_by_key(ctx, r, &on_r)?;
    let (li, ri) = join_indices(&l, &on_l, &r, &on_r, kind);
    Ok(assemble_join(schema, &l, &li, &r, &ri))
}

/// Sample sort. Rank `i` ends up locally sorted with every key at most the
/// smallest key on rank `i + 1`.
pub fn dist_sort<S: AsRef<str>>(ctx: &DistContext, t: &Table, cols: &[S], ascending: &[bool]) -> Result<Table> {
    let idx = t.schema().indices_of(cols)?;
    if ascending.len() != idx.len() {
        return Err(Error::LengthMismatch(format!(
            "{} sort flags for {} columns",
            ascending.len(),
            idx.len()
        )));
    }
    let p = ctx.world_size();
    let mut rng = Rng::new(SORT_SEED.wrapping_add(ctx.rank() as u64));
    let k = t.nrows().min(SORT_SAMPLES_PER_RANK);
    let mut rows = rng.sample_indices(t.nrows(), k);
    rows.sort_unstable();
    let sample = localops::project(&t.take_unchecked(&rows), cols, None, None)?;
    let gathered = ctx.comm.allgather_tables(&sample)?;
    let all = concat(sample.schema(), &gathered)?;
    let skey: Vec<usize> = (0..idx.len()).collect();
    let order = sort_permutation(&all, &skey, ascending);
    let splitters: Vec<usize> = (1..p).filter(|_| !order.is_empty()).map(|i| order[i * order.len() / p]).collect();
    let dest: Vec<usize> = (0..t.nrows())
        .map(|r| {
            splitters.partition_point(|&s| {
                crate::columnar::cmp_rows(&all, &skey, s, t, &idx, r, ascending).is_le()
            })
        })
        .collect();
    let mine = ctx.comm.shuffle_table(t, &dest)?;
    Ok(mine.take_unchecked(&sort_permutation(&mine, &idx, ascending)))
}

#[derive(Debug, Clone, Copy)]
enum Partial {
    Direct(AggKind),
    MeanParts,
}

/// Groupby with partial aggregation before the shuffle. Mean travels as a
/// (sum, count) pair and is finalized after combining.
pub fn dist_groupby_aggregate<S: AsRef<str>>(
    ctx: &DistContext,
    t: &Table,
    keys: &[S],
    aggs: &[(S, AggKind)],
) -> Result<Table> {
    let key_idx = t.schema().indices_of(keys)?;
    let agg_idx = aggs
        .iter()
        .map(|(c, k)| Ok((t.schema().index_of(c.as_ref())?, *k)))
        .collect::<Result<Vec<_>>>()?;
    let schema = groupby_schema(t, &key_idx, &agg_idx)?;

    let g = group_rows(t, &key_idx);
    let mut partial_cols: Vec<(String, Column)> = key_idx
        .iter()
        .map(|&i| (t.schema().field(i).name.clone(), t.column(i).take(&g.first_rows)))
        .collect();
    let mut plan = Vec::with_capacity(agg_idx.len());
    for &(ci, kind) in &agg_idx {
        let (c, name) = (t.column(ci), &t.schema().field(ci).name);
        let j = partial_cols.len();
        if kind == AggKind::Mean {
            partial_cols.push((format!("#{j}"), aggregate_column(c, name, AggKind::Sum, &g)?));
            partial_cols.push((format!("#{}", j + 1), aggregate_column(c, name, AggKind::Count, &g)?));
            plan.push((j, Partial::MeanParts));
        } else {
            partial_cols.push((format!("#{j}"), aggregate_column(c, name, kind, &g)?));
            plan.push((j, Partial::Direct(kind)));
        }
    }
    let partial = Table::from_columns(partial_cols)?;
    let nk = key_idx.len();
    let key_pos: Vec<usize> = (0..nk).collect();
    let mine = shuffle_by_key(ctx, &partial, &key_pos)?;

    let g = group_rows(&mine, &key_pos);
    let mut columns: Vec<Column> = key_pos.iter().map(|&i| mine.column(i).take(&g.first_rows)).collect();
    for (j, part) in plan {
        let name = &mine.schema().field(j).name;
        let col = match part {
            Partial::Direct(AggKind::Count) => aggregate_column(mine.column(j), name, AggKind::Sum, &g)?,
            Partial::Direct(kind) => aggregate_column(mine.column(j), name, kind, &g)?,
            Partial::MeanParts => {
                let sums = aggregate_column(mine.column(j), name, AggKind::Sum, &g)?;
                let counts = aggregate_column(mine.column(j + 1), name, AggKind::Sum, &g)?;
                Column::from_opt_f64((0..g.ngroups()).map(|i| {
                    sums.numeric_at(i).map(|s| s / counts.i64_at(i) as f64)
                }))
            }
        };
        columns.push(col);
    }
    Table::new(schema, columns)
}

/// Global first-occurrence deduplication over `subset` (all columns when
/// `None`). The survivor of each key is its first row in (rank, row) order.
pub fn dist_unique<S: AsRef<str>>(ctx: &DistContext, t: &Table, subset: Option<&[S]>) -> Result<Table> {
    let idx = match subset {
        Some(cols) => t.schema().indices_of(cols)?,
        None => all_columns(t),
    };
    let mine = shuffle_by_key(ctx, t, &idx)?;
    Ok(mine.take_unchecked(&unique_rows(&mine, &idx)))
}

pub fn dist_set_op(ctx: &DistContext, a: &Table, b: &Table, kind: SetOpKind) -> Result<Table> {
    if a.schema() != b.schema() {
        return Err(Error::SchemaMismatch(format!("{} vs {}", a.schema(), b.schema())));
    }
    let all = all_columns(a);
    let a = shuffle_by_key(ctx, a, &all)?;
    let b = shuffle_by_key(ctx, b, &all)?;
    localops::set_op(&a, &b, kind)
}

/// Filters local rows of `t` against the global set of `probe_col` values.
/// Only the distinct probe keys move; `t` stays in place.
pub fn dist_isin(ctx: &DistContext, t: &Table, col: &str, probe: &Table, probe_col: &str) -> Result<Table> {
    let ci = t.schema().index_of(col)?;
    let pi = probe.schema().index_of(probe_col)?;
    let (lt, pt) = (t.schema().field(ci).dtype, probe.schema().field(pi).dtype);
    if lt != pt {
        return Err(Error::KeyTypeMismatch { left: lt, right: pt });
    }
    let keys = localops::project(probe, &[probe_col], None, None)?;
    let keys = localops::drop_nulls::<&str>(&keys, None)?;
    let keys = localops::unique::<&str>(&keys, None)?;
    let gathered = ctx.comm.allgather_tables(&keys)?;
    let global = concat(keys.schema(), &gathered)?;
    let global = localops::unique::<&str>(&global, None)?;
    if global.nrows() > ctx.probe_limit {
        return Err(Error::ProbeTooLarge { keys: global.nrows(), limit: ctx.probe_limit });
    }
    localops::isin(t, col, &global, probe_col)
}

/// Per-column `(count, sum, sum of squares)` over non-null cells.
fn local_moments(t: &Table, idx: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(3 * idx.len());
    for &ci in idx {
        let c = t.column(ci);
        if !c.dtype().is_numeric() {
            return Err(Error::WrongType {
                column: t.schema().field(ci).name.clone(),
                actual: c.dtype(),
                expected: "numeric",
            });
        }
        let (mut n, mut s, mut q) = (0.0, 0.0, 0.0);
        for r in 0..c.len() {
            if let Some(x) = c.numeric_at(r) {
                n += 1.0;
                s += x;
                q += x * x;
            }
        }
        out.extend([n, s, q]);
    }
    Ok(out)
}

fn apply_moments(t: &Table, idx: &[usize], moments: &[f64]) -> Result<Table> {
    let mut fields = t.schema().fields().to_vec();
    let mut columns = t.columns().to_vec();
    for (k, &ci) in idx.iter().enumerate() {
        let (n, s, q) = (moments[3 * k], moments[3 * k + 1], moments[3 * k + 2]);
        if n < 2.0 {
            return Err(Error::DegenerateColumn { column: fields[ci].name.clone(), count: n as u64 });
        }
        let mu = s / n;
        let sigma = (q / n - mu * mu).max(0.0).sqrt();
        let c = t.column(ci);
        let mut b = ColumnBuilder::new(DataType::Float64, c.len());
        for r in 0..c.len() {
            b.push_opt_f64(c.numeric_at(r).map(|x| if sigma == 0.0 { 0.0 } else { (x - mu) / sigma }));
        }
        fields[ci].dtype = DataType::Float64;
        columns[ci] = b.finish();
    }
    Table::new(Schema::new(fields)?, columns)
}

/// Z-score scaling of `cols` with population moments of this table alone.
pub fn standard_scale<S: AsRef<str>>(t: &Table, cols: &[S]) -> Result<Table> {
    let idx = t.schema().indices_of(cols)?;
    let m = local_moments(t, &idx)?;
    apply_moments(t, &idx, &m)
}

/// Z-score scaling with global moments from one allreduce. Nulls stay null;
/// a zero standard deviation maps every value to 0.
pub fn dist_standard_scale<S: AsRef<str>>(ctx: &DistContext, t: &Table, cols: &[S]) -> Result<Table> {
    let idx = t.schema().indices_of(cols)?;
    let m = local_moments(t, &idx)?;
    let global = ctx.comm.allreduce(&m, ReduceOp::Sum)?;
    apply_moments(t, &idx, &global)
}

/// Number of rows of the gathered table repeating an earlier row.
pub fn count_global_duplicates(ctx: &DistContext, t: &Table) -> Result<usize> {
    let gathered = ctx.comm.allgather_tables(t)?;
    let all = concat(t.schema(), &gathered)?;
    let enc = KeyEncoder::new(&all, &all_columns(&all));
    let mut seen = HashSet::new();
    Ok((0..all.nrows()).filter(|&r| !seen.insert(enc.key(r).into_vec())).count())
}
