//! Seeded equivalence checks of every distributed operator against its local
//! counterpart applied to the gathered input.

use std::cmp::Ordering;
use std::fmt;

use crate::columnar::{canonical_diff, canonical_diff_floor, cmp_rows, concat, Column, Scalar, Table};
use crate::comm::run_local;
use crate::distops::{
    dist_groupby_aggregate, dist_isin, dist_join, dist_set_op, dist_sort, dist_standard_scale,
    dist_unique, standard_scale, DistContext,
};
use crate::error::Result;
use crate::localops::{self, AggKind, CmpOp, JoinKind, Predicate, SetOpKind};
use crate::rng::Rng;

pub mod reference;

pub const MAX_ROWS: usize = 1000;
pub const UNIQUENESS: f64 = 0.10;
pub const FLOAT_REL_TOL: f64 = 1e-12;

/// `rows` rows with columns `k` (Int64 key), `s` (Utf8 key), `v` (Float64 in
/// `[0.5, 2)`), `i` (Int64 in `[-3, 3]`) and `b` (Bool). Keys take about
/// `uniqueness · rows` distinct values. With `nulls`, roughly 2% of keys and
/// 10% of `v` and `i` are null.
pub fn random_table(rng: &mut Rng, rows: usize, uniqueness: f64, nulls: bool) -> Table {
    let nk = ((rows as f64 * uniqueness).round() as usize).max(1);
    let mut null = |p: f64| nulls && rng.bernoulli(p);
    let mut draws = Vec::with_capacity(rows);
    for _ in 0..rows {
        draws.push((null(0.02), null(0.1), null(0.1)));
    }
    let k = Column::from_opt_i64(draws.iter().map(|d| (!d.0).then(|| rng.index(nk) as i64)));
    let s = Column::utf8((0..rows).map(|_| format!("s{}", rng.index(nk))));
    let v = Column::from_opt_f64(draws.iter().map(|d| (!d.1).then(|| rng.uniform(0.5, 2.0))));
    let i = Column::from_opt_i64(draws.iter().map(|d| (!d.2).then(|| rng.below(7) as i64 - 3)));
    let b = Column::boolean((0..rows).map(|_| rng.bernoulli(0.5)).collect());
    Table::from_columns(vec![("k", k), ("s", s), ("v", v), ("i", i), ("b", b)]).expect("valid columns")
}

/// Rank `rank`'s contiguous block of `t`.
pub fn partition(t: &Table, rank: usize, world: usize) -> Table {
    let (lo, hi) = (rank * t.nrows() / world, (rank + 1) * t.nrows() / world);
    t.slice(lo, hi - lo).expect("block within table")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleOp {
    Join(JoinKind),
    Sort,
    GroupBy(AggKind),
    Unique,
    SetOp(SetOpKind),
    Isin,
    Scale,
}

impl OracleOp {
    pub fn all() -> Vec<OracleOp> {
        let mut ops: Vec<OracleOp> = [JoinKind::Inner, JoinKind::Left, JoinKind::Right, JoinKind::FullOuter]
            .into_iter()
            .map(OracleOp::Join)
            .collect();
        ops.push(OracleOp::Sort);
        ops.extend(AggKind::ALL.into_iter().map(OracleOp::GroupBy));
        ops.push(OracleOp::Unique);
        ops.extend([SetOpKind::Union, SetOpKind::Intersect, SetOpKind::Difference].map(OracleOp::SetOp));
        ops.push(OracleOp::Isin);
        ops.push(OracleOp::Scale);
        ops
    }
}

impl fmt::Display for OracleOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OracleOp::Join(k) => write!(f, "dist_join[{}]", format!("{k:?}").to_lowercase()),
            OracleOp::Sort => f.write_str("dist_sort"),
            OracleOp::GroupBy(a) => write!(f, "dist_groupby[{}]", a.name()),
            OracleOp::Unique => f.write_str("dist_unique"),
            OracleOp::SetOp(k) => write!(f, "dist_set_op[{}]", format!("{k:?}").to_lowercase()),
            OracleOp::Isin => f.write_str("dist_isin"),
            OracleOp::Scale => f.write_str("dist_standard_scale"),
        }
    }
}

/// Inputs of one instance, as global tables.
struct Instance {
    a: Table,
    b: Table,
    keys: Vec<&'static str>,
    ascending: Vec<bool>,
}

fn instance(op: OracleOp, seed: u64) -> Instance {
    let mut rng = Rng::new(seed);
    let rows = |rng: &mut Rng| rng.index(MAX_ROWS + 1);
    let (na, nb) = (rows(&mut rng), rows(&mut rng));
    let a = random_table(&mut rng, na, UNIQUENESS, true);
    let b = random_table(&mut rng, nb, UNIQUENESS, true);
    let keys = match (op, rng.index(3)) {
        (OracleOp::Sort, 0) => vec!["s", "v"],
        (OracleOp::Sort, 1) => vec!["b", "k", "i"],
        (_, 0) => vec!["k", "s"],
        _ => vec!["k"],
    };
    let ascending = keys.iter().map(|_| rng.bernoulli(0.5)).collect();
    let (a, b) = match op {
        OracleOp::SetOp(_) => {
            let p = |t: &Table| localops::project(t, &["k", "b"], None, None).expect("columns exist");
            (p(&a), p(&b))
        }
        OracleOp::Unique => {
            let t = localops::project(&a, &["k", "s", "b"], None, None).expect("columns exist");
            (t, b)
        }
        _ => (a, b),
    };
    Instance { a, b, keys, ascending }
}

fn distributed(ctx: &DistContext, op: OracleOp, inst: &Instance) -> Result<Table> {
    let (rank, p) = (ctx.rank(), ctx.world_size());
    let (a, b) = (partition(&inst.a, rank, p), partition(&inst.b, rank, p));
    let keys = &inst.keys;
    match op {
        OracleOp::Join(kind) => dist_join(ctx, &a, &b, keys, keys, kind),
        OracleOp::Sort => dist_sort(ctx, &a, keys, &inst.ascending),
        OracleOp::GroupBy(agg) => dist_groupby_aggregate(ctx, &a, keys, &[("v", agg), ("i", agg)]),
        OracleOp::Unique => dist_unique(ctx, &a, Some(keys)),
        OracleOp::SetOp(kind) => dist_set_op(ctx, &a, &b, kind),
        OracleOp::Isin => dist_isin(ctx, &a, "k", &b, "k"),
        OracleOp::Scale => dist_standard_scale(ctx, &a, &["v", "i"]),
    }
}

fn local(op: OracleOp, inst: &Instance) -> Result<Table> {
    let (a, b, keys) = (&inst.a, &inst.b, &inst.keys);
    match op {
        OracleOp::Join(kind) => localops::local_join(a, b, keys, keys, kind),
        OracleOp::Sort => localops::orderby(a, keys, &inst.ascending),
        OracleOp::GroupBy(agg) => localops::groupby_aggregate(a, keys, &[("v", agg), ("i", agg)]),
        OracleOp::Unique => localops::unique(a, Some(keys)),
        OracleOp::SetOp(kind) => localops::set_op(a, b, kind),
        OracleOp::Isin => localops::isin(a, "k", b, "k"),
        OracleOp::Scale => standard_scale(a, &["v", "i"]),
    }
}

fn check_sorted(t: &Table, keys: &[&str], ascending: &[bool]) -> Option<String> {
    let idx = t.schema().indices_of(keys).ok()?;
    (1..t.nrows())
        .find(|&r| cmp_rows(t, &idx, r - 1, t, &idx, r, ascending) == Ordering::Greater)
        .map(|r| format!("rows {} and {r} out of order", r - 1))
}

/// Runs one seeded instance on `world` in-process ranks. `Err` describes the
/// first mismatch.
pub fn check_instance(op: OracleOp, seed: u64, world: usize) -> std::result::Result<(), String> {
    let inst = instance(op, seed);
    let gathered = run_local(world, |comm| {
        let ctx = DistContext::new(comm);
        let out = distributed(&ctx, op, &inst)?;
        ctx.comm().gather_table(0, &out)
    });
    let got = gathered.into_iter().next().expect("rank 0");
    let want = local(op, &inst);
    let (got, want) = match (got, want) {
        (Ok(g), Ok(w)) => (g.expect("root receives the gather"), w),
        (Err(g), Err(w)) if std::mem::discriminant(&g) == std::mem::discriminant(&w) => return Ok(()),
        (g, w) => return Err(format!("distributed {:?} vs local {:?}", g.err(), w.err())),
    };
    let diff = match op {
        OracleOp::Scale => canonical_diff_floor(&got, &want, FLOAT_REL_TOL, 1.0),
        _ => canonical_diff(&got, &want, FLOAT_REL_TOL),
    };
    if let Some(d) = diff {
        return Err(d);
    }
    if op == OracleOp::Sort {
        if let Some(d) = check_sorted(&got, &inst.keys, &inst.ascending) {
            return Err(d);
        }
    }
    Ok(())
}

/// Outcome of all instances of one operator at one world size.
#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub op: String,
    pub world: usize,
    pub passed: usize,
    pub failed: usize,
    pub first_failure: Option<(u64, String)>,
}

impl OpReport {
    pub fn ok(&self) -> bool {
        self.failed == 0
    }
}

/// Every operator, `instances` seeds each, at every world size in `worlds`.
pub fn run_suite(worlds: &[usize], instances: usize, base_seed: u64) -> Vec<OpReport> {
    let mut reports = Vec::new();
    for op in OracleOp::all() {
        for &world in worlds {
            let mut r = OpReport { op: op.to_string(), world, passed: 0, failed: 0, first_failure: None };
            for i in 0..instances as u64 {
                let seed = base_seed.wrapping_add(i);
                match check_instance(op, seed, world) {
                    Ok(()) => r.passed += 1,
                    Err(e) => {
                        r.failed += 1;
                        r.first_failure.get_or_insert((seed, e));
                    }
                }
            }
            reports.push(r);
        }
    }
    reports
}

/// Local operators checked against [`reference`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalOp {
    Join(JoinKind),
    Select,
    GroupBy(AggKind),
    SetOp(SetOpKind),
    Sort,
    Unique,
    Isin,
}

impl LocalOp {
    pub fn all() -> Vec<LocalOp> {
        let mut ops: Vec<LocalOp> = [JoinKind::Inner, JoinKind::Left, JoinKind::Right, JoinKind::FullOuter]
            .into_iter()
            .map(LocalOp::Join)
            .collect();
        ops.push(LocalOp::Select);
        ops.extend(AggKind::ALL.into_iter().map(LocalOp::GroupBy));
        ops.extend([SetOpKind::Union, SetOpKind::Intersect, SetOpKind::Difference].map(LocalOp::SetOp));
        ops.extend([LocalOp::Sort, LocalOp::Unique, LocalOp::Isin]);
        ops
    }
}

impl fmt::Display for LocalOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LocalOp::Join(k) => write!(f, "local_join[{}]", format!("{k:?}").to_lowercase()),
            LocalOp::Select => f.write_str("select"),
            LocalOp::GroupBy(a) => write!(f, "groupby_aggregate[{}]", a.name()),
            LocalOp::SetOp(k) => write!(f, "set_op[{}]", format!("{k:?}").to_lowercase()),
            LocalOp::Sort => f.write_str("orderby"),
            LocalOp::Unique => f.write_str("unique"),
            LocalOp::Isin => f.write_str("isin"),
        }
    }
}

fn local_instance(op: LocalOp, seed: u64) -> Instance {
    let as_oracle = match op {
        LocalOp::Join(k) => OracleOp::Join(k),
        LocalOp::GroupBy(a) => OracleOp::GroupBy(a),
        LocalOp::SetOp(k) => OracleOp::SetOp(k),
        LocalOp::Sort => OracleOp::Sort,
        LocalOp::Unique => OracleOp::Unique,
        LocalOp::Select | LocalOp::Isin => OracleOp::Isin,
    };
    instance(as_oracle, seed ^ 0x5eed_0000)
}

/// Runs one seeded instance of `op` and its reference. `Err` describes the
/// first difference, row order included.
pub fn check_local_instance(op: LocalOp, seed: u64) -> std::result::Result<(), String> {
    let inst = local_instance(op, seed);
    let (a, b, keys) = (&inst.a, &inst.b, &inst.keys);
    let aggs = |agg| [("v", agg), ("i", agg)];
    let run = || -> Result<(Table, Table)> {
        Ok(match op {
            LocalOp::Join(kind) => (
                localops::local_join(a, b, keys, keys, kind)?,
                reference::nested_loop_join(a, b, keys, keys, kind)?,
            ),
            LocalOp::Select => {
                let th = 0.5 + 1.5 * (seed % 7) as f64 / 7.0;
                let kth = (seed % 50) as i64;
                let pred = Predicate::cmp("v", CmpOp::Gt, th)
                    .and(Predicate::NotNull("i".into()))
                    .or(Predicate::cmp("k", CmpOp::Lt, kth).and(Predicate::cmp("b", CmpOp::Eq, true)));
                let keep = |r: &reference::Row| {
                    let v = matches!(r[2], Scalar::Float64(x) if x > th) && !matches!(r[3], Scalar::Null);
                    let k = matches!(r[0], Scalar::Int64(x) if x < kth) && r[4] == Scalar::Bool(true);
                    v || k
                };
                (localops::select(a, &pred)?, reference::scan_select(a, keep)?)
            }
            LocalOp::GroupBy(agg) => (
                localops::groupby_aggregate(a, keys, &aggs(agg))?,
                reference::accumulate_groupby(a, keys, &aggs(agg))?,
            ),
            LocalOp::SetOp(kind) => (localops::set_op(a, b, kind)?, reference::hashset_set_op(a, b, kind)?),
            LocalOp::Sort => (
                localops::orderby(a, keys, &inst.ascending)?,
                reference::reference_sort(a, keys, &inst.ascending)?,
            ),
            LocalOp::Unique => (localops::unique(a, Some(keys))?, reference::hashset_unique(a, keys)?),
            LocalOp::Isin => (localops::isin(a, "k", b, "k")?, reference::hashset_isin(a, "k", b, "k")?),
        })
    };
    let (got, want) = run().map_err(|e| e.to_string())?;
    match reference::ordered_diff(&got, &want) {
        Some(d) => Err(d),
        None => Ok(()),
    }
}

/// Every local operator against its reference, `instances` seeds each.
pub fn run_local_suite(instances: usize, base_seed: u64) -> Vec<OpReport> {
    LocalOp::all()
        .into_iter()
        .map(|op| {
            let mut r = OpReport { op: op.to_string(), world: 1, passed: 0, failed: 0, first_failure: None };
            for i in 0..instances as u64 {
                let seed = base_seed.wrapping_add(i);
                match check_local_instance(op, seed) {
                    Ok(()) => r.passed += 1,
                    Err(e) => {
                        r.failed += 1;
                        r.first_failure.get_or_insert((seed, e));
                    }
                }
            }
            r
        })
        .collect()
}

/// Concatenation of per-rank tables sharing `t`'s schema.
pub fn gather_all(ctx: &DistContext, t: &Table) -> Result<Table> {
    concat(t.schema(), &ctx.comm().allgather_tables(t)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_respects_uniqueness() {
        let t = random_table(&mut Rng::new(1), 1000, UNIQUENESS, false);
        let keys = localops::unique(&t, Some(&["k"])).unwrap();
        assert!(keys.nrows() <= 100 && keys.nrows() > 80);
        assert_eq!(t.column(2).null_count(), 0);
    }

    #[test]
    fn partitions_cover_table() {
        let t = random_table(&mut Rng::new(2), 10, 0.5, true);
        let parts: Vec<Table> = (0..3).map(|r| partition(&t, r, 3)).collect();
        assert_eq!(concat(t.schema(), &parts).unwrap(), t);
    }

    #[test]
    fn every_local_op_matches_reference() {
        for op in LocalOp::all() {
            for seed in 0..3 {
                check_local_instance(op, seed).unwrap_or_else(|e| panic!("{op} seed={seed}: {e}"));
            }
        }
    }

    #[test]
    fn every_op_passes_a_few_seeds() {
        for op in OracleOp::all() {
            for p in [1, 3] {
                for seed in 0..3 {
                    check_instance(op, seed, p).unwrap_or_else(|e| panic!("{op} p={p} seed={seed}: {e}"));
                }
            }
        }
    }
}
