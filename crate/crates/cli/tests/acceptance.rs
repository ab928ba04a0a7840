//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails or exceeds its time budget.

use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::sync::mpsc;
use std::time::{Duration, Instant};

use bsptab::columnar::{
    canonical_compare, canonical_diff_floor, canonical_f64, serialize_table, Equality, Scalar,
};
use bsptab::comm::{run_local, run_tcp_loopback, Communicator, ReduceOp};
use bsptab::distops::standard_scale;
use bsptab::io::{read_csv, write_csv, CsvOptions};
use bsptab::localops::{self, JoinKind, SetOpKind, Transform};
use bsptab::pipeline::{feature_columns, generate_synthetic, PipelineConfig};
use bsptab::rng::Rng;
use bsptab::tensor::{
    ddp_allreduce_grads, mse_loss, train_with, Batch, DenseMatrix, Mode, NetConfig, ResponseNetwork,
    TrainConfig,
};
use bsptab::verify::{random_table, run_local_suite, run_suite, OpReport};
use bsptab::{Column, DataType, Schema, Table};

type Check = fn() -> Result<String, String>;

const SEED: u64 = 20_240_601;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_bsptab")
}

fn suite_summary(reports: &[OpReport]) -> Result<String, String> {
    let total: usize = reports.iter().map(|r| r.passed + r.failed).sum();
    match reports.iter().find(|r| !r.ok()) {
        Some(r) => {
            let (seed, why) = r.first_failure.clone().unwrap_or_default();
            Err(format!("{} p={} failed {}/{} (seed {seed}: {why})", r.op, r.world, r.failed, r.passed + r.failed))
        }
        None => Ok(format!("{} operator/world combinations, {total} instances", reports.len())),
    }
}

fn oracle_equivalence() -> Result<String, String> {
    suite_summary(&run_suite(&[1, 2, 3, 4], 100, SEED))
}

fn local_oracles() -> Result<String, String> {
    suite_summary(&run_local_suite(100, SEED))
}

fn collectives_transcript(c: &Communicator, seed: u64) -> Vec<Vec<u8>> {
    let (rank, p) = (c.rank(), c.world_size());
    let mut rng = Rng::new(seed + rank as u64);
    let mut out = Vec::new();
    let payload: Vec<u8> = (0..rng.index(64)).map(|_| rng.below(256) as u8).collect();
    out.push(c.broadcast_bytes(1 % p, &payload).unwrap());
    out.push(c.gather_bytes(0, &payload).unwrap().unwrap_or_default().concat());
    out.push(c.allgather_bytes(&payload).unwrap().concat());
    let xs: Vec<f64> = (0..64).map(|_| rng.normal() * 10f64.powi(rng.below(20) as i32 - 10)).collect();
    for op in [ReduceOp::Sum, ReduceOp::Min, ReduceOp::Max] {
        let r = c.allreduce(&xs, op).unwrap();
        out.push(r.iter().flat_map(|x| x.to_le_bytes()).collect());
    }
    let ints: Vec<i64> = (0..8).map(|_| rng.below(1000) as i64 - 500).collect();
    out.push(c.allreduce(&ints, ReduceOp::Sum).unwrap().iter().flat_map(|x| x.to_le_bytes()).collect());
    let t = random_table(&mut rng, 50 + rank * 7, 0.3, true);
    let dest: Vec<usize> = (0..t.nrows()).map(|_| rng.index(p)).collect();
    out.push(serialize_table(&c.shuffle_table(&t, &dest).unwrap()));
    out.push(serialize_table(&c.broadcast_table(0, (rank == 0).then_some(&t)).unwrap()));
    out.push(c.gather_table(0, &t).unwrap().map(|g| serialize_table(&g)).unwrap_or_default());
    for g in c.allgather_tables(&t).unwrap() {
        out.push(serialize_table(&g));
    }
    out
}

fn shuffle_conserves(seed: u64, p: usize) -> Result<(), String> {
    let results = run_local(p, |c| {
        let mut rng = Rng::new(seed + c.rank() as u64);
        let n = rng.index(300);
        let t = random_table(&mut rng, n, 0.1, true);
        let dest: Vec<usize> = (0..t.nrows()).map(|_| rng.index(p)).collect();
        let tagged = localops::with_column(&t, "dest", Column::int64(dest.iter().map(|&d| d as i64).collect())).unwrap();
        let out = c.shuffle_table(&tagged, &dest).unwrap();
        (tagged, out)
    });
    let schema = results[0].0.schema().clone();
    let inputs: Vec<&Table> = results.iter().map(|r| &r.0).collect();
    let outputs: Vec<&Table> = results.iter().map(|r| &r.1).collect();
    for (r, t) in outputs.iter().enumerate() {
        let dc = t.schema().index_of("dest").unwrap();
        if (0..t.nrows()).any(|i| t.column(dc).i64_at(i) != r as i64) {
            return Err(format!("rank {r} received a row addressed elsewhere"));
        }
    }
    let (a, b) = (bsptab::columnar::concat(&schema, inputs).unwrap(), bsptab::columnar::concat(&schema, outputs).unwrap());
    match canonical_compare(&a, &b) {
        Equality::Equal => Ok(()),
        Equality::NotEqual => Err("shuffle changed the multiset of rows".into()),
    }
}

fn with_timeout<R: Send + 'static>(limit: Duration, f: impl FnOnce() -> R + Send + 'static) -> Result<R, String> {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let _ = tx.send(f());
    });
    rx.recv_timeout(limit).map_err(|_| format!("no completion within {limit:?}"))
}

fn barrier_stress(c: &Communicator) -> bool {
    let (rank, p) = (c.rank(), c.world_size());
    (0..100u32).all(|i| {
        let msg = [rank as u8, i as u8];
        c.send((rank + 1) % p, i, &msg).unwrap();
        c.barrier().unwrap();
        let from = (rank + p - 1) % p;
        c.recv(from, i).unwrap() == [from as u8, i as u8]
    })
}

fn communicator() -> Result<String, String> {
    for p in [2, 3, 4] {
        let seed = SEED + p as u64;
        let local = run_local(p, |c| collectives_transcript(&c, seed));
        let tcp = run_tcp_loopback(p, |c| collectives_transcript(&c, seed)).map_err(|e| e.to_string())?;
        if local != tcp {
            return Err(format!("p={p}: tcp transcript differs from in-process"));
        }
        if run_local(p, |c| collectives_transcript(&c, seed)) != local {
            return Err(format!("p={p}: collective results differ between runs"));
        }
    }
    for i in 0..20 {
        shuffle_conserves(SEED + i, 1 + (i as usize % 4))?;
    }
    let sums = |_: ()| {
        run_local(4, |c| {
            let mut rng = Rng::new(SEED ^ c.rank() as u64);
            let xs: Vec<f64> = (0..1000).map(|_| rng.normal() * 10f64.powi(rng.below(30) as i32 - 15)).collect();
            c.allreduce(&xs, ReduceOp::Sum).unwrap().iter().map(|x| x.to_bits()).collect::<Vec<u64>>()
        })
    };
    let first = sums(());
    if (0..5).any(|_| sums(()) != first) || first.iter().any(|r| *r != first[0]) {
        return Err("allreduce SUM is not bitwise reproducible".into());
    }
    let local_ok = with_timeout(Duration::from_secs(60), || run_local(4, |c| barrier_stress(&c)))?;
    let tcp_ok = with_timeout(Duration::from_secs(60), || run_tcp_loopback(4, |c| barrier_stress(&c)))?
        .map_err(|e| e.to_string())?;
    if local_ok.iter().chain(&tcp_ok).any(|ok| !ok) {
        return Err("barrier stress delivered a wrong message".into());
    }
    Ok("transport equivalence p=2..4, shuffle conservation x20, allreduce reproducible, 100-barrier stress on both transports".into())
}

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> DenseMatrix<f64> {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.normal())
}

fn net_config(in_dim: usize, hidden: usize, seed: u64) -> NetConfig {
    NetConfig { in_dim, hidden_dim: hidden, n_blocks: 2, n_tail: 1, dropout_p: 0.0, seed }
}

fn gradient_check() -> Result<String, String> {
    const H: f64 = 1e-6;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..3 {
        let mut rng = Rng::new(SEED + seed);
        let (x, y) = (random_matrix(&mut rng, 6, 5), random_matrix(&mut rng, 6, 1));
        let mut net = ResponseNetwork::<f64>::new(net_config(5, 16, seed)).map_err(|e| e.to_string())?;
        let (_, cache) = net.forward(&x, Mode::Eval).unwrap();
        let analytic = net.backward(&cache, &y).unwrap();
        let base = net.params();
        let mut loss_at = |p: &[f64]| {
            net.set_params(p).unwrap();
            mse_loss(&net.predict(&x).unwrap(), &y).unwrap()
        };
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] = base[i] + H;
            let up = loss_at(&p);
            p[i] = base[i] - H;
            let down = loss_at(&p);
            let numeric = (up - down) / (2.0 * H);
            let (a, n) = (analytic[i], numeric);
            let abs = (a - n).abs();
            let rel = abs / a.abs().max(n.abs());
            if abs > 1e-8 && rel > 1e-5 {
                return Err(format!("seed {seed} parameter {i}: analytic {a:e} vs numeric {n:e}"));
            }
            if abs > 1e-8 {
                worst = worst.max(rel);
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} parameters over 3 seeds, worst relative error {worst:.2e}"))
}

fn ddp_equivalence() -> Result<String, String> {
    let mut rng = Rng::new(SEED);
    let (x, y) = (random_matrix(&mut rng, 64, 5), random_matrix(&mut rng, 64, 1));
    let cfg = net_config(5, 16, 7);
    let tc = TrainConfig { lr: 0.01, epochs: 5, batch: Batch::Full, base_seed: 0 };
    let shard = |r: usize| (x.slice_rows(r * 16, 16), y.slice_rows(r * 16, 16));

    let net = ResponseNetwork::<f64>::new(cfg.clone()).unwrap();
    let (_, cache) = net.forward(&x, Mode::Eval).unwrap();
    let full = net.backward(&cache, &y).unwrap();
    let averaged = run_local(4, |c| {
        let (xs, ys) = shard(c.rank());
        let (_, cache) = net.forward(&xs, Mode::Eval).unwrap();
        ddp_allreduce_grads(&c, &net.backward(&cache, &ys).unwrap(), 16).unwrap()
    });
    let grad_err = averaged[0].iter().zip(&full).map(|(a, b)| (a - b).abs() / b.abs().max(1.0)).fold(0.0, f64::max);
    if grad_err > 1e-9 {
        return Err(format!("(a) averaged gradient differs from full batch by {grad_err:e}"));
    }

    let trajectory = |p: usize| {
        run_local(p, |c| {
            let (xs, ys) = if p == 1 { (x.clone(), y.clone()) } else { shard(c.rank()) };
            let mut net = ResponseNetwork::<f64>::new(cfg.clone()).unwrap();
            let mut steps = Vec::new();
            train_with(&c, &mut net, &xs, &ys, &tc, |_, _, n| steps.push(n.params())).unwrap();
            steps
        })
    };
    let four = trajectory(4);
    let bits = |v: &Vec<Vec<f64>>| v.iter().map(|s| s.iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
    if four.iter().any(|r| bits(r) != bits(&four[0])) {
        return Err("(b) parameters differ across ranks".into());
    }
    let one = trajectory(1);
    let drift = one[0]
        .iter()
        .zip(&four[0])
        .flat_map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max);
    if drift > 1e-8 {
        return Err(format!("(c) p=4 trajectory drifts {drift:e} from p=1"));
    }
    Ok(format!("gradient error {grad_err:.1e}, ranks bitwise equal for 5 steps, trajectory drift {drift:.1e}"))
}

/// The assembled dataset computed with local operators on the whole input.
fn local_assembly(cfg: &PipelineConfig) -> bsptab::Result<Table> {
    let raw = generate_synthetic(cfg, 0, 1)?;
    let names = |p: &str, n: usize| (0..n).map(|j| format!("{p}{j}")).collect::<Vec<_>>();
    let (fa, fb, rn) = (names("fa_", cfg.n_feat_a), names("fb_", cfg.n_feat_b), names("r_", cfg.n_rna_feat));
    let resp = localops::project(&raw.response, &["resp_id", "drug_id", "concentration", "growth"], None, None)?;
    let resp = localops::transform_column(&resp, "drug_id", Transform::StripSymbols)?;
    let resp = localops::drop_nulls::<&str>(&resp, None)?;
    let resp = standard_scale(&resp, &["concentration"])?;
    let drug = localops::local_join(&raw.drug_feat_a, &raw.drug_feat_b, &["drug_id"], &["drug_id"], JoinKind::Inner)?;
    let keep: Vec<String> = std::iter::once("drug_id".to_string()).chain(fa.clone()).chain(fb.clone()).collect();
    let mut drug = localops::project(&drug, &keep, None, None)?;
    for c in &fb {
        drug = localops::transform_column(&drug, c, Transform::Cast(DataType::Float64))?;
    }
    let rna = localops::transform_column(&raw.rna, "drug_id", Transform::StripSymbols)?;
    let rna = localops::unique::<&str>(&rna, None)?;
    let rna = standard_scale(&rna, &rn)?;
    let drugs = localops::unique::<&str>(&localops::project(&resp, &["drug_id"], None, None)?, None)?;
    let common = localops::set_op(
        &localops::isin(&drugs, "drug_id", &rna, "drug_id")?,
        &localops::isin(&drugs, "drug_id", &drug, "drug_id")?,
        SetOpKind::Intersect,
    )?;
    let resp = localops::isin(&resp, "drug_id", &common, "drug_id")?;
    let j = localops::local_join(&resp, &drug, &["drug_id"], &["drug_id"], JoinKind::Inner)?;
    let j = localops::project(&j, &[&["resp_id", "drug_id", "concentration", "growth"][..], &keep[1..].iter().map(String::as_str).collect::<Vec<_>>()].concat(), None, None)?;
    let j = localops::local_join(&j, &rna, &["drug_id"], &["drug_id"], JoinKind::Inner)?;
    let mut cols = vec!["resp_id".to_string(), "drug_id".to_string()];
    cols.extend(feature_columns(cfg));
    cols.push("growth".into());
    let j = localops::project(&j, &cols, None, None)?;
    localops::orderby(&j, &["resp_id"], &[true])
}

fn run_cli(args: &[&str]) -> Result<(String, String), String> {
    let out = Command::new(bin()).args(args).output().map_err(|e| e.to_string())?;
    let (stdout, stderr) = (String::from_utf8_lossy(&out.stdout).into_owned(), String::from_utf8_lossy(&out.stderr).into_owned());
    if !out.status.success() {
        return Err(format!("bsptab {} exited with {}: {stderr}", args.join(" "), out.status));
    }
    Ok((stdout, stderr))
}

fn read_table(path: &Path, schema: &Schema) -> Result<Table, String> {
    let f = std::fs::File::open(path).map_err(|e| e.to_string())?;
    read_csv(f, &CsvOptions::with_schema(schema.clone())).map_err(|e| e.to_string())
}

fn pipeline_end_to_end() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let oracle = local_assembly(&PipelineConfig::default()).map_err(|e| e.to_string())?;
    let mut notes = Vec::new();
    for p in [1, 2, 4] {
        let (ds, loss) = (dir.path().join(format!("d{p}.csv")), dir.path().join(format!("l{p}.csv")));
        let (metrics, summary) = run_cli(&[
            "pipeline",
            "--local-threads",
            &p.to_string(),
            "--dataset-out",
            ds.to_str().unwrap(),
            "--loss-out",
            loss.to_str().unwrap(),
        ])?;
        let stages = metrics.lines().skip(1).count();
        if !metrics.starts_with("stage,rank,rows_in,rows_out,seconds") || stages % p != 0 {
            return Err(format!("p={p}: malformed metrics report"));
        }
        if !summary.contains("rna duplicates 0 ") {
            return Err(format!("p={p}: duplicates remain after dist_unique: {summary}"));
        }
        let got = read_table(&ds, oracle.schema())?;
        if let Some(d) = canonical_diff_floor(&got, &oracle, 1e-12, 1.0) {
            return Err(format!("p={p}: assembled dataset differs from the local composition: {d}"));
        }
        let losses: Vec<f64> = std::fs::read_to_string(&loss)
            .map_err(|e| e.to_string())?
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        let ratio = losses[29] / losses[0];
        if losses.len() != 30 || ratio >= 0.5 {
            return Err(format!("p={p}: epoch-30/epoch-1 loss ratio {ratio:.3}"));
        }
        notes.push(format!("p={p} ratio {ratio:.3}"));
    }
    Ok(format!("{} rows equal across p=1,2,4 and the local composition; {}", oracle.nrows(), notes.join(", ")))
}

fn random_csv_table(rng: &mut Rng) -> Table {
    const ALPHABET: &[char] = &['a', 'b', 'Z', '0', '7', ',', '"', '\n', '\r', ' ', '\'', ';', 'é', '\t'];
    let (ncols, nrows) = (1 + rng.index(6), rng.index(60));
    let cols = (0..ncols)
        .map(|j| {
            let null = |rng: &mut Rng| rng.bernoulli(0.1);
            let col = match rng.index(4) {
                0 => Column::from_opt_i64((0..nrows).map(|_| (!null(rng)).then(|| rng.next_u64() as i64))),
                1 => Column::from_opt_f64((0..nrows).map(|_| {
                    (!null(rng)).then(|| match rng.index(8) {
                        0 => f64::NAN,
                        1 => -0.0,
                        2 => rng.normal() * 1e300,
                        3 => f64::MIN_POSITIVE * rng.next_f64(),
                        _ => rng.normal() * 10f64.powi(rng.below(40) as i32 - 20),
                    })
                })),
                2 => Column::from_opt_bool((0..nrows).map(|_| (!null(rng)).then(|| rng.bernoulli(0.5)))),
                _ => Column::from_opt_str((0..nrows).map(|_| {
                    (!null(rng)).then(|| (0..1 + rng.index(8)).map(|_| ALPHABET[rng.index(ALPHABET.len())]).collect::<String>())
                })),
            };
            (format!("c{j}"), col)
        })
        .collect();
    Table::from_columns(cols).unwrap()
}

fn csv_round_trip() -> Result<String, String> {
    let mut rng = Rng::new(SEED);
    for i in 0..100 {
        let t = random_csv_table(&mut rng);
        let mut buf = Vec::new();
        write_csv(&t, &mut buf, &CsvOptions::default()).map_err(|e| e.to_string())?;
        let back = read_csv(&buf[..], &CsvOptions::with_schema(t.schema().clone())).map_err(|e| e.to_string())?;
        let same_order = back.nrows() == t.nrows()
            && (0..t.nrows()).all(|r| {
                t.row(r).iter().zip(back.row(r)).all(|(a, b)| match (a.to_scalar(), b.to_scalar()) {
                    (Scalar::Float64(x), Scalar::Float64(y)) => canonical_f64(x).to_bits() == canonical_f64(y).to_bits(),
                    (x, y) => x == y,
                })
            });
        if canonical_compare(&t, &back) != Equality::Equal || !same_order {
            return Err(format!("table {i} did not survive the round trip"));
        }
    }
    let mut xs: Vec<f64> = Vec::with_capacity(10_000);
    while xs.len() < 10_000 {
        let x = f64::from_bits(rng.next_u64());
        if x.is_finite() {
            xs.push(x);
        }
    }
    let t = Table::from_columns(vec![("x", Column::float64(xs.clone()))]).unwrap();
    let mut buf = Vec::new();
    write_csv(&t, &mut buf, &CsvOptions::default()).map_err(|e| e.to_string())?;
    let back = read_csv(&buf[..], &CsvOptions::default()).map_err(|e| e.to_string())?;
    if (0..xs.len()).any(|r| back.column(0).f64_at(r).to_bits() != xs[r].to_bits()) {
        return Err("a finite double changed bits".into());
    }
    Ok("100 random tables and 10^4 random finite doubles".into())
}

fn benchmark_harness() -> Result<String, String> {
    let mut medians = Vec::new();
    for p in [1, 2, 4] {
        let (csv, _) = run_cli(&["bench-join", "--local-threads", &p.to_string(), "--rows", "1000000", "--uniqueness", "0.10"])?;
        let mut lines = csv.lines();
        if lines.next() != Some("op,world,rows,uniqueness,repeat,seconds") {
            return Err(format!("p={p}: bad header"));
        }
        for l in lines {
            let f: Vec<&str> = l.split(',').collect();
            let ok = f.len() == 6
                && f[0] == "join"
                && f[1] == p.to_string()
                && f[2] == "1000000"
                && f[3].parse::<f64>() == Ok(0.1)
                && (f[4] == "median" || f[4].parse::<usize>().is_ok())
                && f[5].parse::<f64>().is_ok_and(|s| s.is_finite() && s >= 0.0);
            if !ok {
                return Err(format!("p={p}: malformed row `{l}`"));
            }
            if f[4] == "median" {
                medians.push(format!("p={p} {}s", f[5]));
            }
        }
    }
    Ok(format!("median join time {}", medians.join(", ")))
}

fn main() {
    let criteria: [(u8, &str, f64, Check); 8] = [
        (1, "oracle equivalence of distributed operators", 120.0, oracle_equivalence),
        (2, "local operator oracles", 60.0, local_oracles),
        (3, "communicator", 60.0, communicator),
        (4, "gradient check", 30.0, gradient_check),
        (5, "data-parallel equivalence", 60.0, ddp_equivalence),
        (6, "end-to-end pipeline", 180.0, pipeline_end_to_end),
        (7, "csv round trip", 30.0, csv_round_trip),
        (8, "benchmark harness", 600.0, benchmark_harness),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut out = std::io::stdout();
    for (id, name, budget, check) in criteria {
        if !only.is_empty() && !only.iter().any(|o| o == &id.to_string()) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        let (status, detail) = match result {
            Ok(d) if secs <= budget => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; exceeded {budget}s budget")),
            Err(e) => ("FAIL", e),
        };
        failed += usize::from(status == "FAIL");
        let _ = writeln!(out, "{status} criterion {id} ({name}) {secs:.1}s/{budget:.0}s: {detail}");
    }
    let _ = out.flush();
    if failed > 0 {
        std::process::exit(1);
    }
}
