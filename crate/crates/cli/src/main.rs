use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use bsptab::comm::{self, read_hostfile, run_local, Communicator, ReduceOp, WorkerSpec};
use bsptab::distops::{dist_join, dist_sort, DistContext};
use bsptab::io::{write_csv, CsvOptions};
use bsptab::localops::JoinKind;
use bsptab::pipeline::{generate_synthetic, metrics_csv, run_pipeline, PipelineConfig};
use bsptab::rng::Rng;
use bsptab::tensor::Batch;
use bsptab::verify::{run_suite, OpReport};
use bsptab::{Column, Error, Result, Table};
use clap::{Args, CommandFactory, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "bsptab", version, about = "Distributed dataframe operators and data-parallel training")]
struct Cli {
    #[command(flatten)]
    launch: LaunchArgs,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
struct LaunchArgs {
    /// Run N in-process workers, one thread each.
    #[arg(long, global = true, value_name = "N")]
    local_threads: Option<usize>,
    /// Run as rank R of the tcp world described by --hostfile.
    #[arg(long, global = true, value_name = "R")]
    rank: Option<usize>,
    /// Spawn N worker processes over the tcp world in --hostfile and wait.
    #[arg(long, global = true, value_name = "N")]
    launch: Option<usize>,
    /// Lines of `<rank> <host>:<port>` naming every tcp worker.
    #[arg(long, global = true, value_name = "FILE")]
    hostfile: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write the synthetic raw tables as CSV files.
    GenData(GenArgs),
    /// Run the data-engineering and training workflow.
    Pipeline(PipelineArgs),
    /// Time distributed joins of random keyed tables.
    BenchJoin(BenchArgs),
    /// Time distributed sorts of random keyed tables.
    BenchSort(BenchArgs),
    /// Check every distributed operator against its local oracle.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Response rows across all ranks.
    #[arg(long)]
    rows: Option<usize>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Response rows across all ranks.
    #[arg(long)]
    rows: Option<usize>,
    /// Training epochs [default: 30].
    #[arg(long)]
    epochs: Option<usize>,
    /// SGD learning rate [default: 0.001].
    #[arg(long)]
    lr: Option<f64>,
    /// Hidden width of the residual network [default: 64].
    #[arg(long)]
    hidden: Option<usize>,
    /// Residual block count [default: 2].
    #[arg(long)]
    blocks: Option<usize>,
    /// Dropout probability during training [default: 0].
    #[arg(long)]
    dropout: Option<f64>,
    /// Per-rank mini-batch size; 0 trains full-batch.
    #[arg(long)]
    batch: Option<usize>,
    /// Metrics CSV destination; stdout when absent.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Write the gathered assembled dataset as CSV.
    #[arg(long, value_name = "FILE")]
    dataset_out: Option<PathBuf>,
    /// Write the per-epoch loss history as CSV.
    #[arg(long, value_name = "FILE")]
    loss_out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct BenchArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rows per table across all ranks.
    #[arg(long, default_value_t = 100_000)]
    rows: usize,
    /// Fraction of distinct keys.
    #[arg(long, default_value_t = 0.10)]
    uniqueness: f64,
    #[arg(long, default_value_t = 3)]
    repeat: usize,
    /// Timing CSV destination; stdout when absent.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seeded instances per operator and world size.
    #[arg(long, default_value_t = 100)]
    repeat: usize,
}

/// Where the workers run.
#[derive(Debug, Clone)]
enum Launch {
    Threads(usize),
    Tcp { rank: usize, hostfile: PathBuf },
    Spawn { n: usize, hostfile: PathBuf },
}

fn usage_error(msg: &str) -> ! {
    Cli::command().error(clap::error::ErrorKind::ArgumentConflict, msg).exit()
}

fn launch_mode(a: &LaunchArgs) -> Launch {
    match (a.local_threads, a.rank, a.launch, &a.hostfile) {
        (Some(0), ..) | (_, _, Some(0), _) => usage_error("worker count must be at least 1"),
        (n, None, None, None) => Launch::Threads(n.unwrap_or(1)),
        (None, Some(rank), None, Some(h)) => Launch::Tcp { rank, hostfile: h.clone() },
        (None, None, Some(n), Some(h)) => Launch::Spawn { n, hostfile: h.clone() },
        (None, _, _, None) => usage_error("--rank and --launch require --hostfile"),
        _ => usage_error("choose one of --local-threads, --rank with --hostfile, or --launch with --hostfile"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let launch = launch_mode(&cli.launch);
    if let Cmd::Selftest(args) = &cli.cmd {
        return match launch {
            Launch::Threads(n) => selftest(n, args),
            _ => usage_error("selftest runs in --local-threads mode only"),
        };
    }
    let results: Vec<Result<()>> = match launch {
        Launch::Threads(n) => run_local(n, |c| work(c, &cli.cmd)),
        Launch::Tcp { rank, hostfile } => vec![read_hostfile(&hostfile)
            .and_then(|peers| comm::init(&WorkerSpec::tcp(rank, peers)))
            .and_then(|c| work(c, &cli.cmd))],
        Launch::Spawn { n, hostfile } => return spawn(n, &hostfile),
    };
    let mut failed = false;
    for e in results.into_iter().filter_map(|r| r.err()) {
        eprintln!("error: {e}");
        failed = true;
    }
    if failed {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}

/// Re-runs this command as `n` tcp workers and waits for all of them.
fn spawn(n: usize, hostfile: &Path) -> ExitCode {
    match read_hostfile(hostfile) {
        Ok(peers) if peers.len() == n => {}
        Ok(peers) => usage_error(&format!("hostfile lists {} ranks, --launch asked for {n}", peers.len())),
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let mut args: Vec<String> = Vec::new();
    let mut it = std::env::args().skip(1);
    while let Some(a) = it.next() {
        if a == "--launch" {
            it.next();
        } else if !a.starts_with("--launch=") {
            args.push(a);
        }
    }
    let exe = match std::env::current_exe() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let children: Vec<_> = (0..n)
        .map(|r| Command::new(&exe).args(&args).arg("--rank").arg(r.to_string()).spawn())
        .collect();
    let mut code = 0u8;
    for (r, child) in children.into_iter().enumerate() {
        let status = child.and_then(|mut c| c.wait());
        match status {
            Ok(s) if s.success() => {}
            Ok(s) => {
                eprintln!("error: rank {r} exited with {s}");
                code = code.max(s.code().unwrap_or(1).clamp(1, 255) as u8);
            }
            Err(e) => {
                eprintln!("error: rank {r}: {e}");
                code = code.max(1);
            }
        }
    }
    ExitCode::from(code)
}

fn work(comm: Communicator, cmd: &Cmd) -> Result<()> {
    let ctx = DistContext::new(comm);
    let r = match cmd {
        Cmd::GenData(a) => gen_data(&ctx, a),
        Cmd::Pipeline(a) => pipeline(&ctx, a),
        Cmd::BenchJoin(a) => bench(&ctx, "join", a),
        Cmd::BenchSort(a) => bench(&ctx, "sort", a),
        Cmd::Selftest(_) => unreachable!("selftest runs without workers"),
    };
    r.map_err(|e| e.at_rank(ctx.rank()))
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn table_csv(t: &Table) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_csv(t, &mut buf, &CsvOptions::default())?;
    Ok(buf)
}

fn gen_data(ctx: &DistContext, a: &GenArgs) -> Result<()> {
    let mut cfg = PipelineConfig { seed: a.seed, ..PipelineConfig::default() };
    if let Some(rows) = a.rows {
        cfg.n_response_rows = rows;
    }
    let (rank, world) = (ctx.rank(), ctx.world_size());
    let data = generate_synthetic(&cfg, rank, world)?;
    fs::create_dir_all(&a.out)?;
    let tables = [
        ("response", &data.response),
        ("drug_feat_a", &data.drug_feat_a),
        ("drug_feat_b", &data.drug_feat_b),
        ("rna", &data.rna),
    ];
    for (name, t) in tables {
        let file = if world == 1 { format!("{name}.csv") } else { format!("{name}.part{rank}.csv") };
        fs::write(a.out.join(file), table_csv(t)?)?;
    }
    Ok(())
}

fn pipeline(ctx: &DistContext, a: &PipelineArgs) -> Result<()> {
    let mut cfg = PipelineConfig { seed: a.seed, ..PipelineConfig::default() };
    cfg.net.seed = a.seed;
    cfg.train.base_seed = a.seed;
    if let Some(v) = a.rows {
        cfg.n_response_rows = v;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = a.hidden {
        cfg.net.hidden_dim = v;
    }
    if let Some(v) = a.blocks {
        cfg.net.n_blocks = v;
    }
    if let Some(v) = a.dropout {
        cfg.net.dropout_p = v;
    }
    match a.batch {
        Some(0) => cfg.train.batch = Batch::Full,
        Some(b) => cfg.train.batch = Batch::Size(b),
        None => {}
    }
    let out = run_pipeline(ctx, &cfg)?;

    let metrics = ctx.comm().gather_bytes(0, metrics_csv(&out.metrics).as_bytes())?;
    let dataset = ctx.comm().gather_table(0, &out.dataset)?;
    let (Some(metrics), Some(dataset)) = (metrics, dataset) else {
        return Ok(());
    };
    let mut csv = String::new();
    for (r, part) in metrics.iter().enumerate() {
        let text = String::from_utf8_lossy(part);
        csv.extend(text.lines().skip(usize::from(r > 0)).map(|l| format!("{l}\n")));
    }
    emit(a.out.as_deref(), &csv)?;
    if let Some(p) = &a.dataset_out {
        fs::write(p, table_csv(&dataset)?)?;
    }
    if let Some(p) = &a.loss_out {
        let mut s = String::from("epoch,loss\n");
        for (e, l) in out.history.iter().enumerate() {
            let _ = writeln!(s, "{},{}", e + 1, bsptab::io::render_f64(*l));
        }
        fs::write(p, s)?;
    }
    let (first, last) = (out.history.first().copied().unwrap_or(0.0), out.history.last().copied().unwrap_or(0.0));
    eprintln!(
        "rows {} train {} test {} | loss {first:.6} -> {last:.6} | test mse {:.6} | rna duplicates {} | params {:016x}",
        dataset.nrows(),
        out.n_train,
        out.n_test,
        out.test_mse,
        out.rna_duplicates,
        out.param_digest
    );
    Ok(())
}

/// This rank's block of a `rows`-row table with an Int64 key `k` drawn from
/// `uniqueness · rows` values and a Float64 payload `v`.
fn bench_table(rows: usize, uniqueness: f64, seed: u64, rank: usize, world: usize) -> Table {
    let nk = ((rows as f64 * uniqueness).round() as u64).max(1);
    let n = (rank + 1) * rows / world - rank * rows / world;
    let mut rng = Rng::new(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(rank as u64));
    let k = (0..n).map(|_| rng.below(nk) as i64).collect();
    let v = (0..n).map(|_| rng.next_f64()).collect();
    Table::from_columns(vec![("k", Column::int64(k)), ("v", Column::float64(v))]).expect("valid columns")
}

const BENCH_HEADER: &str = "op,world,rows,uniqueness,repeat,seconds";

fn bench(ctx: &DistContext, op: &str, a: &BenchArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.uniqueness) || a.repeat == 0 {
        return Err(Error::InvalidConfig("uniqueness must lie in [0, 1] and repeat be at least 1".into()));
    }
    let (rank, world) = (ctx.rank(), ctx.world_size());
    let l = bench_table(a.rows, a.uniqueness, a.seed, rank, world);
    let r = bench_table(a.rows, a.uniqueness, a.seed ^ 0xa5a5, rank, world);
    let mut times = Vec::with_capacity(a.repeat);
    for _ in 0..a.repeat {
        ctx.comm().barrier()?;
        let start = Instant::now();
        let out = match op {
            "join" => dist_join(ctx, &l, &r, &["k"], &["k"], JoinKind::Inner)?,
            _ => dist_sort(ctx, &l, &["k"], &[true])?,
        };
        let local = start.elapsed().as_secs_f64();
        drop(out);
        times.push(ctx.comm().allreduce(&[local], ReduceOp::Max)?[0]);
    }
    if rank != 0 {
        return Ok(());
    }
    let mut csv = format!("{BENCH_HEADER}\n");
    let row = |csv: &mut String, rep: &str, secs: f64| {
        let _ = writeln!(csv, "{op},{world},{},{},{rep},{secs:.6}", a.rows, a.uniqueness);
    };
    for (i, t) in times.iter().enumerate() {
        row(&mut csv, &(i + 1).to_string(), *t);
    }
    times.sort_by(f64::total_cmp);
    let median = times[times.len() / 2];
    row(&mut csv, "median", median);
    emit(a.out.as_deref(), &csv)
}

fn selftest(n: usize, a: &SelftestArgs) -> ExitCode {
    let mut worlds = vec![1, 2, 4];
    if !worlds.contains(&n) {
        worlds.push(n);
    }
    let start = Instant::now();
    let reports = run_suite(&worlds, a.repeat, a.seed);
    let mut ok = true;
    for r in &reports {
        print_report(r);
        ok &= r.ok();
    }
    println!("{} in {:.2}s", if ok { "PASS" } else { "FAIL" }, start.elapsed().as_secs_f64());
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn print_report(r: &OpReport) {
    let status = if r.ok() { "PASS" } else { "FAIL" };
    print!("{status} {} p={} {}/{}", r.op, r.world, r.passed, r.passed + r.failed);
    match &r.first_failure {
        Some((seed, why)) => println!(" first failure seed {seed}: {why}"),
        None => println!(),
    }
}
