//! Synthetic drug-response workflow: generate raw tables, clean and assemble
//! them with distributed operators, then train the response network.
//!
//! Raw data is a function of `(seed, global row)`, and rank `r` of `p` holds
//! the contiguous block `[r·N/p, (r+1)·N/p)` of every table, so the assembled
//! dataset does not depend on the world size.

use std::fmt::Write as _;
use std::time::Instant;

use crate::columnar::{Column, ColumnBuilder, DataType, Table};
use crate::comm::ReduceOp;
use crate::distops::{
    count_global_duplicates, dist_isin, dist_join, dist_set_op, dist_sort, dist_standard_scale, dist_unique, DistContext,
};
use crate::error::{Error, Result};
use crate::localops::{self, JoinKind, SetOpKind, Transform};
use crate::rng::Rng;
use crate::tensor::{
    ddp_broadcast_params, mse_loss, split, table_to_matrix, train, Batch, DenseMatrix, NetConfig,
    ResponseNetwork, TrainConfig,
};

const LATENT_DIM: usize = 4;
const TAG_LATENT: u64 = 1;
const TAG_PROJ: u64 = 2;
const TAG_RESPONSE: u64 = 3;
const TAG_FEAT: u64 = 4;
const TAG_RNA: u64 = 5;
const TAG_RNA_ID: u64 = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub n_drugs: usize,
    pub n_response_rows: usize,
    /// Distinct RNA profiles before duplicates are injected.
    pub n_rna_rows: usize,
    pub dup_fraction: f64,
    pub symbol_fraction: f64,
    pub null_fraction: f64,
    pub n_feat_a: usize,
    pub n_feat_b: usize,
    pub n_rna_feat: usize,
    pub train_fraction: f64,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let (n_feat_a, n_feat_b, n_rna_feat) = (8, 8, 16);
        let mut net = NetConfig::new(1 + n_feat_a + n_feat_b + n_rna_feat);
        net.dropout_p = 0.0;
        PipelineConfig {
            n_drugs: 1006,
            n_response_rows: 6000,
            n_rna_rows: 1006,
            dup_fraction: 0.1,
            symbol_fraction: 0.3,
            null_fraction: 0.01,
            n_feat_a,
            n_feat_b,
            n_rna_feat,
            train_fraction: 0.8,
            net,
            train: TrainConfig { lr: 0.001, epochs: 30, batch: Batch::Size(32), base_seed: 0 },
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn in_dim(&self) -> usize {
        1 + self.n_feat_a + self.n_feat_b + self.n_rna_feat
    }

    pub fn validate(&self) -> Result<()> {
        let frac = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} {v} outside [0, 1]")))
            }
        };
        frac("dup_fraction", self.dup_fraction)?;
        frac("symbol_fraction", self.symbol_fraction)?;
        frac("null_fraction", self.null_fraction)?;
        frac("train_fraction", self.train_fraction)?;
        if self.n_drugs == 0 {
            return Err(Error::InvalidConfig("n_drugs must be at least 1".into()));
        }
        if self.net.in_dim != self.in_dim() {
            return Err(Error::InvalidConfig(format!(
                "network input {} does not match {} feature columns",
                self.net.in_dim,
                self.in_dim()
            )));
        }
        self.net.validate()?;
        self.train.validate()
    }
}

/// Raw inputs held by one rank.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub response: Table,
    pub drug_feat_a: Table,
    pub drug_feat_b: Table,
    pub rna: Table,
}

fn row_rng(seed: u64, tag: u64, index: u64) -> Rng {
    let mut mix = Rng::new(seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    Rng::new(mix.next_u64().wrapping_add(index))
}

pub fn canonical_drug_id(d: usize) -> String {
    format!("NSC{d}")
}

/// `id` with one punctuation character inserted after the first character.
fn decorate(id: &str, rng: &mut Rng) -> String {
    const SYMBOLS: [char; 4] = ['.', '-', '_', '/'];
    let at = 1 + rng.index(id.len() - 1);
    let mut s = String::with_capacity(id.len() + 1);
    s.push_str(&id[..at]);
    s.push(SYMBOLS[rng.index(SYMBOLS.len())]);
    s.push_str(&id[at..]);
    s
}

fn latent(seed: u64, d: usize) -> [f64; LATENT_DIM] {
    let mut rng = row_rng(seed, TAG_LATENT, d as u64);
    std::array::from_fn(|_| rng.normal())
}

fn projection(seed: u64, which: u64, rows: usize) -> Vec<[f64; LATENT_DIM]> {
    let mut rng = row_rng(seed, TAG_PROJ, which);
    (0..rows).map(|_| std::array::from_fn(|_| rng.normal() / 2.0)).collect()
}

fn project_latent(p: &[[f64; LATENT_DIM]], z: &[f64; LATENT_DIM], rng: &mut Rng) -> Vec<f64> {
    p.iter()
        .map(|w| w.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + 0.05 * rng.normal())
        .collect()
}

/// Noise-free part of the growth target.
pub fn growth_signal(z: &[f64; LATENT_DIM], conc: f64) -> f64 {
    z[0].sin() + 0.5 * z[1] * conc + 0.3 * (z[2] + conc).tanh() + 0.2 * z[3] * z[0]
}

fn block(n: usize, rank: usize, world: usize) -> std::ops::Range<usize> {
    rank * n / world..(rank + 1) * n / world
}

fn has_features(d: usize) -> bool {
    d % 10 != 3
}

fn has_rna(d: usize) -> bool {
    d % 7 != 5
}

fn numbered(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|j| format!("{prefix}{j}")).collect()
}

/// Generates rank `rank`'s share of the raw tables.
pub fn generate_synthetic(cfg: &PipelineConfig, rank: usize, world: usize) -> Result<SyntheticData> {
    cfg.validate()?;
    let seed = cfg.seed;

    let rows = block(cfg.n_response_rows, rank, world);
    let n = rows.len();
    let mut resp_id = Vec::with_capacity(n);
    let mut drug_id = Vec::with_capacity(n);
    let mut conc = ColumnBuilder::new(DataType::Float64, n);
    let mut growth = ColumnBuilder::new(DataType::Float64, n);
    let mut plate = Vec::with_capacity(n);
    let mut qc = Vec::with_capacity(n);
    for i in rows {
        let mut rng = row_rng(seed, TAG_RESPONSE, i as u64);
        let d = rng.index(cfg.n_drugs);
        let id = canonical_drug_id(d);
        drug_id.push(if rng.bernoulli(cfg.symbol_fraction) { decorate(&id, &mut rng) } else { id });
        let c = rng.uniform(-1.0, 1.0);
        let g = growth_signal(&latent(seed, d), c) + 0.05 * rng.normal();
        conc.push_opt_f64((!rng.bernoulli(cfg.null_fraction)).then_some(c));
        growth.push_opt_f64((!rng.bernoulli(cfg.null_fraction)).then_some(g));
        resp_id.push(i as i64);
        plate.push(rng.below(96) as i64);
        qc.push(rng.bernoulli(0.9));
    }
    let response = Table::from_columns(vec![
        ("resp_id", Column::int64(resp_id)),
        ("drug_id", Column::utf8(drug_id)),
        ("source", Column::utf8(vec!["NCI60"; n])),
        ("concentration", conc.finish()),
        ("plate", Column::int64(plate)),
        ("qc_pass", Column::boolean(qc)),
        ("growth", growth.finish()),
    ])?;

    let featured: Vec<usize> = (0..cfg.n_drugs).filter(|&d| has_features(d)).collect();
    let pa = projection(seed, 0, cfg.n_feat_a);
    let pb = projection(seed, 1, cfg.n_feat_b);
    let drug_table = |drugs: &mut dyn Iterator<Item = usize>, proj: &[[f64; LATENT_DIM]], prefix: &str, as_text: bool| {
        let names = numbered(prefix, proj.len());
        let mut ids = Vec::new();
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); proj.len()];
        for d in drugs {
            let mut rng = row_rng(seed, TAG_FEAT, (d as u64) << 1 | as_text as u64);
            ids.push(canonical_drug_id(d));
            for (c, v) in cols.iter_mut().zip(project_latent(proj, &latent(seed, d), &mut rng)) {
                c.push(v);
            }
        }
        let mut out = vec![("drug_id".to_string(), Column::utf8(ids))];
        for (name, c) in names.into_iter().zip(cols) {
            let col = if as_text {
                Column::utf8(c.iter().map(|&v| crate::io::render_f64(v)))
            } else {
                Column::float64(c)
            };
            out.push((name, col));
        }
        Table::from_columns(out)
    };
    let fr = block(featured.len(), rank, world);
    let drug_feat_a = drug_table(&mut featured[fr.clone()].iter().copied(), &pa, "fa_", false)?;
    let drug_feat_b = drug_table(&mut featured.iter().rev().skip(fr.start).take(fr.len()).copied(), &pb, "fb_", true)?;

    let profiled: Vec<usize> = (0..cfg.n_drugs).filter(|&d| has_rna(d)).take(cfg.n_rna_rows).collect();
    let n_dups = if profiled.is_empty() { 0 } else { (cfg.dup_fraction * profiled.len() as f64).round() as usize };
    let total = profiled.len() + n_dups;
    let pr = projection(seed, 2, cfg.n_rna_feat);
    let mut ids = Vec::new();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); cfg.n_rna_feat];
    for g in block(total, rank, world) {
        let base = if g < profiled.len() { g } else { ((g - profiled.len()) * 7919 + 13) % profiled.len() };
        let d = profiled[base];
        let mut rng = row_rng(seed, TAG_RNA, base as u64);
        for (c, v) in cols.iter_mut().zip(project_latent(&pr, &latent(seed, d), &mut rng)) {
            c.push(v);
        }
        let mut id_rng = row_rng(seed, TAG_RNA_ID, g as u64);
        let id = canonical_drug_id(d);
        let decorated = g >= profiled.len() || id_rng.bernoulli(cfg.symbol_fraction);
        ids.push(if decorated { decorate(&id, &mut id_rng) } else { id });
    }
    let mut rna_cols = vec![("drug_id".to_string(), Column::utf8(ids))];
    for (name, c) in numbered("r_", cfg.n_rna_feat).into_iter().zip(cols) {
        rna_cols.push((name, Column::float64(c)));
    }
    let rna = Table::from_columns(rna_cols)?;

    Ok(SyntheticData { response, drug_feat_a, drug_feat_b, rna })
}

/// Row counts and wall-clock of one stage on one rank.
#[derive(Debug, Clone, PartialEq)]
pub struct StageMetric {
    pub stage: String,
    pub rank: usize,
    pub rows_in: usize,
    pub rows_out: usize,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "stage,rank,rows_in,rows_out,seconds";

pub fn metrics_csv(metrics: &[StageMetric]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for m in metrics {
        let _ = writeln!(s, "{},{},{},{},{:.6}", m.stage, m.rank, m.rows_in, m.rows_out, m.seconds);
    }
    s
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// Global mean training loss per epoch.
    pub history: Vec<f64>,
    pub test_mse: f64,
    pub metrics: Vec<StageMetric>,
    /// This rank's part of the assembled dataset, globally ordered by `resp_id`.
    pub dataset: Table,
    pub n_train: usize,
    pub n_test: usize,
    pub param_digest: u64,
    /// Rows repeating an earlier row across all ranks after `rna.unique`.
    pub rna_duplicates: usize,
}

struct Recorder {
    rank: usize,
    metrics: Vec<StageMetric>,
}

impl Recorder {
    fn run(&mut self, stage: &str, rows_in: usize, f: impl FnOnce() -> Result<Table>) -> Result<Table> {
        let start = Instant::now();
        let out = f()?;
        self.metrics.push(StageMetric {
            stage: stage.to_string(),
            rank: self.rank,
            rows_in,
            rows_out: out.nrows(),
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(out)
    }
}

/// Column names of the assembled feature matrix, in order.
pub fn feature_columns(cfg: &PipelineConfig) -> Vec<String> {
    let mut cols = vec!["concentration".to_string()];
    cols.extend(numbered("fa_", cfg.n_feat_a));
    cols.extend(numbered("fb_", cfg.n_feat_b));
    cols.extend(numbered("r_", cfg.n_rna_feat));
    cols
}

/// This rank's part of the training table plus the global count of RNA rows
/// still duplicated after deduplication.
#[derive(Debug, Clone)]
pub struct Assembled {
    pub dataset: Table,
    pub rna_duplicates: usize,
}

/// Cleans and assembles this rank's raw tables into its part of the
/// training table.
pub fn assemble_dataset(ctx: &DistContext, cfg: &PipelineConfig, raw: &SyntheticData, rec: &mut Vec<StageMetric>) -> Result<Assembled> {
    let mut r = Recorder { rank: ctx.rank(), metrics: Vec::new() };
    let fa = numbered("fa_", cfg.n_feat_a);
    let fb = numbered("fb_", cfg.n_feat_b);
    let rn = numbered("r_", cfg.n_rna_feat);

    let resp = &raw.response;
    let resp = r.run("response.project", resp.nrows(), || {
        localops::project(resp, &["resp_id", "drug_id", "concentration", "growth"], None, None)
    })?;
    let resp = r.run("response.strip_symbols", resp.nrows(), || {
        localops::transform_column(&resp, "drug_id", Transform::StripSymbols)
    })?;
    let resp = r.run("response.drop_nulls", resp.nrows(), || localops::drop_nulls::<&str>(&resp, None))?;
    let resp = r.run("response.scale", resp.nrows(), || dist_standard_scale(ctx, &resp, &["concentration"]))?;

    let (a, b) = (&raw.drug_feat_a, &raw.drug_feat_b);
    let drug = r.run("drug.join", a.nrows() + b.nrows(), || {
        let j = dist_join(ctx, a, b, &["drug_id"], &["drug_id"], JoinKind::Inner)?;
        let keep: Vec<String> = std::iter::once("drug_id".to_string()).chain(fa.iter().cloned()).chain(fb.iter().cloned()).collect();
        localops::project(&j, &keep, None, None)
    })?;
    let drug = r.run("drug.cast", drug.nrows(), || {
        fb.iter().try_fold(drug.clone(), |t, c| localops::transform_column(&t, c, Transform::Cast(DataType::Float64)))
    })?;

    let rna = &raw.rna;
    let rna = r.run("rna.strip_symbols", rna.nrows(), || localops::transform_column(rna, "drug_id", Transform::StripSymbols))?;
    let rna = r.run("rna.unique", rna.nrows(), || dist_unique::<&str>(ctx, &rna, None))?;
    let rna_duplicates = count_global_duplicates(ctx, &rna)?;
    let rna = r.run("rna.scale", rna.nrows(), || dist_standard_scale(ctx, &rna, &rn))?;

    let drugs = r.run("assembly.response_drugs", resp.nrows(), || {
        dist_unique::<&str>(ctx, &localops::project(&resp, &["drug_id"], None, None)?, None)
    })?;
    let with_rna = r.run("assembly.isin_rna", drugs.nrows(), || dist_isin(ctx, &drugs, "drug_id", &rna, "drug_id"))?;
    let with_feat = r.run("assembly.isin_drug", drugs.nrows(), || dist_isin(ctx, &drugs, "drug_id", &drug, "drug_id"))?;
    let common = r.run("assembly.common", with_rna.nrows() + with_feat.nrows(), || {
        dist_set_op(ctx, &with_rna, &with_feat, SetOpKind::Intersect)
    })?;
    let resp = r.run("assembly.filter", resp.nrows(), || dist_isin(ctx, &resp, "drug_id", &common, "drug_id"))?;
    let joined = r.run("assembly.join_drug", resp.nrows(), || {
        let j = dist_join(ctx, &resp, &drug, &["drug_id"], &["drug_id"], JoinKind::Inner)?;
        localops::project(&j, &[&["resp_id", "drug_id", "concentration"][..], &to_refs(&fa), &to_refs(&fb), &["growth"]].concat(), None, None)
    })?;
    let joined = r.run("assembly.join_rna", joined.nrows(), || {
        let j = dist_join(ctx, &joined, &rna, &["drug_id"], &["drug_id"], JoinKind::Inner)?;
        let cols: Vec<&str> = [&["resp_id", "drug_id"][..], &["concentration"], &to_refs(&fa), &to_refs(&fb), &to_refs(&rn), &["growth"]].concat();
        localops::project(&j, &cols, None, None)
    })?;
    let dataset = r.run("assembly.sort", joined.nrows(), || dist_sort(ctx, &joined, &["resp_id"], &[true]))?;
    rec.extend(r.metrics);
    Ok(Assembled { dataset, rna_duplicates })
}

fn to_refs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

/// Runs the whole workflow collectively. Errors carry the failing rank.
pub fn run_pipeline(ctx: &DistContext, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    run_inner(ctx, cfg).map_err(|e| e.at_rank(ctx.rank()))
}

fn run_inner(ctx: &DistContext, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let (rank, world) = (ctx.rank(), ctx.world_size());
    let mut metrics = Vec::new();

    let start = Instant::now();
    ctx.comm().barrier()?;
    metrics.push(StageMetric { stage: "init".into(), rank, rows_in: 0, rows_out: 0, seconds: start.elapsed().as_secs_f64() });

    let start = Instant::now();
    let raw = generate_synthetic(cfg, rank, world)?;
    let raw_rows = raw.response.nrows() + raw.drug_feat_a.nrows() + raw.drug_feat_b.nrows() + raw.rna.nrows();
    metrics.push(StageMetric { stage: "generate".into(), rank, rows_in: 0, rows_out: raw_rows, seconds: start.elapsed().as_secs_f64() });

    let Assembled { dataset, rna_duplicates } = assemble_dataset(ctx, cfg, &raw, &mut metrics)?;

    let start = Instant::now();
    let x = table_to_matrix(&dataset, &feature_columns(cfg))?;
    let y = table_to_matrix(&dataset, &["growth"])?;
    let local_n = dataset.nrows() as i64;
    let mut counts = vec![0i64; world];
    counts[rank] = local_n;
    let counts = ctx.comm().allreduce(&counts, ReduceOp::Sum)?;
    let global_n: i64 = counts.iter().sum();
    let n_train = (cfg.train_fraction * global_n as f64).floor() as i64;
    let offset: i64 = counts[..rank].iter().sum();
    let local_train = (n_train - offset).clamp(0, local_n) as usize;
    let parts = split(&x, &y, local_train)?;
    metrics.push(StageMetric {
        stage: "bridge".into(),
        rank,
        rows_in: dataset.nrows(),
        rows_out: dataset.nrows(),
        seconds: start.elapsed().as_secs_f64(),
    });

    let start = Instant::now();
    let mut net_cfg = cfg.net.clone();
    net_cfg.seed = cfg.net.seed.wrapping_add(rank as u64);
    let mut net = ResponseNetwork::<f64>::new(net_cfg)?;
    ddp_broadcast_params(ctx.comm(), &mut net)?;
    let history = train(ctx.comm(), &mut net, &parts.x_train, &parts.y_train, &cfg.train)?;
    let test_mse = global_mse(ctx, &net, &parts.x_test, &parts.y_test)?;
    metrics.push(StageMetric {
        stage: "train".into(),
        rank,
        rows_in: parts.x_train.rows(),
        rows_out: parts.x_test.rows(),
        seconds: start.elapsed().as_secs_f64(),
    });

    Ok(PipelineOutput {
        history,
        test_mse,
        metrics,
        dataset,
        n_train: n_train as usize,
        n_test: (global_n - n_train) as usize,
        param_digest: net.digest(),
        rna_duplicates,
    })
}

fn global_mse(ctx: &DistContext, net: &ResponseNetwork<f64>, x: &DenseMatrix<f64>, y: &DenseMatrix<f64>) -> Result<f64> {
    let local = if x.rows() == 0 { 0.0 } else { mse_loss(&net.predict(x)?, y)? * x.rows() as f64 };
    let s = ctx.comm().allreduce(&[local, x.rows() as f64], ReduceOp::Sum)?;
    Ok(if s[1] == 0.0 { 0.0 } else { s[0] / s[1] })
}
