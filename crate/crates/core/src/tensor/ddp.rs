//! Data-parallel training over a [`Communicator`].

use crate::comm::{Communicator, ReduceOp};
use crate::error::{Error, Result};
use crate::rng::Rng;

use super::matrix::{cast, DenseMatrix, Scalar};
use super::net::{mse_loss, Mode, ResponseNetwork};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Batch {
    Full,
    Size(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: Batch,
    pub base_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 0.01, epochs: 30, batch: Batch::Full, base_seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if self.batch == Batch::Size(0) {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Overwrites every rank's parameters with rank 0's.
pub fn ddp_broadcast_params<T: Scalar>(comm: &Communicator, net: &mut ResponseNetwork<T>) -> Result<()> {
    if comm.world_size() == 1 {
        return Ok(());
    }
    let params = net.params();
    let mut payload = Vec::with_capacity(params.len() * T::WIDTH);
    for p in &params {
        p.put(&mut payload);
    }
    let got = comm.broadcast_bytes(0, &payload)?;
    if got.len() != payload.len() {
        return Err(Error::LengthMismatch(format!(
            "received {} parameter bytes, expected {}",
            got.len(),
            payload.len()
        )));
    }
    let p: Vec<T> = got.chunks_exact(T::WIDTH).map(T::get).collect();
    net.set_params(&p)
}

/// Sample-weighted mean of per-rank vectors plus the global sample count.
fn weighted_mean<T: Scalar>(comm: &Communicator, values: &[T], local_n: usize) -> Result<(Vec<T>, i64)> {
    let w: T = cast(local_n as f64);
    let weighted: Vec<T> = values.iter().map(|&v| v * w).collect();
    let sums = comm.allreduce(&weighted, ReduceOp::Sum)?;
    let total = comm.allreduce(&[local_n as i64], ReduceOp::Sum)?[0];
    if total == 0 {
        return Ok((vec![T::zero(); values.len()], 0));
    }
    let n: T = cast(total as f64);
    Ok((sums.into_iter().map(|s| s / n).collect(), total))
}

/// `(Σ_r n_r·g_r) / Σ_r n_r`, identical on every rank. All zeros when no
/// rank holds a sample.
pub fn ddp_allreduce_grads<T: Scalar>(comm: &Communicator, grads: &[T], local_n: usize) -> Result<Vec<T>> {
    Ok(weighted_mean(comm, grads, local_n)?.0)
}

/// Gradient of one local batch with its loss appended; zeros when empty.
fn local_step<T: Scalar>(
    net: &ResponseNetwork<T>,
    x: &DenseMatrix<T>,
    y: &DenseMatrix<T>,
    rng: &mut Rng,
) -> Result<Vec<T>> {
    if x.rows() == 0 {
        return Ok(vec![T::zero(); net.num_params() + 1]);
    }
    let (yhat, cache) = net.forward(x, Mode::Train(rng))?;
    let mut g = net.backward(&cache, y)?;
    g.push(mse_loss(&yhat, y)?);
    Ok(g)
}

/// [`train_with`] without an observer.
pub fn train<T: Scalar>(
    comm: &Communicator,
    net: &mut ResponseNetwork<T>,
    x: &DenseMatrix<T>,
    y: &DenseMatrix<T>,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    train_with(comm, net, x, y, cfg, |_, _, _| {})
}

/// SGD on the rank-local shard `(x, y)` with gradients averaged across ranks
/// each step. Returns the global mean training loss of every epoch and calls
/// `on_epoch(epoch, loss, net)` after each one.
///
/// Mini-batch epochs shuffle the shard with `Rng(base_seed + epoch)`. Every
/// rank takes as many steps as the rank with the most batches; exhausted
/// ranks contribute empty batches. Dropout draws from `Rng(base_seed + rank)`.
pub fn train_with<T: Scalar, F>(
    comm: &Communicator,
    net: &mut ResponseNetwork<T>,
    x: &DenseMatrix<T>,
    y: &DenseMatrix<T>,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<Vec<f64>>
where
    F: FnMut(usize, f64, &ResponseNetwork<T>),
{
    cfg.validate()?;
    if x.rows() != y.rows() || y.cols() != 1 {
        return Err(Error::ShapeMismatch(format!("features {:?} vs targets {:?}", x.shape(), y.shape())));
    }
    let np = net.num_params();
    let lr: T = cast(cfg.lr);
    let mut dropout_rng = Rng::new(cfg.base_seed.wrapping_add(comm.rank() as u64));
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let loss = match cfg.batch {
            Batch::Full => {
                let v = local_step(net, x, y, &mut dropout_rng)?;
                let (avg, _) = weighted_mean(comm, &v, x.rows())?;
                net.sgd_step(&avg[..np], lr)?;
                avg[np].to_f64().expect("float")
            }
            Batch::Size(b) => {
                let mut perm: Vec<usize> = (0..x.rows()).collect();
                Rng::new(cfg.base_seed.wrapping_add(epoch as u64)).shuffle(&mut perm);
                let local_batches = x.rows().div_ceil(b) as i64;
                let steps = comm.allreduce(&[local_batches], ReduceOp::Max)?[0] as usize;
                let (mut loss_sum, mut seen) = (0.0, 0i64);
                for s in 0..steps {
                    let lo = (s * b).min(perm.len());
                    let idx = &perm[lo..((s + 1) * b).min(perm.len())];
                    let (xb, yb) = (x.select_rows(idx), y.select_rows(idx));
                    let v = local_step(net, &xb, &yb, &mut dropout_rng)?;
                    let (avg, total) = weighted_mean(comm, &v, idx.len())?;
                    net.sgd_step(&avg[..np], lr)?;
                    loss_sum += avg[np].to_f64().expect("float") * total as f64;
                    seen += total;
                }
                if seen == 0 {
                    0.0
                } else {
                    loss_sum / seen as f64
                }
            }
        };
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: epoch + 1 });
        }
        history.push(loss);
        on_epoch(epoch, loss, net);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::run_local;
    use crate::tensor::NetConfig;

    #[test]
    fn mean_and_weighting() {
        let out = run_local(2, |comm| {
            let g = if comm.rank() == 0 { 1.0 } else { 3.0 };
            ddp_allreduce_grads(&comm, &[g], 1).unwrap()
        });
        assert_eq!(out, vec![vec![2.0], vec![2.0]]);
        let out = run_local(2, |comm| {
            let (g, n) = if comm.rank() == 0 { (0.0, 1) } else { (4.0, 3) };
            ddp_allreduce_grads(&comm, &[g], n).unwrap()
        });
        assert_eq!(out[0], vec![3.0]);
        let out = run_local(2, |comm| ddp_allreduce_grads(&comm, &[5.0f64], 0).unwrap());
        assert_eq!(out[1], vec![0.0]);
    }

    #[test]
    fn broadcast_makes_params_equal() {
        let digests = run_local(3, |comm| {
            let mut cfg = NetConfig::new(4);
            cfg.hidden_dim = 8;
            cfg.seed = comm.rank() as u64;
            let mut net = ResponseNetwork::<f64>::new(cfg).unwrap();
            ddp_broadcast_params(&comm, &mut net).unwrap();
            net.digest()
        });
        assert!(digests.iter().all(|&d| d == digests[0]));
        let mut cfg = NetConfig::new(4);
        cfg.hidden_dim = 8;
        assert_eq!(ResponseNetwork::<f64>::new(cfg).unwrap().digest(), digests[0]);
    }

    fn line(n: usize) -> (DenseMatrix<f64>, DenseMatrix<f64>) {
        let x = DenseMatrix::from_fn(n, 1, |i, _| i as f64 / n as f64);
        let y = x.map(|v| 2.0 * v);
        (x, y)
    }

    #[test]
    fn zero_lr_keeps_params() {
        let (x, y) = line(10);
        let out = run_local(1, |comm| {
            let mut cfg = NetConfig::new(1);
            cfg.hidden_dim = 4;
            cfg.dropout_p = 0.0;
            let mut net = ResponseNetwork::<f64>::new(cfg).unwrap();
            let before = net.clone();
            let tc = TrainConfig { lr: 0.0, epochs: 3, ..TrainConfig::default() };
            let h = train(&comm, &mut net, &x, &y, &tc).unwrap();
            (net == before, h)
        });
        assert!(out[0].0);
        assert!(out[0].1.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn mini_batch_runs_on_uneven_shards() {
        let (x, y) = line(23);
        let out = run_local(2, |comm| {
            let (xs, ys) = if comm.rank() == 0 { (x.slice_rows(0, 20), y.slice_rows(0, 20)) } else { (x.slice_rows(20, 3), y.slice_rows(20, 3)) };
            let mut cfg = NetConfig::new(1);
            cfg.hidden_dim = 4;
            cfg.dropout_p = 0.0;
            let mut net = ResponseNetwork::<f64>::new(cfg).unwrap();
            let tc = TrainConfig { epochs: 2, batch: Batch::Size(4), ..TrainConfig::default() };
            train(&comm, &mut net, &xs, &ys, &tc).unwrap();
            net.digest()
        });
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn divergence_is_reported() {
        let (x, y) = line(8);
        let y = y.map(|v| v * 1e200);
        let out = run_local(1, |comm| {
            let mut net = ResponseNetwork::<f64>::new(NetConfig::new(1)).unwrap();
            let tc = TrainConfig { lr: 1e10, epochs: 5, ..TrainConfig::default() };
            train(&comm, &mut net, &x, &y, &tc)
        });
        assert!(matches!(out[0], Err(Error::NonFiniteLoss { .. })));
    }
}
