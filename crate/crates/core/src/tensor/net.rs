use crate::columnar::fnv1a64;
use crate::error::{Error, Result};
use crate::rng::Rng;

use super::matrix::{cast, DenseMatrix, Scalar};

/// Shape and initialization of a [`ResponseNetwork`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub n_blocks: usize,
    pub n_tail: usize,
    pub dropout_p: f64,
    pub seed: u64,
}

impl NetConfig {
    pub const DEFAULT_HIDDEN: usize = 64;

    pub fn new(in_dim: usize) -> Self {
        NetConfig {
            in_dim,
            hidden_dim: Self::DEFAULT_HIDDEN,
            n_blocks: 2,
            n_tail: 1,
            dropout_p: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidConfig("in_dim and hidden_dim must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidConfig(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }
}

/// Fully connected layer `x ↦ xW + b` with `W` of shape `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub w: DenseMatrix<T>,
    pub b: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    fn init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let lim = (6.0 / fan_in as f64).sqrt();
        Dense {
            w: DenseMatrix::from_fn(fan_in, fan_out, |_, _| cast(rng.uniform(-lim, lim))),
            b: vec![T::zero(); fan_out],
        }
    }

    fn apply(&self, x: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        let mut z = x.matmul(&self.w)?;
        z.add_row(&self.b);
        Ok(z)
    }

    fn len(&self) -> usize {
        self.w.data().len() + self.b.len()
    }
}

/// Forward pass mode. Dropout draws its masks from the training generator.
#[derive(Debug)]
pub enum Mode<'a> {
    Train(&'a mut Rng),
    Eval,
}

/// Activations kept by [`ResponseNetwork::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Cache<T> {
    x: DenseMatrix<T>,
    /// Post-activation outputs: input layer, each block, each tail layer.
    hs: Vec<DenseMatrix<T>>,
    /// First dense output of each block.
    inner: Vec<DenseMatrix<T>>,
    /// Inverted-dropout scale per element of each block, when active.
    masks: Vec<Option<DenseMatrix<T>>>,
    yhat: DenseMatrix<T>,
}

impl<T> Cache<T> {
    pub fn yhat(&self) -> &DenseMatrix<T> {
        &self.yhat
    }
}

/// Residual regression network.
///
/// Layers in parameter order: input, then `D1, D2` per block, then the tail
/// layers, then the single-output head.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseNetwork<T> {
    config: NetConfig,
    layers: Vec<Dense<T>>,
}

fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// `g` where `h > 0`, else zero.
fn relu_grad<T: Scalar>(g: &DenseMatrix<T>, h: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    g.zip_map(h, |g, h| if h > T::zero() { g } else { T::zero() })
}

impl<T: Scalar> ResponseNetwork<T> {
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let h = config.hidden_dim;
        let mut layers = vec![Dense::init(config.in_dim, h, &mut rng)];
        for _ in 0..2 * config.n_blocks + config.n_tail {
            layers.push(Dense::init(h, h, &mut rng));
        }
        layers.push(Dense::init(h, 1, &mut rng));
        Ok(ResponseNetwork { config, layers })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<T>] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::len).sum()
    }

    /// Flattened parameters: per layer, `W` row-major then `b`.
    pub fn params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.w.data());
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn set_params(&mut self, p: &[T]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::LengthMismatch(format!(
                "{} parameters for a network of {}",
                p.len(),
                self.num_params()
            )));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.w.data().len();
            l.w.data_mut().copy_from_slice(&p[at..at + nw]);
            at += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&p[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    /// `p ← p − lr·g`.
    pub fn sgd_step(&mut self, grads: &[T], lr: T) -> Result<()> {
        if grads.len() != self.num_params() {
            return Err(Error::LengthMismatch(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.num_params()
            )));
        }
        let p: Vec<T> = self.params().iter().zip(grads).map(|(&p, &g)| p - lr * g).collect();
        self.set_params(&p)
    }

    /// Length-prefixed little-endian Float64 parameter vector.
    pub fn checkpoint(&self) -> Vec<u8> {
        let p = self.params();
        let mut out = Vec::with_capacity(8 + 8 * p.len());
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
        for x in p {
            out.extend_from_slice(&x.to_f64().expect("float").to_le_bytes());
        }
        out
    }

    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> Result<()> {
        let (len, body) = bytes
            .split_first_chunk::<8>()
            .ok_or_else(|| Error::Decode("checkpoint shorter than its length prefix".into()))?;
        let n = u64::from_le_bytes(*len) as usize;
        if body.len() != n.saturating_mul(8) {
            return Err(Error::Decode(format!("checkpoint declares {n} values, has {} bytes", body.len())));
        }
        let p: Vec<T> = body
            .chunks_exact(8)
            .map(|c| cast(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        self.set_params(&p)
    }

    /// FNV-1a digest of the checkpoint bytes.
    pub fn digest(&self) -> u64 {
        fnv1a64(&self.checkpoint())
    }

    pub fn forward(&self, x: &DenseMatrix<T>, mut mode: Mode<'_>) -> Result<(DenseMatrix<T>, Cache<T>)> {
        if x.cols() != self.config.in_dim {
            return Err(Error::ShapeMismatch(format!(
                "input has {} columns, network expects {}",
                x.cols(),
                self.config.in_dim
            )));
        }
        let nb = self.config.n_blocks;
        let p = self.config.dropout_p;
        let mut hs = vec![self.layers[0].apply(x)?.map(relu)];
        let mut inner = Vec::with_capacity(nb);
        let mut masks = Vec::with_capacity(nb);
        for k in 0..nb {
            let h = hs.last().expect("input activation");
            let a = self.layers[1 + 2 * k].apply(h)?;
            let mut c = self.layers[2 + 2 * k].apply(&a)?;
            let mask = match &mut mode {
                Mode::Train(rng) if p > 0.0 => {
                    let keep: T = cast(1.0 / (1.0 - p));
                    let m = DenseMatrix::from_fn(c.rows(), c.cols(), |_, _| {
                        if rng.bernoulli(1.0 - p) {
                            keep
                        } else {
                            T::zero()
                        }
                    });
                    c = c.zip_map(&m, |c, m| c * m)?;
                    Some(m)
                }
                _ => None,
            };
            let out = h.zip_map(&c, |h, c| relu(h + c))?;
            inner.push(a);
            masks.push(mask);
            hs.push(out);
        }
        for t in 0..self.config.n_tail {
            let h = hs.last().expect("activation");
            hs.push(self.layers[1 + 2 * nb + t].apply(h)?.map(relu));
        }
        let head = self.layers.last().expect("head layer");
        let yhat = head.apply(hs.last().expect("activation"))?;
        let cache = Cache { x: x.clone(), hs, inner, masks, yhat: yhat.clone() };
        Ok((yhat, cache))
    }

    pub fn predict(&self, x: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        Ok(self.forward(x, Mode::Eval)?.0)
    }

    /// Gradient of [`mse_loss`] at the cached forward pass, in parameter order.
    pub fn backward(&self, cache: &Cache<T>, y: &DenseMatrix<T>) -> Result<Vec<T>> {
        let yhat = &cache.yhat;
        if yhat.shape() != y.shape() {
            return Err(Error::ShapeMismatch(format!("prediction {:?} vs target {:?}", yhat.shape(), y.shape())));
        }
        let n = yhat.rows();
        let mut grads: Vec<Option<(DenseMatrix<T>, Vec<T>)>> = vec![None; self.layers.len()];
        if n == 0 {
            return Ok(vec![T::zero(); self.num_params()]);
        }
        let scale: T = cast(2.0 / n as f64);
        let mut dh = yhat.zip_map(y, |p, t| (p - t) * scale)?;

        let nb = self.config.n_blocks;
        let nt = self.config.n_tail;
        let last = self.layers.len() - 1;
        let head_in = cache.hs.last().expect("activation");
        grads[last] = Some((head_in.t_matmul(&dh)?, dh.column_sums()));
        dh = dh.matmul_t(&self.layers[last].w)?;

        for t in (0..nt).rev() {
            let li = 1 + 2 * nb + t;
            let (input, out) = (&cache.hs[nb + t], &cache.hs[nb + t + 1]);
            let dz = relu_grad(&dh, out)?;
            grads[li] = Some((input.t_matmul(&dz)?, dz.column_sums()));
            dh = dz.matmul_t(&self.layers[li].w)?;
        }

        for k in (0..nb).rev() {
            let (input, out) = (&cache.hs[k], &cache.hs[k + 1]);
            let ds = relu_grad(&dh, out)?;
            let dc = match &cache.masks[k] {
                Some(m) => ds.zip_map(m, |g, m| g * m)?,
                None => ds.clone(),
            };
            let (l1, l2) = (1 + 2 * k, 2 + 2 * k);
            grads[l2] = Some((cache.inner[k].t_matmul(&dc)?, dc.column_sums()));
            let da = dc.matmul_t(&self.layers[l2].w)?;
            grads[l1] = Some((input.t_matmul(&da)?, da.column_sums()));
            let through = da.matmul_t(&self.layers[l1].w)?;
            dh = ds.zip_map(&through, |a, b| a + b)?;
        }

        let dz = relu_grad(&dh, &cache.hs[0])?;
        grads[0] = Some((cache.x.t_matmul(&dz)?, dz.column_sums()));

        let mut out = Vec::with_capacity(self.num_params());
        for g in grads {
            let (w, b) = g.expect("every layer has a gradient");
            out.extend_from_slice(w.data());
            out.extend_from_slice(&b);
        }
        Ok(out)
    }
}

/// Mean squared error `(1/n) Σ (yhat − y)²`; zero for empty input.
pub fn mse_loss<T: Scalar>(yhat: &DenseMatrix<T>, y: &DenseMatrix<T>) -> Result<T> {
    if yhat.shape() != y.shape() {
        return Err(Error::ShapeMismatch(format!("prediction {:?} vs target {:?}", yhat.shape(), y.shape())));
    }
    if yhat.rows() == 0 {
        return Ok(T::zero());
    }
    let s = yhat.data().iter().zip(y.data()).fold(T::zero(), |s, (&p, &t)| s + (p - t) * (p - t));
    Ok(s / cast(yhat.rows() as f64))
}
