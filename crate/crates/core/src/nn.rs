//! Parameterized layers over [`Graph`] and [`ParamStore`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{BatchNormMode, Graph, ParamId, ParamStore, Real, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in running-statistics updates.
pub const BN_MOMENTUM: f64 = 0.1;

/// Forward-pass state shared by all layers.
pub struct Ctx<'a, T: Real> {
    pub g: &'a mut Graph<T>,
    pub store: &'a ParamStore<T>,
    /// Batch statistics in training mode, running statistics otherwise.
    pub train: bool,
    pub bn_updates: Vec<BnUpdate<T>>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(g: &'a mut Graph<T>, store: &'a ParamStore<T>, train: bool) -> Self {
        Self { g, store, train, bn_updates: Vec::new() }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }
}

/// Batch statistics observed by one batch-norm call.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Folds observed batch statistics into the running buffers.
pub fn apply_bn_updates<T: Real>(store: &mut ParamStore<T>, updates: &[BnUpdate<T>]) {
    let m = T::of(BN_MOMENTUM);
    for u in updates {
        for (dst, src) in [(u.mean_id, &u.mean), (u.var_id, &u.var)] {
            let t = store.tensor_mut(dst);
            for (r, &b) in t.data_mut().iter_mut().zip(src) {
                *r = (T::one() - m) * *r + m * b;
            }
        }
    }
}

/// Registers parameters under a common name prefix with seeded initialization.
pub struct Builder<'a, T: Real> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a, T: Real> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng }
    }

    /// He-uniform weights: `U(−√(6/fan_in), √(6/fan_in))`.
    pub fn he(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> Result<ParamId> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(self.rng.gen_range(-bound..bound))).collect();
        self.store.add(name, Tensor::new(shape, data)?, true)
    }

    pub fn filled(&mut self, name: &str, shape: Vec<usize>, value: f64, trainable: bool) -> Result<ParamId> {
        self.store.add(name, Tensor::full(shape, T::of(value)), trainable)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn build<T: Real>(b: &mut Builder<T>, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.filled(&format!("{prefix}.gamma"), vec![channels], 1.0, true)?,
            beta: b.filled(&format!("{prefix}.beta"), vec![channels], 0.0, true)?,
            running_mean: b.filled(&format!("{prefix}.running_mean"), vec![channels], 0.0, false)?,
            running_var: b.filled(&format!("{prefix}.running_var"), vec![channels], 1.0, false)?,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let mode = if ctx.train {
            BatchNormMode::Batch
        } else {
            BatchNormMode::Fixed {
                mean: ctx.store.tensor(self.running_mean).data().to_vec(),
                var: ctx.store.tensor(self.running_var).data().to_vec(),
            }
        };
        let (y, stats) = ctx.g.batch_norm(x, gamma, beta, mode, BN_EPS)?;
        if let Some((mean, var)) = stats {
            ctx.bn_updates.push(BnUpdate { mean_id: self.running_mean, var_id: self.running_var, mean, var });
        }
        Ok(y)
    }
}

/// 2-D convolution with square kernel and `k/2` padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn build<T: Real>(
        b: &mut Builder<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = b.he(&format!("{prefix}.weight"), vec![cout, cin, kernel, kernel], cin * kernel * kernel)?;
        let bias = if bias { Some(b.filled(&format!("{prefix}.bias"), vec![cout], 0.0, true)?) } else { None };
        Ok(Self { weight, bias, stride, kernel })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|id| ctx.param(id));
        ctx.g.conv2d(x, w, b, self.stride, self.kernel / 2)
    }
}

/// Conv (no bias) → batch norm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn build<T: Real>(
        b: &mut Builder<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::build(b, &format!("{prefix}.conv"), cin, cout, kernel, stride, false)?,
            bn: BatchNorm::build(b, &format!("{prefix}.bn"), cout)?,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(ctx.g.relu(y))
    }
}

/// Circular convolution over `[B,C,N]` rings.
#[derive(Clone, Debug)]
pub struct RingConv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl RingConv {
    pub fn build<T: Real>(
        b: &mut Builder<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = b.he(&format!("{prefix}.weight"), vec![cout, cin, kernel], cin * kernel)?;
        let bias = if bias { Some(b.filled(&format!("{prefix}.bias"), vec![cout], 0.0, true)?) } else { None };
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|id| ctx.param(id));
        ctx.g.ring_conv(x, w, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn running_stats_follow_momentum() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bn = BatchNorm::build(&mut Builder::new(&mut store, &mut rng), "bn", 1).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 1, 4], vec![1.0, 2.0, 3.0, 6.0]).unwrap());
        let mut ctx = Ctx::new(&mut g, &store, true);
        bn.forward(&mut ctx, x).unwrap();
        let updates = std::mem::take(&mut ctx.bn_updates);
        apply_bn_updates(&mut store, &updates);
        assert!((store.tensor(bn.running_mean).data()[0] - 0.3).abs() < 1e-12);
        // unbiased variance of [1,2,3,6] is 14/3
        let expect = 0.9 + 0.1 * 14.0 / 3.0;
        assert!((store.tensor(bn.running_var).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn fixed_mode_uses_running_stats() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bn = BatchNorm::build(&mut Builder::new(&mut store, &mut rng), "bn", 1).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap());
        let mut ctx = Ctx::new(&mut g, &store, false);
        let y = bn.forward(&mut ctx, x).unwrap();
        assert!(ctx.bn_updates.is_empty());
        let out = ctx.g.data(y).to_vec();
        assert!((out[0] - 1.0 / (1.0 + BN_EPS).sqrt()).abs() < 1e-12);
    }
}
