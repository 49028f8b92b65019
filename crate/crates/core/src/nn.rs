//! Forward-pass context and the small layer types shared by every model.

use graphshot_tensor::{BatchMoments, Mode, NormStats, ParamId, ParamStore, Tape, Tensor, Var, LEAKY_SLOPE};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Running-moment momentum of every batchnorm layer.
pub const BN_MOMENTUM: f64 = 0.1;

/// State of one forward pass: the tape, read-only parameters, the
/// train/eval switch, the pass's own generator (dropout masks, query
/// draws) and the batch statistics observed by train-mode batchnorm.
pub struct Ctx<'s> {
    pub tape: Tape,
    pub store: &'s ParamStore,
    pub mode: Mode,
    pub rng: ChaCha8Rng,
    pub bn_updates: Vec<BnUpdate>,
}

impl<'s> Ctx<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode, rng: ChaCha8Rng) -> Self {
        Self { tape: Tape::new(), store, mode, rng, bn_updates: Vec::new() }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }
}

#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub moments: BatchMoments,
}

/// Folds observed batch moments into the running buffers, in order.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        for (id, batch) in [(u.mean, &u.moments.mean), (u.var, &u.moments.var)] {
            for (r, b) in store.get_mut(id).data_mut().iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
}

/// Fully-connected layer `x·W (+ b)` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let weight = store.add_uniform(&format!("{name}.weight"), &[fan_in, fan_out], fan_in, rng);
        let bias = bias.then(|| store.add_uniform(&format!("{name}.bias"), &[fan_out], fan_in, rng));
        Self { weight, bias, fan_in, fan_out }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        Ok(ctx.tape.linear(x, w, b)?)
    }
}

/// Dense layers with leaky-ReLU between them and a linear final layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths` lists every width including input and output.
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut impl Rng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.fc{i}"), w[0], w[1], true, rng))
            .collect();
        Self { layers }
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().expect("non-empty mlp").fan_out
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = ctx.tape.leaky_relu(h, LEAKY_SLOPE);
            }
            h = layer.forward(ctx, h)?;
        }
        Ok(h)
    }
}

/// Per-channel batch normalization with running moments kept as buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::ones(&[channels])),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let (out, moments) = match ctx.mode {
            Mode::Train => ctx.tape.batchnorm(x, gamma, beta, NormStats::Batch)?,
            Mode::Eval => {
                let store = ctx.store;
                let stats = NormStats::Running {
                    mean: store.get(self.running_mean).data(),
                    var: store.get(self.running_var).data(),
                };
                ctx.tape.batchnorm(x, gamma, beta, stats)?
            }
        };
        if let Some(moments) = moments {
            ctx.bn_updates.push(BnUpdate { mean: self.running_mean, var: self.running_var, moments });
        }
        Ok(out)
    }
}

/// `conv3×3 → batchnorm → maxpool2 → leaky-ReLU (→ dropout)`.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub kernel: ParamId,
    pub norm: BatchNorm,
    pub dropout: Option<f64>,
}

impl ConvBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        filters: usize,
        dropout: Option<f64>,
        rng: &mut impl Rng,
    ) -> Self {
        let kernel = store.add_uniform(&format!("{name}.kernel"), &[filters, in_channels, 3, 3], in_channels * 9, rng);
        let norm = BatchNorm::new(store, &format!("{name}.bn"), filters);
        Self { kernel, norm, dropout }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let k = ctx.param(self.kernel);
        let h = ctx.tape.conv2d(x, k)?;
        let h = self.norm.forward(ctx, h)?;
        let h = ctx.tape.maxpool2(h)?;
        let h = ctx.tape.leaky_relu(h, LEAKY_SLOPE);
        match self.dropout {
            Some(p) => {
                let mode = ctx.mode;
                Ok(ctx.tape.dropout(h, p, mode, &mut ctx.rng)?)
            }
            None => Ok(h),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn mlp_widths_and_forward_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[5, 4, 1], &mut rng);
        assert_eq!((mlp.in_width(), mlp.out_width()), (5, 1));
        assert_eq!(store.len(), 4);
        let mut ctx = Ctx::new(&store, Mode::Eval, ChaCha8Rng::seed_from_u64(1));
        let x = ctx.tape.constant(Tensor::ones(&[3, 5]));
        let y = mlp.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.tape.shape(y), &[3, 1]);
    }

    #[test]
    fn running_moments_follow_momentum() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        let x = Tensor::new(&[2, 1], vec![1.0, 3.0]).unwrap();
        let updates = {
            let mut ctx = Ctx::new(&store, Mode::Train, ChaCha8Rng::seed_from_u64(0));
            let v = ctx.tape.constant(x);
            bn.forward(&mut ctx, v).unwrap();
            ctx.bn_updates
        };
        apply_bn_updates(&mut store, &updates);
        assert!((store.get(bn.running_mean).data()[0] - 0.2).abs() < 1e-15);
        // Unbiased batch variance of {1, 3} is 2.
        assert!((store.get(bn.running_var).data()[0] - (0.9 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn eval_batchnorm_uses_running_moments() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        store.set("bn.running_mean", Tensor::scalar(2.0)).unwrap();
        let mut ctx = Ctx::new(&store, Mode::Eval, ChaCha8Rng::seed_from_u64(0));
        let v = ctx.tape.constant(Tensor::new(&[1, 1], vec![3.0]).unwrap());
        let y = bn.forward(&mut ctx, v).unwrap();
        let expect = 1.0 / (1.0 + graphshot_tensor::BATCHNORM_EPS).sqrt();
        assert!((ctx.tape.value(y).item() - expect).abs() < 1e-12);
        assert!(ctx.bn_updates.is_empty());
    }
}
