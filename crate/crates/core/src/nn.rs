//! Dense building blocks shared by every branch.

use bmr_autodiff::{ParamId, ParamStore, Session, StatsId, Tensor, Var};
use rand::Rng;

use crate::error::Result;

/// Uniform in `±1/√fan_in`.
pub fn uniform_init<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Standard sinusoidal position encoding, `[t, d]`.
pub fn sinusoidal(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![t, d], data).expect("shape and data agree")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), uniform_init(rng, &[fan_in, fan_out], fan_in));
        let b = store.add(format!("{name}.b"), uniform_init(rng, &[fan_out], fan_in));
        Self { w, b, fan_in, fan_out }
    }

    /// Weights as in [`Linear::new`], bias zero.
    pub fn zero_bias<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), uniform_init(rng, &[fan_in, fan_out], fan_in));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { w, b, fan_in, fan_out }
    }

    pub fn frozen<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        frozen: bool,
    ) -> Self {
        let lin = Self::new(store, rng, name, fan_in, fan_out);
        store.set_frozen(lin.w, frozen);
        store.set_frozen(lin.b, frozen);
        lin
    }

    /// `x[..., fan_in] -> [..., fan_out]`.
    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let w = sess.param(self.w);
        let b = sess.param(self.b);
        let y = sess.tape.matmul(x, w)?;
        Ok(sess.tape.add(y, b)?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, features: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[features], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[features])),
            stats: store.add_stats(name, features),
        }
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        Ok(sess.batchnorm1d(x, self.gamma, self.beta, self.stats)?)
    }
}

/// Two-layer perceptron: `Linear → [BatchNorm1d] → ELU → Linear`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub norm: Option<BatchNorm>,
    pub out: Linear,
}

pub struct MlpOutput {
    /// Post-activation hidden layer.
    pub hidden: Var,
    pub out: Var,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dims: (usize, usize, usize),
        batchnorm: bool,
    ) -> Self {
        let (i, h, o) = dims;
        let hidden = Linear::new(store, rng, &format!("{name}.fc1"), i, h);
        let norm = batchnorm.then(|| BatchNorm::new(store, &format!("{name}.bn"), h));
        let out = Linear::new(store, rng, &format!("{name}.fc2"), h, o);
        Self { hidden, norm, out }
    }

    /// `x` must be 2-D `[rows, in]` when batch norm is present.
    pub fn forward_full(&self, sess: &mut Session, x: Var) -> Result<MlpOutput> {
        let mut h = self.hidden.forward(sess, x)?;
        if let Some(bn) = &self.norm {
            h = bn.forward(sess, h)?;
        }
        let hidden = sess.tape.elu(h);
        let out = self.out.forward(sess, hidden)?;
        Ok(MlpOutput { hidden, out })
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        Ok(self.forward_full(sess, x)?.out)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.hidden.params();
        if let Some(bn) = &self.norm {
            p.extend([bn.gamma, bn.beta]);
        }
        p.extend(self.out.params());
        p
    }
}

/// Evaluates a scalar-to-scalar MLP at each input, in eval mode.
pub(crate) fn eval_scalar_mlp(store: &mut ParamStore, mlp: &Mlp, inputs: &[f64]) -> Result<Vec<f64>> {
    let mut sess = Session::new(store, bmr_autodiff::Mode::Eval);
    let x = sess.tape.constant(Tensor::new(vec![inputs.len(), 1], inputs.to_vec())?);
    let y = mlp.forward(&mut sess, x)?;
    Ok(sess.tape.value(y).data().to_vec())
}
