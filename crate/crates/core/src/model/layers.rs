use std::sync::Arc;

use rand::Rng;

use crate::activation::{Gelu, ScalarActivation};
use crate::error::{Error, Result};
use crate::tensor::{xavier_uniform, Graph, ParamId, ParamStore, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), xavier_uniform(rng, &[d_in, d_out], d_in, d_out));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[d_out]));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn init(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (ga, be) = (g.param(store, self.gamma), g.param(store, self.beta));
        g.layer_norm(x, ga, be, LN_EPS)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

/// Intermediate values of one attention call.
#[derive(Debug, Clone)]
pub struct AttentionOut {
    pub out: Var,
    /// One `Lq × Lk` weight matrix per head.
    pub weights: Vec<Var>,
}

impl Attention {
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize) -> Self {
        Self {
            q: Linear::init(store, rng, &format!("{name}.q"), d, d),
            k: Linear::init(store, rng, &format!("{name}.k"), d, d),
            v: Linear::init(store, rng, &format!("{name}.v"), d, d),
            o: Linear::init(store, rng, &format!("{name}.o"), d, d),
        }
    }

    /// Scaled dot-product attention per head with scale `1/sqrt(d/n_heads)`,
    /// heads concatenated and projected. `causal` masks keys after the query.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        xq: Var,
        xkv: Var,
        n_heads: usize,
        causal: bool,
    ) -> Result<AttentionOut> {
        let d = g.value(xq).cols();
        if g.value(xkv).cols() != d {
            return Err(Error::shape(
                "attention",
                format!("query {:?}, key/value {:?}", g.value(xq).shape(), g.value(xkv).shape()),
            ));
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::shape("attention", format!("width {d} not divisible by {n_heads} heads")));
        }
        let dh = d / n_heads;
        let q = self.q.forward(g, store, xq)?;
        let k = self.k.forward(g, store, xkv)?;
        let v = self.v.forward(g, store, xkv)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(n_heads);
        let mut weights = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, scale);
            let a = g.softmax(s, causal);
            heads.push(g.matmul(a, vh)?);
            weights.push(a);
        }
        let cat = if n_heads == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let out = self.o.forward(g, store, cat)?;
        Ok(AttentionOut { out, weights })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize, d_ff: usize) -> Self {
        Self {
            up: Linear::init(store, rng, &format!("{name}.up"), d, d_ff),
            down: Linear::init(store, rng, &format!("{name}.down"), d_ff, d),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, act: &Arc<dyn ScalarActivation>) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.activation(h, act);
        self.down.forward(g, store, h)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Distill {
    pub w: ParamId,
    pub b: ParamId,
}

impl Distill {
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize) -> Self {
        Self {
            w: store.add(format!("{name}.w"), xavier_uniform(rng, &[3, d], 3, 1)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        distill_layer(g, h, w, b)
    }
}

fn gelu() -> Arc<dyn ScalarActivation> {
    static GELU: std::sync::OnceLock<Arc<dyn ScalarActivation>> = std::sync::OnceLock::new();
    Arc::clone(GELU.get_or_init(|| Arc::new(Gelu)))
}

/// Depthwise width-3 convolution with zero padding, GELU, then stride-2 max pooling.
/// Output has `ceil(Lk / 2)` rows.
pub fn distill_layer(g: &mut Graph, h: Var, w: Var, b: Var) -> Result<Var> {
    let lk = g.value(h).rows();
    if lk < 2 {
        return Err(Error::Argument(format!("distilling needs at least 2 steps, got {lk}")));
    }
    let c = g.depthwise_conv3(h, w, b)?;
    let a = g.activation(c, &gelu());
    Ok(g.max_pool2(a))
}

/// Mean squared difference between a representation and its distilled,
/// re-expanded counterpart.
pub fn distill_loss(g: &mut Graph, x: Var, x_hat: Var) -> Result<Var> {
    if g.value(x).shape() != g.value(x_hat).shape() {
        return Err(Error::shape(
            "distill_loss",
            format!("{:?} vs {:?}", g.value(x).shape(), g.value(x_hat).shape()),
        ));
    }
    g.mse(x, x_hat)
}

/// Fixed sinusoidal position code: `sin(p / 10000^(2i/d))` on even columns, `cos` on odd.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for p in 0..len {
        for i in 0..d {
            let freq = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = p as f64 / freq;
            data[p * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::matrix(len, d, data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_leaf_gradient;

    fn identity_attention(store: &mut ParamStore, d: usize) -> Attention {
        let mut lin = |name: &str| Linear {
            w: store.add(format!("{name}.w"), Tensor::identity(d)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[d])),
        };
        Attention {
            q: lin("q"),
            k: lin("k"),
            v: lin("v"),
            o: lin("o"),
        }
    }

    #[test]
    fn single_key_attends_fully() {
        let mut store = ParamStore::new();
        let att = identity_attention(&mut store, 2);
        let mut g = Graph::new();
        let q = g.constant(Tensor::matrix(1, 2, vec![0.3, -1.0]).unwrap());
        let kv = g.constant(Tensor::matrix(1, 2, vec![2.0, 5.0]).unwrap());
        let out = att.forward(&mut g, &store, q, kv, 1, false).unwrap();
        assert_eq!(g.value(out.weights[0]).data(), &[1.0]);
        assert_eq!(g.value(out.out).data(), &[2.0, 5.0]);
    }

    #[test]
    fn two_by_two_hand_case() {
        // q = k = v = [[1,0],[0,1]], scale 1/sqrt(2):
        // row 0 scores [1/√2, 0] -> weights [e^{1/√2}, 1] / (e^{1/√2} + 1)
        let mut store = ParamStore::new();
        let att = identity_attention(&mut store, 2);
        let mut g = Graph::new();
        let x = g.constant(Tensor::identity(2));
        let out = att.forward(&mut g, &store, x, x, 1, false).unwrap();
        let e = (1.0 / 2f64.sqrt()).exp();
        let (hi, lo) = (e / (e + 1.0), 1.0 / (e + 1.0));
        let expect = [hi, lo, lo, hi];
        for (a, b) in g.value(out.out).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn weights_rows_sum_to_one() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let att = Attention::init(&mut store, &mut rng, "a", 8);
        let mut g = Graph::new();
        let xq = g.constant(xavier_uniform(&mut rng, &[5, 8], 1, 1));
        let xk = g.constant(xavier_uniform(&mut rng, &[7, 8], 1, 1));
        let out = att.forward(&mut g, &store, xq, xk, 4, false).unwrap();
        assert_eq!(out.weights.len(), 4);
        for w in &out.weights {
            let t = g.value(*w);
            for r in 0..5 {
                assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(g.value(out.out).shape(), &[5, 8]);
        assert!(att.forward(&mut g, &store, xq, xk, 3, false).is_err());
        let bad = g.constant(Tensor::zeros(&[7, 4]));
        assert!(att.forward(&mut g, &store, xq, bad, 4, false).is_err());
    }

    #[test]
    fn distill_lengths_and_errors() {
        for (l, want) in [(96, 48), (7, 4), (2, 1)] {
            let mut g = Graph::new();
            let h = g.constant(Tensor::full(&[l, 3], 0.5));
            let w = g.constant(Tensor::full(&[3, 3], 0.1));
            let b = g.constant(Tensor::zeros(&[3]));
            let o = distill_layer(&mut g, h, w, b).unwrap();
            assert_eq!(g.value(o).rows(), want);
        }
        let mut g = Graph::new();
        let h = g.constant(Tensor::zeros(&[1, 3]));
        let w = g.constant(Tensor::zeros(&[3, 3]));
        let b = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(distill_layer(&mut g, h, w, b), Err(Error::Argument(_))));
    }

    #[test]
    fn distill_loss_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let z = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let l = distill_loss(&mut g, x, z).unwrap();
        assert_eq!(g.value(l).item(), 2.5);
        let l0 = distill_loss(&mut g, x, x).unwrap();
        assert_eq!(g.value(l0).item(), 0.0);
        let y = g.constant(Tensor::vector(vec![0.0; 3]));
        assert!(distill_loss(&mut g, x, y).is_err());
    }

    #[test]
    fn attention_input_gradient() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let att = Attention::init(&mut store, &mut rng, "a", 4);
        let x0 = xavier_uniform(&mut rng, &[3, 4], 1, 1);
        let err = check_leaf_gradient(&x0, 1e-6, |g, x| {
            let o = att.forward(g, &store, x, x, 2, true)?;
            let sq = g.mul(o.out, o.out)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn positional_code_basics() {
        let pe = positional_encoding(4, 6);
        assert_eq!(pe.get(0, 0), 0.0);
        assert_eq!(pe.get(0, 1), 1.0);
        assert!((pe.get(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
    }
}
