//! Shared layers: linear maps, two-layer MLPs, and causal multi-head
//! self-attention. These are thin parameter bundles over the graph ops.

use rand::Rng;

use crate::error::{IvaError, Result};
use crate::tensor::{xavier_init, zeros, Graph, NodeId, ParamId, ParamStore};

/// `y = x W + b` with `W: in x out`, `b: out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), xavier_init(rng, d_in, d_out))?;
        let b = store.add(format!("{name}.b"), zeros(vec![d_out]))?;
        Ok(Linear { w, b })
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let xw = g.matmul(x, w)?;
        g.add(xw, b)
    }
}

/// Two-layer MLP with a smooth GELU nonlinearity in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub proj_in: Linear,
    pub proj_out: Linear,
}

impl Mlp {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Mlp {
            proj_in: Linear::init(store, &format!("{name}.in"), d_in, d_hidden, rng)?,
            proj_out: Linear::init(store, &format!("{name}.out"), d_hidden, d_out, rng)?,
        })
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let h = self.proj_in.apply(g, store, x)?;
        let a = g.gelu(h)?;
        self.proj_out.apply(g, store, a)
    }
}

/// Layer-norm gain/bias pair over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        use crate::tensor::ones;
        Ok(LayerNorm {
            gain: store.add(format!("{name}.gain"), ones(vec![d]))?,
            bias: store.add(format!("{name}.bias"), zeros(vec![d]))?,
            eps: LAYER_NORM_EPS,
        })
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, self.eps)
    }
}

/// Multi-head self-attention where position `t` attends to positions `<= t`.
#[derive(Debug, Clone)]
pub struct CausalSelfAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl CausalSelfAttention {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if d_model % heads != 0 {
            return Err(IvaError::Config(format!(
                "width {d_model} not divisible by {heads} heads"
            )));
        }
        Ok(CausalSelfAttention {
            wq: Linear::init(store, &format!("{name}.wq"), d_model, d_model, rng)?,
            wk: Linear::init(store, &format!("{name}.wk"), d_model, d_model, rng)?,
            wv: Linear::init(store, &format!("{name}.wv"), d_model, d_model, rng)?,
            wo: Linear::init(store, &format!("{name}.wo"), d_model, d_model, rng)?,
            heads,
            d_model,
        })
    }

    /// Input and output are `T x d_model`.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let t = g.shape(x)[0];
        let (h, dh) = (self.heads, self.d_model / self.heads);
        let q = self.wq.apply(g, store, x)?;
        let k = self.wk.apply(g, store, x)?;
        let v = self.wv.apply(g, store, x)?;

        // T x d -> heads x T x dh
        let split = |g: &mut Graph, n: NodeId| -> Result<NodeId> {
            let r = g.reshape(n, vec![t, h, dh])?;
            g.permute(r, &[1, 0, 2])
        };
        let qh = split(g, q)?;
        let kh = split(g, k)?;
        let vh = split(g, v)?;

        let kt = g.permute(kh, &[0, 2, 1])?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = g.causal_softmax(scaled)?;
        let ctx = g.matmul(attn, vh)?;

        let merged = g.permute(ctx, &[1, 0, 2])?;
        let flat = g.reshape(merged, vec![t, self.d_model])?;
        self.wo.apply(g, store, flat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::{fd_grads, max_rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attention_is_causal_per_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let attn = CausalSelfAttention::init(&mut store, "a", 8, 2, &mut rng).unwrap();

        let base: Vec<f64> = (0..4 * 8).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut changed = base.clone();
        for v in changed[3 * 8..].iter_mut() {
            *v += 5.0;
        }
        let out = |data: Vec<f64>| {
            let mut g = Graph::new();
            let x = g.input_from(vec![4, 8], data).unwrap();
            let y = attn.apply(&mut g, &store, x).unwrap();
            g.data(y).to_vec()
        };
        let a = out(base);
        let b = out(changed);
        for i in 0..3 * 8 {
            assert_eq!(a[i].to_bits(), b[i].to_bits(), "row {} leaked", i / 8);
        }
        assert!(a[3 * 8..] != b[3 * 8..]);
    }

    #[test]
    fn attention_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let attn = CausalSelfAttention::init(&mut store, "a", 4, 2, &mut rng).unwrap();
        let x_data: Vec<f64> = (0..3 * 4).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect();

        let build = |g: &mut Graph, data: &[Vec<f64>]| {
            let x = g.input_from(vec![3, 4], data[0].clone()).unwrap();
            let y = attn.apply(g, &store, x).unwrap();
            g.sum_all(y).unwrap()
        };
        let mut g = Graph::new();
        let x = g.input_from(vec![3, 4], x_data.clone()).unwrap();
        let y = attn.apply(&mut g, &store, x).unwrap();
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        let fd = fd_grads(build, &[x_data.clone()], 1e-6);
        assert!(max_rel_err(g.grad(x).unwrap(), &fd[0], 1e-7) < 1e-5);

        // Query-projection gradient against finite differences through the store.
        let wq = attn.wq.w;
        let analytic = {
            let mut s2 = store.clone();
            s2.zero_grads();
            g.write_param_grads(&mut s2);
            s2.tensor(wq).grad().unwrap().to_vec()
        };
        let mut numeric = vec![0.0; analytic.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut eval = |delta: f64| {
                let mut s2 = store.clone();
                s2.tensor_mut(wq).data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.input_from(vec![3, 4], x_data.clone()).unwrap();
                let y = attn.apply(&mut g, &s2, x).unwrap();
                let l = g.sum_all(y).unwrap();
                g.data(l)[0]
            };
            *slot = (eval(1e-6) - eval(-1e-6)) / 2e-6;
        }
        assert!(max_rel_err(&analytic, &numeric, 1e-7) < 1e-5);
    }
}
