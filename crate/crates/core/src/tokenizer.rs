//! Video-token production: self-weighted pooling over each frame's patch
//! features, a fixed four-layer causal transformer across frames, and
//! projection into the host width with two tokens per frame.
//!
//! The per-layer structure of the causal transformer is deliberately
//! non-standard: the residual wraps the attention only, and the MLP is
//! applied to the normalized sum without a second residual.

use rand::Rng;

use crate::error::Result;
use crate::nn::{CausalSelfAttention, LayerNorm, Linear, Mlp};
use crate::tensor::{xavier_init, zeros, Graph, NodeId, ParamId, ParamStore};

/// Depth of the causal transformer over pooled frames.
pub const CAUSAL_LAYERS: usize = 4;

#[derive(Debug, Clone, Copy)]
pub struct TokenizerConfig {
    pub d_v: usize,
    pub d_m: usize,
    pub ct_heads: usize,
}

#[derive(Debug, Clone)]
struct CtLayer {
    ln1: LayerNorm,
    attn: CausalSelfAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

/// All parameters of the video-token path.
#[derive(Debug, Clone)]
pub struct TokenizerParams {
    pool_w: ParamId,
    pool_b: ParamId,
    ct: Vec<CtLayer>,
    temporal_proj: Linear,
    global_proj: Mlp,
    pub cfg: TokenizerConfig,
}

impl TokenizerParams {
    pub fn init(store: &mut ParamStore, cfg: TokenizerConfig, rng: &mut impl Rng) -> Result<Self> {
        let d_v = cfg.d_v;
        let pool_w = store.add("tokenizer.pool.w", xavier_init(rng, d_v, 1))?;
        let pool_b = store.add("tokenizer.pool.b", zeros(vec![1]))?;
        let mut ct = Vec::with_capacity(CAUSAL_LAYERS);
        for i in 0..CAUSAL_LAYERS {
            let base = format!("tokenizer.ct.{i}");
            ct.push(CtLayer {
                ln1: LayerNorm::init(store, &format!("{base}.ln1"), d_v)?,
                attn: CausalSelfAttention::init(
                    store,
                    &format!("{base}.attn"),
                    d_v,
                    cfg.ct_heads,
                    rng,
                )?,
                ln2: LayerNorm::init(store, &format!("{base}.ln2"), d_v)?,
                mlp: Mlp::init(store, &format!("{base}.mlp"), d_v, 2 * d_v, d_v, rng)?,
            });
        }
        let temporal_proj = Linear::init(store, "tokenizer.temporal_proj", d_v, cfg.d_m, rng)?;
        let global_proj = Mlp::init(
            store,
            "tokenizer.global_proj",
            d_v,
            2 * cfg.d_m,
            cfg.d_m,
            rng,
        )?;
        Ok(TokenizerParams {
            pool_w,
            pool_b,
            ct,
            temporal_proj,
            global_proj,
            cfg,
        })
    }
}

/// Softmax pooling weights per frame: `N x P`, each row positive and summing
/// to one.
pub fn pool_weights(
    g: &mut Graph,
    store: &ParamStore,
    params: &TokenizerParams,
    fine: NodeId,
) -> Result<NodeId> {
    let (n, p) = (g.shape(fine)[0], g.shape(fine)[1]);
    let w = g.param(store, params.pool_w);
    let b = g.param(store, params.pool_b);
    let scores = g.matmul(fine, w)?; // N x P x 1
    let scores = g.reshape(scores, vec![n, p])?;
    let scores = g.add(scores, b)?;
    g.softmax(scores, 1, 1.0)
}

/// Pool every frame of an `N x P x d_v` tensor into `N x d_v`.
pub fn pool_frames(
    g: &mut Graph,
    store: &ParamStore,
    params: &TokenizerParams,
    fine: NodeId,
) -> Result<NodeId> {
    let (n, p, d_v) = (g.shape(fine)[0], g.shape(fine)[1], g.shape(fine)[2]);
    let weights = pool_weights(g, store, params, fine)?;
    let weights = g.reshape(weights, vec![n, 1, p])?;
    let pooled = g.matmul(weights, fine)?; // N x 1 x d_v
    g.reshape(pooled, vec![n, d_v])
}

/// Single-frame pooling: `P x d_v` patch features to one `d_v` vector.
pub fn self_weighted_pool(
    g: &mut Graph,
    store: &ParamStore,
    params: &TokenizerParams,
    fine_k: NodeId,
) -> Result<NodeId> {
    let (p, d_v) = (g.shape(fine_k)[0], g.shape(fine_k)[1]);
    let one_frame = g.reshape(fine_k, vec![1, p, d_v])?;
    let pooled = pool_frames(g, store, params, one_frame)?;
    g.reshape(pooled, vec![d_v])
}

/// Four causal layers over pooled frame vectors, residual around the
/// attention only:
///
/// ```text
/// h   = attn(ln1(x), causal) + x
/// h   = ln2(h)
/// out = mlp(h)
/// ```
pub fn causal_transform(
    g: &mut Graph,
    store: &ParamStore,
    params: &TokenizerParams,
    pooled: NodeId,
) -> Result<NodeId> {
    let mut h = pooled;
    for layer in &params.ct {
        let normed = layer.ln1.apply(g, store, h)?;
        let attended = layer.attn.apply(g, store, normed)?;
        let residual = g.add(attended, h)?;
        let renormed = layer.ln2.apply(g, store, residual)?;
        h = layer.mlp.apply(g, store, renormed)?;
    }
    Ok(h)
}

/// Full video-token sequence: `2N x d_m`, frame `k` occupying positions `2k`
/// (temporal token) and `2k + 1` (projected global token).
pub fn produce_video_tokens(
    g: &mut Graph,
    store: &ParamStore,
    params: &TokenizerParams,
    global: NodeId,
    fine: NodeId,
) -> Result<NodeId> {
    let n = g.shape(fine)[0];
    let d_m = params.cfg.d_m;
    let pooled = pool_frames(g, store, params, fine)?;
    let temporal = causal_transform(g, store, params, pooled)?;
    let temporal = params.temporal_proj.apply(g, store, temporal)?;
    let global_tok = params.global_proj.apply(g, store, global)?;

    // Interleave rows: [t_0, g_0, t_1, g_1, ...].
    let stacked = g.concat_rows(&[temporal, global_tok])?; // 2N x d_m, blocked
    let grouped = g.reshape(stacked, vec![2, n, d_m])?;
    let paired = g.permute(grouped, &[1, 0, 2])?; // N x 2 x d_m
    g.reshape(paired, vec![2 * n, d_m])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::generate_synthetic_video;
    use crate::test_util::max_rel_err;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_params(d_v: usize, d_m: usize, seed: u64) -> (ParamStore, TokenizerParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = TokenizerConfig {
            d_v,
            d_m,
            ct_heads: 2,
        };
        let params = TokenizerParams::init(&mut store, cfg, &mut rng).unwrap();
        (store, params)
    }

    #[test]
    fn identical_patches_pool_to_the_shared_vector() {
        let (store, params) = small_params(6, 8, 1);
        let v: Vec<f64> = (0..6).map(|i| i as f64 * 0.3 - 1.0).collect();
        let mut data = Vec::new();
        for _ in 0..5 {
            data.extend(&v);
        }
        let mut g = Graph::new();
        let fine = g.input_from(vec![5, 6], data).unwrap();
        let pooled = self_weighted_pool(&mut g, &store, &params, fine).unwrap();
        for (out, expect) in g.data(pooled).iter().zip(&v) {
            assert!((out - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_parameters_give_the_patch_mean() {
        let (mut store, params) = small_params(6, 8, 2);
        store.tensor_mut(params.pool_w).data_mut().fill(0.0);
        store.tensor_mut(params.pool_b).data_mut().fill(0.0);
        let fs = generate_synthetic_video(1, 3, 6, 5).unwrap();
        let mut g = Graph::new();
        let fine = g.input(&fs.fine);
        let fine2d = g.reshape(fine, vec![3, 6]).unwrap();
        let pooled = self_weighted_pool(&mut g, &store, &params, fine2d).unwrap();
        for j in 0..6 {
            let mean = (0..3).map(|p| fs.fine_slot(0, p)[j]).sum::<f64>() / 3.0;
            assert!((g.data(pooled)[j] - mean).abs() < 1e-14);
        }
    }

    #[test]
    fn saturated_scores_select_a_single_patch() {
        let (mut store, params) = small_params(4, 8, 3);
        // Score is the first coordinate scaled hard; patch 3 gets margin +20.
        store
            .tensor_mut(params.pool_w)
            .data_mut()
            .copy_from_slice(&[20.0, 0.0, 0.0, 0.0]);
        store.tensor_mut(params.pool_b).data_mut().fill(0.0);
        let mut data = vec![0.0; 5 * 4];
        for patch in 0..5 {
            data[patch * 4] = if patch == 3 { 1.0 } else { 0.0 };
            data[patch * 4 + 1] = patch as f64; // distinguishing payload
        }
        let mut g = Graph::new();
        let fine = g.input_from(vec![5, 4], data.clone()).unwrap();
        let pooled = self_weighted_pool(&mut g, &store, &params, fine).unwrap();
        for j in 0..4 {
            assert!(
                (g.data(pooled)[j] - data[3 * 4 + j]).abs() < 1e-6,
                "coordinate {j}"
            );
        }
    }

    #[test]
    fn pooling_weights_positive_and_normalized() {
        let (store, params) = small_params(6, 8, 4);
        let fs = generate_synthetic_video(4, 5, 6, 9).unwrap();
        let mut g = Graph::new();
        let fine = g.input(&fs.fine);
        let w = pool_weights(&mut g, &store, &params, fine).unwrap();
        for row in g.data(w).chunks_exact(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn causal_transform_single_frame_and_prefix_invariance() {
        let (store, params) = small_params(6, 8, 5);
        let run = |data: Vec<f64>, n: usize| {
            let mut g = Graph::new();
            let pooled = g.input_from(vec![n, 6], data).unwrap();
            let out = causal_transform(&mut g, &store, &params, pooled).unwrap();
            g.data(out).to_vec()
        };
        // N = 1 works and is a pure function of frame 0.
        let single = run(vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6], 1);
        assert_eq!(single.len(), 6);

        // Perturbing frame k leaves outputs before k bitwise unchanged.
        let base: Vec<f64> = (0..4 * 6).map(|i| (i as f64 * 0.19).cos()).collect();
        let out_a = run(base.clone(), 4);
        for k in 1..4 {
            let mut perturbed = base.clone();
            for v in perturbed[k * 6..(k + 1) * 6].iter_mut() {
                *v += 3.5;
            }
            let out_b = run(perturbed, 4);
            for i in 0..k * 6 {
                assert_eq!(out_a[i].to_bits(), out_b[i].to_bits(), "slot {i} leaked");
            }
            assert!(out_a[k * 6..] != out_b[k * 6..]);
        }
    }

    #[test]
    fn causal_transform_params_gradcheck() {
        let (mut store, params) = small_params(4, 6, 6);
        let fs = generate_synthetic_video(3, 2, 4, 10).unwrap();
        let eval = |store: &ParamStore| {
            let mut g = Graph::new();
            let pooled = g.input(&fs.global);
            let out = causal_transform(&mut g, store, &params, pooled).unwrap();
            let sq = g.mul(out, out).unwrap();
            let loss = g.sum_all(sq).unwrap();
            (g, loss)
        };
        let (mut g, loss) = eval(&store);
        g.backward(loss).unwrap();
        store.zero_grads();
        g.write_param_grads(&mut store);

        for id in store.ids().collect::<Vec<_>>() {
            let analytic = store.tensor(id).grad().unwrap().to_vec();
            let n = analytic.len();
            let mut numeric = vec![0.0; n];
            for (i, slot) in numeric.iter_mut().enumerate() {
                let orig = store.tensor(id).data()[i];
                store.tensor_mut(id).data_mut()[i] = orig + 1e-6;
                let (gp, lp) = eval(&store);
                let fp = gp.data(lp)[0];
                store.tensor_mut(id).data_mut()[i] = orig - 1e-6;
                let (gm, lm) = eval(&store);
                let fm = gm.data(lm)[0];
                store.tensor_mut(id).data_mut()[i] = orig;
                *slot = (fp - fm) / 2e-6;
            }
            let err = max_rel_err(&analytic, &numeric, 1e-6);
            assert!(err < 1e-5, "{}: rel err {err}", store.get(id).name);
        }
    }

    #[test]
    fn token_sequence_interleaves_two_tokens_per_frame() {
        let (store, params) = small_params(6, 8, 7);
        let fs = generate_synthetic_video(3, 4, 6, 11).unwrap();
        let mut g = Graph::new();
        let global = g.input(&fs.global);
        let fine = g.input(&fs.fine);
        let tokens = produce_video_tokens(&mut g, &store, &params, global, fine).unwrap();
        assert_eq!(g.shape(tokens), &[6, 8]);

        // Temporal rows are the projected causal-transformer outputs, global
        // rows the MLP-projected globals, interleaved per frame.
        let pooled = pool_frames(&mut g, &store, &params, fine).unwrap();
        let ct = causal_transform(&mut g, &store, &params, pooled).unwrap();
        let temporal = params.temporal_proj.apply(&mut g, &store, ct).unwrap();
        let global_tok = params.global_proj.apply(&mut g, &store, global).unwrap();
        for k in 0..3 {
            for j in 0..8 {
                assert_eq!(
                    g.data(tokens)[(2 * k) * 8 + j],
                    g.data(temporal)[k * 8 + j],
                    "temporal row {k}"
                );
                assert_eq!(
                    g.data(tokens)[(2 * k + 1) * 8 + j],
                    g.data(global_tok)[k * 8 + j],
                    "global row {k}"
                );
            }
        }
    }

    #[test]
    fn full_tokenizer_gradcheck() {
        let (mut store, params) = small_params(4, 6, 8);
        let fs = generate_synthetic_video(2, 3, 4, 12).unwrap();
        let eval = |store: &ParamStore| {
            let mut g = Graph::new();
            let global = g.input(&fs.global);
            let fine = g.input(&fs.fine);
            let tokens = produce_video_tokens(&mut g, store, &params, global, fine).unwrap();
            let sq = g.mul(tokens, tokens).unwrap();
            let loss = g.sum_all(sq).unwrap();
            (g, loss)
        };
        let (mut g, loss) = eval(&store);
        g.backward(loss).unwrap();
        store.zero_grads();
        g.write_param_grads(&mut store);
        for id in store.ids().collect::<Vec<_>>() {
            let analytic = store.tensor(id).grad().unwrap().to_vec();
            let mut numeric = vec![0.0; analytic.len()];
            for (i, slot) in numeric.iter_mut().enumerate() {
                let orig = store.tensor(id).data()[i];
                store.tensor_mut(id).data_mut()[i] = orig + 1e-6;
                let (gp, lp) = eval(&store);
                let fp = gp.data(lp)[0];
                store.tensor_mut(id).data_mut()[i] = orig - 1e-6;
                let (gm, lm) = eval(&store);
                let fm = gm.data(lm)[0];
                store.tensor_mut(id).data_mut()[i] = orig;
                *slot = (fp - fm) / 2e-6;
            }
            let err = max_rel_err(&analytic, &numeric, 1e-6);
            assert!(err < 1e-5, "{}: rel err {err}", store.get(id).name);
        }
    }
}
