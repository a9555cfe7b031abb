//! Minimal per-modality video-transformer expert. Each expert tubelet-embeds
//! its input, prepends a learned class token, and runs a stack of pre-norm
//! transformer blocks, recording the class and spatio-temporal tokens after
//! every block. Block index l runs shallow to deep over B blocks; m indexes
//! the M tokens within a block.

use rand::RngCore;

use crate::numerics::{Graph, Init, NodeId, ParamStore, Scalar, Tensor};
use crate::{invalid, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// Geometry and width of one modality expert.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityConfig {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// (t, h, w) tubelet sizes; each must divide the corresponding extent.
    pub tubelet: (usize, usize, usize),
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
}

impl ModalityConfig {
    pub fn validate(&self) -> Result<()> {
        let (t, h, w) = self.tubelet;
        if t == 0 || h == 0 || w == 0 {
            return Err(invalid("tubelet sizes must be positive"));
        }
        if self.frames % t != 0 || self.height % h != 0 || self.width % w != 0 {
            return Err(invalid(format!(
                "tubelet {:?} must divide (T,H,W) = ({},{},{})",
                self.tubelet, self.frames, self.height, self.width
            )));
        }
        if self.num_blocks < 2 {
            return Err(invalid("need at least 2 blocks (one shallow block below the deepest)"));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(invalid(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.channels == 0 {
            return Err(invalid("channels must be positive"));
        }
        Ok(())
    }

    /// Spatio-temporal token count M = (T/t)(H/h)(W/w).
    pub fn num_tokens(&self) -> usize {
        let (t, h, w) = self.tubelet;
        (self.frames / t) * (self.height / h) * (self.width / w)
    }

    /// Flattened size of one tubelet: C * t * h * w.
    pub fn tubelet_dim(&self) -> usize {
        let (t, h, w) = self.tubelet;
        self.channels * t * h * w
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.embed_dim
    }
}

/// Class and spatio-temporal token nodes recorded after one block.
#[derive(Clone, Copy, Debug)]
pub struct BlockTokens {
    /// Rank-1, length d.
    pub cls: NodeId,
    /// M x d.
    pub st: NodeId,
}

/// Per-block token record of one expert, ordered shallow to deep. The final
/// element's class token is the expert output fed to the gate.
#[derive(Clone, Debug)]
pub struct ExpertTrace {
    pub blocks: Vec<BlockTokens>,
    pub modality: usize,
}

impl ExpertTrace {
    pub fn final_cls(&self) -> NodeId {
        self.blocks.last().expect("trace is non-empty").cls
    }
}

/// Register all parameters of one expert under `prefix`. Attention and MLP
/// output projections start at zero so every block is an identity map at
/// init.
pub fn register_expert_params<F: Scalar>(
    store: &mut ParamStore<F>,
    prefix: &str,
    cfg: &ModalityConfig,
    rng: &mut impl RngCore,
) {
    let d = cfg.embed_dim;
    let m = cfg.num_tokens();
    let tn = Init::TruncNormal(INIT_STD);
    store.add(&format!("{prefix}.embed.w"), vec![cfg.tubelet_dim(), d], tn, rng);
    store.add(&format!("{prefix}.embed.b"), vec![d], Init::Zeros, rng);
    store.add(&format!("{prefix}.pos"), vec![m, d], tn, rng);
    store.add(&format!("{prefix}.cls"), vec![d], tn, rng);
    for l in 0..cfg.num_blocks {
        let b = format!("{prefix}.blk{l}");
        store.add(&format!("{b}.ln1.g"), vec![d], Init::Ones, rng);
        store.add(&format!("{b}.ln1.b"), vec![d], Init::Zeros, rng);
        for nm in ["wq", "wk", "wv"] {
            store.add(&format!("{b}.attn.{nm}"), vec![d, d], tn, rng);
        }
        for nm in ["bq", "bk", "bv"] {
            store.add(&format!("{b}.attn.{nm}"), vec![d], Init::Zeros, rng);
        }
        store.add(&format!("{b}.attn.wo"), vec![d, d], Init::Zeros, rng);
        store.add(&format!("{b}.attn.bo"), vec![d], Init::Zeros, rng);
        store.add(&format!("{b}.ln2.g"), vec![d], Init::Ones, rng);
        store.add(&format!("{b}.ln2.b"), vec![d], Init::Zeros, rng);
        store.add(&format!("{b}.mlp.w1"), vec![d, cfg.mlp_hidden()], tn, rng);
        store.add(&format!("{b}.mlp.b1"), vec![cfg.mlp_hidden()], Init::Zeros, rng);
        store.add(&format!("{b}.mlp.w2"), vec![cfg.mlp_hidden(), d], Init::Zeros, rng);
        store.add(&format!("{b}.mlp.b2"), vec![d], Init::Zeros, rng);
    }
    // final layer norm of the pre-LN transformer; without it the residual
    // stream (identity at init) leaves all tokens at embedding scale
    store.add(&format!("{prefix}.lnf.g"), vec![d], Init::Ones, rng);
    store.add(&format!("{prefix}.lnf.b"), vec![d], Init::Zeros, rng);
}

/// Create a graph leaf for a named parameter.
pub fn param_leaf<F: Scalar>(
    graph: &mut Graph<F>,
    store: &ParamStore<F>,
    name: &str,
) -> Result<NodeId> {
    let idx = store.entry_index(name)?;
    Ok(graph.leaf(store.tensor(idx), Some(store.entry(idx).offset)))
}

/// Slice the raw modality tensor into non-overlapping tubelets and return the
/// M x tubelet_dim matrix (constant; inputs carry no gradient). Tubelets are
/// ordered row-major over (T/t, H/h, W/w); each is flattened (c, dt, dh, dw).
pub fn tubelets<F: Scalar>(x: &Tensor<F>, cfg: &ModalityConfig) -> Result<Tensor<F>> {
    cfg.validate()?;
    let expect = [cfg.channels, cfg.frames, cfg.height, cfg.width];
    if x.shape() != expect {
        return Err(invalid(format!(
            "input shape {:?} does not match config {:?}",
            x.shape(),
            expect
        )));
    }
    let (t, h, w) = cfg.tubelet;
    let (nt, nh, nw) = (cfg.frames / t, cfg.height / h, cfg.width / w);
    let (ch, fr, hh, ww) = (cfg.channels, cfg.frames, cfg.height, cfg.width);
    let _ = fr;
    let mut data = Vec::with_capacity(cfg.num_tokens() * cfg.tubelet_dim());
    for it in 0..nt {
        for ih in 0..nh {
            for iw in 0..nw {
                for c in 0..ch {
                    for dt in 0..t {
                        for dh in 0..h {
                            for dw in 0..w {
                                let fi = it * t + dt;
                                let hi = ih * h + dh;
                                let wi = iw * w + dw;
                                data.push(x.data()[((c * cfg.frames + fi) * hh + hi) * ww + wi]);
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::matrix(cfg.num_tokens(), cfg.tubelet_dim(), data)
}

/// Linear tubelet projection plus learned positional embedding: M x d tokens.
pub fn tubelet_embed<F: Scalar>(
    graph: &mut Graph<F>,
    store: &ParamStore<F>,
    prefix: &str,
    x: &Tensor<F>,
    cfg: &ModalityConfig,
) -> Result<NodeId> {
    let tubs = graph.constant(tubelets(x, cfg)?);
    let w = param_leaf(graph, store, &format!("{prefix}.embed.w"))?;
    let b = param_leaf(graph, store, &format!("{prefix}.embed.b"))?;
    let proj = graph.linear_rows(tubs, w, Some(b))?;
    let pos = param_leaf(graph, store, &format!("{prefix}.pos"))?;
    graph.add(proj, pos)
}

/// One pre-norm transformer block: MHSA then MLP, both residual. Row 0 is the
/// class token and attends to all tokens like any other row.
pub fn attention_block<F: Scalar>(
    graph: &mut Graph<F>,
    store: &ParamStore<F>,
    block_prefix: &str,
    tokens: NodeId,
    cfg: &ModalityConfig,
) -> Result<NodeId> {
    let d = cfg.embed_dim;
    let heads = cfg.num_heads;
    let head_dim = d / heads;
    let eps = F::from_f64(LAYER_NORM_EPS);
    let p = |g: &mut Graph<F>, nm: &str| param_leaf(g, store, &format!("{block_prefix}.{nm}"));

    // attention
    let g1 = p(graph, "ln1.g")?;
    let b1 = p(graph, "ln1.b")?;
    let xn = graph.layer_norm(tokens, g1, b1, eps)?;
    let wq = p(graph, "attn.wq")?;
    let bq = p(graph, "attn.bq")?;
    let q = graph.linear_rows(xn, wq, Some(bq))?;
    let wk = p(graph, "attn.wk")?;
    let bk = p(graph, "attn.bk")?;
    let k = graph.linear_rows(xn, wk, Some(bk))?;
    let wv = p(graph, "attn.wv")?;
    let bv = p(graph, "attn.bv")?;
    let v = graph.linear_rows(xn, wv, Some(bv))?;
    let scale = F::from_f64(1.0 / (head_dim as f64).sqrt());
    let mut head_outs = Vec::with_capacity(heads);
    for hh in 0..heads {
        let (s, e) = (hh * head_dim, (hh + 1) * head_dim);
        let qh = graph.slice_cols(q, s, e)?;
        let kh = graph.slice_cols(k, s, e)?;
        let vh = graph.slice_cols(v, s, e)?;
        let scores = graph.matmul(qh, kh, false, true)?;
        let attn = graph.softmax_rows(scores, scale)?;
        head_outs.push(graph.matmul(attn, vh, false, false)?);
    }
    let merged = graph.concat_cols(&head_outs)?;
    let wo = p(graph, "attn.wo")?;
    let bo = p(graph, "attn.bo")?;
    let o = graph.linear_rows(merged, wo, Some(bo))?;
    let x = graph.add(tokens, o)?;

    // mlp
    let g2 = p(graph, "ln2.g")?;
    let b2 = p(graph, "ln2.b")?;
    let xn = graph.layer_norm(x, g2, b2, eps)?;
    let w1 = p(graph, "mlp.w1")?;
    let bm1 = p(graph, "mlp.b1")?;
    let hdn = graph.linear_rows(xn, w1, Some(bm1))?;
    let hdn = graph.gelu(hdn);
    let w2 = p(graph, "mlp.w2")?;
    let bm2 = p(graph, "mlp.b2")?;
    let out = graph.linear_rows(hdn, w2, Some(bm2))?;
    graph.add(x, out)
}

/// Full expert forward pass: embed, prepend class token, run all blocks and
/// record the tokens after each. Deterministic given params and input.
pub fn expert_forward<F: Scalar>(
    graph: &mut Graph<F>,
    store: &ParamStore<F>,
    prefix: &str,
    x: &Tensor<F>,
    cfg: &ModalityConfig,
    modality: usize,
) -> Result<ExpertTrace> {
    let m = cfg.num_tokens();
    let d = cfg.embed_dim;
    let tokens = tubelet_embed(graph, store, prefix, x, cfg)?;
    let cls = param_leaf(graph, store, &format!("{prefix}.cls"))?;
    let cls_row = graph.reshape(cls, vec![1, d])?;
    let mut seq = graph.concat_rows(&[cls_row, tokens])?;
    let mut blocks = Vec::with_capacity(cfg.num_blocks);
    for l in 0..cfg.num_blocks {
        seq = attention_block(graph, store, &format!("{prefix}.blk{l}"), seq, cfg)?;
        if l + 1 == cfg.num_blocks {
            let g = param_leaf(graph, store, &format!("{prefix}.lnf.g"))?;
            let b = param_leaf(graph, store, &format!("{prefix}.lnf.b"))?;
            seq = graph.layer_norm(seq, g, b, F::from_f64(LAYER_NORM_EPS))?;
        }
        let cls_out = graph.slice_rows(seq, 0, 1)?;
        let cls_out = graph.reshape(cls_out, vec![d])?;
        let st = graph.slice_rows(seq, 1, m + 1)?;
        blocks.push(BlockTokens { cls: cls_out, st });
    }
    Ok(ExpertTrace { blocks, modality })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check_gradients;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg() -> ModalityConfig {
        ModalityConfig {
            channels: 2,
            frames: 4,
            height: 8,
            width: 8,
            tubelet: (2, 4, 4),
            embed_dim: 16,
            num_blocks: 3,
            num_heads: 4,
        }
    }

    fn random_input(cfg: &ModalityConfig, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.channels * cfg.frames * cfg.height * cfg.width;
        Tensor::new(
            vec![cfg.channels, cfg.frames, cfg.height, cfg.width],
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn full_scale_token_count() {
        let cfg = ModalityConfig {
            channels: 3,
            frames: 8,
            height: 224,
            width: 224,
            tubelet: (1, 16, 16),
            embed_dim: 768,
            num_blocks: 12,
            num_heads: 12,
        };
        assert_eq!(cfg.num_tokens(), 1568);
    }

    #[test]
    fn toy_token_count_and_full_volume() {
        assert_eq!(toy_cfg().num_tokens(), 8);
        let mut cfg = toy_cfg();
        cfg.tubelet = (4, 8, 8);
        assert_eq!(cfg.num_tokens(), 1);
    }

    #[test]
    fn config_validation() {
        let mut cfg = toy_cfg();
        cfg.tubelet = (3, 4, 4); // 3 does not divide 4
        assert!(cfg.validate().is_err());
        let mut cfg = toy_cfg();
        cfg.num_blocks = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = toy_cfg();
        cfg.num_heads = 5;
        assert!(cfg.validate().is_err());
        assert!(toy_cfg().validate().is_ok());
    }

    #[test]
    fn tubelets_rejects_dim_mismatch() {
        let cfg = toy_cfg();
        let wrong = Tensor::<f64>::zeros(vec![1, 4, 8, 8]);
        assert!(tubelets(&wrong, &cfg).is_err());
    }

    #[test]
    fn forward_is_deterministic_with_expected_shapes() {
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store: ParamStore<f64> = ParamStore::new();
        register_expert_params(&mut store, "e", &cfg, &mut rng);
        let x = random_input(&cfg, 2);

        let mut g1 = Graph::new(store.len());
        let t1 = expert_forward(&mut g1, &store, "e", &x, &cfg, 0).unwrap();
        let mut g2 = Graph::new(store.len());
        let t2 = expert_forward(&mut g2, &store, "e", &x, &cfg, 0).unwrap();

        assert_eq!(t1.blocks.len(), cfg.num_blocks);
        for (a, b) in t1.blocks.iter().zip(t2.blocks.iter()) {
            assert_eq!(g1.value(a.cls).data(), g2.value(b.cls).data());
            assert_eq!(g1.value(a.st).data(), g2.value(b.st).data());
        }
        assert_eq!(g1.value(t1.final_cls()).len(), cfg.embed_dim);
        assert_eq!(
            g1.value(t1.blocks[0].st).shape(),
            &[cfg.num_tokens(), cfg.embed_dim]
        );
    }

    #[test]
    fn zero_output_projections_make_blocks_identity() {
        // at init wo and mlp.w2 are zero, so every block before the final
        // layer norm is the identity and records the same tokens
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store: ParamStore<f64> = ParamStore::new();
        register_expert_params(&mut store, "e", &cfg, &mut rng);
        let x = random_input(&cfg, 4);
        let mut g = Graph::new(store.len());
        let trace = expert_forward(&mut g, &store, "e", &x, &cfg, 0).unwrap();
        let first = trace.blocks[0];
        let (pre_lnf, last) = trace.blocks.split_at(cfg.num_blocks - 1);
        for b in &pre_lnf[1..] {
            assert_eq!(g.value(b.cls).data(), g.value(first.cls).data());
            assert_eq!(g.value(b.st).data(), g.value(first.st).data());
        }
        // the first block's class token is still the learned init value
        assert_eq!(
            g.value(first.cls).data(),
            store.tensor_by_name("e.cls").unwrap().data()
        );
        // the deepest block is normalized, so its tokens differ but match
        // the layer norm of the identity stream applied by hand
        let ln = |v: &[f64]| {
            let d = v.len() as f64;
            let mean = v.iter().sum::<f64>() / d;
            let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
            let denom = (var + LAYER_NORM_EPS).sqrt();
            v.iter().map(|x| (x - mean) / denom).collect::<Vec<_>>()
        };
        let got = g.value(last[0].cls).data().to_vec();
        let want = ln(g.value(first.cls).data());
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_is_permutation_equivariant_over_st_tokens() {
        // run a block on a 3-token sequence (1 cls + 2 st) with random
        // weights, swap the two st rows, and confirm outputs swap with them
        let cfg = ModalityConfig {
            channels: 1,
            frames: 1,
            height: 2,
            width: 1,
            tubelet: (1, 1, 1),
            embed_dim: 8,
            num_blocks: 2,
            num_heads: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store: ParamStore<f64> = ParamStore::new();
        register_expert_params(&mut store, "e", &cfg, &mut rng);
        // give the output projections non-zero weights so attention matters
        for nm in ["e.blk0.attn.wo", "e.blk0.mlp.w2"] {
            let idx = store.entry_index(nm).unwrap();
            let n = store.entry(idx).len();
            let vals: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect();
            store.set(idx, &vals);
        }
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let run = |order: [usize; 2]| {
            let mut g = Graph::new(store.len());
            let data: Vec<f64> = rows[0]
                .iter()
                .chain(rows[order[0]].iter())
                .chain(rows[order[1]].iter())
                .copied()
                .collect();
            let toks = g.constant(Tensor::matrix(3, 8, data).unwrap());
            let out = attention_block(&mut g, &store, "e.blk0", toks, &cfg).unwrap();
            g.value(out).data().to_vec()
        };
        let a = run([1, 2]);
        let b = run([2, 1]);
        assert_eq!(&a[0..8], &b[0..8]); // cls row unchanged
        assert_eq!(&a[8..16], &b[16..24]);
        assert_eq!(&a[16..24], &b[8..16]);
    }

    #[test]
    fn expert_forward_passes_gradcheck_on_toy_config() {
        let mut cfg = toy_cfg();
        cfg.num_blocks = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store: ParamStore<f64> = ParamStore::new();
        register_expert_params(&mut store, "e", &cfg, &mut rng);
        // randomize the zero-initialized projections so the test exercises
        // the full block, not the residual shortcut
        for e in 0..store.len() {
            if store.data()[e] == 0.0 {
                store.data_mut()[e] = rng.gen_range(-0.05..0.05);
            }
        }
        let x = random_input(&cfg, 7);
        let params = store.data().to_vec();
        let entries: Vec<_> = store.entries().to_vec();
        let mut f = |p: &[f64]| {
            let mut s: ParamStore<f64> = ParamStore::new();
            let mut dummy = ChaCha8Rng::seed_from_u64(0);
            for e in &entries {
                s.add(&e.name, e.shape.clone(), Init::Zeros, &mut dummy);
            }
            s.data_mut().copy_from_slice(p);
            let mut g = Graph::new(s.len());
            let trace = expert_forward(&mut g, &s, "e", &x, &cfg, 0).unwrap();
            let cls = trace.final_cls();
            let loss = g.cross_entropy(cls, 3).unwrap();
            let v = g.value(loss).item();
            let grads = g.backward(loss).unwrap();
            (v, grads)
        };
        let report = check_gradients(&mut f, &params, 1e-4, 1e-4);
        assert!(
            report.passed(),
            "max rel {} at {:?}",
            report.max_rel_diff,
            report.worst_index
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn token_count_formula_holds(
            t in 1usize..4, h in 1usize..4, w in 1usize..4,
            nt in 1usize..4, nh in 1usize..4, nw in 1usize..4,
        ) {
            let cfg = ModalityConfig {
                channels: 1,
                frames: t * nt,
                height: h * nh,
                width: w * nw,
                tubelet: (t, h, w),
                embed_dim: 8,
                num_blocks: 2,
                num_heads: 2,
            };
            prop_assert!(cfg.validate().is_ok());
            prop_assert_eq!(cfg.num_tokens(), nt * nh * nw);
        }
    }
}
