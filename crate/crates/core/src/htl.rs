//! Holistic token learning objective: intra-expert deep-to-shallow KL
//! distillation over class- and spatio-temporal-token distributions with
//! learnable block weights, inter-expert MSE alignment of final class tokens,
//! and the weighted total loss.

use rand::RngCore;

use crate::backbone::{param_leaf, BlockTokens, ExpertTrace};
use crate::numerics::{Graph, Init, NodeId, ParamStore, Scalar};
use crate::{invalid, Result};

/// Name of the learnable block-weight vector in the parameter store
/// (length B-1, one weight per shallow block).
pub const BLOCK_WEIGHTS_PARAM: &str = "htl.w";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HtlConfig {
    /// Weight on the intra-expert distillation term.
    pub alpha: f64,
    /// Weight on the inter-expert alignment term.
    pub beta: f64,
    /// Softmax temperature for the token distributions.
    pub temperature: f64,
    /// Probability clamp inside KL.
    pub eps: f64,
    /// When true, the deepest block's distributions act as a fixed target
    /// within each step (no gradient flows through the teacher path).
    pub detach_teacher: bool,
}

impl Default for HtlConfig {
    fn default() -> Self {
        HtlConfig {
            alpha: 0.01,
            beta: 1.0,
            temperature: 1.0,
            eps: 1e-8,
            detach_teacher: true,
        }
    }
}

/// Scalar components of one evaluation of the objective.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossBreakdown {
    pub cls: f64,
    pub intra: f64,
    pub inter: f64,
    pub total: f64,
}

/// Inverse of softplus: the raw value whose effective weight is `y`.
pub fn softplus_inv(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

/// Raw block weights are unconstrained reals; the loss applies softplus, so
/// effective weights stay positive (a signed weight would let the optimizer
/// reduce the loss without bound by reversing the distillation direction and
/// driving the KL terms up). Initialized so every effective weight starts
/// at 1.
pub fn register_block_weights<F: Scalar>(
    store: &mut ParamStore<F>,
    num_blocks: usize,
    rng: &mut impl RngCore,
) {
    assert!(num_blocks >= 2, "block weights need at least 2 blocks");
    store.add(
        BLOCK_WEIGHTS_PARAM,
        vec![num_blocks - 1],
        Init::Const(softplus_inv(1.0)),
        rng,
    );
}

/// P = softmax over the class token's d entries; Q = softmax over the
/// flattened M*d spatio-temporal entries (one joint distribution, not a
/// per-token average).
pub fn token_distributions<F: Scalar>(
    graph: &mut Graph<F>,
    block: &BlockTokens,
    temperature: F,
    detach: bool,
) -> Result<(NodeId, NodeId)> {
    let (cls, st) = if detach {
        (graph.detach(block.cls), graph.detach(block.st))
    } else {
        (block.cls, block.st)
    };
    let p = graph.softmax_vec(cls, temperature)?;
    let st_flat = graph.flatten(st)?;
    let q = graph.softmax_vec(st_flat, temperature)?;
    Ok((p, q))
}

/// Deep-to-shallow self-guidance, averaged over experts and shallow blocks:
/// [ sum_n sum_{l<B} softplus(w_l) (KL(P_B||P_l) + KL(Q_B||Q_l)) ] / (N (B-1)).
pub fn intra_loss<F: Scalar>(
    graph: &mut Graph<F>,
    traces: &[ExpertTrace],
    block_weights: NodeId,
    cfg: &HtlConfig,
) -> Result<NodeId> {
    if traces.is_empty() {
        return Err(invalid("intra_loss needs at least one expert trace"));
    }
    let b = traces[0].blocks.len();
    if b < 2 {
        return Err(invalid("intra_loss needs at least 2 blocks"));
    }
    if traces.iter().any(|t| t.blocks.len() != b) {
        return Err(invalid("intra_loss: experts disagree on block count"));
    }
    if graph.value(block_weights).len() != b - 1 {
        return Err(invalid(format!(
            "block weights must have length {} (got {})",
            b - 1,
            graph.value(block_weights).len()
        )));
    }
    let temp = F::from_f64(cfg.temperature);
    let eps = F::from_f64(cfg.eps);
    let effective_w = graph.softplus(block_weights);
    let mut terms = Vec::with_capacity(traces.len() * (b - 1));
    for trace in traces {
        let teacher = &trace.blocks[b - 1];
        let (p_deep, q_deep) = token_distributions(graph, teacher, temp, cfg.detach_teacher)?;
        for l in 0..b - 1 {
            let (p_l, q_l) = token_distributions(graph, &trace.blocks[l], temp, false)?;
            let kl_p = graph.kl_div(p_deep, p_l, eps)?;
            let kl_q = graph.kl_div(q_deep, q_l, eps)?;
            let pair = graph.add(kl_p, kl_q)?;
            let w_l = graph.index(effective_w, l)?;
            terms.push(graph.mul_scalar_node(pair, w_l)?);
        }
    }
    let norm = F::from_f64(1.0 / (traces.len() as f64 * (b - 1) as f64));
    let coeffs = vec![norm; terms.len()];
    graph.lin_comb(&terms, &coeffs)
}

/// Symmetric inter-expert alignment:
/// (1/(N(N-1))) sum_n sum_{k != n} ||t_n - t_k||^2_2.
/// Both operands receive gradient; there is no teacher. Pair terms are summed
/// in sorted value order, which makes the result exactly invariant under
/// permutations of the expert list.
pub fn inter_loss<F: Scalar>(graph: &mut Graph<F>, final_cls: &[NodeId]) -> Result<NodeId> {
    let n = final_cls.len();
    if n < 2 {
        return Err(invalid("inter_loss needs at least 2 experts"));
    }
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            pairs.push(graph.sum_sq_diff(final_cls[i], final_cls[j])?);
        }
    }
    pairs.sort_by(|&a, &b| {
        graph
            .value(a)
            .item()
            .partial_cmp(&graph.value(b).item())
            .expect("pair distances are finite")
    });
    // each unordered pair appears twice in the double sum
    let coeff = F::from_f64(2.0 / (n as f64 * (n - 1) as f64));
    let coeffs = vec![coeff; pairs.len()];
    graph.lin_comb(&pairs, &coeffs)
}

/// L = L_cls + alpha L_intra + beta L_inter. Terms whose weight is zero are
/// skipped entirely (their breakdown entry reads 0).
pub fn total_loss<F: Scalar>(
    graph: &mut Graph<F>,
    logits: NodeId,
    label: usize,
    traces: &[ExpertTrace],
    store: &ParamStore<F>,
    cfg: &HtlConfig,
) -> Result<(NodeId, LossBreakdown)> {
    let cls = graph.cross_entropy(logits, label)?;
    let intra = if cfg.alpha != 0.0 {
        let w = param_leaf(graph, store, BLOCK_WEIGHTS_PARAM)?;
        Some(intra_loss(graph, traces, w, cfg)?)
    } else {
        None
    };
    let inter = if cfg.beta != 0.0 {
        let final_cls: Vec<NodeId> = traces.iter().map(|t| t.final_cls()).collect();
        Some(inter_loss(graph, &final_cls)?)
    } else {
        None
    };

    let mut parts = vec![cls];
    let mut coeffs = vec![F::one()];
    if let Some(i) = intra {
        parts.push(i);
        coeffs.push(F::from_f64(cfg.alpha));
    }
    if let Some(i) = inter {
        parts.push(i);
        coeffs.push(F::from_f64(cfg.beta));
    }
    let total = graph.lin_comb(&parts, &coeffs)?;

    let breakdown = LossBreakdown {
        cls: graph.value(cls).item().to_f64(),
        intra: intra.map(|i| graph.value(i).item().to_f64()).unwrap_or(0.0),
        inter: inter.map(|i| graph.value(i).item().to_f64()).unwrap_or(0.0),
        total: graph.value(total).item().to_f64(),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Build a trace whose block tokens are given explicitly.
    fn trace_from(
        g: &mut Graph<f64>,
        blocks: &[(Vec<f64>, Vec<f64>)],
        st_cols: usize,
        modality: usize,
    ) -> ExpertTrace {
        let blocks = blocks
            .iter()
            .map(|(cls, st)| BlockTokens {
                cls: g.constant(Tensor::vector(cls.clone())),
                st: g
                    .constant(Tensor::matrix(st.len() / st_cols, st_cols, st.clone()).unwrap()),
            })
            .collect();
        ExpertTrace { blocks, modality }
    }

    /// Raw weights whose softplus-effective value is 1.
    fn unit_weights(g: &mut Graph<f64>, len: usize) -> NodeId {
        g.constant(Tensor::vector(vec![softplus_inv(1.0); len]))
    }

    #[test]
    fn intra_is_zero_for_identical_blocks() {
        let mut g: Graph<f64> = Graph::new(0);
        let blk = (vec![0.3, -0.7], vec![1.0, 2.0, 3.0, 4.0]);
        let t0 = trace_from(&mut g, &[blk.clone(), blk.clone(), blk.clone()], 2, 0);
        let t1 = trace_from(&mut g, &[blk.clone(), blk.clone(), blk.clone()], 2, 1);
        let w = g.constant(Tensor::vector(vec![3.0, -1.5])); // arbitrary w
        let loss = intra_loss(&mut g, &[t0, t1], w, &HtlConfig::default()).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
    }

    #[test]
    fn intra_closed_form_single_expert_two_blocks() {
        let mut g: Graph<f64> = Graph::new(0);
        let st = vec![0.5, 0.5]; // identical st tokens in both blocks
        let t = trace_from(
            &mut g,
            &[(vec![0.0, 0.0], st.clone()), (vec![2.0f64.ln(), 0.0], st)],
            2,
            0,
        );
        let w = unit_weights(&mut g, 1);
        let loss = intra_loss(&mut g, &[t], w, &HtlConfig::default()).unwrap();
        // KL([2/3,1/3] || [1/2,1/2]) = 0.05663..., st contributes 0
        assert_abs_diff_eq!(g.value(loss).item(), 0.05663, epsilon = 1e-5);
    }

    #[test]
    fn intra_is_linear_in_block_weights() {
        let mut g: Graph<f64> = Graph::new(0);
        let mk = |g: &mut Graph<f64>| {
            trace_from(
                g,
                &[
                    (vec![0.1, -0.4], vec![0.2, 0.9, -0.3, 0.1]),
                    (vec![0.8, 0.2], vec![-0.5, 0.4, 0.6, 0.0]),
                    (vec![-0.3, 0.7], vec![0.3, -0.2, 0.8, 0.5]),
                ],
                2,
                0,
            )
        };
        // raw values chosen so the second effective weight vector is exactly
        // twice the first: intra is linear in softplus(w)
        let t = mk(&mut g);
        let w1 = g.constant(Tensor::vector(vec![softplus_inv(0.7), softplus_inv(1.3)]));
        let l1 = intra_loss(&mut g, &[t], w1, &HtlConfig::default()).unwrap();
        let t = mk(&mut g);
        let w2 = g.constant(Tensor::vector(vec![softplus_inv(1.4), softplus_inv(2.6)]));
        let l2 = intra_loss(&mut g, &[t], w2, &HtlConfig::default()).unwrap();
        assert_abs_diff_eq!(
            g.value(l2).item(),
            2.0 * g.value(l1).item(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn intra_rejects_mismatched_block_counts() {
        let mut g: Graph<f64> = Graph::new(0);
        let blk = (vec![0.0, 0.0], vec![0.0, 0.0]);
        let t0 = trace_from(&mut g, &[blk.clone(), blk.clone()], 2, 0);
        let t1 = trace_from(&mut g, &[blk.clone(), blk.clone(), blk.clone()], 2, 1);
        let w = unit_weights(&mut g, 1);
        assert!(intra_loss(&mut g, &[t0, t1], w, &HtlConfig::default()).is_err());
    }

    #[test]
    fn detached_teacher_gets_no_gradient() {
        // the teacher class token depends on parameter x; with detachment the
        // loss gradient w.r.t. x must vanish, without it it must not
        for (detach, expect_zero) in [(true, true), (false, false)] {
            let mut g: Graph<f64> = Graph::new(2);
            let x = g.leaf(Tensor::vector(vec![0.9, -0.2]), Some(0));
            let shallow_cls = g.constant(Tensor::vector(vec![0.1, 0.6]));
            let st = g.constant(Tensor::matrix(1, 2, vec![0.4, -0.4]).unwrap());
            let deep = BlockTokens { cls: x, st };
            let shallow = BlockTokens { cls: shallow_cls, st };
            let trace = ExpertTrace {
                blocks: vec![shallow, deep],
                modality: 0,
            };
            let w = unit_weights(&mut g, 1);
            let cfg = HtlConfig {
                detach_teacher: detach,
                ..HtlConfig::default()
            };
            let loss = intra_loss(&mut g, &[trace], w, &cfg).unwrap();
            let grads = g.backward(loss).unwrap();
            if expect_zero {
                assert_eq!(&grads[0..2], &[0.0, 0.0]);
            } else {
                assert!(grads[0..2].iter().any(|&v| v != 0.0));
            }
        }
    }

    #[test]
    fn inter_zero_when_identical_and_closed_form() {
        let mut g: Graph<f64> = Graph::new(0);
        let a = g.constant(Tensor::vector(vec![0.2, 0.8]));
        let b = g.constant(Tensor::vector(vec![0.2, 0.8]));
        let l = inter_loss(&mut g, &[a, b]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let a = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let b = g.constant(Tensor::vector(vec![0.0, 1.0]));
        let l = inter_loss(&mut g, &[a, b]).unwrap();
        assert_eq!(g.value(l).item(), 2.0);
    }

    #[test]
    fn inter_rejects_single_expert() {
        let mut g: Graph<f64> = Graph::new(0);
        let a = g.constant(Tensor::vector(vec![1.0]));
        assert!(inter_loss(&mut g, &[a]).is_err());
    }

    #[test]
    fn inter_is_exactly_permutation_invariant() {
        let mut g: Graph<f64> = Graph::new(0);
        let toks: Vec<NodeId> = [
            vec![0.3, -1.1, 0.7],
            vec![0.9, 0.2, -0.4],
            vec![-0.6, 0.5, 1.3],
        ]
        .iter()
        .map(|v| g.constant(Tensor::vector(v.clone())))
        .collect();
        let perms: [[usize; 3]; 6] = [
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        let base = {
            let l = inter_loss(&mut g, &toks).unwrap();
            g.value(l).item()
        };
        for p in perms {
            let ordered: Vec<NodeId> = p.iter().map(|&i| toks[i]).collect();
            let l = inter_loss(&mut g, &ordered).unwrap();
            assert_eq!(g.value(l).item(), base, "permutation {p:?}");
        }
    }

    #[test]
    fn total_loss_weighted_composition() {
        // cls = ln 2, intra = 0.05663..., inter = 2, alpha = 0.01, beta = 1
        let mut g: Graph<f64> = Graph::new(0);
        // expert 0: deep cls differs from shallow -> contributes 2x the
        // closed-form KL so that the N(B-1)=2 denominator yields 0.05663
        let st = vec![0.5, 0.5];
        let t0 = trace_from(
            &mut g,
            &[(vec![0.0, 0.0], st.clone()), (vec![2.0f64.ln(), 0.0], st.clone())],
            2,
            0,
        );
        let t1 = trace_from(
            &mut g,
            &[(vec![0.0, 0.0], st.clone()), (vec![2.0f64.ln(), 0.0], st)],
            2,
            1,
        );
        // shift expert 1's final cls so inter = 2 while keeping its intra
        // contribution equal to expert 0's (softmax is shift invariant)
        let shifted = g.value(t1.blocks[1].cls).clone();
        let mut data = shifted.data().to_vec();
        // final tokens (ln2, 0) and (ln2 + 1, 1): diff (1, 1), ||.||^2 = 2
        data[0] += 1.0;
        data[1] += 1.0;
        let t1 = ExpertTrace {
            blocks: vec![
                t1.blocks[0],
                BlockTokens {
                    cls: g.constant(Tensor::vector(data)),
                    st: t1.blocks[1].st,
                },
            ],
            modality: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store: ParamStore<f64> = ParamStore::new();
        register_block_weights(&mut store, 2, &mut rng);
        let mut g2 = Graph::new(store.len());
        // rebuild traces in the graph that owns the parameter leaf
        let rebuild = |g: &mut Graph<f64>, t: &ExpertTrace, src: &Graph<f64>| ExpertTrace {
            blocks: t
                .blocks
                .iter()
                .map(|b| BlockTokens {
                    cls: g.constant(src.value(b.cls).clone()),
                    st: g.constant(src.value(b.st).clone()),
                })
                .collect(),
            modality: t.modality,
        };
        let t0 = rebuild(&mut g2, &t0, &g);
        let t1 = rebuild(&mut g2, &t1, &g);
        let logits = g2.constant(Tensor::vector(vec![0.0, 0.0]));
        let (_, bd) = total_loss(&mut g2, logits, 0, &[t0, t1], &store, &HtlConfig::default())
            .unwrap();
        assert_abs_diff_eq!(bd.cls, 2.0f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(bd.intra, 0.05663, epsilon = 1e-5);
        assert_abs_diff_eq!(bd.inter, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(bd.total, 2.69371, epsilon = 1e-4);
        // arithmetic identity
        assert_abs_diff_eq!(
            bd.total,
            bd.cls + 0.01 * bd.intra + 1.0 * bd.inter,
            epsilon = 1e-9
        );
    }

    #[test]
    fn total_reduces_to_cls_when_weights_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store: ParamStore<f64> = ParamStore::new();
        register_block_weights(&mut store, 2, &mut rng);
        let mut g = Graph::new(store.len());
        let blk = (vec![0.4, -0.1], vec![0.3, 0.2]);
        let t0 = trace_from(&mut g, &[blk.clone(), blk.clone()], 2, 0);
        let t1 = trace_from(&mut g, &[blk.clone(), blk.clone()], 2, 1);
        let logits = g.constant(Tensor::vector(vec![1.0, -1.0, 0.5]));
        let cfg = HtlConfig {
            alpha: 0.0,
            beta: 0.0,
            ..HtlConfig::default()
        };
        let (_, bd) = total_loss(&mut g, logits, 1, &[t0, t1], &store, &cfg).unwrap();
        assert_eq!(bd.total, bd.cls);
        assert_eq!(bd.intra, 0.0);
        assert_eq!(bd.inter, 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn inter_scales_quadratically(
            scale in 0.1f64..3.0,
            a in proptest::collection::vec(-2.0f64..2.0, 4),
            b in proptest::collection::vec(-2.0f64..2.0, 4),
            c in proptest::collection::vec(-2.0f64..2.0, 4),
        ) {
            let mut g: Graph<f64> = Graph::new(0);
            let mk = |g: &mut Graph<f64>, v: &[f64], s: f64| {
                g.constant(Tensor::vector(v.iter().map(|x| x * s).collect()))
            };
            let base = {
                let toks = vec![mk(&mut g, &a, 1.0), mk(&mut g, &b, 1.0), mk(&mut g, &c, 1.0)];
                let l = inter_loss(&mut g, &toks).unwrap();
                g.value(l).item()
            };
            let scaled = {
                let toks = vec![mk(&mut g, &a, scale), mk(&mut g, &b, scale), mk(&mut g, &c, scale)];
                let l = inter_loss(&mut g, &toks).unwrap();
                g.value(l).item()
            };
            prop_assert!((scaled - scale * scale * base).abs() <= 1e-9 * (1.0 + scaled.abs()));
        }
    }
}
