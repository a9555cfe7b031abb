//! Output-aware expert gating, weighted fusion into a single embedding, and
//! the MLP classifier, plus the input-conditioned gate used by the plain MoE
//! baseline.
//!
//! The gate consumes the final-block class tokens of all experts, so routing
//! decisions see the experts' decision-oriented representations rather than
//! raw inputs. Softmax is applied exactly once, inside the gate. The gate is
//! dense: all experts always contribute.

use rand::RngCore;

use crate::backbone::param_leaf;
use crate::numerics::{Graph, Init, NodeId, ParamStore, Scalar, Tensor};
use crate::{invalid, Result};

/// Nodes produced by the fusion head for one sample.
#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    /// N-vector on the probability simplex.
    pub weights: NodeId,
    /// d-vector fused embedding.
    pub z: NodeId,
    /// K-vector class logits.
    pub logits: NodeId,
}

/// Spatial grid the input gate pools each frame down to (4 x 4).
pub const INPUT_GATE_POOL: usize = 4;

/// Softmax temperature of both gates. Early in training the class tokens are
/// nearly sample-independent, so an unsmoothed gate saturates to whichever
/// expert helps first and the softmax gradient then vanishes before the
/// experts mature (winner-take-all collapse). Tempering the softmax keeps
/// routing soft until logit differences are genuinely large.
pub const GATE_TEMPERATURE: f64 = 10.0;

/// Fraction of uniform routing mixed into both gates:
/// weights = (1 - lambda) softmax(logits / T) + lambda / N.
/// Temperature alone only delays winner-take-all collapse; once one expert
/// saturates, the others receive no classification gradient and never mature
/// (observed on a subset of seeds). The uniform floor guarantees every expert
/// keeps at least lambda/N of the gradient flow while leaving the gate free
/// to shift the remaining mass.
pub const GATE_SMOOTHING: f64 = 0.3;

/// Apply the uniform-floor smoothing to a simplex-valued gate output.
fn smooth_gate<F: Scalar>(graph: &mut Graph<F>, weights: NodeId) -> Result<NodeId> {
    let n = graph.value(weights).len();
    let floor = graph.constant(Tensor::vector(vec![
        F::from_f64(GATE_SMOOTHING / n as f64);
        n
    ]));
    graph.lin_comb(&[weights, floor], &[F::from_f64(1.0 - GATE_SMOOTHING), F::one()])
}

/// Gate MLP: concatenated class tokens -> hidden -> N logits. The final layer
/// starts at zero so training begins from uniform routing.
pub fn register_gate_params<F: Scalar>(
    store: &mut ParamStore<F>,
    num_experts: usize,
    embed_dim: usize,
    hidden: usize,
    rng: &mut impl RngCore,
) {
    let tn = Init::TruncNormal(crate::backbone::INIT_STD);
    store.add("gate.w1", vec![num_experts * embed_dim, hidden], tn, rng);
    store.add("gate.b1", vec![hidden], Init::Zeros, rng);
    store.add("gate.w2", vec![hidden, num_experts], Init::Zeros, rng);
    store.add("gate.b2", vec![num_experts], Init::Zeros, rng);
}

/// Output-aware gate: weights = softmax(MLP(concat(cls_tokens))).
pub fn gate<F: Scalar>(
    graph: &mut Graph<F>,
    store: &ParamStore<F>,
    cls_tokens: &[NodeId],
) -> Result<NodeId> {
    if cls_tokens.len() < 2 {
        return Err(invalid("gate needs at least 2 experts"));
    }
    let cat = graph.concat_vec(cls_tokens)?;
    let w1 = param_leaf(graph, store, "gate.w1")?;
    if graph.value(w1).rows() != graph.value(cat).len() {
        return Err(invalid(format!(
            "gate expects {} inputs, got {}",
            graph.value(w1).rows(),
            graph.value(cat).len()
        )));
    }
    let b1 = param_leaf(graph, store, "gate.b1")?;
    let h = graph.linear_vec(cat, w1, Some(b1))?;
    let h = graph.gelu(h);
    let w2 = param_leaf(graph, store, "gate.w2")?;
    let b2 = param_leaf(graph, store, "gate.b2")?;
    let logits = graph.linear_vec(h, w2, Some(b2))?;
    let soft = graph.softmax_vec(logits, F::from_f64(GATE_TEMPERATURE))?;
    smooth_gate(graph, soft)
}

/// z = sum_n weights_n * cls_tokens_n (the final-block class tokens).
pub fn fuse<F: Scalar>(
    graph: &mut Graph<F>,
    cls_tokens: &[NodeId],
    weights: NodeId,
) -> Result<NodeId> {
    if graph.value(weights).len() != cls_tokens.len() {
        return Err(invalid(format!(
            "fuse got {} weights for {} experts",
            graph.value(weights).len(),
            cls_tokens.len()
        )));
    }
    let mut z: Option<NodeId> = None;
    for (n, &tok) in cls_tokens.iter().enumerate() {
        let wn = graph.index(weights, n)?;
        let term = graph.mul_scalar_node(tok, wn)?;
        z = Some(match z {
            Some(acc) => graph.add(acc, term)?,
            None => term,
        });
    }
    Ok(z.expect("at least one expert"))
}

/// 2-layer MLP classifier over the fused embedding. Parameters live under
/// `prefix` so late fusion can carry one classifier per expert.
pub fn register_classifier_params<F: Scalar>(
    store: &mut ParamStore<F>,
    prefix: &str,
    embed_dim: usize,
    hidden: usize,
    num_classes: usize,
    rng: &mut impl RngCore,
) {
    let tn = Init::TruncNormal(crate::backbone::INIT_STD);
    store.add(&format!("{prefix}.w1"), vec![embed_dim, hidden], tn, rng);
    store.add(&format!("{prefix}.b1"), vec![hidden], Init::Zeros, rng);
    store.add(&format!("{prefix}.w2"), vec![hidden, num_classes], tn, rng);
    store.add(&format!("{prefix}.b2"), vec![num_classes], Init::Zeros, rng);
}

pub fn classify<F: Scalar>(
    graph: &mut Graph<F>,
    store: &ParamStore<F>,
    prefix: &str,
    z: NodeId,
) -> Result<NodeId> {
    let w1 = param_leaf(graph, store, &format!("{prefix}.w1"))?;
    let b1 = param_leaf(graph, store, &format!("{prefix}.b1"))?;
    let h = graph.linear_vec(z, w1, Some(b1))?;
    let h = graph.gelu(h);
    let w2 = param_leaf(graph, store, &format!("{prefix}.w2"))?;
    let b2 = param_leaf(graph, store, &format!("{prefix}.b2"))?;
    graph.linear_vec(h, w2, Some(b2))
}

/// Fixed downsampling for the input-conditioned gate: spatial average-pool
/// each modality to 4 x 4 per frame, average over frames, concatenate
/// channels. Pure function of the sample; carries no gradient.
pub fn downsample_features<F: Scalar>(tensors: &[Tensor<F>]) -> Result<Vec<F>> {
    let p = INPUT_GATE_POOL;
    let mut feats = Vec::new();
    for x in tensors {
        let s = x.shape();
        if s.len() != 4 {
            return Err(invalid(format!("modality tensor must be rank 4, got {s:?}")));
        }
        let (c, t, h, w) = (s[0], s[1], s[2], s[3]);
        if h < p || w < p {
            return Err(invalid(format!("spatial extent {h}x{w} too small to pool to {p}x{p}")));
        }
        for ci in 0..c {
            for gy in 0..p {
                for gx in 0..p {
                    let y0 = gy * h / p;
                    let y1 = (gy + 1) * h / p;
                    let x0 = gx * w / p;
                    let x1 = (gx + 1) * w / p;
                    let mut acc = F::zero();
                    for ti in 0..t {
                        for y in y0..y1 {
                            for xx in x0..x1 {
                                acc = acc + x.data()[((ci * t + ti) * h + y) * w + xx];
                            }
                        }
                    }
                    let count = F::from_f64((t * (y1 - y0) * (x1 - x0)) as f64);
                    feats.push(acc / count);
                }
            }
        }
    }
    Ok(feats)
}

/// Input-conditioned gate of the MoE baseline: three linear layers with GELU
/// between, softmax output. Final layer starts at zero (uniform routing).
pub fn register_input_gate_params<F: Scalar>(
    store: &mut ParamStore<F>,
    feat_dim: usize,
    hidden: usize,
    num_experts: usize,
    rng: &mut impl RngCore,
) {
    let tn = Init::TruncNormal(crate::backbone::INIT_STD);
    store.add("igate.w1", vec![feat_dim, hidden], tn, rng);
    store.add("igate.b1", vec![hidden], Init::Zeros, rng);
    store.add("igate.w2", vec![hidden, hidden], tn, rng);
    store.add("igate.b2", vec![hidden], Init::Zeros, rng);
    store.add("igate.w3", vec![hidden, num_experts], Init::Zeros, rng);
    store.add("igate.b3", vec![num_experts], Init::Zeros, rng);
}

pub fn input_gate<F: Scalar>(
    graph: &mut Graph<F>,
    store: &ParamStore<F>,
    sample_tensors: &[Tensor<F>],
) -> Result<NodeId> {
    let feats = downsample_features(sample_tensors)?;
    let x = graph.constant(Tensor::vector(feats));
    let w1 = param_leaf(graph, store, "igate.w1")?;
    if graph.value(w1).rows() != graph.value(x).len() {
        return Err(invalid(format!(
            "input gate expects {} features, got {}",
            graph.value(w1).rows(),
            graph.value(x).len()
        )));
    }
    let b1 = param_leaf(graph, store, "igate.b1")?;
    let h = graph.linear_vec(x, w1, Some(b1))?;
    let h = graph.gelu(h);
    let w2 = param_leaf(graph, store, "igate.w2")?;
    let b2 = param_leaf(graph, store, "igate.b2")?;
    let h = graph.linear_vec(h, w2, Some(b2))?;
    let h = graph.gelu(h);
    let w3 = param_leaf(graph, store, "igate.w3")?;
    let b3 = param_leaf(graph, store, "igate.b3")?;
    let logits = graph.linear_vec(h, w3, Some(b3))?;
    let soft = graph.softmax_vec(logits, F::from_f64(GATE_TEMPERATURE))?;
    smooth_gate(graph, soft)
}
