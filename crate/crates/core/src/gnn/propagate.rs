//! Message passing, the cross-entropy loss, and exact backpropagation.

use crate::error::{Error, Result};
use crate::graph::ConsistencyGraph;
use crate::linalg::{gemm, Matrix};

use super::model::GcnModel;

/// `D^{-1/2} (W + I) D^{-1/2}` with `D` the degree matrix of `W + I`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency(Matrix);

impl NormalizedAdjacency {
    pub fn new(weights: &Matrix) -> Result<Self> {
        let n = weights.rows();
        if weights.cols() != n {
            return Err(Error::Domain("adjacency must be square".into()));
        }
        if weights.as_slice().iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::Domain("adjacency weights must be finite and nonnegative".into()));
        }
        let mut a = weights.clone();
        for i in 0..n {
            a[(i, i)] += 1.0;
        }
        let inv_sqrt_deg: Vec<f64> = (0..n).map(|i| 1.0 / a.row(i).iter().sum::<f64>().sqrt()).collect();
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] *= inv_sqrt_deg[i] * inv_sqrt_deg[j];
            }
        }
        Ok(NormalizedAdjacency(a))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

/// Several graphs treated as one disjoint union: node rows are stacked and
/// propagation never crosses block boundaries.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    blocks: Vec<(usize, NormalizedAdjacency)>,
    features: Matrix,
}

impl GraphBatch {
    pub fn new<'a>(graphs: impl IntoIterator<Item = &'a ConsistencyGraph>) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut rows: Vec<f64> = Vec::new();
        let mut offset = 0;
        let mut width = None;
        for g in graphs {
            let k = g.node_features.cols();
            if *width.get_or_insert(k) != k {
                return Err(Error::Config("graphs in a batch have different feature widths".into()));
            }
            blocks.push((offset, NormalizedAdjacency::new(&g.weights)?));
            rows.extend_from_slice(g.node_features.as_slice());
            offset += g.n;
        }
        let features = Matrix::from_vec(offset, width.unwrap_or(0), rows)?;
        Ok(GraphBatch { blocks, features })
    }

    pub fn single(graph: &ConsistencyGraph) -> Result<Self> {
        Self::new(std::iter::once(graph))
    }

    pub fn nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn graph_count(&self) -> usize {
        self.blocks.len()
    }

    /// Node ranges of each graph in stacking order.
    pub fn ranges(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        self.blocks.iter().map(|(off, a)| *off..*off + a.0.rows())
    }

    /// Block-diagonal product `Â · x`.
    fn propagate(&self, x: &Matrix) -> Matrix {
        let d = x.cols();
        let mut out = Matrix::zeros(x.rows(), d);
        for (offset, adj) in &self.blocks {
            let n = adj.0.rows();
            let src = &x.as_slice()[offset * d..(offset + n) * d];
            let dst = &mut out.as_mut_slice()[offset * d..(offset + n) * d];
            gemm(n, n, d, 1.0, adj.0.as_slice(), false, src, false, 0.0, dst);
        }
        out
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `Â · H_l` for each conv layer.
    propagated: Vec<Matrix>,
    /// Post-ReLU activations of each conv layer.
    activations: Vec<Matrix>,
    pub logits: Vec<f64>,
}

impl ForwardTrace {
    pub fn probabilities(&self) -> Vec<f64> {
        self.logits.iter().map(|&z| sigmoid(z)).collect()
    }
}

const PROB_FLOOR: f64 = 1e-15;

/// Logistic function, kept strictly inside (0, 1).
pub fn sigmoid(z: f64) -> f64 {
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

fn add_bias(z: &mut Matrix, bias: &[f64]) {
    for i in 0..z.rows() {
        z.row_mut(i).iter_mut().zip(bias).for_each(|(v, b)| *v += b);
    }
}

pub fn forward_batch(model: &GcnModel, batch: &GraphBatch) -> Result<ForwardTrace> {
    if batch.features.cols() != model.input_dim() {
        return Err(Error::Config(format!(
            "graph feature width {} does not match model input {}",
            batch.features.cols(),
            model.input_dim()
        )));
    }
    let conv = model.conv_layers();
    let rows = batch.nodes();
    let mut propagated = Vec::with_capacity(conv);
    let mut activations: Vec<Matrix> = Vec::with_capacity(conv);
    for l in 0..conv {
        let input = if l == 0 { &batch.features } else { &activations[l - 1] };
        let p = batch.propagate(input);
        let w = &model.layer_weights[l];
        let mut z = Matrix::zeros(rows, w.cols());
        gemm(rows, w.rows(), w.cols(), 1.0, p.as_slice(), false, w.as_slice(), false, 0.0, z.as_mut_slice());
        add_bias(&mut z, &model.layer_biases[l]);
        z.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        propagated.push(p);
        activations.push(z);
    }
    let head = &model.layer_weights[conv];
    let last = &activations[conv - 1];
    let mut logits = vec![0.0; rows];
    gemm(rows, head.rows(), 1, 1.0, last.as_slice(), false, head.as_slice(), false, 0.0, &mut logits);
    let b = model.layer_biases[conv][0];
    logits.iter_mut().for_each(|z| *z += b);
    Ok(ForwardTrace {
        propagated,
        activations,
        logits,
    })
}

/// One probability per response.
pub fn forward(model: &GcnModel, graph: &ConsistencyGraph) -> Result<Vec<f64>> {
    Ok(forward_batch(model, &GraphBatch::single(graph)?)?.probabilities())
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Summed binary cross-entropy from logits, and its gradient `p - y` per logit.
pub fn loss_from_logits(logits: &[f64], labels: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), labels.len(), "logits and labels differ in length");
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(labels) {
        // -[y log σ(z) + (1-y) log(1-σ(z))] = softplus(z) - y z
        total += softplus(z) - y * z;
        grad.push(sigmoid_unclamped(z) - y);
    }
    (total, grad)
}

fn sigmoid_unclamped(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Cross-entropy of probabilities against labels; probabilities are mapped
/// back to logits so the stable form is used.
pub fn loss(probabilities: &[f64], labels: &[f64]) -> (f64, Vec<f64>) {
    let logits: Vec<f64> = probabilities
        .iter()
        .map(|&p| {
            let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            (p / (1.0 - p)).ln()
        })
        .collect();
    loss_from_logits(&logits, labels)
}

/// Gradient of the summed loss w.r.t. every parameter, given the gradient
/// w.r.t. the logits of a traced forward pass.
pub fn backward_from_trace(
    model: &GcnModel,
    batch: &GraphBatch,
    trace: &ForwardTrace,
    logit_grad: &[f64],
) -> GcnModel {
    let conv = model.conv_layers();
    let rows = batch.nodes();
    let mut grads = model.zeros_like();

    let head = &model.layer_weights[conv];
    let last = &trace.activations[conv - 1];
    gemm(
        head.rows(),
        rows,
        1,
        1.0,
        last.as_slice(),
        true,
        logit_grad,
        false,
        0.0,
        grads.layer_weights[conv].as_mut_slice(),
    );
    grads.layer_biases[conv][0] = logit_grad.iter().sum();

    // dL/dH for the last conv layer
    let mut d_act = Matrix::zeros(rows, head.rows());
    gemm(rows, 1, head.rows(), 1.0, logit_grad, false, head.as_slice(), true, 0.0, d_act.as_mut_slice());

    for l in (0..conv).rev() {
        let act = &trace.activations[l];
        let mut dz = d_act;
        dz.as_mut_slice()
            .iter_mut()
            .zip(act.as_slice())
            .for_each(|(g, &h)| {
                if h <= 0.0 {
                    *g = 0.0;
                }
            });
        let w = &model.layer_weights[l];
        let p = &trace.propagated[l];
        gemm(
            w.rows(),
            rows,
            w.cols(),
            1.0,
            p.as_slice(),
            true,
            dz.as_slice(),
            false,
            0.0,
            grads.layer_weights[l].as_mut_slice(),
        );
        let db = &mut grads.layer_biases[l];
        for i in 0..rows {
            db.iter_mut().zip(dz.row(i)).for_each(|(b, g)| *b += g);
        }
        if l == 0 {
            break;
        }
        let mut dp = Matrix::zeros(rows, w.rows());
        gemm(rows, w.cols(), w.rows(), 1.0, dz.as_slice(), false, w.as_slice(), true, 0.0, dp.as_mut_slice());
        // Â is symmetric, so Âᵀ·dP = Â·dP
        d_act = batch.propagate(&dp);
    }
    grads
}

/// Loss on one graph and the analytic gradient of every parameter.
pub fn backward(model: &GcnModel, graph: &ConsistencyGraph, labels: &[f64]) -> Result<(f64, GcnModel)> {
    let batch = GraphBatch::single(graph)?;
    if labels.len() != graph.n {
        return Err(Error::Data(format!("{} labels for {} responses", labels.len(), graph.n)));
    }
    let trace = forward_batch(model, &batch)?;
    let (value, dlogits) = loss_from_logits(&trace.logits, labels);
    Ok((value, backward_from_trace(model, &batch, &trace, &dlogits)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_graph(n: usize, k: usize, seed: u64) -> ConsistencyGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Matrix::identity(n);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = rng.random::<f64>();
                w[(i, j)] = v;
                w[(j, i)] = v;
            }
        }
        let assignments: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let mut node_features = Matrix::zeros(n, k);
        let mut cluster_sizes = vec![0; k];
        for (i, &a) in assignments.iter().enumerate() {
            node_features[(i, a)] = 1.0;
            cluster_sizes[a] += 1;
        }
        // cluster ids are random here, so sizes need not be ordered
        ConsistencyGraph {
            n,
            weights: w,
            node_features,
            cluster_sizes,
            assignments,
            primary: 0,
        }
    }

    fn power_iteration_radius(m: &Matrix) -> f64 {
        let n = m.rows();
        let mut v = vec![1.0; n];
        let mut lambda = 0.0;
        for _ in 0..500 {
            let next: Vec<f64> = (0..n).map(|i| crate::linalg::dot(m.row(i), &v)).collect();
            lambda = crate::linalg::norm(&next) / crate::linalg::norm(&v);
            let s = crate::linalg::norm(&next);
            v = next.iter().map(|x| x / s).collect();
        }
        lambda
    }

    #[test]
    fn normalized_adjacency_is_symmetric_nonnegative_and_contracting() {
        for seed in 0..5 {
            let g = random_graph(7, 3, seed);
            let a = NormalizedAdjacency::new(&g.weights).unwrap();
            assert!(a.matrix().is_symmetric(1e-15));
            assert!(a.matrix().as_slice().iter().all(|&v| v >= 0.0));
            assert!(power_iteration_radius(a.matrix()) <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn loss_special_cases() {
        let (l, g) = loss(&[0.5; 4], &[1.0, 0.0, 1.0, 1.0]);
        assert!((l - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(g, vec![-0.5, 0.5, -0.5, -0.5]);
        let (l, _) = loss_from_logits(&[800.0, -800.0], &[1.0, 0.0]);
        assert!(l.abs() < 1e-300);
    }

    #[test]
    fn loss_matches_termwise_formula() {
        let p = [0.13, 0.71, 0.5, 0.92];
        let y = [0.0, 1.0, 1.0, 0.0];
        let mut brute = 0.0;
        for i in 0..4 {
            brute -= y[i] * f64::ln(p[i]) + (1.0 - y[i]) * f64::ln(1.0 - p[i]);
        }
        assert!((loss(&p, &y).0 - brute).abs() < 1e-12);
    }

    #[test]
    fn output_head_bias_gradient_at_zero_head() {
        let g = random_graph(5, 3, 1);
        let mut m = GcnModel::new(3, &[4, 4, 2], 3).unwrap();
        let head = m.layer_weights.len() - 1;
        m.layer_weights[head] = Matrix::zeros(2, 1);
        let (_, grads) = backward(&m, &g, &[0.0; 5]).unwrap();
        assert!((grads.layer_biases[head][0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn outputs_in_open_unit_interval_and_symmetric_graph_gives_equal_outputs() {
        let n = 6;
        let g = ConsistencyGraph::from_parts(
            Matrix::from_vec(n, n, vec![1.0; n * n]).unwrap(),
            vec![0; n],
            3,
            0,
        )
        .unwrap();
        let m = GcnModel::new(3, &[8, 8, 8], 2).unwrap();
        let p = forward(&m, &g).unwrap();
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(p.iter().all(|&v| v == p[0]));
    }

    #[test]
    fn feature_width_mismatch_is_config_error() {
        let g = random_graph(4, 2, 0);
        let m = GcnModel::new(3, &[4], 0).unwrap();
        assert!(matches!(forward(&m, &g), Err(Error::Config(_))));
    }

    #[test]
    fn batched_forward_equals_per_graph_forward() {
        let graphs: Vec<_> = (0..4).map(|s| random_graph(3 + s as usize, 3, s)).collect();
        let m = GcnModel::new(3, &[5, 6, 4], 8).unwrap();
        let batch = GraphBatch::new(&graphs).unwrap();
        let joint = forward_batch(&m, &batch).unwrap().probabilities();
        let ranges: Vec<_> = batch.ranges().collect();
        for (g, r) in graphs.iter().zip(ranges) {
            let single = forward(&m, g).unwrap();
            for (a, b) in single.iter().zip(&joint[r]) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }
}
