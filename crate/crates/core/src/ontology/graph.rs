//! Relation graph construction and inductive structural embedding.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::OntologyBundle;
use crate::error::{Error, Result};

/// Undirected weighted concept graph. Node ids are bundle concept indices.
#[derive(Debug, Clone)]
pub struct RelationGraph {
    n: usize,
    adj: Vec<Vec<(usize, f64)>>,
    edges: Vec<(usize, usize, f64)>,
}

impl RelationGraph {
    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    pub fn neighbors(&self, node: usize) -> &[(usize, f64)] {
        &self.adj[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adj[node].len()
    }
}

/// Build the weighted undirected graph from bundle relations.
///
/// Weights: is_a 1.0, synonym/associative 0.8, otherwise 0.5. Duplicate edges
/// keep the maximum weight; self-loops are dropped with a warning.
pub fn build_relation_graph(bundle: &OntologyBundle) -> RelationGraph {
    let n = bundle.concept_count();
    let mut weights: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for rel in bundle.relations() {
        if rel.src == rel.dst {
            log::warn!(
                "dropping self-loop relation on concept {}",
                bundle.concepts()[rel.src]
            );
            continue;
        }
        let key = (rel.src.min(rel.dst), rel.src.max(rel.dst));
        let w = rel.kind.weight();
        let entry = weights.entry(key).or_insert(w);
        if w > *entry {
            *entry = w;
        }
    }
    let edges: Vec<(usize, usize, f64)> = weights
        .into_iter()
        .map(|((a, b), w)| (a, b, w))
        .collect();
    let mut adj = vec![Vec::new(); n];
    for &(a, b, w) in &edges {
        adj[a].push((b, w));
        adj[b].push((a, w));
    }
    for list in &mut adj {
        list.sort_by_key(|(u, _)| *u);
    }
    RelationGraph { n, adj, edges }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphEmbedConfig {
    pub d_g: usize,
    pub layers: usize,
    pub neighbor_sample_size: usize,
    pub negative_samples: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for GraphEmbedConfig {
    fn default() -> Self {
        Self {
            d_g: 64,
            layers: 2,
            neighbor_sample_size: 10,
            negative_samples: 5,
            epochs: 10,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

impl GraphEmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_g == 0 {
            return Err(Error::config("d_g must be >= 1"));
        }
        if self.layers == 0 {
            return Err(Error::config("graph embedder needs >= 1 layer"));
        }
        if self.neighbor_sample_size == 0 {
            return Err(Error::config("neighbor_sample_size must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        Ok(())
    }
}

struct SageParams {
    w: Vec<Array2<f64>>,
    b: Vec<Array1<f64>>,
}

impl SageParams {
    fn init(config: &GraphEmbedConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = config.d_g;
        let bound = (6.0 / (d + 2 * d) as f64).sqrt();
        let w = (0..config.layers)
            .map(|_| Array2::from_shape_fn((d, 2 * d), |_| rng.random_range(-bound..bound)))
            .collect();
        let b = (0..config.layers).map(|_| Array1::zeros(d)).collect();
        SageParams { w, b }
    }

    fn zeros_like(&self) -> Self {
        SageParams {
            w: self.w.iter().map(|m| Array2::zeros(m.raw_dim())).collect(),
            b: self.b.iter().map(|v| Array1::zeros(v.raw_dim())).collect(),
        }
    }

    fn step(&mut self, grads: &SageParams, lr: f64) {
        for (w, g) in self.w.iter_mut().zip(&grads.w) {
            w.scaled_add(-lr, g);
        }
        for (b, g) in self.b.iter_mut().zip(&grads.b) {
            b.scaled_add(-lr, g);
        }
    }
}

enum FwdKind {
    Input,
    Passthrough(Box<Fwd>),
    Combine {
        self_child: Box<Fwd>,
        neighbors: Vec<(Fwd, f64)>,
        weight_sum: f64,
        concat: Array1<f64>,
        tanhed: Array1<f64>,
        norm: f64,
    },
}

struct Fwd {
    out: Array1<f64>,
    kind: FwdKind,
}

fn forward_node(
    node: usize,
    layer: usize,
    graph: &RelationGraph,
    x: &[Array1<f64>],
    params: &SageParams,
    sampler: &mut dyn FnMut(&[(usize, f64)]) -> Vec<(usize, f64)>,
) -> Fwd {
    if layer == 0 {
        return Fwd {
            out: x[node].clone(),
            kind: FwdKind::Input,
        };
    }
    let adj = graph.neighbors(node);
    if adj.is_empty() {
        // Isolated node: carries its projected text feature through unchanged.
        let child = forward_node(node, layer - 1, graph, x, params, sampler);
        return Fwd {
            out: child.out.clone(),
            kind: FwdKind::Passthrough(Box::new(child)),
        };
    }
    let sampled = sampler(adj);
    let self_child = forward_node(node, layer - 1, graph, x, params, sampler);
    let mut neighbors = Vec::with_capacity(sampled.len());
    let mut weight_sum = 0.0;
    for (u, w) in sampled {
        neighbors.push((forward_node(u, layer - 1, graph, x, params, sampler), w));
        weight_sum += w;
    }
    let d = x[node].len();
    let mut mean = Array1::<f64>::zeros(d);
    for (child, w) in &neighbors {
        mean.scaled_add(*w / weight_sum, &child.out);
    }
    let mut concat = Array1::<f64>::zeros(2 * d);
    concat.slice_mut(ndarray::s![..d]).assign(&self_child.out);
    concat.slice_mut(ndarray::s![d..]).assign(&mean);
    let pre = params.w[layer - 1].dot(&concat) + &params.b[layer - 1];
    let tanhed = pre.mapv(f64::tanh);
    let norm = tanhed.dot(&tanhed).sqrt().max(1e-12);
    let out = &tanhed / norm;
    Fwd {
        out,
        kind: FwdKind::Combine {
            self_child: Box::new(self_child),
            neighbors,
            weight_sum,
            concat,
            tanhed,
            norm,
        },
    }
}

fn backward_node(fwd: &Fwd, dout: &Array1<f64>, layer: usize, params: &SageParams, grads: &mut SageParams) {
    match &fwd.kind {
        FwdKind::Input => {}
        FwdKind::Passthrough(child) => backward_node(child, dout, layer - 1, params, grads),
        FwdKind::Combine {
            self_child,
            neighbors,
            weight_sum,
            concat,
            tanhed,
            norm,
        } => {
            // out = tanhed / norm
            let projected = fwd.out.dot(dout);
            let dtanh = (dout - &(&fwd.out * projected)) / *norm;
            let dpre = &dtanh * &tanhed.mapv(|t| 1.0 - t * t);
            let li = layer - 1;
            let d = dpre.len();
            for i in 0..d {
                let g = dpre[i];
                if g != 0.0 {
                    let mut row = grads.w[li].row_mut(i);
                    row.scaled_add(g, concat);
                }
            }
            grads.b[li] += &dpre;
            let dconcat = params.w[li].t().dot(&dpre);
            let dself = dconcat.slice(ndarray::s![..d]).to_owned();
            let dneigh = dconcat.slice(ndarray::s![d..]).to_owned();
            backward_node(self_child, &dself, layer - 1, params, grads);
            for (child, w) in neighbors {
                let scaled = &dneigh * (*w / *weight_sum);
                backward_node(child, &scaled, layer - 1, params, grads);
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inductive structural embedding over the relation graph.
///
/// Node features start from the text vectors projected to `d_g`. Each layer
/// aggregates an edge-weighted mean of sampled neighbor representations,
/// concatenates with the node's own representation, applies a learned affine
/// map and tanh, and L2-normalizes. The affine maps are trained unsupervised
/// with edge-weight-proportional positive sampling and uniform negative
/// sampling. Deterministic given the config seed and the bundle's concept
/// order; final embeddings aggregate full neighborhoods.
pub fn graphsage_embed(
    graph: &RelationGraph,
    text_vectors: &[Array1<f64>],
    config: &GraphEmbedConfig,
) -> Result<Vec<Array1<f64>>> {
    config.validate()?;
    let n = graph.node_count();
    if n == 0 {
        return Err(Error::config("graph has no nodes"));
    }
    if text_vectors.len() != n {
        return Err(Error::config(format!(
            "expected {n} text vectors, got {}",
            text_vectors.len()
        )));
    }
    let d_t = text_vectors[0].len();
    if text_vectors.iter().any(|v| v.len() != d_t) {
        return Err(Error::config("text vectors have inconsistent dimensions"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1.0 / (d_t as f64).sqrt()).expect("valid normal");
    let projection = Array2::from_shape_fn((config.d_g, d_t), |_| normal.sample(&mut rng));
    let x: Vec<Array1<f64>> = text_vectors
        .iter()
        .map(|t| {
            let p = projection.dot(t);
            let norm = p.dot(&p).sqrt().max(1e-12);
            p / norm
        })
        .collect();

    let mut params = SageParams::init(config, &mut rng);

    if graph.edge_count() > 0 {
        let cumulative: Vec<f64> = graph
            .edges()
            .iter()
            .scan(0.0, |acc, &(_, _, w)| {
                *acc += w;
                Some(*acc)
            })
            .collect();
        let total = *cumulative.last().expect("non-empty edges");
        let sample_size = config.neighbor_sample_size;
        let steps = config.epochs * graph.edge_count();
        for _ in 0..steps {
            let r = rng.random::<f64>() * total;
            let edge_idx = cumulative.partition_point(|&c| c < r).min(graph.edge_count() - 1);
            let (mut u, mut v, _) = graph.edges()[edge_idx];
            if rng.random::<f64>() < 0.5 {
                std::mem::swap(&mut u, &mut v);
            }
            let mut targets = vec![(u, 1i8), (v, 2i8)];
            for _ in 0..config.negative_samples {
                targets.push((rng.random_range(0..n), 0i8));
            }

            let mut sampler = |adj: &[(usize, f64)]| -> Vec<(usize, f64)> {
                if adj.len() <= sample_size {
                    return adj.to_vec();
                }
                let mut idx: Vec<usize> = (0..adj.len()).collect();
                for i in 0..sample_size {
                    let j = rng.random_range(i..idx.len());
                    idx.swap(i, j);
                }
                idx[..sample_size].iter().map(|&i| adj[i]).collect()
            };
            let fwds: Vec<Fwd> = targets
                .iter()
                .map(|&(node, _)| forward_node(node, config.layers, graph, &x, &params, &mut sampler))
                .collect();

            let z_u = &fwds[0].out;
            let z_v = &fwds[1].out;
            let mut dz: Vec<Array1<f64>> = fwds
                .iter()
                .map(|f| Array1::zeros(f.out.len()))
                .collect();
            // positive pair: -log sigma(z_u . z_v)
            let g_pos = -sigmoid(-z_u.dot(z_v));
            dz[0].scaled_add(g_pos, z_v);
            dz[1].scaled_add(g_pos, z_u);
            // negatives: -log sigma(-z_u . z_n)
            for k in 2..fwds.len() {
                let g_neg = sigmoid(z_u.dot(&fwds[k].out));
                let z_n = fwds[k].out.clone();
                dz[0].scaled_add(g_neg, &z_n);
                dz[k].scaled_add(g_neg, z_u);
            }

            let mut grads = params.zeros_like();
            for (fwd, d) in fwds.iter().zip(&dz) {
                backward_node(fwd, d, config.layers, &params, &mut grads);
            }
            params.step(&grads, config.learning_rate);
        }
    }

    // Inference pass: full neighborhoods, no sampling.
    let mut full = |adj: &[(usize, f64)]| adj.to_vec();
    let mut out = Vec::with_capacity(n);
    for node in 0..n {
        let fwd = forward_node(node, config.layers, graph, &x, &params, &mut full);
        if fwd.out.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "graph embedding for node {node} is non-finite"
            )));
        }
        out.push(fwd.out);
    }
    Ok(out)
}
