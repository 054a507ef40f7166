//! The hybrid risk network: frozen knowledge embeddings, sinusoidal
//! continuous-time encoding, a two-layer BiGRU, multi-head self-attention
//! with residual + layer norm, dual-level attention, demographic fusion, and
//! a sigmoid risk head. Forward pass and analytic gradients are hand-rolled
//! over ndarray.

mod backward;
mod checkpoint;
mod forward;

pub use backward::{batch_loss, loss_and_grads};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use forward::{encode_visit, forward, temporal_encoding, ForwardOutput};

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ontology::EmbeddingMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding dimension (d_t + d_g, fixed by the matrix).
    pub d: usize,
    /// GRU hidden size per direction.
    pub h: usize,
    /// Recurrent layers.
    pub layers: usize,
    /// Attention heads over the 2h-dim hidden states.
    pub heads: usize,
    /// Temporal-encoding scale.
    pub lambda: f64,
    pub dropout: f64,
    pub k_max: usize,
    pub t_s: usize,
    pub demo_dim: usize,
    pub mlp_hidden: Vec<usize>,
    /// Ablation switches; all true for the full model.
    pub visit_attention: bool,
    pub feature_attention: bool,
    pub time_encoding: bool,
}

impl ModelConfig {
    pub fn new(d: usize, demo_dim: usize, t_s: usize, k_max: usize) -> Self {
        ModelConfig {
            d,
            h: 32,
            layers: 2,
            heads: 2,
            lambda: 10_000.0,
            dropout: 0.2,
            k_max,
            t_s,
            demo_dim,
            mlp_hidden: vec![d],
            visit_attention: true,
            feature_attention: true,
            time_encoding: true,
        }
    }

    /// Hidden width seen by attention: both GRU directions concatenated.
    pub fn m(&self) -> usize {
        2 * self.h
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % 2 != 0 {
            return Err(Error::config(format!(
                "embedding dim d must be positive and even (sinusoidal pairs), got {}",
                self.d
            )));
        }
        if self.h == 0 || self.layers == 0 || self.heads == 0 || self.t_s == 0 || self.k_max == 0 {
            return Err(Error::config("all model dimensions must be >= 1"));
        }
        if self.m() % self.heads != 0 {
            return Err(Error::config(format!(
                "heads ({}) must divide 2h ({})",
                self.heads,
                self.m()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must be in [0,1)"));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::config("lambda must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruDirection {
    pub w_z: Array2<f64>,
    pub u_z: Array2<f64>,
    pub b_z: Array1<f64>,
    pub w_r: Array2<f64>,
    pub u_r: Array2<f64>,
    pub b_r: Array1<f64>,
    pub w_n: Array2<f64>,
    pub u_n: Array2<f64>,
    pub b_n: Array1<f64>,
}

impl GruDirection {
    fn new(h: usize, input: usize, init: &mut dyn FnMut(usize, usize) -> Array2<f64>) -> Self {
        GruDirection {
            w_z: init(h, input),
            u_z: init(h, h),
            b_z: Array1::zeros(h),
            w_r: init(h, input),
            u_r: init(h, h),
            b_r: Array1::zeros(h),
            w_n: init(h, input),
            u_n: init(h, h),
            b_n: Array1::zeros(h),
        }
    }

    fn zeros(h: usize, input: usize) -> Self {
        let mut zero = |r, c| Array2::zeros((r, c));
        Self::new(h, input, &mut zero)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruLayer {
    pub fwd: GruDirection,
    pub bwd: GruDirection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MhaParams {
    pub w_q: Array2<f64>,
    pub b_q: Array1<f64>,
    pub w_k: Array2<f64>,
    pub b_k: Array1<f64>,
    pub w_v: Array2<f64>,
    pub b_v: Array1<f64>,
    pub w_o: Array2<f64>,
    pub b_o: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Every trainable tensor. Gradients use the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub gru: Vec<GruLayer>,
    pub mha: MhaParams,
    pub ln: LayerNormParams,
    pub w_alpha: Array1<f64>,
    pub b_alpha: f64,
    pub w_beta: Array2<f64>,
    pub b_beta: Array1<f64>,
    pub mlp: Vec<Dense>,
}

pub type ModelGrads = ParamSet;

/// Read-only view of one named tensor.
pub enum TensorRef<'a> {
    Scalar(&'a f64),
    Vector(&'a Array1<f64>),
    Matrix(&'a Array2<f64>),
}

pub enum TensorMut<'a> {
    Scalar(&'a mut f64),
    Vector(&'a mut Array1<f64>),
    Matrix(&'a mut Array2<f64>),
}

impl TensorRef<'_> {
    pub fn len(&self) -> usize {
        match self {
            TensorRef::Scalar(_) => 1,
            TensorRef::Vector(v) => v.len(),
            TensorRef::Matrix(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> f64 {
        match self {
            TensorRef::Scalar(s) => **s,
            TensorRef::Vector(v) => v[i],
            TensorRef::Matrix(m) => m[(i / m.ncols(), i % m.ncols())],
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            TensorRef::Scalar(_) => vec![1],
            TensorRef::Vector(v) => vec![v.len()],
            TensorRef::Matrix(m) => vec![m.nrows(), m.ncols()],
        }
    }
}

impl TensorMut<'_> {
    pub fn len(&self) -> usize {
        match self {
            TensorMut::Scalar(_) => 1,
            TensorMut::Vector(v) => v.len(),
            TensorMut::Matrix(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> f64 {
        match self {
            TensorMut::Scalar(s) => **s,
            TensorMut::Vector(v) => v[i],
            TensorMut::Matrix(m) => m[(i / m.ncols(), i % m.ncols())],
        }
    }

    pub fn set(&mut self, i: usize, value: f64) {
        match self {
            TensorMut::Scalar(s) => **s = value,
            TensorMut::Vector(v) => v[i] = value,
            TensorMut::Matrix(m) => {
                let c = m.ncols();
                m[(i / c, i % c)] = value;
            }
        }
    }

    pub fn add(&mut self, i: usize, delta: f64) {
        let v = self.get(i);
        self.set(i, v + delta);
    }
}

/// A named tensor plus whether L2 weight decay applies to it.
pub struct NamedTensor<'a> {
    pub name: String,
    pub decay: bool,
    pub tensor: TensorRef<'a>,
}

pub struct NamedTensorMut<'a> {
    pub name: String,
    pub decay: bool,
    pub tensor: TensorMut<'a>,
}

impl ParamSet {
    pub fn tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut out = Vec::new();
        for (l, layer) in self.gru.iter().enumerate() {
            let dirs: [(&str, &GruDirection); 2] = [("fwd", &layer.fwd), ("bwd", &layer.bwd)];
            for (dname, dir) in dirs {
                out.push(NamedTensor {
                    name: format!("gru.{l}.{dname}.w_z"),
                    decay: true,
                    tensor: TensorRef::Matrix(&dir.w_z),
                });
                out.push(NamedTensor {
                    name: format!("gru.{l}.{dname}.u_z"),
                    decay: true,
                    tensor: TensorRef::Matrix(&dir.u_z),
                });
                out.push(NamedTensor {
                    name: format!("gru.{l}.{dname}.b_z"),
                    decay: false,
                    tensor: TensorRef::Vector(&dir.b_z),
                });
                out.push(NamedTensor {
                    name: format!("gru.{l}.{dname}.w_r"),
                    decay: true,
                    tensor: TensorRef::Matrix(&dir.w_r),
                });
                out.push(NamedTensor {
                    name: format!("gru.{l}.{dname}.u_r"),
                    decay: true,
                    tensor: TensorRef::Matrix(&dir.u_r),
                });
                out.push(NamedTensor {
                    name: format!("gru.{l}.{dname}.b_r"),
                    decay: false,
                    tensor: TensorRef::Vector(&dir.b_r),
                });
                out.push(NamedTensor {
                    name: format!("gru.{l}.{dname}.w_n"),
                    decay: true,
                    tensor: TensorRef::Matrix(&dir.w_n),
                });
                out.push(NamedTensor {
                    name: format!("gru.{l}.{dname}.u_n"),
                    decay: true,
                    tensor: TensorRef::Matrix(&dir.u_n),
                });
                out.push(NamedTensor {
                    name: format!("gru.{l}.{dname}.b_n"),
                    decay: false,
                    tensor: TensorRef::Vector(&dir.b_n),
                });
            }
        }
        out.push(NamedTensor {
            name: "mha.w_q".into(),
            decay: true,
            tensor: TensorRef::Matrix(&self.mha.w_q),
        });
        out.push(NamedTensor {
            name: "mha.b_q".into(),
            decay: false,
            tensor: TensorRef::Vector(&self.mha.b_q),
        });
        out.push(NamedTensor {
            name: "mha.w_k".into(),
            decay: true,
            tensor: TensorRef::Matrix(&self.mha.w_k),
        });
        out.push(NamedTensor {
            name: "mha.b_k".into(),
            decay: false,
            tensor: TensorRef::Vector(&self.mha.b_k),
        });
        out.push(NamedTensor {
            name: "mha.w_v".into(),
            decay: true,
            tensor: TensorRef::Matrix(&self.mha.w_v),
        });
        out.push(NamedTensor {
            name: "mha.b_v".into(),
            decay: false,
            tensor: TensorRef::Vector(&self.mha.b_v),
        });
        out.push(NamedTensor {
            name: "mha.w_o".into(),
            decay: true,
            tensor: TensorRef::Matrix(&self.mha.w_o),
        });
        out.push(NamedTensor {
            name: "mha.b_o".into(),
            decay: false,
            tensor: TensorRef::Vector(&self.mha.b_o),
        });
        out.push(NamedTensor {
            name: "ln.gain".into(),
            decay: false,
            tensor: TensorRef::Vector(&self.ln.gain),
        });
        out.push(NamedTensor {
            name: "ln.bias".into(),
            decay: false,
            tensor: TensorRef::Vector(&self.ln.bias),
        });
        out.push(NamedTensor {
            name: "attn.w_alpha".into(),
            decay: true,
            tensor: TensorRef::Vector(&self.w_alpha),
        });
        out.push(NamedTensor {
            name: "attn.b_alpha".into(),
            decay: false,
            tensor: TensorRef::Scalar(&self.b_alpha),
        });
        out.push(NamedTensor {
            name: "attn.w_beta".into(),
            decay: true,
            tensor: TensorRef::Matrix(&self.w_beta),
        });
        out.push(NamedTensor {
            name: "attn.b_beta".into(),
            decay: false,
            tensor: TensorRef::Vector(&self.b_beta),
        });
        for (i, dense) in self.mlp.iter().enumerate() {
            out.push(NamedTensor {
                name: format!("mlp.{i}.w"),
                decay: true,
                tensor: TensorRef::Matrix(&dense.w),
            });
            out.push(NamedTensor {
                name: format!("mlp.{i}.b"),
                decay: false,
                tensor: TensorRef::Vector(&dense.b),
            });
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<NamedTensorMut<'_>> {
        let mut out = Vec::new();
        for (l, layer) in self.gru.iter_mut().enumerate() {
            let dirs: [(&str, &mut GruDirection); 2] =
                [("fwd", &mut layer.fwd), ("bwd", &mut layer.bwd)];
            for (dname, dir) in dirs {
                out.push(NamedTensorMut {
                    name: format!("gru.{l}.{dname}.w_z"),
                    decay: true,
                    tensor: TensorMut::Matrix(&mut dir.w_z),
                });
                out.push(NamedTensorMut {
                    name: format!("gru.{l}.{dname}.u_z"),
                    decay: true,
                    tensor: TensorMut::Matrix(&mut dir.u_z),
                });
                out.push(NamedTensorMut {
                    name: format!("gru.{l}.{dname}.b_z"),
                    decay: false,
                    tensor: TensorMut::Vector(&mut dir.b_z),
                });
                out.push(NamedTensorMut {
                    name: format!("gru.{l}.{dname}.w_r"),
                    decay: true,
                    tensor: TensorMut::Matrix(&mut dir.w_r),
                });
                out.push(NamedTensorMut {
                    name: format!("gru.{l}.{dname}.u_r"),
                    decay: true,
                    tensor: TensorMut::Matrix(&mut dir.u_r),
                });
                out.push(NamedTensorMut {
                    name: format!("gru.{l}.{dname}.b_r"),
                    decay: false,
                    tensor: TensorMut::Vector(&mut dir.b_r),
                });
                out.push(NamedTensorMut {
                    name: format!("gru.{l}.{dname}.w_n"),
                    decay: true,
                    tensor: TensorMut::Matrix(&mut dir.w_n),
                });
                out.push(NamedTensorMut {
                    name: format!("gru.{l}.{dname}.u_n"),
                    decay: true,
                    tensor: TensorMut::Matrix(&mut dir.u_n),
                });
                out.push(NamedTensorMut {
                    name: format!("gru.{l}.{dname}.b_n"),
                    decay: false,
                    tensor: TensorMut::Vector(&mut dir.b_n),
                });
            }
        }
        out.push(NamedTensorMut {
            name: "mha.w_q".into(),
            decay: true,
            tensor: TensorMut::Matrix(&mut self.mha.w_q),
        });
        out.push(NamedTensorMut {
            name: "mha.b_q".into(),
            decay: false,
            tensor: TensorMut::Vector(&mut self.mha.b_q),
        });
        out.push(NamedTensorMut {
            name: "mha.w_k".into(),
            decay: true,
            tensor: TensorMut::Matrix(&mut self.mha.w_k),
        });
        out.push(NamedTensorMut {
            name: "mha.b_k".into(),
            decay: false,
            tensor: TensorMut::Vector(&mut self.mha.b_k),
        });
        out.push(NamedTensorMut {
            name: "mha.w_v".into(),
            decay: true,
            tensor: TensorMut::Matrix(&mut self.mha.w_v),
        });
        out.push(NamedTensorMut {
            name: "mha.b_v".into(),
            decay: false,
            tensor: TensorMut::Vector(&mut self.mha.b_v),
        });
        out.push(NamedTensorMut {
            name: "mha.w_o".into(),
            decay: true,
            tensor: TensorMut::Matrix(&mut self.mha.w_o),
        });
        out.push(NamedTensorMut {
            name: "mha.b_o".into(),
            decay: false,
            tensor: TensorMut::Vector(&mut self.mha.b_o),
        });
        out.push(NamedTensorMut {
            name: "ln.gain".into(),
            decay: false,
            tensor: TensorMut::Vector(&mut self.ln.gain),
        });
        out.push(NamedTensorMut {
            name: "ln.bias".into(),
            decay: false,
            tensor: TensorMut::Vector(&mut self.ln.bias),
        });
        out.push(NamedTensorMut {
            name: "attn.w_alpha".into(),
            decay: true,
            tensor: TensorMut::Vector(&mut self.w_alpha),
        });
        out.push(NamedTensorMut {
            name: "attn.b_alpha".into(),
            decay: false,
            tensor: TensorMut::Scalar(&mut self.b_alpha),
        });
        out.push(NamedTensorMut {
            name: "attn.w_beta".into(),
            decay: true,
            tensor: TensorMut::Matrix(&mut self.w_beta),
        });
        out.push(NamedTensorMut {
            name: "attn.b_beta".into(),
            decay: false,
            tensor: TensorMut::Vector(&mut self.b_beta),
        });
        for (i, dense) in self.mlp.iter_mut().enumerate() {
            out.push(NamedTensorMut {
                name: format!("mlp.{i}.w"),
                decay: true,
                tensor: TensorMut::Matrix(&mut dense.w),
            });
            out.push(NamedTensorMut {
                name: format!("mlp.{i}.b"),
                decay: false,
                tensor: TensorMut::Vector(&mut dense.b),
            });
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.tensor.len()).sum()
    }

    pub fn zeros_like(config: &ModelConfig) -> ParamSet {
        let m = config.m();
        let mut gru = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let input = if l == 0 { config.d } else { m };
            gru.push(GruLayer {
                fwd: GruDirection::zeros(config.h, input),
                bwd: GruDirection::zeros(config.h, input),
            });
        }
        let zeros2 = |r, c| Array2::<f64>::zeros((r, c));
        let mut mlp = Vec::new();
        let mut in_dim = config.d + config.demo_dim;
        for &hidden in &config.mlp_hidden {
            mlp.push(Dense {
                w: zeros2(hidden, in_dim),
                b: Array1::zeros(hidden),
            });
            in_dim = hidden;
        }
        mlp.push(Dense {
            w: zeros2(1, in_dim),
            b: Array1::zeros(1),
        });
        ParamSet {
            gru,
            mha: MhaParams {
                w_q: zeros2(m, m),
                b_q: Array1::zeros(m),
                w_k: zeros2(m, m),
                b_k: Array1::zeros(m),
                w_v: zeros2(m, m),
                b_v: Array1::zeros(m),
                w_o: zeros2(m, m),
                b_o: Array1::zeros(m),
            },
            ln: LayerNormParams {
                gain: Array1::zeros(m),
                bias: Array1::zeros(m),
            },
            w_alpha: Array1::zeros(m),
            b_alpha: 0.0,
            w_beta: zeros2(config.d, m),
            b_beta: Array1::zeros(config.d),
            mlp,
        }
    }

    fn init(config: &ModelConfig, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::zeros_like(config);
        let gru_bound = 1.0 / (config.h as f64).sqrt();
        for layer in &mut set.gru {
            for dir in [&mut layer.fwd, &mut layer.bwd] {
                for m in [
                    &mut dir.w_z,
                    &mut dir.u_z,
                    &mut dir.w_r,
                    &mut dir.u_r,
                    &mut dir.w_n,
                    &mut dir.u_n,
                ] {
                    m.mapv_inplace(|_| rng.random_range(-gru_bound..gru_bound));
                }
            }
        }
        fn xavier(m: &mut Array2<f64>, rng: &mut ChaCha8Rng) {
            let bound = (6.0 / (m.nrows() + m.ncols()) as f64).sqrt();
            m.mapv_inplace(|_| rng.random_range(-bound..bound));
        }
        xavier(&mut set.mha.w_q, &mut rng);
        xavier(&mut set.mha.w_k, &mut rng);
        xavier(&mut set.mha.w_v, &mut rng);
        xavier(&mut set.mha.w_o, &mut rng);
        set.ln.gain.fill(1.0);
        let m_dim = config.m();
        let alpha_bound = 1.0 / (m_dim as f64).sqrt();
        set.w_alpha
            .mapv_inplace(|_| rng.random_range(-alpha_bound..alpha_bound));
        xavier(&mut set.w_beta, &mut rng);
        for dense in &mut set.mlp {
            xavier(&mut dense.w, &mut rng);
        }
        set
    }
}

/// Trainable parameters plus the frozen embedding matrix they index into.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub set: ParamSet,
    pub embedding: Arc<EmbeddingMatrix>,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, embedding: Arc<EmbeddingMatrix>, seed: u64) -> Result<Self> {
        config.validate()?;
        if embedding.dim() != config.d {
            return Err(Error::config(format!(
                "embedding dim {} does not match model d {}",
                embedding.dim(),
                config.d
            )));
        }
        Ok(ModelParams {
            set: ParamSet::init(config, seed),
            embedding,
        })
    }

    pub fn zeros(config: &ModelConfig, embedding: Arc<EmbeddingMatrix>) -> Result<Self> {
        config.validate()?;
        if embedding.dim() != config.d {
            return Err(Error::config(format!(
                "embedding dim {} does not match model d {}",
                embedding.dim(),
                config.d
            )));
        }
        Ok(ModelParams {
            set: ParamSet::zeros_like(config),
            embedding,
        })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(x)) without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ModelConfig {
        let mut c = ModelConfig::new(8, 3, 4, 3);
        c.h = 4;
        c.heads = 2;
        c
    }

    #[test]
    fn tensor_enumeration_is_consistent() {
        let c = config();
        let mut set = ParamSet::init(&c, 7);
        let names: Vec<String> = set.tensors().iter().map(|t| t.name.clone()).collect();
        let names_mut: Vec<String> = set.tensors_mut().iter().map(|t| t.name.clone()).collect();
        assert_eq!(names, names_mut);
        // 2 layers x 2 directions x 9 tensors + 8 mha + 2 ln + 4 attn + 4 mlp
        assert_eq!(names.len(), 36 + 8 + 2 + 4 + 4);
    }

    #[test]
    fn config_validation() {
        let mut c = config();
        assert!(c.validate().is_ok());
        c.d = 7;
        assert!(c.validate().is_err());
        let mut c = config();
        c.heads = 3; // does not divide 2h = 8
        assert!(c.validate().is_err());
        let mut c = config();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let c = config();
        let a = ParamSet::init(&c, 3);
        let b = ParamSet::init(&c, 3);
        assert_eq!(a, b);
        let other = ParamSet::init(&c, 4);
        assert_ne!(a, other);
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert!(softplus(800.0).is_finite());
        assert!(softplus(-800.0) >= 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
    }
}
