//! MLPs, parameter storage, Adam, and spectral normalization.
//!
//! Parameters live in a [`ParamStore`] keyed by name (`w0`, `b0`, ...); a
//! store is bound onto a fresh graph once per optimization step with
//! [`bind`], which yields the parameter leaves used for one forward/backward
//! pass.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

/// Architecture of a fully-connected net: activation after every layer
/// except the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub in_dim: usize,
    pub hidden: Vec<usize>,
    pub out_dim: usize,
    pub activation: Activation,
    #[serde(default = "default_bias")]
    pub bias: bool,
    #[serde(default)]
    pub spectral_norm: bool,
}

fn default_bias() -> bool {
    true
}

impl MlpSpec {
    pub fn new(in_dim: usize, hidden: Vec<usize>, out_dim: usize, activation: Activation) -> Self {
        MlpSpec {
            in_dim,
            hidden,
            out_dim,
            activation,
            bias: true,
            spectral_norm: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim < 1 || self.out_dim < 1 || self.hidden.iter().any(|&h| h < 1) {
            return Err(Error::InvalidConfig(format!(
                "all MLP dims must be >= 1, got {} -> {:?} -> {}",
                self.in_dim, self.hidden, self.out_dim
            )));
        }
        if let Activation::LeakyRelu(s) = self.activation {
            if !s.is_finite() {
                return Err(Error::InvalidConfig("leaky_relu slope must be finite".into()));
            }
        }
        Ok(())
    }

    /// (fan_in, fan_out) per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.in_dim;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.out_dim));
        dims
    }

    pub fn n_layers(&self) -> usize {
        self.hidden.len() + 1
    }
}

#[derive(Clone, Debug)]
struct Param {
    value: Tensor,
    adam_m: Tensor,
    adam_v: Tensor,
    /// Persisted power-iteration vector for spectral normalization.
    sn_u: Option<Tensor>,
}

impl Param {
    fn new(value: Tensor) -> Self {
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        Param {
            value,
            adam_m: m,
            adam_v: v,
            sn_u: None,
        }
    }
}

/// Named parameters with per-parameter Adam state and a shared step count.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.params.insert(name.to_string(), Param::new(value));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn adam_state(&self, name: &str) -> Option<(&Tensor, &Tensor)> {
        self.params.get(name).map(|p| (&p.adam_m, &p.adam_v))
    }

    pub fn sn_u(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|p| p.sn_u.as_ref())
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// L2 norm per parameter, for diagnostics.
    pub fn param_norms(&self) -> Vec<(String, f64)> {
        self.params
            .iter()
            .map(|(n, p)| {
                let norm = p.value.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                (n.clone(), norm)
            })
            .collect()
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub(crate) fn set_adam_state(&mut self, name: &str, m: Tensor, v: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter '{name}'")))?;
        if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
            return Err(Error::ShapeMismatch {
                op: format!("adam state for '{name}'"),
                lhs: p.value.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
        p.adam_m = m;
        p.adam_v = v;
        Ok(())
    }

    pub(crate) fn set_sn_u(&mut self, name: &str, u: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter '{name}'")))?;
        p.sn_u = Some(u);
        Ok(())
    }
}

/// Weight/bias initialization: uniform on [-1/sqrt(fan_in), +1/sqrt(fan_in)]
/// for both, drawn layer by layer (weights row-major, then bias).
pub fn init(spec: &MlpSpec, rng: &mut RngState) -> Result<ParamStore> {
    spec.validate()?;
    let mut store = ParamStore::new();
    for (i, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        store.insert(&format!("w{i}"), Tensor::matrix(fan_in, fan_out, w)?);
        if spec.bias {
            let b: Vec<f64> = (0..fan_out).map(|_| rng.uniform_range(-bound, bound)).collect();
            store.insert(&format!("b{i}"), Tensor::vector(&b));
        }
        if spec.spectral_norm {
            let u: Vec<f64> = (0..fan_out).map(|_| rng.standard_normal()).collect();
            let u = normalized(&u);
            store.set_sn_u(&format!("w{i}"), Tensor::matrix(fan_out, 1, u)?)?;
        }
    }
    Ok(store)
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt() + 1e-12;
    v.iter().map(|x| x / norm).collect()
}

struct BoundLayer {
    weight: Var,
    bias: Option<Var>,
}

/// A store bound onto a graph for one step: parameter leaves plus the
/// effective (spectral-normalized) weights used by [`BoundMlp::forward`].
pub struct BoundMlp {
    layers: Vec<BoundLayer>,
    params: Vec<(String, Var)>,
    activation: Activation,
    in_dim: usize,
}

impl BoundMlp {
    /// Raw parameter leaves, in store (name) order, for gradient requests.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    /// The graph this net is bound to.
    pub fn graph(&self) -> &Graph {
        self.params[0].1.graph()
    }

    pub fn forward(&self, x: &Var) -> Result<Var> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::ShapeMismatch {
                op: "mlp forward".to_string(),
                lhs: shape,
                rhs: vec![0, self.in_dim],
            });
        }
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.matmul(&layer.weight)?;
            if let Some(b) = &layer.bias {
                let hs = h.shape();
                h = h.add(&b.broadcast_to(&hs)?)?;
            }
            if i != last {
                h = match self.activation {
                    Activation::Relu => h.relu(),
                    Activation::LeakyRelu(s) => h.leaky_relu(s),
                };
            }
        }
        Ok(h)
    }
}

/// Bind `store` onto `graph`. With `spec.spectral_norm` set, each weight
/// takes one power-iteration step (the updated `u` is persisted in the
/// store) and the layer uses `w / sigma` with `sigma = v^T W u`; gradients
/// flow through both numerator and denominator.
pub fn bind(graph: &Graph, store: &mut ParamStore, spec: &MlpSpec, trainable: bool) -> Result<BoundMlp> {
    spec.validate()?;
    let mut layers = Vec::new();
    let mut params = Vec::new();
    for (i, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
        let wname = format!("w{i}");
        let wt = store
            .get(&wname)
            .ok_or_else(|| Error::InvalidArgument(format!("store missing parameter '{wname}'")))?
            .clone();
        if wt.shape() != [fan_in, fan_out] {
            return Err(Error::ShapeMismatch {
                op: format!("bind '{wname}'"),
                lhs: wt.shape().to_vec(),
                rhs: vec![fan_in, fan_out],
            });
        }
        let w = graph.leaf(wt.clone(), trainable);
        params.push((wname.clone(), w.clone()));

        let weight = if spec.spectral_norm {
            let u_prev = store
                .sn_u(&wname)
                .cloned()
                .unwrap_or_else(|| Tensor::full(&[fan_out, 1], 1.0 / (fan_out as f64).sqrt()));
            // One power-iteration step on the raw weight values.
            let wu = wt.matmul(&u_prev)?; // (in, 1)
            let v = Tensor::matrix(fan_in, 1, normalized(wu.data()))?;
            let wtv = wt.transpose()?.matmul(&v)?; // (out, 1)
            let u = Tensor::matrix(fan_out, 1, normalized(wtv.data()))?;
            store.set_sn_u(&wname, u.clone())?;
            // sigma = v^T W u as a graph expression.
            let vc = graph.constant(v.transpose()?); // (1, in)
            let uc = graph.constant(u); // (out, 1)
            let sigma = vc.matmul(&w)?.matmul(&uc)?; // (1, 1)
            let inv = sigma.recip().reshape(&[])?.broadcast_to(&[fan_in, fan_out])?;
            w.mul(&inv)?
        } else {
            w
        };

        let bias = if spec.bias {
            let bname = format!("b{i}");
            let bt = store
                .get(&bname)
                .ok_or_else(|| Error::InvalidArgument(format!("store missing parameter '{bname}'")))?
                .clone();
            let b = graph.leaf(bt, trainable);
            params.push((bname, b.clone()));
            Some(b)
        } else {
            None
        };
        layers.push(BoundLayer { weight, bias });
    }
    Ok(BoundMlp {
        layers,
        params,
        activation: spec.activation,
        in_dim: spec.in_dim,
    })
}

/// Evaluate the net on plain values (throwaway graph). Spectral-norm nets
/// still take their power-iteration step, so pass a clone when the store
/// must not change.
pub fn eval_forward(store: &mut ParamStore, spec: &MlpSpec, x: &Tensor) -> Result<Tensor> {
    let graph = Graph::new();
    let xv = graph.constant(x.clone());
    let mlp = bind(&graph, store, spec, false)?;
    Ok(mlp.forward(&xv)?.value())
}

/// Reconstruct the architecture implied by a store's weight shapes.
pub fn infer_spec(store: &ParamStore, activation: Activation) -> Result<MlpSpec> {
    let mut dims = Vec::new();
    let mut i = 0;
    while let Some(w) = store.get(&format!("w{i}")) {
        let s = w.shape();
        if s.len() != 2 {
            return Err(Error::InvalidArgument(format!("w{i} is not a matrix")));
        }
        dims.push((s[0], s[1]));
        i += 1;
    }
    if dims.is_empty() {
        return Err(Error::InvalidArgument("store holds no layers".to_string()));
    }
    let mut spec = MlpSpec::new(
        dims[0].0,
        dims[..dims.len() - 1].iter().map(|d| d.1).collect(),
        dims[dims.len() - 1].1,
        activation,
    );
    spec.bias = store.get("b0").is_some();
    spec.spectral_norm = store.sn_u("w0").is_some();
    Ok(spec)
}

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One bias-corrected Adam update, in place. The shared step count advances
/// once per call.
pub fn adam_step(store: &mut ParamStore, grads: &[(String, Tensor)], hyper: &AdamHyper) -> Result<()> {
    for (name, g) in grads {
        let p = store
            .params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter '{name}'")))?;
        if g.shape() != p.value.shape() {
            return Err(Error::ShapeMismatch {
                op: format!("adam_step '{name}'"),
                lhs: p.value.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    store.step += 1;
    let t = store.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for (name, g) in grads {
        let p = store.params.get_mut(name).expect("checked above");
        let (m, v, w) = (p.adam_m.data_mut(), p.adam_v.data_mut(), p.value.data_mut());
        for ((mi, vi), (wi, gi)) in m.iter_mut().zip(v.iter_mut()).zip(w.iter_mut().zip(g.data())) {
            *mi = hyper.beta1 * *mi + (1.0 - hyper.beta1) * gi;
            *vi = hyper.beta2 * *vi + (1.0 - hyper.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *wi -= hyper.lr * mhat / (vhat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}
