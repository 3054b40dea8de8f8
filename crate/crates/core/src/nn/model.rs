use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::arch::{Architecture, LayerSpec, NUM_AUS, NUM_EXPRESSIONS};
use super::layers::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Variance-preserving default for uniform init: Var(U(-s, s)) = s²/3.
pub const DEFAULT_INIT_SCALE: f64 = 1.732_050_807_568_877_2;

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

/// A trainable tensor with its gradient slot.
///
/// `touched` records whether any backward pass reached this parameter since the
/// last [`Model::zero_grad`]; the optimizer leaves untouched parameters alone.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub touched: bool,
}

impl Param {
    fn new(name: String, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            name,
            value,
            grad,
            touched: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    weight: Param,
    bias: Param,
}

impl Dense {
    fn forward(&self, x: &Tensor) -> Tensor {
        layers::dense_forward(x, &self.weight.value, &self.bias.value)
    }

    fn backward(&mut self, x: &Tensor, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        self.weight.touched = true;
        self.bias.touched = true;
        layers::dense_backward(
            x,
            &self.weight.value,
            dy,
            &mut self.weight.grad,
            &mut self.bias.grad,
            need_dx,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TrunkLayer {
    Dense(Dense),
    Conv { geom: ConvGeom, weight: Param, bias: Param },
    Relu,
    Flatten,
}

/// Per-layer records from one forward pass.
///
/// Holds the input of every trunk layer, the feature layer's input and
/// pre-activation, and the post-ReLU features fed to both heads.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    model_id: u64,
    generation: u64,
    trunk_inputs: Vec<Tensor>,
    feature_input: Tensor,
    feature_pre: Tensor,
    features: Tensor,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.features.rows()
    }

    /// Post-ReLU shared features, `[n, feature_dim]`.
    pub fn features(&self) -> &Tensor {
        &self.features
    }

    /// Number of layer records; equals trunk layers + feature layer + two heads.
    pub fn len(&self) -> usize {
        self.trunk_inputs.len() + 3
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Output of [`Model::forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub expr_logits: Tensor,
    pub au_logits: Tensor,
    pub cache: ForwardCache,
}

/// Trunk, shared feature layer, and the expression and AU heads.
#[derive(Debug, Clone)]
pub struct Model {
    arch: Architecture,
    trunk: Vec<TrunkLayer>,
    feature: Dense,
    expr_head: Dense,
    au_head: Dense,
    id: u64,
    generation: u64,
}

impl PartialEq for Model {
    /// Structural equality on architecture and parameter values/gradients.
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.trunk == other.trunk
            && self.feature == other.feature
            && self.expr_head == other.expr_head
            && self.au_head == other.au_head
    }
}

/// Which parameters a [`Param`] belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Trunk,
    Feature,
    ExprHead,
    AuHead,
}

impl Model {
    /// Builds a model with weights drawn from U(-s, s), `s = init_scale / sqrt(fan_in)`,
    /// and zero biases. Identical `(arch, seed, init_scale)` give identical parameters.
    pub fn build(arch: &Architecture, seed: u64, init_scale: f64) -> Result<Self> {
        if !(init_scale >= 0.0 && init_scale.is_finite()) {
            return Err(Error::Config(format!(
                "init_scale must be finite and nonnegative, got {init_scale}"
            )));
        }
        let shapes = arch.layer_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: &[usize], fan_in: usize| -> Tensor {
            let s = init_scale / (fan_in as f64).sqrt();
            let mut t = Tensor::zeros(shape);
            if s > 0.0 {
                for v in t.data_mut() {
                    *v = rng.random_range(-s..=s);
                }
            }
            t
        };

        let mut trunk = Vec::with_capacity(arch.trunk.len());
        for (i, spec) in arch.trunk.iter().enumerate() {
            let layer = match *spec {
                LayerSpec::Dense { in_dim, out_dim } => TrunkLayer::Dense(Dense {
                    weight: Param::new(format!("trunk.{i}.weight"), uniform(&[out_dim, in_dim], in_dim)),
                    bias: Param::new(format!("trunk.{i}.bias"), Tensor::zeros(&[out_dim])),
                }),
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel_size,
                    stride,
                } => {
                    let input = &shapes[i];
                    let fan_in = in_channels * kernel_size * kernel_size;
                    TrunkLayer::Conv {
                        geom: ConvGeom {
                            in_c: in_channels,
                            in_h: input[1],
                            in_w: input[2],
                            out_c: out_channels,
                            k: kernel_size,
                            stride,
                        },
                        weight: Param::new(
                            format!("trunk.{i}.weight"),
                            uniform(&[out_channels, in_channels, kernel_size, kernel_size], fan_in),
                        ),
                        bias: Param::new(format!("trunk.{i}.bias"), Tensor::zeros(&[out_channels])),
                    }
                }
                LayerSpec::Relu => TrunkLayer::Relu,
                LayerSpec::Flatten => TrunkLayer::Flatten,
            };
            trunk.push(layer);
        }

        let trunk_dim = arch.trunk_output_dim();
        let fd = arch.feature_dim;
        let mut dense = |name: &str, in_dim: usize, out_dim: usize| Dense {
            weight: Param::new(format!("{name}.weight"), uniform(&[out_dim, in_dim], in_dim)),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[out_dim])),
        };
        let feature = dense("feature", trunk_dim, fd);
        let expr_head = dense("expr_head", fd, NUM_EXPRESSIONS);
        let au_head = dense("au_head", fd, NUM_AUS);

        Ok(Model {
            arch: arch.clone(),
            trunk,
            feature,
            expr_head,
            au_head,
            id: NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed),
            generation: 0,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    /// All parameters in canonical order: trunk, feature, expression head, AU head.
    pub fn params(&self) -> Vec<&Param> {
        self.params_with_group().into_iter().map(|(_, p)| p).collect()
    }

    pub fn params_with_group(&self) -> Vec<(ParamGroup, &Param)> {
        let mut out = Vec::new();
        for layer in &self.trunk {
            match layer {
                TrunkLayer::Dense(d) => {
                    out.push((ParamGroup::Trunk, &d.weight));
                    out.push((ParamGroup::Trunk, &d.bias));
                }
                TrunkLayer::Conv { weight, bias, .. } => {
                    out.push((ParamGroup::Trunk, weight));
                    out.push((ParamGroup::Trunk, bias));
                }
                TrunkLayer::Relu | TrunkLayer::Flatten => {}
            }
        }
        for (g, d) in [
            (ParamGroup::Feature, &self.feature),
            (ParamGroup::ExprHead, &self.expr_head),
            (ParamGroup::AuHead, &self.au_head),
        ] {
            out.push((g, &d.weight));
            out.push((g, &d.bias));
        }
        out
    }

    /// Mutable access to all parameters, same order as [`Model::params`].
    ///
    /// Invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.generation += 1;
        let mut out = Vec::new();
        for layer in &mut self.trunk {
            match layer {
                TrunkLayer::Dense(d) => {
                    out.push(&mut d.weight);
                    out.push(&mut d.bias);
                }
                TrunkLayer::Conv { weight, bias, .. } => {
                    out.push(weight);
                    out.push(bias);
                }
                TrunkLayer::Relu | TrunkLayer::Flatten => {}
            }
        }
        for d in [&mut self.feature, &mut self.expr_head, &mut self.au_head] {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params().iter().map(|p| p.value.shape().to_vec()).collect()
    }

    /// Clears every gradient slot and touched flag.
    pub fn zero_grad(&mut self) {
        // values are untouched, so outstanding caches stay valid
        let generation = self.generation;
        for p in self.params_mut() {
            p.grad.fill(0.0);
            p.touched = false;
        }
        self.generation = generation;
    }

    /// Runs the trunk, the ReLU feature layer and both heads on `batch`
    /// (`[n, input_shape...]`).
    pub fn forward(&self, batch: &Tensor) -> Result<ForwardOutput> {
        let mut expected = vec![batch.rows()];
        expected.extend_from_slice(&self.arch.input_shape);
        if batch.rows() == 0 || batch.shape() != expected.as_slice() {
            let mut want = vec![0];
            want.extend_from_slice(&self.arch.input_shape);
            if batch.rows() > 0 {
                want[0] = batch.rows();
            }
            return Err(Error::dim("model input", &want, batch.shape()));
        }
        let n = batch.rows();
        let mut trunk_inputs = Vec::with_capacity(self.trunk.len());
        let mut x = batch.clone();
        for layer in &self.trunk {
            let y = match layer {
                TrunkLayer::Dense(d) => d.forward(&x),
                TrunkLayer::Conv { geom, weight, bias } => {
                    layers::conv_forward(&x, &weight.value, &bias.value, *geom)
                }
                TrunkLayer::Relu => layers::relu_forward(&x),
                TrunkLayer::Flatten => {
                    let w = x.row_len();
                    x.clone().reshape(&[n, w])?
                }
            };
            trunk_inputs.push(std::mem::replace(&mut x, y));
        }
        let w = x.row_len();
        let feature_input = x.reshape(&[n, w])?;
        let feature_pre = self.feature.forward(&feature_input);
        let features = layers::relu_forward(&feature_pre);
        let expr_logits = self.expr_head.forward(&features);
        let au_logits = self.au_head.forward(&features);
        Ok(ForwardOutput {
            expr_logits,
            au_logits,
            cache: ForwardCache {
                model_id: self.id,
                generation: self.generation,
                trunk_inputs,
                feature_input,
                feature_pre,
                features,
            },
        })
    }

    /// Accumulates parameter gradients given loss gradients w.r.t. the logits
    /// of one or both heads. Parameters of an absent head are left untouched.
    pub fn backward(
        &mut self,
        cache: &ForwardCache,
        expr_logit_grads: Option<&Tensor>,
        au_logit_grads: Option<&Tensor>,
    ) -> Result<()> {
        if cache.model_id != self.id || cache.generation != self.generation {
            return Err(Error::Contract(
                "forward cache does not belong to the current model state".into(),
            ));
        }
        if cache.trunk_inputs.len() != self.trunk.len() {
            return Err(Error::Contract("forward cache has wrong layer count".into()));
        }
        if expr_logit_grads.is_none() && au_logit_grads.is_none() {
            return Err(Error::Contract(
                "backward needs logit gradients for at least one head".into(),
            ));
        }
        let n = cache.batch_size();
        let mut d_features = Tensor::zeros(cache.features.shape());
        for (grads, head, width, label) in [
            (expr_logit_grads, &mut self.expr_head, NUM_EXPRESSIONS, "expression logit gradients"),
            (au_logit_grads, &mut self.au_head, NUM_AUS, "AU logit gradients"),
        ] {
            if let Some(g) = grads {
                if g.shape() != [n, width] {
                    return Err(Error::dim(label, &[n, width], g.shape()));
                }
                let dx = head
                    .backward(&cache.features, g, true)
                    .expect("dx requested");
                d_features.add_assign(&dx)?;
            }
        }

        let d_pre = layers::relu_backward(&cache.feature_pre, &d_features);
        // Layers before the first parameterized trunk layer need no gradient.
        let first = self
            .trunk
            .iter()
            .position(|l| matches!(l, TrunkLayer::Dense(_) | TrunkLayer::Conv { .. }));
        let mut dy = match self.feature.backward(&cache.feature_input, &d_pre, first.is_some()) {
            Some(dx) => dx,
            None => return Ok(()),
        };
        let first = first.expect("checked above");
        for i in (first..self.trunk.len()).rev() {
            let x = &cache.trunk_inputs[i];
            let need_dx = i > first;
            let dx = match &mut self.trunk[i] {
                TrunkLayer::Dense(d) => {
                    let dy = dy.reshape(&[n, d.weight.value.shape()[0]])?;
                    d.backward(x, &dy, need_dx)
                }
                TrunkLayer::Conv { geom, weight, bias } => {
                    weight.touched = true;
                    bias.touched = true;
                    let dy = dy.reshape(&[n, geom.out_c, geom.out_h(), geom.out_w()])?;
                    layers::conv_backward(
                        x,
                        &weight.value,
                        &dy,
                        &mut weight.grad,
                        &mut bias.grad,
                        *geom,
                        need_dx,
                    )
                }
                TrunkLayer::Relu => {
                    let dy = dy.reshape(x.shape())?;
                    Some(layers::relu_backward(x, &dy))
                }
                TrunkLayer::Flatten => Some(dy.reshape(x.shape())?),
            };
            match dx {
                Some(dx) => dy = dx,
                None => break,
            }
        }
        Ok(())
    }
}
