//! A minimal reverse-mode tape over the handful of operations the networks use.

use std::collections::{BTreeMap, HashMap};

use ndarray::{s, Array1, Array4};

use crate::error::{Error, Result};
use crate::network::config::LayerSpec;
use crate::network::ops::{self, Act, ConvSpec};
use crate::network::weights::{ConvParams, Weights};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input { requires_grad: bool },
    Conv { input: Var, layer: String, spec: ConvSpec, act: Act, skip: Option<Var> },
    MaxPool { input: Var, argmax: Vec<u8> },
    Upsample { input: Var },
    Concat { a: Var, b: Var },
}

struct Node {
    value: Array4<f32>,
    op: Op,
}

pub struct Graph<'w> {
    weights: &'w Weights,
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    /// Parameter gradients for every layer that took part in the graph.
    pub params: Weights,
    inputs: HashMap<Var, Array4<f32>>,
}

impl Gradients {
    pub fn input(&self, v: Var) -> Option<&Array4<f32>> {
        self.inputs.get(&v)
    }

    pub fn take_input(&mut self, v: Var) -> Option<Array4<f32>> {
        self.inputs.remove(&v)
    }
}

impl<'w> Graph<'w> {
    pub fn new(weights: &'w Weights) -> Self {
        Self { weights, nodes: Vec::new() }
    }

    fn push(&mut self, value: Array4<f32>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Array4<f32>, requires_grad: bool) -> Var {
        self.push(value.as_standard_layout().into_owned(), Op::Input { requires_grad })
    }

    pub fn value(&self, v: Var) -> &Array4<f32> {
        &self.nodes[v.0].value
    }

    pub fn into_value(mut self, v: Var) -> Array4<f32> {
        std::mem::take(&mut self.nodes[v.0].value)
    }

    pub fn conv(&mut self, input: Var, layer: &LayerSpec, skip: Option<Var>) -> Result<Var> {
        let params = self.weights.layer(&layer.name)?;
        let x = self.value(input);
        if x.dim().1 != layer.in_channels || params.weight.dim().1 != layer.in_channels {
            return Err(Error::ShapeInconsistency(format!(
                "layer `{}` expects {} input channels, got {}",
                layer.name,
                layer.in_channels,
                x.dim().1
            )));
        }
        let (_, _, h, w) = x.dim();
        let out_dims = (layer.conv.out_size(h), layer.conv.out_size(w));
        let (Some(ho), Some(wo)) = out_dims else {
            return Err(Error::ShapeInconsistency(format!("input {h}x{w} too small for `{}`", layer.name)));
        };
        if let Some(sk) = skip {
            let sd = self.value(sk).dim();
            if sd != (x.dim().0, layer.out_channels, ho, wo) {
                return Err(Error::ShapeInconsistency(format!(
                    "skip into `{}` has shape {sd:?}, expected {:?}",
                    layer.name,
                    (x.dim().0, layer.out_channels, ho, wo)
                )));
            }
        }
        let y = ops::conv_forward(
            x,
            &params.weight,
            params.bias.as_slice().expect("contiguous bias"),
            layer.conv,
            skip.map(|s| self.value(s)),
            layer.act,
        );
        Ok(self.push(y, Op::Conv { input, layer: layer.name.clone(), spec: layer.conv, act: layer.act, skip }))
    }

    pub fn maxpool(&mut self, input: Var) -> Var {
        let (y, argmax) = ops::maxpool2_forward(self.value(input));
        self.push(y, Op::MaxPool { input, argmax })
    }

    pub fn upsample(&mut self, input: Var) -> Var {
        let y = ops::upsample2_forward(self.value(input));
        self.push(y, Op::Upsample { input })
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.value(a).dim(), self.value(b).dim());
        if (da.0, da.2, da.3) != (db.0, db.2, db.3) {
            return Err(Error::ShapeInconsistency(format!("cannot concatenate {da:?} with {db:?}")));
        }
        let y = ops::concat_channels(self.value(a), self.value(b));
        Ok(self.push(y, Op::Concat { a, b }))
    }

    /// Back-propagates the given output gradients through the whole tape.
    pub fn backward(&self, seeds: Vec<(Var, Array4<f32>)>) -> Gradients {
        let mut grads: Vec<Option<Array4<f32>>> = vec![None; self.nodes.len()];
        fn add(slot: &mut Option<Array4<f32>>, g: Array4<f32>) {
            match slot {
                Some(acc) => *acc += &g,
                None => *slot = Some(g),
            }
        }
        for (v, g) in seeds {
            assert_eq!(g.dim(), self.value(v).dim(), "seed gradient shape");
            add(&mut grads[v.0], g);
        }
        let mut params: BTreeMap<String, ConvParams> = BTreeMap::new();
        let mut inputs = HashMap::new();
        let needs_grad = self.requires_grad_mask();

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input { requires_grad } => {
                    if *requires_grad {
                        inputs.insert(Var(i), g);
                    }
                }
                Op::Conv { input, layer, spec, act, skip } => {
                    let mut dpre = g;
                    ndarray::Zip::from(&mut dpre).and(&node.value).for_each(|d, &y| *d *= act.grad_from_output(y));
                    if let Some(sk) = skip {
                        if needs_grad[sk.0] {
                            add(&mut grads[sk.0], dpre.clone());
                        }
                    }
                    let w = &self.weights.layer(layer).expect("layer checked at build time").weight;
                    let cg = ops::conv_backward(self.value(*input), w, *spec, &dpre, needs_grad[input.0]);
                    let entry = params.entry(layer.clone()).or_insert_with(|| ConvParams {
                        weight: Array4::zeros(cg.weight.dim()),
                        bias: Array1::zeros(cg.bias.len()),
                    });
                    entry.weight += &cg.weight;
                    entry.bias += &Array1::from(cg.bias);
                    if let Some(dx) = cg.input {
                        add(&mut grads[input.0], dx);
                    }
                }
                Op::MaxPool { input, argmax } => {
                    if needs_grad[input.0] {
                        let (_, _, h, w) = self.value(*input).dim();
                        add(&mut grads[input.0], ops::maxpool2_backward(&g, argmax, h, w));
                    }
                }
                Op::Upsample { input } => {
                    if needs_grad[input.0] {
                        add(&mut grads[input.0], ops::upsample2_backward(&g));
                    }
                }
                Op::Concat { a, b } => {
                    let ca = self.value(*a).dim().1;
                    if needs_grad[a.0] {
                        add(&mut grads[a.0], g.slice(s![.., ..ca, .., ..]).to_owned());
                    }
                    if needs_grad[b.0] {
                        add(&mut grads[b.0], g.slice(s![.., ca.., .., ..]).to_owned());
                    }
                }
            }
        }
        Gradients { params: Weights::from_layers(params), inputs }
    }

    /// A node needs a gradient when a parameter or a grad-requiring input
    /// lies upstream of it.
    fn requires_grad_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            mask[i] = match &n.op {
                Op::Input { requires_grad } => *requires_grad,
                Op::Conv { .. } => true,
                Op::MaxPool { input, .. } | Op::Upsample { input } => mask[input.0],
                Op::Concat { a, b } => mask[a.0] || mask[b.0],
            };
        }
        mask
    }
}
