use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Conv2d, Dense, Flatten, Layer, MaxPool2d, Relu};
use super::{Mode, Param};
use crate::error::{contract, Error, Result};
use crate::gate::{GateInit, NoiseGate};
use crate::tensor::Tensor;

/// One vector of uniforms per gate layer, in layer order.
pub type NoiseDraws = Vec<Vec<f64>>;

/// A prunable structure: `index` within the gate stored at `layers[layer]`.
/// Indices refer to the current (possibly already shrunk) network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StructureId {
    pub layer: usize,
    pub index: usize,
}

/// What a prune step removed from one gate layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemovalDescriptor {
    pub layer: usize,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub ce: f64,
    /// Unscaled Σ KL over live structures.
    pub kl: f64,
    /// ce + kl_weight · kl
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<Layer>,
    input_shape: Vec<usize>,
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, c) = (logits.batch(), logits.row_len());
    if logits.shape().len() != 2 || labels.len() != b || b == 0 {
        return Err(contract(format!("logits {:?} vs {} labels", logits.shape(), labels.len())));
    }
    let mut grad = vec![0.0; b * c];
    let mut loss = 0.0;
    for ((row, g), &y) in logits.data().chunks(c).zip(grad.chunks_mut(c)).zip(labels) {
        if y >= c {
            return Err(contract(format!("label {y} out of range for {c} classes")));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[y];
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = (v - lse).exp() / b as f64;
        }
        g[y] -= 1.0 / b as f64;
    }
    Ok((loss / b as f64, Tensor::new(vec![b, c], grad)?))
}

impl Network {
    /// Wraps `layers`; checks that a single example of `input_shape` flows
    /// through in eval mode.
    pub fn new(layers: Vec<Layer>, input_shape: Vec<usize>) -> Result<Self> {
        let net = Self { layers, input_shape };
        net.check_shapes()?;
        Ok(net)
    }

    fn check_shapes(&self) -> Result<()> {
        let mut shape = vec![1];
        shape.extend(&self.input_shape);
        let out = self.infer(&Tensor::zeros(shape), Mode::Eval, None)?;
        if out.shape().len() != 2 {
            return Err(contract(format!("network output has shape {:?}, expected [batch, classes]", out.shape())));
        }
        Ok(())
    }

    /// Fully connected net: `hidden_layers` blocks of Dense → Gate → ReLU of
    /// width `width`, then a linear classifier. Gates are omitted when `gate`
    /// is `None`.
    pub fn mlp(input_shape: &[usize], hidden_layers: usize, width: usize, classes: usize, gate: Option<GateInit>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = vec![Layer::Flatten(Flatten::default())];
        let mut fan_in: usize = input_shape.iter().product();
        for _ in 0..hidden_layers {
            layers.push(Layer::Dense(Dense::new(fan_in, width, &mut rng)));
            if let Some(init) = gate {
                layers.push(Layer::Gate(NoiseGate::new(width, init)?));
            }
            layers.push(Layer::Relu(Relu::default()));
            fan_in = width;
        }
        layers.push(Layer::Dense(Dense::new(fan_in, classes, &mut rng)));
        Self::new(layers, input_shape.to_vec())
    }

    /// conv(6,5×5) → pool → conv(16,5×5) → pool → dense 120 → dense 84 →
    /// classifier, with a gate after every layer except the classifier.
    pub fn lenet5(input_shape: &[usize], classes: usize, gate: Option<GateInit>, seed: u64) -> Result<Self> {
        if input_shape.len() != 3 {
            return Err(contract("lenet5 needs a [channels, height, width] input"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
        if h < 16 || w < 16 {
            return Err(contract("lenet5 needs inputs of at least 16x16"));
        }
        let mut layers = Vec::new();
        let push_gate = |layers: &mut Vec<Layer>, n: usize| -> Result<()> {
            if let Some(init) = gate {
                layers.push(Layer::Gate(NoiseGate::new(n, init)?));
            }
            Ok(())
        };
        layers.push(Layer::Conv2d(Conv2d::new(c, 6, 5, 1, 0, &mut rng)));
        push_gate(&mut layers, 6)?;
        layers.push(Layer::Relu(Relu::default()));
        layers.push(Layer::MaxPool2d(MaxPool2d::new(2, 2)));
        layers.push(Layer::Conv2d(Conv2d::new(6, 16, 5, 1, 0, &mut rng)));
        push_gate(&mut layers, 16)?;
        layers.push(Layer::Relu(Relu::default()));
        layers.push(Layer::MaxPool2d(MaxPool2d::new(2, 2)));
        layers.push(Layer::Flatten(Flatten::default()));
        let (h2, w2) = (((h - 4) / 2 - 4) / 2, ((w - 4) / 2 - 4) / 2);
        layers.push(Layer::Dense(Dense::new(16 * h2 * w2, 120, &mut rng)));
        push_gate(&mut layers, 120)?;
        layers.push(Layer::Relu(Relu::default()));
        layers.push(Layer::Dense(Dense::new(120, 84, &mut rng)));
        push_gate(&mut layers, 84)?;
        layers.push(Layer::Relu(Relu::default()));
        layers.push(Layer::Dense(Dense::new(84, classes, &mut rng)));
        Self::new(layers, input_shape.to_vec())
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(contract(format!("batch shape {:?} does not match network input {:?}", x.shape(), self.input_shape)));
        }
        Ok(())
    }

    fn check_noise(&self, mode: Mode, noise: Option<&NoiseDraws>) -> Result<()> {
        match (mode, noise) {
            (Mode::Train, Some(n)) if n.len() == self.gate_layers().len() => Ok(()),
            (Mode::Train, Some(n)) => Err(contract(format!("{} noise vectors for {} gate layers", n.len(), self.gate_layers().len()))),
            (Mode::Train, None) => Err(contract("train mode needs noise draws")),
            (Mode::Eval, None) => Ok(()),
            (Mode::Eval, Some(_)) => Err(contract("eval mode takes no noise draws")),
        }
    }

    /// Cached forward pass for a subsequent [`Network::backward`].
    pub fn forward(&mut self, x: &Tensor, mode: Mode, noise: Option<&NoiseDraws>) -> Result<Tensor> {
        self.check_input(x)?;
        self.check_noise(mode, noise)?;
        let mut h = x.clone();
        let mut g = 0;
        for layer in &mut self.layers {
            let u = match layer {
                Layer::Gate(_) => {
                    g += 1;
                    noise.map(|n| n[g - 1].as_slice())
                }
                _ => None,
            };
            h = layer.forward(&h, mode, u)?;
        }
        Ok(h)
    }

    /// Forward pass that touches no caches; safe on a shared snapshot.
    pub fn infer(&self, x: &Tensor, mode: Mode, noise: Option<&NoiseDraws>) -> Result<Tensor> {
        self.check_input(x)?;
        self.check_noise(mode, noise)?;
        let mut h = x.clone();
        let mut g = 0;
        for layer in &self.layers {
            let u = match layer {
                Layer::Gate(_) => {
                    g += 1;
                    noise.map(|n| n[g - 1].as_slice())
                }
                _ => None,
            };
            h = layer.apply(&h, mode, u)?;
        }
        Ok(h)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.infer(x, Mode::Eval, None)
    }

    /// Forward pass with every gate multiplying by fixed per-structure
    /// values (pruned structures still emit 0).
    pub fn infer_with_multipliers(&self, x: &Tensor, thetas: &[Vec<f64>]) -> Result<Tensor> {
        self.check_input(x)?;
        if thetas.len() != self.gate_layers().len() {
            return Err(contract("one multiplier vector per gate layer required"));
        }
        let mut h = x.clone();
        let mut g = 0;
        for layer in &self.layers {
            h = match layer {
                Layer::Gate(gate) => {
                    g += 1;
                    gate.apply_multipliers(&h, &thetas[g - 1])?
                }
                other => other.apply(&h, Mode::Eval, None)?,
            };
        }
        Ok(h)
    }

    pub fn backward(&mut self, dlogits: &Tensor) -> Result<()> {
        let mut d = dlogits.clone();
        for layer in self.layers.iter_mut().rev() {
            d = layer.backward(&d)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    /// Σ KL over all live gate structures.
    pub fn kl(&self) -> Result<f64> {
        let mut total = 0.0;
        for l in &self.layers {
            if let Layer::Gate(g) = l {
                total += g.kl()?;
            }
        }
        Ok(total)
    }

    /// Step objective without touching gradients: mean CE + kl_weight·ΣKL.
    pub fn loss(&self, x: &Tensor, labels: &[usize], noise: &NoiseDraws, kl_weight: f64) -> Result<StepLoss> {
        let logits = self.infer(x, Mode::Train, Some(noise))?;
        let (ce, _) = softmax_cross_entropy(&logits, labels)?;
        let kl = self.kl()?;
        Ok(StepLoss { ce, kl, total: ce + kl_weight * kl })
    }

    /// Zeroes gradients, then fills them with ∇(mean CE + kl_weight·ΣKL).
    /// `kl_weight` is kl_scale / N for a training set of N examples.
    pub fn loss_and_grad(&mut self, x: &Tensor, labels: &[usize], noise: &NoiseDraws, kl_weight: f64) -> Result<StepLoss> {
        self.zero_grad();
        let logits = self.forward(x, Mode::Train, Some(noise))?;
        let (ce, dlogits) = softmax_cross_entropy(&logits, labels)?;
        self.backward(&dlogits)?;
        let mut kl = 0.0;
        for l in &mut self.layers {
            if let Layer::Gate(g) = l {
                kl += g.accumulate_kl_grad(kl_weight)?;
            }
        }
        self.ensure_finite_grads()?;
        Ok(StepLoss { ce, kl, total: ce + kl_weight * kl })
    }

    fn ensure_finite_grads(&self) -> Result<()> {
        for (li, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Gate(g) => g.ensure_finite_grads(li)?,
                other => {
                    for (pi, p) in other.params().iter().enumerate() {
                        if let Some(i) = p.grad().iter().position(|g| !g.is_finite()) {
                            let name = if pi == 0 { "weight" } else { "bias" };
                            return Err(Error::Numerical(format!("non-finite gradient in {} layer {li}, {name}[{i}]", other.name())));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Positions of gate layers in `layers`.
    pub fn gate_layers(&self) -> Vec<usize> {
        self.layers.iter().enumerate().filter(|(_, l)| matches!(l, Layer::Gate(_))).map(|(i, _)| i).collect()
    }

    pub fn gate(&self, layer: usize) -> Result<&NoiseGate> {
        match self.layers.get(layer) {
            Some(Layer::Gate(g)) => Ok(g),
            _ => Err(contract(format!("layer {layer} is not a gate"))),
        }
    }

    pub fn gate_mut(&mut self, layer: usize) -> Result<&mut NoiseGate> {
        match self.layers.get_mut(layer) {
            Some(Layer::Gate(g)) => Ok(g),
            _ => Err(contract(format!("layer {layer} is not a gate"))),
        }
    }

    pub fn gates(&self) -> impl Iterator<Item = (usize, &NoiseGate)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| match l {
            Layer::Gate(g) => Some((i, g)),
            _ => None,
        })
    }

    /// Live structures in ascending (layer, index) order.
    pub fn alive_structures(&self) -> Vec<StructureId> {
        self.gates()
            .flat_map(|(layer, g)| g.alive.iter().enumerate().filter(|(_, &a)| a).map(move |(index, _)| StructureId { layer, index }))
            .collect()
    }

    pub fn n_alive_per_gate(&self) -> Vec<usize> {
        self.gates().map(|(_, g)| g.n_alive()).collect()
    }

    pub fn n_structures(&self) -> usize {
        self.gates().map(|(_, g)| g.len()).sum()
    }

    /// One uniform draw in (0, 1) per gate structure.
    pub fn draw_noise(&self, rng: &mut impl Rng) -> NoiseDraws {
        self.gates().map(|(_, g)| (0..g.len()).map(|_| rng.sample(Open01)).collect()).collect()
    }

    /// Marks structures as pruned. Indices are validated per layer before
    /// anything changes.
    pub fn prune(&mut self, ids: &[StructureId]) -> Result<Vec<RemovalDescriptor>> {
        let mut by_layer: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for id in ids {
            by_layer.entry(id.layer).or_default().push(id.index);
        }
        for (&layer, idx) in &by_layer {
            let g = self.gate(layer)?;
            let mut probe = g.alive.clone();
            for &i in idx {
                match probe.get_mut(i) {
                    Some(a) if *a => *a = false,
                    Some(_) => return Err(contract(format!("structure {i} of layer {layer} is already pruned or listed twice"))),
                    None => return Err(contract(format!("structure {i} out of range in layer {layer}"))),
                }
            }
        }
        let mut out = Vec::new();
        for (layer, idx) in by_layer {
            let indices = self.gate_mut(layer)?.prune_indices(&idx)?;
            out.push(RemovalDescriptor { layer, indices });
        }
        Ok(out)
    }

    fn producer(&self, gate_layer: usize) -> Result<usize> {
        (0..gate_layer)
            .rev()
            .find(|&i| matches!(self.layers[i], Layer::Dense(_) | Layer::Conv2d(_)))
            .ok_or_else(|| contract(format!("gate at layer {gate_layer} has no producing layer")))
    }

    fn consumer(&self, gate_layer: usize) -> Option<usize> {
        (gate_layer + 1..self.layers.len()).find(|&i| matches!(self.layers[i], Layer::Dense(_) | Layer::Conv2d(_)))
    }

    /// Physically removes every pruned structure: producer rows/filters and
    /// biases, gate entries, and the consumer's matching input columns or
    /// channel slices (channel-major across a flatten).
    pub fn compact(&mut self) -> Result<()> {
        for gl in self.gate_layers() {
            let keep = self.gate(gl)?.alive.clone();
            if keep.iter().all(|&k| k) {
                continue;
            }
            let n = keep.len();
            let prod = self.producer(gl)?;
            match &mut self.layers[prod] {
                Layer::Dense(d) => {
                    d.weight.retain_grouped(0, 1, &keep);
                    d.bias.retain_grouped(0, 1, &keep);
                }
                Layer::Conv2d(c) => {
                    c.filters.retain_grouped(0, 1, &keep);
                    c.bias.retain_grouped(0, 1, &keep);
                }
                _ => unreachable!(),
            }
            if let Some(cons) = self.consumer(gl) {
                match &mut self.layers[cons] {
                    Layer::Dense(d) => {
                        let in_dim = d.in_dim();
                        if n == 0 || in_dim % n != 0 {
                            return Err(contract(format!("dense layer {cons} input {in_dim} is not a multiple of {n} structures")));
                        }
                        d.weight.retain_grouped(1, in_dim / n, &keep);
                    }
                    Layer::Conv2d(c) => c.filters.retain_grouped(1, 1, &keep),
                    _ => unreachable!(),
                }
            }
            if let Layer::Gate(g) = &mut self.layers[gl] {
                g.compact();
            }
        }
        Ok(())
    }

    /// Weight and bias scalars currently stored (gate parameters excluded).
    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight_count()).sum()
    }

    /// Weight and bias scalars left once pruned structures are removed.
    pub fn effective_weight_count(&self) -> Result<usize> {
        let mut shrunk = self.clone();
        shrunk.compact()?;
        Ok(shrunk.weight_count())
    }

    /// Euclidean norm of the weights feeding structure `id` (dense row or
    /// full conv filter), bias excluded.
    pub fn structure_l2(&self, id: StructureId) -> Result<f64> {
        let g = self.gate(id.layer)?;
        match g.alive.get(id.index) {
            Some(true) => {}
            Some(false) => return Err(contract(format!("structure {id:?} is pruned"))),
            None => return Err(contract(format!("structure {id:?} does not exist"))),
        }
        let (w, rows) = match &self.layers[self.producer(id.layer)?] {
            Layer::Dense(d) => (&d.weight, d.out_dim()),
            Layer::Conv2d(c) => (&c.filters, c.out_channels()),
            _ => unreachable!(),
        };
        let len = w.len() / rows;
        Ok(w.value.data()[id.index * len..(id.index + 1) * len].iter().map(|v| v * v).sum::<f64>().sqrt())
    }

    /// Copy with every gate layer removed.
    pub fn without_gates(&self) -> Network {
        let layers = self.layers.iter().filter(|l| !matches!(l, Layer::Gate(_))).cloned().collect();
        Network { layers, input_shape: self.input_shape.clone() }
    }
}
