use rand::Rng;

use super::{Mode, Param};
use crate::error::{contract, Result};
use crate::gate::NoiseGate;
use crate::tensor::{gemm, Tensor};

fn kaiming_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("init shape")
}

/// y = x·Wᵀ + b with W of shape [out, in].
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl Dense {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::new(kaiming_uniform(vec![out_dim, in_dim], in_dim, rng)),
            bias: Param::new(Tensor::zeros(vec![out_dim])),
            input: None,
        }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(contract(format!("dense shapes {:?} / {:?} are inconsistent", weight.shape(), bias.shape())));
        }
        Ok(Self { weight: Param::new(weight), bias: Param::new(bias), input: None })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (b, i, o) = (x.batch(), self.in_dim(), self.out_dim());
        if x.shape().len() != 2 || x.row_len() != i {
            return Err(contract(format!("dense layer expects [batch, {i}], got {:?}", x.shape())));
        }
        let mut y = vec![0.0; b * o];
        for row in y.chunks_mut(o.max(1)) {
            row.copy_from_slice(self.bias.value.data());
        }
        gemm(b, i, o, 1.0, x.data(), (i as isize, 1), self.weight.value.data(), (1, i as isize), 1.0, &mut y, (o as isize, 1));
        Tensor::new(vec![b, o], y)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.apply(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let x = self.input.take().ok_or_else(|| contract("dense backward without forward"))?;
        let (b, i, o) = (x.batch(), self.in_dim(), self.out_dim());
        if dy.shape() != [b, o] {
            return Err(contract("dense backward shape mismatch"));
        }
        gemm(o, b, i, 1.0, dy.data(), (1, o as isize), x.data(), (i as isize, 1), 1.0, self.weight.grad_mut(), (i as isize, 1));
        let gb = self.bias.grad_mut();
        for row in dy.data().chunks(o.max(1)) {
            for (g, &d) in gb.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dx = vec![0.0; b * i];
        gemm(b, o, i, 1.0, dy.data(), (o as isize, 1), self.weight.value.data(), (i as isize, 1), 0.0, &mut dx, (i as isize, 1));
        Tensor::new(vec![b, i], dx)
    }
}

/// 2-D convolution over [batch, channels, height, width] via im2col.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub filters: Param,
    pub bias: Param,
    pub stride: usize,
    pub padding: usize,
    cache: Option<ConvCache>,
}

#[derive(Debug, Clone)]
struct ConvCache {
    input_shape: Vec<usize>,
    cols: Vec<f64>,
}

struct ConvGeom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize, rng: &mut impl Rng) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Self {
            filters: Param::new(kaiming_uniform(vec![out_ch, in_ch, kernel, kernel], fan_in, rng)),
            bias: Param::new(Tensor::zeros(vec![out_ch])),
            stride,
            padding,
            cache: None,
        }
    }

    pub fn from_parts(filters: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        if filters.shape().len() != 4 || bias.shape() != [filters.shape()[0]] || stride == 0 {
            return Err(contract(format!("conv shapes {:?} / {:?} are inconsistent", filters.shape(), bias.shape())));
        }
        Ok(Self { filters: Param::new(filters), bias: Param::new(bias), stride, padding, cache: None })
    }

    pub fn out_channels(&self) -> usize {
        self.filters.value.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.filters.value.shape()[1]
    }

    fn geometry(&self, shape: &[usize]) -> Result<ConvGeom> {
        let fs = self.filters.value.shape();
        if shape.len() != 4 || shape[1] != fs[1] {
            return Err(contract(format!("conv expects [batch, {}, h, w], got {shape:?}", fs[1])));
        }
        let (h, w) = (shape[2], shape[3]);
        let (kh, kw) = (fs[2], fs[3]);
        if kh > h + 2 * self.padding || kw > w + 2 * self.padding {
            return Err(contract(format!("kernel {kh}x{kw} larger than padded input {h}x{w}")));
        }
        Ok(ConvGeom {
            b: shape[0],
            c: shape[1],
            h,
            w,
            kh,
            kw,
            ho: (h + 2 * self.padding - kh) / self.stride + 1,
            wo: (w + 2 * self.padding - kw) / self.stride + 1,
        })
    }

    /// cols[(c, ki, kj), (b, oh, ow)]
    fn im2col(&self, x: &Tensor, g: &ConvGeom) -> Vec<f64> {
        let l = g.ho * g.wo;
        let ncol = g.b * l;
        let mut cols = vec![0.0; g.c * g.kh * g.kw * ncol];
        let xd = x.data();
        let p = self.padding as isize;
        for c in 0..g.c {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let r = (c * g.kh + ki) * g.kw + kj;
                    let row = &mut cols[r * ncol..(r + 1) * ncol];
                    for b in 0..g.b {
                        let plane = &xd[(b * g.c + c) * g.h * g.w..(b * g.c + c + 1) * g.h * g.w];
                        for oh in 0..g.ho {
                            let ih = (oh * self.stride + ki) as isize - p;
                            if ih < 0 || ih >= g.h as isize {
                                continue;
                            }
                            let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                            let dst = &mut row[b * l + oh * g.wo..b * l + (oh + 1) * g.wo];
                            for (ow, d) in dst.iter_mut().enumerate() {
                                let iw = (ow * self.stride + kj) as isize - p;
                                if iw >= 0 && iw < g.w as isize {
                                    *d = src[iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn apply_inner(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let g = self.geometry(x.shape())?;
        let cols = self.im2col(x, &g);
        let (o, ckk, l) = (self.out_channels(), g.c * g.kh * g.kw, g.ho * g.wo);
        let ncol = g.b * l;
        let mut mat = vec![0.0; o * ncol];
        gemm(o, ckk, ncol, 1.0, self.filters.value.data(), (ckk as isize, 1), &cols, (ncol as isize, 1), 0.0, &mut mat, (ncol as isize, 1));
        let mut y = vec![0.0; g.b * o * l];
        let bias = self.bias.value.data();
        for oc in 0..o {
            for b in 0..g.b {
                let src = &mat[oc * ncol + b * l..oc * ncol + (b + 1) * l];
                let dst = &mut y[(b * o + oc) * l..(b * o + oc + 1) * l];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bias[oc];
                }
            }
        }
        Ok((Tensor::new(vec![g.b, o, g.ho, g.wo], y)?, cols))
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.apply_inner(x)?.0)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (y, cols) = self.apply_inner(x)?;
        self.cache = Some(ConvCache { input_shape: x.shape().to_vec(), cols });
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let cache = self.cache.take().ok_or_else(|| contract("conv backward without forward"))?;
        let g = self.geometry(&cache.input_shape)?;
        let (o, ckk, l) = (self.out_channels(), g.c * g.kh * g.kw, g.ho * g.wo);
        let ncol = g.b * l;
        if dy.shape() != [g.b, o, g.ho, g.wo] {
            return Err(contract("conv backward shape mismatch"));
        }
        let mut dmat = vec![0.0; o * ncol];
        let gb = self.bias.grad_mut();
        for b in 0..g.b {
            for oc in 0..o {
                let src = &dy.data()[(b * o + oc) * l..(b * o + oc + 1) * l];
                dmat[oc * ncol + b * l..oc * ncol + (b + 1) * l].copy_from_slice(src);
                gb[oc] += src.iter().sum::<f64>();
            }
        }
        gemm(o, ncol, ckk, 1.0, &dmat, (ncol as isize, 1), &cache.cols, (1, ncol as isize), 1.0, self.filters.grad_mut(), (ckk as isize, 1));
        let mut dcols = vec![0.0; ckk * ncol];
        gemm(ckk, o, ncol, 1.0, self.filters.value.data(), (1, ckk as isize), &dmat, (ncol as isize, 1), 0.0, &mut dcols, (ncol as isize, 1));
        // col2im
        let mut dx = vec![0.0; g.b * g.c * g.h * g.w];
        let p = self.padding as isize;
        for c in 0..g.c {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let r = (c * g.kh + ki) * g.kw + kj;
                    let row = &dcols[r * ncol..(r + 1) * ncol];
                    for b in 0..g.b {
                        let base = (b * g.c + c) * g.h * g.w;
                        for oh in 0..g.ho {
                            let ih = (oh * self.stride + ki) as isize - p;
                            if ih < 0 || ih >= g.h as isize {
                                continue;
                            }
                            for ow in 0..g.wo {
                                let iw = (ow * self.stride + kj) as isize - p;
                                if iw >= 0 && iw < g.w as isize {
                                    dx[base + ih as usize * g.w + iw as usize] += row[b * l + oh * g.wo + ow];
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(cache.input_shape, dx)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn apply(&self, x: &Tensor) -> Tensor {
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        self.mask = Some(x.data().iter().map(|&v| v > 0.0).collect());
        self.apply(x)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let mask = self.mask.take().ok_or_else(|| contract("relu backward without forward"))?;
        if mask.len() != dy.len() {
            return Err(contract("relu backward shape mismatch"));
        }
        let data = dy.data().iter().zip(&mask).map(|(&d, &m)| if m { d } else { 0.0 }).collect();
        Tensor::new(dy.shape().to_vec(), data)
    }
}

/// Non-overlapping-or-strided max pooling over [batch, channels, h, w].
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub size: usize,
    pub stride: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(size: usize, stride: usize) -> Self {
        Self { size, stride, cache: None }
    }

    fn apply_inner(&self, x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        let s = x.shape();
        if s.len() != 4 || s[2] < self.size || s[3] < self.size || self.size == 0 || self.stride == 0 {
            return Err(contract(format!("max-pool {} expects [batch, c, h, w] at least that large, got {s:?}", self.size)));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let ho = (h - self.size) / self.stride + 1;
        let wo = (w - self.size) / self.stride + 1;
        let xd = x.data();
        let mut y = Vec::with_capacity(planes * ho * wo);
        let mut arg = Vec::with_capacity(planes * ho * wo);
        for pl in 0..planes {
            let base = pl * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = base + oh * self.stride * w + ow * self.stride;
                    for i in 0..self.size {
                        for j in 0..self.size {
                            let idx = base + (oh * self.stride + i) * w + ow * self.stride + j;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    y.push(xd[best]);
                    arg.push(best);
                }
            }
        }
        Ok((Tensor::new(vec![s[0], s[1], ho, wo], y)?, arg))
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.apply_inner(x)?.0)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (y, arg) = self.apply_inner(x)?;
        self.cache = Some((x.shape().to_vec(), arg));
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let (shape, arg) = self.cache.take().ok_or_else(|| contract("max-pool backward without forward"))?;
        if arg.len() != dy.len() {
            return Err(contract("max-pool backward shape mismatch"));
        }
        let mut dx = Tensor::zeros(shape);
        let d = dx.data_mut();
        for (&i, &g) in arg.iter().zip(dy.data()) {
            d[i] += g;
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Flatten {
    input_shape: Option<Vec<usize>>,
}

impl Flatten {
    pub fn apply(&self, x: &Tensor) -> Tensor {
        x.clone().reshape(vec![x.batch(), x.row_len()]).expect("flatten keeps size")
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        self.input_shape = Some(x.shape().to_vec());
        self.apply(x)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let shape = self.input_shape.take().ok_or_else(|| contract("flatten backward without forward"))?;
        dy.clone().reshape(shape)
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    Relu(Relu),
    MaxPool2d(MaxPool2d),
    Flatten(Flatten),
    Gate(NoiseGate),
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::Relu(_) => "relu",
            Layer::MaxPool2d(_) => "maxpool2d",
            Layer::Flatten(_) => "flatten",
            Layer::Gate(_) => "gate",
        }
    }

    /// Cache-free evaluation. `u` must be given iff `mode` is train and the
    /// layer is a gate.
    pub fn apply(&self, x: &Tensor, mode: Mode, u: Option<&[f64]>) -> Result<Tensor> {
        match self {
            Layer::Dense(l) => l.apply(x),
            Layer::Conv2d(l) => l.apply(x),
            Layer::Relu(l) => Ok(l.apply(x)),
            Layer::MaxPool2d(l) => l.apply(x),
            Layer::Flatten(l) => Ok(l.apply(x)),
            Layer::Gate(g) => Ok(g.apply(x, mode, u)?.0),
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode, u: Option<&[f64]>) -> Result<Tensor> {
        match self {
            Layer::Dense(l) => l.forward(x),
            Layer::Conv2d(l) => l.forward(x),
            Layer::Relu(l) => Ok(l.forward(x)),
            Layer::MaxPool2d(l) => l.forward(x),
            Layer::Flatten(l) => Ok(l.forward(x)),
            Layer::Gate(g) => g.forward(x, mode, u),
        }
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense(l) => l.backward(dy),
            Layer::Conv2d(l) => l.backward(dy),
            Layer::Relu(l) => l.backward(dy),
            Layer::MaxPool2d(l) => l.backward(dy),
            Layer::Flatten(l) => l.backward(dy),
            Layer::Gate(g) => g.backward(dy),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Conv2d(l) => vec![&mut l.filters, &mut l.bias],
            Layer::Gate(g) => vec![&mut g.mu, &mut g.log_sigma],
            _ => Vec::new(),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Dense(l) => vec![&l.weight, &l.bias],
            Layer::Conv2d(l) => vec![&l.filters, &l.bias],
            Layer::Gate(g) => vec![&g.mu, &g.log_sigma],
            _ => Vec::new(),
        }
    }

    /// Weight and bias scalars (gate parameters excluded).
    pub fn weight_count(&self) -> usize {
        match self {
            Layer::Dense(l) => l.weight.len() + l.bias.len(),
            Layer::Conv2d(l) => l.filters.len() + l.bias.len(),
            _ => 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn dense_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut d = Dense::new(3, 4, &mut rng);
        d.bias.value.data_mut().copy_from_slice(&[0.1, 0.2, 0.3, 0.4]);
        let x = rand_tensor(vec![2, 3], 2);
        let y = d.apply(&x).unwrap();
        for b in 0..2 {
            for o in 0..4 {
                let mut s = d.bias.value.data()[o];
                for i in 0..3 {
                    s += x.data()[b * 3 + i] * d.weight.value.data()[o * 3 + i];
                }
                assert!((y.data()[b * 4 + o] - s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn conv_matches_naive_with_padding_and_stride() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv2d::new(2, 3, 3, 2, 1, &mut rng);
        conv.bias.value.data_mut().copy_from_slice(&[0.5, -0.5, 0.0]);
        let x = rand_tensor(vec![2, 2, 5, 6], 4);
        let y = conv.apply(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3, 3]);
        let f = conv.filters.value.data();
        for b in 0..2 {
            for o in 0..3 {
                for oh in 0..3 {
                    for ow in 0..3 {
                        let mut s = conv.bias.value.data()[o];
                        for c in 0..2 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let ih = (oh * 2 + ki) as isize - 1;
                                    let iw = (ow * 2 + kj) as isize - 1;
                                    if (0..5).contains(&ih) && (0..6).contains(&iw) {
                                        s += f[((o * 2 + c) * 3 + ki) * 3 + kj]
                                            * x.data()[((b * 2 + c) * 5 + ih as usize) * 6 + iw as usize];
                                    }
                                }
                            }
                        }
                        assert!((y.data()[((b * 3 + o) * 3 + oh) * 3 + ow] - s).abs() < 1e-13);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv2d::new(1, 1, 5, 1, 0, &mut rng);
        assert!(conv.apply(&rand_tensor(vec![1, 1, 4, 4], 1)).is_err());
        assert!(conv.apply(&rand_tensor(vec![1, 2, 8, 8], 1)).is_err());
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Tensor::new(vec![1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0]).unwrap();
        let mut p = MaxPool2d::new(2, 2);
        let y = p.forward(&x).unwrap();
        assert_eq!(y.data(), &[5.0, 9.0]);
        let dx = p.backward(&Tensor::new(vec![1, 1, 1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(dx.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn backward_before_forward_is_a_contract_error() {
        let dy = Tensor::zeros(vec![1, 1]);
        assert!(Relu::default().backward(&dy).is_err());
        assert!(Flatten::default().backward(&dy).is_err());
        assert!(MaxPool2d::new(2, 2).backward(&dy).is_err());
    }
}
