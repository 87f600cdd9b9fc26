//! Binary model checkpoints.
//!
//! Layout (all integers u32 little-endian, all reals f64 little-endian):
//!
//! ```text
//! "BMRS" | version | layer count | input rank | input dims...
//! per layer: tag u8, then
//!   1 dense    out, in, weights[out*in], bias[out]
//!   2 conv2d   out, in, kh, kw, stride, padding, filters[...], bias[out]
//!   3 relu
//!   4 maxpool  size, stride
//!   5 flatten
//!   6 gate     n, log_lo, log_hi, mu[n], log_sigma[n], alive bitset (ceil(n/8) bytes, LSB first)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::layers::{Conv2d, Dense, Flatten, Layer, MaxPool2d, Relu};
use super::Network;
use crate::error::{Error, Result};
use crate::gate::NoiseGate;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BMRS";
pub const VERSION: u32 = 1;

const TAG_DENSE: u8 = 1;
const TAG_CONV: u8 = 2;
const TAG_RELU: u8 = 3;
const TAG_POOL: u8 = 4;
const TAG_FLATTEN: u8 = 5;
const TAG_GATE: u8 = 6;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

pub fn to_bytes(net: &Network) -> Vec<u8> {
    let mut w = Writer(MAGIC.to_vec());
    w.u32(VERSION as usize);
    w.u32(net.layers.len());
    w.u32(net.input_shape().len());
    for &d in net.input_shape() {
        w.u32(d);
    }
    for layer in &net.layers {
        match layer {
            Layer::Dense(d) => {
                w.0.push(TAG_DENSE);
                w.u32(d.out_dim());
                w.u32(d.in_dim());
                w.f64s(d.weight.value.data());
                w.f64s(d.bias.value.data());
            }
            Layer::Conv2d(c) => {
                w.0.push(TAG_CONV);
                for &s in c.filters.value.shape() {
                    w.u32(s);
                }
                w.u32(c.stride);
                w.u32(c.padding);
                w.f64s(c.filters.value.data());
                w.f64s(c.bias.value.data());
            }
            Layer::Relu(_) => w.0.push(TAG_RELU),
            Layer::MaxPool2d(p) => {
                w.0.push(TAG_POOL);
                w.u32(p.size);
                w.u32(p.stride);
            }
            Layer::Flatten(_) => w.0.push(TAG_FLATTEN),
            Layer::Gate(g) => {
                w.0.push(TAG_GATE);
                w.u32(g.len());
                w.f64s(&[g.log_lo, g.log_hi]);
                w.f64s(g.mu.value.data());
                w.f64s(g.log_sigma.value.data());
                let mut bits = vec![0u8; g.len().div_ceil(8)];
                for (i, &a) in g.alive.iter().enumerate() {
                    if a {
                        bits[i / 8] |= 1 << (i % 8);
                    }
                }
                w.0.extend_from_slice(&bits);
            }
        }
    }
    w.0
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse { offset: self.pos, message: message.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(8).ok_or_else(|| self.err(format!("{what} length overflows")))?;
        let b = self.take(bytes, what)?;
        Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn dims(&mut self, k: usize, what: &str) -> Result<Vec<usize>> {
        (0..k).map(|_| self.u32(what)).collect()
    }

    fn count(&self, dims: &[usize]) -> Result<usize> {
        dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| self.err("shape overflows"))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Network> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Parse { offset: 0, message: "bad magic, expected \"BMRS\"".into() });
    }
    let version_at = r.pos;
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Parse { offset: version_at, message: format!("unsupported version {version}") });
    }
    let n_layers = r.u32("layer count")?;
    let rank = r.u32("input rank")?;
    let input_shape = r.dims(rank, "input dims")?;
    let mut layers = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        let tag_at = r.pos;
        let layer = match r.u8("layer tag")? {
            TAG_DENSE => {
                let dims = r.dims(2, "dense shape")?;
                let w = r.f64s(r.count(&dims)?, "dense weights")?;
                let b = r.f64s(dims[0], "dense bias")?;
                Layer::Dense(Dense::from_parts(Tensor::new(dims.clone(), w)?, Tensor::new(vec![dims[0]], b)?)?)
            }
            TAG_CONV => {
                let dims = r.dims(4, "conv shape")?;
                let stride = r.u32("conv stride")?;
                let padding = r.u32("conv padding")?;
                let w = r.f64s(r.count(&dims)?, "conv filters")?;
                let b = r.f64s(dims[0], "conv bias")?;
                Layer::Conv2d(Conv2d::from_parts(Tensor::new(dims.clone(), w)?, Tensor::new(vec![dims[0]], b)?, stride, padding)?)
            }
            TAG_RELU => Layer::Relu(Relu::default()),
            TAG_POOL => {
                let size = r.u32("pool size")?;
                let stride = r.u32("pool stride")?;
                Layer::MaxPool2d(MaxPool2d::new(size, stride))
            }
            TAG_FLATTEN => Layer::Flatten(Flatten::default()),
            TAG_GATE => {
                let n = r.u32("gate size")?;
                let bounds = r.f64s(2, "gate bounds")?;
                let mu = r.f64s(n, "gate mu")?;
                let log_sigma = r.f64s(n, "gate log_sigma")?;
                let bits = r.take(n.div_ceil(8), "gate alive bitset")?;
                let alive = (0..n).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
                Layer::Gate(NoiseGate::from_parts(mu, log_sigma, bounds[0], bounds[1], alive)?)
            }
            t => return Err(Error::Parse { offset: tag_at, message: format!("unknown layer tag {t}") }),
        };
        layers.push(layer);
    }
    if r.pos != buf.len() {
        return Err(r.err(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Network::new(layers, input_shape)
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(net))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Network> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    from_bytes(&buf)
}
