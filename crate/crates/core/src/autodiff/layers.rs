//! Parameterized building blocks on top of [`Graph`].

use rand::Rng;

use super::{BoundParams, Graph, ParamId, ParamStore, Scalar, Segments, Tensor, Var};
use crate::error::{Error, Result};

/// Affine map `x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_glorot(format!("{name}.weight"), fan_in, fan_out, rng);
        let bias = store.add_filled(format!("{name}.bias"), vec![fan_out], T::zero());
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Var> {
        let h = g.matmul(x, p.var(self.weight))?;
        g.add_row(h, p.var(self.bias))
    }
}

/// Feed-forward stack with ELU after every layer except the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `sizes` lists every width including input and output, e.g. `[64, 32, 16, 8, 1]`.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        sizes: &[usize],
        rng: &mut R,
    ) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, p, h)?;
            if i < last {
                h = g.elu(h);
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gain: store.add_filled(format!("{name}.gain"), vec![width], T::one()),
            bias: store.add_filled(format!("{name}.bias"), vec![width], T::zero()),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Var> {
        let n = g.layer_norm(x)?;
        let n = g.mul_row(n, p.var(self.gain))?;
        g.add_row(n, p.var(self.bias))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderBlock {
    attn_norm: Norm,
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    ff_norm: Norm,
    ff_in: Linear,
    ff_out: Linear,
}

/// Pre-norm self-attention encoder without positional encoding.
///
/// Each block computes `x + MHA(LN(x))` followed by `x + FF(LN(x))`, where the
/// feed-forward part is `width -> 2*width -> width` with ELU. Attention never
/// crosses segment boundaries, so a batch of lists can be encoded at once.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    blocks: Vec<EncoderBlock>,
    width: usize,
    heads: usize,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        layers: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if !(1..=4).contains(&layers) {
            return Err(Error::Config(format!(
                "encoder layers must be in 1..=4, got {layers}"
            )));
        }
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "width {width} is not divisible by {heads} heads"
            )));
        }
        let blocks = (0..layers)
            .map(|l| {
                let n = format!("{name}.{l}");
                EncoderBlock {
                    attn_norm: Norm::new(store, &format!("{n}.attn_norm"), width),
                    query: Linear::new(store, &format!("{n}.query"), width, width, rng),
                    key: Linear::new(store, &format!("{n}.key"), width, width, rng),
                    value: Linear::new(store, &format!("{n}.value"), width, width, rng),
                    output: Linear::new(store, &format!("{n}.output"), width, width, rng),
                    ff_norm: Norm::new(store, &format!("{n}.ff_norm"), width),
                    ff_in: Linear::new(store, &format!("{n}.ff_in"), width, 2 * width, rng),
                    ff_out: Linear::new(store, &format!("{n}.ff_out"), 2 * width, width, rng),
                }
            })
            .collect();
        Ok(Self {
            blocks,
            width,
            heads,
        })
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Encodes `x` (`[rows × width]`); rows of one segment attend to each other.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        x: Var,
        segs: &Segments,
    ) -> Result<Var> {
        let mut h = x;
        for b in &self.blocks {
            let n = b.attn_norm.forward(g, p, h)?;
            let q = b.query.forward(g, p, n)?;
            let k = b.key.forward(g, p, n)?;
            let v = b.value.forward(g, p, n)?;
            let a = g.attention(q, k, v, segs, self.heads)?;
            let a = b.output.forward(g, p, a)?;
            h = g.add(h, a)?;

            let n = b.ff_norm.forward(g, p, h)?;
            let f = b.ff_in.forward(g, p, n)?;
            let f = g.elu(f);
            let f = b.ff_out.forward(g, p, f)?;
            h = g.add(h, f)?;
        }
        Ok(h)
    }
}

/// Convenience: encodes a single list with frozen parameters.
pub fn attention_encode<T: Scalar>(
    encoder: &Encoder,
    store: &ParamStore<T>,
    inputs: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g)?;
    let x = g.constant(inputs.clone())?;
    let segs = Segments::single(inputs.rows());
    let out = encoder.forward(&mut g, &p, x, &segs)?;
    Ok(g.value(out).clone())
}
