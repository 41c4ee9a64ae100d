use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the decoder-only policy network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context: usize,
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("model shape: {m}")));
        if self.vocab < 2 {
            return bad("vocab must be at least 2");
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.context == 0 {
            return bad("dimensions must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }
}

/// Offsets of one transformer block inside the flat parameter vector.
/// Matrices are stored row-major as `[in, out]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockLayout {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub blocks: Vec<BlockLayout>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub w_out: usize,
    pub b_out: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(s: &ModelShape) -> Self {
        let d = s.d_model;
        let mut at = 0usize;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let tok_emb = take(s.vocab * d);
        let pos_emb = take(s.context * d);
        let blocks = (0..s.n_layers)
            .map(|_| BlockLayout {
                ln1_g: take(d),
                ln1_b: take(d),
                wq: take(d * d),
                wk: take(d * d),
                wv: take(d * d),
                wo: take(d * d),
                ln2_g: take(d),
                ln2_b: take(d),
                w1: take(d * s.d_ff),
                b1: take(s.d_ff),
                w2: take(s.d_ff * d),
                b2: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let w_out = take(d * s.vocab);
        let b_out = take(s.vocab);
        Layout {
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            w_out,
            b_out,
            total: at,
        }
    }
}

/// Flat parameter vector of the policy plus its shape.
#[derive(Debug, Clone)]
pub struct PolicyParams {
    shape: ModelShape,
    layout: Layout,
    data: Vec<f64>,
}

impl PartialEq for PolicyParams {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl PolicyParams {
    /// Random initialization: Gaussian weights, unit layer-norm gains, zero biases.
    /// Residual output projections are scaled down by `sqrt(2 * n_layers)`.
    pub fn init(shape: ModelShape, seed: u64, init_std: f64) -> Result<Self> {
        shape.validate()?;
        if !(init_std.is_finite() && init_std >= 0.0) {
            return Err(Error::Config(format!("init_std must be finite and >= 0, got {init_std}")));
        }
        let layout = Layout::new(&shape);
        let mut data = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut fill = |data: &mut [f64], std: f64| {
            for x in data.iter_mut() {
                *x = normal.sample(&mut rng) * std;
            }
        };
        let d = shape.d_model;
        let resid_std = init_std / ((2 * shape.n_layers.max(1)) as f64).sqrt();
        fill(&mut data[layout.tok_emb..layout.tok_emb + shape.vocab * d], init_std);
        fill(&mut data[layout.pos_emb..layout.pos_emb + shape.context * d], init_std);
        for b in &layout.blocks {
            data[b.ln1_g..b.ln1_g + d].fill(1.0);
            data[b.ln2_g..b.ln2_g + d].fill(1.0);
            fill(&mut data[b.wq..b.wq + d * d], init_std);
            fill(&mut data[b.wk..b.wk + d * d], init_std);
            fill(&mut data[b.wv..b.wv + d * d], init_std);
            fill(&mut data[b.wo..b.wo + d * d], resid_std);
            fill(&mut data[b.w1..b.w1 + d * shape.d_ff], init_std);
            fill(&mut data[b.w2..b.w2 + d * shape.d_ff], resid_std);
        }
        data[layout.lnf_g..layout.lnf_g + d].fill(1.0);
        fill(&mut data[layout.w_out..layout.w_out + d * shape.vocab], init_std);
        Ok(PolicyParams { shape, layout, data })
    }

    /// Wraps an existing flat vector; its length must match the shape.
    pub fn from_vec(shape: ModelShape, data: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        let layout = Layout::new(&shape);
        if data.len() != layout.total {
            return Err(Error::Dimension {
                what: "parameter vector",
                expected: layout.total,
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("parameter {i} is not finite")));
        }
        Ok(PolicyParams { shape, layout, data })
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Zeroes the output projection and bias so every context maps to the
    /// uniform distribution.
    pub fn zero_output_head(&mut self) {
        let (w, b, v) = (self.layout.w_out, self.layout.b_out, self.shape.vocab);
        self.data[w..w + self.shape.d_model * v].fill(0.0);
        self.data[b..b + v].fill(0.0);
    }

    /// Range of the output bias inside the flat vector.
    pub fn output_bias_range(&self) -> std::ops::Range<usize> {
        self.layout.b_out..self.layout.b_out + self.shape.vocab
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> ModelShape {
        ModelShape {
            vocab: 11,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            context: 12,
        }
    }

    #[test]
    fn layout_covers_every_parameter() {
        let s = shape();
        let d = s.d_model;
        let per_block = 4 * d + 4 * d * d + 2 * d * s.d_ff + s.d_ff + d;
        let expected =
            s.vocab * d + s.context * d + s.n_layers * per_block + 2 * d + d * s.vocab + s.vocab;
        assert_eq!(s.param_count(), expected);
    }

    #[test]
    fn init_is_seeded() {
        let a = PolicyParams::init(shape(), 3, 0.1).unwrap();
        let b = PolicyParams::init(shape(), 3, 0.1).unwrap();
        let c = PolicyParams::init(shape(), 4, 0.1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.all_finite());
    }

    #[test]
    fn rejects_bad_shapes_and_vectors() {
        let mut s = shape();
        s.n_heads = 3;
        assert!(PolicyParams::init(s, 0, 0.1).is_err());
        assert!(PolicyParams::from_vec(shape(), vec![0.0; 3]).is_err());
        let mut v = vec![0.0; shape().param_count()];
        v[5] = f64::NAN;
        assert!(matches!(
            PolicyParams::from_vec(shape(), v),
            Err(Error::Numerical(_))
        ));
    }
}
