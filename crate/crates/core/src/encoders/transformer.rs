use rand::Rng;

use crate::autodiff::{ParamGroup, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Softmax multi-head self-attention with an output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub heads: usize,
}

impl MultiHeadAttention {
    fn new<R: Rng>(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, bound: f64, rng: &mut R) -> Result<Self> {
        let g = ParamGroup::PretrainedText;
        Ok(MultiHeadAttention {
            wq: store.add_uniform(format!("{prefix}.wq"), g, dim, dim, bound, rng)?,
            wk: store.add_uniform(format!("{prefix}.wk"), g, dim, dim, bound, rng)?,
            wv: store.add_uniform(format!("{prefix}.wv"), g, dim, dim, bound, rng)?,
            wo: store.add_uniform(format!("{prefix}.wo"), g, dim, dim, bound, rng)?,
            bo: store.add_filled(format!("{prefix}.bo"), g, 1, dim, 0.0)?,
            heads,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let dim = tape.value(x).cols();
        let head_dim = dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let (wq, wk, wv) = (tape.param(self.wq), tape.param(self.wk), tape.param(self.wv));
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
            let qh = tape.col_slice(q, lo, hi)?;
            let kh = tape.col_slice(k, lo, hi)?;
            let vh = tape.col_slice(v, lo, hi)?;
            let logits = tape.matmul_nt(qh, kh)?;
            let logits = tape.scale(logits, scale)?;
            let weights = tape.softmax_rows(logits)?;
            outs.push(tape.matmul(weights, vh)?);
        }
        let joined = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let (wo, bo) = (tape.param(self.wo), tape.param(self.bo));
        let y = tape.matmul(joined, wo)?;
        tape.add_row(y, bo)
    }
}

#[derive(Clone, Debug)]
struct Layer {
    ln1: (ParamId, ParamId),
    attention: MultiHeadAttention,
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

/// Pre-norm transformer encoder: each layer adds attention and a ReLU
/// feed-forward block (width `4D`) to its input, and a final layer norm closes
/// the stack.
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    layers: Vec<Layer>,
    final_norm: (ParamId, ParamId),
    pub dim: usize,
}

fn norm_params(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<(ParamId, ParamId)> {
    let g = ParamGroup::PretrainedText;
    Ok((
        store.add_filled(format!("{prefix}.gamma"), g, 1, dim, 1.0)?,
        store.add_filled(format!("{prefix}.beta"), g, 1, dim, 0.0)?,
    ))
}

impl TransformerEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        layers: usize,
        heads: usize,
        bound: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("model width {dim} is not divisible by {heads} heads")));
        }
        let g = ParamGroup::PretrainedText;
        let ff = 4 * dim;
        let mut stack = Vec::with_capacity(layers);
        for l in 0..layers {
            let p = format!("{prefix}.layers.{l}");
            stack.push(Layer {
                ln1: norm_params(store, &format!("{p}.ln1"), dim)?,
                attention: MultiHeadAttention::new(store, &format!("{p}.attention"), dim, heads, bound, rng)?,
                ln2: norm_params(store, &format!("{p}.ln2"), dim)?,
                ff1: (
                    store.add_uniform(format!("{p}.ff1.weight"), g, dim, ff, bound, rng)?,
                    store.add_filled(format!("{p}.ff1.bias"), g, 1, ff, 0.0)?,
                ),
                ff2: (
                    store.add_uniform(format!("{p}.ff2.weight"), g, ff, dim, bound, rng)?,
                    store.add_filled(format!("{p}.ff2.bias"), g, 1, dim, 0.0)?,
                ),
            });
        }
        let final_norm = norm_params(store, &format!("{prefix}.final_norm"), dim)?;
        Ok(TransformerEncoder { layers: stack, final_norm, dim })
    }

    /// Every parameter of the attention and feed-forward blocks (not the norms).
    pub fn block_params(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| {
                let a = &l.attention;
                [a.wq, a.wk, a.wv, a.wo, a.bo, l.ff1.0, l.ff1.1, l.ff2.0, l.ff2.1]
            })
            .collect()
    }

    pub fn encode(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let (n, d) = (tape.value(x).rows(), tape.value(x).cols());
        if n == 0 {
            return Err(Error::contract("transformer input has no rows"));
        }
        if d != self.dim {
            return Err(Error::dim("transformer_encode", format!("width {d}, expected {}", self.dim)));
        }
        let mut h = x;
        for layer in &self.layers {
            let normed = norm(tape, h, layer.ln1)?;
            let att = layer.attention.forward(tape, normed)?;
            h = tape.add(h, att)?;

            let normed = norm(tape, h, layer.ln2)?;
            let (w1, b1) = (tape.param(layer.ff1.0), tape.param(layer.ff1.1));
            let (w2, b2) = (tape.param(layer.ff2.0), tape.param(layer.ff2.1));
            let u = tape.matmul(normed, w1)?;
            let u = tape.add_row(u, b1)?;
            let u = tape.relu(u)?;
            let u = tape.matmul(u, w2)?;
            let u = tape.add_row(u, b2)?;
            h = tape.add(h, u)?;
        }
        norm(tape, h, self.final_norm)
    }
}

fn norm(tape: &mut Tape<'_>, x: Var, (gamma, beta): (ParamId, ParamId)) -> Result<Var> {
    let g = tape.param(gamma);
    let b = tape.param(beta);
    tape.layer_norm(x, g, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build() -> (ParamStore, TransformerEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let enc = TransformerEncoder::new(&mut store, "enc", 8, 2, 2, 0.35, &mut rng).unwrap();
        (store, enc)
    }

    fn input(rows: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_rows(rows, 8, (0..rows * 8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_row_keeps_shape() {
        let (store, enc) = build();
        let mut tape = Tape::new(&store);
        let x = tape.constant(input(1, 1)).unwrap();
        let y = enc.encode(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 8]);
    }

    #[test]
    fn empty_input_is_rejected() {
        let (store, enc) = build();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::zeros(0, 8)).unwrap();
        assert!(matches!(enc.encode(&mut tape, x), Err(Error::Contract(_))));
    }

    #[test]
    fn row_permutation_is_equivariant() {
        let (store, enc) = build();
        let x = input(5, 2);
        let perm = [3, 0, 4, 1, 2];
        let mut permuted = Vec::new();
        for &p in &perm {
            permuted.extend_from_slice(x.row_slice(p));
        }
        let xp = Tensor::from_rows(5, 8, permuted).unwrap();
        let mut tape = Tape::new(&store);
        let a = tape.constant(x).unwrap();
        let b = tape.constant(xp).unwrap();
        let ya = enc.encode(&mut tape, a).unwrap();
        let yb = enc.encode(&mut tape, b).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for (u, v) in tape.value(yb).row_slice(i).iter().zip(tape.value(ya).row_slice(p)) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_blocks_leave_only_the_final_norm() {
        let (mut store, enc) = build();
        for id in enc.block_params() {
            store.get_mut(id).value.data_mut().fill(0.0);
        }
        let x = input(4, 3);
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x.clone()).unwrap();
        let y = enc.encode(&mut tape, xv).unwrap();
        for r in 0..4 {
            let row = x.row_slice(r);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            for (c, &v) in row.iter().enumerate() {
                let expect = (v - mean) / (var + 1e-5).sqrt();
                assert!((tape.value(y).get(r, c) - expect).abs() < 1e-12);
            }
        }
    }
}
