//! Text-guided fusion of image cells into the token embeddings.
//!
//! Text rows act as queries against both the text itself and the 49 image
//! cells. By default the attention map is the raw scaled product `QKᵀ/√D'`
//! with no softmax; set `normalize` to apply a row softmax instead.

use rand::Rng;

use crate::autodiff::{ParamGroup, ParamId, ParamStore, Tape, Var};
use crate::encoders::GRID_CELLS;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub dim: usize,
    pub inner: usize,
    pub normalize: bool,
}

impl AttentionParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        inner: usize,
        normalize: bool,
        bound: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let g = ParamGroup::TaskSpecific;
        Ok(AttentionParams {
            wq: store.add_uniform(format!("{prefix}.wq"), g, dim, inner, bound, rng)?,
            wk: store.add_uniform(format!("{prefix}.wk"), g, dim, inner, bound, rng)?,
            wv: store.add_uniform(format!("{prefix}.wv"), g, dim, inner, bound, rng)?,
            dim,
            inner,
            normalize,
        })
    }
}

/// Returns `(map · V, map)` with `map` of shape `(S1, S2)`.
pub fn attention(tape: &mut Tape<'_>, x_q: Var, x_kv: Var, params: &AttentionParams) -> Result<(Var, Var)> {
    for (what, v) in [("query", x_q), ("key/value", x_kv)] {
        let d = tape.value(v).cols();
        if d != params.dim {
            return Err(Error::dim("attention", format!("{what} width {d}, expected {}", params.dim)));
        }
    }
    let (wq, wk, wv) = (tape.param(params.wq), tape.param(params.wk), tape.param(params.wv));
    let q = tape.matmul(x_q, wq)?;
    let k = tape.matmul(x_kv, wk)?;
    let v = tape.matmul(x_kv, wv)?;
    let logits = tape.matmul_nt(q, k)?;
    let mut map = tape.scale(logits, 1.0 / (params.inner as f64).sqrt())?;
    if params.normalize {
        map = tape.softmax_rows(map)?;
    }
    let out = tape.matmul(map, v)?;
    Ok((out, map))
}

pub fn self_att(tape: &mut Tape<'_>, x_t: Var, params: &AttentionParams) -> Result<(Var, Var)> {
    attention(tape, x_t, x_t, params)
}

pub fn cross_att(tape: &mut Tape<'_>, x_t: Var, x_v: Var, params: &AttentionParams) -> Result<(Var, Var)> {
    let rows = tape.value(x_v).rows();
    if rows != GRID_CELLS {
        return Err(Error::contract(format!("image sequence has {rows} rows, expected {GRID_CELLS}")));
    }
    attention(tape, x_t, x_v, params)
}

/// `x_t + (self_out + cross_out) · W_m`.
pub fn fuse(tape: &mut Tape<'_>, x_t: Var, self_out: Var, cross_out: Var, w_m: Var) -> Result<Var> {
    let s = tape.value(self_out).shape().to_vec();
    let c = tape.value(cross_out).shape().to_vec();
    if s != c {
        return Err(Error::dim("fuse", format!("self {s:?} vs cross {c:?}")));
    }
    let joined = tape.add(self_out, cross_out)?;
    let projected = tape.matmul(joined, w_m)?;
    tape.add(x_t, projected)
}

#[derive(Clone, Debug)]
pub struct TirParams {
    pub text: AttentionParams,
    pub cross: AttentionParams,
    pub w_m: ParamId,
}

pub struct FusedEmbedding {
    pub embedding: Var,
    pub self_map: Tensor,
    pub cross_map: Tensor,
}

impl TirParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        inner: usize,
        normalize: bool,
        bound: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(TirParams {
            text: AttentionParams::new(store, &format!("{prefix}.text"), dim, inner, normalize, bound, rng)?,
            cross: AttentionParams::new(store, &format!("{prefix}.cross"), dim, inner, normalize, bound, rng)?,
            w_m: store.add_uniform(format!("{prefix}.w_m"), ParamGroup::TaskSpecific, inner, dim, bound, rng)?,
        })
    }

    pub fn apply(&self, tape: &mut Tape<'_>, x_t: Var, x_v: Var) -> Result<FusedEmbedding> {
        let (s, self_map) = self_att(tape, x_t, &self.text)?;
        let (c, cross_map) = cross_att(tape, x_t, x_v, &self.cross)?;
        let w_m = tape.param(self.w_m);
        let embedding = fuse(tape, x_t, s, c, w_m)?;
        Ok(FusedEmbedding {
            embedding,
            self_map: tape.value(self_map).clone(),
            cross_map: tape.value(cross_map).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const R2: f64 = std::f64::consts::FRAC_1_SQRT_2;

    fn identity_params(store: &mut ParamStore, normalize: bool) -> AttentionParams {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = AttentionParams::new(store, "att", 2, 2, normalize, 1.0, &mut rng).unwrap();
        for id in [p.wq, p.wk, p.wv] {
            store.get_mut(id).value = Tensor::from_rows(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        }
        p
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_rows(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn hand_computed_literal_attention() {
        let mut store = ParamStore::new();
        let p = identity_params(&mut store, false);
        let mut tape = Tape::new(&store);
        let q = tape.constant(Tensor::row(&[1.0, 0.0])).unwrap();
        let kv = tape.constant(Tensor::from_rows(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap()).unwrap();
        let (out, map) = attention(&mut tape, q, kv, &p).unwrap();
        assert!(tape.value(map).max_abs_diff(&Tensor::row(&[0.0, R2])) < 1e-15);
        assert!(tape.value(out).max_abs_diff(&Tensor::row(&[R2, 0.0])) < 1e-15);
    }

    #[test]
    fn zero_query_gives_zero_map_or_uniform_weights() {
        let mut store = ParamStore::new();
        let literal = identity_params(&mut store, false);
        let mut normalized = literal.clone();
        normalized.normalize = true;
        let mut tape = Tape::new(&store);
        let q = tape.constant(Tensor::zeros(1, 2)).unwrap();
        let kv = tape.constant(Tensor::from_rows(2, 2, vec![0.0, 1.0, 1.0, 3.0]).unwrap()).unwrap();
        let (out, map) = attention(&mut tape, q, kv, &literal).unwrap();
        assert!(tape.value(map).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
        let (out, map) = attention(&mut tape, q, kv, &normalized).unwrap();
        assert_eq!(tape.value(map).data(), &[0.5, 0.5]);
        assert!(tape.value(out).max_abs_diff(&Tensor::row(&[0.5, 2.0])) < 1e-15);
    }

    #[test]
    fn single_row_self_attention() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = AttentionParams::new(&mut store, "att", 3, 3, false, 0.8, &mut rng).unwrap();
        let x = random(1, 3, 5);
        let proj = |id: ParamId| -> Vec<f64> {
            let w = store.value(id);
            (0..3).map(|c| (0..3).map(|r| x.get(0, r) * w.get(r, c)).sum()).collect()
        };
        let (q, k, v) = (proj(p.wq), proj(p.wk), proj(p.wv));
        let weight = q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / 3f64.sqrt();
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x).unwrap();
        let (out, _) = self_att(&mut tape, xv, &p).unwrap();
        for c in 0..3 {
            assert!((tape.value(out).get(0, c) - weight * v[c]).abs() < 1e-14);
        }
    }

    #[test]
    fn literal_self_attention_is_cubic() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = AttentionParams::new(&mut store, "att", 4, 4, false, 0.5, &mut rng).unwrap();
        let x = random(3, 4, 7);
        let doubled = Tensor::from_rows(3, 4, x.data().iter().map(|v| 2.0 * v).collect()).unwrap();
        let mut tape = Tape::new(&store);
        let a = tape.constant(x).unwrap();
        let b = tape.constant(doubled).unwrap();
        let (ya, _) = self_att(&mut tape, a, &p).unwrap();
        let (yb, _) = self_att(&mut tape, b, &p).unwrap();
        for (u, v) in tape.value(ya).data().iter().zip(tape.value(yb).data()) {
            assert!((8.0 * u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_attention_needs_the_full_grid() {
        let mut store = ParamStore::new();
        let p = identity_params(&mut store, false);
        let mut tape = Tape::new(&store);
        let t = tape.constant(random(3, 2, 1)).unwrap();
        let short = tape.constant(random(2, 2, 2)).unwrap();
        assert!(matches!(cross_att(&mut tape, t, short, &p), Err(Error::Contract(_))));
        let zero = tape.constant(Tensor::zeros(49, 2)).unwrap();
        let (out, _) = cross_att(&mut tape, t, zero, &p).unwrap();
        assert_eq!(tape.value(out).shape(), &[3, 2]);
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fuse_residual_cases() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::from_rows(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let zero = tape.constant(Tensor::zeros(2, 3)).unwrap();
        let w = tape.constant(random(3, 2, 9)).unwrap();
        let e = fuse(&mut tape, x, zero, zero, w).unwrap();
        assert_eq!(tape.value(e).data(), tape.value(x).data());

        let s = tape.constant(Tensor::from_rows(2, 3, vec![1.0, 0.0, 2.0, 0.0, 1.0, 0.0]).unwrap()).unwrap();
        let c = tape.constant(Tensor::from_rows(2, 3, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap()).unwrap();
        let wz = tape.constant(Tensor::zeros(3, 2)).unwrap();
        let e = fuse(&mut tape, x, s, c, wz).unwrap();
        assert_eq!(tape.value(e).data(), tape.value(x).data());

        let wm = tape.constant(Tensor::from_rows(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap()).unwrap();
        let e = fuse(&mut tape, x, s, c, wm).unwrap();
        // (s + c) = [[1,1,2],[1,1,1]]; times wm = [[3,3],[2,2]]
        assert_eq!(tape.value(e).data(), &[4.0, 5.0, 5.0, 6.0]);

        let bad = tape.constant(Tensor::zeros(2, 2)).unwrap();
        assert!(matches!(fuse(&mut tape, x, s, bad, wm), Err(Error::Dimension { op: "fuse", .. })));
    }
}
