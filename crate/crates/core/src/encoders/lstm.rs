use rand::Rng;

use crate::autodiff::{ParamGroup, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Weights for one direction. Gate columns are laid out `[i | f | g | o]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmDirection {
    pub w_in: ParamId,
    pub w_rec: ParamId,
    pub bias: ParamId,
}

/// Bidirectional LSTM. Row `t` of the output is `[forward_t | backward_t]`.
///
/// Several sequences of the same length can be run together; the recurrence
/// then works on a `(B, 4H)` block per step instead of `B` separate rows.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub forward: LstmDirection,
    pub backward: LstmDirection,
    pub input_dim: usize,
    pub hidden: usize,
}

impl BiLstm {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        bound: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let g = ParamGroup::TaskSpecific;
        let mut dir = |name: &str, rng: &mut R| -> Result<LstmDirection> {
            Ok(LstmDirection {
                w_in: store.add_uniform(format!("{prefix}.{name}.w_in"), g, input_dim, 4 * hidden, bound, rng)?,
                w_rec: store.add_uniform(format!("{prefix}.{name}.w_rec"), g, hidden, 4 * hidden, bound, rng)?,
                bias: store.add_filled(format!("{prefix}.{name}.bias"), g, 1, 4 * hidden, 0.0)?,
            })
        };
        let forward = dir("forward", rng)?;
        let backward = dir("backward", rng)?;
        Ok(BiLstm { forward, backward, input_dim, hidden })
    }

    pub fn encode(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        Ok(self.encode_batch(tape, &[x])?.remove(0))
    }

    /// Encodes equal-length sequences together.
    pub fn encode_batch(&self, tape: &mut Tape<'_>, xs: &[Var]) -> Result<Vec<Var>> {
        let mut fwd = Vec::with_capacity(xs.len());
        let mut bwd = Vec::with_capacity(xs.len());
        for &x in xs {
            let d = tape.value(x).cols();
            if d != self.input_dim {
                return Err(Error::dim("bilstm_encode", format!("input width {d}, expected {}", self.input_dim)));
            }
            fwd.push(self.input_projection(tape, x, self.forward)?);
            bwd.push(self.input_projection(tape, x, self.backward)?);
        }
        self.recur(tape, &fwd, &bwd)
    }

    fn input_projection(&self, tape: &mut Tape<'_>, x: Var, dir: LstmDirection) -> Result<Var> {
        let w = tape.param(dir.w_in);
        let b = tape.param(dir.bias);
        let z = tape.matmul(x, w)?;
        tape.add_row(z, b)
    }

    /// Runs both recurrences given precomputed input pre-activations
    /// (`x·W_in + b`, one `(N, 4H)` block per sequence and direction).
    pub fn recur(&self, tape: &mut Tape<'_>, pre_fwd: &[Var], pre_bwd: &[Var]) -> Result<Vec<Var>> {
        let batch = pre_fwd.len();
        if batch == 0 || pre_bwd.len() != batch {
            return Err(Error::contract("bilstm needs one forward and one backward block per sequence"));
        }
        let n = tape.value(pre_fwd[0]).rows();
        if n == 0 {
            return Err(Error::contract("bilstm input has no rows"));
        }
        for &p in pre_fwd.iter().chain(pre_bwd) {
            let s = tape.value(p).shape();
            if s != [n, 4 * self.hidden] {
                return Err(Error::dim("bilstm_encode", format!("pre-activation {s:?}, expected [{n}, {}]", 4 * self.hidden)));
            }
        }
        let hf = self.run_direction(tape, pre_fwd, self.forward, (0..n).collect())?;
        let hb = self.run_direction(tape, pre_bwd, self.backward, (0..n).rev().collect())?;
        // hb[k] holds time step n-1-k
        let mut out = Vec::with_capacity(batch);
        for b in 0..batch {
            let f_idx: Vec<_> = (0..n).map(|t| (t, b)).collect();
            let b_idx: Vec<_> = (0..n).map(|t| (n - 1 - t, b)).collect();
            let f = tape.gather_rows(&hf, &f_idx)?;
            let r = tape.gather_rows(&hb, &b_idx)?;
            out.push(tape.concat_cols(&[f, r])?);
        }
        Ok(out)
    }

    /// Returns the `(B, H)` hidden state for each step in `order`.
    fn run_direction(&self, tape: &mut Tape<'_>, pre: &[Var], dir: LstmDirection, order: Vec<usize>) -> Result<Vec<Var>> {
        let h = self.hidden;
        let w_rec = tape.param(dir.w_rec);
        let mut states: Vec<Var> = Vec::with_capacity(order.len());
        let mut cell: Option<Var> = None;
        for t in order {
            let index: Vec<_> = (0..pre.len()).map(|b| (b, t)).collect();
            let mut z = tape.gather_rows(pre, &index)?;
            if let Some(&prev) = states.last() {
                let r = tape.matmul(prev, w_rec)?;
                z = tape.add(z, r)?;
            }
            let i = tape.col_slice(z, 0, h)?;
            let i = tape.sigmoid(i)?;
            let g = tape.col_slice(z, 2 * h, 3 * h)?;
            let g = tape.tanh(g)?;
            let o = tape.col_slice(z, 3 * h, 4 * h)?;
            let o = tape.sigmoid(o)?;
            let mut c = tape.mul(i, g)?;
            if let Some(prev) = cell {
                let f = tape.col_slice(z, h, 2 * h)?;
                let f = tape.sigmoid(f)?;
                let kept = tape.mul(f, prev)?;
                c = tape.add(c, kept)?;
            }
            let squashed = tape.tanh(c)?;
            states.push(tape.mul(o, squashed)?);
            cell = Some(c);
        }
        Ok(states)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(tied: bool) -> (ParamStore, BiLstm) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lstm = BiLstm::new(&mut store, "lstm", 3, 4, 0.5, &mut rng).unwrap();
        if tied {
            for (a, b) in [
                (lstm.forward.w_in, lstm.backward.w_in),
                (lstm.forward.w_rec, lstm.backward.w_rec),
                (lstm.forward.bias, lstm.backward.bias),
            ] {
                let v = store.value(a).clone();
                store.get_mut(b).value = v;
            }
        }
        (store, lstm)
    }

    fn seq(rows: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_rows(rows, 3, (0..rows * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_step_uses_only_that_input() {
        let (store, lstm) = build(false);
        let mut tape = Tape::new(&store);
        let x = tape.constant(seq(1, 1)).unwrap();
        let y = lstm.encode(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 8]);
        // hand evaluation of one step with zero initial state
        let xv = seq(1, 1);
        for (dir, off) in [(lstm.forward, 0), (lstm.backward, 4)] {
            let w = store.value(dir.w_in);
            for k in 0..4 {
                let z = |gate: usize| (0..3).map(|d| xv.get(0, d) * w.get(d, gate * 4 + k)).sum::<f64>();
                let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
                let c = sig(z(0)) * z(2).tanh();
                let expect = sig(z(3)) * c.tanh();
                assert!((tape.value(y).get(0, off + k) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let (mut store, lstm) = build(false);
        for dir in [lstm.forward, lstm.backward] {
            for id in [dir.w_in, dir.w_rec, dir.bias] {
                store.get_mut(id).value.data_mut().fill(0.0);
            }
        }
        let mut tape = Tape::new(&store);
        let x = tape.constant(seq(4, 2)).unwrap();
        let y = lstm.encode(&mut tape, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reversal_swaps_and_reverses_directions() {
        let (store, lstm) = build(true);
        let x = seq(5, 3);
        let mut rev = Vec::new();
        for r in (0..5).rev() {
            rev.extend_from_slice(x.row_slice(r));
        }
        let mut tape = Tape::new(&store);
        let a = tape.constant(x).unwrap();
        let b = tape.constant(Tensor::from_rows(5, 3, rev).unwrap()).unwrap();
        let ya = lstm.encode(&mut tape, a).unwrap();
        let yb = lstm.encode(&mut tape, b).unwrap();
        let (ya, yb) = (tape.value(ya), tape.value(yb));
        for t in 0..5 {
            for k in 0..4 {
                assert!((ya.get(t, k) - yb.get(4 - t, 4 + k)).abs() < 1e-12);
                assert!((ya.get(t, 4 + k) - yb.get(4 - t, k)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batched_run_matches_separate_runs() {
        let (store, lstm) = build(false);
        let mut tape = Tape::new(&store);
        let a = tape.constant(seq(4, 7)).unwrap();
        let b = tape.constant(seq(4, 8)).unwrap();
        let both = lstm.encode_batch(&mut tape, &[a, b]).unwrap();
        let ya = lstm.encode(&mut tape, a).unwrap();
        let yb = lstm.encode(&mut tape, b).unwrap();
        assert!(tape.value(both[0]).max_abs_diff(tape.value(ya)) < 1e-14);
        assert!(tape.value(both[1]).max_abs_diff(tape.value(yb)) < 1e-14);
    }
}
