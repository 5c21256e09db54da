use rand::Rng;

use crate::autodiff::{ParamGroup, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cells in the 7×7 output grid.
pub const GRID_CELLS: usize = 49;
const GRID: usize = 7;

/// Two non-overlapping convolution stages bringing an `H×W×3` image down to a
/// 7×7 grid, followed by a linear projection of each cell to the text width.
///
/// Stage one uses a `H/14` kernel with equal stride (14×14 output), stage two a
/// 2×2 kernel with stride 2.
#[derive(Clone, Debug)]
pub struct PatchEncoder {
    pub image_size: usize,
    pub conv1: (ParamId, ParamId),
    pub conv2: (ParamId, ParamId),
    pub projection: (ParamId, ParamId),
    /// Learned modality embedding added to every cell, when enabled.
    pub modality: Option<ParamId>,
    kernel: usize,
}

impl PatchEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        image_size: usize,
        channels: (usize, usize),
        dim: usize,
        modality_embedding: bool,
        bound: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if image_size == 0 || image_size % (2 * GRID) != 0 {
            return Err(Error::Config(format!("image size {image_size} is not a multiple of 14")));
        }
        let kernel = image_size / (2 * GRID);
        let (c1, c2) = channels;
        let v = ParamGroup::PretrainedVisual;
        let t = ParamGroup::TaskSpecific;
        let patch = kernel * kernel * 3;
        Ok(PatchEncoder {
            image_size,
            conv1: (
                store.add_uniform(format!("{prefix}.conv1.weight"), v, patch, c1, bound, rng)?,
                store.add_filled(format!("{prefix}.conv1.bias"), v, 1, c1, 0.0)?,
            ),
            conv2: (
                store.add_uniform(format!("{prefix}.conv2.weight"), v, 4 * c1, c2, bound, rng)?,
                store.add_filled(format!("{prefix}.conv2.bias"), v, 1, c2, 0.0)?,
            ),
            projection: (
                store.add_uniform(format!("{prefix}.projection.weight"), t, c2, dim, bound, rng)?,
                store.add_filled(format!("{prefix}.projection.bias"), t, 1, dim, 0.0)?,
            ),
            modality: if modality_embedding {
                Some(store.add_uniform(format!("{prefix}.modality"), t, 1, dim, bound, rng)?)
            } else {
                None
            },
            kernel,
        })
    }

    /// Rearranges pixels so each row is one stage-one receptive field.
    fn im2col(&self, pixels: &[f32]) -> Tensor {
        let size = self.image_size;
        let k = self.kernel;
        let cells = 2 * GRID;
        let mut data = Vec::with_capacity(cells * cells * k * k * 3);
        for cy in 0..cells {
            for cx in 0..cells {
                for dy in 0..k {
                    for dx in 0..k {
                        let base = ((cy * k + dy) * size + cx * k + dx) * 3;
                        data.extend(pixels[base..base + 3].iter().map(|&p| p as f64));
                    }
                }
            }
        }
        Tensor::from_rows(cells * cells, k * k * 3, data).expect("im2col shape")
    }

    /// `(49, D)` cell embeddings for a row-major `H×W×3` image.
    pub fn encode(&self, tape: &mut Tape<'_>, height: usize, width: usize, pixels: &[f32]) -> Result<Var> {
        if height != self.image_size || width != self.image_size || pixels.len() != height * width * 3 {
            return Err(Error::dim(
                "encode_image",
                format!("expected {0}x{0}x3, got {height}x{width} with {1} values", self.image_size, pixels.len()),
            ));
        }
        let x = tape.constant(self.im2col(pixels))?;
        let h = self.affine(tape, x, self.conv1)?;
        let h = tape.relu(h)?;

        // space-to-depth: each 7×7 cell gathers its 2×2 block of stage-one cells
        let wide = 2 * GRID;
        let mut blocks = Vec::with_capacity(4);
        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let index: Vec<_> = (0..GRID_CELLS)
                .map(|c| {
                    let (gy, gx) = (c / GRID, c % GRID);
                    (0, (2 * gy + dy) * wide + 2 * gx + dx)
                })
                .collect();
            blocks.push(tape.gather_rows(&[h], &index)?);
        }
        let h = tape.concat_cols(&blocks)?;
        let h = self.affine(tape, h, self.conv2)?;
        let h = tape.relu(h)?;
        let mut out = self.affine(tape, h, self.projection)?;
        if let Some(m) = self.modality {
            let m = tape.param(m);
            out = tape.add_row(out, m)?;
        }
        Ok(out)
    }

    fn affine(&self, tape: &mut Tape<'_>, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
        let w = tape.param(w);
        let b = tape.param(b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder() -> (ParamStore, PatchEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = PatchEncoder::new(&mut store, "img", 28, (4, 6), 8, true, 0.3, &mut rng).unwrap();
        // nonzero biases so the constant-input case is not trivially zero
        for id in [enc.conv1.1, enc.conv2.1, enc.projection.1] {
            for (i, v) in store.get_mut(id).value.data_mut().iter_mut().enumerate() {
                *v = 0.1 * (i as f64 + 1.0);
            }
        }
        (store, enc)
    }

    #[test]
    fn constant_image_gives_identical_cells() {
        let (store, enc) = encoder();
        let mut tape = Tape::new(&store);
        let out = enc.encode(&mut tape, 28, 28, &vec![0.0; 28 * 28 * 3]).unwrap();
        let v = tape.value(out);
        assert_eq!(v.shape(), &[49, 8]);
        for r in 1..49 {
            assert_eq!(v.row_slice(r), v.row_slice(0));
        }
    }

    #[test]
    fn local_perturbation_changes_some_cell() {
        let (store, enc) = encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<f32> = (0..28 * 28 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut b = a.clone();
        for y in 8..12 {
            for x in 16..20 {
                for c in 0..3 {
                    b[(y * 28 + x) * 3 + c] = 1.0 - b[(y * 28 + x) * 3 + c];
                }
            }
        }
        let mut tape = Tape::new(&store);
        let oa = enc.encode(&mut tape, 28, 28, &a).unwrap();
        let ob = enc.encode(&mut tape, 28, 28, &b).unwrap();
        let (va, vb) = (tape.value(oa), tape.value(ob));
        let changed: Vec<usize> = (0..49).filter(|&r| va.row_slice(r) != vb.row_slice(r)).collect();
        assert!(!changed.is_empty());
        // cells outside the touched 4×4 block stay put
        assert!(changed.iter().all(|&c| (2..3).contains(&(c / 7)) && (4..5).contains(&(c % 7))));
    }

    #[test]
    fn wrong_size_is_a_dimension_error() {
        let (store, enc) = encoder();
        let mut tape = Tape::new(&store);
        let err = enc.encode(&mut tape, 14, 14, &vec![0.0; 14 * 14 * 3]).unwrap_err();
        assert!(matches!(err, Error::Dimension { op: "encode_image", .. }));
    }
}
