use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Image;

/// How attribute values become pixels.
///
/// The hue attribute picks the background colour (mid gray when absent), the
/// glyph attribute draws a 4×4 block code in the centre, and the texture
/// attribute modulates the background with stripes of a value-specific period
/// and orientation. Uniform noise is added last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderRules {
    pub size: usize,
    pub hue_attribute: String,
    /// One RGB triple per value of the hue attribute, in lexicon order.
    pub palette: Vec<[f32; 3]>,
    pub glyph_attribute: String,
    pub texture_attribute: String,
    pub noise: f32,
}

const ABSENT: [f32; 3] = [0.5, 0.5, 0.5];

fn glyph_bits(index: usize) -> u16 {
    // odd multiplier: a bijection on u16, so distinct indices give distinct codes
    ((index as u32 + 1).wrapping_mul(0x1F3D) & 0xFFFF) as u16
}

/// Renders an image from lexicon indices of the three visual attributes.
pub fn render_image<R: Rng>(
    rules: &RenderRules,
    hue: Option<usize>,
    glyph: Option<usize>,
    texture: Option<usize>,
    rng: &mut R,
) -> Image {
    let n = rules.size;
    let bg = hue.map_or(ABSENT, |h| rules.palette[h % rules.palette.len()]);
    let cell = (n / 7).max(1);
    let origin = (n - 4 * cell) / 2;
    let mut pixels = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let mut px = bg;
            if let Some(p) = texture {
                let period = 2 + p / 3;
                let coord = match p % 3 {
                    0 => y,
                    1 => x,
                    _ => x + y,
                };
                if (coord / period) % 2 == 1 {
                    for c in &mut px {
                        *c *= 0.7;
                    }
                }
            }
            if let Some(g) = glyph {
                let inside = |v: usize| v >= origin && v < origin + 4 * cell;
                if inside(y) && inside(x) {
                    let bit = ((y - origin) / cell) * 4 + (x - origin) / cell;
                    if glyph_bits(g) >> bit & 1 == 1 {
                        px = [1.0 - bg[0], 1.0 - bg[1], 1.0 - bg[2]];
                    }
                }
            }
            for c in px {
                let v = c + rng.gen_range(-rules.noise..=rules.noise);
                pixels.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Image { height: n, width: n, pixels }
}
