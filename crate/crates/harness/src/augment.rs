//! Reflect-pad-and-crop plus horizontal flips.

use detrame_core::{Result, Rng, Tensor};

pub const PAD: usize = 4;

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i };
    r as usize
}

/// Crops an `h × w` window at `(oy, ox)` from the image reflect-padded by
/// [`PAD`] on every side, mirroring columns when `flip` is set. `(PAD, PAD)`
/// without a flip is the identity.
pub fn crop_flip(image: &[f64], channels: usize, h: usize, w: usize, oy: usize, ox: usize, flip: bool) -> Vec<f64> {
    let mut out = vec![0.0; channels * h * w];
    for c in 0..channels {
        for r in 0..h {
            let sr = reflect((oy + r) as isize - PAD as isize, h);
            for col in 0..w {
                let cc = if flip { w - 1 - col } else { col };
                let sc = reflect((ox + cc) as isize - PAD as isize, w);
                out[(c * h + r) * w + col] = image[(c * h + sr) * w + sc];
            }
        }
    }
    out
}

/// Random choices for one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub oy: usize,
    pub ox: usize,
    pub flip: bool,
}

impl AugmentDraw {
    /// Crop offset uniform in `[0, 2·PAD]²`, flip with probability ½.
    pub fn sample(rng: &mut Rng) -> Self {
        let oy = rng.below(2 * PAD + 1);
        let ox = rng.below(2 * PAD + 1);
        AugmentDraw {
            oy,
            ox,
            flip: rng.bernoulli(0.5),
        }
    }
}

pub fn augment_batch(x: &mut Tensor, rng: &mut Rng) -> Result<()> {
    let (n, c, h, w) = x.dims4()?;
    for i in 0..n {
        let AugmentDraw { oy, ox, flip } = AugmentDraw::sample(rng);
        let out = crop_flip(x.item(i), c, h, w, oy, ox, flip);
        x.item_mut(i).copy_from_slice(&out);
    }
    Ok(())
}
