use crate::datamodel::Image;
use crate::error::{MoodError, Result};
use crate::linalg::Matrix;

/// Non-overlapping `P×P×C` patches of one image, row-major over the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    tokens: Matrix,
    grid: (usize, usize),
    patch_size: usize,
    channels: usize,
}

impl PatchSequence {
    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    /// `(rows, cols)` of the patch grid.
    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Length of one flattened patch, `P²·C`.
    pub fn token_dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn token(&self, t: usize) -> &[f64] {
        self.tokens.row(t)
    }

    pub fn token_mut(&mut self, t: usize) -> &mut [f64] {
        self.tokens.row_mut(t)
    }
}

pub fn patchify(image: &Image, patch_size: usize) -> Result<PatchSequence> {
    let (h, w, c) = image.shape();
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(MoodError::Geometry(format!(
            "{h}x{w} image is not divisible into {patch_size}x{patch_size} patches"
        )));
    }
    let (rows, cols) = (h / patch_size, w / patch_size);
    let dim = patch_size * patch_size * c;
    let mut tokens = Matrix::zeros(rows * cols, dim);
    for gr in 0..rows {
        for gc in 0..cols {
            let tok = tokens.row_mut(gr * cols + gc);
            let mut k = 0;
            for py in 0..patch_size {
                for px in 0..patch_size {
                    for ch in 0..c {
                        tok[k] = image.get(gr * patch_size + py, gc * patch_size + px, ch);
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(PatchSequence {
        tokens,
        grid: (rows, cols),
        patch_size,
        channels: c,
    })
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &PatchSequence) -> Result<Image> {
    let (rows, cols) = patches.grid;
    let p = patches.patch_size;
    let c = patches.channels;
    let (h, w) = (rows * p, cols * p);
    let mut image = Image::new(h, w, c, vec![0.0; h * w * c])?;
    for gr in 0..rows {
        for gc in 0..cols {
            let tok = patches.tokens.row(gr * cols + gc);
            let mut k = 0;
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..c {
                        image.set(gr * p + py, gc * p + px, ch, tok[k]);
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn four_by_four_grid_order() {
        let img = Image::new(4, 4, 1, (0..16).map(f64::from).collect()).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p.token(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.token(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.token(2), &[8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn shape_arithmetic() {
        let img = Image::new(8, 8, 1, vec![0.0; 64]).unwrap();
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p.token_dim(), 16);
        assert_eq!(p.grid(), (2, 2));
    }

    #[test]
    fn indivisible_rejected() {
        let img = Image::new(6, 8, 1, vec![0.0; 48]).unwrap();
        assert!(matches!(patchify(&img, 4), Err(MoodError::Geometry(_))));
        assert!(patchify(&img, 0).is_err());
    }

    proptest! {
        #[test]
        fn unpatchify_inverts_patchify(
            rows in 1usize..4, cols in 1usize..4, p in 1usize..4, c in 1usize..4,
            seed in proptest::collection::vec(0.0f64..1.0, 432),
        ) {
            let (h, w) = (rows * p, cols * p);
            let img = Image::new(h, w, c, seed[..h * w * c].to_vec()).unwrap();
            let patches = patchify(&img, p).unwrap();
            prop_assert_eq!(patches.len(), rows * cols);
            prop_assert_eq!(unpatchify(&patches).unwrap(), img);
        }
    }
}
