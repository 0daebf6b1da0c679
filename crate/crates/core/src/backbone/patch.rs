use candle_core::Tensor;

use crate::error::{Error, Result};

/// `[B, C, H, W]` to `[B, (H/p)(W/p), C p^2]`, tokens row-major over the
/// patch grid, features ordered `(channel, dy, dx)`.
pub fn patchify(image: &Tensor, patch: usize) -> Result<(Tensor, (usize, usize))> {
    let (b, c, h, w) = image.dims4()?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!(
            "image {h}x{w} is not divisible by patch size {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let tokens = image
        .reshape((b, c, gh, patch, gw, patch))?
        .permute((0, 2, 4, 1, 3, 5))?
        .reshape((b, gh * gw, c * patch * patch))?;
    Ok((tokens, (gh, gw)))
}

pub fn unpatchify(tokens: &Tensor, grid: (usize, usize), channels: usize, patch: usize) -> Result<Tensor> {
    let (b, n, f) = tokens.dims3()?;
    let (gh, gw) = grid;
    if n != gh * gw || f != channels * patch * patch {
        return Err(Error::Shape(format!(
            "cannot unpatchify {n} tokens of width {f} into a {gh}x{gw} grid of {channels}x{patch}x{patch} patches"
        )));
    }
    Ok(tokens
        .reshape((b, gh, gw, channels, patch, patch))?
        .permute((0, 3, 1, 4, 2, 5))?
        .reshape((b, channels, gh * patch, gw * patch))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn counts() {
        let x = Tensor::zeros((1, 1, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let (t, grid) = patchify(&x, 2).unwrap();
        assert_eq!(t.dims(), &[1, 4, 4]);
        assert_eq!(grid, (2, 2));

        let x = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let (t, _) = patchify(&x, 2).unwrap();
        assert_eq!(t.dims(), &[1, 256, 12]);
    }

    #[test]
    fn token_contents() {
        let x = Tensor::arange(0f32, 16., &Device::Cpu).unwrap().reshape((1, 1, 4, 4)).unwrap();
        let (t, _) = patchify(&x, 2).unwrap();
        let rows = t.squeeze(0).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(rows[0], vec![0., 1., 4., 5.]);
        assert_eq!(rows[1], vec![2., 3., 6., 7.]);
        assert_eq!(rows[3], vec![10., 11., 14., 15.]);
    }

    #[test]
    fn inverse_pair() {
        let x = Tensor::randn(0f32, 1., (2, 3, 8, 6), &Device::Cpu).unwrap();
        let (t, grid) = patchify(&x, 2).unwrap();
        let y = unpatchify(&t, grid, 3, 2).unwrap();
        let a = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn indivisible_rejected() {
        let x = Tensor::zeros((1, 3, 5, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(patchify(&x, 2), Err(Error::Shape(_))));
    }
}
