use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

/// Source coordinate for output index `i` under the half-pixel convention
/// (align-corners false): `(i + 0.5) * in/out - 0.5`, clamped to the valid
/// range so constant maps stay constant.
#[inline]
fn source_coord(i: usize, in_extent: usize, out_extent: usize) -> (usize, usize, f64) {
    let ratio = in_extent as f64 / out_extent as f64;
    let x = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (in_extent - 1) as f64);
    let lo = x.floor() as usize;
    let hi = (lo + 1).min(in_extent - 1);
    (lo, hi, x - lo as f64)
}

/// Bilinear resize to an arbitrary spatial size.
pub fn resize_bilinear<T: Elem>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape("resize target dimensions must be >= 1".into()));
    }
    let [n, c, h, w] = input.shape();
    let mut out = Tensor::zeros([n, c, out_h, out_w]);

    let rows: Vec<(usize, usize, f64)> = (0..out_h).map(|i| source_coord(i, h, out_h)).collect();
    let cols: Vec<(usize, usize, f64)> = (0..out_w).map(|j| source_coord(j, w, out_w)).collect();

    let plane = h * w;
    let out_plane = out_h * out_w;
    for p in 0..n * c {
        let src = &input.data()[p * plane..(p + 1) * plane];
        let dst = &mut out.data_mut()[p * out_plane..(p + 1) * out_plane];
        for (oi, &(r0, r1, fy)) in rows.iter().enumerate() {
            let fy = T::from_f64(fy);
            let gy = T::one() - fy;
            for (oj, &(c0, c1, fx)) in cols.iter().enumerate() {
                let fx = T::from_f64(fx);
                let gx = T::one() - fx;
                let v = gy * (gx * src[r0 * w + c0] + fx * src[r0 * w + c1])
                    + fy * (gx * src[r1 * w + c0] + fx * src[r1 * w + c1]);
                dst[oi * out_w + oj] = v;
            }
        }
    }
    Ok(out)
}

/// Non-learned bilinear upsampling by an integer factor.
pub fn bilinear_upsample<T: Elem>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor < 1 {
        return Err(Error::Spec("upsample factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(input.clone());
    }
    let [_, _, h, w] = input.shape();
    resize_bilinear(input, h * factor, w * factor)
}

/// Transpose of the interpolation map: scatters each output gradient onto the
/// four source positions with the forward weights.
pub fn bilinear_upsample_backward<T: Elem>(
    grad_out: &Tensor<T>,
    factor: usize,
    input_shape: [usize; 4],
) -> Result<Tensor<T>> {
    if factor < 1 {
        return Err(Error::Spec("upsample factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(grad_out.clone());
    }
    let [n, c, h, w] = input_shape;
    let [gn, gc, gh, gw] = grad_out.shape();
    if gn != n || gc != c || gh != h * factor || gw != w * factor {
        return Err(Error::Shape(format!(
            "grad shape {:?} does not match upsample of {:?} by {}",
            grad_out.shape(),
            input_shape,
            factor
        )));
    }
    let mut grad_in = Tensor::zeros(input_shape);
    let rows: Vec<(usize, usize, f64)> = (0..gh).map(|i| source_coord(i, h, gh)).collect();
    let cols: Vec<(usize, usize, f64)> = (0..gw).map(|j| source_coord(j, w, gw)).collect();

    let plane = h * w;
    let out_plane = gh * gw;
    for p in 0..n * c {
        let src = &grad_out.data()[p * out_plane..(p + 1) * out_plane];
        let dst = &mut grad_in.data_mut()[p * plane..(p + 1) * plane];
        for (oi, &(r0, r1, fy)) in rows.iter().enumerate() {
            let fy = T::from_f64(fy);
            let gy = T::one() - fy;
            for (oj, &(c0, c1, fx)) in cols.iter().enumerate() {
                let fx = T::from_f64(fx);
                let gx = T::one() - fx;
                let g = src[oi * gw + oj];
                dst[r0 * w + c0] += gy * gx * g;
                dst[r0 * w + c1] += gy * fx * g;
                dst[r1 * w + c0] += fy * gx * g;
                dst[r1 * w + c1] += fy * fx * g;
            }
        }
    }
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_one_is_identity() {
        let input = Tensor::<f32>::from_fn([1, 2, 3, 3], |_, c, h, w| (c * 9 + h * 3 + w) as f32);
        let out = bilinear_upsample(&input, 1).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn constants_stay_constant() {
        let input = Tensor::<f32>::full([2, 3, 2, 2], 4.5);
        for factor in [2, 3, 8] {
            let out = bilinear_upsample(&input, factor).unwrap();
            assert_eq!(out.shape(), [2, 3, 2 * factor, 2 * factor]);
            assert!(out.iter().all(|&v| (v - 4.5).abs() < 1e-6));
        }
    }

    #[test]
    fn two_by_two_gradient_matches_sampling_formula() {
        // input rows both [0, 1]; factor 2 samples at x in {-.25, .25, .75, 1.25}
        // which clamp/interpolate to [0, 0.25, 0.75, 1].
        let input = Tensor::new([1, 1, 2, 2], vec![0.0f32, 1.0, 0.0, 1.0]).unwrap();
        let out = bilinear_upsample(&input, 2).unwrap();
        let expect = [0.0f32, 0.25, 0.75, 1.0];
        for row in 0..4 {
            for col in 0..4 {
                assert!((out.at(0, 0, row, col) - expect[col]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rejects_factor_zero() {
        let input = Tensor::<f32>::zeros([1, 1, 2, 2]);
        assert!(bilinear_upsample(&input, 0).is_err());
    }

    #[test]
    fn backward_is_transpose_of_forward() {
        // <up(x), g> == <x, up_backward(g)> for the linear map.
        let x = Tensor::<f64>::from_fn([1, 1, 3, 4], |_, _, h, w| (h * 4 + w) as f64 * 0.3 - 1.0);
        let factor = 2;
        let y = bilinear_upsample(&x, factor).unwrap();
        let g = Tensor::<f64>::from_fn(y.shape(), |_, _, h, w| ((h + 2 * w) % 5) as f64 - 2.0);
        let gx = bilinear_upsample_backward(&g, factor, x.shape()).unwrap();
        let lhs: f64 = y.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(gx.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
