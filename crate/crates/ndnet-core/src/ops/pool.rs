use crate::error::{Error, Result};
use crate::ops::conv::out_extent;
use crate::tensor::{Elem, Tensor};

/// Max-pooling window geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PoolSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl PoolSpec {
    pub fn new(kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::Spec(format!(
                "pooling kernel and stride must be >= 1, got kernel {:?} stride {:?}",
                self.kernel, self.stride
            )));
        }
        // A window lying entirely inside the padding would pool over nothing.
        if self.padding.0 >= self.kernel.0 || self.padding.1 >= self.kernel.1 {
            return Err(Error::Spec(format!(
                "padding {:?} must be smaller than kernel {:?}; a window would sit entirely inside padding",
                self.padding, self.kernel
            )));
        }
        Ok(())
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = out_extent(h, self.kernel.0, self.stride.0, self.padding.0, "rows")?;
        let ow = out_extent(w, self.kernel.1, self.stride.1, self.padding.1, "cols")?;
        Ok((oh, ow))
    }
}

/// Max pooling. Padded positions never win (padding acts as negative
/// infinity) and ties go to the first occurrence in row-major window order.
pub fn maxpool2d<T: Elem>(input: &Tensor<T>, spec: &PoolSpec) -> Result<Tensor<T>> {
    maxpool2d_with_indices(input, spec).map(|(out, _)| out)
}

/// Max pooling that also returns, per output element, the flat index of the
/// selected input element. The indices drive the backward routing.
pub fn maxpool2d_with_indices<T: Elem>(
    input: &Tensor<T>,
    spec: &PoolSpec,
) -> Result<(Tensor<T>, Vec<usize>)> {
    spec.validate()?;
    let [n, c, h, w] = input.shape();
    let (out_h, out_w) = spec.out_spatial(h, w)?;
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;

    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    let mut argmax = vec![0usize; n * c * out_h * out_w];
    let data = input.data();

    let mut o = 0;
    for bn in 0..n {
        for ch in 0..c {
            let plane_off = (bn * c + ch) * h * w;
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for ki in 0..kh {
                        let ih = (oh * sh + ki) as isize - ph as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kj in 0..kw {
                            let iw = (ow * sw + kj) as isize - pw as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let idx = plane_off + ih as usize * w + iw as usize;
                            let v = data[idx];
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    debug_assert_ne!(best_idx, usize::MAX, "window saw no input element");
                    out.data_mut()[o] = best;
                    argmax[o] = best_idx;
                    o += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Routes each output gradient to the input position that won its window.
pub fn maxpool2d_backward<T: Elem>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_shape: [usize; 4],
) -> Result<Tensor<T>> {
    if grad_out.len() != argmax.len() {
        return Err(Error::Shape(format!(
            "grad length {} does not match pooled index count {}",
            grad_out.len(),
            argmax.len()
        )));
    }
    let mut grad_in = Tensor::zeros(input_shape);
    let g = grad_in.data_mut();
    for (gv, &idx) in grad_out.iter().zip(argmax) {
        g[idx] += *gv;
    }
    Ok(grad_in)
}
