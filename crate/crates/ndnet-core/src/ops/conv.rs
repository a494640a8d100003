use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

/// How output channels draw from input channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Grouping {
    /// Every output channel is correlated with all input channels.
    Full,
    /// Depthwise: output channel j is computed from input channel j only.
    PerChannel,
}

/// Static description of a 2-D convolution. Weights are shaped
/// `(out_channels, in_channels/groups, kh, kw)` and no bias is carried;
/// batch normalization follows every convolution in these networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub grouping: Grouping,
}

impl ConvSpec {
    pub fn full(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            grouping: Grouping::Full,
        }
    }

    pub fn depthwise(
        channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Self {
        Self {
            in_channels: channels,
            out_channels: channels,
            kernel,
            stride,
            padding,
            grouping: Grouping::PerChannel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Spec(format!(
                "conv channels must be >= 1 (in={}, out={})",
                self.in_channels, self.out_channels
            )));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            return Err(Error::Spec(format!("conv kernel must be >= 1, got {:?}", self.kernel)));
        }
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::Spec(format!("conv stride must be >= 1, got {:?}", self.stride)));
        }
        if self.grouping == Grouping::PerChannel && self.in_channels != self.out_channels {
            return Err(Error::Spec(format!(
                "per-channel grouping requires in_channels == out_channels, got in={} out={}",
                self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    /// Channels a single filter sees: `in_channels` for full grouping, 1 for
    /// per-channel grouping.
    pub fn channels_per_filter(&self) -> usize {
        match self.grouping {
            Grouping::Full => self.in_channels,
            Grouping::PerChannel => 1,
        }
    }

    /// Weight element count: `out_channels * channels_per_filter * kh * kw`.
    pub fn weight_count(&self) -> usize {
        self.out_channels * self.channels_per_filter() * self.kernel.0 * self.kernel.1
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.channels_per_filter(),
            self.kernel.0,
            self.kernel.1,
        ]
    }

    /// Output spatial size: `floor((s + 2p - k) / stride) + 1` per axis.
    pub fn out_spatial(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = out_extent(h, self.kernel.0, self.stride.0, self.padding.0, "rows")?;
        let ow = out_extent(w, self.kernel.1, self.stride.1, self.padding.1, "cols")?;
        Ok((oh, ow))
    }

    fn check_input<T: Elem>(&self, input: &Tensor<T>, weights: &Tensor<T>) -> Result<()> {
        self.validate()?;
        if input.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "input channel count {} does not match spec.in_channels {}",
                input.channels(),
                self.in_channels
            )));
        }
        let expect = self.weight_shape();
        if weights.shape() != expect {
            return Err(Error::Shape(format!(
                "weight shape {:?} does not match spec (expected {:?})",
                weights.shape(),
                expect
            )));
        }
        Ok(())
    }
}

pub(crate) fn out_extent(s: usize, k: usize, stride: usize, pad: usize, axis: &str) -> Result<usize> {
    let padded = s + 2 * pad;
    if padded < k {
        return Err(Error::Shape(format!(
            "kernel {k} exceeds padded input extent {padded} along {axis}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// 2-D convolution with zero padding and no bias.
///
/// Output shape is `(n, out_channels, floor((h+2ph-kh)/sh)+1, floor((w+2pw-kw)/sw)+1)`.
pub fn conv2d<T: Elem>(input: &Tensor<T>, weights: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    spec.check_input(input, weights)?;
    let [n, c_in, h, w] = input.shape();
    let (out_h, out_w) = spec.out_spatial(h, w)?;
    let c_out = spec.out_channels;
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let cpf = spec.channels_per_filter();

    let mut out = Tensor::zeros([n, c_out, out_h, out_w]);
    let in_data = input.data();
    let w_data = weights.data();

    out.data_mut()
        .par_chunks_mut(out_h * out_w)
        .enumerate()
        .for_each(|(chunk_idx, plane)| {
            let bn = chunk_idx / c_out;
            let oc = chunk_idx % c_out;
            let ic_range = match spec.grouping {
                Grouping::Full => 0..c_in,
                Grouping::PerChannel => oc..oc + 1,
            };
            for ic in ic_range {
                let filt_c = match spec.grouping {
                    Grouping::Full => ic,
                    Grouping::PerChannel => 0,
                };
                let filt = &w_data[(oc * cpf + filt_c) * kh * kw..][..kh * kw];
                let in_plane = &in_data[(bn * c_in + ic) * h * w..][..h * w];
                for oh in 0..out_h {
                    let out_row = &mut plane[oh * out_w..][..out_w];
                    for ki in 0..kh {
                        let ih = (oh * sh + ki) as isize - ph as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let in_row = &in_plane[ih as usize * w..][..w];
                        for kj in 0..kw {
                            let wv = filt[ki * kw + kj];
                            let (lo, hi) = col_bounds(out_w, w, sw, pw, kj);
                            for ow in lo..hi {
                                out_row[ow] += wv * in_row[ow * sw + kj - pw];
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Valid output-column range for kernel column `kj`: those `ow` with
/// `0 <= ow*sw + kj - pw < w`. Returned as half-open `[lo, hi)`.
#[inline]
fn col_bounds(out_w: usize, w: usize, sw: usize, pw: usize, kj: usize) -> (usize, usize) {
    let lo = if kj >= pw { 0 } else { (pw - kj).div_ceil(sw) };
    let hi = if w + pw > kj {
        (((w + pw - kj - 1) / sw) + 1).min(out_w)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Depthwise convolution: output channel j depends only on input channel j.
/// Weights are shaped `(c, 1, kh, kw)`.
pub fn conv2d_depthwise<T: Elem>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    if spec.grouping != Grouping::PerChannel {
        return Err(Error::Spec(
            "conv2d_depthwise requires per-channel grouping".into(),
        ));
    }
    conv2d(input, weights, spec)
}

/// 3x3 convolution factorized into a (3,1) pass followed by a (1,3) pass.
/// Stride and padding are split per axis so the composed output shape equals
/// the equivalent 3x3 convolution's.
pub fn conv2d_asymmetric<T: Elem>(
    input: &Tensor<T>,
    w31: &Tensor<T>,
    w13: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    if spec.kernel != (3, 3) {
        return Err(Error::Spec(format!(
            "asymmetric factorization is defined for 3x3 kernels, got {:?}",
            spec.kernel
        )));
    }
    if spec.grouping != Grouping::Full {
        return Err(Error::Spec(
            "asymmetric factorization is defined for full grouping".into(),
        ));
    }
    let mid = w31.shape()[0];
    if w31.shape()[2..] != [3, 1] {
        return Err(Error::Spec(format!(
            "first factor must have kernel (3,1), got {:?}",
            &w31.shape()[2..]
        )));
    }
    if w13.shape()[2..] != [1, 3] {
        return Err(Error::Spec(format!(
            "second factor must have kernel (1,3), got {:?}",
            &w13.shape()[2..]
        )));
    }
    let spec31 = ConvSpec::full(
        spec.in_channels,
        mid,
        (3, 1),
        (spec.stride.0, 1),
        (spec.padding.0, 0),
    );
    let spec13 = ConvSpec::full(
        mid,
        spec.out_channels,
        (1, 3),
        (1, spec.stride.1),
        (0, spec.padding.1),
    );
    let mid_out = conv2d(input, w31, &spec31)?;
    conv2d(&mid_out, w13, &spec13)
}

/// Gradient of `conv2d` with respect to its input.
pub fn conv2d_backward_input<T: Elem>(
    grad_out: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
    input_shape: [usize; 4],
) -> Result<Tensor<T>> {
    let [n, c_in, h, w] = input_shape;
    let [gn, gc, out_h, out_w] = grad_out.shape();
    if gn != n || gc != spec.out_channels {
        return Err(Error::Shape(format!(
            "grad_out shape {:?} does not match conv output (n={}, c={})",
            grad_out.shape(),
            n,
            spec.out_channels
        )));
    }
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let cpf = spec.channels_per_filter();
    let c_out = spec.out_channels;

    let mut grad_in = Tensor::zeros([n, c_in, h, w]);
    let g_data = grad_out.data();
    let w_data = weights.data();

    grad_in
        .data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(chunk_idx, plane)| {
            let bn = chunk_idx / c_in;
            let ic = chunk_idx % c_in;
            let oc_range = match spec.grouping {
                Grouping::Full => 0..c_out,
                Grouping::PerChannel => ic..ic + 1,
            };
            for oc in oc_range {
                let filt_c = match spec.grouping {
                    Grouping::Full => ic,
                    Grouping::PerChannel => 0,
                };
                let filt = &w_data[(oc * cpf + filt_c) * kh * kw..][..kh * kw];
                let g_plane = &g_data[(bn * c_out + oc) * out_h * out_w..][..out_h * out_w];
                for oh in 0..out_h {
                    let g_row = &g_plane[oh * out_w..][..out_w];
                    for ki in 0..kh {
                        let ih = (oh * sh + ki) as isize - ph as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let in_row = &mut plane[ih as usize * w..][..w];
                        for kj in 0..kw {
                            let wv = filt[ki * kw + kj];
                            let (lo, hi) = col_bounds(out_w, w, sw, pw, kj);
                            for ow in lo..hi {
                                in_row[ow * sw + kj - pw] += wv * g_row[ow];
                            }
                        }
                    }
                }
            }
        });
    Ok(grad_in)
}

/// Gradient of `conv2d` with respect to its weights.
pub fn conv2d_backward_weights<T: Elem>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let [n, c_in, h, w] = input.shape();
    let [_, _, out_h, out_w] = grad_out.shape();
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let cpf = spec.channels_per_filter();
    let c_out = spec.out_channels;

    let mut grad_w = Tensor::zeros(spec.weight_shape());
    let g_data = grad_out.data();
    let in_data = input.data();

    grad_w
        .data_mut()
        .par_chunks_mut(cpf * kh * kw)
        .enumerate()
        .for_each(|(oc, filt_grad)| {
            let ic_range = match spec.grouping {
                Grouping::Full => 0..c_in,
                Grouping::PerChannel => oc..oc + 1,
            };
            for bn in 0..n {
                let g_plane = &g_data[(bn * c_out + oc) * out_h * out_w..][..out_h * out_w];
                for ic in ic_range.clone() {
                    let filt_c = match spec.grouping {
                        Grouping::Full => ic,
                        Grouping::PerChannel => 0,
                    };
                    let in_plane = &in_data[(bn * c_in + ic) * h * w..][..h * w];
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let mut acc = T::zero();
                            for oh in 0..out_h {
                                let ih = (oh * sh + ki) as isize - ph as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let g_row = &g_plane[oh * out_w..][..out_w];
                                let in_row = &in_plane[ih as usize * w..][..w];
                                let (lo, hi) = col_bounds(out_w, w, sw, pw, kj);
                                for ow in lo..hi {
                                    acc += g_row[ow] * in_row[ow * sw + kj - pw];
                                }
                            }
                            filt_grad[(filt_c * kh + ki) * kw + kj] += acc;
                        }
                    }
                }
            }
        });
    Ok(grad_w)
}
