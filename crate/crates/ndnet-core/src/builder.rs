//! Constructors for the narrow bottleneck residual layer, the classic
//! bottleneck (for comparison), the backbone family of presets, and the
//! FCN32 segmentation head.

use crate::error::{Error, Result};
use crate::graph::{ConvLayer, InputContract, LayerGraph, ParamClass, Unit};
use crate::ops::{ConvSpec, PoolSpec};
use crate::tensor::Elem;

/// Shortcut wiring of a residual layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShortcutKind {
    Identity,
    Projection,
}

/// One narrow bottleneck residual layer: two stacked separable convolutions
/// whose pointwise stages reduce the width to `n_md` and restore it to
/// `e * n_md`, with a shortcut added around the pair.
#[derive(Clone, Copy, Debug)]
pub struct NarrowBottleneckSpec {
    /// Middle width; the outer width is `e * n_md`.
    pub n_md: usize,
    /// Expansion factor relating outer and middle widths.
    pub e: usize,
    pub stride: usize,
    pub shortcut: ShortcutKind,
}

impl NarrowBottleneckSpec {
    pub fn stride1(n_md: usize, e: usize) -> Self {
        Self {
            n_md,
            e,
            stride: 1,
            shortcut: ShortcutKind::Identity,
        }
    }

    pub fn stride2(n_md: usize, e: usize) -> Self {
        Self {
            n_md,
            e,
            stride: 2,
            shortcut: ShortcutKind::Projection,
        }
    }

    pub fn outer_width(&self) -> usize {
        self.e * self.n_md
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_md == 0 || self.e == 0 {
            return Err(Error::Spec(format!(
                "narrow bottleneck widths must be >= 1 (n_md={}, e={})",
                self.n_md, self.e
            )));
        }
        match (self.stride, self.shortcut) {
            (1, ShortcutKind::Identity) | (2, ShortcutKind::Projection) => Ok(()),
            (2, ShortcutKind::Identity) => Err(Error::Spec(
                "stride-2 narrow bottleneck requires a projection shortcut".into(),
            )),
            (1, ShortcutKind::Projection) => Err(Error::Spec(
                "stride-1 narrow bottleneck with matching channels uses an identity shortcut"
                    .into(),
            )),
            (s, _) => Err(Error::Spec(format!("stride must be 1 or 2, got {s}"))),
        }
    }
}

/// A stage of `d` narrow bottleneck residual layers at one feature scale.
#[derive(Clone, Copy, Debug)]
pub struct BlockSpec {
    pub d: usize,
    pub n_md: usize,
    pub e: usize,
    pub downsample: bool,
}

impl BlockSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_md == 0 || self.e == 0 {
            return Err(Error::Spec(format!(
                "block requires d, n_md, e >= 1 (d={}, n_md={}, e={})",
                self.d, self.n_md, self.e
            )));
        }
        Ok(())
    }
}

/// Complete description of a backbone: the channel and depth combinations of
/// the last three blocks, the expansion factor, stem width and class count.
/// Fully determines the network.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NetworkSpec {
    pub channel_combination: [usize; 3],
    pub depth_combination: [usize; 3],
    pub expansion: usize,
    pub stem_width: usize,
    pub num_classes: usize,
}

impl NetworkSpec {
    pub fn new(
        channel_combination: [usize; 3],
        depth_combination: [usize; 3],
        expansion: usize,
        stem_width: usize,
        num_classes: usize,
    ) -> Self {
        Self {
            channel_combination,
            depth_combination,
            expansion,
            stem_width,
            num_classes,
        }
    }

    /// Named preset architectures. `ndnet29/45/61` follow the published
    /// channel and depth combinations at e=4; `ndnet29-wide` is the wide
    /// baseline with channels [64, 128, 256].
    pub fn preset(name: &str) -> Option<Self> {
        let (channels, depths) = match name {
            "ndnet29" => ([24, 48, 96], [3, 8, 3]),
            "ndnet45" => ([16, 32, 64], [4, 12, 6]),
            "ndnet61" => ([12, 24, 48], [6, 16, 8]),
            "ndnet29-wide" => ([64, 128, 256], [3, 8, 3]),
            _ => return None,
        };
        Some(Self::new(channels, depths, 4, 32, 19))
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["ndnet29", "ndnet45", "ndnet61", "ndnet29-wide"]
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_combination.iter().any(|&c| c == 0) {
            return Err(Error::Spec(format!(
                "channel combination must be positive, got {:?}",
                self.channel_combination
            )));
        }
        if self.depth_combination.iter().any(|&d| d == 0) {
            return Err(Error::Spec(format!(
                "depth combination must be positive, got {:?}",
                self.depth_combination
            )));
        }
        if self.expansion == 0 || self.stem_width == 0 {
            return Err(Error::Spec(format!(
                "expansion ({}) and stem width ({}) must be >= 1",
                self.expansion, self.stem_width
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Spec("num_classes must be >= 1".into()));
        }
        Ok(())
    }

    /// Counting each separable convolution as a single layer: the stem conv
    /// plus two layers per residual layer.
    pub fn nominal_depth(&self) -> usize {
        1 + 2 * self.depth_combination.iter().sum::<usize>()
    }

    /// Output width of the last block (`e * n_md3`), the "max width" of the
    /// network.
    pub fn max_width(&self) -> usize {
        self.expansion * self.channel_combination[2]
    }
}

fn dw3x3(channels: usize, stride: usize) -> ConvSpec {
    ConvSpec::depthwise(channels, (3, 3), (stride, stride), (1, 1))
}

fn pw1x1(from: usize, to: usize, stride: usize) -> ConvSpec {
    ConvSpec::full(from, to, (1, 1), (stride, stride), (0, 0))
}

fn narrow_bottleneck_unit<T: Elem>(
    name: &str,
    spec: NarrowBottleneckSpec,
    class: ParamClass,
) -> Unit<T> {
    let outer = spec.outer_width();
    let body = vec![
        Unit::Conv(ConvLayer::new(
            format!("{name}.dw1"),
            class,
            dw3x3(outer, spec.stride),
        )),
        Unit::Conv(ConvLayer::new(
            format!("{name}.pw1"),
            class,
            pw1x1(outer, spec.n_md, 1),
        )),
        Unit::Conv(ConvLayer::new(
            format!("{name}.dw2"),
            class,
            dw3x3(spec.n_md, 1),
        )),
        // last batch norm sits before the addition; ReLU follows the addition
        Unit::Conv(ConvLayer::new(format!("{name}.pw2"), class, pw1x1(spec.n_md, outer, 1)).without_relu()),
    ];
    let shortcut = match spec.shortcut {
        ShortcutKind::Identity => None,
        ShortcutKind::Projection => Some(Box::new(Unit::Conv(
            ConvLayer::new(
                format!("{name}.shortcut"),
                ParamClass::Projection,
                pw1x1(outer, outer, spec.stride),
            )
            .without_relu(),
        ))),
    };
    Unit::Residual {
        name: name.to_string(),
        body,
        shortcut,
    }
}

/// Builds a single narrow bottleneck residual layer as a graph fragment.
///
/// The main path carries `9*e*n_md + e*n_md^2 + 9*n_md + e*n_md^2` conv
/// weights; a stride-2 layer adds a 1x1 projection shortcut on top.
pub fn build_narrow_bottleneck<T: Elem>(spec: NarrowBottleneckSpec) -> Result<LayerGraph<T>> {
    spec.validate()?;
    Ok(LayerGraph::from_units(vec![narrow_bottleneck_unit(
        "narrow",
        spec,
        ParamClass::Block,
    )]))
}

/// Builds the classic three-layer bottleneck (1x1 reduce, 3x3, 1x1 restore)
/// at outer width `e * n_md`, for cost comparisons against the narrow layer.
pub fn build_original_bottleneck<T: Elem>(n_md: usize, e: usize) -> Result<LayerGraph<T>> {
    if n_md == 0 || e == 0 {
        return Err(Error::Spec(format!(
            "bottleneck widths must be >= 1 (n_md={n_md}, e={e})"
        )));
    }
    let outer = e * n_md;
    let name = "bottleneck";
    let body = vec![
        Unit::Conv(ConvLayer::new(
            format!("{name}.reduce"),
            ParamClass::Block,
            pw1x1(outer, n_md, 1),
        )),
        Unit::Conv(ConvLayer::new(
            format!("{name}.conv3x3"),
            ParamClass::Block,
            ConvSpec::full(n_md, n_md, (3, 3), (1, 1), (1, 1)),
        )),
        Unit::Conv(
            ConvLayer::new(format!("{name}.restore"), ParamClass::Block, pw1x1(n_md, outer, 1))
                .without_relu(),
        ),
    ];
    Ok(LayerGraph::from_units(vec![Unit::Residual {
        name: name.to_string(),
        body,
        shortcut: None,
    }]))
}

/// Builds the backbone: a stride-2 3x3 stem plus 3x3/s2 max pool, then three
/// blocks of narrow bottleneck layers. Each block opens with a stride-2 1x1
/// projection that widens the stream to `e * n_md` and also feeds the first
/// layer's shortcut, so every residual layer runs at the block's full width.
pub fn build_ndnet<T: Elem>(spec: &NetworkSpec) -> Result<LayerGraph<T>> {
    spec.validate()?;
    let mut units: Vec<Unit<T>> = vec![
        Unit::Conv(ConvLayer::new(
            "stem.conv",
            ParamClass::Stem,
            ConvSpec::full(3, spec.stem_width, (3, 3), (2, 2), (1, 1)),
        )),
        Unit::MaxPool {
            name: "stem.pool".into(),
            spec: PoolSpec::new((3, 3), (2, 2), (1, 1)),
        },
    ];

    let mut width = spec.stem_width;
    for (block_idx, (&n_md, &d)) in spec
        .channel_combination
        .iter()
        .zip(&spec.depth_combination)
        .enumerate()
    {
        let block = BlockSpec {
            d,
            n_md,
            e: spec.expansion,
            downsample: true,
        };
        block.validate()?;
        let outer = spec.expansion * n_md;
        let block_name = format!("block{}", block_idx + 1);
        units.push(Unit::Conv(
            ConvLayer::new(
                format!("{block_name}.proj"),
                ParamClass::Projection,
                pw1x1(width, outer, 2),
            ),
        ));
        for layer_idx in 0..d {
            units.push(narrow_bottleneck_unit(
                &format!("{block_name}.layer{}", layer_idx + 1),
                NarrowBottleneckSpec::stride1(n_md, spec.expansion),
                ParamClass::Block,
            ));
        }
        width = outer;
    }

    let mut graph = LayerGraph::from_units(units);
    graph.nominal_depth = Some(spec.nominal_depth());
    graph.input_contract = Some(InputContract {
        channels: 3,
        spatial_divisor: 32,
    });
    graph.network_spec = Some(spec.clone());
    Ok(graph)
}

/// Channel count produced by the last conv in a unit sequence.
fn output_channels<T: Elem>(units: &[Unit<T>]) -> Option<usize> {
    for unit in units.iter().rev() {
        match unit {
            Unit::Conv(layer) => return Some(layer.spec.out_channels),
            Unit::Residual { body, .. } => {
                if let Some(c) = output_channels(body) {
                    return Some(c);
                }
            }
            _ => {}
        }
    }
    None
}

/// Appends the FCN32 head: a 3x3 context conv at the backbone width, a 1x1
/// classifier to `num_classes` score channels, and a non-learned bilinear
/// x32 upsample back to input resolution.
pub fn attach_fcn32_head<T: Elem>(mut backbone: LayerGraph<T>, num_classes: usize) -> Result<LayerGraph<T>> {
    if num_classes == 0 {
        return Err(Error::Spec("num_classes must be >= 1".into()));
    }
    let width = output_channels(&backbone.units).ok_or_else(|| {
        Error::Spec("backbone has no convolution to infer its output width from".into())
    })?;
    backbone.units.push(Unit::Conv(ConvLayer::new(
        "head.context",
        ParamClass::Head,
        ConvSpec::full(width, width, (3, 3), (1, 1), (1, 1)),
    )));
    backbone.units.push(Unit::Conv(
        ConvLayer::new(
            "head.classifier",
            ParamClass::Head,
            pw1x1(width, num_classes, 1),
        )
        .without_bn()
        .without_relu(),
    ));
    backbone.units.push(Unit::Upsample {
        name: "head.upsample".into(),
        factor: 32,
    });
    Ok(backbone)
}

/// Backbone plus FCN32 head in one call, classes taken from the spec.
pub fn build_fcn32<T: Elem>(spec: &NetworkSpec) -> Result<LayerGraph<T>> {
    attach_fcn32_head(build_ndnet(spec)?, spec.num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ParamClass;
    use crate::ops::Mode;
    use crate::tensor::Tensor;

    fn conv_param_count<T: Elem>(graph: &LayerGraph<T>, class: Option<ParamClass>) -> usize {
        let mut total = 0;
        graph.visit_convs(&mut |l| {
            if class.map_or(true, |c| l.class == c) {
                total += l.weight.len();
            }
        });
        total
    }

    #[test]
    fn narrow_layer_param_count_e4_nmd24() {
        // 9*e*n + e*n^2 + 9*n + e*n^2 = 864 + 2304 + 216 + 2304 = 5688
        let g = build_narrow_bottleneck::<f32>(NarrowBottleneckSpec::stride1(24, 4)).unwrap();
        assert_eq!(conv_param_count(&g, Some(ParamClass::Block)), 5688);
    }

    #[test]
    fn stride1_preserves_shape_and_stride2_halves_it() {
        let g1 = build_narrow_bottleneck::<f32>(NarrowBottleneckSpec::stride1(4, 4)).unwrap();
        assert_eq!(g1.out_shape([2, 16, 8, 8]).unwrap(), [2, 16, 8, 8]);
        let g2 = build_narrow_bottleneck::<f32>(NarrowBottleneckSpec::stride2(4, 4)).unwrap();
        assert_eq!(g2.out_shape([2, 16, 8, 8]).unwrap(), [2, 16, 4, 4]);
    }

    #[test]
    fn invalid_stride_shortcut_combinations_are_rejected() {
        let mut s = NarrowBottleneckSpec::stride2(8, 4);
        s.shortcut = ShortcutKind::Identity;
        assert!(s.validate().is_err());
        let mut s = NarrowBottleneckSpec::stride1(8, 4);
        s.shortcut = ShortcutKind::Projection;
        assert!(s.validate().is_err());
        let mut s = NarrowBottleneckSpec::stride1(8, 4);
        s.stride = 3;
        assert!(s.validate().is_err());
    }

    #[test]
    fn original_bottleneck_matches_17_nmd_squared() {
        let g = build_original_bottleneck::<f32>(64, 4).unwrap();
        assert_eq!(conv_param_count(&g, None), 17 * 64 * 64);
        assert_eq!(g.out_shape([1, 256, 14, 14]).unwrap(), [1, 256, 14, 14]);
    }

    #[test]
    fn preset_depths_follow_the_naming_convention() {
        for (name, depth) in [("ndnet29", 29), ("ndnet45", 45), ("ndnet61", 61)] {
            let spec = NetworkSpec::preset(name).unwrap();
            assert_eq!(spec.nominal_depth(), depth, "{name}");
        }
        assert_eq!(NetworkSpec::preset("ndnet29-wide").unwrap().nominal_depth(), 29);
        assert!(NetworkSpec::preset("ndnet13").is_none());
    }

    #[test]
    fn backbone_block_outputs_sit_at_published_scales() {
        let spec = NetworkSpec::preset("ndnet45").unwrap();
        let g = build_ndnet::<f32>(&spec).unwrap();
        // probe shape propagation through stem and each block
        let mut shape = [1usize, 3, 1024, 2048];
        let mut scales = Vec::new();
        for unit in g.units() {
            shape = unit.out_shape(shape).unwrap();
            scales.push((unit.name().to_string(), shape));
        }
        let find = |n: &str| scales.iter().find(|(name, _)| name == n).unwrap().1;
        assert_eq!(find("stem.conv"), [1, 32, 512, 1024]);
        assert_eq!(find("stem.pool"), [1, 32, 256, 512]);
        assert_eq!(find("block1.layer4"), [1, 64, 128, 256]);
        assert_eq!(find("block2.layer12"), [1, 128, 64, 128]);
        assert_eq!(find("block3.layer6"), [1, 256, 32, 64]);
    }

    #[test]
    fn fcn32_head_restores_input_resolution() {
        let spec = NetworkSpec::new([4, 8, 16], [1, 1, 1], 4, 8, 19);
        let g = build_fcn32::<f32>(&spec).unwrap();
        assert_eq!(g.out_shape([2, 3, 64, 64]).unwrap(), [2, 19, 64, 64]);
        let single = attach_fcn32_head(build_ndnet::<f32>(&spec).unwrap(), 1).unwrap();
        assert_eq!(single.out_shape([1, 3, 64, 64]).unwrap(), [1, 1, 64, 64]);
    }

    #[test]
    fn head_param_count_follows_width_and_classes() {
        // 3x3 C->C plus 1x1 C->K: 9C^2 + CK conv weights, one 2C batch norm
        let spec = NetworkSpec::preset("ndnet45").unwrap();
        let g = build_fcn32::<f32>(&spec).unwrap();
        let head = conv_param_count(&g, Some(ParamClass::Head));
        assert_eq!(head, 9 * 256 * 256 + 256 * 19);
    }

    #[test]
    fn forward_rejects_non_divisible_input_with_hint() {
        let spec = NetworkSpec::new([4, 8, 16], [1, 1, 1], 4, 8, 3);
        let mut g = build_fcn32::<f32>(&spec).unwrap();
        let input = Tensor::zeros([1, 3, 60, 64]);
        let err = g.forward(&input, Mode::Eval).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("divisible by 32"), "{msg}");
        assert!(msg.contains("64x64"), "hint names the padded size: {msg}");
    }

    #[test]
    fn tiny_net_forward_shapes_and_determinism() {
        let spec = NetworkSpec::new([4, 8, 16], [1, 1, 1], 4, 8, 5);
        let mut g = build_fcn32::<f32>(&spec).unwrap();
        g.init_params(11);
        let x = Tensor::from_fn([2, 3, 64, 64], |n, c, h, w| {
            ((n + c + h + w) % 13) as f32 * 0.1 - 0.5
        });
        let out = g.forward(&x, Mode::Train).unwrap();
        assert_eq!(out.shape(), [2, 5, 64, 64]);
        let a = g.forward(&x, Mode::Eval).unwrap();
        let b = g.forward(&x, Mode::Eval).unwrap();
        assert_eq!(a.data(), b.data(), "eval mode is bitwise deterministic");
    }

    #[test]
    fn zeroed_stride1_layer_with_bypassed_bn_is_relu() {
        let mut g = build_narrow_bottleneck::<f32>(NarrowBottleneckSpec::stride1(3, 2)).unwrap();
        g.visit_convs_mut(&mut |layer| {
            layer.weight.data_mut().fill(0.0);
            if let Some(bn) = layer.bn.as_mut() {
                let c = bn.channels();
                bn.set_running(&vec![0.0; c], &vec![1.0; c]).unwrap();
            }
        });
        let x = Tensor::from_fn([1, 6, 5, 5], |_, c, h, w| {
            ((c * 25 + h * 5 + w) as f32 % 7.0) - 3.0
        });
        let out = g.forward_eval(&x).unwrap();
        let expect = crate::ops::relu(&x);
        assert_eq!(out.data(), expect.data());
    }
}
