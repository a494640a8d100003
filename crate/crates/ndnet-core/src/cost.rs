//! Closed-form parameter/Multi-adds algebra and the exact graph-walk
//! counter that cross-checks it.
//!
//! Multi-adds count one fused multiply-add per weight application at each
//! output position; batch norm, ReLU, pooling and upsampling contribute
//! zero. All counting is exact integer arithmetic.

use std::fmt::Write as _;

use crate::builder::NetworkSpec;
use crate::error::{Error, Result};
use crate::graph::{LayerGraph, ParamClass, Unit};
use crate::tensor::Elem;

/// Symbols of the closed-form cost expressions: kernel size, feature dims,
/// in/out channels, expansion, middle width, layer count.
#[derive(Clone, Copy, Debug, Default)]
pub struct CostQuery {
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub m: usize,
    pub n: usize,
    pub e: usize,
    pub n_md: usize,
    pub d: usize,
}

/// Exact unsigned rational, kept unreduced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ratio {
    pub num: u128,
    pub den: u128,
}

impl Ratio {
    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

fn mul(a: u128, b: u128) -> Result<u128> {
    a.checked_mul(b)
        .ok_or_else(|| Error::Numeric(format!("cost arithmetic overflow: {a} * {b}")))
}

/// Multi-adds of a standard convolution: `k^2 * H * W * M * N`.
pub fn multiadds_standard(q: &CostQuery) -> Result<u128> {
    let k2 = mul(q.k as u128, q.k as u128)?;
    let hw = mul(q.h as u128, q.w as u128)?;
    mul(mul(k2, hw)?, mul(q.m as u128, q.n as u128)?)
}

/// Multi-adds of a separable convolution: `k^2*H*W*M + H*W*M*N`, the
/// depthwise and pointwise terms.
pub fn multiadds_separable(q: &CostQuery) -> Result<u128> {
    let hw = mul(q.h as u128, q.w as u128)?;
    let depthwise = mul(mul(mul(q.k as u128, q.k as u128)?, hw)?, q.m as u128)?;
    let pointwise = mul(mul(hw, q.m as u128)?, q.n as u128)?;
    depthwise
        .checked_add(pointwise)
        .ok_or_else(|| Error::Numeric("cost arithmetic overflow in separable sum".into()))
}

/// Cost ratio of standard to separable convolution: `k^2 * N / (k^2 + N)`.
/// Approaches `k^2` as `N` grows.
pub fn separable_ratio(k: usize, n: usize) -> Result<Ratio> {
    if k == 0 || n == 0 {
        return Err(Error::Spec("separable ratio requires k, N >= 1".into()));
    }
    let k2 = (k * k) as u128;
    Ok(Ratio {
        num: mul(k2, n as u128)?,
        den: k2 + n as u128,
    })
}

/// Cost ratio of a 3x3 convolution to its (3,1)+(1,3) factorization at equal
/// channels: 9/6.
pub fn asymmetric_ratio() -> Ratio {
    Ratio { num: 9, den: 6 }
}

/// The four closed-form parameter counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClosedForm {
    /// Classic bottleneck at e=4: `17 * n_md^2`.
    BottleneckEq4,
    /// Three standard 3x3 convs at width `4*n_md`: `432 * n_md^2`.
    StdBlockEq5,
    /// One narrow bottleneck layer: `9*e*n_md + 2*e*n_md^2 + 9*n_md`.
    NarrowLayerEq6,
    /// A block of `d` narrow layers: `d * (2*e*n_md^2 + (9*e+9)*n_md)`.
    NarrowBlockEq7,
}

pub fn params_closed(form: ClosedForm, q: &CostQuery) -> Result<u64> {
    let n = q.n_md as u128;
    let e = q.e as u128;
    let v: u128 = match form {
        ClosedForm::BottleneckEq4 => 17 * mul(n, n)?,
        ClosedForm::StdBlockEq5 => 432 * mul(n, n)?,
        ClosedForm::NarrowLayerEq6 => narrow_layer_params(e, n)?,
        ClosedForm::NarrowBlockEq7 => mul(q.d as u128, narrow_layer_params(e, n)?)?,
    };
    u64::try_from(v).map_err(|_| Error::Numeric(format!("parameter count {v} exceeds u64")))
}

fn narrow_layer_params(e: u128, n: u128) -> Result<u128> {
    // 9*e*n + e*n^2 + 9*n + e*n^2 = 2*e*n^2 + (9*e + 9)*n
    Ok(2 * mul(e, mul(n, n)?)? + (9 * e + 9) * n)
}

/// Multi-adds of a block of `d` narrow layers operating at `H x W`:
/// `d * (2*e*n_md^2 + (9*e+9)*n_md) * H * W`.
pub fn multiadds_narrow_block(q: &CostQuery) -> Result<u128> {
    let per_layer = narrow_layer_params(q.e as u128, q.n_md as u128)?;
    mul(
        mul(q.d as u128, per_layer)?,
        mul(q.h as u128, q.w as u128)?,
    )
}

/// One row of the exact graph walk.
#[derive(Clone, Debug, serde::Serialize)]
pub struct LayerRow {
    pub name: String,
    pub kind: String,
    pub class: Option<ParamClass>,
    pub params: u64,
    pub bn_params: u64,
    pub multi_adds: u128,
    pub out_shape: [usize; 4],
}

/// Per-block reconciliation of the walked counts against the closed forms.
/// Both deltas are required to be zero for graphs built by the builder.
#[derive(Clone, Debug, serde::Serialize)]
pub struct BlockCost {
    pub name: String,
    pub d: usize,
    pub n_md: usize,
    pub e: usize,
    pub h: usize,
    pub w: usize,
    pub params: u64,
    pub params_closed: u64,
    pub params_delta: i128,
    pub multi_adds: u128,
    pub multi_adds_closed: u128,
    pub multi_adds_delta: i128,
}

/// Full cost report: per-layer rows, per-block closed-form cross-checks and
/// bucketed totals. `backbone_conv_params` (stem + residual blocks +
/// projection entries, conv weights only) is the published counting
/// convention; batch-norm affine and head parameters are reported separately.
#[derive(Clone, Debug, serde::Serialize)]
pub struct CostReport {
    pub probe_shape: [usize; 4],
    pub nominal_depth: Option<usize>,
    pub rows: Vec<LayerRow>,
    pub blocks: Vec<BlockCost>,
    pub stem_params: u64,
    pub block_params: u64,
    pub projection_params: u64,
    pub head_params: u64,
    pub bn_params: u64,
    pub backbone_conv_params: u64,
    pub total_conv_params: u64,
    pub total_multi_adds: u128,
}

fn walk_rows<T: Elem>(units: &[Unit<T>], in_shape: [usize; 4], rows: &mut Vec<LayerRow>) -> Result<[usize; 4]> {
    let mut shape = in_shape;
    for unit in units {
        match unit {
            Unit::Conv(layer) => {
                let out = unit.out_shape(shape)?;
                let params = layer.weight.len() as u64;
                let multi_adds = mul(params as u128, (out[2] * out[3]) as u128)?;
                rows.push(LayerRow {
                    name: layer.name.clone(),
                    kind: "conv".into(),
                    class: Some(layer.class),
                    params,
                    bn_params: layer.bn.as_ref().map_or(0, |bn| 2 * bn.channels() as u64),
                    multi_adds,
                    out_shape: out,
                });
                shape = out;
            }
            Unit::MaxPool { name, .. } => {
                let out = unit.out_shape(shape)?;
                rows.push(LayerRow {
                    name: name.clone(),
                    kind: "maxpool".into(),
                    class: None,
                    params: 0,
                    bn_params: 0,
                    multi_adds: 0,
                    out_shape: out,
                });
                shape = out;
            }
            Unit::Residual { body, shortcut, .. } => {
                let body_out = walk_rows(body, shape, rows)?;
                if let Some(s) = shortcut {
                    let short_out = walk_rows(std::slice::from_ref(&**s), shape, rows)?;
                    if short_out != body_out {
                        return Err(Error::Shape(format!(
                            "residual branches disagree: {body_out:?} vs {short_out:?}"
                        )));
                    }
                }
                shape = body_out;
            }
            Unit::Upsample { name, .. } => {
                let out = unit.out_shape(shape)?;
                rows.push(LayerRow {
                    name: name.clone(),
                    kind: "upsample".into(),
                    class: None,
                    params: 0,
                    bn_params: 0,
                    multi_adds: 0,
                    out_shape: out,
                });
                shape = out;
            }
        }
    }
    Ok(shape)
}

/// Walks the graph at a probe input shape, counting exact per-layer
/// parameters and Multi-adds, and cross-checks every residual block against
/// its closed form.
pub fn count_exact<T: Elem>(graph: &LayerGraph<T>, probe_shape: [usize; 4]) -> Result<CostReport> {
    let mut rows = Vec::new();
    walk_rows(graph.units(), probe_shape, &mut rows)?;

    let mut stem = 0u64;
    let mut block = 0u64;
    let mut proj = 0u64;
    let mut head = 0u64;
    let mut bn = 0u64;
    let mut multi = 0u128;
    for row in &rows {
        match row.class {
            Some(ParamClass::Stem) => stem += row.params,
            Some(ParamClass::Block) => block += row.params,
            Some(ParamClass::Projection) => proj += row.params,
            Some(ParamClass::Head) => head += row.params,
            None => {}
        }
        bn += row.bn_params;
        multi += row.multi_adds;
    }

    let blocks = match graph.network_spec.as_ref() {
        Some(spec) => reconcile_blocks(spec, &rows)?,
        None => Vec::new(),
    };

    Ok(CostReport {
        probe_shape,
        nominal_depth: graph.nominal_depth,
        rows,
        blocks,
        stem_params: stem,
        block_params: block,
        projection_params: proj,
        head_params: head,
        bn_params: bn,
        backbone_conv_params: stem + block + proj,
        total_conv_params: stem + block + proj + head,
        total_multi_adds: multi,
    })
}

fn reconcile_blocks(spec: &NetworkSpec, rows: &[LayerRow]) -> Result<Vec<BlockCost>> {
    let mut blocks = Vec::with_capacity(3);
    for (i, (&n_md, &d)) in spec
        .channel_combination
        .iter()
        .zip(&spec.depth_combination)
        .enumerate()
    {
        let name = format!("block{}", i + 1);
        let prefix = format!("{name}.layer");
        let mut params = 0u64;
        let mut multi = 0u128;
        let mut dims = None;
        for row in rows.iter().filter(|r| r.name.starts_with(&prefix)) {
            params += row.params;
            multi += row.multi_adds;
            dims.get_or_insert((row.out_shape[2], row.out_shape[3]));
        }
        let (h, w) = dims.ok_or_else(|| {
            Error::Shape(format!("no layer rows found for {name}; graph and spec disagree"))
        })?;
        let q = CostQuery {
            e: spec.expansion,
            n_md,
            d,
            h,
            w,
            ..CostQuery::default()
        };
        let params_closed = params_closed(ClosedForm::NarrowBlockEq7, &q)?;
        let multi_closed = multiadds_narrow_block(&q)?;
        blocks.push(BlockCost {
            name,
            d,
            n_md,
            e: spec.expansion,
            h,
            w,
            params,
            params_closed,
            params_delta: params as i128 - params_closed as i128,
            multi_adds: multi,
            multi_adds_closed: multi_closed,
            multi_adds_delta: multi as i128 - multi_closed as i128,
        });
    }
    Ok(blocks)
}

impl CostReport {
    /// Aligned-column plain-text rendering.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<24} {:>10} {:>9} {:>16}  {}",
            "layer", "params", "bn", "multi-adds", "output"
        );
        for row in &self.rows {
            let _ = writeln!(
                s,
                "{:<24} {:>10} {:>9} {:>16}  {}x{}x{}x{}",
                row.name,
                row.params,
                row.bn_params,
                row.multi_adds,
                row.out_shape[0],
                row.out_shape[1],
                row.out_shape[2],
                row.out_shape[3]
            );
        }
        if !self.blocks.is_empty() {
            let _ = writeln!(s);
            let _ = writeln!(
                s,
                "{:<10} {:>10} {:>12} {:>6} {:>18} {:>18} {:>6}",
                "block", "params", "closed-form", "delta", "multi-adds", "closed-form", "delta"
            );
            for b in &self.blocks {
                let _ = writeln!(
                    s,
                    "{:<10} {:>10} {:>12} {:>6} {:>18} {:>18} {:>6}",
                    b.name,
                    b.params,
                    b.params_closed,
                    b.params_delta,
                    b.multi_adds,
                    b.multi_adds_closed,
                    b.multi_adds_delta
                );
            }
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "stem conv params:        {:>12}", self.stem_params);
        let _ = writeln!(s, "residual block params:   {:>12}", self.block_params);
        let _ = writeln!(s, "projection params:       {:>12}", self.projection_params);
        let _ = writeln!(s, "backbone conv params:    {:>12}", self.backbone_conv_params);
        let _ = writeln!(s, "head conv params:        {:>12}", self.head_params);
        let _ = writeln!(s, "batch norm params:       {:>12}", self.bn_params);
        let _ = writeln!(s, "total multi-adds:        {:>12}", self.total_multi_adds);
        if let Some(depth) = self.nominal_depth {
            let _ = writeln!(s, "nominal depth:           {depth:>12}");
        }
        s
    }

    /// Per-layer rows as CSV.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,kind,class,params,bn_params,multi_adds,out_n,out_c,out_h,out_w\n");
        for row in &self.rows {
            let class = row
                .class
                .map(|c| format!("{c:?}").to_lowercase())
                .unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                row.name,
                row.kind,
                class,
                row.params,
                row.bn_params,
                row.multi_adds,
                row.out_shape[0],
                row.out_shape[1],
                row.out_shape[2],
                row.out_shape[3]
            );
        }
        s
    }
}

/// Design rule report: the depth rule is decidable from the graph alone,
/// the throughput rule only when a measured FPS is supplied.
#[derive(Clone, Debug, serde::Serialize)]
pub struct DesignRuleReport {
    pub nominal_depth: Option<usize>,
    /// `depth >= 25`, or `None` when the graph has no declared depth.
    pub depth_rule_pass: Option<bool>,
    pub measured_fps: Option<f64>,
    /// `fps >= 50`, or `None` when no measurement was supplied.
    pub fps_rule_pass: Option<bool>,
}

pub const MIN_NOMINAL_DEPTH: usize = 25;
pub const MIN_FPS: f64 = 50.0;

pub fn design_rule_check<T: Elem>(graph: &LayerGraph<T>, measured_fps: Option<f64>) -> DesignRuleReport {
    DesignRuleReport {
        nominal_depth: graph.nominal_depth,
        depth_rule_pass: graph.nominal_depth.map(|d| d >= MIN_NOMINAL_DEPTH),
        measured_fps,
        fps_rule_pass: measured_fps.map(|fps| fps >= MIN_FPS),
    }
}

impl DesignRuleReport {
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        match (self.nominal_depth, self.depth_rule_pass) {
            (Some(d), Some(pass)) => {
                let _ = writeln!(
                    s,
                    "rule 1: nominal depth {d} >= {MIN_NOMINAL_DEPTH}: {}",
                    if pass { "pass" } else { "fail" }
                );
            }
            _ => {
                let _ = writeln!(s, "rule 1: not evaluated (graph declares no nominal depth)");
            }
        }
        match (self.measured_fps, self.fps_rule_pass) {
            (Some(fps), Some(pass)) => {
                let _ = writeln!(
                    s,
                    "rule 2: {fps:.2} FPS >= {MIN_FPS}: {}",
                    if pass { "pass" } else { "fail" }
                );
            }
            _ => {
                let _ = writeln!(s, "rule 2: not evaluated (hardware-dependent)");
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builder::{build_fcn32, build_ndnet, NetworkSpec};

    #[test]
    fn standard_multiadds_examples() {
        let q = CostQuery { k: 3, h: 64, w: 64, m: 32, n: 64, ..Default::default() };
        assert_eq!(multiadds_standard(&q).unwrap(), 75_497_472);
        let unit = CostQuery { k: 1, h: 1, w: 1, m: 1, n: 1, ..Default::default() };
        assert_eq!(multiadds_standard(&unit).unwrap(), 1);
        let big = CostQuery { k: 3, h: 1024, w: 2048, m: 256, n: 256, ..Default::default() };
        assert_eq!(multiadds_standard(&big).unwrap(), 1_236_950_581_248);
    }

    #[test]
    fn separable_multiadds_examples() {
        let q = CostQuery { k: 3, h: 64, w: 64, m: 32, n: 64, ..Default::default() };
        assert_eq!(multiadds_separable(&q).unwrap(), 1_179_648 + 8_388_608);
        // M = N = 1 reduces to H*W*(k^2 + 1)
        let q = CostQuery { k: 3, h: 5, w: 7, m: 1, n: 1, ..Default::default() };
        assert_eq!(multiadds_separable(&q).unwrap(), (5 * 7 * 10) as u128);
    }

    #[test]
    fn separable_ratio_examples() {
        let r = separable_ratio(3, 512).unwrap();
        assert_eq!((r.num, r.den), (4608, 521));
        assert!((r.as_f64() - 8.8445).abs() < 1e-4);
        let r = separable_ratio(3, 9).unwrap();
        assert_eq!((r.num, r.den), (81, 18));
        assert_eq!(r.as_f64(), 4.5);
        // ratio < k^2 for all finite N, approaching k^2
        for n in [1usize, 16, 256, 4096, 1 << 20] {
            let r = separable_ratio(3, n).unwrap();
            assert!(r.as_f64() < 9.0);
        }
        assert!(separable_ratio(3, 1 << 20).unwrap().as_f64() > 8.99);
    }

    #[test]
    fn asymmetric_ratio_is_nine_sixths() {
        let r = asymmetric_ratio();
        assert_eq!(r.as_f64(), 1.5);
        // equal-channel (3,1)+(1,3) cost is 6*H*W*M*N: two k=sqrt(3) terms
        let q31 = CostQuery { k: 1, h: 8, w: 8, m: 4, n: 4, ..Default::default() };
        let three_by_one = 3 * multiadds_standard(&q31).unwrap();
        assert_eq!(2 * three_by_one, 6 * 8 * 8 * 4 * 4);
    }

    #[test]
    fn closed_form_examples() {
        let q = CostQuery { n_md: 64, ..Default::default() };
        assert_eq!(params_closed(ClosedForm::BottleneckEq4, &q).unwrap(), 69_632);
        assert_eq!(params_closed(ClosedForm::StdBlockEq5, &q).unwrap(), 1_769_472);

        let q = CostQuery { e: 4, n_md: 24, d: 1, ..Default::default() };
        assert_eq!(params_closed(ClosedForm::NarrowLayerEq6, &q).unwrap(), 5_688);
        assert_eq!(
            params_closed(ClosedForm::NarrowBlockEq7, &q).unwrap(),
            params_closed(ClosedForm::NarrowLayerEq6, &q).unwrap()
        );

        let q = CostQuery { e: 4, n_md: 48, d: 8, ..Default::default() };
        assert_eq!(params_closed(ClosedForm::NarrowBlockEq7, &q).unwrap(), 164_736);
    }

    #[test]
    fn narrow_block_multiadds_examples() {
        let q = CostQuery { e: 4, n_md: 24, d: 3, h: 128, w: 256, ..Default::default() };
        assert_eq!(multiadds_narrow_block(&q).unwrap(), 559_153_152);
        // halving width while doubling depth strictly reduces the count
        let wide = CostQuery { e: 4, n_md: 48, d: 3, h: 16, w: 16, ..Default::default() };
        let narrow = CostQuery { e: 4, n_md: 24, d: 6, h: 16, w: 16, ..Default::default() };
        assert!(multiadds_narrow_block(&narrow).unwrap() < multiadds_narrow_block(&wide).unwrap());
        // H = W = 1 reduces to the parameter count
        let q = CostQuery { e: 2, n_md: 10, d: 5, h: 1, w: 1, ..Default::default() };
        assert_eq!(
            multiadds_narrow_block(&q).unwrap(),
            params_closed(ClosedForm::NarrowBlockEq7, &q).unwrap() as u128
        );
    }

    #[test]
    fn ndnet29_blocks_match_eq7_with_zero_delta() {
        let spec = NetworkSpec::preset("ndnet29").unwrap();
        let g = build_ndnet::<f32>(&spec).unwrap();
        let report = count_exact(&g, [1, 3, 1024, 2048]).unwrap();
        assert_eq!(report.block_params, 415_944);
        for b in &report.blocks {
            assert_eq!(b.params_delta, 0, "{}", b.name);
            assert_eq!(b.multi_adds_delta, 0, "{}", b.name);
        }
    }

    #[test]
    fn ndnet45_bucket_totals() {
        let spec = NetworkSpec::preset("ndnet45").unwrap();
        let g = build_ndnet::<f32>(&spec).unwrap();
        let report = count_exact(&g, [1, 3, 1024, 2048]).unwrap();
        assert_eq!(report.stem_params, 864);
        assert_eq!(report.block_params, 340_544);
        assert_eq!(report.projection_params, 43_008);
        assert_eq!(report.backbone_conv_params, 384_416);
    }

    #[test]
    fn wider_ndnet29_total() {
        let spec = NetworkSpec::preset("ndnet29-wide").unwrap();
        let g = build_ndnet::<f32>(&spec).unwrap();
        let report = count_exact(&g, [1, 3, 1024, 2048]).unwrap();
        assert_eq!(report.backbone_conv_params, 3_473_440);
    }

    #[test]
    fn totals_equal_row_sums() {
        let spec = NetworkSpec::preset("ndnet61").unwrap();
        let g = build_fcn32::<f32>(&spec).unwrap();
        let report = count_exact(&g, [1, 3, 256, 512]).unwrap();
        let row_params: u64 = report.rows.iter().map(|r| r.params).sum();
        let row_multi: u128 = report.rows.iter().map(|r| r.multi_adds).sum();
        assert_eq!(row_params, report.total_conv_params);
        assert_eq!(row_multi, report.total_multi_adds);
    }

    #[test]
    fn report_serializes_to_json_with_wide_counts() {
        let spec = NetworkSpec::preset("ndnet29").unwrap();
        let g = build_fcn32::<f32>(&spec).unwrap();
        let report = count_exact(&g, [1, 3, 1024, 2048]).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["backbone_conv_params"], 512_040);
        assert!(v["total_multi_adds"].as_u64().unwrap() > 1_000_000_000);
        assert!(!report.render_text().is_empty());
        assert!(report.to_csv().lines().count() > 10);
    }

    #[test]
    fn design_rules_report_depth_and_optional_fps() {
        let spec = NetworkSpec::preset("ndnet45").unwrap();
        let g = build_ndnet::<f32>(&spec).unwrap();
        let r = design_rule_check(&g, None);
        assert_eq!(r.depth_rule_pass, Some(true));
        assert_eq!(r.fps_rule_pass, None);
        assert!(r.render_text().contains("not evaluated (hardware-dependent)"));

        let toy = NetworkSpec::new([4, 8, 16], [1, 1, 1], 4, 8, 2);
        let g = build_ndnet::<f32>(&toy).unwrap();
        let r = design_rule_check(&g, Some(54.34));
        assert_eq!(r.nominal_depth, Some(7));
        assert_eq!(r.depth_rule_pass, Some(false));
        assert_eq!(r.fps_rule_pass, Some(true));
    }
}
