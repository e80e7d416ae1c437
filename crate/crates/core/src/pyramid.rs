//! Detector graph builders: truncated D-LinkNet backbone on a ResNet-50
//! encoder, the feature-map supplement branch (FMS), the bidirectional
//! recombination paths (FMRE) and the prediction heads.
//!
//! Node tags written here:
//! `e1..e4`, `d2..d4`, `center`, `of_1..of_8`, `bb_1`, `bb_2`, `fms`,
//! `of_1.base`, `btu_k`, `enh_k`, `up_cat_k`, `norm_k`, `cls_k`, `loc_k`.

use crate::dilation::{hdc_check, DEFAULT_RATES};
use crate::error::{Error, Result};
use crate::graph::{ArchGraph, NodeId};
use crate::tensor::{ConvGeometry, Shape};

/// Number of pyramid levels.
pub const LEVELS: usize = 8;
/// The only supported input side.
pub const INPUT_SIZE: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub input: Shape,
    /// Divides every ResNet-50 width; 1 keeps the published widths.
    pub width_divisor: usize,
    /// Bottleneck blocks per encoder stage.
    pub blocks: [usize; 4],
    /// Rates of the relocated center block.
    pub center_rates: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input: Shape::new(3, INPUT_SIZE, INPUT_SIZE),
            width_divisor: 1,
            blocks: [3, 4, 6, 3],
            center_rates: DEFAULT_RATES.to_vec(),
        }
    }
}

impl BackboneConfig {
    /// Same topology with every width divided by `divisor`.
    pub fn reduced(divisor: usize) -> Self {
        Self {
            width_divisor: divisor,
            ..Self::default()
        }
    }

    fn width(&self, full: usize) -> usize {
        (full / self.width_divisor).max(1)
    }
}

const K1: ConvGeometry = ConvGeometry::new(1, 1, 1, 0);
const K3: ConvGeometry = ConvGeometry::new(3, 1, 1, 1);

fn dilated(rate: usize) -> ConvGeometry {
    ConvGeometry::new(3, 1, rate, rate)
}

fn conv_bn(g: &mut ArchGraph, name: &str, x: NodeId, out: usize, geo: ConvGeometry, relu: bool) -> Result<NodeId> {
    let c = g.conv(&format!("{name}.conv"), x, out, geo)?;
    let b = g.batch_norm(&format!("{name}.bn"), c)?;
    if relu {
        g.relu(&format!("{name}.relu"), b)
    } else {
        Ok(b)
    }
}

fn bottleneck(g: &mut ArchGraph, name: &str, x: NodeId, mid: usize, out: usize, stride: usize) -> Result<NodeId> {
    let cin = g.shape(x).channels;
    let a = conv_bn(g, &format!("{name}.a"), x, mid, K1, true)?;
    let b = conv_bn(g, &format!("{name}.b"), a, mid, ConvGeometry::new(3, stride, 1, 1), true)?;
    let c = conv_bn(g, &format!("{name}.c"), b, out, K1, false)?;
    let shortcut = if stride != 1 || cin != out {
        conv_bn(g, &format!("{name}.down"), x, out, ConvGeometry::new(1, stride, 1, 0), false)?
    } else {
        x
    };
    let s = g.add(&format!("{name}.add"), c, shortcut)?;
    g.relu(&format!("{name}.out"), s)
}

/// D-LinkNet decoder block: 1x1 reduce, stride-2 transposed conv, 1x1 expand.
fn decoder(g: &mut ArchGraph, name: &str, x: NodeId, out: usize) -> Result<NodeId> {
    let mid = (g.shape(x).channels / 4).max(1);
    let a = conv_bn(g, &format!("{name}.reduce"), x, mid, K1, true)?;
    let u = g.deconv(&format!("{name}.up"), a, mid, ConvGeometry::new(3, 2, 1, 1))?;
    let u = g.batch_norm(&format!("{name}.up.bn"), u)?;
    let u = g.relu(&format!("{name}.up.relu"), u)?;
    conv_bn(g, &format!("{name}.expand"), u, out, K1, true)
}

/// Dilated center block: serial convs at `rates`, summed with the input.
fn center_block(g: &mut ArchGraph, x: NodeId, rates: &[usize]) -> Result<NodeId> {
    let c = g.shape(x).channels;
    let mut cur = x;
    let mut sum = x;
    for (i, &r) in rates.iter().enumerate() {
        let d = g.conv(&format!("center.d{}", i + 1), cur, c, dilated(r))?;
        cur = g.relu(&format!("center.d{}.relu", i + 1), d)?;
        sum = g.add(&format!("center.sum{}", i + 1), sum, cur)?;
    }
    Ok(sum)
}

/// Backbone plus the extra layers producing `of_1..of_8`.
///
/// The last decoder stage and the bottom skip are removed, and the dilated
/// center block sits on the top skip (encoder stage 1 to decoder 2), so the
/// first map is the decoder-2 output at 128x128.
pub fn build_backbone(config: &BackboneConfig) -> Result<ArchGraph> {
    let s = config.input;
    if s.channels != 3 || s.height != INPUT_SIZE || s.width != INPUT_SIZE {
        return Err(Error::invalid(
            "build_backbone",
            format!("input must be 3x{INPUT_SIZE}x{INPUT_SIZE}, got {s}"),
        ));
    }
    if config.width_divisor == 0 || 64 % config.width_divisor != 0 {
        return Err(Error::invalid("build_backbone", "width_divisor must divide 64"));
    }
    let verdict = hdc_check(&config.center_rates, 3)?;
    if !verdict.pass {
        return Err(Error::invalid(
            "build_backbone",
            format!("center rates {:?} violate the HDC constraint", config.center_rates),
        ));
    }

    let mut g = ArchGraph::new();
    let image = g.input("image", s)?;
    let stem = conv_bn(&mut g, "stem", image, config.width(64), ConvGeometry::new(7, 2, 1, 3), true)?;
    let mut x = g.max_pool("stem.pool", stem, ConvGeometry::new(3, 2, 1, 1))?;

    let mids = [64, 128, 256, 512];
    let mut encoders = Vec::with_capacity(4);
    for (stage, (&mid, &n)) in mids.iter().zip(&config.blocks).enumerate() {
        for b in 0..n {
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            x = bottleneck(
                &mut g,
                &format!("layer{}.{b}", stage + 1),
                x,
                config.width(mid),
                config.width(mid * 4),
                stride,
            )?;
        }
        encoders.push(x);
        g.set_tag(format!("e{}", stage + 1), x);
    }
    let [e1, e2, _e3, e4] = [encoders[0], encoders[1], encoders[2], encoders[3]];

    let d4 = decoder(&mut g, "dec4", e4, config.width(1024))?;
    let dec3 = decoder(&mut g, "dec3", d4, config.width(512))?;
    let d3 = g.add("dec3.skip", dec3, e2)?;
    let center = center_block(&mut g, e1, &config.center_rates)?;
    let dec2 = decoder(&mut g, "dec2", d3, config.width(256))?;
    let d2 = g.add("dec2.skip", dec2, center)?;
    g.register_dilations("center", config.center_rates.clone());
    for (tag, id) in [("d4", d4), ("d3", d3), ("d2", d2), ("center", center), ("bb_1", e2), ("bb_2", d3)] {
        g.set_tag(tag, id);
    }

    let c = g.shape(d2).channels;
    let mut fm = d2;
    g.set_tag("of_1", fm);
    for level in 2..=LEVELS {
        let name = format!("extra{level}");
        let a = g.conv(&format!("{name}.reduce"), fm, (c / 2).max(1), K1)?;
        let a = g.relu(&format!("{name}.reduce.relu"), a)?;
        let b = g.conv(&format!("{name}.down"), a, c, ConvGeometry::new(3, 2, 1, 1))?;
        fm = g.relu(&format!("{name}.down.relu"), b)?;
        g.set_tag(format!("of_{level}"), fm);
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FmsSpec {
    pub bb1: NodeId,
    pub bb2: NodeId,
    pub serial_rates: Vec<usize>,
    /// Rate of the dilated conv applied to the partner tap before concat.
    pub bridge_rate: usize,
    pub shuffle_factor: usize,
}

impl FmsSpec {
    /// Taps tagged `bb_1`/`bb_2` with two serial convs at rates `[1, 2]`.
    pub fn for_graph(graph: &ArchGraph) -> Result<Self> {
        Ok(Self {
            bb1: graph.require("bb_1")?,
            bb2: graph.require("bb_2")?,
            serial_rates: vec![1, 2],
            bridge_rate: 2,
            shuffle_factor: 2,
        })
    }
}

/// Adds the supplement map onto `of_1`; the sum is re-tagged `of_1`.
///
/// Each of the two Submap chains concatenates one tap with a dilated conv of
/// the other, then runs the serial dilated convs at twice `of_1`'s width.
/// Their concat is pixel-shuffled up to `of_1`'s size.
pub fn attach_fms(mut graph: ArchGraph, spec: &FmsSpec) -> Result<ArchGraph> {
    let of1 = graph.require("of_1")?;
    let target = graph.shape(of1);
    let (s1, s2) = (graph.shape(spec.bb1), graph.shape(spec.bb2));
    if spec.bb2 <= spec.bb1 {
        return Err(Error::invalid("attach_fms", "bb_2 must be deeper than bb_1"));
    }
    if (s1.height, s1.width) != (s2.height, s2.width) {
        return Err(Error::invalid("attach_fms", format!("tap sizes differ: {s1} vs {s2}")));
    }
    let f = spec.shuffle_factor;
    if f == 0 || s1.height * f != target.height || s1.width * f != target.width {
        return Err(Error::invalid(
            "attach_fms",
            format!("taps at {s1} cannot be shuffled by {f} onto {target}"),
        ));
    }
    if spec.serial_rates.is_empty() || !hdc_check(&spec.serial_rates, 3)?.pass {
        return Err(Error::invalid(
            "attach_fms",
            format!("serial rates {:?} violate the HDC constraint", spec.serial_rates),
        ));
    }
    let f2 = f * f;
    if f2 % 2 != 0 {
        return Err(Error::invalid(
            "pixel_shuffle",
            format!("two Submaps cannot split {f2}x channels evenly"),
        ));
    }
    let chain_channels = target.channels * f2 / 2;

    let mut submaps = Vec::with_capacity(2);
    for (l, (own, partner)) in [(spec.bb1, spec.bb2), (spec.bb2, spec.bb1)].into_iter().enumerate() {
        let name = format!("fms.sub{}", l + 1);
        let own_c = graph.shape(own).channels;
        let bridge = graph.conv(&format!("{name}.bridge"), partner, own_c, dilated(spec.bridge_rate))?;
        let bridge = graph.relu(&format!("{name}.bridge.relu"), bridge)?;
        let mut x = graph.concat(&format!("{name}.cat"), &[own, bridge])?;
        for (i, &r) in spec.serial_rates.iter().enumerate() {
            let c = graph.conv(&format!("{name}.d{}", i + 1), x, chain_channels, dilated(r))?;
            x = graph.relu(&format!("{name}.d{}.relu", i + 1), c)?;
        }
        submaps.push(x);
        graph.register_dilations(format!("fms.sub{}", l + 1), spec.serial_rates.clone());
    }
    let cat = graph.concat("fms.cat", &submaps)?;
    let sup = graph.shuffle("fms.shuffle", cat, f)?;
    let sum = graph.add("fms.add", of1, sup)?;
    graph.set_tag("fms", sup);
    graph.set_tag("of_1.base", of1);
    graph.set_tag("of_1", sum);
    Ok(graph)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FmreSpec {
    /// Rates of the three parallel convs synthesizing the auxiliary maps.
    pub up_to_bottom_rates: [usize; 3],
    pub down_conv: ConvGeometry,
    pub head_kernel: usize,
}

impl Default for FmreSpec {
    fn default() -> Self {
        Self {
            up_to_bottom_rates: DEFAULT_RATES,
            down_conv: ConvGeometry::new(3, 2, 2, 2),
            head_kernel: 3,
        }
    }
}

/// One up-to-bottom step: `lower + shuffle2(concat(upper, dconv_r(upper)...))`.
///
/// Exposed so the step can be exercised on its own.
pub fn fmre_up_step(
    graph: &mut ArchGraph,
    name: &str,
    upper: NodeId,
    lower: NodeId,
    rates: &[usize; 3],
) -> Result<NodeId> {
    let c = graph.shape(upper).channels;
    let mut maps = vec![upper];
    for &r in rates {
        maps.push(graph.conv(&format!("{name}.d{r}"), upper, c, dilated(r))?);
    }
    let cat = graph.concat(&format!("{name}.cat"), &maps)?;
    let up = graph.shuffle(&format!("{name}.shuffle"), cat, 2)?;
    let sum = graph.add(&format!("{name}.add"), lower, up)?;
    Ok(sum)
}

/// Bottom-to-up then up-to-bottom enhancement, then the 3x3 conv + mish head.
pub fn attach_fmre(mut graph: ArchGraph, spec: &FmreSpec) -> Result<ArchGraph> {
    if !hdc_check(&spec.up_to_bottom_rates, 3)?.pass {
        return Err(Error::invalid(
            "attach_fmre",
            format!("rates {:?} violate the HDC constraint", spec.up_to_bottom_rates),
        ));
    }
    if spec.head_kernel % 2 == 0 {
        return Err(Error::invalid("attach_fmre", "head kernel must be odd"));
    }
    let fm: Vec<NodeId> = (1..=LEVELS)
        .map(|l| graph.require(&format!("of_{l}")))
        .collect::<Result<_>>()?;

    // Each level adds a strided dilated conv of the original map below it.
    let mut btu = vec![fm[0]];
    for l in 1..LEVELS {
        let c = graph.shape(fm[l]).channels;
        let down = graph.conv(&format!("fmre.btu{}.down", l + 1), fm[l - 1], c, spec.down_conv)?;
        btu.push(graph.add(&format!("fmre.btu{}.add", l + 1), fm[l], down)?);
    }
    for (l, id) in btu.iter().enumerate() {
        graph.set_tag(format!("btu_{}", l + 1), *id);
    }

    // Cascaded from the smallest map down to of_1.
    let mut enh = vec![NodeId(0); LEVELS];
    enh[LEVELS - 1] = btu[LEVELS - 1];
    for l in (0..LEVELS - 1).rev() {
        let name = format!("fmre.td{}", l + 1);
        enh[l] = fmre_up_step(&mut graph, &name, enh[l + 1], btu[l], &spec.up_to_bottom_rates)?;
        let cat = graph.node(enh[l]).inputs[1];
        let cat = graph.node(cat).inputs[0];
        graph.set_tag(format!("up_cat_{}", l + 1), cat);
    }
    graph.register_dilations("fmre.up", spec.up_to_bottom_rates.to_vec());

    let k = spec.head_kernel;
    let head = ConvGeometry::new(k, 1, 1, k / 2);
    for (l, &e) in enh.iter().enumerate() {
        graph.set_tag(format!("enh_{}", l + 1), e);
        let c = graph.shape(e).channels;
        let conv = graph.conv(&format!("norm{}.conv", l + 1), e, c, head)?;
        let m = graph.mish(&format!("norm{}.mish", l + 1), conv)?;
        graph.set_tag(format!("norm_{}", l + 1), m);
    }
    Ok(graph)
}

/// Per-level 3x3 class and box-offset convs on the normalized maps.
pub fn attach_heads(mut graph: ArchGraph, anchors_per_cell: &[usize], num_classes: usize) -> Result<ArchGraph> {
    if anchors_per_cell.len() != LEVELS {
        return Err(Error::ShapeMismatch {
            op: "attach_heads",
            dim: "levels",
            expected: LEVELS,
            found: anchors_per_cell.len(),
        });
    }
    if num_classes == 0 || anchors_per_cell.contains(&0) {
        return Err(Error::invalid("attach_heads", "class and anchor counts must be positive"));
    }
    for (l, &a) in anchors_per_cell.iter().enumerate() {
        let x = graph.require(&format!("norm_{}", l + 1))?;
        let cls = graph.conv(&format!("cls{}", l + 1), x, a * num_classes, K3)?;
        let loc = graph.conv(&format!("loc{}", l + 1), x, a * 4, K3)?;
        graph.set_tag(format!("cls_{}", l + 1), cls);
        graph.set_tag(format!("loc_{}", l + 1), loc);
    }
    Ok(graph)
}

/// Full detector: backbone, FMS, FMRE and heads.
pub fn build_detector(config: &BackboneConfig, anchors_per_cell: &[usize], num_classes: usize) -> Result<ArchGraph> {
    let g = build_backbone(config)?;
    let fms = FmsSpec::for_graph(&g)?;
    let g = attach_fms(g, &fms)?;
    let g = attach_fmre(g, &FmreSpec::default())?;
    attach_heads(g, anchors_per_cell, num_classes)
}

/// One row of the pyramid table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelInfo {
    pub level: usize,
    pub stride: usize,
    pub size: usize,
    pub channels: usize,
}

/// Stride, size and width of `of_1..of_8` as inferred by the graph.
pub fn level_table(graph: &ArchGraph) -> Result<Vec<LevelInfo>> {
    let input = graph
        .inputs()
        .first()
        .map(|&i| graph.shape(i))
        .ok_or_else(|| Error::invalid("level_table", "graph has no input"))?;
    (1..=LEVELS)
        .map(|l| {
            let s = graph.shape(graph.require(&format!("of_{l}"))?);
            Ok(LevelInfo {
                level: l,
                stride: input.height / s.height,
                size: s.height,
                channels: s.channels,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_other_input_sizes() {
        let mut cfg = BackboneConfig::reduced(16);
        cfg.input = Shape::new(3, 300, 300);
        assert!(build_backbone(&cfg).is_err());
        let mut cfg = BackboneConfig::reduced(16);
        cfg.center_rates = vec![2, 4];
        assert!(build_backbone(&cfg).is_err());
    }

    #[test]
    fn table_follows_halving_chain() {
        let g = build_backbone(&BackboneConfig::reduced(16)).unwrap();
        let t = level_table(&g).unwrap();
        let sizes: Vec<_> = t.iter().map(|r| r.size).collect();
        let strides: Vec<_> = t.iter().map(|r| r.stride).collect();
        assert_eq!(sizes, [128, 64, 32, 16, 8, 4, 2, 1]);
        assert_eq!(strides, [4, 8, 16, 32, 64, 128, 256, 512]);
    }

    #[test]
    fn full_width_channels() {
        let g = build_backbone(&BackboneConfig::default()).unwrap();
        assert_eq!(g.shape(g.require("e4").unwrap()).channels, 2048);
        assert_eq!(g.shape(g.require("of_1").unwrap()), Shape::new(256, 128, 128));
        assert_eq!(g.shape(g.require("bb_1").unwrap()), Shape::new(512, 64, 64));
    }
}
