use std::collections::BTreeSet;
use std::path::PathBuf;

use dronedet::dilation::hdc_check;
use dronedet::graph::{forward, receptive_field, receptive_field_on, ArchGraph, Retain, Weights};
use dronedet::pyramid::{
    attach_fms, attach_fmre, build_backbone, build_detector, fmre_up_step, level_table, BackboneConfig, FmreSpec,
    FmsSpec, LEVELS,
};
use dronedet::{ConvGeometry, Grid, Shape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ANCHORS: [usize; 8] = [3, 5, 5, 5, 5, 5, 3, 3];

fn random_image(seed: u64) -> Grid<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Grid::from_fn(Shape::new(3, 512, 512), |_, _, _| rng.gen_range(-1.0..1.0)).unwrap()
}

#[test]
fn detector_forward_at_reduced_width() {
    let g = build_detector(&BackboneConfig::reduced(16), &ANCHORS, 2).unwrap();
    let w = Weights::<f32>::seeded(&g, 11);
    let image = random_image(3);
    let acts = forward(&g, &w, &[image.clone()], Retain::Tagged).unwrap();

    assert_eq!(acts.executed_shapes(), g.infer_shapes().unwrap().as_slice());
    let named = acts.named(&g);
    let expected = [128, 64, 32, 16, 8, 4, 2, 1];
    for l in 1..=LEVELS {
        for prefix in ["of", "enh", "norm"] {
            let m = &named[&format!("{prefix}_{l}")];
            assert_eq!((m.height(), m.width()), (expected[l - 1], expected[l - 1]), "{prefix}_{l}");
        }
        assert_eq!(named[&format!("cls_{l}")].channels(), ANCHORS[l - 1] * 2);
        assert_eq!(named[&format!("loc_{l}")].channels(), ANCHORS[l - 1] * 4);
    }
    assert!(named["norm_1"].values().iter().all(|v| v.is_finite()));

    let again = forward(&g, &w, &[image], Retain::Tagged).unwrap();
    for (tag, id) in g.tags() {
        assert_eq!(acts.get(*id), again.get(*id), "{tag}");
    }
}

#[test]
fn doubling_head_weights_doubles_outputs() {
    let g = build_detector(&BackboneConfig::reduced(32), &ANCHORS, 2).unwrap();
    let mut w = Weights::<f64>::seeded(&g, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let image = Grid::from_fn(Shape::new(3, 512, 512), |_, _, _| rng.gen_range(-1.0..1.0)).unwrap();
    let before = forward(&g, &w, &[image.clone()], Retain::Tagged).unwrap();
    for l in [1, 8] {
        w.scale_node(g.require(&format!("cls_{l}")).unwrap(), 2.0).unwrap();
    }
    let after = forward(&g, &w, &[image], Retain::Tagged).unwrap();
    for l in [1, 8] {
        let id = g.require(&format!("cls_{l}")).unwrap();
        let (a, b) = (before.get(id).unwrap(), after.get(id).unwrap());
        for (x, y) in a.values().iter().zip(b.values()) {
            // scaling by two is exact in binary floating point
            assert_eq!(2.0 * x, *y);
        }
    }
    let loc = g.require("loc_1").unwrap();
    assert_eq!(before.get(loc), after.get(loc));
}

#[test]
fn additions_preserve_shapes_and_rates_pass_hdc() {
    let base = build_backbone(&BackboneConfig::reduced(16)).unwrap();
    let levels = level_table(&base).unwrap();
    let spec = FmsSpec::for_graph(&base).unwrap();
    let g = attach_fms(base.clone(), &spec).unwrap();
    let fms = g.require("fms").unwrap();
    assert_eq!(g.shape(fms), g.shape(g.require("of_1").unwrap()));
    let pre = g.node(fms).inputs[0];
    assert_eq!(g.shape(pre).channels % 4, 0);
    assert_eq!(level_table(&g).unwrap(), levels);

    let g = attach_fmre(g, &FmreSpec::default()).unwrap();
    for l in 1..=LEVELS {
        let of = g.shape(g.require(&format!("of_{l}")).unwrap());
        assert_eq!(g.shape(g.require(&format!("btu_{l}")).unwrap()), of);
        assert_eq!(g.shape(g.require(&format!("enh_{l}")).unwrap()), of);
        assert_eq!(g.shape(g.require(&format!("norm_{l}")).unwrap()), of);
        if l < LEVELS {
            let upper = g.shape(g.require(&format!("enh_{}", l + 1)).unwrap());
            let cat = g.shape(g.require(&format!("up_cat_{l}")).unwrap());
            assert_eq!(cat.channels, 4 * upper.channels);
            assert_eq!((cat.height, cat.width), (upper.height, upper.width));
        }
    }
    assert!(g.dilation_groups().len() >= 4);
    for (name, rates) in g.dilation_groups() {
        assert!(hdc_check(rates, 3).unwrap().pass, "{name}: {rates:?}");
    }
}

#[test]
fn fms_rejects_bad_specs() {
    let base = build_backbone(&BackboneConfig::reduced(32)).unwrap();
    let good = FmsSpec::for_graph(&base).unwrap();
    let mut swapped = good.clone();
    std::mem::swap(&mut swapped.bb1, &mut swapped.bb2);
    assert!(attach_fms(base.clone(), &swapped).is_err());
    let mut gridded = good.clone();
    gridded.serial_rates = vec![2, 2];
    assert!(attach_fms(base.clone(), &gridded).is_err());
    let mut factor = good.clone();
    factor.shuffle_factor = 4;
    assert!(attach_fms(base.clone(), &factor).is_err());
    let mut shallow = good;
    shallow.bb1 = base.require("e1").unwrap();
    assert!(attach_fms(base, &shallow).is_err());
}

/// Mini graph whose taps are inputs, so they can be probed directly.
fn fms_fixture() -> (ArchGraph, dronedet::graph::NodeId) {
    let mut g = ArchGraph::new();
    let x = g.input("x", Shape::new(2, 12, 12)).unwrap();
    let bb1 = g.input("bb1", Shape::new(3, 6, 6)).unwrap();
    let bb2 = g.input("bb2", Shape::new(2, 6, 6)).unwrap();
    let of1 = g.conv("of1", x, 2, ConvGeometry::new(3, 1, 1, 1)).unwrap();
    g.set_tag("of_1", of1);
    let spec = FmsSpec {
        bb1,
        bb2,
        serial_rates: vec![1, 2],
        bridge_rate: 2,
        shuffle_factor: 2,
    };
    let g = attach_fms(g, &spec).unwrap();
    (g, bb2)
}

#[test]
fn bb2_impulses_land_inside_computed_field() {
    let (g, bb2) = fms_fixture();
    let of1 = g.require("of_1").unwrap();
    let w = Weights::<f64>::probe(&g);
    let shapes: Vec<Shape> = g.inputs().iter().map(|&i| g.shape(i)).collect();
    for pos in [(0, 0), (5, 7), (11, 11)] {
        let field: BTreeSet<_> = receptive_field_on(&g, of1, pos, bb2).unwrap().into_iter().collect();
        assert!(!field.is_empty());
        let mut reached = BTreeSet::new();
        for y in 0..6 {
            for x in 0..6 {
                let mut inputs: Vec<Grid<f64>> = shapes.iter().map(|&s| Grid::zeros(s).unwrap()).collect();
                for c in 0..2 {
                    inputs[2].set(c, y, x, 1.0);
                }
                let out = forward(&g, &w, &inputs, Retain::Tagged).unwrap();
                let m = out.get(of1).unwrap();
                if (0..m.channels()).any(|c| m.get(c, pos.0, pos.1) != 0.0) {
                    reached.insert((y, x));
                }
            }
        }
        assert_eq!(reached, field, "{pos:?}");
    }
}

#[test]
fn fms_strictly_grows_of1_field() {
    let base = build_backbone(&BackboneConfig::reduced(32)).unwrap();
    let before = receptive_field(&base, base.require("of_1").unwrap(), (0, 0)).unwrap();
    let spec = FmsSpec::for_graph(&base).unwrap();
    let g = attach_fms(base, &spec).unwrap();
    let after = receptive_field(&g, g.require("of_1").unwrap(), (0, 0)).unwrap();
    let before: BTreeSet<_> = before.into_iter().collect();
    let after: BTreeSet<_> = after.into_iter().collect();
    assert!(before.is_subset(&after));
    assert!(after.len() > before.len(), "{} vs {}", after.len(), before.len());
}

#[test]
fn zero_upper_leaves_lower_unchanged() {
    let mut g = ArchGraph::new();
    let upper = g.input("upper", Shape::new(4, 3, 3)).unwrap();
    let lower = g.input("lower", Shape::new(4, 6, 6)).unwrap();
    let out = fmre_up_step(&mut g, "step", upper, lower, &[1, 2, 3]).unwrap();
    g.set_tag("out", out);
    let w = Weights::<f64>::zeros(&g);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let low = Grid::from_fn(Shape::new(4, 6, 6), |_, _, _| rng.gen_range(-5.0..5.0)).unwrap();
    let acts = forward(&g, &w, &[Grid::zeros(Shape::new(4, 3, 3)).unwrap(), low.clone()], Retain::Tagged).unwrap();
    assert_eq!(acts.get(out).unwrap(), &low);
    // zero weights alone do not cancel a nonzero upper map
    let up = Grid::filled(Shape::new(4, 3, 3), 1.0).unwrap();
    let acts = forward(&g, &w, &[up, low.clone()], Retain::Tagged).unwrap();
    assert_ne!(acts.get(out).unwrap(), &low);
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/detector_w32.arch")
}

#[test]
fn serialized_detector_matches_golden() {
    let g = build_detector(&BackboneConfig::reduced(32), &ANCHORS, 2).unwrap();
    let text = g.to_text();
    let path = golden_path();
    if std::env::var_os("DRONEDET_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, &text).unwrap();
    }
    let golden = std::fs::read_to_string(&path).expect("golden file missing; rerun with DRONEDET_BLESS=1");
    assert_eq!(text, golden);
    assert_eq!(ArchGraph::from_text(&golden).unwrap(), g);
}
