//! Finite-difference verification across the full geometry matrix: strides,
//! paddings, kernel sizes, batch sizes, and both generator modes. Each check
//! validates every gradient path of the layer against central differences of
//! independently written forwards (see the `verify` module docs for the
//! frozen-routing / relaxed split).

use drconv::conv::{ConvSpec, Padding};
use drconv::layer::DrConvLayer;
use drconv::tensor::{Shape4, Tensor4};
use drconv::verify::{check_layer_gradients, CheckConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Case {
    name: &'static str,
    spec: ConvSpec,
    regions: usize,
    n: usize,
    h: usize,
    w: usize,
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "k1 stride1 valid",
            spec: ConvSpec::new(2, 3, 1, 1, Padding::Valid),
            regions: 3,
            n: 1,
            h: 5,
            w: 4,
        },
        Case {
            name: "k3 stride1 same-zero",
            spec: ConvSpec::new(2, 2, 3, 1, Padding::SameZero),
            regions: 4,
            n: 2,
            h: 5,
            w: 5,
        },
        Case {
            name: "k3 stride2 same-zero",
            spec: ConvSpec::new(3, 2, 3, 2, Padding::SameZero),
            regions: 2,
            n: 1,
            h: 6,
            w: 7,
        },
        Case {
            name: "k3 stride1 circular",
            spec: ConvSpec::new(2, 3, 3, 1, Padding::Circular),
            regions: 3,
            n: 1,
            h: 6,
            w: 6,
        },
        Case {
            name: "k3 stride2 valid",
            spec: ConvSpec::new(2, 2, 3, 2, Padding::Valid),
            regions: 2,
            n: 2,
            h: 7,
            w: 6,
        },
        Case {
            name: "k5 stride1 circular",
            spec: ConvSpec::new(1, 2, 5, 1, Padding::Circular),
            regions: 2,
            n: 1,
            h: 6,
            w: 6,
        },
        Case {
            name: "k1 stride2 same-zero",
            spec: ConvSpec::new(3, 3, 1, 2, Padding::SameZero),
            regions: 4,
            n: 1,
            h: 6,
            w: 5,
        },
    ]
}

fn rand_input(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor4 {
    Tensor4::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0)).unwrap()
}

#[test]
fn dynamic_layers_pass_across_the_geometry_matrix() {
    let cfg = CheckConfig::default();
    for (i, case) in cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + i as u64);
        let layer = DrConvLayer::init(case.spec, case.regions, None, &mut rng)
            .unwrap_or_else(|e| panic!("{}: init failed: {e}", case.name));
        let x = rand_input(Shape4::new(case.n, case.h, case.w, case.spec.in_channels), &mut rng);
        let report = check_layer_gradients(&layer, &x, &cfg, 9000 + i as u64)
            .unwrap_or_else(|e| panic!("{}: check failed to run: {e}", case.name));
        assert!(report.pass(), "{}:\n{report}", case.name);
        assert_eq!(report.groups.len(), 9, "{}: dynamic mode has nine paths", case.name);
        for g in &report.groups {
            assert!(g.count > 0, "{}: group {} probed nothing", case.name, g.group);
        }
    }
}

#[test]
fn fixed_layers_pass_across_the_geometry_matrix() {
    let cfg = CheckConfig::default();
    for (i, case) in cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(950 + i as u64);
        let layer = DrConvLayer::init_fixed(case.spec, case.regions, &mut rng)
            .unwrap_or_else(|e| panic!("{}: init failed: {e}", case.name));
        let x = rand_input(Shape4::new(case.n, case.h, case.w, case.spec.in_channels), &mut rng);
        let report = check_layer_gradients(&layer, &x, &cfg, 9500 + i as u64)
            .unwrap_or_else(|e| panic!("{}: check failed to run: {e}", case.name));
        assert!(report.pass(), "{}:\n{report}", case.name);
        assert_eq!(report.groups.len(), 5, "{}: fixed mode has five paths", case.name);
    }
}

#[test]
fn wide_hidden_layers_also_pass() {
    // The default hidden width ties groups to the input channel count; a
    // wider generator exercises the grouped stage with group width > in_c.
    let cfg = CheckConfig::default();
    let spec = ConvSpec::new(2, 2, 3, 1, Padding::SameZero);
    let mut rng = ChaCha8Rng::seed_from_u64(977);
    let layer = DrConvLayer::init(spec, 2, Some(12), &mut rng).unwrap();
    let x = rand_input(Shape4::new(1, 5, 5, 2), &mut rng);
    let report = check_layer_gradients(&layer, &x, &cfg, 9770).unwrap();
    assert!(report.pass(), "{report}");
}
