use proptest::prelude::{prop, prop_assert, proptest, ProptestConfig};
use tide_core::numeric::{dot, RowMatrix};
use tide_core::rope::{
    axis_tables, base_frequencies, interpolate, interpolate_at, rotate, Axis, FixedScale,
    InterpolationMode, RopeSpec,
};

fn spec(mode: InterpolationMode, s: f64) -> RopeSpec<f64> {
    RopeSpec::even(16).with_mode(mode, s)
}

fn inner(spec: &RopeSpec<f64>, q: &[f64], k: &[f64], m: (usize, usize), n: (usize, usize)) -> f64 {
    let tables = axis_tables(spec).unwrap();
    let q = RowMatrix::new(1, 16, q.to_vec()).unwrap();
    let k = RowMatrix::new(1, 16, k.to_vec()).unwrap();
    let rq = rotate(&q, &[m], &tables, None).unwrap();
    let rk = rotate(&k, &[n], &tables, None).unwrap();
    dot(rq.row(0), rk.row(0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inner_product_depends_on_offset_only(
        q in prop::collection::vec(-1f64..1.0, 16),
        k in prop::collection::vec(-1f64..1.0, 16),
        m in (0usize..64, 0usize..64),
        n in (0usize..64, 0usize..64),
        shift in (0usize..64, 0usize..64),
    ) {
        for mode in [InterpolationMode::Direct, InterpolationMode::NtkByParts] {
            let sp = spec(mode, 3.0);
            let a = inner(&sp, &q, &k, m, n);
            let b = inner(&sp, &q, &k, (m.0 + shift.0, m.1 + shift.1), (n.0 + shift.0, n.1 + shift.1));
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn pi_undoes_position_scaling(
        q in prop::collection::vec(-1f64..1.0, 16),
        k in prop::collection::vec(-1f64..1.0, 16),
        m in (0usize..16, 0usize..16),
        n in (0usize..16, 0usize..16),
        s in 2usize..5,
    ) {
        let direct = inner(&spec(InterpolationMode::Direct, 1.0), &q, &k, m, n);
        let pi = spec(InterpolationMode::PositionInterpolation, s as f64);
        let scaled = inner(&pi, &q, &k, (m.0 * s, m.1 * s), (n.0 * s, n.1 * s));
        prop_assert!((direct - scaled).abs() < 1e-9);
    }

    #[test]
    fn rotation_preserves_norm(q in prop::collection::vec(-1f64..1.0, 16), p in (0usize..500, 0usize..500)) {
        let tables = axis_tables(&spec(InterpolationMode::NtkAware, 4.0)).unwrap();
        let m = RowMatrix::new(1, 16, q.clone()).unwrap();
        let r = rotate(&m, &[p], &tables, None).unwrap();
        prop_assert!((dot(&q, &q) - dot(r.row(0), r.row(0))).abs() < 1e-9);
    }
}

#[test]
fn by_parts_limits() {
    let s = 4.0;
    let base = base_frequencies(&RopeSpec::<f64>::even(16), Axis::Width).unwrap();
    let all = RopeSpec {
        ramp_low: 1e9,
        ramp_high: 2e9,
        ..spec(InterpolationMode::NtkByParts, s)
    };
    let pi = interpolate(&spec(InterpolationMode::PositionInterpolation, s), &base).unwrap();
    let bp = interpolate(&all, &base).unwrap();
    for (a, b) in bp.effective_rates().iter().zip(pi.effective_rates()) {
        assert!((a - b).abs() < 1e-15);
    }
    let none = RopeSpec {
        ramp_low: -2e9,
        ramp_high: -1e9,
        ..spec(InterpolationMode::NtkByParts, s)
    };
    assert_eq!(
        interpolate(&none, &base).unwrap().effective_rates(),
        base.effective_rates()
    );
}

#[test]
fn rates_never_increase_under_interpolation() {
    let base = base_frequencies(&RopeSpec::<f64>::even(16), Axis::Height).unwrap();
    for mode in [
        InterpolationMode::PositionInterpolation,
        InterpolationMode::NtkAware,
        InterpolationMode::NtkByParts,
    ] {
        let t = interpolate(&spec(mode, 4.0), &base).unwrap();
        for (a, b) in t.effective_rates().iter().zip(base.effective_rates()) {
            assert!(*a <= b + 1e-15, "{mode:?}");
        }
        assert_eq!(t.norm_freq, base.norm_freq);
    }
}

#[test]
fn time_hook_reaches_the_interpolation() {
    let sp = spec(InterpolationMode::PositionInterpolation, 4.0);
    let base = base_frequencies(&sp, Axis::Height).unwrap();
    let fixed = interpolate_at(&sp, &base, 0.3, &FixedScale).unwrap();
    assert_eq!(fixed, interpolate(&sp, &base).unwrap());
    let ramp = |s: f64, t: f64| 1.0 + (s - 1.0) * t;
    assert_eq!(interpolate_at(&sp, &base, 0.0, &ramp).unwrap(), base);
    assert_eq!(
        interpolate_at(&sp, &base, 0.5, &ramp).unwrap().pos_scale,
        2.5
    );
    assert!(interpolate_at(&sp, &base, 1.5, &FixedScale).is_err());
}
