//! Randomized property checks over the numeric core.

use proptest::prelude::*;

use pdeo::core::{activate_opacity, logit};
use pdeo::field::{g2p_blend, total_impact_partial};
use pdeo::splat::alpha_blend;
use pdeo::{Vec3, F};

proptest! {
    /// Opacity logit/sigmoid roundtrip away from saturation.
    #[test]
    fn opacity_activation_roundtrip(o in -15.0_f64..15.0) {
        let p = activate_opacity(o).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!((logit(p) - o).abs() < 1e-8);
    }

    /// The particle blend is a convex combination of the raw update and the
    /// voxel velocity, so each component stays inside their span.
    #[test]
    fn g2p_blend_is_convex(
        u in prop::array::uniform3(-1.0_f64..1.0),
        v in prop::array::uniform3(-1.0_f64..1.0),
        lambda in 0.0_f64..=1.0,
    ) {
        let u = Vec3::new(u[0], u[1], u[2]);
        let v = Vec3::new(v[0], v[1], v[2]);
        let out = g2p_blend(&u, &v, lambda);
        for c in 0..3 {
            let lo = u[c].min(v[c]) - 1e-12;
            let hi = u[c].max(v[c]) + 1e-12;
            prop_assert!((lo..=hi).contains(&out[c]));
        }
    }

    /// A single injection's accumulated impact grows monotonically with the
    /// horizon and never exceeds the injected update.
    #[test]
    fn impact_partial_monotone_and_bounded(
        dv in prop::array::uniform3(-2.0_f64..2.0),
        lambda in 0.01_f64..0.99,
    ) {
        let mut prev = [0.0_f64; 3];
        for steps in 1..=100_u64 {
            let cur = total_impact_partial(dv, lambda, steps);
            for c in 0..3 {
                prop_assert!(cur[c].abs() <= dv[c].abs() + 1e-12);
                prop_assert!(cur[c].abs() + 1e-12 >= prev[c].abs());
            }
            prev = cur;
        }
    }

    /// Front-to-back compositing of colors in [0,1] over a background in
    /// [0,1] stays in [0,1], and transmittance stays in [0,1].
    #[test]
    fn alpha_blend_stays_in_gamut(
        entries in prop::collection::vec(
            (0.0_f64..=1.0, prop::array::uniform3(0.0_f64..=1.0)),
            0..12,
        ),
        bg in prop::array::uniform3(0.0_f64..=1.0),
    ) {
        let entries: Vec<(F, Vec3)> = entries
            .into_iter()
            .map(|(a, c)| (a, Vec3::new(c[0], c[1], c[2])))
            .collect();
        let (color, transmittance) = alpha_blend(&entries, Vec3::new(bg[0], bg[1], bg[2]));
        prop_assert!((0.0..=1.0).contains(&transmittance));
        for c in 0..3 {
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&color[c]));
        }
    }
}
