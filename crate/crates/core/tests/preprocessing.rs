use proptest::prelude::*;
use roadsurf::enhance::{enhance_frame, transfer_channel, HsvImage, ReferenceClass, ReferenceStats};
use roadsurf::image::Raster;
use roadsurf::occlusion::build_occluder_mask;

proptest! {
    #[test]
    fn dilation_grows_with_radius(labels in prop::collection::vec(0u16..3, 12 * 9), r in 0usize..4) {
        let l = Raster::from_vec(12, 9, labels).unwrap();
        let small = build_occluder_mask(&l, &[2], r);
        let big = build_occluder_mask(&l, &[2], r + 1);
        for (i, (&s, &b)) in small.data.iter().zip(&big.data).enumerate() {
            prop_assert!(!s || b);
            if l.data[i] == 2 {
                prop_assert!(s);
            }
        }
    }

    #[test]
    fn transfer_is_affine_between_stats(
        x in prop::collection::vec(0.3f64..0.7, 2..20),
        mv in 0.4f64..0.6, sv in 0.05f64..0.2, mr in 0.4f64..0.6, sr in 0.05f64..0.2,
    ) {
        let y = transfer_channel(&x, (mv, sv), (mr, sr));
        // Unclamped outputs follow y = mr + (x - mv) sr / sv.
        for (a, b) in x.iter().zip(&y) {
            let want = mr + (a - mv) * sr / sv;
            if (0.0..=1.0).contains(&want) {
                prop_assert!((b - want).abs() < 1e-12);
            } else {
                prop_assert!(*b == 0.0 || *b == 1.0);
            }
        }
    }

    #[test]
    fn enhancement_keeps_hue_and_other_classes(
        px in prop::collection::vec((0.05f64..0.95, 0.05f64..0.95, 0.05f64..0.95, 0u16..3), 24),
        vm in 0.3f64..0.7,
    ) {
        let rgb = Raster::from_vec(6, 4, px.iter().map(|p| [p.0, p.1, p.2]).collect()).unwrap();
        let labels = Raster::from_vec(6, 4, px.iter().map(|p| p.3).collect()).unwrap();
        let mut reference = ReferenceStats::default();
        reference.classes.insert(0, ReferenceClass { pixel_count: 10, value_mean: vm, value_std: 0.1, sat_mean: 0.4, sat_std: 0.1 });
        let out = enhance_frame(&rgb, &labels, &reference, &[0]);
        let (h0, h1) = (HsvImage::from_rgb(&rgb), HsvImage::from_rgb(&out));
        for p in 0..24 {
            if labels.data[p] != 0 {
                prop_assert_eq!(out.data[p], rgb.data[p]);
            } else if h1.saturation[p] > 1e-6 && h0.saturation[p] > 1e-6 && h1.value[p] > 1e-6 {
                let d = (h0.hue[p] - h1.hue[p]).abs();
                prop_assert!(d.min(360.0 - d) < 1e-6);
            }
        }
    }
}
