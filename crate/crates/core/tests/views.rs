use clove::augment::{
    make_multicrop, render_view, sample_view, AugmentProfile, CanonicalPoint, MultiCrop, ViewGeometry,
};
use clove::rng::stream;
use diffcore::Tensor;
use proptest::prelude::*;

fn textured(h: usize, w: usize, salt: usize) -> Tensor {
    Tensor::from_fn(&[3, h, w], |i| ((i * 7919 + salt) % 251) as f32 / 250.0)
}

fn geometry() -> impl Strategy<Value = ViewGeometry> {
    (0.0f64..0.9, 0.0f64..0.9, 0.05f64..1.0, 0.05f64..1.0, any::<bool>(), 1usize..40, 1usize..40).prop_map(
        |(l, t, fw, fh, flip, oh, ow)| {
            let w = fw * (1.0 - l);
            let h = fh * (1.0 - t);
            ViewGeometry::new(l, t, w, h, flip, oh, ow).unwrap()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn canonical_map_round_trips(g in geometry(), u in 0.0f64..1.0, v in 0.0f64..1.0) {
        let (px, py) = (u * g.out_w as f64, v * g.out_h as f64);
        let p = g.view_to_canonical(px, py);
        prop_assert!(p.in_frame());
        let (qx, qy) = g.canonical_to_view(p);
        prop_assert!((qx - px).abs() < 1e-9 && (qy - py).abs() < 1e-9);
    }

    #[test]
    fn flip_mirrors_columns(g in geometry(), u in 0.0f64..1.0, v in 0.0f64..1.0) {
        let (px, py) = (u * g.out_w as f64, v * g.out_h as f64);
        let a = g.view_to_canonical(px, py);
        let b = g.flipped().view_to_canonical(g.out_w as f64 - px, py);
        prop_assert!(a.distance(&b) < 1e-12);
        prop_assert_eq!(g.flipped().flipped(), g);
    }

    #[test]
    fn view_corners_span_the_crop(g in geometry()) {
        let tl = g.view_to_canonical(0.0, 0.0);
        let br = g.view_to_canonical(g.out_w as f64, g.out_h as f64);
        let (x0, x1) = (tl.x.min(br.x), tl.x.max(br.x));
        prop_assert!((x0 - g.left).abs() < 1e-12 && (x1 - g.left - g.width).abs() < 1e-12);
        prop_assert!((tl.y - g.top).abs() < 1e-12 && (br.y - g.top - g.height).abs() < 1e-12);
    }

    #[test]
    fn sampled_views_respect_the_profile(seed in 0u64..10_000, local in any::<bool>()) {
        let img = textured(24, 32, seed as usize);
        let p = if local { AugmentProfile::local(8) } else { AugmentProfile::global(16) };
        let v = sample_view(&img, &mut stream(seed, &[]), &p).unwrap();
        let g = v.geometry;
        prop_assert!(g.validate().is_ok());
        prop_assert_eq!(v.image.shape(), &[3, p.out_h, p.out_w][..]);
        let full = g.width == 1.0 && g.height == 1.0 && g.left == 0.0 && g.top == 0.0;
        if !full {
            let area = g.width * g.height;
            prop_assert!(area >= p.crop_scale.0 - 1e-9 && area <= p.crop_scale.1 + 1e-9, "area {}", area);
            // aspect in pixels of the original
            let aspect = (g.width * 32.0) / (g.height * 24.0);
            prop_assert!(aspect >= p.aspect.0 - 1e-9 && aspect <= p.aspect.1 + 1e-9);
        }
        prop_assert!(v.image.data().iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn photometric_draws_do_not_move_geometry(seed in 0u64..10_000) {
        let img = textured(16, 16, 3);
        let mut plain = AugmentProfile::global(16);
        plain.jitter_prob = 0.0;
        plain.grayscale_prob = 0.0;
        let a = sample_view(&img, &mut stream(seed, &[]), &AugmentProfile::global(16)).unwrap();
        let b = sample_view(&img, &mut stream(seed, &[]), &plain).unwrap();
        prop_assert_eq!(a.geometry, b.geometry);
    }
}

/// Integer-aligned crop rendered at its own size reproduces the source
/// pixels exactly, reversed column order when flipped.
#[test]
fn aligned_crop_is_exact_subimage() {
    let (h, w) = (12, 10);
    let img = textured(h, w, 1);
    for (l, t, cw, ch) in [(0, 0, 10, 12), (2, 3, 5, 4), (9, 11, 1, 1), (1, 0, 8, 12)] {
        for flip in [false, true] {
            let g = ViewGeometry::new(
                l as f64 / w as f64,
                t as f64 / h as f64,
                cw as f64 / w as f64,
                ch as f64 / h as f64,
                flip,
                ch,
                cw,
            )
            .unwrap();
            let v = render_view(&img, &g).unwrap();
            for c in 0..3 {
                for y in 0..ch {
                    for x in 0..cw {
                        let sx = if flip { l + cw - 1 - x } else { l + x };
                        let want = img.at(&[c, t + y, sx]);
                        assert!((v.at(&[c, y, x]) - want).abs() < 1e-6, "crop {l},{t} flip {flip}");
                    }
                }
            }
        }
    }
}

#[test]
fn multicrop_orders_globals_before_locals() {
    let img = textured(32, 32, 2);
    let views = make_multicrop(&img, &mut stream(3, &[]), 2, 4, &MultiCrop::new(32)).unwrap();
    assert_eq!(views.len(), 6);
    assert!(views[..2].iter().all(|v| v.image.shape() == [3, 32, 32]));
    assert!(views[2..].iter().all(|v| v.image.shape() == [3, 16, 16]));
    assert!(views[2..].iter().all(|v| v.geometry.width * v.geometry.height <= 0.4 + 1e-9));
}

#[test]
fn same_stream_same_views() {
    let img = textured(20, 20, 4);
    let p = AugmentProfile::global(16);
    let a = sample_view(&img, &mut stream(11, &[1, 2]), &p).unwrap();
    let b = sample_view(&img, &mut stream(11, &[1, 2]), &p).unwrap();
    assert_eq!(a.image, b.image);
    assert_eq!(a.geometry, b.geometry);
    let c = sample_view(&img, &mut stream(11, &[1, 3]), &p).unwrap();
    assert_ne!(a.geometry, c.geometry);
}

#[test]
fn canonical_points_outside_frame_are_flagged() {
    assert!(!CanonicalPoint::new(-0.01, 0.5).in_frame());
    assert!(!CanonicalPoint::new(0.5, 1.01).in_frame());
    assert!(CanonicalPoint::new(1.0, 0.0).in_frame());
}
