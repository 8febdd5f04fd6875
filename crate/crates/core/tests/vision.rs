use proptest::prelude::*;
use zoomiqa::vision::{
    crop, denormalize, hflip, normalize, resize, resize_short_side, scale_by_factor, transpose_image, ImageF32,
    Normalization,
};
use zoomiqa::Error;

fn image_strategy(max_side: usize) -> impl Strategy<Value = ImageF32> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| {
        prop::collection::vec(0.0f32..=1.0, 3 * h * w).prop_map(move |data| ImageF32::new(h, w, data).unwrap())
    })
}

/// Half-pixel bilinear sample evaluated straight from the formula in f64.
fn oracle_resize(img: &ImageF32, out_h: usize, out_w: usize) -> Vec<f64> {
    let src = |len: usize, out: usize, d: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) * len as f64 / out as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(len - 1), s - i0 as f64)
    };
    let mut out = Vec::new();
    for c in 0..3 {
        for y in 0..out_h {
            let (y0, y1, ty) = src(img.height(), out_h, y);
            for x in 0..out_w {
                let (x0, x1, tx) = src(img.width(), out_w, x);
                let p = |yy, xx| img.get(c, yy, xx) as f64;
                let top = p(y0, x0) * (1.0 - tx) + p(y0, x1) * tx;
                let bot = p(y1, x0) * (1.0 - tx) + p(y1, x1) * tx;
                out.push(top * (1.0 - ty) + bot * ty);
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn resize_matches_formula(img in image_strategy(12), oh in 1usize..30, ow in 1usize..30) {
        let got = resize(&img, oh, ow).unwrap();
        let want = oracle_resize(&img, oh, ow);
        for (a, b) in got.data().iter().zip(&want) {
            prop_assert!((*a as f64 - b).abs() < 1e-5);
        }
    }

    #[test]
    fn resampling_stays_within_input_range(img in image_strategy(16), oh in 1usize..40, ow in 1usize..40) {
        let out = resize(&img, oh, ow).unwrap();
        for c in 0..3 {
            let lo = img.plane(c).iter().copied().fold(f32::INFINITY, f32::min);
            let hi = img.plane(c).iter().copied().fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(out.plane(c).iter().all(|&v| v >= lo && v <= hi));
        }
    }

    #[test]
    fn transpose_and_hflip_are_involutions(img in image_strategy(16)) {
        prop_assert_eq!(&transpose_image(&transpose_image(&img)), &img);
        prop_assert_eq!(&hflip(&hflip(&img)), &img);
    }

    #[test]
    fn transpose_and_hflip_preserve_pixel_multiset(img in image_strategy(12)) {
        let sorted = |i: &ImageF32| {
            let mut v: Vec<u32> = i.data().iter().map(|f| f.to_bits()).collect();
            v.sort_unstable();
            v
        };
        prop_assert_eq!(sorted(&transpose_image(&img)), sorted(&img));
        prop_assert_eq!(sorted(&hflip(&img)), sorted(&img));
    }

    #[test]
    fn crop_matches_index_copy(img in image_strategy(16), fx in 0.0f64..1.0, fy in 0.0f64..1.0, fw in 0.0f64..1.0, fh in 0.0f64..1.0) {
        let x = (fx * img.width() as f64) as usize % img.width();
        let y = (fy * img.height() as f64) as usize % img.height();
        let w = 1 + (fw * (img.width() - x - 1) as f64) as usize;
        let h = 1 + (fh * (img.height() - y - 1) as f64) as usize;
        let out = crop(&img, x, y, w, h).unwrap();
        for c in 0..3 {
            for r in 0..h {
                for q in 0..w {
                    prop_assert_eq!(out.get(c, r, q), img.get(c, y + r, x + q));
                }
            }
        }
    }

    #[test]
    fn same_size_resize_is_identity(img in image_strategy(16)) {
        prop_assert_eq!(&resize_short_side(&img, img.short_side()).unwrap(), &img);
        prop_assert_eq!(&scale_by_factor(&img, 1.0).unwrap(), &img);
    }

    #[test]
    fn normalize_round_trip(img in image_strategy(10)) {
        let norm = Normalization { mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225] };
        let back = denormalize(&normalize(&img, &norm).unwrap(), &norm).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            prop_assert!((a - b).abs() <= 1e-7 * 4.0);
        }
    }
}

#[test]
fn default_normalization_round_trip_within_1e7() {
    let img = ImageF32::from_fn(9, 7, |c, y, x| ((c * 31 + y * 7 + x * 3) % 256) as f32 / 255.0).unwrap();
    let norm = Normalization::default();
    let t = normalize(&img, &norm).unwrap();
    assert_eq!(t.shape(), &[3, 9, 7]);
    let back = denormalize(&t, &norm).unwrap();
    for (a, b) in back.data().iter().zip(img.data()) {
        assert!((a - b).abs() <= 1e-7);
    }
}

/// Round trip to a new short side and back, then a same-size resize of the
/// result is a fixed point.
#[test]
fn round_trip_then_same_size_is_fixed_point() {
    let img = ImageF32::from_fn(24, 36, |c, y, x| ((x * 5 + y * 3 + c) % 17) as f32 / 16.0).unwrap();
    let once = resize_short_side(&resize_short_side(&img, 40).unwrap(), 24).unwrap();
    assert_eq!((once.height(), once.width()), (24, 36));
    let again = resize_short_side(&once, 24).unwrap();
    assert_eq!(again, once);
}

#[test]
fn aspect_preserving_dims() {
    let img = ImageF32::filled(384, 512, 0.5).unwrap();
    let up = resize_short_side(&img, 768).unwrap();
    assert_eq!((up.width(), up.height()), (1024, 768));
    let half = scale_by_factor(&img, 0.5).unwrap();
    assert_eq!((half.width(), half.height()), (256, 192));
    let double = scale_by_factor(&img, 2.0).unwrap();
    assert_eq!((double.width(), double.height()), (1024, 768));
    let tall = ImageF32::filled(300, 100, 0.5).unwrap();
    let r = resize_short_side(&tall, 50).unwrap();
    assert_eq!((r.width(), r.height()), (50, 150));
}

#[test]
fn contract_errors() {
    let img = ImageF32::filled(4, 4, 0.0).unwrap();
    assert!(matches!(crop(&img, 2, 2, 3, 1), Err(Error::Contract(_))));
    assert!(matches!(scale_by_factor(&img, 0.1), Err(Error::Contract(_))));
    assert!(matches!(scale_by_factor(&img, -1.0), Err(Error::Contract(_))));
}
