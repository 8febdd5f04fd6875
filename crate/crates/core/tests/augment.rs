mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use zoomiqa::augment::{
    apply_zoom, apply_zoom_eval, extract_tta_patches, plan_tta_patches, uniform_grid_offsets, TtaConfig, ZoomMode,
    ZoomRegistry, ZoomSpec,
};
use zoomiqa::vision::{crop, resize_short_side, transpose_image, ImageF32};
use zoomiqa::Error;

use common::TTA_FIXTURE_SIZES;

fn pattern(h: usize, w: usize) -> ImageF32 {
    ImageF32::from_fn(h, w, |c, y, x| ((x * 13 + y * 7 + c * 29) % 101) as f32 / 100.0).unwrap()
}

#[test]
fn tta_count_on_every_fixture() {
    let on = TtaConfig::default();
    let off = TtaConfig { transpose: false, ..Default::default() };
    for (h, w) in TTA_FIXTURE_SIZES {
        let img = pattern(h, w);
        let plan = plan_tta_patches(&img, &on).unwrap();
        assert_eq!(plan.len(), 108, "{w}x{h}");
        assert_eq!(plan_tta_patches(&img, &off).unwrap().len(), 54, "{w}x{h}");
        for &i in &plan.order {
            let p = &plan.unique[i];
            assert_eq!((p.image.height(), p.image.width()), (p.size, p.size));
        }
    }
}

#[test]
fn tta_count_formula() {
    let img = pattern(50, 70);
    let one_scale = TtaConfig { scales: vec![1.0], ..Default::default() };
    assert_eq!(extract_tta_patches(&img, &one_scale).unwrap().len(), 36);
    let with_flip = TtaConfig { hflip: true, ..Default::default() };
    assert_eq!(with_flip.patch_count(), 162);
    assert_eq!(plan_tta_patches(&img, &with_flip).unwrap().len(), 162);
    let wide = TtaConfig { grid_rows: 2, grid_cols: 4, patch_sizes: vec![32], scales: vec![1.0, 0.75], ..Default::default() };
    assert_eq!(plan_tta_patches(&img, &wide).unwrap().len(), 2 * 4 * 2 * 2);
}

/// Scales outer, sizes, grid row-major, original then transposed per cell.
#[test]
fn tta_order_is_deterministic_and_documented() {
    let img = pattern(300, 400);
    let cfg = TtaConfig { scales: vec![1.0], patch_sizes: vec![224], ..Default::default() };
    let patches = extract_tta_patches(&img, &cfg).unwrap();
    assert_eq!(patches.len(), 18);
    let offsets = uniform_grid_offsets(400, 300, 224, 3, 3).unwrap();
    for (cell, &(x, y)) in offsets.iter().enumerate() {
        let want = crop(&img, x, y, 224, 224).unwrap();
        assert_eq!(patches[2 * cell].image, want);
        assert_eq!(patches[2 * cell + 1].image, transpose_image(&want));
    }
    assert_eq!(extract_tta_patches(&img, &cfg).unwrap(), patches);
}

#[test]
fn grid_examples() {
    let xs = |v: Vec<(usize, usize)>| {
        let mut x: Vec<usize> = v.iter().map(|p| p.0).collect();
        x.dedup();
        x.sort_unstable();
        x.dedup();
        x
    };
    let g = uniform_grid_offsets(1024, 1024, 224, 3, 3).unwrap();
    assert_eq!(xs(g.clone()), vec![0, 400, 800]);
    let g = uniform_grid_offsets(224, 224, 224, 3, 3).unwrap();
    assert_eq!(g, vec![(0, 0); 9]);
    let g = uniform_grid_offsets(512, 384, 224, 3, 3).unwrap();
    assert_eq!(g[..3], [(0, 0), (144, 0), (288, 0)]);
    assert_eq!(g.iter().map(|p| p.1).step_by(3).collect::<Vec<_>>(), vec![0, 80, 160]);
    assert!(matches!(uniform_grid_offsets(512, 384, 224, 1, 3), Err(Error::Contract(_))));
}

proptest! {
    #[test]
    fn grid_spans_extent(w in 1usize..3000, h in 1usize..3000, c in 1usize..500, rows in 2usize..6, cols in 2usize..6) {
        prop_assume!(w >= c && h >= c);
        let g = uniform_grid_offsets(w, h, c, rows, cols).unwrap();
        prop_assert_eq!(g.len(), rows * cols);
        let xs: Vec<usize> = g[..cols].iter().map(|p| p.0).collect();
        let ys: Vec<usize> = g.iter().step_by(cols).map(|p| p.1).collect();
        prop_assert!(xs.windows(2).all(|p| p[0] <= p[1]));
        prop_assert!(ys.windows(2).all(|p| p[0] <= p[1]));
        prop_assert_eq!((xs[0], *xs.last().unwrap()), (0, w - c));
        prop_assert_eq!((ys[0], *ys.last().unwrap()), (0, h - c));
    }

    #[test]
    fn tta_count_holds_for_any_size(h in 1usize..200, w in 1usize..200, transpose: bool) {
        let cfg = TtaConfig { patch_sizes: vec![24, 40], transpose, ..Default::default() };
        let plan = plan_tta_patches(&pattern(h, w), &cfg).unwrap();
        prop_assert_eq!(plan.len(), 9 * 2 * 3 * if transpose { 2 } else { 1 });
    }
}

#[test]
fn registries_match_ladders() {
    let combined = ZoomRegistry::builtin("combined").unwrap();
    assert_eq!(combined.len(), 4);
    let layout: Vec<(Option<usize>, Option<usize>, usize)> =
        combined.specs().iter().map(|s| (s.resize, s.crop, s.head_index)).collect();
    assert_eq!(
        layout,
        vec![(None, Some(224), 0), (None, Some(384), 1), (Some(768), Some(384), 2), (Some(512), Some(224), 3)]
    );
    let crops: Vec<Option<usize>> = ZoomRegistry::builtin("multi_crop").unwrap().specs().iter().map(|s| s.crop).collect();
    assert_eq!(crops, vec![Some(224), Some(256), Some(299), Some(384), None]);
    let resizes: Vec<Option<usize>> =
        ZoomRegistry::builtin("multi_resize").unwrap().specs().iter().map(|s| s.resize).collect();
    assert_eq!(resizes, vec![Some(224), Some(256), Some(299), Some(384), Some(512)]);
    let base = ZoomRegistry::builtin("baseline").unwrap();
    assert_eq!(base.len(), 1);
    assert_eq!((base.specs()[0].resize, base.specs()[0].crop), (Some(224), Some(224)));
    assert!(matches!(ZoomRegistry::builtin("mega"), Err(Error::Usage(_))));
}

#[test]
fn routing_table_for_combined() {
    let reg = ZoomRegistry::builtin("combined").unwrap();
    // Independent derivation from the spec list: which entries crop to c.
    for c in [224, 384] {
        let want: Vec<usize> = reg
            .specs()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.crop == Some(c))
            .map(|(i, _)| i)
            .collect();
        assert_eq!(reg.heads_for_crop(c), want);
    }
    assert_eq!(reg.heads_for_crop(224), vec![0, 3]);
    assert_eq!(reg.heads_for_crop(384), vec![1, 2]);
    assert!(reg.heads_for_crop(299).is_empty());
}

#[test]
fn zoom_examples() {
    let img = pattern(384, 512);
    let pass = ZoomSpec::new("full", None, None);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(apply_zoom(&img, &pass, ZoomMode::Train, &mut rng).unwrap(), img);

    let c224 = ZoomSpec::new("crop224", None, Some(224));
    assert_eq!(apply_zoom_eval(&img, &c224).unwrap(), crop(&img, 144, 80, 224, 224).unwrap());

    let mixed = ZoomSpec::new("r768_c384", Some(768), Some(384));
    let a = apply_zoom(&img, &mixed, ZoomMode::Train, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = apply_zoom(&img, &mixed, ZoomMode::Train, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.height(), a.width()), (384, 384));
    // The window equals the same region of the materialised resize.
    let full = resize_short_side(&img, 768).unwrap();
    let eval = apply_zoom_eval(&img, &mixed).unwrap();
    assert_eq!(eval, crop(&full, (1024 - 384) / 2, (768 - 384) / 2, 384, 384).unwrap());
}

#[test]
fn fit_policy_upscales_small_images() {
    let img = pattern(128, 128);
    let c384 = ZoomSpec::new("crop384", None, Some(384));
    let out = apply_zoom_eval(&img, &c384).unwrap();
    assert_eq!(out, resize_short_side(&img, 384).unwrap());
    let wide = pattern(100, 300);
    let out = apply_zoom(&wide, &c384, ZoomMode::Train, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!((out.height(), out.width()), (384, 384));
}
