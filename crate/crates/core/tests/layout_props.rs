use proptest::prelude::*;
use voxflow::layout::{crop_layout, voxelize_layout, Extrude, LayoutBox, Polyline, VectorLayout, WorldBox};
use voxflow::volume::GridSpec;

fn seg_dist(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    // Dense sampling oracle, accurate to the sampling step.
    let n = 2000;
    (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64;
            (0..3)
                .map(|k| (a[k] + t * (b[k] - a[k]) - p[k]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

fn box_signed(p: [f64; 3], b: &LayoutBox) -> f64 {
    let mut out = 0.0f64;
    let mut inside = f64::NEG_INFINITY;
    for k in 0..3 {
        let lo = b.min[k] as f64 - p[k];
        let hi = p[k] - b.max[k] as f64;
        let d = lo.max(hi);
        out += d.max(0.0).powi(2);
        inside = inside.max(d);
    }
    if inside > 0.0 {
        out.sqrt()
    } else {
        inside
    }
}

fn f(v: [f32; 3]) -> [f64; 3] {
    v.map(|x| x as f64)
}

fn arb_point() -> impl Strategy<Value = [f32; 3]> {
    [0.0f32..3.2, 0.0f32..3.2, 0.0f32..1.6]
}

fn arb_layout() -> impl Strategy<Value = VectorLayout> {
    let line = (prop::collection::vec(arb_point(), 2..4), 0usize..2).prop_map(|(points, class)| Polyline {
        points,
        class,
        extrude: Extrude::None,
    });
    let bx = (arb_point(), [0.1f32..1.5, 0.1f32..1.5, 0.1f32..1.0], 0usize..2).prop_map(|(min, ext, class)| {
        LayoutBox {
            min,
            max: [min[0] + ext[0], min[1] + ext[1], min[2] + ext[2]],
            class,
        }
    });
    (prop::collection::vec(line, 0..3), prop::collection::vec(bx, 0..3)).prop_map(|(polylines, boxes)| {
        VectorLayout {
            polylines,
            boxes,
            classes: 2,
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn coarse_matches_pooled_fine_off_threshold(layout in arb_layout()) {
        let coarse = GridSpec::covering([0.0; 3], [8, 8, 4], 0.4).unwrap();
        let fine = GridSpec::covering([0.0; 3], [16, 16, 8], 0.2).unwrap();
        let gc = voxelize_layout(&layout, &coarse, 1).unwrap();
        let gf = voxelize_layout(&layout, &fine, 1).unwrap();
        let r = 0.2;
        let h = 0.4 * 3f64.sqrt() / 2.0;
        for x in 0..8 {
            for y in 0..8 {
                for z in 0..4 {
                    for k in 0..2 {
                        let mut pooled = 0.0f32;
                        for d in 0..8 {
                            pooled = pooled.max(gf.get(2 * x + (d & 1), 2 * y + (d >> 1 & 1), 2 * z + (d >> 2), k));
                        }
                        let c = gc.get(x, y, z, k);
                        prop_assert!(c == 0.0 || c == 1.0);
                        if c == pooled {
                            continue;
                        }
                        let p = f(coarse.center(x, y, z));
                        let near = layout.polylines.iter().filter(|l| l.class == k).any(|l| {
                            l.points.windows(2).any(|w| (seg_dist(p, f(w[0]), f(w[1])) - r).abs() <= h)
                        }) || layout.boxes.iter().filter(|b| b.class == k).any(|b| box_signed(p, b).abs() <= h);
                        prop_assert!(near, "cell {:?} class {} differs away from any threshold", (x, y, z), k);
                    }
                }
            }
        }
    }

    #[test]
    fn crop_then_voxelize_matches_voxelize_then_crop(layout in arb_layout(), ox in 0usize..8, oy in 0usize..8) {
        let global = GridSpec::covering([0.0; 3], [16, 16, 8], 0.2).unwrap();
        let (offset, dims) = ([ox, oy, 2], [8, 8, 4]);
        let sub = global.sub_grid(offset, dims);
        let whole = voxelize_layout(&layout, &global, 1).unwrap().crop(offset, dims).unwrap();
        let r = 0.1;

        // Cropping to the box dilated by the rasterization radius loses nothing.
        let wide = crop_layout(&layout, &WorldBox::of_grid(&sub).dilate(r + 1e-3));
        prop_assert_eq!(&voxelize_layout(&wide, &sub, 1).unwrap().data, &whole.data);

        // A tight crop can only differ within the radius of the box faces.
        let tight = crop_layout(&layout, &WorldBox::of_grid(&sub));
        let local = voxelize_layout(&tight, &sub, 1).unwrap();
        let (lo, hi) = (sub.world_min(), sub.world_max());
        for x in 0..8 {
            for y in 0..8 {
                for z in 0..4 {
                    for k in 0..2 {
                        if local.get(x, y, z, k) != whole.get(x, y, z, k) {
                            let p = sub.center(x, y, z);
                            let edge = (0..3).map(|a| (p[a] - lo[a]).min(hi[a] - p[a])).fold(f32::INFINITY, f32::min);
                            prop_assert!(edge <= r as f32 + 1e-4, "interior voxel {:?} differs", (x, y, z));
                        }
                    }
                }
            }
        }
    }
}
