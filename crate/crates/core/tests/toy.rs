use proptest::prelude::*;
use voxflow::layout::{line_thickness, read_manifest, voxelize_layout};
use voxflow::toy::{
    build_dataset, gen_scene, level_specs, load_pairs, luminance, scene_volumes, split_of, attribute_vocab,
    DatasetIndex, Domain, Lighting, PartKind, Split, ToyWorldConfig, INDEX_FILE,
};
use voxflow::volume::{default_iso, extract_mesh, read_volume, sample_surface_points, ChannelRole, VoxelGrid};

fn small(domain: Domain, seed: u64) -> ToyWorldConfig {
    let extent = match domain {
        Domain::Rooms => 4.0,
        Domain::Streets => 32.0,
    };
    ToyWorldConfig::two_level(domain, extent, 16, seed).unwrap()
}

fn tree_of(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn dataset_is_deterministic_and_rerun_is_unchanged() {
    let cfg = small(Domain::Streets, 5);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = build_dataset(&cfg, 6, a.path()).unwrap();
    build_dataset(&cfg, 6, b.path()).unwrap();
    let ta = tree_of(a.path());
    assert_eq!(ta.len(), 6 * 3 + 1);
    assert_eq!(ta, tree_of(b.path()));
    assert!(first.files_written > 0);

    let again = build_dataset(&cfg, 6, a.path()).unwrap();
    assert!(again.unchanged());
    assert_eq!(again.index, first.index);
    assert_eq!(DatasetIndex::read(a.path().join(INDEX_FILE)).unwrap(), first.index);
}

#[test]
fn records_have_every_level_with_refined_dims() {
    let cfg = small(Domain::Rooms, 1);
    let dir = tempfile::tempdir().unwrap();
    let built = build_dataset(&cfg, 4, dir.path()).unwrap();
    for r in &built.index.records {
        assert_eq!(r.levels.len(), 2);
        let l1 = read_volume(&dir.path().join(&r.levels[0])).unwrap();
        let l2 = read_volume(&dir.path().join(&r.levels[1])).unwrap();
        assert_eq!(l2.dims(), l1.dims().map(|d| d * 2));
        assert_eq!(l1.roles, vec![ChannelRole::Udf]);
        assert_eq!(l2.roles.len(), 4);
        assert_eq!(l1.spec.world_min(), l2.spec.world_min());
        let m = read_manifest(dir.path().join(&r.layout)).unwrap();
        assert_eq!(m.attrs, r.attrs);
        assert_eq!(m.line_width, Some(cfg.wall_thickness));
    }
    let vocab = attribute_vocab();
    let pairs = load_pairs(dir.path(), &built.index, 2, Split::Train, &vocab, true).unwrap();
    assert_eq!(pairs.len(), built.index.count(Split::Train));
    for p in &pairs {
        assert_eq!(p.source.as_ref().unwrap().dims().map(|d| d * 2), p.target.dims());
        assert_eq!(p.layout.as_ref().unwrap().channels(), 3);
        assert_eq!(p.attrs.len(), 4);
        assert_eq!(p.attrs[0], 1.0);
    }
    assert!(load_pairs(dir.path(), &built.index, 3, Split::Train, &vocab, false).is_err());
}

/// FNV-1a followed by the splitmix64 finalizer with the golden-ratio increment.
fn oracle_split(id: &str) -> bool {
    let mut h: u64 = 14695981039346656037;
    for b in id.as_bytes() {
        h = (h ^ *b as u64).wrapping_mul(1099511628211);
    }
    let mut z = h ^ 0x9e3779b97f4a7c15;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    (z ^ (z >> 31)) % 10 == 0
}

#[test]
fn hash_split_near_ninety_ten() {
    let ids: Vec<String> = (0..100).map(|i| format!("scene_{i:05}")).collect();
    let held = ids.iter().filter(|id| oracle_split(id)).count();
    for id in &ids {
        assert_eq!(split_of(id) == Split::HeldOut, oracle_split(id), "{id}");
    }
    assert!((7..=13).contains(&held), "{held} held out of 100");
}

#[test]
fn furniture_stays_inside_the_walls() {
    let cfg = ToyWorldConfig::rooms(0);
    for seed in 0..40 {
        let s = gen_scene(&cfg, seed).unwrap();
        let walls: Vec<_> = s.parts.iter().filter(|p| p.kind == PartKind::Wall).collect();
        assert_eq!(walls.len(), 4);
        let inner_x0 = walls.iter().map(|w| w.max[0]).fold(f32::INFINITY, f32::min);
        let inner_y0 = walls.iter().map(|w| w.max[1]).fold(f32::INFINITY, f32::min);
        let inner_x1 = walls.iter().map(|w| w.min[0]).fold(f32::NEG_INFINITY, f32::max);
        let inner_y1 = walls.iter().map(|w| w.min[1]).fold(f32::NEG_INFINITY, f32::max);
        for f in s.parts.iter().filter(|p| p.kind == PartKind::Furniture) {
            assert!(
                f.min[0] >= inner_x0 && f.min[1] >= inner_y0 && f.max[0] <= inner_x1 && f.max[1] <= inner_y1,
                "seed {seed}: {:?}..{:?}",
                f.min,
                f.max
            );
        }
    }
}

#[test]
fn night_streets_are_darker_than_day() {
    let mut day = ToyWorldConfig::streets(0);
    day.lighting = Some(Lighting::Day);
    let mut night = day.clone();
    night.lighting = Some(Lighting::Night);
    let pal = &day.palettes;
    // Palette means with the jitter averaged out.
    let mean = |tint: [f32; 3], kind: PartKind| {
        let b = pal.base(kind);
        luminance([b[0] * tint[0], b[1] * tint[1], b[2] * tint[2]])
    };
    for seed in 0..10 {
        let (d, n) = (gen_scene(&day, seed).unwrap(), gen_scene(&night, seed).unwrap());
        assert_eq!(d.parts.len(), n.parts.len());
        assert!(n.mean_luminance() < d.mean_luminance(), "seed {seed}");
        assert_eq!(n.attrs, vec!["streets", "night"]);
        for (pd, pn) in d.parts.iter().zip(&n.parts) {
            assert_eq!(pd.min, pn.min);
            // Jitter moves each channel by at most 1.5 * 0.05 before tinting.
            assert!((luminance(pd.color) - mean(pal.day, pd.kind)).abs() <= 0.075 + 1e-6);
            assert!((luminance(pn.color) - mean(pal.night, pn.kind)).abs() <= 0.075 * 0.4 + 1e-6);
        }
    }
}

#[test]
fn volumes_are_valid_normalized_fields() {
    for domain in [Domain::Rooms, Domain::Streets] {
        let cfg = small(domain, 0);
        for seed in 0..3 {
            let scene = gen_scene(&cfg, seed).unwrap();
            for v in scene_volumes(&cfg, &scene).unwrap() {
                let u = v.channel(0);
                assert!(u.iter().all(|x| (0.0..=1.0).contains(x)));
                assert!(u.iter().any(|&x| x < 0.5 * v.spec.voxel_size / cfg.hierarchy.truncation));
                assert!(v.data.iter().all(|x| x.is_finite() && (0.0..=1.0).contains(x)));
            }
        }
    }
}

/// Trilinear interpolation of the metric distance channel at `p`.
fn metric_udf(v: &VoxelGrid, tau: f32, p: [f32; 3]) -> f64 {
    let s = v.spec;
    let mut i0 = [0usize; 3];
    let mut f = [0f64; 3];
    for a in 0..3 {
        let g = ((p[a] - s.origin[a]) / s.voxel_size).clamp(0.0, (s.dims[a] - 1) as f32) as f64;
        let lo = (g.floor() as usize).min(s.dims[a].saturating_sub(2));
        i0[a] = lo;
        f[a] = g - lo as f64;
    }
    let mut acc = 0.0;
    for corner in 0..8 {
        let o = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let w: f64 = (0..3).map(|a| if o[a] == 1 { f[a] } else { 1.0 - f[a] }).product();
        acc += w * v.get(i0[0] + o[0], i0[1] + o[1], i0[2] + o[2], 0) as f64;
    }
    acc * tau as f64
}

/// Every surface sample of one level lies within one coarse voxel of the
/// other level's zero set, measured through that level's distance field.
#[test]
fn coarse_and_fine_surfaces_agree_within_a_coarse_voxel() {
    for domain in [Domain::Rooms, Domain::Streets] {
        let cfg = small(domain, 0);
        let tau = cfg.hierarchy.truncation;
        let s1 = cfg.hierarchy.levels[0].voxel_size as f64;
        for seed in 0..2 {
            let scene = gen_scene(&cfg, seed).unwrap();
            let vols = scene_volumes(&cfg, &scene).unwrap();
            let pts: Vec<_> = vols
                .iter()
                .map(|v| {
                    let iso = default_iso(v.spec.voxel_size, tau);
                    let ex = extract_mesh(&v.select_channels(&[0]).unwrap(), iso).unwrap();
                    sample_surface_points(&ex.mesh, 5_000, seed).unwrap().points
                })
                .collect();
            for (a, b) in [(0, 1), (1, 0)] {
                let h = pts[a].iter().map(|&p| metric_udf(&vols[b], tau, p)).fold(0.0, f64::max);
                assert!(h <= s1, "{domain:?} seed {seed}: level {} to level {}: {h} > {s1}", a + 1, b + 1);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn layout_matches_geometry(seed in 0u64..10_000, streets in any::<bool>()) {
        let domain = if streets { Domain::Streets } else { Domain::Rooms };
        let cfg = ToyWorldConfig::for_domain(domain, 0);
        let scene = gen_scene(&cfg, seed).unwrap();
        let spec = *level_specs(&cfg).unwrap().last().unwrap();
        let mask = voxelize_layout(&scene.layout, &spec, line_thickness(cfg.line_width(), spec.voxel_size)).unwrap();
        for k in 0..3 {
            let geo = scene.class_occupancy(&spec, k);
            let lay = mask.channel(k);
            let inter = geo.iter().zip(&lay).filter(|(g, l)| **g && **l > 0.5).count();
            let union = geo.iter().zip(&lay).filter(|(g, l)| **g || **l > 0.5).count();
            if union > 0 {
                let iou = inter as f64 / union as f64;
                prop_assert!(iou >= 0.9, "class {} IoU {}", k, iou);
            }
        }
    }
}
