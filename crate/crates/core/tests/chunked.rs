use proptest::prelude::*;
use voxflow::chunked::{
    averaged_velocity, estimate_forward_bytes, integrate_chunked, tracking_enabled, unbounded_generate, ChunkConfig,
    ChunkPlan, StagedDevice, TrackingAllocator,
};
use voxflow::flow::{generate_scene, integrate, level_net_config, FlowMode, LevelModel, SceneCondition, Transition};
use voxflow::layout::{Extrude, Polyline, VectorLayout};
use voxflow::net::ModelParams;
use voxflow::rng::gaussian_grid;
use voxflow::volume::{ChannelRole, GridSpec, HierarchySpec, LevelSpec, VoxelGrid};
use voxflow::Error;

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

/// Local diffusion-like stencil with zero padding outside the grid it sees.
fn stencil(x: &VoxelGrid, u: f32) -> VoxelGrid {
    let [nx, ny, nz] = x.dims();
    let at = |i: isize, j: isize, k: isize| {
        if i < 0 || j < 0 || k < 0 || i >= nx as isize || j >= ny as isize || k >= nz as isize {
            0.0
        } else {
            x.get(i as usize, j as usize, k as usize, 0)
        }
    };
    let mut out = x.clone();
    for i in 0..nx as isize {
        for j in 0..ny as isize {
            for k in 0..nz as isize {
                let c = at(i, j, k);
                let lap = at(i - 1, j, k) + at(i + 1, j, k) + at(i, j - 1, k) + at(i, j + 1, k) + at(i, j, k - 1)
                    + at(i, j, k + 1)
                    - 6.0 * c;
                out.set(i as usize, j as usize, k as usize, 0, 0.1 * lap - 0.05 * c + 0.02 * u);
            }
        }
    }
    out
}

fn world(dims: [usize; 3], seed: u64) -> VoxelGrid {
    gaussian_grid(GridSpec::new(dims, 1.0, [0.5; 3]).unwrap(), vec![ChannelRole::Udf], seed).unwrap()
}

#[test]
fn chunked_stencil_matches_monolithic() {
    let x0 = world([40, 24, 16], 1);
    let cfg = ChunkConfig {
        chunk: [16; 3],
        overlap: 8,
        margin: 4,
        gamma_min: 0.0,
        ..ChunkConfig::default()
    };
    let plan = ChunkPlan::new(x0.spec, &cfg, None, 1).unwrap();
    assert!(plan.chunks.len() > 4);
    let mono = integrate(&x0, 6, |x, u| Ok(stencil(x, u))).unwrap();
    let chunked = integrate_chunked(&plan, &x0, 6, 1, |_, xc, u| Ok(stencil(xc, u))).unwrap();
    let err = mono.data.iter().zip(&chunked.data).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(err <= 1e-5, "max abs error {err}");
}

#[test]
fn interior_voxels_are_bitwise_single_chunk_output() {
    let x = world([24, 8, 8], 2);
    let cfg = ChunkConfig {
        chunk: [16, 8, 8],
        overlap: 8,
        margin: 4,
        ..ChunkConfig::default()
    };
    let plan = ChunkPlan::new(x.spec, &cfg, None, 1).unwrap();
    let v = averaged_velocity(&plan, &x, 0.5, 1, |ch, xc, _| {
        xc.with_data(xc.data.iter().map(|a| a * (1.0 + ch.id as f32)).collect())
    })
    .unwrap();
    for (g, &n) in plan.coverage().iter().enumerate() {
        if n == 1 {
            let id = if g / 64 < 8 { 0 } else { 1 };
            assert_eq!(v.data[g].to_bits(), (x.data[g] * (1.0 + id as f32)).to_bits());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn weight_scaling_and_order_do_not_matter(seed in 0u64..1000, scale in 0.1f32..10.0) {
        let x = world([20, 12, 8], seed);
        let cfg = ChunkConfig { chunk: [8, 8, 8], overlap: 4, margin: 2, ..ChunkConfig::default() };
        let plan = ChunkPlan::new(x.spec, &cfg, None, 1).unwrap();
        let f = |ch: &voxflow::chunked::Chunk, xc: &VoxelGrid, u: f32| {
            let s = stencil(xc, u);
            s.with_data(s.data.iter().map(|v| v + 0.01 * ch.id as f32).collect())
        };
        let base = averaged_velocity(&plan, &x, 0.2, 1, f).unwrap();

        let mut scaled = plan.clone();
        for ch in &mut scaled.chunks {
            for w in &mut ch.axis_weights[0] {
                *w *= scale;
            }
        }
        let s = averaged_velocity(&scaled, &x, 0.2, 1, f).unwrap();
        let mut reversed = plan.clone();
        reversed.chunks.reverse();
        let r = averaged_velocity(&reversed, &x, 0.2, 3, f).unwrap();
        for ((a, b), c) in base.data.iter().zip(&s.data).zip(&r.data) {
            prop_assert!((a - b).abs() <= 4.0 * f32::EPSILON * a.abs().max(1.0));
            prop_assert!((a - c).abs() <= 4.0 * f32::EPSILON * a.abs().max(1.0));
        }
    }
}

fn tiny_models(h: &HierarchySpec, layout_k: usize) -> Vec<LevelModel> {
    (1..=h.levels.len())
        .map(|l| {
            let t = Transition::from_hierarchy(h, l, 0.05).unwrap();
            let mut cfg = level_net_config(&t, FlowMode::ThroughDistributions, layout_k, 1);
            cfg.base_width = 8;
            cfg.groups = 4;
            cfg.embed_dim = 16;
            cfg.depth = 2;
            cfg.attention_at = vec![2];
            let mut params = ModelParams::init(&cfg, l as u64).unwrap();
            for v in &mut params.get_mut("out.c.w").unwrap().data {
                *v = 0.02;
            }
            LevelModel {
                params,
                transition: t,
                mode: FlowMode::ThroughDistributions,
            }
        })
        .collect()
}

fn two_level() -> HierarchySpec {
    HierarchySpec::new(
        vec![
            LevelSpec { index: 1, voxel_size: 1.0, rgb: false },
            LevelSpec { index: 2, voxel_size: 0.5, rgb: true },
        ],
        2.0,
    )
    .unwrap()
}

#[test]
fn one_chunk_world_equals_plain_generation() {
    let h = two_level();
    let models = tiny_models(&h, 3);
    let base = GridSpec::new([8, 8, 4], 1.0, [0.5; 3]).unwrap();
    let layout = VectorLayout {
        polylines: vec![Polyline {
            points: vec![[1.0, 1.0, 0.0].into(), [6.0, 5.0, 0.0].into()],
            class: 0,
            extrude: Extrude::Wall,
        }],
        boxes: vec![],
        classes: 3,
    };
    let cond = SceneCondition {
        layout: Some(layout),
        attrs: vec![1.0],
        line_width: 0.0,
    };
    let plain = generate_scene(&models, &base, &cond, 11, 3).unwrap();
    let cfg = ChunkConfig {
        chunk: [16, 16, 8],
        ..ChunkConfig::default()
    };
    let out = unbounded_generate(&models, &base, &cond, &cfg, 11, 3, &StagedDevice::new(None)).unwrap();
    assert_eq!(out.chunk_counts, vec![1, 1]);
    for (a, b) in plain.iter().zip(&out.levels) {
        assert_eq!(a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn memory_budget_names_feasible_chunk() {
    let h = two_level();
    let models = tiny_models(&h, 0);
    let base = GridSpec::new([16, 16, 16], 1.0, [0.5; 3]).unwrap();
    let cfg = ChunkConfig {
        chunk: [16; 3],
        overlap: 4,
        margin: 4,
        ..ChunkConfig::default()
    };
    let budget = estimate_forward_bytes(&models[0].params.config, [8; 3]) + 1;
    let dev = StagedDevice::new(Some(budget));
    let cond = SceneCondition { layout: None, attrs: vec![0.0], line_width: 0.0 };
    match unbounded_generate(&models, &base, &cond, &cfg, 0, 2, &dev) {
        Err(Error::Config(m)) => assert!(m.contains("at most 8"), "{m}"),
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn estimate_bounds_measured_forward_peak() {
    assert!(tracking_enabled());
    let h = two_level();
    let models = tiny_models(&h, 3);
    let dev = StagedDevice::new(None);
    for dims in [[8, 8, 8], [16, 16, 8]] {
        dev.reset_stats();
        let x = world(dims, 0);
        let layout = VoxelGrid::zeros(x.spec, (0..3).map(ChannelRole::Layout).collect()).unwrap();
        dev.forward(&models[0].params, &x, Some(&layout), &[1.0], 0.5).unwrap();
        let peak = dev.stats().max_forward_peak;
        let est = estimate_forward_bytes(&models[0].params.config, dims);
        assert!(peak > 0 && peak <= est, "{dims:?}: measured {peak}, estimated {est}");
        assert!(est < 4 * peak, "{dims:?}: estimate {est} is loose against {peak}");
    }
}
