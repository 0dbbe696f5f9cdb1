//! Procedural desk-scale scene distributions: box rooms and toy streets,
//! each with a matching vector layout and flat per-part colors.

mod dataset;

pub use dataset::{
    build_dataset, level_specs, load_pairs, scene_volumes, split_of, BuildSummary, DatasetIndex, SceneRecord,
    Split, INDEX_FILE,
};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layout::{AttributeVocab, Extrude, LayoutBox, LayoutManifest, Polyline, VectorLayout};
use crate::rng::rng_from;
use crate::volume::{GridSpec, HierarchySpec, LevelSpec, TriangleMesh, Vec3};

pub const ATTRIBUTE_TAGS: [&str; 4] = ["rooms", "streets", "day", "night"];

/// Layout classes: 0 walls or roads, 1 furniture or vehicles, 2 buildings.
pub const LAYOUT_CLASSES: usize = 3;

pub fn attribute_vocab() -> AttributeVocab {
    AttributeVocab::new(ATTRIBUTE_TAGS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Rooms,
    Streets,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Rooms => "rooms",
            Domain::Streets => "streets",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rooms" => Some(Domain::Rooms),
            "streets" => Some(Domain::Streets),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lighting {
    Day,
    Night,
}

impl Lighting {
    pub fn name(self) -> &'static str {
        match self {
            Lighting::Day => "day",
            Lighting::Night => "night",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "day" => Some(Lighting::Day),
            "night" => Some(Lighting::Night),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartKind {
    Wall,
    Floor,
    Furniture,
    Ground,
    Road,
    Vehicle,
    Building,
}

impl PartKind {
    /// Layout class drawn for this part, if any.
    pub fn class(self) -> Option<usize> {
        match self {
            PartKind::Wall | PartKind::Road => Some(0),
            PartKind::Furniture | PartKind::Vehicle => Some(1),
            PartKind::Building => Some(2),
            PartKind::Floor | PartKind::Ground => None,
        }
    }
}

/// Base colors per domain tag and multiplicative tints per lighting tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Palettes {
    /// Wall, floor, furniture.
    pub rooms: [Vec3; 3],
    /// Ground, road, vehicle, building.
    pub streets: [Vec3; 4],
    pub day: Vec3,
    pub night: Vec3,
    /// Half-width of the uniform per-scene color offset; parts get half of it again.
    pub jitter: f32,
}

impl Default for Palettes {
    fn default() -> Self {
        Palettes {
            rooms: [[0.82, 0.78, 0.70], [0.55, 0.40, 0.28], [0.35, 0.45, 0.60]],
            streets: [
                [0.35, 0.55, 0.30],
                [0.30, 0.30, 0.32],
                [0.75, 0.20, 0.15],
                [0.70, 0.66, 0.60],
            ],
            day: [1.0, 1.0, 0.97],
            night: [0.25, 0.28, 0.40],
            jitter: 0.05,
        }
    }
}

impl Palettes {
    pub fn base(&self, kind: PartKind) -> Vec3 {
        match kind {
            PartKind::Wall => self.rooms[0],
            PartKind::Floor => self.rooms[1],
            PartKind::Furniture => self.rooms[2],
            PartKind::Ground => self.streets[0],
            PartKind::Road => self.streets[1],
            PartKind::Vehicle => self.streets[2],
            PartKind::Building => self.streets[3],
        }
    }

    pub fn tint(&self, lighting: Lighting) -> Vec3 {
        match lighting {
            Lighting::Day => self.day,
            Lighting::Night => self.night,
        }
    }

    fn validate(&self) -> Result<()> {
        let all = self.rooms.iter().chain(&self.streets).chain([&self.day, &self.night]);
        for c in all {
            if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::param(format!("palette color {c:?} outside [0, 1]")));
            }
        }
        if !(0.0..=0.5).contains(&self.jitter) {
            return Err(Error::param("palette jitter must lie in [0, 0.5]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyWorldConfig {
    pub domain: Domain,
    /// Horizontal and vertical world size in meters.
    pub extent: f32,
    /// Level-1 grid edge in voxels.
    pub base_dims: usize,
    pub hierarchy: HierarchySpec,
    /// Inclusive count ranges.
    pub furniture: [usize; 2],
    pub vehicles: [usize; 2],
    pub buildings: [usize; 2],
    pub wall_thickness: f32,
    pub road_width: f32,
    /// Fixed lighting, or a fair coin per scene.
    pub lighting: Option<Lighting>,
    pub palettes: Palettes,
    pub seed: u64,
}

impl ToyWorldConfig {
    /// Two levels at `extent / base_dims` and half that, RGB at level 2, truncation of four fine voxels.
    pub fn two_level(domain: Domain, extent: f32, base_dims: usize, seed: u64) -> Result<Self> {
        let s1 = extent / base_dims as f32;
        let s2 = s1 / 2.0;
        let hierarchy = HierarchySpec::new(
            vec![
                LevelSpec {
                    index: 1,
                    voxel_size: s1,
                    rgb: false,
                },
                LevelSpec {
                    index: 2,
                    voxel_size: s2,
                    rgb: true,
                },
            ],
            4.0 * s2,
        )?;
        let cfg = ToyWorldConfig {
            domain,
            extent,
            base_dims,
            hierarchy,
            furniture: [2, 6],
            vehicles: [1, 4],
            buildings: [0, 3],
            wall_thickness: extent / 32.0,
            road_width: extent / 8.0,
            lighting: None,
            palettes: Palettes::default(),
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// 4 m rooms on a 32^3 level-1 grid.
    pub fn rooms(seed: u64) -> Self {
        Self::two_level(Domain::Rooms, 4.0, 32, seed).expect("default rooms config is valid")
    }

    /// 32 m streets on a 32^3 level-1 grid.
    pub fn streets(seed: u64) -> Self {
        Self::two_level(Domain::Streets, 32.0, 32, seed).expect("default streets config is valid")
    }

    pub fn for_domain(domain: Domain, seed: u64) -> Self {
        match domain {
            Domain::Rooms => Self::rooms(seed),
            Domain::Streets => Self::streets(seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.extent > 0.0) || !self.extent.is_finite() {
            return Err(Error::param(format!("extent must be positive, got {}", self.extent)));
        }
        if self.base_dims < 4 {
            return Err(Error::param("base grid needs at least 4 voxels per axis"));
        }
        self.hierarchy.validate()?;
        let s1 = self.hierarchy.levels[0].voxel_size;
        let want = self.extent / self.base_dims as f32;
        if (s1 - want).abs() > 1e-5 * want {
            return Err(Error::param(format!(
                "level-1 voxel size {s1} does not tile extent {} with {} voxels",
                self.extent, self.base_dims
            )));
        }
        for (name, r) in [("furniture", self.furniture), ("vehicles", self.vehicles), ("buildings", self.buildings)] {
            if r[0] > r[1] {
                return Err(Error::param(format!("{name} count range {r:?} is empty")));
            }
        }
        if !(self.wall_thickness > 0.0) || !(self.road_width > 0.0) {
            return Err(Error::param("wall thickness and road width must be positive"));
        }
        self.palettes.validate()
    }

    /// Width used to rasterize this domain's polylines.
    pub fn line_width(&self) -> f32 {
        match self.domain {
            Domain::Rooms => self.wall_thickness,
            Domain::Streets => self.road_width,
        }
    }

    /// Lower world corner. Two coarse voxels lie below the floor plane `z = 0`,
    /// which falls on a voxel center of the finest level.
    pub fn world_min(&self) -> Vec3 {
        let fine = self.quantum();
        [0.0, 0.0, -(2.0 * self.hierarchy.levels[0].voxel_size - 0.5 * fine)]
    }

    pub fn world_max(&self) -> Vec3 {
        let m = self.world_min();
        [m[0] + self.extent, m[1] + self.extent, m[2] + self.extent]
    }

    pub fn base_spec(&self) -> Result<GridSpec> {
        GridSpec::covering(self.world_min(), [self.base_dims; 3], self.hierarchy.levels[0].voxel_size)
    }

    /// Finest voxel size.
    fn quantum(&self) -> f32 {
        self.hierarchy.levels.last().map(|l| l.voxel_size).unwrap_or(1.0)
    }
}

/// One solid, axis-aligned scene part.
#[derive(Debug, Clone, PartialEq)]
pub struct Part {
    pub kind: PartKind,
    pub min: Vec3,
    pub max: Vec3,
    pub mesh: TriangleMesh,
    pub color: Vec3,
}

impl Part {
    /// Painted onto the ground rather than occupying volume.
    pub fn is_flat(&self) -> bool {
        matches!(self.kind, PartKind::Floor | PartKind::Ground | PartKind::Road)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyScene {
    pub domain: Domain,
    pub lighting: Lighting,
    pub parts: Vec<Part>,
    pub layout: VectorLayout,
    pub attrs: Vec<String>,
}

impl ToyScene {
    /// All parts merged, with per-vertex colors.
    pub fn mesh(&self) -> TriangleMesh {
        let mut out = TriangleMesh::default();
        let mut colors = Vec::new();
        for p in &self.parts {
            out.append(&p.mesh);
            colors.extend(std::iter::repeat_n(p.color, p.mesh.vertices.len()));
        }
        out.colors = Some(colors);
        out
    }

    /// Color of each triangle of [`ToyScene::mesh`].
    pub fn triangle_colors(&self) -> Vec<Vec3> {
        self.parts
            .iter()
            .flat_map(|p| std::iter::repeat_n(p.color, p.mesh.triangles.len()))
            .collect()
    }

    pub fn manifest(&self, line_width: f32) -> LayoutManifest {
        LayoutManifest {
            layout: self.layout.clone(),
            attrs: self.attrs.clone(),
            line_width: Some(line_width),
        }
    }

    /// Area-weighted mean Rec. 709 luminance of the surface colors.
    pub fn mean_luminance(&self) -> f64 {
        let (mut sum, mut area) = (0.0, 0.0);
        for p in &self.parts {
            let a = p.mesh.area();
            sum += a * luminance(p.color);
            area += a;
        }
        if area > 0.0 {
            sum / area
        } else {
            0.0
        }
    }

    /// Voxels of `spec` inside the geometry of layout class `class`. Flat parts
    /// occupy the voxel layer holding `z = 0`.
    pub fn class_occupancy(&self, spec: &GridSpec, class: usize) -> Vec<bool> {
        let [nx, ny, nz] = spec.dims;
        let ground = crate::layout::ground_layer(spec);
        let mut occ = vec![false; spec.voxel_count()];
        for p in self.parts.iter().filter(|p| p.kind.class() == Some(class)) {
            for x in 0..nx {
                for y in 0..ny {
                    let c = spec.center(x, y, 0);
                    if c[0] < p.min[0] || c[0] > p.max[0] || c[1] < p.min[1] || c[1] > p.max[1] {
                        continue;
                    }
                    for z in 0..nz {
                        let inside = if p.is_flat() {
                            z == ground
                        } else {
                            let cz = spec.center(0, 0, z)[2];
                            cz >= p.min[2] && cz <= p.max[2]
                        };
                        if inside {
                            occ[(x * ny + y) * nz + z] = true;
                        }
                    }
                }
            }
        }
        occ
    }
}

pub fn luminance(c: Vec3) -> f64 {
    0.2126 * c[0] as f64 + 0.7152 * c[1] as f64 + 0.0722 * c[2] as f64
}

struct Builder<'a> {
    cfg: &'a ToyWorldConfig,
    rng: ChaCha8Rng,
    lighting: Lighting,
    scene_offset: Vec3,
    parts: Vec<Part>,
    layout: VectorLayout,
}

impl Builder<'_> {
    fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        if hi > lo {
            self.rng.random_range(lo..hi)
        } else {
            lo
        }
    }

    fn count(&mut self, r: [usize; 2]) -> usize {
        self.rng.random_range(r[0]..=r[1])
    }

    fn color(&mut self, kind: PartKind) -> Vec3 {
        let pal = &self.cfg.palettes;
        let (base, tint, j) = (pal.base(kind), pal.tint(self.lighting), pal.jitter * 0.5);
        let mut c = [0.0; 3];
        for (i, ci) in c.iter_mut().enumerate() {
            let part = if j > 0.0 { self.rng.random_range(-j..=j) } else { 0.0 };
            *ci = ((base[i] + self.scene_offset[i] + part).clamp(0.0, 1.0) * tint[i]).clamp(0.0, 1.0);
        }
        c
    }

    fn push(&mut self, kind: PartKind, min: Vec3, max: Vec3, mesh: TriangleMesh) {
        let color = self.color(kind);
        self.parts.push(Part {
            kind,
            min,
            max,
            mesh,
            color,
        });
    }

    fn push_box(&mut self, kind: PartKind, min: Vec3, max: Vec3) {
        self.push(kind, min, max, TriangleMesh::cuboid(min, max));
        if let Some(class) = kind.class() {
            self.layout.boxes.push(LayoutBox { min, max, class });
        }
    }

    fn rooms(&mut self) {
        let e = self.cfg.extent;
        // Walls keep two coarse voxels from the world edge so every level sees both wall faces.
        let lo = 2.0 * self.cfg.hierarchy.levels[0].voxel_size + self.cfg.wall_thickness;
        let (lo, hi) = (lo.max(e / 16.0), lo.max(e / 16.0) + e / 8.0);
        let x0 = self.uniform(lo, hi);
        let x1 = e - self.uniform(lo, hi);
        let y0 = self.uniform(lo, hi);
        let y1 = e - self.uniform(lo, hi);
        let t = self.cfg.wall_thickness / 2.0;
        let (zmin, zmax) = (self.cfg.world_min()[2], self.cfg.world_max()[2]);

        let corners = [[x0, y0], [x1, y0], [x1, y1], [x0, y1]];
        for i in 0..4 {
            let (a, b) = (corners[i], corners[(i + 1) % 4]);
            let min = [a[0].min(b[0]) - t, a[1].min(b[1]) - t, zmin];
            let max = [a[0].max(b[0]) + t, a[1].max(b[1]) + t, zmax];
            self.push(PartKind::Wall, min, max, TriangleMesh::cuboid(min, max));
        }
        let mut loop_pts: Vec<Vec3> = corners.iter().map(|c| [c[0], c[1], 0.0]).collect();
        loop_pts.push(loop_pts[0]);
        self.layout.polylines.push(Polyline {
            points: loop_pts,
            class: 0,
            extrude: Extrude::Wall,
        });
        self.push(
            PartKind::Floor,
            [x0, y0, 0.0],
            [x1, y1, 0.0],
            TriangleMesh::quad_z([x0 + t, y0 + t], [x1 - t, y1 - t], 0.0),
        );

        // Furniture keeps two fine voxels from the walls and from each other.
        let gap = 2.0 * self.cfg.quantum();
        let inner = [x0 + t + gap, y0 + t + gap, x1 - t - gap, y1 - t - gap];
        let n = self.count(self.cfg.furniture);
        let mut placed: Vec<[f32; 4]> = Vec::new();
        let mut attempts = 0;
        while placed.len() < n && attempts < 400 {
            attempts += 1;
            let w = self.uniform(0.1 * e, 0.3 * e);
            let d = self.uniform(0.1 * e, 0.3 * e);
            let h = self.uniform(0.1 * e, 0.3 * e);
            let px = self.uniform(inner[0], inner[2] - w);
            let py = self.uniform(inner[1], inner[3] - d);
            let fp = [px, py, px + w, py + d];
            let fits = fp[0] >= inner[0] && fp[1] >= inner[1] && fp[2] <= inner[2] && fp[3] <= inner[3];
            if !fits || placed.iter().any(|o| overlaps(o, &fp, gap)) {
                continue;
            }
            placed.push(fp);
            self.push_box(PartKind::Furniture, [fp[0], fp[1], 0.0], [fp[2], fp[3], h]);
        }
    }

    fn streets(&mut self) {
        let e = self.cfg.extent;
        let q = self.cfg.quantum();
        let hw = self.cfg.road_width / 2.0;
        self.push(PartKind::Ground, [0.0, 0.0, 0.0], [e, e, 0.0], TriangleMesh::quad_z([0.0, 0.0], [e, e], 0.0));

        // Road centerline in (along, across) coordinates; `swap` turns it by 90 degrees.
        let swap = self.rng.random_bool(0.5);
        let bend = self.rng.random_bool(0.5);
        let c1 = self.uniform(0.25 * e, 0.75 * e);
        let pts2: Vec<[f32; 2]> = if bend {
            let c2 = self.uniform(0.25 * e, 0.75 * e);
            vec![[0.0, c1], [c2, c1], [c2, e]]
        } else {
            vec![[0.0, c1], [e, c1]]
        };
        let orient = |p: [f32; 2]| if swap { [p[1], p[0]] } else { p };
        let mut ribbons: Vec<[f32; 4]> = Vec::new();
        for w in pts2.windows(2) {
            let (a, b) = (orient(w[0]), orient(w[1]));
            let r = [
                (a[0].min(b[0]) - hw).max(0.0),
                (a[1].min(b[1]) - hw).max(0.0),
                (a[0].max(b[0]) + hw).min(e),
                (a[1].max(b[1]) + hw).min(e),
            ];
            ribbons.push(r);
        }
        // Slightly above the ground so road colors win the nearest-surface lookup.
        let lift = 0.02 * q;
        for &r in &ribbons {
            self.push(
                PartKind::Road,
                [r[0], r[1], 0.0],
                [r[2], r[3], 0.0],
                TriangleMesh::quad_z([r[0], r[1]], [r[2], r[3]], lift),
            );
        }
        self.layout.polylines.push(Polyline {
            points: pts2.iter().map(|&p| orient(p)).map(|o| [o[0], o[1], 0.0]).collect(),
            class: 0,
            extrude: Extrude::Ground,
        });

        let gap = 2.0 * q;
        let mut placed: Vec<[f32; 4]> = Vec::new();
        let n = self.count(self.cfg.vehicles);
        let mut attempts = 0;
        while placed.len() < n && attempts < 400 {
            attempts += 1;
            let r = ribbons[self.rng.random_range(0..ribbons.len())];
            let along_x = (r[2] - r[0]) >= (r[3] - r[1]);
            let len = self.uniform(0.09 * e, 0.15 * e);
            let wid = self.uniform(0.05 * e, 0.0625 * e).min(r[3] - r[1]).min(r[2] - r[0]);
            let h = self.uniform(0.045 * e, 0.0625 * e);
            let (sx, sy) = if along_x { (len, wid) } else { (wid, len) };
            let px = self.uniform(r[0], r[2] - sx);
            let py = self.uniform(r[1], r[3] - sy);
            let fp = [px, py, px + sx, py + sy];
            let on_road = fp[0] >= r[0] && fp[1] >= r[1] && fp[2] <= r[2] && fp[3] <= r[3];
            if !on_road || placed.iter().any(|o| overlaps(o, &fp, gap)) {
                continue;
            }
            placed.push(fp);
            self.push_box(PartKind::Vehicle, [fp[0], fp[1], 0.0], [fp[2], fp[3], h]);
        }

        let n = self.count(self.cfg.buildings);
        let mut houses: Vec<[f32; 4]> = Vec::new();
        let margin = 1.0 / 32.0 * e;
        let top = self.cfg.world_max()[2] - 2.0 * self.cfg.hierarchy.levels[0].voxel_size;
        attempts = 0;
        while houses.len() < n && attempts < 400 {
            attempts += 1;
            let sx = self.uniform(0.125 * e, 0.3 * e);
            let sy = self.uniform(0.125 * e, 0.3 * e);
            let h = self.uniform(0.125 * e, 0.5 * e).min(top);
            let px = self.uniform(margin, e - margin - sx);
            let py = self.uniform(margin, e - margin - sy);
            let fp = [px, py, px + sx, py + sy];
            let inside = fp[0] >= margin && fp[1] >= margin && fp[2] <= e - margin && fp[3] <= e - margin;
            if !inside
                || ribbons.iter().any(|o| overlaps(o, &fp, margin))
                || houses.iter().any(|o| overlaps(o, &fp, margin))
            {
                continue;
            }
            houses.push(fp);
            self.push_box(PartKind::Building, [fp[0], fp[1], 0.0], [fp[2], fp[3], h]);
        }
    }
}

/// Footprints `[x0, y0, x1, y1]` closer than `gap`.
fn overlaps(a: &[f32; 4], b: &[f32; 4], gap: f32) -> bool {
    a[0] < b[2] + gap && b[0] < a[2] + gap && a[1] < b[3] + gap && b[1] < a[3] + gap
}

/// Deterministic scene for `seed`; the config's own seed is not consulted.
pub fn gen_scene(cfg: &ToyWorldConfig, seed: u64) -> Result<ToyScene> {
    cfg.validate()?;
    let mut rng = rng_from(seed);
    let lighting = cfg.lighting.unwrap_or_else(|| {
        if rng.random_bool(0.5) {
            Lighting::Day
        } else {
            Lighting::Night
        }
    });
    let j = cfg.palettes.jitter;
    let scene_offset = [0; 3].map(|_| if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 });
    let mut b = Builder {
        cfg,
        rng,
        lighting,
        scene_offset,
        parts: Vec::new(),
        layout: VectorLayout::empty(LAYOUT_CLASSES),
    };
    match cfg.domain {
        Domain::Rooms => b.rooms(),
        Domain::Streets => b.streets(),
    }
    Ok(ToyScene {
        domain: cfg.domain,
        lighting,
        parts: b.parts,
        layout: b.layout,
        attrs: vec![cfg.domain.name().to_string(), lighting.name().to_string()],
    })
}
