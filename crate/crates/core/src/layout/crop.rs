use super::{Extrude, LayoutBox, Polyline, VectorLayout};
use crate::volume::{GridSpec, Vec3};

/// Axis-aligned world-space box in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldBox {
    pub min: Vec3,
    pub max: Vec3,
}

impl WorldBox {
    pub fn of_grid(spec: &GridSpec) -> Self {
        WorldBox {
            min: spec.world_min(),
            max: spec.world_max(),
        }
    }

    pub fn dilate(&self, r: f32) -> Self {
        WorldBox {
            min: self.min.map(|v| v - r),
            max: self.max.map(|v| v + r),
        }
    }
}

/// Liang-Barsky parameter interval of segment `a -> b` inside the box along the first `axes` axes.
fn clip_interval(a: Vec3, b: Vec3, bx: &WorldBox, axes: usize) -> Option<(f32, f32)> {
    let (mut t0, mut t1) = (0.0f32, 1.0f32);
    for i in 0..axes {
        let d = b[i] - a[i];
        if d == 0.0 {
            if a[i] < bx.min[i] || a[i] > bx.max[i] {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((bx.min[i] - a[i]) / d, (bx.max[i] - a[i]) / d);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return None;
        }
    }
    Some((t0, t1))
}

/// Point at parameter `t`, snapped onto any box face it was clipped against.
fn clip_point(a: Vec3, b: Vec3, t: f32, bx: &WorldBox, axes: usize) -> Vec3 {
    if t == 0.0 {
        return a;
    }
    if t == 1.0 {
        return b;
    }
    let mut p = [0.0; 3];
    for i in 0..3 {
        p[i] = a[i] + t * (b[i] - a[i]);
    }
    for i in 0..axes {
        let d = b[i] - a[i];
        if d != 0.0 {
            if (bx.min[i] - a[i]) / d == t {
                p[i] = bx.min[i];
            } else if (bx.max[i] - a[i]) / d == t {
                p[i] = bx.max[i];
            }
            p[i] = p[i].clamp(bx.min[i], bx.max[i]);
        }
    }
    p
}

/// Restricts `layout` to `world_box`: segments are split at box faces and boxes intersected.
///
/// Extruded polylines are clipped in the ground plane only.
pub fn crop_layout(layout: &VectorLayout, world_box: &WorldBox) -> VectorLayout {
    let mut out = VectorLayout::empty(layout.classes);
    for line in &layout.polylines {
        let axes = if line.extrude == Extrude::None { 3 } else { 2 };
        let mut run: Vec<Vec3> = Vec::new();
        let flush = |run: &mut Vec<Vec3>, out: &mut VectorLayout| {
            if run.len() >= 2 {
                out.polylines.push(Polyline {
                    points: std::mem::take(run),
                    class: line.class,
                    extrude: line.extrude,
                });
            }
            run.clear();
        };
        for w in line.points.windows(2) {
            let (a, b) = (w[0], w[1]);
            match clip_interval(a, b, world_box, axes) {
                Some((t0, t1)) if t0 < t1 => {
                    let p = clip_point(a, b, t0, world_box, axes);
                    let q = clip_point(a, b, t1, world_box, axes);
                    if t0 > 0.0 || run.last() != Some(&p) {
                        flush(&mut run, &mut out);
                        run.push(p);
                    }
                    run.push(q);
                    if t1 < 1.0 {
                        flush(&mut run, &mut out);
                    }
                }
                _ => flush(&mut run, &mut out),
            }
        }
        flush(&mut run, &mut out);
    }
    for b in &layout.boxes {
        let mut min = [0.0; 3];
        let mut max = [0.0; 3];
        for i in 0..3 {
            min[i] = b.min[i].max(world_box.min[i]);
            max[i] = b.max[i].min(world_box.max[i]);
        }
        if (0..3).all(|i| min[i] < max[i]) {
            out.boxes.push(LayoutBox { min, max, class: b.class });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box() -> WorldBox {
        WorldBox {
            min: [0.0; 3],
            max: [1.0; 3],
        }
    }

    fn single(points: Vec<Vec3>, extrude: Extrude) -> VectorLayout {
        let mut l = VectorLayout::empty(1);
        l.polylines.push(Polyline { points, class: 0, extrude });
        l
    }

    #[test]
    fn inside_segment_unchanged() {
        let l = single(vec![[0.2, 0.2, 0.2], [0.7, 0.4, 0.9]], Extrude::None);
        assert_eq!(crop_layout(&l, &unit_box()), l);
    }

    #[test]
    fn crossing_segment_ends_on_face() {
        let l = single(vec![[0.3, 0.5, 0.5], [1.7, 0.1, 0.5]], Extrude::None);
        let c = crop_layout(&l, &unit_box());
        assert_eq!(c.polylines.len(), 1);
        let p = &c.polylines[0].points;
        assert_eq!(p[0], [0.3, 0.5, 0.5]);
        assert_eq!(p[1][0], 1.0);
        assert!((p[1][1] - (0.5 - 0.4 * 0.7 / 1.4)).abs() < 1e-6);
    }

    #[test]
    fn exit_and_reenter_splits() {
        let l = single(
            vec![[0.5, 0.5, 0.0], [1.5, 0.5, 0.0], [1.5, 0.8, 0.0], [0.5, 0.8, 0.0]],
            Extrude::Wall,
        );
        let c = crop_layout(&l, &unit_box());
        assert_eq!(c.polylines.len(), 2);
        assert_eq!(c.polylines[0].points, vec![[0.5, 0.5, 0.0], [1.0, 0.5, 0.0]]);
        assert_eq!(c.polylines[1].points, vec![[1.0, 0.8, 0.0], [0.5, 0.8, 0.0]]);
    }

    #[test]
    fn wall_ignores_height() {
        let l = single(vec![[0.2, 0.2, 5.0], [0.8, 0.2, 5.0]], Extrude::Wall);
        assert_eq!(crop_layout(&l, &unit_box()).polylines.len(), 1);
        let n = single(vec![[0.2, 0.2, 5.0], [0.8, 0.2, 5.0]], Extrude::None);
        assert!(crop_layout(&n, &unit_box()).polylines.is_empty());
    }

    #[test]
    fn box_intersection() {
        let mut l = VectorLayout::empty(2);
        l.boxes.push(LayoutBox {
            min: [0.5, -1.0, 0.25],
            max: [2.0, 0.5, 0.75],
            class: 1,
        });
        l.boxes.push(LayoutBox {
            min: [2.0; 3],
            max: [3.0; 3],
            class: 0,
        });
        let c = crop_layout(&l, &unit_box());
        assert_eq!(
            c.boxes,
            vec![LayoutBox {
                min: [0.5, 0.0, 0.25],
                max: [1.0, 0.5, 0.75],
                class: 1
            }]
        );
    }
}
