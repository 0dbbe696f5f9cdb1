//! Vectorized scene layouts and discrete scene attributes, rasterized on
//! demand into per-level conditioning volumes.

mod crop;
mod manifest;
mod voxelize;

pub use crop::{crop_layout, WorldBox};
pub use manifest::{parse_manifest, read_manifest, write_manifest, LayoutManifest};
pub(crate) use voxelize::ground_layer;
pub use voxelize::voxelize_layout;

use crate::error::{Error, Result};
use crate::volume::Vec3;

/// How a polyline occupies space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extrude {
    /// 2D boundary extruded over the full grid height.
    Wall,
    /// 2D path painted into the voxel layer containing `z = 0`.
    Ground,
    /// True 3D polyline.
    None,
}

impl Extrude {
    pub fn keyword(self) -> &'static str {
        match self {
            Extrude::Wall => "wall",
            Extrude::Ground => "ground",
            Extrude::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    /// Vertices in meters; `z` is ignored for extruded polylines.
    pub points: Vec<Vec3>,
    pub class: usize,
    pub extrude: Extrude,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayoutBox {
    pub min: Vec3,
    pub max: Vec3,
    pub class: usize,
}

/// Resolution-independent structural control: polylines and boxes over `classes` semantic classes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VectorLayout {
    pub polylines: Vec<Polyline>,
    pub boxes: Vec<LayoutBox>,
    pub classes: usize,
}

impl VectorLayout {
    pub fn empty(classes: usize) -> Self {
        VectorLayout {
            polylines: Vec::new(),
            boxes: Vec::new(),
            classes,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.polylines.is_empty() && self.boxes.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::Validation("layout needs at least one class".into()));
        }
        for (i, p) in self.polylines.iter().enumerate() {
            if p.class >= self.classes {
                return Err(Error::Validation(format!(
                    "polyline {i} has class {} but K = {}",
                    p.class, self.classes
                )));
            }
            if p.points.len() < 2 {
                return Err(Error::Validation(format!("polyline {i} has fewer than 2 points")));
            }
            if p.points.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("polyline {i} has a non-finite point")));
            }
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if b.class >= self.classes {
                return Err(Error::Validation(format!(
                    "box {i} has class {} but K = {}",
                    b.class, self.classes
                )));
            }
            if (0..3).any(|a| !(b.min[a] < b.max[a])) {
                return Err(Error::Validation(format!("box {i} has min >= max")));
            }
        }
        Ok(())
    }
}

/// Ordered vocabulary of discrete scene attribute tags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeVocab {
    names: Vec<String>,
}

impl AttributeVocab {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Self {
        AttributeVocab {
            names: names.into_iter().map(Into::into).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Indices of the active tags of one scene.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SceneAttributes {
    pub tags: Vec<usize>,
}

impl SceneAttributes {
    pub fn new(tags: Vec<usize>) -> Self {
        SceneAttributes { tags }
    }

    pub fn from_names<S: AsRef<str>>(vocab: &AttributeVocab, names: &[S]) -> Result<Self> {
        names
            .iter()
            .map(|n| {
                vocab
                    .index_of(n.as_ref())
                    .ok_or_else(|| Error::Validation(format!("unknown attribute tag {:?}", n.as_ref())))
            })
            .collect::<Result<Vec<_>>>()
            .map(SceneAttributes::new)
    }

    pub fn names<'a>(&self, vocab: &'a AttributeVocab) -> Vec<&'a str> {
        self.tags.iter().filter_map(|&t| vocab.name(t)).collect()
    }
}

/// Rasterization thickness in voxels for a line `width` meters wide; never below one voxel.
pub fn line_thickness(width: f32, voxel_size: f32) -> usize {
    let t = (width / voxel_size).round();
    if t.is_finite() && t >= 1.0 {
        t as usize
    } else {
        1
    }
}

/// Multi-hot vector of length `vocab_size`; the learned projection lives in the network.
pub fn encode_attributes(attrs: &SceneAttributes, vocab_size: usize) -> Result<Vec<f32>> {
    let mut out = vec![0.0; vocab_size];
    for &t in &attrs.tags {
        if t >= vocab_size {
            return Err(Error::Validation(format!(
                "attribute index {t} outside vocabulary of {vocab_size}"
            )));
        }
        out[t] = 1.0;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attribute_encoding() {
        let enc = |tags: Vec<usize>| encode_attributes(&SceneAttributes::new(tags), 4).unwrap();
        assert_eq!(enc(vec![1]), vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(enc(vec![]), vec![0.0; 4]);
        assert_eq!(enc(vec![0, 3]), vec![1.0, 0.0, 0.0, 1.0]);
        assert!(encode_attributes(&SceneAttributes::new(vec![4]), 4).is_err());
    }

    #[test]
    fn vocab_lookup() {
        let v = AttributeVocab::new(["rooms", "streets", "day", "night"]);
        let a = SceneAttributes::from_names(&v, &["streets", "night"]).unwrap();
        assert_eq!(a.tags, vec![1, 3]);
        assert_eq!(a.names(&v), vec!["streets", "night"]);
        assert!(SceneAttributes::from_names(&v, &["dusk"]).is_err());
    }

    #[test]
    fn validation() {
        let mut l = VectorLayout::empty(2);
        l.polylines.push(Polyline {
            points: vec![[0.0; 3], [1.0, 0.0, 0.0]],
            class: 2,
            extrude: Extrude::Wall,
        });
        assert!(l.validate().is_err());
        l.polylines[0].class = 1;
        assert!(l.validate().is_ok());
        l.polylines[0].points.pop();
        assert!(l.validate().is_err());
        let mut b = VectorLayout::empty(1);
        b.boxes.push(LayoutBox {
            min: [0.0; 3],
            max: [1.0, 0.0, 1.0],
            class: 0,
        });
        assert!(b.validate().is_err());
    }
}
