//! Entity geometry: centroids, egocentric translation and center-leaf
//! distances. All coordinates are millimeters.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const HUMAN_JOINTS: usize = 18;
pub const BOX_CORNERS: usize = 8;

/// Flattened feature width of a human (18 joints x 3).
pub const HUMAN_DIM: usize = HUMAN_JOINTS * 3;
/// Flattened feature width of an object (8 box corners x 3).
pub const OBJECT_DIM: usize = BOX_CORNERS * 3;

pub type Point3 = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityClass {
    Human,
    Object,
}

impl EntityClass {
    pub fn num_points(self) -> usize {
        match self {
            EntityClass::Human => HUMAN_JOINTS,
            EntityClass::Object => BOX_CORNERS,
        }
    }

    pub fn feature_dim(self) -> usize {
        self.num_points() * 3
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EntityClass::Human => "human",
            EntityClass::Object => "object",
        }
    }
}

/// Geometric features of one entity at one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityFeatures {
    pub class: EntityClass,
    pub class_label: String,
    pub points: Vec<Point3>,
}

impl EntityFeatures {
    pub fn new(class: EntityClass, class_label: impl Into<String>, points: Vec<Point3>) -> Result<Self> {
        if points.len() != class.num_points() {
            return Err(Error::invalid(
                "entity_features",
                format!("{} needs {} points, got {}", class.as_str(), class.num_points(), points.len()),
            ));
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite { op: "entity_features" });
        }
        Ok(Self {
            class,
            class_label: class_label.into(),
            points,
        })
    }

    pub fn from_flat(class: EntityClass, class_label: impl Into<String>, flat: &[f64]) -> Result<Self> {
        if flat.len() != class.feature_dim() {
            return Err(Error::invalid(
                "entity_features",
                format!("{} needs {} coordinates, got {}", class.as_str(), class.feature_dim(), flat.len()),
            ));
        }
        Self::new(class, class_label, flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }
}

/// Arithmetic mean of the points.
pub fn centroid(f: &EntityFeatures) -> Point3 {
    centroid_of(&f.points)
}

fn centroid_of(points: &[Point3]) -> Point3 {
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    c.map(|v| v / n)
}

/// Centroid of a flattened `x, y, z, x, y, z, ...` coordinate list.
pub fn centroid_flat(flat: &[f64]) -> Point3 {
    let n = (flat.len() / 3) as f64;
    let mut c = [0.0; 3];
    for p in flat.chunks_exact(3) {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    c.map(|v| v / n)
}

fn shifted(x: &EntityFeatures, by: Point3, sign: f64) -> EntityFeatures {
    EntityFeatures {
        class: x.class,
        class_label: x.class_label.clone(),
        points: x
            .points
            .iter()
            .map(|p| [p[0] + sign * by[0], p[1] + sign * by[1], p[2] + sign * by[2]])
            .collect(),
    }
}

fn require_human(center: &EntityFeatures) -> Result<()> {
    if center.class != EntityClass::Human {
        return Err(Error::invalid(
            "ego_transform",
            format!("center must be a human, got {}", center.class_label),
        ));
    }
    Ok(())
}

/// Translates `x` into the egocentric frame of `center` (origin at the
/// center's centroid).
pub fn ego_transform(x: &EntityFeatures, center: &EntityFeatures) -> Result<EntityFeatures> {
    require_human(center)?;
    Ok(shifted(x, centroid(center), -1.0))
}

/// Inverse of [`ego_transform`] for the same center.
pub fn ego_inverse(x_bar: &EntityFeatures, center: &EntityFeatures) -> Result<EntityFeatures> {
    require_human(center)?;
    Ok(shifted(x_bar, centroid(center), 1.0))
}

pub fn point_distance(a: Point3, b: Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Euclidean distance between the centroids of `center` and `leaf`.
pub fn center_leaf_distance(center: &EntityFeatures, leaf: &EntityFeatures) -> f64 {
    point_distance(centroid(center), centroid(leaf))
}

/// Differentiable centroid and egocentric shifts on a tape. Feature
/// vectors are flat millimeter coordinates of a human or object.
#[derive(Clone, Copy, Debug)]
pub struct TapeGeometry {
    avg_human: Var,
    avg_object: Var,
    tile_human: Var,
    tile_object: Var,
}

fn averaging_matrix(points: usize) -> Tensor {
    let mut v = vec![0.0; 3 * points * 3];
    for k in 0..3 {
        for p in 0..points {
            v[k * points * 3 + p * 3 + k] = 1.0 / points as f64;
        }
    }
    Tensor::matrix(3, points * 3, v).expect("static shape")
}

fn tiling_matrix(points: usize) -> Tensor {
    let mut v = vec![0.0; points * 3 * 3];
    for p in 0..points {
        for k in 0..3 {
            v[(p * 3 + k) * 3 + k] = 1.0;
        }
    }
    Tensor::matrix(points * 3, 3, v).expect("static shape")
}

impl TapeGeometry {
    pub fn new(tape: &mut Tape) -> Result<Self> {
        Ok(Self {
            avg_human: tape.constant(&averaging_matrix(HUMAN_JOINTS))?,
            avg_object: tape.constant(&averaging_matrix(BOX_CORNERS))?,
            tile_human: tape.constant(&tiling_matrix(HUMAN_JOINTS))?,
            tile_object: tape.constant(&tiling_matrix(BOX_CORNERS))?,
        })
    }

    pub fn centroid(&self, tape: &mut Tape, class: EntityClass, x: Var) -> Result<Var> {
        let m = match class {
            EntityClass::Human => self.avg_human,
            EntityClass::Object => self.avg_object,
        };
        tape.matmul(m, x)
    }

    fn tile(&self, tape: &mut Tape, class: EntityClass, c: Var) -> Result<Var> {
        let m = match class {
            EntityClass::Human => self.tile_human,
            EntityClass::Object => self.tile_object,
        };
        tape.matmul(m, c)
    }

    /// `x - centroid(center)` broadcast over every point of `x`.
    pub fn ego(&self, tape: &mut Tape, class: EntityClass, x: Var, center_centroid: Var) -> Result<Var> {
        let t = self.tile(tape, class, center_centroid)?;
        tape.sub(x, t)
    }

    pub fn ego_inverse(&self, tape: &mut Tape, class: EntityClass, x_bar: Var, center_centroid: Var) -> Result<Var> {
        let t = self.tile(tape, class, center_centroid)?;
        tape.add(x_bar, t)
    }

    /// Differentiable centroid distance, smoothed by `eps` mm^2 under the
    /// square root so the gradient stays finite at coincidence.
    pub fn distance(&self, tape: &mut Tape, a: Var, b: Var, eps: f64) -> Result<Var> {
        let d = tape.sub(a, b)?;
        let sq = tape.squared_l2(d)?;
        let e = tape.constant(&Tensor::scalar(eps))?;
        let s = tape.add(sq, e)?;
        tape.sqrt(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn human_at(offset: Point3) -> EntityFeatures {
        let mut pts = vec![[0.0; 3]; HUMAN_JOINTS];
        for (i, p) in pts.iter_mut().enumerate() {
            *p = [offset[0] + i as f64, offset[1] - i as f64 * 0.5, offset[2] + (i % 3) as f64];
        }
        let c = centroid_of(&pts);
        let pts = pts
            .iter()
            .map(|p| [p[0] - c[0] + offset[0], p[1] - c[1] + offset[1], p[2] - c[2] + offset[2]])
            .collect();
        EntityFeatures::new(EntityClass::Human, "human", pts).unwrap()
    }

    fn unit_cube() -> EntityFeatures {
        let mut pts = Vec::new();
        for x in [0.0, 1.0] {
            for y in [0.0, 1.0] {
                for z in [0.0, 1.0] {
                    pts.push([x, y, z]);
                }
            }
        }
        EntityFeatures::new(EntityClass::Object, "box", pts).unwrap()
    }

    #[test]
    fn centroid_examples() {
        assert_eq!(centroid_of(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]), [1.0, 0.0, 0.0]);
        assert_eq!(centroid_of(&[[5.0, -1.0, 2.0]]), [5.0, -1.0, 2.0]);
        assert_eq!(centroid(&unit_cube()), [0.5, 0.5, 0.5]);
    }

    #[test]
    fn point_count_is_enforced() {
        assert!(EntityFeatures::new(EntityClass::Human, "human", vec![[0.0; 3]; 8]).is_err());
        assert!(EntityFeatures::new(EntityClass::Object, "box", vec![[0.0; 3]; 18]).is_err());
        assert!(EntityFeatures::new(EntityClass::Object, "box", vec![[f64::NAN, 0.0, 0.0]; 8]).is_err());
    }

    #[test]
    fn ego_examples() {
        let h = human_at([1.0, 0.0, 0.0]);
        let own = ego_transform(&h, &h).unwrap();
        for (c, e) in centroid(&own).iter().zip([0.0; 3]) {
            assert_abs_diff_eq!(*c, e, epsilon = 1e-12);
        }

        let mut leaf = unit_cube();
        leaf.points[0] = [3.0, 1.0, 0.0];
        let e = ego_transform(&leaf, &h).unwrap();
        for (a, b) in e.points[0].iter().zip([2.0, 1.0, 0.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }

        let center = human_at([1.0, 2.0, 3.0]);
        let mut zero = unit_cube();
        zero.points[0] = [0.0, 0.0, 0.0];
        let back = ego_inverse(&zero, &center).unwrap();
        for (a, b) in back.points[0].iter().zip([1.0, 2.0, 3.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn ego_requires_human_center() {
        let c = unit_cube();
        assert!(ego_transform(&c, &c).is_err());
        assert!(ego_inverse(&c, &c).is_err());
    }

    #[test]
    fn distance_examples() {
        let a = human_at([0.0, 0.0, 0.0]);
        let b = human_at([3.0, 4.0, 0.0]);
        assert_abs_diff_eq!(center_leaf_distance(&a, &b), 5.0, epsilon = 1e-12);
        assert_eq!(center_leaf_distance(&a, &a), 0.0);
    }

    #[test]
    fn tape_geometry_matches_plain_functions() {
        let h = human_at([10.0, -20.0, 900.0]);
        let cube = unit_cube();
        let mut t = Tape::new();
        let g = TapeGeometry::new(&mut t).unwrap();
        let hv = t.input(&h.flat()).unwrap();
        let cv = t.input(&cube.flat()).unwrap();
        let hc = g.centroid(&mut t, EntityClass::Human, hv).unwrap();
        for (a, b) in t.value(hc).iter().zip(centroid(&h)) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-9);
        }
        let e = g.ego(&mut t, EntityClass::Object, cv, hc).unwrap();
        let expected = ego_transform(&cube, &h).unwrap().flat();
        for (a, b) in t.value(e).iter().zip(&expected) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-9);
        }
    }

    fn arb_point() -> impl Strategy<Value = Point3> {
        (-5000.0..5000.0f64, -5000.0..5000.0f64, -5000.0..5000.0f64).prop_map(|(x, y, z)| [x, y, z])
    }

    proptest! {
        #[test]
        fn ego_round_trip(pts in prop::collection::vec(arb_point(), BOX_CORNERS), hp in prop::collection::vec(arb_point(), HUMAN_JOINTS)) {
            let x = EntityFeatures::new(EntityClass::Object, "box", pts).unwrap();
            let c = EntityFeatures::new(EntityClass::Human, "human", hp).unwrap();
            let back = ego_inverse(&ego_transform(&x, &c).unwrap(), &c).unwrap();
            for (a, b) in back.points.iter().flatten().zip(x.points.iter().flatten()) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0) * 8.0);
            }
        }

        #[test]
        fn ego_preserves_internal_distances(hp in prop::collection::vec(arb_point(), HUMAN_JOINTS), cp in prop::collection::vec(arb_point(), HUMAN_JOINTS)) {
            let x = EntityFeatures::new(EntityClass::Human, "human", hp).unwrap();
            let c = EntityFeatures::new(EntityClass::Human, "human", cp).unwrap();
            let e = ego_transform(&x, &c).unwrap();
            for i in 0..HUMAN_JOINTS {
                for j in 0..i {
                    let d0 = point_distance(x.points[i], x.points[j]);
                    let d1 = point_distance(e.points[i], e.points[j]);
                    prop_assert!((d0 - d1).abs() <= 1e-9);
                }
            }
        }

        #[test]
        fn distance_is_symmetric_nonnegative(a in prop::collection::vec(arb_point(), HUMAN_JOINTS), b in prop::collection::vec(arb_point(), BOX_CORNERS)) {
            let a = EntityFeatures::new(EntityClass::Human, "human", a).unwrap();
            let b = EntityFeatures::new(EntityClass::Object, "box", b).unwrap();
            let d1 = center_leaf_distance(&a, &b);
            prop_assert!(d1 >= 0.0);
            prop_assert_eq!(d1, center_leaf_distance(&b, &a));
        }
    }
}
