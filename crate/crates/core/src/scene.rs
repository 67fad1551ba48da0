//! Scene records and the line-oriented dataset file format.
//!
//! A dataset file holds one JSON object per line:
//!
//! ```text
//! {"scene_id":"s0","dt":0.1,"entities":[{"id":0,"class":"human","class_label":"human","features":[[...54 numbers...], ...]}],"switch_labels":{"0":[0,0,1,...]}}
//! ```
//!
//! `features` is step-major: one flattened coordinate list per timestep.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{EntityClass, EntityFeatures};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntity {
    pub id: usize,
    pub class: EntityClass,
    pub class_label: String,
    pub features: Vec<Vec<f64>>,
}

impl SceneEntity {
    pub fn at(&self, step: usize) -> Result<EntityFeatures> {
        EntityFeatures::from_flat(self.class, self.class_label.clone(), &self.features[step])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub scene_id: String,
    pub dt: f64,
    pub entities: Vec<SceneEntity>,
    pub switch_labels: BTreeMap<usize, Vec<u8>>,
}

impl Scene {
    pub fn num_steps(&self) -> usize {
        self.entities.first().map_or(0, |e| e.features.len())
    }

    pub fn humans(&self) -> impl Iterator<Item = &SceneEntity> {
        self.entities.iter().filter(|e| e.class == EntityClass::Human)
    }

    pub fn entity(&self, id: usize) -> Option<&SceneEntity> {
        self.entities.iter().find(|e| e.id == id)
    }

    /// True when any human is labeled as interacting at any step.
    pub fn has_interaction(&self) -> bool {
        self.switch_labels.values().flatten().any(|&b| b == 1)
    }

    /// Checks structural invariants; the error names the offending field.
    pub fn validate(&self) -> std::result::Result<(), (String, String)> {
        let fail = |field: &str, msg: String| Err((field.to_string(), msg));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return fail("dt", format!("must be positive, got {}", self.dt));
        }
        if self.entities.is_empty() {
            return fail("entities", "scene has no entities".into());
        }
        let steps = self.num_steps();
        if steps == 0 {
            return fail("entities", "entities have no timesteps".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entities {
            if !seen.insert(e.id) {
                return fail("entities.id", format!("duplicate entity id {}", e.id));
            }
            if e.features.len() != steps {
                return fail(
                    "entities.features",
                    format!("entity {} has {} steps, expected {steps}", e.id, e.features.len()),
                );
            }
            let dim = e.class.feature_dim();
            for (t, f) in e.features.iter().enumerate() {
                if f.len() != dim {
                    return fail(
                        "entities.features",
                        format!("entity {} step {t}: {} coordinates, expected {dim}", e.id, f.len()),
                    );
                }
                if f.iter().any(|v| !v.is_finite()) {
                    return fail("entities.features", format!("entity {} step {t}: non-finite coordinate", e.id));
                }
            }
        }
        for (id, bits) in &self.switch_labels {
            match self.entity(*id) {
                None => return fail("switch_labels", format!("label for unknown entity {id}")),
                Some(e) if e.class != EntityClass::Human => {
                    return fail("switch_labels", format!("entity {id} is not a human"))
                }
                _ => {}
            }
            if bits.len() != steps {
                return fail(
                    "switch_labels",
                    format!("entity {id} has {} labels, expected {steps}", bits.len()),
                );
            }
            if bits.iter().any(|&b| b > 1) {
                return fail("switch_labels", format!("entity {id}: labels must be 0 or 1"));
            }
        }
        Ok(())
    }

    pub fn check(&self) -> Result<()> {
        self.validate().map_err(|(field, msg)| Error::Scene {
            scene: format!("{} ({field})", self.scene_id),
            msg,
        })
    }
}

/// Entities of a scene in ascending id order. Model code addresses
/// entities by their position in this list.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub ids: Vec<usize>,
    pub classes: Vec<EntityClass>,
    pub labels: Vec<String>,
    /// Position of each entity inside `Scene::entities`.
    pub source: Vec<usize>,
}

impl Layout {
    pub fn from_scene(scene: &Scene) -> Self {
        let mut order: Vec<usize> = (0..scene.entities.len()).collect();
        order.sort_by_key(|&i| scene.entities[i].id);
        Self {
            ids: order.iter().map(|&i| scene.entities[i].id).collect(),
            classes: order.iter().map(|&i| scene.entities[i].class).collect(),
            labels: order.iter().map(|&i| scene.entities[i].class_label.clone()).collect(),
            source: order,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: usize) -> Result<usize> {
        self.ids.iter().position(|&x| x == id).ok_or(Error::UnknownEntity(id))
    }

    /// Positions of human entities, ascending.
    pub fn humans(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.classes[i] == EntityClass::Human).collect()
    }

    /// Ground-truth flattened features of every entity at `step`.
    pub fn features_at<'a>(&self, scene: &'a Scene, step: usize) -> Vec<&'a [f64]> {
        self.source.iter().map(|&s| scene.entities[s].features[step].as_slice()).collect()
    }
}

/// Writes one scene per line.
pub fn write_dataset(scenes: &[Scene], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in scenes {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Extracts the field name from a serde error such as
/// "missing field `switch_labels`".
fn field_of(msg: &str) -> String {
    msg.split('`').nth(1).unwrap_or("record").to_string()
}

/// Parses one dataset line. `line` is 1-based and only used in errors.
pub fn parse_scene_line(text: &str, line: usize) -> Result<Scene> {
    let scene: Scene = serde_json::from_str(text).map_err(|e| {
        let msg = e.to_string();
        Error::Parse {
            line,
            field: field_of(&msg),
            msg,
        }
    })?;
    scene
        .validate()
        .map_err(|(field, msg)| Error::Parse { line, field, msg })?;
    Ok(scene)
}

/// Reads a dataset file. Blank lines are skipped; an empty file is an
/// empty dataset.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Scene>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_scene_line(&line, i + 1)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_scene() -> Scene {
        Scene {
            scene_id: "tiny".into(),
            dt: 0.1,
            entities: vec![
                SceneEntity {
                    id: 0,
                    class: EntityClass::Human,
                    class_label: "human".into(),
                    features: vec![vec![1.0; 54]; 2],
                },
                SceneEntity {
                    id: 3,
                    class: EntityClass::Object,
                    class_label: "box".into(),
                    features: vec![vec![0.5; 24]; 2],
                },
            ],
            switch_labels: BTreeMap::from([(0, vec![0, 1])]),
        }
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        fs::write(&p, "").unwrap();
        assert!(read_dataset(&p).unwrap().is_empty());
    }

    #[test]
    fn missing_switch_labels_is_reported_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        let good = serde_json::to_string(&tiny_scene()).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&good).unwrap();
        v.as_object_mut().unwrap().remove("switch_labels");
        fs::write(&p, format!("{good}\n{v}\n")).unwrap();
        match read_dataset(&p) {
            Err(Error::Parse { line, field, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "switch_labels");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn labels_on_objects_rejected() {
        let mut s = tiny_scene();
        s.switch_labels.insert(3, vec![0, 0]);
        let text = serde_json::to_string(&s).unwrap();
        match parse_scene_line(&text, 7) {
            Err(Error::Parse { line: 7, field, .. }) => assert_eq!(field, "switch_labels"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_feature_width_rejected() {
        let mut s = tiny_scene();
        s.entities[1].features[1].pop();
        let text = serde_json::to_string(&s).unwrap();
        match parse_scene_line(&text, 1) {
            Err(Error::Parse { field, .. }) => assert_eq!(field, "entities.features"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn round_trip_single() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.jsonl");
        write_dataset(&[tiny_scene()], &p).unwrap();
        assert_eq!(read_dataset(&p).unwrap(), vec![tiny_scene()]);
    }
}
