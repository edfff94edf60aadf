//! COCO person-keypoint documents, COCO results files and the on-disk
//! synthetic dataset format (JSON manifest plus little-endian f32 arrays).
//!
//! Every reader reports failures as [`Error::Parse`] with a location of the
//! form `<origin>: <json path>`.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::domain::{Keypoint, Pose, Scene, SkeletonSpec};
use crate::error::{Error, Result};
use crate::nms::Detection;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub file_name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// Flat `[x1, y1, v1, x2, ...]`.
    pub keypoints: Vec<f64>,
    /// `[x, y, w, h]`.
    pub bbox: Vec<f64>,
    pub area: f64,
    pub num_keypoints: u64,
    pub iscrowd: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supercategory: Option<String>,
    #[serde(default)]
    pub keypoints: Vec<String>,
    /// Limbs as 1-based joint index pairs.
    #[serde(default)]
    pub skeleton: Vec<[usize; 2]>,
}

/// The fields of a COCO person-keypoints file that posekit reads; other
/// top-level keys are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoKeypointsDoc {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// Ground truth of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct CocoImageGt {
    pub image: CocoImage,
    /// Non-crowd annotations, in file order.
    pub poses: Vec<Pose>,
    pub annotation_ids: Vec<u64>,
    /// Annotation areas, parallel to `poses`.
    pub areas: Vec<f64>,
    /// `iscrowd = 1` annotations, excluded from matching.
    pub crowd: Vec<Pose>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CocoDataset {
    pub skeleton: SkeletonSpec,
    /// In the order of the document's `images` list.
    pub images: Vec<CocoImageGt>,
    pub doc: CocoKeypointsDoc,
}

pub(crate) fn from_json<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let value: T = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let loc = if inner.is_syntax() || inner.is_eof() || path == "." {
            format!("{origin}: line {} column {}", inner.line(), inner.column())
        } else {
            format!("{origin}: {path}")
        };
        Error::parse(loc, inner.to_string())
    })?;
    Ok(value)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))
}

pub fn read_coco_keypoints(path: &Path) -> Result<CocoDataset> {
    parse_coco_keypoints(&read_text(path)?, &path.display().to_string())
}

/// Parses and validates a COCO person-keypoints document. `origin` names
/// the source in error locations.
pub fn parse_coco_keypoints(text: &str, origin: &str) -> Result<CocoDataset> {
    let doc: CocoKeypointsDoc = from_json(text, origin)?;
    let err = |loc: String, msg: String| Error::parse(format!("{origin}: {loc}"), msg);

    let mut joints: HashMap<u64, usize> = HashMap::new();
    let mut person: Option<&CocoCategory> = None;
    for (i, c) in doc.categories.iter().enumerate() {
        if joints.insert(c.id, c.keypoints.len()).is_some() {
            return Err(err(
                format!("categories[{i}].id"),
                format!("duplicate category id {}", c.id),
            ));
        }
        if c.keypoints.is_empty() {
            continue;
        }
        for (e, edge) in c.skeleton.iter().enumerate() {
            if edge.iter().any(|&j| j == 0 || j > c.keypoints.len()) {
                return Err(err(
                    format!("categories[{i}].skeleton[{e}]"),
                    format!("edge {edge:?} outside joints 1..={}", c.keypoints.len()),
                ));
            }
        }
        match person {
            Some(p) if p.keypoints.len() != c.keypoints.len() => {
                return Err(err(
                    format!("categories[{i}].keypoints"),
                    format!(
                        "{} joints, but an earlier category has {}",
                        c.keypoints.len(),
                        p.keypoints.len()
                    ),
                ))
            }
            Some(_) => {}
            None => person = Some(c),
        }
    }
    let Some(person) = person else {
        return Err(err(
            "categories".into(),
            "no category defines keypoints".into(),
        ));
    };
    let k = person.keypoints.len();

    let mut index: HashMap<u64, usize> = HashMap::new();
    for (i, im) in doc.images.iter().enumerate() {
        if index.insert(im.id, i).is_some() {
            return Err(err(
                format!("images[{i}].id"),
                format!("duplicate image id {}", im.id),
            ));
        }
        if im.width == 0 || im.height == 0 {
            return Err(err(
                format!("images[{i}]"),
                format!("empty image {}x{}", im.width, im.height),
            ));
        }
    }

    let mut groups: Vec<CocoImageGt> = doc
        .images
        .iter()
        .map(|im| CocoImageGt {
            image: im.clone(),
            poses: Vec::new(),
            annotation_ids: Vec::new(),
            areas: Vec::new(),
            crowd: Vec::new(),
        })
        .collect();
    let mut seen = HashSet::new();
    for (a, ann) in doc.annotations.iter().enumerate() {
        let at = |field: &str| format!("annotations[{a}].{field}");
        if !seen.insert(ann.id) {
            return Err(err(at("id"), format!("duplicate annotation id {}", ann.id)));
        }
        let Some(&img) = index.get(&ann.image_id) else {
            return Err(err(
                at("image_id"),
                format!("image_id {} matches no image", ann.image_id),
            ));
        };
        match joints.get(&ann.category_id) {
            Some(&n) if n == k => {}
            Some(_) => {
                return Err(err(
                    at("category_id"),
                    format!("category {} has no keypoints", ann.category_id),
                ))
            }
            None => {
                return Err(err(
                    at("category_id"),
                    format!("unknown category_id {}", ann.category_id),
                ))
            }
        }
        let n = ann.keypoints.len();
        if n != 3 * k {
            return Err(err(
                at("keypoints"),
                format!("keypoints length {n} \u{2260} {}", 3 * k),
            ));
        }
        let (w, h) = (
            groups[img].image.width as f64,
            groups[img].image.height as f64,
        );
        let mut kps = Vec::with_capacity(k);
        for (j, t) in ann.keypoints.chunks_exact(3).enumerate() {
            let v = t[2];
            if !(v == 0.0 || v == 1.0 || v == 2.0) {
                return Err(err(
                    format!("annotations[{a}].keypoints[{}]", 3 * j + 2),
                    format!("visibility {v} not in {{0, 1, 2}}"),
                ));
            }
            if v > 0.0 && !((0.0..w).contains(&t[0]) && (0.0..h).contains(&t[1])) {
                return Err(err(
                    format!("annotations[{a}].keypoints[{}]", 3 * j),
                    format!(
                        "joint {j} at ({}, {}) outside the {w}x{h} image",
                        t[0], t[1]
                    ),
                ));
            }
            kps.push(Keypoint::new(t[0], t[1], v as u8));
        }
        let visible = kps.iter().filter(|p| p.counts()).count() as u64;
        if ann.num_keypoints != visible {
            return Err(err(
                at("num_keypoints"),
                format!(
                    "num_keypoints {} but {visible} labelled joints",
                    ann.num_keypoints
                ),
            ));
        }
        if ann.bbox.len() != 4 {
            return Err(err(
                at("bbox"),
                format!("bbox has {} values, expected 4", ann.bbox.len()),
            ));
        }
        if ann.bbox[2] < 0.0 || ann.bbox[3] < 0.0 {
            return Err(err(
                at("bbox"),
                "bbox width and height must be non-negative".into(),
            ));
        }
        if ann.area < 0.0 {
            return Err(err(at("area"), format!("negative area {}", ann.area)));
        }
        let group = &mut groups[img];
        match ann.iscrowd {
            0 => {
                group.poses.push(Pose::new(kps));
                group.annotation_ids.push(ann.id);
                group.areas.push(ann.area);
            }
            1 => group.crowd.push(Pose::new(kps)),
            v => return Err(err(at("iscrowd"), format!("iscrowd {v} not in {{0, 1}}"))),
        }
    }

    let mut skeleton = SkeletonSpec::with_joints(k)?;
    skeleton.joint_names = person.keypoints.clone();
    skeleton.edges = person
        .skeleton
        .iter()
        .map(|e| (e[0] - 1, e[1] - 1))
        .collect();
    Ok(CocoDataset {
        skeleton,
        images: groups,
        doc,
    })
}

pub fn write_coco_keypoints(doc: &CocoKeypointsDoc, path: &Path) -> Result<()> {
    write_text(path, &to_json(doc)?)
}

/// One entry of a COCO results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CocoResult {
    pub image_id: u64,
    pub category_id: u64,
    pub keypoints: Vec<f64>,
    pub score: f64,
}

/// Visibility is written as 1 for every joint that counts and 0 otherwise.
pub fn results_entries(dets: &[(u64, Vec<Detection>)]) -> Vec<CocoResult> {
    dets.iter()
        .flat_map(|(image_id, ds)| {
            ds.iter().map(move |d| CocoResult {
                image_id: *image_id,
                category_id: 1,
                keypoints: d
                    .pose
                    .keypoints
                    .iter()
                    .flat_map(|k| [k.x, k.y, if k.counts() { 1.0 } else { 0.0 }])
                    .collect(),
                score: d.score,
            })
        })
        .collect()
}

pub fn write_results(dets: &[(u64, Vec<Detection>)], path: &Path) -> Result<()> {
    let entries = results_entries(dets);
    let text = if entries.is_empty() {
        "[]".to_string()
    } else {
        to_json(&entries)?
    };
    write_text(path, &text)
}

pub fn read_results(path: &Path) -> Result<Vec<(u64, Vec<Detection>)>> {
    parse_results(&read_text(path)?, &path.display().to_string())
}

/// Groups results by image id in order of first appearance.
pub fn parse_results(text: &str, origin: &str) -> Result<Vec<(u64, Vec<Detection>)>> {
    let entries: Vec<CocoResult> = from_json(text, origin)?;
    let mut out: Vec<(u64, Vec<Detection>)> = Vec::new();
    let mut slot: HashMap<u64, usize> = HashMap::new();
    for (i, e) in entries.into_iter().enumerate() {
        let err = |field: &str, msg: String| Error::parse(format!("{origin}: [{i}].{field}"), msg);
        if e.keypoints.is_empty() || e.keypoints.len() % 3 != 0 {
            return Err(err(
                "keypoints",
                format!(
                    "keypoints length {} is not a positive multiple of 3",
                    e.keypoints.len()
                ),
            ));
        }
        if !(0.0..=1.0).contains(&e.score) {
            return Err(err("score", format!("score {} outside [0, 1]", e.score)));
        }
        let mut kps = Vec::with_capacity(e.keypoints.len() / 3);
        for t in e.keypoints.chunks_exact(3) {
            if !(t[2] == 0.0 || t[2] == 1.0 || t[2] == 2.0) {
                return Err(err(
                    "keypoints",
                    format!("visibility {} not in {{0, 1, 2}}", t[2]),
                ));
            }
            kps.push(Keypoint::new(t[0], t[1], t[2] as u8));
        }
        let det = Detection::new(Pose::new(kps).with_score(e.score), e.score, 0);
        let idx = *slot.entry(e.image_id).or_insert_with(|| {
            out.push((e.image_id, Vec::new()));
            out.len() - 1
        });
        out[idx].1.push(det);
    }
    Ok(out)
}

pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    /// Raw little-endian f32 `C x H x W` image, relative to the manifest.
    pub file: String,
    pub crowd_index: f64,
    /// Per pose, `K` triples `[x, y, v]`.
    pub gt_poses: Vec<Vec<[f64; 3]>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub scenes: Vec<SceneEntry>,
}

/// Writes `manifest.json` and one `scene_NNNNN.f32` file per scene into
/// `dir`, creating it if needed. Image values are stored as f32.
pub fn write_dataset(scenes: &[Scene], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (c, h, w) = match scenes.first() {
        Some(s) => (s.image.shape()[0], s.height(), s.width()),
        None => (0, 0, 0),
    };
    let mut entries = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        if s.image.shape() != [c, h, w] {
            return Err(Error::Config(format!(
                "scene {i} has shape {:?}, expected {:?}",
                s.image.shape(),
                [c, h, w]
            )));
        }
        let file = format!("scene_{i:05}.f32");
        let bytes: Vec<u8> = s
            .image
            .data()
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        let path = dir.join(&file);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(SceneEntry {
            file,
            crowd_index: s.crowd_index,
            gt_poses: s
                .gt_poses
                .iter()
                .map(|p| p.keypoints.iter().map(|k| [k.x, k.y, k.v as f64]).collect())
                .collect(),
        });
    }
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        channels: c,
        height: h,
        width: w,
        scenes: entries,
    };
    write_text(&dir.join(MANIFEST_FILE), &to_json(&manifest)?)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let mpath = dir.join(MANIFEST_FILE);
    let origin = mpath.display().to_string();
    let m: DatasetManifest = from_json(&read_text(&mpath)?, &origin)?;
    if m.version != DATASET_VERSION {
        return Err(Error::parse(
            format!("{origin}: version"),
            format!("unsupported dataset version {}", m.version),
        ));
    }
    let n = m.channels * m.height * m.width;
    m.scenes
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let path = dir.join(&e.file);
            let bytes = std::fs::read(&path).map_err(|err| Error::io(&path, err))?;
            if bytes.len() != 4 * n {
                return Err(Error::parse(
                    format!("{origin}: scenes[{i}].file"),
                    format!("{} holds {} bytes, expected {}", e.file, bytes.len(), 4 * n),
                ));
            }
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            let mut gt_poses = Vec::with_capacity(e.gt_poses.len());
            for (p, kps) in e.gt_poses.iter().enumerate() {
                let mut out = Vec::with_capacity(kps.len());
                for (j, t) in kps.iter().enumerate() {
                    if !(t[2] == 0.0 || t[2] == 1.0 || t[2] == 2.0) {
                        return Err(Error::parse(
                            format!("{origin}: scenes[{i}].gt_poses[{p}][{j}]"),
                            format!("visibility {} not in {{0, 1, 2}}", t[2]),
                        ));
                    }
                    out.push(Keypoint::new(t[0], t[1], t[2] as u8));
                }
                gt_poses.push(Pose::new(out));
            }
            Ok(Scene {
                image: Tensor::new(vec![m.channels, m.height, m.width], data)?,
                gt_poses,
                crowd_index: e.crowd_index,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn minimal_doc(k: usize) -> String {
        let kps: Vec<String> = (0..k).map(|i| format!("\"j{i}\"")).collect();
        let vals: Vec<String> = (0..k)
            .map(|i| format!("{}, {}, 2", 10 + i, 20 + i))
            .collect();
        format!(
            r#"{{"images": [{{"id": 7, "width": 100, "height": 80, "file_name": "a.jpg"}}],
               "annotations": [{{"id": 1, "image_id": 7, "category_id": 1, "keypoints": [{}],
                 "bbox": [10, 20, {k}, {k}], "area": 100.5, "num_keypoints": {k}, "iscrowd": 0}}],
               "categories": [{{"id": 1, "name": "person", "keypoints": [{}], "skeleton": [[1, 2]]}}]}}"#,
            vals.join(", "),
            kps.join(", ")
        )
    }

    #[test]
    fn minimal_document() {
        let ds = parse_coco_keypoints(&minimal_doc(17), "doc").unwrap();
        assert_eq!(ds.skeleton.num_joints(), 17);
        assert_eq!(ds.images.len(), 1);
        assert_eq!(ds.images[0].poses.len(), 1);
        assert_eq!(ds.images[0].areas, vec![100.5]);
        assert_eq!(
            ds.images[0].poses[0].keypoints[3],
            Keypoint::new(13.0, 23.0, 2)
        );
        assert_eq!(ds.skeleton.edges, vec![(0, 1)]);
    }

    #[test]
    fn short_keypoint_list_is_located() {
        let text = minimal_doc(17).replacen("10, 20, 2, ", "10, 20, ", 1);
        let e = parse_coco_keypoints(&text, "doc").unwrap_err().to_string();
        assert!(e.contains("annotations[0].keypoints"), "{e}");
        let text = minimal_doc(17).replacen("10, 20, 2, 11, 21, 2, ", "10, 20, 2, 11, 21, ", 1);
        let e = parse_coco_keypoints(&text, "doc").unwrap_err().to_string();
        assert!(e.contains("keypoints length 50 \u{2260} 51"), "{e}");
    }

    #[test]
    fn groups_by_image() {
        let doc = CocoKeypointsDoc {
            images: (1..=2)
                .map(|id| CocoImage {
                    id,
                    width: 50,
                    height: 50,
                    file_name: format!("{id}.png"),
                })
                .collect(),
            annotations: [2u64, 1, 2]
                .iter()
                .enumerate()
                .map(|(i, &img)| CocoAnnotation {
                    id: i as u64,
                    image_id: img,
                    category_id: 3,
                    keypoints: vec![5.0, 5.0, 2.0, 0.0, 0.0, 0.0],
                    bbox: vec![5.0, 5.0, 0.0, 0.0],
                    area: 1.0,
                    num_keypoints: 1,
                    iscrowd: 0,
                })
                .collect(),
            categories: vec![CocoCategory {
                id: 3,
                name: "person".into(),
                supercategory: None,
                keypoints: vec!["a".into(), "b".into()],
                skeleton: vec![],
            }],
        };
        let ds = parse_coco_keypoints(&serde_json::to_string(&doc).unwrap(), "doc").unwrap();
        let sizes: Vec<usize> = ds.images.iter().map(|g| g.poses.len()).collect();
        assert_eq!(sizes, vec![1, 2]);
        assert_eq!(ds.images[1].annotation_ids, vec![0, 2]);
    }

    #[test]
    fn crowd_annotations_are_set_aside() {
        let text = minimal_doc(3).replace("\"iscrowd\": 0", "\"iscrowd\": 1");
        let ds = parse_coco_keypoints(&text, "doc").unwrap();
        assert!(ds.images[0].poses.is_empty());
        assert_eq!(ds.images[0].crowd.len(), 1);
    }

    #[test]
    fn results_examples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        write_results(&[], &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "[]");
        assert!(read_results(&path).unwrap().is_empty());

        let pose = Pose::from_points(&[(1.25, 2.5), (3.0, 4.0)]);
        let d = Detection::new(pose, 0.7, 0);
        let entries = results_entries(&[(5, vec![d])]);
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].keypoints, vec![1.25, 2.5, 1.0, 3.0, 4.0, 1.0]);
    }

    #[test]
    fn dataset_round_trip() {
        let scenes = vec![
            Scene {
                image: Tensor::from_fn(&[2, 3, 4], |i| (i as f32 / 7.0) as f64),
                gt_poses: vec![Pose::from_points(&[(0.1, 0.2), (1.0 / 3.0, 2.0)])],
                crowd_index: 0.125,
            },
            Scene {
                image: Tensor::zeros(&[2, 3, 4]),
                gt_poses: vec![],
                crowd_index: 0.0,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&scenes, dir.path()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), scenes);
        std::fs::write(dir.path().join("scene_00001.f32"), [0u8; 5]).unwrap();
        let e = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(e.contains("scenes[1].file"), "{e}");
    }
}
