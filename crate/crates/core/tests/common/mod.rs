//! Generators shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use posekit::domain::{Keypoint, Pose, SkeletonSpec};
use posekit::nms::Detection;
use posekit::oks::OksParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

pub fn random_pose(rng: &mut ChaCha8Rng, k: usize, center: (f64, f64), spread: f64) -> Pose {
    let mut kps: Vec<Keypoint> = (0..k)
        .map(|_| {
            let v = [0u8, 1, 2][rng.random_range(0..3)];
            Keypoint::new(
                center.0 + rng.random_range(-spread..spread),
                center.1 + rng.random_range(-spread..spread),
                v,
            )
        })
        .collect();
    if kps.iter().all(|p| p.v == 0) {
        kps[0].v = 2;
    }
    Pose::new(kps)
}

pub fn params(k: usize) -> OksParams {
    OksParams::from_skeleton(&SkeletonSpec::with_joints(k).unwrap())
}

pub fn ap_instance(seed: u64) -> (Vec<Vec<Detection>>, Vec<Vec<Pose>>, OksParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(1..=4);
    let scenes = rng.random_range(1..=3);
    let mut gts: Vec<Vec<Pose>> = (0..scenes)
        .map(|_| {
            (0..rng.random_range(0..=2))
                .map(|_| {
                    let c = (rng.random_range(20.0..80.0), rng.random_range(20.0..80.0));
                    random_pose(&mut rng, k, c, 15.0)
                })
                .collect()
        })
        .collect();
    if gts.iter().all(|g| g.is_empty()) {
        gts[0].push(random_pose(&mut rng, k, (50.0, 50.0), 15.0));
    }
    let mut dets = vec![Vec::new(); scenes];
    let n = rng.random_range(0..=4);
    for _ in 0..n {
        let s = rng.random_range(0..scenes);
        let pose = match gts[s].len() {
            0 => random_pose(&mut rng, k, (50.0, 50.0), 15.0),
            m => {
                let g = &gts[s][rng.random_range(0..m)];
                let jitter = rng.random_range(0.0..4.0);
                Pose::new(
                    g.keypoints
                        .iter()
                        .map(|p| {
                            Keypoint::new(
                                p.x + rng.random_range(-jitter..=jitter),
                                p.y + rng.random_range(-jitter..=jitter),
                                2,
                            )
                        })
                        .collect(),
                )
            }
        };
        let score = if rng.random_bool(0.25) {
            0.5
        } else {
            rng.random_range(0.0..1.0)
        };
        dets[s].push(Detection::new(pose, score, 0));
    }
    (dets, gts, params(k))
}

pub const K: usize = 17;

fn annotation(id: u64, image_id: u64, rng: &mut ChaCha8Rng, crowd: bool) -> Value {
    let mut kps = Vec::new();
    let mut labelled = 0;
    for _ in 0..K {
        let v = [0u64, 1, 2][rng.random_range(0..3)];
        if v > 0 {
            labelled += 1;
            kps.extend([
                json!(rng.random_range(0.0..99.0)),
                json!(rng.random_range(0.0..79.0)),
                json!(v),
            ]);
        } else {
            kps.extend([json!(0), json!(0), json!(0)]);
        }
    }
    json!({
        "id": id, "image_id": image_id, "category_id": 1, "keypoints": kps,
        "bbox": [1.0, 2.0, 30.5, 40.25], "area": 1220.5, "num_keypoints": labelled,
        "iscrowd": if crowd { 1 } else { 0 }
    })
}

pub fn valid_doc(seed: u64) -> Value {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let crowd = rng.random_bool(0.3);
    let names: Vec<String> = (0..K).map(|i| format!("joint{i}")).collect();
    json!({
        "info": {"description": "fixture"},
        "images": [
            {"id": 10, "width": 100, "height": 80, "file_name": "a.jpg"},
            {"id": 11, "width": 100, "height": 80, "file_name": "b.jpg"}
        ],
        "annotations": [
            annotation(1, 10, &mut rng, false),
            annotation(2, 11, &mut rng, false),
            annotation(3, 11, &mut rng, crowd),
        ],
        "categories": [
            {"id": 1, "name": "person", "supercategory": "person", "keypoints": names, "skeleton": [[1, 2], [16, 17]]}
        ]
    })
}

/// Applies mutation class `class` and returns the text plus a fragment the
/// error location must contain.
pub fn mutate(class: usize, seed: u64) -> (String, &'static str) {
    let mut doc = valid_doc(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let a = rng.random_range(0..3);
    let j = rng.random_range(0..K);
    let fragment = match class {
        0 => {
            let text = doc.to_string();
            let cut = rng.random_range(1..text.len() - 1);
            return (text[..cut].to_string(), "line ");
        }
        1 => {
            doc["annotations"][a]["keypoints"] = json!("many");
            "keypoints"
        }
        2 => {
            doc["annotations"][a]
                .as_object_mut()
                .unwrap()
                .remove("bbox");
            "annotations["
        }
        3 => {
            doc["annotations"][a]["keypoints"]
                .as_array_mut()
                .unwrap()
                .truncate(50);
            "keypoints"
        }
        4 => {
            doc["annotations"][a]["keypoints"]
                .as_array_mut()
                .unwrap()
                .truncate(48);
            "keypoints"
        }
        5 => {
            doc["annotations"][a]["keypoints"][3 * j + 2] = json!(3);
            "keypoints["
        }
        6 => {
            doc["annotations"][a]["keypoints"][3 * j + 2] = json!(1.5);
            "keypoints["
        }
        7 => {
            doc["annotations"][a]["image_id"] = json!(99);
            "image_id"
        }
        8 => {
            doc["annotations"][a]["category_id"] = json!(7);
            "category_id"
        }
        9 => {
            doc["images"][1]["id"] = json!(10);
            "images[1].id"
        }
        10 => {
            doc["annotations"][a]["id"] = json!(if a == 0 { 2 } else { 1 });
            ".id"
        }
        11 => {
            doc["annotations"][a]["bbox"] = json!([1.0, 2.0, 3.0]);
            "bbox"
        }
        12 => {
            doc["annotations"][a]["bbox"][2] = json!(-4.0);
            "bbox"
        }
        13 => {
            doc["annotations"][a]["area"] = json!(-1.0);
            "area"
        }
        14 => {
            doc["annotations"][a]["iscrowd"] = json!(2);
            "iscrowd"
        }
        15 => {
            let n = doc["annotations"][a]["num_keypoints"].as_u64().unwrap();
            doc["annotations"][a]["num_keypoints"] = json!(n + 1);
            "num_keypoints"
        }
        16 => {
            doc["images"][0]["width"] = json!(0);
            "images[0]"
        }
        17 => {
            doc["categories"][0]["keypoints"] = json!([]);
            "categories"
        }
        18 => {
            doc["categories"][0]["skeleton"] = json!([[0, 1]]);
            "skeleton[0]"
        }
        19 => {
            doc["annotations"][a]["keypoints"][3 * j] = json!(150.0);
            doc["annotations"][a]["keypoints"][3 * j + 2] = json!(2);
            let kps = &doc["annotations"][a]["keypoints"];
            let n = (0..K)
                .filter(|i| kps[3 * i + 2].as_f64().unwrap() > 0.0)
                .count();
            doc["annotations"][a]["num_keypoints"] = json!(n);
            "keypoints["
        }
        20 => return ("[1, 2, 3]".to_string(), "doc.json: "),
        21 => {
            doc.as_object_mut().unwrap().remove("images");
            "line "
        }
        22 => {
            doc["annotations"][a]["id"] = json!(-3);
            ".id"
        }
        23 => {
            doc["annotations"][a]["keypoints"][3 * j] = Value::Null;
            "keypoints["
        }
        24 => {
            let cat = doc["categories"][0].clone();
            doc["categories"].as_array_mut().unwrap().push(cat);
            "categories[1].id"
        }
        _ => unreachable!(),
    };
    (doc.to_string(), fragment)
}

pub const CLASSES: usize = 25;
