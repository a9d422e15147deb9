use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{PointCloud, IGNORE};

/// Unified 19-class taxonomy, indexed by unified id.
pub const UNIFIED_CLASSES: [&str; 19] = [
    "car",
    "bicycle",
    "motorcycle",
    "truck",
    "other-vehicle",
    "person",
    "bicyclist",
    "motorcyclist",
    "road",
    "parking",
    "sidewalk",
    "other-ground",
    "building",
    "fence",
    "vegetation",
    "trunk",
    "terrain",
    "pole",
    "traffic-sign",
];

/// SemanticKITTI native ids with their names. Moving classes map to their
/// static counterpart; anything outside the 19 kept names is ignored.
const SEMANTICKITTI_NATIVE: [(u16, &str); 34] = [
    (0, "unlabeled"),
    (1, "outlier"),
    (10, "car"),
    (11, "bicycle"),
    (13, "bus"),
    (15, "motorcycle"),
    (16, "on-rails"),
    (18, "truck"),
    (20, "other-vehicle"),
    (30, "person"),
    (31, "bicyclist"),
    (32, "motorcyclist"),
    (40, "road"),
    (44, "parking"),
    (48, "sidewalk"),
    (49, "other-ground"),
    (50, "building"),
    (51, "fence"),
    (52, "other-structure"),
    (60, "lane-marking"),
    (70, "vegetation"),
    (71, "trunk"),
    (72, "terrain"),
    (80, "pole"),
    (81, "traffic-sign"),
    (99, "other-object"),
    (252, "moving-car"),
    (253, "moving-bicyclist"),
    (254, "moving-person"),
    (255, "moving-motorcyclist"),
    (256, "moving-on-rails"),
    (257, "moving-bus"),
    (258, "moving-truck"),
    (259, "moving-other-vehicle"),
];

const SYNLIDAR: [(u16, u16); 33] = [
    (0, 255),  // unlabeled
    (1, 0),    // car
    (2, 3),    // pick-up → truck
    (3, 3),    // truck
    (4, 4),    // bus → other-vehicle
    (5, 1),    // bicycle
    (6, 2),    // motorcycle
    (7, 4),    // other-vehicle
    (8, 8),    // road
    (9, 10),   // sidewalk
    (10, 9),   // parking
    (11, 11),  // other-ground
    (12, 5),   // female → person
    (13, 5),   // male → person
    (14, 5),   // kid → person
    (15, 5),   // group → person
    (16, 6),   // bicyclist
    (17, 7),   // motorcyclist
    (18, 12),  // building
    (19, 255), // other-structure
    (20, 14),  // vegetation
    (21, 15),  // trunk
    (22, 16),  // terrain
    (23, 18),  // traffic-sign
    (24, 17),  // pole
    (25, 255), // traffic-cone
    (26, 13),  // fence
    (27, 255), // garbage-can
    (28, 255), // electric-box
    (29, 255), // table
    (30, 255), // chair
    (31, 255), // bench
    (32, 255), // other-object
];

const SEMANTICSTF: [(u16, u16); 21] = [
    (0, 255), // unlabeled
    (1, 0),
    (2, 1),
    (3, 2),
    (4, 3),
    (5, 4),
    (6, 5),
    (7, 6),
    (8, 7),
    (9, 8),
    (10, 9),
    (11, 10),
    (12, 11),
    (13, 12),
    (14, 13),
    (15, 14),
    (16, 15),
    (17, 16),
    (18, 17),
    (19, 18),
    (20, 255), // invalid
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub name: String,
    entries: BTreeMap<u16, u16>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelMapJson {
    name: String,
    entries: BTreeMap<String, u16>,
}

fn unified_id(name: &str) -> Option<u16> {
    UNIFIED_CLASSES.iter().position(|c| *c == name).map(|i| i as u16)
}

impl LabelMap {
    pub fn new(name: impl Into<String>, entries: impl IntoIterator<Item = (u16, u16)>) -> Result<Self> {
        let name = name.into();
        let entries: BTreeMap<u16, u16> = entries.into_iter().collect();
        if let Some((raw, bad)) = entries.iter().find(|(_, &t)| t > 18 && t != IGNORE) {
            return Err(Error::Config(format!(
                "label map `{name}`: raw id {raw} maps to {bad}, outside 0..=18 and 255"
            )));
        }
        Ok(LabelMap { name, entries })
    }

    /// Built-in maps: `semantickitti`, `synlidar`, `semanticstf`.
    pub fn builtin(name: &str) -> Option<LabelMap> {
        let entries: Vec<(u16, u16)> = match name {
            "semantickitti" => SEMANTICKITTI_NATIVE
                .iter()
                .map(|&(raw, native)| {
                    let stat = native.strip_prefix("moving-").unwrap_or(native);
                    (raw, unified_id(stat).unwrap_or(IGNORE))
                })
                .collect(),
            "synlidar" => SYNLIDAR.to_vec(),
            "semanticstf" => SEMANTICSTF.to_vec(),
            _ => return None,
        };
        Some(LabelMap::new(name, entries).expect("built-in maps are valid"))
    }

    pub fn builtin_names() -> [&'static str; 3] {
        ["semantickitti", "synlidar", "semanticstf"]
    }

    pub fn get(&self, raw: u16) -> Option<u16> {
        self.entries.get(&raw).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (u16, u16)> + '_ {
        self.entries.iter().map(|(&a, &b)| (a, b))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: LabelMapJson = serde_json::from_str(text)?;
        let mut entries = Vec::with_capacity(raw.entries.len());
        for (k, v) in raw.entries {
            let id = k
                .parse::<u16>()
                .map_err(|_| Error::Config(format!("label map key `{k}` is not a u16 id")))?;
            entries.push((id, v));
        }
        LabelMap::new(raw.name, entries)
    }

    pub fn to_json(&self) -> String {
        let doc = LabelMapJson {
            name: self.name.clone(),
            entries: self.entries.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        };
        serde_json::to_string_pretty(&doc).expect("label map serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Rewrites raw labels into unified ids. Clouds already carrying unified
/// labels are refused, so a map can never be applied twice.
pub fn apply_label_map(cloud: &PointCloud, map: &LabelMap) -> Result<PointCloud> {
    if cloud.meta().labels_unified {
        return Err(Error::AlreadyUnified(cloud.id().to_string()));
    }
    let labels = cloud
        .labels()
        .iter()
        .map(|&raw| {
            map.get(raw).ok_or_else(|| Error::UnmappedLabel {
                map: map.name.clone(),
                id: raw,
            })
        })
        .collect::<Result<Vec<u16>>>()?;
    let mut meta = cloud.meta().clone();
    meta.labels_unified = true;
    PointCloud::new(cloud.positions().to_vec(), labels, meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::{CloudMeta, Source};

    fn raw_cloud(labels: Vec<u16>) -> PointCloud {
        let n = labels.len();
        PointCloud::new(vec![[0.0; 3]; n], labels, CloudMeta::new("r", Source::Ingested)).unwrap()
    }

    #[test]
    fn pickup_maps_to_truck_and_zero_is_ignored() {
        assert_eq!(LabelMap::builtin("synlidar").unwrap().get(2), Some(3));
        for name in LabelMap::builtin_names() {
            assert_eq!(LabelMap::builtin(name).unwrap().get(0), Some(255), "{name}");
        }
    }

    #[test]
    fn semantickitti_moving_to_static() {
        let m = LabelMap::builtin("semantickitti").unwrap();
        assert_eq!(m.get(252), Some(0));
        assert_eq!(m.get(254), Some(5));
        assert_eq!(m.get(40), Some(8));
        assert_eq!(m.get(52), Some(255));
    }

    #[test]
    fn unmapped_id_named() {
        let m = LabelMap::builtin("semanticstf").unwrap();
        match apply_label_map(&raw_cloud(vec![1, 999]), &m) {
            Err(Error::UnmappedLabel { id, .. }) => assert_eq!(id, 999),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn second_application_refused() {
        let m = LabelMap::builtin("synlidar").unwrap();
        let once = apply_label_map(&raw_cloud(vec![1, 2, 25]), &m).unwrap();
        assert_eq!(once.labels(), &[0, 3, 255]);
        assert_eq!(once.positions(), raw_cloud(vec![1, 2, 25]).positions());
        assert!(matches!(apply_label_map(&once, &m), Err(Error::AlreadyUnified(_))));
    }

    #[test]
    fn json_round_trip_and_validation() {
        let m = LabelMap::builtin("semanticstf").unwrap();
        assert_eq!(LabelMap::from_json(&m.to_json()).unwrap(), m);
        assert!(LabelMap::from_json(r#"{"name":"x","entries":{"1":19}}"#).is_err());
        assert!(LabelMap::from_json(r#"{"name":"x","entries":{"a":1}}"#).is_err());
        assert!(LabelMap::from_json(r#"{"name":"x","entries":{},"extra":1}"#).is_err());
    }
}
