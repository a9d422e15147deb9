//! Labeled scenes: the synthetic street generator, the `A3PC` binary format,
//! label remapping into the unified 19-class taxonomy, and train/val splits.

mod io;
mod labelmap;
mod scene;
mod split;

pub use io::{cloud_from_bytes, cloud_to_bytes, load_cloud, save_cloud, CLOUD_MAGIC, CLOUD_VERSION};
pub use labelmap::{apply_label_map, LabelMap, UNIFIED_CLASSES};
pub use scene::{generate_scene, SceneLayout, SceneSpec, SYNTHETIC_CLASSES};
pub use split::{make_split, DatasetSplit};
