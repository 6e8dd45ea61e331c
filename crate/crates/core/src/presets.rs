//! Bundled taxonomies, tables and maps.

use crate::taxonomy::{load_taxonomy, ConversionTable, RelabelMap, Taxonomy};

pub const CITYSCAPES: &str = include_str!("../data/cityscapes.toml");
pub const SYNTHIA: &str = include_str!("../data/synthia.toml");
pub const SIM_TARGET: &str = include_str!("../data/sim_target.toml");
pub const SIM_SOURCE: &str = include_str!("../data/sim_source.toml");
pub const GTA_TO_SYNTHIA: &str = include_str!("../data/gta_to_synthia.toml");
pub const SYNTHIA_TO_CITYSCAPES_MAP: &str = include_str!("../data/synthia_to_cityscapes_map.toml");

fn bundled(doc: &str) -> Taxonomy {
    load_taxonomy(doc).expect("bundled taxonomy is valid")
}

/// 19-class Cityscapes label space.
pub fn cityscapes() -> Taxonomy {
    bundled(CITYSCAPES)
}

/// 16-class Synthia label space (Cityscapes IDs).
pub fn synthia() -> Taxonomy {
    bundled(SYNTHIA)
}

/// Nine-class target space used by the simulator.
pub fn sim_target() -> Taxonomy {
    bundled(SIM_TARGET)
}

/// Six-class source space used by the simulator.
pub fn sim_source() -> Taxonomy {
    bundled(SIM_SOURCE)
}

/// terrain→vegetation, truck→car, train→ignore; identity elsewhere.
pub fn gta_to_synthia() -> ConversionTable {
    ConversionTable::from_document(GTA_TO_SYNTHIA, &cityscapes()).expect("bundled table is valid")
}

/// vegetation→terrain and car→truck.
pub fn synthia_to_cityscapes_map() -> RelabelMap {
    RelabelMap::from_document(SYNTHIA_TO_CITYSCAPES_MAP, &synthia(), &cityscapes())
        .expect("bundled map is valid")
}
