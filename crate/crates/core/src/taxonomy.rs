//! Class label spaces, concept sets, relabeling maps and label-space
//! conversion.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::LabelRaster;

/// 8-bit class identifier as stored in label rasters.
pub type ClassId = u8;

/// Reserved "unlabeled" value. Never a valid class.
pub const IGNORE_ID: ClassId = 255;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaxonomyError {
    #[error("parse error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse { message: String, line: Option<usize> },
    #[error("duplicate class id {0}")]
    DuplicateId(ClassId),
    #[error("duplicate class name {0:?}")]
    DuplicateName(String),
    #[error("class id {0} is reserved for ignore")]
    ReservedId(u32),
    #[error("class id {0} does not fit in 8 bits")]
    IdOutOfRange(u32),
    #[error("class {0:?} has an empty {1}")]
    EmptyField(String, &'static str),
    #[error("concept {concept:?} is listed by both {first:?} and {second:?}")]
    DuplicateConcept { concept: String, first: String, second: String },
    #[error("unknown class id {0}")]
    UnknownClass(ClassId),
    #[error("unknown class name {0:?}")]
    UnknownClassName(String),
    #[error("class id {0} is not covered by the conversion table")]
    UncoveredClass(ClassId),
}

/// Locates a TOML error so diagnostics can point at the offending line.
pub(crate) fn toml_error(src: &str, err: toml::de::Error) -> TaxonomyError {
    let line = err
        .span()
        .map(|span| src[..span.start.min(src.len())].matches('\n').count() + 1);
    TaxonomyError::Parse {
        message: err.message().to_string(),
        line,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDef {
    pub id: ClassId,
    pub name: String,
    pub category: String,
    /// Prompt strings used for detection and classification queries. The
    /// class name comes first unless the document says otherwise.
    pub concepts: Vec<String>,
}

/// A named label space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    name: String,
    classes: Vec<ClassDef>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TaxonomyDoc {
    name: String,
    #[serde(rename = "class", default)]
    classes: Vec<ClassDoc>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassDoc {
    id: u32,
    name: String,
    category: String,
    #[serde(default)]
    concepts: Vec<String>,
}

impl Taxonomy {
    /// Builds and validates a taxonomy. Empty concept lists default to
    /// `[name]`.
    pub fn new(name: impl Into<String>, classes: Vec<ClassDef>) -> Result<Self, TaxonomyError> {
        let mut ids = BTreeSet::new();
        let mut names = BTreeSet::new();
        let mut concept_owner: BTreeMap<String, String> = BTreeMap::new();
        let mut out = Vec::with_capacity(classes.len());
        for mut class in classes {
            if class.id == IGNORE_ID {
                return Err(TaxonomyError::ReservedId(IGNORE_ID as u32));
            }
            if class.name.trim().is_empty() {
                return Err(TaxonomyError::EmptyField(class.name, "name"));
            }
            if class.category.trim().is_empty() {
                return Err(TaxonomyError::EmptyField(class.name, "category"));
            }
            if !ids.insert(class.id) {
                return Err(TaxonomyError::DuplicateId(class.id));
            }
            if !names.insert(class.name.clone()) {
                return Err(TaxonomyError::DuplicateName(class.name));
            }
            if class.concepts.is_empty() {
                class.concepts.push(class.name.clone());
            }
            for concept in &class.concepts {
                if concept.trim().is_empty() {
                    return Err(TaxonomyError::EmptyField(class.name.clone(), "concept"));
                }
                if let Some(first) = concept_owner.insert(concept.clone(), class.name.clone()) {
                    return Err(TaxonomyError::DuplicateConcept {
                        concept: concept.clone(),
                        first,
                        second: class.name.clone(),
                    });
                }
            }
            out.push(class);
        }
        Ok(Taxonomy {
            name: name.into(),
            classes: out,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Classes in document order.
    pub fn classes(&self) -> &[ClassDef] {
        &self.classes
    }

    pub fn ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.classes.iter().map(|c| c.id)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn contains(&self, id: ClassId) -> bool {
        self.get(id).is_some()
    }

    pub fn get(&self, id: ClassId) -> Option<&ClassDef> {
        self.classes.iter().find(|c| c.id == id)
    }

    pub fn class(&self, id: ClassId) -> Result<&ClassDef, TaxonomyError> {
        self.get(id).ok_or(TaxonomyError::UnknownClass(id))
    }

    pub fn by_name(&self, name: &str) -> Option<&ClassDef> {
        self.classes.iter().find(|c| c.name == name)
    }

    pub fn id_of(&self, name: &str) -> Result<ClassId, TaxonomyError> {
        self.by_name(name)
            .map(|c| c.id)
            .ok_or_else(|| TaxonomyError::UnknownClassName(name.to_string()))
    }

    pub fn name_of(&self, id: ClassId) -> Option<&str> {
        self.get(id).map(|c| c.name.as_str())
    }

    /// Class owning `concept`, if any.
    pub fn class_of_concept(&self, concept: &str) -> Option<&ClassDef> {
        self.classes
            .iter()
            .find(|c| c.concepts.iter().any(|k| k == concept))
    }

    /// Every concept of every class, in class order then concept order.
    pub fn all_concepts(&self) -> Vec<(ClassId, &str)> {
        self.classes
            .iter()
            .flat_map(|c| c.concepts.iter().map(move |k| (c.id, k.as_str())))
            .collect()
    }

    /// Largest class ID plus one; the natural confusion-matrix size.
    pub fn id_span(&self) -> usize {
        self.ids().max().map_or(0, |m| m as usize + 1)
    }

    /// Serializes back to the document format.
    pub fn to_document(&self) -> String {
        let mut out = format!("name = {}\n", toml_string(&self.name));
        for c in &self.classes {
            out.push_str("\n[[class]]\n");
            out.push_str(&format!("id = {}\n", c.id));
            out.push_str(&format!("name = {}\n", toml_string(&c.name)));
            out.push_str(&format!("category = {}\n", toml_string(&c.category)));
            let concepts: Vec<String> = c.concepts.iter().map(|k| toml_string(k)).collect();
            out.push_str(&format!("concepts = [{}]\n", concepts.join(", ")));
        }
        out
    }
}

fn toml_string(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization cannot fail")
}

/// Parses a taxonomy document:
///
/// ```toml
/// name = "cityscapes"
///
/// [[class]]
/// id = 9
/// name = "terrain"
/// category = "nature"
/// concepts = ["terrain", "grass"]   # optional, defaults to [name]
/// ```
pub fn load_taxonomy(document: &str) -> Result<Taxonomy, TaxonomyError> {
    let doc: TaxonomyDoc = toml::from_str(document).map_err(|e| toml_error(document, e))?;
    let mut classes = Vec::with_capacity(doc.classes.len());
    for c in doc.classes {
        let id = match c.id {
            255 => return Err(TaxonomyError::ReservedId(255)),
            id if id > 255 => return Err(TaxonomyError::IdOutOfRange(id)),
            id => id as ClassId,
        };
        classes.push(ClassDef {
            id,
            name: c.name,
            category: c.category,
            concepts: c.concepts,
        });
    }
    Taxonomy::new(doc.name, classes)
}

/// The concept list of `class_id`, order preserved.
pub fn expand_concepts(class_id: ClassId, taxonomy: &Taxonomy) -> Result<&[String], TaxonomyError> {
    taxonomy.class(class_id).map(|c| c.concepts.as_slice())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MapOrigin {
    Predefined,
    AutoConfigured,
}

/// One From→To directive: pixels of `from` inside an accepted patch of
/// class `to` become `to`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapEntry {
    pub from: ClassId,
    pub to: ClassId,
    pub origin: MapOrigin,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelabelMap {
    entries: Vec<MapEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MapViolation {
    #[error("class {0} appears as Map.From more than once")]
    DuplicateFrom(ClassId),
    #[error("class {0} is both a Map.From and a Map.To class")]
    FromToOverlap(ClassId),
    #[error("Map.From class {0} is not in the source taxonomy")]
    FromNotInSource(ClassId),
    #[error("Map.To class {0} is not in the target taxonomy")]
    ToNotInTarget(ClassId),
    #[error("Map.To class {0} already exists in the source taxonomy")]
    ToInSource(ClassId),
    #[error("ignore id cannot appear in a map")]
    IgnoreInMap,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MapDoc {
    #[serde(rename = "entry", default)]
    entries: Vec<MapEntryDoc>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MapEntryDoc {
    from: String,
    to: String,
}

impl RelabelMap {
    pub fn new(entries: Vec<MapEntry>) -> Self {
        RelabelMap { entries }
    }

    pub fn predefined(pairs: &[(ClassId, ClassId)]) -> Self {
        Self::from_pairs(pairs, MapOrigin::Predefined)
    }

    pub fn from_pairs(pairs: &[(ClassId, ClassId)], origin: MapOrigin) -> Self {
        RelabelMap {
            entries: pairs
                .iter()
                .map(|&(from, to)| MapEntry { from, to, origin })
                .collect(),
        }
    }

    pub fn entries(&self) -> &[MapEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, entry: MapEntry) {
        self.entries.push(entry);
    }

    pub fn from_ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.entries.iter().map(|e| e.from)
    }

    pub fn to_ids(&self) -> BTreeSet<ClassId> {
        self.entries.iter().map(|e| e.to).collect()
    }

    pub fn is_from(&self, id: ClassId) -> bool {
        self.entries.iter().any(|e| e.from == id)
    }

    /// From-classes of the entries targeting `to`.
    pub fn sources_of(&self, to: ClassId) -> Vec<ClassId> {
        self.entries
            .iter()
            .filter(|e| e.to == to)
            .map(|e| e.from)
            .collect()
    }

    /// 256-entry lookup applying every entry at once.
    pub fn lookup(&self) -> [ClassId; 256] {
        let mut lut = identity_lut();
        for e in &self.entries {
            lut[e.from as usize] = e.to;
        }
        lut
    }

    /// Rewrites every from-pixel of the whole raster.
    pub fn apply(&self, raster: &LabelRaster) -> LabelRaster {
        raster.map_ids(&self.lookup())
    }

    /// Parses a map document with `[[entry]] from = "name" to = "name"`
    /// tables. Names are resolved in `source` (from) and `target` (to).
    pub fn from_document(
        document: &str,
        source: &Taxonomy,
        target: &Taxonomy,
    ) -> Result<Self, TaxonomyError> {
        let doc: MapDoc = toml::from_str(document).map_err(|e| toml_error(document, e))?;
        let mut entries = Vec::with_capacity(doc.entries.len());
        for e in doc.entries {
            entries.push(MapEntry {
                from: source.id_of(&e.from)?,
                to: target.id_of(&e.to)?,
                origin: MapOrigin::Predefined,
            });
        }
        Ok(RelabelMap { entries })
    }

    pub fn to_document(&self, source: &Taxonomy, target: &Taxonomy) -> String {
        let mut out = String::new();
        for e in &self.entries {
            if !out.is_empty() {
                out.push('\n');
            }
            let from = source.name_of(e.from).map_or_else(|| e.from.to_string(), str::to_string);
            let to = target.name_of(e.to).map_or_else(|| e.to.to_string(), str::to_string);
            if e.origin == MapOrigin::AutoConfigured {
                out.push_str("# auto-configured\n");
            }
            out.push_str(&format!(
                "[[entry]]\nfrom = {}\nto = {}\n",
                toml_string(&from),
                toml_string(&to)
            ));
        }
        out
    }
}

impl fmt::Display for RelabelMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .entries
            .iter()
            .map(|e| format!("{}->{}", e.from, e.to))
            .collect();
        write!(f, "{{{}}}", parts.join(", "))
    }
}

/// Checks every structural rule a relabeling map must satisfy. Returns all
/// violations rather than the first.
pub fn validate_map(
    map: &RelabelMap,
    source: &Taxonomy,
    target: &Taxonomy,
) -> Result<(), Vec<MapViolation>> {
    let mut violations = Vec::new();
    let mut seen_from = BTreeSet::new();
    let to_ids = map.to_ids();
    for e in map.entries() {
        if e.from == IGNORE_ID || e.to == IGNORE_ID {
            violations.push(MapViolation::IgnoreInMap);
            continue;
        }
        if !seen_from.insert(e.from) {
            violations.push(MapViolation::DuplicateFrom(e.from));
        }
        if to_ids.contains(&e.from) {
            violations.push(MapViolation::FromToOverlap(e.from));
        }
        if !source.contains(e.from) {
            violations.push(MapViolation::FromNotInSource(e.from));
        }
        if !target.contains(e.to) {
            violations.push(MapViolation::ToNotInTarget(e.to));
        }
        if source.contains(e.to) {
            violations.push(MapViolation::ToInSource(e.to));
        }
    }
    violations.dedup();
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

fn identity_lut() -> [ClassId; 256] {
    let mut lut = [0u8; 256];
    for (i, v) in lut.iter_mut().enumerate() {
        *v = i as u8;
    }
    lut
}

/// Old→new ID table used to collapse one label space onto another.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConversionTable {
    pairs: BTreeMap<ClassId, ClassId>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConversionDoc {
    #[serde(default)]
    passthrough: bool,
    #[serde(rename = "pair", default)]
    pairs: Vec<ConversionPairDoc>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConversionPairDoc {
    from: String,
    to: String,
}

impl ConversionTable {
    pub fn new(pairs: impl IntoIterator<Item = (ClassId, ClassId)>) -> Self {
        ConversionTable {
            pairs: pairs.into_iter().collect(),
        }
    }

    pub fn identity(taxonomy: &Taxonomy) -> Self {
        Self::new(taxonomy.ids().map(|id| (id, id)))
    }

    /// Adds identity pairs for every class of `taxonomy` not yet covered.
    pub fn with_passthrough(mut self, taxonomy: &Taxonomy) -> Self {
        for id in taxonomy.ids() {
            self.pairs.entry(id).or_insert(id);
        }
        self
    }

    pub fn get(&self, old: ClassId) -> Option<ClassId> {
        self.pairs.get(&old).copied()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (ClassId, ClassId)> + '_ {
        self.pairs.iter().map(|(&a, &b)| (a, b))
    }

    /// Parses `[[pair]] from = "name" to = "name" | "ignore"` tables. With
    /// `passthrough = true` every other class of `old` keeps its ID.
    pub fn from_document(document: &str, old: &Taxonomy) -> Result<Self, TaxonomyError> {
        let doc: ConversionDoc = toml::from_str(document).map_err(|e| toml_error(document, e))?;
        let mut pairs = BTreeMap::new();
        for p in doc.pairs {
            let from = old.id_of(&p.from)?;
            let to = if p.to == "ignore" || p.to == "unlabeled" {
                IGNORE_ID
            } else {
                old.id_of(&p.to)?
            };
            pairs.insert(from, to);
        }
        let table = ConversionTable { pairs };
        Ok(if doc.passthrough {
            table.with_passthrough(old)
        } else {
            table
        })
    }
}

/// Maps every pixel through `table`; ignore passes through unchanged.
pub fn convert_label_space(
    raster: &LabelRaster,
    table: &ConversionTable,
) -> Result<LabelRaster, TaxonomyError> {
    let mut lut: [Option<ClassId>; 256] = [None; 256];
    for (old, new) in table.pairs() {
        lut[old as usize] = Some(new);
    }
    lut[IGNORE_ID as usize] = Some(IGNORE_ID);
    let mut out = Vec::with_capacity(raster.data().len());
    for &v in raster.data() {
        out.push(lut[v as usize].ok_or(TaxonomyError::UncoveredClass(v))?);
    }
    Ok(LabelRaster::new(raster.width(), raster.height(), out).expect("shape preserved"))
}
