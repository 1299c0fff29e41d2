//! Dataflow tile mappings for conv and fc layers on the flexible linear
//! array: validation against layer bounds and the multiplier budget,
//! mapping-space enumeration, the mapping file, and external providers.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accelconfig::ValidatedConfig;
use crate::graph::{ConvLayerParams, FcLayerParams, Layer, Model, Op};

pub const CONV_TILES: [&str; 8] = ["t_r", "t_s", "t_c", "t_k", "t_g", "t_n", "t_x", "t_y"];
pub const FC_TILES: [&str; 3] = ["t_s", "t_n", "t_k"];

/// Refuse to materialize spaces beyond this many feasible points.
pub const MAX_SPACE_POINTS: usize = 20_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MappingError {
    #[error("layer '{id}': op {op} has no dataflow mapping")]
    UnsupportedKind { id: String, op: String },
    #[error("layer '{0}': shapes not inferred")]
    NotInferred(String),
    #[error("{0}")]
    Invalid(MappingDiagnostics),
    #[error("unknown mapping provider '{0}'")]
    UnknownProvider(String),
    #[error("mapping provider '{provider}' could not read {path}: {reason}")]
    ProviderUnreadable {
        provider: String,
        path: PathBuf,
        reason: String,
    },
    #[error("mapping provider '{provider}' has no entry for layer '{layer}'")]
    MissingEntry { provider: String, layer: String },
    #[error("malformed mapping file: {0}")]
    Malformed(String),
    #[error("mapping space has more than {0} feasible points")]
    SpaceTooLarge(usize),
}

/// All failed checks of one mapping, reported together.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappingDiagnostics(pub Vec<String>);

impl fmt::Display for MappingDiagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid mapping: {}", self.0.join("; "))
    }
}

/// Tiles per conv loop dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ConvMapping {
    pub t_r: usize,
    pub t_s: usize,
    pub t_c: usize,
    pub t_k: usize,
    pub t_g: usize,
    pub t_n: usize,
    pub t_x: usize,
    pub t_y: usize,
}

impl ConvMapping {
    pub fn ones() -> Self {
        ConvMapping::from_tiles(&[1; 8])
    }

    pub fn from_tiles(t: &[usize]) -> Self {
        ConvMapping {
            t_r: t[0],
            t_s: t[1],
            t_c: t[2],
            t_k: t[3],
            t_g: t[4],
            t_n: t[5],
            t_x: t[6],
            t_y: t[7],
        }
    }

    pub fn tiles(&self) -> [usize; 8] {
        [
            self.t_r, self.t_s, self.t_c, self.t_k, self.t_g, self.t_n, self.t_x, self.t_y,
        ]
    }

    pub fn footprint(&self) -> u64 {
        self.tiles().iter().map(|&t| t as u64).product()
    }
}

/// Tiles of a fully connected layer: output neurons, batches, input neurons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FcMapping {
    pub t_s: usize,
    pub t_n: usize,
    pub t_k: usize,
}

impl FcMapping {
    pub fn ones() -> Self {
        FcMapping { t_s: 1, t_n: 1, t_k: 1 }
    }

    pub fn tiles(&self) -> [usize; 3] {
        [self.t_s, self.t_n, self.t_k]
    }

    pub fn footprint(&self) -> u64 {
        self.tiles().iter().map(|&t| t as u64).product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mapping {
    Conv(ConvMapping),
    Fc(FcMapping),
}

impl Mapping {
    pub fn tiles(&self) -> Vec<usize> {
        match self {
            Mapping::Conv(m) => m.tiles().to_vec(),
            Mapping::Fc(m) => m.tiles().to_vec(),
        }
    }

    pub fn tile_names(&self) -> &'static [&'static str] {
        match self {
            Mapping::Conv(_) => &CONV_TILES,
            Mapping::Fc(_) => &FC_TILES,
        }
    }

    pub fn footprint(&self) -> u64 {
        match self {
            Mapping::Conv(m) => m.footprint(),
            Mapping::Fc(m) => m.footprint(),
        }
    }
}

impl fmt::Display for Mapping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .tile_names()
            .iter()
            .zip(self.tiles())
            .map(|(n, v)| format!("{n}={v}"))
            .collect();
        f.write_str(&parts.join(";"))
    }
}

/// The part of a layer a mapping is defined over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Workload {
    Conv(ConvLayerParams),
    Fc(FcLayerParams),
}

impl Workload {
    /// Requires inferred shapes for conv layers.
    pub fn from_layer(layer: &Layer) -> Result<Self, MappingError> {
        match &layer.op {
            Op::Conv2d { params, .. } => {
                if params.p == 0 || params.q == 0 {
                    return Err(MappingError::NotInferred(layer.id.clone()));
                }
                Ok(Workload::Conv(*params))
            }
            Op::Dense(fc) => Ok(Workload::Fc(*fc)),
            other => Err(MappingError::UnsupportedKind {
                id: layer.id.clone(),
                op: other.name().to_string(),
            }),
        }
    }

    /// Upper bound of each tile, in tile-vector order.
    pub fn tile_bounds(&self) -> Vec<usize> {
        match self {
            Workload::Conv(p) => vec![p.r, p.s, p.c_per_group(), p.k_per_group(), p.g, p.n, p.p, p.q],
            Workload::Fc(fc) => vec![fc.out_features, fc.batch, fc.in_features],
        }
    }

    pub fn tile_names(&self) -> &'static [&'static str] {
        match self {
            Workload::Conv(_) => &CONV_TILES,
            Workload::Fc(_) => &FC_TILES,
        }
    }

    pub fn mapping_from_tiles(&self, tiles: &[usize]) -> Mapping {
        match self {
            Workload::Conv(_) => Mapping::Conv(ConvMapping::from_tiles(tiles)),
            Workload::Fc(_) => Mapping::Fc(FcMapping {
                t_s: tiles[0],
                t_n: tiles[1],
                t_k: tiles[2],
            }),
        }
    }

    pub fn macs(&self) -> u64 {
        match self {
            Workload::Conv(p) => p.macs(),
            Workload::Fc(fc) => fc.macs(),
        }
    }
}

/// All tiles set to 1.
pub fn default_mapping(layer: &Layer) -> Result<Mapping, MappingError> {
    match &layer.op {
        Op::Conv2d { .. } => Ok(Mapping::Conv(ConvMapping::ones())),
        Op::Dense(_) => Ok(Mapping::Fc(FcMapping::ones())),
        other => Err(MappingError::UnsupportedKind {
            id: layer.id.clone(),
            op: other.name().to_string(),
        }),
    }
}

pub fn default_mapping_for(workload: &Workload) -> Mapping {
    match workload {
        Workload::Conv(_) => Mapping::Conv(ConvMapping::ones()),
        Workload::Fc(_) => Mapping::Fc(FcMapping::ones()),
    }
}

/// Bound checks per tile plus `footprint <= multipliers`.
pub fn validate_mapping(m: &Mapping, workload: &Workload, cfg: &ValidatedConfig) -> Result<(), MappingError> {
    let mut diags = Vec::new();
    match (m, workload) {
        (Mapping::Conv(_), Workload::Conv(_)) | (Mapping::Fc(_), Workload::Fc(_)) => {}
        _ => {
            return Err(MappingError::Invalid(MappingDiagnostics(vec![
                "mapping kind does not match the layer kind".into(),
            ])))
        }
    }
    for ((name, tile), bound) in m.tile_names().iter().zip(m.tiles()).zip(workload.tile_bounds()) {
        if *name == "t_n" && tile != 1 {
            diags.push(format!("t_n={tile} out of range: batch tile must be 1"));
        } else if tile == 0 || tile > bound {
            diags.push(format!("{name}={tile} out of range 1..={bound}"));
        }
    }
    let footprint = m.footprint();
    if footprint > cfg.multipliers() {
        diags.push(format!(
            "footprint {footprint} exceeds {} multipliers",
            cfg.multipliers()
        ));
    }
    if diags.is_empty() {
        Ok(())
    } else {
        Err(MappingError::Invalid(MappingDiagnostics(diags)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpacePolicy {
    /// Divisors of each dimension.
    #[default]
    Divisors,
    /// Every value `1..=bound`.
    Full,
}

pub fn divisors(n: usize) -> Vec<usize> {
    let mut small = Vec::new();
    let mut large = Vec::new();
    let mut d = 1;
    while d * d <= n {
        if n.is_multiple_of(d) {
            small.push(d);
            if d * d != n {
                large.push(n / d);
            }
        }
        d += 1;
    }
    small.extend(large.into_iter().rev());
    small
}

fn candidate_lists(workload: &Workload, policy: SpacePolicy) -> Vec<Vec<usize>> {
    workload
        .tile_bounds()
        .into_iter()
        .enumerate()
        .map(|(i, bound)| {
            if workload.tile_names()[i] == "t_n" {
                return vec![1];
            }
            match policy {
                SpacePolicy::Divisors => divisors(bound.max(1)),
                SpacePolicy::Full => (1..=bound.max(1)).collect(),
            }
        })
        .collect()
}

/// Depth-first walk over ascending candidate lists, pruned on footprint.
/// Visits feasible tile vectors in lexicographic order; the visitor returns
/// `false` to stop.
fn walk_feasible(lists: &[Vec<usize>], budget: u64, visit: &mut dyn FnMut(&[usize]) -> bool) {
    fn rec(
        lists: &[Vec<usize>],
        depth: usize,
        prod: u64,
        budget: u64,
        cur: &mut Vec<usize>,
        visit: &mut dyn FnMut(&[usize]) -> bool,
    ) -> bool {
        if depth == lists.len() {
            return visit(cur);
        }
        for &v in &lists[depth] {
            let p = prod * v as u64;
            if p > budget {
                break;
            }
            cur.push(v);
            let go_on = rec(lists, depth + 1, p, budget, cur, visit);
            cur.pop();
            if !go_on {
                return false;
            }
        }
        true
    }
    let mut cur = Vec::with_capacity(lists.len());
    rec(lists, 0, 1, budget, &mut cur, visit);
}

/// Feasible mappings of one layer under one config.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingSpace {
    pub workload: Workload,
    pub policy: SpacePolicy,
    /// Candidate values per tile, ascending.
    pub candidates: Vec<Vec<usize>>,
    points: Vec<Mapping>,
}

impl MappingSpace {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Product of candidate list lengths, before footprint filtering.
    pub fn raw_size(&self) -> u128 {
        self.candidates.iter().map(|c| c.len() as u128).product()
    }

    /// Feasible mappings in lexicographic tile order.
    pub fn points(&self) -> &[Mapping] {
        &self.points
    }

    pub fn get(&self, index: usize) -> Option<&Mapping> {
        self.points.get(index)
    }

    pub fn index_of(&self, m: &Mapping) -> Option<usize> {
        self.points.binary_search(m).ok()
    }

    /// Splits `0..len` into at most `parts` contiguous ranges.
    pub fn partition(&self, parts: usize) -> Vec<std::ops::Range<usize>> {
        let parts = parts.max(1);
        let chunk = self.len().div_ceil(parts).max(1);
        (0..self.len())
            .step_by(chunk)
            .map(|s| s..(s + chunk).min(self.len()))
            .collect()
    }
}

pub fn enumerate_space(
    workload: &Workload,
    cfg: &ValidatedConfig,
    policy: SpacePolicy,
) -> Result<MappingSpace, MappingError> {
    let candidates = candidate_lists(workload, policy);
    let mut points = Vec::new();
    let mut overflow = false;
    walk_feasible(&candidates, cfg.multipliers(), &mut |t| {
        if points.len() >= MAX_SPACE_POINTS {
            overflow = true;
            return false;
        }
        points.push(workload.mapping_from_tiles(t));
        true
    });
    if overflow {
        return Err(MappingError::SpaceTooLarge(MAX_SPACE_POINTS));
    }
    Ok(MappingSpace {
        workload: *workload,
        policy,
        candidates,
        points,
    })
}

/// Number of feasible mappings, counting stops once `cap` is exceeded.
pub fn count_space(workload: &Workload, cfg: &ValidatedConfig, policy: SpacePolicy, cap: usize) -> usize {
    let lists = candidate_lists(workload, policy);
    let mut n = 0usize;
    walk_feasible(&lists, cfg.multipliers(), &mut |_| {
        n += 1;
        n <= cap
    });
    n
}

// ---------------------------------------------------------------------------
// Mapping file

/// `{ "<layer-id>": { "t_r": .., ... } }`. Tiles left out of an entry
/// default to 1.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MappingFile {
    entries: BTreeMap<String, BTreeMap<String, usize>>,
}

impl MappingFile {
    pub fn parse(text: &str) -> Result<Self, MappingError> {
        let file: MappingFile = serde_json::from_str(text).map_err(|e| MappingError::Malformed(e.to_string()))?;
        for (id, tiles) in &file.entries {
            if let Some(bad) = tiles.keys().find(|k| !CONV_TILES.contains(&k.as_str())) {
                return Err(MappingError::Malformed(format!("layer '{id}': unknown tile '{bad}'")));
            }
        }
        Ok(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("mapping file serializes")
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn layer_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn insert(&mut self, layer_id: &str, m: &Mapping) {
        let tiles = m.tile_names().iter().map(|n| n.to_string()).zip(m.tiles()).collect();
        self.entries.insert(layer_id.to_string(), tiles);
    }

    /// Mapping for `layer`, `None` when the file has no entry for it.
    pub fn get(&self, layer: &Layer) -> Result<Option<Mapping>, MappingError> {
        let Some(tiles) = self.entries.get(&layer.id) else {
            return Ok(None);
        };
        let names: &[&str] = match &layer.op {
            Op::Conv2d { .. } => &CONV_TILES,
            Op::Dense(_) => &FC_TILES,
            other => {
                return Err(MappingError::UnsupportedKind {
                    id: layer.id.clone(),
                    op: other.name().to_string(),
                })
            }
        };
        if let Some(bad) = tiles.keys().find(|k| !names.contains(&k.as_str())) {
            return Err(MappingError::Malformed(format!(
                "layer '{}': tile '{bad}' does not apply to {}",
                layer.id,
                layer.op.name()
            )));
        }
        let values: Vec<usize> = names.iter().map(|n| tiles.get(*n).copied().unwrap_or(1)).collect();
        Ok(Some(match &layer.op {
            Op::Conv2d { .. } => Mapping::Conv(ConvMapping::from_tiles(&values)),
            _ => Mapping::Fc(FcMapping {
                t_s: values[0],
                t_n: values[1],
                t_k: values[2],
            }),
        }))
    }

    /// Checks every entry against the model and config.
    pub fn validate_against(&self, model: &Model, cfg: &ValidatedConfig) -> Result<(), MappingError> {
        for id in self.entries.keys() {
            let layer = model
                .layer(id)
                .ok_or_else(|| MappingError::Malformed(format!("no layer '{id}' in model {}", model.name)))?;
            let m = self.get(layer)?.expect("entry exists");
            validate_mapping(&m, &Workload::from_layer(layer)?, cfg)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// External mapping providers

/// A specialized mapping tool plugged in from outside.
pub trait MappingProvider: Send + Sync {
    fn provide(&self, layer: &Layer, cfg: &ValidatedConfig) -> Result<Mapping, MappingError>;
}

/// Provider backed by a mapping file written by an external tool. The file
/// is read on every request.
#[derive(Debug, Clone)]
pub struct FileMappingProvider {
    pub id: String,
    pub path: PathBuf,
}

impl MappingProvider for FileMappingProvider {
    fn provide(&self, layer: &Layer, _cfg: &ValidatedConfig) -> Result<Mapping, MappingError> {
        let text = std::fs::read_to_string(&self.path).map_err(|e| MappingError::ProviderUnreadable {
            provider: self.id.clone(),
            path: self.path.clone(),
            reason: e.to_string(),
        })?;
        MappingFile::parse(&text)?
            .get(layer)?
            .ok_or_else(|| MappingError::MissingEntry {
                provider: self.id.clone(),
                layer: layer.id.clone(),
            })
    }
}

#[derive(Default)]
pub struct ProviderRegistry {
    providers: BTreeMap<String, Box<dyn MappingProvider>>,
}

impl ProviderRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, id: impl Into<String>, provider: Box<dyn MappingProvider>) {
        self.providers.insert(id.into(), provider);
    }

    pub fn register_file(&mut self, id: impl Into<String>, path: impl Into<PathBuf>) {
        let id = id.into();
        let provider = FileMappingProvider {
            id: id.clone(),
            path: path.into(),
        };
        self.register(id, Box::new(provider));
    }
}

/// Asks a registered provider for a mapping and validates it before use.
pub fn external_mapping_provider(
    registry: &ProviderRegistry,
    layer: &Layer,
    cfg: &ValidatedConfig,
    provider_id: &str,
) -> Result<Mapping, MappingError> {
    let provider = registry
        .providers
        .get(provider_id)
        .ok_or_else(|| MappingError::UnknownProvider(provider_id.to_string()))?;
    let m = provider.provide(layer, cfg)?;
    validate_mapping(&m, &Workload::from_layer(layer)?, cfg)?;
    Ok(m)
}
