//! Named parameter containers.
//!
//! A [`ParamStore`] is an ordered list of named, shaped `f64` arrays. Teacher
//! and student models are both stored this way, and every cross-store
//! operation (distances, smoothing updates, optimizer steps) requires the two
//! stores to be *congruent*: same unit names, shapes and kinds, in the same
//! order.
//!
//! The replaceable fragments used by spatial ensembling are enumerated with
//! [`ParamStore::enumerate_slots`] at one of three [`Granularity`] levels.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitKind {
    Weight,
    Bias,
    /// Non-trainable state such as running statistics.
    Buffer,
}

impl UnitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            UnitKind::Weight => "weight",
            UnitKind::Bias => "bias",
            UnitKind::Buffer => "buffer",
        }
    }
}

/// Name, shape and kind of a unit, without data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: UnitKind,
}

impl UnitSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], kind: UnitKind) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            kind,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// One named array.
#[derive(Debug, Clone, PartialEq)]
pub struct Unit {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: UnitKind,
    pub data: Vec<f64>,
}

impl Unit {
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    fn same_layout(&self, other: &Unit) -> bool {
        self.name == other.name && self.shape == other.shape && self.kind == other.kind
    }
}

/// How weights are initialized by [`ParamStore::new`]. Biases and buffers
/// always start at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitRule {
    Zeros,
    /// Uniform on `[-bound, bound]`.
    Uniform { bound: f64 },
    /// Uniform on `[-1/sqrt(d_in), 1/sqrt(d_in)]` where `d_in` is the first
    /// dimension of the weight.
    FanIn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Granularity {
    #[serde(rename = "lw")]
    LayerWise,
    #[serde(rename = "cw")]
    ChannelWise,
    #[serde(rename = "nw")]
    NeuronWise,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::LayerWise => "lw",
            Granularity::ChannelWise => "cw",
            Granularity::NeuronWise => "nw",
        }
    }
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lw" => Ok(Granularity::LayerWise),
            "cw" => Ok(Granularity::ChannelWise),
            "nw" => Ok(Granularity::NeuronWise),
            other => Err(Error::config("smoothing.granularity", format!("unknown granularity `{other}`"))),
        }
    }
}

/// Index set of one slot inside a unit's flat, row-major data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotIndices {
    Contiguous { start: usize, len: usize },
    Strided { start: usize, stride: usize, count: usize },
}

impl SlotIndices {
    pub fn len(&self) -> usize {
        match *self {
            SlotIndices::Contiguous { len, .. } => len,
            SlotIndices::Strided { count, .. } => count,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> {
        let (start, step, count) = match *self {
            SlotIndices::Contiguous { start, len } => (start, 1, len),
            SlotIndices::Strided { start, stride, count } => (start, stride, count),
        };
        (0..count).map(move |k| start + k * step)
    }
}

/// A replaceable fragment of a store: some elements of exactly one unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotRef {
    pub unit: usize,
    pub indices: SlotIndices,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    units: Vec<Unit>,
}

impl ParamStore {
    /// Builds a store laid out as `specs`, initializing weights per `init`.
    pub fn new(specs: &[UnitSpec], init: InitRule, seed: u64) -> Result<Self> {
        let mut units = Vec::with_capacity(specs.len());
        for (index, spec) in specs.iter().enumerate() {
            let n = spec.numel();
            let data = match (spec.kind, init) {
                (UnitKind::Weight, InitRule::Uniform { bound }) => {
                    uniform_data(n, bound, seed, index as u64)
                }
                (UnitKind::Weight, InitRule::FanIn) => {
                    let fan_in = spec.shape.first().copied().unwrap_or(1).max(1);
                    uniform_data(n, 1.0 / (fan_in as f64).sqrt(), seed, index as u64)
                }
                _ => vec![0.0; n],
            };
            units.push(Unit {
                name: spec.name.clone(),
                shape: spec.shape.clone(),
                kind: spec.kind,
                data,
            });
        }
        Self::from_units(units)
    }

    /// Wraps already-populated units after validating them.
    pub fn from_units(units: Vec<Unit>) -> Result<Self> {
        let mut seen = HashSet::new();
        for unit in &units {
            if !seen.insert(unit.name.as_str()) {
                return Err(Error::Construction(format!(
                    "duplicate unit name `{}`",
                    unit.name
                )));
            }
            if unit.shape.is_empty() || unit.shape.contains(&0) {
                return Err(Error::Construction(format!(
                    "unit `{}` has invalid shape {:?}",
                    unit.name, unit.shape
                )));
            }
            let expected: usize = unit.shape.iter().product();
            if expected != unit.data.len() {
                return Err(Error::Construction(format!(
                    "unit `{}` has {} values but shape {:?} needs {}",
                    unit.name,
                    unit.data.len(),
                    unit.shape,
                    expected
                )));
            }
        }
        Ok(Self { units })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// A zero-filled store with the same layout as `self`.
    pub fn zeros_like(&self) -> Self {
        Self {
            units: self
                .units
                .iter()
                .map(|u| Unit {
                    data: vec![0.0; u.data.len()],
                    ..u.clone()
                })
                .collect(),
        }
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn units_mut(&mut self) -> &mut [Unit] {
        &mut self.units
    }

    pub fn unit(&self, name: &str) -> Option<&Unit> {
        self.units.iter().find(|u| u.name == name)
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Total number of scalars across all units.
    pub fn numel(&self) -> usize {
        self.units.iter().map(Unit::numel).sum()
    }

    /// All scalars in unit order.
    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.units.iter().flat_map(|u| u.data.iter().copied())
    }

    pub fn is_congruent(&self, other: &ParamStore) -> bool {
        self.units.len() == other.units.len()
            && self
                .units
                .iter()
                .zip(&other.units)
                .all(|(a, b)| a.same_layout(b))
    }

    pub fn check_congruent(&self, other: &ParamStore) -> Result<()> {
        if self.units.len() != other.units.len() {
            return Err(Error::Congruence(format!(
                "{} units vs {} units",
                self.units.len(),
                other.units.len()
            )));
        }
        for (i, (a, b)) in self.units.iter().zip(&other.units).enumerate() {
            if !a.same_layout(b) {
                return Err(Error::Congruence(format!(
                    "unit {i}: `{}` {:?} {} vs `{}` {:?} {}",
                    a.name,
                    a.shape,
                    a.kind.as_str(),
                    b.name,
                    b.shape,
                    b.kind.as_str()
                )));
            }
        }
        Ok(())
    }

    /// Enumerates slots in unit order, then index order.
    ///
    /// Channel-wise slicing takes one slot per index of the last dimension
    /// (`C_out` for a `C_in x C_out` weight); 1-D units get one slot per
    /// element.
    pub fn enumerate_slots(&self, granularity: Granularity) -> Vec<SlotRef> {
        let mut slots = Vec::new();
        for (unit_index, unit) in self.units.iter().enumerate() {
            push_unit_slots(&mut slots, unit_index, unit, granularity);
        }
        slots
    }

    /// Like [`enumerate_slots`](Self::enumerate_slots) but skipping units for
    /// which `keep` returns false.
    pub fn enumerate_slots_where(
        &self,
        granularity: Granularity,
        keep: impl Fn(&Unit) -> bool,
    ) -> Vec<SlotRef> {
        let mut slots = Vec::new();
        for (unit_index, unit) in self.units.iter().enumerate() {
            if keep(unit) {
                push_unit_slots(&mut slots, unit_index, unit, granularity);
            }
        }
        slots
    }

    /// Mean squared element-wise difference over every scalar of every unit.
    pub fn mse(&self, other: &ParamStore) -> Result<f64> {
        self.check_congruent(other)?;
        let n = self.numel();
        if n == 0 {
            return Ok(0.0);
        }
        let sum: f64 = self
            .units
            .iter()
            .zip(&other.units)
            .flat_map(|(a, b)| a.data.iter().zip(&b.data))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(sum / n as f64)
    }

    /// Overwrites every value with the corresponding value of `other`.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        self.check_congruent(other)?;
        for (dst, src) in self.units.iter_mut().zip(&other.units) {
            dst.data.copy_from_slice(&src.data);
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &ParamStore, alpha: f64) -> Result<()> {
        self.check_congruent(other)?;
        for (dst, src) in self.units.iter_mut().zip(&other.units) {
            for (d, s) in dst.data.iter_mut().zip(&src.data) {
                *d += alpha * s;
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.flat().all(f64::is_finite)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = SnapshotDoc {
            version: SNAPSHOT_VERSION,
            units: self
                .units
                .iter()
                .map(|u| {
                    if let Some(bad) = u.data.iter().find(|v| !v.is_finite()) {
                        return Err(Error::Format(format!(
                            "unit `{}` holds non-finite value {bad}",
                            u.name
                        )));
                    }
                    Ok(SnapshotUnit {
                        name: u.name.clone(),
                        shape: u.shape.clone(),
                        kind: u.kind,
                        data: u.data.clone(),
                    })
                })
                .collect::<Result<_>>()?,
        };
        serde_json::to_string(&doc).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: SnapshotDoc =
            serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if doc.version != SNAPSHOT_VERSION {
            return Err(Error::Format(format!(
                "unsupported snapshot version {}",
                doc.version
            )));
        }
        let units = doc
            .units
            .into_iter()
            .map(|u| {
                let expected: usize = u.shape.iter().product();
                if u.shape.is_empty() || u.shape.contains(&0) || expected != u.data.len() {
                    return Err(Error::Format(format!(
                        "unit `{}`: shape {:?} does not match {} values",
                        u.name,
                        u.shape,
                        u.data.len()
                    )));
                }
                Ok(Unit {
                    name: u.name,
                    shape: u.shape,
                    kind: u.kind,
                    data: u.data,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_units(units).map_err(|e| Error::Format(e.to_string()))
    }

    /// Writes the snapshot atomically (temp file, then rename).
    pub fn save_snapshot(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        write_atomic(path, text.as_bytes())
    }

    pub fn load_snapshot(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

const SNAPSHOT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotDoc {
    version: u32,
    units: Vec<SnapshotUnit>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotUnit {
    name: String,
    shape: Vec<usize>,
    kind: UnitKind,
    data: Vec<f64>,
}

fn uniform_data(n: usize, bound: f64, seed: u64, unit_index: u64) -> Vec<f64> {
    let mut rng = rng::stream(seed, Domain::Init, unit_index);
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            bound * (2.0 * u - 1.0)
        })
        .collect()
}

fn push_unit_slots(slots: &mut Vec<SlotRef>, unit_index: usize, unit: &Unit, g: Granularity) {
    let n = unit.numel();
    let contiguous = |start, len| SlotRef {
        unit: unit_index,
        indices: SlotIndices::Contiguous { start, len },
    };
    match g {
        Granularity::LayerWise => slots.push(contiguous(0, n)),
        Granularity::NeuronWise => slots.extend((0..n).map(|i| contiguous(i, 1))),
        Granularity::ChannelWise if unit.shape.len() < 2 => {
            slots.extend((0..n).map(|i| contiguous(i, 1)))
        }
        Granularity::ChannelWise => {
            let channels = *unit.shape.last().expect("non-empty shape");
            let count = n / channels;
            slots.extend((0..channels).map(|c| SlotRef {
                unit: unit_index,
                indices: SlotIndices::Strided {
                    start: c,
                    stride: channels,
                    count,
                },
            }));
        }
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
