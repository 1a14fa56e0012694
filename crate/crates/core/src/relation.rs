//! Incremental proposition matrix: the spatial relation between every old
//! class and every new class at one continual-learning step.
//!
//! Cells are indexed `(old row, new column)` and phrased from the new class's
//! point of view: [`RelationKind::NewSubsetOfOld`] means the new class lies
//! inside the old one. Matrices are immutable snapshots; moving to the next
//! step builds a fresh matrix with [`PropositionMatrix::advance_step`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RelationKind {
    /// The new class contains the old class.
    #[serde(rename = "SUPERSET")]
    NewSupersetOfOld,
    /// The new class lies inside the old class.
    #[serde(rename = "SUBSET")]
    NewSubsetOfOld,
    #[serde(rename = "EXCLUSIVE")]
    MutuallyExclusive,
    #[serde(rename = "UNRELATED")]
    Unrelated,
}

impl RelationKind {
    pub const ALL: [RelationKind; 4] = [
        RelationKind::NewSupersetOfOld,
        RelationKind::NewSubsetOfOld,
        RelationKind::MutuallyExclusive,
        RelationKind::Unrelated,
    ];
}

impl fmt::Display for RelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RelationKind::NewSupersetOfOld => "SUPERSET",
            RelationKind::NewSubsetOfOld => "SUBSET",
            RelationKind::MutuallyExclusive => "EXCLUSIVE",
            RelationKind::Unrelated => "UNRELATED",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassGroup {
    Region,
    Unit,
    Cell,
    Lesion,
}

impl ClassGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassGroup::Region => "region",
            ClassGroup::Unit => "unit",
            ClassGroup::Cell => "cell",
            ClassGroup::Lesion => "lesion",
        }
    }
}

impl FromStr for ClassGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "region" => Ok(ClassGroup::Region),
            "unit" => Ok(ClassGroup::Unit),
            "cell" => Ok(ClassGroup::Cell),
            "lesion" => Ok(ClassGroup::Lesion),
            other => Err(Error::Format(format!("unknown class group {other:?}"))),
        }
    }
}

/// One of the four nominal magnifications.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scale {
    #[serde(rename = "5x")]
    X5,
    #[serde(rename = "10x")]
    X10,
    #[serde(rename = "20x")]
    X20,
    #[serde(rename = "40x")]
    X40,
}

impl Scale {
    pub const COUNT: usize = 4;

    /// Row of the scale token bank.
    pub fn index(self) -> usize {
        match self {
            Scale::X5 => 0,
            Scale::X10 => 1,
            Scale::X20 => 2,
            Scale::X40 => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scale::X5 => "5x",
            Scale::X10 => "10x",
            Scale::X20 => "20x",
            Scale::X40 => "40x",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: usize,
    pub name: String,
    pub group: ClassGroup,
    pub scale: Scale,
    pub step_introduced: u32,
}

/// Classes registered so far; ids are dense and follow registration order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRegistry {
    classes: Vec<ClassInfo>,
}

impl ClassRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_classes(classes: Vec<ClassInfo>) -> Result<Self> {
        let mut reg = Self::new();
        for c in classes {
            reg.register(c)?;
        }
        Ok(reg)
    }

    /// Append a class; its id must be the next free id.
    pub fn register(&mut self, class: ClassInfo) -> Result<()> {
        if class.id < self.classes.len() {
            return Err(Error::DuplicateClass(class.id));
        }
        if class.id != self.classes.len() {
            return Err(Error::Format(format!(
                "class id {} breaks dense registration order (expected {})",
                class.id,
                self.classes.len()
            )));
        }
        if class.step_introduced == 0 {
            return Err(Error::Format(format!("class {} has step_introduced 0", class.id)));
        }
        self.classes.push(class);
        Ok(())
    }

    pub fn get(&self, id: usize) -> Result<&ClassInfo> {
        self.classes.get(id).ok_or(Error::UnknownClass(id))
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn introduced_at(&self, step: u32) -> Vec<&ClassInfo> {
        self.classes.iter().filter(|c| c.step_introduced == step).collect()
    }

    pub fn introduced_before(&self, step: u32) -> Vec<&ClassInfo> {
        self.classes.iter().filter(|c| c.step_introduced < step).collect()
    }
}

pub type Assignments = HashMap<(usize, usize), RelationKind>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropositionMatrix {
    step: u32,
    old_classes: Vec<ClassInfo>,
    new_classes: Vec<ClassInfo>,
    entries: Vec<Vec<RelationKind>>,
}

impl PropositionMatrix {
    /// Build the step-`step` matrix; every (old, new) pair must be assigned.
    pub fn build(
        step: u32,
        old_classes: Vec<ClassInfo>,
        new_classes: Vec<ClassInfo>,
        assignments: &Assignments,
    ) -> Result<Self> {
        check_disjoint(&old_classes, &new_classes)?;
        let entries = old_classes
            .iter()
            .map(|o| {
                new_classes
                    .iter()
                    .map(|n| {
                        assignments
                            .get(&(o.id, n.id))
                            .copied()
                            .ok_or(Error::MissingPair { old: o.id, new: n.id })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { step, old_classes, new_classes, entries })
    }

    /// Matrix for the next step: every class seen so far becomes old and
    /// `incoming` becomes new.
    pub fn advance_step(&self, incoming: Vec<ClassInfo>, assignments: &Assignments) -> Result<Self> {
        let mut old = self.old_classes.clone();
        old.extend(self.new_classes.iter().cloned());
        Self::build(self.step + 1, old, incoming, assignments)
    }

    pub fn lookup(&self, old_id: usize, new_id: usize) -> Result<RelationKind> {
        let row = self.old_row(old_id).ok_or(Error::UnknownClass(old_id))?;
        let col = self.new_col(new_id).ok_or(Error::UnknownClass(new_id))?;
        Ok(self.entries[row][col])
    }

    pub fn step(&self) -> u32 {
        self.step
    }

    pub fn old_classes(&self) -> &[ClassInfo] {
        &self.old_classes
    }

    pub fn new_classes(&self) -> &[ClassInfo] {
        &self.new_classes
    }

    /// `(rows, cols)` = (old count, new count).
    pub fn dims(&self) -> (usize, usize) {
        (self.old_classes.len(), self.new_classes.len())
    }

    pub fn entries(&self) -> &[Vec<RelationKind>] {
        &self.entries
    }

    fn old_row(&self, id: usize) -> Option<usize> {
        self.old_classes.iter().position(|c| c.id == id)
    }

    fn new_col(&self, id: usize) -> Option<usize> {
        self.new_classes.iter().position(|c| c.id == id)
    }

    /// Old classes whose relation to `new_id` is not `Unrelated`.
    pub fn related_old(&self, new_id: usize) -> Result<Vec<(usize, RelationKind)>> {
        let col = self.new_col(new_id).ok_or(Error::UnknownClass(new_id))?;
        Ok(self
            .old_classes
            .iter()
            .zip(&self.entries)
            .map(|(c, row)| (c.id, row[col]))
            .filter(|(_, r)| *r != RelationKind::Unrelated)
            .collect())
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("matrix serializes");
        bytes.push(b'\n');
        bytes
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let m: PropositionMatrix = serde_json::from_slice(bytes)?;
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        if self.entries.len() != self.old_classes.len() {
            return Err(Error::Format(format!(
                "matrix has {} rows for {} old classes",
                self.entries.len(),
                self.old_classes.len()
            )));
        }
        if let Some(row) = self.entries.iter().find(|r| r.len() != self.new_classes.len()) {
            return Err(Error::Format(format!(
                "matrix row has {} cells for {} new classes",
                row.len(),
                self.new_classes.len()
            )));
        }
        check_disjoint(&self.old_classes, &self.new_classes)
    }
}

fn check_disjoint(old: &[ClassInfo], new: &[ClassInfo]) -> Result<()> {
    let mut seen = HashSet::new();
    for c in old.iter().chain(new) {
        if !seen.insert(c.id) {
            return Err(Error::DuplicateClass(c.id));
        }
    }
    Ok(())
}

/// Every matrix produced over a run, one per step.
#[derive(Clone, Debug, Default)]
pub struct RelationHistory {
    snapshots: BTreeMap<u32, Arc<PropositionMatrix>>,
}

impl RelationHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, matrix: PropositionMatrix) -> Result<()> {
        if let Some((&last, _)) = self.snapshots.last_key_value() {
            if matrix.step != last + 1 {
                return Err(Error::StepMismatch(format!("history at step {last} cannot take step {}", matrix.step)));
            }
        }
        self.snapshots.insert(matrix.step, Arc::new(matrix));
        Ok(())
    }

    pub fn at_step(&self, step: u32) -> Option<&Arc<PropositionMatrix>> {
        self.snapshots.get(&step)
    }

    /// The relation recorded when `new_id` was introduced.
    pub fn relation(&self, old_id: usize, new_id: usize) -> Result<RelationKind> {
        let snap = self
            .snapshots
            .values()
            .find(|m| m.new_classes.iter().any(|c| c.id == new_id))
            .ok_or(Error::UnknownClass(new_id))?;
        snap.lookup(old_id, new_id)
    }

    pub fn latest(&self) -> Option<&Arc<PropositionMatrix>> {
        self.snapshots.values().next_back()
    }
}
