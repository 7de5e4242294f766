//! The hierarchical store: atomic batched writes, monotone revisions and
//! change events.
//!
//! Writes go through [`DataTree::commit`], which validates a whole batch before
//! touching anything, so a failed batch leaves the tree untouched. Branch nodes
//! share structure, and [`DataTree::clone`] is a cheap immutable snapshot that
//! readers on other threads can hold while the single writer moves on.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::path::Path;
use crate::value::{Children, Value};

/// Server-wide commit counter. Zero means "nothing committed yet".
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Revision(pub u64);

impl Revision {
    pub fn next(self) -> Revision {
        Revision(self.0 + 1)
    }
}

impl fmt::Display for Revision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WriteAction {
    Set(Value),
    Delete,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WriteOp {
    pub path: Path,
    pub action: WriteAction,
}

impl WriteOp {
    pub fn set(path: Path, value: impl Into<Value>) -> Self {
        Self {
            path,
            action: WriteAction::Set(value.into()),
        }
    }

    pub fn delete(path: Path) -> Self {
        Self {
            path,
            action: WriteAction::Delete,
        }
    }

    pub fn value(&self) -> Option<&Value> {
        match &self.action {
            WriteAction::Set(v) => Some(v),
            WriteAction::Delete => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChangeEvent {
    pub revision: Revision,
    pub path: Path,
    pub new_value: Option<Value>,
    pub server_time_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TreeError {
    #[error("overlapping paths in batch: {0} and {1}")]
    OverlappingPaths(Path, Path),
    #[error("non-finite number written at {0}")]
    NonFiniteNumber(Path),
    #[error("malformed document: {0}")]
    MalformedDocument(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommitOutcome {
    pub revision: Revision,
    pub events: Vec<ChangeEvent>,
}

/// Rejects batches where one path equals or contains another.
pub fn check_disjoint(batch: &[WriteOp]) -> Result<(), TreeError> {
    let mut paths: Vec<&Path> = batch.iter().map(|op| &op.path).collect();
    paths.sort();
    for pair in paths.windows(2) {
        if pair[0].is_ancestor_or_equal(pair[1]) {
            return Err(TreeError::OverlappingPaths(pair[0].clone(), pair[1].clone()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataTree {
    root: Option<Value>,
    revision: Revision,
}

impl DataTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn revision(&self) -> Revision {
        self.revision
    }

    /// Overrides the revision counter, used when restoring persisted state.
    pub fn set_revision(&mut self, revision: Revision) {
        self.revision = revision;
    }

    pub fn root(&self) -> Option<&Value> {
        self.root.as_ref()
    }

    pub fn is_empty(&self) -> bool {
        self.root.is_none()
    }

    pub fn get(&self, path: &Path) -> Option<&Value> {
        let mut node = self.root.as_ref()?;
        for seg in path.segments() {
            node = node.as_branch()?.get(seg)?;
        }
        Some(node)
    }

    /// Applies a batch atomically and returns the new revision with one event
    /// per write that changed the tree.
    pub fn commit(&mut self, batch: &[WriteOp], server_time_ms: u64) -> Result<CommitOutcome, TreeError> {
        check_disjoint(batch)?;
        let mut prepared = Vec::with_capacity(batch.len());
        for op in batch {
            match &op.action {
                WriteAction::Set(v) => {
                    if v.find_non_finite().is_some() {
                        return Err(TreeError::NonFiniteNumber(op.path.clone()));
                    }
                    prepared.push((&op.path, v.clone().pruned()));
                }
                WriteAction::Delete => prepared.push((&op.path, None)),
            }
        }

        let revision = self.revision.next();
        let mut events = Vec::new();
        for (path, value) in prepared {
            let touched = match &value {
                Some(v) => {
                    set_in(&mut self.root, path.segments(), v.clone());
                    true
                }
                None => self.get(path).is_some() && delete_in(&mut self.root, path.segments()),
            };
            if touched {
                events.push(ChangeEvent {
                    revision,
                    path: path.clone(),
                    new_value: value,
                    server_time_ms,
                });
            }
        }
        self.revision = revision;
        Ok(CommitOutcome { revision, events })
    }

    /// Deterministic canonical JSON document of the whole tree.
    pub fn serialize_snapshot(&self) -> String {
        match &self.root {
            None => "{}".to_owned(),
            Some(v) => v.to_canonical_json(),
        }
    }

    /// Parses a canonical (or any well-formed) document. The revision starts at zero.
    pub fn restore_snapshot(text: &str) -> Result<Self, TreeError> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| TreeError::MalformedDocument(e.to_string()))?;
        Ok(Self {
            root: value.pruned(),
            revision: Revision(0),
        })
    }
}

fn set_in(node: &mut Option<Value>, segs: &[String], value: Value) {
    let Some((head, rest)) = segs.split_first() else {
        *node = Some(value);
        return;
    };
    if !matches!(node, Some(Value::Branch(_))) {
        *node = Some(Value::Branch(Arc::new(Children::new())));
    }
    let Some(Value::Branch(children)) = node else {
        unreachable!()
    };
    let children = Arc::make_mut(children);
    let mut child = children.remove(head);
    set_in(&mut child, rest, value);
    if let Some(child) = child {
        children.insert(head.clone(), child);
    }
}

/// Removes the node at `segs`, pruning branches left empty. Caller guarantees
/// the node exists so that no shared branch is cloned for a no-op.
fn delete_in(node: &mut Option<Value>, segs: &[String]) -> bool {
    let Some((head, rest)) = segs.split_first() else {
        return node.take().is_some();
    };
    let Some(Value::Branch(children)) = node else {
        return false;
    };
    let children = Arc::make_mut(children);
    let mut child = children.remove(head);
    let removed = delete_in(&mut child, rest);
    if let Some(child) = child {
        children.insert(head.clone(), child);
    }
    if children.is_empty() {
        *node = None;
    }
    removed
}

/// The example document used throughout the tests and the seeded server.
pub fn example_document() -> Value {
    Value::branch([
        (
            "sensors",
            Value::branch([
                ("temperature", Value::Number(23.2)),
                ("humidity", Value::Number(72.2)),
                ("distance", Value::Number(17.68)),
            ]),
        ),
        (
            "leds",
            Value::branch([("led1", Value::Bool(false)), ("led2", Value::Bool(false))]),
        ),
        (
            "metadata",
            Value::branch([
                ("last_update", Value::from("2024-01-15T10:30:00Z")),
                ("device_id", Value::from("ESP32_001")),
            ]),
        ),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> Path {
        Path::parse(s).unwrap()
    }

    fn seeded() -> DataTree {
        let mut t = DataTree::new();
        t.commit(&[WriteOp::set(Path::root(), example_document())], 0)
            .unwrap();
        t
    }

    #[test]
    fn get_on_seeded_document() {
        let t = seeded();
        assert_eq!(t.get(&p("/sensors/temperature")), Some(&Value::Number(23.2)));
        let sensors = t.get(&p("/sensors")).unwrap();
        assert_eq!(
            sensors.to_canonical_json(),
            r#"{"distance":17.68,"humidity":72.2,"temperature":23.2}"#
        );
        assert!(t.get(&p("/sensors/temperature/x")).is_none());
    }

    #[test]
    fn empty_tree_reads_absent() {
        let t = DataTree::new();
        assert!(t.get(&p("/anything")).is_none());
        assert!(t.get(&Path::root()).is_none());
    }

    #[test]
    fn set_produces_one_event() {
        let mut t = seeded();
        let out = t
            .commit(&[WriteOp::set(p("/leds/led1"), true)], 5)
            .unwrap();
        assert_eq!(out.revision, Revision(2));
        assert_eq!(out.events.len(), 1);
        assert_eq!(out.events[0].path, p("/leds/led1"));
        assert_eq!(out.events[0].server_time_ms, 5);
        assert_eq!(t.get(&p("/leds/led1")), Some(&Value::Bool(true)));
    }

    #[test]
    fn overlapping_batch_rejected_atomically() {
        let mut t = seeded();
        let before = t.clone();
        let err = t
            .commit(
                &[WriteOp::set(p("/a/b"), 1.0), WriteOp::set(p("/a"), 2.0)],
                0,
            )
            .unwrap_err();
        assert!(matches!(err, TreeError::OverlappingPaths(_, _)));
        assert_eq!(t, before);
        assert!(matches!(
            t.commit(&[WriteOp::set(p("/x"), 1.0), WriteOp::delete(p("/x"))], 0),
            Err(TreeError::OverlappingPaths(_, _))
        ));
    }

    #[test]
    fn non_finite_rejected() {
        let mut t = DataTree::new();
        let err = t
            .commit(
                &[
                    WriteOp::set(p("/ok"), 1.0),
                    WriteOp::set(p("/bad"), f64::INFINITY),
                ],
                0,
            )
            .unwrap_err();
        assert_eq!(err, TreeError::NonFiniteNumber(p("/bad")));
        assert!(t.is_empty());
        assert_eq!(t.revision(), Revision(0));
    }

    #[test]
    fn batch_reproduces_sensor_branch() {
        let mut t = DataTree::new();
        let out = t
            .commit(
                &[
                    WriteOp::set(p("/sensors/temperature"), 23.2),
                    WriteOp::set(p("/sensors/humidity"), 72.2),
                    WriteOp::set(p("/sensors/distance"), 17.68),
                ],
                0,
            )
            .unwrap();
        assert_eq!(out.revision, Revision(1));
        assert_eq!(out.events.len(), 3);
        assert!(out.events.iter().all(|e| e.revision == Revision(1)));
        assert_eq!(
            t.get(&p("/sensors")),
            seeded().get(&p("/sensors"))
        );
    }

    #[test]
    fn delete_prunes_and_absent_delete_is_silent() {
        let mut t = DataTree::new();
        t.commit(&[WriteOp::set(p("/a/b/c"), 1.0)], 0).unwrap();
        let out = t.commit(&[WriteOp::delete(p("/a/b/c"))], 0).unwrap();
        assert_eq!(out.events.len(), 1);
        assert!(t.is_empty());
        let out = t.commit(&[WriteOp::delete(p("/nope/x"))], 0).unwrap();
        assert!(out.events.is_empty());
        assert_eq!(out.revision, Revision(3));
    }

    #[test]
    fn set_branch_replaces_subtree() {
        let mut t = seeded();
        t.commit(
            &[WriteOp::set(
                p("/sensors"),
                Value::branch([("temperature", Value::Number(1.0))]),
            )],
            0,
        )
        .unwrap();
        assert!(t.get(&p("/sensors/humidity")).is_none());
        assert_eq!(t.get(&p("/sensors/temperature")), Some(&Value::Number(1.0)));
    }

    #[test]
    fn set_through_scalar_replaces_it() {
        let mut t = DataTree::new();
        t.commit(&[WriteOp::set(p("/a"), 5.0)], 0).unwrap();
        t.commit(&[WriteOp::set(p("/a/b"), true)], 0).unwrap();
        assert_eq!(t.serialize_snapshot(), r#"{"a":{"b":true}}"#);
        // deleting below a scalar is a no-op
        t.commit(&[WriteOp::set(p("/x"), 1.0)], 0).unwrap();
        let out = t.commit(&[WriteOp::delete(p("/x/y"))], 0).unwrap();
        assert!(out.events.is_empty());
    }

    #[test]
    fn setting_empty_branch_deletes() {
        let mut t = seeded();
        let out = t
            .commit(&[WriteOp::set(p("/leds"), Value::branch::<[(&str, Value); 0], &str>([]))], 0)
            .unwrap();
        assert_eq!(out.events[0].new_value, None);
        assert!(t.get(&p("/leds")).is_none());
    }

    #[test]
    fn snapshots_round_trip() {
        assert_eq!(DataTree::new().serialize_snapshot(), "{}");
        assert!(DataTree::restore_snapshot("{}").unwrap().is_empty());
        let t = seeded();
        let text = t.serialize_snapshot();
        assert_eq!(
            text,
            r#"{"leds":{"led1":false,"led2":false},"metadata":{"device_id":"ESP32_001","last_update":"2024-01-15T10:30:00Z"},"sensors":{"distance":17.68,"humidity":72.2,"temperature":23.2}}"#
        );
        let back = DataTree::restore_snapshot(&text).unwrap();
        assert_eq!(back.root(), t.root());
        assert!(matches!(
            DataTree::restore_snapshot(r#"{"a":1,"a":2}"#),
            Err(TreeError::MalformedDocument(_))
        ));
        assert!(matches!(
            DataTree::restore_snapshot("{\"a\":"),
            Err(TreeError::MalformedDocument(_))
        ));
    }

    #[test]
    fn snapshot_is_isolated_from_later_writes() {
        let mut t = seeded();
        let snap = t.clone();
        t.commit(&[WriteOp::set(p("/leds/led1"), true)], 0).unwrap();
        assert_eq!(snap.get(&p("/leds/led1")), Some(&Value::Bool(false)));
    }
}
