//! Access control and value validation, evaluated on every read and write.
//!
//! A [`RuleSet`] is an ordered list of path patterns. The first entry whose
//! pattern matches the path (a pattern matches its own path and everything
//! below it) decides; a path no entry matches is denied.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::path::{validate_segment, Path, PathError};
use crate::tree::{DataTree, WriteAction, WriteOp};
use crate::value::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrincipalKind {
    Device,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principal {
    pub id: String,
    pub kind: PrincipalKind,
}

/// Who is asking. Unauthenticated contexts never carry a principal.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AuthContext {
    principal: Option<Principal>,
}

impl AuthContext {
    pub fn anonymous() -> Self {
        Self { principal: None }
    }

    pub fn authenticated(principal: Principal) -> Self {
        Self {
            principal: Some(principal),
        }
    }

    pub fn device(id: &str) -> Self {
        Self::authenticated(Principal {
            id: id.to_owned(),
            kind: PrincipalKind::Device,
        })
    }

    pub fn user(id: &str) -> Self {
        Self::authenticated(Principal {
            id: id.to_owned(),
            kind: PrincipalKind::User,
        })
    }

    pub fn is_authenticated(&self) -> bool {
        self.principal.is_some()
    }

    pub fn principal(&self) -> Option<&Principal> {
        self.principal.as_ref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuthRequirement {
    Public,
    Authenticated,
    Device,
    Never,
}

impl AuthRequirement {
    fn check(self, auth: &AuthContext) -> Result<(), DenyReason> {
        match self {
            AuthRequirement::Public => Ok(()),
            AuthRequirement::Never => Err(DenyReason::Forbidden),
            _ if !auth.is_authenticated() => Err(DenyReason::AuthRequired),
            AuthRequirement::Authenticated => Ok(()),
            AuthRequirement::Device => match auth.principal() {
                Some(p) if p.kind == PrincipalKind::Device => Ok(()),
                _ => Err(DenyReason::DeviceRequired),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ValueConstraint {
    MustBeBoolean,
    NumberInRange { min: f64, max: f64 },
    TextMaxLength { max: usize },
    TimestampNotOlderThanCurrent,
}

/// Milliseconds since the epoch for a numeric or RFC 3339 text timestamp.
pub fn timestamp_millis(value: &Value) -> Option<i64> {
    match value {
        Value::Number(n) if n.is_finite() => Some(*n as i64),
        Value::Text(s) => chrono::DateTime::parse_from_rfc3339(s)
            .ok()
            .map(|t| t.timestamp_millis()),
        _ => None,
    }
}

impl ValueConstraint {
    /// Pure predicate over the candidate and the currently stored value.
    pub fn check(&self, candidate: &Value, current: Option<&Value>) -> Result<(), DenyReason> {
        match *self {
            ValueConstraint::MustBeBoolean => match candidate {
                Value::Bool(_) => Ok(()),
                _ => Err(DenyReason::MustBeBoolean),
            },
            ValueConstraint::NumberInRange { min, max } => match candidate {
                Value::Number(n) if (min..=max).contains(n) => Ok(()),
                _ => Err(DenyReason::NumberInRange { min, max }),
            },
            ValueConstraint::TextMaxLength { max } => match candidate {
                Value::Text(s) if s.chars().count() <= max => Ok(()),
                _ => Err(DenyReason::TextMaxLength { max }),
            },
            ValueConstraint::TimestampNotOlderThanCurrent => {
                let Some(new) = timestamp_millis(candidate) else {
                    return Err(DenyReason::MalformedTimestamp);
                };
                match current.and_then(timestamp_millis) {
                    Some(old) if new < old => Err(DenyReason::StaleTimestamp),
                    _ => Ok(()),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum PatternSegment {
    Literal(String),
    Wildcard(String),
}

/// A path whose segments may be `$name` wildcards, each binding one segment.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PathPattern {
    segments: Vec<PatternSegment>,
}

impl PathPattern {
    pub fn parse(text: &str) -> Result<Self, PathError> {
        let rest = text
            .strip_prefix('/')
            .ok_or_else(|| PathError::MissingLeadingSlash(text.to_owned()))?;
        let mut segments = Vec::new();
        if !rest.is_empty() {
            for seg in rest.split('/') {
                match seg.strip_prefix('$') {
                    Some(var) => {
                        validate_segment(var)?;
                        segments.push(PatternSegment::Wildcard(var.to_owned()));
                    }
                    None => {
                        validate_segment(seg)?;
                        segments.push(PatternSegment::Literal(seg.to_owned()));
                    }
                }
            }
        }
        Ok(Self { segments })
    }

    /// True when the pattern matches `path` or one of its ancestors.
    pub fn matches(&self, path: &Path) -> bool {
        self.segments.len() <= path.len()
            && self
                .segments
                .iter()
                .zip(path.segments())
                .all(|(pat, seg)| match pat {
                    PatternSegment::Literal(l) => l == seg,
                    PatternSegment::Wildcard(_) => true,
                })
    }
}

impl fmt::Display for PathPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.segments.is_empty() {
            return f.write_str("/");
        }
        for seg in &self.segments {
            match seg {
                PatternSegment::Literal(l) => write!(f, "/{l}")?,
                PatternSegment::Wildcard(w) => write!(f, "/${w}")?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleEntry {
    pub pattern: PathPattern,
    pub read: AuthRequirement,
    pub write: AuthRequirement,
    pub validate: Option<ValueConstraint>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DenyReason {
    NoMatchingRule,
    AuthRequired,
    DeviceRequired,
    Forbidden,
    MustBeBoolean,
    NumberInRange { min: f64, max: f64 },
    TextMaxLength { max: usize },
    StaleTimestamp,
    MalformedTimestamp,
}

impl DenyReason {
    pub fn name(&self) -> &'static str {
        match self {
            DenyReason::NoMatchingRule => "NoMatchingRule",
            DenyReason::AuthRequired => "AuthRequired",
            DenyReason::DeviceRequired => "DeviceRequired",
            DenyReason::Forbidden => "Forbidden",
            DenyReason::MustBeBoolean => "MustBeBoolean",
            DenyReason::NumberInRange { .. } => "NumberInRange",
            DenyReason::TextMaxLength { .. } => "TextMaxLength",
            DenyReason::StaleTimestamp => "StaleTimestamp",
            DenyReason::MalformedTimestamp => "MalformedTimestamp",
        }
    }
}

impl fmt::Display for DenyReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DenyReason::NumberInRange { min, max } => write!(f, "NumberInRange[{min},{max}]"),
            DenyReason::TextMaxLength { max } => write!(f, "TextMaxLength[{max}]"),
            other => f.write_str(other.name()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decision {
    Allow,
    Deny(DenyReason),
}

impl Decision {
    pub fn is_allowed(&self) -> bool {
        matches!(self, Decision::Allow)
    }

    fn from_result(r: Result<(), DenyReason>) -> Self {
        match r {
            Ok(()) => Decision::Allow,
            Err(reason) => Decision::Deny(reason),
        }
    }
}

#[derive(Debug, Error)]
pub enum RulesError {
    #[error("invalid rules document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid pattern {pattern:?}: {source}")]
    Pattern { pattern: String, source: PathError },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryBody {
    read: AuthRequirement,
    write: AuthRequirement,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    validate: Option<ValueConstraint>,
}

/// Ordered rule entries; anything unmatched is denied.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RuleSet {
    entries: Vec<RuleEntry>,
}

impl RuleSet {
    pub fn new(entries: Vec<RuleEntry>) -> Self {
        Self { entries }
    }

    /// Everything readable and writable by any authenticated principal.
    pub fn allow_authenticated() -> Self {
        Self::new(vec![RuleEntry {
            pattern: PathPattern::parse("/").unwrap(),
            read: AuthRequirement::Authenticated,
            write: AuthRequirement::Authenticated,
            validate: None,
        }])
    }

    pub fn entries(&self) -> &[RuleEntry] {
        &self.entries
    }

    pub fn matching(&self, path: &Path) -> Option<&RuleEntry> {
        self.entries.iter().find(|e| e.pattern.matches(path))
    }

    pub fn evaluate_read(&self, auth: &AuthContext, path: &Path) -> Decision {
        let Some(entry) = self.matching(path) else {
            return Decision::Deny(DenyReason::NoMatchingRule);
        };
        Decision::from_result(entry.read.check(auth))
    }

    /// Evaluates a single-node write. `candidate == None` is a deletion, which
    /// needs write permission but is not subject to value constraints.
    pub fn evaluate_write(
        &self,
        auth: &AuthContext,
        path: &Path,
        candidate: Option<&Value>,
        current: Option<&Value>,
        _now_ms: u64,
    ) -> Decision {
        let Some(entry) = self.matching(path) else {
            return Decision::Deny(DenyReason::NoMatchingRule);
        };
        Decision::from_result(entry.write.check(auth).and_then(|()| {
            match (entry.validate, candidate) {
                (Some(c), Some(v)) => c.check(v, current),
                _ => Ok(()),
            }
        }))
    }

    /// Checks a whole batch against the tree it would be applied to. Writes of
    /// branches are checked leaf by leaf, and every leaf a write would remove
    /// needs delete permission. Returns the first denied path.
    pub fn authorize_batch(
        &self,
        auth: &AuthContext,
        tree: &DataTree,
        batch: &[WriteOp],
        now_ms: u64,
    ) -> Result<(), (Path, DenyReason)> {
        for op in batch {
            let current = tree.get(&op.path);
            // a scalar ancestor is destroyed by any write beneath it
            if let WriteAction::Set(_) = op.action {
                let mut ancestor = op.path.parent();
                while let Some(a) = ancestor {
                    if let Some(v) = tree.get(&a) {
                        if !v.is_branch() {
                            self.check_node(auth, &a, None, Some(v), now_ms)?;
                        }
                        break;
                    }
                    ancestor = a.parent();
                }
            }
            let new = op.value().and_then(|v| v.clone().pruned());
            match &new {
                Some(Value::Branch(_)) | None => {
                    if let Some(v) = &new {
                        self.check_leaves(auth, &op.path, v, tree, now_ms)?;
                    }
                    match current {
                        Some(cur) => self.check_removed(auth, &op.path, cur, new.as_ref(), now_ms)?,
                        None if new.is_none() => {
                            self.check_node(auth, &op.path, None, None, now_ms)?
                        }
                        None => {}
                    }
                }
                Some(leaf) => {
                    self.check_node(auth, &op.path, Some(leaf), current, now_ms)?;
                    if let Some(cur @ Value::Branch(_)) = current {
                        self.check_removed(auth, &op.path, cur, None, now_ms)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn check_node(
        &self,
        auth: &AuthContext,
        path: &Path,
        candidate: Option<&Value>,
        current: Option<&Value>,
        now_ms: u64,
    ) -> Result<(), (Path, DenyReason)> {
        match self.evaluate_write(auth, path, candidate, current, now_ms) {
            Decision::Allow => Ok(()),
            Decision::Deny(r) => Err((path.clone(), r)),
        }
    }

    fn check_leaves(
        &self,
        auth: &AuthContext,
        base: &Path,
        value: &Value,
        tree: &DataTree,
        now_ms: u64,
    ) -> Result<(), (Path, DenyReason)> {
        let mut result = Ok(());
        value.for_each_leaf(&mut Vec::new(), &mut |rel, leaf| {
            if result.is_err() {
                return;
            }
            let path = join(base, rel);
            let current = tree.get(&path);
            result = self.check_node(auth, &path, Some(leaf), current, now_ms);
        });
        result
    }

    /// Leaves of `current` under `base` that are absent from `replacement`.
    fn check_removed(
        &self,
        auth: &AuthContext,
        base: &Path,
        current: &Value,
        replacement: Option<&Value>,
        now_ms: u64,
    ) -> Result<(), (Path, DenyReason)> {
        let mut result = Ok(());
        current.for_each_leaf(&mut Vec::new(), &mut |rel, leaf| {
            if result.is_err() {
                return;
            }
            let survives = replacement.is_some_and(|r| lookup(r, rel).is_some_and(|v| !v.is_branch()));
            if !survives {
                let path = join(base, rel);
                result = self.check_node(auth, &path, None, Some(leaf), now_ms);
            }
        });
        result
    }

    pub fn from_json(text: &str) -> Result<Self, RulesError> {
        let doc: serde_json::Map<String, serde_json::Value> = serde_json::from_str(text)?;
        let mut entries = Vec::with_capacity(doc.len());
        for (pattern, body) in doc {
            let body: EntryBody = serde_json::from_value(body)?;
            let pattern = PathPattern::parse(&pattern)
                .map_err(|source| RulesError::Pattern { pattern, source })?;
            entries.push(RuleEntry {
                pattern,
                read: body.read,
                write: body.write,
                validate: body.validate,
            });
        }
        Ok(Self { entries })
    }

    /// Pretty-printed JSON document, entries in evaluation order.
    pub fn to_json(&self) -> String {
        let mut doc = serde_json::Map::new();
        for e in &self.entries {
            let body = EntryBody {
                read: e.read,
                write: e.write,
                validate: e.validate,
            };
            doc.insert(
                e.pattern.to_string(),
                serde_json::to_value(body).expect("rule bodies serialize"),
            );
        }
        let mut text = serde_json::to_string_pretty(&doc).expect("rule documents serialize");
        text.push('\n');
        text
    }
}

fn join(base: &Path, rel: &[&str]) -> Path {
    let mut segs: Vec<String> = base.segments().to_vec();
    segs.extend(rel.iter().map(|s| (*s).to_owned()));
    Path::from_segments(segs).expect("segments came from valid keys")
}

fn lookup<'a>(value: &'a Value, rel: &[&str]) -> Option<&'a Value> {
    let mut node = value;
    for seg in rel {
        node = node.as_branch()?.get(*seg)?;
    }
    Some(node)
}

/// The shipped ruleset file; must stay identical to [`default_ruleset`].
pub const DEFAULT_RULES_JSON: &str = include_str!("../rules/default_rules.json");

/// Rules for the sensor/LED/metadata layout.
pub fn default_ruleset() -> RuleSet {
    use AuthRequirement::{Authenticated, Device};
    let entry = |pattern: &str, write, validate| RuleEntry {
        pattern: PathPattern::parse(pattern).expect("static pattern"),
        read: Authenticated,
        write,
        validate,
    };
    let range = |min, max| Some(ValueConstraint::NumberInRange { min, max });
    RuleSet::new(vec![
        entry("/sensors/temperature", Device, range(0.0, 50.0)),
        entry("/sensors/humidity", Device, range(0.0, 100.0)),
        entry("/sensors/distance", Device, range(2.0, 400.0)),
        entry("/sensors", Device, None),
        entry("/leds/$led", Authenticated, Some(ValueConstraint::MustBeBoolean)),
        entry("/leds", Authenticated, None),
        entry(
            "/metadata/last_update",
            Device,
            Some(ValueConstraint::TimestampNotOlderThanCurrent),
        ),
        entry(
            "/metadata/device_id",
            Device,
            Some(ValueConstraint::TextMaxLength { max: 64 }),
        ),
        entry("/metadata", Device, None),
        entry("/history/$sample", Device, None),
        entry("/history", Device, None),
    ])
}
