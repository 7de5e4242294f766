//! Slash-separated addresses into the tree.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Characters that may never appear inside a key.
pub const FORBIDDEN_KEY_CHARS: [char; 6] = ['/', '.', '#', '$', '[', ']'];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PathError {
    #[error("path must begin with '/': {0:?}")]
    MissingLeadingSlash(String),
    #[error("empty segment in path {0:?}")]
    EmptySegment(String),
    #[error("forbidden character {ch:?} in segment {segment:?}")]
    ForbiddenCharacter { segment: String, ch: char },
}

/// Checks a single key against the key rules.
pub fn validate_segment(segment: &str) -> Result<(), PathError> {
    if segment.is_empty() {
        return Err(PathError::EmptySegment(segment.to_owned()));
    }
    if let Some(ch) = segment.chars().find(|c| FORBIDDEN_KEY_CHARS.contains(c)) {
        return Err(PathError::ForbiddenCharacter {
            segment: segment.to_owned(),
            ch,
        });
    }
    Ok(())
}

/// A canonical location in the tree. The root has no segments and renders as `/`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Path {
    segments: Vec<String>,
}

impl Path {
    pub fn root() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, PathError> {
        let rest = text
            .strip_prefix('/')
            .ok_or_else(|| PathError::MissingLeadingSlash(text.to_owned()))?;
        if rest.is_empty() {
            return Ok(Self::root());
        }
        let mut segments = Vec::new();
        for seg in rest.split('/') {
            if seg.is_empty() {
                return Err(PathError::EmptySegment(text.to_owned()));
            }
            validate_segment(seg)?;
            segments.push(seg.to_owned());
        }
        Ok(Self { segments })
    }

    /// Builds a path from already-split segments, validating each.
    pub fn from_segments<I, S>(segments: I) -> Result<Self, PathError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let segments: Vec<String> = segments.into_iter().map(Into::into).collect();
        for seg in &segments {
            validate_segment(seg)?;
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[String] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_root(&self) -> bool {
        self.segments.is_empty()
    }

    /// Appends one validated segment.
    pub fn child(&self, segment: &str) -> Result<Self, PathError> {
        validate_segment(segment)?;
        let mut segments = self.segments.clone();
        segments.push(segment.to_owned());
        Ok(Self { segments })
    }

    pub fn parent(&self) -> Option<Self> {
        if self.is_root() {
            return None;
        }
        Some(Self {
            segments: self.segments[..self.segments.len() - 1].to_vec(),
        })
    }

    pub fn last(&self) -> Option<&str> {
        self.segments.last().map(String::as_str)
    }

    /// True when `self` equals `other` or lies above it.
    pub fn is_ancestor_or_equal(&self, other: &Path) -> bool {
        self.segments.len() <= other.segments.len()
            && self.segments.iter().zip(&other.segments).all(|(a, b)| a == b)
    }

    pub fn is_strict_ancestor(&self, other: &Path) -> bool {
        self.segments.len() < other.segments.len() && self.is_ancestor_or_equal(other)
    }

    /// Segments of `other` below `self`, if `self` is an ancestor-or-equal.
    pub fn relative<'a>(&self, other: &'a Path) -> Option<&'a [String]> {
        self.is_ancestor_or_equal(other)
            .then(|| &other.segments[self.segments.len()..])
    }
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.segments.is_empty() {
            return f.write_str("/");
        }
        for seg in &self.segments {
            write!(f, "/{seg}")?;
        }
        Ok(())
    }
}

impl FromStr for Path {
    type Err = PathError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl Serialize for Path {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Path {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        Path::parse(&text).map_err(serde::de::Error::custom)
    }
}
