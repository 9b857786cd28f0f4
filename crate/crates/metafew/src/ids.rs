//! String-keyed identifiers for examples, subjects, and attributes.

use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! string_id {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                Self(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }
    };
}

string_id!(
    /// Identifier of one labeled example (a frame or a feature row).
    ExampleId
);
string_id!(
    /// Identifier of one subject.
    SubjectId
);
string_id!(
    /// Identifier of one binary attribute.
    AttributeId
);

/// One task: a (subject, attribute) pair treated as an independent binary
/// detection problem.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskId {
    pub subject: SubjectId,
    pub attribute: AttributeId,
}

impl TaskId {
    pub fn new(subject: impl Into<String>, attribute: impl Into<String>) -> Self {
        Self {
            subject: SubjectId::new(subject),
            attribute: AttributeId::new(attribute),
        }
    }

    /// Stable 64-bit hash, used to derive per-task rng streams. FNV-1a over
    /// the two ids with a separator that cannot occur inside them.
    pub fn stable_hash(&self) -> u64 {
        let mut h = crate::rngutil::Fnv1a::new();
        h.update(self.subject.as_str().as_bytes());
        h.update(&[0]);
        h.update(self.attribute.as_str().as_bytes());
        h.finish()
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.subject, self.attribute)
    }
}
