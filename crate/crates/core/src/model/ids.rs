//! Trace and span identifiers.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IdError {
    #[error("{field} must be {expected} hex characters, found {found}")]
    Length {
        field: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid hex character {ch:?} at index {index} in {field}")]
    BadHex {
        field: &'static str,
        index: usize,
        ch: char,
    },
    #[error("{field} is all zeros")]
    Zero { field: &'static str },
}

/// Decodes exactly `N` bytes from lowercase hex. Uppercase is rejected, matching
/// the traceparent grammar.
pub(crate) fn decode_lower_hex<const N: usize>(
    field: &'static str,
    s: &str,
) -> Result<[u8; N], IdError> {
    if let Some((index, ch)) = s
        .char_indices()
        .find(|(_, c)| !matches!(c, '0'..='9' | 'a'..='f'))
    {
        return Err(IdError::BadHex { field, index, ch });
    }
    if s.len() != N * 2 {
        return Err(IdError::Length {
            field,
            expected: N * 2,
            found: s.len(),
        });
    }
    let mut out = [0u8; N];
    hex::decode_to_slice(s, &mut out).expect("validated hex");
    Ok(out)
}

macro_rules! hex_id {
    ($(#[$meta:meta])* $name:ident, $len:expr, $field:expr) => {
        $(#[$meta])*
        #[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
        pub struct $name([u8; $len]);

        impl $name {
            pub const LEN: usize = $len;

            pub const fn from_bytes(bytes: [u8; $len]) -> Self {
                Self(bytes)
            }

            pub const fn to_bytes(self) -> [u8; $len] {
                self.0
            }

            pub fn is_zero(&self) -> bool {
                self.0.iter().all(|b| *b == 0)
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }

            /// Parses lowercase hex; rejects all-zero values.
            pub fn from_hex(s: &str) -> Result<Self, IdError> {
                let id = Self(decode_lower_hex::<$len>($field, s)?);
                if id.is_zero() {
                    return Err(IdError::Zero { field: $field });
                }
                Ok(id)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!(stringify!($name), "({})"), self.to_hex())
            }
        }

        impl std::str::FromStr for $name {
            type Err = IdError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Self::from_hex(s)
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serializer.serialize_str(&self.to_hex())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
                let s = String::deserialize(deserializer)?;
                Self::from_hex(&s).map_err(serde::de::Error::custom)
            }
        }
    };
}

hex_id!(
    /// 16-byte trace identifier, rendered as 32 lowercase hex characters.
    TraceId,
    16,
    "trace-id"
);
hex_id!(
    /// 8-byte span identifier, rendered as 16 lowercase hex characters.
    SpanId,
    8,
    "parent-id"
);

/// Trace flags byte. Only the sampled bit is defined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TraceFlags(pub u8);

impl TraceFlags {
    pub const SAMPLED: TraceFlags = TraceFlags(0x01);

    pub fn is_sampled(self) -> bool {
        self.0 & 0x01 == 0x01
    }
}

/// The propagated (trace id, span id, flags) trio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraceContext {
    trace_id: TraceId,
    span_id: SpanId,
    flags: TraceFlags,
}

impl TraceContext {
    pub fn new(trace_id: TraceId, span_id: SpanId, flags: TraceFlags) -> Result<Self, IdError> {
        if trace_id.is_zero() {
            return Err(IdError::Zero { field: "trace-id" });
        }
        if span_id.is_zero() {
            return Err(IdError::Zero { field: "parent-id" });
        }
        Ok(Self {
            trace_id,
            span_id,
            flags,
        })
    }

    pub fn trace_id(&self) -> TraceId {
        self.trace_id
    }

    pub fn span_id(&self) -> SpanId {
        self.span_id
    }

    pub fn flags(&self) -> TraceFlags {
        self.flags
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hex_round_trip() {
        let id = TraceId::from_bytes([0xab; 16]);
        assert_eq!(id.to_hex(), "ab".repeat(16));
        assert_eq!(TraceId::from_hex(&id.to_hex()).unwrap(), id);
    }

    #[test]
    fn rejects_uppercase_and_zero() {
        assert!(matches!(
            SpanId::from_hex("ABCDEF0123456789"),
            Err(IdError::BadHex { index: 0, .. })
        ));
        assert_eq!(
            SpanId::from_hex("0000000000000000"),
            Err(IdError::Zero { field: "parent-id" })
        );
        assert!(matches!(
            SpanId::from_hex("abc"),
            Err(IdError::Length { found: 3, .. })
        ));
    }

    #[test]
    fn context_requires_nonzero_ids() {
        let t = TraceId::from_bytes([1; 16]);
        assert!(TraceContext::new(t, SpanId::default(), TraceFlags::SAMPLED).is_err());
        assert!(TraceContext::new(TraceId::default(), SpanId::from_bytes([1; 8]), TraceFlags(0)).is_err());
    }
}
