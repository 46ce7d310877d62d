//! The one place the platform names its digest algorithm.

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest as _, Sha256};

/// Name recorded alongside digests (exports, docs).
pub const DIGEST_ALGORITHM: &str = "sha256";

/// Length in hex characters of a digest.
pub const DIGEST_HEX_LEN: usize = 64;

/// All-zero digest used as the genesis `prev_hash`.
pub fn zero_digest() -> String {
    "0".repeat(DIGEST_HEX_LEN)
}

pub fn digest_bytes(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

pub fn digest_str(s: &str) -> String {
    digest_bytes(s.as_bytes())
}

/// Canonical JSON: object keys sorted recursively, no insignificant whitespace.
pub fn canonical_json<T: Serialize + ?Sized>(value: &T) -> String {
    let value = serde_json::to_value(value).expect("in-memory value serializes");
    let mut out = String::new();
    write_canonical(&value, &mut out);
    out
}

fn write_canonical(value: &Value, out: &mut String) {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(key.clone()).to_string());
                out.push(':');
                write_canonical(&map[key], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        scalar => out.push_str(&scalar.to_string()),
    }
}

/// Digest of the canonical JSON form of a value.
pub fn digest_json<T: Serialize + ?Sized>(value: &T) -> String {
    digest_str(&canonical_json(value))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_vector() {
        assert_eq!(
            digest_str("abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(zero_digest().len(), DIGEST_HEX_LEN);
    }

    #[test]
    fn json_digest_ignores_map_insertion_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"b":1,"a":2}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"a":2,"b":1}"#).unwrap();
        assert_eq!(digest_json(&a), digest_json(&b));
        assert_eq!(canonical_json(&a), r#"{"a":2,"b":1}"#);
    }

    #[test]
    fn canonical_sorts_nested_struct_fields() {
        #[derive(Serialize)]
        struct Inner {
            z: u8,
            y: Vec<u8>,
        }
        #[derive(Serialize)]
        struct Outer {
            b: Inner,
            a: &'static str,
        }
        let s = canonical_json(&Outer {
            b: Inner {
                z: 1,
                y: vec![2, 3],
            },
            a: "x\"q",
        });
        assert_eq!(s, r#"{"a":"x\"q","b":{"y":[2,3],"z":1}}"#);
    }
}
