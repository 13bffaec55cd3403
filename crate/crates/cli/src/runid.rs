//! Stable run identifiers: a hash of the canonicalized configuration JSON
//! plus the seed, so equal configs always map to equal run ids.

use serde_json::Value;

/// Serializes with object keys sorted recursively.
pub fn canonical_json(value: &Value) -> String {
    fn write(value: &Value, out: &mut String) {
        match value {
            Value::Object(map) => {
                let mut keys: Vec<&String> = map.keys().collect();
                keys.sort();
                out.push('{');
                for (i, key) in keys.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push_str(&serde_json::to_string(key).expect("string serializes"));
                    out.push(':');
                    write(&map[*key], out);
                }
                out.push('}');
            }
            Value::Array(items) => {
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    write(item, out);
                }
                out.push(']');
            }
            other => out.push_str(&serde_json::to_string(other).expect("scalar serializes")),
        }
    }
    let mut out = String::new();
    write(value, &mut out);
    out
}

/// 128-bit FNV-1a rendered as 32 hex characters.
fn fnv128_hex(bytes: &[u8]) -> String {
    let mut lo: u64 = 0xcbf2_9ce4_8422_2325;
    let mut hi: u64 = 0x6c62_272e_07bb_0142;
    for &b in bytes {
        lo ^= u64::from(b);
        lo = lo.wrapping_mul(0x0000_0100_0000_01b3);
        hi ^= lo.rotate_left(29);
        hi = hi.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hi:016x}{lo:016x}")
}

/// Run id for a serializable config (the seed is expected to be a field of
/// the config value).
pub fn run_id<T: serde::Serialize>(config: &T) -> String {
    let value = serde_json::to_value(config).expect("config serializes");
    fnv128_hex(canonical_json(&value).as_bytes())[..16].to_string()
}
