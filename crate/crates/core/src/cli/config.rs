use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

fn config_err(key: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

/// Splits `a.b.c=value` and parses the value as a TOML value, falling back
/// to a bare string.
pub fn parse_override(spec: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_err(spec, "override must look like key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(config_err(key, "empty key segment"));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((key.split('.').map(str::to_string).collect(), value))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for (i, seg) in parents.iter().enumerate() {
        let entry = cur
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_err(path[..=i].join("."), "is not a table"))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Parses TOML text, applies overrides, and deserializes into `T`. Errors
/// name the offending key.
pub fn load_config<T: DeserializeOwned>(text: &str, overrides: &[String]) -> Result<T> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
        let key = e
            .span()
            .map(|s| text[..s.start].lines().last().unwrap_or("").to_string())
            .unwrap_or_default();
        config_err(key.trim(), e.message().to_string())
    })?;
    for o in overrides {
        let (path, value) = parse_override(o)?;
        set_path(&mut table, &path, value)?;
    }
    serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let key = e.path().to_string();
        config_err(key, e.into_inner().to_string())
    })
}

/// Canonical JSON of a resolved config and its SHA-256 in hex.
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<(String, String)> {
    let json = serde_json::to_string(cfg)?;
    let digest = Sha256::digest(json.as_bytes());
    Ok((json, hex::encode(digest)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Deserialize, Serialize, PartialEq)]
    #[serde(deny_unknown_fields, default)]
    struct Inner {
        a: f64,
        list: Vec<u32>,
    }

    impl Default for Inner {
        fn default() -> Self {
            Self {
                a: 1.0,
                list: vec![1],
            }
        }
    }

    #[derive(Debug, Deserialize, Serialize, PartialEq, Default)]
    #[serde(deny_unknown_fields, default)]
    struct Outer {
        seed: u64,
        name: String,
        inner: Inner,
    }

    #[test]
    fn overrides_apply_by_path() {
        let c: Outer = load_config(
            "seed = 3\n[inner]\na = 2.0\n",
            &[
                "inner.list=[4, 5]".into(),
                "name=hello".into(),
                "seed=9".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.name, "hello");
        assert_eq!(
            c.inner,
            Inner {
                a: 2.0,
                list: vec![4, 5]
            }
        );
    }

    #[test]
    fn errors_name_the_key() {
        let e = load_config::<Outer>("[inner]\na = \"x\"\n", &[]).unwrap_err();
        match e {
            Error::Config { key, .. } => assert_eq!(key, "inner.a"),
            other => panic!("{other:?}"),
        }
        let e = load_config::<Outer>("[inner]\nbogus = 1\n", &[]).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
        let e = load_config::<Outer>("", &["novalue".into()]).unwrap_err();
        assert!(matches!(e, Error::Config { .. }));
        let e = load_config::<Outer>("seed = \n", &[]).unwrap_err();
        assert!(matches!(e, Error::Config { .. }));
    }

    #[test]
    fn hash_is_stable() {
        let a = config_hash(&Outer::default()).unwrap();
        let b = config_hash(&Outer::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.len(), 64);
        let c = config_hash(&Outer {
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        assert_ne!(a.1, c.1);
    }
}
