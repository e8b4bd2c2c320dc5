//! Strict TOML loading: unknown keys are collected and reported together,
//! and type errors name the offending key.

use std::path::Path;

use serde::de::DeserializeOwned;

use crate::error::{Error, Result};

/// Parses `text` into `T`, rejecting any key the schema does not know.
pub fn parse_strict<T: DeserializeOwned>(text: &str, source: &str) -> Result<T> {
    let mut unknown = Vec::new();
    let de = toml::Deserializer::new(text);
    let mut record = |path: serde_ignored::Path<'_>| unknown.push(dotted(&path));
    let ignored = serde_ignored::Deserializer::new(de, &mut record);
    let parsed: std::result::Result<T, _> = serde_path_to_error::deserialize(ignored);
    match parsed {
        Ok(value) if unknown.is_empty() => Ok(value),
        Ok(_) => Err(Error::Config(format!(
            "{source}: unknown key{} {}",
            if unknown.len() == 1 { "" } else { "s" },
            unknown.iter().map(|k| format!("`{k}`")).collect::<Vec<_>>().join(", ")
        ))),
        Err(e) => {
            let key = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.message().trim().to_string();
            let mut text = if key.is_empty() || key == "." {
                format!("{source}: {msg}")
            } else {
                format!("{source}: invalid value for `{key}`: {msg}")
            };
            if !unknown.is_empty() {
                text.push_str(&format!("; also unknown keys: {}", unknown.join(", ")));
            }
            Err(Error::Config(text))
        }
    }
}

/// Renders a key path as `a.b[0].c`, hiding the wrapper layers serde_ignored
/// reports for options and newtypes.
fn dotted(path: &serde_ignored::Path<'_>) -> String {
    use serde_ignored::Path;
    match path {
        Path::Root => String::new(),
        Path::Seq { parent, index } => format!("{}[{index}]", dotted(parent)),
        Path::Map { parent, key } => match dotted(parent) {
            p if p.is_empty() => key.clone(),
            p => format!("{p}.{key}"),
        },
        Path::Some { parent } | Path::NewtypeStruct { parent } | Path::NewtypeVariant { parent } => dotted(parent),
    }
}

pub fn load_strict<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_strict(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Deserialize)]
    struct Inner {
        gamma: f64,
        #[serde(default)]
        lambda: Option<f64>,
    }

    #[derive(Debug, Deserialize)]
    struct Outer {
        name: String,
        inner: Inner,
        #[serde(default)]
        extra: Option<Inner>,
    }

    #[test]
    fn accepts_valid() {
        let o: Outer = parse_strict("name = \"a\"\n[inner]\ngamma = 0.5\n", "t").unwrap();
        assert_eq!(o.inner.gamma, 0.5);
        assert_eq!(o.name, "a");
        assert!(o.inner.lambda.is_none());
        assert!(o.extra.is_none());
    }

    #[test]
    fn lists_every_unknown_key() {
        let err = parse_strict::<Outer>("name = \"a\"\ncolour = 1\n[inner]\ngamma = 0.5\ngama = 2\n", "t")
            .unwrap_err()
            .to_string();
        assert!(err.contains("`colour`"), "{err}");
        assert!(err.contains("`inner.gama`"), "{err}");
        let err = parse_strict::<Outer>("name = \"a\"\n[inner]\ngamma = 0.5\n[extra]\ngamma = 1.0\nlam = 2\n", "t")
            .unwrap_err()
            .to_string();
        assert!(err.contains("`extra.lam`"), "{err}");
    }

    #[test]
    fn type_error_names_key() {
        let err = parse_strict::<Outer>("name = \"a\"\n[inner]\ngamma = \"big\"\n", "t")
            .unwrap_err()
            .to_string();
        assert!(err.contains("inner.gamma"), "{err}");
    }
}
