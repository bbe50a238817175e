//! Layered configuration: built-in defaults, then a TOML file, then flags.
//!
//! Layers are merged as JSON trees so every leaf key remembers where its
//! value came from. Keys that do not exist in the defaults are rejected with
//! their full dotted path.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Flag => "flag",
        })
    }
}

/// A resolved configuration and the origin of each leaf key.
pub struct Resolved<T> {
    pub value: T,
    pub sources: BTreeMap<String, Source>,
    pub tree: Value,
}

fn leaves(v: &Value, path: &str, out: &mut BTreeMap<String, Source>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, c) in m {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                leaves(c, &p, out);
            }
        }
        _ => {
            out.insert(path.to_string(), Source::Default);
        }
    }
}

fn merge(base: &mut Value, layer: Value, path: &str, sources: &mut BTreeMap<String, Source>, src: Source) -> Result<()> {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            for (k, v) in l {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b.get_mut(&k).ok_or_else(|| anyhow!("unknown config key `{p}`"))?;
                merge(slot, v, &p, sources, src)?;
            }
            Ok(())
        }
        (Value::Object(_), _) => bail!("config key `{path}` must be a table"),
        (slot, v) => {
            if v.is_object() {
                bail!("config key `{path}` must be a value, not a table");
            }
            *slot = v;
            sources.insert(path.to_string(), src);
            Ok(())
        }
    }
}

/// Converts `a.b.c = v` into a nested object.
fn nested(path: &str, v: Value) -> Value {
    path.rsplit('.').fold(v, |acc, k| {
        let mut m = serde_json::Map::new();
        m.insert(k.to_string(), acc);
        Value::Object(m)
    })
}

/// Resolves `T` from its defaults, an optional TOML file and flag overrides
/// given as `(dotted key, value)`.
pub fn resolve<T: Serialize + DeserializeOwned + Default>(file: Option<&Path>, flags: &[(&str, Value)]) -> Result<Resolved<T>> {
    let mut tree = serde_json::to_value(T::default())?;
    let mut sources = BTreeMap::new();
    leaves(&tree, "", &mut sources);
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let parsed: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        merge(&mut tree, serde_json::to_value(parsed)?, "", &mut sources, Source::File)?;
    }
    for (k, v) in flags {
        merge(&mut tree, nested(k, v.clone()), "", &mut sources, Source::Flag)?;
    }
    let value: T = serde_json::from_value(tree.clone()).map_err(|e| anyhow!("invalid config: {e}"))?;
    Ok(Resolved { value, sources, tree })
}

impl<T> Resolved<T> {
    /// Logs every leaf key with its value and origin.
    pub fn log(&self) {
        for (k, src) in &self.sources {
            let v = k.split('.').try_fold(&self.tree, |node, part| node.get(part));
            log::info!("config {k} = {} ({src})", v.map(|v| v.to_string()).unwrap_or_default());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use motionflow_model::trainer::TrainConfig;
    use std::io::Write;

    #[test]
    fn precedence_and_unknown_keys() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "seed = 5\n[stage1]\nepochs = 3\nbatch_size = 8").unwrap();
        let r: Resolved<TrainConfig> = resolve(Some(f.path()), &[("stage1.epochs", Value::from(7))]).unwrap();
        assert_eq!(r.value.seed, 5);
        assert_eq!(r.value.stage1.epochs, 7);
        assert_eq!(r.value.stage1.batch_size, 8);
        assert_eq!(r.sources["stage1.epochs"], Source::Flag);
        assert_eq!(r.sources["seed"], Source::File);
        assert_eq!(r.sources["stage2.epochs"], Source::Default);

        let mut bad = tempfile::NamedTempFile::new().unwrap();
        writeln!(bad, "[model.vae]\nwidth = 3").unwrap();
        let e = resolve::<TrainConfig>(Some(bad.path()), &[]).err().unwrap();
        assert!(e.to_string().contains("model.vae.width"), "{e}");
    }
}
