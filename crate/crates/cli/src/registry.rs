//! Named backend suites.
//!
//! `stub` is built in. Further suites are `<name>.toml` files (serialized
//! [`SuiteSpec`]) in the directory named by [`BACKEND_DIR_ENV`]; a file there
//! named `stub.toml` replaces the built-in.

use std::path::PathBuf;

use cropdet_core::backends::SuiteSpec;

use crate::error::{CliError, CliResult};

pub const BACKEND_DIR_ENV: &str = "CROPDET_BACKEND_DIR";
pub const BUILTIN_STUB: &str = "stub";

fn registry_dir() -> Option<PathBuf> {
    std::env::var_os(BACKEND_DIR_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
}

fn available(dir: Option<&PathBuf>) -> Vec<String> {
    let mut names = vec![BUILTIN_STUB.to_string()];
    if let Some(entries) = dir.and_then(|d| std::fs::read_dir(d).ok()) {
        for e in entries.flatten() {
            let p = e.path();
            if p.extension().is_some_and(|x| x == "toml") {
                if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                    names.push(stem.to_string());
                }
            }
        }
    }
    names.sort();
    names.dedup();
    names
}

pub fn lookup(name: &str) -> CliResult<SuiteSpec> {
    if name.is_empty()
        || !name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
    {
        return Err(CliError::Usage(format!("invalid backend suite name {name:?}")));
    }
    let dir = registry_dir();
    if let Some(d) = &dir {
        let path = d.join(format!("{name}.toml"));
        if path.is_file() {
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::Config {
                path: path.clone(),
                message: e.to_string(),
            })?;
            return toml::from_str(&text).map_err(|e| CliError::Config {
                path,
                message: e.to_string(),
            });
        }
    }
    if name == BUILTIN_STUB {
        return Ok(SuiteSpec::default());
    }
    Err(CliError::UnknownBackend {
        name: name.to_string(),
        available: available(dir.as_ref()).join(", "),
    })
}
