//! Registry metadata client (HTTPS GET, JSON). Off unless the run allows network.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::{parse_requirement, Dependency, Ecosystem, MetadataSource, PackageMetadata};

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("registry request failed: {0}")]
    Http(#[from] reqwest::Error),
    #[error("registry returned status {0}")]
    Status(u16),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistryConfig {
    /// `{package_name}` is substituted.
    pub npm_endpoint: String,
    pub pypi_endpoint: String,
    pub timeout_secs: u64,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        Self {
            npm_endpoint: "https://registry.npmjs.org/{package_name}".to_owned(),
            pypi_endpoint: "https://pypi.org/pypi/{package_name}/json".to_owned(),
            timeout_secs: 20,
        }
    }
}

pub fn fetch_metadata(
    cfg: &RegistryConfig,
    ecosystem: Ecosystem,
    package_name: &str,
) -> Result<PackageMetadata, RegistryError> {
    let template = match ecosystem {
        Ecosystem::Npm => &cfg.npm_endpoint,
        Ecosystem::Pypi => &cfg.pypi_endpoint,
    };
    let url = template.replace("{package_name}", package_name);
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(cfg.timeout_secs))
        .build()?;
    let resp = client.get(&url).send()?;
    if !resp.status().is_success() {
        return Err(RegistryError::Status(resp.status().as_u16()));
    }
    let body: Value = resp.json()?;
    let mut meta = PackageMetadata::empty(MetadataSource::RegistryApi);
    match ecosystem {
        Ecosystem::Npm => {
            let latest = body
                .pointer("/dist-tags/latest")
                .and_then(Value::as_str)
                .and_then(|v| body.pointer(&format!("/versions/{}", v.replace('/', "~1"))));
            fill_from_npm_version(&mut meta, latest.unwrap_or(&body));
            if meta.name.is_empty() {
                meta.name = str_at(&body, "/name");
            }
            if meta.description.is_empty() {
                meta.description = str_at(&body, "/description");
            }
        }
        Ecosystem::Pypi => fill_from_pypi(&mut meta, &body),
    }
    meta.source = MetadataSource::RegistryApi;
    Ok(meta)
}

fn str_at(v: &Value, ptr: &str) -> String {
    v.pointer(ptr)
        .and_then(Value::as_str)
        .unwrap_or_default()
        .trim()
        .to_owned()
}

/// Fills fields from an npm manifest (a `package.json` or one registry version object).
pub(crate) fn fill_from_npm_version(meta: &mut PackageMetadata, v: &Value) {
    meta.name = str_at(v, "/name");
    meta.version = str_at(v, "/version");
    meta.description = str_at(v, "/description");
    match v.get("author") {
        Some(Value::String(s)) => meta.author = s.trim().to_owned(),
        Some(obj @ Value::Object(_)) => {
            meta.author = str_at(obj, "/name");
            meta.author_email = str_at(obj, "/email");
        }
        _ => {}
    }
    if let Some(Value::Object(deps)) = v.get("dependencies") {
        meta.dependencies = deps
            .iter()
            .filter(|(name, _)| !name.is_empty())
            .map(|(name, spec)| Dependency {
                name: name.clone(),
                version_spec: spec.as_str().unwrap_or_default().to_owned(),
            })
            .collect();
    }
    for url in [
        str_at(v, "/homepage"),
        str_at(v, "/repository/url"),
        str_at(v, "/repository"),
    ] {
        if !url.is_empty() && !meta.urls.contains(&url) {
            meta.urls.push(url);
        }
    }
}

fn fill_from_pypi(meta: &mut PackageMetadata, body: &Value) {
    meta.name = str_at(body, "/info/name");
    meta.version = str_at(body, "/info/version");
    meta.description = str_at(body, "/info/summary");
    meta.author = str_at(body, "/info/author");
    meta.author_email = str_at(body, "/info/author_email");
    if let Some(Value::Array(reqs)) = body.pointer("/info/requires_dist") {
        meta.dependencies = reqs
            .iter()
            .filter_map(Value::as_str)
            .filter_map(parse_requirement)
            .collect();
    }
    let home = str_at(body, "/info/home_page");
    if !home.is_empty() {
        meta.urls.push(home);
    }
    if let Some(Value::Object(urls)) = body.pointer("/info/project_urls") {
        for u in urls.values().filter_map(Value::as_str) {
            if !meta.urls.iter().any(|x| x == u) {
                meta.urls.push(u.to_owned());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::serve_json;

    #[test]
    fn npm_endpoint_template_and_latest_version() {
        let body = r#"{"name":"evilpkg","dist-tags":{"latest":"0.0.0"},
            "versions":{"0.0.0":{"name":"evilpkg","version":"0.0.0","description":"",
            "dependencies":{"child_process":"*"}}}}"#;
        let (base, requests) = serve_json(vec![(200, body.to_owned())]);
        let cfg = RegistryConfig {
            npm_endpoint: format!("{base}/{{package_name}}"),
            ..RegistryConfig::default()
        };
        let meta = fetch_metadata(&cfg, Ecosystem::Npm, "evilpkg").unwrap();
        assert_eq!(meta.name, "evilpkg");
        assert_eq!(meta.version, "0.0.0");
        assert_eq!(meta.dependencies[0].name, "child_process");
        assert_eq!(meta.source, MetadataSource::RegistryApi);
        assert!(requests.lock().unwrap()[0].starts_with("GET /evilpkg "));
    }

    #[test]
    fn pypi_json_shape() {
        let body = r#"{"info":{"name":"reqests","version":"0.0.0","summary":"","author":"",
            "requires_dist":["requests>=2"],"home_page":"","project_urls":{"x":"https://x.example"}}}"#;
        let (base, _) = serve_json(vec![(200, body.to_owned())]);
        let cfg = RegistryConfig {
            pypi_endpoint: format!("{base}/pypi/{{package_name}}/json"),
            ..RegistryConfig::default()
        };
        let meta = fetch_metadata(&cfg, Ecosystem::Pypi, "reqests").unwrap();
        assert_eq!(meta.name, "reqests");
        assert_eq!(meta.dependencies[0].version_spec, ">=2");
        assert_eq!(meta.urls, ["https://x.example"]);
    }

    #[test]
    fn http_error_status() {
        let (base, _) = serve_json(vec![(404, "{}".to_owned())]);
        let cfg = RegistryConfig {
            pypi_endpoint: format!("{base}/{{package_name}}"),
            ..RegistryConfig::default()
        };
        assert!(matches!(
            fetch_metadata(&cfg, Ecosystem::Pypi, "nope"),
            Err(RegistryError::Status(404))
        ));
    }
}
