use std::path::{Path, PathBuf};

use agentmail_core::gateway::HttpBackendConfig;
use anyhow::{Context, Result};
use serde::Deserialize;

/// Server configuration, read from TOML. Command-line flags override it.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub world: String,
    #[serde(default = "default_realm")]
    pub realm: String,
    #[serde(default = "default_listen")]
    pub listen: String,
    /// WebSocket listener; disabled when absent.
    #[serde(default)]
    pub ws_listen: Option<String>,
    #[serde(default = "default_storage")]
    pub storage: PathBuf,
    #[serde(default = "default_backend")]
    pub backend: String,
    /// Rules file for the scripted backend (`test.scripted`).
    #[serde(default)]
    pub rules: Option<PathBuf>,
    #[serde(default = "default_log_level")]
    pub log_level: String,
    #[serde(default = "yes")]
    pub fsync: bool,
    #[serde(default)]
    pub auth_token: Option<String>,
    #[serde(default)]
    pub admin_token: Option<String>,
    #[serde(default)]
    pub max_depth: Option<u32>,
    #[serde(default)]
    pub completion_timeout_secs: Option<u64>,
    #[serde(default, rename = "http_backend")]
    pub http_backends: Vec<HttpBackendEntry>,
    #[serde(default, rename = "shell_robot")]
    pub shell_robots: Vec<ShellRobotEntry>,
    /// Robot addresses served by separately connected processes.
    #[serde(default)]
    pub remote_robots: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct HttpBackendEntry {
    /// `provider.model`
    pub id: String,
    /// Read the API key from this variable instead of the file.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(flatten)]
    pub endpoint: HttpBackendConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShellRobotEntry {
    #[serde(default = "default_shell_address")]
    pub address: String,
    pub sandbox: PathBuf,
    #[serde(default)]
    pub confirm_to: Option<String>,
    #[serde(default)]
    pub timeout_secs: Option<u64>,
    #[serde(default)]
    pub audit_log: Option<PathBuf>,
}

fn default_realm() -> String {
    "realm-1".into()
}
fn default_listen() -> String {
    "127.0.0.1:7878".into()
}
fn default_storage() -> PathBuf {
    "agentmail-data".into()
}
fn default_backend() -> String {
    "test.scripted".into()
}
fn default_log_level() -> String {
    "info".into()
}
fn default_shell_address() -> String {
    "shell@localdomain".into()
}
fn yes() -> bool {
    true
}

impl CliConfig {
    pub fn minimal(world: &str) -> Self {
        toml::from_str(&format!("world = {world:?}")).expect("minimal config parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: CliConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        // relative paths in the file are relative to the file
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.storage);
        if let Some(r) = cfg.rules.as_mut() {
            rebase(r);
        }
        for s in &mut cfg.shell_robots {
            rebase(&mut s.sandbox);
            if let Some(a) = s.audit_log.as_mut() {
                rebase(a);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.world.trim().is_empty() {
            return Err("world id must not be empty".into());
        }
        if self.realm.trim().is_empty() {
            return Err("realm id must not be empty".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_file() {
        let cfg: CliConfig = toml::from_str(
            r#"
            world = "w1"
            listen = "0.0.0.0:9000"
            rules = "rules.toml"
            remote_robots = ["printer@localdomain"]

            [[http_backend]]
            id = "openai.gpt-4o"
            base_url = "https://api.openai.com/v1"
            model = "gpt-4o"
            api_key_env = "OPENAI_API_KEY"

            [[shell_robot]]
            sandbox = "sandbox"
            confirm_to = "user1@localdomain"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.realm, "realm-1");
        assert_eq!(cfg.http_backends[0].endpoint.model, "gpt-4o");
        assert_eq!(cfg.shell_robots[0].address, "shell@localdomain");
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn empty_world_rejected() {
        assert!(CliConfig::minimal(" ").validate().is_err());
        assert!(toml::from_str::<CliConfig>("world = \"w\"\nbogus = 1").is_err());
    }
}
