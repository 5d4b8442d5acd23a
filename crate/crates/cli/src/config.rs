use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use persona_core::rl::PpoConfig;
use persona_core::user_sim::UserConfig;
use persona_core::Error;

/// Exit status plus the message printed on stderr.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

impl Failure {
    pub fn validation(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Schema(_) | Error::Config(_) | Error::Argument(_) | Error::Validation(_) | Error::Json(_) => {
                EXIT_VALIDATION
            }
            Error::Protocol(_) | Error::Numerical(_) | Error::Io { .. } => EXIT_RUNTIME,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = Result<T, Failure>;

/// Settings file shared by `train` and `eval`; command-line flags win.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub scenarios: Vec<PathBuf>,
    pub out: Option<PathBuf>,
    /// `"wp,wr"`.
    pub weights: Option<String>,
    pub matcher: Option<String>,
    pub horizon: Option<usize>,
    pub ppo: PpoConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::validation(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::validation(format!("config {}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> CliResult<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }
}

/// Reads scenario files; a directory contributes every `*.json` in it except
/// `manifest.json`, in name order.
pub fn load_scenarios(paths: &[PathBuf]) -> CliResult<Vec<UserConfig>> {
    if paths.is_empty() {
        return Err(Failure::validation("no scenario files given (use --scenarios)"));
    }
    let mut files = Vec::new();
    for path in paths {
        if path.is_dir() {
            let entries = fs::read_dir(path)
                .map_err(|e| Failure::validation(format!("cannot list {}: {e}", path.display())))?;
            let mut found: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .filter(|p| p.file_name().is_some_and(|n| n != "manifest.json"))
                .collect();
            found.sort();
            if found.is_empty() {
                return Err(Failure::validation(format!("no scenario files in {}", path.display())));
            }
            files.extend(found);
        } else if path.is_file() {
            files.push(path.clone());
        } else {
            return Err(Failure::validation(format!("scenario path {} does not exist", path.display())));
        }
    }
    files
        .iter()
        .map(|f| {
            let text = fs::read_to_string(f)
                .map_err(|e| Failure::validation(format!("cannot read scenario {}: {e}", f.display())))?;
            let config: UserConfig = serde_json::from_str(&text)
                .map_err(|e| Failure::validation(format!("scenario {}: {e}", f.display())))?;
            config
                .validate()
                .map_err(|e| Failure::validation(format!("scenario {}: {e}", f.display())))?;
            Ok(config)
        })
        .collect()
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::runtime(format!("cannot create {}: {e}", dir.display())))
}

pub fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::runtime(e.to_string()))?;
    text.push('\n');
    write_file(path, &text)
}
