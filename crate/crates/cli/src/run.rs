//! Run directories, logging and report writers.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{Context, Result};
use serde::Serialize;

use crate::settings::Settings;

/// Environment variable naming the parent of new run directories.
pub const RUN_ROOT_ENV: &str = "KITT_RUN_DIR";

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// `explicit` is used as is; otherwise a fresh `<command>-<timestamp>`
    /// directory is made under `root`, then `$KITT_RUN_DIR`, then `runs/`.
    pub fn create(command: &str, explicit: Option<&Path>, root: Option<&Path>) -> Result<Self> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => {
                let root = root
                    .map(Path::to_path_buf)
                    .or_else(|| std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from))
                    .unwrap_or_else(|| PathBuf::from("runs"));
                let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
                let base = root.join(format!("{command}-{stamp}"));
                let mut path = base.clone();
                let mut k = 2;
                while path.exists() {
                    path = PathBuf::from(format!("{}-{k}", base.display()));
                    k += 1;
                }
                path
            }
        };
        fs::create_dir_all(&path).with_context(|| format!("creating run directory {}", path.display()))?;
        Ok(RunDir { path })
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_config(&self, command: &str, settings: &Settings) -> Result<()> {
        let text = format!("# kitt {command}\n{}", settings.snapshot());
        self.write_text("config.txt", &text)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let p = self.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        self.write_text(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    /// Tab-separated file with a header row.
    pub fn write_tsv(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut text = header.join("\t") + "\n";
        for r in rows {
            text += &r.join("\t");
            text.push('\n');
        }
        self.write_text(name, &text)
    }
}

/// Log output goes to stderr and, once a run directory exists, `log.txt`.
struct Tee {
    file: Mutex<Option<File>>,
}

static LOG_FILE: Tee = Tee { file: Mutex::new(None) };

struct TeeWriter;

impl Write for TeeWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        io::stderr().write_all(buf)?;
        if let Some(f) = LOG_FILE.file.lock().expect("log lock").as_mut() {
            f.write_all(buf)?;
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        io::stderr().flush()
    }
}

pub fn init_logging(level: &str) {
    let _ = env_logger::Builder::new()
        .parse_filters(level)
        .format_timestamp_secs()
        .target(env_logger::Target::Pipe(Box::new(TeeWriter)))
        .try_init();
}

pub fn log_to(path: &Path) -> Result<()> {
    let f = OpenOptions::new().create(true).append(true).open(path)?;
    *LOG_FILE.file.lock().expect("log lock") = Some(f);
    Ok(())
}
