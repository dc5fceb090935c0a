//! JSON-line logs to stdout and, optionally, a file.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::Path;
use std::sync::Mutex;

use crate::error::{CliError, Result};

struct Tee {
    file: Option<Mutex<File>>,
}

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        io::stdout().write_all(buf)?;
        if let Some(f) = &self.file {
            f.lock().expect("log file").write_all(buf)?;
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        io::stdout().flush()?;
        if let Some(f) = &self.file {
            f.lock().expect("log file").flush()?;
        }
        Ok(())
    }
}

/// Installs the global logger. `RUST_LOG` overrides `default_level`.
/// Calling it twice is harmless.
pub fn init(default_level: log::LevelFilter, file: Option<&Path>) -> Result<()> {
    let file = match file {
        Some(p) => {
            if let Some(d) = p.parent() {
                fs::create_dir_all(d).map_err(CliError::io(d))?;
            }
            Some(Mutex::new(OpenOptions::new().create(true).append(true).open(p).map_err(CliError::io(p))?))
        }
        None => None,
    };
    let _ = env_logger::Builder::new()
        .filter_level(default_level)
        .parse_default_env()
        .format(|buf, rec| {
            let line = serde_json::json!({
                "ts": buf.timestamp_millis().to_string(),
                "level": rec.level().as_str(),
                "target": rec.target(),
                "msg": rec.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .target(env_logger::Target::Pipe(Box::new(Tee { file })))
        .try_init();
    Ok(())
}
