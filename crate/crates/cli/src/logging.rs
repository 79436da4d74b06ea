//! Line-delimited JSON on stdout for logs and events; plain progress on stderr.

use std::io::Write;

use log::{Level, LevelFilter, Log, Metadata, Record};
use serde::Serialize;
use serde_json::{json, Value};

struct JsonLogger {
    level: LevelFilter,
}

impl Log for JsonLogger {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= self.level
    }

    fn log(&self, record: &Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let level = match record.level() {
            Level::Error => "error",
            Level::Warn => "warn",
            Level::Info => "info",
            Level::Debug => "debug",
            Level::Trace => "trace",
        };
        print_line(&json!({
            "level": level,
            "target": record.target(),
            "message": record.args().to_string(),
        }));
    }

    fn flush(&self) {
        let _ = std::io::stdout().flush();
    }
}

fn print_line(v: &Value) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{v}");
}

/// Installs the logger once; the level comes from `ROADSURF_LOG` (default info).
pub fn init() {
    let level = std::env::var("ROADSURF_LOG")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(LevelFilter::Info);
    if log::set_logger(Box::leak(Box::new(JsonLogger { level }))).is_ok() {
        log::set_max_level(level);
    }
}

/// Prints `{"event": name, ...fields}` as one line on stdout.
pub fn event<T: Serialize>(name: &str, fields: &T) {
    let mut v = serde_json::to_value(fields).unwrap_or(Value::Null);
    match v.as_object_mut() {
        Some(map) => {
            map.insert("event".into(), Value::String(name.into()));
        }
        None => v = json!({ "event": name, "value": v }),
    }
    print_line(&v);
}

pub fn progress(msg: &str) {
    eprintln!("{msg}");
}
