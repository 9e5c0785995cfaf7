//! Output-file helpers: 17-significant-digit float rendering, the stable
//! configuration hash, and small JSON builders. All files are written
//! through these so equal seeds give byte-identical artifacts.

use anyhow::Context;
use dqlab_core::format_f64;
use std::fmt::Write as _;
use std::path::Path;

pub const VERSION: &str = concat!("dqlab ", env!("CARGO_PKG_VERSION"));

/// FNV-1a over the canonical config bytes; stable across platforms.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub fn config_hash(canonical: &str) -> String {
    format!("{:016x}", fnv1a64(canonical.as_bytes()))
}

/// Incremental JSON object builder with deterministic key order and
/// 17-significant-digit floats.
pub struct JsonObject {
    buf: String,
    first: bool,
}

impl JsonObject {
    pub fn new() -> Self {
        JsonObject { buf: String::from("{"), first: true }
    }

    fn key(&mut self, key: &str) {
        if !self.first {
            self.buf.push(',');
        }
        self.first = false;
        write!(self.buf, "\"{key}\":").unwrap();
    }

    pub fn string(mut self, key: &str, value: &str) -> Self {
        self.key(key);
        write!(self.buf, "{}", escape(value)).unwrap();
        self
    }

    pub fn uint(mut self, key: &str, value: u64) -> Self {
        self.key(key);
        write!(self.buf, "{value}").unwrap();
        self
    }

    pub fn boolean(mut self, key: &str, value: bool) -> Self {
        self.key(key);
        write!(self.buf, "{value}").unwrap();
        self
    }

    pub fn float(mut self, key: &str, value: f64) -> Self {
        self.key(key);
        self.buf.push_str(&format_f64(value));
        self
    }

    pub fn float_opt(self, key: &str, value: Option<f64>) -> Self {
        match value {
            Some(v) => self.float(key, v),
            None => self.raw(key, "null"),
        }
    }

    #[allow(dead_code)]
    pub fn float_array(mut self, key: &str, values: &[f64]) -> Self {
        self.key(key);
        self.buf.push('[');
        for (i, v) in values.iter().enumerate() {
            if i > 0 {
                self.buf.push(',');
            }
            self.buf.push_str(&format_f64(*v));
        }
        self.buf.push(']');
        self
    }

    /// Inserts an already-rendered JSON value.
    pub fn raw(mut self, key: &str, rendered: &str) -> Self {
        self.key(key);
        self.buf.push_str(rendered);
        self
    }

    pub fn finish(mut self) -> String {
        self.buf.push('}');
        self.buf
    }
}

impl Default for JsonObject {
    fn default() -> Self {
        Self::new()
    }
}

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => {
                write!(out, "\\u{:04x}", c as u32).unwrap();
            }
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

/// Renders an array of already-rendered JSON values.
pub fn json_array<I: IntoIterator<Item = String>>(items: I) -> String {
    let mut buf = String::from("[");
    for (i, item) in items.into_iter().enumerate() {
        if i > 0 {
            buf.push(',');
        }
        buf.push_str(&item);
    }
    buf.push(']');
    buf
}

pub fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Standard meta block: tool version, config hash, then extras.
pub fn meta_object(hash: &str, extras: &[(&str, String)]) -> String {
    let mut obj = JsonObject::new().string("version", VERSION).string("config_hash", hash);
    for (k, v) in extras {
        obj = obj.raw(k, v);
    }
    obj.finish()
}

/// Renders a fit report.
pub fn fit_report_json(fit: &dqlab_core::analysis::FitReport) -> String {
    JsonObject::new()
        .float("value", fit.value)
        .float("intercept", fit.intercept)
        .float("residual", fit.residual)
        .uint("count", fit.count as u64)
        .string("quantity", &fit.quantity)
        .string("window", &fit.window)
        .finish()
}
