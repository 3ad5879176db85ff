//! Datapath configuration and dotted-key overrides.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("malformed override `{0}` (expected key=value)")]
    MalformedOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlobalConfig {
    pub flow_count: usize,
    /// Event metadata width in bits.
    pub event_width: usize,
    /// Flow context width in bits.
    pub context_width: usize,
    /// Bytes moved per cycle on the serialized packet/data bus.
    pub bus_width: usize,
    pub clock_freq: f64,
    pub rng_seed: u64,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        Self {
            flow_count: 16,
            event_width: 64,
            context_width: 938,
            bus_width: 64,
            clock_freq: 250e6,
            rng_seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub event_buffer_depth: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            event_buffer_depth: 16,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PleConfig {
    /// Replaces every event type's pipeline depth when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth_override: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PktGenConfig {
    pub header_width: usize,
    pub instr_queue_depth: usize,
    /// Prefetch buffer length in 64B chunks.
    pub prefetch_buffer_len: usize,
    /// Packets an instruction may emit before it yields to other flows.
    pub preempt_quantum: u32,
    /// Refill when buffered + outstanding chunks drop below this. Defaults to half the buffer.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prefetch_threshold: Option<usize>,
    /// Backpressure asserts while queue occupancy exceeds this. Defaults to depth - 2.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backpressure_threshold: Option<usize>,
    /// Bytes per prefetch request.
    pub fetch_size: usize,
}

impl Default for PktGenConfig {
    fn default() -> Self {
        Self {
            header_width: 168,
            instr_queue_depth: 8,
            prefetch_buffer_len: 64,
            preempt_quantum: 16,
            prefetch_threshold: None,
            backpressure_threshold: None,
            fetch_size: 512,
        }
    }
}

impl PktGenConfig {
    pub fn prefetch_threshold_chunks(&self) -> usize {
        self.prefetch_threshold
            .unwrap_or(self.prefetch_buffer_len / 2)
    }

    pub fn backpressure_threshold(&self) -> usize {
        self.backpressure_threshold
            .unwrap_or(self.instr_queue_depth.saturating_sub(2))
    }

    pub fn header_bytes(&self) -> usize {
        self.header_width.div_ceil(8)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryConfig {
    pub access_latency: u64,
    /// Bytes per cycle.
    pub bandwidth: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            access_latency: 20,
            bandwidth: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReassemblyConfig {
    /// Per-flow reassembly window in 64B chunks.
    pub buffer_len: usize,
    pub instr_queue_depth: usize,
    /// Receive payload ring in chunks. Defaults to four times `buffer_len`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temp_ring_chunks: Option<usize>,
}

impl Default for ReassemblyConfig {
    fn default() -> Self {
        Self {
            buffer_len: 256,
            instr_queue_depth: 8,
            temp_ring_chunks: None,
        }
    }
}

impl ReassemblyConfig {
    pub fn temp_ring_chunks(&self) -> usize {
        self.temp_ring_chunks.unwrap_or(4 * self.buffer_len)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub global: GlobalConfig,
    pub scheduler: SchedulerConfig,
    pub ple: PleConfig,
    pub pktgen: PktGenConfig,
    pub memory: MemoryConfig,
    pub reassembly: ReassemblyConfig,
}

pub const CHUNK_BYTES: usize = 64;
pub const LINE_RATE_BPS: f64 = 100e9;

impl SimConfig {
    /// Bytes per cycle needed to sustain 100 Gbps at the configured clock.
    pub fn line_rate_bytes_per_cycle(&self) -> f64 {
        LINE_RATE_BPS / 8.0 / self.global.clock_freq
    }

    pub fn bytes_per_cycle_to_gbps(&self, bpc: f64) -> f64 {
        bpc * 8.0 * self.global.clock_freq / 1e9
    }

    pub fn cycles_per_us(&self) -> f64 {
        self.global.clock_freq / 1e6
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let pow2 = [
            ("scheduler.event_buffer_depth", self.scheduler.event_buffer_depth),
            ("pktgen.instr_queue_depth", self.pktgen.instr_queue_depth),
            ("pktgen.prefetch_buffer_len", self.pktgen.prefetch_buffer_len),
            ("reassembly.buffer_len", self.reassembly.buffer_len),
            ("reassembly.instr_queue_depth", self.reassembly.instr_queue_depth),
        ];
        for (key, v) in pow2 {
            if !v.is_power_of_two() {
                return Err(ConfigError::Invalid(format!(
                    "{key} = {v} must be a power of two"
                )));
            }
        }
        if self.global.flow_count == 0 {
            return Err(ConfigError::Invalid("global.flow_count must be > 0".into()));
        }
        if self.global.bus_width == 0 || self.memory.bandwidth == 0 {
            return Err(ConfigError::Invalid("bus and memory widths must be > 0".into()));
        }
        if self.pktgen.header_width == 0 {
            return Err(ConfigError::Invalid("pktgen.header_width must be > 0".into()));
        }
        if self.pktgen.fetch_size == 0 || self.pktgen.preempt_quantum == 0 {
            return Err(ConfigError::Invalid(
                "pktgen.fetch_size and pktgen.preempt_quantum must be > 0".into(),
            ));
        }
        if self.pktgen.backpressure_threshold() >= self.pktgen.instr_queue_depth {
            return Err(ConfigError::Invalid(
                "pktgen.backpressure_threshold must leave room in the queue".into(),
            ));
        }
        if self.ple.depth_override == Some(0) {
            return Err(ConfigError::Invalid("ple.depth_override must be >= 1".into()));
        }
        if !(self.global.clock_freq > 0.0) {
            return Err(ConfigError::Invalid("global.clock_freq must be > 0".into()));
        }
        Ok(())
    }
}

/// Parses an override value: integer, float, boolean, else a bare string.
pub fn parse_scalar(raw: &str) -> toml::Value {
    let raw = raw.trim();
    if let Ok(i) = raw.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Ok(f) = raw.parse::<f64>() {
        toml::Value::Float(f)
    } else if let Ok(b) = raw.parse::<bool>() {
        toml::Value::Boolean(b)
    } else {
        toml::Value::String(raw.trim_matches('"').to_string())
    }
}

/// Splits `a.b.c=value` into its key and value halves.
pub fn split_override(s: &str) -> Result<(&str, &str), ConfigError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| ConfigError::MalformedOverride(s.to_string()))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(ConfigError::MalformedOverride(s.to_string()));
    }
    Ok((k, v))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) {
    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = parts.pop().expect("split yields at least one part");
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        if !entry.is_table() {
            *entry = toml::Value::Table(toml::Table::new());
        }
        cur = entry.as_table_mut().expect("just made a table");
    }
    cur.insert(leaf.to_string(), value);
}

fn get_path<'a>(table: &'a toml::Table, key: &str) -> Option<&'a toml::Value> {
    let mut parts = key.split('.');
    let mut cur = table.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

fn leaf_paths(table: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in table {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => leaf_paths(t, &path, out),
            _ => out.push(path),
        }
    }
}

fn values_match(a: &toml::Value, b: &toml::Value) -> bool {
    match (a, b) {
        (toml::Value::Integer(x), toml::Value::Float(y))
        | (toml::Value::Float(y), toml::Value::Integer(x)) => (*x as f64) == *y,
        _ => a == b,
    }
}

/// Loads `T` from optional TOML text, then applies `key=value` overrides.
///
/// A key, from the file or an override, is accepted only if it survives a
/// round trip through `T`, which rejects typos instead of silently ignoring them.
pub fn load_with_overrides<T>(text: Option<&str>, overrides: &[String]) -> Result<T, ConfigError>
where
    T: Serialize + DeserializeOwned + Default,
{
    let mut table: toml::Table = match text {
        Some(t) => toml::from_str(t).map_err(|e| ConfigError::Parse(e.to_string()))?,
        None => toml::Table::new(),
    };
    let mut applied = Vec::new();
    for o in overrides {
        let (k, v) = split_override(o)?;
        let value = parse_scalar(v);
        set_path(&mut table, k, value.clone());
        applied.push((k.to_string(), value));
    }
    let mut keys = Vec::new();
    leaf_paths(&table, "", &mut keys);
    let parsed: T = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    let round: toml::Table = toml::Table::try_from(&parsed)
        .map_err(|e| ConfigError::Parse(e.to_string()))?;
    if let Some(k) = keys.into_iter().find(|k| get_path(&round, k).is_none()) {
        return Err(ConfigError::UnknownKey(k));
    }
    for (k, v) in applied {
        match get_path(&round, &k) {
            Some(got) if values_match(got, &v) => {}
            _ => return Err(ConfigError::UnknownKey(k)),
        }
    }
    Ok(parsed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_parameter_table() {
        let c = SimConfig::default();
        assert_eq!(c.global.event_width, 64);
        assert_eq!(c.global.context_width, 938);
        assert_eq!(c.pktgen.header_width, 168);
        assert_eq!(c.pktgen.instr_queue_depth, 8);
        assert_eq!(c.pktgen.prefetch_buffer_len, 64);
        assert_eq!(c.reassembly.buffer_len, 256);
        assert_eq!(c.global.bus_width, 64);
        assert!((c.line_rate_bytes_per_cycle() - 50.0).abs() < 1e-12);
        assert_eq!(c.pktgen.backpressure_threshold(), 6);
        assert_eq!(c.reassembly.temp_ring_chunks(), 1024);
        c.validate().unwrap();
    }

    #[test]
    fn dotted_override_sets_nested_field() {
        let c: SimConfig = load_with_overrides(
            None,
            &[
                "scheduler.event_buffer_depth=128".into(),
                "ple.depth_override=3".into(),
                "global.clock_freq=2.5e8".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.scheduler.event_buffer_depth, 128);
        assert_eq!(c.ple.depth_override, Some(3));
    }

    #[test]
    fn file_then_override() {
        let text = "[global]\nflow_count = 4\n[pktgen]\npreempt_quantum = 2\n";
        let c: SimConfig =
            load_with_overrides(Some(text), &["global.flow_count=8".into()]).unwrap();
        assert_eq!(c.global.flow_count, 8);
        assert_eq!(c.pktgen.preempt_quantum, 2);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = load_with_overrides::<SimConfig>(None, &["scheduler.depth=4".into()]).unwrap_err();
        assert_eq!(err, ConfigError::UnknownKey("scheduler.depth".into()));
    }

    #[test]
    fn unknown_file_key_is_rejected() {
        let err = load_with_overrides::<SimConfig>(Some("[pktgen]\nquantum = 3\n"), &[]).unwrap_err();
        assert_eq!(err, ConfigError::UnknownKey("pktgen.quantum".into()));
    }

    #[test]
    fn non_power_of_two_rejected() {
        let mut c = SimConfig::default();
        c.scheduler.event_buffer_depth = 12;
        assert!(matches!(c.validate(), Err(ConfigError::Invalid(_))));
    }
}
