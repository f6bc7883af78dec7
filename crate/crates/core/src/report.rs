//! Versioned JSON report envelope shared by all subcommands.

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: &str = "1.0";

#[derive(Debug, Serialize)]
pub struct Report<'a, C: Serialize, R: Serialize> {
    pub schema_version: &'static str,
    pub command: &'a str,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generated_at_unix: Option<u64>,
    pub config: &'a C,
    pub result: &'a R,
}

/// Keys each command's `result` object must carry.
fn required_result_keys(command: &str) -> Option<&'static [&'static str]> {
    Some(match command {
        "fit" => &["data", "nuisance", "overlap", "search", "value"],
        "bootstrap-ci" => &["data", "nuisance", "overlap", "search", "value", "bootstrap"],
        "sweep" => &["data", "nuisance", "overlap", "search", "value", "sweep"],
        "simulate" => &["summary"],
        "simulate-data" => &["dataset", "n"],
        "rate" => &["rate"],
        _ => return None,
    })
}

/// Structural check of a serialized report.
pub fn validate(report: &Value) -> Result<()> {
    let bad = |m: String| Err(Error::InvalidData(format!("report schema: {m}")));
    let obj = match report.as_object() {
        Some(o) => o,
        None => return bad("top level is not an object".into()),
    };
    match obj.get("schema_version").and_then(Value::as_str) {
        Some(SCHEMA_VERSION) => {}
        other => return bad(format!("schema_version {other:?}")),
    }
    if !obj.get("seed").is_some_and(Value::is_u64) {
        return bad("missing seed".into());
    }
    if !obj.get("config").is_some_and(Value::is_object) {
        return bad("missing config".into());
    }
    let command = obj.get("command").and_then(Value::as_str).unwrap_or("");
    let keys = match required_result_keys(command) {
        Some(k) => k,
        None => return bad(format!("unknown command `{command}`")),
    };
    let result = match obj.get("result").and_then(Value::as_object) {
        Some(r) => r,
        None => return bad("missing result".into()),
    };
    for k in keys {
        if !result.contains_key(*k) {
            return bad(format!("result lacks `{k}`"));
        }
    }
    if let Some(b) = result.get("bootstrap") {
        check_intervals(b)?;
    }
    if let Some(reports) = result.get("sweep").and_then(|s| s.get("reports")).and_then(Value::as_array) {
        for r in reports {
            check_intervals(r)?;
        }
    }
    Ok(())
}

fn check_intervals(bootstrap: &Value) -> Result<()> {
    let intervals = bootstrap
        .get("intervals")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::InvalidData("report schema: bootstrap lacks intervals".into()))?;
    for iv in intervals {
        let lo = iv.get("lo").and_then(Value::as_f64);
        let hi = iv.get("hi").and_then(Value::as_f64);
        match (lo, hi) {
            (Some(lo), Some(hi)) if lo <= hi => {}
            _ => return Err(Error::InvalidData(format!("report schema: bad interval {iv}"))),
        }
    }
    Ok(())
}

/// Serialize, validate and return pretty JSON.
pub fn render<C: Serialize, R: Serialize>(report: &Report<'_, C, R>) -> Result<String> {
    let value = serde_json::to_value(report)?;
    validate(&value)?;
    let mut s = serde_json::to_string_pretty(&value)?;
    s.push('\n');
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn accepts_well_formed_and_rejects_broken() {
        let good = json!({
            "schema_version": SCHEMA_VERSION, "command": "rate", "seed": 3,
            "config": {}, "result": {"rate": {}}
        });
        assert!(validate(&good).is_ok());
        let mut no_seed = good.clone();
        no_seed.as_object_mut().unwrap().remove("seed");
        assert!(validate(&no_seed).is_err());
        let mut wrong = good.clone();
        wrong["schema_version"] = json!("0.1");
        assert!(validate(&wrong).is_err());
        let mut missing = good.clone();
        missing["command"] = json!("fit");
        assert!(validate(&missing).is_err());
    }

    #[test]
    fn checks_interval_order() {
        let r = json!({
            "schema_version": SCHEMA_VERSION, "command": "bootstrap-ci", "seed": 0, "config": {},
            "result": {"data": {}, "nuisance": {}, "overlap": {}, "search": {}, "value": {},
                       "bootstrap": {"intervals": [{"lo": 0.3, "hi": 0.1}]}}
        });
        assert!(validate(&r).is_err());
    }

    #[test]
    fn timestamp_is_optional() {
        let cfg = json!({"a": 1});
        let res = json!({"rate": {"slope": -0.3}});
        let r = Report {
            schema_version: SCHEMA_VERSION,
            command: "rate",
            seed: 1,
            generated_at_unix: None,
            config: &cfg,
            result: &res,
        };
        let s = render(&r).unwrap();
        assert!(!s.contains("generated_at"));
    }
}
