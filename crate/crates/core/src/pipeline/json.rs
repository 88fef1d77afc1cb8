//! JSON text with floats printed at 9 significant digits, so outputs are
//! byte-stable across runs.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::Result;

/// Formats a finite float with 9 significant digits; non-finite values
/// become `null`.
pub fn fmt_float(x: f64) -> String {
    if !x.is_finite() {
        return "null".into();
    }
    if x == 0.0 {
        return "0.0".into();
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..9).contains(&exp) {
        let s = format!("{:.*}", (8 - exp).max(0) as usize, x);
        // Rounding can carry into a new digit (9.999999999 -> 10.00000000).
        let digits = s.trim_start_matches('-').replace('.', "");
        if digits.trim_start_matches('0').len() > 9 && exp < 8 {
            return format!("{:.*}", (7 - exp).max(0) as usize, x);
        }
        s
    } else {
        format!("{x:.8e}")
    }
}

fn write_value(out: &mut String, v: &Value, indent: Option<usize>) {
    let nl = |out: &mut String, level: usize| {
        if let Some(step) = indent {
            out.push('\n');
            out.push_str(&" ".repeat(step * level));
        }
    };
    fn go(out: &mut String, v: &Value, indent: Option<usize>, level: usize, nl: &dyn Fn(&mut String, usize)) {
        let sep = if indent.is_some() { ": " } else { ":" };
        match v {
            Value::Number(n) => match (n.as_u64(), n.as_i64()) {
                (Some(u), _) => write!(out, "{u}").unwrap(),
                (_, Some(i)) => write!(out, "{i}").unwrap(),
                _ => out.push_str(&fmt_float(n.as_f64().unwrap_or(f64::NAN))),
            },
            Value::Array(items) if items.is_empty() => out.push_str("[]"),
            Value::Array(items) => {
                out.push('[');
                for (i, x) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    nl(out, level + 1);
                    go(out, x, indent, level + 1, nl);
                }
                nl(out, level);
                out.push(']');
            }
            Value::Object(map) if map.is_empty() => out.push_str("{}"),
            Value::Object(map) => {
                out.push('{');
                for (i, (k, x)) in map.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    nl(out, level + 1);
                    out.push_str(&Value::String(k.clone()).to_string());
                    out.push_str(sep);
                    go(out, x, indent, level + 1, nl);
                }
                nl(out, level);
                out.push('}');
            }
            other => out.push_str(&other.to_string()),
        }
    }
    go(out, v, indent, 0, &nl);
}

/// Single-line form, used for metrics streams.
pub fn to_line<T: Serialize>(value: &T) -> Result<String> {
    let mut out = String::new();
    write_value(&mut out, &serde_json::to_value(value)?, None);
    Ok(out)
}

/// Indented form with a trailing newline.
pub fn to_pretty<T: Serialize>(value: &T) -> Result<String> {
    let mut out = String::new();
    write_value(&mut out, &serde_json::to_value(value)?, Some(2));
    out.push('\n');
    Ok(out)
}

pub fn write_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, to_pretty(value)?)?;
    Ok(())
}
