//! The `---` fenced metadata block at the top of `SKILL.md`.
//!
//! Recognized keys are decoded into typed fields. Every other top-level key is
//! kept as its raw source text so that re-serialization reproduces it verbatim.
//! Key order is tracked explicitly and preserved across a round trip.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_yaml::Value;

use super::PackageError;

pub const NAME: &str = "name";
pub const DESCRIPTION: &str = "description";
pub const COMPATIBILITY: &str = "compatibility";
/// Spelling used by the Agent Skills layout. `allowed_tools` is accepted on input.
pub const ALLOWED_TOOLS: &str = "allowed-tools";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum KnownKey {
    Name,
    Description,
    Compatibility,
    AllowedTools,
}

fn known_key(key: &str) -> Option<KnownKey> {
    match key {
        NAME => Some(KnownKey::Name),
        DESCRIPTION => Some(KnownKey::Description),
        COMPATIBILITY => Some(KnownKey::Compatibility),
        "allowed-tools" | "allowed_tools" => Some(KnownKey::AllowedTools),
        _ => None,
    }
}

/// Is `key` one of the metadata fields decoded into a typed value?
pub fn is_known_key(key: &str) -> bool {
    known_key(key).is_some()
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Frontmatter {
    name: String,
    description: String,
    compatibility: Option<String>,
    allowed_tools: Option<Vec<String>>,
    /// Unrecognized keys mapped to their verbatim source entry (key line plus
    /// any continuation lines, without the trailing newline).
    extra: IndexMap<String, String>,
    order: Vec<String>,
}

impl Frontmatter {
    pub fn new(name: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
            order: vec![NAME.to_string(), DESCRIPTION.to_string()],
            ..Self::default()
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn compatibility(&self) -> Option<&str> {
        self.compatibility.as_deref()
    }

    pub fn allowed_tools(&self) -> Option<&[String]> {
        self.allowed_tools.as_deref()
    }

    pub fn extra(&self) -> &IndexMap<String, String> {
        &self.extra
    }

    /// Keys in source order.
    pub fn keys(&self) -> &[String] {
        &self.order
    }

    pub fn has_key(&self, key: &str) -> bool {
        self.order.iter().any(|k| k == key)
    }

    fn ensure_key(&mut self, key: &str) {
        if !self.has_key(key) {
            self.order.push(key.to_string());
        }
    }

    fn allowed_tools_key(&self) -> Option<&String> {
        self.order
            .iter()
            .find(|k| known_key(k) == Some(KnownKey::AllowedTools))
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
        self.ensure_key(NAME);
    }

    pub fn set_description(&mut self, description: impl Into<String>) {
        self.description = description.into();
        self.ensure_key(DESCRIPTION);
    }

    pub fn set_compatibility(&mut self, value: impl Into<String>) {
        self.compatibility = Some(value.into());
        self.ensure_key(COMPATIBILITY);
    }

    pub fn set_allowed_tools(&mut self, tools: Vec<String>) {
        self.allowed_tools = Some(tools);
        if self.allowed_tools_key().is_none() {
            self.order.push(ALLOWED_TOOLS.to_string());
        }
    }

    /// Sets an unrecognized key from a YAML value expression, e.g. `"1.0"` or `"[a, b]"`.
    pub fn set_extra(&mut self, key: &str, value_yaml: &str) -> Result<(), PackageError> {
        if is_known_key(key) {
            return Err(PackageError::MalformedFrontmatter(format!(
                "`{key}` is a recognized key, not an extension"
            )));
        }
        let raw = format!("{key}: {value_yaml}");
        parse_entry(&raw)?;
        self.extra.insert(key.to_string(), raw);
        self.ensure_key(key);
        Ok(())
    }

    /// Sets the value of any present-or-new key from plain text. Recognized
    /// keys get typed assignment; extensions get a quoted scalar when needed.
    pub fn set_value_text(&mut self, key: &str, value: &str) -> Result<(), PackageError> {
        match known_key(key) {
            Some(KnownKey::Name) => self.set_name(value),
            Some(KnownKey::Description) => self.set_description(value),
            Some(KnownKey::Compatibility) => self.set_compatibility(value),
            Some(KnownKey::AllowedTools) => {
                self.set_allowed_tools(value.split_whitespace().map(str::to_string).collect())
            }
            None => self.set_extra(key, &yaml_scalar(value))?,
        }
        Ok(())
    }

    /// Adds `key` with an empty placeholder value, spelled exactly as given.
    pub fn add_placeholder_key(&mut self, key: &str) -> Result<(), PackageError> {
        if self.has_key(key) {
            return Ok(());
        }
        match known_key(key) {
            Some(KnownKey::Name) | Some(KnownKey::Description) => {}
            Some(KnownKey::Compatibility) => self.compatibility = Some(String::new()),
            Some(KnownKey::AllowedTools) => {
                if self.allowed_tools_key().is_some() {
                    return Err(PackageError::MalformedFrontmatter(format!(
                        "`{key}` duplicates an existing allowed-tools key"
                    )));
                }
                self.allowed_tools = Some(Vec::new());
            }
            None => {
                let raw = format!("{key}: \"\"");
                parse_entry(&raw)?;
                self.extra.insert(key.to_string(), raw);
            }
        }
        self.order.push(key.to_string());
        Ok(())
    }

    /// Removes a key and its value. Returns whether it was present.
    pub fn remove_key(&mut self, key: &str) -> bool {
        let Some(pos) = self.order.iter().position(|k| k == key) else {
            return false;
        };
        self.order.remove(pos);
        match known_key(key) {
            Some(KnownKey::Name) => self.name.clear(),
            Some(KnownKey::Description) => self.description.clear(),
            Some(KnownKey::Compatibility) => self.compatibility = None,
            Some(KnownKey::AllowedTools) => self.allowed_tools = None,
            None => {
                self.extra.shift_remove(key);
            }
        }
        true
    }

    /// Renders the block contents (without fences), one entry per key, LF-terminated.
    pub fn to_yaml(&self) -> String {
        let mut out = String::new();
        for key in &self.order {
            match known_key(key) {
                Some(KnownKey::Name) => push_line(&mut out, key, &self.name),
                Some(KnownKey::Description) => push_line(&mut out, key, &self.description),
                Some(KnownKey::Compatibility) => {
                    push_line(&mut out, key, self.compatibility.as_deref().unwrap_or(""))
                }
                Some(KnownKey::AllowedTools) => {
                    let tools = self.allowed_tools.as_deref().unwrap_or(&[]);
                    if tools.is_empty() {
                        out.push_str(&format!("{key}: []\n"));
                    } else {
                        out.push_str(&format!("{key}:\n"));
                        for tool in tools {
                            out.push_str(&format!("  - {}\n", yaml_scalar(tool)));
                        }
                    }
                }
                None => {
                    if let Some(raw) = self.extra.get(key) {
                        out.push_str(raw);
                        out.push('\n');
                    }
                }
            }
        }
        out
    }
}

fn push_line(out: &mut String, key: &str, value: &str) {
    out.push_str(key);
    out.push_str(": ");
    out.push_str(&yaml_scalar(value));
    out.push('\n');
}

/// Emits `value` as a plain YAML scalar when it reads back unchanged, otherwise
/// as a double-quoted scalar (JSON string syntax is valid YAML).
pub fn yaml_scalar(value: &str) -> String {
    // YAML 1.1 readers take these as booleans even though 1.2 does not.
    const AMBIGUOUS: [&str; 8] = ["yes", "no", "on", "off", "y", "n", "true", "false"];
    let plain_ok = !value.is_empty()
        && !AMBIGUOUS.contains(&value.to_ascii_lowercase().as_str())
        && value.trim() == value
        && !value.contains('\n')
        && serde_yaml::from_str::<Value>(&format!("k: {value}"))
            .ok()
            .and_then(|v| v.get("k").cloned())
            == Some(Value::String(value.to_string()));
    if plain_ok {
        value.to_string()
    } else {
        serde_json::to_string(value).expect("string serialization is infallible")
    }
}

fn starts_entry(line: &str) -> bool {
    match line.chars().next() {
        None => false,
        Some(c) => !c.is_whitespace() && c != '#' && c != '-',
    }
}

fn parse_entry(raw: &str) -> Result<(String, Value), PackageError> {
    let value: Value = serde_yaml::from_str(raw)
        .map_err(|e| PackageError::MalformedFrontmatter(format!("entry `{raw}`: {e}")))?;
    let Value::Mapping(map) = value else {
        return Err(PackageError::MalformedFrontmatter(format!(
            "entry `{raw}` is not a key/value pair"
        )));
    };
    if map.len() != 1 {
        return Err(PackageError::MalformedFrontmatter(format!(
            "entry `{raw}` does not hold exactly one key"
        )));
    }
    let (k, v) = map.into_iter().next().expect("length checked");
    let Value::String(key) = k else {
        return Err(PackageError::MalformedFrontmatter(
            "frontmatter keys must be strings".into(),
        ));
    };
    Ok((key, v))
}

fn string_value(key: &str, value: Value) -> Result<String, PackageError> {
    match value {
        Value::Null => Ok(String::new()),
        Value::String(s) => Ok(s),
        Value::Bool(b) => Ok(b.to_string()),
        Value::Number(n) => Ok(n.to_string()),
        _ => Err(PackageError::MalformedFrontmatter(format!(
            "`{key}` must be a scalar"
        ))),
    }
}

/// Parses the text between the fences.
pub fn parse_frontmatter(yaml: &str) -> Result<Frontmatter, PackageError> {
    let root: Value = serde_yaml::from_str(yaml)
        .map_err(|e| PackageError::MalformedFrontmatter(e.to_string()))?;
    let Value::Mapping(root) = root else {
        return Err(PackageError::MalformedFrontmatter(
            "frontmatter root is not a mapping".into(),
        ));
    };

    // Split into top-level entries; comments and blank lines ride along with
    // the entry they follow.
    let mut entries: Vec<Vec<&str>> = Vec::new();
    for line in yaml.lines() {
        if starts_entry(line) {
            entries.push(vec![line]);
        } else if let Some(last) = entries.last_mut() {
            last.push(line);
        }
    }
    if entries.len() != root.len() {
        return Err(PackageError::MalformedFrontmatter(
            "unsupported frontmatter layout (expected one `key: value` entry per top-level line)"
                .into(),
        ));
    }

    let mut fm = Frontmatter::default();
    for lines in entries {
        let end = lines
            .iter()
            .rposition(|l| !l.trim().is_empty())
            .unwrap_or(0);
        let raw = lines[..=end].join("\n");
        let (key, value) = parse_entry(&raw)?;
        if fm.has_key(&key) || (is_known_key(&key) && known_key(&key) == Some(KnownKey::AllowedTools) && fm.allowed_tools_key().is_some()) {
            return Err(PackageError::MalformedFrontmatter(format!(
                "duplicate key `{key}`"
            )));
        }
        match known_key(&key) {
            Some(KnownKey::Name) => fm.name = string_value(&key, value)?,
            Some(KnownKey::Description) => fm.description = string_value(&key, value)?,
            Some(KnownKey::Compatibility) => fm.compatibility = Some(string_value(&key, value)?),
            Some(KnownKey::AllowedTools) => {
                let tools = match value {
                    Value::Null => Vec::new(),
                    Value::String(s) => s.split_whitespace().map(str::to_string).collect(),
                    Value::Sequence(items) => items
                        .into_iter()
                        .map(|item| string_value(&key, item))
                        .collect::<Result<_, _>>()?,
                    _ => {
                        return Err(PackageError::MalformedFrontmatter(format!(
                            "`{key}` must be a list or a space-delimited string"
                        )))
                    }
                };
                fm.allowed_tools = Some(tools);
            }
            None => {
                fm.extra.insert(key.clone(), raw);
            }
        }
        fm.order.push(key);
    }
    Ok(fm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_known_and_extra_keys_in_order() {
        let fm = parse_frontmatter(
            "name: orqa\nmetadata:\n  version: 1\n  owner: ops\ndescription: Answer OR questions\nallowed-tools: Read Grep\n",
        )
        .unwrap();
        assert_eq!(fm.name(), "orqa");
        assert_eq!(fm.description(), "Answer OR questions");
        assert_eq!(fm.keys(), ["name", "metadata", "description", "allowed-tools"]);
        assert_eq!(fm.allowed_tools().unwrap(), ["Read", "Grep"]);
        assert_eq!(fm.extra()["metadata"], "metadata:\n  version: 1\n  owner: ops");
    }

    #[test]
    fn extra_entries_reemit_verbatim() {
        let src = "name: a\ndescription: b\nlicense: 'Apache-2.0'   # quoted on purpose\ntags:\n- x\n- y\n";
        let fm = parse_frontmatter(src).unwrap();
        assert_eq!(fm.to_yaml(), src);
    }

    #[test]
    fn quotes_scalars_that_would_not_read_back() {
        assert_eq!(yaml_scalar("plain words"), "plain words");
        assert_eq!(yaml_scalar("yes"), "\"yes\"");
        assert_eq!(yaml_scalar("a: b"), "\"a: b\"");
        assert_eq!(yaml_scalar(""), "\"\"");
        assert_eq!(yaml_scalar("12"), "\"12\"");
        assert_eq!(yaml_scalar("two\nlines"), "\"two\\nlines\"");
    }

    #[test]
    fn rejects_non_mapping_root() {
        assert!(matches!(
            parse_frontmatter("- a\n- b\n"),
            Err(PackageError::MalformedFrontmatter(_))
        ));
        assert!(matches!(
            parse_frontmatter(""),
            Err(PackageError::MalformedFrontmatter(_))
        ));
    }

    #[test]
    fn rejects_flow_mapping_layout() {
        assert!(parse_frontmatter("{name: a, description: b}\n").is_err());
    }

    #[test]
    fn remove_and_set_track_order() {
        let mut fm = Frontmatter::new("a", "b");
        fm.set_compatibility("python>=3.10");
        fm.set_extra("license", "MIT").unwrap();
        assert_eq!(fm.keys(), ["name", "description", "compatibility", "license"]);
        assert!(fm.remove_key("compatibility"));
        assert!(!fm.remove_key("compatibility"));
        assert_eq!(fm.keys(), ["name", "description", "license"]);
        let back = parse_frontmatter(&fm.to_yaml()).unwrap();
        assert_eq!(back, fm);
    }

    #[test]
    fn multiline_description_normalizes_to_quoted_scalar() {
        let fm = parse_frontmatter("name: a\ndescription: >\n  folded\n  text\n").unwrap();
        assert_eq!(fm.description(), "folded text");
        let again = parse_frontmatter(&fm.to_yaml()).unwrap();
        assert_eq!(again, fm);
    }
}
