//! MQTT topic names and wildcard filters.

use super::BusError;

/// Checks a concrete topic name: non-empty, no wildcards, no NUL.
pub fn validate_topic(topic: &str) -> Result<(), BusError> {
    if topic.is_empty() || topic.contains(['+', '#', '\0']) {
        return Err(BusError::InvalidTopic(topic.to_string()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Level {
    Exact(String),
    Single,
    Multi,
}

/// A parsed subscription filter supporting `+` and `#`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicFilter {
    raw: String,
    levels: Vec<Level>,
}

impl TopicFilter {
    pub fn parse(pattern: &str) -> Result<Self, BusError> {
        let invalid = || BusError::InvalidPattern(pattern.to_string());
        if pattern.is_empty() || pattern.contains('\0') {
            return Err(invalid());
        }
        let parts: Vec<&str> = pattern.split('/').collect();
        let mut levels = Vec::with_capacity(parts.len());
        for (i, part) in parts.iter().enumerate() {
            let level = match *part {
                "+" => Level::Single,
                "#" if i == parts.len() - 1 => Level::Multi,
                p if p.contains(['+', '#']) => return Err(invalid()),
                p => Level::Exact(p.to_string()),
            };
            levels.push(level);
        }
        Ok(Self {
            raw: pattern.to_string(),
            levels,
        })
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }

    pub fn matches(&self, topic: &str) -> bool {
        // Wildcards at the first level never match `$`-prefixed system topics.
        if topic.starts_with('$') && !matches!(self.levels.first(), Some(Level::Exact(_))) {
            return false;
        }
        let mut parts = topic.split('/');
        for level in &self.levels {
            match level {
                Level::Multi => return true,
                Level::Single => {
                    if parts.next().is_none() {
                        return false;
                    }
                }
                Level::Exact(want) => match parts.next() {
                    Some(got) if got == want => {}
                    _ => return false,
                },
            }
        }
        parts.next().is_none()
    }
}
