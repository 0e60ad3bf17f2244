//! Topic names, topic filters and level-wise wildcard matching.

/// A topic name is non-empty and carries no wildcard or NUL characters.
pub fn valid_topic_name(name: &str) -> bool {
    !name.is_empty() && !name.contains(['+', '#', '\0'])
}

/// `+` must occupy a whole level; `#` must occupy the whole final level.
pub fn valid_filter(filter: &str) -> bool {
    if filter.is_empty() || filter.contains('\0') {
        return false;
    }
    let mut levels = filter.split('/').peekable();
    while let Some(level) = levels.next() {
        if level.contains('#') && (level != "#" || levels.peek().is_some()) {
            return false;
        }
        if level.contains('+') && level != "+" {
            return false;
        }
    }
    true
}

/// Level-wise match: `+` matches exactly one level, `#` matches the
/// remaining levels (including none, so `a/#` matches `a`).
pub fn match_topic(filter: &str, name: &str) -> bool {
    let mut names = name.split('/');
    for f in filter.split('/') {
        if f == "#" {
            return true;
        }
        match names.next() {
            Some(_) if f == "+" => {}
            Some(n) if n == f => {}
            _ => return false,
        }
    }
    names.next().is_none()
}
