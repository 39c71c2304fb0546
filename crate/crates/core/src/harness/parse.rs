//! Reading actions out of free-form model replies. Every function here is
//! total: any input yields a result.

use regex::Regex;

/// Extract code from a reply. The first fenced block tagged `language` (or
/// untagged) wins; failing that the first fenced block of any tag; failing
/// that the whole trimmed reply.
pub fn parse_code_block(raw: &str, language: &str) -> String {
    let blocks = fenced_blocks(raw);
    let matching = blocks
        .iter()
        .find(|(tag, _)| tag.is_empty() || tag.eq_ignore_ascii_case(language));
    match matching.or(blocks.first()) {
        Some((_, body)) => body.trim().to_string(),
        None => raw.trim().to_string(),
    }
}

/// (tag, body) for each ``` fence, in order. An unclosed final fence runs to
/// the end of the text.
fn fenced_blocks(raw: &str) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut rest = raw;
    while let Some(start) = rest.find("```") {
        let after = &rest[start + 3..];
        let (inner, next) = match after.find("```") {
            Some(end) => (&after[..end], &after[end + 3..]),
            None => (after, ""),
        };
        out.push(split_tag(inner));
        rest = next;
    }
    out
}

fn split_tag(inner: &str) -> (String, String) {
    match inner.split_once('\n') {
        Some((first, body)) => {
            let first = first.trim();
            if first.is_empty() || is_tag(first) {
                (first.to_string(), body.to_string())
            } else {
                (String::new(), inner.to_string())
            }
        }
        // one-line block: ```sql SELECT 1```
        None => {
            let t = inner.trim_start();
            match t.split_once(char::is_whitespace) {
                Some((tag, body)) if is_tag(tag) && is_known_language(tag) => (tag.to_string(), body.to_string()),
                _ => (String::new(), inner.to_string()),
            }
        }
    }
}

fn is_tag(s: &str) -> bool {
    !s.is_empty() && s.len() <= 20 && s.chars().all(|c| c.is_ascii_alphanumeric() || "+-_.#".contains(c))
}

fn is_known_language(s: &str) -> bool {
    const LANGS: [&str; 9] = ["sql", "mysql", "bash", "sh", "shell", "python", "python3", "py", "console"];
    LANGS.iter().any(|l| l.eq_ignore_ascii_case(s))
}

/// What a ReAct-style reply asks for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReactAction {
    Execute(String),
    /// `submit` or `submit[answer]`.
    Submit(Option<String>),
    /// No readable `Action` line.
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReactStep {
    pub thought: String,
    pub action: ReactAction,
}

/// Read the first `Action N: execute[...]` / `Action N: submit` line and the
/// thought before it.
pub fn parse_react(raw: &str) -> ReactStep {
    let action_re = Regex::new(r"(?im)^[ \t]*\**Action(?:[ \t]*\d+)?\**[ \t]*:[ \t]*").unwrap();
    let thought_re = Regex::new(r"(?im)^[ \t]*\**Thought(?:[ \t]*\d+)?\**[ \t]*:[ \t]*").unwrap();
    let Some(m) = action_re.find(raw) else {
        return ReactStep {
            thought: raw.trim().to_string(),
            action: ReactAction::Invalid,
        };
    };
    let before = &raw[..m.start()];
    let thought = match thought_re.find_iter(before).last() {
        Some(t) => before[t.end()..].trim().to_string(),
        None => before.trim().to_string(),
    };
    let body = &raw[m.end()..];
    ReactStep {
        thought,
        action: read_action(body),
    }
}

fn read_action(body: &str) -> ReactAction {
    let lower = body.to_ascii_lowercase();
    let (name, args) = if lower.starts_with("execute") {
        ("execute", &body["execute".len()..])
    } else if lower.starts_with("submit") {
        ("submit", &body["submit".len()..])
    } else {
        return ReactAction::Invalid;
    };
    let args = args.trim_start_matches([' ', '\t']);
    let payload = if args.starts_with('[') { Some(bracketed(args)) } else { None };
    match name {
        "execute" => match payload {
            Some(code) if !code.trim().is_empty() => ReactAction::Execute(code.trim().to_string()),
            _ => ReactAction::Invalid,
        },
        _ => {
            let p = payload
                .map(|p| p.trim().to_string())
                .or_else(|| {
                    let line = args.lines().next().unwrap_or("").trim();
                    (!line.is_empty()).then(|| line.to_string())
                })
                .filter(|p| !p.is_empty());
            ReactAction::Submit(p)
        }
    }
}

/// Contents of the bracket group opening at `s[0]`. Nested brackets are
/// balanced; an unbalanced group runs to the last `]` in the text, or to
/// its end.
fn bracketed(s: &str) -> String {
    let mut depth = 0usize;
    for (i, c) in s.char_indices() {
        match c {
            '[' => depth += 1,
            ']' => {
                depth -= 1;
                if depth == 0 {
                    return s[1..i].to_string();
                }
            }
            _ => {}
        }
    }
    match s.rfind(']') {
        Some(i) if i > 0 => s[1..i].to_string(),
        _ => s[1..].to_string(),
    }
}

/// Numbered items (`1. ...`, `2) ...`) of a plan, in order.
pub fn parse_plan(raw: &str) -> Vec<String> {
    let item = Regex::new(r"^\s*(?:Step\s*)?(\d+)\s*[.):]\s*(.+?)\s*$").unwrap();
    raw.lines()
        .filter_map(|l| item.captures(l).map(|c| c[2].to_string()))
        .collect()
}

/// `submit` or `submit <payload>` as a whole reply.
pub fn parse_submit(code: &str) -> Option<Option<String>> {
    let t = code.trim();
    let word = t.split_whitespace().next()?;
    if !word.eq_ignore_ascii_case("submit") {
        return None;
    }
    let rest = t[word.len()..].trim();
    Some((!rest.is_empty()).then(|| rest.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn code_blocks() {
        assert_eq!(parse_code_block("```sql SELECT 1```", "sql"), "SELECT 1");
        assert_eq!(parse_code_block("ls -la", "bash"), "ls -la");
        assert_eq!(parse_code_block("```bash\nls\n```\ntext\n```bash\npwd\n```", "bash"), "ls");
        assert_eq!(parse_code_block("```python\nx=1\n```\n```sql\nSELECT 2\n```", "sql"), "SELECT 2");
        assert_eq!(parse_code_block("```\nSELECT 3\n```", "sql"), "SELECT 3");
        assert_eq!(parse_code_block("```python\nx = 1\n```", "sql"), "x = 1");
        assert_eq!(parse_code_block("Here:\n```sql\nSELECT 4", "sql"), "SELECT 4");
        assert_eq!(parse_code_block("```echo hi```", "bash"), "echo hi");
    }

    #[test]
    fn react() {
        let s = parse_react("Thought 1: I should look.\nAction 1: execute[SHOW TABLES]");
        assert_eq!(s.thought, "I should look.");
        assert_eq!(s.action, ReactAction::Execute("SHOW TABLES".into()));
        assert_eq!(parse_react("Action 2: submit").action, ReactAction::Submit(None));
        assert_eq!(
            parse_react("Action 3: submit[ctf{x}]").action,
            ReactAction::Submit(Some("ctf{x}".into()))
        );
        assert_eq!(parse_react("I think the answer is 4.").action, ReactAction::Invalid);
        assert_eq!(
            parse_react("Action: execute[print([1, [2]])]\nObservation: [1, [2]]").action,
            ReactAction::Execute("print([1, [2]])".into())
        );
        assert_eq!(parse_react("Action 1: execute[]").action, ReactAction::Invalid);
        assert_eq!(parse_react("Action 1: run ls").action, ReactAction::Invalid);
        assert_eq!(
            parse_react("Thought 1: a\nAction 1: execute[ls]\nThought 2: b\nAction 2: submit").action,
            ReactAction::Execute("ls".into())
        );
    }

    #[test]
    fn plans() {
        let p = parse_plan("Plan:\n1. Look at tables.\n2) Inspect one\nnot an item\nStep 3: Query it.");
        assert_eq!(p, vec!["Look at tables.", "Inspect one", "Query it."]);
        assert!(parse_plan("no plan here").is_empty());
    }

    #[test]
    fn submits() {
        assert_eq!(parse_submit("submit"), Some(None));
        assert_eq!(parse_submit(" Submit ctf{a}\n"), Some(Some("ctf{a}".into())));
        assert_eq!(parse_submit("submitted"), None);
        assert_eq!(parse_submit(""), None);
    }
}
