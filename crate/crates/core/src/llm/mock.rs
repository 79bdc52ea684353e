use std::collections::HashMap;
use std::path::Path;

use regex::Regex;
use serde::Deserialize;

use super::{sha256_hex, Backend, BackendError, CompletionRequest, CompletionResponse};

/// What to do when no fixture entry or rule matches a prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MissPolicy {
    Strict,
    Default(String),
}

#[derive(Debug, Clone)]
pub enum MockRule {
    EchoLastUser,
    Fixed(String),
    /// Prompt lookup: exact prompt text first, then `sha256:<hex>` of the
    /// prompt, then the regex rules in order (the response may reference
    /// capture groups as `$1`, `${name}`).
    Table {
        fixtures: HashMap<String, String>,
        rules: Vec<(Regex, String)>,
        on_miss: MissPolicy,
    },
}

/// Deterministic offline backend: the response is a pure function of the
/// request's last user message.
#[derive(Debug, Clone)]
pub struct MockBackend {
    id: String,
    rule: MockRule,
}

#[derive(Deserialize)]
struct FixtureFile {
    #[serde(default)]
    responses: HashMap<String, String>,
    #[serde(default)]
    rules: Vec<RuleSpec>,
    #[serde(default)]
    default: Option<String>,
}

#[derive(Deserialize)]
struct RuleSpec {
    pattern: String,
    response: String,
}

impl MockBackend {
    pub fn echo() -> Self {
        Self {
            id: "mock:echo".into(),
            rule: MockRule::EchoLastUser,
        }
    }

    pub fn fixed(text: impl Into<String>) -> Self {
        let text = text.into();
        Self {
            id: format!("mock:fixed:{}", &sha256_hex(text.as_bytes())[..12]),
            rule: MockRule::Fixed(text),
        }
    }

    pub fn table(
        fixtures: HashMap<String, String>,
        rules: Vec<(Regex, String)>,
        on_miss: MissPolicy,
    ) -> Self {
        let mut ident: Vec<String> = fixtures.iter().map(|(k, v)| format!("{k}\u{0}{v}")).collect();
        ident.sort();
        ident.extend(rules.iter().map(|(r, v)| format!("{}\u{0}{v}", r.as_str())));
        if let MissPolicy::Default(d) = &on_miss {
            ident.push(d.clone());
        }
        Self {
            id: format!("mock:table:{}", &sha256_hex(ident.join("\u{1}").as_bytes())[..12]),
            rule: MockRule::Table {
                fixtures,
                rules,
                on_miss,
            },
        }
    }

    /// Reads a JSON fixture file:
    /// `{"responses": {prompt | "sha256:<hex>": text}, "rules": [{"pattern", "response"}], "default": text}`.
    /// Without `default`, unmatched prompts are an error.
    pub fn from_fixture_file(path: &Path) -> Result<Self, BackendError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Fixture(format!("{}: {e}", path.display())))?;
        Self::from_fixture_json(&raw).map_err(|e| BackendError::Fixture(format!("{}: {e}", path.display())))
    }

    pub fn from_fixture_json(raw: &str) -> Result<Self, BackendError> {
        let file: FixtureFile =
            serde_json::from_str(raw).map_err(|e| BackendError::Fixture(e.to_string()))?;
        let rules = file
            .rules
            .into_iter()
            .map(|r| {
                Regex::new(&r.pattern)
                    .map(|re| (re, r.response))
                    .map_err(|e| BackendError::Fixture(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let on_miss = file.default.map_or(MissPolicy::Strict, MissPolicy::Default);
        Ok(Self::table(file.responses, rules, on_miss))
    }

    fn respond(&self, prompt: &str) -> Result<String, BackendError> {
        match &self.rule {
            MockRule::EchoLastUser => Ok(prompt.to_owned()),
            MockRule::Fixed(text) => Ok(text.clone()),
            MockRule::Table {
                fixtures,
                rules,
                on_miss,
            } => {
                if let Some(hit) = fixtures.get(prompt) {
                    return Ok(hit.clone());
                }
                let hash = sha256_hex(prompt.as_bytes());
                if let Some(hit) = fixtures.get(&format!("sha256:{hash}")) {
                    return Ok(hit.clone());
                }
                for (re, template) in rules {
                    if let Some(caps) = re.captures(prompt) {
                        let mut out = String::new();
                        caps.expand(template, &mut out);
                        return Ok(out);
                    }
                }
                match on_miss {
                    MissPolicy::Default(text) => Ok(text.clone()),
                    MissPolicy::Strict => Err(BackendError::FixtureMiss { prompt_hash: hash }),
                }
            }
        }
    }
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        request.validate()?;
        let prompt = request.last_user_content().unwrap_or_default();
        Ok(CompletionResponse {
            text: self.respond(prompt)?,
            backend_id: self.id.clone(),
            cached: false,
            retries: 0,
        })
    }
}
