use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use gee_core::embed::{Embedder, HashedNgramEmbedder, RemoteEmbedder};
use gee_core::llm::{
    Backend, LlmClient, MockBackend, RemoteBackend, RemoteConfig, ResponseCache, ENV_API_KEY,
};

use crate::config::Endpoints;

/// In-flight cap for remote calls, and so the default worker width.
pub const REMOTE_IN_FLIGHT: usize = 8;

fn remote_config(endpoints: &Endpoints) -> Result<RemoteConfig> {
    let Some(base) = endpoints.api_base.clone() else {
        bail!("remote backend needs an endpoint: set GEE_API_BASE or api_base");
    };
    let mut cfg = RemoteConfig::new(base);
    cfg.api_key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
    cfg.max_in_flight = REMOTE_IN_FLIGHT;
    Ok(cfg)
}

/// Parses `mock:echo`, `mock:fixed:<text>`, `mock:<fixture.json>` or
/// `remote[:<model>]`. Returns the backend, its model name, and whether it is remote.
pub fn parse_backend(
    spec: &str,
    model: Option<&str>,
    endpoints: &Endpoints,
) -> Result<(Arc<dyn Backend>, String, bool)> {
    if let Some(rest) = spec.strip_prefix("mock:") {
        let backend = if rest == "echo" {
            MockBackend::echo()
        } else if let Some(text) = rest.strip_prefix("fixed:") {
            MockBackend::fixed(text)
        } else {
            MockBackend::from_fixture_file(Path::new(rest))
                .with_context(|| format!("loading mock fixture `{rest}`"))?
        };
        let model = model.unwrap_or("mock").to_owned();
        return Ok((Arc::new(backend), model, false));
    }
    if spec == "remote" || spec.starts_with("remote:") {
        let model = model
            .map(str::to_owned)
            .or_else(|| spec.strip_prefix("remote:").map(str::to_owned))
            .filter(|m| !m.is_empty());
        let Some(model) = model else {
            bail!("remote backend `{spec}` needs a model: use remote:<model> or --*-model");
        };
        let backend = RemoteBackend::new(remote_config(endpoints)?);
        return Ok((Arc::new(backend), model, true));
    }
    bail!("unrecognized backend `{spec}` (expected mock:echo, mock:fixed:<text>, mock:<fixture.json> or remote:<model>)")
}

pub fn client(spec: &str, model: Option<&str>, endpoints: &Endpoints) -> Result<(LlmClient, bool)> {
    let (backend, model, remote) = parse_backend(spec, model, endpoints)?;
    let mut client = LlmClient::new(backend, model);
    if let Some(dir) = &endpoints.cache_dir {
        client = client.with_cache(Arc::new(ResponseCache::new(dir)));
    }
    Ok((client, remote))
}

/// `hashed` or `remote:<model>`.
pub fn embedder(spec: &str, endpoints: &Endpoints) -> Result<(Box<dyn Embedder>, bool)> {
    if spec == "hashed" {
        return Ok((Box::new(HashedNgramEmbedder::default()), false));
    }
    if let Some(model) = spec.strip_prefix("remote:").filter(|m| !m.is_empty()) {
        return Ok((
            Box::new(RemoteEmbedder::new(remote_config(endpoints)?, model)),
            true,
        ));
    }
    bail!("unrecognized embedder `{spec}` (expected hashed or remote:<model>)")
}
