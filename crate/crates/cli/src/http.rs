use serde_json::Value;

/// A non-2xx answer or a transport failure (`status` is `None`).
#[derive(Debug)]
pub struct ApiFailure {
    pub status: Option<u16>,
    pub code: String,
    pub message: String,
}

impl std::fmt::Display for ApiFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.status {
            Some(s) => write!(f, "{} ({s}): {}", self.code, self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

pub struct Api {
    agent: ureq::Agent,
    base: String,
    token: Option<String>,
}

impl Api {
    pub fn new(base: &str, token: Option<String>) -> Self {
        Self {
            agent: ureq::Agent::config_builder().http_status_as_error(false).build().into(),
            base: base.trim_end_matches('/').to_string(),
            token,
        }
    }

    fn finish(resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Result<String, ApiFailure> {
        let mut resp = resp.map_err(|e| ApiFailure {
            status: None,
            code: "transport".into(),
            message: e.to_string(),
        })?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().unwrap_or_default();
        if (200..300).contains(&status) {
            return Ok(text);
        }
        let body: Value = serde_json::from_str(&text).unwrap_or(Value::Null);
        Err(ApiFailure {
            status: Some(status),
            code: body["error"].as_str().unwrap_or("http_error").to_string(),
            message: body["message"].as_str().map_or(text.clone(), str::to_string),
        })
    }

    pub fn get_text(&self, path: &str) -> Result<String, ApiFailure> {
        let mut req = self.agent.get(format!("{}{path}", self.base));
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        Self::finish(req.call())
    }

    pub fn get(&self, path: &str) -> Result<Value, ApiFailure> {
        let text = self.get_text(path)?;
        serde_json::from_str(&text).map_err(|e| ApiFailure {
            status: None,
            code: "bad_json".into(),
            message: e.to_string(),
        })
    }

    pub fn post(&self, path: &str, body: &Value) -> Result<Value, ApiFailure> {
        let mut req = self.agent.post(format!("{}{path}", self.base));
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let text = Self::finish(req.send_json(body))?;
        serde_json::from_str(&text).map_err(|e| ApiFailure {
            status: None,
            code: "bad_json".into(),
            message: e.to_string(),
        })
    }
}
