//! Thin async client for the play server: health, offline synthesis and
//! live play sessions.

use condsynth_core::protocol::{AudioFrame, HealthResponse, ParamMessage, ServerText, StatusMessage, SynthRequest};
use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("http: {0}")]
    Http(#[from] reqwest::Error),
    #[error("websocket: {0}")]
    WebSocket(#[from] tokio_tungstenite::tungstenite::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("server replied {status}: {body}")]
    Status { status: u16, body: String },
    #[error("protocol: {0}")]
    Protocol(#[from] condsynth_core::Error),
    #[error("base url must start with http:// ({0})")]
    BadUrl(String),
}

pub type Result<T, E = ClientError> = std::result::Result<T, E>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` like `http://127.0.0.1:8080`.
    pub fn new(base: &str) -> Result<Self> {
        if !base.starts_with("http://") {
            return Err(ClientError::BadUrl(base.to_string()));
        }
        Ok(Client {
            base: base.trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        })
    }

    async fn checked(resp: reqwest::Response) -> Result<Vec<u8>> {
        let status = resp.status();
        let body = resp.bytes().await?.to_vec();
        if !status.is_success() {
            return Err(ClientError::Status {
                status: status.as_u16(),
                body: String::from_utf8_lossy(&body).into_owned(),
            });
        }
        Ok(body)
    }

    pub async fn health(&self) -> Result<HealthResponse> {
        let resp = self.http.get(format!("{}/health", self.base)).send().await?;
        Ok(serde_json::from_slice(&Self::checked(resp).await?)?)
    }

    /// Renders a schedule on the server; returns the WAV file bytes.
    pub async fn synth(&self, request: &SynthRequest) -> Result<Vec<u8>> {
        let resp = self
            .http
            .post(format!("{}/synth", self.base))
            .header("content-type", "application/json")
            .body(serde_json::to_vec(request)?)
            .send()
            .await?;
        Self::checked(resp).await
    }

    pub async fn play(&self) -> Result<PlaySession> {
        let url = format!("ws://{}/play", &self.base["http://".len()..]);
        let (ws, _) = tokio_tungstenite::connect_async(url).await?;
        Ok(PlaySession { ws })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Incoming {
    Frame(AudioFrame),
    Status(StatusMessage),
    /// The server rejected a message; the session continues.
    Error(String),
}

pub struct PlaySession {
    ws: WebSocketStream<MaybeTlsStream<TcpStream>>,
}

impl PlaySession {
    pub async fn send_params(&mut self, msg: &ParamMessage) -> Result<()> {
        self.send_raw(serde_json::to_string(msg)?).await
    }

    /// Sends an arbitrary text frame, valid or not.
    pub async fn send_raw(&mut self, text: String) -> Result<()> {
        self.ws.send(Message::Text(text.into())).await?;
        Ok(())
    }

    /// Next frame, status or error reply; `None` once the server closes.
    pub async fn next(&mut self) -> Option<Result<Incoming>> {
        loop {
            let msg = match self.ws.next().await? {
                Ok(m) => m,
                Err(e) => return Some(Err(e.into())),
            };
            return Some(match msg {
                Message::Binary(b) => AudioFrame::from_bytes(&b).map(Incoming::Frame).map_err(Into::into),
                Message::Text(t) => serde_json::from_str::<ServerText>(&t)
                    .map(|m| match m {
                        ServerText::Status(s) => Incoming::Status(s),
                        ServerText::Error(e) => Incoming::Error(e.error),
                    })
                    .map_err(Into::into),
                Message::Close(_) => return None,
                _ => continue,
            });
        }
    }

    pub async fn close(mut self) -> Result<()> {
        self.ws.close(None).await?;
        Ok(())
    }
}
