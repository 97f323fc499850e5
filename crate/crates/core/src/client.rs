//! Chat-style model interface shared by the evaluation harness, template
//! authoring and refinement sessions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest image accepted for upload (20 MiB).
pub const MAX_IMAGE_BYTES: usize = 20 * 1024 * 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint returned status {status} after {attempts} attempt(s): {body}")]
    Status { status: u16, attempts: u32, body: String },
    #[error("image of {size} bytes exceeds the {limit}-byte limit")]
    ImageTooLarge { size: usize, limit: usize },
    #[error("unexpected response: {0}")]
    InvalidResponse(String),
    #[error("{0}")]
    Contract(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageAttachment {
    pub media_type: String,
    pub data: Vec<u8>,
}

impl ImageAttachment {
    /// Wraps encoded bytes, sniffing PNG and JPEG signatures.
    pub fn new(data: Vec<u8>) -> Result<Self, ClientError> {
        if data.len() > MAX_IMAGE_BYTES {
            return Err(ClientError::ImageTooLarge {
                size: data.len(),
                limit: MAX_IMAGE_BYTES,
            });
        }
        let media_type = if data.starts_with(b"\x89PNG\r\n\x1a\n") {
            "image/png"
        } else if data.starts_with(&[0xFF, 0xD8, 0xFF]) {
            "image/jpeg"
        } else {
            return Err(ClientError::Contract("image is neither PNG nor JPEG".into()));
        };
        Ok(Self {
            media_type: media_type.to_string(),
            data,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatMessage {
    pub role: Role,
    pub text: String,
    pub image: Option<ImageAttachment>,
}

impl ChatMessage {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            text: text.into(),
            image: None,
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            text: text.into(),
            image: None,
        }
    }

    pub fn with_image(mut self, image: ImageAttachment) -> Self {
        self.image = Some(image);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    /// Identifies the dataset sample being queried; only test doubles look
    /// at it.
    pub sample_id: Option<String>,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
}

impl ChatRequest {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        Self {
            sample_id: None,
            messages,
            temperature: 0.0,
            max_tokens: None,
        }
    }

    pub fn for_sample(mut self, id: impl Into<String>) -> Self {
        self.sample_id = Some(id.into());
        self
    }

    pub fn assistant_turns(&self) -> usize {
        self.messages.iter().filter(|m| m.role == Role::Assistant).count()
    }
}

pub trait ModelClient: Send + Sync {
    /// Returns the assistant reply text verbatim.
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError>;

    fn model_id(&self) -> String;

    /// Whether `complete` may be called from several threads at once.
    fn supports_concurrency(&self) -> bool {
        true
    }
}

impl<T: ModelClient + ?Sized> ModelClient for std::sync::Arc<T> {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        (**self).complete(request)
    }

    fn model_id(&self) -> String {
        (**self).model_id()
    }

    fn supports_concurrency(&self) -> bool {
        (**self).supports_concurrency()
    }
}

/// Single-turn prediction: the instruction with the image attached.
pub fn predict(
    client: &dyn ModelClient,
    sample_id: Option<&str>,
    image: Vec<u8>,
    instruction: &str,
) -> Result<String, ClientError> {
    let msg = ChatMessage::user(instruction).with_image(ImageAttachment::new(image)?);
    let mut req = ChatRequest::new(vec![msg]);
    req.sample_id = sample_id.map(str::to_string);
    client.complete(&req)
}
