//! Multi-turn grasp refinement sessions.
//!
//! A session is an append-only transcript: the first turn is the user's
//! initial instruction, and every assistant turn carries the pose parsed
//! from its text. Refining never mutates an existing session; it returns
//! a longer copy.

use serde::{Deserialize, Serialize};

use crate::client::{ChatMessage, ChatRequest, ClientError, ImageAttachment, ModelClient, Role};
use crate::parser::{parse_pose, ParsedOutput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed: Option<ParsedOutput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementSession {
    pub session_id: String,
    pub image_id: String,
    pub turns: Vec<Turn>,
    /// Unix seconds.
    pub created_at: u64,
    #[serde(default)]
    pub temperature: f64,
}

impl RefinementSession {
    /// Sends the initial instruction and records the first reply.
    pub fn start(
        client: &dyn ModelClient,
        session_id: impl Into<String>,
        image_id: impl Into<String>,
        image: Vec<u8>,
        instruction: &str,
        created_at: u64,
    ) -> Result<(String, Self), ClientError> {
        let empty = Self {
            session_id: session_id.into(),
            image_id: image_id.into(),
            turns: Vec::new(),
            created_at,
            temperature: 0.0,
        };
        let reply = client.complete(&empty.request(image, instruction)?)?;
        let mut session = empty;
        session.push_exchange(instruction, &reply);
        Ok((reply, session))
    }

    /// Replays the full history plus `message`; on success returns the reply
    /// and the extended session. Failures leave `self` untouched.
    pub fn refine(&self, client: &dyn ModelClient, image: Vec<u8>, message: &str) -> Result<(String, Self), ClientError> {
        if self.turns.is_empty() {
            return Err(ClientError::Contract(format!(
                "session {} has no initial instruction",
                self.session_id
            )));
        }
        let reply = client.complete(&self.request(image, message)?)?;
        let mut next = self.clone();
        next.push_exchange(message, &reply);
        Ok((reply, next))
    }

    /// Chat payload for the history plus a new user message. The image rides
    /// on the first user turn.
    pub fn request(&self, image: Vec<u8>, message: &str) -> Result<ChatRequest, ClientError> {
        let mut image = Some(ImageAttachment::new(image)?);
        let mut messages = Vec::with_capacity(self.turns.len() + 1);
        for turn in &self.turns {
            let mut m = ChatMessage {
                role: turn.role,
                text: turn.text.clone(),
                image: None,
            };
            if turn.role == Role::User {
                m.image = image.take();
            }
            messages.push(m);
        }
        let mut last = ChatMessage::user(message);
        last.image = image.take();
        messages.push(last);
        let mut req = ChatRequest::new(messages).for_sample(self.image_id.clone());
        req.temperature = self.temperature;
        Ok(req)
    }

    fn push_exchange(&mut self, message: &str, reply: &str) {
        self.turns.push(Turn {
            role: Role::User,
            text: message.to_string(),
            parsed: None,
        });
        self.turns.push(Turn {
            role: Role::Assistant,
            text: reply.to_string(),
            parsed: Some(parse_pose(reply)),
        });
    }

    pub fn assistant_turns(&self) -> impl Iterator<Item = &Turn> {
        self.turns.iter().filter(|t| t.role == Role::Assistant)
    }
}
