use std::sync::Arc;

use super::{build_prompt, parse_response, AggregatedContext, CallInfo, OperatorError, UpdateOperator, UpdateResult, SYSTEM_PROMPT};
use crate::config::LlmConfig;
use crate::llm::{ChatClient, ChatMessage, ChatRequest, LlmError, TokenUsage};
use crate::opinion::{AgentState, OpinionScale};

/// Update operator backed by a chat model.
pub struct LlmOperator {
    client: Arc<ChatClient>,
    scale: OpinionScale,
    model: String,
    temperature: f64,
    max_output_tokens: u32,
    max_parse_retries: usize,
    update_stubbornness: bool,
    concurrency: usize,
}

impl LlmOperator {
    pub fn new(client: Arc<ChatClient>, cfg: &LlmConfig, scale: OpinionScale) -> Self {
        Self {
            client,
            scale,
            model: cfg.model.clone(),
            temperature: cfg.temperature,
            max_output_tokens: cfg.max_output_tokens,
            max_parse_retries: cfg.max_parse_retries,
            update_stubbornness: cfg.update_stubbornness,
            concurrency: cfg.max_concurrency.max(1),
        }
    }

    pub fn client(&self) -> &ChatClient {
        &self.client
    }
}

impl UpdateOperator for LlmOperator {
    fn name(&self) -> &str {
        "llm"
    }

    fn update(&self, agent: &AgentState, ctx: &AggregatedContext, call: CallInfo) -> Result<UpdateResult, OperatorError> {
        let request = ChatRequest {
            model: self.model.clone(),
            messages: vec![ChatMessage::system(SYSTEM_PROMPT), ChatMessage::user(build_prompt(agent, ctx, &self.scale))],
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
            seed: Some(call.seed),
        };
        let mut usage = TokenUsage::default();
        let mut last_err = String::new();
        for attempt in 0..=self.max_parse_retries {
            let resp = match self.client.chat_complete(&request, call.step) {
                Ok(r) => r,
                Err(LlmError::Exhausted { attempts, last }) => {
                    return Err(OperatorError::Transient {
                        msg: format!("agent {}: {attempts} attempts failed, last: {last}", agent.id),
                        usage,
                    });
                }
                Err(e) => return Err(OperatorError::Fatal(e.to_string())),
            };
            usage += resp.usage;
            match parse_response(&resp.text, &self.scale) {
                Ok(mut r) => {
                    if !self.update_stubbornness {
                        r.new_stubbornness = None;
                    }
                    r.usage = Some(usage);
                    return Ok(r);
                }
                Err(e) => {
                    log::warn!("agent {}: unparseable answer on attempt {} ({e})", agent.id, attempt + 1);
                    last_err = e.to_string();
                }
            }
        }
        Err(OperatorError::Transient { msg: format!("agent {}: {last_err}", agent.id), usage })
    }

    fn max_concurrency(&self) -> Option<usize> {
        Some(self.concurrency)
    }
}
